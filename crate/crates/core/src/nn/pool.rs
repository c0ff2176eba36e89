use crate::autograd::Var;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    /// 2x2 max pooling with stride 2. The gradient of each window goes to
    /// its first maximal element in row-major order.
    pub fn max_pool2d(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let n = shape.len();
        if n < 2 || !shape[n - 2].is_multiple_of(2) || !shape[n - 1].is_multiple_of(2) {
            return shape_err("max_pool2d", format!("spatial dims of {shape:?} must be even"));
        }
        let (h, w) = (shape[n - 2], shape[n - 1]);
        let (oh, ow) = (h / 2, w / 2);
        let planes = x.numel() / (h * w);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut arg = Vec::with_capacity(planes * oh * ow);
        let xd = x.data();
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let cands = [
                        base + 2 * i * w + 2 * j,
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let mut best = cands[0];
                    for &c in &cands[1..] {
                        if xd[c] > xd[best] {
                            best = c;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape[n - 2] = oh;
        out_shape[n - 1] = ow;
        Ok(self.graph().push("max_pool2d", &[self], Tensor::from_parts(out_shape, out), move |g, _| {
            let mut dx = vec![T::zero(); shape.iter().product()];
            for (&a, &gv) in arg.iter().zip(g.data()) {
                dx[a] += gv;
            }
            vec![Some(Tensor::from_parts(shape.clone(), dx))]
        }))
    }
}
