use super::Var;
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn softmax_rows<T: Scalar>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - m).exp();
            total += e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e /= total;
        }
    }
    out
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        Ok(self.graph.push("sum", &[self], Tensor::scalar(x.sum()), move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.item()))]
        }))
    }

    pub fn mean(self) -> Result<Var<'g, T>> {
        let n = T::of_usize(self.value().numel());
        Ok(self.sum()?.scale(T::one() / n))
    }

    /// Sum over `axis`, removing it (a rank-1 input becomes `[1]`).
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return invalid("sum_axis", format!("axis {axis} on {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out = vec![T::zero(); outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for d in 0..dim {
                let src = &xd[(o * dim + d) * inner..(o * dim + d + 1) * inner];
                for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.graph.push("sum_axis", &[self], Tensor::from_parts(out_shape, out), move |g, _| {
            let gd = g.data();
            let mut full = Vec::with_capacity(outer * dim * inner);
            for o in 0..outer {
                for _ in 0..dim {
                    full.extend_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), full))]
        }))
    }

    pub fn mean_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let n = T::of_usize(self.dim(axis));
        Ok(self.sum_axis(axis)?.scale(T::one() / n))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let y = Tensor::from_parts(x.shape().to_vec(), softmax_rows(x.data(), n));
        let saved = y.clone();
        Ok(self.graph.push("softmax", &[self], y, move |g, _| {
            let mut out = Vec::with_capacity(g.numel());
            for (gr, yr) in g.data().chunks(n).zip(saved.data().chunks(n)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                out.extend(gr.iter().zip(yr).map(|(&a, &b)| b * (a - dot)));
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), out))]
        }))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let n = *x.shape().last().unwrap();
        let mut y = Vec::with_capacity(x.numel());
        for row in x.data().chunks(n) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            y.extend(row.iter().map(|&v| v - lse));
        }
        let y = Tensor::from_parts(x.shape().to_vec(), y);
        let saved = y.clone();
        Ok(self.graph.push("log_softmax", &[self], y, move |g, _| {
            let mut out = Vec::with_capacity(g.numel());
            for (gr, yr) in g.data().chunks(n).zip(saved.data().chunks(n)) {
                let total: T = gr.iter().copied().sum();
                out.extend(gr.iter().zip(yr).map(|(&a, &b)| a - b.exp() * total));
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), out))]
        }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`
    /// (both shaped like that axis).
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [d] || bv.shape() != [d] {
            return shape_err(
                "layer_norm",
                format!("normalized dim {d} vs gamma {:?} beta {:?}", gv.shape(), bv.shape()),
            );
        }
        let eps = T::c(eps);
        let rows = x.numel() / d;
        let mut xhat = Vec::with_capacity(x.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut y = Vec::with_capacity(x.numel());
        let inv_d = T::one() / T::of_usize(d);
        for row in x.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (k, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                y.push(h * gv.data()[k] + bv.data()[k]);
            }
        }
        let shape = x.shape().to_vec();
        let out = Tensor::from_parts(shape.clone(), y);
        Ok(self.graph.push("layer_norm", &[self, gamma, beta], out, move |g, needs| {
            let gd = g.data();
            let gamma = gv.data();
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let mut dx = if needs[0] { Vec::with_capacity(gd.len()) } else { Vec::new() };
            for r in 0..rows {
                let gr = &gd[r * d..(r + 1) * d];
                let hr = &xhat[r * d..(r + 1) * d];
                let mut mean_dh = T::zero();
                let mut mean_dh_h = T::zero();
                for k in 0..d {
                    dgamma[k] += gr[k] * hr[k];
                    dbeta[k] += gr[k];
                    let dh = gr[k] * gamma[k];
                    mean_dh += dh;
                    mean_dh_h += dh * hr[k];
                }
                if needs[0] {
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for k in 0..d {
                        dx.push(inv_std[r] * (gr[k] * gamma[k] - mean_dh - hr[k] * mean_dh_h));
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::from_parts(shape.clone(), dx)),
                Some(Tensor::from_parts(vec![d], dgamma)),
                Some(Tensor::from_parts(vec![d], dbeta)),
            ]
        }))
    }
}
