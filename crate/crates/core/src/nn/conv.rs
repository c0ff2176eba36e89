//! Convolutions lowered to GEMM through im2col.

use crate::autograd::Var;
use crate::error::{invalid, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Geometry of a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvParams {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvParams {
    /// Stride-1 convolution padded to preserve spatial size.
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        Self { in_ch, out_ch, kernel, stride: 1, padding: kernel / 2, groups: 1, has_bias: true }
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || !self.in_ch.is_multiple_of(self.groups) || !self.out_ch.is_multiple_of(self.groups) {
            return invalid(
                "conv",
                format!("channels {}->{} not divisible by {} groups", self.in_ch, self.out_ch, self.groups),
            );
        }
        if self.kernel == 0 || self.stride == 0 {
            return invalid("conv", "kernel and stride must be positive");
        }
        Ok(())
    }

    pub fn out_size(&self, size: usize) -> usize {
        (size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch / self.groups, self.kernel, self.kernel]
    }

    pub fn num_params(&self) -> usize {
        let w: usize = self.weight_shape().iter().product();
        w + if self.has_bias { self.out_ch } else { 0 }
    }

    /// Multiply-accumulates for one image of `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        (ho * wo) as u64 * self.out_ch as u64 * (self.in_ch / self.groups * self.kernel * self.kernel) as u64
    }
}

struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

/// One image `[cin, h, w]` into `[cin*k*k, ho*wo]`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::zero() } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let plane = g.ho * g.wo;
    for c in 0..g.cin {
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => shape_err(op, format!("expected [B,C,H,W], got {shape:?}")),
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    /// Grouped 2-D convolution. `weight` is `[out, in/groups, k, k]`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, p: ConvParams) -> Result<Var<'g, T>> {
        p.validate()?;
        let x = self.value();
        let wt = weight.value();
        let [batch, cin, h, w] = dims4("conv2d", x.shape())?;
        if cin != p.in_ch {
            return shape_err("conv2d", format!("input has {cin} channels, conv expects {}", p.in_ch));
        }
        if wt.shape() != p.weight_shape() {
            return shape_err("conv2d", format!("weight {:?} vs {:?}", wt.shape(), p.weight_shape()));
        }
        if h + 2 * p.padding < p.kernel || w + 2 * p.padding < p.kernel {
            return shape_err("conv2d", format!("input {h}x{w} smaller than kernel {}", p.kernel));
        }
        let geo =
            Geometry { cin, h, w, k: p.kernel, stride: p.stride, pad: p.padding, ho: p.out_size(h), wo: p.out_size(w) };
        let plane = geo.ho * geo.wo;
        let groups = p.groups;
        let cout = p.out_ch;
        let cin_g = cin / groups;
        let cout_g = cout / groups;
        let kdim = cin_g * p.kernel * p.kernel;
        let col_len = cin * p.kernel * p.kernel * plane;
        let bias_value = bias.map(|b| b.value());

        let mut cols_all = vec![T::zero(); batch * col_len];
        let mut out = vec![T::zero(); batch * cout * plane];
        for b in 0..batch {
            let cols = &mut cols_all[b * col_len..(b + 1) * col_len];
            im2col(&x.data()[b * cin * h * w..(b + 1) * cin * h * w], &geo, cols);
            let ob = &mut out[b * cout * plane..(b + 1) * cout * plane];
            if let Some(bv) = &bias_value {
                for (co, chunk) in ob.chunks_mut(plane).enumerate() {
                    chunk.fill(bv.data()[co]);
                }
            }
            let beta = if bias_value.is_some() { T::one() } else { T::zero() };
            for gi in 0..groups {
                T::gemm(
                    cout_g,
                    kdim,
                    plane,
                    T::one(),
                    &wt.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim],
                    kdim,
                    1,
                    &cols[gi * kdim * plane..(gi + 1) * kdim * plane],
                    plane,
                    1,
                    beta,
                    &mut ob[gi * cout_g * plane..(gi + 1) * cout_g * plane],
                    plane,
                    1,
                );
            }
        }
        let out = Tensor::from_parts(vec![batch, cout, geo.ho, geo.wo], out);
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let in_shape = x.shape().to_vec();
        let w_shape = wt.shape().to_vec();
        Ok(self.graph().push("conv2d", &inputs, out, move |g, needs| {
            let gd = g.data();
            let mut dw = vec![T::zero(); wt.numel()];
            let mut dx = if needs[0] { vec![T::zero(); batch * cin * h * w] } else { Vec::new() };
            let mut dcols = vec![T::zero(); if needs[0] { col_len } else { 0 }];
            for b in 0..batch {
                let gb = &gd[b * cout * plane..(b + 1) * cout * plane];
                let cols = &cols_all[b * col_len..(b + 1) * col_len];
                for gi in 0..groups {
                    let gy = &gb[gi * cout_g * plane..(gi + 1) * cout_g * plane];
                    if needs[1] {
                        // dW_g += dY_g x cols_g^T
                        T::gemm(
                            cout_g,
                            plane,
                            kdim,
                            T::one(),
                            gy,
                            plane,
                            1,
                            &cols[gi * kdim * plane..(gi + 1) * kdim * plane],
                            1,
                            plane,
                            T::one(),
                            &mut dw[gi * cout_g * kdim..(gi + 1) * cout_g * kdim],
                            kdim,
                            1,
                        );
                    }
                    if needs[0] {
                        // dcols_g = W_g^T x dY_g
                        T::gemm(
                            kdim,
                            cout_g,
                            plane,
                            T::one(),
                            &wt.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim],
                            1,
                            kdim,
                            gy,
                            plane,
                            1,
                            T::zero(),
                            &mut dcols[gi * kdim * plane..(gi + 1) * kdim * plane],
                            plane,
                            1,
                        );
                    }
                }
                if needs[0] {
                    col2im(&dcols, &geo, &mut dx[b * cin * h * w..(b + 1) * cin * h * w]);
                }
            }
            let mut grads = vec![
                needs[0].then(|| Tensor::from_parts(in_shape.clone(), dx)),
                needs[1].then(|| Tensor::from_parts(w_shape.clone(), dw)),
            ];
            if needs.len() > 2 {
                let mut db = vec![T::zero(); cout];
                for gb in gd.chunks(cout * plane) {
                    for (co, chunk) in gb.chunks(plane).enumerate() {
                        db[co] += chunk.iter().copied().sum::<T>();
                    }
                }
                grads.push(Some(Tensor::from_parts(vec![cout], db)));
            }
            grads
        }))
    }

    /// Transposed convolution with kernel 2 and stride 2, exactly doubling
    /// the spatial size. `weight` is `[in, out, 2, 2]`.
    pub fn conv_transpose2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, p: ConvParams) -> Result<Var<'g, T>> {
        if p.kernel != 2 || p.stride != 2 || p.padding != 0 || p.groups != 1 {
            return invalid("conv_transpose2d", format!("only kernel 2 / stride 2 / ungrouped supported, got {p:?}"));
        }
        let x = self.value();
        let wt = weight.value();
        let [batch, cin, h, w] = dims4("conv_transpose2d", x.shape())?;
        let cout = p.out_ch;
        if cin != p.in_ch || wt.shape() != [cin, cout, 2, 2] {
            return shape_err(
                "conv_transpose2d",
                format!("input {:?} weight {:?} for {cin}->{cout}", x.shape(), wt.shape()),
            );
        }
        let hw = h * w;
        let c4 = cout * 4;
        let (ho, wo) = (2 * h, 2 * w);
        let bias_value = bias.map(|b| b.value());
        let mut out = vec![T::zero(); batch * cout * ho * wo];
        let mut tmp = vec![T::zero(); c4 * hw];
        for b in 0..batch {
            let xb = &x.data()[b * cin * hw..(b + 1) * cin * hw];
            // tmp [cout*4, hw] = W^T [cout*4, cin] x X [cin, hw]
            T::gemm(c4, cin, hw, T::one(), wt.data(), 1, c4, xb, hw, 1, T::zero(), &mut tmp, hw, 1);
            let ob = &mut out[b * cout * ho * wo..(b + 1) * cout * ho * wo];
            for co in 0..cout {
                let bias = bias_value.as_ref().map_or(T::zero(), |bv| bv.data()[co]);
                for di in 0..2 {
                    for dj in 0..2 {
                        let src = &tmp[(co * 4 + di * 2 + dj) * hw..(co * 4 + di * 2 + dj + 1) * hw];
                        for i in 0..h {
                            for j in 0..w {
                                ob[co * ho * wo + (2 * i + di) * wo + 2 * j + dj] = src[i * w + j] + bias;
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![batch, cout, ho, wo], out);
        let mut inputs = vec![self, weight];
        inputs.extend(bias);
        let in_shape = x.shape().to_vec();
        Ok(self.graph().push("conv_transpose2d", &inputs, out, move |g, needs| {
            let gd = g.data();
            let mut dx = vec![T::zero(); if needs[0] { batch * cin * hw } else { 0 }];
            let mut dw = vec![T::zero(); cin * c4];
            let mut db = vec![T::zero(); cout];
            let mut gy = vec![T::zero(); c4 * hw];
            for b in 0..batch {
                let gb = &gd[b * cout * ho * wo..(b + 1) * cout * ho * wo];
                for co in 0..cout {
                    for di in 0..2 {
                        for dj in 0..2 {
                            let dst = &mut gy[(co * 4 + di * 2 + dj) * hw..(co * 4 + di * 2 + dj + 1) * hw];
                            for i in 0..h {
                                for j in 0..w {
                                    let v = gb[co * ho * wo + (2 * i + di) * wo + 2 * j + dj];
                                    dst[i * w + j] = v;
                                    db[co] += v;
                                }
                            }
                        }
                    }
                }
                let xb = &x.data()[b * cin * hw..(b + 1) * cin * hw];
                if needs[0] {
                    T::gemm(
                        cin,
                        c4,
                        hw,
                        T::one(),
                        wt.data(),
                        c4,
                        1,
                        &gy,
                        hw,
                        1,
                        T::zero(),
                        &mut dx[b * cin * hw..(b + 1) * cin * hw],
                        hw,
                        1,
                    );
                }
                if needs[1] {
                    T::gemm(cin, hw, c4, T::one(), xb, hw, 1, &gy, 1, hw, T::one(), &mut dw, c4, 1);
                }
            }
            let mut grads = vec![
                needs[0].then(|| Tensor::from_parts(in_shape.clone(), dx)),
                needs[1].then(|| Tensor::from_parts(vec![cin, cout, 2, 2], dw)),
            ];
            if needs.len() > 2 {
                grads.push(Some(Tensor::from_parts(vec![cout], db)));
            }
            grads
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;

    #[test]
    fn identity_1x1() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn([1, 3, 2, 2], |i| i as f32));
        let w = g.constant(Tensor::from_fn([3, 3, 1, 1], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let y = x.conv2d(w, None, ConvParams::same(3, 3, 1).bias(false)).unwrap();
        assert_eq!(y.value(), x.value());
    }

    #[test]
    fn ones_3x3_center_is_nine() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones([1, 1, 3, 3]));
        let w = g.constant(Tensor::ones([1, 1, 3, 3]));
        let y = x.conv2d(w, None, ConvParams::same(1, 1, 3).bias(false)).unwrap().value();
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
        assert_eq!(y.at(&[0, 0, 0, 0]), 4.0);
    }

    #[test]
    fn channel_mismatch() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones([1, 2, 3, 3]));
        let w = g.constant(Tensor::ones([1, 1, 3, 3]));
        assert!(x.conv2d(w, None, ConvParams::same(1, 1, 3).bias(false)).is_err());
        assert!(ConvParams::same(6, 4, 3).groups(4).validate().is_err());
    }

    #[test]
    fn deconv_single_pixel() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full([1, 1, 1, 1], 2.5));
        let w = g.constant(Tensor::ones([1, 1, 2, 2]));
        let p = ConvParams { in_ch: 1, out_ch: 1, kernel: 2, stride: 2, padding: 0, groups: 1, has_bias: false };
        let y = x.conv_transpose2d(w, None, p).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn deconv_halves_channels() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::ones([2, 8, 3, 5]));
        let w = g.constant(Tensor::ones([8, 4, 2, 2]));
        let p = ConvParams { in_ch: 8, out_ch: 4, kernel: 2, stride: 2, padding: 0, groups: 1, has_bias: false };
        assert_eq!(x.conv_transpose2d(w, None, p).unwrap().shape(), vec![2, 4, 6, 10]);
        let bad = ConvParams { kernel: 3, ..p };
        assert!(x.conv_transpose2d(w, None, bad).is_err());
    }

    #[test]
    fn param_counts() {
        assert_eq!(ConvParams::same(768, 768, 3).num_params(), 5_309_184);
        assert_eq!(ConvParams::same(768, 768, 3).groups(3).num_params(), 1_770_240);
    }
}
