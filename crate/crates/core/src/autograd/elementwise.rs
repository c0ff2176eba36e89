use super::Var;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{numel, reduce_to_shape, strides, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let lead = out.len() - shape.len();
    let st = strides(shape);
    (0..out.len()).map(|i| if i < lead || shape[i - lead] == 1 { 0 } else { st[i - lead] }).collect()
}

/// Trailing-dimension broadcasting combine.
pub(crate) fn broadcast_zip<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return a.zip_map(b, f);
    }
    let Some(out_shape) = broadcast_shape(sa, sb) else {
        return shape_err(op, format!("cannot broadcast {sa:?} with {sb:?}"));
    };
    let n = numel(&out_shape);
    let (da, db) = (a.data(), b.data());
    let mut out = Vec::with_capacity(n);
    if out_shape == sa && sa.ends_with(sb) {
        let m = db.len();
        for chunk in da.chunks(m) {
            out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
        }
    } else if out_shape == sb && sb.ends_with(sa) {
        let m = da.len();
        for chunk in db.chunks(m) {
            out.extend(da.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
    } else {
        let stra = broadcast_strides(sa, &out_shape);
        let strb = broadcast_strides(sb, &out_shape);
        let rank = out_shape.len();
        let mut idx = vec![0usize; rank];
        let (mut oa, mut ob) = (0usize, 0usize);
        for _ in 0..n {
            out.push(f(da[oa], db[ob]));
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                oa += stra[ax];
                ob += strb[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                oa -= stra[ax] * out_shape[ax];
                ob -= strb[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let xf = x.to_f64().unwrap();
    T::c(xf * gelu_cdf(xf))
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let xf = x.to_f64().unwrap();
    let pdf = (-0.5 * xf * xf).exp() / (2.0 * std::f64::consts::PI).sqrt();
    T::c(gelu_cdf(xf) + xf * pdf)
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus_scalar<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

// Broadcasting ops are fallible, so they return Result and cannot be the std operator traits.
#[allow(clippy::should_implement_trait)]
impl<'g, T: Scalar> Var<'g, T> {
    pub fn binary(self, op: BinaryOp, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = other.value();
        let out = match op {
            BinaryOp::Add => broadcast_zip(op.name(), &a, &b, |x, y| x + y)?,
            BinaryOp::Sub => broadcast_zip(op.name(), &a, &b, |x, y| x - y)?,
            BinaryOp::Mul => broadcast_zip(op.name(), &a, &b, |x, y| x * y)?,
            BinaryOp::Div => broadcast_zip(op.name(), &a, &b, |x, y| x / y)?,
        };
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let saved_out = if op == BinaryOp::Div { Some(out.clone()) } else { None };
        Ok(self.graph.push(op.name(), &[self, other], out, move |g, needs| {
            let ga = needs[0].then(|| {
                let full = match op {
                    BinaryOp::Add | BinaryOp::Sub => g.clone(),
                    BinaryOp::Mul => broadcast_zip("mul", g, &b, |x, y| x * y).unwrap(),
                    BinaryOp::Div => broadcast_zip("div", g, &b, |x, y| x / y).unwrap(),
                };
                reduce_to_shape(&full, &sa)
            });
            let gb = needs[1].then(|| {
                let full = match op {
                    BinaryOp::Add => g.clone(),
                    BinaryOp::Sub => g.map(|x| -x),
                    BinaryOp::Mul => broadcast_zip("mul", g, &a, |x, y| x * y).unwrap(),
                    BinaryOp::Div => {
                        let q = g.zip_map(saved_out.as_ref().unwrap(), |x, y| -x * y).unwrap();
                        broadcast_zip("div", &q, &b, |x, y| x / y).unwrap()
                    }
                };
                reduce_to_shape(&full, &sb)
            });
            vec![ga, gb]
        }))
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Add, other)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Sub, other)
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Mul, other)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryOp::Div, other)
    }

    /// Pointwise map with derivative `df(x, y)` evaluated from input and output.
    fn unary(self, op: &'static str, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'g, T> {
        let x = self.value();
        let y = x.map(f);
        let saved_y = y.clone();
        self.graph.push(op, &[self], y, move |g, _| {
            let data = g
                .data()
                .iter()
                .zip(x.data().iter().zip(saved_y.data()))
                .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
                .collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        })
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary("neg", |x| -x, |_, _| -T::one())
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        self.unary("scale", move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        self.unary("add_scalar", move |x| x + s, |_, _| T::one())
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary("exp", |x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary("ln", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary("sqrt", |x| x.sqrt(), |_, y| T::c(0.5) / y)
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary("square", |x| x * x, |x, _| x + x)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary("relu", |x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(self) -> Var<'g, T> {
        self.unary("gelu", gelu_scalar, |x, _| gelu_grad(x))
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary("sigmoid", sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(self) -> Var<'g, T> {
        self.unary("softplus", softplus_scalar, |x, _| sigmoid_scalar(x))
    }
}
