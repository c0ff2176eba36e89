use super::Var;
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `[rows, k] x [k, n]` into a fresh buffer.
pub(crate) fn matmul_plain<T: Scalar>(a: &[T], b: &[T], rows: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); rows * n];
    T::gemm(rows, k, n, T::one(), a, k, 1, b, n, 1, T::zero(), &mut c, n, 1);
    c
}

impl<'g, T: Scalar> Var<'g, T> {
    /// `a[..., k] x b[k, n] -> [..., n]`; leading axes of `a` are flattened
    /// into rows.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let k = sb[0];
        let n = sb[1];
        let rows = a.numel() / k;
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        let out = Tensor::from_parts(out_shape, matmul_plain(a.data(), b.data(), rows, k, n));
        Ok(self.graph.push("matmul", &[self, other], out, move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                // g [rows, n] x b^T [n, k]
                let mut da = vec![T::zero(); rows * k];
                T::gemm(rows, n, k, T::one(), gd, n, 1, b.data(), 1, n, T::zero(), &mut da, k, 1);
                Tensor::from_parts(sa.clone(), da)
            });
            let gb = needs[1].then(|| {
                // a^T [k, rows] x g [rows, n]
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, rows, n, T::one(), a.data(), 1, k, gd, n, 1, T::zero(), &mut db, n, 1);
                Tensor::from_parts(sb.clone(), db)
            });
            vec![ga, gb]
        }))
    }

    /// Batched product of `[b, m, k]` with `[b, k, n]`, or with `[b, n, k]`
    /// read transposed when `transpose_rhs` is set.
    pub fn bmm(self, other: Var<'g, T>, transpose_rhs: bool) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = other.value();
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_rhs { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return shape_err("bmm", format!("{sa:?} x {sb:?} (transpose_rhs={transpose_rhs})"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_rhs { sb[1] } else { sb[2] };
        // strides of the logical k x n rhs
        let (rsb, csb) = if transpose_rhs { (1, k) } else { (n, 1) };
        let mut c = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &a.data()[i * m * k..(i + 1) * m * k],
                k,
                1,
                &b.data()[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut c[i * m * n..(i + 1) * m * n],
                n,
                1,
            );
        }
        let out = Tensor::from_parts(vec![batch, m, n], c);
        Ok(self.graph.push("bmm", &[self, other], out, move |g, needs| {
            let gd = g.data();
            let ga = needs[0].then(|| {
                // dA = dC x B^T where B is the logical k x n rhs
                let mut da = vec![T::zero(); batch * m * k];
                for i in 0..batch {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &gd[i * m * n..(i + 1) * m * n],
                        n,
                        1,
                        &b.data()[i * k * n..(i + 1) * k * n],
                        csb,
                        rsb,
                        T::zero(),
                        &mut da[i * m * k..(i + 1) * m * k],
                        k,
                        1,
                    );
                }
                Tensor::from_parts(sa.clone(), da)
            });
            let gb = needs[1].then(|| {
                let mut db = vec![T::zero(); batch * k * n];
                for i in 0..batch {
                    let ai = &a.data()[i * m * k..(i + 1) * m * k];
                    let gi = &gd[i * m * n..(i + 1) * m * n];
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if transpose_rhs {
                        // stored [n, k]: dB^T = dC^T x A
                        T::gemm(n, m, k, T::one(), gi, 1, n, ai, k, 1, T::zero(), dbi, k, 1);
                    } else {
                        // stored [k, n]: dB = A^T x dC
                        T::gemm(k, m, n, T::one(), ai, 1, k, gi, n, 1, T::zero(), dbi, n, 1);
                    }
                }
                Tensor::from_parts(sb.clone(), db)
            });
            vec![ga, gb]
        }))
    }

    /// `x W + b` with `W` stored `[in, out]`.
    pub fn linear(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let y = self.matmul(weight)?;
        match bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}
