use super::Var;
use crate::error::{invalid, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<'g, T: Scalar> Var<'g, T> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self.graph.push("reshape", &[self], out, move |g, _| vec![Some(g.reshape(in_shape.clone()).unwrap())]))
    }

    pub fn permute(self, dims: &[usize]) -> Result<Var<'g, T>> {
        let out = self.value().permute(dims)?;
        let mut inverse = vec![0; dims.len()];
        for (i, &d) in dims.iter().enumerate() {
            inverse[d] = i;
        }
        Ok(self.graph.push("permute", &[self], out, move |g, _| vec![Some(g.permute(&inverse).unwrap())]))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = x.narrow(axis, start, len)?;
        let in_shape = x.shape().to_vec();
        Ok(self.graph.push("narrow", &[self], out, move |g, _| {
            let outer: usize = in_shape[..axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let dim = in_shape[axis];
            let mut full = vec![T::zero(); outer * dim * inner];
            let gd = g.data();
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                full[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), full))]
        }))
    }

    /// Splits `axis` into `groups` equal consecutive chunks.
    pub fn split(self, axis: usize, groups: usize) -> Result<Vec<Var<'g, T>>> {
        let shape = self.shape();
        if axis >= shape.len() || groups == 0 || !shape[axis].is_multiple_of(groups) {
            return invalid("split", format!("{groups} groups on axis {axis} of {shape:?}"));
        }
        let size = shape[axis] / groups;
        (0..groups).map(|i| self.narrow(axis, i * size, size)).collect()
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let Some(first) = parts.first() else {
            return invalid("concat", "no inputs");
        };
        let values: Vec<Tensor<T>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().collect();
        let out = Tensor::concat(&refs, axis)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Ok(first.graph.push("concat", parts, out, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let part = need.then(|| g.narrow(axis, start, len).unwrap());
                    start += len;
                    part
                })
                .collect()
        }))
    }

    /// Rows of the leading axis picked by `indices` (repeats allowed).
    pub fn index_select(self, indices: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if indices.is_empty() || indices.iter().any(|&i| i >= shape[0]) {
            return invalid("index_select", format!("indices {indices:?} into {} rows", shape[0]));
        }
        let row: usize = shape[1..].iter().product();
        let mut out = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            out.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let indices = indices.to_vec();
        Ok(self.graph.push("index_select", &[self], Tensor::from_parts(out_shape, out), move |g, _| {
            let mut full = vec![T::zero(); shape.iter().product()];
            for (k, &i) in indices.iter().enumerate() {
                for (d, &s) in full[i * row..(i + 1) * row].iter_mut().zip(&g.data()[k * row..(k + 1) * row]) {
                    *d += s;
                }
            }
            vec![Some(Tensor::from_parts(shape.clone(), full))]
        }))
    }
}
