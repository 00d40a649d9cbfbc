//! Dense row-major `f64` tensors and the numeric kernels shared by the
//! tape and the inference paths.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::shape("from_rows", "no rows"))?
            .as_ref()
            .len();
        let mut data = Vec::with_capacity(rows.len() * first);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != first {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} columns, expected {first}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::matrix(rows.len(), first, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a matrix; vectors count as one row.
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            self.shape[0]
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::shape("select_rows", "empty index list"));
        }
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= self.rows() {
                return Err(Error::shape(
                    "select_rows",
                    format!("row {i} out of range for {} rows", self.rows()),
                ));
            }
            data.extend_from_slice(self.row(i));
        }
        Self::matrix(indices.len(), c, data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.as_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::matrix(n, m, out)
    }

    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::shape(op, format!("expected a matrix, got shape {other:?}"))),
        }
    }

    /// Standard matrix product `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.as_matrix("matmul")?;
        let (k2, n) = other.as_matrix("matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {m}x{k} by {k2}x{n}"),
            ));
        }
        let mut out = vec![0.0; m * n];
        // i-k-j order keeps the inner loop contiguous in both operands.
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::matrix(m, n, out)
    }

    /// Elementwise binary op with numpy-style broadcasting.
    pub fn zip_broadcast(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Ok(Self {
                shape: self.shape.clone(),
                data,
            });
        }
        let shape = broadcast_shape(&self.shape, &other.shape)
            .ok_or_else(|| Error::shape(op, format!("cannot broadcast {:?} with {:?}", self.shape, other.shape)))?;
        let sa = broadcast_strides(&self.shape, &shape);
        let sb = broadcast_strides(&other.shape, &shape);
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut idx = vec![0usize; shape.len()];
        for _ in 0..numel {
            let ia: usize = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
            let ib: usize = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
            data.push(f(self.data[ia], other.data[ib]));
            increment(&mut idx, &shape);
        }
        Ok(Self { shape, data })
    }

    /// Sums a broadcast result back down to `target` shape.
    pub fn reduce_to(&self, target: &[usize]) -> Result<Self> {
        if self.shape == target {
            return Ok(self.clone());
        }
        let shape = broadcast_shape(target, &self.shape)
            .filter(|s| s.as_slice() == self.shape.as_slice())
            .ok_or_else(|| Error::shape("reduce_to", format!("{:?} does not broadcast to {:?}", target, self.shape)))?;
        let strides = broadcast_strides(target, &shape);
        let mut out = vec![0.0; target.iter().product()];
        let mut idx = vec![0usize; shape.len()];
        for &v in &self.data {
            let i: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out[i] += v;
            increment(&mut idx, &shape);
        }
        Self::new(target.to_vec(), out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum along `axis`, keeping the reduced dimension with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} out of range for {:?}", self.shape)));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let len = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += self.data[base + i];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        Self::new(shape, out)
    }

    /// Squared Euclidean distances between the rows of two matrices.
    pub fn sq_dist(&self, other: &Tensor) -> Result<Self> {
        let (m, d) = self.as_matrix("sq_dist")?;
        let (n, d2) = other.as_matrix("sq_dist")?;
        if d != d2 {
            return Err(Error::shape("sq_dist", format!("row widths differ: {d} vs {d2}")));
        }
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let a = self.row(i);
            for j in 0..n {
                out.push(sq_distance(a, other.row(j)));
            }
        }
        Self::matrix(m, n, out)
    }
}

pub fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for k in 0..rank {
        let da = if k + a.len() >= rank { a[k + a.len() - rank] } else { 1 };
        let db = if k + b.len() >= rank { b[k + b.len() - rank] } else { 1 };
        out[k] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid over `target`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let offset = target.len() - shape.len();
    let mut strides = vec![0; target.len()];
    let mut acc = 1;
    for k in (0..shape.len()).rev() {
        strides[k + offset] = if shape[k] == 1 { 0 } else { acc };
        acc *= shape[k];
    }
    strides
}

fn increment(idx: &mut [usize], shape: &[usize]) {
    for k in (0..shape.len()).rev() {
        idx[k] += 1;
        if idx[k] < shape[k] {
            return;
        }
        idx[k] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let i = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[[2.0, 3.0], [4.0, 5.0]]).unwrap();
        assert_eq!(i.matmul(&b).unwrap(), b);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[[3.0], [4.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::Shape { .. })));
    }

    #[test]
    fn broadcast_row_and_reduce_back() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        let b = Tensor::from_rows(&[[10.0, 20.0]]).unwrap();
        let c = a.zip_broadcast(&b, "add", |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 13.0, 24.0, 15.0, 26.0]);
        let back = c.reduce_to(&[1, 2]).unwrap();
        assert_eq!(back.data(), &[39.0, 72.0]);
        let s = Tensor::scalar(2.0);
        assert_eq!(a.zip_broadcast(&s, "mul", |x, y| x * y).unwrap().data()[5], 12.0);
        assert!(a.zip_broadcast(&Tensor::zeros(&[2, 2]), "add", |x, y| x + y).is_err());
    }

    #[test]
    fn sum_axis_keeps_dim() {
        let a = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let r = a.sum_axis(1).unwrap();
        assert_eq!(r.shape(), &[2, 1]);
        assert_eq!(r.data(), &[6.0, 15.0]);
        assert_eq!(a.sum_axis(0).unwrap().data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let t = a.transpose().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.get(2, 1), 6.0);
        assert_eq!(t.transpose().unwrap(), a);
    }
}
