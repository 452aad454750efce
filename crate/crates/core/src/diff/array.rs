//! Dense row-major `f64` arrays and the broadcasting kernels the tape uses.

use crate::error::{invalid, Result};

/// Dense n-dimensional array of `f64`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return invalid(format!(
                "shape {shape:?} holds {n} elements but data has {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    /// Panics if the shape and data disagree; for internal callers that
    /// construct both together.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut a = Self::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element array.
    pub fn as_scalar(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Element `(i, j)` of a rank-2 array.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row `i` of a rank-2 array.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return invalid(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|x| x.is_nan())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Plain (non-broadcast) matrix product of two rank-2 arrays.
    pub fn matmul(&self, other: &Array) -> Result<Array> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return invalid(format!("matmul of {:?} and {:?}", self.shape, other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out);
        Ok(Array::from_parts(vec![m, n], out))
    }

    pub fn transpose(&self) -> Array {
        transpose_last2(self)
    }
}

/// Output shape of numpy-style (right-aligned) broadcasting.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() {
            1
        } else {
            a[i - (rank - a.len())]
        };
        let db = if i < rank - b.len() {
            1
        } else {
            b[i - (rank - b.len())]
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out` (zero on
/// broadcast axes).
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Views `out` as rows along its last axis. Returns, for an operand of
/// `shape`, the start of each row in the operand and the stride along it.
fn row_starts(shape: &[usize], out: &[usize]) -> (Vec<usize>, usize) {
    let strides = aligned_strides(shape, out);
    let Some((&inner_stride, outer_strides)) = strides.split_last() else {
        return (vec![0], 0);
    };
    let outer = &out[..out.len() - 1];
    let rows: usize = outer.iter().product();
    let mut starts = Vec::with_capacity(rows);
    let mut counter = vec![0usize; outer.len()];
    let mut offset = 0usize;
    for _ in 0..rows {
        starts.push(offset);
        for axis in (0..outer.len()).rev() {
            counter[axis] += 1;
            offset += outer_strides[axis];
            if counter[axis] < outer[axis] {
                break;
            }
            offset -= outer_strides[axis] * counter[axis];
            counter[axis] = 0;
        }
    }
    (starts, inner_stride)
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    let trimmed: Vec<usize> = short.iter().copied().skip_while(|&d| d == 1).collect();
    trimmed.len() <= long.len() && long[long.len() - trimmed.len()..] == trimmed[..]
}

/// Elementwise binary map with broadcasting. Caller guarantees `out` is
/// the broadcast shape of both operands.
pub(crate) fn zip_broadcast(
    a: &Array,
    b: &Array,
    out: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Array {
    let n: usize = out.iter().product();
    let data: Vec<f64> = if a.shape == b.shape {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    } else if b.data.len() == 1 {
        let y = b.data[0];
        a.data.iter().map(|&x| f(x, y)).collect()
    } else if a.data.len() == 1 {
        let x = a.data[0];
        b.data.iter().map(|&y| f(x, y)).collect()
    } else if a.data.len() == n && is_suffix(&b.shape, out) {
        let m = b.data.len();
        a.data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[i % m]))
            .collect()
    } else if b.data.len() == n && is_suffix(&a.shape, out) {
        let m = a.data.len();
        b.data
            .iter()
            .enumerate()
            .map(|(i, &y)| f(a.data[i % m], y))
            .collect()
    } else {
        let inner = out.last().copied().unwrap_or(1);
        let (ra, sa) = row_starts(&a.shape, out);
        let (rb, sb) = row_starts(&b.shape, out);
        let mut data = Vec::with_capacity(n);
        for (&oa, &ob) in ra.iter().zip(&rb) {
            data.extend((0..inner).map(|k| f(a.data[oa + k * sa], b.data[ob + k * sb])));
        }
        data
    };
    Array::from_parts(out.to_vec(), data)
}

pub(crate) fn broadcast_to(a: &Array, out: &[usize]) -> Array {
    if a.shape == out {
        return a.clone();
    }
    let n: usize = out.iter().product();
    let data = if a.data.len() == 1 {
        vec![a.data[0]; n]
    } else if is_suffix(&a.shape, out) {
        let m = a.data.len();
        (0..n).map(|i| a.data[i % m]).collect()
    } else {
        let inner = out.last().copied().unwrap_or(1);
        let (rows, stride) = row_starts(&a.shape, out);
        let mut data = Vec::with_capacity(n);
        for &o in &rows {
            data.extend((0..inner).map(|k| a.data[o + k * stride]));
        }
        data
    };
    Array::from_parts(out.to_vec(), data)
}

/// Sum `a` down to `target`, the adjoint of [`broadcast_to`].
pub(crate) fn sum_to(a: &Array, target: &[usize]) -> Array {
    if a.shape == target {
        return a.clone();
    }
    let m: usize = target.iter().product();
    let mut acc = vec![0.0; m];
    if m == 1 {
        acc[0] = a.data.iter().sum();
    } else if is_suffix(target, &a.shape) {
        for (i, &x) in a.data.iter().enumerate() {
            acc[i % m] += x;
        }
    } else {
        let inner = a.shape.last().copied().unwrap_or(1);
        let (rows, stride) = row_starts(target, &a.shape);
        for (&o, row) in rows.iter().zip(a.data.chunks(inner.max(1))) {
            for (k, &x) in row.iter().enumerate() {
                acc[o + k * stride] += x;
            }
        }
    }
    Array::from_parts(target.to_vec(), acc)
}

/// Swap the last two axes.
pub(crate) fn transpose_last2(a: &Array) -> Array {
    let r = a.rank();
    let (n, m) = (a.shape[r - 2], a.shape[r - 1]);
    let batch = a.data.len() / (n * m).max(1);
    let mut out = vec![0.0; a.data.len()];
    for bi in 0..batch {
        let src = &a.data[bi * n * m..(bi + 1) * n * m];
        let dst = &mut out[bi * n * m..(bi + 1) * n * m];
        for i in 0..n {
            for j in 0..m {
                dst[j * n + i] = src[i * m + j];
            }
        }
    }
    let mut shape = a.shape.clone();
    shape.swap(r - 2, r - 1);
    Array::from_parts(shape, out)
}

/// `out = op(a) · op(b)` for row-major `a`, `b`, where `op` optionally
/// transposes. `m, k, n` are the dimensions after transposition.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    out: &mut [f64],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices cover the strided views exactly; `out` is m×n.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[3, 1], &[4]), Some(vec![3, 4]));
        assert_eq!(broadcast_shape(&[], &[2, 2]), Some(vec![2, 2]));
        assert_eq!(broadcast_shape(&[3], &[4]), None);
    }

    #[test]
    fn sum_to_is_adjoint_of_broadcast() {
        let a = Array::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap();
        let b = broadcast_to(&a, &[2, 3, 4]);
        assert_eq!(b.shape(), &[2, 3, 4]);
        assert_eq!(b.data()[4], 2.0);
        let s = sum_to(&b, &[3, 1]);
        assert_eq!(s.data(), &[8.0, 16.0, 24.0]);
        let s = sum_to(&b, &[4]);
        assert_eq!(s.data(), &[12.0; 4]);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, true, &b, false, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
