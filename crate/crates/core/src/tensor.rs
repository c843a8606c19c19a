//! Dense row-major `f32` tensors with `f64` accumulation.
//!
//! Every operation returns a fresh tensor. Matrix products are parallel over
//! output rows only; each output element is a sequential `f64` sum over the
//! inner dimension, so results do not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many multiply-adds a product runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "from_vec",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Self::from_vec(vec![r, c], rows.concat())
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::dim("dims2", format!("expected rank 2, got {other:?}"))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols() + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        let c = self.cols();
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        self.expect_same_shape(other, op)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, alpha: f32) -> Tensor {
        self.map(|x| x * alpha)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::from_vec(vec![c, r], out)
    }

    /// Row-wise sum producing `[rows, 1]`.
    pub fn sum_cols(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let data = (0..r)
            .map(|i| self.data[i * c..(i + 1) * c].iter().map(|&x| x as f64).sum::<f64>() as f32)
            .collect();
        Tensor::from_vec(vec![r, 1], data)
    }

    /// Column-wise sum producing `[1, cols]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        let mut acc = vec![0.0f64; c];
        for i in 0..r {
            for (a, &x) in acc.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *a += x as f64;
            }
        }
        Tensor::from_vec(vec![1, c], acc.into_iter().map(|x| x as f32).collect())
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64) * (x as f64)).sum()
    }

    /// Stack 2-D tensors with equal column counts along rows.
    pub fn vstack(parts: &[Tensor]) -> Result<Tensor> {
        let c = parts.first().map_or(0, Tensor::cols);
        let mut data = Vec::new();
        let mut r = 0;
        for p in parts {
            let (pr, pc) = p.dims2()?;
            if pc != c {
                return Err(Error::dim("vstack", format!("column count {pc} vs {c}")));
            }
            r += pr;
            data.extend_from_slice(&p.data);
        }
        Tensor::from_vec(vec![r, c], data)
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        let (r, c) = self.dims2()?;
        if start > end || end > r {
            return Err(Error::dim("slice_rows", format!("{start}..{end} of {r}")));
        }
        Tensor::from_vec(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }
}

fn run_rows(out: &mut [f32], n: usize, work: usize, f: impl Fn(usize, &mut [f32]) + Sync + Send) {
    if n == 0 {
        return;
    }
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(n).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim("matmul", format!("[{m}x{k}] x [{k2}x{n}]")));
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (&a.data, &b.data);
    run_rows(&mut out, n, m * k * n, |i, row| {
        let mut acc = vec![0.0f64; n];
        for p in 0..k {
            let av = ad[i * k + p] as f64;
            for (s, &bv) in acc.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in row.iter_mut().zip(acc) {
            *o = s as f32;
        }
    });
    Tensor::from_vec(vec![m, n], out)
}

/// `a[m×k] · b[n×k]ᵀ`, the linear-layer product `x · Wᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, k2) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim("matmul_nt", format!("[{m}x{k}] x [{n}x{k2}]^T")));
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (&a.data, &b.data);
    run_rows(&mut out, n, m * k * n, |i, row| {
        let ar = &ad[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            let br = &bd[j * k..(j + 1) * k];
            let mut s = 0.0f64;
            for (&x, &y) in ar.iter().zip(br) {
                s += x as f64 * y as f64;
            }
            *o = s as f32;
        }
    });
    Tensor::from_vec(vec![m, n], out)
}

/// `a[k×m]ᵀ · b[k×n]`, used for weight gradients `dYᵀ · X`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dim("matmul_tn", format!("[{k}x{m}]^T x [{k2}x{n}]")));
    }
    let mut out = vec![0.0f32; m * n];
    let (ad, bd) = (&a.data, &b.data);
    run_rows(&mut out, n, m * k * n, |i, row| {
        let mut acc = vec![0.0f64; n];
        for p in 0..k {
            let av = ad[p * m + i] as f64;
            if av == 0.0 {
                continue;
            }
            for (s, &bv) in acc.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                *s += av * bv as f64;
            }
        }
        for (o, s) in row.iter_mut().zip(acc) {
            *o = s as f32;
        }
    });
    Tensor::from_vec(vec![m, n], out)
}

/// `out[i,j] = m[i,j] + r[i,0] + c[0,j]`.
pub fn broadcast_add_rc(m: &Tensor, r: &Tensor, c: &Tensor) -> Result<Tensor> {
    let (p, q) = m.dims2()?;
    if r.shape() != [p, 1] || c.shape() != [1, q] {
        return Err(Error::dim(
            "broadcast_add_rc",
            format!("m {:?}, r {:?}, c {:?}", m.shape(), r.shape(), c.shape()),
        ));
    }
    let mut out = m.data.clone();
    for i in 0..p {
        let ri = r.data[i];
        for j in 0..q {
            out[i * q + j] = out[i * q + j] + ri + c.data[j];
        }
    }
    Tensor::from_vec(vec![p, q], out)
}

/// Root mean square of `a − b` with `f64` accumulation.
pub fn rmse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.expect_same_shape(b, "rmse")?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok((s / a.len() as f64).sqrt())
}

/// Mean squared difference with `f64` accumulation.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    rmse(a, b).map(|r| r * r)
}
