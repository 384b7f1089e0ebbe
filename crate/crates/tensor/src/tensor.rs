//! Dense row-major f64 arrays with cheap clones.
//!
//! `Tensor` is the value type: immutable, shared through an `Arc`, always
//! contiguous. All raw kernels used by the autodiff layer live here.

use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.numel() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Self {
        let shape = shape.into();
        assert_eq!(
            numel_of(&shape),
            data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::new(Vec::<usize>::new(), vec![v])
    }

    pub fn full(shape: impl Into<Vec<usize>>, v: f64) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        Self::new(shape, vec![v; n])
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let shape = shape.into();
        let n = numel_of(&shape);
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Tensor {
        let shape = shape.into();
        assert_eq!(
            numel_of(&shape),
            self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Tensor {
            shape,
            data: self.data.clone(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|x| x * c)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        broadcast_binary(self, other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        broadcast_binary(self, other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        broadcast_binary(self, other, |a, b| a * b)
    }

    /// Rows `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        narrow(self, axis, start, len)
    }

    /// Select entries along axis 0 (rows of a flattened leading axis).
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        index_select(self, rows)
    }

    pub fn stack(items: &[Tensor]) -> Tensor {
        assert!(!items.is_empty(), "stack of zero tensors");
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].numel());
        for t in items {
            assert_eq!(t.shape, inner, "stack shape mismatch");
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Tensor::new(shape, data)
    }

    /// Split along axis 0 into `shape[0]` tensors.
    pub fn unstack(&self) -> Vec<Tensor> {
        let n = self.shape[0];
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let step = numel_of(&inner);
        (0..n)
            .map(|i| Tensor::new(inner.clone(), self.data[i * step..(i + 1) * step].to_vec()))
            .collect()
    }

    /// Little-endian bytes of shape and data, used for fingerprints.
    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.shape.len() as u64).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in self.data.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast");
        };
    }
    out
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        s[i] = acc;
        acc *= shape[i];
    }
    s
}

/// Expand `t` to `shape` (t's shape must broadcast to it).
pub fn broadcast_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let n = numel_of(shape);
    if t.numel() == 1 {
        return Tensor::full(shape.to_vec(), t.data[0]);
    }
    let rank = shape.len();
    assert!(t.rank() <= rank, "cannot broadcast {:?} to {:?}", t.shape, shape);
    let off = rank - t.rank();
    // suffix fast path
    if t.shape[..] == shape[off..] {
        let m = t.numel();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n / m {
            data.extend_from_slice(&t.data);
        }
        return Tensor::new(shape.to_vec(), data);
    }
    let src_strides = strides_of(&t.shape);
    let mut eff = vec![0usize; rank];
    for i in 0..t.rank() {
        let d = t.shape[i];
        assert!(
            d == shape[i + off] || d == 1,
            "cannot broadcast {:?} to {:?}",
            t.shape,
            shape
        );
        eff[i + off] = if d == 1 { 0 } else { src_strides[i] };
    }
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        data.push(t.data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += eff[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            src -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Sum `t` down to `shape`; inverse of [`broadcast_to`].
pub fn sum_to(t: &Tensor, shape: &[usize]) -> Tensor {
    if t.shape == shape {
        return t.clone();
    }
    let target_n = numel_of(shape);
    if target_n == 1 {
        return Tensor::new(shape.to_vec(), vec![t.sum()]);
    }
    let rank = t.rank();
    assert!(shape.len() <= rank, "cannot sum {:?} to {:?}", t.shape, shape);
    let off = rank - shape.len();
    if t.shape[off..] == shape[..] {
        let mut data = vec![0.0; target_n];
        for chunk in t.data.chunks(target_n) {
            for (d, &x) in data.iter_mut().zip(chunk) {
                *d += x;
            }
        }
        return Tensor::new(shape.to_vec(), data);
    }
    let dst_strides = strides_of(shape);
    let mut eff = vec![0usize; rank];
    for i in 0..shape.len() {
        let d = shape[i];
        assert!(
            d == t.shape[i + off] || d == 1,
            "cannot sum {:?} to {:?}",
            t.shape,
            shape
        );
        eff[i + off] = if d == 1 { 0 } else { dst_strides[i] };
    }
    let mut data = vec![0.0; target_n];
    let mut idx = vec![0usize; rank];
    let mut dst = 0usize;
    for &x in t.data.iter() {
        data[dst] += x;
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            dst += eff[ax];
            if idx[ax] < t.shape[ax] {
                break;
            }
            dst -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(shape.to_vec(), data)
}

pub fn broadcast_binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape == b.shape {
        return a.zip_map(b, f);
    }
    let out = broadcast_shape(&a.shape, &b.shape);
    if b.numel() == 1 && a.shape == out {
        let bv = b.data[0];
        return a.map(|x| f(x, bv));
    }
    if a.numel() == 1 && b.shape == out {
        let av = a.data[0];
        return b.map(|y| f(av, y));
    }
    if a.shape == out && out.ends_with(&b.shape) {
        let m = b.numel();
        let data = a
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[i % m]))
            .collect();
        return Tensor::new(out, data);
    }
    let ea = broadcast_to(a, &out);
    let eb = broadcast_to(b, &out);
    ea.zip_map(&eb, f)
}

/// `op(a) · op(b)` for rank-2 tensors, where `op` optionally transposes.
pub fn matmul(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Tensor {
    assert_eq!(a.rank(), 2, "matmul lhs must be rank 2, got {:?}", a.shape);
    assert_eq!(b.rank(), 2, "matmul rhs must be rank 2, got {:?}", b.shape);
    let (m, k) = if ta { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
    let (k2, n) = if tb { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
    assert_eq!(k, k2, "matmul inner dims differ: {:?} x {:?} (ta={ta}, tb={tb})", a.shape, b.shape);
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return Tensor::new(vec![m, n], c);
    }
    let (rsa, csa) = if ta { (1, a.shape[1] as isize) } else { (a.shape[1] as isize, 1) };
    let (rsb, csb) = if tb { (1, b.shape[1] as isize) } else { (b.shape[1] as isize, 1) };
    // SAFETY: strides describe the exact extents of the borrowed buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::new(vec![m, n], c)
}

pub fn permute(t: &Tensor, axes: &[usize]) -> Tensor {
    let rank = t.rank();
    assert_eq!(axes.len(), rank, "permute axes {axes:?} for shape {:?}", t.shape);
    let src_strides = strides_of(&t.shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = t.numel();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        data.push(t.data[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel_of(&shape[..axis]), numel_of(&shape[axis + 1..]))
}

pub fn narrow(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let dim = t.shape[axis];
    assert!(start + len <= dim, "narrow {start}+{len} exceeds dim {dim}");
    let (outer, inner) = outer_inner(&t.shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * dim * inner + start * inner;
        data.extend_from_slice(&t.data[base..base + len * inner]);
    }
    let mut shape = t.shape.clone();
    shape[axis] = len;
    Tensor::new(shape, data)
}

/// Place `t` at `start` along `axis` inside zeros of extent `full`.
pub fn pad_axis(t: &Tensor, axis: usize, start: usize, full: usize) -> Tensor {
    let len = t.shape[axis];
    assert!(start + len <= full);
    let (outer, inner) = outer_inner(&t.shape, axis);
    let mut data = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let dst = o * full * inner + start * inner;
        let src = o * len * inner;
        data[dst..dst + len * inner].copy_from_slice(&t.data[src..src + len * inner]);
    }
    let mut shape = t.shape.clone();
    shape[axis] = full;
    Tensor::new(shape, data)
}

pub fn concat(ts: &[Tensor], axis: usize) -> Tensor {
    assert!(!ts.is_empty());
    let mut shape = ts[0].shape.clone();
    let total: usize = ts.iter().map(|t| t.shape[axis]).sum();
    for t in ts {
        assert_eq!(t.rank(), shape.len());
        for (i, (&a, &b)) in t.shape.iter().zip(shape.iter()).enumerate() {
            assert!(i == axis || a == b, "concat shape mismatch {:?} vs {:?}", t.shape, shape);
        }
    }
    let (outer, inner) = outer_inner(&shape, axis);
    shape[axis] = total;
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for t in ts {
            let l = t.shape[axis] * inner;
            data.extend_from_slice(&t.data[o * l..(o + 1) * l]);
        }
    }
    Tensor::new(shape, data)
}

/// Rows of a tensor viewed as `[shape[0], rest]`.
pub fn index_select(t: &Tensor, rows: &[usize]) -> Tensor {
    let row = numel_of(&t.shape[1..]);
    let mut data = Vec::with_capacity(rows.len() * row);
    for &r in rows {
        assert!(r < t.shape[0], "row index {r} out of range {}", t.shape[0]);
        data.extend_from_slice(&t.data[r * row..(r + 1) * row]);
    }
    let mut shape = t.shape.clone();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}

/// Scatter-add rows of `src` into zeros with `n_rows` rows; adjoint of [`index_select`].
pub fn index_add(src: &Tensor, rows: &[usize], n_rows: usize) -> Tensor {
    let row = numel_of(&src.shape[1..]);
    assert_eq!(src.shape[0], rows.len());
    let mut data = vec![0.0; n_rows * row];
    for (i, &r) in rows.iter().enumerate() {
        for j in 0..row {
            data[r * row + j] += src.data[i * row + j];
        }
    }
    let mut shape = src.shape.clone();
    shape[0] = n_rows;
    Tensor::new(shape, data)
}

/// Geometry of a 2-D convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.k * self.k * self.c
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        // f(col_row, col_offset, src_offset) for every in-bounds kernel tap
        let (oh, ow) = (self.out_h(), self.out_w());
        let patch = self.patch();
        for n in 0..self.n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = (n * oh + oy) * ow + ox;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let col = row * patch + (ky * self.k + kx) * self.c;
                            let src = ((n * self.h + iy as usize) * self.w + ix as usize) * self.c;
                            f(row, col, src);
                        }
                    }
                }
            }
        }
    }
}

/// im2col: `[n,h,w,c]` → `[n*oh*ow, k*k*c]`.
pub fn unfold(t: &Tensor, g: &ConvGeom) -> Tensor {
    assert_eq!(t.shape, vec![g.n, g.h, g.w, g.c], "unfold input shape");
    let rows = g.n * g.out_h() * g.out_w();
    let mut data = vec![0.0; rows * g.patch()];
    let c = g.c;
    g.for_each_tap(|_, col, src| data[col..col + c].copy_from_slice(&t.data[src..src + c]));
    Tensor::new(vec![rows, g.patch()], data)
}

/// col2im: adjoint of [`unfold`].
pub fn fold(t: &Tensor, g: &ConvGeom) -> Tensor {
    let rows = g.n * g.out_h() * g.out_w();
    assert_eq!(t.shape, vec![rows, g.patch()], "fold input shape");
    let mut data = vec![0.0; g.n * g.h * g.w * g.c];
    let c = g.c;
    g.for_each_tap(|_, col, src| {
        for j in 0..c {
            data[src + j] += t.data[col + j];
        }
    });
    Tensor::new(vec![g.n, g.h, g.w, g.c], data)
}
