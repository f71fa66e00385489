//! Layer primitives with hand-written gradients.
//!
//! Everything is generic over [`Real`] so the same code runs at 32-bit for
//! training and inference and at 64-bit for finite-difference checks.
//! Sequences are row-major `[len, channels]` slices.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::rng::Rng;

pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }
}

/// A trainable tensor with its gradient buffer and AdamW moments.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

impl<T: Real> Param<T> {
    fn new(name: String, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            name,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        }
    }
}

/// Named parameters in a fixed insertion order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Appends a parameter and returns its index.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index_of(&name).is_some() {
            return Err(Error::Shape(format!("duplicate parameter `{name}`")));
        }
        self.params.push(Param::new(name, value));
        Ok(self.params.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn param(&self, idx: usize) -> &Param<T> {
        &self.params[idx]
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut Param<T> {
        &mut self.params[idx]
    }

    pub fn value(&self, idx: usize) -> &[T] {
        self.params[idx].value.data()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Copies parameter values into another precision; gradients and moments start at zero.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param::new(p.name.clone(), p.value.cast()))
                .collect(),
        }
    }

    /// True when names, shapes and value bits agree.
    pub fn same_values(&self, other: &Self) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.as_f64().to_bits() == y.as_f64().to_bits())
            })
    }

    /// Overwrites values from `other`, which must have identical layout.
    pub fn copy_values_from(&mut self, other: &Self) {
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
    }
}

/// `y += a * x`
#[inline]
pub(crate) fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + a * xi;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Single-row dense layer: `out[o] = b[o] + sum_j w[o, j] * x[j]`.
pub(crate) fn dense<T: Real>(x: &[T], w: &[T], b: &[T], out: &mut [T]) {
    let n_in = x.len();
    for (o, y) in out.iter_mut().enumerate() {
        *y = b[o] + dot(&w[o * n_in..(o + 1) * n_in], x);
    }
}

/// Accumulates dense-layer gradients. `dx`, when given, is overwritten.
pub(crate) fn dense_backward<T: Real>(x: &[T], w: &[T], dy: &[T], dx: Option<&mut [T]>, dw: &mut [T], db: &mut [T]) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        db[o] = db[o] + g;
        if g != T::zero() {
            axpy(g, x, &mut dw[o * n_in..(o + 1) * n_in]);
        }
    }
    if let Some(dx) = dx {
        dx.iter_mut().for_each(|v| *v = T::zero());
        for (o, &g) in dy.iter().enumerate() {
            if g != T::zero() {
                axpy(g, &w[o * n_in..(o + 1) * n_in], dx);
            }
        }
    }
}

/// Kernel `[c_out, c_in, 3]` repacked as `[3, c_in, c_out]`.
fn kernel_tap_in_out<T: Real>(k: &[T], c_in: usize, c_out: usize) -> Vec<T> {
    let mut packed = vec![T::zero(); 3 * c_in * c_out];
    for o in 0..c_out {
        for c in 0..c_in {
            for tap in 0..3 {
                packed[(tap * c_in + c) * c_out + o] = k[(o * c_in + c) * 3 + tap];
            }
        }
    }
    packed
}

/// Kernel `[c_out, c_in, 3]` repacked as `[3, c_out, c_in]`.
fn kernel_tap_out_in<T: Real>(k: &[T], c_in: usize, c_out: usize) -> Vec<T> {
    let mut packed = vec![T::zero(); 3 * c_in * c_out];
    for o in 0..c_out {
        for c in 0..c_in {
            for tap in 0..3 {
                packed[(tap * c_out + o) * c_in + c] = k[(o * c_in + c) * 3 + tap];
            }
        }
    }
    packed
}

/// Kernel-3, padding-1 convolution over `len` positions of `x: [len, c_in]`.
pub(crate) fn conv1d<T: Real>(x: &[T], len: usize, c_in: usize, k: &[T], b: &[T], out: &mut [T]) {
    let c_out = b.len();
    let packed = kernel_tap_in_out(k, c_in, c_out);
    for t in 0..len {
        let y = &mut out[t * c_out..(t + 1) * c_out];
        y.copy_from_slice(b);
        for tap in 0..3 {
            let src = t + tap;
            if src == 0 || src > len {
                continue;
            }
            let row = &x[(src - 1) * c_in..src * c_in];
            for (c, &xv) in row.iter().enumerate() {
                if xv != T::zero() {
                    let kc = &packed[(tap * c_in + c) * c_out..(tap * c_in + c + 1) * c_out];
                    axpy(xv, kc, y);
                }
            }
        }
    }
}

/// Accumulates convolution gradients. `dx`, when given, is overwritten.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward<T: Real>(
    x: &[T],
    len: usize,
    c_in: usize,
    k: &[T],
    dy: &[T],
    dx: Option<&mut [T]>,
    dk: &mut [T],
    db: &mut [T],
) {
    let c_out = db.len();
    let mut dk_packed = vec![T::zero(); 3 * c_in * c_out];
    for t in 0..len {
        let g = &dy[t * c_out..(t + 1) * c_out];
        for (o, &gv) in g.iter().enumerate() {
            db[o] = db[o] + gv;
        }
        for tap in 0..3 {
            let src = t + tap;
            if src == 0 || src > len {
                continue;
            }
            let row = &x[(src - 1) * c_in..src * c_in];
            for (c, &xv) in row.iter().enumerate() {
                if xv != T::zero() {
                    let acc = &mut dk_packed[(tap * c_in + c) * c_out..(tap * c_in + c + 1) * c_out];
                    axpy(xv, g, acc);
                }
            }
        }
    }
    for o in 0..c_out {
        for c in 0..c_in {
            for tap in 0..3 {
                let i = (o * c_in + c) * 3 + tap;
                dk[i] = dk[i] + dk_packed[(tap * c_in + c) * c_out + o];
            }
        }
    }

    if let Some(dx) = dx {
        let packed = kernel_tap_out_in(k, c_in, c_out);
        dx[..len * c_in].iter_mut().for_each(|v| *v = T::zero());
        for t in 0..len {
            let g = &dy[t * c_out..(t + 1) * c_out];
            for tap in 0..3 {
                let src = t + tap;
                if src == 0 || src > len {
                    continue;
                }
                let target = &mut dx[(src - 1) * c_in..src * c_in];
                for (o, &gv) in g.iter().enumerate() {
                    if gv != T::zero() {
                        axpy(
                            gv,
                            &packed[(tap * c_out + o) * c_in..(tap * c_out + o + 1) * c_in],
                            target,
                        );
                    }
                }
            }
        }
    }
}

/// Mean over the first `span` rows of `x: [rows, cols]`.
pub(crate) fn mean_rows<T: Real>(x: &[T], cols: usize, span: usize, out: &mut [T]) {
    out.iter_mut().for_each(|v| *v = T::zero());
    for row in x[..span * cols].chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    let inv = T::one() / T::of(span as f64);
    out.iter_mut().for_each(|v| *v = *v * inv);
}

pub(crate) fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Zeroes `grad` where the ReLU output was not positive.
pub(crate) fn relu_backward_inplace<T: Real>(activated: &[T], grad: &mut [T]) {
    for (g, &a) in grad.iter_mut().zip(activated) {
        if a <= T::zero() {
            *g = T::zero();
        }
    }
}

// ---------------------------------------------------------------------------
// Public tensor-level API
// ---------------------------------------------------------------------------

/// `y[i, o] = sum_j w[o, j] * x[i, j] + b[o]` for `x: [n, in]`, `w: [out, in]`, `b: [out]`.
pub fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[n, n_in], &[n_out, w_in], &[b_out]) = (x.shape(), w.shape(), b.shape()) else {
        return Err(Error::Shape("linear expects x [n,in], w [out,in], b [out]".into()));
    };
    if n_in != w_in || n_out != b_out {
        return Err(Error::Shape(format!(
            "linear: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut y = Tensor::zeros(&[n, n_out]);
    for i in 0..n {
        dense(
            &x.data()[i * n_in..(i + 1) * n_in],
            w.data(),
            b.data(),
            &mut y.data_mut()[i * n_out..(i + 1) * n_out],
        );
    }
    Ok(y)
}

/// Kernel-3 convolution with one zero of padding on each side; output length equals input length.
pub fn conv1d_forward<T: Real>(x: &Tensor<T>, k: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[len, c_in], &[c_out, k_in, width], &[b_out]) = (x.shape(), k.shape(), b.shape()) else {
        return Err(Error::Shape(
            "conv1d expects x [L,c_in], k [c_out,c_in,3], b [c_out]".into(),
        ));
    };
    if width != 3 || k_in != c_in || b_out != c_out {
        return Err(Error::Shape(format!(
            "conv1d: x {:?}, k {:?}, b {:?}",
            x.shape(),
            k.shape(),
            b.shape()
        )));
    }
    let mut y = Tensor::zeros(&[len, c_out]);
    conv1d(x.data(), len, c_in, k.data(), b.data(), y.data_mut());
    Ok(y)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    relu_inplace(y.data_mut());
    y
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total = exps.iter().copied().fold(T::zero(), |a, b| a + b);
    exps.into_iter().map(|e| e / total).collect()
}

/// Average of the first `true_len` rows of `x: [L, c]`.
pub fn mean_pool_masked<T: Real>(x: &Tensor<T>, true_len: usize) -> Result<Vec<T>> {
    let &[rows, cols] = x.shape() else {
        return Err(Error::Shape("mean_pool_masked expects [L, c]".into()));
    };
    if true_len == 0 || true_len > rows {
        return Err(Error::Shape(format!("true_len {true_len} outside 1..={rows}")));
    }
    let mut out = vec![T::zero(); cols];
    mean_rows(x.data(), cols, true_len, &mut out);
    Ok(out)
}

/// Average over all `L` rows, padding included.
pub fn avg_pool<T: Real>(x: &Tensor<T>) -> Result<Vec<T>> {
    let rows = x.shape().first().copied().unwrap_or(0);
    mean_pool_masked(x, rows)
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a logit, `softplus(s) - y * s`.
pub fn bce_loss<T: Real>(logit: T, label: u8) -> T {
    softplus(logit) - if label == 1 { logit } else { T::zero() }
}

/// Derivative of [`bce_loss`] with respect to the logit.
pub fn bce_grad<T: Real>(logit: T, label: u8) -> T {
    sigmoid(logit) - if label == 1 { T::one() } else { T::zero() }
}

/// Kaiming-uniform (ReLU gain): `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
pub fn kaiming_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    uniform_tensor(shape, bound, rng)
}

/// Xavier-uniform: `U(-sqrt(6 / (fan_in + fan_out)), +sqrt(...))`.
pub fn xavier_uniform<T: Real>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform_tensor(shape, bound, rng)
}

fn uniform_tensor<T: Real>(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.uniform_range(-bound, bound))).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}
