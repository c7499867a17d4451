//! Tape-free forward kernels shared by [`crate::autodiff::Tape`].

use crate::error::{CdtError, Result};
use crate::tensor::{Scalar, Tensor};

/// `sqrt(2/pi)` in the tanh form of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh form of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Batch layout of a (possibly batched) matrix product.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct MatmulPlan {
    pub batch: Vec<usize>,
    pub nbatch: usize,
    pub a_batched: bool,
    pub b_batched: bool,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

impl MatmulPlan {
    pub fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.push(self.m);
        s.push(self.n);
        s
    }
}

pub(crate) fn plan_matmul(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(CdtError::shape("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = if trans_b {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != kb {
        return Err(CdtError::shape("matmul", a, b));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch = if ba == bb || bb.is_empty() {
        ba.to_vec()
    } else if ba.is_empty() {
        bb.to_vec()
    } else {
        return Err(CdtError::shape("matmul", a, b));
    };
    Ok(MatmulPlan {
        nbatch: batch.iter().product(),
        a_batched: !ba.is_empty(),
        b_batched: !bb.is_empty(),
        batch,
        m,
        k,
        n,
    })
}

/// Batched `c = op(a)·op(b) + beta·c`, where `op(a)` is `m×k` and `op(b)` is
/// `k×n`. `ta`/`tb` say the operand is stored transposed. An unbatched operand
/// is reused for every batch entry; an unbatched `c` accumulates across batch.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bmm<T: Scalar>(
    a: &[T],
    a_batched: bool,
    ta: bool,
    b: &[T],
    b_batched: bool,
    tb: bool,
    c: &mut [T],
    c_batched: bool,
    nbatch: usize,
    m: usize,
    k: usize,
    n: usize,
    beta: T,
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    for bi in 0..nbatch {
        let ao = if a_batched { bi * m * k } else { 0 };
        let bo = if b_batched { bi * k * n } else { 0 };
        let co = if c_batched { bi * m * n } else { 0 };
        let beta_i = if !c_batched && bi > 0 { T::one() } else { beta };
        debug_assert!(ao + m * k <= a.len());
        debug_assert!(bo + k * n <= b.len());
        debug_assert!(co + m * n <= c.len());
        // SAFETY: offsets and strides stay inside the slices checked above and
        // `c` is a distinct mutable borrow.
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                a.as_ptr().add(ao),
                rsa,
                csa,
                b.as_ptr().add(bo),
                rsb,
                csb,
                beta_i,
                c.as_mut_ptr().add(co),
                n as isize,
                1,
            );
        }
    }
}

/// Matrix product over the last two dims; leading batch dims must agree or be
/// absent on one side.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = plan_matmul(a.shape(), b.shape(), false)?;
    let mut out = Tensor::zeros(plan.out_shape());
    bmm(
        a.data(),
        plan.a_batched,
        false,
        b.data(),
        plan.b_batched,
        false,
        out.data_mut(),
        true,
        plan.nbatch,
        plan.m,
        plan.k,
        plan.n,
        T::zero(),
    );
    Ok(out)
}

/// `(outer, len, inner)` strides for reducing along `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_into<T: Scalar>(x: &[T], shape: &[usize], axis: usize, out: &mut [T]) {
    let (outer, len, inner) = axis_layout(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * len + j) * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut total = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total += e;
            }
            let inv = T::one() / total;
            for j in 0..len {
                out[at(j)] *= inv;
            }
        }
    }
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(CdtError::Contract(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let mut out = Tensor::zeros(x.shape().to_vec());
    softmax_into(x.data(), x.shape(), axis, out.data_mut());
    Ok(out)
}

/// Row-wise normalization; returns `(y, xhat, rstd)`.
pub(crate) fn layer_norm_fwd<T: Scalar>(
    x: &[T],
    n: usize,
    gain: &[T],
    bias: &[T],
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / n;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_n = T::one() / T::lit(n as f64);
    for r in 0..rows {
        let row = &x[r * n..(r + 1) * n];
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..n {
            let h = (row[j] - mean) * rs;
            xhat[r * n + j] = h;
            y[r * n + j] = h * gain[j] + bias[j];
        }
    }
    (y, xhat, rstd)
}

/// Layer normalization over the last dim with affine gain and bias.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let n = *x.shape().last().expect("rank >= 1");
    if gain.numel() != n || bias.numel() != n {
        return Err(CdtError::shape("layer_norm", x.shape(), gain.shape()));
    }
    let (y, _, _) = layer_norm_fwd(x.data(), n, gain.data(), bias.data(), eps);
    Tensor::new(x.shape().to_vec(), y)
}

#[inline]
pub(crate) fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    // 1 + tanh(u) = 2·sigmoid(2u), which needs a single exp.
    let u = c * (x + a * x * x * x);
    x / (T::one() + (-(u + u)).exp())
}

#[inline]
pub(crate) fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let u = c * (x + a * x * x * x);
    let s = T::one() / (T::one() + (-(u + u)).exp());
    s + T::lit(2.0) * x * s * (T::one() - s) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Tanh-approximated GELU, `0.5·x·(1 + tanh(sqrt(2/pi)·(x + 0.044715·x³)))`.
pub fn gelu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}
