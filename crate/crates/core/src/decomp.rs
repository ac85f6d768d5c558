//! Low-rank compression of gradient tensors and the matching reconstruction.
//!
//! Matrices (fully connected weights, `D_out × D_in`) are compressed with a
//! truncated SVD. Order-4 tensors (convolution kernels, `C_out × C_in × H × W`)
//! are compressed with a truncated HOSVD, optionally refined by HOOI sweeps.
//! Vectors bypass compression and are only quantized downstream.

use crate::error::{QrrError, Result};
use crate::linalg::{leading_left_vectors, reconstruct_usv, truncated_svd};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// How a parameter's gradient travels on the wire.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    /// Sent as a single quantized block.
    Bypass,
    /// `U`, `sigma`, `V` blocks.
    Svd,
    /// Core tensor followed by four factor matrices.
    Tucker,
}

impl ParamKind {
    pub fn for_shape(shape: &[usize]) -> Result<Self> {
        match shape.len() {
            0 | 1 => Ok(Self::Bypass),
            2 => Ok(Self::Svd),
            4 => Ok(Self::Tucker),
            n => Err(QrrError::InvalidArgument(format!(
                "no compression rule for order-{n} parameter {shape:?}"
            ))),
        }
    }

    /// Number of quantized blocks one parameter of this kind produces.
    pub fn block_count(self) -> usize {
        match self {
            Self::Bypass => 1,
            Self::Svd => 3,
            Self::Tucker => 5,
        }
    }
}

fn check_fraction(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(QrrError::InvalidArgument(format!("rank fraction {p} outside (0, 1]")));
    }
    Ok(())
}

/// `⌈p·d⌉`, treating products within 1e-9 of an integer as that integer so
/// that e.g. `0.7·10` yields 7 rather than 8.
fn ceil_fraction(p: f64, d: usize) -> usize {
    let x = p * d as f64;
    let nearest = x.round();
    let r = if (x - nearest).abs() <= 1e-9 * x.max(1.0) {
        nearest
    } else {
        x.ceil()
    };
    (r as usize).clamp(1, d)
}

/// `ν = ⌈p · min(d_out, d_in)⌉`
pub fn svd_rank_from_fraction(p: f64, d_out: usize, d_in: usize) -> Result<usize> {
    check_fraction(p)?;
    Ok(ceil_fraction(p, d_out.min(d_in)))
}

/// `rᵢ = ⌈p · Iᵢ⌉` for each mode.
pub fn tucker_ranks_from_fraction(p: f64, shape: [usize; 4]) -> Result<[usize; 4]> {
    check_fraction(p)?;
    Ok(shape.map(|d| ceil_fraction(p, d)))
}

/// Elements sent for a rank-`nu` SVD of a `d_out × d_in` matrix.
pub fn svd_element_count(d_out: usize, d_in: usize, nu: usize) -> usize {
    d_out * nu + nu + d_in * nu
}

/// Elements sent for a Tucker factorization: core plus factor matrices.
pub fn tucker_element_count(shape: [usize; 4], ranks: [usize; 4]) -> usize {
    ranks.iter().product::<usize>() + shape.iter().zip(&ranks).map(|(i, r)| i * r).sum::<usize>()
}

/// Whether sending the factors is strictly cheaper than sending the dense
/// gradient. Bypass parameters are never compressed, so they report `false`.
pub fn is_communication_efficient(kind: ParamKind, shape: &[usize], ranks: &[usize]) -> bool {
    let dense: usize = shape.iter().product();
    match (kind, shape, ranks) {
        (ParamKind::Svd, &[d_out, d_in], &[nu]) => svd_element_count(d_out, d_in, nu) < dense,
        (ParamKind::Tucker, &[a, b, c, d], &[r1, r2, r3, r4]) => {
            tucker_element_count([a, b, c, d], [r1, r2, r3, r4]) < dense
        }
        _ => false,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvdFactors<T> {
    /// `D_out × ν`
    pub u: Tensor<T>,
    pub sigma: Vec<T>,
    /// `D_in × ν`
    pub v: Tensor<T>,
    pub original_shape: (usize, usize),
}

impl<T: Scalar> SvdFactors<T> {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn element_count(&self) -> usize {
        svd_element_count(self.original_shape.0, self.original_shape.1, self.rank())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuckerFactors<T> {
    /// `r₁ × r₂ × r₃ × r₄`
    pub core: Tensor<T>,
    /// `Fᵢ : Iᵢ × rᵢ`
    pub factors: [Tensor<T>; 4],
    pub original_shape: [usize; 4],
}

impl<T: Scalar> TuckerFactors<T> {
    pub fn ranks(&self) -> [usize; 4] {
        [0, 1, 2, 3].map(|i| self.factors[i].cols())
    }

    pub fn element_count(&self) -> usize {
        tucker_element_count(self.original_shape, self.ranks())
    }
}

fn check_finite<T: Scalar>(g: &Tensor<T>) -> Result<()> {
    if g.is_finite() {
        Ok(())
    } else {
        Err(QrrError::NonFinite)
    }
}

pub fn compress_matrix<T: Scalar>(g: &Tensor<T>, p: f64) -> Result<SvdFactors<T>> {
    if g.order() != 2 {
        return Err(QrrError::ShapeMismatch(format!(
            "expected a matrix gradient, got {:?}",
            g.shape()
        )));
    }
    let nu = svd_rank_from_fraction(p, g.rows(), g.cols())?;
    compress_matrix_with_rank(g, nu)
}

pub fn compress_matrix_with_rank<T: Scalar>(g: &Tensor<T>, nu: usize) -> Result<SvdFactors<T>> {
    check_finite(g)?;
    let mut s = truncated_svd(g, nu)?;
    // directions with σ = 0 go out as zeros
    for (k, _) in s.sigma.iter().enumerate().filter(|(_, &x)| x == T::zero()) {
        for m in [&mut s.u, &mut s.v] {
            let cols = m.cols();
            m.data_mut()
                .iter_mut()
                .skip(k)
                .step_by(cols)
                .for_each(|x| *x = T::zero());
        }
    }
    Ok(SvdFactors {
        u: s.u,
        sigma: s.sigma,
        v: s.v,
        original_shape: (g.rows(), g.cols()),
    })
}

fn shape4<T: Scalar>(g: &Tensor<T>) -> Result<[usize; 4]> {
    match *g.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(QrrError::ShapeMismatch(format!(
            "expected an order-4 gradient, got {:?}",
            g.shape()
        ))),
    }
}

/// Truncated HOSVD with ranks from `p`, no refinement sweeps.
pub fn compress_tensor4<T: Scalar>(g: &Tensor<T>, p: f64) -> Result<TuckerFactors<T>> {
    let shape = shape4(g)?;
    compress_tensor4_with_ranks(g, tucker_ranks_from_fraction(p, shape)?, 0)
}

/// Truncated HOSVD followed by `hooi_sweeps` rounds of higher-order
/// orthogonal iteration.
pub fn compress_tensor4_with_ranks<T: Scalar>(
    g: &Tensor<T>,
    ranks: [usize; 4],
    hooi_sweeps: usize,
) -> Result<TuckerFactors<T>> {
    let shape = shape4(g)?;
    check_finite(g)?;
    for (mode, (&r, &dim)) in ranks.iter().zip(&shape).enumerate() {
        if r == 0 || r > dim {
            return Err(QrrError::InvalidArgument(format!(
                "rank {r} for mode {mode} of length {dim}"
            )));
        }
    }
    if g.data().iter().all(|&x| x == T::zero()) {
        let factors = [0, 1, 2, 3].map(|m| Tensor::zeros(&[shape[m], ranks[m]]));
        return Ok(TuckerFactors {
            core: Tensor::zeros(&ranks),
            factors,
            original_shape: shape,
        });
    }
    let mut factors = Vec::with_capacity(4);
    for (mode, &rank) in ranks.iter().enumerate() {
        factors.push(leading_left_vectors(&g.unfold(mode)?, rank)?);
    }
    for _ in 0..hooi_sweeps {
        for mode in 0..4 {
            let mut y = g.clone();
            for (other, f) in factors.iter().enumerate() {
                if other != mode {
                    y = y.mode_n_product(&f.transpose()?, other)?;
                }
            }
            factors[mode] = leading_left_vectors(&y.unfold(mode)?, ranks[mode])?;
        }
    }
    let mut core = g.clone();
    for (mode, f) in factors.iter().enumerate() {
        core = core.mode_n_product(&f.transpose()?, mode)?;
    }
    let factors: [Tensor<T>; 4] = factors.try_into().expect("four factors");
    Ok(TuckerFactors {
        core,
        factors,
        original_shape: shape,
    })
}

pub fn reconstruct_matrix<T: Scalar>(f: &SvdFactors<T>) -> Result<Tensor<T>> {
    let (d_out, d_in) = f.original_shape;
    let nu = f.sigma.len();
    if f.u.shape() != [d_out, nu] || f.v.shape() != [d_in, nu] {
        return Err(QrrError::ShapeMismatch(format!(
            "U {:?}, sigma {nu}, V {:?} for a {d_out}x{d_in} matrix",
            f.u.shape(),
            f.v.shape()
        )));
    }
    Ok(reconstruct_usv(&f.u, &f.sigma, &f.v))
}

/// `core ×₁ F₁ ×₂ F₂ ×₃ F₃ ×₄ F₄`
pub fn reconstruct_tensor4<T: Scalar>(f: &TuckerFactors<T>) -> Result<Tensor<T>> {
    let ranks = f.ranks();
    for mode in 0..4 {
        if f.factors[mode].rows() != f.original_shape[mode] {
            return Err(QrrError::ShapeMismatch(format!(
                "factor {mode} has {} rows, mode length is {}",
                f.factors[mode].rows(),
                f.original_shape[mode]
            )));
        }
    }
    if f.core.shape() != ranks {
        return Err(QrrError::ShapeMismatch(format!(
            "core {:?} vs factor ranks {ranks:?}",
            f.core.shape()
        )));
    }
    let mut out = f.core.clone();
    for (mode, factor) in f.factors.iter().enumerate() {
        out = out.mode_n_product(factor, mode)?;
    }
    Ok(out)
}
