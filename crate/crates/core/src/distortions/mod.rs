//! Differentiable instrument distortions acting on control waveforms.
//!
//! Every stage maps a `K x N` control matrix (channels by time slices) to
//! another control matrix and exposes a vector-Jacobian product, so a
//! cascade of stages can be back-propagated without ever forming a dense
//! Jacobian. Rotating-frame filters and amplitude saturation act on X/Y
//! channel pairs viewed as one complex signal `u = c_x + i c_y`.

mod cascade;
mod finite_difference;
mod linear;
mod saturation;

pub use cascade::{Cascade, CascadeTrace};
pub use finite_difference::{fd_jacobian_fallback, FiniteDifferenceFilter, FiniteDifferenceJacobian};
pub use linear::{
    fir_apply, fir_vjp, rlc_poles, spf_apply, spf_vjp, szf_apply, szf_vjp, FilterCoefficient, FirFilter,
    FirKernel, RlcSpec, SinglePoleFilter, SingleZeroFilter,
};
pub use saturation::{
    saturate_rroot, saturate_tanh, ReciprocalRootSaturation, SaturationSpec, TanhSaturation,
};

use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::spin::C64;

/// Real-valued `K x N` control waveform with uniform slice duration.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSequence {
    values: DMatrix<f64>,
    dt: f64,
}

impl ControlSequence {
    pub fn new(values: DMatrix<f64>, dt: f64) -> Result<Self> {
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(Error::Structural("control sequence needs at least one channel and one slice".into()));
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Domain(format!("slice duration must be positive, got {dt}")));
        }
        if let Some(bad) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (bad % values.nrows(), bad / values.nrows());
            return Err(Error::Numeric(format!("control value at channel {r}, slice {c} is not finite")));
        }
        Ok(ControlSequence { values, dt })
    }

    pub fn zeros(channels: usize, slices: usize, dt: f64) -> Result<Self> {
        Self::new(DMatrix::zeros(channels, slices), dt)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn slices(&self) -> usize {
        self.values.ncols()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.slices() as f64
    }

    /// Copy with `extra` zero-valued slices appended.
    pub fn padded(&self, extra: usize) -> ControlSequence {
        if extra == 0 {
            return self.clone();
        }
        let mut v = DMatrix::zeros(self.channels(), self.slices() + extra);
        v.columns_mut(0, self.slices()).copy_from(&self.values);
        ControlSequence { values: v, dt: self.dt }
    }

    /// Same slice duration, new values. Validates finiteness.
    pub fn with_values(&self, values: DMatrix<f64>) -> Result<Self> {
        Self::new(values, self.dt)
    }

    /// Largest per-sample amplitude `sqrt(c_x² + c_y²)` over all channel pairs.
    pub fn max_pair_amplitude(&self) -> f64 {
        let mut m = 0.0f64;
        for pair in 0..self.channels() / 2 {
            for n in 0..self.slices() {
                m = m.max(self.values[(2 * pair, n)].hypot(self.values[(2 * pair + 1, n)]));
            }
        }
        m
    }
}

/// Complex view `u_n = c_x,n + i c_y,n` of one X/Y channel pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSignal(pub Vec<C64>);

impl ComplexSignal {
    /// Packs rows `2 * pair` and `2 * pair + 1` of `values`.
    pub fn pack(values: &DMatrix<f64>, pair: usize) -> Self {
        let (rx, ry) = (2 * pair, 2 * pair + 1);
        ComplexSignal((0..values.ncols()).map(|n| C64::new(values[(rx, n)], values[(ry, n)])).collect())
    }

    pub fn unpack_into(&self, values: &mut DMatrix<f64>, pair: usize) {
        for (n, z) in self.0.iter().enumerate() {
            values[(2 * pair, n)] = z.re;
            values[(2 * pair + 1, n)] = z.im;
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `⟨self|other⟩ = Σ conj(self_n) other_n`.
    pub fn inner(&self, other: &ComplexSignal) -> C64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a.conj() * b).sum()
    }
}

/// A differentiable map from control sequences to control sequences.
pub trait Filter: Send + Sync + fmt::Debug {
    fn name(&self) -> String;

    fn apply(&self, input: &ControlSequence) -> Result<ControlSequence>;

    /// Gradient with respect to `input` given the gradient with respect to
    /// `apply(input)`, i.e. `Jᵀ g` with the Jacobian taken at `input`.
    fn vjp(&self, input: &ControlSequence, grad_output: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    /// True when the Jacobian does not depend on the input.
    fn is_linear(&self) -> bool {
        false
    }
}

pub(crate) fn require_paired(channels: usize, who: &str) -> Result<()> {
    if channels % 2 != 0 {
        return Err(Error::Structural(format!(
            "{who} acts on X/Y channel pairs but the sequence has {channels} channels"
        )));
    }
    Ok(())
}

pub(crate) fn require_same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>, who: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Structural(format!(
            "{who}: gradient shape {:?} does not match output shape {:?}",
            b.shape(),
            a.shape()
        )));
    }
    Ok(())
}

/// Applies `f` to every complex channel pair of `values`.
pub(crate) fn map_pairs<F>(values: &DMatrix<f64>, mut f: F) -> Result<DMatrix<f64>>
where
    F: FnMut(&ComplexSignal) -> Result<ComplexSignal>,
{
    let mut out = DMatrix::zeros(values.nrows(), values.ncols());
    for pair in 0..values.nrows() / 2 {
        f(&ComplexSignal::pack(values, pair))?.unpack_into(&mut out, pair);
    }
    Ok(out)
}
