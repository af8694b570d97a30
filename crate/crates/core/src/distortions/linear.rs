//! Linear rotating-frame filters: single pole, single zero, RLC resonator
//! and arbitrary causal FIR kernels.
//!
//! All recursions start from zero internal state. The vector-Jacobian
//! products are the conjugate-transpose actions of the lower-triangular
//! Toeplitz matrices these filters define, evaluated as time-reversed
//! recursions or correlations.

use nalgebra::DMatrix;

use super::{map_pairs, require_paired, require_same_shape, ComplexSignal, ControlSequence, Filter};
use crate::error::{Error, Result};
use crate::spin::C64;

/// Dimensionless pole or zero location of a first-order discrete filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterCoefficient(pub C64);

impl FilterCoefficient {
    pub fn new(value: C64) -> Self {
        FilterCoefficient(value)
    }

    pub fn real(value: f64) -> Self {
        FilterCoefficient(C64::new(value, 0.0))
    }

    /// `exp(-r dt + i (ω - ω_RF) dt)` for damping rate `r` (1/s), filter
    /// frequency `ω` and frame frequency `ω_RF` (rad/s).
    pub fn from_rates(rate: f64, frequency: f64, frame_frequency: f64, dt: f64) -> Self {
        FilterCoefficient(C64::new(-rate * dt, (frequency - frame_frequency) * dt).exp())
    }

    pub fn value(&self) -> C64 {
        self.0
    }
}

fn check_pole(p: FilterCoefficient) -> Result<()> {
    let m = p.0.norm();
    if !(m < 1.0) {
        return Err(Error::Unstable(m));
    }
    Ok(())
}

fn check_zero(z: FilterCoefficient) -> Result<()> {
    if z.0 == C64::new(1.0, 0.0) {
        return Err(Error::DivisionByZero);
    }
    if !(z.0.re.is_finite() && z.0.im.is_finite()) {
        return Err(Error::Numeric("single-zero coefficient is not finite".into()));
    }
    Ok(())
}

/// `v_n = (1 - p) u_n + p v_{n-1}`, `v_{-1} = 0`.
pub fn spf_apply(u: &ComplexSignal, p: FilterCoefficient) -> Result<ComplexSignal> {
    check_pole(p)?;
    let (p, gain) = (p.0, C64::new(1.0, 0.0) - p.0);
    let mut prev = C64::new(0.0, 0.0);
    Ok(ComplexSignal(
        u.0.iter()
            .map(|&x| {
                prev = gain * x + p * prev;
                prev
            })
            .collect(),
    ))
}

/// Conjugate-transpose action of the single-pole Toeplitz Jacobian,
/// `y_m = conj(1 - p) g_m + conj(p) y_{m+1}` run backwards in time.
pub fn spf_vjp(g: &ComplexSignal, p: FilterCoefficient) -> Result<ComplexSignal> {
    check_pole(p)?;
    let (pc, gain) = (p.0.conj(), (C64::new(1.0, 0.0) - p.0).conj());
    let mut out = vec![C64::new(0.0, 0.0); g.len()];
    let mut next = C64::new(0.0, 0.0);
    for m in (0..g.len()).rev() {
        next = gain * g.0[m] + pc * next;
        out[m] = next;
    }
    Ok(ComplexSignal(out))
}

/// `v_n = (u_n - z u_{n-1}) / (1 - z)`, `u_{-1} = 0`.
pub fn szf_apply(u: &ComplexSignal, z: FilterCoefficient) -> Result<ComplexSignal> {
    check_zero(z)?;
    let norm = C64::new(1.0, 0.0) / (C64::new(1.0, 0.0) - z.0);
    let mut prev = C64::new(0.0, 0.0);
    Ok(ComplexSignal(
        u.0.iter()
            .map(|&x| {
                let v = (x - z.0 * prev) * norm;
                prev = x;
                v
            })
            .collect(),
    ))
}

/// `y_m = (g_m - conj(z) g_{m+1}) / conj(1 - z)`, `g_N = 0`.
pub fn szf_vjp(g: &ComplexSignal, z: FilterCoefficient) -> Result<ComplexSignal> {
    check_zero(z)?;
    let norm = (C64::new(1.0, 0.0) / (C64::new(1.0, 0.0) - z.0)).conj();
    let zc = z.0.conj();
    let n = g.len();
    Ok(ComplexSignal(
        (0..n)
            .map(|m| {
                let ahead = if m + 1 < n { g.0[m + 1] } else { C64::new(0.0, 0.0) };
                (g.0[m] - zc * ahead) * norm
            })
            .collect(),
    ))
}

/// Resonant circuit with natural frequency `ω` and quality factor `Q`,
/// observed in a frame rotating at `ω_RF` (all frequencies rad/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlcSpec {
    pub natural_frequency: f64,
    pub quality_factor: f64,
    pub frame_frequency: f64,
}

impl RlcSpec {
    /// Resonator tuned to the frame frequency.
    pub fn on_resonance(natural_frequency: f64, quality_factor: f64) -> Self {
        RlcSpec { natural_frequency, quality_factor, frame_frequency: natural_frequency }
    }

    /// The two single-pole stages whose cascade realizes this resonator.
    pub fn stages(&self, dt: f64) -> Result<[SinglePoleFilter; 2]> {
        let (p1, p2) = rlc_poles(self, dt)?;
        Ok([SinglePoleFilter::new(p1)?, SinglePoleFilter::new(p2)?])
    }
}

/// `p_{1,2} = exp(-|ω| dt / 2Q ± i (ω - ω_RF) dt sqrt(1 - 1/4Q²))`.
pub fn rlc_poles(spec: &RlcSpec, dt: f64) -> Result<(FilterCoefficient, FilterCoefficient)> {
    let q = spec.quality_factor;
    if !(q > 0.5) {
        return Err(Error::Domain(format!("RLC quality factor must exceed 1/2, got {q}")));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::Domain(format!("time step must be positive, got {dt}")));
    }
    let w = spec.natural_frequency;
    let re = -w.abs() * dt / (2.0 * q);
    let im = (w - spec.frame_frequency) * dt * (1.0 - 1.0 / (4.0 * q * q)).sqrt();
    Ok((
        FilterCoefficient(C64::new(re, im).exp()),
        FilterCoefficient(C64::new(re, -im).exp()),
    ))
}

/// Memory kernel samples `h_m` (1/s); the discrete response is
/// `v_n = Σ_m h_m u_{n-m} Δt`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirKernel {
    pub taps: Vec<C64>,
}

impl FirKernel {
    pub fn new(taps: Vec<C64>) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::Structural("FIR kernel needs at least one tap".into()));
        }
        if taps.iter().any(|t| !(t.re.is_finite() && t.im.is_finite())) {
            return Err(Error::Numeric("FIR kernel has non-finite taps".into()));
        }
        Ok(FirKernel { taps })
    }

    pub fn from_real(taps: &[f64]) -> Result<Self> {
        Self::new(taps.iter().map(|&t| C64::new(t, 0.0)).collect())
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if self.taps.len() > n {
            return Err(Error::Structural(format!(
                "FIR kernel has {} taps but the signal only {n} samples",
                self.taps.len()
            )));
        }
        Ok(())
    }
}

/// Causal convolution `v_n = Σ_{m=0}^{n} h_m u_{n-m} Δt`.
pub fn fir_apply(u: &ComplexSignal, h: &FirKernel, dt: f64) -> Result<ComplexSignal> {
    h.check_len(u.len())?;
    let n = u.len();
    Ok(ComplexSignal(
        (0..n)
            .map(|i| {
                h.taps
                    .iter()
                    .take(i + 1)
                    .enumerate()
                    .map(|(m, &hm)| hm * u.0[i - m])
                    .sum::<C64>()
                    * dt
            })
            .collect(),
    ))
}

/// Correlation `y_k = Σ_m conj(h_m) g_{k+m} Δt`.
pub fn fir_vjp(g: &ComplexSignal, h: &FirKernel, dt: f64) -> Result<ComplexSignal> {
    h.check_len(g.len())?;
    let n = g.len();
    Ok(ComplexSignal(
        (0..n)
            .map(|k| {
                h.taps
                    .iter()
                    .take(n - k)
                    .enumerate()
                    .map(|(m, &hm)| hm.conj() * g.0[k + m])
                    .sum::<C64>()
                    * dt
            })
            .collect(),
    ))
}

/// Unit-DC-gain single-pole filter stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinglePoleFilter {
    pole: FilterCoefficient,
}

impl SinglePoleFilter {
    pub fn new(pole: FilterCoefficient) -> Result<Self> {
        check_pole(pole)?;
        Ok(SinglePoleFilter { pole })
    }

    pub fn pole(&self) -> FilterCoefficient {
        self.pole
    }
}

impl Filter for SinglePoleFilter {
    fn name(&self) -> String {
        format!("spf(p={:.6}{:+.6}i)", self.pole.0.re, self.pole.0.im)
    }

    fn apply(&self, input: &ControlSequence) -> Result<ControlSequence> {
        require_paired(input.channels(), "single-pole filter")?;
        input.with_values(map_pairs(input.values(), |u| spf_apply(u, self.pole))?)
    }

    fn vjp(&self, input: &ControlSequence, grad_output: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        require_same_shape(input.values(), grad_output, "single-pole filter")?;
        map_pairs(grad_output, |g| spf_vjp(g, self.pole))
    }

    fn is_linear(&self) -> bool {
        true
    }
}

/// Unit-DC-gain single-zero filter stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleZeroFilter {
    zero: FilterCoefficient,
}

impl SingleZeroFilter {
    pub fn new(zero: FilterCoefficient) -> Result<Self> {
        check_zero(zero)?;
        Ok(SingleZeroFilter { zero })
    }

    pub fn zero(&self) -> FilterCoefficient {
        self.zero
    }
}

impl Filter for SingleZeroFilter {
    fn name(&self) -> String {
        format!("szf(z={:.6}{:+.6}i)", self.zero.0.re, self.zero.0.im)
    }

    fn apply(&self, input: &ControlSequence) -> Result<ControlSequence> {
        require_paired(input.channels(), "single-zero filter")?;
        input.with_values(map_pairs(input.values(), |u| szf_apply(u, self.zero))?)
    }

    fn vjp(&self, input: &ControlSequence, grad_output: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        require_same_shape(input.values(), grad_output, "single-zero filter")?;
        map_pairs(grad_output, |g| szf_vjp(g, self.zero))
    }

    fn is_linear(&self) -> bool {
        true
    }
}

/// Causal FIR stage; uses the slice duration of the sequence it acts on.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    kernel: FirKernel,
}

impl FirFilter {
    pub fn new(kernel: FirKernel) -> Self {
        FirFilter { kernel }
    }

    pub fn kernel(&self) -> &FirKernel {
        &self.kernel
    }
}

impl Filter for FirFilter {
    fn name(&self) -> String {
        format!("fir({} taps)", self.kernel.taps.len())
    }

    fn apply(&self, input: &ControlSequence) -> Result<ControlSequence> {
        require_paired(input.channels(), "FIR filter")?;
        let dt = input.dt();
        input.with_values(map_pairs(input.values(), |u| fir_apply(u, &self.kernel, dt))?)
    }

    fn vjp(&self, input: &ControlSequence, grad_output: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        require_same_shape(input.values(), grad_output, "FIR filter")?;
        let dt = input.dt();
        map_pairs(grad_output, |g| fir_vjp(g, &self.kernel, dt))
    }

    fn is_linear(&self) -> bool {
        true
    }
}
