//! Amplifier compression models acting on the amplitude of each complex
//! sample, with the phase left untouched.

use nalgebra::DMatrix;

use super::{require_paired, require_same_shape, ControlSequence, Filter};
use crate::error::{Error, Result};
use crate::spin::C64;

fn check_level(a: f64) -> Result<()> {
    if !(a > 0.0) || !a.is_finite() {
        return Err(Error::Domain(format!("saturation level must be positive, got {a}")));
    }
    Ok(())
}

/// Reciprocal-root saturation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationSpec {
    /// Output ceiling `a`, rad/s.
    pub level: f64,
    /// Transition sharpness `s > 1`.
    pub sharpness: f64,
}

impl SaturationSpec {
    pub fn new(level: f64, sharpness: f64) -> Result<Self> {
        check_level(level)?;
        if !(sharpness > 1.0) || !sharpness.is_finite() {
            return Err(Error::Domain(format!("saturation sharpness must exceed 1, got {sharpness}")));
        }
        Ok(SaturationSpec { level, sharpness })
    }
}

fn tanh_scalar(u: f64, a: f64) -> (f64, f64) {
    let t = (u / a).tanh();
    (a * t, 1.0 - t * t)
}

// v = u / (1 + |u/a|^s)^(1/s), dv/du = (1 + |u/a|^s)^(-1 - 1/s).
// Large |u/a| is rewritten in powers of a/u so nothing overflows.
fn rroot_scalar(u: f64, spec: &SaturationSpec) -> (f64, f64) {
    let (a, s) = (spec.level, spec.sharpness);
    let t = (u / a).abs();
    if t <= 1.0 {
        let base = 1.0 + t.powf(s);
        (u / base.powf(1.0 / s), base.powf(-1.0 - 1.0 / s))
    } else {
        let inv = t.powf(-s);
        let base = 1.0 + inv;
        (a * u.signum() / base.powf(1.0 / s), inv / t * base.powf(-1.0 - 1.0 / s))
    }
}

/// `v = a tanh(u / a)` element-wise; returns the outputs and the diagonal of
/// the Jacobian, `sech²(u / a)`.
pub fn saturate_tanh(u: &[f64], a: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_level(a)?;
    Ok(u.iter().map(|&x| tanh_scalar(x, a)).unzip())
}

/// `v = u / (1 + (u/a)^s)^(1/s)` element-wise (odd in `u`); returns the
/// outputs and the diagonal of the Jacobian.
pub fn saturate_rroot(u: &[f64], spec: &SaturationSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    SaturationSpec::new(spec.level, spec.sharpness)?;
    Ok(u.iter().map(|&x| rroot_scalar(x, spec)).unzip())
}

/// Applies an amplitude map `r ↦ f(r)` (with `f(0) = 0`, `f'(0) = 1`) to
/// every complex sample of every channel pair.
fn polar_apply(values: &DMatrix<f64>, f: impl Fn(f64) -> (f64, f64)) -> DMatrix<f64> {
    let mut out = values.clone();
    for pair in 0..values.nrows() / 2 {
        for n in 0..values.ncols() {
            let (x, y) = (values[(2 * pair, n)], values[(2 * pair + 1, n)]);
            let r = x.hypot(y);
            if r > 0.0 {
                let scale = f(r).0 / r;
                out[(2 * pair, n)] = x * scale;
                out[(2 * pair + 1, n)] = y * scale;
            }
        }
    }
    out
}

/// Per-sample 2x2 Jacobian of the polar map is
/// `f'(r) û ûᵀ + f(r)/r (1 - û ûᵀ)`, which is symmetric, so the VJP applies
/// it directly to the incoming gradient.
fn polar_vjp(values: &DMatrix<f64>, grad: &DMatrix<f64>, f: impl Fn(f64) -> (f64, f64)) -> DMatrix<f64> {
    let mut out = grad.clone();
    for pair in 0..values.nrows() / 2 {
        for n in 0..values.ncols() {
            let u = C64::new(values[(2 * pair, n)], values[(2 * pair + 1, n)]);
            let g = C64::new(grad[(2 * pair, n)], grad[(2 * pair + 1, n)]);
            let r = u.norm();
            let y = if r > 0.0 {
                let (fv, df) = f(r);
                let dir = u / r;
                let radial = dir * (dir.conj() * g).re;
                radial * df + (g - radial) * (fv / r)
            } else {
                g * f(0.0).1
            };
            out[(2 * pair, n)] = y.re;
            out[(2 * pair + 1, n)] = y.im;
        }
    }
    out
}

/// `a tanh(|u| / a)` amplitude compression stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TanhSaturation {
    level: f64,
}

impl TanhSaturation {
    pub fn new(level: f64) -> Result<Self> {
        check_level(level)?;
        Ok(TanhSaturation { level })
    }

    pub fn level(&self) -> f64 {
        self.level
    }
}

impl Filter for TanhSaturation {
    fn name(&self) -> String {
        format!("sat_tanh(a={:.6e})", self.level)
    }

    fn apply(&self, input: &ControlSequence) -> Result<ControlSequence> {
        require_paired(input.channels(), "tanh saturation")?;
        input.with_values(polar_apply(input.values(), |r| tanh_scalar(r, self.level)))
    }

    fn vjp(&self, input: &ControlSequence, grad_output: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        require_same_shape(input.values(), grad_output, "tanh saturation")?;
        Ok(polar_vjp(input.values(), grad_output, |r| tanh_scalar(r, self.level)))
    }
}

/// Reciprocal-root amplitude compression stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReciprocalRootSaturation {
    spec: SaturationSpec,
}

impl ReciprocalRootSaturation {
    pub fn new(spec: SaturationSpec) -> Result<Self> {
        Ok(ReciprocalRootSaturation { spec: SaturationSpec::new(spec.level, spec.sharpness)? })
    }

    pub fn spec(&self) -> SaturationSpec {
        self.spec
    }
}

impl Filter for ReciprocalRootSaturation {
    fn name(&self) -> String {
        format!("sat_rroot(a={:.6e}, s={})", self.spec.level, self.spec.sharpness)
    }

    fn apply(&self, input: &ControlSequence) -> Result<ControlSequence> {
        require_paired(input.channels(), "reciprocal-root saturation")?;
        input.with_values(polar_apply(input.values(), |r| rroot_scalar(r, &self.spec)))
    }

    fn vjp(&self, input: &ControlSequence, grad_output: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        require_same_shape(input.values(), grad_output, "reciprocal-root saturation")?;
        Ok(polar_vjp(input.values(), grad_output, |r| rroot_scalar(r, &self.spec)))
    }
}
