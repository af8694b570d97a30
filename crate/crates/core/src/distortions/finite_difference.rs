//! Central-difference Jacobians for user-supplied distortion maps that do
//! not come with a hand-written vector-Jacobian product.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use super::{ControlSequence, Filter};
use crate::error::{Error, Result};

/// Opaque user distortion. Must be pure and deterministic.
pub type UserMap = dyn Fn(&ControlSequence) -> Result<ControlSequence> + Send + Sync;

/// Lazily assembled central-difference Jacobian of a user map at one input.
pub struct FiniteDifferenceJacobian {
    map: Arc<UserMap>,
    input: ControlSequence,
    output_shape: (usize, usize),
    step: f64,
}

impl fmt::Debug for FiniteDifferenceJacobian {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FiniteDifferenceJacobian")
            .field("input_shape", &self.input.values().shape())
            .field("output_shape", &self.output_shape)
            .field("step", &self.step)
            .finish()
    }
}

/// Builds a VJP provider for `map` linearized at `controls`.
///
/// The map is evaluated twice up front; any difference between the two
/// results is reported as a numeric error since finite differences of a
/// non-deterministic map are meaningless.
pub fn fd_jacobian_fallback(
    map: Arc<UserMap>,
    controls: &ControlSequence,
    step: f64,
) -> Result<FiniteDifferenceJacobian> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {step}")));
    }
    let first = map(controls)?;
    let second = map(controls)?;
    if first != second {
        return Err(Error::Numeric("user distortion is not deterministic: repeated evaluation differs".into()));
    }
    Ok(FiniteDifferenceJacobian {
        map,
        input: controls.clone(),
        output_shape: first.values().shape(),
        step,
    })
}

impl FiniteDifferenceJacobian {
    fn step_for(&self, index: usize) -> f64 {
        let v = self.input.values();
        let floor = 1e-3 * v.amax();
        self.step * v[index].abs().max(floor).max(f64::EPSILON.sqrt())
    }

    /// Column `index` (column-major input index) of the Jacobian, shaped
    /// like the map output.
    pub fn column(&self, index: usize) -> Result<DMatrix<f64>> {
        let h = self.step_for(index);
        let mut plus = self.input.values().clone();
        let mut minus = plus.clone();
        plus[index] += h;
        minus[index] -= h;
        let fp = (self.map)(&self.input.with_values(plus)?)?;
        let fm = (self.map)(&self.input.with_values(minus)?)?;
        if fp.values().shape() != self.output_shape || fm.values().shape() != self.output_shape {
            return Err(Error::Structural("user distortion changed its output shape".into()));
        }
        Ok((fp.into_values() - fm.into_values()) / (2.0 * h))
    }

    pub fn vjp(&self, grad_output: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if grad_output.shape() != self.output_shape {
            return Err(Error::Structural(format!(
                "gradient shape {:?} does not match user distortion output {:?}",
                grad_output.shape(),
                self.output_shape
            )));
        }
        let (k, n) = self.input.values().shape();
        let mut out = DMatrix::zeros(k, n);
        for idx in 0..k * n {
            out[idx] = self.column(idx)?.dot(grad_output);
        }
        Ok(out)
    }
}

/// Cascade stage wrapping a user map; its VJP is assembled by central
/// differences at every call.
#[derive(Clone)]
pub struct FiniteDifferenceFilter {
    name: String,
    map: Arc<UserMap>,
    step: f64,
}

impl FiniteDifferenceFilter {
    pub fn new(name: impl Into<String>, map: Arc<UserMap>, step: f64) -> Self {
        FiniteDifferenceFilter { name: name.into(), map, step }
    }
}

impl fmt::Debug for FiniteDifferenceFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FiniteDifferenceFilter").field("name", &self.name).field("step", &self.step).finish()
    }
}

impl Filter for FiniteDifferenceFilter {
    fn name(&self) -> String {
        format!("user({})", self.name)
    }

    fn apply(&self, input: &ControlSequence) -> Result<ControlSequence> {
        (self.map)(input)
    }

    fn vjp(&self, input: &ControlSequence, grad_output: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        fd_jacobian_fallback(self.map.clone(), input, self.step)?.vjp(grad_output)
    }
}
