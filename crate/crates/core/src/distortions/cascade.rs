use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use nalgebra::DMatrix;

use super::{ControlSequence, Filter};
use crate::error::{Error, Result};

static NEXT_CASCADE_ID: AtomicU64 = AtomicU64::new(1);

/// Ordered chain of distortion stages, first stage applied first, with
/// optional zero-input padding slices appended before filtering so that
/// ring-down tails stay inside the simulated window.
#[derive(Debug, Clone)]
pub struct Cascade {
    stages: Vec<Arc<dyn Filter>>,
    pad_slices: usize,
    id: u64,
}

/// Per-invocation record of a forward pass, consumed by [`Cascade::vjp`].
#[derive(Debug, Clone)]
pub struct CascadeTrace {
    cascade_id: u64,
    input_slices: usize,
    /// Input to each stage (the padded control sequence first).
    stage_inputs: Vec<ControlSequence>,
    output: ControlSequence,
}

impl CascadeTrace {
    pub fn output(&self) -> &ControlSequence {
        &self.output
    }

    pub fn into_output(self) -> ControlSequence {
        self.output
    }
}

impl Default for Cascade {
    fn default() -> Self {
        Cascade::new(Vec::new(), 0)
    }
}

impl Cascade {
    pub fn new(stages: Vec<Arc<dyn Filter>>, pad_slices: usize) -> Self {
        Cascade { stages, pad_slices, id: NEXT_CASCADE_ID.fetch_add(1, Ordering::Relaxed) }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn stages(&self) -> &[Arc<dyn Filter>] {
        &self.stages
    }

    pub fn pad_slices(&self) -> usize {
        self.pad_slices
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn is_linear(&self) -> bool {
        self.stages.iter().all(|s| s.is_linear())
    }

    /// Pads `controls` and runs every stage in order.
    pub fn apply(&self, controls: &ControlSequence) -> Result<CascadeTrace> {
        let mut current = controls.padded(self.pad_slices);
        let mut stage_inputs = Vec::with_capacity(self.stages.len());
        for (j, stage) in self.stages.iter().enumerate() {
            let next = stage
                .apply(&current)
                .map_err(|e| Error::Structural(format!("stage {j} ({}): {e}", stage.name())))?;
            stage_inputs.push(current);
            current = next;
        }
        Ok(CascadeTrace {
            cascade_id: self.id,
            input_slices: controls.slices(),
            stage_inputs,
            output: current,
        })
    }

    /// Pulls a gradient with respect to the cascade output back to the
    /// undistorted controls, last stage first, and drops the padding columns.
    pub fn vjp(&self, trace: &CascadeTrace, grad_output: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if trace.cascade_id != self.id || trace.stage_inputs.len() != self.stages.len() {
            return Err(Error::Structural("cascade trace was produced by a different cascade".into()));
        }
        if grad_output.shape() != trace.output.values().shape() {
            return Err(Error::Structural(format!(
                "gradient shape {:?} does not match cascade output shape {:?}",
                grad_output.shape(),
                trace.output.values().shape()
            )));
        }
        let mut g = grad_output.clone();
        for (stage, input) in self.stages.iter().zip(&trace.stage_inputs).rev() {
            g = stage.vjp(input, &g)?;
        }
        if g.ncols() < trace.input_slices {
            return Err(Error::Structural("cascade gradient shorter than its input".into()));
        }
        Ok(g.columns(0, trace.input_slices).into_owned())
    }
}
