//! Distortion-aware, ensemble-averaged GRAPE fidelity and gradient.
//!
//! For one ensemble member the controls are pushed through the member's
//! distortion cascade, scaled by the member's power factor, and used to
//! build one propagator per slice. A forward sweep over states and a
//! backward sweep over costates give every slice gradient from a single
//! propagator-derivative action, and the resulting gradient with respect
//! to the distorted waveform is pulled back through the cascade.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::distortions::{Cascade, CascadeTrace, ControlSequence};
use crate::error::{Error, Result};
use crate::spin::{expm, expm_with_derivatives, DriftSpec, Mat4, StateVector, Superoperator, C64};

const MINUS_I: C64 = C64::new(0.0, -1.0);

/// Source/target state pairs the control sequence has to map onto each
/// other.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferSet {
    pairs: Vec<(StateVector, StateVector)>,
}

impl TransferSet {
    pub fn new(pairs: Vec<(StateVector, StateVector)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Structural("transfer set needs at least one source/target pair".into()));
        }
        for (m, (rho, delta)) in pairs.iter().enumerate() {
            if rho.norm() == 0.0 || delta.norm() == 0.0 {
                return Err(Error::Domain(format!("transfer pair {m} has a zero source or target")));
            }
        }
        Ok(TransferSet { pairs })
    }

    pub fn pairs(&self) -> &[(StateVector, StateVector)] {
        &self.pairs
    }
}

/// One ensemble member: indices into the problem's drift, power-scale and
/// cascade grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Member {
    pub drift: usize,
    pub power: usize,
    pub cascade: usize,
}

/// Everything needed to score a control sequence.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub drift_grid: Vec<DriftSpec>,
    pub control_ops: Vec<Superoperator>,
    pub transfer: TransferSet,
    /// Total duration T of the undistorted sequence, s.
    pub duration: f64,
    pub n_slices: usize,
    /// Dimensionless multipliers on control amplitudes (B1 inhomogeneity).
    pub power_scale_grid: Vec<f64>,
    pub cascade_rows: Vec<Cascade>,
    /// Per-member weights; uniform when absent.
    pub member_weights: Option<Vec<f64>>,
    /// Explicit member list; the full Cartesian product when absent.
    pub members: Option<Vec<Member>>,
}

impl ControlProblem {
    /// Single-cascade, unit-power problem over the given drift grid.
    pub fn new(
        drift_grid: Vec<DriftSpec>,
        control_ops: Vec<Superoperator>,
        transfer: TransferSet,
        duration: f64,
        n_slices: usize,
    ) -> Self {
        ControlProblem {
            drift_grid,
            control_ops,
            transfer,
            duration,
            n_slices,
            power_scale_grid: vec![1.0],
            cascade_rows: vec![Cascade::empty()],
            member_weights: None,
            members: None,
        }
    }

    pub fn with_power_scales(mut self, scales: Vec<f64>) -> Self {
        self.power_scale_grid = scales;
        self
    }

    pub fn with_cascade_rows(mut self, rows: Vec<Cascade>) -> Self {
        self.cascade_rows = rows;
        self
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.member_weights = Some(weights);
        self
    }

    pub fn with_members(mut self, members: Vec<Member>) -> Self {
        self.members = Some(members);
        self
    }

    pub fn dt(&self) -> f64 {
        self.duration / self.n_slices as f64
    }

    pub fn channels(&self) -> usize {
        self.control_ops.len()
    }

    /// Ensemble members in evaluation order: cascade rows outermost, then
    /// power scales, then drifts.
    pub fn member_list(&self) -> Vec<Member> {
        if let Some(m) = &self.members {
            return m.clone();
        }
        let mut out = Vec::with_capacity(self.drift_grid.len() * self.power_scale_grid.len() * self.cascade_rows.len());
        for cascade in 0..self.cascade_rows.len() {
            for power in 0..self.power_scale_grid.len() {
                for drift in 0..self.drift_grid.len() {
                    out.push(Member { drift, power, cascade });
                }
            }
        }
        out
    }

    pub fn weights(&self) -> Vec<f64> {
        let n = self.member_list().len();
        match &self.member_weights {
            Some(w) => w.clone(),
            None => vec![1.0 / n as f64; n],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.drift_grid.is_empty() || self.power_scale_grid.is_empty() || self.cascade_rows.is_empty() {
            return Err(Error::Structural("drift, power-scale and cascade grids must be non-empty".into()));
        }
        if self.control_ops.is_empty() {
            return Err(Error::Structural("at least one control operator is required".into()));
        }
        if self.n_slices == 0 || !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::Domain("duration and slice count must be positive".into()));
        }
        if let Some(bad) = self.power_scale_grid.iter().find(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("power scale {bad} is not finite")));
        }
        let members = self.member_list();
        if members.is_empty() {
            return Err(Error::Structural("ensemble has no members".into()));
        }
        for (i, m) in members.iter().enumerate() {
            if m.drift >= self.drift_grid.len() || m.power >= self.power_scale_grid.len() || m.cascade >= self.cascade_rows.len() {
                return Err(Error::Structural(format!("member {i} indexes outside the problem grids")));
            }
        }
        if let Some(w) = &self.member_weights {
            if w.len() != members.len() {
                return Err(Error::Structural(format!(
                    "{} member weights given for {} members",
                    w.len(),
                    members.len()
                )));
            }
            if w.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::Domain("member weights must be finite and nonnegative".into()));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Domain(format!("member weights sum to {sum}, not 1")));
            }
        }
        Ok(())
    }

    fn check_controls(&self, controls: &ControlSequence) -> Result<()> {
        if controls.channels() != self.channels() {
            return Err(Error::Structural(format!(
                "waveform has {} channels but the problem has {} control operators",
                controls.channels(),
                self.channels()
            )));
        }
        if controls.slices() != self.n_slices {
            return Err(Error::Structural(format!(
                "waveform has {} slices but the problem expects {}",
                controls.slices(),
                self.n_slices
            )));
        }
        if (controls.dt() - self.dt()).abs() > 1e-9 * self.dt() {
            return Err(Error::Structural(format!(
                "waveform slice duration {} does not match problem slice duration {}",
                controls.dt(),
                self.dt()
            )));
        }
        Ok(())
    }
}

/// Ensemble fidelity, its per-member breakdown and (optionally) the gradient
/// with respect to the undistorted controls.
#[derive(Debug, Clone)]
pub struct FidelityReport {
    pub total: f64,
    pub per_member: Vec<(usize, f64)>,
    pub gradient: Option<DMatrix<f64>>,
}

/// Exponent generators for one member: `-i D dt` and `-i s C_k dt`.
struct SliceGenerators {
    drift: Mat4,
    controls: Vec<Mat4>,
}

impl SliceGenerators {
    fn new(drift: &DriftSpec, power_scale: f64, control_ops: &[Superoperator], dt: f64) -> Self {
        SliceGenerators {
            drift: drift.superoperator().0 * (MINUS_I * dt),
            controls: control_ops.iter().map(|c| c.0 * (MINUS_I * (power_scale * dt))).collect(),
        }
    }

    fn exponent(&self, controls: &DMatrix<f64>, n: usize) -> Result<Mat4> {
        let mut a = self.drift;
        for (k, gen) in self.controls.iter().enumerate() {
            let c = controls[(k, n)];
            if !c.is_finite() {
                return Err(Error::Numeric(format!("control {k} at slice {n} is not finite")));
            }
            a += gen * C64::from(c);
        }
        Ok(a)
    }
}

fn check_channels(controls: &ControlSequence, control_ops: &[Superoperator]) -> Result<()> {
    if controls.channels() != control_ops.len() {
        return Err(Error::Structural(format!(
            "{} control channels but {} control operators",
            controls.channels(),
            control_ops.len()
        )));
    }
    Ok(())
}

fn overlap(pair: &(StateVector, StateVector), final_state: &StateVector) -> f64 {
    let (rho, delta) = pair;
    delta.inner(final_state).re / (delta.norm() * rho.norm())
}

fn propagators(controls: &ControlSequence, gens: &SliceGenerators) -> Result<Vec<Mat4>> {
    (0..controls.slices()).map(|n| Ok(expm(&gens.exponent(controls.values(), n)?))).collect()
}

/// Propagators and their derivatives with respect to every channel
/// amplitude of every slice. `derivs[n * K + k]` is `∂P_n/∂c_n^(k)`.
fn propagators_with_derivatives(controls: &ControlSequence, gens: &SliceGenerators) -> Result<(Vec<Mat4>, Vec<Mat4>)> {
    let k = gens.controls.len();
    let n = controls.slices();
    let mut props = Vec::with_capacity(n);
    let mut derivs = vec![Mat4::zeros(); n * k];
    for slice in 0..n {
        let a = gens.exponent(controls.values(), slice)?;
        props.push(expm_with_derivatives(&a, &gens.controls, &mut derivs[slice * k..(slice + 1) * k]));
    }
    Ok((props, derivs))
}

fn propagate(props: &[Mat4], rho: &StateVector) -> StateVector {
    StateVector(props.iter().fold(rho.0, |x, p| p * x))
}

/// Gradient of one pair's overlap given precomputed propagators, added into
/// `grad` with weight `scale`. Returns the pair overlap.
fn accumulate_pair_gradient(
    props: &[Mat4],
    derivs: &[Mat4],
    pair: &(StateVector, StateVector),
    scale: f64,
    grad: &mut DMatrix<f64>,
) -> f64 {
    let (rho, delta) = pair;
    let norm = delta.norm() * rho.norm();
    let k = grad.nrows();
    let n = props.len();
    let mut states = Vec::with_capacity(n + 1);
    states.push(rho.0);
    for p in props {
        let next = p * states.last().unwrap();
        states.push(next);
    }
    let fidelity = delta.0.dotc(&states[n]).re / norm;
    let mut costate = delta.0;
    for slice in (0..n).rev() {
        let before = &states[slice];
        for ch in 0..k {
            let d = &derivs[slice * k + ch];
            grad[(ch, slice)] += scale * costate.dotc(&(d * before)).re / norm;
        }
        costate = props[slice].ad_mul(&costate);
    }
    fidelity
}

/// `Re⟨δ|P_N ⋯ P_1|ρ⟩ / (‖δ‖ ‖ρ‖)` for a sequence that has already been
/// distorted; amplitudes are multiplied by `power_scale` when building the
/// propagators.
pub fn pair_fidelity(
    controls: &ControlSequence,
    drift: &DriftSpec,
    power_scale: f64,
    control_ops: &[Superoperator],
    pair: &(StateVector, StateVector),
) -> Result<f64> {
    check_channels(controls, control_ops)?;
    let gens = SliceGenerators::new(drift, power_scale, control_ops, controls.dt());
    let props = propagators(controls, &gens)?;
    Ok(overlap(pair, &propagate(&props, &pair.0)))
}

/// Gradient of [`pair_fidelity`] with respect to every entry of `controls`.
pub fn pair_gradient(
    controls: &ControlSequence,
    drift: &DriftSpec,
    power_scale: f64,
    control_ops: &[Superoperator],
    pair: &(StateVector, StateVector),
) -> Result<DMatrix<f64>> {
    check_channels(controls, control_ops)?;
    let gens = SliceGenerators::new(drift, power_scale, control_ops, controls.dt());
    let (props, derivs) = propagators_with_derivatives(controls, &gens)?;
    let mut grad = DMatrix::zeros(controls.channels(), controls.slices());
    accumulate_pair_gradient(&props, &derivs, pair, 1.0, &mut grad);
    Ok(grad)
}

/// Pair-averaged fidelity of one member on an already distorted sequence.
pub fn member_fidelity(
    controls: &ControlSequence,
    drift: &DriftSpec,
    power_scale: f64,
    control_ops: &[Superoperator],
    transfer: &TransferSet,
) -> Result<f64> {
    check_channels(controls, control_ops)?;
    let gens = SliceGenerators::new(drift, power_scale, control_ops, controls.dt());
    let props = propagators(controls, &gens)?;
    let pairs = transfer.pairs();
    Ok(pairs.iter().map(|p| overlap(p, &propagate(&props, &p.0))).sum::<f64>() / pairs.len() as f64)
}

/// Pair-averaged fidelity and its gradient with respect to the distorted
/// sequence, sharing the propagators across pairs.
pub fn member_fidelity_gradient(
    controls: &ControlSequence,
    drift: &DriftSpec,
    power_scale: f64,
    control_ops: &[Superoperator],
    transfer: &TransferSet,
) -> Result<(f64, DMatrix<f64>)> {
    check_channels(controls, control_ops)?;
    let gens = SliceGenerators::new(drift, power_scale, control_ops, controls.dt());
    let (props, derivs) = propagators_with_derivatives(controls, &gens)?;
    let pairs = transfer.pairs();
    let w = 1.0 / pairs.len() as f64;
    let mut grad = DMatrix::zeros(controls.channels(), controls.slices());
    let fidelity = pairs.iter().map(|p| accumulate_pair_gradient(&props, &derivs, p, w, &mut grad)).sum::<f64>() * w;
    Ok((fidelity, grad))
}

fn distort_rows(controls: &ControlSequence, problem: &ControlProblem, members: &[Member]) -> Result<Vec<CascadeTrace>> {
    problem
        .cascade_rows
        .iter()
        .enumerate()
        .map(|(r, cascade)| {
            cascade.apply(controls).map_err(|e| {
                let member = members.iter().position(|m| m.cascade == r).unwrap_or(0);
                Error::Member { member, source: Box::new(e) }
            })
        })
        .collect()
}

/// Weighted ensemble fidelity without the gradient.
pub fn ensemble_fidelity(controls: &ControlSequence, problem: &ControlProblem) -> Result<FidelityReport> {
    problem.validate()?;
    problem.check_controls(controls)?;
    let members = problem.member_list();
    let weights = problem.weights();
    let traces = distort_rows(controls, problem, &members)?;
    let results: Vec<Result<f64>> = members
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            member_fidelity(
                traces[m.cascade].output(),
                &problem.drift_grid[m.drift],
                problem.power_scale_grid[m.power],
                &problem.control_ops,
                &problem.transfer,
            )
            .map_err(|e| Error::Member { member: i, source: Box::new(e) })
        })
        .collect();
    let mut total = 0.0;
    let mut per_member = Vec::with_capacity(members.len());
    for (i, r) in results.into_iter().enumerate() {
        let f = r?;
        total += weights[i] * f;
        per_member.push((i, f));
    }
    Ok(FidelityReport { total, per_member, gradient: None })
}

/// Weighted ensemble fidelity and its exact gradient with respect to the
/// undistorted controls.
///
/// Members are evaluated in parallel; their contributions are reduced in
/// member order, so the result does not depend on scheduling. Gradients of
/// members sharing a cascade row are summed before the (linear) pull-back,
/// so each cascade is back-propagated once.
pub fn ensemble_objective(controls: &ControlSequence, problem: &ControlProblem) -> Result<FidelityReport> {
    problem.validate()?;
    problem.check_controls(controls)?;
    let members = problem.member_list();
    let weights = problem.weights();
    let traces = distort_rows(controls, problem, &members)?;

    let results: Vec<Result<(f64, DMatrix<f64>)>> = members
        .par_iter()
        .enumerate()
        .map(|(i, m)| {
            member_fidelity_gradient(
                traces[m.cascade].output(),
                &problem.drift_grid[m.drift],
                problem.power_scale_grid[m.power],
                &problem.control_ops,
                &problem.transfer,
            )
            .map_err(|e| Error::Member { member: i, source: Box::new(e) })
        })
        .collect();

    let mut total = 0.0;
    let mut per_member = Vec::with_capacity(members.len());
    let mut row_grads: Vec<Option<DMatrix<f64>>> = vec![None; problem.cascade_rows.len()];
    for (i, r) in results.into_iter().enumerate() {
        let (f, g) = r?;
        let w = weights[i];
        total += w * f;
        per_member.push((i, f));
        let row = members[i].cascade;
        match &mut row_grads[row] {
            Some(acc) => *acc += &g * w,
            slot @ None => *slot = Some(g * w),
        }
    }

    let mut gradient = DMatrix::zeros(controls.channels(), controls.slices());
    for (row, g) in row_grads.into_iter().enumerate() {
        if let Some(g) = g {
            let pulled = problem.cascade_rows[row].vjp(&traces[row], &g).map_err(|e| {
                let member = members.iter().position(|m| m.cascade == row).unwrap_or(0);
                Error::Member { member, source: Box::new(e) }
            })?;
            gradient += pulled;
        }
    }
    Ok(FidelityReport { total, per_member, gradient: Some(gradient) })
}
