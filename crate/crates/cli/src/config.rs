//! Experiment configuration (TOML) and its translation into a control
//! problem. Frequencies given by the user are in Hz and converted to rad/s
//! here; offsets are in ppm of the nucleus Larmor frequency.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use rawgrape_core::distortions::{
    Cascade, Filter, FilterCoefficient, FirFilter, FirKernel, ReciprocalRootSaturation, RlcSpec, SaturationSpec,
    SinglePoleFilter, SingleZeroFilter, TanhSaturation,
};
use rawgrape_core::grape::{ControlProblem, TransferSet};
use rawgrape_core::optimizer::OptimizerConfig;
use rawgrape_core::presets::{self, hz_to_rad_s, linspace, Nucleus};
use rawgrape_core::spin::{relaxation_from_rates, Superoperator, C64};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub controls: ControlsSection,
    pub transfer: Option<TransferSection>,
    #[serde(default)]
    pub distortions: DistortionsSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub nucleus: String,
    pub field_tesla: f64,
    pub offsets_ppm: Grid,
    pub relaxation: Option<Relaxation>,
}

/// Either an explicit list or `count` evenly spaced points from `min` to
/// `max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    List(Vec<f64>),
    Range { min: f64, max: f64, count: usize },
}

impl Grid {
    pub fn values(&self) -> Vec<f64> {
        match self {
            Grid::List(v) => v.clone(),
            Grid::Range { min, max, count } => linspace(*min, *max, *count),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Relaxation {
    /// Longitudinal rate, 1/s.
    pub r1: f64,
    /// Transverse rate, 1/s.
    pub r2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlsSection {
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Seconds.
    #[serde(default = "default_duration")]
    pub duration: f64,
    #[serde(default = "default_slices")]
    pub slices: usize,
    /// Maximum nutation frequency per quadrature pair, Hz.
    pub amplitude_cap_hz: Option<f64>,
    /// RMS scale of the random initial guess is a third of this, Hz.
    /// Defaults to the cap, or 10 kHz without one.
    pub initial_amplitude_hz: Option<f64>,
}

fn default_channels() -> usize {
    2
}

fn default_duration() -> f64 {
    50e-6
}

fn default_slices() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSection {
    pub preset: Option<String>,
    /// `[source, target]` operator names such as `["Sz", "Sx"]`.
    pub pairs: Option<Vec<[String; 2]>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistortionsSection {
    /// Zero-input slices appended before filtering.
    #[serde(default)]
    pub pad_slices: usize,
    /// One cascade per row; stages apply in listed order.
    #[serde(default)]
    pub rows: Vec<Vec<StageSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StageSpec {
    /// Single-pole filter, by pole or by time constant (s) and detuning (Hz).
    Spf {
        pole: Option<[f64; 2]>,
        time_constant: Option<f64>,
        detuning_hz: Option<f64>,
    },
    Szf {
        zero: [f64; 2],
    },
    /// Resonator at the Larmor frequency plus `detuning_hz` relative to the
    /// rotating frame.
    Rlc {
        q: f64,
        detuning_hz: Option<f64>,
    },
    /// Real memory-kernel samples, 1/s.
    Fir {
        taps: Vec<f64>,
    },
    SatTanh {
        level_hz: f64,
    },
    SatRroot {
        level_hz: f64,
        sharpness: f64,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub power_scales: Option<Grid>,
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub max_iterations: Option<usize>,
    pub gradient_tolerance: Option<f64>,
    pub memory_pairs: Option<usize>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub directory: Option<String>,
}

/// 1-based line of `key = ...` inside `[section]`, else of the section
/// header, else 1.
fn locate(source: &str, section: &str, key: Option<&str>) -> usize {
    let header = format!("[{section}]");
    let mut in_section = false;
    let mut header_line = None;
    for (i, line) in source.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            in_section = t == header;
            if in_section {
                header_line = Some(i + 1);
            }
            continue;
        }
        if in_section {
            if let Some(k) = key {
                if t.split('=').next().map(str::trim) == Some(k) {
                    return i + 1;
                }
            }
        }
    }
    header_line.unwrap_or(1)
}

/// A parsed configuration together with its source, so semantic errors can
/// point at the offending line.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    origin: String,
    source: String,
}

impl LoadedConfig {
    pub fn parse(source: &str, origin: &str) -> CliResult<Self> {
        let config: ExperimentConfig = toml::from_str(source).map_err(|e| {
            let line = e.span().map(|s| source[..s.start].matches('\n').count() + 1).unwrap_or(1);
            CliError::Input(format!("{origin}:{line}: {}", e.message()))
        })?;
        let loaded = LoadedConfig { config, origin: origin.to_string(), source: source.to_string() };
        loaded.validate()?;
        Ok(loaded)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("{}: cannot read config: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn error(&self, section: &str, key: Option<&str>, msg: impl std::fmt::Display) -> CliError {
        CliError::Input(format!("{}:{}: [{section}] {msg}", self.origin, locate(&self.source, section, key)))
    }

    fn validate(&self) -> CliResult<()> {
        let c = &self.config;
        self.nucleus()?;
        if !(c.system.field_tesla > 0.0) || !c.system.field_tesla.is_finite() {
            return Err(self.error("system", Some("field_tesla"), "field must be positive"));
        }
        let offsets = c.system.offsets_ppm.values();
        if offsets.is_empty() || offsets.iter().any(|x| !x.is_finite()) {
            return Err(self.error("system", Some("offsets_ppm"), "offset grid must be non-empty and finite"));
        }
        if let Some(r) = c.system.relaxation {
            if !(r.r1 >= 0.0 && r.r2 >= 0.0) {
                return Err(self.error("system", Some("relaxation"), "relaxation rates must be nonnegative"));
            }
        }
        if !(1..=2).contains(&c.controls.channels) {
            return Err(self.error("controls", Some("channels"), "a single spin supports 1 (X) or 2 (X, Y) channels"));
        }
        if !(c.controls.duration > 0.0) || !c.controls.duration.is_finite() {
            return Err(self.error("controls", Some("duration"), "duration must be positive"));
        }
        if c.controls.slices == 0 {
            return Err(self.error("controls", Some("slices"), "need at least one slice"));
        }
        if let Some(cap) = c.controls.amplitude_cap_hz {
            if !(cap > 0.0) || !cap.is_finite() {
                return Err(self.error("controls", Some("amplitude_cap_hz"), "cap must be positive"));
            }
        }
        if let Some(a) = c.controls.initial_amplitude_hz {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(self.error("controls", Some("initial_amplitude_hz"), "initial amplitude must be nonnegative"));
            }
        }
        self.transfer()?;
        self.cascade_rows()?;
        let scales = self.power_scales();
        if scales.is_empty() || scales.iter().any(|s| !s.is_finite()) {
            return Err(self.error("ensemble", Some("power_scales"), "power-scale grid must be non-empty and finite"));
        }
        self.optimizer_config().validate().map_err(|e| self.error("optimizer", None, e))?;
        self.problem()?.validate().map_err(|e| self.error("ensemble", Some("weights"), e))?;
        Ok(())
    }

    pub fn nucleus(&self) -> CliResult<Nucleus> {
        self.config.system.nucleus.parse().map_err(|e| self.error("system", Some("nucleus"), e))
    }

    pub fn offsets_ppm(&self) -> Vec<f64> {
        self.config.system.offsets_ppm.values()
    }

    pub fn power_scales(&self) -> Vec<f64> {
        self.config.ensemble.power_scales.as_ref().map(Grid::values).unwrap_or_else(|| vec![1.0])
    }

    pub fn dt(&self) -> f64 {
        self.config.controls.duration / self.config.controls.slices as f64
    }

    pub fn larmor(&self) -> CliResult<f64> {
        Ok(self.nucleus()?.larmor_frequency(self.config.system.field_tesla))
    }

    pub fn transfer(&self) -> CliResult<TransferSet> {
        let Some(t) = &self.config.transfer else {
            return Err(self.error("transfer", None, "missing [transfer] section"));
        };
        match (&t.preset, &t.pairs) {
            (Some(p), None) if p == "ur90y" => Ok(presets::ur90y()),
            (Some(p), None) => Err(self.error("transfer", Some("preset"), format!("unknown preset '{p}' (known: ur90y)"))),
            (None, Some(pairs)) => {
                let mut out = Vec::with_capacity(pairs.len());
                for [src, dst] in pairs {
                    let s = presets::named_operator(src).map_err(|e| self.error("transfer", Some("pairs"), e))?;
                    let d = presets::named_operator(dst).map_err(|e| self.error("transfer", Some("pairs"), e))?;
                    out.push((s.vectorize(), d.vectorize()));
                }
                TransferSet::new(out).map_err(|e| self.error("transfer", Some("pairs"), e))
            }
            (Some(_), Some(_)) => Err(self.error("transfer", None, "give either preset or pairs, not both")),
            (None, None) => Err(self.error("transfer", None, "transfer section needs a preset or explicit pairs")),
        }
    }

    /// Filters for one stage entry; a resonator expands to its two poles.
    pub fn stage(&self, spec: &StageSpec, dt: f64) -> CliResult<Vec<Arc<dyn Filter>>> {
        let err = |e: rawgrape_core::Error| self.error("distortions", Some("rows"), e);
        Ok(vec![match spec {
            StageSpec::Spf { pole, time_constant, detuning_hz } => {
                let p = match (pole, time_constant) {
                    (Some([re, im]), None) if detuning_hz.is_none() => FilterCoefficient(C64::new(*re, *im)),
                    (None, Some(tau)) if *tau > 0.0 => {
                        FilterCoefficient::from_rates(1.0 / tau, hz_to_rad_s(detuning_hz.unwrap_or(0.0)), 0.0, dt)
                    }
                    _ => {
                        return Err(self.error(
                            "distortions",
                            Some("rows"),
                            "spf needs either pole = [re, im] or a positive time_constant (with optional detuning_hz)",
                        ))
                    }
                };
                Arc::new(SinglePoleFilter::new(p).map_err(err)?)
            }
            StageSpec::Szf { zero: [re, im] } => Arc::new(SingleZeroFilter::new(FilterCoefficient(C64::new(*re, *im))).map_err(err)?),
            StageSpec::Rlc { q, detuning_hz } => {
                let w = self.larmor()?;
                let spec = RlcSpec { natural_frequency: w, quality_factor: *q, frame_frequency: w - hz_to_rad_s(detuning_hz.unwrap_or(0.0)) };
                let [a, b] = spec.stages(dt).map_err(err)?;
                return Ok(vec![Arc::new(a), Arc::new(b)]);
            }
            StageSpec::Fir { taps } => Arc::new(FirFilter::new(FirKernel::from_real(taps).map_err(err)?)),
            StageSpec::SatTanh { level_hz } => Arc::new(TanhSaturation::new(hz_to_rad_s(*level_hz)).map_err(err)?),
            StageSpec::SatRroot { level_hz, sharpness } => Arc::new(
                ReciprocalRootSaturation::new(SaturationSpec::new(hz_to_rad_s(*level_hz), *sharpness).map_err(err)?).map_err(err)?,
            ),
        }])
    }

    pub fn cascade_rows_for(&self, rows: &[Vec<StageSpec>]) -> CliResult<Vec<Cascade>> {
        let dt = self.dt();
        if rows.is_empty() {
            return Ok(vec![Cascade::new(Vec::new(), self.config.distortions.pad_slices)]);
        }
        rows.iter()
            .map(|row| {
                let mut stages = Vec::new();
                for s in row {
                    stages.extend(self.stage(s, dt)?);
                }
                Ok(Cascade::new(stages, self.config.distortions.pad_slices))
            })
            .collect()
    }

    pub fn cascade_rows(&self) -> CliResult<Vec<Cascade>> {
        self.cascade_rows_for(&self.config.distortions.rows)
    }

    pub fn controls(&self) -> Vec<Superoperator> {
        let ops = presets::spin_half_controls();
        ops[..self.config.controls.channels].to_vec()
    }

    /// Problem with explicit overrides for the swept quantities.
    pub fn problem_with(&self, offsets_ppm: &[f64], power_scales: &[f64], rows: &[Vec<StageSpec>]) -> CliResult<ControlProblem> {
        let nucleus = self.nucleus()?;
        let field = self.config.system.field_tesla;
        let offsets: Vec<f64> = offsets_ppm.iter().map(|&p| nucleus.ppm_to_rad_s(p, field)).collect();
        let relaxation = self.config.system.relaxation.map(|r| relaxation_from_rates(r.r1, r.r2));
        let c = &self.config.controls;
        let mut problem = ControlProblem::new(presets::drift_grid(&offsets, relaxation), self.controls(), self.transfer()?, c.duration, c.slices)
            .with_power_scales(power_scales.to_vec())
            .with_cascade_rows(self.cascade_rows_for(rows)?);
        if let Some(w) = &self.config.ensemble.weights {
            problem = problem.with_weights(w.clone());
        }
        Ok(problem)
    }

    pub fn problem(&self) -> CliResult<ControlProblem> {
        self.problem_with(&self.offsets_ppm(), &self.power_scales(), &self.config.distortions.rows)
    }

    pub fn amplitude_cap(&self) -> Option<f64> {
        self.config.controls.amplitude_cap_hz.map(hz_to_rad_s)
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        let d = OptimizerConfig::default();
        let o = &self.config.optimizer;
        let cap = self.amplitude_cap();
        let initial = self.config.controls.initial_amplitude_hz.map(hz_to_rad_s).or(cap).unwrap_or(d.initial_amplitude);
        OptimizerConfig {
            max_iterations: o.max_iterations.unwrap_or(d.max_iterations),
            gradient_tolerance: o.gradient_tolerance.unwrap_or(d.gradient_tolerance),
            memory_pairs: o.memory_pairs.unwrap_or(d.memory_pairs),
            c1: o.c1.unwrap_or(d.c1),
            c2: o.c2.unwrap_or(d.c2),
            amplitude_cap: cap,
            initial_amplitude: initial,
            seed: o.seed.unwrap_or(d.seed),
            ..d
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.config).expect("configuration serializes")
    }
}
