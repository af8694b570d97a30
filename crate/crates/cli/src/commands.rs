use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rawgrape_core::distortions::ControlSequence;
use rawgrape_core::grape::{ensemble_fidelity, ensemble_objective, ControlProblem};
use rawgrape_core::optimizer::{initial_guess, minimize, minimize_from, Termination};

use crate::config::{LoadedConfig, StageSpec};
use crate::error::{CliError, CliResult};
use crate::waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    /// Single offset, ppm.
    Offset,
    /// Single power scale.
    Power,
    /// Quality factor of every resonator stage.
    Q,
    /// Level of every saturation stage, Hz.
    Sat,
}

impl SweepParam {
    fn column(self) -> &'static str {
        match self {
            SweepParam::Offset => "offset_ppm",
            SweepParam::Power => "power_scale",
            SweepParam::Q => "q",
            SweepParam::Sat => "sat_level_hz",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub param: SweepParam,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl Sweep {
    pub fn values(&self) -> Vec<f64> {
        rawgrape_core::presets::linspace(self.lo, self.hi, self.count)
    }
}

impl FromStr for Sweep {
    type Err = CliError;

    /// `param=lo:hi:n`.
    fn from_str(s: &str) -> CliResult<Self> {
        let bad = |msg: &str| CliError::Input(format!("--sweep '{s}': {msg}"));
        let (name, range) = s.split_once('=').ok_or_else(|| bad("expected param=lo:hi:n"))?;
        let param = match name.trim() {
            "offset" => SweepParam::Offset,
            "power" => SweepParam::Power,
            "q" => SweepParam::Q,
            "sat" => SweepParam::Sat,
            other => return Err(bad(&format!("unknown parameter '{other}' (known: offset, power, q, sat)"))),
        };
        let parts: Vec<&str> = range.split(':').collect();
        if parts.len() != 3 {
            return Err(bad("expected param=lo:hi:n"));
        }
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad(&format!("'{t}' is not a number")));
        let count = parts[2].trim().parse::<usize>().map_err(|_| bad("point count must be a positive integer"))?;
        if count == 0 {
            return Err(bad("point count must be a positive integer"));
        }
        Ok(Sweep { param, lo: num(parts[0])?, hi: num(parts[1])?, count })
    }
}

pub fn output_dir(cfg: &LoadedConfig, flag: Option<&Path>) -> CliResult<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.config.output.directory.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("rawgrape-out"));
    std::fs::create_dir_all(&dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    Ok(dir)
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(CliError::io(format!("writing {}", path.display())))
}

fn check_waveform(cfg: &LoadedConfig, w: &ControlSequence, origin: &Path) -> CliResult<()> {
    let c = &cfg.config.controls;
    if w.channels() != c.channels || w.slices() != c.slices || (w.dt() - cfg.dt()).abs() > 1e-9 * cfg.dt() {
        return Err(CliError::Input(format!(
            "{}: waveform is {} channels x {} slices at dt={:e}, config expects {} x {} at dt={:e}",
            origin.display(),
            w.channels(),
            w.slices(),
            w.dt(),
            c.channels,
            c.slices,
            cfg.dt()
        )));
    }
    Ok(())
}

/// Per-member table: index, offset, power scale, cascade row, fidelity.
fn member_table(problem: &ControlProblem, offsets_ppm: &[f64], per_member: &[(usize, f64)]) -> String {
    let members = problem.member_list();
    let mut out = String::from("member,offset_ppm,power_scale,cascade_row,fidelity\n");
    for &(i, f) in per_member {
        let m = members[i];
        writeln!(out, "{i},{},{},{},{f:.15e}", offsets_ppm[m.drift], problem.power_scale_grid[m.power], m.cascade).unwrap();
    }
    out
}

pub fn optimize(cfg: &LoadedConfig, start: Option<&Path>, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let problem = cfg.problem()?;
    let mut opt = cfg.optimizer_config();
    if let Some(s) = seed {
        opt.seed = s;
    }
    let result = match start {
        Some(path) => {
            let w = waveform::read(path)?;
            check_waveform(cfg, &w, path)?;
            minimize_from(&problem, &opt, &w)?
        }
        None => minimize(&problem, &opt)?,
    };

    waveform::write(&out.join("waveform.txt"), &result.waveform)?;
    let mut trace = String::from("iteration,infidelity\n");
    for (i, f) in result.infidelity_trace.iter().enumerate() {
        writeln!(trace, "{i},{f:.15e}").unwrap();
    }
    write_file(&out.join("trace.csv"), &trace)?;
    write_file(&out.join("members.csv"), &member_table(&problem, &cfg.offsets_ppm(), &result.final_report.per_member))?;
    write_file(&out.join("config.toml"), &cfg.to_toml())?;

    println!(
        "fidelity={:.12} iterations={} termination={} output={}",
        result.final_report.total,
        result.iterations(),
        result.termination,
        out.display()
    );
    if result.termination == Termination::IterationCap {
        log::warn!("iteration cap reached before the gradient tolerance");
    }
    if result.termination == Termination::LineSearchFailure {
        return Err(CliError::NotConverged(format!(
            "line search failed after {} iterations; best waveform written to {}",
            result.iterations(),
            out.display()
        )));
    }
    Ok(())
}

/// Replaces (or appends) the stages a swept parameter acts on.
fn rows_with(rows: &[Vec<StageSpec>], param: SweepParam, value: f64) -> Vec<Vec<StageSpec>> {
    let mut rows: Vec<Vec<StageSpec>> = if rows.is_empty() { vec![Vec::new()] } else { rows.to_vec() };
    let mut touched = false;
    for row in rows.iter_mut() {
        for stage in row.iter_mut() {
            match (param, stage) {
                (SweepParam::Q, StageSpec::Rlc { q, .. }) => {
                    *q = value;
                    touched = true;
                }
                (SweepParam::Sat, StageSpec::SatTanh { level_hz } | StageSpec::SatRroot { level_hz, .. }) => {
                    *level_hz = value;
                    touched = true;
                }
                _ => {}
            }
        }
    }
    if !touched {
        let extra = match param {
            SweepParam::Q => StageSpec::Rlc { q: value, detuning_hz: None },
            _ => StageSpec::SatTanh { level_hz: value },
        };
        for row in rows.iter_mut() {
            row.push(extra.clone());
        }
    }
    rows
}

fn swept_problem(cfg: &LoadedConfig, point: &[(SweepParam, f64)]) -> CliResult<(ControlProblem, Vec<f64>)> {
    let mut offsets = cfg.offsets_ppm();
    let mut powers = cfg.power_scales();
    let mut rows = cfg.config.distortions.rows.clone();
    for &(param, v) in point {
        match param {
            SweepParam::Offset => offsets = vec![v],
            SweepParam::Power => powers = vec![v],
            SweepParam::Q | SweepParam::Sat => rows = rows_with(&rows, param, v),
        }
    }
    let mut problem = cfg.problem_with(&offsets, &powers, &rows)?;
    let n = problem.member_list().len();
    if problem.member_weights.as_ref().is_some_and(|w| w.len() != n) {
        // Configured weights describe the unswept ensemble.
        problem.member_weights = None;
    }
    Ok((problem, offsets))
}

/// Fidelity over a 0-, 1- or 2-parameter grid. Returns the long-format
/// table and the total at the first grid point.
pub fn evaluate_table(cfg: &LoadedConfig, w: &ControlSequence, sweeps: &[Sweep]) -> CliResult<(String, f64)> {
    if sweeps.len() > 2 {
        return Err(CliError::Input("at most two --sweep parameters are supported".into()));
    }
    if sweeps.len() == 2 && sweeps[0].param == sweeps[1].param {
        return Err(CliError::Input("the two --sweep parameters must differ".into()));
    }
    let mut header: Vec<&str> = sweeps.iter().map(|s| s.param.column()).collect();
    header.extend(["member", "fidelity"]);
    let mut table = header.join(",") + "\n";

    let mut points: Vec<Vec<(SweepParam, f64)>> = vec![Vec::new()];
    for s in sweeps {
        points = points
            .into_iter()
            .flat_map(|p| s.values().into_iter().map(move |v| [p.clone(), vec![(s.param, v)]].concat()))
            .collect();
    }
    let mut first = None;
    for point in &points {
        let (problem, _) = swept_problem(cfg, point)?;
        let report = ensemble_fidelity(w, &problem)?;
        first.get_or_insert(report.total);
        let prefix: String = point.iter().map(|(_, v)| format!("{v},")).collect();
        for (i, f) in &report.per_member {
            writeln!(table, "{prefix}{i},{f:.15e}").unwrap();
        }
        writeln!(table, "{prefix}all,{:.15e}", report.total).unwrap();
    }
    Ok((table, first.unwrap_or(f64::NAN)))
}

pub fn evaluate(cfg: &LoadedConfig, waveform_path: &Path, sweeps: &[Sweep], out: &Path) -> CliResult<()> {
    let w = waveform::read(waveform_path)?;
    check_waveform(cfg, &w, waveform_path)?;
    let (table, total) = evaluate_table(cfg, &w, sweeps)?;
    let path = out.join("evaluation.csv");
    write_file(&path, &table)?;
    if sweeps.is_empty() {
        println!("fidelity={total:.15e}");
    }
    println!("table={}", path.display());
    Ok(())
}

pub fn distort(cfg: &LoadedConfig, waveform_path: &Path, out: &Path) -> CliResult<()> {
    let w = waveform::read(waveform_path)?;
    check_waveform(cfg, &w, waveform_path)?;
    let rows = cfg.cascade_rows()?;
    let distorted = rows[0].apply(&w)?.into_output();
    waveform::write(&out.join("input.txt"), &w)?;
    waveform::write(&out.join("distorted.txt"), &distorted)?;
    println!("input={} distorted={}", out.join("input.txt").display(), out.join("distorted.txt").display());
    Ok(())
}

/// Largest slice count used by the gradient check.
pub const GRADCHECK_SLICES: usize = 32;
const GRADCHECK_OFFSETS: usize = 5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

/// Analytic versus central-difference gradient on a down-sized copy of the
/// configured problem. Returns the max relative error.
pub fn gradcheck_error(cfg: &LoadedConfig, seed: u64, corrupt: bool) -> CliResult<f64> {
    let full = cfg.problem()?;
    let n = full.n_slices.min(GRADCHECK_SLICES);
    let dt = full.dt();
    let offsets = cfg.offsets_ppm();
    let stride = offsets.len().div_ceil(GRADCHECK_OFFSETS);
    let picked: Vec<f64> = offsets.iter().step_by(stride).copied().collect();
    let mut problem = cfg.problem_with(&picked, &cfg.power_scales(), &cfg.config.distortions.rows)?;
    problem.duration = n as f64 * dt;
    problem.n_slices = n;
    problem.member_weights = None;

    let amp = cfg.optimizer_config().initial_amplitude.max(1.0);
    let w = initial_guess(problem.channels(), n, dt, amp, seed)?;
    let mut analytic = ensemble_objective(&w, &problem)?.gradient.expect("gradient requested");
    if corrupt {
        analytic[(0, 0)] += 0.5 * analytic.amax().max(f64::MIN_POSITIVE);
    }
    let h = 1e-6 * amp;
    let mut fd = analytic.clone();
    for idx in 0..analytic.len() {
        let mut plus = w.values().clone();
        let mut minus = w.values().clone();
        plus[idx] += h;
        minus[idx] -= h;
        let fp = ensemble_fidelity(&w.with_values(plus)?, &problem)?.total;
        let fm = ensemble_fidelity(&w.with_values(minus)?, &problem)?.total;
        fd[idx] = (fp - fm) / (2.0 * h);
    }
    let scale = fd.amax();
    Ok(if scale > 0.0 { (&analytic - &fd).amax() / scale } else { analytic.amax() })
}

pub fn gradcheck(cfg: &LoadedConfig, seed: u64, corrupt: bool) -> CliResult<()> {
    let err = gradcheck_error(cfg, seed, corrupt)?;
    println!("max_relative_error={err:.3e} tolerance={GRADCHECK_TOLERANCE:e}");
    if !(err <= GRADCHECK_TOLERANCE) {
        return Err(CliError::GradCheck(format!("max relative error {err:.3e} exceeds {GRADCHECK_TOLERANCE:e}")));
    }
    Ok(())
}
