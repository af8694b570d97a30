//! L-BFGS minimization of ensemble infidelity with a strong-Wolfe line
//! search and an optional smooth amplitude cap.

use std::fmt;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::distortions::{saturate_tanh, ControlSequence, Filter, TanhSaturation};
use crate::error::{Error, Result};
use crate::grape::{ensemble_objective, ControlProblem, FidelityReport};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub max_iterations: usize,
    /// Stop once `max |∂(1-Ω)/∂x| × A ≤ gradient_tolerance`, where `A` is
    /// the amplitude cap, or `initial_amplitude` when uncapped.
    pub gradient_tolerance: f64,
    pub memory_pairs: usize,
    pub c1: f64,
    pub c2: f64,
    /// Upper bound on the amplitude of each quadrature pair, rad/s.
    pub amplitude_cap: Option<f64>,
    /// Scale of the random initial guess and of the first trial step, rad/s.
    pub initial_amplitude: f64,
    pub seed: u64,
    /// Objective evaluations allowed per line search.
    pub max_line_search_evaluations: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            max_iterations: 500,
            gradient_tolerance: 1e-8,
            memory_pairs: 20,
            c1: 1e-4,
            c2: 0.9,
            amplitude_cap: None,
            initial_amplitude: 2.0 * std::f64::consts::PI * 10e3,
            seed: 0,
            max_line_search_evaluations: 30,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::Domain(format!("line search needs 0 < c1 < c2 < 1, got c1={} c2={}", self.c1, self.c2)));
        }
        if self.memory_pairs == 0 {
            return Err(Error::Domain("memory_pairs must be at least 1".into()));
        }
        if !(self.gradient_tolerance >= 0.0) {
            return Err(Error::Domain("gradient_tolerance must be nonnegative".into()));
        }
        if let Some(cap) = self.amplitude_cap {
            if !(cap > 0.0) || !cap.is_finite() {
                return Err(Error::Domain(format!("amplitude cap must be positive, got {cap}")));
            }
        }
        if !(self.initial_amplitude >= 0.0) || !self.initial_amplitude.is_finite() {
            return Err(Error::Domain("initial_amplitude must be finite and nonnegative".into()));
        }
        if self.max_line_search_evaluations == 0 {
            return Err(Error::Domain("max_line_search_evaluations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientConverged,
    IterationCap,
    LineSearchFailure,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::GradientConverged => "gradient-converged",
            Termination::IterationCap => "iteration-cap",
            Termination::LineSearchFailure => "line-search-failure",
        })
    }
}

#[derive(Debug, Clone)]
pub struct OptimizationResult {
    pub waveform: ControlSequence,
    /// Infidelity of the starting point followed by one entry per accepted
    /// step.
    pub infidelity_trace: Vec<f64>,
    pub final_report: FidelityReport,
    pub termination: Termination,
    pub evaluations: usize,
}

impl OptimizationResult {
    pub fn iterations(&self) -> usize {
        self.infidelity_trace.len() - 1
    }
}

/// Smooth random waveform: uniform noise low-passed forward and backward by
/// a single-pole filter with a time constant of N/20 slices, then scaled to
/// an RMS of `amplitude_scale / 3`.
pub fn initial_guess(k: usize, n: usize, dt: f64, amplitude_scale: f64, seed: u64) -> Result<ControlSequence> {
    let mut out = ControlSequence::zeros(k, n, dt)?;
    if amplitude_scale == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = (-20.0 / n as f64).exp();
    let mut v = DMatrix::from_fn(k, n, |_, _| rng.gen_range(-1.0..1.0));
    for mut row in v.row_iter_mut() {
        let mut acc = 0.0;
        for x in row.iter_mut() {
            acc = (1.0 - p) * *x + p * acc;
            *x = acc;
        }
        let mut acc = 0.0;
        for x in row.iter_mut().rev() {
            acc = (1.0 - p) * *x + p * acc;
            *x = acc;
        }
    }
    let rms = (v.norm_squared() / v.len() as f64).sqrt();
    if rms > 0.0 {
        v *= amplitude_scale / (3.0 * rms);
    }
    out = out.with_values(v)?;
    Ok(out)
}

/// `cap·tanh(|x|/cap)` on each quadrature pair (phase kept), or on each
/// channel separately when the channel count is odd.
#[derive(Debug, Clone, Copy)]
enum Clamp {
    Pairs(TanhSaturation),
    Channels(f64),
}

impl Clamp {
    fn new(cap: f64, channels: usize) -> Result<Self> {
        Ok(if channels % 2 == 0 { Clamp::Pairs(TanhSaturation::new(cap)?) } else { Clamp::Channels(cap) })
    }

    fn apply(&self, x: &ControlSequence) -> Result<ControlSequence> {
        match self {
            Clamp::Pairs(s) => {
                // tanh rounds to 1 for large arguments, which can leave the
                // pair magnitude an ulp above the cap.
                let cap = s.level();
                let mut v = s.apply(x)?.into_values();
                for pair in 0..v.nrows() / 2 {
                    for n in 0..v.ncols() {
                        let r = v[(2 * pair, n)].hypot(v[(2 * pair + 1, n)]);
                        if r > cap {
                            let shrink = cap / r * (1.0 - 4.0 * f64::EPSILON);
                            v[(2 * pair, n)] *= shrink;
                            v[(2 * pair + 1, n)] *= shrink;
                        }
                    }
                }
                x.with_values(v)
            }
            Clamp::Channels(cap) => {
                let (v, _) = saturate_tanh(x.values().as_slice(), *cap)?;
                x.with_values(DMatrix::from_vec(x.channels(), x.slices(), v))
            }
        }
    }

    fn vjp(&self, x: &ControlSequence, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Clamp::Pairs(s) => s.vjp(x, g),
            Clamp::Channels(cap) => {
                let (_, d) = saturate_tanh(x.values().as_slice(), *cap)?;
                Ok(g.component_mul(&DMatrix::from_vec(x.channels(), x.slices(), d)))
            }
        }
    }

    /// Preimage of a waveform. Amplitudes above 99% of the cap are pulled
    /// down to it; deeper in the tanh tail the parameters would barely move.
    fn inverse(&self, c: &ControlSequence) -> Result<ControlSequence> {
        const EDGE: f64 = 0.99;
        let mut v = c.values().clone();
        match self {
            Clamp::Pairs(s) => {
                let cap = s.level();
                for pair in 0..v.nrows() / 2 {
                    for n in 0..v.ncols() {
                        let r = v[(2 * pair, n)].hypot(v[(2 * pair + 1, n)]);
                        if r > 0.0 {
                            let scale = cap * (r / cap).min(EDGE).atanh() / r;
                            v[(2 * pair, n)] *= scale;
                            v[(2 * pair + 1, n)] *= scale;
                        }
                    }
                }
            }
            Clamp::Channels(cap) => v.apply(|x| *x = cap * (*x / cap).clamp(-EDGE, EDGE).atanh()),
        }
        c.with_values(v)
    }
}

struct Evaluation {
    infidelity: f64,
    gradient: DMatrix<f64>,
    waveform: ControlSequence,
    report: FidelityReport,
}

struct Objective<'a> {
    problem: &'a ControlProblem,
    template: ControlSequence,
    clamp: Option<Clamp>,
    evaluations: usize,
}

impl Objective<'_> {
    fn evaluate(&mut self, x: &DMatrix<f64>) -> Result<Evaluation> {
        self.evaluations += 1;
        let xs = self.template.with_values(x.clone())?;
        let waveform = match &self.clamp {
            Some(c) => c.apply(&xs)?,
            None => xs.clone(),
        };
        let mut report = ensemble_objective(&waveform, self.problem)?;
        let g_wave = report.gradient.take().expect("objective returns a gradient");
        let g_x = match &self.clamp {
            Some(c) => c.vjp(&xs, &g_wave)?,
            None => g_wave,
        };
        // Minimizing 1 - Ω.
        let gradient = -g_x;
        if !report.total.is_finite() || gradient.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("objective or gradient is not finite".into()));
        }
        report.gradient = Some(-&gradient);
        Ok(Evaluation { infidelity: 1.0 - report.total, gradient, waveform, report })
    }
}

fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

struct History {
    s: Vec<DMatrix<f64>>,
    y: Vec<DMatrix<f64>>,
    rho: Vec<f64>,
    capacity: usize,
}

impl History {
    fn new(capacity: usize) -> Self {
        History { s: Vec::new(), y: Vec::new(), rho: Vec::new(), capacity }
    }

    fn clear(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    fn push(&mut self, s: DMatrix<f64>, y: DMatrix<f64>) {
        let sy = dot(&s, &y);
        if !(sy > 1e-300) {
            return;
        }
        if self.s.len() == self.capacity {
            self.s.remove(0);
            self.y.remove(0);
            self.rho.remove(0);
        }
        self.s.push(s);
        self.y.push(y);
        self.rho.push(1.0 / sy);
    }

    /// Two-loop recursion: returns `H g`.
    fn apply(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let m = self.s.len();
        let mut q = g.clone();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            alpha[i] = self.rho[i] * dot(&self.s[i], &q);
            q -= &self.y[i] * alpha[i];
        }
        if m > 0 {
            let gamma = dot(&self.s[m - 1], &self.y[m - 1]) / self.y[m - 1].norm_squared();
            q *= gamma;
        }
        for i in 0..m {
            let beta = self.rho[i] * dot(&self.y[i], &q);
            q += &self.s[i] * (alpha[i] - beta);
        }
        q
    }
}

struct Step {
    x: DMatrix<f64>,
    eval: Evaluation,
    wolfe: bool,
}

/// Strong-Wolfe line search (bracketing then safeguarded interpolation).
/// Falls back to the best sufficient-decrease point when the evaluation
/// budget runs out; returns `None` if nothing decreased the objective.
fn line_search(
    obj: &mut Objective<'_>,
    x: &DMatrix<f64>,
    f0: f64,
    g0: &DMatrix<f64>,
    d: &DMatrix<f64>,
    alpha0: f64,
    cfg: &OptimizerConfig,
) -> Result<Option<Step>> {
    let dphi0 = dot(g0, d);
    let budget = cfg.max_line_search_evaluations;
    let mut used = 0;
    let mut best: Option<(f64, Step)> = None;

    let probe = |obj: &mut Objective<'_>, a: f64, used: &mut usize| -> Result<(f64, f64, DMatrix<f64>, Evaluation)> {
        *used += 1;
        let xa = x + d * a;
        let e = obj.evaluate(&xa)?;
        let dphi = dot(&e.gradient, d);
        Ok((e.infidelity, dphi, xa, e))
    };
    let armijo = |a: f64, f: f64| f <= f0 + cfg.c1 * a * dphi0 && f < f0;
    let curvature = |dphi: f64| dphi.abs() <= -cfg.c2 * dphi0;

    let keep = |best: &mut Option<(f64, Step)>, a: f64, f: f64, xa: DMatrix<f64>, e: Evaluation| {
        if armijo(a, f) && best.as_ref().map_or(true, |(bf, _)| f < *bf) {
            *best = Some((f, Step { x: xa, eval: e, wolfe: false }));
        }
    };

    let (mut a_lo, mut f_lo, mut dphi_lo) = (0.0, f0, dphi0);
    let mut a_hi;
    let mut f_hi;
    let mut a = alpha0;
    let mut first = true;
    // Bracketing phase.
    loop {
        if used >= budget {
            return Ok(best.map(|(_, s)| s));
        }
        let (f, dphi, xa, e) = probe(obj, a, &mut used)?;
        if !armijo(a, f) || (!first && f >= f_lo) {
            a_hi = a;
            f_hi = f;
            break;
        }
        if curvature(dphi) {
            return Ok(Some(Step { x: xa, eval: e, wolfe: true }));
        }
        keep(&mut best, a, f, xa, e);
        if dphi >= 0.0 {
            a_hi = a_lo;
            f_hi = f_lo;
            a_lo = a;
            f_lo = f;
            dphi_lo = dphi;
            break;
        }
        a_lo = a;
        f_lo = f;
        dphi_lo = dphi;
        a *= 2.0;
        first = false;
    }
    // Zoom phase.
    while used < budget {
        let width = a_hi - a_lo;
        let denom = 2.0 * (f_hi - f_lo - dphi_lo * width);
        let mut a = if denom > 0.0 { a_lo - dphi_lo * width * width / denom } else { a_lo + 0.5 * width };
        let (lo, hi) = if width > 0.0 { (a_lo + 0.1 * width, a_hi - 0.1 * width) } else { (a_hi - 0.1 * width, a_lo + 0.1 * width) };
        if !(a >= lo && a <= hi) {
            a = a_lo + 0.5 * width;
        }
        if (a - a_lo).abs() <= 1e-16 * a_lo.abs().max(1e-300) {
            break;
        }
        let (f, dphi, xa, e) = probe(obj, a, &mut used)?;
        if !armijo(a, f) || f >= f_lo {
            a_hi = a;
            f_hi = f;
        } else {
            if curvature(dphi) {
                return Ok(Some(Step { x: xa, eval: e, wolfe: true }));
            }
            keep(&mut best, a, f, xa, e);
            if dphi * (a_hi - a_lo) >= 0.0 {
                a_hi = a_lo;
                f_hi = f_lo;
            }
            a_lo = a;
            f_lo = f;
            dphi_lo = dphi;
        }
    }
    Ok(best.map(|(_, s)| s))
}

/// Minimizes `1 - Ω` from a seeded random initial guess. With an amplitude
/// cap the guess is drawn for the unclamped parameters, so the starting
/// waveform is its clamped image.
pub fn minimize(problem: &ControlProblem, config: &OptimizerConfig) -> Result<OptimizationResult> {
    config.validate()?;
    problem.validate()?;
    let guess = initial_guess(problem.channels(), problem.n_slices, problem.dt(), config.initial_amplitude, config.seed)?;
    run(problem, config, guess)
}

/// Minimizes `1 - Ω` starting from `initial`. With an amplitude cap the
/// optimizer works on the preimage of `initial` under the clamp, with
/// amplitudes above 99% of the cap pulled down to it.
pub fn minimize_from(problem: &ControlProblem, config: &OptimizerConfig, initial: &ControlSequence) -> Result<OptimizationResult> {
    config.validate()?;
    problem.validate()?;
    let start = match config.amplitude_cap {
        Some(cap) => Clamp::new(cap, problem.channels())?.inverse(initial)?,
        None => initial.clone(),
    };
    run(problem, config, start)
}

fn run(problem: &ControlProblem, config: &OptimizerConfig, start: ControlSequence) -> Result<OptimizationResult> {
    let clamp = config.amplitude_cap.map(|cap| Clamp::new(cap, problem.channels())).transpose()?;
    let mut obj = Objective { problem, template: start.clone(), clamp, evaluations: 0 };

    let mut x = start.into_values();
    let mut current = obj.evaluate(&x)?;
    let mut trace = vec![current.infidelity];
    let amplitude = config.amplitude_cap.unwrap_or(config.initial_amplitude);
    let threshold = if amplitude > 0.0 { config.gradient_tolerance / amplitude } else { config.gradient_tolerance };
    let step_scale = if amplitude > 0.0 { amplitude } else { x.amax() };
    let mut history = History::new(config.memory_pairs);
    let mut termination = Termination::IterationCap;
    let mut iteration = 0;

    log::info!("iter=0 infidelity={:.12e} grad_norm={:.6e}", current.infidelity, current.gradient.amax());
    loop {
        let gnorm = current.gradient.amax();
        if gnorm <= threshold {
            termination = Termination::GradientConverged;
            break;
        }
        if iteration >= config.max_iterations {
            break;
        }
        let mut step = None;
        // Quasi-Newton direction first; on failure retry once along the
        // steepest-descent direction with a fresh history.
        for attempt in 0..2 {
            let fresh = attempt == 1 || history.s.is_empty();
            if attempt == 1 && history.s.is_empty() {
                break;
            }
            if attempt == 1 {
                history.clear();
            }
            let mut d = -history.apply(&current.gradient);
            if dot(&d, &current.gradient) >= 0.0 {
                history.clear();
                d = -current.gradient.clone();
            }
            let alpha0 = if fresh && history.s.is_empty() {
                if step_scale > 0.0 { 0.1 * step_scale / d.amax() } else { 1.0 / d.amax() }
            } else {
                1.0
            };
            step = line_search(&mut obj, &x, current.infidelity, &current.gradient, &d, alpha0, config)?;
            if step.is_some() {
                break;
            }
        }
        let Some(step) = step else {
            termination = Termination::LineSearchFailure;
            log::warn!("line search failed at iteration {iteration}");
            break;
        };
        iteration += 1;
        let s = &step.x - &x;
        let y = &step.eval.gradient - &current.gradient;
        if step.wolfe || dot(&s, &y) > 0.0 {
            history.push(s, y);
        }
        x = step.x;
        current = step.eval;
        trace.push(current.infidelity);
        log::info!(
            "iter={} infidelity={:.12e} grad_norm={:.6e}",
            iteration,
            current.infidelity,
            current.gradient.amax()
        );
    }

    Ok(OptimizationResult {
        waveform: current.waveform,
        infidelity_trace: trace,
        final_report: current.report,
        termination,
        evaluations: obj.evaluations,
    })
}
