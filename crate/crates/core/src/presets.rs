//! Nucleus constants, offset grids, standard transfer sets and reference
//! pulses for single spin-1/2 problems.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::distortions::ControlSequence;
use crate::error::{Error, Result};
use crate::grape::TransferSet;
use crate::spin::{build_spin_half_ops, DriftSpec, RealMat4, SpinOperator, Superoperator};

/// Spin-1/2 (and deuterium) nuclei with tabulated gyromagnetic ratios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Nucleus {
    H1,
    H2,
    C13,
    N15,
    F19,
    P31,
}

impl Nucleus {
    pub const ALL: [Nucleus; 6] = [Nucleus::H1, Nucleus::H2, Nucleus::C13, Nucleus::N15, Nucleus::F19, Nucleus::P31];

    /// γ/2π in MHz/T, sign included.
    pub fn gamma_mhz_per_tesla(self) -> f64 {
        match self {
            Nucleus::H1 => 42.577478,
            Nucleus::H2 => 6.536,
            Nucleus::C13 => 10.7084,
            Nucleus::N15 => -4.3173,
            Nucleus::F19 => 40.078,
            Nucleus::P31 => 17.235,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Nucleus::H1 => "1H",
            Nucleus::H2 => "2H",
            Nucleus::C13 => "13C",
            Nucleus::N15 => "15N",
            Nucleus::F19 => "19F",
            Nucleus::P31 => "31P",
        }
    }

    /// Magnitude of the Larmor frequency at `field` tesla, rad/s.
    pub fn larmor_frequency(self, field: f64) -> f64 {
        2.0 * PI * self.gamma_mhz_per_tesla().abs() * 1e6 * field
    }

    /// Converts a chemical-shift offset in ppm to an angular offset in rad/s.
    pub fn ppm_to_rad_s(self, ppm: f64, field: f64) -> f64 {
        ppm * 1e-6 * self.larmor_frequency(field)
    }
}

impl fmt::Display for Nucleus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Nucleus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_uppercase();
        Nucleus::ALL
            .into_iter()
            .find(|n| {
                let label = n.label().to_ascii_uppercase();
                let digits: String = label.chars().filter(|c| c.is_ascii_digit()).collect();
                let letters: String = label.chars().filter(|c| c.is_ascii_alphabetic()).collect();
                t == label || t == format!("{letters}{digits}")
            })
            .ok_or_else(|| Error::Domain(format!("unknown nucleus '{s}'")))
    }
}

/// `count` evenly spaced values from `min` to `max` inclusive.
pub fn linspace(min: f64, max: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.5 * (min + max)],
        _ => (0..count).map(|i| min + (max - min) * i as f64 / (count - 1) as f64).collect(),
    }
}

/// One drift per offset (rad/s), all sharing the same relaxation.
pub fn drift_grid(offsets: &[f64], relaxation: Option<RealMat4>) -> Vec<DriftSpec> {
    offsets.iter().map(|&w| DriftSpec { offset: w, relaxation }).collect()
}

/// `ad(S_X)`, `ad(S_Y)`: the two quadrature control generators.
pub fn spin_half_controls() -> Vec<Superoperator> {
    let o = build_spin_half_ops();
    vec![o.ad_sx, o.ad_sy]
}

/// Named single-spin operator: `Sx`, `Sy`, `Sz`, optionally prefixed by `-`.
pub fn named_operator(name: &str) -> Result<SpinOperator> {
    let o = build_spin_half_ops();
    let t = name.trim();
    let (neg, body) = match t.strip_prefix('-') {
        Some(rest) => (true, rest.trim()),
        None => (false, t.strip_prefix('+').unwrap_or(t).trim()),
    };
    let op = match body.to_ascii_lowercase().as_str() {
        "sx" => o.sx,
        "sy" => o.sy,
        "sz" => o.sz,
        _ => return Err(Error::Domain(format!("unknown operator '{name}' (expected Sx, Sy, Sz, optionally negated)"))),
    };
    Ok(if neg { -op } else { op })
}

/// 90° universal rotation about +Y: Sz→Sx, Sy→Sy, Sx→−Sz.
pub fn ur90y() -> TransferSet {
    let o = build_spin_half_ops();
    TransferSet::new(vec![
        (o.sz.vectorize(), o.sx.vectorize()),
        (o.sy.vectorize(), o.sy.vectorize()),
        (o.sx.vectorize(), (-o.sz).vectorize()),
    ])
    .expect("static transfer set is valid")
}

/// Rectangular pulse of flip angle `angle` (rad) and phase `phase` (rad,
/// 0 = +X, π/2 = +Y) lasting `duration` seconds on two quadrature channels.
pub fn hard_pulse(angle: f64, phase: f64, duration: f64, slices: usize) -> Result<ControlSequence> {
    if !(duration > 0.0) || slices == 0 {
        return Err(Error::Domain("hard pulse needs positive duration and at least one slice".into()));
    }
    let w1 = angle / duration;
    let mut v = DMatrix::zeros(2, slices);
    v.row_mut(0).fill(w1 * phase.cos());
    v.row_mut(1).fill(w1 * phase.sin());
    ControlSequence::new(v, duration / slices as f64)
}

/// Nutation frequency in Hz to angular amplitude in rad/s.
pub fn hz_to_rad_s(hz: f64) -> f64 {
    2.0 * PI * hz
}
