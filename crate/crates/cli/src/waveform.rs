//! Plain-text waveform files.
//!
//! ```text
//! # channels=2 slices=500 dt=1.0000000000000000e-7 units=rad/s
//! c0,c1
//! 1.2345678901234567e5,-2.0000000000000000e3
//! ...
//! ```

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use rawgrape_core::distortions::ControlSequence;

use crate::error::{CliError, CliResult};

pub fn to_string(w: &ControlSequence) -> String {
    let (k, n) = (w.channels(), w.slices());
    let mut out = String::with_capacity(24 * k * (n + 2));
    writeln!(out, "# channels={k} slices={n} dt={:.16e} units=rad/s", w.dt()).unwrap();
    let names: Vec<String> = (0..k).map(|i| format!("c{i}")).collect();
    out.push_str(&names.join(","));
    out.push('\n');
    for s in 0..n {
        for c in 0..k {
            if c > 0 {
                out.push(',');
            }
            write!(out, "{:.16e}", w.values()[(c, s)]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse(text: &str, origin: &str) -> CliResult<ControlSequence> {
    let err = |line: usize, msg: String| CliError::Input(format!("{origin}:{line}: {msg}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));

    let (hline, header) = lines.next().ok_or_else(|| err(1, "empty waveform file".into()))?;
    let header = header.strip_prefix('#').ok_or_else(|| err(hline, "expected '# channels=... slices=... dt=...' header".into()))?;
    let (mut k, mut n, mut dt) = (None, None, None);
    for field in header.split_whitespace() {
        let (key, value) = field.split_once('=').ok_or_else(|| err(hline, format!("malformed header field '{field}'")))?;
        let bad = |_| err(hline, format!("bad value for '{key}': '{value}'"));
        match key {
            "channels" => k = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "slices" => n = Some(value.parse::<usize>().map_err(|e| bad(e.to_string()))?),
            "dt" => dt = Some(value.parse::<f64>().map_err(|e| bad(e.to_string()))?),
            "units" if value == "rad/s" => {}
            "units" => return Err(err(hline, format!("unsupported units '{value}', expected rad/s"))),
            _ => return Err(err(hline, format!("unknown header field '{key}'"))),
        }
    }
    let (k, n, dt) = match (k, n, dt) {
        (Some(k), Some(n), Some(dt)) => (k, n, dt),
        _ => return Err(err(hline, "header must give channels, slices and dt".into())),
    };

    let (cline, columns) = lines.next().ok_or_else(|| err(hline + 1, "missing column header row".into()))?;
    if columns.split(',').count() != k {
        return Err(err(cline, format!("column header has {} names for {k} channels", columns.split(',').count())));
    }

    let mut values = DMatrix::zeros(k, n);
    let mut rows = 0;
    for (line, row) in lines {
        if row.is_empty() {
            continue;
        }
        if rows == n {
            return Err(err(line, format!("more than the {n} declared slices")));
        }
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != k {
            return Err(err(line, format!("expected {k} values, found {}", fields.len())));
        }
        for (c, f) in fields.iter().enumerate() {
            values[(c, rows)] = f.trim().parse::<f64>().map_err(|_| err(line, format!("'{f}' is not a number")))?;
        }
        rows += 1;
    }
    if rows != n {
        return Err(err(cline, format!("header declares {n} slices but the file has {rows}")));
    }
    ControlSequence::new(values, dt).map_err(|e| CliError::Input(format!("{origin}: {e}")))
}

pub fn read(path: &Path) -> CliResult<ControlSequence> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    parse(&text, &path.display().to_string())
}

pub fn write(path: &Path, w: &ControlSequence) -> CliResult<()> {
    std::fs::write(path, to_string(w)).map_err(CliError::io(format!("writing {}", path.display())))
}
