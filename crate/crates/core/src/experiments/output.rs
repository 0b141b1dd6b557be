//! Result files.
//!
//! `emit_results` writes into one directory:
//!
//! * `results.csv`: one row per point; the header depends on the run kind
//!   and is given by [`Tabular::HEADER`].
//! * `summary.json`: id, kind, pass/fail, checks, fits and points.
//! * `config.snapshot`: the canonical config text.
//! * `fit_<name>.csv`: `x,y,fit,used` for every log-log fit.
//! * `rates.csv` for rates runs: `n,alpha,gradient_rate,beta_star` then
//!   `alpha_0..alpha_kmax`.
//!
//! Floats are written with 12 significant digits and JSON keys are sorted,
//! so identical records give identical bytes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use super::{DecayPoint, LocalGapPoint, Points, RatesRow, RunRecord, SphereSummary, SweepPoint};
use crate::error::Result;
use crate::geometry::fmt12;
use crate::ode::{lower_envelope, HCertificate, OdeSolution};
use crate::pde2d::SphereSolution;

/// A row type of `results.csv`.
pub trait Tabular {
    const HEADER: &'static [&'static str];
    fn cells(&self) -> Vec<String>;
}

impl Tabular for RatesRow {
    const HEADER: &'static [&'static str] =
        &["n", "alpha", "potential_rate", "gradient_rate", "beta_star", "beta_sufficient", "beta_mismatches"];

    fn cells(&self) -> Vec<String> {
        let r = &self.rates;
        vec![
            self.n.to_string(),
            fmt12(r.alpha),
            fmt12(self.potential_rate),
            fmt12(self.gradient_rate),
            fmt12(r.beta_star),
            fmt12(r.beta_sufficient),
            self.beta_mismatches.to_string(),
        ]
    }
}

impl Tabular for SweepPoint {
    const HEADER: &'static [&'static str] = &[
        "n",
        "eps",
        "u11",
        "sup_gradient",
        "u11_coarse",
        "sup_gradient_coarse",
        "u11_delta",
        "gradient_delta",
        "c1",
        "h_sqrt_eps",
        "triangle_error",
        "w_min_relative",
        "iterations",
        "accepted",
    ];

    fn cells(&self) -> Vec<String> {
        vec![
            self.n.to_string(),
            fmt12(self.eps),
            fmt12(self.fine.u11),
            fmt12(self.fine.sup_gradient),
            fmt12(self.coarse.u11),
            fmt12(self.coarse.sup_gradient),
            fmt12(self.u11_delta),
            fmt12(self.gradient_delta),
            fmt12(self.consistency.c1),
            fmt12(self.consistency.h_at_sqrt_eps),
            fmt12(self.consistency.relative_error),
            fmt12(self.fine.w_min_relative.min(self.coarse.w_min_relative)),
            self.fine.report.iterations.to_string(),
            self.accepted.to_string(),
        ]
    }
}

impl Tabular for HCertificate {
    const HEADER: &'static [&'static str] = &[
        "n",
        "eps",
        "beta",
        "alpha",
        "lower_margin",
        "upper_margin",
        "envelope_constant",
        "envelope_argmin",
        "spread",
        "monotone",
        "bounds_hold",
    ];

    fn cells(&self) -> Vec<String> {
        vec![
            self.n.to_string(),
            fmt12(self.eps),
            fmt12(self.beta),
            fmt12(self.alpha),
            fmt12(self.lower_margin),
            fmt12(self.upper_margin),
            fmt12(self.envelope_constant),
            fmt12(self.envelope_argmin),
            fmt12(self.spread),
            self.monotone.to_string(),
            self.bounds_hold.to_string(),
        ]
    }
}

impl Tabular for DecayPoint {
    const HEADER: &'static [&'static str] = &["n", "k", "eps", "alpha_k", "max_ratio", "argmax", "slope_near_one", "holds"];

    fn cells(&self) -> Vec<String> {
        vec![
            self.n.to_string(),
            self.k.to_string(),
            fmt12(self.eps),
            fmt12(self.alpha_k),
            fmt12(self.max_ratio),
            fmt12(self.argmax),
            fmt12(self.slope_near_one),
            self.holds.to_string(),
        ]
    }
}

impl Tabular for LocalGapPoint {
    const HEADER: &'static [&'static str] = &["n", "eps", "shape", "radius", "weight", "sup_gradient", "argmax_r", "argmax_xn"];

    fn cells(&self) -> Vec<String> {
        vec![
            self.n.to_string(),
            fmt12(self.eps),
            self.shape.name().to_string(),
            fmt12(self.radius),
            fmt12(self.weight),
            fmt12(self.sup_gradient),
            fmt12(self.argmax[0]),
            fmt12(self.argmax[1]),
        ]
    }
}

fn table<T: Tabular>(rows: &[T]) -> String {
    let mut s = T::HEADER.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.cells().join(","));
        s.push('\n');
    }
    s
}

pub fn results_csv(points: &Points) -> String {
    match points {
        Points::Rates(v) => table(v),
        Points::Sweep(v) => table(v),
        Points::HCertify(v) => table(v),
        Points::ModeDecay(v) => table(v),
        Points::LocalGap(v) => table(v),
    }
}

/// Rounds every float to 12 significant digits.
fn round_floats(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().expect("f64 number");
            let r: f64 = fmt12(x).parse().expect("fmt12 output parses");
            json!(r)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_floats).collect()),
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, v)| (k, round_floats(v))).collect()),
        other => other,
    }
}

fn to_stable_json<T: Serialize>(value: &T) -> Result<String> {
    let v = round_floats(serde_json::to_value(value)?);
    let mut s = serde_json::to_string_pretty(&v)?;
    s.push('\n');
    Ok(s)
}

pub fn summary_json(rec: &RunRecord) -> Result<String> {
    let fits: serde_json::Map<String, Value> = rec
        .fits
        .iter()
        .map(|f| {
            let v = json!({
                "slope": f.slope,
                "intercept": f.intercept,
                "max_residual": f.max_residual,
                "target": f.target,
                "x_label": f.x_label,
                "y_label": f.y_label,
                "samples": f.used.iter().filter(|u| **u).count(),
                "excluded_x": f.x.iter().zip(&f.used).filter(|(_, u)| !**u).map(|(x, _)| *x).collect::<Vec<_>>(),
            });
            (f.name.clone(), v)
        })
        .collect();
    let value = json!({
        "id": rec.config.id,
        "kind": rec.config.kind.name(),
        "passed": rec.passed(),
        "checks": rec.checks,
        "fits": fits,
        "notes": rec.notes,
        "points": rec.points,
        "tolerances": rec.config.tolerances,
    });
    to_stable_json(&value)
}

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    let mut f = fs::File::create(&path)?;
    f.write_all(text.as_bytes())?;
    Ok(path)
}

/// Exponent table with one `alpha_k` column per mode.
pub fn rates_table_csv(rows: &[RatesRow]) -> String {
    let k_max = rows.iter().map(|r| r.rates.alpha_k.len()).max().unwrap_or(0);
    let mut s = String::from("n,alpha,gradient_rate,beta_star");
    for k in 0..k_max {
        s.push_str(&format!(",alpha_{k}"));
    }
    s.push('\n');
    for r in rows {
        s.push_str(&format!("{},{},{},{}", r.n, fmt12(r.rates.alpha), fmt12(r.gradient_rate), fmt12(r.rates.beta_star)));
        for a in &r.rates.alpha_k {
            s.push_str(&format!(",{}", fmt12(*a)));
        }
        s.push('\n');
    }
    s
}

/// Writes the files listed in the module docs and returns their paths.
pub fn emit_results(rec: &RunRecord, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut out = vec![
        write(dir, "results.csv", &results_csv(&rec.points))?,
        write(dir, "summary.json", &summary_json(rec)?)?,
        write(dir, "config.snapshot", &rec.config.emit())?,
    ];
    if let Points::Rates(rows) = &rec.points {
        out.push(write(dir, "rates.csv", &rates_table_csv(rows))?);
    }
    for f in &rec.fits {
        let mut s = String::from("x,y,fit,used\n");
        for ((x, y), u) in f.x.iter().zip(&f.y).zip(&f.used) {
            s.push_str(&format!("{},{},{},{}\n", fmt12(*x), fmt12(*y), fmt12(f.predict(*x)), u));
        }
        out.push(write(dir, &format!("fit_{}.csv", f.name), &s)?);
    }
    Ok(out)
}

/// `h_profile.csv` (`r,h,r_alpha,lower_envelope,ratio`) and
/// `h_certificate.json`.
pub fn emit_h_profile(sol: &OdeSolution, cert: &HCertificate, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut s = String::from("r,h,r_alpha,lower_envelope,ratio\n");
    for (&r, &h) in sol.radii().iter().zip(&sol.values) {
        let env = lower_envelope(r, cert.eps, cert.alpha, cert.beta);
        s.push_str(&format!("{},{},{},{},{}\n", fmt12(r), fmt12(h), fmt12(r.powf(cert.alpha)), fmt12(env), fmt12(h / env)));
    }
    Ok(vec![write(dir, "h_profile.csv", &s)?, write(dir, "h_certificate.json", &to_stable_json(cert)?)?])
}

/// `field.csv` and `summary.json` for one two-sphere solve.
pub fn emit_sphere_solution(sol: &SphereSolution, summary: &SphereSummary, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut field = Vec::new();
    sol.field.write_csv(&mut field)?;
    let path = dir.join("field.csv");
    fs::write(&path, field)?;
    Ok(vec![path, write(dir, "summary.json", &to_stable_json(summary)?)?])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiments::{run, ExperimentConfig, ExperimentKind};

    #[test]
    fn rounding_is_to_twelve_digits() {
        let v = round_floats(json!({"b": 0.1 + 0.2, "a": [1.0 / 3.0, 2], "c": f64::NAN}));
        assert_eq!(serde_json::to_string(&v).unwrap(), r#"{"a":[0.333333333333,2],"b":0.3,"c":null}"#);
    }

    #[test]
    fn rates_output_is_byte_stable() {
        let cfg = ExperimentConfig::default_for(ExperimentKind::Rates);
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let files = emit_results(&run(&cfg).unwrap(), a.path()).unwrap();
        emit_results(&run(&cfg).unwrap(), b.path()).unwrap();
        assert_eq!(files.len(), 4);
        for name in ["results.csv", "summary.json", "config.snapshot", "rates.csv"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        let csv = fs::read_to_string(a.path().join("results.csv")).unwrap();
        assert_eq!(csv.lines().count(), 19);
        assert!(csv.starts_with("n,alpha,"));
        let snap = fs::read_to_string(a.path().join("config.snapshot")).unwrap();
        assert_eq!(ExperimentConfig::parse(&snap).unwrap(), cfg);
    }
}
