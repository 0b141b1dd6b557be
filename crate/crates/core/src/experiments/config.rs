//! Experiment configuration files.
//!
//! The format is sectioned `key = value` text. Blank lines and lines
//! starting with `#` or `;` are ignored, section headers are `[name]`, and
//! list values are comma separated. Every key is optional; missing keys take
//! the defaults of the chosen `run.kind`, so `[run]\nkind = sweep` alone is a
//! complete file.
//!
//! ```text
//! [run]
//! kind = sweep            # rates | sweep | h_certify | mode_decay | local_gap
//! id = sweep-n3
//! dims = 3
//! modes = 1
//!
//! [eps]
//! start = 1e-2            # geometric schedule, strictly decreasing
//! stop = 1e-5
//! count = 6
//!
//! [sphere]
//! coarse = 256x128        # sigma x tau cells, tau count even
//! fine = 512x256
//! clustering = 10
//!
//! [local_gap]
//! shapes = unit_ball, perturbed
//! r0 = 0.5
//! a = 1
//! gamma = 0.5
//! b = 0.3
//! grid = 256x32
//! contrast = 100
//! data = uniform          # uniform | tilted
//!
//! [h]
//! beta = auto             # auto | number
//!
//! [rates]
//! beta_samples = 200
//!
//! [fit]
//! drop_preasymptotic = true
//! c1_window = 0.25, 4     # multiples of sqrt(eps)
//!
//! [tolerance]
//! u11_slope = 0.03
//! gradient_slope = 0.05
//! grid_delta = 0.01
//! triangle = 0.05
//! local_gap_slope = -0.24
//! envelope_spread = 0.2
//!
//! [solver]
//! rtol = 1e-10
//! max_iter = 50000
//!
//! [output]
//! dir = results
//! ```

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::geometry::InclusionShape;
use crate::linalg::Preconditioner;
use crate::pde2d::{SolveOptions, SPHERE_CLUSTERING};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Rates,
    Sweep,
    HCertify,
    ModeDecay,
    LocalGap,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [Self::Rates, Self::Sweep, Self::HCertify, Self::ModeDecay, Self::LocalGap];

    pub fn name(self) -> &'static str {
        match self {
            Self::Rates => "rates",
            Self::Sweep => "sweep",
            Self::HCertify => "h_certify",
            Self::ModeDecay => "mode_decay",
            Self::LocalGap => "local_gap",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let t = s.replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == t)
            .ok_or_else(|| format!("unknown experiment kind `{s}`"))
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Geometric `eps` schedule from `start` down to `stop`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsSchedule {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

impl EpsSchedule {
    pub fn single(eps: f64) -> Self {
        Self { start: eps, stop: eps, count: 1 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return domain("eps schedule is empty");
        }
        if !(self.start > 0.0 && self.stop > 0.0 && self.start.is_finite()) {
            return domain(format!("eps schedule needs positive values, got {} .. {}", self.start, self.stop));
        }
        if self.count == 1 && self.start != self.stop {
            return domain("a one-point eps schedule needs start = stop");
        }
        if self.count > 1 && !(self.start > self.stop) {
            return domain(format!("eps must strictly decrease, got start {} and stop {}", self.start, self.stop));
        }
        Ok(())
    }

    /// Values from `start` to `stop`, endpoints exact.
    pub fn values(&self) -> Vec<f64> {
        if self.count == 1 {
            return vec![self.start];
        }
        let (a, b) = (self.start.ln(), self.stop.ln());
        let m = (self.count - 1) as f64;
        (0..self.count)
            .map(|i| match i {
                0 => self.start,
                _ if i + 1 == self.count => self.stop,
                _ => (a + (b - a) * i as f64 / m).exp(),
            })
            .collect()
    }
}

/// `n1 x n2` cell counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSize {
    pub n1: usize,
    pub n2: usize,
}

impl GridSize {
    pub fn new(n1: usize, n2: usize) -> Self {
        Self { n1, n2 }
    }

    pub fn cells(&self) -> usize {
        self.n1 * self.n2
    }
}

impl fmt::Display for GridSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.n1, self.n2)
    }
}

impl FromStr for GridSize {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s.split_once(['x', 'X']).ok_or_else(|| format!("grid size `{s}` is not of the form AxB"))?;
        let n1 = a.trim().parse().map_err(|_| format!("bad cell count `{a}`"))?;
        let n2 = b.trim().parse().map_err(|_| format!("bad cell count `{b}`"))?;
        Ok(Self { n1, n2 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeChoice {
    UnitBall,
    Perturbed,
}

impl ShapeChoice {
    pub fn name(self) -> &'static str {
        match self {
            Self::UnitBall => "unit_ball",
            Self::Perturbed => "perturbed",
        }
    }
}

impl FromStr for ShapeChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "unit_ball" | "ball" => Ok(Self::UnitBall),
            "perturbed" => Ok(Self::Perturbed),
            _ => Err(format!("unknown shape `{s}`")),
        }
    }
}

/// Dirichlet data on the outer rim `rho = r0` of a local gap run. Both
/// choices have unit sup-norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryData {
    /// `1`.
    Uniform,
    /// `(2 + y_n / eps) / 3`, ranging over `[1/3, 1]`.
    Tilted,
}

impl BoundaryData {
    pub fn name(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Tilted => "tilted",
        }
    }

    pub fn value(self, yn: f64, eps: f64) -> f64 {
        match self {
            Self::Uniform => 1.0,
            Self::Tilted => (2.0 + yn / eps) / 3.0,
        }
    }
}

impl FromStr for BoundaryData {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "tilted" => Ok(Self::Tilted),
            _ => Err(format!("unknown boundary data `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BetaChoice {
    /// The exact subsolution threshold of each dimension.
    Auto,
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereSettings {
    pub coarse: GridSize,
    pub fine: GridSize,
    pub clustering: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalGapSettings {
    pub shapes: Vec<ShapeChoice>,
    pub r0: f64,
    pub a: f64,
    pub gamma: f64,
    pub b: f64,
    pub grid: GridSize,
    /// Largest to smallest radial cell size.
    pub contrast: f64,
    pub data: BoundaryData,
}

impl LocalGapSettings {
    pub fn shape(&self, choice: ShapeChoice) -> Result<InclusionShape> {
        match choice {
            ShapeChoice::UnitBall => InclusionShape::unit_ball(self.r0),
            ShapeChoice::Perturbed => InclusionShape::quadratic_perturbed(self.a, self.gamma, self.b, self.r0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    /// Drop the largest-`eps` point when its residual exceeds twice the
    /// median residual.
    pub drop_preasymptotic: bool,
    /// Window for the `C1` fit in multiples of `sqrt(eps)`.
    pub c1_window: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub u11_slope: f64,
    pub gradient_slope: f64,
    pub grid_delta: f64,
    pub triangle: f64,
    /// Upper bound on the local gap log-slope.
    pub local_gap_slope: f64,
    pub envelope_spread: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    pub rtol: f64,
    pub max_iter: usize,
}

impl SolverSettings {
    pub fn options(&self) -> SolveOptions {
        SolveOptions { rtol: self.rtol, max_iter: self.max_iter, preconditioner: Preconditioner::IncompleteCholesky }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    pub kind: ExperimentKind,
    pub dims: Vec<u32>,
    pub modes: Vec<u32>,
    pub eps: EpsSchedule,
    pub sphere: SphereSettings,
    pub local_gap: LocalGapSettings,
    pub beta: BetaChoice,
    pub beta_samples: usize,
    pub fit: FitSettings,
    pub tolerances: Tolerances,
    pub solver: SolverSettings,
    pub out_dir: String,
}

impl ExperimentConfig {
    pub fn default_for(kind: ExperimentKind) -> Self {
        let (dims, modes, eps) = match kind {
            ExperimentKind::Rates => ((3..=20).collect(), (0..=5).collect(), EpsSchedule::single(1e-3)),
            ExperimentKind::Sweep => (vec![3], vec![1], EpsSchedule { start: 1e-2, stop: 1e-5, count: 6 }),
            ExperimentKind::HCertify => (vec![3, 4, 5], vec![1], EpsSchedule { start: 1e-2, stop: 1e-4, count: 3 }),
            ExperimentKind::ModeDecay => (vec![3, 4], (1..=5).collect(), EpsSchedule { start: 1e-2, stop: 1e-3, count: 2 }),
            ExperimentKind::LocalGap => (vec![3], vec![1], EpsSchedule::single(1e-3)),
        };
        Self {
            id: kind.name().replace('_', "-"),
            kind,
            dims,
            modes,
            eps,
            sphere: SphereSettings {
                coarse: GridSize::new(256, 128),
                fine: GridSize::new(512, 256),
                clustering: SPHERE_CLUSTERING,
            },
            local_gap: LocalGapSettings {
                shapes: vec![ShapeChoice::UnitBall, ShapeChoice::Perturbed],
                r0: 0.5,
                a: 1.0,
                gamma: 0.5,
                b: 0.3,
                grid: GridSize::new(256, 32),
                contrast: 100.0,
                data: BoundaryData::Uniform,
            },
            beta: BetaChoice::Auto,
            beta_samples: 200,
            fit: FitSettings { drop_preasymptotic: true, c1_window: (0.25, 4.0) },
            tolerances: Tolerances {
                u11_slope: 0.03,
                gradient_slope: 0.05,
                grid_delta: 0.01,
                triangle: 0.05,
                local_gap_slope: -0.24,
                envelope_spread: 0.2,
            },
            solver: SolverSettings { rtol: 1e-10, max_iter: 50_000 },
            out_dir: "results".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.eps.validate()?;
        if self.id.is_empty() || self.id.contains(char::is_whitespace) {
            return domain(format!("run id `{}` must be non-empty without whitespace", self.id));
        }
        if self.dims.is_empty() || self.dims.iter().any(|&n| n < 3) {
            return domain("dims must list dimensions n >= 3");
        }
        if self.modes.is_empty() {
            return domain("modes must not be empty");
        }
        match self.kind {
            ExperimentKind::Sweep => {
                if self.eps.start >= 0.25 {
                    return domain("sweep eps must lie in (0, 1/4)");
                }
                let (c, f) = (self.sphere.coarse, self.sphere.fine);
                if c.n2 % 2 != 0 || f.n2 % 2 != 0 {
                    return domain("sphere tau counts must be even");
                }
                if f.n1 < c.n1 || f.n2 < c.n2 || f == c {
                    return domain(format!("fine grid {f} must refine coarse grid {c}"));
                }
                if !(self.fit.c1_window.0 > 0.0 && self.fit.c1_window.0 < 1.0 && self.fit.c1_window.1 > 1.0) {
                    return domain("c1_window must bracket 1");
                }
            }
            ExperimentKind::ModeDecay if self.modes.contains(&0) => {
                return domain("mode decay needs k >= 1");
            }
            ExperimentKind::LocalGap => {
                if self.local_gap.shapes.is_empty() {
                    return domain("local gap needs at least one shape");
                }
                if !(self.local_gap.contrast >= 1.0) {
                    return domain("local gap contrast must be at least 1");
                }
            }
            ExperimentKind::Rates if self.beta_samples < 2 => {
                return domain("beta_samples must be at least 2");
            }
            _ => {}
        }
        if !(self.solver.rtol > 0.0) || self.solver.max_iter == 0 {
            return domain("solver needs rtol > 0 and max_iter > 0");
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, String, String, String)> = Vec::new();
        let mut section = String::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let body = strip_comment(raw).trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('[') {
                let name = rest.strip_suffix(']').ok_or_else(|| config_err(line, "unterminated section header"))?;
                section = name.trim().to_string();
                if !SECTIONS.contains(&section.as_str()) {
                    return Err(config_err(line, format!("unknown section [{section}]")));
                }
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| config_err(line, "expected `key = value`"))?;
            if section.is_empty() {
                return Err(config_err(line, "key outside of any section"));
            }
            let key = k.trim().to_string();
            if let Some(prev) = entries.iter().find(|e| e.1 == section && e.2 == key) {
                return Err(config_err(line, format!("duplicate key {section}.{key} (first set on line {})", prev.0)));
            }
            entries.push((line, section.clone(), key, v.trim().to_string()));
        }
        let kind = match entries.iter().find(|e| e.1 == "run" && e.2 == "kind") {
            Some((line, _, _, v)) => v.parse().map_err(|m| config_err(*line, m))?,
            None => ExperimentKind::Sweep,
        };
        let mut cfg = Self::default_for(kind);
        for (line, section, key, value) in &entries {
            cfg.apply(section, key, value).map_err(|m| config_err(*line, m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn apply(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        match (section, key) {
            ("run", "kind") => {}
            ("run", "id") => self.id = v.to_string(),
            ("run", "dims") => self.dims = parse_list(v)?,
            ("run", "modes") => self.modes = parse_list(v)?,
            ("eps", "start") => self.eps.start = parse(v)?,
            ("eps", "stop") => self.eps.stop = parse(v)?,
            ("eps", "count") => self.eps.count = parse(v)?,
            ("sphere", "coarse") => self.sphere.coarse = v.parse()?,
            ("sphere", "fine") => self.sphere.fine = v.parse()?,
            ("sphere", "clustering") => self.sphere.clustering = parse(v)?,
            ("local_gap", "shapes") => self.local_gap.shapes = parse_list(v)?,
            ("local_gap", "r0") => self.local_gap.r0 = parse(v)?,
            ("local_gap", "a") => self.local_gap.a = parse(v)?,
            ("local_gap", "gamma") => self.local_gap.gamma = parse(v)?,
            ("local_gap", "b") => self.local_gap.b = parse(v)?,
            ("local_gap", "grid") => self.local_gap.grid = v.parse()?,
            ("local_gap", "contrast") => self.local_gap.contrast = parse(v)?,
            ("local_gap", "data") => self.local_gap.data = v.parse()?,
            ("h", "beta") => {
                self.beta = if v == "auto" { BetaChoice::Auto } else { BetaChoice::Value(parse(v)?) };
            }
            ("rates", "beta_samples") => self.beta_samples = parse(v)?,
            ("fit", "drop_preasymptotic") => self.fit.drop_preasymptotic = parse(v)?,
            ("fit", "c1_window") => {
                let w: Vec<f64> = parse_list(v)?;
                if w.len() != 2 {
                    return Err(format!("c1_window needs two values, got {}", w.len()));
                }
                self.fit.c1_window = (w[0], w[1]);
            }
            ("tolerance", "u11_slope") => self.tolerances.u11_slope = parse(v)?,
            ("tolerance", "gradient_slope") => self.tolerances.gradient_slope = parse(v)?,
            ("tolerance", "grid_delta") => self.tolerances.grid_delta = parse(v)?,
            ("tolerance", "triangle") => self.tolerances.triangle = parse(v)?,
            ("tolerance", "local_gap_slope") => self.tolerances.local_gap_slope = parse(v)?,
            ("tolerance", "envelope_spread") => self.tolerances.envelope_spread = parse(v)?,
            ("solver", "rtol") => self.solver.rtol = parse(v)?,
            ("solver", "max_iter") => self.solver.max_iter = parse(v)?,
            ("output", "dir") => self.out_dir = v.to_string(),
            _ => return Err(format!("unknown key {section}.{key}")),
        }
        Ok(())
    }

    /// Canonical text form; `parse(emit())` reproduces `self` exactly.
    pub fn emit(&self) -> String {
        let mut s = String::new();
        let join = |v: &[String]| v.join(", ");
        let w = &mut s;
        let _ = writeln!(w, "[run]\nkind = {}\nid = {}", self.kind, self.id);
        let _ = writeln!(w, "dims = {}", join(&self.dims.iter().map(u32::to_string).collect::<Vec<_>>()));
        let _ = writeln!(w, "modes = {}", join(&self.modes.iter().map(u32::to_string).collect::<Vec<_>>()));
        let _ = writeln!(w, "\n[eps]\nstart = {:?}\nstop = {:?}\ncount = {}", self.eps.start, self.eps.stop, self.eps.count);
        let sp = &self.sphere;
        let _ = writeln!(w, "\n[sphere]\ncoarse = {}\nfine = {}\nclustering = {:?}", sp.coarse, sp.fine, sp.clustering);
        let lg = &self.local_gap;
        let _ = writeln!(w, "\n[local_gap]\nshapes = {}", join(&lg.shapes.iter().map(|s| s.name().to_string()).collect::<Vec<_>>()));
        let _ = writeln!(w, "r0 = {:?}\na = {:?}\ngamma = {:?}\nb = {:?}", lg.r0, lg.a, lg.gamma, lg.b);
        let _ = writeln!(w, "grid = {}\ncontrast = {:?}\ndata = {}", lg.grid, lg.contrast, lg.data.name());
        match self.beta {
            BetaChoice::Auto => {
                let _ = writeln!(w, "\n[h]\nbeta = auto");
            }
            BetaChoice::Value(b) => {
                let _ = writeln!(w, "\n[h]\nbeta = {b:?}");
            }
        }
        let _ = writeln!(w, "\n[rates]\nbeta_samples = {}", self.beta_samples);
        let _ = writeln!(
            w,
            "\n[fit]\ndrop_preasymptotic = {}\nc1_window = {:?}, {:?}",
            self.fit.drop_preasymptotic, self.fit.c1_window.0, self.fit.c1_window.1
        );
        let t = &self.tolerances;
        let _ = writeln!(w, "\n[tolerance]\nu11_slope = {:?}\ngradient_slope = {:?}", t.u11_slope, t.gradient_slope);
        let _ = writeln!(w, "grid_delta = {:?}\ntriangle = {:?}", t.grid_delta, t.triangle);
        let _ = writeln!(w, "local_gap_slope = {:?}\nenvelope_spread = {:?}", t.local_gap_slope, t.envelope_spread);
        let _ = writeln!(w, "\n[solver]\nrtol = {:?}\nmax_iter = {}", self.solver.rtol, self.solver.max_iter);
        let _ = writeln!(w, "\n[output]\ndir = {}", self.out_dir);
        s
    }
}

const SECTIONS: [&str; 10] = ["run", "eps", "sphere", "local_gap", "h", "rates", "fit", "tolerance", "solver", "output"];

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(i) => &line[..i],
        None => line,
    }
}

fn config_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

fn parse<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}`"))
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("bad list item `{s}`: {e}")))
        .collect()
}
