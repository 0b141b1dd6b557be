use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gaplab::experiments::{
    self, emit_h_profile, emit_results, emit_sphere_solution, rates_table_csv, sphere_summary, BetaChoice, BoundaryData, EpsSchedule,
    ExperimentConfig, ExperimentKind, GridSize, Points, RunRecord, ShapeChoice,
};
use gaplab::geometry::{build_bipolar_grid, BipolarMap};
use gaplab::ode::{default_a_cut, solve_h, verify_h_bounds, ModalOperatorParams, DEFAULT_PER_OCTAVE};
use gaplab::pde2d::{solve_reduced_sphere_problem, SphereGridSpec};
use gaplab::rates::{beta_star, Dimension};

#[derive(Parser)]
#[command(name = "gaplab", version, about = "Gradient blow-up experiments for nearly touching insulated inclusions")]
struct Cli {
    /// Experiment config file; command-line options override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct Schedule {
    /// Dimensions, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Vec<u32>,
    /// Single eps, replacing the schedule.
    #[arg(long, conflicts_with_all = ["eps_start", "eps_stop", "eps_count"])]
    eps: Option<f64>,
    #[arg(long)]
    eps_start: Option<f64>,
    #[arg(long)]
    eps_stop: Option<f64>,
    #[arg(long)]
    eps_count: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Exponent table and subsolution threshold check.
    Rates {
        #[command(flatten)]
        schedule: Schedule,
        #[arg(long, conflicts_with = "n", requires = "n_max")]
        n_min: Option<u32>,
        #[arg(long, conflicts_with = "n", requires = "n_min")]
        n_max: Option<u32>,
        /// Largest mode in the alpha_k columns.
        #[arg(long)]
        k_max: Option<u32>,
    },
    /// Two-sphere lower bound sweep.
    Sweep {
        #[command(flatten)]
        schedule: Schedule,
        #[arg(long)]
        coarse: Option<GridSize>,
        #[arg(long)]
        fine: Option<GridSize>,
    },
    /// Annulus gradient decay in the flattened gap.
    LocalGap {
        #[command(flatten)]
        schedule: Schedule,
        /// unit_ball or perturbed, comma separated.
        #[arg(long, value_delimiter = ',')]
        shape: Vec<ShapeChoice>,
        #[arg(long)]
        grid: Option<GridSize>,
        #[arg(long)]
        data: Option<BoundaryData>,
    },
    /// Certify r < h < r^alpha and the lower envelope.
    HCertify {
        #[command(flatten)]
        schedule: Schedule,
        /// `auto` or a number.
        #[arg(long)]
        beta: Option<String>,
    },
    /// Modal decay bounds.
    ModeDecay {
        #[command(flatten)]
        schedule: Schedule,
        /// Modes, comma separated.
        #[arg(long, value_delimiter = ',')]
        k: Vec<u32>,
    },
    /// Single two-sphere solve writing field.csv and summary.json.
    Solve {
        #[arg(long, default_value_t = 3)]
        n: u32,
        #[arg(long, default_value_t = 1e-3)]
        eps: f64,
        #[arg(long, default_value = "512x256")]
        grid: GridSize,
        /// Radii for U11, comma separated (default: sqrt(eps) times 1/2, 1, 2).
        #[arg(long, value_delimiter = ',')]
        radii: Vec<f64>,
        /// Also write the grid to grid.csv.
        #[arg(long)]
        dump_grid: bool,
    },
}

impl Command {
    fn kind(&self) -> Option<ExperimentKind> {
        match self {
            Command::Rates { .. } => Some(ExperimentKind::Rates),
            Command::Sweep { .. } => Some(ExperimentKind::Sweep),
            Command::LocalGap { .. } => Some(ExperimentKind::LocalGap),
            Command::HCertify { .. } => Some(ExperimentKind::HCertify),
            Command::ModeDecay { .. } => Some(ExperimentKind::ModeDecay),
            Command::Solve { .. } => None,
        }
    }
}

fn apply_schedule(cfg: &mut ExperimentConfig, s: &Schedule) {
    if !s.n.is_empty() {
        cfg.dims = s.n.clone();
    }
    if let Some(e) = s.eps {
        cfg.eps = EpsSchedule::single(e);
    }
    if let Some(v) = s.eps_start {
        cfg.eps.start = v;
    }
    if let Some(v) = s.eps_stop {
        cfg.eps.stop = v;
    }
    if let Some(v) = s.eps_count {
        cfg.eps.count = v;
    }
}

fn build_config(cli: &Cli, kind: ExperimentKind) -> gaplab::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default_for(kind),
    };
    if cfg.kind != kind {
        return Err(gaplab::Error::Domain(format!("config is for `{}` but the command is `{}`", cfg.kind, kind)));
    }
    match &cli.command {
        Command::Rates { schedule, n_min, n_max, k_max } => {
            apply_schedule(&mut cfg, schedule);
            if let (Some(lo), Some(hi)) = (n_min, n_max) {
                cfg.dims = (*lo..=*hi).collect();
            }
            if let Some(k) = k_max {
                cfg.modes = (0..=*k).collect();
            }
        }
        Command::Sweep { schedule, coarse, fine } => {
            apply_schedule(&mut cfg, schedule);
            cfg.sphere.coarse = coarse.unwrap_or(cfg.sphere.coarse);
            cfg.sphere.fine = fine.unwrap_or(cfg.sphere.fine);
        }
        Command::LocalGap { schedule, shape, grid, data } => {
            apply_schedule(&mut cfg, schedule);
            if !shape.is_empty() {
                cfg.local_gap.shapes = shape.clone();
            }
            cfg.local_gap.grid = grid.unwrap_or(cfg.local_gap.grid);
            cfg.local_gap.data = data.unwrap_or(cfg.local_gap.data);
        }
        Command::HCertify { schedule, beta } => {
            apply_schedule(&mut cfg, schedule);
            match beta.as_deref() {
                None => {}
                Some("auto") => cfg.beta = BetaChoice::Auto,
                Some(b) => {
                    let v = b.parse().map_err(|_| gaplab::Error::Domain(format!("bad --beta `{b}`")))?;
                    cfg.beta = BetaChoice::Value(v);
                }
            }
        }
        Command::ModeDecay { schedule, k } => {
            apply_schedule(&mut cfg, schedule);
            if !k.is_empty() {
                cfg.modes = k.clone();
            }
        }
        Command::Solve { .. } => {}
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(rec: &RunRecord, files: &[PathBuf]) {
    if let Points::Rates(rows) = &rec.points {
        print!("{}", rates_table_csv(rows).replace(',', "\t"));
    }
    for c in &rec.checks {
        println!("{} {} measured={} target={}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.measured, c.target);
    }
    for f in &rec.fits {
        println!("fit {} slope={:.6}", f.name, f.slope);
    }
    for n in &rec.notes {
        println!("note: {n}");
    }
    for f in files {
        println!("wrote {}", f.display());
    }
}

/// Per-point `h` profiles next to the run outputs.
fn write_h_profiles(cfg: &ExperimentConfig, dir: &Path) -> gaplab::Result<Vec<PathBuf>> {
    let schedule = cfg.eps.values();
    let single = cfg.dims.len() == 1 && schedule.len() == 1;
    let mut files = Vec::new();
    for &n in &cfg.dims {
        let d = Dimension::new(n)?;
        for &eps in &schedule {
            let sol = solve_h(&ModalOperatorParams::new(d, eps, 1)?, default_a_cut(eps), DEFAULT_PER_OCTAVE)?;
            let beta = match cfg.beta {
                BetaChoice::Auto => beta_star(d),
                BetaChoice::Value(b) => b,
            };
            let cert = verify_h_bounds(&sol, d, eps, beta)?;
            let sub = if single { dir.to_path_buf() } else { dir.join(format!("n{n}_eps{eps:e}")) };
            files.extend(emit_h_profile(&sol, &cert, sub)?);
        }
    }
    Ok(files)
}

fn run_solve(cli: &Cli, n: u32, eps: f64, grid: GridSize, radii: &[f64], dump_grid: bool) -> gaplab::Result<bool> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default_for(ExperimentKind::Sweep),
    };
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
    let d = Dimension::new(n)?;
    let spec = SphereGridSpec::clustered(grid.n1, grid.n2, eps, cfg.sphere.clustering);
    let sol = solve_reduced_sphere_problem(d, eps, &spec, &cfg.solver.options())?;
    let radii: Vec<f64> = if radii.is_empty() { [0.5, 1.0, 2.0].iter().map(|m| m * eps.sqrt()).collect() } else { radii.to_vec() };
    let summary = sphere_summary(&sol, grid, &radii)?;
    let mut files = emit_sphere_solution(&sol, &summary, &out)?;
    if dump_grid {
        let g = build_bipolar_grid(BipolarMap::new(eps)?, grid.n1, grid.n2, spec.grading)?;
        let path = out.join("grid.csv");
        g.dump_csv(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
        files.push(path);
    }
    for (r, u) in &summary.u11 {
        println!("U11({r}) = {u}");
    }
    println!("sup gradient over r^2 + x_n^2 <= 4 eps: {} at {:?}", summary.sup_gradient, summary.argmax);
    println!("w_min_relative = {:e}, {} iterations", summary.w_min_relative, summary.report.iterations);
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(summary.subsolution_holds)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(t) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let outcome = match (&cli.command, cli.command.kind()) {
        (Command::Solve { n, eps, grid, radii, dump_grid }, _) => run_solve(&cli, *n, *eps, *grid, radii, *dump_grid),
        (_, Some(kind)) => (|| {
            let cfg = build_config(&cli, kind)?;
            let rec = experiments::run(&cfg)?;
            let dir = PathBuf::from(&cfg.out_dir);
            let mut files = emit_results(&rec, &dir)?;
            if kind == ExperimentKind::HCertify {
                files.extend(write_h_profiles(&cfg, &dir)?);
            }
            report(&rec, &files);
            Ok(rec.passed())
        })(),
        (_, None) => unreachable!("every experiment command has a kind"),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
