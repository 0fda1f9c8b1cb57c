use std::fmt::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use sadamp_core::ann::{train_best_of, Dataset, MlpModel};
use sadamp_core::config::ProjectConfig;
use sadamp_core::dqcore::{DqMatrix, FrequencyGrid};
use sadamp_core::persist::{append_report, load_dataset, load_model, save_dataset, save_model, write_atomic};
use sadamp_core::plants::{gfl_admittance, sad_admittance_detailed, sad_admittance_matrix, GridParams, SadParams};
use sadamp_core::simtime::{
    detect_instability, scan_admittance, simulate, Action, DeviceUnderTest, OracleVerdict, Scenario, ScanOptions,
};
use sadamp_core::stability::{assess, margin_sweep, sweep_csv, ShuntDevice, SystemModel};
use sadamp_core::tuner::{
    adapt, admittance_hyper, damper_hyper, design_csv, design_sad, generate_admittance_dataset, generate_sad_dataset,
    AdaptConfig, AdmittanceRanges, DesignOptions, OperatingGrid, TargetSource, DAMPER_STARTS,
};
use sadamp_core::zest::{run_estimation, EstimationResult};
use sadamp_core::Error;

/// Stability analysis and self-adaptive active damping for inverter-based
/// AC systems.
#[derive(Parser, Debug)]
#[command(name = "sadamp", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML project configuration. Without it the case system is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step (overrides the config seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    sigma_thd: Option<f64>,
    #[arg(long, global = true)]
    freq_min: Option<f64>,
    #[arg(long, global = true)]
    freq_max: Option<f64>,
    #[arg(long, global = true)]
    freq_points: Option<usize>,
    /// Grid resistance override, Ω.
    #[arg(long, global = true)]
    r_g: Option<f64>,
    /// Grid inductance override, H.
    #[arg(long, global = true)]
    l_g: Option<f64>,
    /// Scale every inverter's operating current by this factor.
    #[arg(long, global = true)]
    power: Option<f64>,
}

#[derive(Args, Debug, Clone, Copy)]
struct DamperFlags {
    /// Remove the damper from the configured system.
    #[arg(long, conflicts_with = "with_sad")]
    no_sad: bool,
    /// Attach the default damper if the configuration has none.
    #[arg(long)]
    with_sad: bool,
    /// Override the damper tuning as `omega_c,h_v`.
    #[arg(long, value_parser = parse_pair)]
    tuning: Option<(f64, f64)>,
}

#[derive(Args, Debug, Clone, Copy)]
struct RampFlags {
    /// Ramp every inverter to this fraction of its configured current.
    #[arg(long)]
    ramp_to: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    ramp_start: f64,
    #[arg(long, default_value_t = 1.0)]
    ramp_duration: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Axis {
    Power,
    Impedance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Kind {
    Sad,
    Admittance,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Write a configuration template for the case system.
    Init {
        #[arg(default_value = "sadamp.toml")]
        path: PathBuf,
    },
    /// Eigenvalue-trajectory stability assessment.
    Analyze {
        #[command(flatten)]
        damper: DamperFlags,
    },
    /// Critical margin along power or grid impedance.
    Sweep {
        #[arg(long, value_enum, default_value_t = Axis::Power)]
        axis: Axis,
        #[arg(long)]
        from: f64,
        #[arg(long)]
        to: f64,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[command(flatten)]
        damper: DamperFlags,
    },
    /// Grid impedance estimation by a reactive current step.
    EstimateZ {
        /// Injected reactive current step, A.
        #[arg(long)]
        delta_iqref: Option<f64>,
        /// Device that steps (0-based); default is the damper.
        #[arg(long)]
        device: Option<usize>,
        #[command(flatten)]
        damper: DamperFlags,
    },
    /// Admittance of one device by time-domain perturbation.
    Scan {
        /// `inv1`, `inv2`, ... or `sad`.
        #[arg(long, default_value = "inv1")]
        device: String,
        /// Hold the PLLs and outer loops during the scan.
        #[arg(long)]
        frozen: bool,
    },
    /// Generate a surrogate training dataset.
    Dataset {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Admittance targets from time-domain scans instead of the model.
        #[arg(long)]
        measured: bool,
        /// Inverter used for the admittance dataset (0-based).
        #[arg(long, default_value_t = 0)]
        inverter: usize,
    },
    /// Train a surrogate from a dataset CSV.
    Train {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Use the `[training]` hyperparameters instead of the preset.
        #[arg(long)]
        config_hyper: bool,
    },
    /// Margin-constrained damper design for the configured operating point.
    Tune,
    /// Time-domain run of the configured system.
    Simulate {
        #[arg(long)]
        duration: Option<f64>,
        /// Disable the damper's damping path at this time, s.
        #[arg(long)]
        sad_off_at: Option<f64>,
        #[command(flatten)]
        ramp: RampFlags,
        #[command(flatten)]
        damper: DamperFlags,
    },
    /// Full self-adaptive loop: estimate, measure, predict, apply, check.
    Adapt {
        /// Damper-map model file (default: paths.sad_model).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        duration: Option<f64>,
        #[command(flatten)]
        ramp: RampFlags,
    },
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `a,b`")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{a}: {e}"))?,
        b.trim().parse().map_err(|e| format!("{b}: {e}"))?,
    ))
}

/// Outcome of a command that ran to completion.
enum Outcome {
    Ok,
    /// Domain-level failure: infeasible design, unstable without remedy.
    Domain(String),
}

type CmdResult = std::result::Result<Outcome, Error>;

fn exit_class(e: &Error) -> (u8, &'static str) {
    match e {
        Error::Config(_) => (2, "config"),
        Error::InvalidParameter { .. } | Error::InvalidGrid(_) | Error::InvalidOperatingPoint(_) => {
            (2, "invalid-input")
        }
        Error::Parse { .. } | Error::Version { .. } | Error::LengthMismatch { .. } => (2, "bad-file"),
        Error::Io(_) => (2, "io"),
        Error::Infeasible { .. } | Error::TooManyInfeasible { .. } => (1, "infeasible"),
        Error::InsufficientExcitation { .. } | Error::Unsettled(_) => (1, "estimation"),
        Error::Divergent { .. } | Error::ScanRefused(_) | Error::ScanNotSettled { .. } => (1, "simulation"),
        _ => (1, "domain"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Domain(msg)) => {
            eprintln!("error: verdict: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            let (code, kind) = exit_class(&e);
            let msg = match &e {
                Error::Config(m) => m.clone(),
                other => other.to_string(),
            };
            eprintln!("error: {kind}: {}", msg.replace('\n', " "));
            ExitCode::from(code)
        }
    }
}

struct Ctx {
    cfg: ProjectConfig,
    seed: u64,
}

impl Ctx {
    fn out(&self, name: &str) -> PathBuf {
        self.cfg.paths.out_dir.join(name)
    }

    fn emit(&self, name: &str, contents: &str) -> Result<PathBuf, Error> {
        let p = self.out(name);
        write_atomic(&p, contents)?;
        Ok(p)
    }

    fn log(&self, title: &str, body: &str) -> Result<(), Error> {
        append_report(&self.out("reports.log"), title, body)
    }

    fn damper(&self, flags: DamperFlags) -> Option<SadParams> {
        let sp = if flags.no_sad {
            None
        } else if flags.with_sad || flags.tuning.is_some() {
            Some(self.cfg.system.sad.unwrap_or_default())
        } else {
            self.cfg.system.sad
        };
        match (sp, flags.tuning) {
            (Some(sp), Some((w, h))) => Some(sp.with_tuning(w, h)),
            (sp, _) => sp,
        }
    }

    fn model(&self, flags: DamperFlags) -> Result<SystemModel, Error> {
        Ok(self.cfg.system_model()?.with_sad(self.damper(flags)))
    }

    fn scenario(&self, model: SystemModel, duration: Option<f64>, ramp: RampFlags) -> Scenario {
        let mut sc = Scenario {
            config: self.cfg.sim_config(),
            ..Scenario::new(model, duration.unwrap_or(self.cfg.simulation.duration_s))
        };
        if let Some(p) = ramp.ramp_to {
            for (k, inv) in self.cfg.system.inverters.iter().enumerate() {
                let base = inv.i_dref;
                sc = sc.with_event(
                    ramp.ramp_start,
                    Action::RampIdRef {
                        device: k,
                        target: p * base,
                        duration: ramp.ramp_duration,
                    },
                );
            }
        }
        sc
    }
}

fn load_config(g: &Global) -> Result<ProjectConfig, Error> {
    let mut cfg = match &g.config {
        Some(p) => ProjectConfig::load(p)?,
        None => ProjectConfig::case(0.2, 4e-3)?,
    };
    if let Some(d) = &g.out_dir {
        cfg.paths.out_dir = d.clone();
    }
    if let Some(s) = g.sigma_thd {
        cfg.analysis.sigma_thd = s;
    }
    if let Some(f) = g.freq_min {
        cfg.analysis.freq_min_hz = f;
    }
    if let Some(f) = g.freq_max {
        cfg.analysis.freq_max_hz = f;
    }
    if let Some(n) = g.freq_points {
        cfg.analysis.freq_points = n;
    }
    if g.r_g.is_some() || g.l_g.is_some() {
        let r = g.r_g.unwrap_or(cfg.system.grid.r_g);
        let l = g.l_g.unwrap_or(cfg.system.grid.l_g);
        cfg.system.grid = GridParams { r_g: r, l_g: l, ..cfg.system.grid };
    }
    if let Some(p) = g.power {
        for inv in &mut cfg.system.inverters {
            inv.i_dref *= p;
        }
    }
    if let Some(s) = g.seed {
        cfg.simulation.seed = s;
        cfg.training.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> CmdResult {
    if let Cmd::Init { path } = &cli.cmd {
        let cfg = ProjectConfig::case(0.2, 4e-3)?;
        write_atomic(path, &cfg.to_toml())?;
        println!("wrote {}", path.display());
        return Ok(Outcome::Ok);
    }
    let cfg = load_config(&cli.global)?;
    let seed = cli.global.seed.unwrap_or(cfg.simulation.seed);
    let ctx = Ctx { cfg, seed };
    match cli.cmd {
        Cmd::Init { .. } => unreachable!("handled above"),
        Cmd::Analyze { damper } => cmd_analyze(&ctx, damper),
        Cmd::Sweep {
            axis,
            from,
            to,
            steps,
            damper,
        } => cmd_sweep(&ctx, axis, from, to, steps, damper),
        Cmd::EstimateZ {
            delta_iqref,
            device,
            damper,
        } => cmd_estimate(&ctx, delta_iqref, device, damper),
        Cmd::Scan { device, frozen } => cmd_scan(&ctx, &device, frozen, &cli.global),
        Cmd::Dataset {
            kind,
            measured,
            inverter,
        } => cmd_dataset(&ctx, kind, measured, inverter),
        Cmd::Train {
            kind,
            dataset,
            model,
            config_hyper,
        } => cmd_train(&ctx, kind, dataset, model, config_hyper),
        Cmd::Tune => cmd_tune(&ctx),
        Cmd::Simulate {
            duration,
            sad_off_at,
            ramp,
            damper,
        } => cmd_simulate(&ctx, duration, sad_off_at, ramp, damper),
        Cmd::Adapt { model, duration, ramp } => cmd_adapt(&ctx, model, duration, ramp),
    }
}

fn cmd_analyze(ctx: &Ctx, damper: DamperFlags) -> CmdResult {
    let model = ctx.model(damper)?;
    let report = assess(&model, &ctx.cfg.analysis_options()?)?;
    let text = report.to_text();
    print!("{text}");
    let p = ctx.emit("trajectory.csv", &report.trajectory_csv())?;
    ctx.emit("analyze_report.txt", &text)?;
    ctx.log("analyze", &text)?;
    println!("trajectory = {}", p.display());
    Ok(Outcome::Ok)
}

fn cmd_sweep(ctx: &Ctx, axis: Axis, from: f64, to: f64, steps: usize, damper: DamperFlags) -> CmdResult {
    if steps < 2 || !(from.is_finite() && to.is_finite()) {
        return Err(Error::Config("sweep: need finite bounds and at least 2 steps".into()));
    }
    let values: Vec<f64> = (0..steps)
        .map(|k| from + (to - from) * k as f64 / (steps - 1) as f64)
        .collect();
    let base = ctx.cfg.system.clone();
    let sad = ctx.damper(damper);
    let ratio = base.grid.r_g / base.grid.l_g;
    let rows = margin_sweep(
        |v| {
            let (p, grid) = match axis {
                Axis::Power => (v, base.grid),
                Axis::Impedance => (
                    1.0,
                    GridParams {
                        r_g: ratio * v,
                        l_g: v,
                        ..base.grid
                    },
                ),
            };
            let inv: Vec<_> = base
                .inverters
                .iter()
                .map(|i| (*i, (p * i.i_dref, p * i.i_qref)))
                .collect();
            SystemModel::new(&inv, grid, sad)
        },
        &values,
        &ctx.cfg.analysis_options()?,
    )?;
    let csv = sweep_csv(&rows);
    print!("{csv}");
    ctx.emit("sweep.csv", &csv)?;
    Ok(Outcome::Ok)
}

fn cmd_estimate(ctx: &Ctx, delta: Option<f64>, device: Option<usize>, damper: DamperFlags) -> CmdResult {
    let model = ctx.model(damper)?;
    let mut est = ctx.cfg.estimation();
    est.seed = ctx.seed;
    est.device = device;
    if let Some(d) = delta {
        est.delta_iqref = d;
    }
    let sc = ctx.scenario(model, None, RampFlags { ramp_to: None, ramp_start: 0.0, ramp_duration: 0.0 });
    let r = run_estimation(&sc, &est)?;
    let text = r.to_text();
    print!("{text}");
    let g = ctx.cfg.system.grid;
    let csv = format!("{}\n{}\n", EstimationResult::CSV_HEADER, r.csv_row(g.r_g, g.l_g));
    ctx.emit("estimate.csv", &csv)?;
    ctx.log("estimate-z", &text)?;
    Ok(Outcome::Ok)
}

fn cmd_scan(ctx: &Ctx, device: &str, frozen: bool, g: &Global) -> CmdResult {
    let model = ctx.cfg.system_model()?;
    let f_min = g.freq_min.unwrap_or(10.0);
    let f_max = g.freq_max.unwrap_or(1000.0);
    let n = g.freq_points.unwrap_or(20);
    let freqs = FrequencyGrid::log(f_min, f_max, n)?;
    let v_d0 = model.v_d0;
    let (dut, analytic): (DeviceUnderTest, Box<dyn Fn(f64) -> sadamp_core::Result<DqMatrix>>) = if device == "sad" {
        let sp = ctx.cfg.system.sad.unwrap_or_default();
        let f: Box<dyn Fn(f64) -> sadamp_core::Result<DqMatrix>> = if frozen {
            Box::new(move |f| sad_admittance_matrix(&sp, f))
        } else {
            Box::new(move |f| sad_admittance_detailed(&sp, v_d0, (0.0, 0.0), f))
        };
        (DeviceUnderTest::Sad(sp), f)
    } else {
        let k: usize = device
            .strip_prefix("inv")
            .and_then(|s| s.parse::<usize>().ok())
            .filter(|&k| k >= 1 && k <= model.devices.len())
            .ok_or_else(|| Error::Config(format!("scan: unknown device `{device}`")))?;
        let (params, i_d0, i_q0) = match &model.devices[k - 1] {
            ShuntDevice::Gfl { params, i_d0, i_q0 } => (*params, *i_d0, *i_q0),
            ShuntDevice::Fixed(_) => return Err(Error::Config("scan: fixed device".into())),
        };
        (
            DeviceUnderTest::Gfl { params, i_d0, i_q0 },
            Box::new(move |f| gfl_admittance(&params, v_d0, i_d0, i_q0, f)),
        )
    };
    let opts = ScanOptions {
        freeze_outer_loops: frozen,
        config: ctx.cfg.sim_config(),
        ..ScanOptions::default()
    };
    let ys = scan_admittance(&dut, v_d0, &freqs, &opts)?;
    let mut csv = String::from("f_hz");
    for e in ["dd", "dq", "qd", "qq"] {
        let _ = write!(csv, ",re_y{e}_scan,im_y{e}_scan");
    }
    for e in ["dd", "dq", "qd", "qq"] {
        let _ = write!(csv, ",re_y{e}_model,im_y{e}_model");
    }
    csv.push_str(",rel_err\n");
    let mut worst = 0.0f64;
    for (f, y) in freqs.freqs().iter().zip(&ys) {
        let a = analytic(*f)?;
        let err = y
            .entries()
            .iter()
            .zip(a.entries())
            .map(|(p, q)| (p - q).norm())
            .fold(0.0, f64::max)
            / a.max_abs().max(1e-12);
        worst = worst.max(err);
        let _ = write!(csv, "{f}");
        for c in y.entries().iter().chain(a.entries().iter()) {
            let _ = write!(csv, ",{},{}", c.re, c.im);
        }
        let _ = writeln!(csv, ",{err}");
    }
    let p = ctx.emit("scan.csv", &csv)?;
    println!("points = {}", ys.len());
    println!("max_rel_err = {worst}");
    println!("csv = {}", p.display());
    Ok(Outcome::Ok)
}

fn cmd_dataset(ctx: &Ctx, kind: Kind, measured: bool, inverter: usize) -> CmdResult {
    match kind {
        Kind::Sad => {
            let opts = DesignOptions {
                template: ctx.cfg.system.sad.unwrap_or_default(),
                analysis: ctx.cfg.analysis_options()?,
                ..DesignOptions::default()
            };
            let sd = generate_sad_dataset(&OperatingGrid::default(), ctx.cfg.analysis.sigma_thd, &opts, ctx.cfg.training.seed)?;
            let mut ds = sd.dataset;
            let t = &ctx.cfg.training;
            ds.resplit(t.train_fraction, t.val_fraction, t.seed)?;
            let p = ctx.out("sad_dataset.csv");
            save_dataset(&p, &ds)?;
            ctx.emit("sad_designs.csv", &design_csv(&sd.designs))?;
            println!("rows = {}", ds.len());
            println!("infeasible = {}", sd.infeasible.len());
            println!("dataset = {}", p.display());
        }
        Kind::Admittance => {
            let inv = *ctx
                .cfg
                .system
                .inverters
                .get(inverter)
                .ok_or_else(|| Error::Config(format!("dataset: no inverter {inverter}")))?;
            let ranges = AdmittanceRanges::default();
            let freqs = ctx.cfg.grid()?;
            let source = if measured {
                TargetSource::Measured(ScanOptions {
                    config: ctx.cfg.sim_config(),
                    ..ScanOptions::default()
                })
            } else {
                TargetSource::Analytic
            };
            let (mut ds, skipped) = generate_admittance_dataset(&inv, &ranges, &freqs, &source, ctx.cfg.training.seed)?;
            let t = &ctx.cfg.training;
            ds.resplit(t.train_fraction, t.val_fraction, t.seed)?;
            let p = ctx.out("admittance_dataset.csv");
            save_dataset(&p, &ds)?;
            println!("rows = {}", ds.len());
            println!("skipped = {skipped}");
            println!("dataset = {}", p.display());
        }
    }
    Ok(Outcome::Ok)
}

fn n_inputs(kind: Kind) -> usize {
    match kind {
        Kind::Sad => 3,
        Kind::Admittance => 5,
    }
}

fn cmd_train(ctx: &Ctx, kind: Kind, dataset: Option<PathBuf>, model: Option<PathBuf>, config_hyper: bool) -> CmdResult {
    let default_ds = match kind {
        Kind::Sad => "sad_dataset.csv",
        Kind::Admittance => "admittance_dataset.csv",
    };
    let ds_path = dataset.unwrap_or_else(|| ctx.out(default_ds));
    let ds: Dataset = load_dataset(&ds_path, n_inputs(kind))?;
    let (hyper, starts) = if config_hyper {
        (ctx.cfg.hyper(), ctx.cfg.training.starts)
    } else {
        match kind {
            Kind::Sad => (damper_hyper(), DAMPER_STARTS),
            Kind::Admittance => (admittance_hyper(), 1),
        }
    };
    let (m, metrics) = train_best_of(&ds, &hyper, ctx.cfg.training.seed, starts)?;
    let model_path = model.unwrap_or_else(|| {
        ctx.cfg.out_path(match kind {
            Kind::Sad => &ctx.cfg.paths.sad_model,
            Kind::Admittance => &ctx.cfg.paths.admittance_model,
        })
    });
    save_model(&model_path, &m)?;
    let text = metrics.to_text(&ds.target_names);
    print!("{text}");
    println!("model = {}", model_path.display());
    ctx.emit(&format!("{}_metrics.txt", default_ds.trim_end_matches("_dataset.csv")), &text)?;
    ctx.log("train", &text)?;
    Ok(Outcome::Ok)
}

fn cmd_tune(ctx: &Ctx) -> CmdResult {
    let model = ctx.cfg.system_model()?.with_sad(None);
    let opts = DesignOptions {
        template: ctx.cfg.system.sad.unwrap_or_default(),
        analysis: ctx.cfg.analysis_options()?,
        ..DesignOptions::default()
    };
    let sigma = ctx.cfg.analysis.sigma_thd;
    match design_sad(&model, sigma, &opts) {
        Ok(d) => {
            let mut s = String::new();
            let _ = writeln!(s, "omega_c_radps = {}", d.omega_c);
            let _ = writeln!(s, "h_v = {}", d.h_v);
            let _ = writeln!(s, "margin = {}", d.margin);
            let _ = writeln!(s, "f_cr_hz = {}", d.f_cr);
            let _ = writeln!(s, "f_cr_undamped_hz = {}", d.f_cr_undamped);
            let _ = writeln!(s, "idle = {}", d.idle);
            print!("{s}");
            ctx.emit("tune_report.txt", &s)?;
            ctx.log("tune", &s)?;
            Ok(Outcome::Ok)
        }
        Err(Error::Infeasible { best_margin }) => Ok(Outcome::Domain(format!(
            "no damper tuning reaches margin {sigma} (best {best_margin:.4})"
        ))),
        Err(e) => Err(e),
    }
}

fn cmd_simulate(ctx: &Ctx, duration: Option<f64>, sad_off_at: Option<f64>, ramp: RampFlags, damper: DamperFlags) -> CmdResult {
    let model = ctx.model(damper)?;
    let has_sad = model.sad.is_some();
    let mut sc = ctx.scenario(model, duration, ramp);
    if let Some(t) = sad_off_at {
        if !has_sad {
            return Err(Error::Config("simulate: --sad-off-at needs a damper".into()));
        }
        let device = sc.model.devices.len();
        sc = sc.with_event(t, Action::SetDamping { device, enabled: false });
    }
    sc.events.sort_by(|a, b| a.t.total_cmp(&b.t));
    let rec = simulate(&sc, ctx.seed)?;
    let v = if rec.divergent {
        None
    } else {
        Some(detect_instability(&rec, 0.05)?)
    };
    let p = ctx.emit("waveforms.csv", &rec.to_csv())?;
    let verdict = v.map_or(OracleVerdict::Unstable, |v| v.verdict);
    let mut s = String::new();
    let _ = writeln!(s, "verdict = {verdict:?}");
    if let Some(v) = v {
        let _ = writeln!(s, "growth_rate_per_s = {}", v.growth_rate);
    }
    let _ = writeln!(s, "divergent = {}", rec.divergent);
    let _ = writeln!(s, "saturation_events = {}", rec.saturation_events);
    let _ = writeln!(s, "waveforms = {}", p.display());
    print!("{s}");
    ctx.log("simulate", &s)?;
    Ok(Outcome::Ok)
}

fn cmd_adapt(ctx: &Ctx, model: Option<PathBuf>, duration: Option<f64>, ramp: RampFlags) -> CmdResult {
    let model_path = model.unwrap_or_else(|| ctx.cfg.out_path(&ctx.cfg.paths.sad_model));
    let surrogate: MlpModel = load_model(&model_path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("{}: {io}", model_path.display())),
        other => other,
    })?;
    let sys = ctx
        .cfg
        .system_model()?
        .with_sad(Some(ctx.cfg.system.sad.unwrap_or_default()));
    let sc = ctx.scenario(sys, duration, ramp);
    let acfg = AdaptConfig {
        sigma_thd: ctx.cfg.analysis.sigma_thd,
        estimation: ctx.cfg.estimation(),
        design: DesignOptions {
            analysis: ctx.cfg.analysis_options()?,
            ..DesignOptions::default()
        },
        ..AdaptConfig::default()
    };
    let rep = adapt(&sc, &surrogate, &acfg, ctx.seed)?;
    let text = rep.to_text();
    print!("{text}");
    ctx.emit("adapt_report.txt", &text)?;
    ctx.emit("adapt_steps.csv", &rep.steps_csv())?;
    ctx.emit("adapt_waveforms.csv", &rep.record.to_csv())?;
    ctx.log("adapt", &text)?;
    if rep.oracle.verdict == OracleVerdict::Unstable {
        return Ok(Outcome::Domain("closed-loop run is unstable".into()));
    }
    Ok(Outcome::Ok)
}
