use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use arzno_core::bench::{bench_kernels, sample_inputs};
use arzno_core::config::Config;
use arzno_core::control::{run_closed_loop, run_open_loop, ControllerConfig, KernelSource, RunOptions, Scenario};
use arzno_core::dataset::{self, load_training_set, manifest_path, split, Manifest};
use arzno_core::deeponet::{eval_accuracy, load_model, save_model, train, DeepOnet, StateErrors, Table1};
use arzno_core::kernel::TriMesh;
use arzno_core::trace::{trajectory_gaps, SimTrace};
use arzno_core::Error;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "arzno", version, about = "Adaptive ARZ boundary control with neural-operator kernels")]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    OpenLoop,
    Exact,
    No,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write its trace, fields and report.
    Simulate {
        #[arg(long, value_enum, default_value = "exact")]
        mode: Mode,
        /// Trained operator (required for `--mode no`).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Field snapshot interval in steps.
        #[arg(long, default_value_t = 10)]
        snapshot_every: usize,
    },
    /// Generate the kernel training corpus.
    GenDataset {
        #[arg(long, default_value = "data")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train the operator on the training split of a corpus.
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "model.don")]
        out: PathBuf,
        /// Overrides `deeponet.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Kernel and traffic-state errors of a trained operator on the test split.
    Eval {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "model.don")]
        model: PathBuf,
        /// Skip the closed-loop state comparison.
        #[arg(long)]
        kernels_only: bool,
        /// Also write the table as TOML.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Time kernel acquisition by the solver and by the operator.
    Bench {
        #[arg(long)]
        model: Option<PathBuf>,
        /// Overrides `bench.n`.
        #[arg(long)]
        n: Option<usize>,
        /// Skip the end-to-end closed-loop timing.
        #[arg(long)]
        no_closed_loop: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Print the resolved configuration and its hash.
    PrintConfig,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if let Some(err) = cause.downcast_ref::<Error>() {
            return match err {
                Error::Instability { .. } | Error::NoConvergence { .. } | Error::Domain(_) => 2,
                Error::Io(_) | Error::Format(_) => 3,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate { mode, model, out, snapshot_every } => simulate(&cfg, mode, model.as_deref(), &out, snapshot_every),
        Command::GenDataset { out, jobs } => gen_dataset(&cfg, &out, jobs),
        Command::Train { data, out, epochs } => train_cmd(&cfg, &data, &out, epochs),
        Command::Eval { data, model, kernels_only, out, jobs } => eval_cmd(&cfg, &data, &model, kernels_only, out.as_deref(), jobs),
        Command::Bench { model, n, no_closed_loop, out, jobs } => bench_cmd(&cfg, model.as_deref(), n, no_closed_loop, out.as_deref(), jobs),
        Command::PrintConfig => {
            print!("{}", cfg.to_toml());
            println!("# config_hash: {}", cfg.hash());
            Ok(())
        }
    }
}

fn load_checked_model(path: &Path, cfg: &Config) -> anyhow::Result<DeepOnet> {
    let model = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
    if model.tag() != cfg.hash_bytes() {
        log::warn!(
            "model {} was trained under config hash {}, current config hash is {}",
            path.display(),
            hex::encode(model.tag()),
            cfg.hash()
        );
    }
    Ok(model)
}

fn load_checked_manifest(dir: &Path, cfg: &Config) -> anyhow::Result<Manifest> {
    let path = manifest_path(dir);
    let m = Manifest::load(&path).with_context(|| format!("reading {}", path.display()))?;
    if m.config_hash != cfg.hash() {
        log::warn!("dataset {} was generated under config hash {}, current config hash is {}", dir.display(), m.config_hash, cfg.hash());
    }
    Ok(m)
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn relative_final(trace: &SimTrace) -> (f64, f64) {
    let (f, l) = (trace.first(), trace.last());
    let ratio = |a: f64, b: f64| if a > 0.0 { b / a } else { b };
    (ratio(f.rho_dev, l.rho_dev), ratio(f.vel_dev, l.vel_dev))
}

fn simulate(cfg: &Config, mode: Mode, model_path: Option<&Path>, out: &Path, snapshot_every: usize) -> anyhow::Result<()> {
    let sc = cfg.scenario()?;
    let model = match (mode, model_path) {
        (Mode::No, None) => bail!("--mode no needs --model"),
        (Mode::No, Some(p)) => Some(load_checked_model(p, cfg)?),
        _ => None,
    };
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let opts = RunOptions { snapshot_every, diagnostics: true };
    let start = Instant::now();
    let trace = match mode {
        Mode::OpenLoop => run_open_loop(&sc, &cfg.controller(KernelSource::ClassicalSolver), opts)?,
        Mode::Exact => run_closed_loop(&sc, &cfg.controller(KernelSource::ClassicalSolver), None, opts)?,
        Mode::No => run_closed_loop(&sc, &cfg.controller(KernelSource::NeuralOperator), model.as_ref(), opts)?,
    };
    let wall = start.elapsed().as_secs_f64();
    let hash = cfg.hash();
    let mut w = create(&out.join("trace.csv"))?;
    trace.write_csv(&mut w, Some(&hash))?;
    w.flush()?;
    let mut w = create(&out.join("fields.csv"))?;
    trace.write_fields_csv(&mut w, Some(&hash))?;
    w.flush()?;

    let (rho_rel, vel_rel) = relative_final(&trace);
    let amp0 = trace.snapshots.first().map(|s| trace.density_amplitude(s)).unwrap_or(0.0);
    let amp1 = trace.snapshots.last().map(|s| trace.density_amplitude(s)).unwrap_or(0.0);
    let converged = rho_rel <= 0.02 && vel_rel <= 0.02;
    let s = &trace.summary;
    let mut report = toml::Table::new();
    let mode_name = match mode {
        Mode::OpenLoop => "open-loop",
        Mode::Exact => "exact",
        Mode::No => "no",
    };
    report.insert("mode".into(), mode_name.into());
    report.insert("config_hash".into(), hash.clone().into());
    report.insert("converged".into(), converged.into());
    report.insert("final_density_rel".into(), rho_rel.into());
    report.insert("final_speed_rel".into(), vel_rel.into());
    report.insert("density_amplitude_initial".into(), amp0.into());
    report.insert("density_amplitude_final".into(), amp1.into());
    report.insert("e_norm_final".into(), trace.last().e_norm.into());
    report.insert("eps_norm_final".into(), trace.last().eps_norm.into());
    report.insert("kernel_refreshes".into(), (s.refreshes as i64).into());
    report.insert("kernel_time_total_s".into(), (s.kernel_ns_total as f64 * 1e-9).into());
    report.insert("wall_time_s".into(), wall.into());
    report.insert("k_bar".into(), s.k_bar.into());
    report.insert("l_bar".into(), s.l_bar.into());
    report.insert("equivalence_violations".into(), (s.equivalence_violations as i64).into());
    report.insert("c_hat_excess".into(), s.c_hat_excess.into());
    report.insert("v3_max_increase".into(), s.v3_max_increase.into());
    if let Some(e0) = s.epsilon0 {
        report.insert("epsilon0".into(), e0.into());
    }
    fs::write(out.join("report.toml"), toml::to_string(&report)?).context("writing report.toml")?;

    println!("{mode_name}: t = {:.1} s, wall {wall:.2} s", trace.last().t);
    println!("  density amplitude {amp0:.4e} -> {amp1:.4e} veh/m");
    println!("  final ||rho - rho*|| / initial = {rho_rel:.3e}, ||v - v*|| / initial = {vel_rel:.3e}");
    if mode != Mode::OpenLoop {
        println!("  converged (<= 2%): {converged}; {} kernel refreshes, {:.3} s acquiring kernels", s.refreshes, s.kernel_ns_total as f64 * 1e-9);
    }
    println!("  artifacts in {}", out.display());
    Ok(())
}

fn gen_dataset(cfg: &Config, out: &Path, jobs: usize) -> anyhow::Result<()> {
    let sc = cfg.scenario()?;
    let start = Instant::now();
    let m = dataset::generate(
        &sc,
        &cfg.controller(KernelSource::ClassicalSolver),
        &cfg.dataset_config(),
        out,
        jobs,
        &cfg.hash(),
    )?;
    let skipped = m.families.iter().filter(|f| f.skipped.is_some()).count();
    println!(
        "{} records from {} families ({skipped} skipped) in {:.1} s -> {}",
        m.total_records,
        m.families.len() - skipped,
        start.elapsed().as_secs_f64(),
        manifest_path(out).display()
    );
    Ok(())
}

fn splits(cfg: &Config, data: &Path) -> anyhow::Result<(Manifest, Manifest, Manifest)> {
    let m = load_checked_manifest(data, cfg)?;
    Ok(split(&m, cfg.dataset.split, cfg.dataset.seed)?)
}

fn train_cmd(cfg: &Config, data: &Path, out: &Path, epochs: Option<usize>) -> anyhow::Result<()> {
    let (tr, va, _) = splits(cfg, data)?;
    let arch = cfg.architecture();
    let train_set = load_training_set(&tr, data, arch.m)?;
    let val_set = load_training_set(&va, data, arch.m)?;
    let mut tc = cfg.train_config();
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    log::info!("training on {} samples, validating on {}", train_set.len(), val_set.len());
    let start = Instant::now();
    let (mut model, report) = train(&train_set, Some(&val_set), &arch, &tc)?;
    let secs = start.elapsed().as_secs_f64();
    model.set_tag(cfg.hash_bytes());
    save_model(&model, out).with_context(|| format!("writing {}", out.display()))?;

    let history = out.with_extension("history.csv");
    let mut w = create(&history)?;
    writeln!(w, "# config_hash: {}", cfg.hash())?;
    writeln!(w, "epoch,train_loss,train_rel,val_rel")?;
    for e in &report.history {
        writeln!(w, "{},{:e},{:e},{:e}", e.epoch, e.train_loss, e.train_rel, e.val_rel)?;
    }
    w.flush()?;
    let head: Vec<f64> = report.history.iter().take(5).map(|e| e.train_loss).collect();
    if head.windows(2).any(|w| w[1] > w[0]) {
        log::warn!("training loss did not decrease monotonically over the first epochs: {head:?}");
    }
    println!(
        "trained {} epochs in {secs:.1} s; best epoch {} with validation relative error {:.3e}; final training loss {:.3e} (relative {:.3e})",
        report.history.len(),
        report.best_epoch,
        report.best_val_rel,
        report.final_train_loss(),
        report.final_train_rel()
    );
    println!("model -> {}, history -> {}", out.display(), history.display());
    Ok(())
}

/// Exact and operator closed loops for every test family; gaps pooled over time and families.
fn state_errors(cfg: &Config, model: &DeepOnet, taus: &[f64], jobs: usize) -> anyhow::Result<StateErrors> {
    let base = cfg.scenario()?;
    let exact = cfg.controller(KernelSource::ClassicalSolver);
    let no = cfg.controller(KernelSource::NeuralOperator);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let run_pair = |tau: f64| -> anyhow::Result<Vec<(f64, f64, f64)>> {
        let mut sc = Scenario::new(base.traffic.with_tau(tau)?, base.grid)?.with_reflection(base.linear.r);
        sc.perturbation = base.perturbation;
        let opts = RunOptions { snapshot_every: 1, diagnostics: false };
        let (a, b) = rayon::join(|| run_closed_loop(&sc, &exact, None, opts), || run_closed_loop(&sc, &no, Some(model), opts));
        Ok(trajectory_gaps(&a?, &b?)?)
    };
    let gaps: Vec<anyhow::Result<Vec<(f64, f64, f64)>>> = pool.install(|| {
        use rayon::prelude::*;
        taus.par_iter().map(|&t| run_pair(t)).collect()
    });
    let mut all = Vec::new();
    for g in gaps {
        all.extend(g?);
    }
    StateErrors::from_gaps(&all).ok_or_else(|| anyhow!("no closed-loop samples"))
}

fn eval_cmd(cfg: &Config, data: &Path, model_path: &Path, kernels_only: bool, out: Option<&Path>, jobs: usize) -> anyhow::Result<()> {
    let model = load_checked_model(model_path, cfg)?;
    let (_, _, te) = splits(cfg, data)?;
    let test_set = load_training_set(&te, data, model.m())?;
    let kernels = eval_accuracy(&model, &test_set)?;
    let states = if kernels_only {
        None
    } else {
        let taus: Vec<f64> = te.completed().map(|f| f.tau).collect();
        Some(state_errors(cfg, &model, &taus, jobs)?)
    };
    let table = Table1 { kernels, states };
    println!("{} test samples from {} families", kernels.samples, te.completed().count());
    println!("{table}");
    if let Some(p) = out {
        let mut t = toml::Table::try_from(&table)?;
        t.insert("config_hash".into(), cfg.hash().into());
        fs::write(p, toml::to_string(&t)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn bench_cmd(cfg: &Config, model_path: Option<&Path>, n: Option<usize>, no_closed_loop: bool, out: Option<&Path>, jobs: usize) -> anyhow::Result<()> {
    let sc = cfg.scenario()?;
    let ctrl: ControllerConfig = cfg.controller(KernelSource::ClassicalSolver);
    let model = model_path.map(|p| load_checked_model(p, cfg)).transpose()?;
    let n = n.unwrap_or(cfg.bench.n);
    let mesh = TriMesh::new(ctrl.kernel_mesh)?;
    let ds = cfg.dataset_config();
    let inputs = sample_inputs(&sc.linear, mesh.n(), n, (ds.tau_lo, ds.tau_hi), cfg.bench.seed);
    let mut report = bench_kernels(&sc.linear, mesh, ctrl.tol, ctrl.max_iter, model.as_ref(), &inputs, cfg.bench.warmup)?;
    if n > 0 && !no_closed_loop {
        if let Some(m) = &model {
            let opts = RunOptions { snapshot_every: 0, diagnostics: false };
            let no = cfg.controller(KernelSource::NeuralOperator);
            let timed = |c: &ControllerConfig, m: Option<&DeepOnet>| -> anyhow::Result<f64> {
                let start = Instant::now();
                run_closed_loop(&sc, c, m, opts)?;
                Ok(start.elapsed().as_secs_f64())
            };
            let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
            let (a, b) = pool.install(|| rayon::join(|| timed(&ctrl, None), || timed(&no, Some(m))));
            report.closed_loop_solver_s = Some(a?);
            report.closed_loop_operator_s = Some(b?);
        }
    }
    print!("{report}");
    if let Some(p) = out {
        let mut t = toml::Table::try_from(&report)?;
        t.insert("config_hash".into(), cfg.hash().into());
        fs::write(p, toml::to_string(&t)?).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
