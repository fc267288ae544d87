use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use grokgeom::analysis::OnsetRule;
use grokgeom::data::{build_dataset, Operation};
use grokgeom::experiment::aggregate::{write_analysis, AnalyzeOptions};
use grokgeom::experiment::artifacts::{FINAL_STEM, PCA_SUMMARY, SNAPSHOTS};
use grokgeom::experiment::{
    analyze_runs, artifact_root, execute_run, run_intervention_grid, run_sweep, BasisInput, InterventionGrid,
    RunArtifacts, RunConfig, SweepSpec,
};
use grokgeom::intervention::InterventionMode;
use grokgeom::model::{load_checkpoint, Transformer};
use grokgeom::pca::{summarize, write_summary_csv, TrajectoryLog};
use grokgeom::probe::probe_point;
use grokgeom::train::{Regime, RunStatus};
use grokgeom::Error;

#[derive(Parser)]
#[command(name = "grokgeom", version, about = "Grokking geometry experiments")]
struct Cli {
    /// Artifact root (default: $GROKGEOM_OUT or ./grokgeom-out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one run and write its artifacts.
    Train(TrainArgs),
    /// Run a grid of training runs and aggregate them.
    Sweep(SweepArgs),
    /// Aggregate finished runs into analysis.json, phase_diagram.csv and scaling.csv.
    Analyze(AnalyzeArgs),
    /// Dose-response grid of an intervention against baseline runs.
    Intervene(IntervenArgs),
    /// Re-probe the final checkpoint of a finished run.
    Probe(RunRef),
    /// Recompute the trajectory PCA summary of a finished run.
    Pca(PcaArgs),
}

#[derive(Args, Default)]
struct Overrides {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    op: Option<Operation>,
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    wd: Option<f64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    probe_interval: Option<u64>,
    /// Disable commutator probes.
    #[arg(long)]
    no_probe: bool,
    /// Measure trajectory alignment at every probe.
    #[arg(long)]
    align_every_probe: bool,
    #[arg(long)]
    onset_floor: Option<f64>,
}

impl Overrides {
    fn build(&self) -> grokgeom::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_toml_file(p)?,
            None => RunConfig::new(
                self.op.unwrap_or(Operation::Add),
                self.regime.unwrap_or(Regime::Fast),
                self.seed.unwrap_or(0),
            ),
        };
        if let Some(r) = self.regime {
            if r != cfg.train.regime {
                let fresh = RunConfig::new(cfg.op, r, cfg.train.seed);
                cfg.model.n_layers = fresh.model.n_layers;
                cfg.train = fresh.train;
            }
        }
        if let Some(op) = self.op {
            cfg.op = op;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(wd) = self.wd {
            cfg.train.weight_decay = wd;
        }
        if let Some(m) = self.max_steps {
            cfg.train.max_steps = m;
        }
        if let Some(p) = self.probe_interval {
            cfg.train.probe_interval = p;
        }
        if self.no_probe {
            cfg.probe.enabled = false;
        }
        if self.align_every_probe {
            cfg.probe.align_every_probe = true;
        }
        if let Some(f) = self.onset_floor {
            cfg.probe.onset_floor = f;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: Overrides,
    /// Retrain even if a finished run exists.
    #[arg(long)]
    force: bool,
    /// Allow the slow regime.
    #[arg(long)]
    long: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// TOML sweep spec; flags override its values.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_delimiter = ',')]
    ops: Vec<Operation>,
    #[arg(long, value_delimiter = ',')]
    lrs: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    wds: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Allow the slow regime and learning rates below 3e-4.
    #[arg(long)]
    long: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Run directories; all finished runs under the artifact root if empty.
    runs: Vec<PathBuf>,
    /// Output directory (default: <root>/analysis).
    #[arg(long)]
    dest: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    baseline_n: usize,
    #[arg(long, default_value_t = 10.0)]
    mult: f64,
    #[arg(long, default_value_t = 20.0)]
    floor: f64,
}

#[derive(Args)]
struct IntervenArgs {
    #[command(flatten)]
    base: Overrides,
    #[arg(long)]
    mode: InterventionMode,
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// Suppression strengths or kick gains.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long, default_value_t = 3)]
    budget_factor: u64,
    #[arg(long, default_value_t = 1)]
    parallelism: usize,
    #[arg(long)]
    start_step: Option<u64>,
    #[arg(long)]
    refresh_interval: Option<u64>,
    #[arg(long)]
    basis_rank: Option<usize>,
    /// Train missing baseline runs first.
    #[arg(long)]
    run_baselines: bool,
}

#[derive(Args)]
struct RunRef {
    /// Run directory.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct PcaArgs {
    #[command(flatten)]
    run: RunRef,
    /// Random-walk null trials (0 skips z-scores).
    #[arg(long, default_value_t = 200)]
    null_trials: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let root = cli.out.clone().unwrap_or_else(artifact_root);
    match dispatch(cli.cmd, &root) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::InvalidConfig(_)
                | Error::UnknownParameter(_)
                | Error::Toml(_)
                | Error::HeadsDoNotDivide { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn dispatch(cmd: Cmd, root: &Path) -> grokgeom::Result<ExitCode> {
    match cmd {
        Cmd::Train(a) => {
            let cfg = a.run.build()?;
            if cfg.train.regime == Regime::Slow && !a.long {
                return Err(Error::InvalidConfig("slow-regime runs need --long".into()));
            }
            let out = execute_run(&cfg, root, &BasisInput::None, a.force)?;
            let m = &out.artifacts.manifest;
            println!("{}", m.dir.display());
            if out.reused {
                log::info!("reused finished run {}", m.run_id);
            }
            if let Some(s) = &m.summary {
                println!("{}", serde_json::to_string_pretty(s)?);
            }
            Ok(status_code(m.status))
        }
        Cmd::Sweep(a) => {
            let mut spec = match &a.spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p)?;
                    toml::from_str::<SweepSpec>(&text)?
                }
                None => SweepSpec::default(),
            };
            if let Some(n) = a.name {
                spec.name = n;
            }
            if !a.ops.is_empty() {
                spec.ops = a.ops;
            }
            if !a.lrs.is_empty() {
                spec.lrs = a.lrs;
            }
            if !a.wds.is_empty() {
                spec.weight_decays = a.wds;
            }
            if !a.seeds.is_empty() {
                spec.seeds = a.seeds;
            }
            if let Some(r) = a.regime {
                spec.regime = r;
            }
            if let Some(m) = a.max_steps {
                spec.max_steps = m;
            }
            if let Some(p) = a.parallelism {
                spec.parallelism = p;
            }
            spec.long |= a.long;
            let m = run_sweep(&spec, root)?;
            let failed = m.runs.iter().filter(|r| r.status != RunStatus::Done).count();
            for r in &m.runs {
                println!("{:?}\t{}", r.status, r.dir.display());
            }
            Ok(if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(2)
            })
        }
        Cmd::Analyze(a) => {
            let dirs = if a.runs.is_empty() {
                finished_runs(root)?
            } else {
                a.runs
            };
            let runs = dirs
                .iter()
                .map(|d| RunArtifacts::load(d))
                .collect::<grokgeom::Result<Vec<_>>>()?;
            let opts = AnalyzeOptions {
                rule: OnsetRule {
                    baseline_n: a.baseline_n,
                    mult: a.mult,
                    floor: a.floor,
                },
            };
            let analysis = analyze_runs(&runs, &opts)?;
            let dest = a.dest.unwrap_or_else(|| root.join("analysis"));
            write_analysis(&dest, &runs, &analysis)?;
            println!("{}", dest.display());
            println!(
                "{} runs, {} with lead ({} positive), sign test p = {:?}, alpha = {:?}",
                analysis.runs.len(),
                analysis.leads.n_with_lead,
                analysis.leads.n_positive,
                analysis.sign_test_p,
                analysis.power_law.as_ref().map(|f| f.alpha)
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Intervene(a) => {
            let template = a.base.build()?;
            let mut grid = InterventionGrid::new(template.op, a.seeds, a.mode, a.values);
            grid.template = template;
            grid.budget_factor = a.budget_factor;
            grid.parallelism = a.parallelism;
            if let Some(s) = a.start_step {
                grid.template.intervention.start_step = s;
            }
            if let Some(r) = a.refresh_interval {
                grid.template.intervention.refresh_interval = r;
            }
            if let Some(k) = a.basis_rank {
                grid.template.intervention.basis_rank = k;
            }
            if a.run_baselines {
                for &seed in &grid.seeds {
                    execute_run(&grid.baseline_config(seed), root, &BasisInput::None, false)?;
                }
            }
            let rows = run_intervention_grid(&grid, root)?;
            println!("seed\tvalue\tbaseline\tgrok_step");
            for r in &rows {
                println!(
                    "{}\t{}\t{}\t{}",
                    r.seed,
                    r.value,
                    r.baseline_grok_step,
                    r.grok_step.map_or("-".into(), |g| g.to_string())
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Probe(r) => {
            let run = RunArtifacts::load(&r.run)?;
            let cfg = &run.config;
            let model = Transformer::new(cfg.model.clone())?;
            let data = build_dataset(cfg.op, cfg.model.p, cfg.train_frac, cfg.train.seed)?;
            let theta = load_checkpoint(&run.dir, FINAL_STEM)?;
            let log = TrajectoryLog::read_dir(&run.dir.join(SNAPSHOTS))?;
            let bs = if cfg.probe.batch_size == 0 {
                cfg.train.batch_size
            } else {
                cfg.probe.batch_size
            };
            let rec = probe_point(
                &model,
                &theta,
                &log,
                &data.train,
                &cfg.probe,
                cfg.train.seed,
                run.events.stopped_step,
                bs,
            )?;
            println!("{}", serde_json::to_string_pretty(&rec)?);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Pca(a) => {
            let run = RunArtifacts::load(&a.run.run)?;
            let log = TrajectoryLog::read_dir(&run.dir.join(SNAPSHOTS))?;
            let null = (a.null_trials > 0).then_some(a.null_trials);
            let rows = summarize(&log, null, run.config.train.seed)?;
            write_summary_csv(&run.dir.join(PCA_SUMMARY), &rows)?;
            println!("layer\tmatrix\tpc1%\tz");
            for r in &rows {
                println!(
                    "{}\t{}\t{:.2}\t{}",
                    r.layer,
                    r.matrix,
                    r.pc_percent[0],
                    r.z_score.map_or("-".into(), |z| format!("{z:.2}"))
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn status_code(s: RunStatus) -> ExitCode {
    if s == RunStatus::Done {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn finished_runs(root: &Path) -> grokgeom::Result<Vec<PathBuf>> {
    let runs = root.join("runs");
    let mut out = Vec::new();
    for e in std::fs::read_dir(&runs).map_err(|e| Error::MissingArtifact {
        path: runs.clone(),
        reason: e.to_string(),
    })? {
        let p = e?.path();
        if RunArtifacts::load(&p).is_ok_and(|r| r.is_done()) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}
