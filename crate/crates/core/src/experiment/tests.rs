use super::aggregate::{write_analysis, AnalyzeOptions, ANALYSIS, PHASE_DIAGRAM, SCALING};
use super::intervene::{grid_dir, DOSE_RESPONSE};
use super::*;
use crate::data::Operation;
use crate::model::ModelConfig;
use crate::train::Regime;

fn tiny(op: Operation, seed: u64) -> RunConfig {
    let mut c = RunConfig::new(op, Regime::Fast, seed);
    c.model = ModelConfig {
        p: 11,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        n_layers: 1,
        ..ModelConfig::default()
    };
    c.train.max_steps = 40;
    c.train.batch_size = 16;
    c.train.eval_interval = 10;
    c.train.snapshot_interval = 10;
    c.train.probe_interval = 10;
    c.probe.n_samples = 3;
    c.probe.n_align = 2;
    c.probe.n_rand = 2;
    c.null_trials = 100;
    c
}

#[test]
fn run_writes_artifacts_and_is_idempotent() {
    let root = tempfile::tempdir().unwrap();
    let cfg = tiny(Operation::Add, 3);
    let first = execute_run(&cfg, root.path(), &BasisInput::None, false).unwrap();
    assert!(!first.reused);
    let dir = first.artifacts.dir.clone();
    for f in [CONFIG, MANIFEST, METRICS, DEFECT, EVENTS, PCA_SUMMARY] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
    assert!(dir.join(SNAPSHOTS).join("manifest.json").is_file());
    assert_eq!(first.artifacts.manifest.status, RunStatus::Done);
    assert_eq!(first.artifacts.metrics.len(), 5);
    assert_eq!(first.artifacts.defect.len(), 5);

    let metrics = fs::read(dir.join(METRICS)).unwrap();
    let again = execute_run(&cfg, root.path(), &BasisInput::None, false).unwrap();
    assert!(again.reused);
    assert_eq!(again.artifacts.manifest.run_id, first.artifacts.manifest.run_id);
    assert_eq!(find_run(root.path(), &cfg.run_id()).unwrap(), dir);

    let other = tempfile::tempdir().unwrap();
    let fresh = execute_run(&cfg, other.path(), &BasisInput::None, false).unwrap();
    assert_eq!(fs::read(fresh.artifacts.dir.join(METRICS)).unwrap(), metrics);
}

#[test]
fn interrupted_run_is_redone_and_finished_run_untouched() {
    let root = tempfile::tempdir().unwrap();
    let a = tiny(Operation::Add, 1);
    let b = tiny(Operation::Sub, 1);
    let done = execute_run(&a, root.path(), &BasisInput::None, false).unwrap();
    let before = fs::read(done.artifacts.dir.join(METRICS)).unwrap();

    let b_dir = run_dir(root.path(), &b);
    fs::create_dir_all(&b_dir).unwrap();
    write_json(&b_dir.join(CONFIG), &b).unwrap();
    write_manifest(
        &b_dir,
        &RunManifest {
            run_id: b.run_id(),
            dir: b_dir.clone(),
            status: RunStatus::Running,
            summary: None,
            failure: None,
        },
    )
    .unwrap();
    fs::write(b_dir.join(METRICS), "step\ngarbage\n").unwrap();

    let spec = SweepSpec {
        ops: vec![Operation::Add, Operation::Sub],
        lrs: vec![1e-3],
        seeds: vec![1],
        max_steps: 40,
        template: tiny(Operation::Add, 1),
        ..SweepSpec::default()
    };
    let m = run_sweep(&spec, root.path()).unwrap();
    assert!(m.runs.iter().all(|r| r.status == RunStatus::Done));
    assert_eq!(fs::read(done.artifacts.dir.join(METRICS)).unwrap(), before);
    let redone = RunArtifacts::load(&b_dir).unwrap();
    assert_eq!(redone.metrics.len(), 5);
}

#[test]
fn sweep_emits_phase_diagram() {
    let root = tempfile::tempdir().unwrap();
    let spec = SweepSpec {
        name: "grid".into(),
        ops: vec![Operation::Add, Operation::X2XyY2],
        lrs: vec![1e-3, 3e-3],
        seeds: vec![5],
        max_steps: 40,
        parallelism: 2,
        template: tiny(Operation::Add, 0),
        ..SweepSpec::default()
    };
    let m = run_sweep(&spec, root.path()).unwrap();
    assert_eq!(m.runs.len(), 4);
    assert!(m.runs.iter().all(|r| r.status == RunStatus::Done));
    let dir = sweep::sweep_dir(root.path(), "grid");
    let phase = fs::read_to_string(dir.join(PHASE_DIAGRAM)).unwrap();
    let mut lines = phase.lines();
    assert_eq!(
        lines.next(),
        Some("lr,op,seed,grokked,grok_step,max_defect,onset_step,lead")
    );
    assert_eq!(lines.count(), 4);
    assert!(dir.join(ANALYSIS).is_file() && dir.join(SCALING).is_file());
    for cell in spec.cells() {
        assert_eq!(cell.train.max_steps, 40);
        assert_eq!(cell.model.d_model, 8);
    }
}

#[test]
fn sweep_validation() {
    let mut spec = SweepSpec::default();
    spec.validate().unwrap();
    spec.lrs = vec![1e-4];
    assert!(spec.validate().is_err());
    spec.long = true;
    spec.validate().unwrap();
    spec.regime = Regime::Slow;
    spec.validate().unwrap();
    spec.long = false;
    spec.lrs = vec![1e-3];
    assert!(spec.validate().is_err());
    let empty = SweepSpec {
        seeds: vec![],
        ..SweepSpec::default()
    };
    assert!(empty.validate().is_err());
    assert_eq!(SweepSpec::default().cells().len(), 12);
}

#[test]
fn analysis_of_single_run() {
    let root = tempfile::tempdir().unwrap();
    let out = execute_run(&tiny(Operation::Mul, 2), root.path(), &BasisInput::None, false).unwrap();
    let runs = vec![out.artifacts];
    let a = analyze_runs(&runs, &AnalyzeOptions::default()).unwrap();
    assert_eq!(a.runs.len(), 1);
    assert!(a.runs[0].onset.is_some());
    assert_eq!(a.cells.len(), 1);
    let dir = root.path().join("analysis");
    write_analysis(&dir, &runs, &a).unwrap();
    let back: Analysis = crate::io::read_json(&dir.join(ANALYSIS)).unwrap();
    assert_eq!(back, a);
    assert!(analyze_runs(&[], &AnalyzeOptions::default()).is_err());
}

#[test]
fn intervention_grid_needs_baseline() {
    let root = tempfile::tempdir().unwrap();
    let mut grid = InterventionGrid::new(Operation::Add, vec![4], InterventionMode::SuppressPca, vec![1.0]);
    grid.template = tiny(Operation::Add, 0);
    assert!(matches!(
        run_intervention_grid(&grid, root.path()),
        Err(Error::MissingArtifact { .. })
    ));
}

#[test]
fn zero_strength_suppression_reproduces_baseline() {
    let root = tempfile::tempdir().unwrap();
    let mut base = tiny(Operation::Add, 4);
    base.train.max_steps = 80;
    let out = execute_run(&base, root.path(), &BasisInput::None, false).unwrap();
    let mut m = out.artifacts.manifest.clone();
    m.summary.as_mut().unwrap().grok_step = Some(20);
    write_manifest(&out.artifacts.dir, &m).unwrap();

    let mut grid = InterventionGrid::new(Operation::Add, vec![4], InterventionMode::SuppressPca, vec![0.0, 1.0]);
    grid.template = base;
    grid.template.intervention.start_step = 10;
    let rows = run_intervention_grid(&grid, root.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.baseline_grok_step == 20));
    let s0 = RunArtifacts::load(&rows[0].run_dir).unwrap();
    assert_eq!(s0.config.train.max_steps, 60);
    assert!(!s0.config.probe.enabled);
    assert_eq!(s0.metrics[..], out.artifacts.metrics[..s0.metrics.len()]);
    let s1 = RunArtifacts::load(&rows[1].run_dir).unwrap();
    assert_ne!(s1.metrics, s0.metrics);
    let info: serde_json::Value = crate::io::read_json(&rows[1].run_dir.join(INTERVENTION)).unwrap();
    assert_eq!(info["basis_hash"].as_str().unwrap().len(), 16);

    let csv = fs::read_to_string(grid_dir(root.path(), &grid).join(DOSE_RESPONSE)).unwrap();
    assert!(csv.starts_with("op,mode,s_or_gain,seed,grok_step_or_null"));
    assert_eq!(csv.lines().count(), 3);
}
