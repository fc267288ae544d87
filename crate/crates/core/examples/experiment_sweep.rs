//! A miniature sweep through the experiment layer: two operations, two
//! learning rates, small model and short budget, written under a temporary
//! artifact root with its phase diagram and analysis.

use grokgeom::data::Operation;
use grokgeom::experiment::aggregate::PHASE_DIAGRAM;
use grokgeom::experiment::sweep::sweep_dir;
use grokgeom::experiment::{run_sweep, RunConfig, SweepSpec};
use grokgeom::train::Regime;

fn main() -> grokgeom::Result<()> {
    let root = std::env::temp_dir().join("grokgeom-example-sweep");
    let mut template = RunConfig::new(Operation::Add, Regime::Fast, 0);
    template.model.d_model = 32;
    template.model.d_ff = 64;
    template.train.batch_size = 128;
    let spec = SweepSpec {
        name: "mini".into(),
        ops: vec![Operation::Add, Operation::X2XyY2],
        lrs: vec![1e-3, 3e-3],
        seeds: vec![1],
        max_steps: 400,
        template,
        ..SweepSpec::default()
    };
    let manifest = run_sweep(&spec, &root)?;
    for r in &manifest.runs {
        println!("{:?}  {}", r.status, r.dir.display());
    }
    let phase = std::fs::read_to_string(sweep_dir(&root, "mini").join(PHASE_DIAGRAM))?;
    print!("{phase}");
    Ok(())
}
