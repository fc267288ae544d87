//! Commutator defect on a two-parameter quadratic (against its closed form)
//! and on the transformer at initialization, with the execution-basis
//! projection after a short training run.

use grokgeom::data::{build_dataset, Operation};
use grokgeom::model::{ModelConfig, Transformer};
use grokgeom::probe::{commutator_sample, probe_point, ProbeConfig};
use grokgeom::train::{train, NoHook, TrainConfig};

fn main() -> grokgeom::Result<()> {
    // L_A = ½ θᵀH_Aθ, L_B = ½ θᵀH_Bθ
    let ha = [[2.0, 0.5], [0.5, 1.0]];
    let hb = [[1.0, -0.3], [-0.3, 3.0]];
    let mv = |h: &[[f64; 2]; 2], x: &[f64]| vec![h[0][0] * x[0] + h[0][1] * x[1], h[1][0] * x[0] + h[1][1] * x[1]];
    let theta = [0.7, -1.2];
    let eta = 1e-3;
    let s = commutator_sample(&theta, |x| Ok(mv(&ha, x)), |x| Ok(mv(&hb, x)), eta)?;
    let (ga, gb) = (mv(&ha, &theta), mv(&hb, &theta));
    let (hb_ga, ha_gb) = (mv(&hb, &ga), mv(&ha, &gb));
    let oracle: Vec<f64> = (0..2).map(|i| eta * eta * (hb_ga[i] - ha_gb[i])).collect();
    println!(
        "quadratic: delta {:?}  closed form {:?}  D {:.4}",
        s.delta, oracle, s.defect
    );

    let model = Transformer::new(ModelConfig::default())?;
    let data = build_dataset(Operation::Add, 97, 0.5, 11)?;
    let cfg = TrainConfig {
        seed: 11,
        max_steps: 300,
        early_stop: false,
        ..TrainConfig::fast()
    };
    let out = train(&model, &cfg, &data, &mut NoHook, None)?;
    let probe = ProbeConfig::default();
    let rec = probe_point(
        &model,
        &out.theta,
        &out.log,
        &data.train,
        &probe,
        11,
        300,
        cfg.batch_size,
    )?;
    println!(
        "step 300: D_med {:?}  rho {:?}  exec {:?}  random {:?}  ratio {:?}  K {:?}",
        rec.d_med, rec.rho, rec.exec_frac, rec.rand_frac, rec.exec_rand_ratio, rec.basis_k
    );
    Ok(())
}
