//! How much do local defenses actually buy against label inference?
//!
//! Sweeps Gaussian noise, then gradient compression, and prints the attack
//! accuracy at each strength. The pattern to look for: strengths small enough
//! to leave training useful barely dent the attack, and it only breaks down
//! once the defense is strong enough to hurt the model too.

use fedfish::harness::{
    run_sweep, DatasetConfig, ExperimentConfig, ModelConfig, SweepAxis,
};

fn base_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetConfig::Synthetic { n_classes: 10, dim: 32, seed: Some(11) };
    cfg.model = ModelConfig::Fcn3 { hidden: (64, 64) };
    cfg.clients_total = 60;
    cfg.clients_per_round = 2;
    cfg.batch_size = 64;
    cfg.trials = 8;
    cfg.seed = 11;
    cfg
}

fn print_curve(label: &str, report: &fedfish::harness::Report) {
    println!("{label}");
    for (value, acc) in report.mean_lnacc_by_axis() {
        println!("  {value:>8}  mean lnacc {acc:.3}");
    }
}

fn main() -> fedfish::Result<()> {
    let noise = run_sweep(
        &base_config(),
        SweepAxis::parse("sigma")?,
        &[0.0, 1e-4, 1e-3, 1e-2],
    )?;
    print_curve("gaussian noise (sigma), batch 64:", &noise);

    let mut small_batches = base_config();
    small_batches.batch_size = 16;
    let compression = run_sweep(
        &small_batches,
        SweepAxis::parse("theta")?,
        &[0.0, 0.4, 0.8],
    )?;
    print_curve("\ngradient compression (theta), batch 16:", &compression);

    println!("\nnoise has to reach sigma ~1e-2 before accuracy drops off;");
    println!("compression at theta 0.8 still leaves most counts recoverable.");
    Ok(())
}
