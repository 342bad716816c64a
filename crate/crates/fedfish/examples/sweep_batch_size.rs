//! Attack accuracy across batch sizes, driven through the experiment harness.
//!
//! Larger batches mean larger raw counts and tighter tolerance per count, but
//! with well-conditioned fishing constants the recovery stays exact across
//! the whole range.

use fedfish::harness::{run_sweep, DatasetConfig, ExperimentConfig, ModelConfig, SweepAxis};

fn main() -> fedfish::Result<()> {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetConfig::Synthetic { n_classes: 10, dim: 32, seed: Some(3) };
    cfg.model = ModelConfig::Fcn3 { hidden: (64, 64) };
    cfg.clients_total = 60;
    cfg.clients_per_round = 5;
    cfg.trials = 6;
    cfg.seed = 3;

    let report = run_sweep(
        &cfg,
        SweepAxis::parse("batch_size")?,
        &[1.0, 16.0, 64.0, 256.0, 1024.0],
    )?;

    println!("batch-size sweep, 5 clients per round, ideal aggregation:");
    println!("{:>10}  {:>10}  {:>12}", "batch", "mean lnacc", "mean ms/trial");
    for (value, acc) in report.mean_lnacc_by_axis() {
        let ms: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.axis_value == Some(value) && r.error.is_none())
            .map(|r| r.wall_ms)
            .collect();
        let mean_ms = ms.iter().sum::<f64>() / ms.len().max(1) as f64;
        println!("{value:>10}  {acc:>10.3}  {mean_ms:>12.1}");
    }
    println!("\n{} trial rows total, written by `fedfish sweep` in CSV form", report.rows.len());
    Ok(())
}
