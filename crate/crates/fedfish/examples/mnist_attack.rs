//! The attack on image data loaded from IDX files.
//!
//! Points the harness at a directory containing `train-images-idx3-ubyte`
//! and `train-labels-idx1-ubyte` (set FEDFISH_DATA_DIR, or pass `dir` in the
//! config). When no such directory is available this example writes a small
//! synthetic stand-in in the same IDX format first, so the full file path —
//! big-endian magics, byte pixels, the works — is always exercised.

use fedfish::harness::data::{write_idx_images, write_idx_labels};
use fedfish::harness::{
    gen_synthetic, run_experiment, DatasetConfig, ExperimentConfig, ModelConfig, DATA_DIR_ENV,
};
use std::env;
use std::path::PathBuf;

const IMAGES: &str = "train-images-idx3-ubyte";
const LABELS: &str = "train-labels-idx1-ubyte";

fn data_dir() -> fedfish::Result<(PathBuf, bool)> {
    if let Ok(dir) = env::var(DATA_DIR_ENV) {
        let dir = PathBuf::from(dir);
        if dir.join(IMAGES).is_file() {
            return Ok((dir, true));
        }
        eprintln!("{DATA_DIR_ENV} is set but {IMAGES} is missing there; using a stand-in");
    }
    let dir = env::temp_dir().join(format!("mnist-standin-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    // 28x28 blobs through the real writer; load_mnist cannot tell the difference.
    let (x, y) = gen_synthetic(10, 784, 2000, 0xD165)?;
    let n = y.len();
    write_idx_images(&dir.join(IMAGES), &x.reshape(vec![n, 1, 28, 28])?)?;
    write_idx_labels(&dir.join(LABELS), &y)?;
    Ok((dir, false))
}

fn main() -> fedfish::Result<()> {
    let (dir, real) = data_dir()?;
    println!(
        "image source: {} ({})",
        dir.display(),
        if real { "found via env" } else { "generated stand-in" }
    );

    let mut cfg = ExperimentConfig::default();
    cfg.dataset = DatasetConfig::Mnist { dir: Some(dir.clone()) };
    cfg.model = ModelConfig::Fcn3 { hidden: (256, 128) };
    cfg.clients_total = 20;
    cfg.clients_per_round = 4;
    cfg.batch_size = 32;
    cfg.trials = 3;
    cfg.seed = 12;

    let report = run_experiment(&cfg)?;
    for row in &report.rows {
        let m = row.metrics.as_ref().expect("attack trials carry metrics");
        println!(
            "trial {}: clients {:?}, lnacc-all {:.3}, every count vector exact: {}",
            row.trial,
            row.selected,
            m.lnacc_all,
            row.attack
                .iter()
                .zip(&row.true_counts)
                .all(|(a, t)| a.counts.counts() == t.as_slice())
        );
    }
    println!("total {:.1}s over {} trials", report.total_wall_ms / 1000.0, report.rows.len());

    if !real {
        let _ = std::fs::remove_dir_all(&dir);
    }
    Ok(())
}
