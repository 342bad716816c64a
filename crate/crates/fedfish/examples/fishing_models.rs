//! A look inside the fishing-model construction.
//!
//! Each client's copy of the "global" model is doctored so that every input
//! sample lands on the same final-layer embedding — a constant vector picked
//! per client. Distinct constants across clients make the columns of the
//! disaggregation system independent, and the constants are chosen to keep
//! that system well conditioned.

use fedfish::attack::{build_fishing_models, coefficient_matrix, preset_probe, AttackOptions};
use fedfish::harness::gen_synthetic;
use fedfish::linalg::rcond_estimate;
use fedfish::nn::{forward, Mode, Model};
use fedfish::seeding::stream;
use fedfish::tensor::Matrix;

fn main() -> fedfish::Result<()> {
    let mut rng = stream(99, "model-init", 0);
    let base = Model::fcn3(32, (64, 64), 10, &mut rng)?;
    let ids: Vec<u32> = (0..6).collect();
    let kits = build_fishing_models(&base, &ids, &AttackOptions::default())?;

    println!("{} fishing kits built from one base model\n", kits.len());
    for kit in &kits {
        let e = &kit.embedding;
        let spread = e.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - e.iter().cloned().fold(f64::INFINITY, f64::min);
        println!(
            "client {}: c = {:>9.4}, embedding dim {}, coordinate spread {:.1e}",
            kit.client_id,
            kit.c_value,
            e.len(),
            spread
        );
    }

    // Data-agnostic check: run three unrelated inputs through one kit's model
    // and confirm they all produce the planned embedding.
    let kit = &kits[2];
    let (batch, _) = gen_synthetic(10, 32, 3, 0xFEED)?;
    let (probe, _logits) = preset_probe(kit)?;
    let trace = forward(&kit.model, &batch, Mode::Eval)?;
    let emb = trace.embedding();
    let mut worst = 0.0f64;
    for row in 0..3 {
        for (j, &want) in probe.iter().enumerate() {
            worst = worst.max((emb.get(row, j) - want).abs());
        }
    }
    println!(
        "\nclient {}: three arbitrary inputs all map to the preset embedding \
         (max deviation {worst:.1e})",
        kit.client_id
    );

    // The linear system the server will solve. Row 0 is all ones (counts sum
    // to the batch), the rest are the embedding coordinates.
    let embeddings: Vec<Vec<f64>> = kits.iter().map(|k| k.embedding.clone()).collect();
    let a: Matrix = coefficient_matrix(&embeddings)?;
    println!(
        "\ncoefficient matrix: {} x {}, rcond {:.2e}",
        a.rows(),
        a.cols(),
        rcond_estimate(&a)?
    );
    Ok(())
}
