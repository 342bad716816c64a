//! One honest federated round: broadcast the global model, let every client
//! compute a batch-averaged gradient, aggregate, and take the server step.
//!
//! No attack here — this is the baseline protocol the rest of the examples
//! subvert.

use fedfish::defenses::DefenseConfig;
use fedfish::federation::{run_round, ClientDataset, ModelDistribution, RoundConfig};
use fedfish::harness::gen_synthetic;
use fedfish::nn::Model;
use fedfish::secure_agg::SaMode;
use fedfish::seeding::{derive_seed, stream};
use fedfish::verify::loss_of;

fn main() -> fedfish::Result<()> {
    let seed = 2024;
    let classes = 10;
    let dim = 32;
    let mut rng = stream(seed, "model-init", 0);
    let model = Model::fcn3(dim, (64, 64), classes, &mut rng)?;

    // Five clients, 64 samples each, drawn from per-class Gaussian blobs.
    let cohort: Vec<ClientDataset> = (0..5u32)
        .map(|id| {
            let (samples, labels) =
                gen_synthetic(classes, dim, 64, derive_seed(seed, "client", id as u64))?;
            ClientDataset::new(id, samples, labels, classes)
        })
        .collect::<fedfish::Result<_>>()?;

    let config = RoundConfig {
        round: 0,
        batch_size: 64,
        learning_rate: 0.1,
        sa_mode: SaMode::Ideal,
        defense: DefenseConfig::None,
        seed,
    };

    let outcome = run_round(
        &model,
        &ModelDistribution::Broadcast(model.clone()),
        &cohort,
        &config,
    )?;

    println!("round 0, {} clients, batch 64", cohort.len());
    let agg = outcome.record.aggregated.flatten();
    let norm = agg.iter().map(|g| g * g).sum::<f64>().sqrt();
    println!("aggregated gradient: {} parameters, norm {norm:.4}", agg.len());

    // The server only ever sees that aggregate; per-client gradients stay
    // withheld inside the record for oracle checks.
    for c in &cohort {
        let before = loss_of(&model, c.samples(), c.labels())?;
        let after = loss_of(&outcome.updated_model, c.samples(), c.labels())?;
        println!(
            "client {}: loss {before:.4} -> {after:.4} after the global step",
            c.client_id()
        );
    }
    Ok(())
}
