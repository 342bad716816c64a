//! End-to-end label inference against secure aggregation.
//!
//! A malicious server sends every client its own fishing model instead of the
//! shared global one. After the clients' gradients are securely aggregated —
//! so the server never sees any individual update — the attack still recovers
//! exactly how many samples of each class every client trained on, by solving
//! a small linear system per output class.

use fedfish::attack::{build_fishing_models, run_attack, AttackOptions};
use fedfish::defenses::DefenseConfig;
use fedfish::federation::{run_round, ClientDataset, ModelDistribution, RoundConfig};
use fedfish::harness::gen_synthetic;
use fedfish::metrics::lnacc;
use fedfish::nn::Model;
use fedfish::secure_agg::SaMode;
use fedfish::seeding::{derive_seed, stream};

fn main() -> fedfish::Result<()> {
    let seed = 7;
    let classes = 10;
    let cohort_size = 5u32;
    let batch_size = 64;

    let mut rng = stream(seed, "model-init", 0);
    let base = Model::fcn3(32, (64, 64), classes, &mut rng)?;

    let cohort: Vec<ClientDataset> = (0..cohort_size)
        .map(|id| {
            let (x, y) = gen_synthetic(classes, 32, 96, derive_seed(seed, "client", id as u64))?;
            ClientDataset::new(id, x, y, classes)
        })
        .collect::<fedfish::Result<_>>()?;
    let ids: Vec<u32> = cohort.iter().map(|c| c.client_id()).collect();

    // Server side: craft one fishing model per client. Each has a distinct,
    // data-independent final-layer embedding, which is what makes the
    // aggregate separable again.
    let kits = build_fishing_models(&base, &ids, &AttackOptions::default())?;
    let distribution =
        ModelDistribution::PerClient(kits.iter().map(|k| k.model.clone()).collect());

    let config = RoundConfig {
        round: 0,
        batch_size,
        learning_rate: 0.1,
        sa_mode: SaMode::masked_default(), // real pairwise masking, not idealized
        defense: DefenseConfig::None,
        seed,
    };
    let outcome = run_round(&base, &distribution, &cohort, &config)?;
    println!(
        "securely aggregated round: {} clients, batch {batch_size}, masked aggregation",
        cohort.len()
    );

    // Attack side: disaggregate the summed bias gradient and read off counts.
    let results = run_attack(&outcome.record, &kits)?;
    let truth = outcome.true_counts.oracle();

    println!("\nper-client label counts (true vs inferred):");
    for (res, t) in results.iter().zip(truth) {
        println!("  client {}", res.client_id);
        println!("    true     {:?}", t.counts());
        println!("    inferred {:?}", res.counts.counts());
        let acc = lnacc(&res.counts, t)?;
        println!(
            "    lnacc {:.3}, system rcond {:.2e}, residual {:.2e}",
            acc, res.rcond, res.residual_norm
        );
    }

    let perfect = results
        .iter()
        .zip(truth)
        .all(|(r, t)| r.counts.counts() == t.counts());
    println!(
        "\nall {} count vectors recovered exactly: {}",
        truth.len(),
        perfect
    );
    Ok(())
}
