//! What the final-layer bias gradient gives away on its own, with no model
//! tampering at all.
//!
//! For softmax cross-entropy, the bias gradient of the true class is the only
//! negative entry when a client trains on a single sample. With a full batch
//! and known per-sample logits, the count of each class follows exactly from
//! the batch-averaged gradient. Both identities are demonstrated below on an
//! honest, untouched model.

use fedfish::attack::{single_sample_label, counts_from_sample_logits};
use fedfish::federation::LabelCounts;
use fedfish::harness::gen_synthetic;
use fedfish::nn::{backward, forward, Mode, Model};
use fedfish::seeding::{derive_seed, stream};

fn main() -> fedfish::Result<()> {
    let classes = 6;
    let mut rng = stream(31, "model-init", 0);
    let model = Model::fcn3(16, (24, 20), classes, &mut rng)?;

    // --- batch of one: the sign rule ---------------------------------------
    println!("single-sample rounds, sign rule on the bias gradient:");
    let mut hits = 0;
    for trial in 0..8u64 {
        let (x, y) = gen_synthetic(classes, 16, 1, derive_seed(31, "sample", trial))?;
        let trace = forward(&model, &x, Mode::Train)?;
        let grads = backward(&model, &trace, &y)?;
        let b_grad = grads.fcl_bias()?;
        let guess = single_sample_label(b_grad)?;
        let mark = if guess == y[0] { "ok" } else { "MISS" };
        if guess == y[0] {
            hits += 1;
        }
        println!("  true class {}  inferred {}  [{mark}]", y[0], guess);
    }
    println!("  {hits}/8 recovered\n");

    // --- full batch: exact counts from the averaged gradient ---------------
    let batch = 48;
    let (x, y) = gen_synthetic(classes, 16, batch, derive_seed(31, "batch", 0))?;
    let trace = forward(&model, &x, Mode::Train)?;
    let grads = backward(&model, &trace, &y)?;

    // The identity needs the per-sample logits; an honest server does not have
    // them, which is exactly the gap the fishing models close.
    let inferred = counts_from_sample_logits(grads.fcl_bias()?, &trace.logits(), batch)?;
    let truth = LabelCounts::from_labels(&y, classes)?;
    println!("batch of {batch}, counts from the averaged bias gradient:");
    println!("  true     {:?}", truth.counts());
    println!("  inferred {:?}", inferred.counts.counts());
    println!(
        "  exact match: {}",
        inferred.counts.counts() == truth.counts()
    );
    Ok(())
}
