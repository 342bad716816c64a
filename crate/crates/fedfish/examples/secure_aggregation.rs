//! The masking codec on its own, outside any training loop.
//!
//! Every pair of clients agrees on a shared pseudorandom mask; one adds it,
//! the other subtracts it. A single masked update looks like noise, but the
//! sum over the full cohort cancels every mask exactly, leaving only
//! fixed-point quantization of the true total.

use fedfish::secure_agg::{decode_values, encode_values, MaskPlan, Payload, SaMode};
use fedfish::seeding::stream;
use rand::Rng;

fn main() -> fedfish::Result<()> {
    let clients: Vec<u32> = vec![3, 7, 21, 22];
    let len = 12;
    let mode = SaMode::masked_default();
    let plan = MaskPlan::new(&clients, 0xABCD)?;

    // Each client holds a small private vector.
    let mut rng = stream(5, "updates", 0);
    let updates: Vec<Vec<f64>> = clients
        .iter()
        .map(|_| (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();

    let encoded: Vec<_> = clients
        .iter()
        .zip(&updates)
        .map(|(&id, vals)| encode_values(vals, &plan, id, mode))
        .collect::<fedfish::Result<_>>()?;

    println!("client 3 plaintext (first 3): {:?}", &updates[0][..3]);
    if let Payload::Residues(r) = &encoded[0].payload {
        println!("client 3 on the wire       : {:?}", &r[..3]);
    }
    println!("masked residues are uniform field elements with no visible structure\n");

    let decoded = decode_values(&encoded, &plan)?;
    let expected: Vec<f64> = (0..len)
        .map(|i| updates.iter().map(|u| u[i]).sum::<f64>())
        .collect();
    let worst = decoded
        .iter()
        .zip(&expected)
        .map(|(d, e)| (d - e).abs())
        .fold(0.0f64, f64::max);

    println!("decoded sum (first 3): {:?}", &decoded[..3]);
    println!("true sum    (first 3): {:?}", &expected[..3]);
    let s = mode.scale().expect("masked mode has a fixed-point scale");
    println!("max deviation {worst:.2e}, quantization bound U/(2s) = {:.2e}", clients.len() as f64 / (2.0 * s));

    // With any update missing the masks cannot cancel, so the decoder refuses
    // outright rather than hand back mask-contaminated numbers.
    match decode_values(&encoded[..3], &plan) {
        Err(e) => println!("\ndecoding 3 of 4 updates fails as it must: {e}"),
        Ok(_) => println!("\nunexpected: partial decode succeeded"),
    }
    Ok(())
}
