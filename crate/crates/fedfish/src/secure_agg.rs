//! Secure-aggregation codec: the server can only ever recover the *sum* of
//! client gradient vectors, never an individual one.
//!
//! Two modes are provided. `Ideal` sums 64-bit floats directly and exists so
//! experiments can separate attack math from codec noise. `Masked` models a
//! real protocol: gradients are quantized to fixed-point integers and each
//! ordered client pair (u, v), u < v, shares a pseudorandom mask vector that
//! u adds and v subtracts, so all masks cancel mod 2^64 in the sum while any
//! single payload is statistically indistinguishable from noise.
//!
//! Quantization uses scale s = 2^k (default k = 24) with clip bound
//! M = 2^39 / s, keeping every per-client integer below 2^39 so sums over
//! realistic cohort sizes cannot wrap past the representable range.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::GradientSet;
use crate::seeding;

/// Default quantization exponent: s = 2^24.
pub const DEFAULT_SCALE_BITS: u8 = 24;

/// Largest supported quantization exponent. The clip bound is 2^(39 - k),
/// so anything past 38 leaves no representable range at all.
pub const MAX_SCALE_BITS: u8 = 38;

/// Which aggregation codec a round uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SaMode {
    /// Exact 64-bit-float summation; no masking, no quantization.
    Ideal,
    /// Pairwise-masked fixed-point integers at scale 2^scale_bits.
    Masked { scale_bits: u8 },
}

impl SaMode {
    pub fn masked_default() -> Self {
        SaMode::Masked {
            scale_bits: DEFAULT_SCALE_BITS,
        }
    }

    /// Quantization scale s, if this mode quantizes.
    pub fn scale(&self) -> Option<f64> {
        match self {
            SaMode::Ideal => None,
            SaMode::Masked { scale_bits } => Some((1u64 << scale_bits) as f64),
        }
    }

    /// Clip bound M = 2^39 / s; encode rejects any |g| >= M.
    pub fn clip_bound(&self) -> Option<f64> {
        match self {
            SaMode::Ideal => None,
            SaMode::Masked { scale_bits } => Some(2f64.powi(39 - i32::from(*scale_bits))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SaMode::Masked { scale_bits } = self {
            if *scale_bits == 0 || *scale_bits > MAX_SCALE_BITS {
                return Err(Error::Config(format!(
                    "masked-mode scale exponent must be in [1, {MAX_SCALE_BITS}], got {scale_bits}"
                )));
            }
        }
        Ok(())
    }
}

/// Shared masking agreement for one round: the ordered cohort and the seed
/// from which every pair's mask stream is derived.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskPlan {
    clients: Vec<u32>,
    seed: u64,
}

impl MaskPlan {
    /// `clients` must be nonempty and distinct; order is kept as given.
    pub fn new(clients: &[u32], seed: u64) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::Protocol("mask plan needs at least one client".into()));
        }
        let mut sorted = clients.to_vec();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Protocol(format!(
                "mask plan client ids must be distinct, got {clients:?}"
            )));
        }
        Ok(MaskPlan {
            clients: clients.to_vec(),
            seed,
        })
    }

    pub fn clients(&self) -> &[u32] {
        &self.clients
    }

    fn contains(&self, client_id: u32) -> bool {
        self.clients.contains(&client_id)
    }

    /// Accumulate this client's net mask into `acc` (wrapping). For each
    /// partner pair (lo, hi) the stream is identical on both sides; the
    /// lower id adds it and the higher id subtracts it, so the cohort-wide
    /// sum of applied masks is exactly zero mod 2^64.
    fn apply_masks(&self, client_id: u32, acc: &mut [u64]) {
        for &other in &self.clients {
            if other == client_id {
                continue;
            }
            let (lo, hi) = if client_id < other {
                (client_id, other)
            } else {
                (other, client_id)
            };
            let pair_index = (u64::from(lo) << 32) | u64::from(hi);
            let mut rng = seeding::stream(self.seed, "pair-mask", pair_index);
            if client_id == lo {
                for slot in acc.iter_mut() {
                    *slot = slot.wrapping_add(rng.next_u64());
                }
            } else {
                for slot in acc.iter_mut() {
                    *slot = slot.wrapping_sub(rng.next_u64());
                }
            }
        }
    }
}

/// One client's encoded contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedUpdate {
    pub client_id: u32,
    pub mode: SaMode,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    /// Ideal mode: the flat gradient vector itself.
    Real(Vec<f64>),
    /// Masked mode: fixed-point residues mod 2^64.
    Residues(Vec<u64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::Real(v) => v.len(),
            Payload::Residues(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Encode one client's gradients under the round's mask plan.
pub fn encode(
    grads: &GradientSet,
    plan: &MaskPlan,
    client_id: u32,
    mode: SaMode,
) -> Result<MaskedUpdate> {
    encode_values(&grads.flatten(), plan, client_id, mode)
}

/// Flat-vector core of [`encode`]; useful when the values did not come from
/// a model (tests, replay tooling).
pub fn encode_values(
    values: &[f64],
    plan: &MaskPlan,
    client_id: u32,
    mode: SaMode,
) -> Result<MaskedUpdate> {
    mode.validate()?;
    if !plan.contains(client_id) {
        return Err(Error::Protocol(format!(
            "client {client_id} is not part of the mask plan"
        )));
    }
    let payload = match mode {
        SaMode::Ideal => Payload::Real(values.to_vec()),
        SaMode::Masked { .. } => {
            let scale = mode.scale().unwrap();
            let bound = mode.clip_bound().unwrap();
            let mut acc: Vec<u64> = Vec::with_capacity(values.len());
            for (i, &g) in values.iter().enumerate() {
                if !g.is_finite() {
                    return Err(Error::Domain(format!(
                        "gradient element {i} is {g}; cannot quantize"
                    )));
                }
                if g.abs() >= bound {
                    return Err(Error::Range(format!(
                        "gradient element {i} has magnitude {:.6e}, at or above the \
                         fixed-point clip bound {bound:.6e}; clip before encoding",
                        g.abs()
                    )));
                }
                acc.push((g * scale).round() as i64 as u64);
            }
            plan.apply_masks(client_id, &mut acc);
            Payload::Residues(acc)
        }
    };
    Ok(MaskedUpdate {
        client_id,
        mode,
        payload,
    })
}

/// Decode the cohort sum. Every client in the plan must appear exactly once
/// and all updates must share one mode; the result is the elementwise sum of
/// the underlying gradient vectors (exact in ideal mode, within U/(2s) per
/// element in masked mode).
pub fn aggregate_decode(
    updates: &[MaskedUpdate],
    plan: &MaskPlan,
    template: &GradientSet,
) -> Result<GradientSet> {
    let flat = decode_values(updates, plan)?;
    if flat.len() != template.param_count() {
        return Err(Error::Shape(format!(
            "decoded vector has {} elements, template expects {}",
            flat.len(),
            template.param_count()
        )));
    }
    GradientSet::from_flat(template, &flat)
}

/// Flat-vector core of [`aggregate_decode`].
pub fn decode_values(updates: &[MaskedUpdate], plan: &MaskPlan) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::Protocol("no updates to decode".into()));
    }
    let mode = updates[0].mode;
    mode.validate()?;
    let len = updates[0].payload.len();
    for u in updates {
        if u.mode != mode {
            return Err(Error::Contract(format!(
                "mixed SA modes in one round: client {} sent {:?}, expected {:?}",
                u.client_id, u.mode, mode
            )));
        }
        if u.payload.len() != len {
            return Err(Error::Shape(format!(
                "client {} payload has {} elements, expected {}",
                u.client_id,
                u.payload.len(),
                len
            )));
        }
    }
    // Exactly the planned cohort, no dropouts, no strangers, no duplicates.
    let mut seen = Vec::with_capacity(updates.len());
    for u in updates {
        if !plan.contains(u.client_id) {
            return Err(Error::Protocol(format!(
                "update from client {} not in the mask plan",
                u.client_id
            )));
        }
        if seen.contains(&u.client_id) {
            return Err(Error::Protocol(format!(
                "duplicate update from client {}",
                u.client_id
            )));
        }
        seen.push(u.client_id);
    }
    for &c in plan.clients() {
        if !seen.contains(&c) {
            return Err(Error::Protocol(format!(
                "client {c} missing from the round (dropout unsupported)"
            )));
        }
    }

    match mode {
        SaMode::Ideal => {
            // Sum in ascending client-id order so the float result does not
            // depend on arrival order.
            let mut order: Vec<&MaskedUpdate> = updates.iter().collect();
            order.sort_by_key(|u| u.client_id);
            let mut sum = vec![0f64; len];
            for u in order {
                let Payload::Real(vals) = &u.payload else {
                    return Err(Error::Contract(format!(
                        "client {} sent a residue payload in ideal mode",
                        u.client_id
                    )));
                };
                for (s, v) in sum.iter_mut().zip(vals) {
                    *s += v;
                }
            }
            Ok(sum)
        }
        SaMode::Masked { .. } => {
            let scale = mode.scale().unwrap();
            let mut acc = vec![0u64; len];
            for u in updates {
                let Payload::Residues(res) = &u.payload else {
                    return Err(Error::Contract(format!(
                        "client {} sent a real payload in masked mode",
                        u.client_id
                    )));
                };
                for (s, r) in acc.iter_mut().zip(res) {
                    *s = s.wrapping_add(*r);
                }
            }
            Ok(acc.into_iter().map(|r| (r as i64) as f64 / scale).collect())
        }
    }
}

const WIRE_HEADER_LEN: usize = 4 + 1 + 1 + 8;
const MODE_IDEAL: u8 = 0;
const MODE_MASKED: u8 = 1;
const WIRE_LABEL: &str = "<wire>";

impl MaskedUpdate {
    /// Wire format: little-endian `client_id: u32`, `mode: u8`, `k: u8`,
    /// `length: u64`, then `length` u64 words (float bits in ideal mode).
    pub fn to_bytes(&self) -> Vec<u8> {
        let (mode_byte, k) = match self.mode {
            SaMode::Ideal => (MODE_IDEAL, 0u8),
            SaMode::Masked { scale_bits } => (MODE_MASKED, scale_bits),
        };
        let len = self.payload.len();
        let mut out = Vec::with_capacity(WIRE_HEADER_LEN + 8 * len);
        out.extend_from_slice(&self.client_id.to_le_bytes());
        out.push(mode_byte);
        out.push(k);
        out.extend_from_slice(&(len as u64).to_le_bytes());
        match &self.payload {
            Payload::Real(vals) => {
                for v in vals {
                    out.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
            Payload::Residues(res) => {
                for r in res {
                    out.extend_from_slice(&r.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<MaskedUpdate> {
        let fmt = |offset: u64, message: String| Error::Format {
            path: WIRE_LABEL.into(),
            offset,
            message,
        };
        if bytes.len() < WIRE_HEADER_LEN {
            return Err(fmt(
                bytes.len() as u64,
                format!("truncated header: {} of {WIRE_HEADER_LEN} bytes", bytes.len()),
            ));
        }
        let client_id = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let mode_byte = bytes[4];
        let k = bytes[5];
        let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap());
        let mode = match mode_byte {
            MODE_IDEAL => {
                if k != 0 {
                    return Err(fmt(5, format!("ideal mode requires k = 0, got {k}")));
                }
                SaMode::Ideal
            }
            MODE_MASKED => {
                let mode = SaMode::Masked { scale_bits: k };
                if mode.validate().is_err() {
                    return Err(fmt(5, format!("invalid scale exponent {k}")));
                }
                mode
            }
            other => return Err(fmt(4, format!("unknown mode byte {other}"))),
        };
        let expected = WIRE_HEADER_LEN as u64 + 8 * len;
        if (bytes.len() as u64) != expected {
            return Err(fmt(
                bytes.len().min(expected as usize) as u64,
                format!("payload length {len} implies {expected} bytes, got {}", bytes.len()),
            ));
        }
        let words = bytes[WIRE_HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()));
        let payload = match mode {
            SaMode::Ideal => Payload::Real(words.map(f64::from_bits).collect()),
            SaMode::Masked { .. } => Payload::Residues(words.collect()),
        };
        Ok(MaskedUpdate {
            client_id,
            mode,
            payload,
        })
    }
}
