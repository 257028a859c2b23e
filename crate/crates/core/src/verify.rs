//! Exactness suite for the integer GEMM paths, run by the `verify` command.
//!
//! The reference here never touches packed data: it multiplies the original
//! `i8` codes directly, so a corrupted nibble in a packed buffer shows up as a
//! mismatch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gemm::{
    broadcast_to_groups, fast_int_accumulators, gemm_w4a8_asymmetric, gemm_w4a8_fast,
    gemm_w4a8_finegrained, gemm_w8a8, max_relative_error, widen_to_int8, OffsetPackedWeights,
};
use crate::pack::{
    pack_sint4_high_nibble, pack_uint4_offset, unpack_sint4, unpack_sint4_high_nibble,
    unpack_uint4_offset, INT4_MAX, INT4_MIN,
};
use crate::quant::{Granularity, Payload, QuantFormat, QuantizedTensor};

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub seed: u64,
    pub random_cases: usize,
    pub max_dim: usize,
    pub agreement_cases: usize,
    /// Flip one weight nibble in the first random matrix case.
    pub inject_fault: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            random_cases: 100,
            max_dim: 64,
            agreement_cases: 50,
            inject_fault: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub executed: usize,
    pub failures: Vec<String>,
}

impl CheckOutcome {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            executed: 0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyReport {
    pub checks: Vec<CheckOutcome>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckOutcome::passed)
    }
}

fn act(m: usize, k: usize, codes: Vec<i8>, scales: Vec<f32>) -> Result<QuantizedTensor> {
    QuantizedTensor::from_codes(m, k, QuantFormat::new(8, true, Granularity::PerToken)?, codes, scales, None)
}

fn weight(n: usize, k: usize, codes: Vec<i8>, scales: Vec<f32>) -> Result<QuantizedTensor> {
    QuantizedTensor::from_codes(n, k, QuantFormat::new(4, true, Granularity::PerChannel)?, codes, scales, None)
}

/// Every INT4 weight code against every INT8 activation code.
pub fn check_scalar_pairs() -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("scalar-pairs");
    for w in INT4_MIN..=INT4_MAX {
        let wq = weight(1, 1, vec![w], vec![1.0])?;
        for a in i8::MIN..=i8::MAX {
            let aq = act(1, 1, vec![a], vec![1.0])?;
            let got = fast_int_accumulators(&aq, &wq)?[0];
            let expect = a as i32 * w as i32;
            out.executed += 1;
            if got != expect {
                out.failures.push(format!("a={a} w={w}: got {got}, expected {expect}"));
            }
        }
    }
    Ok(out)
}

/// Both nibble encodings over all 16 values and random vectors.
pub fn check_pack_round_trips(seed: u64, vectors: usize) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("pack-round-trip");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<Vec<i8>> = vec![(INT4_MIN..=INT4_MAX).collect()];
    for _ in 0..vectors {
        let len = rng.random_range(0..=257);
        inputs.push((0..len).map(|_| rng.random_range(INT4_MIN..=INT4_MAX)).collect());
    }
    for v in &inputs {
        let s = pack_sint4_high_nibble(v)?;
        let u = pack_uint4_offset(v)?;
        let hi: Vec<i8> = v.iter().map(|&x| x.wrapping_mul(16)).collect();
        out.executed += 1;
        if unpack_sint4(&s) != *v || unpack_sint4_high_nibble(&s) != hi {
            out.failures.push(format!("signed encoding failed for length {}", v.len()));
        }
        if unpack_uint4_offset(&u) != *v {
            out.failures.push(format!("offset encoding failed for length {}", v.len()));
        }
    }
    Ok(out)
}

/// Fast-path accumulators against the direct product of the original codes.
pub fn check_random_matrices(cfg: &VerifyConfig) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("random-matrices");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0001);
    for case in 0..cfg.random_cases {
        let (m, n, k) = (
            rng.random_range(1..=cfg.max_dim),
            rng.random_range(1..=cfg.max_dim),
            rng.random_range(1..=cfg.max_dim),
        );
        let a_codes: Vec<i8> = (0..m * k).map(|_| rng.random_range(-127..=127)).collect();
        let w_codes: Vec<i8> = (0..n * k).map(|_| rng.random_range(INT4_MIN..=INT4_MAX)).collect();
        let aq = act(m, k, a_codes.clone(), vec![1.0; m])?;
        let mut wq = weight(n, k, w_codes.clone(), vec![1.0; n])?;
        if cfg.inject_fault && case == 0 {
            let idx = rng.random_range(0..n * k);
            if let Payload::I4(b) = wq.payload_mut() {
                b.flip_nibble(idx);
            }
        }
        let got = fast_int_accumulators(&aq, &wq)?;
        out.executed += 1;
        let packed_view: Vec<i8> = wq.codes();
        for i in 0..m {
            for j in 0..n {
                let expect: i32 = (0..k)
                    .map(|c| a_codes[i * k + c] as i32 * w_codes[j * k + c] as i32)
                    .sum();
                if got[i * n + j] != expect {
                    let bad_k = (0..k).find(|&c| packed_view[j * k + c] != w_codes[j * k + c]);
                    let at = match bad_k {
                        Some(c) => format!("({i}, {j}, {c})"),
                        None => format!("({i}, {j}, ?)"),
                    };
                    out.failures.push(format!(
                        "case {case} {m}x{n}x{k}: mismatch at (i, j, k) = {at}: got {}, expected {expect}",
                        got[i * n + j]
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Fast, asymmetric, single-group fine-grained and widened W8A8 on the same
/// codes and scales.
pub fn check_engine_agreement(cfg: &VerifyConfig) -> Result<CheckOutcome> {
    let mut out = CheckOutcome::new("engine-agreement");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0002);
    for case in 0..cfg.agreement_cases {
        let (m, n, k) = (
            rng.random_range(1..=cfg.max_dim),
            rng.random_range(1..=cfg.max_dim),
            rng.random_range(1..=cfg.max_dim),
        );
        let aq = act(
            m,
            k,
            (0..m * k).map(|_| rng.random_range(-127..=127)).collect(),
            (0..m).map(|_| rng.random_range(1e-3..1e-1)).collect(),
        )?;
        let wq = weight(
            n,
            k,
            (0..n * k).map(|_| rng.random_range(INT4_MIN..=INT4_MAX)).collect(),
            (0..n).map(|_| rng.random_range(1e-3..1e-1)).collect(),
        )?;
        let fast = gemm_w4a8_fast(&aq, &wq)?.output;
        let others = [
            ("asymmetric", gemm_w4a8_asymmetric(&aq, &OffsetPackedWeights::from_quantized(&wq)?)?.output),
            ("finegrained", gemm_w4a8_finegrained(&aq, &broadcast_to_groups(&wq, k)?)?.output),
            ("w8a8", gemm_w8a8(&aq, &widen_to_int8(&wq)?)?.output),
        ];
        for (name, o) in others {
            out.executed += 1;
            let err = max_relative_error(o.data(), fast.data());
            if err > 1e-5 {
                out.failures.push(format!("case {case} {m}x{n}x{k}: {name} vs fast relative error {err:e}"));
            }
        }
    }
    Ok(out)
}

pub fn run_verification(cfg: &VerifyConfig) -> Result<VerifyReport> {
    Ok(VerifyReport {
        checks: vec![
            check_scalar_pairs()?,
            check_pack_round_trips(cfg.seed, 100)?,
            check_random_matrices(cfg)?,
            check_engine_agreement(cfg)?,
        ],
    })
}
