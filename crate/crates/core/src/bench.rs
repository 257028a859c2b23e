//! GEMM benchmark harness.
//!
//! Every engine in a [`BenchCase`] runs on the same seeded inputs. Weights are
//! quantized once to symmetric 4-bit per-channel codes; the grouped engines
//! see those codes with the channel scale repeated per group, the asymmetric
//! engine sees them offset-encoded and W8A8 sees them widened to INT8. This
//! keeps all integer engines numerically comparable while each keeps its own
//! loop structure. Outputs are cross-checked before any timing is reported.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gemm::{
    broadcast_to_groups, gemm_w4a16_grouped, gemm_w4a8_asymmetric, gemm_w4a8_fast,
    gemm_w4a8_finegrained, gemm_w8a8, max_relative_error, widen_to_int8, GemmCounters, GemmOutput,
    OffsetPackedWeights,
};
use crate::quant::{dequantize, quantize_activations_per_token, quantize_weights, QuantScheme, QuantizedTensor};
use crate::synth::{gaussian, seeded_rng};
use crate::tensor::{matmul_f32, DenseTensor};

/// Relative agreement required between engines.
pub const AGREEMENT_TOLERANCE: f64 = 1e-5;

/// `(N, K)` weight shapes used for the default sweep.
pub const TABLE6_SHAPES: [(usize, usize); 4] = [(4096, 4096), (1024, 8192), (11088, 4096), (5120, 5120)];
/// Activation rows: context decoding and self-decoding.
pub const TABLE6_TOKENS: [usize; 2] = [1024, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EngineKind {
    W4A16Grouped,
    W4A8FineGrained,
    W4A8Asymmetric,
    W4A8Fast,
    W8A8,
}

impl EngineKind {
    pub const ALL: [EngineKind; 5] = [
        EngineKind::W4A8FineGrained,
        EngineKind::W4A8Asymmetric,
        EngineKind::W4A8Fast,
        EngineKind::W8A8,
        EngineKind::W4A16Grouped,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EngineKind::W4A16Grouped => "w4a16",
            EngineKind::W4A8FineGrained => "finegrained",
            EngineKind::W4A8Asymmetric => "asymmetric",
            EngineKind::W4A8Fast => "fast",
            EngineKind::W8A8 => "w8a8",
        }
    }

    /// Engines whose loop structure depends on the group size.
    pub fn is_grouped(&self) -> bool {
        matches!(self, EngineKind::W4A16Grouped | EngineKind::W4A8FineGrained)
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EngineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EngineKind::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::InvalidScheme(format!("unknown engine {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCase {
    pub id: String,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub group_size: usize,
    pub engines: Vec<EngineKind>,
    pub baseline: EngineKind,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl BenchCase {
    pub fn new(m: usize, n: usize, k: usize, group_size: usize, seed: u64) -> Self {
        Self {
            id: format!("m{m}_n{n}_k{k}"),
            m,
            n,
            k,
            group_size,
            engines: EngineKind::ALL.to_vec(),
            baseline: EngineKind::W4A8FineGrained,
            repeats: 5,
            warmup: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.k == 0 {
            return Err(Error::Shape(format!(
                "case {}: dimensions must be positive",
                self.id
            )));
        }
        if self.repeats < 3 {
            return Err(Error::InvalidScheme(format!(
                "case {}: need at least 3 repeats, got {}",
                self.id, self.repeats
            )));
        }
        if self.engines.is_empty() {
            return Err(Error::InvalidScheme(format!("case {}: no engines", self.id)));
        }
        if !self.engines.contains(&self.baseline) {
            return Err(Error::InvalidScheme(format!(
                "case {}: baseline {} is not among the engines",
                self.id, self.baseline
            )));
        }
        let grouped = self.engines.iter().any(EngineKind::is_grouped);
        if grouped && (self.group_size == 0 || self.k % self.group_size != 0) {
            return Err(Error::InvalidScheme(format!(
                "case {}: group size {} does not divide K = {}",
                self.id, self.group_size, self.k
            )));
        }
        Ok(())
    }
}

/// The default sweep: every weight shape at both token counts, with all
/// dimensions divided by `scale_down` (M = 1 stays 1).
pub fn table6_cases(scale_down: usize, group_size: usize, seed: u64) -> Vec<BenchCase> {
    let s = scale_down.max(1);
    let mut cases = Vec::new();
    for (ti, &m) in TABLE6_TOKENS.iter().enumerate() {
        for (si, &(n, k)) in TABLE6_SHAPES.iter().enumerate() {
            let idx = (ti * TABLE6_SHAPES.len() + si) as u64;
            let mut c = BenchCase::new((m / s).max(1), n / s, k / s, group_size, seed.wrapping_add(idx));
            let stage = if m == 1 { "decode" } else { "context" };
            c.id = format!("{stage}_m{}_n{}_k{}", c.m, c.n, c.k);
            cases.push(c);
        }
    }
    cases
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub case_id: String,
    pub engine: EngineKind,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub g: usize,
    pub median_ns: u64,
    pub counters: GemmCounters,
    pub speedup_vs_baseline: f64,
    pub checksum: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Soft-check messages (wall-time orderings that did not hold).
    pub warnings: Vec<String>,
}

impl BenchReport {
    pub fn extend(&mut self, other: BenchReport) {
        self.rows.extend(other.rows);
        self.warnings.extend(other.warnings);
    }

    pub fn row(&self, case_id: &str, engine: EngineKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.case_id == case_id && r.engine == engine)
    }
}

/// Quantized operands shared by every engine of a case.
pub struct EngineInputs {
    pub a: DenseTensor,
    pub a_q: QuantizedTensor,
    pub w_channel: QuantizedTensor,
    pub w_grouped: QuantizedTensor,
    pub w_offset: OffsetPackedWeights,
    pub w_widened: QuantizedTensor,
}

impl EngineInputs {
    pub fn generate(case: &BenchCase) -> Result<Self> {
        let mut rng = seeded_rng(case.seed);
        let a = gaussian(case.m, case.k, 1.0, &mut rng);
        let w = gaussian(case.n, case.k, 0.02, &mut rng);
        let a_q = quantize_activations_per_token(&a, 8)?;
        let w_channel = quantize_weights(&w, &QuantScheme::per_channel(4)?)?;
        let g = if case.engines.iter().any(EngineKind::is_grouped) {
            case.group_size
        } else {
            case.k
        };
        Ok(Self {
            w_grouped: broadcast_to_groups(&w_channel, g)?,
            w_offset: OffsetPackedWeights::from_quantized(&w_channel)?,
            w_widened: widen_to_int8(&w_channel)?,
            a,
            a_q,
            w_channel,
        })
    }

    pub fn run(&self, engine: EngineKind) -> Result<GemmOutput> {
        match engine {
            EngineKind::W4A16Grouped => gemm_w4a16_grouped(&self.a, &self.w_grouped),
            EngineKind::W4A8FineGrained => gemm_w4a8_finegrained(&self.a_q, &self.w_grouped),
            EngineKind::W4A8Asymmetric => gemm_w4a8_asymmetric(&self.a_q, &self.w_offset),
            EngineKind::W4A8Fast => gemm_w4a8_fast(&self.a_q, &self.w_channel),
            EngineKind::W8A8 => gemm_w8a8(&self.a_q, &self.w_widened),
        }
    }
}

pub fn checksum(t: &DenseTensor) -> String {
    let mut h = Sha256::new();
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    let digest = h.finalize();
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

/// Compares one engine's output with the matching reference.
fn verify_output(
    case: &BenchCase,
    engine: EngineKind,
    out: &DenseTensor,
    integer_ref: &DenseTensor,
    real_ref: &Option<DenseTensor>,
) -> Result<()> {
    let reference = match engine {
        EngineKind::W4A16Grouped => real_ref.as_ref().expect("computed when w4a16 is present"),
        _ => integer_ref,
    };
    let err = max_relative_error(out.data(), reference.data());
    if err > AGREEMENT_TOLERANCE {
        return Err(Error::Verification(format!(
            "case {}: engine {engine} deviates from its reference by {err:e} (tolerance {AGREEMENT_TOLERANCE:e})",
            case.id
        )));
    }
    Ok(())
}

fn median(mut v: Vec<u64>) -> u64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

/// Runs every engine of `case`: warmups, timed repeats (GEMM call only),
/// checksum stability and cross-engine agreement.
pub fn run_bench(case: &BenchCase) -> Result<BenchReport> {
    case.validate()?;
    let inputs = EngineInputs::generate(case)?;
    run_bench_with(case, &inputs)
}

/// As [`run_bench`], with caller-supplied operands.
pub fn run_bench_with(case: &BenchCase, inputs: &EngineInputs) -> Result<BenchReport> {
    case.validate()?;
    let integer_ref = gemm_w4a8_fast(&inputs.a_q, &inputs.w_channel)?.output;
    let real_ref = if case.engines.contains(&EngineKind::W4A16Grouped) {
        Some(matmul_f32(&inputs.a, &dequantize(&inputs.w_grouped))?)
    } else {
        None
    };

    let mut timed = Vec::with_capacity(case.engines.len());
    for &engine in &case.engines {
        for _ in 0..case.warmup {
            inputs.run(engine)?;
        }
        let mut times = Vec::with_capacity(case.repeats);
        let mut sums = Vec::with_capacity(case.repeats);
        let mut last = None;
        for _ in 0..case.repeats {
            let t0 = Instant::now();
            let out = inputs.run(engine)?;
            let ns = t0.elapsed().as_nanos() as u64;
            times.push(ns.max(1));
            sums.push(checksum(&out.output));
            last = Some(out);
        }
        let last = last.expect("repeats >= 3");
        if sums.iter().any(|s| *s != sums[0]) {
            return Err(Error::Verification(format!(
                "case {}: engine {engine} output changed between repeats",
                case.id
            )));
        }
        verify_output(case, engine, &last.output, &integer_ref, &real_ref)?;
        timed.push((engine, median(times), last.counters, sums.swap_remove(0)));
    }

    let base_ns = timed
        .iter()
        .find(|(e, ..)| *e == case.baseline)
        .map(|(_, t, ..)| *t)
        .expect("validated: baseline is among the engines");
    let mut report = BenchReport::default();
    for (engine, ns, counters, sum) in &timed {
        report.rows.push(BenchRow {
            case_id: case.id.clone(),
            engine: *engine,
            m: case.m,
            n: case.n,
            k: case.k,
            g: if engine.is_grouped() { case.group_size } else { case.k },
            median_ns: *ns,
            counters: *counters,
            speedup_vs_baseline: base_ns as f64 / *ns as f64,
            checksum: sum.clone(),
        });
    }

    let time_of = |e: EngineKind| timed.iter().find(|(x, ..)| *x == e).map(|(_, t, ..)| *t);
    if let Some(fast) = time_of(EngineKind::W4A8Fast) {
        for other in [EngineKind::W4A8FineGrained, EngineKind::W4A8Asymmetric] {
            if let Some(t) = time_of(other) {
                if fast > t {
                    report.warnings.push(format!(
                        "case {}: fast ({fast} ns) slower than {other} ({t} ns)",
                        case.id
                    ));
                }
            }
        }
    }
    Ok(report)
}

/// Runs cases in order, or concurrently when `parallel` is set. Counters and
/// checksums are the same either way.
pub fn run_sweep(cases: &[BenchCase], parallel: bool) -> Result<BenchReport> {
    let reports: Vec<BenchReport> = if parallel {
        cases.par_iter().map(run_bench).collect::<Result<_>>()?
    } else {
        cases.iter().map(run_bench).collect::<Result<_>>()?
    };
    let mut all = BenchReport::default();
    for r in reports {
        all.extend(r);
    }
    Ok(all)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::InvalidScheme(format!("unknown report format {other:?}"))),
        }
    }
}

pub const CSV_HEADER: [&str; 13] = [
    "case_id",
    "engine",
    "m",
    "n",
    "k",
    "g",
    "median_ns",
    "int8_mac_ops",
    "dequant_events",
    "zero_point_sub_ops",
    "final_scale_ops",
    "speedup_vs_baseline",
    "checksum",
];

fn row_fields(r: &BenchRow) -> [String; 13] {
    [
        r.case_id.clone(),
        r.engine.name().to_string(),
        r.m.to_string(),
        r.n.to_string(),
        r.k.to_string(),
        r.g.to_string(),
        r.median_ns.to_string(),
        r.counters.int8_mac_ops.to_string(),
        r.counters.dequant_events.to_string(),
        r.counters.zero_point_sub_ops.to_string(),
        r.counters.final_scale_ops.to_string(),
        format!("{:.3}", r.speedup_vs_baseline),
        r.checksum.clone(),
    ]
}

pub fn emit_report(report: &BenchReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(CSV_HEADER).expect("writing to memory");
            for r in &report.rows {
                w.write_record(row_fields(r)).expect("writing to memory");
            }
            String::from_utf8(w.into_inner().expect("flush to memory")).expect("ascii fields")
        }
        ReportFormat::Table => {
            let rows: Vec<[String; 13]> = report.rows.iter().map(row_fields).collect();
            let mut widths: Vec<usize> = CSV_HEADER.iter().map(|h| h.len()).collect();
            for r in &rows {
                for (w, f) in widths.iter_mut().zip(r) {
                    *w = (*w).max(f.len());
                }
            }
            let mut out = String::new();
            let line = |fields: &[&str], out: &mut String| {
                let cells: Vec<String> = fields
                    .iter()
                    .zip(&widths)
                    .enumerate()
                    .map(|(i, (f, w))| if i < 2 { format!("{f:<w$}") } else { format!("{f:>w$}") })
                    .collect();
                out.push_str(cells.join("  ").trim_end());
                out.push('\n');
            };
            line(&CSV_HEADER, &mut out);
            for r in &rows {
                let refs: Vec<&str> = r.iter().map(String::as_str).collect();
                line(&refs, &mut out);
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(engines: Vec<EngineKind>) -> BenchCase {
        BenchCase {
            engines,
            repeats: 3,
            warmup: 0,
            ..BenchCase::new(4, 8, 32, 8, 3)
        }
    }

    #[test]
    fn paper_shapes_unscaled() {
        let cases = table6_cases(1, 128, 0);
        assert_eq!(cases.len(), 8);
        let shapes: Vec<_> = cases.iter().map(|c| (c.m, c.n, c.k)).collect();
        assert_eq!(
            shapes,
            vec![
                (1024, 4096, 4096),
                (1024, 1024, 8192),
                (1024, 11088, 4096),
                (1024, 5120, 5120),
                (1, 4096, 4096),
                (1, 1024, 8192),
                (1, 11088, 4096),
                (1, 5120, 5120),
            ]
        );
        for c in table6_cases(8, 128, 0) {
            c.validate().unwrap();
        }
    }

    #[test]
    fn validation() {
        let mut c = small(EngineKind::ALL.to_vec());
        c.repeats = 2;
        assert!(c.validate().is_err());
        let mut c = small(EngineKind::ALL.to_vec());
        c.group_size = 5;
        assert!(c.validate().is_err());
        let c = small(vec![EngineKind::W4A8Fast]);
        assert!(c.validate().is_err(), "baseline missing");
        let mut c = small(vec![EngineKind::W4A8Fast]);
        c.baseline = EngineKind::W4A8Fast;
        c.group_size = 5;
        c.validate().unwrap();
    }

    #[test]
    fn speedup_is_time_ratio() {
        let report = run_bench(&small(vec![EngineKind::W4A8FineGrained, EngineKind::W4A8Fast])).unwrap();
        assert_eq!(report.rows.len(), 2);
        let base = &report.rows[0];
        let fast = &report.rows[1];
        assert_eq!(base.speedup_vs_baseline, 1.0);
        assert_eq!(fast.speedup_vs_baseline, base.median_ns as f64 / fast.median_ns as f64);
    }

    #[test]
    fn counters_and_checksums() {
        let c = small(EngineKind::ALL.to_vec());
        let r = run_bench(&c).unwrap();
        let (m, n, k, g) = (4u64, 8u64, 32u64, 8u64);
        let get = |e| r.row(&c.id, e).unwrap();
        assert_eq!(get(EngineKind::W4A8FineGrained).counters.dequant_events, m * n * k / g);
        assert_eq!(get(EngineKind::W4A8Fast).counters.dequant_events, m * n);
        assert_eq!(get(EngineKind::W4A16Grouped).counters.dequant_events, m * n * k);
        assert_eq!(get(EngineKind::W4A8Asymmetric).counters.zero_point_sub_ops, n * k);
        assert_eq!(get(EngineKind::W4A8Fast).counters.zero_point_sub_ops, 0);
        // same codes and scales: identical outputs
        assert_eq!(get(EngineKind::W4A8Fast).checksum, get(EngineKind::W4A8Asymmetric).checksum);
        assert_eq!(get(EngineKind::W4A8Fast).checksum, get(EngineKind::W8A8).checksum);
        let again = run_bench(&c).unwrap();
        for (x, y) in r.rows.iter().zip(&again.rows) {
            assert_eq!((x.counters, &x.checksum), (y.counters, &y.checksum));
        }
    }

    #[test]
    fn disagreement_aborts() {
        let c = small(EngineKind::ALL.to_vec());
        let mut inputs = EngineInputs::generate(&c).unwrap();
        // corrupt one nibble of the offset weights only
        inputs.w_offset.packed_mut().flip_nibble(0);
        let err = run_bench_with(&c, &inputs).unwrap_err();
        assert!(matches!(err, Error::Verification(_)), "{err}");
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let csv = emit_report(&BenchReport::default(), ReportFormat::Csv);
        assert_eq!(csv, format!("{}\n", CSV_HEADER.join(",")));
    }

    #[test]
    fn table_has_one_line_per_row() {
        let r = run_bench(&small(vec![EngineKind::W4A8FineGrained, EngineKind::W4A8Fast])).unwrap();
        let t = emit_report(&r, ReportFormat::Table);
        assert_eq!(t.lines().count(), 3);
        assert!(t.starts_with("case_id"));
    }

    #[test]
    fn engine_names_round_trip() {
        for e in EngineKind::ALL {
            assert_eq!(e.name().parse::<EngineKind>().unwrap(), e);
        }
        assert!("gpu".parse::<EngineKind>().is_err());
    }
}
