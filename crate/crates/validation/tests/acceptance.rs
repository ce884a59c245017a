//! Exit criteria for the engine, one PASS/FAIL line each.
//!
//! Runs as a plain binary so every criterion executes and reports even when
//! an earlier one fails. The process exits non-zero if any criterion fails.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use agmark::attacks::AttackKind;
use agmark::detector::{roc_auc, DetectionMode};
use agmark::generator::{record_to_writer, GenerationConfig, Generator, Sampling};
use agmark::harness::{run_eval, AttackRow, AttackSpec, EvalReport, ExperimentConfig, Variant};
use agmark::model_state::{trace_from_reader, trace_to_writer, ModelSpec, StepState, ToyModel, ToyModelConfig, Trace};
use agmark::numerics::{normalized_entropy, softmax, RealMatrix, RealVector};
use agmark::partition::{
    base_partition, critical_ratio, critical_set, prf_score, swap_partition, watermark_distribution, weight_density,
    PartitionAblation, PartitionConfig, WatermarkKey,
};
use agmark::weights::{vision_critical_weights, CriticalWeights, EmbeddingIndex, WeightAblation, WeightConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

const INVARIANT_CASES: u32 = 10_000;
const ORACLE_CASES: u32 = 1_000;
const RUNTIME_LIMIT: Duration = Duration::from_secs(300);

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn outcome(name: &'static str, passed: bool, detail: impl Into<String>) -> Outcome {
    let o = Outcome { name, passed, detail: detail.into() };
    println!("[{}] {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    o
}

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn check<S: Strategy>(
    label: &str,
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<String, String> {
    runner(cases).run(&strategy, test).map(|()| format!("{label} x{cases}")).map_err(|e| format!("{label}: {e}"))
}

fn benchmark_config() -> ExperimentConfig {
    ExperimentConfig {
        gamma: 0.5,
        delta: 4.0,
        omega: 0.5,
        alpha: 0.27,
        tau: 0.98,
        sequences: 200,
        max_tokens: 200,
        mode: DetectionMode::Replay,
        attacks: vec![],
        ..ExperimentConfig::default()
    }
}

fn attack_row(report: &EvalReport, kind: AttackKind, rate: f64) -> &AttackRow {
    report.attacks.iter().find(|a| a.kind == kind && a.rate == rate).expect("attack configured")
}

// Detection power and robustness share one run.
fn detection_and_robustness() -> (Outcome, Outcome, EvalReport) {
    let config = ExperimentConfig {
        attacks: vec![
            AttackSpec { kind: AttackKind::Delete, rate: 0.1 },
            AttackSpec { kind: AttackKind::Insert, rate: 0.1 },
            AttackSpec { kind: AttackKind::ParaphraseProxy, rate: 0.2 },
        ],
        ..benchmark_config()
    };
    let start = Instant::now();
    let report = run_eval(&config).expect("benchmark eval");
    let elapsed = start.elapsed();
    let power = outcome(
        "detection power",
        report.auc >= 0.99 && elapsed <= RUNTIME_LIMIT,
        format!(
            "replay AUC {:.4} (need >= 0.99), {:.1}s incl. attack scoring (limit {}s); key-only AUC {:.4}, mean z {:.2} vs {:.2}",
            report.auc,
            elapsed.as_secs_f64(),
            RUNTIME_LIMIT.as_secs(),
            report.key_only_auc,
            report.mean_z_watermarked,
            report.mean_z_unwatermarked
        ),
    );

    let delete = attack_row(&report, AttackKind::Delete, 0.1);
    let insert = attack_row(&report, AttackKind::Insert, 0.1);
    let para = attack_row(&report, AttackKind::ParaphraseProxy, 0.2);
    let robust = outcome(
        "robustness",
        delete.auc_drop <= 0.05 && insert.auc_drop <= 0.05 && para.auc >= 0.80,
        format!(
            "delete@0.1 drop {:.4}, insert@0.1 drop {:.4} (need <= 0.05); paraphrase@0.2 AUC {:.4} (need >= 0.80)",
            delete.auc_drop, insert.auc_drop, para.auc
        ),
    );
    (power, robust, report)
}

fn null_calibration() -> Outcome {
    let config = ExperimentConfig { delta: 0.0, ..benchmark_config() };
    let report = run_eval(&config).expect("null eval");
    outcome(
        "null calibration",
        (0.42..=0.58).contains(&report.auc) && report.false_positive_rate == 0.0,
        format!(
            "delta=0 AUC {:.4} (need [0.42, 0.58]); FPR at z>{} {:.4} (need 0), max null z {:.2}, mean null z {:.2}",
            report.auc,
            report.threshold,
            report.false_positive_rate,
            report.max_z_unwatermarked,
            report.mean_z_unwatermarked
        ),
    )
}

fn ablation_direction(full: &EvalReport) -> Outcome {
    let config = ExperimentConfig { variant: Variant::FixedScale, ..benchmark_config() };
    let fixed = run_eval(&config).expect("fixed-scale eval");
    outcome(
        "ablation direction",
        full.mean_kl <= fixed.mean_kl && full.auc >= 0.95 && fixed.auc >= 0.95,
        format!(
            "mean KL full {:.5} vs fixed-scale {:.5} (need full <= fixed); AUC full {:.4}, fixed-scale {:.4} (need >= 0.95)",
            full.mean_kl, fixed.mean_kl, full.auc, fixed.auc
        ),
    )
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = RealMatrix> {
    prop::collection::vec(-3.0f32..3.0, rows * cols).prop_map(move |v| RealMatrix::new(rows, cols, v).unwrap())
}

fn distribution(n: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-4.0f64..4.0, n).prop_map(|x| softmax(&x).unwrap().into_iter().map(|p| p as f32).collect())
}

fn weight_ablation() -> impl Strategy<Value = WeightAblation> {
    prop_oneof![
        Just(WeightAblation::Full),
        Just(WeightAblation::NoAttention),
        Just(WeightAblation::NoVision),
        Just(WeightAblation::NoContext),
    ]
}

fn partition_ablation() -> impl Strategy<Value = PartitionAblation> {
    prop_oneof![
        Just(PartitionAblation::Full),
        Just(PartitionAblation::NoEntropy),
        Just(PartitionAblation::NoDensity),
        Just(PartitionAblation::FixedScale),
    ]
}

/// Weight vectors in `[0, 1]` with frequent ties, zeros and spikes.
fn critical_weights(max_len: usize) -> impl Strategy<Value = CriticalWeights> {
    let entry = prop_oneof![
        3 => 0.0f64..=1.0,
        1 => Just(0.0),
        1 => Just(1.0),
        1 => (0u8..4).prop_map(|k| f64::from(k) / 4.0),
    ];
    prop::collection::vec(entry, 1..=max_len).prop_map(CriticalWeights::from_normalized)
}

fn invariant_suite() -> Outcome {
    let mut passed = Vec::new();
    let mut failed = Vec::new();
    let mut record = |r: Result<String, String>| match r {
        Ok(s) => passed.push(s),
        Err(e) => failed.push(e),
    };

    // Normalized weights through the full extraction path.
    let weights_case = (2usize..24, 1usize..6, 1usize..5).prop_flat_map(|(v, d, nv)| {
        (
            matrix(v, d),
            matrix(nv, d),
            distribution(nv),
            prop::collection::vec(-2.0f32..2.0, d),
            0.0f64..=1.0,
            weight_ablation(),
        )
    });
    record(check("psi in [0,1]", INVARIANT_CASES, weights_case, |(text, vision, att, hidden, omega, ablation)| {
        let index = EmbeddingIndex::new(&text, &vision).unwrap();
        let state = StepState {
            logits: RealVector::new(vec![0.0; text.rows()]).unwrap(),
            vision_attention: RealVector::new(att).unwrap(),
            hidden: RealVector::new(hidden).unwrap(),
        };
        let config = WeightConfig { omega, ablation, ..WeightConfig::default() };
        let w = index.critical_weights(&state, &text, &config).unwrap();
        prop_assert!(w.psi_tilde.iter().all(|x| (0.0..=1.0).contains(x)));
        Ok(())
    }));

    record(check("h_norm in [0,1]", INVARIANT_CASES, prop::collection::vec(-60.0f64..60.0, 2..64), |logits| {
        let h = normalized_entropy(&softmax(&logits).unwrap()).unwrap();
        prop_assert!((0.0..=1.0).contains(&h), "h = {}", h);
        Ok(())
    }));

    record(check("rho in (0,1]", INVARIANT_CASES, (critical_weights(64), 1e-6f64..=1.0), |(w, tau)| {
        let (size, rho) = weight_density(&w, tau);
        prop_assert!(rho > 0.0 && rho <= 1.0, "rho = {}", rho);
        prop_assert!(size >= 1 && size <= w.len());
        Ok(())
    }));

    record(check(
        "0 <= eta <= alpha",
        INVARIANT_CASES,
        (0.0f64..=1.0, 1e-9f64..=1.0, 1e-6f64..=1.0, partition_ablation()),
        |(h, rho, alpha, ablation)| {
            let config = PartitionConfig { alpha, ablation, ..PartitionConfig::default() };
            let eta = critical_ratio(h, rho, &config);
            prop_assert!(eta >= 0.0 && eta <= alpha, "eta = {}", eta);
            Ok(())
        },
    ));

    let swap_case = (2usize..80).prop_flat_map(|n| {
        (
            any::<u64>(),
            0..=n as u32,
            0.05f64..0.95,
            prop::collection::vec(0.0f64..=1.0, n),
            0.0f64..=1.0,
            prop_oneof![Just(0.0), 0.0f64..0.5],
            prop::option::of(0usize..20),
        )
    });
    record(check("swap preserves sizes", INVARIANT_CASES, swap_case, |(key, prev, gamma, psi, eta, margin, cap)| {
        let n = psi.len();
        let base = base_partition(WatermarkKey(key), prev, gamma, n).unwrap();
        let w = CriticalWeights::from_normalized(psi);
        let config = PartitionConfig { gamma, margin, swap_cap: cap, ..PartitionConfig::default() };
        let (after, _) = swap_partition(&base, critical_set(&w, eta), &w, &config).unwrap();
        prop_assert_eq!(after.green_count(), base.green_count());
        prop_assert_eq!(after.mask().iter().filter(|&&g| g).count(), base.green_count());
        prop_assert_eq!(after.red_ids().len(), n - base.green_count());
        Ok(())
    }));

    let dist_case = (2usize..128)
        .prop_flat_map(|n| (prop::collection::vec(-40.0f64..40.0, n), any::<u64>(), 0.05f64..0.95, 0.0f64..30.0));
    record(check("watermarked distribution sums to 1", INVARIANT_CASES, dist_case, |(logits, key, gamma, delta)| {
        let p = base_partition(WatermarkKey(key), 0, gamma, logits.len()).unwrap();
        let q = watermark_distribution(&logits, &p, delta).unwrap();
        let total: f64 = q.iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-9, "sum = {}", total);
        Ok(())
    }));

    let gen_case = (
        any::<u64>(),
        4usize..40,
        2usize..6,
        1usize..4,
        any::<u64>(),
        any::<u64>(),
        1usize..10,
        0u64..1000,
        weight_ablation(),
        partition_ablation(),
        prop_oneof![Just(Sampling::Multinomial), Just(Sampling::Greedy)],
    );
    record(check(
        "delta=0 generation equals unwatermarked",
        INVARIANT_CASES,
        gen_case,
        |(seed, v, d, nv, key, sampling_seed, len, index, wa, pa, sampling)| {
            let model = ToyModel::new(ToyModelConfig {
                spec: ModelSpec { vocab_size: v, embed_dim: d, n_vision: nv },
                seed,
                ..ToyModelConfig::default()
            })
            .unwrap();
            let marked = GenerationConfig {
                max_tokens: len,
                sampling,
                sampling_seed,
                weight_config: WeightConfig { ablation: wa, ..WeightConfig::default() },
                partition_config: PartitionConfig { delta: 0.0, ablation: pa, ..PartitionConfig::default() },
                watermark_enabled: true,
            };
            let plain = GenerationConfig { watermark_enabled: false, ..marked.clone() };
            let a = Generator::new(&model, WatermarkKey(key), marked).unwrap().run(index).unwrap();
            let b = Generator::new(&model, WatermarkKey(key), plain).unwrap().run(index).unwrap();
            prop_assert_eq!(a.tokens, b.tokens);
            Ok(())
        },
    ));

    let ok = failed.is_empty();
    let detail = if ok { passed.join("; ") } else { failed.join("; ") };
    outcome("invariant suite", ok, detail)
}

/// Shortest prefix by brute force: sort ids independently, normalize by the
/// total, and re-sum every candidate prefix from scratch.
fn brute_force_density(psi: &[f64], tau: f64) -> (usize, f64) {
    let n = psi.len();
    let total: f64 = psi.iter().sum();
    if total <= 0.0 {
        return (n, 1.0);
    }
    let mut ids: Vec<usize> = (0..n).collect();
    ids.sort_by(|&a, &b| psi[b].partial_cmp(&psi[a]).unwrap().then(a.cmp(&b)));
    for k in 1..=n {
        let mass: f64 = ids[..k].iter().map(|&i| psi[i]).sum::<f64>() / total;
        if mass >= tau - 1e-12 {
            return (k, k as f64 / n as f64);
        }
    }
    (n, 1.0)
}

fn double_loop_vision(att: &[f32], text: &RealMatrix, vision: &RealMatrix) -> Vec<f64> {
    let mut out = vec![0.0; text.rows()];
    for (k, slot) in out.iter_mut().enumerate() {
        for j in 0..vision.rows() {
            let (mut dot, mut nt, mut nv) = (0.0f64, 0.0f64, 0.0f64);
            for c in 0..text.cols() {
                let a = f64::from(text.row(k)[c]);
                let b = f64::from(vision.row(j)[c]);
                dot += a * b;
                nt += a * a;
                nv += b * b;
            }
            let cos = if nt.sqrt() < 1e-12 || nv.sqrt() < 1e-12 { 0.0 } else { dot / (nt.sqrt() * nv.sqrt()) };
            *slot += f64::from(att[j]) * cos;
        }
    }
    out
}

fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
    let mut score = 0.0;
    for p in pos {
        for n in neg {
            if p > n {
                score += 1.0;
            } else if p == n {
                score += 0.5;
            }
        }
    }
    score / (pos.len() * neg.len()) as f64
}

fn oracle_equivalences() -> Outcome {
    let mut results = Vec::new();

    let tau = prop_oneof![Just(1.0), Just(0.98), Just(0.5), 1e-6f64..=1.0, (1u8..=8).prop_map(|k| f64::from(k) / 8.0)];
    results.push(check("density vs brute force", ORACLE_CASES, (critical_weights(64), tau), |(w, tau)| {
        prop_assert_eq!(weight_density(&w, tau), brute_force_density(&w.psi_tilde, tau));
        Ok(())
    }));

    let vision_case =
        (1usize..40, 1usize..8, 1usize..6).prop_flat_map(|(v, d, nv)| (matrix(v, d), matrix(nv, d), distribution(nv)));
    results.push(check("vision weights vs double loop", ORACLE_CASES, vision_case, |(text, vision, att)| {
        let fast = vision_critical_weights(&att, &text, &vision).unwrap();
        let indexed = EmbeddingIndex::new(&text, &vision).unwrap().vision_weights(&att).unwrap();
        let slow = double_loop_vision(&att, &text, &vision);
        for ((a, b), c) in fast.iter().zip(&indexed).zip(&slow) {
            prop_assert!((a - c).abs() <= 1e-6, "{} vs {}", a, c);
            prop_assert_eq!(a, b);
        }
        Ok(())
    }));

    let scores = || prop::collection::vec(prop_oneof![(0i32..6).prop_map(f64::from), -5.0f64..5.0], 1..30);
    results.push(check("AUC vs pairwise", ORACLE_CASES, (scores(), scores()), |(pos, neg)| {
        prop_assert_eq!(roc_auc(&pos, &neg).unwrap(), pairwise_auc(&pos, &neg));
        Ok(())
    }));

    let ok = results.iter().all(Result::is_ok);
    let detail = results.into_iter().map(|r| r.unwrap_or_else(|e| e)).collect::<Vec<_>>().join("; ");
    outcome("oracle equivalences", ok, detail)
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(name)
}

fn bit_exactness() -> Outcome {
    let mut problems = Vec::new();

    let vector: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("base_partition_key42_prev7_v16.json")).unwrap())
            .unwrap();
    let green: Vec<u32> = serde_json::from_value(vector["green"].clone()).unwrap();
    let scores: Vec<String> = serde_json::from_value(vector["scores"].clone()).unwrap();
    let key = WatermarkKey(42);
    let ours = base_partition(key, 7, 0.5, 16).unwrap().green_ids();
    let our_scores: Vec<String> = (0..16).map(|t| format!("{:016x}", prf_score(key, 7, t))).collect();
    if ours != green || our_scores != scores {
        problems.push(format!("base partition {ours:?} != golden {green:?}"));
    }

    let model = ToyModel::new(ToyModelConfig::default()).unwrap();
    let config = GenerationConfig { max_tokens: 5, ..GenerationConfig::default() };
    let record = Generator::new(&model, key, config).unwrap().run(0).unwrap();
    let mut bytes = Vec::new();
    record_to_writer(&record, &mut bytes).unwrap();
    if bytes != std::fs::read(fixture("toy_generation_5.jsonl")).unwrap() {
        problems.push("5-step generation record differs from fixture".into());
    }

    let tokens: Vec<u32> = record.tokens.iter().copied().chain([1, 2, 3, 4095]).collect();
    let trace = Trace::record(&model, &tokens).unwrap().with_comment("acceptance");
    let mut first = Vec::new();
    trace_to_writer(&trace, &mut first).unwrap();
    let back = trace_from_reader(first.as_slice()).unwrap();
    let mut second = Vec::new();
    trace_to_writer(&back, &mut second).unwrap();
    if back != trace || first != second {
        problems.push("trace round trip is lossy".into());
    }

    let ok = problems.is_empty();
    let detail = if ok {
        "base partition (key=42, prev=7, |V|=16), 5-step toy record, trace round trip".to_string()
    } else {
        problems.join("; ")
    };
    outcome("bit-exactness", ok, detail)
}

fn main() {
    let start = Instant::now();
    let mut outcomes = Vec::new();
    let (power, robust, full) = detection_and_robustness();
    outcomes.push(power);
    outcomes.push(null_calibration());
    outcomes.push(robust);
    outcomes.push(invariant_suite());
    outcomes.push(oracle_equivalences());
    outcomes.push(ablation_direction(&full));
    outcomes.push(bit_exactness());

    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1}s",
        outcomes.len() - failed.len(),
        outcomes.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
