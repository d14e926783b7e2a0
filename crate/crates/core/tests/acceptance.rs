//! Acceptance criteria, one PASS/FAIL line each. Run with
//! `cargo test --test acceptance`.
//!
//! The amplification share in AC5 cannot be met with 20 cases per trial: a
//! fused-vs-single comparison on 20 paired cases succeeds with probability
//! 0.804, so 95 successes out of 100 trials has probability about 3e-5. The
//! check is run as stated and reported; only failures outside
//! `KNOWN_UNATTAINABLE` make the process exit non-zero.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use vmoe::backend::{build_backend, predict_all, BackendConfig, Context};
use vmoe::diversity::SimilarityRecord;
use vmoe::fusion::{fuse_step, vote, ExpertSubset};
use vmoe::harness::{
    generate, run_ablation, run_eval, sweep_cells, AblationVariant, EvalCase, ExperimentSpec,
};
use vmoe::noise::{inject_noise, noise_sigma, NoiseParams};
use vmoe::oracle::{
    truncation_effect, variance_of_mean_correlated, variance_of_mean_iid, MixtureSpec,
    SimulationSpec,
};
use vmoe::{EmbeddingVector, ExpertPrediction, GenerationTrace, TokenId};

const VARIANCE_TOL: f64 = 0.05;
const VARIANCE_TRIALS: usize = 100_000;
const AC1_BUDGET: Duration = Duration::from_secs(5);
const TRUNCATION_TRIALS: usize = 10_000;
const TRUNCATION_MIN_FRACTION: f64 = 0.99;
const VOTE_MAX_SIZE: usize = 6;
const AC4_BUDGET: Duration = Duration::from_secs(10);
const AMPLIFICATION_TRIALS: u64 = 100;
const AMPLIFICATION_CASES: usize = 20;
const AMPLIFICATION_MIN_SHARE: f64 = 0.95;
const EXPERT_ERROR: f64 = 0.4;
const TAIL_STEPS: usize = 10_000;
const TAIL_TOL: f64 = 0.05;
const ORTHOGONALITY_TOL: f64 = 1e-9;
const SWEEP_SEEDS: u64 = 50;
const NOISE_DRAWS: usize = 100_000;
const NOISE_STD_TOL: f64 = 0.02;
const KNOWN_UNATTAINABLE: &[&str] = &["AC5"];

type Criterion = (&'static str, &'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn ac1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for sigma2 in [0.04, 1.0] {
        for k in [1, 4, 16] {
            let est =
                variance_of_mean_iid(&SimulationSpec::iid(k, sigma2, VARIANCE_TRIALS, 1)).unwrap();
            worst = worst.max(est.relative_error);
            parts.push(format!("k={k},s2={sigma2}:{:.4}", est.relative_error));
        }
    }
    let elapsed = start.elapsed();
    outcome(
        worst <= VARIANCE_TOL && elapsed < AC1_BUDGET,
        format!(
            "max rel err {worst:.4} (tol {VARIANCE_TOL}), {elapsed:.2?} (< {AC1_BUDGET:?}); {}",
            parts.join(" ")
        ),
    )
}

fn ac2() -> Outcome {
    let spec = SimulationSpec {
        rho: 0.5,
        ..SimulationSpec::iid(4, 1.0, VARIANCE_TRIALS, 2)
    };
    let est = variance_of_mean_correlated(&spec).unwrap();
    outcome(
        est.theoretical == 0.625 && est.relative_error <= VARIANCE_TOL,
        format!(
            "empirical {:.5} vs {:.3}, rel err {:.4} (tol {VARIANCE_TOL})",
            est.empirical, est.theoretical, est.relative_error
        ),
    )
}

fn ac3() -> Outcome {
    let mixture = MixtureSpec {
        seed: 3,
        ..MixtureSpec::default()
    };
    let eff = truncation_effect(&mixture, 1.0, TRUNCATION_TRIALS).unwrap();
    outcome(
        eff.variance_reduced_fraction >= TRUNCATION_MIN_FRACTION && eff.mad_after < eff.mad_before,
        format!(
            "variance reduced in {:.4} of trials (>= {TRUNCATION_MIN_FRACTION}); MAD {:.5} -> {:.5}",
            eff.variance_reduced_fraction, eff.mad_before, eff.mad_after
        ),
    )
}

/// The token `w` such that against every other present token it has a
/// higher count, or an equal count and a higher best probability, or equal
/// both and a lower id. Returns `None` unless exactly one token qualifies.
fn dominant_token(items: &[(u32, u8)]) -> Option<u32> {
    let mut stats: BTreeMap<u32, (usize, u8)> = BTreeMap::new();
    for &(t, p) in items {
        let e = stats.entry(t).or_insert((0, 0));
        e.0 += 1;
        e.1 = e.1.max(p);
    }
    let beats = |a: (u32, (usize, u8)), b: (u32, (usize, u8))| {
        a.1 .0 > b.1 .0
            || (a.1 .0 == b.1 .0 && (a.1 .1 > b.1 .1 || (a.1 .1 == b.1 .1 && a.0 < b.0)))
    };
    let winners: Vec<u32> = stats
        .iter()
        .filter(|(&t, &s)| {
            stats
                .iter()
                .filter(|(&u, _)| u != t)
                .all(|(&u, &r)| beats((t, s), (u, r)))
        })
        .map(|(&t, _)| t)
        .collect();
    (winners.len() == 1).then(|| winners[0])
}

fn ac4() -> Outcome {
    let start = Instant::now();
    // 3 tokens x probabilities 0.0, 0.1, ..., 1.0
    let items: Vec<(u32, u8)> = (0..3).flat_map(|t| (0..=10).map(move |p| (t, p))).collect();
    let emb = EmbeddingVector::new(vec![1.0]).unwrap();
    let (mut checked, mut mismatches) = (0u64, 0u64);
    let mut chosen: Vec<usize> = Vec::with_capacity(VOTE_MAX_SIZE);

    fn visit(
        from: usize,
        items: &[(u32, u8)],
        chosen: &mut Vec<usize>,
        emb: &EmbeddingVector<f64>,
        checked: &mut u64,
        mismatches: &mut u64,
    ) {
        if !chosen.is_empty() {
            let multiset: Vec<(u32, u8)> = chosen.iter().map(|&i| items[i]).collect();
            let preds = multiset
                .iter()
                .enumerate()
                .map(|(id, &(t, p))| {
                    ExpertPrediction::new(id, TokenId(t), p as f64 / 10.0, emb.clone()).unwrap()
                })
                .collect();
            let got = vote(&ExpertSubset::from_unordered(preds)).unwrap().winner;
            *checked += 1;
            if dominant_token(&multiset) != Some(got.0) {
                *mismatches += 1;
            }
        }
        if chosen.len() == VOTE_MAX_SIZE {
            return;
        }
        for i in from..items.len() {
            chosen.push(i);
            visit(i, items, chosen, emb, checked, mismatches);
            chosen.pop();
        }
    }
    visit(0, &items, &mut chosen, &emb, &mut checked, &mut mismatches);
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && checked == 3_262_622 && elapsed < AC4_BUDGET,
        format!("{checked} multisets, {mismatches} mismatches, {elapsed:.2?} (< {AC4_BUDGET:?})"),
    )
}

fn cases(n: usize) -> Vec<EvalCase> {
    (0..n)
        .map(|i| EvalCase {
            question: format!("Fixture question {i}?"),
            references: vec![format!("reference answer {i}")],
        })
        .collect()
}

fn answer_spec(seed: u64, n: usize) -> ExperimentSpec {
    ExperimentSpec {
        seed,
        expert_counts: vec![n],
        backend: BackendConfig {
            mock_error_rate: Some(EXPERT_ERROR),
            ..Default::default()
        },
        ..Default::default()
    }
}

/// P(Binomial(n, q) > n / 2).
fn majority_error(n: u64, q: f64) -> f64 {
    let choose = |n: u64, k: u64| (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
    (n / 2 + 1..=n)
        .map(|k| choose(n, k) * q.powi(k as i32) * (1.0 - q).powi((n - k) as i32))
        .sum()
}

fn ac5() -> Outcome {
    let fixture = cases(AMPLIFICATION_CASES);
    let mut wins = 0;
    for seed in 0..AMPLIFICATION_TRIALS {
        let spec = answer_spec(seed, 9);
        let fused = run_eval(&spec, &fixture, AblationVariant::FusionFull).unwrap();
        let single = run_eval(&spec, &fixture, AblationVariant::Baseline).unwrap();
        wins += u64::from(fused.hallucination_rate < single.hallucination_rate);
    }
    let share = wins as f64 / AMPLIFICATION_TRIALS as f64;

    let expected = majority_error(9, EXPERT_ERROR);
    let tail = run_eval(
        &answer_spec(12_345, 9),
        &cases(TAIL_STEPS),
        AblationVariant::FusionFull,
    )
    .unwrap();
    let rel = (tail.hallucination_rate - expected).abs() / expected;
    outcome(
        share >= AMPLIFICATION_MIN_SHARE && rel <= TAIL_TOL,
        format!(
            "fused < single in {wins}/{AMPLIFICATION_TRIALS} trials of {AMPLIFICATION_CASES} cases (need >= {AMPLIFICATION_MIN_SHARE}, \
             expected share 0.804); \
             fused error {:.4} over {TAIL_STEPS} steps vs binomial tail {expected:.4}, rel err {rel:.4} (tol {TAIL_TOL})",
            tail.hallucination_rate
        ),
    )
}

/// `sqrt(s) u + sqrt(1 - s) v_i` with orthonormal `u, v_1, .., v_n`.
fn uniform_similarity(n: usize, s: f64) -> Vec<EmbeddingVector<f64>> {
    (0..n)
        .map(|i| {
            let mut v = vec![0.0; n + 1];
            v[0] = s.sqrt();
            v[i + 1] = (1.0 - s).sqrt();
            EmbeddingVector::new(v).unwrap()
        })
        .collect()
}

fn ac6() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut fixture_o = Vec::new();
    for s in [0.95, 0.7, 0.1] {
        for n in [3, 32, 128] {
            let embs = uniform_similarity(n, s);
            let refs: Vec<&EmbeddingVector<f64>> = embs.iter().collect();
            let rec = SimilarityRecord::from_embeddings(0, &refs).unwrap();
            worst = worst.max((rec.orthogonality - (1.0 - s)).abs());
            if n == 32 {
                fixture_o.push(rec.orthogonality);
            }
        }
    }
    let fixtures_ordered = fixture_o.windows(2).all(|w| w[0] < w[1]);

    let mut totals: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for seed in 0..SWEEP_SEEDS {
        let spec = ExperimentSpec {
            seed,
            ..Default::default()
        };
        for cell in sweep_cells(&spec).unwrap() {
            let e = totals.entry(cell.num_experts).or_default();
            e.0 += cell.mean_orthogonality();
            e.1 += 1;
        }
    }
    let mean = |n: usize| totals[&n].0 / totals[&n].1 as f64;
    let (o128, o32, o3) = (mean(128), mean(32), mean(3));
    outcome(
        worst <= ORTHOGONALITY_TOL && fixtures_ordered && o128 < o32 && o32 < o3,
        format!(
            "max |O - (1-s)| {worst:.2e} (tol {ORTHOGONALITY_TOL:e}); mean O over {SWEEP_SEEDS} seeds: \
             128@0.95 {o128:.4} < 32@0.7 {o32:.4} < 3@0.1 {o3:.4}"
        ),
    )
}

/// Decoding loop that feeds back the winner's table embedding and never
/// touches the noise module.
fn noise_free_trace(spec: &ExperimentSpec, n: usize) -> GenerationTrace<f64> {
    let mut backend_cfg = spec.backend.clone();
    backend_cfg.mock_seed = spec.seed;
    let backend = build_backend::<f64>(&backend_cfg).unwrap();
    let config = spec.fusion.config(n, spec.noise_seed(0, n, 0)).unwrap();
    let pool = spec.pool(n).unwrap();
    let mut ctx = Context::new(spec.tasks[0].as_str());
    let mut trace = GenerationTrace::new(config.clone(), spec.tasks[0].as_str());
    for step in 0..spec.steps {
        let preds = predict_all(&pool, &ctx, backend.as_ref()).unwrap();
        let record = fuse_step(step, &preds, &config).unwrap();
        ctx.push(
            record.winner,
            backend.embeddings().get(record.winner).unwrap().clone(),
        );
        trace.push(record);
    }
    trace
}

fn ac7() -> Outcome {
    let examples: [(f64, f64, f64); 3] = [(0.1, 0.5, 0.0), (0.1, 1.0, 0.025), (0.02, 0.9, 0.0032)];
    let formula_ok = examples.iter().all(|&(base, p, want)| {
        let got = noise_sigma(base, p).unwrap();
        got.to_bits() == (base * ((p - 0.5) * (p - 0.5))).to_bits() && (got - want).abs() < 1e-15
    });

    let params = NoiseParams::new(0.1, 1.0, 77, 0).unwrap();
    let zero = EmbeddingVector::new(vec![0.0f64; NOISE_DRAWS]).unwrap();
    let noisy = inject_noise(&zero, &params, &mut params.stream());
    let xs = noisy.as_slice();
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let std = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt();
    let std_rel = (std / params.sigma - 1.0).abs();

    let mut spec = ExperimentSpec {
        expert_counts: vec![7],
        steps: 20,
        ..Default::default()
    };
    spec.fusion.base_noise_scale = 0.0;
    let config = spec.fusion.config(7, spec.noise_seed(0, 7, 0)).unwrap();
    let backend = build_backend::<f64>(&BackendConfig {
        mock_seed: spec.seed,
        ..spec.backend.clone()
    })
    .unwrap();
    let with_module = generate(
        &spec.tasks[0],
        &spec.pool(7).unwrap(),
        backend.as_ref(),
        &config,
        spec.steps,
    )
    .unwrap()
    .into_result()
    .unwrap();
    let identical = with_module.to_jsonl_string().unwrap()
        == noise_free_trace(&spec, 7).to_jsonl_string().unwrap();

    outcome(
        formula_ok && std_rel <= NOISE_STD_TOL && identical,
        format!(
            "worked examples exact: {formula_ok}; std {std:.6} vs {:.6} at {NOISE_DRAWS} draws, rel err {std_rel:.4} (tol {NOISE_STD_TOL}); \
             base=0 trace identical to noise-free loop: {identical}",
            params.sigma
        ),
    )
}

fn bundle(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(key, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn ac8() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let spec = ExperimentSpec {
        seed: 8,
        ..Default::default()
    };
    let mut bundles = Vec::new();
    for name in ["first", "second"] {
        let dir = tmp.path().join(name);
        run_ablation(&spec).unwrap().write(&dir).unwrap();
        bundles.push(bundle(&dir));
    }
    let files = bundles[0].len();
    outcome(
        files > 0 && bundles[0] == bundles[1],
        format!(
            "{files} files, byte-identical: {}",
            bundles[0] == bundles[1]
        ),
    )
}

fn ac9() -> Outcome {
    let mut spec = answer_spec(9, 9);
    spec.backend.mock_delay_ms = 1;
    let fixture = cases(20);
    let moe = run_eval(&spec, &fixture, AblationVariant::FusionFull).unwrap();
    let one = run_eval(&spec, &fixture, AblationVariant::Baseline).unwrap();
    outcome(
        moe.mean_latency_ms > one.mean_latency_ms,
        format!(
            "mean latency N=9 {:.3} ms vs N=1 {:.3} ms (1 ms per call, {} concurrent)",
            moe.mean_latency_ms, one.mean_latency_ms, spec.backend.max_concurrent_requests
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("AC1", "variance of the mean of k iid experts", ac1),
        ("AC2", "correlated-expert variance", ac2),
        ("AC3", "outlier truncation on a spike mixture", ac3),
        ("AC4", "vote matches exhaustive enumeration", ac4),
        ("AC5", "majority amplification", ac5),
        ("AC6", "orthogonality fixtures and consensus sweep", ac6),
        ("AC7", "noise scale, spread and base=0 equivalence", ac7),
        ("AC8", "ablation bundle determinism", ac8),
        ("AC9", "latency grows with expert count", ac9),
    ];
    let (mut failed, mut unexpected) = (0, 0);
    for (id, name, check) in criteria {
        let o = check();
        if !o.pass {
            failed += 1;
            unexpected += usize::from(!KNOWN_UNATTAINABLE.contains(&id));
        }
        let known = if !o.pass && KNOWN_UNATTAINABLE.contains(&id) {
            " [known unattainable]"
        } else {
            ""
        };
        println!(
            "{id} {}{known} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if unexpected > 0 {
        std::process::exit(1);
    }
}
