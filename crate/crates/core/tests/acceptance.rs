//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any fails. Tolerances are fixed constants below.

use std::time::Instant;

use pmce_core::enhancer::{forward, EnhancerConfig, EnhancerParams};
use pmce_core::eval::{
    evaluate, paired_t_test, predict_episode, AblationFlags, ClassifierKind, EpisodeSampler,
    EvalConfig, EvalReport,
};
use pmce_core::feature_store::{read_store, write_store, DatasetSplit, SplitName};
use pmce_core::gradcheck::{check_total_objective, GradCheckConfig};
use pmce_core::linalg::{norm, Matrix};
use pmce_core::objectives::{cross_entropy, rec_loss, supcon_loss};
use pmce_core::prior::{map_fuse, prior_weights, top_k, AlphaRule};
use pmce_core::synthetic::{generate, SynthConfig};
use pmce_core::trainer::{train, AdamConfig, TrainConfig, TrainableModel};
use pmce_core::{build_bank, checkpoint, Enhancer, KnowledgeBank};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_SEEDS: u64 = 20;
const GRAD_REL_TOL: f64 = 1e-4;
const GRAD_BUDGET_SECS: f64 = 30.0;
const MAP_TRIALS: usize = 1000;
/// Slack for rounding in the convexity inequality.
const MAP_SLACK: f64 = 1e-12;
const TOPK_TRIALS: usize = 1000;
const WEIGHT_SUM_TOL: f64 = 1e-9;
const WEIGHT_SHIFT_TOL: f64 = 1e-12;
const IDENTITY_TOL: f64 = 1e-12;
const LOSS_TOL: f64 = 1e-9;
const ABLATION_EPISODES: usize = 600;
const ALPHA_EPISODES: usize = 300;
const P_THRESHOLD: f64 = 0.05;
const BASELINE_BAND: (f64, f64) = (0.55, 0.75);
const ABLATION_BUDGET_SECS: f64 = 300.0;
const INDUCTIVE_EPISODES: u64 = 50;
const PARITY_POINTS: f64 = 0.05;
/// Adam step size for the synthetic base set (1800 samples, 750 steps over 50 epochs).
const SYNTH_LR: f64 = 1e-3;

struct Outcome {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

/// Default synthetic store, written to disk and read back, with a trained enhancer.
struct Fixture {
    novel: DatasetSplit,
    bank: KnowledgeBank,
    enhancer: Enhancer,
    enhancer_cfg: EnhancerConfig,
    train_cfg: TrainConfig,
    base: DatasetSplit,
    model: TrainableModel,
    train_secs: f64,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().expect("tempdir");
    let (base, novel) = generate(&SynthConfig::default()).expect("synthetic store");
    write_store(&[base, novel], dir.path()).expect("write store");
    let (_, mut splits) = read_store(dir.path()).expect("read store");
    let take = |splits: &mut Vec<DatasetSplit>, name| {
        let i = splits
            .iter()
            .position(|s| s.split_name == name)
            .expect("split present");
        splits.remove(i)
    };
    let base = take(&mut splits, SplitName::Base);
    let novel = take(&mut splits, SplitName::Novel);
    let bank = build_bank(&base).expect("bank");
    let enhancer_cfg = EnhancerConfig::for_dims(base.d_v(), base.d_t());
    let train_cfg = TrainConfig {
        adam: AdamConfig {
            lr: SYNTH_LR,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let (model, _) = train(&base, &bank, &enhancer_cfg, &train_cfg).expect("training");
    let train_secs = t0.elapsed().as_secs_f64();
    let enhancer = Enhancer::new(enhancer_cfg, model.enhancer.clone()).expect("enhancer");
    Fixture {
        novel,
        bank,
        enhancer,
        enhancer_cfg,
        train_cfg,
        base,
        model,
        train_secs,
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for tokens in [1, 3] {
        for seed in 0..GRAD_SEEDS {
            let cfg = GradCheckConfig {
                seed,
                tokens,
                tolerance: GRAD_REL_TOL,
                ..GradCheckConfig::default()
            };
            match check_total_objective(&cfg) {
                Ok(checks) => {
                    for c in checks {
                        worst = worst.max(c.max_rel_err);
                        if !c.passed {
                            failures.push(format!("T={tokens} seed={seed} {}", c.name));
                        }
                    }
                }
                Err(e) => failures.push(format!("T={tokens} seed={seed}: {e}")),
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        name: "gradient fidelity",
        passed: failures.is_empty() && secs < GRAD_BUDGET_SECS,
        detail: format!(
            "{} instances, worst rel err {worst:.2e} (< {GRAD_REL_TOL:.0e}), {secs:.1}s (< {GRAD_BUDGET_SECS}s){}",
            2 * GRAD_SEEDS,
            if failures.is_empty() {
                String::new()
            } else {
                format!(", failing: {}", failures.join("; "))
            }
        ),
    }
}

fn map_convexity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    let mut endpoint_errors = 0;
    for _ in 0..MAP_TRIALS {
        let d = rng.random_range(1..=16);
        let p: Vec<f64> = gaussian_vec(&mut rng, d).iter().map(|v| 3.0 * v).collect();
        let mu = gaussian_vec(&mut rng, d);
        let t = gaussian_vec(&mut rng, d);
        let alpha: f64 = rng.random_range(0.0..=1.0);
        let dist = |x: &[f64]| norm(&x.iter().zip(&t).map(|(a, b)| a - b).collect::<Vec<_>>());
        let fused = map_fuse(&p, &mu, alpha);
        if dist(&fused) > dist(&p).max(dist(&mu)) + MAP_SLACK {
            violations += 1;
        }
        if map_fuse(&p, &mu, 1.0) != p || map_fuse(&p, &mu, 0.0) != mu {
            endpoint_errors += 1;
        }
    }
    Outcome {
        id: 2,
        name: "MAP convexity and limits",
        passed: violations == 0 && endpoint_errors == 0,
        detail: format!(
            "{MAP_TRIALS} triples: {violations} distance violations, {endpoint_errors} inexact endpoints"
        ),
    }
}

fn brute_top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn retrieval_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    let mut worst_sum = 0.0f64;
    let mut worst_shift = 0.0f64;
    for trial in 0..TOPK_TRIALS {
        let n = rng.random_range(1..=200);
        // Half of the vectors draw from a small grid so ties are common.
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                if trial % 2 == 0 {
                    rng.random_range(-3..=3) as f64 / 3.0
                } else {
                    rng.random_range(-1.0..1.0)
                }
            })
            .collect();
        let k = rng.random_range(1..=n);
        if top_k(&scores, k).ok() != Some(brute_top_k(&scores, k)) {
            mismatches += 1;
        }
        let tau = rng.random_range(0.05..2.0);
        let w = prior_weights(&scores, tau).expect("weights");
        worst_sum = worst_sum.max((w.iter().sum::<f64>() - 1.0).abs());
        let offset = rng.random_range(-50.0..50.0);
        let shifted: Vec<f64> = scores.iter().map(|s| s + offset).collect();
        let ws = prior_weights(&shifted, tau).expect("weights");
        for (a, b) in w.iter().zip(&ws) {
            worst_shift = worst_shift.max((a - b).abs());
        }
    }
    Outcome {
        id: 3,
        name: "retrieval oracle equivalence",
        passed: mismatches == 0 && worst_sum <= WEIGHT_SUM_TOL && worst_shift <= WEIGHT_SHIFT_TOL,
        detail: format!(
            "{TOPK_TRIALS} vectors: {mismatches} top-k mismatches, |sum w - 1| <= {worst_sum:.1e}, shift drift {worst_shift:.1e}"
        ),
    }
}

fn enhancer_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_beta = 0.0f64;
    let mut worst_single = 0.0f64;
    for seed in 0..50u64 {
        let cfg = EnhancerConfig {
            d_v: 8,
            d_t: 6,
            heads: 2,
            d_k: 4,
            ln_eps: 1e-5,
        };
        let mut params = EnhancerParams::init(&cfg, seed).expect("init");
        let v = gaussian_vec(&mut rng, 8);
        let tokens = 1 + (seed as usize % 4);
        let s = Matrix::from_vec(tokens, 6, gaussian_vec(&mut rng, tokens * 6));

        params.residual_scale = 0.0;
        let (out, _) = forward(&v, &s, &params, &cfg).expect("forward");
        worst_beta = worst_beta.max(
            out.iter()
                .zip(&v)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );

        params.residual_scale = rng.random_range(0.1..2.0);
        let s1 = Matrix::from_vec(1, 6, gaussian_vec(&mut rng, 6));
        let (before, _) = forward(&v, &s1, &params, &cfg).expect("forward");
        for head in &mut params.heads {
            for w in head
                .query
                .as_mut_slice()
                .iter_mut()
                .chain(head.key.as_mut_slice())
            {
                *w += rng.random_range(-1.0..1.0);
            }
        }
        let (after, _) = forward(&v, &s1, &params, &cfg).expect("forward");
        worst_single = worst_single.max(
            before
                .iter()
                .zip(&after)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    Outcome {
        id: 4,
        name: "degenerate-enhancer identities",
        passed: worst_beta <= IDENTITY_TOL && worst_single <= IDENTITY_TOL,
        detail: format!("beta=0 max |v_out - v_in| {worst_beta:.1e}, T=1 max drift under W_Q/W_K change {worst_single:.1e}"),
    }
}

fn loss_oracles() -> Outcome {
    let mut errs = Vec::new();
    for c in [2usize, 5, 64] {
        let (ce, _) = cross_entropy(&Matrix::zeros(3, c), &[0, 1, c - 1]).expect("ce");
        errs.push((format!("CE(uniform,{c})"), (ce - (c as f64).ln()).abs()));
    }
    let row = [0.3, -1.2, 0.8, 2.0];
    let same = Matrix::from_rows(&[row, row, row, row]);
    let (con, _) = supcon_loss(&same, &[1, 1, 1, 1], 0.1).expect("supcon");
    errs.push(("supcon(identical)".into(), (con - 3f64.ln()).abs()));
    let means = Matrix::from_rows(&[[1.0, -2.0, 0.5], [0.0, 4.0, -1.0]]);
    let at_means = Matrix::from_rows(&[[0.0, 4.0, -1.0], [1.0, -2.0, 0.5], [0.0, 4.0, -1.0]]);
    let (rec, _) = rec_loss(&at_means, &[1, 0, 1], &means).expect("rec");
    errs.push(("rec(fixed point)".into(), rec.abs()));
    let worst = errs.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Outcome {
        id: 5,
        name: "loss oracles",
        passed: worst <= LOSS_TOL,
        detail: errs
            .iter()
            .map(|(n, e)| format!("{n} err {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", "),
    }
}

fn eval_with(
    fx: &Fixture,
    k_shot: usize,
    episodes: usize,
    flags: AblationFlags,
    classifier: ClassifierKind,
) -> EvalReport {
    let cfg = EvalConfig {
        episodes,
        flags,
        classifier,
        ..EvalConfig::for_shots(k_shot)
    };
    evaluate(&fx.novel, &fx.bank, Some(&fx.enhancer), &cfg, 1).expect("evaluation")
}

fn ablation_trend(fx: &Fixture) -> Outcome {
    let t0 = Instant::now();
    let map_only = AblationFlags {
        use_map: true,
        ..AblationFlags::BASELINE
    };
    let dual = AblationFlags {
        use_map: false,
        ..AblationFlags::FULL
    };
    let run = |f| eval_with(fx, 1, ABLATION_EPISODES, f, ClassifierKind::Lr);
    let base = run(AblationFlags::BASELINE);
    let map = run(map_only);
    let enh = run(dual);
    let full = run(AblationFlags::FULL);
    let secs = t0.elapsed().as_secs_f64() + fx.train_secs;

    let pairs = [
        ("map > base", &map, &base),
        ("enh > base", &enh, &base),
        ("full > map", &full, &map),
        ("full > enh", &full, &enh),
    ];
    let mut ok =
        (BASELINE_BAND.0..=BASELINE_BAND.1).contains(&base.mean) && secs < ABLATION_BUDGET_SECS;
    let mut parts = vec![format!(
        "base {:.3} map {:.3} enh {:.3} full {:.3}",
        base.mean, map.mean, enh.mean, full.mean
    )];
    for (label, a, b) in pairs {
        let t = paired_t_test(&a.accuracies, &b.accuracies).expect("paired test");
        ok &= t.mean_diff > 0.0 && t.p_value < P_THRESHOLD;
        parts.push(format!(
            "{label}: diff {:+.3} p {:.1e}",
            t.mean_diff, t.p_value
        ));
    }
    parts.push(format!("{secs:.1}s incl. training"));
    Outcome {
        id: 6,
        name: "ablation trend reproduction",
        passed: ok,
        detail: parts.join(", "),
    }
}

fn shot_dependent_alpha(fx: &Fixture) -> Outcome {
    let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let best = |k_shot: usize| {
        let accs: Vec<f64> = grid
            .iter()
            .map(|&a| {
                let cfg = EvalConfig {
                    episodes: ALPHA_EPISODES,
                    prior: pmce_core::PriorConfig {
                        alpha: AlphaRule::Fixed(a),
                        ..pmce_core::PriorConfig::for_shots(k_shot)
                    },
                    ..EvalConfig::for_shots(k_shot)
                };
                evaluate(&fx.novel, &fx.bank, Some(&fx.enhancer), &cfg, 1)
                    .expect("evaluation")
                    .mean
            })
            .collect();
        // Ties resolve to the smaller alpha.
        let i = pmce_core::linalg::argmax(&accs);
        (grid[i], accs)
    };
    let (a1, acc1) = best(1);
    let (a5, acc5) = best(5);
    let fmt = |v: &[f64]| {
        v.iter()
            .map(|a| format!("{a:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    };
    Outcome {
        id: 7,
        name: "shot-dependent alpha",
        passed: a1 < a5,
        detail: format!(
            "argmax 1-shot {a1:.1} vs 5-shot {a5:.1}; 1-shot [{}] 5-shot [{}]",
            fmt(&acc1),
            fmt(&acc5)
        ),
    }
}

fn inductive_contract(fx: &Fixture) -> Outcome {
    let sampler = EpisodeSampler::new(&fx.novel, 5, 1, 15, 77).expect("sampler");
    let mut changed = 0;
    let mut checked = 0;
    for classifier in [ClassifierKind::Lr, ClassifierKind::Eu, ClassifierKind::Co] {
        let cfg = EvalConfig {
            classifier,
            ..EvalConfig::for_shots(1)
        };
        for i in 0..INDUCTIVE_EPISODES {
            let ep = sampler.sample(i);
            let full = predict_episode(&ep, &fx.bank, Some(&fx.enhancer), &cfg).expect("predict");
            let c = (i as usize) % ep.n_way();
            let q = (i as usize * 7) % ep.query[c].len();
            let mut reduced = ep.clone();
            reduced.query[c].remove(q);
            reduced.query_indices[c].remove(q);
            let part =
                predict_episode(&reduced, &fx.bank, Some(&fx.enhancer), &cfg).expect("predict");
            let removed = c * 15 + q;
            let mut expected = full.predictions.clone();
            expected.remove(removed);
            changed += expected
                .iter()
                .zip(&part.predictions)
                .filter(|(a, b)| a != b)
                .count();
            checked += expected.len();
        }
    }
    Outcome {
        id: 8,
        name: "inductive contract",
        passed: changed == 0,
        detail: format!("{checked} predictions over {INDUCTIVE_EPISODES} episodes x 3 classifiers, {changed} changed"),
    }
}

fn determinism(fx: &Fixture) -> Outcome {
    let cfg = EvalConfig::for_shots(1);
    let serial = evaluate(&fx.novel, &fx.bank, Some(&fx.enhancer), &cfg, 1).expect("evaluation");
    let parallel = evaluate(&fx.novel, &fx.bank, Some(&fx.enhancer), &cfg, 8).expect("evaluation");
    let reports_equal = serde_json::to_vec_pretty(&serial).unwrap()
        == serde_json::to_vec_pretty(&parallel).unwrap();
    let (again, _) = train(&fx.base, &fx.bank, &fx.enhancer_cfg, &fx.train_cfg).expect("training");
    let bytes = |m: &TrainableModel| {
        checkpoint::checkpoint_bytes(&fx.enhancer_cfg, fx.train_cfg.seed, m).expect("bytes")
    };
    let ckpt_equal = bytes(&fx.model) == bytes(&again);
    Outcome {
        id: 9,
        name: "determinism",
        passed: reports_equal && ckpt_equal,
        detail: format!("jobs 1 vs 8 reports identical: {reports_equal}; retrained checkpoint identical: {ckpt_equal}"),
    }
}

fn classifier_parity(fx: &Fixture) -> Outcome {
    let means: Vec<(ClassifierKind, f64)> =
        [ClassifierKind::Lr, ClassifierKind::Eu, ClassifierKind::Co]
            .into_iter()
            .map(|c| {
                (
                    c,
                    eval_with(fx, 1, ABLATION_EPISODES, AblationFlags::FULL, c).mean,
                )
            })
            .collect();
    let hi = means.iter().map(|m| m.1).fold(f64::MIN, f64::max);
    let lo = means.iter().map(|m| m.1).fold(f64::MAX, f64::min);
    Outcome {
        id: 10,
        name: "classifier parity",
        passed: hi - lo <= PARITY_POINTS,
        detail: format!(
            "{}; spread {:.3} (<= {PARITY_POINTS})",
            means
                .iter()
                .map(|(c, m)| format!("{c} {m:.3}"))
                .collect::<Vec<_>>()
                .join(" "),
            hi - lo
        ),
    }
}

fn main() {
    let started = Instant::now();
    let mut outcomes = vec![
        gradient_fidelity(),
        map_convexity(),
        retrieval_oracle(),
        enhancer_identities(),
        loss_oracles(),
    ];
    let fx = fixture();
    outcomes.push(ablation_trend(&fx));
    outcomes.push(shot_dependent_alpha(&fx));
    outcomes.push(inductive_contract(&fx));
    outcomes.push(determinism(&fx));
    outcomes.push(classifier_parity(&fx));

    let failed = outcomes.iter().filter(|o| !o.passed).count();
    for o in &outcomes {
        println!(
            "criterion {:>2} {:<32} {}  {}",
            o.id,
            o.name,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed ({:.1}s)",
        outcomes.len() - failed,
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
