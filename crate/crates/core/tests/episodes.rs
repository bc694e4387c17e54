use pmce_core::eval::{
    evaluate, predict_episode, AblationFlags, ClassifierKind, EpisodeSampler, EvalConfig,
};
use pmce_core::feature_store::{DatasetSplit, FeatureRecord, SplitName};
use pmce_core::linalg::{dot, norm, sq_dist, widen};
use pmce_core::prior::AlphaRule;
use pmce_core::synthetic::{generate, SynthConfig};
use pmce_core::{build_bank, Enhancer, EnhancerConfig, EnhancerParams, PriorConfig};

fn toy_split(classes: usize, per: usize) -> DatasetSplit {
    DatasetSplit {
        split_name: SplitName::Novel,
        class_names: (0..classes).map(|c| format!("c{c}")).collect(),
        name_embs: (0..classes).map(|c| vec![1.0, c as f32]).collect(),
        records: (0..classes * per)
            .map(|i| FeatureRecord {
                class_id: (i / per) as u32,
                visual: vec![i as f32, 1.0],
                caption_emb: vec![1.0, 0.0],
            })
            .collect(),
    }
}

#[test]
fn class_frequencies_stay_within_binomial_bound() {
    let split = toy_split(20, 3);
    let sampler = EpisodeSampler::new(&split, 5, 1, 2, 9).unwrap();
    let draws = 1000;
    let mut counts = [0usize; 20];
    for i in 0..draws {
        for &c in &sampler.sample(i).class_ids {
            counts[c] += 1;
        }
    }
    let p = 5.0 / 20.0;
    let n = draws as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    for (c, &k) in counts.iter().enumerate() {
        assert!(
            (k as f64 - n * p).abs() <= 3.0 * sigma,
            "class {c}: {k} draws"
        );
    }
}

fn small_synth(sigma_vis: f64) -> (DatasetSplit, DatasetSplit) {
    generate(&SynthConfig {
        n_base: 12,
        n_novel: 8,
        per_class: 25,
        sigma_vis,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn well_separated_synthetic_episodes_are_solved() {
    // Concept spacing is O(1) while the noise is 1e-3.
    let (base, novel) = small_synth(1e-3);
    let bank = build_bank(&base).unwrap();
    for classifier in [ClassifierKind::Lr, ClassifierKind::Eu, ClassifierKind::Co] {
        let cfg = EvalConfig {
            episodes: 30,
            classifier,
            flags: AblationFlags::BASELINE,
            ..EvalConfig::for_shots(1)
        };
        let r = evaluate(&novel, &bank, None, &cfg, 1).unwrap();
        assert!(r.accuracies.iter().all(|&a| a == 1.0), "{classifier}");
    }
}

/// Nearest prototype and logistic regression written out independently.
fn classical_predictions(
    protos: &[Vec<f64>],
    queries: &[Vec<f64>],
    classifier: ClassifierKind,
) -> Vec<usize> {
    let pick = |scores: Vec<f64>| {
        let mut best = 0;
        for j in 1..scores.len() {
            if scores[j] > scores[best] {
                best = j;
            }
        }
        best
    };
    match classifier {
        ClassifierKind::Eu => queries
            .iter()
            .map(|q| pick(protos.iter().map(|p| -sq_dist(p, q)).collect()))
            .collect(),
        ClassifierKind::Co => queries
            .iter()
            .map(|q| {
                pick(
                    protos
                        .iter()
                        .map(|p| dot(p, q) / (norm(p) * norm(q)))
                        .collect(),
                )
            })
            .collect(),
        ClassifierKind::Lr => {
            // Plain gradient descent on the same objective; argmax agrees once both converge.
            let n = protos.len();
            let d = protos[0].len();
            let mut w = vec![vec![0.0; d]; n];
            let mut b = vec![0.0; n];
            let lr = 0.05;
            for _ in 0..20000 {
                let mut gw = w
                    .iter()
                    .map(|r| r.iter().map(|v| v * 1.0).collect::<Vec<f64>>())
                    .collect::<Vec<_>>();
                let mut gb = vec![0.0; n];
                for (y, x) in protos.iter().enumerate() {
                    let logits: Vec<f64> = (0..n).map(|c| dot(&w[c], x) + b[c]).collect();
                    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                    for c in 0..n {
                        let r =
                            ((logits[c] - m).exp() / z - if c == y { 1.0 } else { 0.0 }) / n as f64;
                        for k in 0..d {
                            gw[c][k] += r * x[k];
                        }
                        gb[c] += r;
                    }
                }
                for c in 0..n {
                    for k in 0..d {
                        w[c][k] -= lr * gw[c][k];
                    }
                    b[c] -= lr * gb[c];
                }
            }
            queries
                .iter()
                .map(|q| pick((0..n).map(|c| dot(&w[c], q) + b[c]).collect()))
                .collect()
        }
    }
}

#[test]
fn alpha_one_without_enhancement_is_classical() {
    let (base, novel) = small_synth(0.8);
    let bank = build_bank(&base).unwrap();
    let sampler = EpisodeSampler::new(&novel, 5, 3, 6, 21).unwrap();
    for classifier in [ClassifierKind::Lr, ClassifierKind::Eu, ClassifierKind::Co] {
        let cfg = EvalConfig {
            k_shot: 3,
            m_query: 6,
            classifier,
            flags: AblationFlags {
                use_map: true,
                ..AblationFlags::BASELINE
            },
            prior: PriorConfig {
                alpha: AlphaRule::Fixed(1.0),
                ..PriorConfig::for_shots(3)
            },
            ..EvalConfig::for_shots(3)
        };
        for i in 0..10 {
            let ep = sampler.sample(i);
            let got = predict_episode(&ep, &bank, None, &cfg).unwrap();
            let protos: Vec<Vec<f64>> = ep
                .support
                .iter()
                .map(|s| {
                    let rows: Vec<Vec<f64>> = s.iter().map(|r| widen(&r.visual)).collect();
                    (0..rows[0].len())
                        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / rows.len() as f64)
                        .collect()
                })
                .collect();
            let queries: Vec<Vec<f64>> = ep
                .labelled_queries()
                .map(|(_, q)| widen(&q.visual))
                .collect();
            assert_eq!(
                got.predictions,
                classical_predictions(&protos, &queries, classifier),
                "{classifier} episode {i}"
            );
        }
    }
}

#[test]
fn zero_residual_scale_leaves_accuracy_unchanged() {
    let (base, novel) = small_synth(0.8);
    let bank = build_bank(&base).unwrap();
    let ecfg = EnhancerConfig::for_dims(32, 16);
    let mut params = EnhancerParams::init(&ecfg, 5).unwrap();
    params.residual_scale = 0.0;
    let enh = Enhancer::new(ecfg, params).unwrap();
    for use_map in [false, true] {
        let plain = EvalConfig {
            episodes: 40,
            flags: AblationFlags {
                use_map,
                ..AblationFlags::BASELINE
            },
            ..EvalConfig::for_shots(1)
        };
        let enhanced = EvalConfig {
            flags: AblationFlags {
                use_map,
                enhance_support: true,
                enhance_query: true,
            },
            ..plain
        };
        let a = evaluate(&novel, &bank, None, &plain, 1).unwrap();
        let b = evaluate(&novel, &bank, Some(&enh), &enhanced, 1).unwrap();
        assert_eq!(a.accuracies, b.accuracies);
    }
}

#[test]
fn removing_a_query_leaves_the_others_alone() {
    let (base, novel) = small_synth(0.8);
    let bank = build_bank(&base).unwrap();
    let ecfg = EnhancerConfig::for_dims(32, 16);
    let enh = Enhancer::new(ecfg, EnhancerParams::init(&ecfg, 1).unwrap()).unwrap();
    let sampler = EpisodeSampler::new(&novel, 5, 1, 4, 3).unwrap();
    for classifier in [ClassifierKind::Lr, ClassifierKind::Eu, ClassifierKind::Co] {
        let cfg = EvalConfig {
            m_query: 4,
            classifier,
            ..EvalConfig::for_shots(1)
        };
        let ep = sampler.sample(0);
        let full = predict_episode(&ep, &bank, Some(&enh), &cfg).unwrap();
        let mut reduced = ep.clone();
        reduced.query[2].remove(1);
        let part = predict_episode(&reduced, &bank, Some(&enh), &cfg).unwrap();
        let mut expected = full.predictions.clone();
        expected.remove(2 * 4 + 1);
        assert_eq!(part.predictions, expected);
    }
}
