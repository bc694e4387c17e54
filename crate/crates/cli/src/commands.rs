use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use pmce_core::enhancer::{EnhancerConfig, DEFAULT_LN_EPS};
use pmce_core::eval::{self, paired_t_test, EvalReport};
use pmce_core::feature_store::{read_split, SplitName};
use pmce_core::gradcheck::{check_total_objective, GradCheckConfig, TensorCheck};
use pmce_core::trainer::train_with_progress;
use pmce_core::{
    build_bank, load_bank, load_checkpoint, save_bank, save_checkpoint, synthetic, write_store,
    Enhancer,
};
use serde::{Deserialize, Serialize};

use crate::config::{apply_overrides, RunConfig};
use crate::{BankArgs, EvalArgs, GradcheckArgs, ReportArgs, SynthArgs, TrainArgs};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn synth(cfg: RunConfig, args: SynthArgs) -> Result<ExitCode> {
    let mut sc = cfg.synth;
    apply_overrides!(args => sc; n_base, n_novel, per_class, d_v, d_t, d_s, sigma_vis, sigma_name, sigma_cap, seed);
    let (base, novel) = synthetic::generate(&sc)?;
    let manifest = write_store(&[base, novel], &args.out)?;
    for (name, split) in &manifest.splits {
        println!(
            "{name:>10}: {} classes, {} records, fnv1a {}",
            split.num_classes, split.num_records, split.records_fnv1a
        );
    }
    println!(
        "wrote store to {} (d_v {}, d_t {})",
        args.out.display(),
        manifest.d_v,
        manifest.d_t
    );
    Ok(ExitCode::SUCCESS)
}

pub fn bank(args: BankArgs) -> Result<ExitCode> {
    let base = read_split(&args.store, SplitName::Base)?;
    let bank = build_bank(&base)?;
    let manifest = save_bank(&bank, &args.out)?;
    println!(
        "bank: {} base classes, d_v {}, d_t {}, means fnv1a {}",
        manifest.num_classes, manifest.d_v, manifest.d_t, manifest.means_fnv1a
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(cfg: RunConfig, args: TrainArgs) -> Result<ExitCode> {
    let mut tc = cfg.train;
    apply_overrides!(args => tc; epochs, batch_size, seed);
    apply_overrides!(args => tc.adam; lr);
    apply_overrides!(args => tc.weights; lambda_rec, lambda_con, tau_c);
    let mut es = cfg.enhancer;
    apply_overrides!(args => es; heads);
    if args.d_k.is_some() {
        es.d_k = args.d_k;
    }

    let base = read_split(&args.store, SplitName::Base)?;
    let bank = load_bank(&args.bank)?;
    let heads = es.heads.max(1);
    let ecfg = EnhancerConfig {
        d_v: base.d_v(),
        d_t: base.d_t(),
        heads,
        d_k: es.d_k.unwrap_or(base.d_v() / heads),
        ln_eps: DEFAULT_LN_EPS,
    };
    let quiet = args.quiet;
    let (model, log) = train_with_progress(&base, &bank, &ecfg, &tc, |e| {
        if !quiet {
            println!(
                "epoch {:>3}  total {:.4}  cls {:.4}  rec {:.4}  con {:.4}",
                e.epoch, e.total, e.cls, e.rec, e.con
            );
        }
    })?;
    save_checkpoint(&args.out, &ecfg, tc.seed, &model)?;
    let log_path = args.log.unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".log.jsonl");
        p.into()
    });
    std::fs::write(&log_path, log.to_json_lines())
        .with_context(|| format!("writing {}", log_path.display()))?;
    println!(
        "saved checkpoint to {} (residual scale {:.4})",
        args.out.display(),
        model.enhancer.residual_scale
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub variant: String,
    pub mean_diff: f64,
    pub t: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutput {
    pub reports: Vec<EvalReport>,
    /// Paired tests of each variant against the baseline on shared episodes.
    pub versus_baseline: Vec<Comparison>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SavedReport {
    Ablation(AblationOutput),
    Single(EvalReport),
}

fn print_table(reports: &[EvalReport], versus: Option<&[Comparison]>) {
    println!(
        "{:<14} {:<4} {:>5} {:>6} {:>16} {:>10}",
        "variant", "clf", "shot", "eps", "accuracy (%)", "p vs base"
    );
    for (i, r) in reports.iter().enumerate() {
        let p = versus
            .and_then(|v| v.get(i))
            .map_or(String::from("-"), |c| format!("{:.2e}", c.p_value));
        println!(
            "{:<14} {:<4} {:>5} {:>6} {:>16} {:>10}",
            r.variant,
            r.config.classifier.to_string(),
            r.config.k_shot,
            r.accuracies.len(),
            r.summary().percent_string(),
            p
        );
    }
}

pub fn eval(cfg: RunConfig, args: EvalArgs) -> Result<ExitCode> {
    let mut es = cfg.eval;
    apply_overrides!(args => es; n_way, k_shot, m_query, episodes, seed, k, tau, retrieval,
        classifier, use_map, enhance_support, enhance_query, lr_l2, lr_mode);
    if args.alpha.is_some() {
        es.alpha = args.alpha;
    }
    let ec = es.resolve();
    let novel = read_split(&args.store, SplitName::Novel)?;
    let bank = load_bank(&args.bank)?;
    let enhancer: Option<Enhancer> = match &args.checkpoint {
        Some(p) => Some(load_checkpoint(p)?.enhancer()?),
        None => None,
    };
    if let Some(e) = &enhancer {
        if e.config.d_v != novel.d_v() || e.config.d_t != novel.d_t() {
            bail!(
                "checkpoint dims ({}, {}) do not match the store ({}, {})",
                e.config.d_v,
                e.config.d_t,
                novel.d_v(),
                novel.d_t()
            );
        }
    }
    let needs_enhancer = args.ablation || ec.flags.needs_enhancer();
    if needs_enhancer && enhancer.is_none() {
        bail!("--checkpoint is required when any enhance flag is on (or with --ablation)");
    }

    if args.ablation {
        let reports = eval::evaluate_ablation(&novel, &bank, enhancer.as_ref(), &ec, args.jobs)?;
        let versus = reports
            .iter()
            .map(|r| {
                let t = paired_t_test(&r.accuracies, &reports[0].accuracies)?;
                Ok(Comparison {
                    variant: r.variant.clone(),
                    mean_diff: t.mean_diff,
                    t: t.t,
                    p_value: t.p_value,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        print_table(&reports, Some(&versus));
        if let Some(csv) = &args.csv {
            let mut text = String::from("episode");
            for r in &reports {
                text.push(',');
                text.push_str(&r.variant);
            }
            text.push('\n');
            for i in 0..ec.episodes {
                text.push_str(&i.to_string());
                for r in &reports {
                    text.push_str(&format!(",{}", r.accuracies[i]));
                }
                text.push('\n');
            }
            std::fs::write(csv, text).with_context(|| format!("writing {}", csv.display()))?;
        }
        if let Some(out) = &args.out {
            write_json(
                out,
                &AblationOutput {
                    reports,
                    versus_baseline: versus,
                },
            )?;
        }
    } else {
        let report = eval::evaluate(&novel, &bank, enhancer.as_ref(), &ec, args.jobs)?;
        print_table(std::slice::from_ref(&report), None);
        if report.lr_unconverged > 0 {
            eprintln!(
                "warning: logistic regression hit the iteration cap in {} episodes",
                report.lr_unconverged
            );
        }
        if let Some(csv) = &args.csv {
            std::fs::write(csv, report.to_csv())
                .with_context(|| format!("writing {}", csv.display()))?;
        }
        if let Some(out) = &args.out {
            write_json(out, &report)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

#[derive(Debug, Serialize)]
struct GradcheckRun {
    seed: u64,
    tensors: Vec<TensorCheck>,
}

pub fn gradcheck(cfg: RunConfig, args: GradcheckArgs) -> Result<ExitCode> {
    let mut runs = Vec::new();
    let mut all_passed = true;
    println!(
        "{:>5} {:<20} {:>6} {:>12} {:>6}",
        "seed", "tensor", "len", "max rel err", "ok"
    );
    for seed in args.seed..args.seed + args.seeds.max(1) {
        let gc = GradCheckConfig {
            seed,
            tokens: args.tokens,
            tolerance: args.tolerance,
            weights: cfg.train.weights,
            inject_bug: args.inject_bug,
            ..GradCheckConfig::default()
        };
        let checks = check_total_objective(&gc)?;
        for c in &checks {
            all_passed &= c.passed;
            println!(
                "{:>5} {:<20} {:>6} {:>12.3e} {:>6}",
                seed,
                c.name,
                c.len,
                c.max_rel_err,
                if c.passed { "pass" } else { "FAIL" }
            );
        }
        runs.push(GradcheckRun {
            seed,
            tensors: checks,
        });
    }
    if let Some(out) = &args.out {
        write_json(out, &runs)?;
    }
    if all_passed {
        println!("all gradients match");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradient mismatch detected");
        Ok(ExitCode::FAILURE)
    }
}

pub fn report(args: ReportArgs) -> Result<ExitCode> {
    for path in &args.inputs {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let saved: SavedReport = serde_json::from_str(&text)
            .with_context(|| format!("{} is not an evaluation report", path.display()))?;
        println!("{}", path.display());
        match saved {
            SavedReport::Single(r) => print_table(std::slice::from_ref(&r), None),
            SavedReport::Ablation(a) => print_table(&a.reports, Some(&a.versus_baseline)),
        }
    }
    Ok(ExitCode::SUCCESS)
}
