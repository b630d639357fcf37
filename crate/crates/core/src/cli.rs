//! Subcommand drivers behind the `advmal` binary.
//!
//! Every run resolves its arguments into a serializable config, writes that
//! config next to its outputs (`<out>.config.json`), and emits UTF-8
//! JSON/CSV only. Exit codes: 0 success, 2 config error, 3 data/format
//! error, 4 numeric failure.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;

use crate::attacks::{attack_dataset, AttackConfig, AttackFamily};
use crate::dataio::{
    apply_normalize, fit_normalize, load_dataset, save_dataset, synth_gen, FileFormat, NormStats,
    SynthConfig,
};
use crate::eval::{robustness_sweep, roc, transferability, write_roc_csv, RobustnessTable};
use crate::network::Architecture;
use crate::riskgap::{adversarial_risk, risk_bound};
use crate::svgd::{
    load_checkpoint, posterior_mean_loss, posterior_predict_batch, save_checkpoint, train,
    Ensemble, Optimizer, TrainConfig,
};
use crate::toyps::{padding_experiment, PaddingExperimentConfig, ToyGenConfig};
use crate::{Error, Result};

fn parse_budgets(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::value(format!("bad budget '{t}'")))
        })
        .collect()
}

fn parse_byte(s: &str) -> Result<u8> {
    let v = if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        u8::from_str_radix(hex, 16)
    } else {
        s.parse::<u8>()
    };
    v.map_err(|_| Error::value(format!("bad byte value '{s}'")))
}

fn parse_hidden_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::value(format!("bad layer width '{t}'")))
        })
        .collect()
}

/// Write the resolved config JSON next to an output path.
fn write_config(out: &Path, cfg: &impl Serialize) -> Result<()> {
    let mut path = out.as_os_str().to_owned();
    path.push(".config.json");
    let file = std::io::BufWriter::new(std::fs::File::create(PathBuf::from(path))?);
    serde_json::to_writer_pretty(file, cfg).map_err(|e| Error::format(e.to_string()))?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(file, value).map_err(|e| Error::format(e.to_string()))?;
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenSynthArgs {
    #[arg(long, default_value_t = 10_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 64)]
    pub features: usize,
    #[arg(long = "class-sep", default_value_t = 1.0)]
    pub class_separation: f64,
    #[arg(long, default_value_t = 0.3)]
    pub sparsity: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "bin")]
    pub format: String,
}

pub fn cmd_gen_synth(args: &GenSynthArgs) -> Result<()> {
    let format: FileFormat = args.format.parse()?;
    let d = synth_gen(&SynthConfig {
        n_samples: args.samples,
        n_features: args.features,
        class_separation: args.class_separation,
        sparsity: args.sparsity,
        seed: args.seed,
    })?;
    save_dataset(&d, &args.out, format)?;
    write_config(&args.out, args)?;
    println!(
        "wrote {} samples x {} features to {}",
        d.n_samples(),
        d.feature_dim(),
        args.out.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "bin")]
    pub format: String,
    /// Optional held-out dataset for the reported metrics.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub particles: usize,
    #[arg(long, default_value_t = 1.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long = "batch-size", default_value_t = 512)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    /// Hidden layer widths, comma separated.
    #[arg(long, default_value = "512,512,128")]
    pub arch: String,
    #[arg(long, default_value = "elu")]
    pub activation: String,
    #[arg(long = "no-layer-norm", default_value_t = false)]
    pub no_layer_norm: bool,
    #[arg(long = "weight-decay", default_value_t = 0.0)]
    pub weight_decay: f64,
    /// Harden with adversarial batches regenerated every step.
    #[arg(long, default_value_t = false)]
    pub adv: bool,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    /// Step size; defaults to 2.5 * epsilon / steps.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Skip min-max normalization (data already in [0,1]).
    #[arg(long = "no-normalize", default_value_t = false)]
    pub no_normalize: bool,
}

#[derive(Serialize)]
struct TrainMetrics {
    final_train_loss: f64,
    train_auc: f64,
    val_auc: Option<f64>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let format: FileFormat = args.format.parse()?;
    let raw = load_dataset(&args.data, format)?;
    let (data, stats) = if args.no_normalize {
        let stats = NormStats::identity(raw.feature_dim());
        (raw, stats)
    } else {
        fit_normalize(&raw)?
    };

    let hidden = parse_hidden_widths(&args.arch)?;
    let mut widths = vec![data.feature_dim()];
    widths.extend(hidden);
    widths.push(1);
    let arch = Architecture::uniform(widths, args.activation.parse()?, !args.no_layer_norm)?;

    let adv = if args.adv {
        let mut cfg = AttackConfig::eot_pgd(args.epsilon);
        cfg.steps = args.steps;
        cfg.alpha = args
            .alpha
            .unwrap_or(2.5 * args.epsilon / args.steps.max(1) as f64);
        Some(cfg)
    } else {
        None
    };

    let cfg = TrainConfig {
        arch,
        n_particles: args.particles,
        gamma: args.gamma,
        learning_rate: args.lr,
        epochs: args.epochs,
        batch_size: args.batch_size,
        adv,
        seed: args.seed,
        optimizer: args.optimizer.parse::<Optimizer>()?,
        weight_decay: args.weight_decay,
    };

    let ensemble = train(&data, &data, &cfg)?.with_norm_stats(stats.clone());
    save_checkpoint(&ensemble, &args.out)?;
    write_config(&args.out, args)?;

    let train_scores = posterior_predict_batch(&ensemble, data.features())?;
    let metrics = TrainMetrics {
        final_train_loss: posterior_mean_loss(&ensemble, &data)?,
        train_auc: roc(train_scores.as_slice().unwrap(), data.labels())?.auc,
        val_auc: match &args.val {
            Some(path) => {
                let val_raw = load_dataset(path, format)?;
                let val = apply_normalize(&val_raw, &stats)?;
                let scores = posterior_predict_batch(&ensemble, val.features())?;
                Some(roc(scores.as_slice().unwrap(), val.labels())?.auc)
            }
            None => None,
        },
    };
    let metrics_path = args.out.with_extension("metrics.json");
    write_json(&metrics_path, &metrics)?;
    println!(
        "checkpoint -> {} (train loss {:.4}, train AUC {:.4})",
        args.out.display(),
        metrics.final_train_loss,
        metrics.train_auc
    );
    Ok(())
}

fn load_model_and_data(
    ckpt: &Path,
    data: &Path,
    format: &str,
) -> Result<(Ensemble, crate::dataio::Dataset)> {
    let format: FileFormat = format.parse()?;
    let ensemble = load_checkpoint(ckpt)?;
    let raw = load_dataset(data, format)?;
    let normalized = apply_normalize(&raw, &ensemble.norm_stats)?;
    Ok((ensemble, normalized))
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AttackArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "bin")]
    pub format: String,
    #[arg(long, default_value = "eot_pgd")]
    pub family: String,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Perturb only malware rows (evaluation mode).
    #[arg(long = "malware-only", default_value_t = false)]
    pub malware_only: bool,
    /// Where to write the perturbed dataset (normalized feature space).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct AttackReport {
    family: String,
    epsilon: f64,
    rows: usize,
    evasion_rate: f64,
    mean_linf: f64,
    max_linf: f64,
}

pub fn cmd_attack(args: &AttackArgs) -> Result<()> {
    let (ensemble, data) = load_model_and_data(&args.ckpt, &args.data, &args.format)?;
    let family: AttackFamily = args.family.parse()?;
    let mut cfg = match family {
        AttackFamily::Fgsm => AttackConfig::fgsm(args.epsilon),
        _ => AttackConfig::eot_pgd(args.epsilon).with_family(family),
    }
    .malware_only(args.malware_only);
    cfg.steps = if family == AttackFamily::Fgsm { 1 } else { args.steps };
    if let Some(alpha) = args.alpha {
        cfg.alpha = alpha;
    } else if family != AttackFamily::Fgsm {
        cfg.alpha = 2.5 * args.epsilon / cfg.steps.max(1) as f64;
    }

    let (d_adv, result) = attack_dataset(&ensemble, &data, &cfg)?;
    let out_format: FileFormat = args.format.parse()?;
    save_dataset(&d_adv, &args.out, out_format)?;
    write_config(&args.out, args)?;

    let n = result.success_mask.len();
    let report = AttackReport {
        family: args.family.clone(),
        epsilon: args.epsilon,
        rows: n,
        evasion_rate: result.success_mask.iter().filter(|&&s| s).count() as f64 / n as f64,
        mean_linf: result.linf_used.iter().sum::<f64>() / n as f64,
        max_linf: result.linf_used.iter().copied().fold(0.0, f64::max),
    };
    let report_path = args.out.with_extension("report.json");
    write_json(&report_path, &report)?;
    println!(
        "adversarial dataset -> {} (evasion rate {:.4})",
        args.out.display(),
        report.evasion_rate
    );
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "bin")]
    pub format: String,
    /// Write the ROC curve CSV here.
    #[arg(long)]
    pub roc: Option<PathBuf>,
    /// Comma-separated attack budgets for a robustness sweep.
    #[arg(long)]
    pub budgets: Option<String>,
    #[arg(long, default_value = "eot_pgd")]
    pub family: String,
    /// Sweep both the iterative attack and FGSM.
    #[arg(long, default_value_t = false)]
    pub transfer: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct EvalReport {
    auc: f64,
    tpr_at_fpr_001: f64,
    tables: Vec<RobustnessTable>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let (ensemble, data) = load_model_and_data(&args.ckpt, &args.data, &args.format)?;
    let scores = posterior_predict_batch(&ensemble, data.features())?;
    let curve = roc(scores.as_slice().unwrap(), data.labels())?;
    if let Some(path) = &args.roc {
        write_roc_csv(&curve, path)?;
    }

    let model_tag = format!(
        "svgd-n{}-seed{}",
        ensemble.n_particles(),
        ensemble.train_meta.seed
    );
    let mut tables = Vec::new();
    if let Some(spec) = &args.budgets {
        let budgets = parse_budgets(spec)?;
        if args.transfer {
            let (pgd, fgsm) = transferability(&ensemble, &data, &budgets, model_tag)?;
            tables.push(pgd);
            tables.push(fgsm);
        } else {
            tables.push(robustness_sweep(
                &ensemble,
                &data,
                &budgets,
                args.family.parse()?,
                model_tag,
            )?);
        }
    }

    let report = EvalReport {
        auc: curve.auc,
        tpr_at_fpr_001: crate::eval::tpr_at_fpr(&curve, 0.01),
        tables,
    };
    write_json(&args.out, &report)?;
    write_config(&args.out, args)?;
    println!("eval report -> {} (AUC {:.4})", args.out.display(), report.auc);
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RiskgapArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "bin")]
    pub format: String,
    #[arg(long, default_value_t = 0.1)]
    pub epsilon: f64,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_riskgap(args: &RiskgapArgs) -> Result<()> {
    let (ensemble, data) = load_model_and_data(&args.ckpt, &args.data, &args.format)?;
    let mut cfg = AttackConfig::eot_pgd(args.epsilon);
    cfg.steps = args.steps;
    cfg.alpha = args
        .alpha
        .unwrap_or(2.5 * args.epsilon / args.steps.max(1) as f64);
    let (_, d_adv) = adversarial_risk(&ensemble, &data, &cfg)?;
    let mut report = risk_bound(&ensemble, &data, &d_adv)?;
    report.per_sample_r = None;
    write_json(&args.out, &report)?;
    write_config(&args.out, args)?;
    println!(
        "risk report -> {} (R {:.4}, R_adv {:.4}, tau {:.4}, holds {})",
        args.out.display(),
        report.r,
        report.r_adv,
        report.tau,
        report.holds
    );
    Ok(())
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Lemma1Args {
    /// Toy programs to generate (half malware).
    #[arg(long, default_value_t = 2000)]
    pub programs: usize,
    #[arg(long = "pad-bytes", default_value_t = 1000)]
    pub pad_bytes: usize,
    /// Byte value to pad with (decimal or 0x-prefixed hex).
    #[arg(long = "byte", default_value = "0xA9")]
    pub byte: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub epochs: usize,
    #[arg(long, default_value_t = 3)]
    pub particles: usize,
    /// Skip the hardened model (subset check on the clean model only).
    #[arg(long = "no-adv", default_value_t = false)]
    pub no_adv: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_lemma1(args: &Lemma1Args) -> Result<()> {
    let byte_val = parse_byte(&args.byte)?;
    let cfg = PaddingExperimentConfig {
        gen: ToyGenConfig {
            n_programs: args.programs,
            seed: args.seed,
            ..ToyGenConfig::default()
        },
        pad_bytes: args.pad_bytes,
        pad_byte: byte_val,
        epochs: args.epochs,
        n_particles: args.particles,
        train_seed: args.seed,
        adv_train: !args.no_adv,
        ..PaddingExperimentConfig::default()
    };
    let report = padding_experiment(&cfg)?;
    write_json(&args.out, &report)?;
    write_config(&args.out, args)?;
    println!(
        "subset check -> {} (upsilon {:.4}, evasions {}, violations {})",
        args.out.display(),
        report.upsilon_eps,
        report.clean.evasions,
        report.clean.subset_violations
    );
    if let Some(adv) = &report.adv {
        println!(
            "hardened model detection under padding: {:.4} (clean model: {:.4})",
            adv.detection_rate_attacked, report.clean.detection_rate_attacked
        );
    }
    Ok(())
}
