//! Metrics and experiment drivers: ROC/AUC, TPR at fixed FPR, robustness
//! sweeps over attack budgets, and attack-transferability tables.
//!
//! The robustness metric is the detection rate (TPR at threshold 0.5) on
//! attacked malware rows; budget zero is the clean detection rate.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_dataset, AttackConfig, AttackFamily};
use crate::dataio::Dataset;
use crate::svgd::{posterior_predict_batch, Ensemble};
use crate::util::{csum, CompensatedSum};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// Exact ROC curve with trapezoidal AUC.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// Build the exact ROC by sweeping sorted score thresholds; tied scores
/// collapse into a single step so the trapezoidal AUC equals the pairwise
/// ranking probability with ties counted half.
pub fn roc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::dimension(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::value("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::value(
            "ROC needs at least one positive and one negative",
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        // Consume the whole tie group.
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
            threshold,
        });
    }

    let mut auc = CompensatedSum::new();
    for pair in points.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        auc.add((b.fpr - a.fpr) * (b.tpr + a.tpr) / 2.0);
    }
    Ok(RocCurve {
        points,
        auc: auc.value(),
    })
}

/// TPR of the last curve point with fpr <= target (conservative step
/// interpolation).
pub fn tpr_at_fpr(curve: &RocCurve, fpr_target: f64) -> f64 {
    let mut best = 0.0;
    for p in &curve.points {
        if p.fpr <= fpr_target && p.tpr > best {
            best = p.tpr;
        }
    }
    best
}

/// Write the curve as `fpr,tpr,threshold` CSV.
pub fn write_roc_csv(curve: &RocCurve, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "fpr,tpr,threshold")?;
    for p in &curve.points {
        writeln!(w, "{},{},{}", p.fpr, p.tpr, p.threshold)?;
    }
    w.flush()?;
    Ok(())
}

/// Detection rate per attack budget for one model under one attack family.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub model: String,
    pub attack: String,
    pub budgets: Vec<f64>,
    pub rates: Vec<f64>,
}

impl RobustnessTable {
    pub fn validate(&self) -> Result<()> {
        if self.budgets.len() != self.rates.len() {
            return Err(Error::dimension("budget/rate length mismatch"));
        }
        if self.rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::value("detection rate outside [0,1]"));
        }
        Ok(())
    }
}

fn family_tag(family: AttackFamily) -> &'static str {
    match family {
        AttackFamily::None => "none",
        AttackFamily::Fgsm => "fgsm",
        AttackFamily::Pgd => "pgd",
        AttackFamily::EotPgd => "eot_pgd",
    }
}

/// Fraction of malware rows detected (posterior >= 0.5).
pub fn detection_rate(ensemble: &Ensemble, d: &Dataset) -> Result<f64> {
    let malware: Vec<usize> = (0..d.n_samples())
        .filter(|&i| d.labels()[i] == 1)
        .collect();
    if malware.is_empty() {
        return Err(Error::value("dataset has no malware rows"));
    }
    let probs = posterior_predict_batch(ensemble, d.features())?;
    let detected = malware.iter().filter(|&&i| probs[i] >= 0.5).count();
    Ok(detected as f64 / malware.len() as f64)
}

/// Attack the malware rows at each budget and report detection rates.
pub fn robustness_sweep(
    ensemble: &Ensemble,
    d: &Dataset,
    budgets: &[f64],
    family: AttackFamily,
    model_tag: impl Into<String>,
) -> Result<RobustnessTable> {
    if d.malware_count() == 0 {
        return Err(Error::value("robustness sweep needs malware rows"));
    }
    let mut rates = Vec::with_capacity(budgets.len());
    for &eps in budgets {
        let cfg = match family {
            AttackFamily::Fgsm => AttackConfig::fgsm(eps),
            _ => AttackConfig::eot_pgd(eps).with_family(family),
        }
        .malware_only(true);
        let (d_adv, _) = attack_dataset(ensemble, d, &cfg)?;
        rates.push(detection_rate(ensemble, &d_adv)?);
    }
    let table = RobustnessTable {
        model: model_tag.into(),
        attack: family_tag(family).to_string(),
        budgets: budgets.to_vec(),
        rates,
    };
    table.validate()?;
    Ok(table)
}

/// Sweep the same model and data under the iterative attack and FGSM.
pub fn transferability(
    ensemble: &Ensemble,
    d: &Dataset,
    budgets: &[f64],
    model_tag: impl Into<String>,
) -> Result<(RobustnessTable, RobustnessTable)> {
    let tag = model_tag.into();
    let pgd = robustness_sweep(ensemble, d, budgets, AttackFamily::EotPgd, tag.clone())?;
    let fgsm = robustness_sweep(ensemble, d, budgets, AttackFamily::Fgsm, tag)?;
    Ok((pgd, fgsm))
}

/// AUC of the posterior predictive on a labeled dataset.
pub fn ensemble_auc(ensemble: &Ensemble, d: &Dataset) -> Result<f64> {
    let probs = posterior_predict_batch(ensemble, d.features())?;
    Ok(roc(probs.as_slice().unwrap(), d.labels())?.auc)
}

/// Per-particle AUCs (each particle scored alone).
pub fn per_particle_auc(ensemble: &Ensemble, d: &Dataset) -> Result<Vec<f64>> {
    ensemble
        .particles
        .iter()
        .map(|p| {
            let probs = p.predict_prob_batch(d.features())?;
            Ok(roc(probs.as_slice().unwrap(), d.labels())?.auc)
        })
        .collect()
}

/// Brute-force AUC as the pairwise ranking probability with ties half;
/// kept public as the independent oracle for curve-derived AUC.
pub fn pairwise_ranking_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 1)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::value("need both classes"));
    }
    let total = csum(pos.iter().flat_map(|&p| {
        neg.iter().map(move |&n| {
            if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            }
        })
    }));
    Ok(total / (pos.len() * neg.len()) as f64)
}
