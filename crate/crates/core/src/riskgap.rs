//! Empirical risk, adversarial risk, and the bound on their gap.
//!
//! Both risks are expected-agreement functionals: the mean over particles
//! and samples of the probability assigned to the true class, with the inner
//! expectation over sampled predictions taken in closed form so the bound
//! check is free of Monte Carlo noise. The bound is
//!
//! ```text
//! |R_adv - R| <= tau,    tau = 1 - E_x[ exp( E_theta[ r_theta ] ) ],
//! r_theta = sum_c p(c|x) * ln p(c|x_adv)
//! ```
//!
//! which holds deterministically for finite averages as long as all three
//! quantities use the same particle set and clamped probabilities; the
//! acceptance suite checks it on every evaluation batch.

use serde::{Deserialize, Serialize};

use crate::attacks::{attack_dataset, AttackConfig};
use crate::dataio::Dataset;
use crate::network::KAPPA;
use crate::svgd::Ensemble;
use crate::util::CompensatedSum;
use crate::{Error, Result};

/// Outcome of a bound check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskReport {
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "R_adv")]
    pub r_adv: f64,
    pub tau: f64,
    pub gap: f64,
    pub holds: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_sample_r: Option<Vec<f64>>,
}

/// Tolerance on the bound inequality.
pub const BOUND_TOL: f64 = 1e-9;

/// r_theta over a two-class probability pair:
/// `p_clean.0 * ln(p_adv.0) + p_clean.1 * ln(p_adv.1)`. Always <= 0 for
/// clamped probabilities.
pub fn r_theta(p_clean: (f64, f64), p_adv: (f64, f64)) -> Result<f64> {
    for (name, pair) in [("clean", p_clean), ("adversarial", p_adv)] {
        let (a, b) = pair;
        if !(KAPPA..=1.0 - KAPPA).contains(&a) || !(KAPPA..=1.0 - KAPPA).contains(&b) {
            return Err(Error::value(format!(
                "{name} probabilities ({a}, {b}) outside [kappa, 1-kappa]"
            )));
        }
        if (a + b - 1.0).abs() > 1e-9 {
            return Err(Error::value(format!(
                "{name} probabilities ({a}, {b}) do not sum to 1"
            )));
        }
    }
    Ok(p_clean.0 * p_adv.0.ln() + p_clean.1 * p_adv.1.ln())
}

/// Probability pair (benign, malware) from the malware probability.
fn pair(p1: f64) -> (f64, f64) {
    (1.0 - p1, p1)
}

/// True-class probability.
fn true_class_prob(p1: f64, y: u8) -> f64 {
    if y == 1 {
        p1
    } else {
        1.0 - p1
    }
}

/// Mean over particles and samples of the probability assigned to the true
/// label.
pub fn empirical_risk(ensemble: &Ensemble, d: &Dataset) -> Result<f64> {
    if d.feature_dim() != ensemble.architecture.input_dim() {
        return Err(Error::dimension("dataset/network feature dim mismatch"));
    }
    if d.n_samples() == 0 {
        return Err(Error::value("empty dataset"));
    }
    let mut acc = CompensatedSum::new();
    for p in &ensemble.particles {
        let probs = p.predict_prob_batch(d.features())?;
        for (i, &y) in d.labels().iter().enumerate() {
            acc.add(true_class_prob(probs[i], y));
        }
    }
    Ok(acc.value() / (ensemble.n_particles() * d.n_samples()) as f64)
}

/// Generate the adversarial counterpart of `d` (every row perturbed, labels
/// kept) and evaluate the risk functional on it. The adversarial dataset is
/// returned so the bound can be computed on the same x/x_adv pairing.
pub fn adversarial_risk(
    ensemble: &Ensemble,
    d: &Dataset,
    cfg: &AttackConfig,
) -> Result<(f64, Dataset)> {
    let all_rows_cfg = cfg.clone().malware_only(false);
    let (d_adv, _) = attack_dataset(ensemble, d, &all_rows_cfg)?;
    let r_adv = empirical_risk(ensemble, &d_adv)?;
    Ok((r_adv, d_adv))
}

/// Compute R, R_adv, tau, and the bound verdict with one particle set.
///
/// `d` and `d_adv` must be row-aligned: same labels, rows derived pairwise.
pub fn risk_bound(ensemble: &Ensemble, d: &Dataset, d_adv: &Dataset) -> Result<RiskReport> {
    if d.n_samples() != d_adv.n_samples()
        || d.feature_dim() != d_adv.feature_dim()
        || d.labels() != d_adv.labels()
    {
        return Err(Error::value(
            "clean and adversarial datasets are not row-aligned",
        ));
    }
    if d.n_samples() == 0 {
        return Err(Error::value("empty dataset"));
    }
    let n_particles = ensemble.n_particles() as f64;
    let n_samples = d.n_samples();

    let mut r_acc = CompensatedSum::new();
    let mut r_adv_acc = CompensatedSum::new();
    let mut per_sample = vec![CompensatedSum::new(); n_samples];

    for p in &ensemble.particles {
        let pc = p.predict_prob_batch(d.features())?;
        let pa = p.predict_prob_batch(d_adv.features())?;
        for (i, &y) in d.labels().iter().enumerate() {
            r_acc.add(true_class_prob(pc[i], y));
            r_adv_acc.add(true_class_prob(pa[i], y));
            per_sample[i].add(r_theta(pair(pc[i]), pair(pa[i]))?);
        }
    }

    let r = r_acc.value() / (n_particles * n_samples as f64);
    let r_adv = r_adv_acc.value() / (n_particles * n_samples as f64);

    let per_sample_r: Vec<f64> = per_sample
        .iter()
        .map(|acc| acc.value() / n_particles)
        .collect();
    let mut tau_acc = CompensatedSum::new();
    for &ri in &per_sample_r {
        tau_acc.add(ri.exp());
    }
    let tau = 1.0 - tau_acc.value() / n_samples as f64;

    let gap = (r_adv - r).abs();
    Ok(RiskReport {
        r,
        r_adv,
        tau,
        gap,
        holds: gap <= tau + BOUND_TOL,
        per_sample_r: Some(per_sample_r),
    })
}
