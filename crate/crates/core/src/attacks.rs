//! Feature-space adversarial example generation.
//!
//! All attacks operate under an L-infinity budget with optional per-feature
//! perturbation bounds and a valid-domain clamp. The iterative attack takes
//! its per-step gradient as the arithmetic mean over the ensemble's
//! parameter particles, so with one particle it reduces to plain PGD and
//! with one step (and a large enough step size) to FGSM.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::svgd::{posterior_predict_batch, Ensemble};
use crate::util::sign0;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackFamily {
    None,
    Fgsm,
    Pgd,
    EotPgd,
}

impl std::str::FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackFamily::None),
            "fgsm" => Ok(AttackFamily::Fgsm),
            "pgd" => Ok(AttackFamily::Pgd),
            "eot_pgd" | "eot-pgd" => Ok(AttackFamily::EotPgd),
            other => Err(Error::value(format!("unknown attack family '{other}'"))),
        }
    }
}

/// Scalar or per-feature perturbation bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BoundSpec {
    Scalar(f64),
    PerFeature(Vec<f64>),
}

impl BoundSpec {
    pub fn at(&self, j: usize) -> f64 {
        match self {
            BoundSpec::Scalar(v) => *v,
            BoundSpec::PerFeature(v) => v[j],
        }
    }

    fn check_dim(&self, dim: usize, name: &str) -> Result<()> {
        if let BoundSpec::PerFeature(v) = self {
            if v.len() != dim {
                return Err(Error::dimension(format!(
                    "{name} has {} entries for {dim} features",
                    v.len()
                )));
            }
        }
        Ok(())
    }
}

/// Attack parameters: budget, step schedule, perturbation bounds, domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub family: AttackFamily,
    /// L-infinity budget in normalized feature units.
    pub epsilon_max: f64,
    /// Step size for iterative attacks.
    pub alpha: f64,
    pub steps: usize,
    /// Per-feature lower perturbation bound (<= 0).
    pub delta_lb: BoundSpec,
    /// Per-feature upper perturbation bound (>= 0).
    pub delta_ub: BoundSpec,
    pub domain_lo: f64,
    pub domain_hi: f64,
    /// Evaluation mode: perturb only rows labeled malware.
    pub target_malware_only: bool,
}

impl AttackConfig {
    /// Iterative attack with the standard budget-covering schedule
    /// alpha = 2.5 * eps / steps, steps = 10.
    pub fn eot_pgd(epsilon_max: f64) -> Self {
        let steps = 10;
        Self {
            family: AttackFamily::EotPgd,
            epsilon_max,
            alpha: 2.5 * epsilon_max / steps as f64,
            steps,
            delta_lb: BoundSpec::Scalar(-1.0),
            delta_ub: BoundSpec::Scalar(1.0),
            domain_lo: 0.0,
            domain_hi: 1.0,
            target_malware_only: false,
        }
    }

    pub fn fgsm(epsilon_max: f64) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            steps: 1,
            alpha: epsilon_max,
            ..Self::eot_pgd(epsilon_max)
        }
    }

    pub fn none() -> Self {
        Self {
            family: AttackFamily::None,
            ..Self::eot_pgd(0.0)
        }
    }

    pub fn with_family(mut self, family: AttackFamily) -> Self {
        self.family = family;
        self
    }

    pub fn with_budget(mut self, epsilon_max: f64) -> Self {
        self.epsilon_max = epsilon_max;
        self.alpha = if self.steps > 0 {
            2.5 * epsilon_max / self.steps as f64
        } else {
            epsilon_max
        };
        if self.family == AttackFamily::Fgsm {
            self.alpha = epsilon_max;
        }
        self
    }

    pub fn malware_only(mut self, flag: bool) -> Self {
        self.target_malware_only = flag;
        self
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.epsilon_max < 0.0 {
            return Err(Error::value("epsilon_max must be >= 0"));
        }
        if self.domain_lo > self.domain_hi {
            return Err(Error::value("domain_lo > domain_hi"));
        }
        self.delta_lb.check_dim(dim, "delta_lb")?;
        self.delta_ub.check_dim(dim, "delta_ub")?;
        for j in 0..dim {
            if self.delta_lb.at(j) > 0.0 || self.delta_ub.at(j) < 0.0 {
                return Err(Error::value(format!(
                    "perturbation bounds must straddle zero (feature {j})"
                )));
            }
        }
        if matches!(self.family, AttackFamily::Pgd | AttackFamily::EotPgd) {
            if self.steps == 0 {
                return Err(Error::value("iterative attacks need steps >= 1"));
            }
            if self.alpha <= 0.0 && self.epsilon_max > 0.0 {
                return Err(Error::value("alpha must be positive"));
            }
        }
        Ok(())
    }
}

/// Attack output: perturbed rows, per-row evasion flag at threshold 0.5,
/// and the L-infinity norm actually used per row.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub x_adv: Array2<f64>,
    pub success_mask: Vec<bool>,
    pub linf_used: Vec<f64>,
}

/// Project a candidate onto the feasible set around `x0`: the perturbation
/// is clamped into `[max(-eps, delta_lb), min(eps, delta_ub)]` per feature
/// and the result into the valid domain. Idempotent.
pub fn project(
    x_cand: ArrayView1<'_, f64>,
    x0: ArrayView1<'_, f64>,
    cfg: &AttackConfig,
) -> Result<Array1<f64>> {
    if x_cand.len() != x0.len() {
        return Err(Error::dimension(format!(
            "candidate dim {} != origin dim {}",
            x_cand.len(),
            x0.len()
        )));
    }
    let mut out = Array1::zeros(x0.len());
    for j in 0..x0.len() {
        out[j] = project_coord(x_cand[j], x0[j], j, cfg);
    }
    Ok(out)
}

#[inline]
fn project_coord(cand: f64, origin: f64, j: usize, cfg: &AttackConfig) -> f64 {
    let lo = (-cfg.epsilon_max).max(cfg.delta_lb.at(j));
    let hi = cfg.epsilon_max.min(cfg.delta_ub.at(j));
    let delta = (cand - origin).clamp(lo, hi);
    (origin + delta).clamp(cfg.domain_lo, cfg.domain_hi)
}

fn project_batch_inplace(x: &mut Array2<f64>, x0: ArrayView2<'_, f64>, cfg: &AttackConfig) {
    ndarray::Zip::indexed(x).and(x0).for_each(|(_, j), cand, &origin| {
        *cand = project_coord(*cand, origin, j, cfg);
    });
}

/// Arithmetic mean over particles of the per-sample input gradients.
///
/// Particles run in parallel; the mean is accumulated in particle order so
/// results do not depend on scheduling.
fn ensemble_input_grad(
    ensemble: &Ensemble,
    x: ArrayView2<'_, f64>,
    y: &[u8],
) -> Result<Array2<f64>> {
    let per_particle: Vec<Result<Array2<f64>>> = ensemble
        .particles
        .par_iter()
        .map(|p| p.grad_input_batch(x, y))
        .collect();
    let mut acc: Option<Array2<f64>> = None;
    for g in per_particle {
        let g = g?;
        match acc.as_mut() {
            None => acc = Some(g),
            Some(a) => *a += &g,
        }
    }
    let mut mean = acc.ok_or_else(|| Error::value("ensemble has no particles"))?;
    mean.mapv_inplace(|v| v / ensemble.particles.len() as f64);
    if !mean.iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite attack gradient"));
    }
    Ok(mean)
}

fn finish_result(
    ensemble: &Ensemble,
    x0: ArrayView2<'_, f64>,
    y: &[u8],
    x_adv: Array2<f64>,
) -> Result<AttackResult> {
    let probs = posterior_predict_batch(ensemble, x_adv.view())?;
    let success_mask = probs
        .iter()
        .zip(y)
        .map(|(&p, &yi)| (p >= 0.5) != (yi == 1))
        .collect();
    let linf_used = x_adv
        .rows()
        .into_iter()
        .zip(x0.rows())
        .map(|(a, o)| {
            a.iter()
                .zip(o.iter())
                .map(|(x, x0)| (x - x0).abs())
                .fold(0.0f64, f64::max)
        })
        .collect();
    Ok(AttackResult {
        x_adv,
        success_mask,
        linf_used,
    })
}

/// Single signed-gradient step of size `epsilon_max`, then projection.
pub fn fgsm(
    ensemble: &Ensemble,
    x: ArrayView2<'_, f64>,
    y: &[u8],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate(x.ncols())?;
    check_batch(ensemble, x, y)?;
    let grad = ensemble_input_grad(ensemble, x, y)?;
    let mut x_adv = x.to_owned();
    ndarray::Zip::from(&mut x_adv).and(&grad).for_each(|v, &g| {
        *v += cfg.epsilon_max * sign0(g);
    });
    project_batch_inplace(&mut x_adv, x, cfg);
    finish_result(ensemble, x, y, x_adv)
}

/// Iterative signed ensemble-mean-gradient ascent with projection after
/// every step, starting from the clean input.
pub fn eot_pgd(
    ensemble: &Ensemble,
    x: ArrayView2<'_, f64>,
    y: &[u8],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate(x.ncols())?;
    check_batch(ensemble, x, y)?;
    let mut x_adv = x.to_owned();
    for _ in 0..cfg.steps {
        let grad = ensemble_input_grad(ensemble, x_adv.view(), y)?;
        ndarray::Zip::from(&mut x_adv).and(&grad).for_each(|v, &g| {
            *v += cfg.alpha * sign0(g);
        });
        project_batch_inplace(&mut x_adv, x, cfg);
    }
    finish_result(ensemble, x, y, x_adv)
}

fn check_batch(ensemble: &Ensemble, x: ArrayView2<'_, f64>, y: &[u8]) -> Result<()> {
    if x.nrows() != y.len() {
        return Err(Error::dimension(format!(
            "batch rows {} != label count {}",
            x.nrows(),
            y.len()
        )));
    }
    if x.ncols() != ensemble.architecture.input_dim() {
        return Err(Error::dimension(format!(
            "feature dim {} != network input {}",
            x.ncols(),
            ensemble.architecture.input_dim()
        )));
    }
    Ok(())
}

/// Attack a whole dataset. In evaluation mode (`target_malware_only`) only
/// rows labeled malware are perturbed; labels are never changed.
pub fn attack_dataset(
    ensemble: &Ensemble,
    d: &Dataset,
    cfg: &AttackConfig,
) -> Result<(Dataset, AttackResult)> {
    cfg.validate(d.feature_dim())?;
    let x = d.features();
    let y = d.labels();

    if cfg.family == AttackFamily::None {
        let result = finish_result(ensemble, x, y, x.to_owned())?;
        return Ok((d.clone(), result));
    }

    let run = |xs: ArrayView2<'_, f64>, ys: &[u8]| -> Result<AttackResult> {
        match cfg.family {
            AttackFamily::Fgsm => fgsm(ensemble, xs, ys, cfg),
            AttackFamily::Pgd | AttackFamily::EotPgd => eot_pgd(ensemble, xs, ys, cfg),
            AttackFamily::None => unreachable!(),
        }
    };

    let x_adv = if cfg.target_malware_only {
        let idx: Vec<usize> = (0..d.n_samples()).filter(|&i| y[i] == 1).collect();
        let mut sub = Array2::zeros((idx.len(), d.feature_dim()));
        let mut sub_y = Vec::with_capacity(idx.len());
        for (out, &i) in idx.iter().enumerate() {
            sub.row_mut(out).assign(&x.row(i));
            sub_y.push(y[i]);
        }
        let attacked = run(sub.view(), &sub_y)?;
        let mut full = x.to_owned();
        for (out, &i) in idx.iter().enumerate() {
            full.row_mut(i).assign(&attacked.x_adv.row(out));
        }
        full
    } else {
        run(x, y)?.x_adv
    };

    let result = finish_result(ensemble, x, y, x_adv.clone())?;
    let d_adv = Dataset::new(x_adv, y.to_vec(), format!("{}-adv", d.name()))?;
    Ok((d_adv, result))
}

/// Post-hoc validator for the attack invariants: budget, perturbation
/// bounds, and domain membership for every row.
pub fn validate_attack_result(
    x0: ArrayView2<'_, f64>,
    result: &AttackResult,
    cfg: &AttackConfig,
) -> Result<()> {
    let tol = 1e-9;
    if x0.dim() != result.x_adv.dim() {
        return Err(Error::dimension("attack result shape mismatch"));
    }
    for (i, (adv, orig)) in result
        .x_adv
        .rows()
        .into_iter()
        .zip(x0.rows())
        .enumerate()
    {
        for (j, (&a, &o)) in adv.iter().zip(orig.iter()).enumerate() {
            let delta = a - o;
            if delta.abs() > cfg.epsilon_max + tol {
                return Err(Error::constraint(format!(
                    "row {i} feature {j}: |delta| {} > budget {}",
                    delta.abs(),
                    cfg.epsilon_max
                )));
            }
            if delta < cfg.delta_lb.at(j) - tol || delta > cfg.delta_ub.at(j) + tol {
                return Err(Error::constraint(format!(
                    "row {i} feature {j}: delta {delta} outside perturbation bounds"
                )));
            }
            if a < cfg.domain_lo - tol || a > cfg.domain_hi + tol {
                return Err(Error::constraint(format!(
                    "row {i} feature {j}: value {a} outside domain"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, sigmoid_clamped, Activation, Architecture, ParamParticle};
    use crate::svgd::Ensemble;
    use ndarray::{array, Axis};

    fn linear_ensemble(w: Vec<f64>) -> Ensemble {
        let dim = w.len();
        let arch = Architecture::new(vec![dim, 1], Activation::Elu, vec![]).unwrap();
        let mut p = ParamParticle::zeros(&arch, 0);
        p.layers[0].w = Array2::from_shape_vec((1, dim), w).unwrap();
        Ensemble::from_particles(vec![p], arch).unwrap()
    }

    fn random_ensemble(dim: usize, n: usize, seed: u64) -> Ensemble {
        let arch = Architecture::uniform(vec![dim, 8, 1], Activation::Elu, true).unwrap();
        let particles = (0..n)
            .map(|i| init_params(&arch, seed + i as u64, i).unwrap())
            .collect();
        Ensemble::from_particles(particles, arch).unwrap()
    }

    #[test]
    fn project_examples() {
        let cfg = AttackConfig::eot_pgd(0.1);
        // Ball clamp.
        let out = project(array![0.9].view(), array![0.5].view(), &cfg).unwrap();
        assert!((out[0] - 0.6).abs() < 1e-15);
        // Identity.
        let out = project(array![0.5].view(), array![0.5].view(), &cfg).unwrap();
        assert_eq!(out[0], 0.5);
        // Domain clamp wins over the ball.
        let out = project(array![1.2].view(), array![0.95].view(), &cfg).unwrap();
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn project_additive_only_bound() {
        let mut cfg = AttackConfig::eot_pgd(0.1);
        cfg.delta_lb = BoundSpec::Scalar(0.0);
        let out = project(array![0.3].view(), array![0.5].view(), &cfg).unwrap();
        assert_eq!(out[0], 0.5);
    }

    #[test]
    fn project_is_idempotent() {
        let mut cfg = AttackConfig::eot_pgd(0.07);
        cfg.delta_lb = BoundSpec::PerFeature(vec![-0.02, 0.0, -1.0]);
        cfg.delta_ub = BoundSpec::PerFeature(vec![0.04, 1.0, 0.01]);
        let x0 = array![0.5, 0.02, 0.97];
        let cand = array![0.8, -0.5, 1.4];
        let once = project(cand.view(), x0.view(), &cfg).unwrap();
        let twice = project(once.view(), x0.view(), &cfg).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn fgsm_zero_budget_keeps_input_and_flags_clean_errors() {
        let ens = linear_ensemble(vec![2.0, -1.0]);
        let x = array![[0.2, 0.8], [0.9, 0.1]];
        let y = [1u8, 0];
        let cfg = AttackConfig::fgsm(0.0);
        let res = fgsm(&ens, x.view(), &y, &cfg).unwrap();
        assert_eq!(res.x_adv, x);
        // Clean misclassification: logits are 2*x0 - x1.
        for (i, &yi) in y.iter().enumerate() {
            let logit = 2.0 * x[[i, 0]] - x[[i, 1]];
            let clean_wrong = (sigmoid_clamped(logit) >= 0.5) != (yi == 1);
            assert_eq!(res.success_mask[i], clean_wrong);
        }
    }

    #[test]
    fn fgsm_linear_closed_form() {
        let ens = linear_ensemble(vec![1.5, -0.7, 0.3]);
        let x = array![[0.5, 0.5, 0.5]];
        let y = [1u8];
        let eps = 0.05;
        let res = fgsm(&ens, x.view(), &y, &AttackConfig::fgsm(eps)).unwrap();
        // For y=1 the loss gradient is -(1-p) w, so the step is -eps*sign(w).
        let w: [f64; 3] = [1.5, -0.7, 0.3];
        for j in 0..3 {
            let expected = 0.5 - eps * w[j].signum();
            assert!((res.x_adv[[0, j]] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn fgsm_increases_loss_at_interior_points() {
        let ens = linear_ensemble(vec![0.9, -1.2, 0.4, 0.3]);
        let x = array![[0.5, 0.4, 0.6, 0.5]];
        let y = [1u8];
        let cfg = AttackConfig::fgsm(0.08);
        let res = fgsm(&ens, x.view(), &y, &cfg).unwrap();
        let before = crate::network::bce_loss(ens.particles[0].forward(x.row(0)).unwrap(), 1);
        let after =
            crate::network::bce_loss(ens.particles[0].forward(res.x_adv.row(0)).unwrap(), 1);
        assert!(after >= before);
    }

    #[test]
    fn eot_pgd_zero_budget_is_identity() {
        let ens = random_ensemble(4, 3, 5);
        let x = array![[0.1, 0.9, 0.5, 0.3], [0.6, 0.2, 0.8, 0.4]];
        let y = [1u8, 0];
        let cfg = AttackConfig::eot_pgd(0.0);
        let res = eot_pgd(&ens, x.view(), &y, &cfg).unwrap();
        assert_eq!(res.x_adv, x);
        assert!(res.linf_used.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eot_pgd_one_step_large_alpha_equals_fgsm() {
        let ens = random_ensemble(6, 2, 9);
        let x = Array2::from_shape_fn((5, 6), |(i, j)| ((i * 7 + j * 3) % 10) as f64 / 10.0);
        let y = [1u8, 0, 1, 1, 0];
        let mut cfg = AttackConfig::eot_pgd(0.1);
        cfg.steps = 1;
        cfg.alpha = 0.3;
        let a = eot_pgd(&ens, x.view(), &y, &cfg).unwrap();
        let b = fgsm(&ens, x.view(), &y, &AttackConfig::fgsm(0.1)).unwrap();
        assert_eq!(a.x_adv, b.x_adv);
    }

    #[test]
    fn zero_gradient_coordinate_never_moves() {
        // Weight 0 on feature 1: its gradient is exactly zero everywhere.
        let ens = linear_ensemble(vec![1.0, 0.0, -1.0]);
        let x = array![[0.4, 0.123456, 0.6]];
        let y = [1u8];
        let cfg = AttackConfig::eot_pgd(0.2);
        let res = eot_pgd(&ens, x.view(), &y, &cfg).unwrap();
        assert_eq!(res.x_adv[[0, 1]], 0.123456);
    }

    #[test]
    fn attack_dataset_none_family_is_passthrough() {
        let ens = random_ensemble(3, 2, 1);
        let d = crate::dataio::synth_gen(&crate::dataio::SynthConfig {
            n_samples: 20,
            n_features: 3,
            ..Default::default()
        })
        .unwrap();
        let (norm, _) = crate::dataio::fit_normalize(&d).unwrap();
        let (adv, _) = attack_dataset(&ens, &norm, &AttackConfig::none()).unwrap();
        assert!(adv.content_eq(&norm));
    }

    #[test]
    fn malware_only_mode_leaves_benign_rows_untouched() {
        let ens = random_ensemble(4, 2, 3);
        let d = crate::dataio::synth_gen(&crate::dataio::SynthConfig {
            n_samples: 40,
            n_features: 4,
            ..Default::default()
        })
        .unwrap();
        let (norm, _) = crate::dataio::fit_normalize(&d).unwrap();
        let cfg = AttackConfig::eot_pgd(0.1).malware_only(true);
        let (adv, res) = attack_dataset(&ens, &norm, &cfg).unwrap();
        assert_eq!(adv.labels(), norm.labels());
        for i in 0..norm.n_samples() {
            if norm.labels()[i] == 0 {
                for j in 0..norm.feature_dim() {
                    assert_eq!(
                        adv.features()[[i, j]].to_bits(),
                        norm.features()[[i, j]].to_bits()
                    );
                }
                assert_eq!(res.linf_used[i], 0.0);
            }
        }
    }

    #[test]
    fn attacked_rows_satisfy_invariants() {
        let ens = random_ensemble(6, 3, 7);
        let d = crate::dataio::synth_gen(&crate::dataio::SynthConfig {
            n_samples: 100,
            n_features: 6,
            ..Default::default()
        })
        .unwrap();
        let (norm, _) = crate::dataio::fit_normalize(&d).unwrap();
        for eps in [0.03, 0.1, 0.3] {
            let mut cfg = AttackConfig::eot_pgd(eps);
            cfg.delta_lb = BoundSpec::Scalar(-0.25);
            cfg.delta_ub = BoundSpec::Scalar(0.2);
            let (_, res) = attack_dataset(&ens, &norm, &cfg).unwrap();
            validate_attack_result(norm.features(), &res, &cfg).unwrap();
        }
    }

    #[test]
    fn attack_is_deterministic() {
        let ens = random_ensemble(5, 3, 11);
        let d = crate::dataio::synth_gen(&crate::dataio::SynthConfig {
            n_samples: 50,
            n_features: 5,
            ..Default::default()
        })
        .unwrap();
        let (norm, _) = crate::dataio::fit_normalize(&d).unwrap();
        let cfg = AttackConfig::eot_pgd(0.1);
        let (a, _) = attack_dataset(&ens, &norm, &cfg).unwrap();
        let (b, _) = attack_dataset(&ens, &norm, &cfg).unwrap();
        assert!(a.content_eq(&b));
    }

    #[test]
    fn single_row_matches_row_in_batch() {
        // Row results do not depend on which other rows are processed.
        let ens = random_ensemble(4, 2, 13);
        let x = Array2::from_shape_fn((8, 4), |(i, j)| ((i * 5 + j) % 9) as f64 / 9.0);
        let y = [1u8, 0, 1, 0, 1, 1, 0, 0];
        let cfg = AttackConfig::eot_pgd(0.15);
        let full = eot_pgd(&ens, x.view(), &y, &cfg).unwrap();
        for i in [0usize, 3, 7] {
            let row = x.row(i).insert_axis(Axis(0));
            let single = eot_pgd(&ens, row, &[y[i]], &cfg).unwrap();
            for j in 0..4 {
                assert_eq!(
                    single.x_adv[[0, j]].to_bits(),
                    full.x_adv[[i, j]].to_bits(),
                    "row {i} feature {j}"
                );
            }
        }
    }
}
