//! Stein variational gradient descent over network parameter particles.
//!
//! Each training step computes per-particle loss gradients on the current
//! (optionally adversarial) batch, smooths them across particles through an
//! RBF kernel, and adds a repulsive kernel-gradient term scaled by gamma so
//! the particles stay diverse:
//!
//! ```text
//! phi(theta_i) = sum_j [ k(theta_j, theta_i) * grad_j
//!                        - (gamma / n) * k(theta_j, theta_i) * (theta_i - theta_j) / h^2 ]
//! theta_i <- theta_i - lr * phi(theta_i)
//! ```
//!
//! The bandwidth h is the median pairwise particle distance, recomputed
//! every iteration. With one particle and gamma = 0 the update collapses to
//! plain SGD, which the tests pin down bit-for-bit.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackConfig, AttackFamily};
use crate::dataio::{Dataset, NormStats};
use crate::network::{init_params, Architecture, Gradients, LayerParams, ParamParticle};
use crate::util::{csum, CompensatedSum};
use crate::{Error, Result};

/// Checkpoint document magic.
pub const CHECKPOINT_MAGIC: &str = "ADVMB";
/// Checkpoint format version.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl std::str::FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::value(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub n_particles: usize,
    /// Diversity/loss trade-off for the repulsive term.
    pub gamma: f64,
    /// Shared constant step size (the per-particle steps are all equal).
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Adversarial-batch generation; `None` trains on clean batches.
    pub adv: Option<AttackConfig>,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Optional L2 penalty, a Gaussian-prior surrogate. Default 0.
    pub weight_decay: f64,
}

impl TrainConfig {
    pub fn new(arch: Architecture) -> Self {
        Self {
            arch,
            n_particles: 5,
            gamma: 1.0,
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 512,
            adv: None,
            seed: 0,
            optimizer: Optimizer::Adam,
            weight_decay: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.n_particles == 0 {
            return Err(Error::value("n_particles must be >= 1"));
        }
        if self.gamma < 0.0 {
            return Err(Error::value("gamma must be >= 0"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::value("learning_rate must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::value("epochs and batch_size must be >= 1"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::value("weight_decay must be >= 0"));
        }
        Ok(())
    }
}

/// Provenance recorded with every trained ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub n_particles: usize,
    pub gamma: f64,
    pub batch_size: usize,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub attack: Option<AttackConfig>,
}

impl TrainMeta {
    fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            seed: cfg.seed,
            epochs: cfg.epochs,
            learning_rate: cfg.learning_rate,
            n_particles: cfg.n_particles,
            gamma: cfg.gamma,
            batch_size: cfg.batch_size,
            optimizer: cfg.optimizer,
            weight_decay: cfg.weight_decay,
            attack: cfg.adv.clone(),
        }
    }

    fn untrained(n_particles: usize) -> Self {
        Self {
            seed: 0,
            epochs: 0,
            learning_rate: 0.0,
            n_particles,
            gamma: 0.0,
            batch_size: 0,
            optimizer: Optimizer::Sgd,
            weight_decay: 0.0,
            attack: None,
        }
    }
}

/// A trained (or initialized) set of parameter particles approximating the
/// posterior, plus everything needed to reuse it: architecture, the
/// normalization fitted on the training data, gamma, and provenance.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub particles: Vec<ParamParticle>,
    pub architecture: Architecture,
    pub norm_stats: NormStats,
    pub gamma: f64,
    pub train_meta: TrainMeta,
}

impl Ensemble {
    /// Wrap existing particles; norm stats default to the identity.
    pub fn from_particles(particles: Vec<ParamParticle>, architecture: Architecture) -> Result<Self> {
        if particles.is_empty() {
            return Err(Error::value("ensemble needs at least one particle"));
        }
        for p in &particles {
            if p.arch != architecture {
                return Err(Error::value("particle architecture mismatch"));
            }
            if !p.all_finite() {
                return Err(Error::numeric("non-finite particle parameters"));
            }
        }
        let n = particles.len();
        let dim = architecture.input_dim();
        Ok(Self {
            particles,
            architecture,
            norm_stats: NormStats::identity(dim),
            gamma: 0.0,
            train_meta: TrainMeta::untrained(n),
        })
    }

    /// Fresh fan-in-initialized particles with per-particle seeds
    /// `seed, seed+1, ...`.
    pub fn init(arch: &Architecture, n_particles: usize, seed: u64) -> Result<Self> {
        if n_particles == 0 {
            return Err(Error::value("ensemble needs at least one particle"));
        }
        let particles = (0..n_particles)
            .map(|i| init_params(arch, seed.wrapping_add(i as u64), i))
            .collect::<Result<Vec<_>>>()?;
        Self::from_particles(particles, arch.clone())
    }

    pub fn n_particles(&self) -> usize {
        self.particles.len()
    }

    pub fn with_norm_stats(mut self, stats: NormStats) -> Self {
        self.norm_stats = stats;
        self
    }
}

/// RBF kernel k(a,b) = exp(-||a-b||^2 / (2 h^2)) over flattened parameters.
pub fn rbf_kernel(a: &ParamParticle, b: &ParamParticle, h: f64) -> Result<f64> {
    if h <= 0.0 {
        return Err(Error::value("kernel bandwidth must be positive"));
    }
    if a.arch != b.arch {
        return Err(Error::dimension("kernel between mismatched particles"));
    }
    Ok((-a.sq_distance(b) / (2.0 * h * h)).exp())
}

/// Median of the pairwise Euclidean distances between particles; falls back
/// to 1 for a single particle or coincident particles.
pub fn median_bandwidth(particles: &[ParamParticle]) -> f64 {
    let n = particles.len();
    if n <= 1 {
        return 1.0;
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(particles[i].sq_distance(&particles[j]).sqrt());
        }
    }
    match crate::util::median_in_place(&mut dists) {
        Some(m) if m > 0.0 => m,
        _ => 1.0,
    }
}

impl Gradients {
    /// self += c * other, elementwise.
    pub fn add_scaled(&mut self, c: f64, other: &Gradients) {
        for (d, s) in crate::network::values_mut(&mut self.layers)
            .zip(crate::network::values(&other.layers))
        {
            *d += c * s;
        }
    }

    /// self += c * (a - b), elementwise over particle parameters.
    pub fn add_scaled_diff(&mut self, c: f64, a: &ParamParticle, b: &ParamParticle) {
        for ((d, av), bv) in crate::network::values_mut(&mut self.layers)
            .zip(crate::network::values(&a.layers))
            .zip(crate::network::values(&b.layers))
        {
            *d += c * (av - bv);
        }
    }
}

/// The SVGD transport direction phi for every particle.
///
/// The kernel gradient with respect to theta_j is
/// `k(theta_j, theta) * (theta - theta_j) / h^2`, so coincident particles
/// feel no force and separated ones are pushed apart by the update
/// `theta - lr * phi`.
pub fn svgd_direction(
    particles: &[ParamParticle],
    loss_grads: &[Gradients],
    gamma: f64,
) -> Result<Vec<Gradients>> {
    let n = particles.len();
    if n == 0 {
        return Err(Error::value("no particles"));
    }
    if loss_grads.len() != n {
        return Err(Error::dimension(format!(
            "{} gradients for {n} particles",
            loss_grads.len()
        )));
    }
    if gamma < 0.0 {
        return Err(Error::value("gamma must be >= 0"));
    }

    let h = median_bandwidth(particles);
    let h2 = h * h;

    // Symmetric kernel matrix from pairwise squared distances.
    let mut kernel = vec![vec![1.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let k = (-particles[i].sq_distance(&particles[j]) / (2.0 * h2)).exp();
            kernel[i][j] = k;
            kernel[j][i] = k;
        }
    }

    let mut directions = Vec::with_capacity(n);
    for i in 0..n {
        let mut dir = particles[i].zeros_grad();
        for j in 0..n {
            let k = kernel[j][i];
            dir.add_scaled(k, &loss_grads[j]);
            if gamma > 0.0 && j != i {
                // -(gamma/n) * grad_{theta_j} k(theta_j, theta_i)
                let c = -(gamma / n as f64) * k / h2;
                dir.add_scaled_diff(c, &particles[i], &particles[j]);
            }
        }
        directions.push(dir);
    }
    Ok(directions)
}

/// Deterministic shuffled batch index schedule for one epoch.
///
/// Public so reference training loops can replicate the exact batching.
pub fn batch_schedule(
    n_samples: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut indices: Vec<usize> = (0..n_samples).collect();
    let epoch_seed = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
    indices.shuffle(&mut rng);
    indices
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

struct AdamState {
    m: Gradients,
    v: Gradients,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn adam_update(particle: &mut ParamParticle, state: &mut AdamState, dir: &Gradients, lr: f64) {
    state.t += 1;
    let b1t = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let b2t = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let params = crate::network::values_mut(&mut particle.layers);
    let ms = crate::network::values_mut(&mut state.m.layers);
    let vs = crate::network::values_mut(&mut state.v.layers);
    let ds = crate::network::values(&dir.layers);
    for (((p, m), v), d) in params.zip(ms).zip(vs).zip(ds) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * d;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * d * d;
        let mhat = *m / b1t;
        let vhat = *v / b2t;
        *p -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}

fn gather_batch(d: &Dataset, indices: &[usize]) -> (Array2<f64>, Vec<u8>) {
    let mut x = Array2::zeros((indices.len(), d.feature_dim()));
    let mut y = Vec::with_capacity(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        x.row_mut(row).assign(&d.row(i));
        y.push(d.labels()[i]);
    }
    (x, y)
}

/// Train a fresh ensemble with SVGD, regenerating adversarial batches against
/// the current particles when `cfg.adv` is set. Deterministic in the seed.
pub fn train(train_d: &Dataset, val_d: &Dataset, cfg: &TrainConfig) -> Result<Ensemble> {
    cfg.validate()?;
    if train_d.feature_dim() != cfg.arch.input_dim() {
        return Err(Error::dimension(format!(
            "dataset feature dim {} != architecture input {}",
            train_d.feature_dim(),
            cfg.arch.input_dim()
        )));
    }
    if train_d.n_samples() == 0 {
        return Err(Error::value("empty training set"));
    }
    let ensemble = Ensemble::init(&cfg.arch, cfg.n_particles, cfg.seed)?;
    train_from(ensemble, train_d, val_d, cfg)
}

/// Run the training loop from an explicit initial ensemble.
pub fn train_from(
    mut ensemble: Ensemble,
    train_d: &Dataset,
    _val_d: &Dataset,
    cfg: &TrainConfig,
) -> Result<Ensemble> {
    cfg.validate()?;
    if ensemble.n_particles() != cfg.n_particles {
        return Err(Error::value(format!(
            "initial ensemble has {} particles, config says {}",
            ensemble.n_particles(),
            cfg.n_particles
        )));
    }
    let adv_cfg = cfg.adv.as_ref().filter(|a| a.family != AttackFamily::None);

    let mut adam_states: Option<Vec<AdamState>> = match cfg.optimizer {
        Optimizer::Adam => Some(
            ensemble
                .particles
                .iter()
                .map(|p| AdamState {
                    m: p.zeros_grad(),
                    v: p.zeros_grad(),
                    t: 0,
                })
                .collect(),
        ),
        Optimizer::Sgd => None,
    };

    for epoch in 0..cfg.epochs {
        let schedule = batch_schedule(train_d.n_samples(), cfg.batch_size, cfg.seed, epoch);
        for (batch_no, batch_idx) in schedule.iter().enumerate() {
            let (x, y) = gather_batch(train_d, batch_idx);

            // Training-mode hardening perturbs every row of the batch
            // against the current ensemble.
            let x = match adv_cfg {
                Some(attack) => {
                    attacks::eot_pgd(&ensemble, x.view(), &y, attack)
                        .map_err(|e| train_err(e, epoch, batch_no))?
                        .x_adv
                }
                None => x,
            };

            let grads: Vec<Gradients> = ensemble
                .particles
                .par_iter()
                .map(|p| p.backward(x.view(), &y).map(|(g, _)| g))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| train_err(e, epoch, batch_no))?;

            let grads = if cfg.weight_decay > 0.0 {
                let mut with_decay = grads;
                for (g, p) in with_decay.iter_mut().zip(&ensemble.particles) {
                    let decayed = Gradients {
                        layers: p.layers.clone(),
                    };
                    g.add_scaled(cfg.weight_decay, &decayed);
                }
                with_decay
            } else {
                grads
            };

            let directions = svgd_direction(&ensemble.particles, &grads, cfg.gamma)
                .map_err(|e| train_err(e, epoch, batch_no))?;

            match (&mut adam_states, cfg.optimizer) {
                (Some(states), Optimizer::Adam) => {
                    for ((p, s), dir) in ensemble
                        .particles
                        .iter_mut()
                        .zip(states.iter_mut())
                        .zip(&directions)
                    {
                        adam_update(p, s, dir, cfg.learning_rate);
                    }
                }
                _ => {
                    for (p, dir) in ensemble.particles.iter_mut().zip(&directions) {
                        p.axpy(-cfg.learning_rate, dir);
                    }
                }
            }
        }
        for p in &ensemble.particles {
            if !p.all_finite() {
                return Err(Error::numeric(format!(
                    "non-finite parameters after epoch {epoch}"
                )));
            }
        }
    }

    ensemble.gamma = cfg.gamma;
    ensemble.train_meta = TrainMeta::from_config(cfg);
    Ok(ensemble)
}

fn train_err(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::numeric(format!("epoch {epoch}, batch {batch}: {msg}")),
        other => other,
    }
}

/// Posterior predictive: the mean of per-particle probabilities.
///
/// The per-sample probabilities are summed in sorted order so the result is
/// invariant under particle permutation.
pub fn posterior_predict(ensemble: &Ensemble, x: ArrayView1<'_, f64>) -> Result<f64> {
    let batch = x.insert_axis(ndarray::Axis(0));
    Ok(posterior_predict_batch(ensemble, batch)?[0])
}

/// Batched posterior predictive.
pub fn posterior_predict_batch(
    ensemble: &Ensemble,
    x: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    let per_particle: Vec<Array1<f64>> = ensemble
        .particles
        .par_iter()
        .map(|p| p.predict_prob_batch(x))
        .collect::<Result<Vec<_>>>()?;
    let n = per_particle.len() as f64;
    let mut out = Array1::zeros(x.nrows());
    let mut probs = vec![0.0f64; per_particle.len()];
    for i in 0..x.nrows() {
        for (slot, pp) in probs.iter_mut().zip(&per_particle) {
            *slot = pp[i];
        }
        probs.sort_by(|a, b| a.total_cmp(b));
        out[i] = csum(probs.iter().copied()) / n;
    }
    Ok(out)
}

/// Mean posterior-predictive BCE loss over a dataset.
pub fn posterior_mean_loss(ensemble: &Ensemble, d: &Dataset) -> Result<f64> {
    let mut acc = CompensatedSum::new();
    for p in &ensemble.particles {
        let logits = p.forward_batch(d.features())?;
        for (z, &y) in logits.iter().zip(d.labels()) {
            acc.add(crate::network::bce_loss(*z, y));
        }
    }
    Ok(acc.value() / (ensemble.n_particles() * d.n_samples().max(1)) as f64)
}

// Checkpoint document layout. Layer-norm affine parameters ride along as
// optional per-layer fields.

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    magic: String,
    version: u32,
    architecture: Architecture,
    gamma: f64,
    norm_stats: NormStats,
    train_meta: TrainMeta,
    particles: Vec<ParticleDoc>,
}

#[derive(Serialize, Deserialize)]
struct ParticleDoc {
    layers: Vec<LayerDoc>,
}

#[derive(Serialize, Deserialize)]
struct LayerDoc {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ln_gain: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ln_bias: Option<Vec<f64>>,
}

fn layer_to_doc(l: &LayerParams) -> LayerDoc {
    LayerDoc {
        w: l.w.rows().into_iter().map(|r| r.to_vec()).collect(),
        b: l.b.to_vec(),
        ln_gain: l.ln.as_ref().map(|ln| ln.gain.to_vec()),
        ln_bias: l.ln.as_ref().map(|ln| ln.bias.to_vec()),
    }
}

fn layer_from_doc(doc: &LayerDoc, d_out: usize, d_in: usize, has_ln: bool) -> Result<LayerParams> {
    if doc.w.len() != d_out || doc.w.iter().any(|r| r.len() != d_in) {
        return Err(Error::format(format!(
            "layer weight shape mismatch (expected {d_out}x{d_in})"
        )));
    }
    if doc.b.len() != d_out {
        return Err(Error::format("layer bias length mismatch"));
    }
    let w = Array2::from_shape_vec((d_out, d_in), doc.w.concat())
        .map_err(|e| Error::format(format!("weight matrix: {e}")))?;
    let ln = if has_ln {
        let gain = doc
            .ln_gain
            .as_ref()
            .ok_or_else(|| Error::format("missing ln_gain for layer-norm layer"))?;
        let bias = doc
            .ln_bias
            .as_ref()
            .ok_or_else(|| Error::format("missing ln_bias for layer-norm layer"))?;
        if gain.len() != d_out || bias.len() != d_out {
            return Err(Error::format("layer-norm parameter length mismatch"));
        }
        Some(crate::network::LnParams {
            gain: Array1::from_vec(gain.clone()),
            bias: Array1::from_vec(bias.clone()),
        })
    } else {
        None
    };
    Ok(LayerParams {
        w,
        b: Array1::from_vec(doc.b.clone()),
        ln,
    })
}

/// Serialize an ensemble to the JSON checkpoint format.
pub fn save_checkpoint(ensemble: &Ensemble, path: impl AsRef<Path>) -> Result<()> {
    let doc = CheckpointDoc {
        magic: CHECKPOINT_MAGIC.to_string(),
        version: CHECKPOINT_VERSION,
        architecture: ensemble.architecture.clone(),
        gamma: ensemble.gamma,
        norm_stats: ensemble.norm_stats.clone(),
        train_meta: ensemble.train_meta.clone(),
        particles: ensemble
            .particles
            .iter()
            .map(|p| ParticleDoc {
                layers: p.layers.iter().map(layer_to_doc).collect(),
            })
            .collect(),
    };
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer(file, &doc).map_err(|e| Error::format(format!("serialize: {e}")))?;
    Ok(())
}

/// Load an ensemble from a JSON checkpoint, validating magic, version, and
/// every parameter shape against the recorded architecture.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Ensemble> {
    let file = BufReader::new(File::open(path)?);
    let doc: CheckpointDoc =
        serde_json::from_reader(file).map_err(|e| Error::format(format!("parse: {e}")))?;
    if doc.magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic '{}'",
            doc.magic
        )));
    }
    if doc.version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {}",
            doc.version
        )));
    }
    doc.architecture.validate()?;
    if doc.particles.is_empty() {
        return Err(Error::format("checkpoint has no particles"));
    }

    let arch = &doc.architecture;
    let mut particles = Vec::with_capacity(doc.particles.len());
    for (id, pdoc) in doc.particles.iter().enumerate() {
        if pdoc.layers.len() != arch.n_layers() {
            return Err(Error::format(format!(
                "particle {id} has {} layers, architecture says {}",
                pdoc.layers.len(),
                arch.n_layers()
            )));
        }
        let mut layers = Vec::with_capacity(pdoc.layers.len());
        for (l, ldoc) in pdoc.layers.iter().enumerate() {
            let has_ln = l < arch.n_hidden() && arch.layer_norm[l];
            layers.push(layer_from_doc(
                ldoc,
                arch.layer_widths[l + 1],
                arch.layer_widths[l],
                has_ln,
            )?);
        }
        particles.push(ParamParticle {
            id,
            arch: arch.clone(),
            layers,
        });
    }

    let mut ensemble = Ensemble::from_particles(particles, doc.architecture)?;
    ensemble.norm_stats = doc.norm_stats;
    ensemble.gamma = doc.gamma;
    ensemble.train_meta = doc.train_meta;
    Ok(ensemble)
}
