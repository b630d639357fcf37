//! Feed-forward binary classifiers with analytic gradients.
//!
//! A network is a stack of linear layers; hidden layers optionally apply
//! layer normalization before the activation, and the final layer emits a
//! single logit. Both parameter gradients (for training) and input gradients
//! (for attacks) come from hand-written backprop, so the whole crate stays a
//! closed-world numeric core with no autodiff dependency.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::util::cmean;
use crate::{Error, Result};

/// Probability clamp; keeps downstream logs finite.
pub const KAPPA: f64 = 1e-12;

/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu" => Ok(Activation::Elu),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::value(format!("unknown activation '{other}'"))),
        }
    }
}

impl Activation {
    fn apply(&self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp() - 1.0
                }
            }
            Activation::Relu => z.max(0.0),
        }
    }

    fn derivative(&self, z: f64) -> f64 {
        match self {
            Activation::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Network shape: layer widths (input first, final width 1), activation,
/// and a layer-norm flag per hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub layer_norm: Vec<bool>,
}

impl Architecture {
    pub fn new(layer_widths: Vec<usize>, activation: Activation, layer_norm: Vec<bool>) -> Result<Self> {
        let arch = Self {
            layer_widths,
            activation,
            layer_norm,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Same layer-norm choice for every hidden layer.
    pub fn uniform(layer_widths: Vec<usize>, activation: Activation, layer_norm: bool) -> Result<Self> {
        let hidden = layer_widths.len().saturating_sub(2);
        Self::new(layer_widths, activation, vec![layer_norm; hidden])
    }

    /// The default family used throughout: hidden widths 512/512/128 with
    /// ELU and layer normalization.
    pub fn default_for(input_dim: usize) -> Self {
        Self::uniform(vec![input_dim, 512, 512, 128, 1], Activation::Elu, true)
            .expect("default architecture is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::value("architecture needs at least input and output widths"));
        }
        if *self.layer_widths.last().unwrap() != 1 {
            return Err(Error::value("final layer width must be 1"));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::value("layer widths must be positive"));
        }
        if self.layer_norm.len() != self.n_hidden() {
            return Err(Error::value(format!(
                "layer_norm has {} entries for {} hidden layers",
                self.layer_norm.len(),
                self.n_hidden()
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn n_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn n_hidden(&self) -> usize {
        self.layer_widths.len() - 2
    }
}

/// Learnable layer-norm affine parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LnParams {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

/// One linear layer: weights `(out x in)`, bias, optional layer-norm affine.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub ln: Option<LnParams>,
}

/// One full set of network parameters (a posterior sample).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamParticle {
    pub id: usize,
    pub arch: Architecture,
    pub layers: Vec<LayerParams>,
}

/// Parameter-shaped gradient container (same layout as the particle).
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

fn layer_values(l: &LayerParams) -> impl Iterator<Item = f64> + '_ {
    l.w.iter()
        .chain(l.b.iter())
        .chain(l.ln.iter().flat_map(|ln| ln.gain.iter().chain(ln.bias.iter())))
        .copied()
}

fn layer_values_mut(l: &mut LayerParams) -> impl Iterator<Item = &mut f64> + '_ {
    l.w.iter_mut()
        .chain(l.b.iter_mut())
        .chain(
            l.ln
                .iter_mut()
                .flat_map(|ln| ln.gain.iter_mut().chain(ln.bias.iter_mut())),
        )
}

pub(crate) fn values(layers: &[LayerParams]) -> impl Iterator<Item = f64> + '_ {
    layers.iter().flat_map(layer_values)
}

pub(crate) fn values_mut(layers: &mut [LayerParams]) -> impl Iterator<Item = &mut f64> + '_ {
    layers.iter_mut().flat_map(layer_values_mut)
}

fn zero_layers(arch: &Architecture) -> Vec<LayerParams> {
    (0..arch.n_layers())
        .map(|l| {
            let (d_in, d_out) = (arch.layer_widths[l], arch.layer_widths[l + 1]);
            let ln = (l < arch.n_hidden() && arch.layer_norm[l]).then(|| LnParams {
                gain: Array1::zeros(d_out),
                bias: Array1::zeros(d_out),
            });
            LayerParams {
                w: Array2::zeros((d_out, d_in)),
                b: Array1::zeros(d_out),
                ln,
            }
        })
        .collect()
}

impl ParamParticle {
    /// All-zero parameters (layer-norm gains zero too; mostly for tests).
    pub fn zeros(arch: &Architecture, id: usize) -> Self {
        Self {
            id,
            arch: arch.clone(),
            layers: zero_layers(arch),
        }
    }

    pub fn n_params(&self) -> usize {
        values(&self.layers).count()
    }

    pub fn zeros_grad(&self) -> Gradients {
        Gradients {
            layers: zero_layers(&self.arch),
        }
    }

    /// theta += alpha * g, elementwise over every parameter.
    pub fn axpy(&mut self, alpha: f64, g: &Gradients) {
        for (p, gv) in values_mut(&mut self.layers).zip(values(&g.layers)) {
            *p += alpha * gv;
        }
    }

    pub fn all_finite(&self) -> bool {
        values(&self.layers).all(|v| v.is_finite())
    }

    /// Squared Euclidean distance between flattened parameter vectors.
    pub fn sq_distance(&self, other: &ParamParticle) -> f64 {
        values(&self.layers)
            .zip(values(&other.layers))
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum()
    }

    fn check_input_dim(&self, dim: usize) -> Result<()> {
        if dim != self.arch.input_dim() {
            return Err(Error::dimension(format!(
                "input dim {dim} != network input {}",
                self.arch.input_dim()
            )));
        }
        Ok(())
    }

    /// Logit for a single feature vector.
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        let batch = x.insert_axis(Axis(0));
        Ok(self.forward_batch(batch)?[0])
    }

    /// Logits for a batch of rows.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let (logits, _) = self.forward_cached(x, false)?;
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite logit in forward pass"));
        }
        Ok(logits)
    }

    /// p(y=1|x, theta), clamped into `[KAPPA, 1-KAPPA]`.
    pub fn predict_prob(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        Ok(sigmoid_clamped(self.forward(x)?))
    }

    pub fn predict_prob_batch(&self, x: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.forward_batch(x)?.mapv(sigmoid_clamped))
    }

    /// Mean-BCE parameter gradient and mean loss over the batch.
    pub fn backward(&self, x: ArrayView2<'_, f64>, y: &[u8]) -> Result<(Gradients, f64)> {
        let (grads, _, loss) = self.backprop(x, y, true, false)?;
        Ok((grads.expect("param grads requested"), loss))
    }

    /// Per-sample loss gradient with respect to one input vector.
    pub fn grad_input(&self, x: ArrayView1<'_, f64>, y: u8) -> Result<Array1<f64>> {
        let batch = x.insert_axis(Axis(0));
        let g = self.grad_input_batch(batch, &[y])?;
        Ok(g.row(0).to_owned())
    }

    /// Per-sample input gradients for a batch (one row per sample, no batch
    /// normalization so each row is the gradient of its own loss).
    pub fn grad_input_batch(&self, x: ArrayView2<'_, f64>, y: &[u8]) -> Result<Array2<f64>> {
        let (_, dx, _) = self.backprop(x, y, false, true)?;
        Ok(dx.expect("input grads requested"))
    }

    fn forward_cached(
        &self,
        x: ArrayView2<'_, f64>,
        keep_cache: bool,
    ) -> Result<(Array1<f64>, Vec<LayerCache>)> {
        self.check_input_dim(x.ncols())?;
        let n_layers = self.arch.n_layers();
        let mut caches = Vec::with_capacity(if keep_cache { n_layers } else { 0 });
        let mut a = x.to_owned();

        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.w.t());
            z += &layer.b;
            if l == n_layers - 1 {
                if keep_cache {
                    caches.push(LayerCache {
                        input: a,
                        ln_xhat: None,
                        ln_inv: None,
                        pre_act: None,
                    });
                }
                let logits = z.index_axis_move(Axis(1), 0);
                return Ok((logits, caches));
            }

            let (ln_xhat, ln_inv) = if let Some(ln) = &layer.ln {
                let (xhat, inv) = layer_norm_forward(&mut z, ln);
                (Some(xhat), Some(inv))
            } else {
                (None, None)
            };

            let pre_act = keep_cache.then(|| z.clone());
            z.mapv_inplace(|v| self.arch.activation.apply(v));
            if keep_cache {
                caches.push(LayerCache {
                    input: a,
                    ln_xhat,
                    ln_inv,
                    pre_act,
                });
            }
            a = z;
        }
        unreachable!("final layer returns above")
    }

    /// Shared backprop: parameter gradients use the mean loss over the batch,
    /// input gradients are per-sample.
    fn backprop(
        &self,
        x: ArrayView2<'_, f64>,
        y: &[u8],
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<Gradients>, Option<Array2<f64>>, f64)> {
        if y.len() != x.nrows() {
            return Err(Error::dimension(format!(
                "batch rows {} != label count {}",
                x.nrows(),
                y.len()
            )));
        }
        if x.nrows() == 0 {
            return Err(Error::value("empty batch"));
        }
        let (logits, caches) = self.forward_cached(x, true)?;
        if !logits.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite logit in forward pass"));
        }

        let batch = x.nrows();
        let mean_loss = cmean(
            logits
                .iter()
                .zip(y)
                .map(|(&z, &yi)| bce_loss(z, yi)),
        );

        // dL/dlogit = p - y; the mean-loss scaling applies to parameter
        // gradients only, so input gradients stay per-sample.
        let scale = if want_params && !want_input {
            1.0 / batch as f64
        } else {
            1.0
        };
        let mut dz = Array2::zeros((batch, 1));
        for (i, (&z, &yi)) in logits.iter().zip(y).enumerate() {
            dz[[i, 0]] = (sigmoid_clamped(z) - yi as f64) * scale;
        }

        let mut grads = want_params.then(|| self.zeros_grad());
        let param_scale = if want_params && want_input {
            1.0 / batch as f64
        } else {
            1.0
        };

        let mut d_current = dz;
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let cache = &caches[l];

            if let Some(g) = grads.as_mut() {
                let mut dw = d_current.t().dot(&cache.input);
                let mut db = d_current.sum_axis(Axis(0));
                if param_scale != 1.0 {
                    dw.mapv_inplace(|v| v * param_scale);
                    db.mapv_inplace(|v| v * param_scale);
                }
                g.layers[l].w = dw;
                g.layers[l].b = db;
            }

            let needs_more = l > 0 || want_input;
            if !needs_more {
                break;
            }
            let mut da = d_current.dot(&layer.w);

            if l > 0 {
                let prev = &self.layers[l - 1];
                let prev_cache = &caches[l - 1];
                let pre_act = prev_cache.pre_act.as_ref().expect("hidden cache");
                // Through the activation.
                ndarray::Zip::from(&mut da).and(pre_act).for_each(|d, &h| {
                    *d *= self.arch.activation.derivative(h);
                });
                // Through layer norm, if present.
                if let Some(ln) = &prev.ln {
                    let xhat = prev_cache.ln_xhat.as_ref().expect("ln cache");
                    let inv = prev_cache.ln_inv.as_ref().expect("ln cache");
                    let (dz_prev, dgain, dbias) = layer_norm_backward(&da, xhat, inv, ln);
                    if let Some(g) = grads.as_mut() {
                        let gl = g.layers[l - 1].ln.as_mut().expect("grad ln slot");
                        gl.gain = dgain.mapv(|v| v * param_scale);
                        gl.bias = dbias.mapv(|v| v * param_scale);
                    }
                    da = dz_prev;
                }
            }
            d_current = da;
        }

        let input_grads = want_input.then_some(d_current);
        if let Some(g) = &grads {
            if !values(&g.layers).all(|v| v.is_finite()) {
                return Err(Error::numeric("non-finite parameter gradient"));
            }
        }
        if let Some(dx) = &input_grads {
            if !dx.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric("non-finite input gradient"));
            }
        }
        Ok((grads, input_grads, mean_loss))
    }
}

struct LayerCache {
    input: Array2<f64>,
    ln_xhat: Option<Array2<f64>>,
    ln_inv: Option<Array1<f64>>,
    pre_act: Option<Array2<f64>>,
}

/// In-place layer norm over each row; returns (xhat, inv_std) for backprop.
fn layer_norm_forward(z: &mut Array2<f64>, ln: &LnParams) -> (Array2<f64>, Array1<f64>) {
    let m = z.ncols() as f64;
    let mut xhat = Array2::zeros(z.raw_dim());
    let mut inv_std = Array1::zeros(z.nrows());
    for (i, mut row) in z.axis_iter_mut(Axis(0)).enumerate() {
        let mean = row.iter().sum::<f64>() / m;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / m;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = inv;
        for (j, v) in row.iter_mut().enumerate() {
            let h = (*v - mean) * inv;
            xhat[[i, j]] = h;
            *v = ln.gain[j] * h + ln.bias[j];
        }
    }
    (xhat, inv_std)
}

/// Layer-norm backward; returns (dz, dgain, dbias) with dgain/dbias summed
/// over the batch.
fn layer_norm_backward(
    dout: &Array2<f64>,
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    ln: &LnParams,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (n, m) = dout.dim();
    let mf = m as f64;
    let mut dz = Array2::zeros((n, m));
    let mut dgain = Array1::zeros(m);
    let mut dbias = Array1::zeros(m);
    for i in 0..n {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..m {
            let d = dout[[i, j]];
            dgain[j] += d * xhat[[i, j]];
            dbias[j] += d;
            let dxh = d * ln.gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[[i, j]];
        }
        mean_dxhat /= mf;
        mean_dxhat_xhat /= mf;
        for j in 0..m {
            let dxh = dout[[i, j]] * ln.gain[j];
            dz[[i, j]] = inv_std[i] * (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    (dz, dgain, dbias)
}

/// Fan-in-scaled random initialization: weights N(0, 1/fan_in), biases zero,
/// layer-norm gains one. Deterministic in the seed.
pub fn init_params(arch: &Architecture, seed: u64, id: usize) -> Result<ParamParticle> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(arch.n_layers());
    for l in 0..arch.n_layers() {
        let (d_in, d_out) = (arch.layer_widths[l], arch.layer_widths[l + 1]);
        let std = (1.0 / d_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = Array2::from_shape_fn((d_out, d_in), |_| normal.sample(&mut rng));
        let ln = (l < arch.n_hidden() && arch.layer_norm[l]).then(|| LnParams {
            gain: Array1::ones(d_out),
            bias: Array1::zeros(d_out),
        });
        layers.push(LayerParams {
            w,
            b: Array1::zeros(d_out),
            ln,
        });
    }
    Ok(ParamParticle {
        id,
        arch: arch.clone(),
        layers,
    })
}

/// Numerically stable sigmoid clamped into `[KAPPA, 1-KAPPA]`.
pub fn sigmoid_clamped(z: f64) -> f64 {
    let p = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    p.clamp(KAPPA, 1.0 - KAPPA)
}

/// Binary cross-entropy on the clamped sigmoid probability.
pub fn bce_loss(logit: f64, y: u8) -> f64 {
    let p = sigmoid_clamped(logit);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_arch(ln: bool) -> Architecture {
        Architecture::uniform(vec![2, 2, 1], Activation::Elu, ln).unwrap()
    }

    /// Straightforward per-sample re-implementation of the forward formula.
    fn naive_forward(p: &ParamParticle, x: &[f64]) -> f64 {
        let mut a: Vec<f64> = x.to_vec();
        let n_layers = p.arch.n_layers();
        for (l, layer) in p.layers.iter().enumerate() {
            let d_out = layer.b.len();
            let mut z = vec![0.0; d_out];
            for o in 0..d_out {
                let mut s = layer.b[o];
                for (i, &ai) in a.iter().enumerate() {
                    s += layer.w[[o, i]] * ai;
                }
                z[o] = s;
            }
            if l == n_layers - 1 {
                return z[0];
            }
            if let Some(ln) = &layer.ln {
                let m = z.len() as f64;
                let mean = z.iter().sum::<f64>() / m;
                let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                let inv = 1.0 / (var + LN_EPS).sqrt();
                for (j, v) in z.iter_mut().enumerate() {
                    *v = ln.gain[j] * ((*v - mean) * inv) + ln.bias[j];
                }
            }
            a = z
                .iter()
                .map(|&v| p.arch.activation.apply(v))
                .collect();
        }
        unreachable!()
    }

    #[test]
    fn zero_network_outputs_zero_logit() {
        let p = ParamParticle::zeros(&small_arch(false), 0);
        let logit = p.forward(array![0.3, -0.7].view()).unwrap();
        assert_eq!(logit, 0.0);
    }

    #[test]
    fn single_linear_layer_arithmetic() {
        let arch = Architecture::new(vec![2, 1], Activation::Elu, vec![]).unwrap();
        let mut p = ParamParticle::zeros(&arch, 0);
        p.layers[0].w = array![[1.0, -1.0]];
        p.layers[0].b = array![0.5];
        let logit = p.forward(array![2.0, 1.0].view()).unwrap();
        assert!((logit - 1.5).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        for (seed, ln) in [(1u64, true), (2, false), (3, true)] {
            let arch =
                Architecture::uniform(vec![4, 5, 3, 1], Activation::Elu, ln).unwrap();
            let p = init_params(&arch, seed, 0).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..10 {
                let x: Vec<f64> = (0..4).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
                let batched = p.forward(ArrayView1::from(&x)).unwrap();
                let naive = naive_forward(&p, &x);
                assert!(
                    (batched - naive).abs() <= 1e-12,
                    "forward mismatch: {batched} vs {naive}"
                );
            }
        }
    }

    #[test]
    fn forward_is_deterministic_bitwise() {
        let arch = Architecture::default_for(8);
        let p = init_params(&arch, 9, 0).unwrap();
        let x = Array1::linspace(0.0, 1.0, 8);
        let a = p.forward(x.view()).unwrap();
        let b = p.forward(x.view()).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn init_is_deterministic_and_biases_zero() {
        let arch = small_arch(true);
        let a = init_params(&arch, 42, 0).unwrap();
        let b = init_params(&arch, 42, 0).unwrap();
        assert_eq!(a, b);
        for layer in &a.layers {
            assert!(layer.b.iter().all(|&v| v == 0.0));
            if let Some(ln) = &layer.ln {
                assert!(ln.gain.iter().all(|&v| v == 1.0));
                assert!(ln.bias.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_weight_variance_tracks_fan_in() {
        let arch = Architecture::new(vec![1000, 1000, 1], Activation::Elu, vec![false]).unwrap();
        let p = init_params(&arch, 7, 0).unwrap();
        let w = &p.layers[0].w;
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let var = w.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expected = 1.0 / 1000.0;
        assert!(
            (var - expected).abs() / expected < 0.3,
            "variance {var} too far from {expected}"
        );
    }

    #[test]
    fn predict_prob_closed_forms() {
        let arch = Architecture::new(vec![1, 1], Activation::Elu, vec![]).unwrap();
        let mut p = ParamParticle::zeros(&arch, 0);
        p.layers[0].w = array![[1.0]];
        assert_eq!(p.predict_prob(array![0.0].view()).unwrap(), 0.5);
        assert_eq!(p.predict_prob(array![1e6].view()).unwrap(), 1.0 - KAPPA);
        let p_ln3 = p.predict_prob(array![3.0f64.ln()].view()).unwrap();
        assert!((p_ln3 - 0.75).abs() < 1e-12);
    }

    #[test]
    fn bce_closed_forms() {
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_loss(0.0, 1) - ln2).abs() < 1e-12);
        assert!((bce_loss(0.0, 0) - ln2).abs() < 1e-12);
        let near_zero = bce_loss(1e6, 1);
        assert!(near_zero >= 0.0 && near_zero <= 2e-12);
    }

    #[test]
    fn sigmoid_stays_clamped() {
        for z in [-1e9, -50.0, 0.0, 50.0, 1e9] {
            let p = sigmoid_clamped(z);
            assert!((KAPPA..=1.0 - KAPPA).contains(&p));
        }
    }

    /// Central finite differences over every parameter of a particle.
    fn fd_param_grads(p: &ParamParticle, x: ArrayView2<'_, f64>, y: &[u8], h: f64) -> Vec<f64> {
        let n = p.n_params();
        let mut out = Vec::with_capacity(n);
        for k in 0..n {
            let mut plus = p.clone();
            *values_mut(&mut plus.layers).nth(k).unwrap() += h;
            let mut minus = p.clone();
            *values_mut(&mut minus.layers).nth(k).unwrap() -= h;
            let lp = cmean(
                plus.forward_batch(x)
                    .unwrap()
                    .iter()
                    .zip(y)
                    .map(|(&z, &yi)| bce_loss(z, yi)),
            );
            let lm = cmean(
                minus
                    .forward_batch(x)
                    .unwrap()
                    .iter()
                    .zip(y)
                    .map(|(&z, &yi)| bce_loss(z, yi)),
            );
            out.push((lp - lm) / (2.0 * h));
        }
        out
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn param_gradients_match_finite_differences() {
        // Width >= 4 keeps the layer-norm variance away from the degenerate
        // regime where finite differences themselves lose accuracy.
        for (seed, ln) in [(11u64, false), (12, true)] {
            let arch = Architecture::uniform(vec![2, 4, 1], Activation::Elu, ln).unwrap();
            let p = init_params(&arch, seed, 0).unwrap();
            let x = array![[0.3, 0.9], [0.7, 0.1], [0.5, 0.4]];
            let y = [1u8, 0, 1];
            let (grads, _) = p.backward(x.view(), &y).unwrap();
            let analytic: Vec<f64> = values(&grads.layers).collect();
            let fd = fd_param_grads(&p, x.view(), &y, 1e-4);
            for (k, (a, f)) in analytic.iter().zip(&fd).enumerate() {
                assert!(
                    rel_err(*a, *f) <= 1e-4,
                    "param {k}: analytic {a} vs fd {f} (ln={ln})"
                );
            }
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let arch = Architecture::uniform(vec![3, 4, 1], Activation::Elu, true).unwrap();
        let p = init_params(&arch, 21, 0).unwrap();
        let x = array![0.25, 0.5, 0.75];
        let y = 1u8;
        let g = p.grad_input(x.view(), y).unwrap();
        let h = 1e-4;
        for j in 0..3 {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fd = (bce_loss(p.forward(xp.view()).unwrap(), y)
                - bce_loss(p.forward(xm.view()).unwrap(), y))
                / (2.0 * h);
            assert!(rel_err(g[j], fd) <= 1e-4, "input {j}: {} vs {fd}", g[j]);
        }
    }

    #[test]
    fn linear_model_input_gradient_closed_form() {
        let arch = Architecture::new(vec![3, 1], Activation::Elu, vec![]).unwrap();
        let mut p = ParamParticle::zeros(&arch, 0);
        p.layers[0].w = array![[0.8, -0.4, 0.2]];
        let x = array![0.1, 0.6, 0.3];
        let logit = p.forward(x.view()).unwrap();
        let prob = sigmoid_clamped(logit);
        let g = p.grad_input(x.view(), 1).unwrap();
        // For y=1: dL/dx = -(1-p) * w.
        for j in 0..3 {
            let expected = -(1.0 - prob) * p.layers[0].w[[0, j]];
            assert!((g[j] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn input_gradient_negates_when_label_flips_at_half() {
        let arch = Architecture::new(vec![2, 1], Activation::Elu, vec![]).unwrap();
        let mut p = ParamParticle::zeros(&arch, 0);
        p.layers[0].w = array![[1.0, -1.0]];
        let x = array![1.0, 1.0]; // logit 0 -> p = 0.5
        let g1 = p.grad_input(x.view(), 1).unwrap();
        let g0 = p.grad_input(x.view(), 0).unwrap();
        for j in 0..2 {
            assert_eq!(g1[j].to_bits(), (-g0[j]).to_bits());
        }
    }

    #[test]
    fn stationary_point_has_zero_final_bias_gradient() {
        let p = ParamParticle::zeros(&small_arch(false), 0);
        let x = array![[0.4, -0.2], [-0.4, 0.2]];
        let y = [1u8, 0];
        let (grads, _) = p.backward(x.view(), &y).unwrap();
        let final_bias = &grads.layers.last().unwrap().b;
        assert_eq!(final_bias[0], 0.0);
    }

    #[test]
    fn duplicated_batch_keeps_mean_gradient() {
        let arch = Architecture::uniform(vec![3, 4, 1], Activation::Elu, true).unwrap();
        let p = init_params(&arch, 33, 0).unwrap();
        let x = array![[0.2, 0.4, 0.6], [0.9, 0.1, 0.5]];
        let y = [1u8, 0];
        let x2 = ndarray::concatenate![Axis(0), x, x];
        let y2 = [1u8, 0, 1, 0];
        let (g1, l1) = p.backward(x.view(), &y).unwrap();
        let (g2, l2) = p.backward(x2.view(), &y2).unwrap();
        assert!((l1 - l2).abs() < 1e-12);
        for (a, b) in values(&g1.layers).zip(values(&g2.layers)) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let p = ParamParticle::zeros(&small_arch(false), 0);
        assert!(matches!(
            p.forward(array![1.0, 2.0, 3.0].view()),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn relu_gradients_away_from_kink() {
        let arch = Architecture::uniform(vec![2, 3, 1], Activation::Relu, false).unwrap();
        let p = init_params(&arch, 44, 0).unwrap();
        let x = array![[0.8, 0.6]];
        let y = [1u8];
        let (grads, _) = p.backward(x.view(), &y).unwrap();
        let analytic: Vec<f64> = values(&grads.layers).collect();
        let fd = fd_param_grads(&p, x.view(), &y, 1e-5);
        for (a, f) in analytic.iter().zip(&fd) {
            assert!(rel_err(*a, *f) <= 1e-3, "{a} vs {f}");
        }
    }
}
