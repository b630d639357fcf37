//! A miniature problem space: sectioned byte programs, a deterministic
//! feature map, and functionality-preserving padding transforms.
//!
//! The feature map is a normalized byte histogram plus section-count,
//! log-size, and payload-tag features, all scaled into `[0,1]`. Because the
//! histogram is normalized, appending `n` bytes to an `N`-byte program moves
//! every histogram entry by at most `n / (N + n)`; together with the exact
//! section and size deltas this gives an analytic per-program bound on the
//! feature displacement of a padding transform. The experiment driver uses
//! that bound as the feature-space constraint radius: any problem-space
//! evasion must land inside it, and feature-space adversarial training at
//! that radius transfers to padding robustness.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::dataio::Dataset;
use crate::network::{Activation, Architecture};
use crate::svgd::{posterior_predict, train, Ensemble, Optimizer, TrainConfig};
use crate::{Error, Result};

/// Feature dimension: 256 histogram bins + section count + log size + tag bit.
pub const TOY_FEATURE_DIM: usize = 259;

/// Default cap on total program bytes.
pub const DEFAULT_MAX_PROGRAM_SIZE: usize = 1 << 20;

/// Program file magic.
pub const PROGRAM_MAGIC: &[u8; 4] = b"TPRG";
/// Program file format version.
pub const PROGRAM_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub bytes: Vec<u8>,
}

/// A sectioned byte container. The payload tag stands in for preserved
/// semantics: a transform is functionality-preserving exactly when it leaves
/// the tag untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyProgram {
    sections: Vec<Section>,
    payload_tag: Vec<u8>,
}

impl ToyProgram {
    pub fn new(sections: Vec<Section>, payload_tag: Vec<u8>) -> Result<Self> {
        if sections.is_empty() {
            return Err(Error::value("program needs at least one section"));
        }
        let program = Self {
            sections,
            payload_tag,
        };
        if program.total_size() > DEFAULT_MAX_PROGRAM_SIZE {
            return Err(Error::constraint(format!(
                "program size {} exceeds cap {DEFAULT_MAX_PROGRAM_SIZE}",
                program.total_size()
            )));
        }
        Ok(program)
    }

    pub fn sections(&self) -> &[Section] {
        &self.sections
    }

    pub fn payload_tag(&self) -> &[u8] {
        &self.payload_tag
    }

    pub fn section_count(&self) -> usize {
        self.sections.len()
    }

    pub fn total_size(&self) -> usize {
        self.sections.iter().map(|s| s.bytes.len()).sum()
    }
}

/// Functionality preservation: the payload tag must be byte-identical.
pub fn omega_valid(original: &ToyProgram, transformed: &ToyProgram) -> bool {
    original.payload_tag == transformed.payload_tag
}

/// The deterministic, total feature map.
///
/// Layout: `[0..256)` byte histogram normalized to sum one (all zero for an
/// empty program), `[256]` section count / 32 clamped, `[257]`
/// log2(size)/20 clamped, `[258]` payload-tag presence bit.
pub fn phi(z: &ToyProgram) -> Array1<f64> {
    let mut out = Array1::zeros(TOY_FEATURE_DIM);
    let total = z.total_size();
    if total > 0 {
        let mut counts = [0u64; 256];
        for s in &z.sections {
            for &b in &s.bytes {
                counts[b as usize] += 1;
            }
        }
        for (b, &c) in counts.iter().enumerate() {
            out[b] = c as f64 / total as f64;
        }
    }
    out[256] = (z.section_count() as f64 / 32.0).clamp(0.0, 1.0);
    out[257] = ((total.max(1) as f64).log2() / 20.0).clamp(0.0, 1.0);
    out[258] = f64::from(!z.payload_tag.is_empty());
    out
}

/// Append a new section of `n_bytes` copies of `byte_val`. The payload tag
/// is untouched, so the transform is functionality-preserving by
/// construction.
pub fn pad_attack(z: &ToyProgram, n_bytes: usize, byte_val: u8) -> Result<ToyProgram> {
    if z.total_size() + n_bytes > DEFAULT_MAX_PROGRAM_SIZE {
        return Err(Error::constraint(format!(
            "padding to {} bytes exceeds cap {DEFAULT_MAX_PROGRAM_SIZE}",
            z.total_size() + n_bytes
        )));
    }
    let mut sections = z.sections.clone();
    sections.push(Section {
        name: format!("pad{}", z.section_count()),
        bytes: vec![byte_val; n_bytes],
    });
    Ok(ToyProgram {
        sections,
        payload_tag: z.payload_tag.clone(),
    })
}

/// Analytic bound on the feature displacement of `pad_attack(z, n_bytes, _)`:
/// histogram entries move by at most `n/(N+n)`, and the section-count and
/// log-size deltas are exact functions of the program's current shape.
pub fn pad_displacement_bound(z: &ToyProgram, n_bytes: usize) -> f64 {
    let n = n_bytes as f64;
    let total = z.total_size() as f64;
    let hist_term = if n_bytes == 0 { 0.0 } else { n / (total + n) };

    let count_feat = |c: usize| (c as f64 / 32.0).clamp(0.0, 1.0);
    let count_term = count_feat(z.section_count() + 1) - count_feat(z.section_count());

    let size_feat =
        |t: usize| ((t.max(1) as f64).log2() / 20.0).clamp(0.0, 1.0);
    let size_term = size_feat(z.total_size() + n_bytes) - size_feat(z.total_size());

    hist_term.max(count_term).max(size_term)
}

/// Gradient-free greedy evasion: repeatedly append the `(byte, step)` block
/// that most decreases the posterior malware probability, until evasion
/// (posterior < 0.5) or the byte budget runs out. Ties break toward the
/// lowest byte value.
pub fn greedy_pad_search(
    ensemble: &Ensemble,
    z: &ToyProgram,
    budget: usize,
    step: usize,
    byte_candidates: &[u8],
) -> Result<(ToyProgram, bool)> {
    if step == 0 {
        return Err(Error::value("step must be positive"));
    }
    let mut current = z.clone();
    let mut prob = posterior_predict(ensemble, phi(&current).view())?;
    let mut remaining = budget;

    let mut candidates: Vec<u8> = byte_candidates.to_vec();
    candidates.sort_unstable();
    candidates.dedup();

    while prob >= 0.5 && remaining >= step && !candidates.is_empty() {
        let mut best: Option<(u8, ToyProgram, f64)> = None;
        for &b in &candidates {
            let padded = match pad_attack(&current, step, b) {
                Ok(p) => p,
                Err(Error::Constraint(_)) => continue,
                Err(e) => return Err(e),
            };
            let p = posterior_predict(ensemble, phi(&padded).view())?;
            // Strict improvement over the incumbent keeps the lowest byte
            // on ties (candidates iterate in ascending order).
            if best.as_ref().is_none_or(|(_, _, bp)| p < *bp) {
                best = Some((b, padded, p));
            }
        }
        match best {
            Some((_, padded, p)) => {
                current = padded;
                prob = p;
                remaining -= step;
            }
            None => break,
        }
    }
    Ok((current, prob < 0.5))
}

/// Attack used by the subset check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyAttack {
    Pad { n_bytes: usize, byte_val: u8 },
    Greedy {
        budget: usize,
        step: usize,
        candidates: Vec<u8>,
    },
}

/// Feature-space constraint set for the subset check: an L-infinity ball of
/// radius `eps` intersected with a per-feature perturbation box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsilonSpec {
    pub eps: f64,
    pub delta_lb: f64,
    pub delta_ub: f64,
}

impl UpsilonSpec {
    pub fn ball(eps: f64) -> Self {
        Self {
            eps,
            delta_lb: -1.0,
            delta_ub: 1.0,
        }
    }
}

/// Outcome of a subset check over a set of malware-labeled programs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub n_programs: usize,
    /// Problem-space evasions found (posterior < 0.5 after the transform).
    pub evasions: usize,
    /// Evasions whose feature displacement left the constraint set.
    pub subset_violations: usize,
    /// Transforms that broke functionality preservation (always 0 for pads).
    pub omega_violations: usize,
    pub max_linf: f64,
    pub upsilon_eps: f64,
    pub detection_rate_clean: f64,
    pub detection_rate_attacked: f64,
}

/// For every program: run the transform, and for each Omega-valid evasion
/// verify the feature-space displacement satisfies the constraint set.
pub fn lemma1_check(
    ensemble: &Ensemble,
    programs: &[ToyProgram],
    attack: &ToyAttack,
    upsilon: &UpsilonSpec,
) -> Result<Lemma1Report> {
    if programs.is_empty() {
        return Err(Error::value("no programs to check"));
    }
    let mut evasions = 0usize;
    let mut subset_violations = 0usize;
    let mut omega_violations = 0usize;
    let mut detected_clean = 0usize;
    let mut detected_attacked = 0usize;
    let mut max_linf = 0.0f64;
    let tol = 1e-9;

    for z in programs {
        let x = phi(z);
        if posterior_predict(ensemble, x.view())? >= 0.5 {
            detected_clean += 1;
        }

        let transformed = match attack {
            ToyAttack::Pad { n_bytes, byte_val } => pad_attack(z, *n_bytes, *byte_val)?,
            ToyAttack::Greedy {
                budget,
                step,
                candidates,
            } => greedy_pad_search(ensemble, z, *budget, *step, candidates)?.0,
        };
        if !omega_valid(z, &transformed) {
            omega_violations += 1;
            continue;
        }

        let x_adv = phi(&transformed);
        let p_adv = posterior_predict(ensemble, x_adv.view())?;
        let delta: Vec<f64> = x_adv
            .iter()
            .zip(x.iter())
            .map(|(a, c)| a - c)
            .collect();
        let linf = delta.iter().map(|d| d.abs()).fold(0.0f64, f64::max);
        max_linf = max_linf.max(linf);

        if p_adv >= 0.5 {
            detected_attacked += 1;
        } else {
            evasions += 1;
            let in_ball = linf <= upsilon.eps + tol;
            let in_box = delta
                .iter()
                .all(|&d| d >= upsilon.delta_lb - tol && d <= upsilon.delta_ub + tol);
            if !(in_ball && in_box) {
                subset_violations += 1;
            }
        }
    }

    let n = programs.len();
    Ok(Lemma1Report {
        n_programs: n,
        evasions,
        subset_violations,
        omega_violations,
        max_linf,
        upsilon_eps: upsilon.eps,
        detection_rate_clean: detected_clean as f64 / n as f64,
        detection_rate_attacked: detected_attacked as f64 / n as f64,
    })
}

// Program file format: magic, u32 version, u32 section count, per section
// (u8 name length, name bytes, u64 byte length, bytes), u16 tag length, tag.
// All integers little-endian.

pub fn save_program(z: &ToyProgram, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PROGRAM_MAGIC)?;
    w.write_all(&PROGRAM_VERSION.to_le_bytes())?;
    w.write_all(&(z.section_count() as u32).to_le_bytes())?;
    for s in &z.sections {
        let name = s.name.as_bytes();
        if name.len() > u8::MAX as usize {
            return Err(Error::value(format!("section name '{}' too long", s.name)));
        }
        w.write_all(&[name.len() as u8])?;
        w.write_all(name)?;
        w.write_all(&(s.bytes.len() as u64).to_le_bytes())?;
        w.write_all(&s.bytes)?;
    }
    if z.payload_tag.len() > u16::MAX as usize {
        return Err(Error::value("payload tag too long"));
    }
    w.write_all(&(z.payload_tag.len() as u16).to_le_bytes())?;
    w.write_all(&z.payload_tag)?;
    w.flush()?;
    Ok(())
}

pub fn load_program(path: impl AsRef<Path>) -> Result<ToyProgram> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != PROGRAM_MAGIC {
        return Err(Error::format(format!(
            "bad program magic {magic:02x?}, expected {PROGRAM_MAGIC:02x?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != PROGRAM_VERSION {
        return Err(Error::format(format!(
            "unsupported program version {version}"
        )));
    }
    let n_sections = read_u32(&mut r)? as usize;
    let mut sections = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let mut len = [0u8; 1];
        r.read_exact(&mut len)?;
        let mut name = vec![0u8; len[0] as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("section name is not UTF-8"))?;
        let byte_len = read_u64(&mut r)? as usize;
        let mut bytes = vec![0u8; byte_len];
        r.read_exact(&mut bytes)?;
        sections.push(Section { name, bytes });
    }
    let mut tag_len = [0u8; 2];
    r.read_exact(&mut tag_len)?;
    let mut payload_tag = vec![0u8; u16::from_le_bytes(tag_len) as usize];
    r.read_exact(&mut payload_tag)?;
    ToyProgram::new(sections, payload_tag)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Generator for a labeled toy corpus.
///
/// Malware programs are monolithic (one or two sections) with high-range
/// bytes and essentially no filler; benign programs are heavily sectioned
/// and carry runs of 0xA9 filler among low-range bytes. Both classes share
/// the same size range. Padding a new 0xA9 section therefore moves every
/// discriminative channel toward benign: the filler bin rises, the malware
/// byte profile dilutes, and the section count ticks up, but the count only
/// moves 1/32 per pad while its class gap is far wider, so a model hardened
/// inside the displacement ball keeps separating on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyGenConfig {
    pub n_programs: usize,
    pub seed: u64,
    pub benign_sections: (usize, usize),
    pub malware_sections: (usize, usize),
    pub size_range: (usize, usize),
    /// Per-program filler (0xA9) byte fraction range for benign programs.
    pub benign_filler: (f64, f64),
    pub malware_filler: (f64, f64),
}

impl Default for ToyGenConfig {
    fn default() -> Self {
        Self {
            n_programs: 2000,
            seed: 0,
            benign_sections: (26, 31),
            malware_sections: (1, 2),
            size_range: (3000, 5000),
            benign_filler: (0.10, 0.35),
            malware_filler: (0.0, 0.01),
        }
    }
}

/// Filler byte used by benign programs and the padding attack.
pub const FILLER_BYTE: u8 = 0xA9;

/// Deterministically generate a labeled program corpus, half malware.
pub fn gen_programs(cfg: &ToyGenConfig) -> Result<Vec<(ToyProgram, u8)>> {
    if cfg.n_programs == 0 {
        return Err(Error::value("n_programs must be positive"));
    }
    if cfg.size_range.0 == 0 || cfg.size_range.0 > cfg.size_range.1 {
        return Err(Error::value("invalid size range"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_malware = cfg.n_programs / 2;
    let mut labels: Vec<u8> = (0..cfg.n_programs)
        .map(|i| u8::from(i < n_malware))
        .collect();
    labels.shuffle(&mut rng);

    let mut out = Vec::with_capacity(cfg.n_programs);
    for &label in &labels {
        let (sec_lo, sec_hi) = if label == 1 {
            cfg.malware_sections
        } else {
            cfg.benign_sections
        };
        let (fill_lo, fill_hi) = if label == 1 {
            cfg.malware_filler
        } else {
            cfg.benign_filler
        };
        let n_sections = rng.random_range(sec_lo..=sec_hi).max(1);
        let total = rng.random_range(cfg.size_range.0..=cfg.size_range.1);
        let filler_rate = fill_lo + (fill_hi - fill_lo) * rng.random::<f64>();

        // Split the byte budget across sections.
        let mut sizes = vec![total / n_sections; n_sections];
        sizes[0] += total - sizes.iter().sum::<usize>();

        let sections = sizes
            .iter()
            .enumerate()
            .map(|(i, &len)| {
                let bytes = (0..len)
                    .map(|_| {
                        if rng.random::<f64>() < filler_rate {
                            FILLER_BYTE
                        } else if label == 1 {
                            rng.random_range(0x80..=0xFFu8)
                        } else {
                            rng.random_range(0x20..=0x7Fu8)
                        }
                    })
                    .collect();
                Section {
                    name: format!("s{i}"),
                    bytes,
                }
            })
            .collect();
        let tag: Vec<u8> = (0..8).map(|_| rng.random()).collect();
        out.push((ToyProgram::new(sections, tag)?, label));
    }
    Ok(out)
}

/// Feature dataset from a labeled program set; rows are `phi(z)`.
pub fn programs_to_dataset(programs: &[(ToyProgram, u8)], name: impl Into<String>) -> Result<Dataset> {
    if programs.is_empty() {
        return Err(Error::value("no programs"));
    }
    let mut features = Array2::zeros((programs.len(), TOY_FEATURE_DIM));
    let mut labels = Vec::with_capacity(programs.len());
    for (i, (z, y)) in programs.iter().enumerate() {
        features.row_mut(i).assign(&phi(z));
        labels.push(*y);
    }
    Dataset::new(features, labels, name)
}

/// Padding-attack experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaddingExperimentConfig {
    pub gen: ToyGenConfig,
    pub pad_bytes: usize,
    pub pad_byte: u8,
    /// Fraction of programs held out for the subset check.
    pub eval_fraction: f64,
    pub n_particles: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_seed: u64,
    /// Also train a hardened model at epsilon = the displacement bound.
    pub adv_train: bool,
}

impl Default for PaddingExperimentConfig {
    fn default() -> Self {
        Self {
            gen: ToyGenConfig::default(),
            pad_bytes: 1000,
            pad_byte: FILLER_BYTE,
            eval_fraction: 0.3,
            n_particles: 3,
            gamma: 1.0,
            learning_rate: 1e-3,
            epochs: 8,
            batch_size: 256,
            train_seed: 0,
            adv_train: true,
        }
    }
}

/// Outcome of the padding experiment: the auto-computed constraint radius
/// and subset reports for the clean-trained and (optionally) hardened model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PaddingExperimentReport {
    pub upsilon_eps: f64,
    pub train_epsilon: Option<f64>,
    pub clean: Lemma1Report,
    pub adv: Option<Lemma1Report>,
}

/// Generate a corpus, train on held-in feature vectors, and run the padding
/// subset check on held-out malware programs for the clean model and, when
/// requested, a model hardened at the analytic displacement bound.
pub fn padding_experiment(cfg: &PaddingExperimentConfig) -> Result<PaddingExperimentReport> {
    if !(0.0..1.0).contains(&cfg.eval_fraction) || cfg.eval_fraction == 0.0 {
        return Err(Error::value("eval_fraction must be in (0,1)"));
    }
    let programs = gen_programs(&cfg.gen)?;

    // Deterministic shuffled split that keeps held-out programs paired with
    // their feature rows.
    let mut order: Vec<usize> = (0..programs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.gen.seed ^ 0xD1B5_4A32_D192_ED03);
    order.shuffle(&mut rng);
    let n_eval = ((programs.len() as f64) * cfg.eval_fraction).round() as usize;
    let n_eval = n_eval.clamp(1, programs.len() - 1);
    let (eval_idx, train_idx) = order.split_at(n_eval);

    let train_programs: Vec<(ToyProgram, u8)> =
        train_idx.iter().map(|&i| programs[i].clone()).collect();
    let train_data = programs_to_dataset(&train_programs, "toy-train")?;
    let eval_malware: Vec<ToyProgram> = eval_idx
        .iter()
        .filter(|&&i| programs[i].1 == 1)
        .map(|&i| programs[i].0.clone())
        .collect();
    if eval_malware.is_empty() {
        return Err(Error::value("no held-out malware programs"));
    }

    let upsilon_eps = eval_malware
        .iter()
        .map(|z| pad_displacement_bound(z, cfg.pad_bytes))
        .fold(0.0f64, f64::max);
    let upsilon = UpsilonSpec::ball(upsilon_eps);
    let attack = ToyAttack::Pad {
        n_bytes: cfg.pad_bytes,
        byte_val: cfg.pad_byte,
    };

    let arch = Architecture::uniform(
        vec![TOY_FEATURE_DIM, 64, 32, 1],
        Activation::Elu,
        true,
    )?;
    let base = TrainConfig {
        n_particles: cfg.n_particles,
        gamma: cfg.gamma,
        learning_rate: cfg.learning_rate,
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.train_seed,
        optimizer: Optimizer::Adam,
        ..TrainConfig::new(arch)
    };

    let clean_model = train(&train_data, &train_data, &base)?;
    let clean = lemma1_check(&clean_model, &eval_malware, &attack, &upsilon)?;

    let (train_epsilon, adv) = if cfg.adv_train {
        let adv_cfg = TrainConfig {
            adv: Some(AttackConfig::eot_pgd(upsilon_eps)),
            ..base
        };
        let adv_model = train(&train_data, &train_data, &adv_cfg)?;
        (
            Some(upsilon_eps),
            Some(lemma1_check(&adv_model, &eval_malware, &attack, &upsilon)?),
        )
    } else {
        (None, None)
    };

    Ok(PaddingExperimentReport {
        upsilon_eps,
        train_epsilon,
        clean,
        adv,
    })
}
