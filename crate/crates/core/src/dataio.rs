//! Labeled feature-vector datasets: ingestion, synthesis, normalization,
//! splitting.
//!
//! Feature matrices are held as `f64` in memory but carried as 32-bit floats
//! on disk, so everything this module produces is quantized to the f32 grid;
//! save/load round-trips are then bit-exact in both formats.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::util::quantize_f32;
use crate::{Error, Result};

/// Magic bytes of the binary dataset format.
pub const DATASET_MAGIC: &[u8; 4] = b"MB01";
/// Binary dataset format version.
pub const DATASET_VERSION: u32 = 1;

/// A fixed-width real-valued dataset with binary labels (1 = malware).
///
/// Immutable after construction; cheap to share across readers.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<u8>,
    name: String,
}

impl Dataset {
    /// Build a dataset, validating the label/shape invariants.
    pub fn new(features: Array2<f64>, labels: Vec<u8>, name: impl Into<String>) -> Result<Self> {
        if features.ncols() == 0 {
            return Err(Error::value("feature_dim must be positive"));
        }
        if features.nrows() != labels.len() {
            return Err(Error::dimension(format!(
                "feature rows ({}) != label count ({})",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::value(format!("label {bad} outside {{0,1}}")));
        }
        Ok(Self {
            features,
            labels,
            name: name.into(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Name tag; metadata only, not persisted and excluded from comparisons.
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn malware_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == 1).count()
    }

    /// New dataset from the given row indices, in the given order.
    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        let mut features = Array2::zeros((indices.len(), self.feature_dim()));
        let mut labels = Vec::with_capacity(indices.len());
        for (out, &idx) in indices.iter().enumerate() {
            if idx >= self.n_samples() {
                return Err(Error::value(format!("row index {idx} out of range")));
            }
            features.row_mut(out).assign(&self.features.row(idx));
            labels.push(self.labels[idx]);
        }
        Dataset::new(features, labels, name)
    }

    /// Contiguous row range as a new dataset.
    pub fn slice_rows(&self, start: usize, end: usize, name: impl Into<String>) -> Result<Self> {
        if start > end || end > self.n_samples() {
            return Err(Error::value(format!(
                "invalid row range {start}..{end} for {} samples",
                self.n_samples()
            )));
        }
        let features = self.features.slice(ndarray::s![start..end, ..]).to_owned();
        let labels = self.labels[start..end].to_vec();
        Dataset::new(features, labels, name)
    }

    /// Same features and labels; the name tag is ignored.
    pub fn content_eq(&self, other: &Dataset) -> bool {
        self.labels == other.labels
            && self.features.dim() == other.features.dim()
            && self
                .features
                .iter()
                .zip(other.features.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Per-feature min/max fitted on training data, reused on evaluation data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl NormStats {
    /// Stats that make [`apply_normalize`] the identity on `[0,1]` data.
    pub fn identity(dim: usize) -> Self {
        Self {
            min: vec![0.0; dim],
            max: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    fn validate(&self) -> Result<()> {
        if self.min.len() != self.max.len() {
            return Err(Error::dimension("norm stats min/max length mismatch"));
        }
        for (j, (lo, hi)) in self.min.iter().zip(&self.max).enumerate() {
            if lo > hi {
                return Err(Error::value(format!("norm stats min > max at feature {j}")));
            }
        }
        Ok(())
    }
}

/// Configuration for the synthetic two-class generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_features: usize,
    /// Gap between the class-conditional means of informative features.
    pub class_separation: f64,
    /// Probability that any given entry is exactly zero.
    pub sparsity: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            n_features: 64,
            class_separation: 1.0,
            sparsity: 0.3,
            seed: 0,
        }
    }
}

/// On-disk dataset encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileFormat {
    Csv,
    Bin,
}

impl std::str::FromStr for FileFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(FileFormat::Csv),
            "bin" => Ok(FileFormat::Bin),
            other => Err(Error::value(format!("unknown dataset format '{other}'"))),
        }
    }
}

/// Load a dataset from `path` in the declared format.
pub fn load_dataset(path: impl AsRef<Path>, format: FileFormat) -> Result<Dataset> {
    let path = path.as_ref();
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".to_string());
    match format {
        FileFormat::Csv => load_csv(path, name),
        FileFormat::Bin => load_bin(path, name),
    }
}

/// Save a dataset to `path`. Features are written at f32 precision.
pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>, format: FileFormat) -> Result<()> {
    match format {
        FileFormat::Csv => save_csv(d, path.as_ref()),
        FileFormat::Bin => save_bin(d, path.as_ref()),
    }
}

fn load_csv(path: &Path, name: String) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty CSV file"))??;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    if cols.len() < 2 || cols[cols.len() - 1] != "label" {
        return Err(Error::format(
            "CSV header must contain feature columns followed by a final 'label' column",
        ));
    }
    let n_features = cols.len() - 1;

    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != n_features + 1 {
            return Err(Error::dimension(format!(
                "row {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                n_features + 1
            )));
        }
        for f in &fields[..n_features] {
            // Features carry f32 precision in both on-disk formats.
            let v: f32 = f
                .parse()
                .map_err(|_| Error::format(format!("bad float '{f}' on row {}", lineno + 2)))?;
            rows.push(v as f64);
        }
        let label_raw: f64 = fields[n_features].parse().map_err(|_| {
            Error::format(format!(
                "bad label '{}' on row {}",
                fields[n_features],
                lineno + 2
            ))
        })?;
        if label_raw == 0.0 {
            labels.push(0);
        } else if label_raw == 1.0 {
            labels.push(1);
        } else {
            return Err(Error::value(format!(
                "label {label_raw} outside {{0,1}} on row {}",
                lineno + 2
            )));
        }
    }
    let n_samples = labels.len();
    let features = Array2::from_shape_vec((n_samples, n_features), rows)
        .map_err(|e| Error::format(format!("shape error: {e}")))?;
    Dataset::new(features, labels, name)
}

fn save_csv(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let mut header = String::new();
    for j in 0..d.feature_dim() {
        header.push_str(&format!("f{j},"));
    }
    header.push_str("label\n");
    w.write_all(header.as_bytes())?;
    for i in 0..d.n_samples() {
        let mut line = String::new();
        for v in d.features.row(i) {
            // Shortest round-trip f32 formatting keeps reload bit-exact.
            line.push_str(&format!("{},", *v as f32));
        }
        line.push_str(&format!("{}\n", d.labels[i]));
        w.write_all(line.as_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn load_bin(path: &Path, name: String) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::format(format!(
            "bad magic {magic:02x?}, expected {DATASET_MAGIC:02x?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != DATASET_VERSION {
        return Err(Error::format(format!(
            "unsupported dataset version {version}"
        )));
    }
    let n_samples = read_u64(&mut r)? as usize;
    let n_features = read_u32(&mut r)? as usize;
    if n_features == 0 {
        return Err(Error::format("n_features must be positive"));
    }

    let mut labels = vec![0u8; n_samples];
    r.read_exact(&mut labels)?;
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::value(format!("label byte {bad} outside {{0,1}}")));
    }

    let mut raw = vec![0u8; n_samples * n_features * 4];
    r.read_exact(&mut raw)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after feature data"));
    }
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let features = Array2::from_shape_vec((n_samples, n_features), values)
        .map_err(|e| Error::format(format!("shape error: {e}")))?;
    Dataset::new(features, labels, name)
}

fn save_bin(d: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_all(&DATASET_VERSION.to_le_bytes())?;
    w.write_all(&(d.n_samples() as u64).to_le_bytes())?;
    w.write_all(&(d.feature_dim() as u32).to_le_bytes())?;
    w.write_all(&d.labels)?;
    for v in d.features.iter() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
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

/// Generate a two-class mixture with sparse non-negative features.
///
/// Each class draws from exponential distributions whose means differ by
/// `class_separation` on half of the features (alternating direction), so a
/// separation of zero makes the classes indistinguishable. Labels are
/// balanced to within one sample and the row order is shuffled by `seed`.
pub fn synth_gen(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_samples == 0 || cfg.n_features == 0 {
        return Err(Error::value("n_samples and n_features must be positive"));
    }
    if !(0.0..=1.0).contains(&cfg.sparsity) {
        return Err(Error::value("sparsity must be in [0,1]"));
    }
    if cfg.class_separation < 0.0 {
        return Err(Error::value("class_separation must be non-negative"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    // Benign base mean per feature; the malware mean shifts by the
    // separation, alternating direction so neither class dominates.
    let base: Vec<f64> = (0..cfg.n_features)
        .map(|_| 0.5 + rng.random::<f64>())
        .collect();
    let informative: Vec<bool> = (0..cfg.n_features).map(|_| rng.random::<f64>() < 0.5).collect();

    let n_pos = cfg.n_samples / 2;
    let mut order: Vec<u8> = (0..cfg.n_samples)
        .map(|i| u8::from(i < n_pos))
        .collect();
    order.shuffle(&mut rng);

    let mut features = Array2::zeros((cfg.n_samples, cfg.n_features));
    for (i, &label) in order.iter().enumerate() {
        for j in 0..cfg.n_features {
            let v = if rng.random::<f64>() < cfg.sparsity {
                0.0
            } else {
                let dir = if j % 2 == 0 { 1.0 } else { -1.0 };
                let shift = if informative[j] && label == 1 {
                    dir * cfg.class_separation
                } else {
                    0.0
                };
                let mean = (base[j] + shift).max(0.05);
                // Exponential with the class-conditional mean.
                -mean * (1.0 - rng.random::<f64>()).ln()
            };
            features[[i, j]] = quantize_f32(v);
        }
    }
    Dataset::new(features, order, format!("synth-{}", cfg.seed))
}

/// Fit per-feature min/max on `d` and scale it into `[0,1]`.
///
/// Constant features map to zero. Returns the stats for reuse on test data.
pub fn fit_normalize(d: &Dataset) -> Result<(Dataset, NormStats)> {
    if d.n_samples() == 0 {
        return Err(Error::value("cannot fit normalization on an empty dataset"));
    }
    let mut min = vec![f64::INFINITY; d.feature_dim()];
    let mut max = vec![f64::NEG_INFINITY; d.feature_dim()];
    for row in d.features.rows() {
        for (j, &v) in row.iter().enumerate() {
            min[j] = min[j].min(v);
            max[j] = max[j].max(v);
        }
    }
    let stats = NormStats { min, max };
    let normalized = apply_normalize(d, &stats)?;
    Ok((normalized, stats))
}

/// Min-max scale `d` by `s`, clamping into `[0,1]`.
///
/// Values outside the fitted range clamp rather than extrapolate, and
/// constant features map to zero.
pub fn apply_normalize(d: &Dataset, s: &NormStats) -> Result<Dataset> {
    s.validate()?;
    if s.dim() != d.feature_dim() {
        return Err(Error::dimension(format!(
            "norm stats dim {} != feature dim {}",
            s.dim(),
            d.feature_dim()
        )));
    }
    let mut features = d.features.clone();
    for mut row in features.axis_iter_mut(Axis(0)) {
        for (j, v) in row.iter_mut().enumerate() {
            let range = s.max[j] - s.min[j];
            let scaled = if range > 0.0 {
                ((*v - s.min[j]) / range).clamp(0.0, 1.0)
            } else {
                0.0
            };
            *v = quantize_f32(scaled);
        }
    }
    Dataset::new(features, d.labels.clone(), d.name.clone())
}

/// Deterministic, label-stratified partition into train/val/test.
pub fn split(
    d: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (tr, va, te) = fractions;
    if tr <= 0.0 || va <= 0.0 || te <= 0.0 {
        return Err(Error::value("split fractions must be positive"));
    }
    if (tr + va + te - 1.0).abs() > 1e-9 {
        return Err(Error::value(format!(
            "split fractions sum to {}, expected 1",
            tr + va + te
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_split: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in [0u8, 1u8] {
        let mut idx: Vec<usize> = (0..d.n_samples())
            .filter(|&i| d.labels[i] == class)
            .collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        // Cumulative rounding so the class partitions exactly.
        let c1 = (tr * n as f64).round() as usize;
        let c2 = ((tr + va) * n as f64).round() as usize;
        let (c1, c2) = (c1.min(n), c2.clamp(c1.min(n), n));
        per_split[0].extend_from_slice(&idx[..c1]);
        per_split[1].extend_from_slice(&idx[c1..c2]);
        per_split[2].extend_from_slice(&idx[c2..]);
    }
    for part in per_split.iter_mut() {
        part.shuffle(&mut rng);
    }
    Ok((
        d.subset(&per_split[0], format!("{}-train", d.name))?,
        d.subset(&per_split[1], format!("{}-val", d.name))?,
        d.subset(&per_split[2], format!("{}-test", d.name))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> Dataset {
        Dataset::new(
            array![[0.1, 0.2], [0.3, 0.4]],
            vec![1, 0],
            "tiny",
        )
        .unwrap()
    }

    #[test]
    fn csv_parse_basic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "f0,f1,label\n0.1,0.2,1\n0.3,0.4,0\n").unwrap();
        let d = load_dataset(&path, FileFormat::Csv).unwrap();
        assert_eq!(d.n_samples(), 2);
        assert_eq!(d.feature_dim(), 2);
        assert_eq!(d.labels(), &[1, 0]);
        assert_eq!(d.features()[[0, 0]], 0.1f32 as f64);
    }

    #[test]
    fn csv_header_without_label_column_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "f0,f1\n0.1,0.2\n").unwrap();
        match load_dataset(&path, FileFormat::Csv) {
            Err(Error::Format(_)) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn csv_bad_label_is_value_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "f0,label\n0.1,2\n").unwrap();
        assert!(matches!(
            load_dataset(&path, FileFormat::Csv),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn bin_bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load_dataset(&path, FileFormat::Bin),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn row_width_mismatch_is_dimension_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, "f0,f1,label\n0.1,1\n").unwrap();
        assert!(matches!(
            load_dataset(&path, FileFormat::Csv),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn round_trip_both_formats() {
        let d = synth_gen(&SynthConfig {
            n_samples: 57,
            n_features: 5,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        for fmt in [FileFormat::Csv, FileFormat::Bin] {
            let path = dir.path().join("d.out");
            save_dataset(&d, &path, fmt).unwrap();
            let back = load_dataset(&path, fmt).unwrap();
            assert!(d.content_eq(&back), "round trip failed for {fmt:?}");
        }
    }

    #[test]
    fn normalized_dataset_round_trips() {
        let d = synth_gen(&SynthConfig {
            n_samples: 40,
            n_features: 3,
            ..Default::default()
        })
        .unwrap();
        let (norm, _) = fit_normalize(&d).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("n.bin");
        save_dataset(&norm, &path, FileFormat::Bin).unwrap();
        assert!(norm.content_eq(&load_dataset(&path, FileFormat::Bin).unwrap()));
    }

    #[test]
    fn empty_dataset_saves_and_loads() {
        let d = Dataset::new(Array2::zeros((0, 3)), vec![], "empty").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        save_dataset(&d, &path, FileFormat::Bin).unwrap();
        let back = load_dataset(&path, FileFormat::Bin).unwrap();
        assert_eq!(back.n_samples(), 0);
        assert_eq!(back.feature_dim(), 3);
    }

    #[test]
    fn bin_file_length_matches_format_spec() {
        let d = Dataset::new(array![[0.5]], vec![1], "one").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        save_dataset(&d, &path, FileFormat::Bin).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        // magic(4) + version(4) + n_samples(8) + n_features(4) + 1 label + 4 feature bytes
        assert_eq!(len, 4 + 4 + 8 + 4 + 1 + 4);
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let cfg = SynthConfig {
            n_samples: 1000,
            n_features: 8,
            ..Default::default()
        };
        let a = synth_gen(&cfg).unwrap();
        let b = synth_gen(&cfg).unwrap();
        assert!(a.content_eq(&b));
        let pos = a.malware_count();
        assert!((499..=501).contains(&pos), "unbalanced: {pos}");
    }

    #[test]
    fn synth_zero_config_is_value_error() {
        assert!(matches!(
            synth_gen(&SynthConfig {
                n_samples: 0,
                ..Default::default()
            }),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn normalize_column_arithmetic() {
        let d = Dataset::new(array![[2.0], [4.0], [6.0]], vec![0, 1, 0], "t").unwrap();
        let (n, s) = fit_normalize(&d).unwrap();
        assert_eq!(n.features().column(0).to_vec(), vec![0.0, 0.5, 1.0]);
        assert_eq!(s.min, vec![2.0]);
        assert_eq!(s.max, vec![6.0]);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let d = Dataset::new(array![[5.0], [5.0]], vec![0, 1], "t").unwrap();
        let (n, _) = fit_normalize(&d).unwrap();
        assert_eq!(n.features().column(0).to_vec(), vec![0.0, 0.0]);

        let s = NormStats {
            min: vec![1.0],
            max: vec![1.0],
        };
        let a = apply_normalize(&d, &s).unwrap();
        assert_eq!(a.features().column(0).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn apply_clamps_out_of_range_values() {
        let train = Dataset::new(array![[0.0], [10.0]], vec![0, 1], "t").unwrap();
        let (_, stats) = fit_normalize(&train).unwrap();
        let test = Dataset::new(array![[20.0], [-5.0]], vec![1, 0], "t2").unwrap();
        let a = apply_normalize(&test, &stats).unwrap();
        assert_eq!(a.features().column(0).to_vec(), vec![1.0, 0.0]);
    }

    #[test]
    fn identity_stats_are_identity_on_unit_range() {
        let d = synth_gen(&SynthConfig {
            n_samples: 30,
            n_features: 4,
            ..Default::default()
        })
        .unwrap();
        let (norm, _) = fit_normalize(&d).unwrap();
        let again = apply_normalize(&norm, &NormStats::identity(4)).unwrap();
        assert!(norm.content_eq(&again));
    }

    #[test]
    fn normalize_dim_mismatch_is_dimension_error() {
        let d = tiny();
        assert!(matches!(
            apply_normalize(&d, &NormStats::identity(5)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn fit_normalize_empty_is_value_error() {
        let d = Dataset::new(Array2::zeros((0, 2)), vec![], "e").unwrap();
        assert!(matches!(fit_normalize(&d), Err(Error::Value(_))));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let d = synth_gen(&SynthConfig {
            n_samples: 1000,
            n_features: 4,
            ..Default::default()
        })
        .unwrap();
        let (a, b, c) = split(&d, (0.8, 0.1, 0.1), 7).unwrap();
        assert_eq!(a.n_samples(), 800);
        assert_eq!(b.n_samples(), 100);
        assert_eq!(c.n_samples(), 100);
        let (a2, b2, c2) = split(&d, (0.8, 0.1, 0.1), 7).unwrap();
        assert!(a.content_eq(&a2) && b.content_eq(&b2) && c.content_eq(&c2));
    }

    #[test]
    fn split_is_stratified() {
        let d = synth_gen(&SynthConfig {
            n_samples: 1000,
            n_features: 4,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let global = d.malware_count() as f64 / d.n_samples() as f64;
        let (a, b, c) = split(&d, (0.6, 0.2, 0.2), 11).unwrap();
        for part in [&a, &b, &c] {
            let frac = part.malware_count() as f64 / part.n_samples() as f64;
            assert!(
                (frac - global).abs() <= 0.02,
                "stratification off: {frac} vs {global}"
            );
        }
    }

    #[test]
    fn split_partitions_are_disjoint_and_exhaustive() {
        // Unique feature values identify rows across the partition.
        let n = 200;
        let mut features = Array2::zeros((n, 1));
        for i in 0..n {
            features[[i, 0]] = i as f64;
        }
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let d = Dataset::new(features, labels, "ids").unwrap();
        let (a, b, c) = split(&d, (0.5, 0.25, 0.25), 9).unwrap();
        let mut seen: Vec<i64> = a
            .features()
            .column(0)
            .iter()
            .chain(b.features().column(0).iter())
            .chain(c.features().column(0).iter())
            .map(|&v| v as i64)
            .collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..n as i64).collect::<Vec<_>>());
    }

    #[test]
    fn split_invalid_fractions_is_value_error() {
        let d = tiny();
        assert!(matches!(
            split(&d, (0.5, 0.2, 0.2), 0),
            Err(Error::Value(_))
        ));
    }

    #[test]
    fn zero_separation_probe_auc_is_chance() {
        // Train a tiny linear probe; with no separation AUC should hover at 0.5.
        let cfg = SynthConfig {
            n_samples: 4000,
            n_features: 16,
            class_separation: 0.0,
            sparsity: 0.3,
            seed: 5,
        };
        let d = synth_gen(&cfg).unwrap();
        let (norm, _) = fit_normalize(&d).unwrap();
        let (train, _, test) = split(&norm, (0.6, 0.2, 0.2), 1).unwrap();

        // Logistic regression by gradient descent on the mean BCE.
        let x = train.features();
        let y = train.labels();
        let mut w = vec![0.0f64; train.feature_dim()];
        let mut b = 0.0f64;
        for _ in 0..200 {
            let mut gw = vec![0.0f64; w.len()];
            let mut gb = 0.0f64;
            for i in 0..train.n_samples() {
                let z: f64 = x.row(i).iter().zip(&w).map(|(xi, wi)| xi * wi).sum::<f64>() + b;
                let p = 1.0 / (1.0 + (-z).exp());
                let err = p - y[i] as f64;
                for (g, xi) in gw.iter_mut().zip(x.row(i)) {
                    *g += err * xi;
                }
                gb += err;
            }
            let n = train.n_samples() as f64;
            for (wi, g) in w.iter_mut().zip(&gw) {
                *wi -= 0.5 * g / n;
            }
            b -= 0.5 * gb / n;
        }

        let scores: Vec<f64> = (0..test.n_samples())
            .map(|i| {
                test.row(i)
                    .iter()
                    .zip(&w)
                    .map(|(xi, wi)| xi * wi)
                    .sum::<f64>()
                    + b
            })
            .collect();
        let curve = crate::eval::roc(&scores, test.labels()).unwrap();
        assert!(
            (curve.auc - 0.5).abs() <= 0.05,
            "probe AUC {} too far from chance",
            curve.auc
        );
    }
}
