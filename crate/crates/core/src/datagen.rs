//! Shifted-domain datasets: Dirichlet label-shift marginals, a synthetic
//! Gaussian task whose target is a rotated and translated copy of the
//! source, and loaders for small digit files in IDX or CSV form.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DataError, Error, Result};
use crate::sampling::symmetric_dirichlet;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Seed offsets so the label-shift draw, the geometry and the sample draw
/// of one run use independent streams.
const MARGINAL_STREAM: u64 = 0x6d61_7267;
const SAMPLE_STREAM: u64 = 0x7361_6d70;
const SPLIT_STREAM: u64 = 0x7370_6c74;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelShiftSpec {
    /// Dirichlet concentration; `None` means a balanced target.
    pub alpha: Option<f64>,
    pub classes: usize,
    pub seed: u64,
}

pub fn uniform(classes: usize) -> Vec<f64> {
    vec![1.0 / classes as f64; classes]
}

pub fn sample_target_marginal(spec: &LabelShiftSpec) -> Result<Vec<f64>> {
    if spec.classes == 0 {
        return Err(DataError::Invalid("label shift needs at least one class".into()).into());
    }
    match spec.alpha {
        None => Ok(uniform(spec.classes)),
        Some(a) if !(a > 0.0) || !a.is_finite() => {
            Err(DataError::Invalid(format!("alpha must be positive, got {a}")).into())
        }
        Some(a) => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ MARGINAL_STREAM);
            symmetric_dirichlet(&mut rng, spec.classes, a)
        }
    }
}

/// Integer counts summing to `n`: floors of `n·w`, with the leftover units
/// going to the largest fractional parts (lower class index on ties).
pub fn largest_remainder_counts(marginal: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = marginal.iter().map(|&w| w * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|&r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..marginal.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &k in order.iter().take(n.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}

/// Raises every class below `floor` to `floor`, taking the units from the
/// currently largest classes, so the total is preserved.
pub fn apply_count_floor(counts: &mut [usize], floor: usize) -> Result<()> {
    let total: usize = counts.iter().sum();
    if floor * counts.len() > total {
        return Err(DataError::Invalid(format!(
            "cannot give {} classes {floor} samples each out of {total}",
            counts.len()
        ))
        .into());
    }
    for k in 0..counts.len() {
        while counts[k] < floor {
            let donor = (0..counts.len())
                .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
                .expect("nonempty");
            counts[donor] -= 1;
            counts[k] += 1;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledArrays {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
}

impl LabeledArrays {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }

    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            x: self.x.select_rows(idx)?,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            classes: self.classes,
        })
    }
}

/// Training-facing data: labeled source, unlabeled target.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct TrainingView<'a> {
    pub source_x: &'a Tensor,
    pub source_y: &'a [usize],
    pub target_x: &'a Tensor,
    pub classes: usize,
}

/// Evaluation-only access to the held-out target labels.
#[derive(Clone, Copy, Debug)]
pub struct EvaluationView<'a> {
    pub target_train_x: &'a Tensor,
    pub target_train_y: &'a [usize],
    pub target_test_x: &'a Tensor,
    pub target_test_y: &'a [usize],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainPair {
    pub source: LabeledArrays,
    target_train: LabeledArrays,
    target_test: LabeledArrays,
    pub source_marginal: Vec<f64>,
    pub target_marginal: Vec<f64>,
}

impl DomainPair {
    /// Splits `target` into train/test with [`stratified_split`].
    pub fn new(
        source: LabeledArrays,
        target: LabeledArrays,
        source_marginal: Vec<f64>,
        target_marginal: Vec<f64>,
        test_fraction: f64,
        split_seed: u64,
    ) -> Result<Self> {
        if source.classes != target.classes {
            return Err(DataError::Invalid("source and target class counts differ".into()).into());
        }
        if source.x.cols() != target.x.cols() {
            return Err(DataError::Invalid("source and target feature extents differ".into()).into());
        }
        let (train, test) = stratified_split(&target.y, target.classes, test_fraction, split_seed)?;
        Ok(Self {
            target_train: target.select(&train)?,
            target_test: target.select(&test)?,
            source,
            source_marginal,
            target_marginal,
        })
    }

    pub fn classes(&self) -> usize {
        self.source.classes
    }

    pub fn input_dim(&self) -> usize {
        self.source.x.cols()
    }

    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView {
            source_x: &self.source.x,
            source_y: &self.source.y,
            target_x: &self.target_train.x,
            classes: self.classes(),
        }
    }

    pub fn evaluation_view(&self) -> EvaluationView<'_> {
        EvaluationView {
            target_train_x: &self.target_train.x,
            target_train_y: &self.target_train.y,
            target_test_x: &self.target_test.x,
            target_test_y: &self.target_test.y,
        }
    }
}

/// Per-class shuffled split; every class with members contributes at least
/// one test sample. Index lists come back sorted.
pub fn stratified_split(labels: &[usize], classes: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(DataError::Invalid(format!("test fraction {test_fraction} outside [0, 1)")).into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for k in 0..classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let n_test = ((members.len() as f64 * test_fraction).round() as usize).clamp(1, members.len());
        test.extend_from_slice(&members[..n_test]);
        train.extend_from_slice(&members[n_test..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaussianTask {
    pub classes: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Class means sit on a circle of this radius.
    pub radius: f64,
    /// Standard deviation along the radial direction.
    pub radial_std: f64,
    /// Standard deviation along the tangential direction.
    pub tangential_std: f64,
    pub rotation_deg: f64,
    pub translation: f64,
    /// Every target class gets at least this many samples (0 disables).
    pub min_class_count: usize,
    pub test_fraction: f64,
}

impl Default for GaussianTask {
    fn default() -> Self {
        Self {
            classes: 3,
            n_source: 1500,
            n_target: 1500,
            radius: 2.0,
            radial_std: 0.3,
            tangential_std: 0.3,
            rotation_deg: 40.0,
            translation: 0.3,
            min_class_count: 0,
            test_fraction: 0.2,
        }
    }
}

impl GaussianTask {
    fn mean(&self, k: usize) -> [f64; 2] {
        let a = 2.0 * PI * k as f64 / self.classes as f64;
        [self.radius * a.cos(), self.radius * a.sin()]
    }

    fn draw<R: Rng>(&self, rng: &mut R, k: usize) -> [f64; 2] {
        let a = 2.0 * PI * k as f64 / self.classes as f64;
        let (u, v): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        let (r, t) = (self.radial_std * u, self.tangential_std * v);
        let m = self.mean(k);
        [m[0] + r * a.cos() - t * a.sin(), m[1] + r * a.sin() + t * a.cos()]
    }

    /// The target transform: rotation about the origin then a shift along
    /// the first axis.
    pub fn transform(&self, p: [f64; 2]) -> [f64; 2] {
        let th = self.rotation_deg.to_radians();
        let (s, c) = th.sin_cos();
        [c * p[0] - s * p[1] + self.translation, s * p[0] + c * p[1]]
    }

    fn sample_domain(&self, counts: &[usize], rng: &mut ChaCha8Rng, shifted: bool) -> Result<LabeledArrays> {
        let mut data = Vec::new();
        let mut y = Vec::new();
        for (k, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                let mut p = self.draw(rng, k);
                if shifted {
                    p = self.transform(p);
                }
                data.extend_from_slice(&p);
                y.push(k);
            }
        }
        // interleave classes so minibatch order does not follow labels
        let mut order: Vec<usize> = (0..y.len()).collect();
        order.shuffle(rng);
        let x = Tensor::new(y.len(), 2, data)?;
        Ok(LabeledArrays {
            x: x.select_rows(&order)?,
            y: order.iter().map(|&i| y[i]).collect(),
            classes: self.classes,
        })
    }
}

fn checked_counts(marginal: &[f64], n: usize, floor: usize) -> Result<Vec<usize>> {
    let mut counts = largest_remainder_counts(marginal, n);
    if floor > 0 {
        apply_count_floor(&mut counts, floor)?;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(DataError::EmptyClass { class: k }.into());
    }
    Ok(counts)
}

/// Balanced source and label-shifted, transformed target. The target
/// marginal comes from `shift`; `seed` drives the samples and the split.
pub fn make_gaussian_domains(task: &GaussianTask, shift: &LabelShiftSpec, seed: u64) -> Result<DomainPair> {
    if task.classes < 2 {
        return Err(DataError::Invalid("the synthetic task needs at least two classes".into()).into());
    }
    if shift.classes != task.classes {
        return Err(DataError::Invalid("label-shift class count differs from the task".into()).into());
    }
    let target_marginal = sample_target_marginal(shift)?;
    make_gaussian_domains_with_marginal(task, &target_marginal, seed)
}

pub fn make_gaussian_domains_with_marginal(task: &GaussianTask, target_marginal: &[f64], seed: u64) -> Result<DomainPair> {
    if target_marginal.len() != task.classes {
        return Err(DataError::Invalid("target marginal has the wrong length".into()).into());
    }
    let source_marginal = uniform(task.classes);
    let source_counts = checked_counts(&source_marginal, task.n_source, 0)?;
    let target_counts = checked_counts(target_marginal, task.n_target, task.min_class_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SAMPLE_STREAM);
    let source = task.sample_domain(&source_counts, &mut rng, false)?;
    let target = task.sample_domain(&target_counts, &mut rng, true)?;
    DomainPair::new(source, target, source_marginal, target_marginal.to_vec(), task.test_fraction, seed)
}

/// Class counts from [`largest_remainder_counts`], drawn uniformly without
/// replacement within each class. Rows keep their original order.
pub fn subsample_to_marginal(data: &LabeledArrays, marginal: &[f64], n: usize, seed: u64) -> Result<LabeledArrays> {
    if marginal.len() != data.classes {
        return Err(DataError::Invalid("marginal length differs from class count".into()).into());
    }
    let counts = largest_remainder_counts(marginal, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(n);
    for (k, &want) in counts.iter().enumerate() {
        let members: Vec<usize> = (0..data.len()).filter(|&i| data.y[i] == k).collect();
        if members.len() < want {
            return Err(DataError::InsufficientClass {
                class: k,
                shortfall: want - members.len(),
            }
            .into());
        }
        keep.extend(rand::seq::index::sample(&mut rng, members.len(), want).into_iter().map(|j| members[j]));
    }
    keep.sort_unstable();
    data.select(&keep)
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
}

fn truncated(path: &Path, expected: usize, found: usize) -> Error {
    DataError::Truncated {
        path: path.to_path_buf(),
        expected,
        found,
    }
    .into()
}

fn idx_images(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(DataError::from)?;
    let magic = read_u32(&bytes, 0).ok_or_else(|| truncated(path, 16, bytes.len()))?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        }
        .into());
    }
    let header: Vec<usize> = (1..4)
        .map(|i| read_u32(&bytes, 4 * i).map(|v| v as usize))
        .collect::<Option<_>>()
        .ok_or_else(|| truncated(path, 16, bytes.len()))?;
    let (n, rows, cols) = (header[0], header[1], header[2]);
    if rows != cols {
        return Err(DataError::Invalid(format!("{}: images must be square, got {rows}×{cols}", path.display())).into());
    }
    let expected = 16 + n * rows * cols;
    if bytes.len() < expected {
        return Err(truncated(path, expected, bytes.len()));
    }
    Ok((n, rows, bytes[16..expected].iter().map(|&b| b as f64 / 255.0).collect()))
}

fn idx_labels(path: &Path, classes: usize) -> Result<Vec<usize>> {
    let bytes = fs::read(path).map_err(DataError::from)?;
    let magic = read_u32(&bytes, 0).ok_or_else(|| truncated(path, 8, bytes.len()))?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            found: magic,
        }
        .into());
    }
    let n = read_u32(&bytes, 4).ok_or_else(|| truncated(path, 8, bytes.len()))? as usize;
    if bytes.len() < 8 + n {
        return Err(truncated(path, 8 + n, bytes.len()));
    }
    bytes[8..8 + n]
        .iter()
        .map(|&b| {
            let label = b as usize;
            if label >= classes {
                Err(DataError::LabelOutOfRange {
                    path: path.to_path_buf(),
                    label,
                    classes,
                }
                .into())
            } else {
                Ok(label)
            }
        })
        .collect()
}

/// Rows of `label, pixel…` with pixels in 0..=255; the pixel count must be
/// a perfect square.
fn csv_digits(path: &Path, classes: usize) -> Result<(usize, usize, Vec<f64>, Vec<usize>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(DataError::from)?;
    let (mut pixels, mut labels) = (Vec::new(), Vec::new());
    let mut width = None;
    for rec in reader.records() {
        let rec = rec.map_err(DataError::from)?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| DataError::Invalid(format!("{}: {e}", path.display())))?;
        let (&label, px) = vals
            .split_first()
            .ok_or_else(|| DataError::Invalid(format!("{}: empty row", path.display())))?;
        if label < 0.0 || label.fract() != 0.0 || label as usize >= classes {
            return Err(DataError::LabelOutOfRange {
                path: path.to_path_buf(),
                label: label.max(0.0) as usize,
                classes,
            }
            .into());
        }
        let side = (px.len() as f64).sqrt().round() as usize;
        if side * side != px.len() || *width.get_or_insert(px.len()) != px.len() {
            return Err(DataError::Invalid(format!("{}: rows must share a square pixel count", path.display())).into());
        }
        labels.push(label as usize);
        pixels.extend(px.iter().map(|&v| v / 255.0));
    }
    let side = width.map_or(0, |w| (w as f64).sqrt().round() as usize);
    Ok((labels.len(), side, pixels, labels))
}

/// Average-pools each `side×side` image by `factor`.
pub fn downsample(pixels: &[f64], n: usize, side: usize, factor: usize) -> Result<(usize, Vec<f64>)> {
    if factor == 0 || side % factor != 0 {
        return Err(DataError::Invalid(format!("downsample factor {factor} must divide image side {side}")).into());
    }
    if factor == 1 {
        return Ok((side, pixels.to_vec()));
    }
    let out_side = side / factor;
    let norm = (factor * factor) as f64;
    let mut out = Vec::with_capacity(n * out_side * out_side);
    for img in pixels.chunks_exact(side * side) {
        for r in 0..out_side {
            for c in 0..out_side {
                let mut acc = 0.0;
                for dr in 0..factor {
                    for dc in 0..factor {
                        acc += img[(r * factor + dr) * side + c * factor + dc];
                    }
                }
                out.push(acc / norm);
            }
        }
    }
    Ok((out_side, out))
}

/// Loads labeled digits. IDX images (detected by magic number) need a
/// matching IDX label file; anything else is parsed as CSV with the label
/// in the first column.
pub fn load_digit_files(images: &Path, labels: Option<&Path>, factor: usize, classes: usize) -> Result<LabeledArrays> {
    let head = fs::read(images).map_err(DataError::from)?;
    let (n, side, pixels, y) = if read_u32(&head, 0) == Some(IDX_IMAGES_MAGIC) {
        let labels = labels.ok_or_else(|| DataError::Invalid("IDX images need a label file".into()))?;
        let (n, side, pixels) = idx_images(images)?;
        let y = idx_labels(labels, classes)?;
        if y.len() != n {
            return Err(DataError::Invalid(format!("{n} images but {} labels", y.len())).into());
        }
        (n, side, pixels, y)
    } else {
        csv_digits(images, classes)?
    };
    if n == 0 {
        return Err(DataError::Invalid(format!("{}: no images", images.display())).into());
    }
    let (out_side, data) = downsample(&pixels, n, side, factor)?;
    Ok(LabeledArrays {
        x: Tensor::new(n, out_side * out_side, data)?,
        y,
        classes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub source: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    #[serde(rename = "n_S")]
    pub n_source: usize,
    #[serde(rename = "n_T")]
    pub n_target: usize,
    #[serde(rename = "K")]
    pub classes: usize,
    pub alpha: Option<f64>,
    pub seed: u64,
    pub marginals: Marginals,
}

impl DatasetManifest {
    pub fn describe(name: &str, pair: &DomainPair, alpha: Option<f64>, seed: u64) -> Self {
        let ev = pair.evaluation_view();
        Self {
            name: name.to_string(),
            n_source: pair.source.len(),
            n_target: ev.target_train_y.len() + ev.target_test_y.len(),
            classes: pair.classes(),
            alpha,
            seed,
            marginals: Marginals {
                source: pair.source_marginal.clone(),
                target: pair.target_marginal.clone(),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_marginal_is_exactly_uniform() {
        let m = sample_target_marginal(&LabelShiftSpec {
            alpha: None,
            classes: 4,
            seed: 1,
        })
        .unwrap();
        assert_eq!(m, vec![0.25; 4]);
        for a in [0.0, -1.0, f64::NAN] {
            assert!(sample_target_marginal(&LabelShiftSpec {
                alpha: Some(a),
                classes: 3,
                seed: 1
            })
            .is_err());
        }
    }

    #[test]
    fn dirichlet_moments_and_concentration() {
        let k = 3;
        let draws = |alpha: f64| -> Vec<Vec<f64>> {
            (0..4000)
                .map(|s| {
                    sample_target_marginal(&LabelShiftSpec {
                        alpha: Some(alpha),
                        classes: k,
                        seed: s,
                    })
                    .unwrap()
                })
                .collect()
        };
        let d10 = draws(10.0);
        let kf = k as f64;
        let var_expect = (1.0 / kf) * (1.0 - 1.0 / kf) / (kf * 10.0 + 1.0);
        for j in 0..k {
            let mean = d10.iter().map(|v| v[j]).sum::<f64>() / d10.len() as f64;
            let var = d10.iter().map(|v| (v[j] - mean).powi(2)).sum::<f64>() / (d10.len() - 1) as f64;
            assert!((mean - 1.0 / kf).abs() < 0.02);
            assert!((var / var_expect - 1.0).abs() < 0.2, "{var} vs {var_expect}");
        }
        let avg_max = |d: &[Vec<f64>]| d.iter().map(|v| v.iter().copied().fold(0.0, f64::max)).sum::<f64>() / d.len() as f64;
        assert!(avg_max(&draws(0.5)) > avg_max(&d10));
    }

    #[test]
    fn largest_remainder_cases() {
        assert_eq!(largest_remainder_counts(&[0.229, 0.647, 0.124], 1000), vec![229, 647, 124]);
        assert_eq!(largest_remainder_counts(&uniform(3), 9), vec![3, 3, 3]);
        assert_eq!(largest_remainder_counts(&uniform(3), 10), vec![4, 3, 3]);
        assert_eq!(largest_remainder_counts(&[1.0, 0.0, 0.0], 7), vec![7, 0, 0]);
        let mut c = vec![95, 5, 0];
        apply_count_floor(&mut c, 4).unwrap();
        assert_eq!(c, vec![91, 5, 4]);
    }

    #[test]
    fn paper_marginal_is_reproduced_by_counts() {
        let task = GaussianTask {
            n_source: 600,
            n_target: 1000,
            test_fraction: 0.0,
            ..GaussianTask::default()
        };
        let pair = make_gaussian_domains_with_marginal(&task, &[0.229, 0.647, 0.124], 4).unwrap();
        let ev = pair.evaluation_view();
        let mut counts = vec![0; 3];
        for &y in ev.target_train_y.iter().chain(ev.target_test_y) {
            counts[y] += 1;
        }
        assert_eq!(counts, vec![229, 647, 124]);
        assert_eq!(pair.source.class_counts(), vec![200, 200, 200]);
    }

    #[test]
    fn zero_count_class_is_an_error() {
        let task = GaussianTask::default();
        let err = make_gaussian_domains_with_marginal(&task, &[0.5, 0.4999, 0.0001], 1).unwrap_err();
        assert!(matches!(err, Error::Data(DataError::EmptyClass { class: 2 })));
        let floored = GaussianTask {
            min_class_count: 5,
            ..task
        };
        assert!(make_gaussian_domains_with_marginal(&floored, &[0.5, 0.4999, 0.0001], 1).is_ok());
    }

    #[test]
    fn generation_is_deterministic() {
        let task = GaussianTask::default();
        let shift = LabelShiftSpec {
            alpha: Some(1.0),
            classes: 3,
            seed: 7,
        };
        let a = make_gaussian_domains(&task, &shift, 3).unwrap();
        let b = make_gaussian_domains(&task, &shift, 3).unwrap();
        assert_eq!(a, b);
        let c = make_gaussian_domains(&task, &shift, 4).unwrap();
        assert_ne!(a.source.x, c.source.x);
    }

    #[test]
    fn null_transform_matches_source_statistics() {
        let task = GaussianTask {
            rotation_deg: 0.0,
            translation: 0.0,
            n_source: 3000,
            n_target: 3000,
            test_fraction: 0.0,
            ..GaussianTask::default()
        };
        let pair = make_gaussian_domains_with_marginal(&task, &uniform(3), 12).unwrap();
        let ev = pair.evaluation_view();
        for k in 0..3 {
            for d in 0..2 {
                let col = |x: &Tensor, y: &[usize]| -> Vec<f64> {
                    (0..y.len()).filter(|&i| y[i] == k).map(|i| x.get(i, d)).collect()
                };
                let s = col(&pair.source.x, &pair.source.y);
                let t = col(ev.target_train_x, ev.target_train_y);
                let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
                let sd = task.tangential_std.max(task.radial_std);
                let bound = 3.0 * sd * (1.0 / s.len() as f64 + 1.0 / t.len() as f64).sqrt();
                assert!((mean(&s) - mean(&t)).abs() < bound);
            }
        }
    }

    #[test]
    fn training_view_exposes_no_target_labels() {
        let pair = make_gaussian_domains_with_marginal(&GaussianTask::default(), &uniform(3), 0).unwrap();
        let json = serde_json::to_value(pair.training_view()).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["classes", "source_x", "source_y", "target_x"]);
        assert!(keys.iter().all(|k| !k.starts_with("target_y") && !k.contains("label")));
    }

    #[test]
    fn stratified_split_keeps_every_class_in_test() {
        let labels: Vec<usize> = (0..50).map(|i| if i < 2 { 2 } else { i % 2 }).collect();
        let (train, test) = stratified_split(&labels, 3, 0.2, 5).unwrap();
        assert_eq!(train.len() + test.len(), 50);
        for k in 0..3 {
            assert!(test.iter().any(|&i| labels[i] == k));
        }
    }

    #[test]
    fn subsample_cases() {
        let n = 300;
        let data = LabeledArrays {
            x: Tensor::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap(),
            y: (0..n).map(|i| i % 3).collect(),
            classes: 3,
        };
        let out = subsample_to_marginal(&data, &uniform(3), 90, 1).unwrap();
        assert_eq!(out.class_counts(), vec![30, 30, 30]);
        let out = subsample_to_marginal(&data, &[1.0, 0.0, 0.0], 50, 1).unwrap();
        assert_eq!(out.class_counts(), vec![50, 0, 0]);
        match subsample_to_marginal(&data, &[0.0, 0.0, 1.0], 130, 1) {
            Err(Error::Data(DataError::InsufficientClass { class: 2, shortfall: 30 })) => {}
            other => panic!("{other:?}"),
        }
    }

    fn write_idx(dir: &Path, images: &[Vec<u8>], side: u32, labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let mut img = Vec::new();
        for v in [IDX_IMAGES_MAGIC, images.len() as u32, side, side] {
            img.extend_from_slice(&v.to_be_bytes());
        }
        for im in images {
            img.extend_from_slice(im);
        }
        let mut lab = Vec::new();
        for v in [IDX_LABELS_MAGIC, labels.len() as u32] {
            lab.extend_from_slice(&v.to_be_bytes());
        }
        lab.extend_from_slice(labels);
        let (pi, pl) = (dir.join("img.idx"), dir.join("lab.idx"));
        fs::write(&pi, img).unwrap();
        fs::write(&pl, lab).unwrap();
        (pi, pl)
    }

    #[test]
    fn idx_single_zero_image() {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = write_idx(dir.path(), &[vec![0]], 1, &[3]);
        let d = load_digit_files(&pi, Some(&pl), 1, 10).unwrap();
        assert_eq!(d.x.shape(), [1, 1]);
        assert_eq!(d.x.data(), &[0.0]);
        assert_eq!(d.y, vec![3]);
    }

    #[test]
    fn idx_and_csv_encodings_agree() {
        let dir = tempfile::tempdir().unwrap();
        let images: Vec<Vec<u8>> = (0..3u8).map(|s| (0..16u8).map(|p| p.wrapping_mul(13).wrapping_add(s * 40)).collect()).collect();
        let labels = [1u8, 0, 9];
        let (pi, pl) = write_idx(dir.path(), &images, 4, &labels);
        let csv_path = dir.path().join("digits.csv");
        let text: String = images
            .iter()
            .zip(labels)
            .map(|(im, l)| {
                let px: Vec<String> = im.iter().map(|v| v.to_string()).collect();
                format!("{l},{}\n", px.join(","))
            })
            .collect();
        fs::write(&csv_path, text).unwrap();
        for factor in [1, 2] {
            let a = load_digit_files(&pi, Some(&pl), factor, 10).unwrap();
            let b = load_digit_files(&csv_path, None, factor, 10).unwrap();
            assert_eq!(a, b);
        }
        let a = load_digit_files(&pi, Some(&pl), 1, 10).unwrap();
        assert_eq!(a.x.row(0)[1], 13.0 / 255.0);
        let pooled = load_digit_files(&pi, Some(&pl), 2, 10).unwrap();
        assert_eq!(pooled.x.cols(), 4);
        let img0: Vec<f64> = images[0].iter().map(|&v| v as f64 / 255.0).collect();
        let expect = (img0[0] + img0[1] + img0[4] + img0[5]) / 4.0;
        assert!((pooled.x.get(0, 0) - expect).abs() < 1e-15);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = write_idx(dir.path(), &[vec![0; 4]], 2, &[12]);
        assert!(matches!(
            load_digit_files(&pi, Some(&pl), 1, 10),
            Err(Error::Data(DataError::LabelOutOfRange { label: 12, .. }))
        ));
        let mut bytes = fs::read(&pi).unwrap();
        bytes.truncate(bytes.len() - 1);
        fs::write(&pi, &bytes).unwrap();
        assert!(matches!(
            load_digit_files(&pi, Some(&pl), 1, 10),
            Err(Error::Data(DataError::Truncated { expected: 20, found: 19, .. }))
        ));
        let bad = dir.path().join("bad.idx");
        let mut b = 0x0000_0802u32.to_be_bytes().to_vec();
        b.extend_from_slice(&[0; 12]);
        fs::write(&bad, b).unwrap();
        assert!(matches!(idx_images(&bad), Err(Error::Data(DataError::BadMagic { found: 0x802, .. }))));
    }

    #[test]
    fn manifest_keys() {
        let pair = make_gaussian_domains_with_marginal(&GaussianTask::default(), &uniform(3), 0).unwrap();
        let m = DatasetManifest::describe("gauss3", &pair, None, 0);
        let v = serde_json::to_value(&m).unwrap();
        for key in ["name", "n_S", "n_T", "K", "alpha", "seed", "marginals"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        assert_eq!(serde_json::from_value::<DatasetManifest>(v).unwrap(), m);
    }

    proptest! {
        #[test]
        fn counts_sum_to_n_and_marginals_stay_on_simplex(seed in 0u64..5000, k in 1usize..8, n in 0usize..2000, alpha in 0.05f64..20.0) {
            let m = sample_target_marginal(&LabelShiftSpec { alpha: Some(alpha), classes: k, seed }).unwrap();
            prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(m.iter().all(|&v| v >= 0.0));
            let c = largest_remainder_counts(&m, n);
            prop_assert_eq!(c.iter().sum::<usize>(), n);
            for (ck, wk) in c.iter().zip(&m) {
                prop_assert!((*ck as f64 - wk * n as f64).abs() < 1.0 + 1e-9);
            }
        }
    }
}
