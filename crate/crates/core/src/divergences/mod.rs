//! Finite-sample support divergences between feature clouds.
//!
//! Supports are the empirical sample sets, so every quantity here is an
//! estimate of the population divergence. The ground metric on the latent
//! space is Euclidean.

pub mod assignment;
pub mod knn;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use knn::{brute_force_min, euclidean, KdTree, BRUTE_FORCE_LIMIT};

/// Name recorded alongside reports.
pub const LATENT_METRIC: &str = "euclidean";

/// Largest cloud accepted by [`wasserstein_1`].
pub const WASSERSTEIN_MAX_POINTS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct SampleCloud {
    pub points: Tensor,
    pub labels: Option<Vec<usize>>,
    pub class_marginal: Option<Vec<f64>>,
}

impl SampleCloud {
    pub fn new(points: Tensor) -> Self {
        Self {
            points,
            labels: None,
            class_marginal: None,
        }
    }

    /// Attaches labels in `0..classes`; the class marginal defaults to the
    /// empirical label frequencies.
    pub fn labeled(points: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if labels.len() != points.rows() {
            return Err(Error::Precondition(format!(
                "{} labels for {} points",
                labels.len(),
                points.rows()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Precondition(format!("label {bad} outside 0..{classes}")));
        }
        let mut freq = vec![0.0; classes];
        for &y in &labels {
            freq[y] += 1.0;
        }
        let n = labels.len() as f64;
        freq.iter_mut().for_each(|v| *v /= n);
        Ok(Self {
            points,
            labels: Some(labels),
            class_marginal: Some(freq),
        })
    }

    pub fn with_marginal(mut self, marginal: Vec<f64>) -> Result<Self> {
        if marginal.iter().any(|&v| !(v >= 0.0)) || (marginal.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Precondition("class marginal must lie on the simplex".into()));
        }
        if let Some(labels) = &self.labels {
            if let Some(&bad) = labels.iter().find(|&&y| y >= marginal.len()) {
                return Err(Error::Precondition(format!("label {bad} outside marginal support")));
            }
        }
        self.class_marginal = Some(marginal);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points.cols()
    }

    /// Flat buffer of the points carrying label `k`.
    fn class_points(&self, k: usize) -> Vec<f64> {
        let labels = self.labels.as_ref().expect("labeled cloud");
        labels
            .iter()
            .enumerate()
            .filter(|&(_, &y)| y == k)
            .flat_map(|(i, _)| self.points.row(i).iter().copied())
            .collect()
    }
}

/// Repeated point-to-set queries against one support.
pub struct SupportIndex<'a> {
    points: &'a [f64],
    dim: usize,
    tree: Option<KdTree<'a>>,
}

impl<'a> SupportIndex<'a> {
    pub fn new(points: &'a [f64], dim: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("support"));
        }
        let tree = (points.len() / dim > BRUTE_FORCE_LIMIT).then(|| KdTree::build(points, dim));
        Ok(Self { points, dim, tree })
    }

    pub fn uses_tree(&self) -> bool {
        self.tree.is_some()
    }

    pub fn distance(&self, z: &[f64]) -> f64 {
        match &self.tree {
            Some(t) => t.nearest_distance(z),
            None => brute_force_min(z, self.points, self.dim),
        }
    }

    fn mean_distance(&self, queries: &[f64]) -> f64 {
        let n = queries.len() / self.dim;
        queries.chunks_exact(self.dim).map(|z| self.distance(z)).sum::<f64>() / n as f64
    }
}

/// `d(z, supp Q)` for the empirical support of `cloud`.
pub fn dist_to_support(z: &[f64], cloud: &SampleCloud) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::Empty("cloud"));
    }
    if z.len() != cloud.dim() {
        return Err(Error::Precondition(format!("point of extent {} vs cloud extent {}", z.len(), cloud.dim())));
    }
    Ok(SupportIndex::new(cloud.points.data(), cloud.dim())?.distance(z))
}

/// `E_{z~q}[d(z, supp s)]` over the rows of `queries` (uniform weights).
pub fn mean_dist_to_support(queries: &Tensor, support: &Tensor) -> Result<f64> {
    Ok(SupportIndex::new(support.data(), support.cols())?.mean_distance(queries.data()))
}

fn check_pair(p: &SampleCloud, q: &SampleCloud) -> Result<()> {
    if p.is_empty() || q.is_empty() {
        return Err(Error::Empty("cloud"));
    }
    if p.dim() != q.dim() {
        return Err(Error::Precondition(format!("cloud extents {} vs {}", p.dim(), q.dim())));
    }
    Ok(())
}

/// Symmetric support divergence between two clouds.
pub fn ssd(p: &SampleCloud, q: &SampleCloud) -> Result<f64> {
    check_pair(p, q)?;
    Ok(mean_dist_to_support(&p.points, &q.points)? + mean_dist_to_support(&q.points, &p.points)?)
}

/// Conditional symmetric support divergence. Returns the total and the
/// per-class terms `p_y·E_{P|y} d(z, supp Q|y) + q_y·E_{Q|y} d(z, supp P|y)`,
/// with each side weighted by its own cloud's class marginal.
pub fn cssd(p: &SampleCloud, q: &SampleCloud) -> Result<(f64, Vec<f64>)> {
    check_pair(p, q)?;
    let (Some(pm), Some(qm)) = (&p.class_marginal, &q.class_marginal) else {
        return Err(Error::Precondition("cssd needs labeled clouds with class marginals".into()));
    };
    if p.labels.is_none() || q.labels.is_none() {
        return Err(Error::Precondition("cssd needs labeled clouds".into()));
    }
    if pm.len() != qm.len() {
        return Err(Error::Precondition("class counts differ between clouds".into()));
    }
    let dim = p.dim();
    let mut terms = vec![0.0; pm.len()];
    for k in 0..pm.len() {
        if pm[k] == 0.0 && qm[k] == 0.0 {
            continue;
        }
        let (pk, qk) = (p.class_points(k), q.class_points(k));
        if pk.is_empty() || qk.is_empty() {
            let side = if pk.is_empty() { "source" } else { "target" };
            return Err(Error::Precondition(format!(
                "class {k} has positive marginal but no {side} samples"
            )));
        }
        let (ip, iq) = (SupportIndex::new(&pk, dim)?, SupportIndex::new(&qk, dim)?);
        if pm[k] > 0.0 {
            terms[k] += pm[k] * iq.mean_distance(&pk);
        }
        if qm[k] > 0.0 {
            terms[k] += qm[k] * ip.mean_distance(&qk);
        }
    }
    Ok((terms.iter().sum(), terms))
}

/// Ten times the bounding-box diagonal of the union of both clouds, so a
/// label mismatch always costs more than any within-label displacement.
pub fn default_label_scale(p: &SampleCloud, q: &SampleCloud) -> f64 {
    let dim = p.dim();
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for row in p.points.row_iter().chain(q.points.row_iter()) {
        for (j, &v) in row.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let diag = euclidean(&lo, &hi);
    if diag > 0.0 {
        10.0 * diag
    } else {
        10.0
    }
}

/// Product-metric distance from `(z, y)` to the labeled support of `cloud`:
/// `min(d(z, supp|y), label_scale + d(z, supp))`.
fn joint_side(queries: &SampleCloud, support: &SampleCloud, label_scale: f64) -> Result<f64> {
    let dim = support.dim();
    let classes = queries
        .labels
        .iter()
        .chain(support.labels.iter())
        .flatten()
        .max()
        .map_or(0, |m| m + 1);
    let per_class: Vec<Vec<f64>> = (0..classes).map(|k| support.class_points(k)).collect();
    let per_index: Vec<Option<SupportIndex<'_>>> = per_class
        .iter()
        .map(|pts| (!pts.is_empty()).then(|| SupportIndex::new(pts, dim)).transpose())
        .collect::<Result<_>>()?;
    let all = SupportIndex::new(support.points.data(), dim)?;
    let labels = queries.labels.as_ref().expect("labeled cloud");
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = queries.points.row(i);
        let cross = label_scale + all.distance(z);
        let same = per_index[y].as_ref().map_or(f64::INFINITY, |ix| ix.distance(z));
        total += same.min(cross);
    }
    Ok(total / labels.len() as f64)
}

/// Support divergence of the joint `(z, ŷ)` clouds under
/// `d((z,y),(z',y')) = ‖z - z'‖ + label_scale·[y ≠ y']`.
pub fn joint_ssd(p: &SampleCloud, q: &SampleCloud, label_scale: f64) -> Result<f64> {
    check_pair(p, q)?;
    if p.labels.is_none() || q.labels.is_none() {
        return Err(Error::Precondition("joint_ssd needs (pseudo-)labels on both clouds".into()));
    }
    if !(label_scale > 0.0) {
        return Err(Error::Precondition("label_scale must be positive".into()));
    }
    Ok(joint_side(p, q, label_scale)? + joint_side(q, p, label_scale)?)
}

/// Exact W₁ between two equal-size clouds with uniform weights and
/// Euclidean ground cost.
pub fn wasserstein_1(p: &SampleCloud, q: &SampleCloud) -> Result<f64> {
    check_pair(p, q)?;
    let n = p.len();
    if q.len() != n {
        return Err(Error::Precondition(format!(
            "wasserstein_1 needs equal sizes, got {n} and {}; subsample first",
            q.len()
        )));
    }
    if n > WASSERSTEIN_MAX_POINTS {
        return Err(Error::Precondition(format!("wasserstein_1 supports at most {WASSERSTEIN_MAX_POINTS} points")));
    }
    let mut cost = Vec::with_capacity(n * n);
    for a in p.points.row_iter() {
        for b in q.points.row_iter() {
            cost.push(euclidean(a, b));
        }
    }
    let (_, total) = assignment::min_cost_assignment(&cost, n);
    Ok(total / n as f64)
}

/// Uniform subsample without replacement to `n` rows (all rows if fewer),
/// keeping labels aligned. Row order of the kept subset follows the source.
pub fn subsample(cloud: &SampleCloud, n: usize, seed: u64) -> Result<SampleCloud> {
    if cloud.len() <= n {
        return Ok(cloud.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, cloud.len(), n).into_vec();
    idx.sort_unstable();
    Ok(SampleCloud {
        points: cloud.points.select_rows(&idx)?,
        labels: cloud.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        class_marginal: cloud.class_marginal.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub ssd: f64,
    pub cssd: f64,
    pub joint_ssd: f64,
    pub wasserstein: f64,
    pub per_class_terms: Vec<f64>,
}

/// One JSON line per checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceRecord {
    pub step: usize,
    #[serde(flatten)]
    pub report: DivergenceReport,
}

/// Inputs for a full report: true-label clouds for CSSD, pseudo-label
/// clouds (same points) for the joint divergence.
pub struct ReportInputs<'a> {
    pub source: &'a SampleCloud,
    pub target: &'a SampleCloud,
    pub source_pseudo: &'a SampleCloud,
    pub target_pseudo: &'a SampleCloud,
    pub label_scale: Option<f64>,
    pub seed: u64,
}

pub fn report(inp: &ReportInputs<'_>) -> Result<DivergenceReport> {
    let ssd_v = ssd(inp.source, inp.target)?;
    let (cssd_v, per_class_terms) = cssd(inp.source, inp.target)?;
    let scale = inp
        .label_scale
        .unwrap_or_else(|| default_label_scale(inp.source_pseudo, inp.target_pseudo));
    let joint = joint_ssd(inp.source_pseudo, inp.target_pseudo, scale)?;
    let n = inp.source.len().min(inp.target.len()).min(WASSERSTEIN_MAX_POINTS);
    let ps = subsample(inp.source, n, inp.seed)?;
    let qs = subsample(inp.target, n, inp.seed.wrapping_add(1))?;
    let w = wasserstein_1(&ps, &qs)?;
    Ok(DivergenceReport {
        ssd: ssd_v,
        cssd: cssd_v,
        joint_ssd: joint,
        wasserstein: w,
        per_class_terms,
    })
}
