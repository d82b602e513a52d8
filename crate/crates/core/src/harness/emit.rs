//! Plot data and run artifacts: loss/accuracy series, 2-D feature scatter
//! through PCA, and the per-run JSON files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::divergences::DivergenceRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::train::{EvalRecord, TrainOutput};

/// One row of `series.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub step: usize,
    pub l_y: f64,
    pub l_ce: f64,
    pub l_v_src: f64,
    pub l_v_tgt: f64,
    pub l_d: f64,
    pub l_align: f64,
    pub total_fc: f64,
    pub total_r: f64,
    pub lambda_align: f64,
    pub lr: f64,
    pub per_class_acc: f64,
    pub source_acc: f64,
    pub ssd: f64,
    pub cssd: f64,
    pub joint_ssd: f64,
    pub wasserstein: f64,
}

impl From<&EvalRecord> for SeriesRow {
    fn from(e: &EvalRecord) -> Self {
        let l = &e.losses;
        let d = &e.divergences;
        Self {
            step: e.step,
            l_y: l.l_y,
            l_ce: l.l_ce,
            l_v_src: l.l_v_src,
            l_v_tgt: l.l_v_tgt,
            l_d: l.l_d,
            l_align: l.l_align,
            total_fc: l.total_fc,
            total_r: l.total_r,
            lambda_align: e.lambda_align,
            lr: e.lr,
            per_class_acc: e.per_class_acc,
            source_acc: e.source_acc,
            ssd: d.ssd,
            cssd: d.cssd,
            joint_ssd: d.joint_ssd,
            wasserstein: d.wasserstein,
        }
    }
}

pub fn write_series(path: &Path, evals: &[EvalRecord]) -> Result<()> {
    if evals.is_empty() {
        return Err(Error::Empty("series records"));
    }
    let mut w = csv::Writer::from_path(path)?;
    for e in evals {
        w.serialize(SeriesRow::from(e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_series(path: &Path) -> Result<Vec<SeriesRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Two leading principal axes of a feature cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `m × 2`, columns are unit axes.
    pub projection: Vec<[f64; 2]>,
    pub eigenvalues: [f64; 2],
    pub total_variance: f64,
    /// Share of the total variance carried by the two axes.
    pub explained_fraction: f64,
}

impl Pca {
    /// Axes are eigenvectors of the sample covariance, ordered by
    /// eigenvalue, each signed so its largest-magnitude entry is positive.
    pub fn fit(x: &Tensor) -> Result<Self> {
        let [n, m] = x.shape();
        if m < 2 {
            return Err(Error::Precondition(format!("PCA to 2-D needs at least 2 features, got {m}")));
        }
        if n < 2 {
            return Err(Error::Precondition("PCA needs at least 2 rows".into()));
        }
        let mut mean = vec![0.0; m];
        for r in x.row_iter() {
            mean.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
        let centered = DMatrix::from_fn(n, m, |i, j| x.get(i, j) - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut projection = vec![[0.0; 2]; m];
        let mut eigenvalues = [0.0; 2];
        for (c, &k) in order.iter().take(2).enumerate() {
            let col = eig.eigenvectors.column(k);
            let pivot = (0..m).max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()).then(b.cmp(&a))).expect("m ≥ 2");
            let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
            for (j, row) in projection.iter_mut().enumerate() {
                row[c] = sign * col[j];
            }
            eigenvalues[c] = eig.eigenvalues[k].max(0.0);
        }
        let total_variance: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        let explained_fraction = if total_variance > 0.0 {
            (eigenvalues[0] + eigenvalues[1]) / total_variance
        } else {
            0.0
        };
        Ok(Self {
            mean,
            projection,
            eigenvalues,
            total_variance,
            explained_fraction,
        })
    }

    pub fn project(&self, row: &[f64]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for ((v, mu), axes) in row.iter().zip(&self.mean).zip(&self.projection) {
            out[0] += (v - mu) * axes[0];
            out[1] += (v - mu) * axes[1];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub domain: String,
    pub label: usize,
    pub pc1: f64,
    pub pc2: f64,
}

/// Fits PCA on the pooled clouds and writes one scatter row per point.
pub fn write_features_2d(
    path: &Path,
    source: (&Tensor, &[usize]),
    target: (&Tensor, &[usize]),
) -> Result<Pca> {
    let pooled: Vec<&[f64]> = source.0.row_iter().chain(target.0.row_iter()).collect();
    let pca = Pca::fit(&Tensor::from_rows(&pooled)?)?;
    let mut w = csv::Writer::from_path(path)?;
    for (name, (x, y)) in [("source", source), ("target", target)] {
        for (row, &label) in x.row_iter().zip(y) {
            let [pc1, pc2] = pca.project(row);
            w.serialize(ScatterRow {
                domain: name.into(),
                label,
                pc1,
                pc2,
            })?;
        }
    }
    w.flush()?;
    Ok(pca)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// `run.json`, `series.csv`, `divergences.jsonl`, `features_2d.csv`,
/// `pca.json` and `model.json` under `dir`.
pub fn write_run(dir: &Path, out: &TrainOutput) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("run.json"), &out.record)?;
    write_series(&dir.join("series.csv"), &out.record.evals)?;
    let mut lines = BufWriter::new(File::create(dir.join("divergences.jsonl"))?);
    for e in &out.record.evals {
        let rec = DivergenceRecord {
            step: e.step,
            report: e.divergences.clone(),
        };
        serde_json::to_writer(&mut lines, &rec)?;
        lines.write_all(b"\n")?;
    }
    lines.flush()?;
    let last = &out.last;
    let pca = write_features_2d(
        &dir.join("features_2d.csv"),
        (&last.source_features, &last.source_labels),
        (&last.target_features, &last.target_labels),
    )?;
    write_json(&dir.join("pca.json"), &pca)?;
    out.bundle.save(&dir.join("model.json"))?;
    Ok(())
}
