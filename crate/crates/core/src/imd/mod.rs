//! Exact integral measure discrepancy over localized, nonnegative,
//! 1-Lipschitz function classes on finite metric spaces, and checkers for
//! the support-based upper bounds on it.
//!
//! Functions are vectors `f ∈ ℝ^m` over the instance points. The class
//! family constrains `E_{p|k}[f] ≤ ε_k` for every class carrying source
//! mass; the marginal family uses one budget `E_p[f] ≤ ε`.

pub mod simplex;

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{Error, LpError, Result};
use crate::sampling::symmetric_dirichlet;
use crate::serde_ext::{nullable_f64, nullable_matrix};
use simplex::{maximize, Constraint, LpSolution};

/// Tolerance on every certified inequality.
pub const CERT_TOL: f64 = 1e-9;
/// Post-solve feasibility tolerance for witnesses.
pub const FEAS_TOL: f64 = 1e-7;
/// Largest instance solved in exact mode.
pub const EXACT_MAX_POINTS: usize = 64;
const SIMPLEX_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImdInstance {
    pub points: Vec<Vec<f64>>,
    /// `+∞` entries drop the Lipschitz link between two points.
    #[serde(with = "nullable_matrix")]
    pub metric: Vec<Vec<f64>>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    /// Class index in `0..epsilons.len()` per point.
    pub class_of: Vec<usize>,
    pub epsilons: Vec<f64>,
}

fn check_probability(name: &str, w: &[f64]) -> Result<()> {
    if w.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(LpError::InvalidInstance(format!("{name} has a negative or non-finite weight")).into());
    }
    let total: f64 = w.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_SUM_TOL {
        return Err(LpError::InvalidInstance(format!("{name} sums to {total}")).into());
    }
    Ok(())
}

fn check_metric(metric: &[Vec<f64>], m: usize) -> Result<()> {
    let bad = |msg: String| Err(LpError::InvalidInstance(msg).into());
    if metric.len() != m || metric.iter().any(|r| r.len() != m) {
        return bad(format!("metric must be {m}×{m}"));
    }
    for i in 0..m {
        if metric[i][i] != 0.0 {
            return bad(format!("metric[{i}][{i}] = {}", metric[i][i]));
        }
        for j in 0..m {
            let d = metric[i][j];
            if d.is_nan() || d < 0.0 {
                return bad(format!("metric[{i}][{j}] = {d}"));
            }
            if d != metric[j][i] {
                return bad(format!("metric not symmetric at ({i}, {j})"));
            }
        }
    }
    for i in 0..m {
        for j in 0..m {
            for k in 0..m {
                let via = metric[i][k] + metric[k][j];
                if metric[i][j] > via + 1e-12 * (1.0 + via) {
                    return bad(format!("triangle inequality fails for ({i}, {k}, {j})"));
                }
            }
        }
    }
    Ok(())
}

pub fn euclidean_metric(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|a| points.iter().map(|b| crate::divergences::knn::euclidean(a, b)).collect())
        .collect()
}

/// Per-class total of `w`.
pub fn class_masses(w: &[f64], class_of: &[usize], classes: usize) -> Vec<f64> {
    let mut out = vec![0.0; classes];
    for (&v, &k) in w.iter().zip(class_of) {
        out[k] += v;
    }
    out
}

impl ImdInstance {
    pub fn new(
        points: Vec<Vec<f64>>,
        metric: Vec<Vec<f64>>,
        p: Vec<f64>,
        q: Vec<f64>,
        class_of: Vec<usize>,
        epsilons: Vec<f64>,
    ) -> Result<Self> {
        let inst = Self {
            points,
            metric,
            p,
            q,
            class_of,
            epsilons,
        };
        inst.validate()?;
        Ok(inst)
    }

    /// Instance over `points` with the Euclidean metric.
    pub fn euclidean(points: Vec<Vec<f64>>, p: Vec<f64>, q: Vec<f64>, class_of: Vec<usize>, epsilons: Vec<f64>) -> Result<Self> {
        let metric = euclidean_metric(&points);
        Self::new(points, metric, p, q, class_of, epsilons)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.len();
        if m == 0 {
            return Err(LpError::InvalidInstance("no points".into()).into());
        }
        if self.p.len() != m || self.q.len() != m || self.class_of.len() != m {
            return Err(LpError::InvalidInstance("p, q, class_of must have one entry per point".into()).into());
        }
        let k = self.classes();
        if k == 0 {
            return Err(LpError::InvalidInstance("at least one class budget is required".into()).into());
        }
        if let Some(&bad) = self.class_of.iter().find(|&&c| c >= k) {
            return Err(LpError::InvalidInstance(format!("class {bad} has no budget")).into());
        }
        if self.epsilons.iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
            return Err(LpError::InvalidInstance("budgets must be finite and nonnegative".into()).into());
        }
        check_probability("p", &self.p)?;
        check_probability("q", &self.q)?;
        check_metric(&self.metric, m)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.epsilons.len()
    }

    pub fn p_masses(&self) -> Vec<f64> {
        class_masses(&self.p, &self.class_of, self.classes())
    }

    pub fn q_masses(&self) -> Vec<f64> {
        class_masses(&self.q, &self.class_of, self.classes())
    }

    /// Budget of the marginal family that contains the class family.
    pub fn marginal_epsilon(&self) -> f64 {
        self.epsilons.iter().zip(self.p_masses()).map(|(e, p)| e * p).sum()
    }

    /// `d(z_i, supp w)`, optionally restricted to class `k`; `+∞` when
    /// the restricted support is empty.
    pub fn dist_to_support(&self, i: usize, w: &[f64], class: Option<usize>) -> f64 {
        (0..self.len())
            .filter(|&j| w[j] > 0.0 && class.is_none_or(|k| self.class_of[j] == k))
            .map(|j| self.metric[i][j])
            .fold(f64::INFINITY, f64::min)
    }

    /// Per class `Σ_{i∈k} from_i · d(z_i, supp to|k)`, i.e.
    /// `from_k · E_{from|k} d(z, supp to|k)`.
    fn conditional_terms(&self, from: &[f64], to: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.classes()];
        for i in 0..self.len() {
            if from[i] > 0.0 {
                let k = self.class_of[i];
                out[k] += from[i] * self.dist_to_support(i, to, Some(k));
            }
        }
        out
    }

    /// `E_q d(z, supp p)`.
    pub fn marginal_target_distance(&self) -> f64 {
        (0..self.len())
            .filter(|&i| self.q[i] > 0.0)
            .map(|i| self.q[i] * self.dist_to_support(i, &self.p, None))
            .sum()
    }

    /// Per-class `q_k · E_{q|k} d(z, supp p|k)`.
    pub fn conditional_target_terms(&self) -> Vec<f64> {
        self.conditional_terms(&self.q, &self.p)
    }

    /// Conditional symmetric support divergence between the weighted
    /// point sets.
    pub fn cssd(&self) -> f64 {
        let a = self.conditional_terms(&self.p, &self.q);
        let b = self.conditional_terms(&self.q, &self.p);
        a.iter().chain(&b).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Family {
    /// `E_{p|k} f ≤ ε_k` for each class with source mass.
    ClassLocalized,
    /// `E_p f ≤ ε`.
    Marginal { epsilon: f64 },
}

pub fn constraints(inst: &ImdInstance, family: Family) -> Vec<Constraint> {
    let m = inst.len();
    let mut rows = Vec::with_capacity(m * (m - 1) + inst.classes());
    for i in 0..m {
        for j in i + 1..m {
            let d = inst.metric[i][j];
            if d.is_finite() {
                rows.push(Constraint {
                    coeffs: vec![(i, 1.0), (j, -1.0)],
                    rhs: d,
                });
                rows.push(Constraint {
                    coeffs: vec![(j, 1.0), (i, -1.0)],
                    rhs: d,
                });
            }
        }
    }
    match family {
        Family::ClassLocalized => {
            let pk = inst.p_masses();
            for (k, &eps) in inst.epsilons.iter().enumerate() {
                if pk[k] > 0.0 {
                    let coeffs = (0..m)
                        .filter(|&i| inst.class_of[i] == k && inst.p[i] > 0.0)
                        .map(|i| (i, inst.p[i] / pk[k]))
                        .collect();
                    rows.push(Constraint { coeffs, rhs: eps });
                }
            }
        }
        Family::Marginal { epsilon } => {
            let coeffs = (0..m).filter(|&i| inst.p[i] > 0.0).map(|i| (i, inst.p[i])).collect();
            rows.push(Constraint { coeffs, rhs: epsilon });
        }
    }
    rows
}

/// Largest violation of the family's constraints by `f` (0 when feasible).
pub fn max_violation(inst: &ImdInstance, family: Family, f: &[f64]) -> f64 {
    let neg = f.iter().map(|&v| -v).fold(0.0, f64::max);
    constraints(inst, family)
        .iter()
        .map(|r| r.coeffs.iter().map(|&(j, a)| a * f[j]).sum::<f64>() - r.rhs)
        .fold(neg, f64::max)
}

fn solve(inst: &ImdInstance, family: Family, objective: &[f64]) -> Result<LpSolution> {
    let sol = maximize(objective, &constraints(inst, family))?;
    let viol = max_violation(inst, family, &sol.x);
    if viol > FEAS_TOL {
        return Err(LpError::Infeasible(format!("witness violates a constraint by {viol:e}")).into());
    }
    Ok(sol)
}

/// `max f_i` over the family for each listed point (0 for the rest).
pub fn pointwise_sup(inst: &ImdInstance, family: Family, indices: &[usize]) -> Result<Vec<f64>> {
    let m = inst.len();
    let mut out = vec![0.0; m];
    for &i in indices {
        let mut c = vec![0.0; m];
        c[i] = 1.0;
        out[i] = solve(inst, family, &c)?.value;
    }
    Ok(out)
}

fn class_max(inst: &ImdInstance, sup: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; inst.classes()];
    for i in 0..inst.len() {
        if w[i] > 0.0 {
            let k = inst.class_of[i];
            out[k] = f64::max(out[k], sup[i]);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Bounds {
    #[serde(with = "nullable_f64")]
    pub rhs_conditional: f64,
    #[serde(with = "nullable_f64")]
    pub rhs_cssd: f64,
    #[serde(with = "nullable_f64")]
    pub cssd: f64,
    /// `sup f` over the class family on `supp p|k` (0 for classes without source mass).
    pub delta_k: Vec<f64>,
    /// `sup f` over the class family on `supp q|k` (0 for classes without target mass).
    pub gamma_k: Vec<f64>,
}

fn lemma1_from_sups(inst: &ImdInstance, sup: &[f64]) -> Lemma1Bounds {
    let (pk, qk) = (inst.p_masses(), inst.q_masses());
    let delta_k = class_max(inst, sup, &inst.p);
    let gamma_k = class_max(inst, sup, &inst.q);
    let target_terms = inst.conditional_target_terms();
    let rhs_conditional = (0..inst.classes())
        .map(|k| target_terms[k] + qk[k] * delta_k[k] + pk[k] * inst.epsilons[k])
        .sum();
    let cssd = inst.cssd();
    let rhs_cssd = cssd + (0..inst.classes()).map(|k| pk[k] * delta_k[k] + qk[k] * gamma_k[k]).sum::<f64>();
    Lemma1Bounds {
        rhs_conditional,
        rhs_cssd,
        cssd,
        delta_k,
        gamma_k,
    }
}

fn support_indices(inst: &ImdInstance, both: bool) -> Vec<usize> {
    (0..inst.len())
        .filter(|&i| inst.p[i] > 0.0 || (both && inst.q[i] > 0.0))
        .collect()
}

fn check_size(inst: &ImdInstance) -> Result<()> {
    inst.validate()?;
    if inst.len() > EXACT_MAX_POINTS {
        return Err(Error::Precondition(format!(
            "exact mode supports at most {EXACT_MAX_POINTS} points, got {}",
            inst.len()
        )));
    }
    Ok(())
}

pub fn lemma1_bounds(inst: &ImdInstance) -> Result<Lemma1Bounds> {
    check_size(inst)?;
    let sup = pointwise_sup(inst, Family::ClassLocalized, &support_indices(inst, true))?;
    Ok(lemma1_from_sups(inst, &sup))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImdResult {
    pub imd_value: f64,
    pub f_star: Vec<f64>,
    pub delta_k: Vec<f64>,
    pub gamma_k: Vec<f64>,
    #[serde(with = "nullable_f64")]
    pub rhs_conditional: f64,
    #[serde(with = "nullable_f64")]
    pub rhs_cssd: f64,
    #[serde(with = "nullable_f64")]
    pub rhs_marginal: f64,
    #[serde(with = "nullable_f64")]
    pub cssd: f64,
    /// IMD over the marginal family with budget `Σ_k ε_k p_k`.
    pub imd_marginal: f64,
    pub epsilon_marginal: f64,
    /// `sup f` over the marginal family on `supp p`.
    pub delta_marginal: f64,
}

/// Solves the class-localized IMD exactly, plus every quantity the bounds
/// need. Instances whose objective is unbounded fail with
/// [`LpError::Unbounded`] carrying a certificate ray in `f`-space.
pub fn solve_imd(inst: &ImdInstance) -> Result<ImdResult> {
    check_size(inst)?;
    let c: Vec<f64> = inst.q.iter().zip(&inst.p).map(|(q, p)| q - p).collect();
    let main = solve(inst, Family::ClassLocalized, &c)?;
    let sup = pointwise_sup(inst, Family::ClassLocalized, &support_indices(inst, true))?;
    let bounds = lemma1_from_sups(inst, &sup);

    let epsilon = inst.marginal_epsilon();
    let marginal = Family::Marginal { epsilon };
    let imd_marginal = solve(inst, marginal, &c)?.value;
    let msup = pointwise_sup(inst, marginal, &support_indices(inst, false))?;
    let delta_marginal = (0..inst.len())
        .filter(|&i| inst.p[i] > 0.0)
        .map(|i| msup[i])
        .fold(0.0, f64::max);
    let rhs_marginal = inst.marginal_target_distance() + delta_marginal + epsilon;

    Ok(ImdResult {
        imd_value: main.value,
        f_star: main.x,
        delta_k: bounds.delta_k,
        gamma_k: bounds.gamma_k,
        rhs_conditional: bounds.rhs_conditional,
        rhs_cssd: bounds.rhs_cssd,
        rhs_marginal,
        cssd: bounds.cssd,
        imd_marginal,
        epsilon_marginal: epsilon,
        delta_marginal,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Remark2Report {
    /// `Σ_k q_k E_{q|k} d(z, supp p|k)`.
    #[serde(with = "nullable_f64")]
    pub conditional_distance: f64,
    /// `E_q d(z, supp p)`.
    #[serde(with = "nullable_f64")]
    pub marginal_distance: f64,
    pub distance_holds: bool,
    /// `Σ_k q_k δ_k`.
    pub weighted_class_sup: f64,
    /// `δ` over the marginal family.
    pub marginal_sup: f64,
    pub sup_holds: bool,
}

pub fn remark2_from_result(inst: &ImdInstance, res: &ImdResult) -> Remark2Report {
    let conditional_distance = inst.conditional_target_terms().iter().sum();
    let marginal_distance = inst.marginal_target_distance();
    let weighted_class_sup = inst.q_masses().iter().zip(&res.delta_k).map(|(q, d)| q * d).sum();
    Remark2Report {
        conditional_distance,
        marginal_distance,
        distance_holds: conditional_distance >= marginal_distance - CERT_TOL,
        weighted_class_sup,
        marginal_sup: res.delta_marginal,
        sup_holds: weighted_class_sup <= res.delta_marginal + CERT_TOL,
    }
}

pub fn remark2_check(inst: &ImdInstance) -> Result<Remark2Report> {
    Ok(remark2_from_result(inst, &solve_imd(inst)?))
}

/// Signed margins `rhs − imd` for each certified bound.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceCheck {
    pub id: usize,
    pub result: ImdResult,
    pub remark2: Remark2Report,
    #[serde(with = "nullable_f64")]
    pub slack_conditional: f64,
    #[serde(with = "nullable_f64")]
    pub slack_cssd: f64,
    #[serde(with = "nullable_f64")]
    pub slack_marginal: f64,
}

impl InstanceCheck {
    pub fn all_hold(&self) -> bool {
        self.slack_conditional >= -CERT_TOL
            && self.slack_cssd >= -CERT_TOL
            && self.slack_marginal >= -CERT_TOL
            && self.remark2.distance_holds
            && self.remark2.sup_holds
    }
}

pub fn check_instance(id: usize, inst: &ImdInstance) -> Result<InstanceCheck> {
    let result = solve_imd(inst)?;
    let remark2 = remark2_from_result(inst, &result);
    Ok(InstanceCheck {
        id,
        slack_conditional: result.rhs_conditional - result.imd_value,
        slack_cssd: result.rhs_cssd - result.imd_value,
        slack_marginal: result.rhs_marginal - result.imd_marginal.max(result.imd_value),
        result,
        remark2,
    })
}

/// Checks a batch in parallel; output order follows input order.
pub fn check_batch(instances: &[ImdInstance]) -> Vec<Result<InstanceCheck>> {
    instances
        .par_iter()
        .enumerate()
        .map(|(id, inst)| check_instance(id, inst))
        .collect()
}

/// Random instance: points uniform in the unit square, Euclidean metric,
/// Dirichlet(1) weights with roughly a quarter of the entries zeroed per
/// side (every class keeps mass on both sides), budgets uniform in
/// `[0, 0.5]`.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, m: usize, classes: usize) -> Result<ImdInstance> {
    if classes == 0 || m < classes {
        return Err(Error::Precondition(format!("need m ≥ K ≥ 1, got m = {m}, K = {classes}")));
    }
    let points: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
    let mut class_of: Vec<usize> = (0..m).map(|i| if i < classes { i } else { rng.random_range(0..classes) }).collect();
    // keep the guaranteed class members at random positions
    for i in (1..m).rev() {
        let j = rng.random_range(0..=i);
        class_of.swap(i, j);
    }
    let side = |rng: &mut R| -> Result<Vec<f64>> {
        let mut w = symmetric_dirichlet(rng, m, 1.0)?;
        for v in w.iter_mut() {
            if rng.random_bool(0.25) {
                *v = 0.0;
            }
        }
        for k in 0..classes {
            let members: Vec<usize> = (0..m).filter(|&i| class_of[i] == k).collect();
            if members.iter().all(|&i| w[i] == 0.0) {
                let pick = members[rng.random_range(0..members.len())];
                w[pick] = rng.random_range(0.05..1.0) / m as f64;
            }
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= total);
        Ok(w)
    };
    let p = side(rng)?;
    let q = side(rng)?;
    let epsilons = (0..classes).map(|_| rng.random_range(0.0..=0.5)).collect();
    ImdInstance::euclidean(points, p, q, class_of, epsilons)
}

/// Discrete joint laws over `(point, class)` on a shared finite metric space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointInstance {
    pub points: Vec<Vec<f64>>,
    #[serde(with = "nullable_matrix")]
    pub metric: Vec<Vec<f64>>,
    /// `source[i][k] = P^S(Z = z_i, Y = k)`.
    pub source: Vec<Vec<f64>>,
    pub target: Vec<Vec<f64>>,
}

impl JointInstance {
    pub fn validate(&self) -> Result<()> {
        let m = self.points.len();
        if m == 0 {
            return Err(LpError::InvalidInstance("no points".into()).into());
        }
        let k = self.source.first().map_or(0, Vec::len);
        if k == 0
            || self.source.len() != m
            || self.target.len() != m
            || self.source.iter().chain(&self.target).any(|r| r.len() != k)
        {
            return Err(LpError::InvalidInstance("joint tables must be m×K on both sides".into()).into());
        }
        check_probability("source", &self.source.concat())?;
        check_probability("target", &self.target.concat())?;
        check_metric(&self.metric, m)
    }

    pub fn classes(&self) -> usize {
        self.source[0].len()
    }

    pub fn class_marginals(&self) -> (Vec<f64>, Vec<f64>) {
        let k = self.classes();
        let sum = |t: &[Vec<f64>]| (0..k).map(|y| t.iter().map(|r| r[y]).sum()).collect();
        (sum(&self.source), sum(&self.target))
    }

    fn dist_class(&self, i: usize, table: &[Vec<f64>], y: usize) -> f64 {
        (0..table.len())
            .filter(|&j| table[j][y] > 0.0)
            .map(|j| self.metric[i][j])
            .fold(f64::INFINITY, f64::min)
    }

    /// `Σ_y p_y E_{P|y} d(z, supp Q|y) + q_y E_{Q|y} d(z, supp P|y)`.
    pub fn cssd(&self) -> f64 {
        let mut total = 0.0;
        for (a, b) in [(&self.source, &self.target), (&self.target, &self.source)] {
            for (i, row) in a.iter().enumerate() {
                for (y, &w) in row.iter().enumerate() {
                    if w > 0.0 {
                        total += w * self.dist_class(i, b, y);
                    }
                }
            }
        }
        total
    }

    /// Support divergence of the joints under
    /// `d((z,y),(z',y')) = d(z,z') + label_scale·[y ≠ y']`.
    pub fn joint_ssd(&self, label_scale: f64) -> f64 {
        let k = self.classes();
        let mut total = 0.0;
        for (a, b) in [(&self.source, &self.target), (&self.target, &self.source)] {
            for (i, row) in a.iter().enumerate() {
                for (y, &w) in row.iter().enumerate() {
                    if w > 0.0 {
                        let d = (0..k)
                            .map(|y2| self.dist_class(i, b, y2) + if y2 == y { 0.0 } else { label_scale })
                            .fold(f64::INFINITY, f64::min);
                        total += w * d;
                    }
                }
            }
        }
        total
    }

    pub fn default_label_scale(&self) -> f64 {
        let diam = self.metric.iter().flatten().copied().filter(|d| d.is_finite()).fold(0.0, f64::max);
        10.0 * (1.0 + diam)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Case {
    pub id: usize,
    pub cssd: f64,
    pub joint_ssd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prop1Skip {
    pub id: usize,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub checked: usize,
    pub both_zero: usize,
    pub skipped: Vec<Prop1Skip>,
    pub counterexamples: Vec<Prop1Case>,
}

/// Tests `(cssd = 0) ⇔ (joint_ssd = 0)` on each instance. Instances with a
/// zero class marginal on either side are skipped and listed.
pub fn prop1_check(instances: &[JointInstance]) -> Prop1Report {
    let outcomes: Vec<std::result::Result<Prop1Case, Prop1Skip>> = instances
        .par_iter()
        .enumerate()
        .map(|(id, inst)| {
            if let Err(e) = inst.validate() {
                return Err(Prop1Skip { id, reason: e.to_string() });
            }
            let (ps, pt) = inst.class_marginals();
            if let Some(y) = (0..ps.len()).find(|&y| ps[y] <= 0.0 || pt[y] <= 0.0) {
                return Err(Prop1Skip {
                    id,
                    reason: format!("class {y} has zero marginal mass"),
                });
            }
            Ok(Prop1Case {
                id,
                cssd: inst.cssd(),
                joint_ssd: inst.joint_ssd(inst.default_label_scale()),
            })
        })
        .collect();
    let mut report = Prop1Report::default();
    for o in outcomes {
        match o {
            Ok(case) => {
                report.checked += 1;
                let (a, b) = (case.cssd == 0.0, case.joint_ssd == 0.0);
                if a != b {
                    report.counterexamples.push(case);
                } else if a {
                    report.both_zero += 1;
                }
            }
            Err(skip) => report.skipped.push(skip),
        }
    }
    report
}

/// Random joint pair. With `shared_supports` the target reuses the
/// source's `(point, class)` support with fresh weights.
pub fn random_joint_instance<R: Rng + ?Sized>(
    rng: &mut R,
    m: usize,
    classes: usize,
    shared_supports: bool,
) -> Result<JointInstance> {
    if m == 0 || classes == 0 {
        return Err(Error::Precondition("need m ≥ 1 and K ≥ 1".into()));
    }
    let points: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.random::<f64>(), rng.random::<f64>()]).collect();
    let support = |rng: &mut R| {
        let mut s: Vec<Vec<bool>> = (0..m).map(|_| (0..classes).map(|_| rng.random_bool(0.4)).collect()).collect();
        for y in 0..classes {
            if !s.iter().any(|r| r[y]) {
                s[rng.random_range(0..m)][y] = true;
            }
        }
        s
    };
    let weigh = |rng: &mut R, s: &[Vec<bool>]| {
        let mut t: Vec<Vec<f64>> = s
            .iter()
            .map(|r| r.iter().map(|&on| if on { rng.random_range(0.1..1.0) } else { 0.0 }).collect())
            .collect();
        let total: f64 = t.iter().flatten().sum();
        t.iter_mut().flatten().for_each(|v| *v /= total);
        t
    };
    let s_src = support(rng);
    let s_tgt = if shared_supports { s_src.clone() } else { support(rng) };
    let source = weigh(rng, &s_src);
    let target = weigh(rng, &s_tgt);
    let metric = euclidean_metric(&points);
    let inst = JointInstance {
        points,
        metric,
        source,
        target,
    };
    inst.validate()?;
    Ok(inst)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
