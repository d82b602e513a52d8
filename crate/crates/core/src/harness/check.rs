//! Self-check suites run by the `check` and `oracle` subcommands: finite
//! difference gradient checks for every loss, training invariants, and the
//! bound checks on random discrete instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::{make_gaussian_domains_with_marginal, GaussianTask};
use crate::error::Result;
use crate::imd::{self, ImdInstance, JointInstance, Prop1Report, CERT_TOL};
use crate::losses::{self, VatConfig};
use crate::models::{self, BoundMlp, Mlp};
use crate::tensor::{Graph, NodeId, Tensor};

use super::config::{Method, TrainConfig};
use super::train::{train, Trainer};

pub const GRAD_REL_TOL: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-6;
/// Smallest admissible gap between the nearest and second-nearest match,
/// and between matched values, in alignment instances.
pub const TIE_MARGIN: f64 = 1e-4;

type Builder<'a> = dyn Fn(&mut Graph, &[BoundMlp]) -> Result<NodeId> + 'a;

fn loss_value(mlps: &[Mlp], build: &Builder<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let bound: Vec<BoundMlp> = mlps.iter().map(|m| m.bind(&mut g, false)).collect();
    let l = build(&mut g, &bound)?;
    Ok(g.value(l).item())
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Autodiff gradient and central differences over the parameters of the
/// networks flagged in `wrt`.
pub fn compare_gradients(mlps: &[Mlp], wrt: &[bool], build: &Builder<'_>) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let bound: Vec<BoundMlp> = mlps.iter().zip(wrt).map(|(m, &w)| m.bind(&mut g, w)).collect();
    let l = build(&mut g, &bound)?;
    g.backward(l)?;
    let mut auto = Vec::new();
    for (b, _) in bound.iter().zip(wrt).filter(|(_, &w)| w) {
        auto.extend(b.grads(&g).iter().flat_map(|t| t.data().to_vec()));
    }
    let mut fd = Vec::with_capacity(auto.len());
    for (i, _) in wrt.iter().enumerate().filter(|(_, &w)| w) {
        let n_tensors = mlps[i].params().count();
        for j in 0..n_tensors {
            let len = mlps[i].params().nth(j).expect("tensor index").len();
            for e in 0..len {
                let mut probe = mlps.to_vec();
                let theta = probe[i].params().nth(j).expect("tensor index").data()[e];
                probe[i].params_mut().nth(j).expect("tensor index").data_mut()[e] = theta + FD_STEP;
                let up = loss_value(&probe, build)?;
                probe[i].params_mut().nth(j).expect("tensor index").data_mut()[e] = theta - FD_STEP;
                let down = loss_value(&probe, build)?;
                fd.push((up - down) / (2.0 * FD_STEP));
            }
        }
    }
    Ok((auto, fd))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub loss: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub worst_instance: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }
}

/// A small random network triple and batches for one gradient instance.
struct Instance {
    f: Mlp,
    c: Mlp,
    r: Mlp,
    xs: Tensor,
    ys: Vec<usize>,
    xt: Tensor,
}

const IN_DIM: usize = 3;
const FEAT: usize = 4;
const CLASSES: usize = 3;
const BATCH: usize = 5;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
    Tensor::new(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect()).expect("positive extents")
}

fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let slope = 0.1;
    Instance {
        f: Mlp::init(&[IN_DIM, 5, FEAT], slope, rng),
        c: Mlp::init(&[FEAT, CLASSES], slope, rng),
        r: Mlp::init(&[FEAT * CLASSES, 6, 1], slope, rng),
        xs: gaussian(rng, BATCH, IN_DIM),
        ys: (0..BATCH).map(|_| rng.random_range(0..CLASSES)).collect(),
        xt: gaussian(rng, BATCH, IN_DIM),
    }
}

fn zp(g: &mut Graph, f: &BoundMlp, c: &BoundMlp, x: &Tensor) -> Result<(NodeId, NodeId)> {
    let xi = g.constant(x.clone());
    let z = models::extract(g, f, xi)?;
    let p = models::classify(g, c, z)?;
    Ok((z, p))
}

fn disc_outputs(g: &mut Graph, b: &[BoundMlp], xs: &Tensor, xt: &Tensor) -> Result<(NodeId, NodeId, NodeId, NodeId)> {
    let (zs, ps) = zp(g, &b[0], &b[1], xs)?;
    let (zt, pt) = zp(g, &b[0], &b[1], xt)?;
    let ss = models::outer_embed(g, zs, ps)?.node;
    let st = models::outer_embed(g, zt, pt)?.node;
    let ds = models::discriminate(g, &b[2], ss)?;
    let dt = models::discriminate(g, &b[2], st)?;
    Ok((ds, dt, ps, pt))
}

/// Smallest nearest-versus-runner-up gap and smallest matched distance.
fn tie_margins(a: &[f64], b: &[f64]) -> f64 {
    let side = |q: &[f64], pool: &[f64]| {
        q.iter()
            .map(|&v| {
                let mut d: Vec<f64> = pool.iter().map(|&w| (v - w).abs()).collect();
                d.sort_by(f64::total_cmp);
                let gap = if d.len() > 1 { d[1] - d[0] } else { f64::INFINITY };
                gap.min(d[0])
            })
            .fold(f64::INFINITY, f64::min)
    };
    side(a, b).min(side(b, a))
}

fn alignment_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    loop {
        let inst = instance(rng);
        let mut g = Graph::new();
        let b = [inst.f.bind(&mut g, false), inst.c.bind(&mut g, false), inst.r.bind(&mut g, false)];
        let (ds, dt, _, _) = disc_outputs(&mut g, &b, &inst.xs, &inst.xt)?;
        if tie_margins(g.value(ds).data(), g.value(dt).data()) > TIE_MARGIN {
            return Ok(inst);
        }
    }
}

/// Checks `L_y`, `L_ce`, `L_v`, `L_d` and `L_align` on `instances` seeded
/// random problems each.
pub fn gradient_suite(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let names = ["l_y", "l_ce", "l_v", "l_d", "l_align"];
    let mut rows = Vec::new();
    for (li, name) in names.iter().enumerate() {
        let mut worst = (0.0f64, 0usize);
        for i in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add((li * instances + i) as u64));
            let inst = if *name == "l_align" { alignment_instance(&mut rng)? } else { instance(&mut rng) };
            let mlps = [inst.f.clone(), inst.c.clone(), inst.r.clone()];
            let (auto, fd) = match *name {
                "l_y" => compare_gradients(&mlps, &[true, true, false], &|g, b| {
                    let (_, p) = zp(g, &b[0], &b[1], &inst.xs)?;
                    losses::source_classification_loss(g, p, &inst.ys)
                })?,
                "l_ce" => compare_gradients(&mlps, &[true, true, false], &|g, b| {
                    let (_, p) = zp(g, &b[0], &b[1], &inst.xt)?;
                    losses::target_conditional_entropy(g, p)
                })?,
                "l_v" => {
                    // reference and perturbation are held fixed at the base point
                    let mut g0 = Graph::new();
                    let f0 = inst.f.bind(&mut g0, false);
                    let c0 = inst.c.bind(&mut g0, false);
                    let reference = losses::reference_log_probs(&g0, &f0, &c0, &inst.xt)?;
                    let cfg = VatConfig {
                        eps_ball: 0.5,
                        ..VatConfig::default()
                    };
                    let r_adv = losses::vat_perturbation(&g0, &f0, &c0, &inst.xt, &reference, &cfg, &mut rng)?;
                    compare_gradients(&mlps, &[true, true, false], &|g, b| {
                        losses::vat_divergence(g, &b[0], &b[1], &inst.xt, &r_adv, &reference)
                    })?
                }
                "l_d" => {
                    let mut g0 = Graph::new();
                    let b0: Vec<BoundMlp> = mlps.iter().map(|m| m.bind(&mut g0, false)).collect();
                    let (_, _, ps, pt) = disc_outputs(&mut g0, &b0, &inst.xs, &inst.xt)?;
                    let ws = models::entropy_weights(g0.value(ps));
                    let wt = models::entropy_weights(g0.value(pt));
                    compare_gradients(&mlps, &[false, false, true], &|g, b| {
                        let (ds, dt, _, _) = disc_outputs(g, b, &inst.xs, &inst.xt)?;
                        losses::discriminator_loss(g, ds, dt, Some(&ws), Some(&wt))
                    })?
                }
                _ => compare_gradients(&mlps, &[true, true, true], &|g, b| {
                    let (ds, dt, _, _) = disc_outputs(g, b, &inst.xs, &inst.xt)?;
                    losses::support_alignment_loss(g, ds, dt)
                })?,
            };
            let err = relative_error(&auto, &fd);
            if err > worst.0 || err.is_nan() {
                worst = (err, i);
            }
        }
        rows.push(GradCheckRow {
            loss: name.to_string(),
            instances,
            max_rel_err: worst.0,
            worst_instance: worst.1,
            passed: worst.0 < GRAD_REL_TOL,
        });
    }
    Ok(GradCheckReport {
        tolerance: GRAD_REL_TOL,
        rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Short training runs exercising determinism, loss bookkeeping, the
/// warmup schedule and the record invariants.
pub fn invariant_suite(seed: u64) -> Result<Vec<InvariantCheck>> {
    let task = GaussianTask {
        n_source: 150,
        n_target: 150,
        ..GaussianTask::default()
    };
    let data = make_gaussian_domains_with_marginal(&task, &[0.229, 0.647, 0.124], seed)?;
    let cfg = TrainConfig {
        method: Method::Casa,
        steps: 60,
        batch: 16,
        align_warmup: 30,
        anneal_start: 30,
        anneal_end: 60,
        eval_every: 20,
        hidden_width: 16,
        disc_width: 16,
        seed,
        ..TrainConfig::default()
    };
    let mut out = Vec::new();
    let a = train(&cfg, &data)?;
    let b = train(&cfg, &data)?;
    out.push(InvariantCheck {
        name: "determinism".into(),
        passed: a.record.without_timing() == b.record.without_timing() && a.bundle == b.bundle,
        detail: "two runs with one config and seed".into(),
    });

    let tr = Trainer::new(&cfg, &data)?;
    let warm_ok = (0..cfg.steps).all(|t| tr.weights(t).align == (t as f64 / cfg.align_warmup as f64).min(1.0) * cfg.lambda_align);
    out.push(InvariantCheck {
        name: "align_warmup".into(),
        passed: warm_ok,
        detail: format!("effective weight min(1, t/{}) · λ_align", cfg.align_warmup),
    });

    let drift = a
        .record
        .evals
        .iter()
        .map(|e| (e.losses.total_fc - e.losses.weighted_fc(&tr.weights(e.step - 1))).abs())
        .fold(0.0, f64::max);
    out.push(InvariantCheck {
        name: "loss_bookkeeping".into(),
        passed: drift <= 1e-12,
        detail: format!("max |total_fc − Σ λ·L| = {drift:e}"),
    });

    let steps: Vec<usize> = a.record.evals.iter().map(|e| e.step).collect();
    let monotone = steps.windows(2).all(|w| w[0] < w[1]);
    let in_range = a.record.evals.iter().all(|e| (0.0..=1.0).contains(&e.per_class_acc));
    out.push(InvariantCheck {
        name: "record_shape".into(),
        passed: monotone && in_range,
        detail: format!("eval steps {steps:?}"),
    });

    // every step asserts the frozen-group checksums internally
    let mut tr = Trainer::new(&cfg, &data)?;
    for t in 0..cfg.steps {
        tr.step(t)?;
    }
    out.push(InvariantCheck {
        name: "frozen_checksums".into(),
        passed: true,
        detail: format!("{} alternating steps", cfg.steps),
    });
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaSummary {
    pub instances: usize,
    pub solved: usize,
    pub errors: Vec<String>,
    pub conditional_violations: usize,
    pub cssd_violations: usize,
    pub marginal_violations: usize,
    pub remark2_distance_violations: usize,
    pub remark2_sup_violations: usize,
    pub min_slack_conditional: f64,
    pub min_slack_cssd: f64,
    pub min_slack_marginal: f64,
}

impl LemmaSummary {
    pub fn passed(&self) -> bool {
        self.errors.is_empty()
            && self.conditional_violations + self.cssd_violations + self.marginal_violations == 0
            && self.remark2_distance_violations + self.remark2_sup_violations == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSuiteReport {
    pub lemma: LemmaSummary,
    pub prop1: Prop1Report,
}

impl OracleSuiteReport {
    pub fn passed(&self) -> bool {
        self.lemma.passed() && self.prop1.counterexamples.is_empty()
    }
}

/// Random bound-check instances: `m ≤ 20` points, `K ≤ 3` classes.
pub fn random_imd_instances(n: usize, seed: u64) -> Result<Vec<ImdInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.random_range(1..=3);
            let m = rng.random_range(k.max(2)..=20);
            imd::random_instance(&mut rng, m, k)
        })
        .collect()
}

/// Random joint pairs with positive class marginals, half of them sharing
/// supports so both sides of the equivalence are exercised.
pub fn random_joint_instances(n: usize, seed: u64) -> Result<Vec<JointInstance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let k = rng.random_range(1..=3);
            let m = rng.random_range(2..=8);
            imd::random_joint_instance(&mut rng, m, k, i % 2 == 0)
        })
        .collect()
}

pub fn summarize_lemma(checks: &[Result<imd::InstanceCheck>]) -> LemmaSummary {
    let mut s = LemmaSummary {
        instances: checks.len(),
        solved: 0,
        errors: Vec::new(),
        conditional_violations: 0,
        cssd_violations: 0,
        marginal_violations: 0,
        remark2_distance_violations: 0,
        remark2_sup_violations: 0,
        min_slack_conditional: f64::INFINITY,
        min_slack_cssd: f64::INFINITY,
        min_slack_marginal: f64::INFINITY,
    };
    for (i, c) in checks.iter().enumerate() {
        match c {
            Err(e) => s.errors.push(format!("instance {i}: {e}")),
            Ok(c) => {
                s.solved += 1;
                s.conditional_violations += usize::from(c.slack_conditional < -CERT_TOL);
                s.cssd_violations += usize::from(c.slack_cssd < -CERT_TOL);
                s.marginal_violations += usize::from(c.slack_marginal < -CERT_TOL);
                s.remark2_distance_violations += usize::from(!c.remark2.distance_holds);
                s.remark2_sup_violations += usize::from(!c.remark2.sup_holds);
                s.min_slack_conditional = s.min_slack_conditional.min(c.slack_conditional);
                s.min_slack_cssd = s.min_slack_cssd.min(c.slack_cssd);
                s.min_slack_marginal = s.min_slack_marginal.min(c.slack_marginal);
            }
        }
    }
    s
}

pub fn oracle_suite(lemma_instances: usize, joint_instances: usize, seed: u64) -> Result<OracleSuiteReport> {
    let insts = random_imd_instances(lemma_instances, seed)?;
    let lemma = summarize_lemma(&imd::check_batch(&insts));
    let joints = random_joint_instances(joint_instances, seed ^ 0x9e37_79b9)?;
    Ok(OracleSuiteReport {
        lemma,
        prop1: imd::prop1_check(&joints),
    })
}
