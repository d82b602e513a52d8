//! The alternating training loop and its evaluation hooks.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::DomainPair;
use crate::divergences::{self, DivergenceReport, ReportInputs, SampleCloud};
use crate::error::{Error, Result, TensorError};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::models::{self, BoundMlp, Dims, ModelBundle};
use crate::tensor::{Graph, NodeId, Tensor};

use super::config::{Method, TrainConfig};
use super::optim::{clip_joint_norm, warmup_factor, Sgd};

const INIT_STREAM: u64 = 0x696e_6974;
const BATCH_STREAM: u64 = 0x6261_7463;
const VAT_STREAM: u64 = 0x7661_7420;
const EVAL_STREAM: u64 = 0x6576_616c;

/// Mean over classes of within-class recall.
pub fn per_class_accuracy(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    Ok(class_recall(pred, truth, classes)?.iter().sum::<f64>() / classes as f64)
}

pub fn class_recall(pred: &[usize], truth: &[usize], classes: usize) -> Result<Vec<f64>> {
    if truth.is_empty() {
        return Err(Error::Empty("accuracy truth labels"));
    }
    if pred.len() != truth.len() {
        return Err(Error::Precondition(format!("{} predictions for {} labels", pred.len(), truth.len())));
    }
    let mut hits = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (&p, &y) in pred.iter().zip(truth) {
        if y >= classes {
            return Err(Error::Precondition(format!("label {y} outside 0..{classes}")));
        }
        total[y] += 1;
        hits[y] += usize::from(p == y);
    }
    if let Some(k) = total.iter().position(|&n| n == 0) {
        return Err(Error::Precondition(format!("class {k} is absent from the evaluation labels")));
    }
    Ok(hits.iter().zip(&total).map(|(&h, &n)| h as f64 / n as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub losses: LossBreakdown,
    pub lambda_align: f64,
    pub lr: f64,
    /// Spread of the source features; divergences are measured after
    /// dividing both clouds by it.
    pub feature_scale: f64,
    pub per_class_acc: f64,
    pub class_recall: Vec<f64>,
    pub source_acc: f64,
    pub divergences: DivergenceReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub method: Method,
    pub seed: u64,
    pub target_marginal: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    pub final_per_class_acc: f64,
    pub final_class_recall: Vec<f64>,
    pub final_divergences: DivergenceReport,
    pub wall_time_secs: f64,
}

impl RunRecord {
    /// The record with wall time zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Latent features of the evaluation clouds plus the record entry.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub record: EvalRecord,
    pub source_features: Tensor,
    pub source_labels: Vec<usize>,
    pub target_features: Tensor,
    pub target_labels: Vec<usize>,
}

/// Root mean squared distance of the rows to their centroid.
pub fn feature_spread(z: &Tensor) -> f64 {
    let [n, m] = z.shape();
    let mut mean = vec![0.0; m];
    for r in z.row_iter() {
        mean.iter_mut().zip(r).for_each(|(a, v)| *a += v / n as f64);
    }
    let ss: f64 = z
        .row_iter()
        .flat_map(|r| r.iter().zip(&mean).map(|(v, mu)| (v - mu) * (v - mu)))
        .sum();
    (ss / n as f64).sqrt()
}

fn guard(step: usize, term: &str, r: Result<NodeId>) -> Result<NodeId> {
    match r {
        Err(Error::Tensor(TensorError::NonFinite { op })) => Err(Error::NonFiniteLoss {
            step,
            term: format!("{term} ({op})"),
        }),
        other => other,
    }
}

fn finite(step: usize, term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteLoss {
            step,
            term: term.to_string(),
        })
    }
}

/// Discriminator input for one side: `z ⊗ g(x)` under casa, `z` otherwise.
fn disc_input(g: &mut Graph, method: Method, z: NodeId, p: NodeId) -> Result<NodeId> {
    Ok(match method {
        Method::Casa => models::outer_embed(g, z, p)?.node,
        _ => z,
    })
}

struct Forward {
    z: NodeId,
    p: NodeId,
}

fn forward(g: &mut Graph, f: &BoundMlp, c: &BoundMlp, x: &Tensor) -> Result<Forward> {
    let xi = g.constant(x.clone());
    let z = models::extract(g, f, xi)?;
    let p = models::classify(g, c, z)?;
    Ok(Forward { z, p })
}

pub struct Trainer<'a> {
    pub cfg: &'a TrainConfig,
    pub data: &'a DomainPair,
    pub bundle: ModelBundle,
    opt_f: Sgd,
    opt_c: Sgd,
    opt_r: Sgd,
    batch_rng: ChaCha8Rng,
    vat_rng: ChaCha8Rng,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a TrainConfig, data: &'a DomainPair) -> Result<Self> {
        cfg.validate()?;
        if data.classes() < 2 {
            return Err(Error::Precondition("training needs at least two classes".into()));
        }
        let dims = Dims {
            input: data.input_dim(),
            feature: cfg.feature_dim,
            classes: data.classes(),
        };
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed ^ INIT_STREAM);
        let bundle = ModelBundle::init(dims, &cfg.architecture(), cfg.method.conditioning(), &mut init);
        Ok(Self {
            opt_f: Sgd::new(&bundle.extractor, cfg.momentum, cfg.weight_decay),
            opt_c: Sgd::new(&bundle.classifier, cfg.momentum, cfg.weight_decay),
            opt_r: Sgd::new(&bundle.discriminator, cfg.momentum, cfg.weight_decay),
            batch_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ BATCH_STREAM),
            vat_rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ VAT_STREAM),
            cfg,
            data,
            bundle,
        })
    }

    /// Loss weights in force at 0-based step `t`.
    pub fn weights(&self, t: usize) -> LossWeights {
        let c = self.cfg;
        match c.method {
            Method::SourceOnly => LossWeights {
                align: 0.0,
                y: c.lambda_y,
                ce: 0.0,
                v_src: 0.0,
                v_tgt: 0.0,
            },
            _ => LossWeights {
                align: warmup_factor(t, c.align_warmup) * c.lambda_align,
                y: c.lambda_y,
                ce: c.lambda_ce,
                v_src: c.lambda_v_src,
                v_tgt: c.lambda_v_tgt,
            },
        }
    }

    fn sample_batch(&mut self) -> Result<(Tensor, Vec<usize>, Tensor)> {
        let view = self.data.training_view();
        let (ns, nt, b) = (view.source_y.len(), view.target_x.rows(), self.cfg.batch);
        let is: Vec<usize> = (0..b).map(|_| self.batch_rng.random_range(0..ns)).collect();
        let it: Vec<usize> = (0..b).map(|_| self.batch_rng.random_range(0..nt)).collect();
        let xs = view.source_x.select_rows(&is)?;
        let ys = is.iter().map(|&i| view.source_y[i]).collect();
        let xt = view.target_x.select_rows(&it)?;
        Ok((xs, ys, xt))
    }

    /// One discriminator update with `f, c` frozen. Returns `L_d`.
    fn r_step(&mut self, t: usize, xs: &Tensor, xt: &Tensor, lr: f64) -> Result<f64> {
        let method = self.cfg.method;
        let mut g = Graph::new();
        let f = self.bundle.extractor.bind(&mut g, false);
        let c = self.bundle.classifier.bind(&mut g, false);
        let r = self.bundle.discriminator.bind(&mut g, true);
        let s = forward(&mut g, &f, &c, xs)?;
        let q = forward(&mut g, &f, &c, xt)?;
        let ss = disc_input(&mut g, method, s.z, s.p)?;
        let st = disc_input(&mut g, method, q.z, q.p)?;
        let ds = models::discriminate(&mut g, &r, ss)?;
        let dt = models::discriminate(&mut g, &r, st)?;
        let (ws, wt) = match method {
            Method::Casa => (
                Some(models::entropy_weights(g.value(s.p))),
                Some(models::entropy_weights(g.value(q.p))),
            ),
            _ => (None, None),
        };
        let ld = guard(t, "l_d", losses::discriminator_loss(&mut g, ds, dt, ws.as_ref(), wt.as_ref()))?;
        let v = finite(t, "l_d", g.value(ld).item())?;
        g.backward(ld)?;
        let mut grads = r.grads(&g);
        clip_joint_norm(&mut [&mut grads], self.cfg.clip_norm);
        self.opt_r.step(&mut self.bundle.discriminator, &grads, lr);
        Ok(v)
    }

    /// One update of `f, c` with `r` frozen.
    fn fc_step(&mut self, t: usize, xs: &Tensor, ys: &[usize], xt: &Tensor, lr: f64) -> Result<LossBreakdown> {
        let method = self.cfg.method;
        let w = self.weights(t);
        let vat_cfg = self.cfg.vat();
        let mut g = Graph::new();
        let f = self.bundle.extractor.bind(&mut g, true);
        let c = self.bundle.classifier.bind(&mut g, true);
        let r = self.bundle.discriminator.bind(&mut g, false);
        let s = forward(&mut g, &f, &c, xs)?;
        let ly = guard(t, "l_y", losses::source_classification_loss(&mut g, s.p, ys))?;
        let mut br = LossBreakdown {
            l_y: finite(t, "l_y", g.value(ly).item())?,
            ..LossBreakdown::default()
        };
        let mut terms = vec![(w.y, ly)];
        if method != Method::SourceOnly {
            let q = forward(&mut g, &f, &c, xt)?;
            let la = match method {
                Method::DannBaseline => {
                    let zs = g.grad_scale(s.z, -1.0)?;
                    let zt = g.grad_scale(q.z, -1.0)?;
                    let ds = models::discriminate(&mut g, &r, zs)?;
                    let dt = models::discriminate(&mut g, &r, zt)?;
                    guard(t, "l_align", losses::discriminator_loss(&mut g, ds, dt, None, None))?
                }
                _ => {
                    let ss = disc_input(&mut g, method, s.z, s.p)?;
                    let st = disc_input(&mut g, method, q.z, q.p)?;
                    let ds = models::discriminate(&mut g, &r, ss)?;
                    let dt = models::discriminate(&mut g, &r, st)?;
                    guard(t, "l_align", losses::support_alignment_loss(&mut g, ds, dt))?
                }
            };
            let lce = guard(t, "l_ce", losses::target_conditional_entropy(&mut g, q.p))?;
            let lvs = guard(t, "l_v_src", losses::vat_loss(&mut g, &f, &c, xs, &vat_cfg, &mut self.vat_rng))?;
            let lvt = guard(t, "l_v_tgt", losses::vat_loss(&mut g, &f, &c, xt, &vat_cfg, &mut self.vat_rng))?;
            br.l_align = finite(t, "l_align", g.value(la).item())?;
            br.l_ce = finite(t, "l_ce", g.value(lce).item())?;
            br.l_v_src = finite(t, "l_v_src", g.value(lvs).item())?;
            br.l_v_tgt = finite(t, "l_v_tgt", g.value(lvt).item())?;
            terms.extend([(w.align, la), (w.ce, lce), (w.v_src, lvs), (w.v_tgt, lvt)]);
        }
        let mut total: Option<NodeId> = None;
        for (wt, node) in terms {
            let scaled = g.scale(node, wt)?;
            total = Some(match total {
                None => scaled,
                Some(acc) => g.add(acc, scaled)?,
            });
        }
        let total = total.expect("at least the source term");
        br.total_fc = finite(t, "total_fc", g.value(total).item())?;
        let expected = br.weighted_fc(&w);
        if (br.total_fc - expected).abs() > 1e-12 * expected.abs().max(1.0) {
            return Err(Error::Precondition(format!(
                "loss bookkeeping drift at step {t}: {} vs {expected}",
                br.total_fc
            )));
        }
        g.backward(total)?;
        let mut gf = f.grads(&g);
        let mut gc = c.grads(&g);
        clip_joint_norm(&mut [&mut gf, &mut gc], self.cfg.clip_norm);
        self.opt_f.step(&mut self.bundle.extractor, &gf, lr);
        self.opt_c.step(&mut self.bundle.classifier, &gc, lr);
        Ok(br)
    }

    /// One alternating iteration at 0-based step `t`. Any non-finite value
    /// met along the way aborts with [`Error::NonFiniteLoss`] at `t`.
    pub fn step(&mut self, t: usize) -> Result<LossBreakdown> {
        match self.step_inner(t) {
            Err(Error::Tensor(TensorError::NonFinite { op })) => Err(Error::NonFiniteLoss {
                step: t,
                term: op.to_string(),
            }),
            other => other,
        }
    }

    fn step_inner(&mut self, t: usize) -> Result<LossBreakdown> {
        let lr = self.cfg.lr * self.cfg.schedule().factor(t);
        let (xs, ys, xt) = self.sample_batch()?;
        let mut l_d = 0.0;
        if self.cfg.method != Method::SourceOnly {
            let fc_before = ModelBundle::fingerprint(&[&self.bundle.extractor, &self.bundle.classifier]);
            l_d = self.r_step(t, &xs, &xt, lr)?;
            let fc_after = ModelBundle::fingerprint(&[&self.bundle.extractor, &self.bundle.classifier]);
            assert_eq!(fc_before, fc_after, "discriminator update touched f or c");
        }
        let r_before = ModelBundle::fingerprint(&[&self.bundle.discriminator]);
        let mut br = self.fc_step(t, &xs, &ys, &xt, lr)?;
        let r_after = ModelBundle::fingerprint(&[&self.bundle.discriminator]);
        assert_eq!(r_before, r_after, "f, c update touched the discriminator");
        br.l_d = l_d;
        br.total_r = l_d;
        Ok(br)
    }

    /// Metrics on the held-out target split after `step` completed steps.
    pub fn evaluate(&self, step: usize, losses: LossBreakdown) -> Result<Evaluation> {
        let classes = self.data.classes();
        let ev = self.data.evaluation_view();
        let (zt_raw, pt) = self.bundle.predict(ev.target_test_x)?;
        let pred_t = pt.argmax_rows();
        let recall = class_recall(&pred_t, ev.target_test_y, classes)?;
        let acc = recall.iter().sum::<f64>() / classes as f64;

        let src_all = SampleCloud::labeled(self.data.source.x.clone(), self.data.source.y.clone(), classes)?;
        let src = divergences::subsample(&src_all, self.cfg.eval_samples, self.cfg.seed ^ EVAL_STREAM)?;
        let (zs_raw, ps) = self.bundle.predict(&src.points)?;
        let scale = feature_spread(&zs_raw);
        let unit = |z: &Tensor| if scale > 0.0 { z.map(|v| v / scale) } else { z.clone() };
        let (zs, zt) = (unit(&zs_raw), unit(&zt_raw));
        let ys = src.labels.clone().expect("labeled");
        let pred_s = ps.argmax_rows();
        let source_acc = pred_s.iter().zip(&ys).filter(|(a, b)| a == b).count() as f64 / ys.len() as f64;

        // equal seeds and sizes keep the same rows on both label sets
        let seed_t = self.cfg.seed ^ EVAL_STREAM ^ 1;
        let tgt = divergences::subsample(&SampleCloud::labeled(zt.clone(), ev.target_test_y.to_vec(), classes)?, self.cfg.eval_samples, seed_t)?;
        let tgt_pseudo = divergences::subsample(&SampleCloud::labeled(zt, pred_t, classes)?, self.cfg.eval_samples, seed_t)?;
        let src_cloud = SampleCloud::labeled(zs.clone(), ys.clone(), classes)?;
        let src_pseudo = SampleCloud::labeled(zs.clone(), pred_s, classes)?;
        let report = divergences::report(&ReportInputs {
            source: &src_cloud,
            target: &tgt,
            source_pseudo: &src_pseudo,
            target_pseudo: &tgt_pseudo,
            label_scale: None,
            seed: self.cfg.seed ^ EVAL_STREAM,
        })?;
        let t = step.saturating_sub(1);
        Ok(Evaluation {
            record: EvalRecord {
                step,
                losses,
                lambda_align: self.weights(t).align,
                lr: self.cfg.lr * self.cfg.schedule().factor(t),
                feature_scale: scale,
                per_class_acc: acc,
                class_recall: recall,
                source_acc,
                divergences: report,
            },
            source_features: zs,
            source_labels: ys,
            target_features: tgt.points,
            target_labels: tgt.labels.expect("labeled"),
        })
    }
}

/// Output of [`train`]: the trained models, the record and the final
/// evaluation's feature clouds.
pub struct TrainOutput {
    pub bundle: ModelBundle,
    pub record: RunRecord,
    pub last: Evaluation,
}

pub fn train(cfg: &TrainConfig, data: &DomainPair) -> Result<TrainOutput> {
    let start = Instant::now();
    let mut tr = Trainer::new(cfg, data)?;
    let mut evals = Vec::new();
    let mut last = None;
    for t in 0..cfg.steps {
        let br = tr.step(t)?;
        let done = t + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            let e = tr.evaluate(done, br)?;
            evals.push(e.record.clone());
            last = Some(e);
        }
    }
    let last = last.expect("the final step is always evaluated");
    let record = RunRecord {
        config_hash: cfg.hash(),
        method: cfg.method,
        seed: cfg.seed,
        target_marginal: data.target_marginal.clone(),
        final_per_class_acc: last.record.per_class_acc,
        final_class_recall: last.record.class_recall.clone(),
        final_divergences: last.record.divergences.clone(),
        evals,
        wall_time_secs: start.elapsed().as_secs_f64(),
    };
    Ok(TrainOutput {
        bundle: tr.bundle,
        record,
        last,
    })
}
