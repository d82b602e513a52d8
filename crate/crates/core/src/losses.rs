//! Loss terms of the alternating objective.
//!
//! Classes are 0-based indices throughout the crate.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::models::{classify_logits, extract, BoundMlp, DISC_PROB_CLAMP};
use crate::tensor::{Graph, NodeId, Tensor};

/// Lower clamp for probabilities entering a log in the classifier losses.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub align: f64,
    pub y: f64,
    pub ce: f64,
    pub v_src: f64,
    pub v_tgt: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_y: f64,
    pub l_ce: f64,
    pub l_v_src: f64,
    pub l_v_tgt: f64,
    pub l_d: f64,
    pub l_align: f64,
    pub total_fc: f64,
    pub total_r: f64,
}

impl LossBreakdown {
    pub fn weighted_fc(&self, w: &LossWeights) -> f64 {
        w.y * self.l_y + w.align * self.l_align + w.ce * self.l_ce + w.v_src * self.l_v_src + w.v_tgt * self.l_v_tgt
    }

    pub fn terms(&self) -> [(&'static str, f64); 8] {
        [
            ("l_y", self.l_y),
            ("l_ce", self.l_ce),
            ("l_v_src", self.l_v_src),
            ("l_v_tgt", self.l_v_tgt),
            ("l_d", self.l_d),
            ("l_align", self.l_align),
            ("total_fc", self.total_fc),
            ("total_r", self.total_r),
        ]
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Precondition(format!("label {y} outside 0..{classes}")));
        }
        data[i * classes + y] = 1.0;
    }
    Ok(Tensor::new(labels.len(), classes, data)?)
}

/// `-(1/n) Σ ln p[i, y_i]` with probabilities clamped at [`PROB_FLOOR`].
pub fn source_classification_loss(g: &mut Graph, p: NodeId, labels: &[usize]) -> Result<NodeId> {
    if labels.is_empty() {
        return Err(Error::Empty("source batch"));
    }
    let [n, k] = g.value(p).shape();
    if n != labels.len() {
        return Err(Error::Precondition(format!("{n} predictions for {} labels", labels.len())));
    }
    let hot = g.constant(one_hot(labels, k)?);
    let pc = g.clamp(p, PROB_FLOOR, 1.0)?;
    let lp = g.ln(pc)?;
    let picked = g.mul(lp, hot)?;
    let s = g.sum(picked)?;
    Ok(g.scale(s, -1.0 / n as f64)?)
}

/// Mean Shannon entropy of the rows of `p`, in nats.
pub fn target_conditional_entropy(g: &mut Graph, p: NodeId) -> Result<NodeId> {
    let n = g.value(p).rows();
    let pc = g.clamp(p, PROB_FLOOR, 1.0)?;
    let lp = g.ln(pc)?;
    let plp = g.mul(p, lp)?;
    let s = g.sum(plp)?;
    Ok(g.scale(s, -1.0 / n as f64)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VatConfig {
    /// Radius of the perturbation ball.
    pub eps_ball: f64,
    /// Probe length for the finite-difference power iteration.
    pub xi: f64,
    pub n_power: usize,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            eps_ball: 0.1,
            xi: 1e-6,
            n_power: 1,
        }
    }
}

fn normalize_rows(t: &mut Tensor) -> Vec<bool> {
    let k = t.cols();
    t.data_mut()
        .chunks_exact_mut(k)
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-300 {
                r.iter_mut().for_each(|v| *v /= norm);
                true
            } else {
                false
            }
        })
        .collect()
}

fn log_probs(g: &mut Graph, f: &BoundMlp, c: &BoundMlp, x: NodeId) -> Result<NodeId, TensorError> {
    let z = extract(g, f, x)?;
    let logits = classify_logits(g, c, z)?;
    g.log_softmax_rows(logits)
}

/// Row-wise `KL(p ‖ q)` averaged over rows, where `p = exp(ref_logp)` is a
/// constant and `q` comes from `logq`.
fn mean_kl(g: &mut Graph, ref_logp: &Tensor, logq: NodeId) -> Result<NodeId, TensorError> {
    let n = ref_logp.rows();
    let p = g.constant(ref_logp.map(f64::exp));
    let lp = g.constant(ref_logp.clone());
    let diff = g.sub(lp, logq)?;
    let terms = g.mul(p, diff)?;
    let s = g.sum(terms)?;
    g.scale(s, 1.0 / n as f64)
}

/// Clean log-probabilities `ln g(x)` computed without trainable leaves.
pub fn reference_log_probs(g: &Graph, f: &BoundMlp, c: &BoundMlp, x: &Tensor) -> Result<Tensor> {
    let mut scratch = Graph::new();
    let fs = f.detached_copy(g, &mut scratch);
    let cs = c.detached_copy(g, &mut scratch);
    let xi = scratch.constant(x.clone());
    let lp = log_probs(&mut scratch, &fs, &cs, xi)?;
    Ok(scratch.value(lp).clone())
}

/// Adversarial perturbation `r_adv`, one row per sample with norm
/// `eps_ball`, found by power iteration on the KL curvature starting from a
/// seeded Gaussian direction.
pub fn vat_perturbation<R: Rng>(
    g: &Graph,
    f: &BoundMlp,
    c: &BoundMlp,
    x: &Tensor,
    ref_logp: &Tensor,
    cfg: &VatConfig,
    rng: &mut R,
) -> Result<Tensor> {
    if !(cfg.eps_ball >= 0.0) {
        return Err(Error::Precondition(format!("eps_ball {} must be >= 0", cfg.eps_ball)));
    }
    let [n, d] = x.shape();
    let mut dir = Tensor::new(n, d, (0..n * d).map(|_| rng.sample(StandardNormal)).collect())?;
    normalize_rows(&mut dir);
    for _ in 0..cfg.n_power {
        let mut scratch = Graph::new();
        let fs = f.detached_copy(g, &mut scratch);
        let cs = c.detached_copy(g, &mut scratch);
        let xi = scratch.constant(x.clone());
        let probe = scratch.leaf(dir.map(|v| v * cfg.xi));
        let xp = scratch.add(xi, probe)?;
        let lq = log_probs(&mut scratch, &fs, &cs, xp)?;
        let kl = mean_kl(&mut scratch, ref_logp, lq)?;
        scratch.backward(kl)?;
        let mut next = scratch.grad(probe).unwrap_or_else(|| Tensor::zeros(n, d));
        let ok = normalize_rows(&mut next);
        // rows with a vanishing gradient keep their previous direction
        for (i, keep) in ok.iter().enumerate() {
            if !keep {
                let k = d;
                let prev = dir.row(i).to_vec();
                next.data_mut()[i * k..(i + 1) * k].copy_from_slice(&prev);
            }
        }
        dir = next;
    }
    Ok(dir.map(|v| v * cfg.eps_ball))
}

/// `mean_i KL(g(x_i) ‖ g(x_i + r_i))` with the first argument held constant.
pub fn vat_divergence(
    g: &mut Graph,
    f: &BoundMlp,
    c: &BoundMlp,
    x: &Tensor,
    r_adv: &Tensor,
    ref_logp: &Tensor,
) -> Result<NodeId> {
    let shifted = Tensor::new(
        x.rows(),
        x.cols(),
        x.data().iter().zip(r_adv.data()).map(|(a, b)| a + b).collect(),
    )?;
    let xa = g.constant(shifted);
    let lq = log_probs(g, f, c, xa)?;
    Ok(mean_kl(g, ref_logp, lq)?)
}

/// Virtual adversarial loss on `g = c ∘ f` for the batch `x`.
pub fn vat_loss<R: Rng>(
    g: &mut Graph,
    f: &BoundMlp,
    c: &BoundMlp,
    x: &Tensor,
    cfg: &VatConfig,
    rng: &mut R,
) -> Result<NodeId> {
    let ref_logp = reference_log_probs(g, f, c, x)?;
    let r_adv = vat_perturbation(g, f, c, x, &ref_logp, cfg, rng)?;
    vat_divergence(g, f, c, x, &r_adv, &ref_logp)
}

fn weighted_neg_log_mean(g: &mut Graph, probs: NodeId, w: Option<&Tensor>) -> Result<NodeId> {
    let n = g.value(probs).rows();
    let pc = g.clamp(probs, DISC_PROB_CLAMP, 1.0 - DISC_PROB_CLAMP)?;
    let lp = g.ln(pc)?;
    match w {
        None => {
            let m = g.mean(lp)?;
            Ok(g.scale(m, -1.0)?)
        }
        Some(w) => {
            if w.shape() != [n, 1] {
                return Err(TensorError::Shape {
                    op: "discriminator_loss",
                    left: [n, 1],
                    right: w.shape(),
                }
                .into());
            }
            let total: f64 = w.data().iter().sum();
            let wn = g.constant(w.clone());
            let t = g.mul(lp, wn)?;
            let s = g.sum(t)?;
            Ok(g.scale(s, -1.0 / total)?)
        }
    }
}

/// Log-loss of the domain discriminator, source labelled 1 and target 0.
/// Optional per-sample weights are renormalised by their sum on each side.
pub fn discriminator_loss(
    g: &mut Graph,
    src: NodeId,
    tgt: NodeId,
    src_w: Option<&Tensor>,
    tgt_w: Option<&Tensor>,
) -> Result<NodeId> {
    for (id, side) in [(src, "source discriminator outputs"), (tgt, "target discriminator outputs")] {
        if g.value(id).cols() != 1 {
            return Err(Error::Precondition(format!("{side} must be a column")));
        }
    }
    let ls = weighted_neg_log_mean(g, src, src_w)?;
    let one_minus = g.scale(tgt, -1.0)?;
    let one_minus = g.add_scalar(one_minus, 1.0)?;
    let lt = weighted_neg_log_mean(g, one_minus, tgt_w)?;
    Ok(g.add(ls, lt)?)
}

/// Index of the nearest value in `pool` for each entry of `query`, ties to
/// the lowest index.
pub fn nearest_indices(query: &[f64], pool: &[f64]) -> Vec<usize> {
    query
        .iter()
        .map(|&a| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, &b) in pool.iter().enumerate() {
                let d = (a - b).abs();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Symmetric 1-D point-to-set distance between two columns of
/// discriminator outputs. Nearest indices are fixed from the current
/// values; gradient flows into both columns through the matched pairs.
pub fn support_alignment_loss(g: &mut Graph, src: NodeId, tgt: NodeId) -> Result<NodeId> {
    let a = g.value(src).data().to_vec();
    let b = g.value(tgt).data().to_vec();
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("alignment side"));
    }
    if g.value(src).cols() != 1 || g.value(tgt).cols() != 1 {
        return Err(Error::Precondition("alignment inputs must be columns".into()));
    }
    let one_side = |g: &mut Graph, q: NodeId, pool: NodeId, idx: Vec<usize>| -> Result<NodeId> {
        let matched = g.select_rows(pool, &idx)?;
        let diff = g.sub(q, matched)?;
        let ad = g.abs(diff)?;
        Ok(g.mean(ad)?)
    };
    let s_side = one_side(g, src, tgt, nearest_indices(&a, &b))?;
    let t_side = one_side(g, tgt, src, nearest_indices(&b, &a))?;
    Ok(g.add(s_side, t_side)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, Conditioning, Dims, ModelBundle};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(v.len(), 1, v.to_vec()).unwrap()
    }

    fn eval1(build: impl Fn(&mut Graph) -> NodeId) -> f64 {
        let mut g = Graph::new();
        let id = build(&mut g);
        g.value(id).item()
    }

    #[test]
    fn classification_loss_cases() {
        let perfect = eval1(|g| {
            let p = g.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap());
            source_classification_loss(g, p, &[0, 2]).unwrap()
        });
        assert_eq!(perfect, 0.0);
        let uniform = eval1(|g| {
            let p = g.constant(Tensor::filled(4, 10, 0.1));
            source_classification_loss(g, p, &[0, 3, 9, 5]).unwrap()
        });
        assert_abs_diff_eq!(uniform, 10f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(uniform, 2.302585, epsilon = 1e-6);
        let hand = eval1(|g| {
            let p = g.constant(Tensor::from_rows(&[[0.5, 0.25, 0.25]]).unwrap());
            source_classification_loss(g, p, &[1]).unwrap()
        });
        assert_abs_diff_eq!(hand, 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(hand, 1.386294, epsilon = 1e-6);

        let mut g = Graph::new();
        let p = g.constant(Tensor::filled(1, 3, 1.0 / 3.0));
        assert!(matches!(source_classification_loss(&mut g, p, &[]), Err(Error::Empty(_))));
        assert!(source_classification_loss(&mut g, p, &[3]).is_err());
    }

    #[test]
    fn conditional_entropy_cases() {
        let zero = eval1(|g| {
            let p = g.constant(Tensor::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap());
            target_conditional_entropy(g, p).unwrap()
        });
        assert_eq!(zero, 0.0);
        let uni = eval1(|g| {
            let p = g.constant(Tensor::filled(3, 9, 1.0 / 9.0));
            target_conditional_entropy(g, p).unwrap()
        });
        assert_abs_diff_eq!(uni, 9f64.ln(), epsilon = 1e-12);
        let skew = eval1(|g| {
            let p = g.constant(Tensor::from_rows(&[[0.9, 0.1]]).unwrap());
            target_conditional_entropy(g, p).unwrap()
        });
        assert_abs_diff_eq!(skew, 0.3251, epsilon = 1e-4);
    }

    #[test]
    fn discriminator_loss_cases() {
        let half = eval1(|g| {
            let s = g.constant(col(&[0.5, 0.5]));
            let t = g.constant(col(&[0.5]));
            discriminator_loss(g, s, t, None, None).unwrap()
        });
        assert_abs_diff_eq!(half, 2.0 * 2f64.ln(), epsilon = 1e-12);
        let floor = eval1(|g| {
            let s = g.constant(col(&[1.0]));
            let t = g.constant(col(&[0.0]));
            discriminator_loss(g, s, t, None, None).unwrap()
        });
        assert_abs_diff_eq!(floor, -2.0 * (1.0 - DISC_PROB_CLAMP).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(floor, 2e-6, epsilon = 1e-11);
        let hand = eval1(|g| {
            let s = g.constant(col(&[0.8]));
            let t = g.constant(col(&[0.3]));
            discriminator_loss(g, s, t, None, None).unwrap()
        });
        assert_abs_diff_eq!(hand, -(0.8f64.ln()) - 0.7f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(hand, 0.5798, epsilon = 1e-4);
    }

    #[test]
    fn weighted_discriminator_loss_renormalises() {
        // equal weights reproduce the unweighted loss
        let w = col(&[1.7, 1.7]);
        let a = eval1(|g| {
            let s = g.constant(col(&[0.8, 0.6]));
            let t = g.constant(col(&[0.3, 0.1]));
            discriminator_loss(g, s, t, Some(&w), Some(&w)).unwrap()
        });
        let b = eval1(|g| {
            let s = g.constant(col(&[0.8, 0.6]));
            let t = g.constant(col(&[0.3, 0.1]));
            discriminator_loss(g, s, t, None, None).unwrap()
        });
        assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        let w2 = col(&[2.0, 1.0]);
        let c = eval1(|g| {
            let s = g.constant(col(&[0.8, 0.6]));
            let t = g.constant(col(&[0.3]));
            discriminator_loss(g, s, t, Some(&w2), None).unwrap()
        });
        let expect = -(2.0 * 0.8f64.ln() + 0.6f64.ln()) / 3.0 - 0.7f64.ln();
        assert_abs_diff_eq!(c, expect, epsilon = 1e-14);
    }

    #[test]
    fn alignment_loss_cases() {
        let same = eval1(|g| {
            let s = g.constant(col(&[0.1, 0.4, 0.9]));
            let t = g.constant(col(&[0.9, 0.1, 0.4]));
            support_alignment_loss(g, s, t).unwrap()
        });
        assert_eq!(same, 0.0);
        let hand = eval1(|g| {
            let s = g.constant(col(&[0.9]));
            let t = g.constant(col(&[0.2, 0.5]));
            support_alignment_loss(g, s, t).unwrap()
        });
        assert_abs_diff_eq!(hand, 0.95, epsilon = 1e-12);
        let mut g = Graph::new();
        let s = g.constant(col(&[0.9]));
        assert!(g.slice_rows(s, 0, 0).is_err());
    }

    #[test]
    fn nearest_ties_go_to_lowest_index() {
        assert_eq!(nearest_indices(&[0.5], &[0.4, 0.6, 0.4]), vec![0]);
    }

    fn tiny_bundle(seed: u64, zero: bool) -> ModelBundle {
        let dims = Dims {
            input: 4,
            feature: 3,
            classes: 3,
        };
        let arch = Architecture {
            extractor_hidden: vec![6],
            discriminator_hidden: vec![4],
            slope: 0.1,
        };
        if zero {
            ModelBundle::zeros(dims, &arch, Conditioning::Outer)
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ModelBundle::init(dims, &arch, Conditioning::Outer, &mut rng)
        }
    }

    fn vat_value(b: &ModelBundle, x: &Tensor, cfg: &VatConfig, seed: u64) -> f64 {
        let mut g = Graph::new();
        let f = b.extractor.bind(&mut g, true);
        let c = b.classifier.bind(&mut g, true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = vat_loss(&mut g, &f, &c, x, cfg, &mut rng).unwrap();
        g.value(l).item()
    }

    fn batch(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(n, 4, (0..n * 4).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
    }

    #[test]
    fn vat_zero_cases() {
        let x = batch(1, 5);
        let cfg = VatConfig {
            eps_ball: 0.7,
            ..VatConfig::default()
        };
        assert_eq!(vat_value(&tiny_bundle(0, true), &x, &cfg, 3), 0.0);
        let cfg0 = VatConfig {
            eps_ball: 0.0,
            ..VatConfig::default()
        };
        assert_eq!(vat_value(&tiny_bundle(2, false), &x, &cfg0, 3), 0.0);
    }

    #[test]
    fn vat_is_deterministic_given_seed() {
        let x = batch(4, 6);
        let b = tiny_bundle(7, false);
        let cfg = VatConfig::default();
        assert_eq!(vat_value(&b, &x, &cfg, 11), vat_value(&b, &x, &cfg, 11));
    }

    #[test]
    fn vat_dominates_random_search() {
        let cfg = VatConfig {
            eps_ball: 0.5,
            xi: 1e-6,
            n_power: 1,
        };
        for seed in 0..5 {
            let b = tiny_bundle(100 + seed, false);
            let x = batch(200 + seed, 8);
            let adv = vat_value(&b, &x, &cfg, seed);

            // oracle: one shared random unit direction for the whole batch
            let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
            let mut best = 0.0f64;
            for _ in 0..100 {
                let mut u: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                u.iter_mut().for_each(|v| *v *= cfg.eps_ball / norm);
                let r = Tensor::new(8, 4, (0..8).flat_map(|_| u.clone()).collect()).unwrap();
                let mut g = Graph::new();
                let f = b.extractor.bind(&mut g, false);
                let c = b.classifier.bind(&mut g, false);
                let lp = reference_log_probs(&g, &f, &c, &x).unwrap();
                let l = vat_divergence(&mut g, &f, &c, &x, &r, &lp).unwrap();
                best = best.max(g.value(l).item());
            }
            assert!(adv >= best - 1e-6, "seed {seed}: power iteration {adv} < random search {best}");
        }
    }

    proptest! {
        #[test]
        fn alignment_symmetric_and_permutation_invariant(
            a in proptest::collection::vec(0.0f64..1.0, 1..8),
            b in proptest::collection::vec(0.0f64..1.0, 1..8),
            rot in 0usize..8,
        ) {
            let v = |s: &[f64], t: &[f64]| eval1(|g| {
                let s = g.constant(col(s));
                let t = g.constant(col(t));
                support_alignment_loss(g, s, t).unwrap()
            });
            let base = v(&a, &b);
            prop_assert!(base >= 0.0);
            prop_assert!((base - v(&b, &a)).abs() < 1e-12);
            let mut ar = a.clone();
            ar.rotate_left(rot % a.len());
            let mut br = b.clone();
            br.reverse();
            prop_assert!((base - v(&ar, &br)).abs() < 1e-12);
            prop_assert_eq!(v(&a, &a), 0.0);
        }
    }
}
