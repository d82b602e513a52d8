//! Feature extractor `f`, classifier `c` and discriminator `r`, plus the
//! conditioning embedding fed to `r`.
//!
//! Parameters live outside any graph. Each forward pass binds them into a
//! fresh [`Graph`] (as trainable leaves or as constants) through
//! [`Mlp::bind`], and gradients are read back from the bound ids.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result, TensorError};
use crate::tensor::{Graph, NodeId, Tensor};

/// Probabilities handed to a log are clamped into `[ε, 1-ε]`.
pub const DISC_PROB_CLAMP: f64 = 1e-6;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<TensorRecord> for Tensor {
    type Error = TensorError;

    fn try_from(r: TensorRecord) -> std::result::Result<Self, Self::Error> {
        Tensor::new(r.rows, r.cols, r.data)
    }
}

impl From<Tensor> for TensorRecord {
    fn from(t: Tensor) -> Self {
        TensorRecord {
            rows: t.rows(),
            cols: t.cols(),
            data: t.into_data(),
        }
    }
}

impl Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TensorRecord::from(self.clone()).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = TensorRecord::deserialize(d)?;
        Tensor::try_from(r).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    /// `1 × fan_out`
    pub bias: Tensor,
}

/// Affine layers with leaky-ReLU between them and a linear last layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub slope: f64,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. `sizes` lists every extent from
    /// input to output.
    pub fn init<R: Rng>(sizes: &[usize], slope: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
                let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
                Linear {
                    weight: Tensor::new(fan_in, fan_out, data).expect("positive extents"),
                    bias: Tensor::zeros(1, fan_out),
                }
            })
            .collect();
        Self { layers, slope }
    }

    pub fn zeros(sizes: &[usize], slope: f64) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Linear {
                weight: Tensor::zeros(w[0], w[1]),
                bias: Tensor::zeros(1, w[1]),
            })
            .collect();
        Self { layers, slope }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weight.cols()
    }

    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn num_params(&self) -> usize {
        self.params().map(Tensor::len).sum()
    }

    /// Inserts the parameters into `g`, as trainable leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundMlp {
        let mut put = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let ids = self
            .layers
            .iter()
            .map(|l| (put(&l.weight), put(&l.bias)))
            .collect();
        BoundMlp {
            ids,
            slope: self.slope,
            input_dim: self.input_dim(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    ids: Vec<(NodeId, NodeId)>,
    slope: f64,
    input_dim: usize,
}

impl BoundMlp {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, TensorError> {
        let cols = g.value(x).cols();
        if cols != self.input_dim {
            return Err(TensorError::Shape {
                op: "mlp_forward",
                left: g.value(x).shape(),
                right: [self.input_dim, 0],
            });
        }
        let last = self.ids.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.ids.iter().enumerate() {
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            if i < last {
                h = g.leaky_relu(h, self.slope)?;
            }
        }
        Ok(h)
    }

    /// Gradients in [`Mlp::params`] order; zeros where backward did not reach.
    pub fn grads(&self, g: &Graph) -> Vec<Tensor> {
        self.ids
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .map(|id| g.grad(id).unwrap_or_else(|| Tensor::zeros(g.value(id).rows(), g.value(id).cols())))
            .collect()
    }

    /// Rebinds the values held in `from` as constants of `into`.
    pub fn detached_copy(&self, from: &Graph, into: &mut Graph) -> BoundMlp {
        let ids = self
            .ids
            .iter()
            .map(|&(w, b)| (into.constant(from.value(w).clone()), into.constant(from.value(b).clone())))
            .collect();
        BoundMlp {
            ids,
            slope: self.slope,
            input_dim: self.input_dim,
        }
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        self.ids.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// What the discriminator sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// `s(x) = f(x) ⊗ g(x)`, input extent `m·K`.
    Outer,
    /// `s(x) = f(x)`, input extent `m`.
    Marginal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub input: usize,
    pub feature: usize,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub extractor_hidden: Vec<usize>,
    pub discriminator_hidden: Vec<usize>,
    pub slope: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            extractor_hidden: vec![64, 64],
            discriminator_hidden: vec![64, 64],
            slope: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub dims: Dims,
    pub conditioning: Conditioning,
    pub extractor: Mlp,
    pub classifier: Mlp,
    pub discriminator: Mlp,
}

impl ModelBundle {
    pub fn init<R: Rng>(dims: Dims, arch: &Architecture, conditioning: Conditioning, rng: &mut R) -> Self {
        let f_sizes = Self::sizes(dims.input, &arch.extractor_hidden, dims.feature);
        let c_sizes = [dims.feature, dims.classes];
        let r_in = Self::disc_input(dims, conditioning);
        let r_sizes = Self::sizes(r_in, &arch.discriminator_hidden, 1);
        let extractor = Mlp::init(&f_sizes, arch.slope, rng);
        let classifier = Mlp::init(&c_sizes, arch.slope, rng);
        let discriminator = Mlp::init(&r_sizes, arch.slope, rng);
        Self {
            dims,
            conditioning,
            extractor,
            classifier,
            discriminator,
        }
    }

    pub fn zeros(dims: Dims, arch: &Architecture, conditioning: Conditioning) -> Self {
        let r_in = Self::disc_input(dims, conditioning);
        Self {
            dims,
            conditioning,
            extractor: Mlp::zeros(&Self::sizes(dims.input, &arch.extractor_hidden, dims.feature), arch.slope),
            classifier: Mlp::zeros(&[dims.feature, dims.classes], arch.slope),
            discriminator: Mlp::zeros(&Self::sizes(r_in, &arch.discriminator_hidden, 1), arch.slope),
        }
    }

    fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
        std::iter::once(input).chain(hidden.iter().copied()).chain(std::iter::once(output)).collect()
    }

    pub fn disc_input(dims: Dims, conditioning: Conditioning) -> usize {
        match conditioning {
            Conditioning::Outer => dims.feature * dims.classes,
            Conditioning::Marginal => dims.feature,
        }
    }

    /// Plain forward pass `x ↦ (z, g(x))` with no trainable leaves.
    pub fn predict(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let f = self.extractor.bind(&mut g, false);
        let c = self.classifier.bind(&mut g, false);
        let xi = g.constant(x.clone());
        let z = extract(&mut g, &f, xi)?;
        let p = classify(&mut g, &c, z)?;
        Ok((g.value(z).clone(), g.value(p).clone()))
    }

    /// SHA-256 over the bit patterns of the named parameter group.
    pub fn fingerprint(mlps: &[&Mlp]) -> String {
        let mut h = Sha256::new();
        for m in mlps {
            for t in m.params() {
                for v in t.data() {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            version: CHECKPOINT_VERSION,
            bundle: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&ck)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Precondition(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ck.version
            )));
        }
        let b = ck.bundle;
        if b.discriminator.input_dim() != Self::disc_input(b.dims, b.conditioning)
            || b.extractor.input_dim() != b.dims.input
            || b.extractor.output_dim() != b.dims.feature
            || b.classifier.output_dim() != b.dims.classes
        {
            return Err(Error::Precondition("checkpoint dims disagree with parameter shapes".into()));
        }
        Ok(b)
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    bundle: ModelBundle,
}

/// `f(x)`: `n×d → n×m`.
pub fn extract(g: &mut Graph, f: &BoundMlp, x: NodeId) -> Result<NodeId, TensorError> {
    f.forward(g, x)
}

/// Classifier logits `n×K`.
pub fn classify_logits(g: &mut Graph, c: &BoundMlp, z: NodeId) -> Result<NodeId, TensorError> {
    c.forward(g, z)
}

/// `g(x) = softmax(c(z))`, rows in the simplex.
pub fn classify(g: &mut Graph, c: &BoundMlp, z: NodeId) -> Result<NodeId, TensorError> {
    let logits = c.forward(g, z)?;
    g.softmax_rows(logits)
}

/// Flattened per-row outer product `s_i = z_i ⊗ p_i`.
#[derive(Clone, Copy, Debug)]
pub struct ConditioningEmbedding {
    pub node: NodeId,
    pub features: usize,
    pub classes: usize,
}

impl ConditioningEmbedding {
    /// Row `i` reshaped back to the `m×K` matrix `z_i p_iᵀ`.
    pub fn unflatten(&self, g: &Graph, i: usize) -> Vec<Vec<f64>> {
        g.value(self.node)
            .row(i)
            .chunks_exact(self.classes)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

pub fn outer_embed(g: &mut Graph, z: NodeId, p: NodeId) -> Result<ConditioningEmbedding, TensorError> {
    let (features, classes) = (g.value(z).cols(), g.value(p).cols());
    let node = g.outer_rows(z, p)?;
    Ok(ConditioningEmbedding {
        node,
        features,
        classes,
    })
}

/// `r(s)` as an `n×1` column of probabilities clamped into
/// `[DISC_PROB_CLAMP, 1 - DISC_PROB_CLAMP]`.
pub fn discriminate(g: &mut Graph, r: &BoundMlp, s: NodeId) -> Result<NodeId, TensorError> {
    let logit = r.forward(g, s)?;
    let prob = g.sigmoid(logit)?;
    g.clamp(prob, DISC_PROB_CLAMP, 1.0 - DISC_PROB_CLAMP)
}

/// Shannon entropy (nats) of each row; `0·ln 0 = 0`.
pub fn row_entropy(p: &Tensor) -> Vec<f64> {
    p.row_iter()
        .map(|r| -r.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>())
        .collect()
}

/// Entropy-conditioning weights `w_i = 1 + exp(-H(p_i))`, in `(1, 2]`.
/// Computed on values only, so no gradient flows through them.
pub fn entropy_weights(p: &Tensor) -> Tensor {
    let w = row_entropy(p).into_iter().map(|h| 1.0 + (-h).exp()).collect();
    Tensor::new(p.rows(), 1, w).expect("entropy weights are finite")
}
