//! Online and target networks: backbone, projector, instance predictor and
//! cluster predictor.
//!
//! The online network owns every head; the target network is the same
//! topology without the instance predictor. Parameters are registered in a
//! fixed order (backbone, projector, cluster predictor, instance predictor),
//! so the target parameter list is a strict prefix of the online list.

mod checkpoint;

pub use checkpoint::{
    decode_archive, encode_archive, load_checkpoint, peek_dtype, save_checkpoint, Archive,
    CheckpointError, ARCHIVE_MAGIC, ARCHIVE_VERSION,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Graph, NumericsError, Real, Tensor, Var};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: expected {expected:?}, got {got:?}")]
    Input { expected: Vec<usize>, got: Vec<usize> },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneArch {
    TinyCnn,
    Resnet34Shaped,
}

/// Backbone topology. For `tiny-cnn`, `channels` are the widths of the first
/// three conv blocks and the fourth block maps to `feature_dim`. For
/// `resnet34-shaped`, `channels` are the four stage widths and
/// `feature_dim` must equal the last one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSpec {
    pub arch: BackboneArch,
    pub input_resolution: usize,
    pub channels: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            arch: BackboneArch::TinyCnn,
            input_resolution: 16,
            channels: vec![32, 64, 128],
            feature_dim: 128,
        }
    }
}

const RESNET34_BLOCKS: [usize; 4] = [3, 4, 6, 3];

impl BackboneSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.feature_dim == 0 || self.channels.contains(&0) {
            return bad("backbone widths must be > 0".into());
        }
        match self.arch {
            BackboneArch::TinyCnn => {
                if self.channels.len() != 3 {
                    return bad(format!("tiny-cnn needs 3 channel widths, got {}", self.channels.len()));
                }
                if self.input_resolution < 8 {
                    return bad(format!(
                        "tiny-cnn needs input_resolution >= 8, got {}",
                        self.input_resolution
                    ));
                }
            }
            BackboneArch::Resnet34Shaped => {
                if self.channels.len() != 4 {
                    return bad(format!(
                        "resnet34-shaped needs 4 stage widths, got {}",
                        self.channels.len()
                    ));
                }
                if self.feature_dim != self.channels[3] {
                    return bad("resnet34-shaped feature_dim must equal the last stage width".into());
                }
                if self.input_resolution < 1 {
                    return bad("input_resolution must be > 0".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadNorm {
    None,
    /// Per-sample layer normalization; never couples samples in a batch.
    #[default]
    Layer,
}

/// Widths of the MLP heads. `projection_dim` is the output width of the
/// projector and of the instance predictor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadSpec {
    pub projection_dim: usize,
    pub projector_hidden: usize,
    pub predictor_hidden: usize,
    pub cluster_hidden: usize,
    pub norm: HeadNorm,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            projection_dim: 256,
            projector_hidden: 512,
            predictor_hidden: 512,
            cluster_hidden: 512,
            norm: HeadNorm::Layer,
        }
    }
}

/// Everything needed to rebuild a network's parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub backbone: BackboneSpec,
    pub heads: HeadSpec,
    pub clusters: usize,
}

impl Default for ArchSpec {
    fn default() -> Self {
        Self {
            backbone: BackboneSpec::default(),
            heads: HeadSpec::default(),
            clusters: 4,
        }
    }
}

impl ArchSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.backbone.validate()?;
        if self.clusters < 2 {
            return Err(ModelError::Config(format!(
                "clusters must be >= 2, got {}",
                self.clusters
            )));
        }
        let h = &self.heads;
        if [h.projection_dim, h.projector_hidden, h.predictor_hidden, h.cluster_hidden].contains(&0) {
            return Err(ModelError::Config("head widths must be > 0".into()));
        }
        Ok(())
    }
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// First `n` entries.
    pub fn prefix(&self, n: usize) -> Self {
        Self {
            names: self.names[..n].to_vec(),
            tensors: self.tensors[..n].to_vec(),
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn convert<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::convert).collect(),
        }
    }

    /// Registers every tensor on `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone(), trainable)).collect()
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Online parameters θ and target parameters ξ.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub arch: ArchSpec,
    pub online: ParamSet<T>,
    pub target: ParamSet<T>,
}

impl<T: Real> NetworkParams<T> {
    pub fn network(&self) -> Network {
        Network::new(&self.arch).expect("params always carry a validated arch")
    }

    pub fn convert<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch.clone(),
            online: self.online.convert(),
            target: self.target.convert(),
        }
    }
}

#[derive(Debug, Clone)]
struct Conv {
    weight: usize,
    bias: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
enum Block {
    /// conv, relu, optional 2x2 average pool
    Plain { conv: Conv, pool: bool },
    Residual {
        first: Conv,
        second: Conv,
        shortcut: Option<Conv>,
    },
}

#[derive(Debug, Clone)]
struct Linear {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Mlp {
    first: Linear,
    norm: Option<(usize, usize)>,
    second: Linear,
}

/// Parameter layout of the online network; see [`Network::target_len`].
#[derive(Debug, Clone)]
pub struct Network {
    arch: ArchSpec,
    blocks: Vec<Block>,
    projector: Mlp,
    cluster: Mlp,
    predictor: Mlp,
    shapes: Vec<(String, Vec<usize>, usize)>,
    target_len: usize,
}

/// Outputs of one stream for a batch.
#[derive(Debug, Clone, Copy)]
pub struct StreamOutput {
    /// projector output, `N x projection_dim`
    pub z: Var,
    /// instance-predictor output (online streams only)
    pub y: Option<Var>,
    /// cluster soft assignments, `N x M`, rows sum to 1
    pub q: Var,
    pub logits: Var,
}

struct LayoutBuilder {
    shapes: Vec<(String, Vec<usize>, usize)>,
}

impl LayoutBuilder {
    /// Registers a parameter with its shape and fan-in (0 for constants
    /// initialized to zero, 1 for layer-norm gains).
    fn add(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        self.shapes.push((name, shape, fan_in));
        self.shapes.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Conv {
        let fan_in = kernel * kernel * cin;
        Conv {
            weight: self.add(format!("{name}.weight"), vec![fan_in, cout], fan_in),
            bias: self.add(format!("{name}.bias"), vec![cout], 0),
            kernel,
            stride,
            pad: kernel / 2,
        }
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Linear {
        Linear {
            weight: self.add(format!("{name}.weight"), vec![fin, fout], fin),
            bias: self.add(format!("{name}.bias"), vec![fout], 0),
        }
    }

    fn mlp(&mut self, name: &str, fin: usize, hidden: usize, fout: usize, norm: bool) -> Mlp {
        let first = self.linear(&format!("{name}.fc1"), fin, hidden);
        let norm = norm.then(|| {
            (
                self.add(format!("{name}.norm.gain"), vec![hidden], 1),
                self.add(format!("{name}.norm.bias"), vec![hidden], 0),
            )
        });
        let second = self.linear(&format!("{name}.fc2"), hidden, fout);
        Mlp { first, norm, second }
    }
}

impl Network {
    pub fn new(arch: &ArchSpec) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut b = LayoutBuilder { shapes: Vec::new() };
        let bb = &arch.backbone;
        let mut blocks = Vec::new();
        match bb.arch {
            BackboneArch::TinyCnn => {
                let widths = [3, bb.channels[0], bb.channels[1], bb.channels[2], bb.feature_dim];
                for i in 0..4 {
                    blocks.push(Block::Plain {
                        conv: b.conv(&format!("backbone.block{i}.conv"), widths[i], widths[i + 1], 3, 1),
                        pool: i < 3,
                    });
                }
            }
            BackboneArch::Resnet34Shaped => {
                let stem = bb.channels[0];
                blocks.push(Block::Plain {
                    conv: b.conv("backbone.stem", 3, stem, 3, 1),
                    pool: false,
                });
                let mut cin = stem;
                for (stage, (&count, &width)) in RESNET34_BLOCKS.iter().zip(&bb.channels).enumerate() {
                    for k in 0..count {
                        let stride = if stage > 0 && k == 0 { 2 } else { 1 };
                        let name = format!("backbone.stage{stage}.block{k}");
                        let first = b.conv(&format!("{name}.conv1"), cin, width, 3, stride);
                        let second = b.conv(&format!("{name}.conv2"), width, width, 3, 1);
                        let shortcut = (stride != 1 || cin != width)
                            .then(|| b.conv(&format!("{name}.shortcut"), cin, width, 1, stride));
                        blocks.push(Block::Residual {
                            first,
                            second,
                            shortcut,
                        });
                        cin = width;
                    }
                }
            }
        }
        let h = &arch.heads;
        let norm = h.norm == HeadNorm::Layer;
        let projector = b.mlp("projector", bb.feature_dim, h.projector_hidden, h.projection_dim, norm);
        let cluster = b.mlp("cluster", h.projection_dim, h.cluster_hidden, arch.clusters, false);
        let target_len = b.shapes.len();
        let predictor = b.mlp("predictor", h.projection_dim, h.predictor_hidden, h.projection_dim, norm);
        Ok(Self {
            arch: arch.clone(),
            blocks,
            projector,
            cluster,
            predictor,
            shapes: b.shapes,
            target_len,
        })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    /// Number of leading online parameters that the target network mirrors.
    pub fn target_len(&self) -> usize {
        self.target_len
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.shapes.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn param_shapes(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.shapes.iter().map(|(n, s, _)| (n.as_str(), s.as_slice()))
    }

    /// Fan-in scaled uniform initialization (`U(±sqrt(6 / fan_in))`) for
    /// weights, zero biases and unit layer-norm gains. The target starts as
    /// an exact copy of the corresponding online parameters.
    pub fn init<T: Real>(&self, seed: u64) -> NetworkParams<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut online = ParamSet::new();
        for (name, shape, fan_in) in &self.shapes {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match fan_in {
                0 => vec![T::zero(); n],
                1 if name.ends_with(".gain") => vec![T::one(); n],
                &f => {
                    let bound = (6.0 / f as f64).sqrt();
                    (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
                }
            };
            online.push(name.clone(), Tensor::new(shape.clone(), data).expect("layout shape"));
        }
        let target = online.prefix(self.target_len);
        NetworkParams {
            arch: self.arch.clone(),
            online,
            target,
        }
    }

    /// Checks that `params` matches this layout name by name and shape.
    pub fn check_params<T: Real>(&self, set: &ParamSet<T>, with_predictor: bool) -> Result<(), ModelError> {
        let expected = if with_predictor {
            self.shapes.len()
        } else {
            self.target_len
        };
        if set.len() != expected {
            return Err(ModelError::Config(format!(
                "expected {expected} parameter tensors, found {}",
                set.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in self.shapes.iter().zip(set.iter()) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {got_name} {:?} does not match layout {name} {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    fn conv<T: Real>(g: &mut Graph<T>, p: &[Var], c: &Conv, x: Var) -> Result<Var, ModelError> {
        Ok(g.conv2d(x, p[c.weight], p[c.bias], c.kernel, c.stride, c.pad)?)
    }

    fn linear<T: Real>(g: &mut Graph<T>, p: &[Var], l: &Linear, x: Var) -> Result<Var, ModelError> {
        let m = g.matmul(x, p[l.weight])?;
        Ok(g.add_bias(m, p[l.bias])?)
    }

    fn mlp<T: Real>(g: &mut Graph<T>, p: &[Var], m: &Mlp, x: Var) -> Result<Var, ModelError> {
        let mut h = Self::linear(g, p, &m.first, x)?;
        if let Some((gain, bias)) = m.norm {
            h = g.layer_norm(h, p[gain], p[bias])?;
        }
        let h = g.relu(h);
        Self::linear(g, p, &m.second, h)
    }

    /// Backbone features `f(x)`, `N x feature_dim`.
    pub fn features<T: Real>(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Result<Var, ModelError> {
        let res = self.arch.backbone.input_resolution;
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != res || shape[2] != res || shape[3] != 3 {
            return Err(ModelError::Input {
                expected: vec![shape.first().copied().unwrap_or(0), res, res, 3],
                got: shape,
            });
        }
        let mut h = x;
        for block in &self.blocks {
            h = match block {
                Block::Plain { conv, pool } => {
                    let c = Self::conv(g, p, conv, h)?;
                    let r = g.relu(c);
                    if *pool {
                        g.avg_pool2(r)?
                    } else {
                        r
                    }
                }
                Block::Residual {
                    first,
                    second,
                    shortcut,
                } => {
                    let c1 = Self::conv(g, p, first, h)?;
                    let r1 = g.relu(c1);
                    let c2 = Self::conv(g, p, second, r1)?;
                    let skip = match shortcut {
                        Some(s) => Self::conv(g, p, s, h)?,
                        None => h,
                    };
                    let sum = g.add(c2, skip)?;
                    g.relu(sum)
                }
            };
        }
        Ok(g.global_avg_pool(h)?)
    }

    /// One stream: `z = g(f(x))`, `y = predictor(z)` when requested,
    /// `q = softmax(cluster(z))`.
    ///
    /// `p` must hold the online parameters when `with_predictor` is set, and
    /// may hold only the target prefix otherwise.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        p: &[Var],
        x: Var,
        with_predictor: bool,
    ) -> Result<StreamOutput, ModelError> {
        let f = self.features(g, p, x)?;
        let z = Self::mlp(g, p, &self.projector, f)?;
        let y = if with_predictor {
            Some(Self::mlp(g, p, &self.predictor, z)?)
        } else {
            None
        };
        let logits = Self::mlp(g, p, &self.cluster, z)?;
        let q = g.softmax_rows(logits);
        Ok(StreamOutput { z, y, q, logits })
    }
}

/// Value-level outputs of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardValues<T> {
    pub z: Tensor<T>,
    pub y: Option<Tensor<T>>,
    pub q: Tensor<T>,
    pub logits: Tensor<T>,
}

fn run_stream<T: Real>(
    params: &NetworkParams<T>,
    set: &ParamSet<T>,
    x: &Tensor<T>,
    with_predictor: bool,
) -> Result<ForwardValues<T>, ModelError> {
    let net = params.network();
    let mut g = Graph::new();
    let p = set.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let out = net.forward(&mut g, &p, xv, with_predictor)?;
    Ok(ForwardValues {
        z: g.value(out.z).clone(),
        y: out.y.map(|y| g.value(y).clone()),
        q: g.value(out.q).clone(),
        logits: g.value(out.logits).clone(),
    })
}

/// Online stream with θ: returns `z`, `y` and `q`.
pub fn forward_online<T: Real>(params: &NetworkParams<T>, x: &Tensor<T>) -> Result<ForwardValues<T>, ModelError> {
    run_stream(params, &params.online, x, true)
}

/// Target stream with ξ: returns `z` and `q`, detached.
pub fn forward_target<T: Real>(params: &NetworkParams<T>, x: &Tensor<T>) -> Result<ForwardValues<T>, ModelError> {
    run_stream(params, &params.target, x, false)
}

/// Row-wise argmax with ties resolved to the lowest index.
pub fn argmax_rows<T: Real>(q: &Tensor<T>) -> Vec<usize> {
    let (n, m) = q.dims2();
    (0..n)
        .map(|r| {
            let row = q.row(r);
            let mut best = 0;
            for j in 1..m {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Cluster labels from the target network's cluster predictor.
pub fn assign_clusters<T: Real>(
    params: &NetworkParams<T>,
    set: &ParamSet<T>,
    x: &Tensor<T>,
    batch_size: usize,
) -> Result<Vec<usize>, ModelError> {
    let n = x.shape().first().copied().unwrap_or(0);
    let inner: usize = x.shape()[1..].iter().product();
    let mut labels = Vec::with_capacity(n);
    let step = batch_size.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + step).min(n);
        let mut shape = x.shape().to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, x.data()[start * inner..end * inner].to_vec())?;
        let out = run_stream(params, set, &chunk, false)?;
        labels.extend(argmax_rows(&out.logits));
        start = end;
    }
    Ok(labels)
}
