//! Training: overall loss, Adam on θ, EMA on ξ, epoch loop, checkpoints
//! and ablations.

mod ablation;
mod optim;
mod run;

pub use ablation::{median, run_ablation, run_variant, write_ablation_csv, AblationRow, Variant};
pub use optim::{ema_update, OptimConfig, OptimState};
pub use run::{
    curves_csv, epoch_log_path, eval_params, evaluate_params, final_model_path, load_state, parse_epoch_log,
    train_run, EpochRecord, Evaluation, RunOptions, RunOutput, EPOCH_LOG, SUMMARY_CSV,
};

use serde::{Deserialize, Serialize};

use crate::augment::{images_to_tensor, make_views, AugmentError, AugmentPolicy, Image, ViewTriple};
use crate::loss::{
    cluster_infonce_pair, cluster_loss, pair_loss, symmetrized_instance_loss, ClusterLossOptions,
    ClusterMatrices, ExchangeMode, InstanceLossInputs, LossError, MirroredInputs, Temperature,
};
use crate::metrics::{MetricsError, NmiNorm};
use crate::model::{ArchSpec, CheckpointError, ModelError, Network, NetworkParams, ParamSet};
use crate::numerics::{Gradients, Graph, NumericsError, Real, Tensor, Var};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },
    #[error("non-finite training step: {0}")]
    NonFinite(Box<StepDiagnostics>),
    #[error("training state: {0}")]
    State(String),
    #[error("{path}: {message}")]
    Io { path: std::path::PathBuf, message: String },
    #[error("epoch log line {line}: {message}")]
    Log { line: usize, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

fn config_err(field: &str, message: impl Into<String>) -> TrainError {
    TrainError::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Loss components and per-parameter gradient norms of a failed step.
#[derive(Debug, Clone)]
pub struct StepDiagnostics {
    pub instance: f64,
    pub cluster: f64,
    pub total: f64,
    pub grad_norms: Vec<(String, f64)>,
}

impl std::fmt::Display for StepDiagnostics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "instance={} cluster={} total={}",
            self.instance, self.cluster, self.total
        )?;
        for (name, n) in self.grad_norms.iter().filter(|(_, n)| !n.is_finite()) {
            write!(f, "; |grad {name}|={n}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// online a, c and target b
    #[default]
    Tri,
    /// online a and target b
    DualOnlineTarget,
    /// two weight-shared online streams a and c, no target network
    DualOnlineOnline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSwitches {
    pub stream_mode: StreamMode,
    pub use_instance_loss: bool,
    pub use_cluster_loss: bool,
    pub use_predictor: bool,
    pub use_stop_gradient: bool,
    /// subtract `H(Q)` inside the cluster loss
    pub use_entropy: bool,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        Self {
            stream_mode: StreamMode::Tri,
            use_instance_loss: true,
            use_cluster_loss: true,
            use_predictor: true,
            use_stop_gradient: true,
            use_entropy: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    /// f64, for replayable runs and checks
    Fixed,
    /// f32
    #[default]
    Fast,
}

/// How the EMA momentum evolves over a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaSchedule {
    /// `ema_alpha` throughout
    #[default]
    Constant,
    /// `1 − (1 − ema_alpha)(cos(πk/K) + 1)/2` at step `k` of `K`, reaching 1
    Cosine,
}

/// Everything that determines a training run apart from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: Temperature,
    /// EMA momentum α
    pub ema_alpha: f64,
    pub ema_schedule: EmaSchedule,
    pub precision: Precision,
    pub exchange: ExchangeMode,
    pub include_self_term: bool,
    pub nmi_norm: NmiNorm,
    /// checkpoint every K epochs (0: only at the end)
    pub checkpoint_every: usize,
    pub eval_batch_size: usize,
    pub model: ArchSpec,
    pub optimizer: OptimConfig,
    pub augment: AugmentPolicy,
    pub ablation: AblationSwitches,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 200,
            batch_size: 128,
            temperature: Temperature::default(),
            ema_alpha: 0.99,
            ema_schedule: EmaSchedule::Constant,
            precision: Precision::Fast,
            exchange: ExchangeMode::Exchange,
            include_self_term: false,
            nmi_norm: NmiNorm::Arithmetic,
            checkpoint_every: 50,
            eval_batch_size: 256,
            model: ArchSpec::default(),
            optimizer: OptimConfig::default(),
            augment: AugmentPolicy::default(),
            ablation: AblationSwitches::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(config_err("batch_size", format!("must be >= 2, got {}", self.batch_size)));
        }
        if self.eval_batch_size == 0 {
            return Err(config_err("eval_batch_size", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return Err(config_err("ema_alpha", format!("must lie in [0, 1], got {}", self.ema_alpha)));
        }
        self.optimizer.validate().map_err(|m| config_err("optimizer", m))?;
        self.augment.validate().map_err(|e| config_err("augment", e.to_string()))?;
        self.model.validate().map_err(|e| config_err("model", e.to_string()))?;
        if self.augment.output_size != self.model.backbone.input_resolution {
            return Err(config_err(
                "augment.output_size",
                format!(
                    "must equal model.backbone.input_resolution ({}), got {}",
                    self.model.backbone.input_resolution, self.augment.output_size
                ),
            ));
        }
        let sw = &self.ablation;
        if !sw.use_instance_loss && !sw.use_cluster_loss {
            return Err(config_err("ablation", "at least one of use_instance_loss and use_cluster_loss must be set"));
        }
        Ok(())
    }

    /// EMA momentum after optimizer step `step` (1-based) of `total`; an
    /// unknown total (0) falls back to the constant value.
    pub fn ema_alpha_at(&self, step: u64, total: u64) -> f64 {
        match self.ema_schedule {
            EmaSchedule::Cosine if total > 0 => {
                let t = (step as f64 / total as f64).min(1.0);
                1.0 - (1.0 - self.ema_alpha) * ((std::f64::consts::PI * t).cos() + 1.0) / 2.0
            }
            _ => self.ema_alpha,
        }
    }

    /// Optimizer steps in one epoch over `n` images; a trailing batch of
    /// one is skipped.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n / self.batch_size + usize::from(n % self.batch_size >= 2)
    }

    pub fn cluster_options(&self) -> ClusterLossOptions {
        ClusterLossOptions {
            include_self_term: self.include_self_term,
            use_entropy: self.ablation.use_entropy,
        }
    }
}

/// Parameters plus optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub params: NetworkParams<T>,
    pub online_opt: OptimState<T>,
    /// only present when ξ is trained by gradient (no stop-gradient)
    pub target_opt: Option<OptimState<T>>,
    /// completed epochs
    pub epoch: usize,
    /// optimizer steps planned for the whole run (0 when unknown)
    pub total_steps: u64,
    network: Network,
}

impl<T: Real> TrainState<T> {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let network = Network::new(&cfg.model)?;
        let params = network.init(cfg.seed);
        Ok(Self::from_params(cfg, params, network))
    }

    fn from_params(cfg: &TrainConfig, params: NetworkParams<T>, network: Network) -> Self {
        let online_opt = OptimState::new(&params.online);
        let target_opt = target_is_trained(cfg).then(|| OptimState::new(&params.target));
        Self {
            params,
            online_opt,
            target_opt,
            epoch: 0,
            total_steps: 0,
            network,
        }
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    /// Parameters used for cluster assignment.
    pub fn eval_set(&self, cfg: &TrainConfig) -> ParamSet<T> {
        eval_params(&self.params, cfg)
    }
}

fn target_is_trained(cfg: &TrainConfig) -> bool {
    !cfg.ablation.use_stop_gradient && cfg.ablation.stream_mode != StreamMode::DualOnlineOnline
}

/// Scalar losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLosses {
    pub instance: f64,
    pub cluster: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
struct Stream {
    z: Var,
    y: Var,
    q: Var,
}

/// Runs one parameter set over several views in a single batched pass and
/// splits the outputs per view.
fn forward_views<T: Real>(
    g: &mut Graph<T>,
    net: &Network,
    params: &[Var],
    views: &[&Tensor<T>],
    predictor: bool,
) -> Result<Vec<Stream>, TrainError> {
    let n = views[0].shape()[0];
    let inputs: Vec<Var> = views.iter().map(|v| g.constant((*v).clone())).collect();
    let x = if inputs.len() == 1 {
        inputs[0]
    } else {
        g.concat_rows(&inputs)?
    };
    let out = net.forward(g, params, x, predictor)?;
    let mut streams = Vec::with_capacity(views.len());
    for k in 0..views.len() {
        let (lo, hi) = (k * n, (k + 1) * n);
        let z = g.slice_rows(out.z, lo, hi)?;
        let q = g.slice_rows(out.q, lo, hi)?;
        let y = match out.y {
            Some(y) => g.slice_rows(y, lo, hi)?,
            None => z,
        };
        streams.push(Stream { z, y, q });
    }
    Ok(streams)
}

/// Graph nodes of one step's objective.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub instance: Option<Var>,
    pub cluster: Option<Var>,
    pub total: Var,
}

/// Online (θ) and target (ξ) leaves on a graph.
pub struct BoundParams {
    pub online: Vec<Var>,
    pub target: Vec<Var>,
}

/// Builds the step objective for `views` on `g`. Target leaves are trainable
/// only when stop-gradient is off.
pub fn build_objective<T: Real>(
    g: &mut Graph<T>,
    net: &Network,
    params: &NetworkParams<T>,
    cfg: &TrainConfig,
    views: (&Tensor<T>, &Tensor<T>, &Tensor<T>),
) -> Result<(LossVars, BoundParams), TrainError> {
    let sw = cfg.ablation;
    let (xa, xb, xc) = views;
    let theta = params.online.bind(g, true);
    let uses_target = sw.stream_mode != StreamMode::DualOnlineOnline;
    let xi = if uses_target {
        params.target.bind(g, !sw.use_stop_gradient)
    } else {
        Vec::new()
    };
    let exchange = cfg.exchange == ExchangeMode::Exchange;
    let tau = cfg.temperature;
    let opts = cfg.cluster_options();

    let (instance, cluster) = match sw.stream_mode {
        StreamMode::Tri => {
            let online_views: Vec<&Tensor<T>> = if exchange { vec![xa, xc, xb] } else { vec![xa, xc] };
            let on = forward_views(g, net, &theta, &online_views, sw.use_predictor)?;
            let target_views: Vec<&Tensor<T>> = if exchange { vec![xb, xa, xc] } else { vec![xb] };
            let tg = forward_views(g, net, &xi, &target_views, false)?;
            let inst = if sw.use_instance_loss {
                let inputs = InstanceLossInputs {
                    y_a: on[0].y,
                    y_c: on[1].y,
                    z_b: tg[0].z,
                };
                let mirrored = exchange.then(|| MirroredInputs {
                    y_b: on[2].y,
                    z_a: tg[1].z,
                    z_c: tg[2].z,
                });
                Some(symmetrized_instance_loss(g, &inputs, mirrored.as_ref(), cfg.exchange)?)
            } else {
                None
            };
            let clu = if sw.use_cluster_loss {
                let m = ClusterMatrices {
                    q_a: on[0].q,
                    q_b: tg[0].q,
                    q_c: on[1].q,
                };
                Some(cluster_loss(g, &m, tau, opts)?)
            } else {
                None
            };
            (inst, clu)
        }
        StreamMode::DualOnlineTarget => {
            let online_views: Vec<&Tensor<T>> = if exchange { vec![xa, xb] } else { vec![xa] };
            let on = forward_views(g, net, &theta, &online_views, sw.use_predictor)?;
            let target_views: Vec<&Tensor<T>> = if exchange { vec![xb, xa] } else { vec![xb] };
            let tg = forward_views(g, net, &xi, &target_views, false)?;
            let inst = if sw.use_instance_loss {
                let ab = pair_loss(g, on[0].y, tg[0].z)?;
                Some(if exchange {
                    let ba = pair_loss(g, on[1].y, tg[1].z)?;
                    g.add(ab, ba)?
                } else {
                    ab
                })
            } else {
                None
            };
            let clu = if sw.use_cluster_loss {
                Some(cluster_infonce_pair(g, on[0].q, tg[0].q, tau, opts)?.total)
            } else {
                None
            };
            (inst, clu)
        }
        StreamMode::DualOnlineOnline => {
            let on = forward_views(g, net, &theta, &[xa, xc], sw.use_predictor)?;
            let inst = if sw.use_instance_loss {
                let za = g.detach(on[0].z);
                let zc = g.detach(on[1].z);
                let ac = pair_loss(g, on[0].y, zc)?;
                let ca = pair_loss(g, on[1].y, za)?;
                Some(g.add(ac, ca)?)
            } else {
                None
            };
            let clu = if sw.use_cluster_loss {
                Some(cluster_infonce_pair(g, on[0].q, on[1].q, tau, opts)?.total)
            } else {
                None
            };
            (inst, clu)
        }
    };
    let total = match (instance, cluster) {
        (Some(i), Some(c)) => g.add(i, c)?,
        (Some(i), None) => i,
        (None, Some(c)) => c,
        (None, None) => return Err(config_err("ablation", "no loss enabled")),
    };
    Ok((
        LossVars {
            instance,
            cluster,
            total,
        },
        BoundParams {
            online: theta,
            target: xi,
        },
    ))
}

fn collect_grads<T: Real>(
    grads: &mut Gradients<T>,
    vars: &[Var],
    set: &ParamSet<T>,
) -> Vec<Tensor<T>> {
    vars.iter()
        .zip(set.tensors())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

fn grad_norms<T: Real>(set: &ParamSet<T>, grads: &[Tensor<T>], prefix: &str) -> Vec<(String, f64)> {
    set.names()
        .iter()
        .zip(grads)
        .map(|(n, g)| (format!("{prefix}{n}"), g.norm_sq().as_f64().sqrt()))
        .collect()
}

/// One optimization step on already augmented views: gradient of the
/// objective w.r.t. θ, Adam on θ, then EMA of ξ towards θ (or Adam on ξ when
/// stop-gradient is off).
pub fn train_step_on_views<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    views: &ViewTriple,
) -> Result<StepLosses, TrainError> {
    let xa: Tensor<T> = images_to_tensor(&views.a);
    let xb: Tensor<T> = images_to_tensor(&views.b);
    let xc: Tensor<T> = images_to_tensor(&views.c);
    let mut g = Graph::new();
    let (loss, bound) = build_objective(&mut g, &state.network, &state.params, cfg, (&xa, &xb, &xc))?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).data()[0].as_f64());
    let losses = StepLosses {
        instance: value(loss.instance),
        cluster: value(loss.cluster),
        total: value(Some(loss.total)),
    };
    let mut grads = g.backward(loss.total)?;
    let online_grads = collect_grads(&mut grads, &bound.online, &state.params.online);
    let target_grads = state
        .target_opt
        .is_some()
        .then(|| collect_grads(&mut grads, &bound.target, &state.params.target));
    let finite = losses.total.is_finite()
        && online_grads.iter().all(Tensor::all_finite)
        && target_grads.iter().flatten().all(Tensor::all_finite);
    if !finite {
        let mut norms = grad_norms(&state.params.online, &online_grads, "online/");
        if let Some(tg) = &target_grads {
            norms.extend(grad_norms(&state.params.target, tg, "target/"));
        }
        return Err(TrainError::NonFinite(Box::new(StepDiagnostics {
            instance: losses.instance,
            cluster: losses.cluster,
            total: losses.total,
            grad_norms: norms,
        })));
    }

    state.online_opt.update(&cfg.optimizer, &mut state.params.online, &online_grads);
    match (&mut state.target_opt, target_grads) {
        (Some(opt), Some(tg)) => opt.update(&cfg.optimizer, &mut state.params.target, &tg),
        _ if cfg.ablation.stream_mode != StreamMode::DualOnlineOnline => {
            let alpha = cfg.ema_alpha_at(state.online_opt.step, state.total_steps);
            ema_update(&mut state.params.target, &state.params.online, alpha)
        }
        _ => {}
    }
    Ok(losses)
}

/// Augments `batch` into three views using the substream `stream` and takes
/// one step.
pub fn train_step<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    batch: &[Image],
    stream: &[u64],
) -> Result<StepLosses, TrainError> {
    let views = make_views(batch, &cfg.augment, cfg.seed, stream)?;
    train_step_on_views(state, cfg, &views)
}
