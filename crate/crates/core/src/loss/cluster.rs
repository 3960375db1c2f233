//! Cluster-level contrastive loss over the columns of soft-assignment
//! matrices, regularized by the entropy of the cluster marginals.
//!
//! For a view pair `(x, y)` with `N x M` row-stochastic matrices, column `i`
//! of `x` and column `i` of `y` are the positive pair; the `2M - 2` other
//! columns of both views are negatives:
//!
//! ```text
//! l_i^x = -log( e^{s(x_i,y_i)/τ} / (Σ_{j≠i} e^{s(x_i,x_j)/τ} + Σ_j e^{s(x_i,y_j)/τ}) )
//! L̂    = (1/2M) Σ_i (l_i^x + l_i^y) − H(Q)
//! ```

use serde::{Deserialize, Serialize};

use super::LossError;
use crate::numerics::{Graph, Real, Tensor, Var};

/// Softmax temperature, validated finite and positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self, LossError> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Self(tau))
        } else {
            Err(LossError::Temperature(tau))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(0.5)
    }
}

impl TryFrom<f64> for Temperature {
    type Error = LossError;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusterLossOptions {
    /// Keep the within-view self term `e^{s(x_i,x_i)/τ}` in the denominator.
    pub include_self_term: bool,
    /// Subtract the marginal entropy `H(Q)`.
    pub use_entropy: bool,
}

impl Default for ClusterLossOptions {
    fn default() -> Self {
        Self {
            include_self_term: false,
            use_entropy: true,
        }
    }
}

/// Soft assignments of the three views, each `N x M`.
#[derive(Debug, Clone, Copy)]
pub struct ClusterMatrices {
    pub q_a: Var,
    pub q_b: Var,
    pub q_c: Var,
}

/// The parts of one view-pair loss.
#[derive(Debug, Clone, Copy)]
pub struct ClusterPairTerms {
    /// `(1/2M) Σ_i (l_i^x + l_i^y)`
    pub infonce: Var,
    pub entropy: Var,
    /// `infonce − entropy` (or `infonce` when entropy is disabled)
    pub total: Var,
}

fn check_pair<T: Real>(g: &Graph<T>, qx: Var, qy: Var) -> Result<(usize, usize), LossError> {
    let (sx, sy) = (g.value(qx).shape(), g.value(qy).shape());
    if sx.len() != 2 || sx != sy {
        return Err(LossError::Numerics(crate::numerics::NumericsError::ShapeMismatch {
            op: "cluster pair",
            left: sx.to_vec(),
            right: sy.to_vec(),
        }));
    }
    let (n, m) = (sx[0], sx[1]);
    if m < 2 {
        return Err(LossError::TooSmall {
            what: "cluster count",
            min: 2,
            got: m,
        });
    }
    if n < 1 {
        return Err(LossError::TooSmall {
            what: "batch rows",
            min: 1,
            got: n,
        });
    }
    Ok((n, m))
}

/// `S[i, j] = cos(qx[:, i], qy[:, j])`, an `M x M` matrix.
pub fn column_similarity<T: Real>(g: &mut Graph<T>, qx: Var, qy: Var) -> Result<Var, LossError> {
    check_pair(g, qx, qy)?;
    let tx = g.transpose(qx);
    let nx = g.normalize_rows(tx);
    let ty = g.transpose(qy);
    let ny = g.normalize_rows(ty);
    let nyt = g.transpose(ny);
    Ok(g.matmul(nx, nyt)?)
}

/// `H(Q) = −Σ_i [P(x_i) log P(x_i) + P(y_i) log P(y_i)]` where `P` is the
/// column mass divided by the total mass of the matrix.
pub fn assignment_entropy<T: Real>(g: &mut Graph<T>, qx: Var, qy: Var) -> Result<Var, LossError> {
    check_pair(g, qx, qy)?;
    let hx = marginal_neg_entropy(g, qx)?;
    let hy = marginal_neg_entropy(g, qy)?;
    let s = g.add(hx, hy)?;
    Ok(g.scale(s, T::of(-1.0)))
}

fn marginal_neg_entropy<T: Real>(g: &mut Graph<T>, q: Var) -> Result<Var, LossError> {
    let col = g.sum_cols(q);
    let total = g.sum(q);
    let p = g.div_scalar(col, total)?;
    let plogp = g.xlogx(p);
    Ok(g.sum(plogp))
}

/// InfoNCE over cluster columns for one view pair, minus the marginal
/// entropy when enabled.
pub fn cluster_infonce_pair<T: Real>(
    g: &mut Graph<T>,
    qx: Var,
    qy: Var,
    tau: Temperature,
    opts: ClusterLossOptions,
) -> Result<ClusterPairTerms, LossError> {
    let (_, m) = check_pair(g, qx, qy)?;
    let inv_tau = T::of(1.0 / tau.get());
    let s_xy = column_similarity(g, qx, qy)?;
    let s_xx = column_similarity(g, qx, qx)?;
    let s_yy = column_similarity(g, qy, qy)?;

    let mut eye = Tensor::zeros(&[m, m]);
    let mut off_diag = Tensor::filled(&[m, m], T::one());
    for i in 0..m {
        eye.data_mut()[i * m + i] = T::one();
        off_diag.data_mut()[i * m + i] = T::zero();
    }
    let within_mask = if opts.include_self_term {
        Tensor::filled(&[m, m], T::one())
    } else {
        off_diag
    };

    let xy_scaled = g.scale(s_xy, inv_tau);
    let e_xy = g.exp(xy_scaled);
    let cross_x = g.sum_rows(e_xy);
    // rows of S_yx are the columns of S_xy
    let cross_y = g.sum_cols(e_xy);

    let within = |g: &mut Graph<T>, s: Var| -> Result<Var, LossError> {
        let scaled = g.scale(s, inv_tau);
        let e = g.exp(scaled);
        let masked = g.mul_const(e, within_mask.clone())?;
        Ok(g.sum_rows(masked))
    };
    let within_x = within(g, s_xx)?;
    let within_y = within(g, s_yy)?;

    let denom_x = g.add(cross_x, within_x)?;
    let denom_y = g.add(cross_y, within_y)?;
    let log_x = g.log(denom_x);
    let log_y = g.log(denom_y);
    let sum_log_x = g.sum(log_x);
    let sum_log_y = g.sum(log_y);
    let log_terms = g.add(sum_log_x, sum_log_y)?;

    let diag = g.mul_const(xy_scaled, eye)?;
    let pos = g.sum(diag);
    let pos2 = g.scale(pos, T::of(2.0));
    let summed = g.sub(log_terms, pos2)?;
    let infonce = g.scale(summed, T::of(1.0 / (2 * m) as f64));

    let entropy = assignment_entropy(g, qx, qy)?;
    let total = if opts.use_entropy {
        g.sub(infonce, entropy)?
    } else {
        infonce
    };
    Ok(ClusterPairTerms {
        infonce,
        entropy,
        total,
    })
}

/// `L_cluster = L̂(a, b) + L̂(b, c)`, each pair with its own entropy term.
pub fn cluster_loss<T: Real>(
    g: &mut Graph<T>,
    m: &ClusterMatrices,
    tau: Temperature,
    opts: ClusterLossOptions,
) -> Result<Var, LossError> {
    let ab = cluster_infonce_pair(g, m.q_a, m.q_b, tau, opts)?;
    let bc = cluster_infonce_pair(g, m.q_b, m.q_c, tau, opts)?;
    Ok(g.add(ab.total, bc.total)?)
}
