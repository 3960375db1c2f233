//! Negative-free instance loss: online predictions regress the normalized
//! target projections of the other view.

use serde::{Deserialize, Serialize};

use super::LossError;
use crate::numerics::{Graph, Real, Var, NORM_EPS};

/// `‖ŷ − ẑ‖² = 2 − 2·cos(y, z)` for two vectors, in `[0, 4]`.
///
/// Norms below the normalization floor are clamped (with a logged warning).
pub fn pairwise_mse<T: Real>(y: &[T], z: &[T]) -> T {
    let eps = T::of(NORM_EPS);
    let ny = y.iter().map(|&a| a * a).sum::<T>().sqrt();
    let nz = z.iter().map(|&a| a * a).sum::<T>().sqrt();
    if ny <= eps || nz <= eps {
        log::warn!("pairwise_mse: near-zero norm, clamping denominator");
    }
    let dot: T = y.iter().zip(z).map(|(&a, &b)| a * b).sum();
    let two = T::of(2.0);
    two - two * dot / (ny.max(eps) * nz.max(eps))
}

/// Online predictions for views a and c and the target projection of view b.
#[derive(Debug, Clone, Copy)]
pub struct InstanceLossInputs {
    pub y_a: Var,
    pub y_c: Var,
    pub z_b: Var,
}

/// Extra tensors for the exchanged pass: view b through the online network
/// and views a, c through the target network.
#[derive(Debug, Clone, Copy)]
pub struct MirroredInputs {
    pub y_b: Var,
    pub z_a: Var,
    pub z_c: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExchangeMode {
    Off,
    #[default]
    Exchange,
}

fn rows<T: Real>(g: &Graph<T>, v: Var) -> usize {
    g.value(v).shape()[0]
}

/// Mean over rows of `2 − 2·cos(y_i, z_i)`.
pub fn pair_loss<T: Real>(g: &mut Graph<T>, y: Var, z: Var) -> Result<Var, LossError> {
    let (ny, nz) = (rows(g, y), rows(g, z));
    if ny != nz {
        return Err(LossError::BatchMismatch {
            what: "instance pair",
            left: ny,
            right: nz,
        });
    }
    if ny == 0 {
        return Err(LossError::TooSmall {
            what: "instance pair rows",
            min: 1,
            got: 0,
        });
    }
    let yn = g.normalize_rows(y);
    let zn = g.normalize_rows(z);
    let prod = g.mul(yn, zn)?;
    let cos = g.sum_rows(prod);
    let mean_cos = g.mean(cos);
    let scaled = g.scale(mean_cos, T::of(-2.0));
    Ok(g.add_scalar(scaled, T::of(2.0)))
}

/// `L_instance = L(y_a, z_b) + L(y_c, z_b)`.
pub fn instance_loss<T: Real>(
    g: &mut Graph<T>,
    inputs: &InstanceLossInputs,
) -> Result<Var, LossError> {
    let ab = pair_loss(g, inputs.y_a, inputs.z_b)?;
    let bc = pair_loss(g, inputs.y_c, inputs.z_b)?;
    Ok(g.add(ab, bc)?)
}

/// Instance loss with optional online/target view exchange.
///
/// In `Exchange` mode the mirrored terms `L(y_b, z_a) + L(y_b, z_c)` are
/// added; `mirrored` must then be provided.
pub fn symmetrized_instance_loss<T: Real>(
    g: &mut Graph<T>,
    inputs: &InstanceLossInputs,
    mirrored: Option<&MirroredInputs>,
    mode: ExchangeMode,
) -> Result<Var, LossError> {
    let base = instance_loss(g, inputs)?;
    match (mode, mirrored) {
        (ExchangeMode::Off, _) => Ok(base),
        (ExchangeMode::Exchange, Some(m)) => {
            let ba = pair_loss(g, m.y_b, m.z_a)?;
            let bc = pair_loss(g, m.y_b, m.z_c)?;
            let mirror = g.add(ba, bc)?;
            Ok(g.add(base, mirror)?)
        }
        (ExchangeMode::Exchange, None) => Err(LossError::TooSmall {
            what: "exchange mode mirrored inputs",
            min: 1,
            got: 0,
        }),
    }
}
