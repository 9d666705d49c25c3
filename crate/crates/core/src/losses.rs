//! Sun-direction training loss: cosine + norm + upper-hemisphere terms.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Direction3, GeometryError, RotationMatrix};
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

/// Smallest prediction norm accepted by the cosine term.
pub const MIN_PRED_NORM: f64 = 1e-8;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LossError {
    #[error("degenerate prediction: norm {0:e} <= 1e-8")]
    Degenerate(f64),
    #[error("target: {0}")]
    Target(#[from] GeometryError),
    #[error("prediction must have 3 columns and one row per target: {0}")]
    Shape(String),
    #[error("non-finite prediction")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cosine: f64,
    pub norm: f64,
    pub hemi: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn scaled(self, s: f64) -> Self {
        Self {
            cosine: self.cosine * s,
            norm: self.norm * s,
            hemi: self.hemi * s,
            total: self.total * s,
        }
    }

    fn accumulate(&mut self, o: Self) {
        self.cosine += o.cosine;
        self.norm += o.norm;
        self.hemi += o.hemi;
        self.total += o.total;
    }
}

fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn check_pred(v: [f64; 3]) -> Result<(), LossError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(LossError::NonFinite)
    }
}

/// `1 − v_gt·v/‖v‖` and its gradient.
pub fn cosine_term(v: [f64; 3], gt: Direction3) -> Result<(f64, [f64; 3]), LossError> {
    check_pred(v)?;
    gt.require_unit()?;
    let n = norm3(v);
    if n <= MIN_PRED_NORM {
        return Err(LossError::Degenerate(n));
    }
    let g = gt.to_array();
    let dot = g[0] * v[0] + g[1] * v[1] + g[2] * v[2];
    let value = 1.0 - dot / n;
    let n3 = n * n * n;
    let grad = std::array::from_fn(|i| -(g[i] / n - dot * v[i] / n3));
    Ok((value, grad))
}

/// `(1 − ‖v‖)²` and its gradient (zero at the origin).
pub fn norm_term(v: [f64; 3]) -> (f64, [f64; 3]) {
    let n = norm3(v);
    let value = (1.0 - n) * (1.0 - n);
    if n == 0.0 {
        return (value, [0.0; 3]);
    }
    let s = -2.0 * (1.0 - n) / n;
    (value, v.map(|x| s * x))
}

/// `max(0, −z)` with subgradient 0 at `z = 0`.
pub fn hemi_term(v: [f64; 3]) -> (f64, [f64; 3]) {
    if v[2] < 0.0 {
        (-v[2], [0.0, 0.0, -1.0])
    } else {
        (0.0, [0.0; 3])
    }
}

/// All three terms with the gradient of their sum.
pub fn light_terms(v: [f64; 3], gt: Direction3) -> Result<(LossBreakdown, [f64; 3]), LossError> {
    let (cosine, gc) = cosine_term(v, gt)?;
    let (norm, gn) = norm_term(v);
    let (hemi, gh) = hemi_term(v);
    let grad = std::array::from_fn(|i| gc[i] + gn[i] + gh[i]);
    Ok((
        LossBreakdown {
            cosine,
            norm,
            hemi,
            total: cosine + norm + hemi,
        },
        grad,
    ))
}

fn read3<T: Real>(g: &Graph<T>, v: Var) -> Result<[f64; 3], LossError> {
    let t = g.value(v);
    if t.len() != 3 {
        return Err(LossError::Shape(format!("{:?}", t.shape())));
    }
    Ok(std::array::from_fn(|i| t.data()[i].f64()))
}

fn record<T: Real>(g: &mut Graph<T>, v: Var, value: f64, grad: [f64; 3]) -> Result<Var, LossError> {
    let shape = g.value(v).shape().to_vec();
    let jac = Tensor::new(shape, grad.iter().map(|&x| T::of(x)).collect())?;
    Ok(g.linearized(v, T::of(value), jac)?)
}

pub fn loss_cosine<T: Real>(g: &mut Graph<T>, v_pred: Var, v_gt: Direction3) -> Result<Var, LossError> {
    let (value, grad) = cosine_term(read3(g, v_pred)?, v_gt)?;
    record(g, v_pred, value, grad)
}

pub fn loss_norm<T: Real>(g: &mut Graph<T>, v_pred: Var) -> Result<Var, LossError> {
    let (value, grad) = norm_term(read3(g, v_pred)?);
    record(g, v_pred, value, grad)
}

pub fn loss_hemi<T: Real>(g: &mut Graph<T>, v_pred: Var) -> Result<Var, LossError> {
    let (value, grad) = hemi_term(read3(g, v_pred)?);
    record(g, v_pred, value, grad)
}

/// Total loss node for a single 3-vector plus the per-term breakdown.
pub fn loss_light<T: Real>(
    g: &mut Graph<T>,
    v_pred: Var,
    v_gt: Direction3,
) -> Result<(Var, LossBreakdown), LossError> {
    let (parts, grad) = light_terms(read3(g, v_pred)?, v_gt)?;
    Ok((record(g, v_pred, parts.total, grad)?, parts))
}

/// Mean per-row loss of an `N×3` prediction against one target per row.
pub fn patch_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    targets: &[Direction3],
) -> Result<(Var, LossBreakdown), LossError> {
    let t = g.value(pred);
    if t.cols() != 3 || t.rows() != targets.len() || targets.is_empty() {
        return Err(LossError::Shape(format!(
            "{:?} for {} targets",
            t.shape(),
            targets.len()
        )));
    }
    let n = targets.len() as f64;
    let mut mean = LossBreakdown::default();
    let mut jac = Vec::with_capacity(t.len());
    for (r, gt) in targets.iter().enumerate() {
        let v: [f64; 3] = std::array::from_fn(|i| t.row(r)[i].f64());
        let (parts, grad) = light_terms(v, *gt)?;
        mean.accumulate(parts.scaled(1.0 / n));
        jac.extend(grad.iter().map(|&x| T::of(x / n)));
    }
    let jac = Tensor::new(t.shape().to_vec(), jac)?;
    let node = g.linearized(pred, T::of(mean.total), jac)?;
    Ok((node, mean))
}

/// Loss of the calibrated mean `(1/N) Σ R_iᵀ v_i` against the world-frame target.
pub fn aggregate_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    rotations: &[RotationMatrix],
    gt_world: Direction3,
) -> Result<(Var, LossBreakdown), LossError> {
    let t = g.value(pred);
    if t.cols() != 3 || t.rows() != rotations.len() || rotations.is_empty() {
        return Err(LossError::Shape(format!(
            "{:?} for {} rotations",
            t.shape(),
            rotations.len()
        )));
    }
    let n = rotations.len() as f64;
    let mut mean = Direction3::default();
    for (r, rot) in rotations.iter().enumerate() {
        let row = t.row(r);
        let v = Direction3::new(row[0].f64(), row[1].f64(), row[2].f64());
        mean = mean + rot.transpose_apply(v) * (1.0 / n);
    }
    let (parts, grad_mean) = light_terms(mean.to_array(), gt_world)?;
    let gm = Direction3::from_array(grad_mean);
    let mut jac = Vec::with_capacity(t.len());
    for rot in rotations {
        let d = rot.apply(gm) * (1.0 / n);
        jac.extend(d.to_array().iter().map(|&x| T::of(x)));
    }
    let jac = Tensor::new(t.shape().to_vec(), jac)?;
    let node = g.linearized(pred, T::of(parts.total), jac)?;
    Ok((node, parts))
}
