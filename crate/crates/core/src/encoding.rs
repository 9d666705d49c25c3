//! Cyclic positional encoding of viewing angles and camera yaw.
//!
//! Each angle `φ` is embedded as interlaced nested sines,
//! `sin(sin φ · α / base^(2i/d))` and `sin(cos φ · α / base^(2i/d))`, which is
//! 2π-periodic by construction and injective because the (sin φ, cos φ) pair
//! is. A patch is encoded by stacking the encodings of its horizontal and
//! vertical viewing angles and its frame's yaw.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::wrap_angle;
use crate::tensor::{Graph, Real, Tensor, TensorError, Var};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EncodingError {
    #[error("invalid encoding config: {0}")]
    Config(String),
    #[error("{rows} embedding rows but {positions} positions")]
    Length { rows: usize, positions: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Per-angle encoding depth; must be even.
    pub d_angle: usize,
    pub alpha: f64,
    pub base: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            d_angle: 22,
            alpha: std::f64::consts::FRAC_PI_2,
            base: 10_000.0,
        }
    }
}

impl EncodingConfig {
    pub fn new(d_angle: usize, alpha: f64) -> Result<Self, EncodingError> {
        let cfg = Self {
            d_angle,
            alpha,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn d_model(&self) -> usize {
        3 * self.d_angle
    }

    pub fn validate(&self) -> Result<(), EncodingError> {
        if self.d_angle == 0 || !self.d_angle.is_multiple_of(2) {
            return Err(EncodingError::Config(format!(
                "d_angle must be even and positive, got {}",
                self.d_angle
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(EncodingError::Config(format!("alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(EncodingError::Config(format!("base must be > 0, got {}", self.base)));
        }
        Ok(())
    }
}

/// Encoding of one angle, `d_angle` entries in [-1, 1].
pub fn cyclic_pe(phi: f64, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.d_angle);
    write_cyclic_pe(phi, cfg, &mut out);
    out
}

fn write_cyclic_pe(phi: f64, cfg: &EncodingConfig, out: &mut Vec<f64>) {
    let (s, c) = wrap_angle(phi).sin_cos();
    let d = cfg.d_angle as f64;
    for i in 0..cfg.d_angle / 2 {
        let freq = cfg.alpha / cfg.base.powf(2.0 * i as f64 / d);
        out.push((s * freq).sin());
        out.push((c * freq).sin());
    }
}

/// `[PE(φ_h); PE(φ_v); PE(yaw)]`, `3·d_angle` entries.
pub fn patch_positional_encoding(phi_h: f64, phi_v: f64, yaw: f64, cfg: &EncodingConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(cfg.d_model());
    for angle in [phi_h, phi_v, yaw] {
        write_cyclic_pe(angle, cfg, &mut out);
    }
    out
}

/// Stacked encodings for a list of `(φ_h, φ_v, yaw)` positions, one row each.
pub fn encoding_matrix<T: Real>(positions: &[(f64, f64, f64)], cfg: &EncodingConfig) -> Tensor<T> {
    let d = cfg.d_model();
    let data = positions
        .iter()
        .flat_map(|&(h, v, y)| patch_positional_encoding(h, v, y, cfg))
        .map(T::of)
        .collect();
    Tensor::new(vec![positions.len().max(1), d], data)
        .unwrap_or_else(|_| Tensor::zeros(&[1, d]))
}

/// Absolute positional superposition `x_i + p_i` on the graph.
pub fn superpose<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    positions: &[(f64, f64, f64)],
    cfg: &EncodingConfig,
) -> Result<Var, EncodingError> {
    let rows = g.value(x).rows();
    if rows != positions.len() {
        return Err(EncodingError::Length {
            rows,
            positions: positions.len(),
        });
    }
    let p = encoding_matrix::<T>(positions, cfg);
    Ok(g.add_const(x, &p)?)
}
