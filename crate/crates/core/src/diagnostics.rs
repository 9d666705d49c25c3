//! Finite-difference gradient suite over every differentiable operation, the
//! losses, and a tiny end-to-end model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::encoding::{superpose, EncodingConfig};
use crate::geometry::{random_rotation, random_unit};
use crate::losses::{aggregate_loss, loss_cosine, loss_hemi, loss_light, loss_norm, patch_loss};
use crate::model::{encode_patches, forward_vars, AttentionScope, ModelConfig, ModelWeights};
use crate::tensor::gradcheck::{gradcheck, random_tensor};
use crate::tensor::{Graph, Mode, Tensor, TensorError, Var};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const END_TO_END_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckCase {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn wrap<E: std::fmt::Display>(op: &'static str) -> impl Fn(E) -> TensorError {
    move |e| TensorError::Argument { op, detail: e.to_string() }
}

type Check = fn(&mut ChaCha8Rng) -> Result<f64, TensorError>;

fn run(inputs: &[Tensor<f64>], seed: u64, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>) -> Result<f64, TensorError> {
    Ok(gradcheck(inputs, STEP, seed, f)?.max_rel_err)
}

/// Random values kept at least `margin` away from zero, for inputs to kinks.
fn away_from_zero(shape: &[usize], margin: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    random_tensor(shape, rng).map(|v| if v.abs() < margin { v.signum() * margin + v } else { v })
}

fn tiny_model() -> (ModelConfig, EncodingConfig) {
    let cfg = ModelConfig {
        patch_size: 2,
        d_model: 12,
        n_layers: 1,
        n_heads: 2,
        d_mlp: 8,
        dropout: 0.0,
        encoder_hidden: 5,
        attention: AttentionScope::Joint,
    };
    (cfg, EncodingConfig::new(4, std::f64::consts::FRAC_PI_2).expect("valid encoding"))
}

fn op_cases() -> Vec<(&'static str, Check)> {
    vec![
        ("matmul", |r| {
            let (a, b) = (random_tensor(&[3, 4], r), random_tensor(&[4, 2], r));
            run(&[a, b], 1, |g, v| g.matmul(v[0], v[1]))
        }),
        ("add", |r| {
            let (a, b) = (random_tensor(&[2, 3], r), random_tensor(&[2, 3], r));
            run(&[a, b], 2, |g, v| g.add(v[0], v[1]))
        }),
        ("add_row", |r| {
            let (a, b) = (random_tensor(&[3, 4], r), random_tensor(&[4], r));
            run(&[a, b], 3, |g, v| g.add_row(v[0], v[1]))
        }),
        ("add_const", |r| {
            let (a, c) = (random_tensor(&[2, 3], r), random_tensor(&[2, 3], r));
            run(&[a], 4, move |g, v| g.add_const(v[0], &c))
        }),
        ("scale", |r| run(&[random_tensor(&[2, 3], r)], 5, |g, v| Ok(g.scale(v[0], -1.7)))),
        ("relu", |r| run(&[away_from_zero(&[3, 3], 1e-3, r)], 6, |g, v| Ok(g.relu(v[0])))),
        ("softmax_rows", |r| run(&[random_tensor(&[3, 5], r)], 7, |g, v| g.softmax_rows(v[0]))),
        ("layer_norm", |r| {
            let (x, gain, bias) = (random_tensor(&[3, 6], r), random_tensor(&[6], r), random_tensor(&[6], r));
            run(&[x, gain, bias], 8, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5))
        }),
        ("concat_rows", |r| {
            let (a, b) = (random_tensor(&[2, 3], r), random_tensor(&[1, 3], r));
            run(&[a, b], 9, |g, v| g.concat_rows(&[v[0], v[1]]))
        }),
        ("concat_cols", |r| {
            let (a, b) = (random_tensor(&[2, 3], r), random_tensor(&[2, 2], r));
            run(&[a, b], 10, |g, v| g.concat_cols(&[v[0], v[1]]))
        }),
        ("slice_cols", |r| run(&[random_tensor(&[3, 5], r)], 11, |g, v| g.slice_cols(v[0], 1, 3))),
        ("transpose", |r| run(&[random_tensor(&[2, 4], r)], 12, |g, v| Ok(g.transpose(v[0])))),
        ("dropout", |r| {
            run(&[random_tensor(&[4, 4], r)], 13, |g, v| {
                // same mask on every evaluation
                let mut rng = ChaCha8Rng::seed_from_u64(99);
                g.dropout(v[0], 0.3, &mut rng, Mode::Train)
            })
        }),
        ("weighted_sum", |r| {
            let (x, w) = (random_tensor(&[2, 3], r), random_tensor(&[2, 3], r));
            run(&[x], 14, move |g, v| g.weighted_sum(v[0], w.clone()))
        }),
        ("superpose", |r| {
            let enc = EncodingConfig::new(4, std::f64::consts::FRAC_PI_2).expect("valid encoding");
            let pos: Vec<_> = (0..3).map(|_| (r.random_range(-1.0..1.0), r.random_range(-0.3..0.3), r.random_range(0.0..6.0))).collect();
            run(&[random_tensor(&[3, 12], r)], 15, move |g, v| superpose(g, v[0], &pos, &enc).map_err(wrap("superpose")))
        }),
        ("loss_cosine", |r| {
            let gt = random_unit(r);
            run(&[random_tensor(&[3], r)], 16, move |g, v| loss_cosine(g, v[0], gt).map_err(wrap("loss_cosine")))
        }),
        ("loss_norm", |r| run(&[random_tensor(&[3], r)], 17, |g, v| loss_norm(g, v[0]).map_err(wrap("loss_norm")))),
        ("loss_hemi", |r| {
            let mut x = random_tensor(&[3], r);
            x.data_mut()[2] = -0.5 - x.data()[2].abs();
            run(&[x], 18, |g, v| loss_hemi(g, v[0]).map_err(wrap("loss_hemi")))
        }),
        ("loss_light", |r| {
            let gt = random_unit(r);
            let mut x = random_tensor(&[3], r);
            x.data_mut()[2] = -0.5 - x.data()[2].abs();
            run(&[x], 19, move |g, v| Ok(loss_light(g, v[0], gt).map_err(wrap("loss_light"))?.0))
        }),
        ("patch_loss", |r| {
            let targets: Vec<_> = (0..4).map(|_| random_unit(r)).collect();
            run(&[away_from_zero(&[4, 3], 1e-2, r)], 20, move |g, v| {
                Ok(patch_loss(g, v[0], &targets).map_err(wrap("patch_loss"))?.0)
            })
        }),
        ("aggregate_loss", |r| {
            let rots: Vec<_> = (0..4).map(|_| random_rotation(r)).collect();
            let gt = random_unit(r);
            run(&[random_tensor(&[4, 3], r)], 21, move |g, v| {
                Ok(aggregate_loss(g, v[0], &rots, gt).map_err(wrap("aggregate_loss"))?.0)
            })
        }),
        ("patch_encoder", |r| {
            let (cfg, _) = tiny_model();
            let w = ModelWeights::<f64>::init(&cfg, 5);
            let mut inputs = vec![random_tensor(&[3, cfg.input_width()], r)];
            for t in &w.tensors()[..4] {
                let noise = random_tensor(t.shape(), r);
                let mut t = t.clone();
                for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
                    *a += 0.1 * b;
                }
                inputs.push(t);
            }
            run(&inputs, 22, |g, v| encode_patches(g, v[0], &v[1..]).map_err(wrap("encoder")))
        }),
    ]
}

/// Loss gradient through the whole tiny network, pixels and every weight
/// section except the attention key bias, whose true gradient is zero
/// (it shifts each softmax row by a constant).
fn end_to_end(rng: &mut ChaCha8Rng) -> Result<f64, TensorError> {
    let (cfg, enc) = tiny_model();
    let w = ModelWeights::<f64>::init(&cfg, 14);
    let bk_index = w.names().iter().position(|n| n == "layer0.attn.bk").expect("layer 0 exists");
    let mut inputs = vec![Tensor::matrix(4, cfg.input_width(), (0..4 * cfg.input_width()).map(|_| rng.random()).collect())?];
    for t in w.tensors() {
        let noise = random_tensor(t.shape(), rng);
        let mut t = t.clone();
        for (a, b) in t.data_mut().iter_mut().zip(noise.data()) {
            *a += 0.1 * b;
        }
        inputs.push(t);
    }
    let bk = inputs.remove(1 + bk_index);
    let positions: Vec<_> = (0..4)
        .map(|_| (rng.random_range(-0.6..0.6), rng.random_range(-0.2..0.2), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();
    let targets: Vec<_> = (0..4).map(|_| random_unit(rng)).collect();
    run(&inputs, 15, |g, v| {
        let mut weights = v[1..].to_vec();
        weights.insert(bk_index, g.constant(bk.clone()));
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let t = forward_vars(g, &cfg, &enc, &weights, v[0], &positions, None, Mode::Eval, &mut r).map_err(wrap("model"))?;
        Ok(patch_loss(g, t.output, &targets).map_err(wrap("model"))?.0)
    })
}

/// Runs every case at 64-bit precision.
pub fn gradient_suite(seed: u64) -> Vec<GradcheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut record = |name, tol, res: Result<f64, TensorError>| {
        let err = res.unwrap_or(f64::INFINITY);
        out.push(GradcheckCase {
            name,
            max_rel_err: err,
            tolerance: tol,
            passed: err < tol,
        });
    };
    for (name, f) in op_cases() {
        record(name, OP_TOLERANCE, f(&mut rng));
    }
    record("end_to_end", END_TO_END_TOLERANCE, end_to_end(&mut rng));
    out
}
