//! Central finite-difference checks for reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// Worst norm-wise relative error over all inputs.
    pub max_rel_err: f64,
    pub per_input: Vec<f64>,
}

/// Uniform entries in [-2, 2].
pub fn random_tensor<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-2.0..=2.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Compares the reverse-mode gradient of `Σ w ⊙ f(inputs)` (random fixed `w`
/// drawn from `seed`) against central differences with the given step.
pub fn gradcheck<F>(
    inputs: &[Tensor<f64>],
    step: f64,
    seed: u64,
    f: F,
) -> Result<GradcheckReport, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |inputs: &[Tensor<f64>], grads: bool| -> Result<(f64, Vec<Tensor<f64>>), TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let w = weights.get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = g.value(out).shape().to_vec();
            random_tensor(&shape, &mut rng)
        });
        let loss = g.weighted_sum(out, w.clone())?;
        let value = g.value(loss).data()[0];
        if !grads {
            return Ok((value, Vec::new()));
        }
        let mut gr = g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(inputs)
            .map(|(v, t)| gr.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = Vec::with_capacity(input.len());
        for j in 0..input.len() {
            let x0 = input.data()[j];
            work[i].data_mut()[j] = x0 + step;
            let (fp, _) = eval(&work, false)?;
            work[i].data_mut()[j] = x0 - step;
            let (fm, _) = eval(&work, false)?;
            work[i].data_mut()[j] = x0;
            numeric.push((fp - fm) / (2.0 * step));
        }
        per_input.push(relative_error(analytic[i].data(), &numeric));
    }
    let max_rel_err = per_input.iter().copied().fold(0.0, f64::max);
    Ok(GradcheckReport {
        max_rel_err,
        per_input,
    })
}
