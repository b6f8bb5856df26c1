use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::batch_cross_entropy;
use super::model::{Mode, Model};
use super::tensor::Tensor;
use super::Result;

/// Worst disagreement between backprop and central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Location of the worst entry, e.g. `param 3[17]` or `input[5]`.
    pub worst: String,
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries that are
/// zero up to rounding from dominating.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of the mean cross-entropy with central
/// differences of step `h`, for the inputs and up to `per_param` entries of
/// every parameter. Dropout masks from one training pass are replayed for
/// every evaluation, and batch-norm uses batch statistics throughout.
pub fn gradient_check(
    model: &mut Model,
    x: &Tensor,
    labels: &[usize],
    seed: u64,
    h: f64,
    per_param: usize,
) -> Result<GradCheck> {
    const FLOOR: f64 = 1e-6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masks = model.forward(x, Mode::Train(&mut rng))?.dropout_masks();
    let loss = |m: &Model, x: &Tensor| -> Result<f64> {
        let out = m.forward(x, Mode::Replay(&masks))?.output;
        Ok(batch_cross_entropy(&out, labels)?.0)
    };

    model.zero_grad();
    let pass = model.forward(x, Mode::Replay(&masks))?;
    let (_, g) = batch_cross_entropy(&pass.output, labels)?;
    let dx = model.backward(&pass, &g)?;
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();

    let mut report = GradCheck { max_rel_error: 0.0, checked: 0, worst: String::new() };
    let mut record = |a: f64, n: f64, at: String| {
        let e = relative_error(a, n, FLOOR);
        report.checked += 1;
        if e > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = e.max(report.max_rel_error);
            report.worst = at;
        }
    };

    for (k, grads) in analytic.iter().enumerate() {
        let idx: Vec<usize> = if grads.len() <= per_param {
            (0..grads.len()).collect()
        } else {
            (0..per_param).map(|_| rng.random_range(0..grads.len())).collect()
        };
        for i in idx {
            let orig = model.params()[k].value[i];
            model.params_mut()[k].value[i] = orig + h;
            let up = loss(model, x)?;
            model.params_mut()[k].value[i] = orig - h;
            let down = loss(model, x)?;
            model.params_mut()[k].value[i] = orig;
            record(grads[i], (up - down) / (2.0 * h), format!("param {k}[{i}]"));
        }
    }

    let n_in = x.len().min(per_param);
    for _ in 0..n_in {
        let i = rng.random_range(0..x.len());
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let up = loss(model, &xp)?;
        xp.data_mut()[i] -= 2.0 * h;
        let down = loss(model, &xp)?;
        record(dx.data()[i], (up - down) / (2.0 * h), format!("input[{i}]"));
    }
    model.zero_grad();
    Ok(report)
}
