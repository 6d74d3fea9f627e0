use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use super::NumericsError;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Number of coordinates probed.
    pub checked: usize,
    /// `(input index, flat coordinate)` of the worst disagreement.
    pub worst: Option<(usize, usize)>,
}

/// Checks the gradient of the scalar built by `f` at `point`.
///
/// `f` receives a fresh 64-bit graph and one trainable leaf per input tensor.
/// Every coordinate is probed unless `max_coords` caps the per-input count, in
/// which case a seeded subset is drawn. The error of a coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(
    f: F,
    point: &[Tensor<f64>],
    eps: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport, NumericsError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(NumericsError::Config(format!("grad_check eps {eps} outside [1e-4, 1e-2]")));
    }
    let eval = |inputs: &[Tensor<f64>], grads: bool| -> Result<(f64, Option<Vec<Tensor<f64>>>), NumericsError> {
        let mut g = if grads { Graph::new() } else { Graph::inference() };
        let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>, _>>()?;
        let out = f(&mut g, &vars)?;
        if g.value(out).numel() != 1 {
            return Err(NumericsError::Shape("grad_check: function must return a scalar".into()));
        }
        let value = g.value(out).data()[0];
        if !grads {
            return Ok((value, None));
        }
        let mut gr = g.backward(out)?;
        let per_input = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| gr.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, Some(per_input)))
    };

    let (_, analytic) = eval(point, true)?;
    let analytic = analytic.expect("requested gradients");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut probe = point.to_vec();
    for (i, t) in point.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < n => {
                let mut c = rand::seq::index::sample(&mut rng, n, m).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        for c in coords {
            let orig = t.data()[c];
            probe[i].data_mut()[c] = orig + eps;
            let (up, _) = eval(&probe, false)?;
            probe[i].data_mut()[c] = orig - eps;
            let (down, _) = eval(&probe, false)?;
            probe[i].data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(NumericsError::NonFinite("grad_check"));
            }
            let a = analytic[i].data()[c];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, c));
            }
        }
    }
    Ok(report)
}

/// Moves every residual `prediction − target` whose magnitude lies within
/// `10·eps` of the smooth-L1 kink at `beta` to exactly `beta ± 10·eps`,
/// keeping it on its original side.
pub fn nudge_off_kinks(prediction: &mut Tensor<f64>, target: &Tensor<f64>, beta: f64, eps: f64) {
    let margin = 10.0 * eps;
    for (p, &t) in prediction.data_mut().iter_mut().zip(target.data()) {
        let e = *p - t;
        let gap = e.abs() - beta;
        if gap.abs() < margin {
            let mag = if gap >= 0.0 { beta + margin } else { beta - margin };
            *p = t + e.signum() * mag;
        }
    }
}
