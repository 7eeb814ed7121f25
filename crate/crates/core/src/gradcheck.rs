//! Central finite-difference checks of the denoiser's analytic gradients.
//!
//! The numeric side only ever calls [`training_loss`] through the
//! [`NoisePredictor`] interface, so it shares no code with the reverse pass.

use crate::denoiser::{Denoiser, TrainExample};
use crate::diffusion::{training_loss, NoiseSchedule};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::rng::normal_vec;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Replaces every parameter, gates included, with random draws so that no
/// branch is silently an identity during a check. Matrices get
/// `N(0, scale² / fan_in)`, vectors `N(0, scale²)`.
pub fn randomize_params(params: &mut ParamStore, seed: u64, scale: f64) {
    for (stream, (_, value)) in params.iter_mut().enumerate() {
        let fan_in: usize = value.shape()[1..].iter().product();
        let std = scale / (fan_in as f64).sqrt();
        let draws = normal_vec(seed, stream as u64, value.len());
        for (v, r) in value.data_mut().iter_mut().zip(draws) {
            *v = r * std;
        }
    }
}

/// Compares the analytic gradient of the training loss for one example with
/// central differences of step `step`, over every scalar parameter.
pub fn check_gradients(
    net: &Denoiser,
    example: &TrainExample<'_>,
    schedule: &NoiseSchedule,
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = net.example_loss_and_grads(example, schedule)?;
    let mut probe = net.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let names: Vec<String> = net.params().names().cloned().collect();
    for name in names {
        let n = net.params().require(&name)?.len();
        for i in 0..n {
            let original = net.params().require(&name)?.data()[i];
            let mut eval = |value: f64| -> Result<f64> {
                probe
                    .params_mut()
                    .get_mut(&name)
                    .expect("known name")
                    .data_mut()[i] = value;
                training_loss(
                    &probe,
                    example.z0,
                    &example.cond,
                    example.t,
                    example.eps,
                    schedule,
                )
            };
            let plus = eval(original + step)?;
            let minus = eval(original - step)?;
            probe
                .params_mut()
                .get_mut(&name)
                .expect("known name")
                .data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.require(&name)?.data()[i];
            let err = relative_error(analytic, numeric, floor);
            report.checked += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
