//! Sequential diffusion-guided DIP: the network input is refreshed every
//! `N` updates by purifying the current network output with a pretrained
//! diffusion model, and the output is pulled toward that input.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffusion::{purify_mapped, NoiseSchedule, PurifierConfig, RangeMap, ScoreModel};
use crate::dip::{evaluate_into, is_eval_point, Fitter, Objective, ReconTrace};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::MetricConfig;
use crate::nets::{build_unet, Algorithm, ArchSpec, OptimizerState, Tensor};
use crate::operators::{LinearOperator, Measurements};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UdigConfig {
    /// Outer iterations.
    #[serde(rename = "K")]
    pub k: usize,
    /// Parameter updates per outer iteration.
    #[serde(rename = "N")]
    pub n: usize,
    /// Purification depth.
    #[serde(rename = "M")]
    pub m: usize,
    pub lambda: f64,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: Algorithm,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    pub arch: ArchSpec,
    /// Map from reconstruction values into the score model's training range;
    /// purified samples are clipped to that range before mapping back.
    pub range_map: RangeMap,
}

fn default_eval_every() -> usize {
    50
}

impl UdigConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 || self.n < 1 {
            return Err(Error::invalid("K and N must be at least 1"));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda must be non-negative"));
        }
        if self.eval_every < 1 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        Ok(())
    }

    pub fn total_iters(&self) -> usize {
        self.k * self.n
    }
}

/// `‖A f − y‖² + λ ‖f − z‖²`.
pub fn udig_loss(f: &Image, z: &Image, y: &Measurements, op: &dyn LinearOperator, lambda: f64) -> Result<f64> {
    f.check_shape(op.image_shape())?;
    z.check_shape(op.image_shape())?;
    y.check_shape(&op.measurement_shape())?;
    let obj = Objective { op, y, lambda };
    Ok(obj.eval(&f.data, &z.data).0)
}

/// Gradient of [`udig_loss`] with respect to `f`: `2 Aᴴ(A f − y) + 2λ (f − z)`.
pub fn udig_loss_grad(f: &Image, z: &Image, y: &Measurements, op: &dyn LinearOperator, lambda: f64) -> Result<Image> {
    f.check_shape(op.image_shape())?;
    z.check_shape(op.image_shape())?;
    y.check_shape(&op.measurement_shape())?;
    let obj = Objective { op, y, lambda };
    let g = obj.eval(&f.data, &z.data).2;
    Image::from_vec(f.channels, f.rows, f.cols, g)
}

fn purifier_seed(seed: u64, outer: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (outer as u64).wrapping_add(0x5851_f42d_4c95_7f2d)
}

/// Runs `K` outer iterations of `N` updates each, starting from `z = Aᴴ y`.
///
/// Optimizer moments persist across outer iterations; each purification uses
/// fresh noise derived from the seed and the outer index. Trace iterations
/// count parameter updates overall, `1..=N·K`, and score the output for the
/// input that update used. The returned image is `f_θ(z)` for the input after
/// the last refresh.
pub fn udig_reconstruct(
    y: &Measurements,
    op: &dyn LinearOperator,
    score: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    cfg: &UdigConfig,
    x_true: Option<&Image>,
    metric: &MetricConfig,
) -> Result<ReconTrace> {
    cfg.validate()?;
    let purifier = PurifierConfig {
        clip_range: cfg.range_map.model_range(),
        ..PurifierConfig::new(cfg.m)
    };
    purifier.validate(schedule)?;
    let started = Instant::now();
    let net = build_unet(cfg.arch.clone(), cfg.seed)?;
    let opt = OptimizerState::new(cfg.optimizer, cfg.lr)?;
    let mut fitter = Fitter::new(
        net,
        opt,
        Objective {
            op,
            y,
            lambda: cfg.lambda,
        },
    );
    let z0 = op.adjoint(y)?;
    let mut z = Tensor::from_image(&z0);
    let mut trace = ReconTrace::new(z0);
    let total = cfg.total_iters();
    'outer: for outer in 0..cfg.k {
        for inner in 1..=cfg.n {
            let it = outer * cfg.n + inner;
            match fitter.step(&z, it) {
                Ok(loss) => trace.loss.push(loss),
                Err(Error::NonFiniteLoss { iteration }) => {
                    trace.aborted_at = Some(iteration);
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
            if is_eval_point(it, cfg.eval_every, total) {
                let f = fitter.output(&z)?;
                let dl = fitter.data_loss(&f);
                evaluate_into(&mut trace, it, &f, dl, x_true, metric)?;
            }
            if inner == cfg.n {
                let f = fitter.output(&z)?;
                let seed = purifier_seed(cfg.seed, outer);
                z = Tensor::from_image(&purify_mapped(&f, cfg.range_map, &purifier, score, schedule, seed)?);
            }
        }
    }
    trace.final_image = fitter.output(&z)?;
    trace.runtime_secs = started.elapsed().as_secs_f64();
    Ok(trace)
}

/// Mean PSNR curve of one method over several scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanCurve {
    pub method: String,
    pub iterations: Vec<usize>,
    pub mean_psnr_db: Vec<f64>,
    pub std_psnr_db: Vec<f64>,
    /// Iteration at which the mean curve peaks (first on ties).
    pub peak_iteration: usize,
    pub peak_psnr_db: f64,
}

impl MeanCurve {
    pub fn psnr_at(&self, iteration: usize) -> Option<f64> {
        let idx = self.iterations.iter().rposition(|&it| it <= iteration)?;
        Some(self.mean_psnr_db[idx])
    }
}

/// Averages the PSNR traces of one method across scans. All traces must
/// share one iteration grid.
pub fn overfitting_curve(method: &str, traces: &[ReconTrace]) -> Result<MeanCurve> {
    let series: Vec<(&[usize], &[f64])> = traces.iter().map(|t| (&t.iterations[..], &t.psnr_db[..])).collect();
    mean_curve(method, &series)
}

/// [`overfitting_curve`] over raw `(iterations, psnr)` columns.
pub fn mean_curve(method: &str, series: &[(&[usize], &[f64])]) -> Result<MeanCurve> {
    let (grid, _) = *series
        .first()
        .ok_or_else(|| Error::invalid(format!("method {method} has no traces")))?;
    if grid.is_empty() {
        return Err(Error::invalid(format!("method {method} has an empty trace")));
    }
    if let Some(bad) = series.iter().position(|(it, p)| *it != grid || p.len() != grid.len()) {
        return Err(Error::invalid(format!(
            "method {method}: trace {bad} has a different iteration grid"
        )));
    }
    let n = series.len() as f64;
    let mut mean = vec![0.0; grid.len()];
    let mut std = vec![0.0; grid.len()];
    for j in 0..grid.len() {
        let m = series.iter().map(|(_, p)| p[j]).sum::<f64>() / n;
        let v = series.iter().map(|(_, p)| (p[j] - m).powi(2)).sum::<f64>() / n;
        mean[j] = m;
        std[j] = v.sqrt();
    }
    let mut peak = 0;
    for j in 1..mean.len() {
        if mean[j] > mean[peak] {
            peak = j;
        }
    }
    Ok(MeanCurve {
        method: method.to_string(),
        peak_iteration: grid[peak],
        peak_psnr_db: mean[peak],
        iterations: grid.to_vec(),
        mean_psnr_db: mean,
        std_psnr_db: std,
    })
}
