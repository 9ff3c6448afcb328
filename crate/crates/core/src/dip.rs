//! Deep image prior: fit an untrained network's parameters so that
//! `A f_θ(z) ≈ y` for a fixed input `z`.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{evaluate, MetricConfig};
use crate::nets::{build_unet, Algorithm, ArchSpec, Network, OptimizerState, Tensor};
use crate::operators::{LinearOperator, Measurements};
use crate::persistence::{save_array_described, write_trace_csv, DenseArray};
use crate::simdata::perturb_image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Random,
    Adjoint,
    Reference,
    GroundTruthPlusNoise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DipConfig {
    pub iters: usize,
    pub lr: f64,
    pub input_mode: InputMode,
    #[serde(default)]
    pub noise_sigma: f64,
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub optimizer: Algorithm,
    pub arch: ArchSpec,
}

fn default_eval_every() -> usize {
    50
}

impl DipConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iters < 1 {
            return Err(Error::invalid("iters must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::invalid("noise sigma must be non-negative"));
        }
        if self.eval_every < 1 {
            return Err(Error::invalid("eval_every must be at least 1"));
        }
        Ok(())
    }
}

/// Per-iteration record of a reconstruction run.
///
/// `iterations`, `psnr_db`, `ssim` and `data_loss` are sampled every
/// `eval_every` updates (and at the last one); `data_loss` is the mean
/// squared measurement residual. Without a ground truth the
/// quality columns hold NaN and `best_psnr_db` is NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconTrace {
    pub iterations: Vec<usize>,
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
    pub data_loss: Vec<f64>,
    /// Objective value at every gradient update (before the update).
    pub loss: Vec<f64>,
    pub best_psnr_db: f64,
    pub best_iter: usize,
    pub best_ssim: f64,
    pub final_image: Image,
    pub runtime_secs: f64,
    /// Set when the run stopped early on a non-finite loss.
    pub aborted_at: Option<usize>,
}

impl ReconTrace {
    pub(crate) fn new(final_image: Image) -> Self {
        Self {
            iterations: Vec::new(),
            psnr_db: Vec::new(),
            ssim: Vec::new(),
            data_loss: Vec::new(),
            loss: Vec::new(),
            best_psnr_db: f64::NAN,
            best_iter: 0,
            best_ssim: f64::NAN,
            final_image,
            runtime_secs: 0.0,
            aborted_at: None,
        }
    }

    pub(crate) fn record(&mut self, iteration: usize, psnr: f64, ssim: f64, data_loss: f64) {
        self.iterations.push(iteration);
        self.psnr_db.push(psnr);
        self.ssim.push(ssim);
        self.data_loss.push(data_loss);
        if psnr.is_finite() && !(psnr <= self.best_psnr_db) {
            self.best_psnr_db = psnr;
            self.best_iter = iteration;
            self.best_ssim = ssim;
        }
        if !psnr.is_finite() {
            self.best_iter = iteration;
        }
    }

    /// Quality at the evaluation point closest to (and not after) `iteration`.
    pub fn psnr_at(&self, iteration: usize) -> Option<f64> {
        let idx = self.iterations.iter().rposition(|&it| it <= iteration)?;
        Some(self.psnr_db[idx])
    }

    pub fn final_psnr(&self) -> f64 {
        self.psnr_db.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_ssim(&self) -> f64 {
        self.ssim.last().copied().unwrap_or(f64::NAN)
    }

    /// Writes `trace.csv` and `recon.udig-array` (plus sidecar) into `dir`.
    pub fn save(&self, dir: &std::path::Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_trace_csv(dir.join("trace.csv"), &self.iterations, &self.psnr_db, &self.ssim, &self.data_loss)?;
        let img = &self.final_image;
        let arr = DenseArray::from_f32(
            vec![img.channels, img.rows, img.cols],
            img.data.iter().map(|&v| v as f32).collect(),
        )?;
        save_array_described(dir.join("recon.udig-array"), &arr, "final reconstruction")
    }
}

/// `‖A f − y‖² + λ ‖f − z‖²` together with its gradient with respect to `f`.
pub(crate) struct Objective<'a> {
    pub op: &'a dyn LinearOperator,
    pub y: &'a Measurements,
    pub lambda: f64,
}

impl Objective<'_> {
    /// Returns `(total, data term, ∂/∂f)`.
    pub fn eval(&self, f: &[f64], z: &[f64]) -> (f64, f64, Vec<f64>) {
        let mut resid = vec![0.0; self.op.measurement_len()];
        self.op.apply_into(f, &mut resid);
        resid.iter_mut().zip(&self.y.data).for_each(|(r, y)| *r -= y);
        let data = resid.iter().map(|r| r * r).sum::<f64>();
        let mut grad = vec![0.0; f.len()];
        self.op.adjoint_into(&resid, &mut grad);
        grad.iter_mut().for_each(|g| *g *= 2.0);
        let mut reg = 0.0;
        if self.lambda != 0.0 {
            for ((g, fv), zv) in grad.iter_mut().zip(f).zip(z) {
                let d = fv - zv;
                reg += d * d;
                *g += 2.0 * self.lambda * d;
            }
        }
        (data + self.lambda * reg, data, grad)
    }
}

/// Network, optimizer and objective bundled for repeated updates.
pub(crate) struct Fitter<'a> {
    pub net: Network,
    pub opt: OptimizerState,
    pub objective: Objective<'a>,
    grads: Vec<f64>,
}

impl<'a> Fitter<'a> {
    pub fn new(net: Network, opt: OptimizerState, objective: Objective<'a>) -> Self {
        let grads = vec![0.0; net.n_params()];
        Self {
            net,
            opt,
            objective,
            grads,
        }
    }

    /// One gradient update at input `z`; returns the objective before the update.
    pub fn step(&mut self, z: &Tensor, iteration: usize) -> Result<f64> {
        let (out, tape) = self.net.forward_train(z, None)?;
        let (total, _, dout) = self.objective.eval(&out.data, &z.data);
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        let dout = Tensor {
            data: dout,
            ..out
        };
        self.grads.iter_mut().for_each(|g| *g = 0.0);
        self.net.backward(&tape, &dout, &mut self.grads);
        self.opt.update(&mut self.net.params, &self.grads)?;
        Ok(total)
    }

    pub fn output(&self, z: &Tensor) -> Result<Image> {
        Ok(self.net.forward(z, None)?.into_image())
    }

    /// Mean squared residual per measurement entry, `‖A f − y‖² / m`.
    pub fn data_loss(&self, f: &Image) -> f64 {
        self.objective.eval(&f.data, &f.data).1 / self.objective.y.data.len() as f64
    }
}

pub(crate) fn evaluate_into(
    trace: &mut ReconTrace,
    iteration: usize,
    f: &Image,
    data_loss: f64,
    x_true: Option<&Image>,
    metric: &MetricConfig,
) -> Result<()> {
    let (p, s) = match x_true {
        Some(t) => evaluate(f, t, metric)?,
        None => (f64::NAN, f64::NAN),
    };
    trace.record(iteration, p, s, data_loss);
    Ok(())
}

pub(crate) fn is_eval_point(it: usize, every: usize, last: usize) -> bool {
    it % every == 0 || it == last
}

fn gaussian_image(shape: [usize; 3], seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = Image::zeros(shape[0], shape[1], shape[2]);
    z.data.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
    z
}

/// Resolves the fixed network input for a run.
pub fn dip_input(
    y: &Measurements,
    op: &dyn LinearOperator,
    cfg: &DipConfig,
    reference: Option<&Image>,
    x_true: Option<&Image>,
) -> Result<Image> {
    let shape = op.image_shape();
    let z = match cfg.input_mode {
        InputMode::Random => gaussian_image(shape, cfg.seed ^ 0x1a2b_3c4d),
        InputMode::Adjoint => op.adjoint(y)?,
        InputMode::Reference => reference
            .ok_or_else(|| Error::invalid("reference input mode needs a reference image"))?
            .clone(),
        InputMode::GroundTruthPlusNoise => {
            let t = x_true.ok_or_else(|| Error::invalid("ground_truth_plus_noise input needs x_true"))?;
            perturb_image(t, cfg.noise_sigma, cfg.seed ^ 0x9e37_79b9)
        }
    };
    z.check_shape(shape)?;
    Ok(z)
}

fn run_fixed_input(
    y: &Measurements,
    op: &dyn LinearOperator,
    cfg: &DipConfig,
    z: Image,
    x_true: Option<&Image>,
    metric: &MetricConfig,
) -> Result<ReconTrace> {
    cfg.validate()?;
    y.check_shape(&op.measurement_shape())?;
    let started = Instant::now();
    let net = build_unet(cfg.arch.clone(), cfg.seed)?;
    let opt = OptimizerState::new(cfg.optimizer, cfg.lr)?;
    let mut fitter = Fitter::new(
        net,
        opt,
        Objective {
            op,
            y,
            lambda: 0.0,
        },
    );
    let zt = Tensor::from_image(&z);
    let mut trace = ReconTrace::new(z.clone());
    for it in 1..=cfg.iters {
        match fitter.step(&zt, it) {
            Ok(loss) => trace.loss.push(loss),
            Err(Error::NonFiniteLoss { iteration }) => {
                trace.aborted_at = Some(iteration);
                break;
            }
            Err(e) => return Err(e),
        }
        if is_eval_point(it, cfg.eval_every, cfg.iters) {
            let f = fitter.output(&zt)?;
            let dl = fitter.data_loss(&f);
            evaluate_into(&mut trace, it, &f, dl, x_true, metric)?;
        }
    }
    trace.final_image = fitter.output(&zt)?;
    trace.runtime_secs = started.elapsed().as_secs_f64();
    Ok(trace)
}

/// Standard DIP with the input chosen by `cfg.input_mode`.
pub fn dip_reconstruct(
    y: &Measurements,
    op: &dyn LinearOperator,
    cfg: &DipConfig,
    x_true: Option<&Image>,
    metric: &MetricConfig,
) -> Result<ReconTrace> {
    let z = dip_input(y, op, cfg, None, x_true)?;
    run_fixed_input(y, op, cfg, z, x_true, metric)
}

/// Reference-guided DIP: the fixed input is a reference image.
pub fn refg_dip_reconstruct(
    y: &Measurements,
    op: &dyn LinearOperator,
    reference: &Image,
    cfg: &DipConfig,
    x_true: Option<&Image>,
    metric: &MetricConfig,
) -> Result<ReconTrace> {
    reference.check_shape(op.image_shape())?;
    run_fixed_input(y, op, cfg, reference.clone(), x_true, metric)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub sigma: f64,
    pub mean_best_psnr_db: f64,
    pub std_best_psnr_db: f64,
    pub best_psnr_per_seed: Vec<f64>,
}

/// Best-PSNR of DIP with input `x* + δ`, `δ ~ N(0, σ² I)`, for each `σ`.
///
/// Seed `s` uses `cfg.seed + s` for both the perturbation and the network.
pub fn input_sensitivity_experiment(
    x_true: &Image,
    y: &Measurements,
    op: &dyn LinearOperator,
    sigmas: &[f64],
    cfg: &DipConfig,
    n_seeds: usize,
    metric: &MetricConfig,
) -> Result<Vec<SensitivityRow>> {
    if sigmas.is_empty() {
        return Err(Error::invalid("sigma grid is empty"));
    }
    if sigmas.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::invalid("sigmas must be non-negative"));
    }
    if n_seeds == 0 {
        return Err(Error::invalid("need at least one seed"));
    }
    sigmas
        .iter()
        .map(|&sigma| {
            let best: Vec<f64> = (0..n_seeds as u64)
                .map(|s| {
                    let run = DipConfig {
                        input_mode: InputMode::GroundTruthPlusNoise,
                        noise_sigma: sigma,
                        seed: cfg.seed.wrapping_add(s),
                        ..cfg.clone()
                    };
                    dip_reconstruct(y, op, &run, Some(x_true), metric).map(|t| t.best_psnr_db)
                })
                .collect::<Result<_>>()?;
            let (mean, std) = mean_std(&best);
            Ok(SensitivityRow {
                sigma,
                mean_best_psnr_db: mean,
                std_best_psnr_db: std,
                best_psnr_per_seed: best,
            })
        })
        .collect()
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::IdentityOperator;

    fn small_cfg(mode: InputMode) -> DipConfig {
        DipConfig {
            iters: 20,
            lr: 1e-3,
            input_mode: mode,
            noise_sigma: 0.0,
            seed: 4,
            eval_every: 5,
            optimizer: Algorithm::Adam,
            arch: ArchSpec::unet(1, 4, 2),
        }
    }

    fn truth() -> Image {
        let data = (0..256).map(|i| ((i % 16) as f64 / 15.0) * ((i / 16) as f64 / 15.0)).collect();
        Image::from_vec(1, 16, 16, data).unwrap()
    }

    #[test]
    fn input_is_fixed_and_traced() {
        let x = truth();
        let op = IdentityOperator { shape: [1, 16, 16] };
        let y = op.forward(&x).unwrap();
        let cfg = small_cfg(InputMode::Random);
        let t = dip_reconstruct(&y, &op, &cfg, Some(&x), &MetricConfig::with_range(1.0)).unwrap();
        assert_eq!(t.iterations, vec![5, 10, 15, 20]);
        assert_eq!(t.loss.len(), 20);
        let max = t.psnr_db.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(t.best_psnr_db, max);
        let idx = t.iterations.iter().position(|&i| i == t.best_iter).unwrap();
        assert_eq!(t.psnr_db[idx], max);
    }

    #[test]
    fn reference_equals_adjoint_mode() {
        let x = truth();
        let op = IdentityOperator { shape: [1, 16, 16] };
        let y = op.forward(&x).unwrap();
        let m = MetricConfig::with_range(1.0);
        let a = dip_reconstruct(&y, &op, &small_cfg(InputMode::Adjoint), Some(&x), &m).unwrap();
        let reference = op.adjoint(&y).unwrap();
        let b = refg_dip_reconstruct(&y, &op, &reference, &small_cfg(InputMode::Reference), Some(&x), &m).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.psnr_db, b.psnr_db);
    }

    #[test]
    fn missing_inputs_rejected() {
        let op = IdentityOperator { shape: [1, 16, 16] };
        let y = op.forward(&truth()).unwrap();
        let m = MetricConfig::with_range(1.0);
        assert!(dip_reconstruct(&y, &op, &small_cfg(InputMode::GroundTruthPlusNoise), None, &m).is_err());
        assert!(dip_reconstruct(&y, &op, &small_cfg(InputMode::Reference), None, &m).is_err());
        let mut bad = small_cfg(InputMode::Random);
        bad.iters = 0;
        assert!(dip_reconstruct(&y, &op, &bad, None, &m).is_err());
        let wrong = Image::zeros(1, 8, 8);
        assert!(refg_dip_reconstruct(&y, &op, &wrong, &small_cfg(InputMode::Reference), None, &m).is_err());
    }

    #[test]
    fn duplicate_sigmas_equal() {
        let x = truth();
        let op = IdentityOperator { shape: [1, 16, 16] };
        let y = op.forward(&x).unwrap();
        let mut cfg = small_cfg(InputMode::GroundTruthPlusNoise);
        cfg.iters = 10;
        let rows =
            input_sensitivity_experiment(&x, &y, &op, &[0.1, 0.1], &cfg, 2, &MetricConfig::with_range(1.0)).unwrap();
        assert_eq!(rows[0], rows[1]);
        assert!(input_sensitivity_experiment(&x, &y, &op, &[], &cfg, 2, &MetricConfig::default()).is_err());
        assert!(input_sensitivity_experiment(&x, &y, &op, &[-0.1], &cfg, 2, &MetricConfig::default()).is_err());
    }

    #[test]
    fn divergence_aborts_with_partial_trace() {
        let x = truth();
        let op = IdentityOperator { shape: [1, 16, 16] };
        let mut y = op.forward(&x).unwrap();
        y.data[0] = f64::INFINITY;
        let t = dip_reconstruct(&y, &op, &small_cfg(InputMode::Random), None, &MetricConfig::default()).unwrap();
        assert_eq!(t.aborted_at, Some(1));
        assert!(t.loss.is_empty());
    }
}
