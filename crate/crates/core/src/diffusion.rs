//! Discrete-time diffusion: noise schedules, the forward perturbation
//! `x_M = √ᾱ_M x + √(1-ᾱ_M) ε`, the reverse update
//! `x_{i-1} = (x_i + β_i s(x_i, i)) / √(1-β_i) + √β_i ε_i`, purification
//! (perturb to step `M`, then `M` reverse updates) and ε-matching training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nets::{build_score_net, ArchSpec, Network, OptimizerState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    #[default]
    Linear,
}

/// Serialized form of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    #[serde(rename = "T")]
    pub t: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    #[serde(default)]
    pub kind: ScheduleKind,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            t: 300,
            beta_min: 1e-4,
            beta_max: 0.02,
            kind: ScheduleKind::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(t: usize, beta_min: f64, beta_max: f64, kind: ScheduleKind) -> Result<NoiseSchedule> {
    NoiseSchedule::new(ScheduleSpec {
        t,
        beta_min,
        beta_max,
        kind,
    })
}

impl NoiseSchedule {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        if spec.t < 1 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        if !(spec.beta_min > 0.0 && spec.beta_min <= spec.beta_max && spec.beta_max < 1.0) {
            return Err(Error::invalid("need 0 < beta_min <= beta_max < 1"));
        }
        let t = spec.t;
        let betas: Vec<f64> = (0..t)
            .map(|k| {
                if t == 1 {
                    spec.beta_min
                } else {
                    spec.beta_min + (spec.beta_max - spec.beta_min) * k as f64 / (t - 1) as f64
                }
            })
            .collect();
        let mut alpha_bars = Vec::with_capacity(t + 1);
        alpha_bars.push(1.0);
        for b in &betas {
            let prev = *alpha_bars.last().expect("non-empty");
            alpha_bars.push(prev * (1.0 - b));
        }
        Ok(Self { spec, betas, alpha_bars })
    }

    pub fn spec(&self) -> ScheduleSpec {
        self.spec
    }

    pub fn steps(&self) -> usize {
        self.spec.t
    }

    /// `β_i` for `i ∈ 1..=T`.
    pub fn beta(&self, i: usize) -> f64 {
        self.betas[i - 1]
    }

    /// `ᾱ_i` for `i ∈ 0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, i: usize) -> f64 {
        self.alpha_bars[i]
    }
}

/// Purification depth and post-processing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PurifierConfig {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(default)]
    pub add_final_noise: bool,
    #[serde(default)]
    pub clip_range: Option<[f64; 2]>,
}

impl PurifierConfig {
    pub fn new(m: usize) -> Self {
        Self {
            m,
            add_final_noise: false,
            clip_range: None,
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.m > schedule.steps() {
            return Err(Error::invalid(format!(
                "purification depth {} exceeds schedule length {}",
                self.m,
                schedule.steps()
            )));
        }
        if let Some([lo, hi]) = self.clip_range {
            if !(lo < hi) {
                return Err(Error::invalid("clip range must satisfy lo < hi"));
            }
        }
        Ok(())
    }
}

/// Source of the score `s(x, i) ≈ ∇ log p_i(x)`.
pub trait ScoreModel: Sync {
    fn score(&self, x: &Image, i: usize, schedule: &NoiseSchedule) -> Result<Image>;
}

/// Score from a noise predictor: `s(x, i) = -ε̂(x, i) / √(1-ᾱ_i)`.
impl ScoreModel for Network {
    fn score(&self, x: &Image, i: usize, schedule: &NoiseSchedule) -> Result<Image> {
        let eps = self.apply_t(x, i)?;
        let k = -1.0 / (1.0 - schedule.alpha_bar(i)).sqrt();
        Ok(eps.map(|v| k * v))
    }
}

/// Score that is identically zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroScore;

impl ScoreModel for ZeroScore {
    fn score(&self, x: &Image, _i: usize, _schedule: &NoiseSchedule) -> Result<Image> {
        Ok(Image::zeros(x.channels, x.rows, x.cols))
    }
}

fn gaussian_like(x: &Image, rng: &mut impl Rng) -> Image {
    let mut e = Image::zeros(x.channels, x.rows, x.cols);
    e.data.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
    e
}

/// Forward perturbation with explicit noise `eps`.
pub fn forward_perturb_with(x: &Image, m: usize, schedule: &NoiseSchedule, eps: &Image) -> Result<Image> {
    if m > schedule.steps() {
        return Err(Error::invalid(format!("step {m} exceeds schedule length {}", schedule.steps())));
    }
    if !x.same_shape(eps) {
        return Err(Error::shape(&x.shape(), &eps.shape()));
    }
    if m == 0 {
        return Ok(x.clone());
    }
    let ab = schedule.alpha_bar(m);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = x.clone();
    out.data.iter_mut().zip(&eps.data).for_each(|(v, e)| *v = a * *v + b * e);
    Ok(out)
}

pub fn forward_perturb(x: &Image, m: usize, schedule: &NoiseSchedule, noise_seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    forward_perturb_rng(x, m, schedule, &mut rng)
}

fn forward_perturb_rng(x: &Image, m: usize, schedule: &NoiseSchedule, rng: &mut impl Rng) -> Result<Image> {
    if m == 0 {
        return forward_perturb_with(x, 0, schedule, &Image::zeros(x.channels, x.rows, x.cols));
    }
    let eps = gaussian_like(x, rng);
    forward_perturb_with(x, m, schedule, &eps)
}

/// One reverse update given the score, `β` and the injected noise (`None` for none).
pub fn reverse_update(x: &Image, score: &Image, beta: f64, noise: Option<&Image>) -> Image {
    let a = 1.0 / (1.0 - beta).sqrt();
    let s = beta.sqrt();
    let mut out = x.clone();
    for (k, v) in out.data.iter_mut().enumerate() {
        *v = a * (*v + beta * score.data[k]) + noise.map_or(0.0, |n| s * n.data[k]);
    }
    out
}

/// `x_i → x_{i-1}`. Noise is drawn from `rng` except at `i = 1` unless
/// `final_noise` is set.
pub fn reverse_step(
    x: &Image,
    i: usize,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    rng: &mut impl Rng,
    final_noise: bool,
) -> Result<Image> {
    if i < 1 || i > schedule.steps() {
        return Err(Error::invalid(format!("reverse step {i} outside 1..={}", schedule.steps())));
    }
    let score = model.score(x, i, schedule)?;
    let noise = (i > 1 || final_noise).then(|| gaussian_like(x, rng));
    Ok(reverse_update(x, &score, schedule.beta(i), noise.as_ref()))
}

/// Perturb to step `M`, then run `M` reverse steps back to 0.
pub fn diffusion_purify(
    x: &Image,
    cfg: &PurifierConfig,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Image> {
    cfg.validate(schedule)?;
    if cfg.m == 0 {
        return Ok(match cfg.clip_range {
            Some([lo, hi]) => x.map(|v| v.clamp(lo, hi)),
            None => x.clone(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = forward_perturb_rng(x, cfg.m, schedule, &mut rng)?;
    for i in (1..=cfg.m).rev() {
        cur = reverse_step(&cur, i, model, schedule, &mut rng, cfg.add_final_noise)?;
    }
    if let Some([lo, hi]) = cfg.clip_range {
        cur.data.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    }
    Ok(cur)
}

/// Unconditional ancestral sample from pure noise.
pub fn sample(model: &dyn ScoreModel, schedule: &NoiseSchedule, shape: [usize; 3], seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cur = gaussian_like(&Image::zeros(shape[0], shape[1], shape[2]), &mut rng);
    for i in (1..=schedule.steps()).rev() {
        cur = reverse_step(&cur, i, model, schedule, &mut rng, false)?;
    }
    Ok(cur)
}

/// How images are mapped into a score model's training range around purification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMap {
    /// Affine min/max map onto `[0, 1]` (single-channel data).
    MinMax,
    /// Division by the maximum pixel magnitude, so channels lie in `[-1, 1]`.
    MagnitudeMax,
    /// Division by the largest value with a fixed zero (non-negative data),
    /// model range `[0, 1]`.
    PeakScale,
    /// No mapping.
    Identity,
}

impl RangeMap {
    /// Interval the mapped images occupy, used to clip purified samples.
    pub fn model_range(self) -> Option<[f64; 2]> {
        match self {
            RangeMap::MinMax | RangeMap::PeakScale => Some([0.0, 1.0]),
            RangeMap::MagnitudeMax => Some([-1.0, 1.0]),
            RangeMap::Identity => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineMap {
    pub offset: f64,
    pub scale: f64,
}

impl AffineMap {
    pub fn fit(x: &Image, map: RangeMap) -> Self {
        match map {
            RangeMap::MinMax => {
                let (lo, hi) = x.min_max();
                let span = hi - lo;
                Self {
                    offset: lo,
                    scale: if span > 0.0 { span } else { 1.0 },
                }
            }
            RangeMap::MagnitudeMax => {
                let m = x.magnitude().max_abs();
                Self {
                    offset: 0.0,
                    scale: if m > 0.0 { m } else { 1.0 },
                }
            }
            RangeMap::PeakScale => {
                let m = x.data.iter().fold(0.0_f64, |m, &v| m.max(v));
                Self {
                    offset: 0.0,
                    scale: if m > 0.0 { m } else { 1.0 },
                }
            }
            RangeMap::Identity => Self { offset: 0.0, scale: 1.0 },
        }
    }

    pub fn to_model(&self, x: &Image) -> Image {
        x.map(|v| (v - self.offset) / self.scale)
    }

    pub fn from_model(&self, x: &Image) -> Image {
        x.map(|v| v * self.scale + self.offset)
    }
}

/// Purification of an arbitrary-range image through the model's training range.
///
/// `cfg.clip_range` applies in model coordinates. `M = 0` returns `x`
/// unchanged.
pub fn purify_mapped(
    x: &Image,
    map: RangeMap,
    cfg: &PurifierConfig,
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Image> {
    if cfg.m == 0 {
        cfg.validate(schedule)?;
        return Ok(x.clone());
    }
    let aff = AffineMap::fit(x, map);
    let out = diffusion_purify(&aff.to_model(x), cfg, model, schedule, seed)?;
    Ok(aff.from_model(&out))
}

/// Normalises a training image into the model range: `[0, 1]` per image for
/// single-channel data, maximum magnitude 1 for two-channel data.
pub fn normalize_for_training(x: &Image) -> Image {
    let map = if x.channels == 1 {
        RangeMap::MinMax
    } else {
        RangeMap::MagnitudeMax
    };
    AffineMap::fit(x, map).to_model(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchSpec,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Linear learning-rate decay to this fraction of `lr` over training.
    #[serde(default = "one")]
    pub final_lr_fraction: f64,
    /// Largest timestep drawn during training; `None` covers the whole
    /// schedule. Purification only visits `i ≤ M`, so capping near the
    /// largest `M` in use concentrates training where it matters.
    #[serde(default)]
    pub max_train_timestep: Option<usize>,
    /// Random horizontal/vertical flips of each training image.
    #[serde(default)]
    pub flip_augment: bool,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone)]
pub struct TrainedScoreModel {
    pub net: Network,
    /// Mean ε-matching loss per epoch.
    pub loss_trace: Vec<f64>,
}

/// Minimises `E ‖ε − ε_φ(√ᾱ_i x + √(1−ᾱ_i) ε, i)‖²` over uniform
/// `i ∈ 1..=max_train_timestep`.
pub fn train_score_model(dataset: &[Image], schedule: &NoiseSchedule, cfg: &TrainConfig) -> Result<TrainedScoreModel> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::invalid("batch and epochs must be positive"));
    }
    let shape = dataset[0].shape();
    if dataset.iter().any(|x| x.shape() != shape) {
        return Err(Error::invalid("training images must share one shape"));
    }
    let t_max = cfg.max_train_timestep.unwrap_or(schedule.steps());
    if t_max == 0 || t_max > schedule.steps() {
        return Err(Error::invalid("max_train_timestep must lie in 1..=T"));
    }
    let mut arch = cfg.arch.clone();
    arch.time_conditioned = true;
    arch.max_timestep = Some(schedule.steps());
    let mut net = build_score_net(arch, cfg.seed)?;
    let mut opt = OptimizerState::adam(cfg.lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d1ff);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut grads = vec![0.0; net.n_params()];
    let mut trace = Vec::with_capacity(cfg.epochs);
    let batches_per_epoch = dataset.len().div_ceil(cfg.batch);
    let total_steps = (cfg.epochs * batches_per_epoch) as f64;
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        // Fisher-Yates with the seeded stream
        for k in (1..order.len()).rev() {
            let j = rng.random_range(0..=k);
            order.swap(k, j);
        }
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let b = chunk.len();
            let ts: Vec<usize> = (0..b).map(|_| rng.random_range(1..=t_max)).collect();
            let clean: Vec<Image> = chunk
                .iter()
                .map(|&k| {
                    if cfg.flip_augment {
                        let flips = rng.random_range(0..4u8);
                        flip(&dataset[k], flips & 1 != 0, flips & 2 != 0)
                    } else {
                        dataset[k].clone()
                    }
                })
                .collect();
            let refs: Vec<&Image> = clean.iter().collect();
            let x0 = Tensor::from_images(&refs);
            let mut eps = Tensor::zeros(x0.c, b, x0.h, x0.w);
            eps.data.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
            let mut xt = x0.clone();
            let hw = x0.h * x0.w;
            for c in 0..x0.c {
                for (bi, &t) in ts.iter().enumerate() {
                    let ab = schedule.alpha_bar(t);
                    let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                    let off = (c * b + bi) * hw;
                    for p in off..off + hw {
                        xt.data[p] = sa * x0.data[p] + sb * eps.data[p];
                    }
                }
            }
            let (pred, tape) = net.forward_train(&xt, Some(&ts))?;
            let n = pred.data.len() as f64;
            let mut dout = pred.clone();
            let mut loss = 0.0;
            for (d, e) in dout.data.iter_mut().zip(&eps.data) {
                let r = *d - e;
                loss += r * r;
                *d = 2.0 * r / n;
            }
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { iteration: step });
            }
            grads.iter_mut().for_each(|g| *g = 0.0);
            net.backward(&tape, &dout, &mut grads);
            let frac = step as f64 / total_steps;
            opt.learning_rate = cfg.lr * (1.0 - (1.0 - cfg.final_lr_fraction) * frac);
            opt.update(&mut net.params, &grads)?;
            epoch_loss += loss * b as f64;
            seen += b;
            step += 1;
        }
        trace.push(epoch_loss / seen as f64);
    }
    Ok(TrainedScoreModel { net, loss_trace: trace })
}

fn flip(x: &Image, horizontal: bool, vertical: bool) -> Image {
    let mut out = x.clone();
    for c in 0..x.channels {
        for r in 0..x.rows {
            let sr = if vertical { x.rows - 1 - r } else { r };
            for k in 0..x.cols {
                let sk = if horizontal { x.cols - 1 - k } else { k };
                out.set(c, r, k, x.get(c, sr, sk));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_step_schedule() {
        let s = make_schedule(1, 0.01, 0.01, ScheduleKind::Linear).unwrap();
        assert!((s.alpha_bar(1) - 0.99).abs() < 1e-15);
    }

    #[test]
    fn long_schedule_reaches_noise() {
        let s = make_schedule(1000, 1e-4, 0.02, ScheduleKind::Linear).unwrap();
        assert!(s.alpha_bar(1000) < 1e-4);
        for i in 1..=1000 {
            assert!((s.alpha_bar(i) - s.alpha_bar(i - 1) * (1.0 - s.beta(i))).abs() < 1e-12);
            assert!(s.alpha_bar(i) < s.alpha_bar(i - 1));
        }
    }

    #[test]
    fn schedule_errors() {
        assert!(make_schedule(0, 0.1, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.0, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.3, 0.2, ScheduleKind::Linear).is_err());
        assert!(make_schedule(10, 0.1, 1.0, ScheduleKind::Linear).is_err());
    }

    #[test]
    fn perturb_edge_cases() {
        let s = make_schedule(10, 0.01, 0.01, ScheduleKind::Linear).unwrap();
        let x = Image::from_vec(1, 2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        assert_eq!(forward_perturb(&x, 0, &s, 1).unwrap(), x);
        let zero = Image::zeros(1, 2, 2);
        let x1 = forward_perturb_with(&x, 1, &s, &zero).unwrap();
        for (a, b) in x1.data.iter().zip(&x.data) {
            assert!((a - 0.99f64.sqrt() * b).abs() < 1e-15);
        }
        assert!(forward_perturb(&x, 11, &s, 1).is_err());
    }

    #[test]
    fn reverse_update_cases() {
        let x = Image::from_vec(1, 1, 3, vec![1.0, 2.0, -1.0]).unwrap();
        let score = Image::from_vec(1, 1, 3, vec![5.0, -3.0, 0.2]).unwrap();
        assert_eq!(reverse_update(&x, &score, 0.0, None), x);
        let s = make_schedule(5, 0.1, 0.1, ScheduleKind::Linear).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = reverse_step(&x, 1, &ZeroScore, &s, &mut rng, false).unwrap();
        for (a, b) in out.data.iter().zip(&x.data) {
            assert!((a - b / 0.9f64.sqrt()).abs() < 1e-15);
        }
        assert!(reverse_step(&x, 0, &ZeroScore, &s, &mut rng, false).is_err());
        assert!(reverse_step(&x, 6, &ZeroScore, &s, &mut rng, false).is_err());
    }

    #[test]
    fn purify_zero_depth_identity() {
        let s = make_schedule(10, 0.01, 0.02, ScheduleKind::Linear).unwrap();
        let x = Image::from_vec(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let out = diffusion_purify(&x, &PurifierConfig::new(0), &ZeroScore, &s, 3).unwrap();
        assert_eq!(out, x);
        assert!(diffusion_purify(&x, &PurifierConfig::new(11), &ZeroScore, &s, 3).is_err());
    }

    #[test]
    fn affine_maps_roundtrip() {
        let x = Image::from_vec(1, 1, 4, vec![-0.5, 0.0, 0.5, 1.5]).unwrap();
        let m = AffineMap::fit(&x, RangeMap::MinMax);
        let y = m.to_model(&x);
        assert_eq!(y.min_max(), (0.0, 1.0));
        let back = m.from_model(&y);
        assert!(back.data.iter().zip(&x.data).all(|(a, b)| (a - b).abs() < 1e-15));
        let c = Image::from_vec(2, 1, 1, vec![3.0, 4.0]).unwrap();
        let m = AffineMap::fit(&c, RangeMap::MagnitudeMax);
        assert_eq!(m.scale, 5.0);
        let m = AffineMap::fit(&x, RangeMap::PeakScale);
        assert_eq!((m.offset, m.scale), (0.0, 1.5));
        assert_eq!(RangeMap::PeakScale.model_range(), Some([0.0, 1.0]));
    }

    #[test]
    fn mapped_purification_clips_in_model_range() {
        let s = make_schedule(10, 0.01, 0.02, ScheduleKind::Linear).unwrap();
        let x = Image::from_vec(1, 2, 2, vec![0.0, 0.5, 1.0, 2.0]).unwrap();
        let cfg = PurifierConfig {
            clip_range: Some([0.0, 1.0]),
            ..PurifierConfig::new(10)
        };
        let out = purify_mapped(&x, RangeMap::PeakScale, &cfg, &ZeroScore, &s, 1).unwrap();
        assert!(out.data.iter().all(|&v| (0.0..=2.0).contains(&v)));
        let same = purify_mapped(&x, RangeMap::PeakScale, &PurifierConfig { m: 0, ..cfg }, &ZeroScore, &s, 1).unwrap();
        assert_eq!(same, x);
    }

    #[test]
    fn empty_training_set() {
        let s = make_schedule(10, 0.01, 0.02, ScheduleKind::Linear).unwrap();
        let cfg = TrainConfig {
            arch: ArchSpec::score(1, 4, 2, 10),
            epochs: 1,
            batch: 2,
            lr: 1e-3,
            seed: 0,
            final_lr_fraction: 1.0,
            max_train_timestep: None,
            flip_augment: false,
        };
        assert!(train_score_model(&[], &s, &cfg).is_err());
        let x = Image::zeros(1, 8, 8);
        let capped = TrainConfig {
            max_train_timestep: Some(11),
            ..cfg
        };
        assert!(train_score_model(&[x], &s, &capped).is_err());
    }
}
