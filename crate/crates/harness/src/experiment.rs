//! Scan simulation, score-model training and the reconstruction sweep.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use udig_core::diffusion::{normalize_for_training, train_score_model, NoiseSchedule, TrainConfig};
use udig_core::dip::{
    dip_reconstruct, input_sensitivity_experiment, mean_std, refg_dip_reconstruct, DipConfig, InputMode, ReconTrace,
};
use udig_core::metrics::MetricConfig;
use udig_core::nets::{load_checkpoint, save_checkpoint, Algorithm, ArchSpec, Network};
use udig_core::operators::{cartesian_mask, simulate_smaps, CtOperator, LinearOperator, Measurements, MriOperator, ScaledOperator};
use udig_core::persistence::{
    load_array, save_array_described, write_json, write_results_csv, DenseArray, ResultRow,
};
use udig_core::simdata::{
    add_gaussian_noise, generate_phantom, make_mri_ground_truth, simulate_ct_measurements, simulate_mri_measurements, Dose, PhantomSpec,
};
use udig_core::udig::{overfitting_curve, udig_reconstruct, MeanCurve, UdigConfig};
use udig_core::Image;

use crate::config::{resolve, DiffusionSpec, ExperimentConfig, MethodSpec, PhantomSetKind, TaskKind, Timing};
use crate::error::{HarnessError, Result};

pub const CHECKPOINT_FILE: &str = "score.udig-array";
pub const SCHEDULE_FILE: &str = "schedule.json";

const NORM_ITERS: usize = 100;

pub enum Operator {
    Mri(MriOperator),
    /// Radon transform divided by its spectral norm, so that `λ` and the
    /// back-projected input sit on the image scale as they do for MRI.
    Ct(ScaledOperator<CtOperator>),
}

impl Operator {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        let n = cfg.image_size;
        Ok(match cfg.task {
            TaskKind::Mri => {
                let s = &cfg.mri;
                let mask = cartesian_mask(n, n, s.acceleration, s.acs_fraction, cfg.operator_seed)?;
                let smaps = simulate_smaps(s.n_coils, n, n)?;
                Operator::Mri(MriOperator::new(mask, smaps)?.with_provenance(s.acceleration, cfg.operator_seed))
            }
            TaskKind::Ct => {
                let radon = CtOperator::sparse_view(cfg.ct.n_full_views, cfg.ct.n_views, n, n)?;
                Operator::Ct(ScaledOperator::unit_norm(radon, NORM_ITERS)?)
            }
        })
    }

    pub fn as_dyn(&self) -> &dyn LinearOperator {
        match self {
            Operator::Mri(op) => op,
            Operator::Ct(op) => op,
        }
    }
}

/// One simulated acquisition.
#[derive(Debug, Clone)]
pub struct Scan {
    pub index: usize,
    pub x_true: Image,
    pub y: Measurements,
}

fn phantom_seed(cfg: &ExperimentConfig, k: usize) -> u64 {
    cfg.phantoms.seed.wrapping_add(k as u64)
}

fn phase_seed(seed: u64) -> u64 {
    seed ^ 0x0070_6861_7365
}

/// Single-channel magnitude phantom with the configured generator.
pub fn magnitude_phantom(cfg: &ExperimentConfig, seed: u64) -> Result<Image> {
    let n = cfg.image_size;
    let spec = match cfg.phantoms.kind {
        PhantomSetKind::SheppLogan => PhantomSpec::shepp_logan(n),
        _ => PhantomSpec::random_ellipses(n, cfg.phantoms.n_ellipses, seed),
    };
    Ok(generate_phantom(&spec)?)
}

/// Ground-truth image in the task's channel layout.
pub fn ground_truth(cfg: &ExperimentConfig, phantom: &Image, seed: u64) -> Result<Image> {
    Ok(match cfg.task {
        TaskKind::Mri => make_mri_ground_truth(phantom, cfg.mri.phase_strength, phase_seed(seed))?,
        TaskKind::Ct => phantom.clone(),
    })
}

fn load_stored_phantom(cfg: &ExperimentConfig, k: usize) -> Result<Image> {
    let path = resolve(&cfg.phantoms.arrays[k]);
    let arr = load_array(&path)?;
    let n = cfg.image_size;
    let img = match arr.shape.as_slice() {
        [r, c] | [1, r, c] if *r == n && *c == n => Image::from_vec(1, n, n, arr.to_f64())?,
        other => {
            return Err(HarnessError::Config(format!(
                "{}: expected a {n}×{n} image, found shape {other:?}",
                path.display()
            )))
        }
    };
    if !img.is_finite() {
        return Err(udig_core::Error::NonFinite.into());
    }
    Ok(img)
}

fn simulate(cfg: &ExperimentConfig, op: &Operator, x_true: &Image, seed: u64) -> Result<Measurements> {
    Ok(match op {
        Operator::Mri(op) => simulate_mri_measurements(op, x_true, cfg.mri.noise_sigma, seed)?,
        Operator::Ct(op) => {
            let dose = cfg.ct.photons.map_or(Dose::Noiseless, Dose::Photons);
            let mut y = simulate_ct_measurements(&op.inner, x_true, dose, seed)?.measurements;
            if cfg.ct.noise_sigma > 0.0 {
                add_gaussian_noise(&mut y, cfg.ct.noise_sigma, seed ^ 0x6e6f_6973)?;
            }
            op.rescale(&y)
        }
    })
}

pub fn load_scan(cfg: &ExperimentConfig, op: &Operator, k: usize) -> Result<Scan> {
    let seed = phantom_seed(cfg, k);
    let phantom = match cfg.phantoms.kind {
        PhantomSetKind::Arrays => load_stored_phantom(cfg, k)?,
        _ => magnitude_phantom(cfg, seed)?,
    };
    let x_true = ground_truth(cfg, &phantom, seed)?;
    let y = simulate(cfg, op, &x_true, cfg.seed.wrapping_add(k as u64))?;
    Ok(Scan { index: k, x_true, y })
}

/// Reference image for Ref-G DIP: another phantom from the same distribution.
pub fn reference_image(cfg: &ExperimentConfig, k: usize, offset: u64) -> Result<Image> {
    let seed = cfg.phantoms.seed.wrapping_add(offset).wrapping_add(k as u64);
    let phantom = magnitude_phantom(cfg, seed)?;
    ground_truth(cfg, &phantom, seed)
}

/// Pretrained score model with its schedule.
pub struct ScoreModel {
    pub net: Network,
    pub schedule: NoiseSchedule,
}

pub fn training_set(cfg: &ExperimentConfig, d: &DiffusionSpec) -> Result<Vec<Image>> {
    (0..d.n_train)
        .map(|k| {
            let seed = d.train_seed.wrapping_add(k as u64);
            let phantom = magnitude_phantom(cfg, seed)?;
            Ok(normalize_for_training(&ground_truth(cfg, &phantom, seed)?))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint_dir: PathBuf,
    pub loss_trace: Vec<f64>,
    pub model: Network,
    pub schedule: NoiseSchedule,
}

/// Trains the score model described by `cfg.diffusion` and writes the
/// checkpoint, schedule, training config and loss trace.
pub fn train_dm(cfg: &ExperimentConfig) -> Result<TrainReport> {
    let d = cfg
        .diffusion
        .as_ref()
        .ok_or_else(|| HarnessError::Config("missing `diffusion` section".into()))?;
    let schedule = NoiseSchedule::new(d.schedule.clone()).map_err(|e| HarnessError::Config(format!("diffusion.schedule: {e}")))?;
    let data = training_set(cfg, d)?;
    let train = TrainConfig {
        arch: ArchSpec::score(cfg.task.channels(), d.network.base_width, d.network.depth, schedule.steps()),
        epochs: d.epochs,
        batch: d.batch,
        lr: d.lr,
        seed: cfg.seed,
        final_lr_fraction: d.final_lr_fraction,
        max_train_timestep: d.max_train_timestep,
        flip_augment: d.flip_augment,
    };
    let trained = train_score_model(&data, &schedule, &train)?;
    let dir = resolve(&d.checkpoint);
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(dir.display(), e))?;
    save_checkpoint(dir.join(CHECKPOINT_FILE), &trained.net)?;
    write_json(dir.join(SCHEDULE_FILE), &schedule.spec())?;
    write_json(dir.join("train.json"), &train)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in trained.loss_trace.iter().enumerate() {
        csv.push_str(&format!("{},{l:.8}\n", i + 1));
    }
    fs::write(dir.join("loss_trace.csv"), csv).map_err(|e| HarnessError::io(dir.display(), e))?;
    Ok(TrainReport {
        checkpoint_dir: dir,
        loss_trace: trained.loss_trace,
        model: trained.net,
        schedule,
    })
}

pub fn load_score_model(dir: &Path) -> Result<ScoreModel> {
    let ckpt = dir.join(CHECKPOINT_FILE);
    if !ckpt.is_file() {
        return Err(HarnessError::MissingCheckpoint(ckpt));
    }
    let net = load_checkpoint(&ckpt)?;
    let text = fs::read_to_string(dir.join(SCHEDULE_FILE)).map_err(|e| HarnessError::io(dir.display(), e))?;
    let schedule = NoiseSchedule::new(serde_json::from_str(&text)?)?;
    Ok(ScoreModel { net, schedule })
}

/// Resolved per-run configuration written to each run directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub scan: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dip: Option<DipConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub udig: Option<UdigConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<udig_core::diffusion::ScheduleSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score_arch: Option<ArchSpec>,
}

/// Runs one method on one scan. Every method on scan `k` starts from the
/// same network seed.
pub fn run_method(
    cfg: &ExperimentConfig,
    method: &MethodSpec,
    scan: &Scan,
    op: &Operator,
    score: Option<&ScoreModel>,
) -> Result<(ReconTrace, RunRecord)> {
    let metric = MetricConfig::default();
    let seed = cfg.seed.wrapping_add(scan.index as u64);
    let arch = cfg.unet_arch();
    let dip_cfg = |iters, lr, input_mode| DipConfig {
        iters,
        lr,
        input_mode,
        noise_sigma: 0.0,
        seed,
        eval_every: cfg.eval_every,
        optimizer: Algorithm::Adam,
        arch: arch.clone(),
    };
    let mut record = RunRecord {
        method: method.name().to_string(),
        scan: scan.index,
        dip: None,
        udig: None,
        schedule: None,
        score_arch: None,
    };
    let trace = match method {
        MethodSpec::Dip(spec) => {
            let d = dip_cfg(spec.iters, spec.lr, spec.input_mode);
            let t = dip_reconstruct(&scan.y, op.as_dyn(), &d, Some(&scan.x_true), &metric)?;
            record.dip = Some(d);
            t
        }
        MethodSpec::RefgDip(spec) => {
            let d = dip_cfg(spec.iters, spec.lr, InputMode::Reference);
            let reference = reference_image(cfg, scan.index, spec.reference_offset)?;
            let t = refg_dip_reconstruct(&scan.y, op.as_dyn(), &reference, &d, Some(&scan.x_true), &metric)?;
            record.dip = Some(d);
            t
        }
        MethodSpec::Udig(spec) => {
            let score = score.ok_or_else(|| HarnessError::Config(format!("{} needs a score model", method.name())))?;
            let u = UdigConfig {
                k: spec.k,
                n: spec.n,
                m: spec.m,
                lambda: spec.lambda,
                lr: spec.lr,
                optimizer: Algorithm::Adam,
                seed,
                eval_every: cfg.eval_every,
                arch: arch.clone(),
                range_map: cfg.task.range_map(),
            };
            let t = udig_reconstruct(
                &scan.y,
                op.as_dyn(),
                &score.net,
                &score.schedule,
                &u,
                Some(&scan.x_true),
                &metric,
            )?;
            record.udig = Some(u);
            record.schedule = Some(score.schedule.spec());
            record.score_arch = Some(score.net.arch.clone());
            t
        }
    };
    Ok((trace, record))
}

/// Directory-safe form of a method name.
pub fn slug(name: &str) -> String {
    let mut s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect();
    while s.contains("__") {
        s = s.replace("__", "_");
    }
    s.trim_matches('_').to_string()
}

pub fn run_dir(root: &Path, method: &str, scan: usize) -> PathBuf {
    root.join("runs").join(slug(method)).join(format!("scan_{scan:03}"))
}

pub fn truth_path(root: &Path, scan: usize) -> PathBuf {
    root.join("scans").join(format!("scan_{scan:03}")).join("truth.udig-array")
}

fn save_image(path: &Path, img: &Image, description: &str) -> Result<()> {
    let arr = DenseArray::from_f32(
        vec![img.channels, img.rows, img.cols],
        img.data.iter().map(|&v| v as f32).collect(),
    )?;
    save_array_described(path, &arr, description)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub scan: usize,
    pub method: Option<String>,
    pub error: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub n_ok: usize,
    pub best_psnr_db: Vec<f64>,
    pub best_ssim: Vec<f64>,
    pub best_iter: Vec<usize>,
    pub peak_iteration: usize,
}

/// Everything `reconstruct` produced, in (method, scan) order.
#[derive(Debug, Clone)]
pub struct ReconstructReport {
    pub output_dir: PathBuf,
    pub rows: Vec<ResultRow>,
    pub curves: Vec<MeanCurve>,
    pub methods: Vec<MethodSummary>,
    pub failures: Vec<Failure>,
}

impl ReconstructReport {
    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    pub fn curve(&self, name: &str) -> Option<&MeanCurve> {
        self.curves.iter().find(|c| c.method == name)
    }
}

pub fn worker_pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.workers {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| HarnessError::Config(format!("worker pool: {e}")))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| HarnessError::io(path.display(), e))
}

/// Runs every configured method on every scan and writes `results.csv`,
/// `curves.csv`, `summary.json` and one run directory per (method, scan).
pub fn reconstruct(cfg: &ExperimentConfig, score: Option<&ScoreModel>) -> Result<ReconstructReport> {
    if cfg.methods.is_empty() {
        return Err(HarnessError::Config("no methods configured".into()));
    }
    let owned;
    let score = match score {
        Some(s) => Some(s),
        None if cfg.methods.iter().any(MethodSpec::needs_score_model) => {
            let dir = cfg
                .checkpoint_path()
                .ok_or_else(|| HarnessError::Config("uDiG methods need a `diffusion.checkpoint`".into()))?;
            owned = load_score_model(&dir)?;
            Some(&owned)
        }
        None => None,
    };
    let root = cfg.output_path();
    mkdir(&root)?;
    write_json(root.join("config.json"), cfg)?;
    let op = Operator::build(cfg)?;
    let pool = worker_pool(cfg)?;

    let scans: Vec<Result<Scan>> = pool.install(|| (0..cfg.n_scans).into_par_iter().map(|k| load_scan(cfg, &op, k)).collect());
    for scan in scans.iter().flatten() {
        let p = truth_path(&root, scan.index);
        mkdir(p.parent().expect("truth path has a parent"))?;
        save_image(&p, &scan.x_true, "ground truth")?;
    }

    let jobs: Vec<(usize, usize)> = (0..cfg.methods.len())
        .flat_map(|m| (0..cfg.n_scans).map(move |k| (m, k)))
        .collect();
    let outcomes: Vec<Result<ReconTrace>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(m, k)| {
                let scan = scans[k].as_ref().map_err(|e| HarnessError::Config(format!("scan {k}: {e}")))?;
                let method = &cfg.methods[m];
                let (trace, record) = run_method(cfg, method, scan, &op, score)?;
                let dir = run_dir(&root, method.name(), k);
                mkdir(&dir)?;
                write_json(dir.join("config.json"), &record)?;
                trace.save(&dir)?;
                if let Some(at) = trace.aborted_at {
                    return Err(udig_core::Error::NonFiniteLoss { iteration: at }.into());
                }
                Ok(trace)
            })
            .collect()
    });

    let mut failures = Vec::new();
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    let mut methods = Vec::new();
    for (m, method) in cfg.methods.iter().enumerate() {
        let mut ok = Vec::new();
        for k in 0..cfg.n_scans {
            match &outcomes[m * cfg.n_scans + k] {
                Ok(t) => ok.push(t.clone()),
                Err(e) => failures.push(Failure {
                    scan: k,
                    method: Some(method.name().to_string()),
                    error: e.to_string(),
                }),
            }
        }
        if ok.is_empty() {
            continue;
        }
        let psnr: Vec<f64> = ok.iter().map(|t| t.best_psnr_db).collect();
        let ssim: Vec<f64> = ok.iter().map(|t| t.best_ssim).collect();
        let (pm, ps) = mean_std(&psnr);
        let (sm, ss) = mean_std(&ssim);
        let runtime = match cfg.timing {
            Timing::WallClock => ok.iter().map(|t| t.runtime_secs).sum::<f64>() / ok.len() as f64 / 60.0,
            Timing::Omit => 0.0,
        };
        rows.push(ResultRow {
            task: cfg.task.task(),
            setting: cfg.setting_label(),
            method: method.name().to_string(),
            psnr_mean_db: pm,
            psnr_std_db: ps,
            ssim_mean: sm.clamp(0.0, 1.0),
            ssim_std: ss,
            runtime_minutes: runtime,
        });
        let curve = overfitting_curve(method.name(), &ok)?;
        methods.push(MethodSummary {
            method: method.name().to_string(),
            n_ok: ok.len(),
            best_iter: ok.iter().map(|t| t.best_iter).collect(),
            best_psnr_db: psnr,
            best_ssim: ssim,
            peak_iteration: curve.peak_iteration,
        });
        curves.push(curve);
    }
    if !rows.is_empty() {
        write_results_csv(&rows, root.join("results.csv"))?;
    }
    write_curves_csv(&root.join("curves.csv"), &curves)?;
    write_json(
        root.join("summary.json"),
        &serde_json::json!({ "methods": methods, "failures": failures }),
    )?;
    Ok(ReconstructReport {
        output_dir: root,
        rows,
        curves,
        methods,
        failures,
    })
}

pub fn write_curves_csv(path: &Path, curves: &[MeanCurve]) -> Result<()> {
    let mut out = String::from("method,iteration,mean_psnr_db,std_psnr_db\n");
    for c in curves {
        let name = if c.method.contains([',', '"', '\n']) {
            format!("\"{}\"", c.method.replace('"', "\"\""))
        } else {
            c.method.clone()
        };
        for (j, it) in c.iterations.iter().enumerate() {
            out.push_str(&format!("{name},{it},{:.4},{:.4}\n", c.mean_psnr_db[j], c.std_psnr_db[j]));
        }
    }
    fs::write(path, out).map_err(|e| HarnessError::io(path.display(), e))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityPoint {
    pub sigma: f64,
    pub mean_best_psnr_db: f64,
    pub std_best_psnr_db: f64,
    pub n_runs: usize,
}

#[derive(Debug, Clone)]
pub struct SensitivityReport {
    pub output_dir: PathBuf,
    pub points: Vec<SensitivityPoint>,
    /// `(scan, sigma, best PSNR per seed)`.
    pub runs: Vec<(usize, f64, Vec<f64>)>,
}

/// Best-PSNR of DIP with input `x* + δ` over the σ grid, averaged over scans
/// and seeds. Writes `sensitivity.csv`, `sensitivity_runs.csv` and a plot.
pub fn sensitivity(cfg: &ExperimentConfig) -> Result<SensitivityReport> {
    let s = cfg
        .sensitivity
        .as_ref()
        .ok_or_else(|| HarnessError::Config("missing `sensitivity` section".into()))?;
    let root = cfg.output_path();
    mkdir(&root)?;
    let op = Operator::build(cfg)?;
    let pool = worker_pool(cfg)?;
    let metric = MetricConfig::default();
    let per_scan: Vec<Result<Vec<(usize, f64, Vec<f64>)>>> = pool.install(|| {
        (0..cfg.n_scans)
            .into_par_iter()
            .map(|k| {
                let scan = load_scan(cfg, &op, k)?;
                let d = DipConfig {
                    iters: s.iters,
                    lr: s.lr,
                    input_mode: InputMode::GroundTruthPlusNoise,
                    noise_sigma: 0.0,
                    seed: cfg.seed.wrapping_add(1000 * k as u64),
                    eval_every: cfg.eval_every,
                    optimizer: Algorithm::Adam,
                    arch: cfg.unet_arch(),
                };
                let rows =
                    input_sensitivity_experiment(&scan.x_true, &scan.y, op.as_dyn(), &s.sigmas, &d, s.n_seeds, &metric)?;
                Ok(rows.into_iter().map(|r| (k, r.sigma, r.best_psnr_per_seed)).collect())
            })
            .collect()
    });
    let mut runs = Vec::new();
    for r in per_scan {
        runs.extend(r?);
    }
    let points: Vec<SensitivityPoint> = s
        .sigmas
        .iter()
        .enumerate()
        .map(|(j, &sigma)| {
            let all: Vec<f64> = runs
                .iter()
                .skip(j)
                .step_by(s.sigmas.len())
                .flat_map(|(_, _, v)| v.iter().copied())
                .collect();
            let (mean, std) = mean_std(&all);
            SensitivityPoint {
                sigma,
                mean_best_psnr_db: mean,
                std_best_psnr_db: std,
                n_runs: all.len(),
            }
        })
        .collect();
    let mut csv = String::from("sigma,mean_best_psnr_db,std_best_psnr_db,n_runs\n");
    for p in &points {
        csv.push_str(&format!("{:.4},{:.4},{:.4},{}\n", p.sigma, p.mean_best_psnr_db, p.std_best_psnr_db, p.n_runs));
    }
    fs::write(root.join("sensitivity.csv"), csv).map_err(|e| HarnessError::io(root.display(), e))?;
    let mut detail = String::from("scan,sigma,seed,best_psnr_db\n");
    for (k, sigma, v) in &runs {
        for (i, p) in v.iter().enumerate() {
            detail.push_str(&format!("{k},{sigma:.4},{i},{p:.4}\n"));
        }
    }
    fs::write(root.join("sensitivity_runs.csv"), detail).map_err(|e| HarnessError::io(root.display(), e))?;
    crate::figures::sensitivity_plot(&root.join("sensitivity.svg"), &points)?;
    Ok(SensitivityReport {
        output_dir: root,
        points,
        runs,
    })
}
