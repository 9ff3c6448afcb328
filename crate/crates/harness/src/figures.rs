//! SVG figures: PSNR-vs-iteration curves, the input-sensitivity curve and
//! reconstruction panels with a zoomed error inset.

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use base64::Engine;
use plotters::prelude::*;
use udig_core::metrics::{psnr, MetricConfig};
use udig_core::persistence::{load_array, read_trace_csv};
use udig_core::udig::{mean_curve, MeanCurve};
use udig_core::Image;

use crate::error::{HarnessError, Result};
use crate::experiment::{truth_path, RunRecord, SensitivityPoint};

const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

fn plot_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Plot(e.to_string())
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(0.5);
    (lo - pad, hi + pad)
}

/// Mean PSNR against overall iteration, one line per method.
pub fn curve_plot(path: &Path, curves: &[MeanCurve]) -> Result<()> {
    let x_max = curves.iter().flat_map(|c| c.iterations.iter().copied()).max().unwrap_or(1) as f64;
    let (y_lo, y_hi) = padded_range(curves.iter().flat_map(|c| c.mean_psnr_db.iter().copied()));
    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Average PSNR vs. overall iteration", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, y_lo..y_hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("iteration")
        .y_desc("PSNR (dB)")
        .draw()
        .map_err(plot_err)?;
    for (i, c) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts = c.iterations.iter().zip(&c.mean_psnr_db).map(|(&x, &y)| (x as f64, y));
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(2)))
            .map_err(plot_err)?
            .label(c.method.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .position(SeriesLabelPosition::LowerRight)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Best-possible PSNR against input perturbation level σ.
pub fn sensitivity_plot(path: &Path, points: &[SensitivityPoint]) -> Result<()> {
    let x_max = points.iter().map(|p| p.sigma).fold(0.0, f64::max).max(1e-3) * 1.05;
    let (y_lo, y_hi) = padded_range(
        points
            .iter()
            .flat_map(|p| [p.mean_best_psnr_db - p.std_best_psnr_db, p.mean_best_psnr_db + p.std_best_psnr_db]),
    );
    let root = SVGBackend::new(path, (640, 440)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("Average best possible PSNR vs. input noise", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x_max, y_lo..y_hi)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("σ")
        .y_desc("best PSNR (dB)")
        .draw()
        .map_err(plot_err)?;
    let color = COLORS[0];
    chart
        .draw_series(LineSeries::new(
            points.iter().map(|p| (p.sigma, p.mean_best_psnr_db)),
            color.stroke_width(2),
        ))
        .map_err(plot_err)?;
    chart
        .draw_series(points.iter().map(|p| Circle::new((p.sigma, p.mean_best_psnr_db), 4, color.filled())))
        .map_err(plot_err)?;
    chart
        .draw_series(points.iter().map(|p| {
            PathElement::new(
                vec![
                    (p.sigma, p.mean_best_psnr_db - p.std_best_psnr_db),
                    (p.sigma, p.mean_best_psnr_db + p.std_best_psnr_db),
                ],
                color,
            )
        }))
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// PNG of one magnitude plane, linearly mapped from `[lo, hi]` to gray levels.
fn png_base64(img: &Image, lo: f64, hi: f64) -> Result<String> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = img
        .data
        .iter()
        .take(img.plane_len())
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(img.cols as u32, img.rows as u32, pixels)
        .ok_or_else(|| HarnessError::Plot("image buffer size mismatch".into()))?;
    let mut bytes = Vec::new();
    buf.write_to(&mut Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(plot_err)?;
    Ok(base64::engine::general_purpose::STANDARD.encode(bytes))
}

fn crop(img: &Image, r0: usize, c0: usize, h: usize, w: usize) -> Image {
    let mut out = Image::zeros(1, h, w);
    for r in 0..h {
        for c in 0..w {
            out.set(0, r, c, img.get(0, r0 + r, c0 + c));
        }
    }
    out
}

fn abs_diff(a: &Image, b: &Image) -> Image {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).collect();
    Image::from_vec(a.channels, a.rows, a.cols, data).expect("same shape")
}

/// Caption text for a reconstruction panel.
pub fn psnr_caption(psnr_db: f64) -> String {
    if psnr_db.is_finite() && psnr_db < 99.99 {
        format!("PSNR = {psnr_db:.2} dB")
    } else {
        "PSNR = ∞ dB".to_string()
    }
}

/// Ground truth followed by each reconstruction (top row) and its error map
/// with a boxed region shown magnified in the corner (bottom row).
pub fn panels(path: &Path, truth: &Image, recons: &[(String, Image)]) -> Result<()> {
    const CELL: usize = 200;
    const PAD: usize = 12;
    const CAP: usize = 22;
    let t = truth.magnitude();
    let (_, hi) = t.min_max();
    let err_hi = 0.25 * hi.max(1e-12);
    let metric = MetricConfig::default();
    let (n_r, n_c) = (t.rows, t.cols);
    let (bh, bw) = ((n_r / 4).max(4), (n_c / 4).max(4));
    let (br, bc) = (n_r / 2 - bh / 2, n_c / 2 - bw / 2);
    let sx = CELL as f64 / n_c as f64;
    let sy = CELL as f64 / n_r as f64;
    let inset = CELL * 2 / 5;

    let cols = recons.len() + 1;
    let width = cols * (CELL + PAD) + PAD;
    let height = 2 * (CELL + CAP + PAD) + PAD + 24;
    let mut svg = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" xmlns:xlink="http://www.w3.org/1999/xlink" width="{width}" height="{height}" font-family="sans-serif">
<rect width="100%" height="100%" fill="white"/>
"#
    );
    let image_tag = |x: usize, y: usize, w: usize, h: usize, b64: &str| {
        format!(
            r#"<image x="{x}" y="{y}" width="{w}" height="{h}" style="image-rendering:pixelated" preserveAspectRatio="none" xlink:href="data:image/png;base64,{b64}"/>
"#
        )
    };
    let text = |x: usize, y: usize, s: &str| {
        format!(r#"<text x="{x}" y="{y}" font-size="14" text-anchor="middle">{s}</text>
"#)
    };
    let add_cell = |svg: &mut String, col: usize, name: &str, img: &Image, caption: &str, err: Option<&Image>| -> Result<()> {
        let x = PAD + col * (CELL + PAD);
        let y = PAD + 18;
        svg.push_str(&text(x + CELL / 2, PAD + 12, name));
        svg.push_str(&image_tag(x, y, CELL, CELL, &png_base64(img, 0.0, hi)?));
        svg.push_str(&text(x + CELL / 2, y + CELL + 16, caption));
        if let Some(e) = err {
            let y2 = y + CELL + CAP + PAD;
            svg.push_str(&image_tag(x, y2, CELL, CELL, &png_base64(e, 0.0, err_hi)?));
            let (rx, ry) = (x as f64 + bc as f64 * sx, y2 as f64 + br as f64 * sy);
            svg.push_str(&format!(
                r#"<rect x="{rx:.1}" y="{ry:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="red" stroke-width="1.5"/>
"#,
                bw as f64 * sx,
                bh as f64 * sy
            ));
            let zoom = crop(e, br, bc, bh, bw);
            let (ix, iy) = (x + CELL - inset, y2 + CELL - inset);
            svg.push_str(&image_tag(ix, iy, inset, inset, &png_base64(&zoom, 0.0, err_hi)?));
            svg.push_str(&format!(
                r#"<rect x="{ix}" y="{iy}" width="{inset}" height="{inset}" fill="none" stroke="red" stroke-width="1.5"/>
"#
            ));
        }
        Ok(())
    };
    add_cell(&mut svg, 0, "Ground truth", &t, &psnr_caption(f64::INFINITY), None)?;
    for (i, (name, recon)) in recons.iter().enumerate() {
        recon.check_shape(truth.shape())?;
        let p = psnr(&recon.magnitude(), &t, &metric)?;
        let m = recon.magnitude();
        let e = abs_diff(&m, &t);
        add_cell(&mut svg, i + 1, &escape(name), &m, &psnr_caption(p), Some(&e))?;
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(|e| HarnessError::io(path.display(), e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn load_image(path: &Path) -> Result<Image> {
    let arr = load_array(path)?;
    match arr.shape.as_slice() {
        [c, r, k] => Ok(Image::from_vec(*c, *r, *k, arr.to_f64())?),
        other => Err(HarnessError::Plot(format!("{}: unexpected shape {other:?}", path.display()))),
    }
}

struct MethodRuns {
    name: String,
    /// `(scan, run directory)` sorted by scan.
    runs: Vec<(usize, PathBuf)>,
}

fn discover(dir: &Path) -> Result<Vec<MethodRuns>> {
    let runs_dir = dir.join("runs");
    let mut by_method: BTreeMap<String, MethodRuns> = BTreeMap::new();
    let Ok(entries) = fs::read_dir(&runs_dir) else {
        return Ok(Vec::new());
    };
    let mut method_dirs: Vec<PathBuf> = entries.flatten().map(|e| e.path()).filter(|p| p.is_dir()).collect();
    method_dirs.sort();
    for mdir in method_dirs {
        let mut scans: Vec<PathBuf> = fs::read_dir(&mdir)
            .map_err(|e| HarnessError::io(mdir.display(), e))?
            .flatten()
            .map(|e| e.path())
            .filter(|p| p.join("trace.csv").is_file())
            .collect();
        scans.sort();
        for sdir in scans {
            let text = fs::read_to_string(sdir.join("config.json")).map_err(|e| HarnessError::io(sdir.display(), e))?;
            let record: RunRecord = serde_json::from_str(&text)?;
            let key = mdir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            by_method
                .entry(key)
                .or_insert_with(|| MethodRuns {
                    name: record.method.clone(),
                    runs: Vec::new(),
                })
                .runs
                .push((record.scan, sdir));
        }
    }
    Ok(by_method.into_values().filter(|m| !m.runs.is_empty()).collect())
}

/// Emits figures for a finished results directory into `<dir>/figures`.
/// Nothing is written when the directory holds no traces.
pub fn cmd_figures(dir: &Path) -> Result<Vec<PathBuf>> {
    let methods = discover(dir)?;
    let sensitivity = dir.join("sensitivity.csv");
    if methods.is_empty() && !sensitivity.is_file() {
        return Err(HarnessError::MissingTraces(dir.to_path_buf()));
    }
    let mut curves = Vec::new();
    for m in &methods {
        let traces = m
            .runs
            .iter()
            .map(|(_, d)| read_trace_csv(d.join("trace.csv")))
            .collect::<udig_core::Result<Vec<_>>>()?;
        let series: Vec<(&[usize], &[f64])> = traces.iter().map(|t| (&t.iterations[..], &t.psnr_db[..])).collect();
        curves.push(mean_curve(&m.name, &series)?);
    }
    let out = dir.join("figures");
    fs::create_dir_all(&out).map_err(|e| HarnessError::io(out.display(), e))?;
    let mut written = Vec::new();
    if !curves.is_empty() {
        let p = out.join("psnr_vs_iteration.svg");
        curve_plot(&p, &curves)?;
        written.push(p);
    }
    if sensitivity.is_file() {
        let points = read_sensitivity_csv(&sensitivity)?;
        let p = out.join("sensitivity.svg");
        sensitivity_plot(&p, &points)?;
        written.push(p);
    }
    if let Some(first) = methods.first() {
        for &(scan, _) in &first.runs {
            let tp = truth_path(dir, scan);
            if !tp.is_file() {
                continue;
            }
            let truth = load_image(&tp)?;
            let mut recons = Vec::new();
            for m in &methods {
                if let Some((_, d)) = m.runs.iter().find(|(s, _)| *s == scan) {
                    recons.push((m.name.clone(), load_image(&d.join("recon.udig-array"))?));
                }
            }
            let p = out.join(format!("panels_scan_{scan:03}.svg"));
            panels(&p, &truth, &recons)?;
            written.push(p);
        }
    }
    Ok(written)
}

fn read_sensitivity_csv(path: &Path) -> Result<Vec<SensitivityPoint>> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path.display(), e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || HarnessError::Plot(format!("{}:{}: malformed row", path.display(), i + 1));
        if f.len() != 4 {
            return Err(bad());
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad());
        out.push(SensitivityPoint {
            sigma: num(f[0])?,
            mean_best_psnr_db: num(f[1])?,
            std_best_psnr_db: num(f[2])?,
            n_runs: f[3].trim().parse().map_err(|_| bad())?,
        });
    }
    Ok(out)
}
