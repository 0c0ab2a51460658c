//! Luma PSNR and SSIM with border shaving, evaluation reports and the
//! inference timing harness.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::data::{rgb_to_y, Image, YRange};
use crate::error::{Error, Result};
use crate::model::DsrNet;
use crate::rng::Rng;
use crate::tensor::{Element, Shape, Tensor};

fn shaved_luma(pred: &Image, reference: &Image, shave: usize, range: YRange) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    if (pred.width(), pred.height(), pred.channels()) != (reference.width(), reference.height(), reference.channels()) {
        return Err(Error::invalid(
            "metrics",
            format!(
                "prediction {}x{}x{} vs reference {}x{}x{}",
                pred.width(),
                pred.height(),
                pred.channels(),
                reference.width(),
                reference.height(),
                reference.channels()
            ),
        ));
    }
    let (w, h) = (pred.width(), pred.height());
    if 2 * shave >= w || 2 * shave >= h {
        return Err(Error::invalid("metrics", format!("shave {shave} leaves nothing of {w}x{h}")));
    }
    let (iw, ih) = (w - 2 * shave, h - 2 * shave);
    let crop = |img: &Image| -> Result<Vec<f64>> {
        let y = rgb_to_y(img, range)?;
        Ok(y.crop(shave, shave, iw, ih)?.data().to_vec())
    };
    Ok((crop(pred)?, crop(reference)?, iw, ih))
}

/// PSNR in dB of the luma channel on the `[0, 1]` scale, ignoring a
/// `shave`-pixel border. Identical images give `f64::INFINITY`.
pub fn psnr_y(pred: &Image, reference: &Image, shave: usize) -> Result<f64> {
    psnr_y_with(pred, reference, shave, YRange::Studio)
}

pub fn psnr_y_with(pred: &Image, reference: &Image, shave: usize, range: YRange) -> Result<f64> {
    let (a, b, _, _) = shaved_luma(pred, reference, shave, range)?;
    let mse = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let sum: f64 = g.iter().sum();
    g.into_iter().map(|v| v / sum).collect()
}

/// Separable "valid" filtering with the Gaussian window.
fn filter_valid(x: &[f64], w: usize, h: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ow, oh) = (w + 1 - k, h + 1 - k);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..k).map(|j| g[j] * x[y * w + xo + j]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|j| g[j] * rows[(yo + j) * ow + xo]).sum();
        }
    }
    out
}

/// Mean single-scale SSIM of the luma channel (8-bit scale, 11x11 Gaussian
/// window with sigma 1.5, K1 = 0.01, K2 = 0.03), over window positions that
/// fit entirely inside the shaved region.
pub fn ssim_y(pred: &Image, reference: &Image, shave: usize) -> Result<f64> {
    ssim_y_with(pred, reference, shave, YRange::Studio)
}

pub fn ssim_y_with(pred: &Image, reference: &Image, shave: usize, range: YRange) -> Result<f64> {
    let (a, b, w, h) = shaved_luma(pred, reference, shave, range)?;
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(
            "ssim_y",
            format!("{w}x{h} region is smaller than the {SSIM_WINDOW}px window"),
        ));
    }
    let a: Vec<f64> = a.iter().map(|v| v * 255.0).collect();
    let b: Vec<f64> = b.iter().map(|v| v * 255.0).collect();
    let g = gaussian_window();
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let mu_a = filter_valid(&a, w, h, &g);
    let mu_b = filter_valid(&b, w, h, &g);
    let saa = filter_valid(&prod(&a, &a), w, h, &g);
    let sbb = filter_valid(&prod(&b, &b), w, h, &g);
    let sab = filter_valid(&prod(&a, &b), w, h, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = saa[i] - ma * ma;
        let vb = sbb[i] - mb * mb;
        let cov = sab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub method: String,
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingResult {
    pub lr_size: usize,
    pub runs: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub scale: usize,
    pub rows: Vec<EvalRow>,
    pub timing: Vec<TimingResult>,
}

fn fmt_db(v: f64, digits: usize) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.digits$}")
    }
}

impl EvalReport {
    pub fn new(scale: usize) -> Self {
        EvalReport {
            scale,
            ..Self::default()
        }
    }

    pub fn push(&mut self, method: &str, image: &str, psnr: f64, ssim: f64) {
        self.rows.push(EvalRow {
            method: method.to_string(),
            image: image.to_string(),
            psnr,
            ssim,
        });
    }

    /// Methods in order of first appearance.
    pub fn methods(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method.as_str()) {
                out.push(&r.method);
            }
        }
        out
    }

    pub fn rows_for<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a EvalRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }

    /// Arithmetic means `(psnr, ssim)` over the images of one method.
    pub fn mean(&self, method: &str) -> Option<(f64, f64)> {
        let rows: Vec<&EvalRow> = self.rows_for(method).collect();
        if rows.is_empty() {
            return None;
        }
        let n = rows.len() as f64;
        Some((
            rows.iter().map(|r| r.psnr).sum::<f64>() / n,
            rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        ))
    }

    /// Per-image rows, then one `mean` row per method. PSNR of identical
    /// images is written as `inf`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "image", "psnr_db", "ssim"])?;
        for r in &self.rows {
            w.write_record([&r.method, &r.image, &fmt_db(r.psnr, 4), &format!("{:.6}", r.ssim)])?;
        }
        for m in self.methods() {
            let (p, s) = self.mean(m).expect("method has rows");
            w.write_record([m, "mean", &fmt_db(p, 4), &format!("{s:.6}")])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_timing_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["lr_size", "runs", "median_ms", "mean_ms"])?;
        for t in &self.timing {
            w.write_record([
                t.lr_size.to_string(),
                t.runs.to_string(),
                format!("{:.4}", t.median_ms),
                format!("{:.4}", t.mean_ms),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Aligned text table: one `PSNR/SSIM` cell per method per image and a
    /// final mean row.
    pub fn to_table(&self) -> String {
        let methods = self.methods();
        let mut images: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !images.contains(&r.image.as_str()) {
                images.push(&r.image);
            }
        }
        let cell = |p: f64, s: f64| format!("{}/{:.4}", fmt_db(p, 2), s);
        let mut grid: Vec<Vec<String>> = vec![std::iter::once(format!("x{}", self.scale))
            .chain(methods.iter().map(|m| m.to_string()))
            .collect()];
        for img in &images {
            let mut row = vec![img.to_string()];
            for m in &methods {
                let r = self.rows.iter().find(|r| r.method == *m && r.image == *img);
                row.push(r.map(|r| cell(r.psnr, r.ssim)).unwrap_or_else(|| "-".into()));
            }
            grid.push(row);
        }
        let mut mean = vec!["mean".to_string()];
        for m in &methods {
            let (p, s) = self.mean(m).expect("method has rows");
            mean.push(cell(p, s));
        }
        grid.push(mean);

        let cols = grid[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| grid.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in grid.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 || i == grid.len() - 2 {
                let total = widths.iter().sum::<usize>() + 2 * (cols - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        if !self.timing.is_empty() {
            out.push('\n');
            out.push_str(&timing_table(&self.timing));
        }
        out
    }
}

pub fn timing_table(rows: &[TimingResult]) -> String {
    let mut out = format!("{:>8}  {:>6}  {:>12}  {:>12}\n", "lr_size", "runs", "median_ms", "mean_ms");
    for t in rows {
        let _ = writeln!(
            out,
            "{:>8}  {:>6}  {:>12.3}  {:>12.3}",
            t.lr_size, t.runs, t.median_ms, t.mean_ms
        );
    }
    out
}

/// Median of the samples; the mean of the two middle values for an even
/// count.
pub fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Wall-clock time of single-image inference on a fixed random
/// `lr_size x lr_size` input, after `warmup` discarded runs.
pub fn time_inference<T: Element>(
    model: &DsrNet<T>,
    lr_size: usize,
    runs: usize,
    warmup: usize,
    seed: u64,
) -> Result<TimingResult> {
    if runs == 0 {
        return Err(Error::invalid("time_inference", "runs must be positive"));
    }
    let shape = Shape::new(1, model.config().in_channels, lr_size, lr_size);
    let x = Tensor::<T>::uniform(shape, 0.0, 1.0, &mut Rng::named(seed, "bench-input"));
    for _ in 0..warmup {
        model.infer(&x)?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let start = Instant::now();
        let out = model.infer(&x)?;
        samples.push(start.elapsed().as_secs_f64() * 1e3);
        drop(out);
    }
    Ok(TimingResult {
        lr_size,
        runs,
        median_ms: median(&samples),
        mean_ms: samples.iter().sum::<f64>() / runs as f64,
    })
}
