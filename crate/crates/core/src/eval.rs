//! Image-quality metrics and test-split reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{frame_file_name, read_png};
use crate::error::{Error, Result};
use crate::field::FieldState;
use crate::render::{render_frame_path, RenderConfig, RenderPath};
use crate::types::{GrayImage, SweepDataset};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Standard MS-SSIM scale weights, finest first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

fn check_shapes(a: &GrayImage, b: &GrayImage) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::Shape(format!(
            "images are {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &GrayImage, b: &GrayImage, peak: f64) -> Result<f64> {
    check_shapes(a, b)?;
    if a.data.is_empty() {
        return Err(Error::Shape("empty images".into()));
    }
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).clamp(0.0, PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, peak: 1.0 }
    }
}

impl SsimParams {
    fn kernel(&self) -> Vec<f64> {
        let r = (self.window / 2) as f64;
        let g: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = g.iter().sum();
        g.into_iter().map(|v| v / s).collect()
    }
}

/// Separable "valid" filtering of an `h x w` image with a 1D kernel.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (ho, wo) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..n).map(|i| k[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM and mean contrast-structure term.
fn ssim_parts(a: &[f64], b: &[f64], h: usize, w: usize, p: &SsimParams) -> Result<(f64, f64)> {
    if h < p.window || w < p.window {
        return Err(Error::Shape(format!("{h}x{w} image is smaller than the {0}x{0} window", p.window)));
    }
    let k = p.kernel();
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let prod = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(u, v)| u * v).collect() };
    let (mu_a, _, _) = filter_valid(a, h, w, &k);
    let (mu_b, _, _) = filter_valid(b, h, w, &k);
    let (aa, _, _) = filter_valid(&prod(a, a), h, w, &k);
    let (bb, _, _) = filter_valid(&prod(b, b), h, w, &k);
    let (ab, _, _) = filter_valid(&prod(a, b), h, w, &k);
    let n = mu_a.len() as f64;
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        s_sum += l * cs;
        cs_sum += cs;
    }
    Ok(((s_sum / n).clamp(-1.0, 1.0), (cs_sum / n).clamp(-1.0, 1.0)))
}

/// Gaussian-window SSIM averaged over all valid window positions.
pub fn ssim(a: &GrayImage, b: &GrayImage) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

pub fn ssim_with(a: &GrayImage, b: &GrayImage, p: &SsimParams) -> Result<f64> {
    check_shapes(a, b)?;
    Ok(ssim_parts(&a.to_f64(), &b.to_f64(), a.height, a.width, p)?.0)
}

fn downsample(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            let i = 2 * y * w + 2 * x;
            out[y * wo + x] = 0.25 * (img[i] + img[i + 1] + img[i + w] + img[i + w + 1]);
        }
    }
    (out, ho, wo)
}

/// Number of dyadic scales that keep the coarsest image at least one window wide.
pub fn usable_scales(h: usize, w: usize, requested: usize, window: usize) -> usize {
    let mut m = 0;
    let mut side = h.min(w);
    while m < requested && side >= window {
        m += 1;
        side /= 2;
    }
    m
}

/// Multi-scale SSIM over up to `scales` dyadic levels. When the image is too
/// small the coarsest levels are dropped (with a warning) and the remaining
/// weights renormalised.
pub fn ms_ssim(a: &GrayImage, b: &GrayImage, scales: usize) -> Result<f64> {
    check_shapes(a, b)?;
    let p = SsimParams::default();
    let requested = scales.clamp(1, MS_SSIM_WEIGHTS.len());
    let m = usable_scales(a.height, a.width, requested, p.window);
    if m == 0 {
        return Err(Error::Shape(format!("{}x{} image is too small for SSIM", a.height, a.width)));
    }
    if m < requested {
        log::warn!("ms_ssim: {}x{} image supports {m} of {requested} scales", a.height, a.width);
    }
    let weights = &MS_SSIM_WEIGHTS[..m];
    let total: f64 = weights.iter().sum();
    let (mut x, mut y) = (a.to_f64(), b.to_f64());
    let (mut h, mut w) = (a.height, a.width);
    let mut score = 1.0;
    for (j, &wt) in weights.iter().enumerate() {
        let (s, cs) = ssim_parts(&x, &y, h, w, &p)?;
        let term = if j + 1 == m { s } else { cs };
        score *= term.max(0.0).powf(wt / total);
        if j + 1 < m {
            let (dx, nh, nw) = downsample(&x, h, w);
            let (dy, _, _) = downsample(&y, h, w);
            (x, y, h, w) = (dx, dy, nh, nw);
        }
    }
    Ok(score)
}

/// An external perceptual metric (for example a learned one).
pub trait PerceptualScorer {
    fn name(&self) -> &str;
    fn score(&self, rendered: &GrayImage, reference: &GrayImage) -> Result<f64>;
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub frames: Vec<FrameMetrics>,
    pub psnr: Summary,
    pub ssim: Summary,
    pub ms_ssim: Summary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perceptual_name: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub perceptual: Option<Summary>,
}

impl MetricReport {
    pub fn from_frames(frames: Vec<FrameMetrics>, perceptual_name: Option<String>) -> Self {
        let col = |f: fn(&FrameMetrics) -> f64| Summary::of(&frames.iter().map(f).collect::<Vec<_>>());
        let perceptual = perceptual_name.as_ref().map(|_| {
            Summary::of(&frames.iter().filter_map(|f| f.perceptual).collect::<Vec<_>>())
        });
        MetricReport {
            psnr: col(|f| f.psnr),
            ssim: col(|f| f.ssim),
            ms_ssim: col(|f| f.ms_ssim),
            frames,
            perceptual_name,
            perceptual,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,psnr,ssim,ms_ssim");
        if let Some(n) = &self.perceptual_name {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for f in &self.frames {
            let _ = write!(s, "{},{},{},{}", f.frame, f.psnr, f.ssim, f.ms_ssim);
            if self.perceptual_name.is_some() {
                let _ = write!(s, ",{}", f.perceptual.map(|v| v.to_string()).unwrap_or_default());
            }
            s.push('\n');
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:>6} {:>9} {:>8} {:>8}\n", "frame", "PSNR", "SSIM", "MS-SSIM");
        for f in &self.frames {
            let _ = writeln!(s, "{:>6} {:>9.3} {:>8.4} {:>8.4}", f.frame, f.psnr, f.ssim, f.ms_ssim);
        }
        let _ = writeln!(
            s,
            "{:>6} {:>9} {:>8} {:>8}\n{:>6} {:>9.3} {:>8.4} {:>8.4}\n{:>6} {:>9.3} {:>8.4} {:>8.4}",
            "", "", "", "", "mean", self.psnr.mean, self.ssim.mean, self.ms_ssim.mean, "std", self.psnr.std,
            self.ssim.std, self.ms_ssim.std
        );
        if let (Some(n), Some(p)) = (&self.perceptual_name, self.perceptual) {
            let _ = writeln!(s, "{n}: {:.4} ± {:.4}", p.mean, p.std);
        }
        s
    }
}

/// Scores rendered frames against the test split; `rendered[i]` pairs with
/// the i-th test index.
pub fn evaluate_frames(
    rendered: &[GrayImage],
    dataset: &SweepDataset,
    ms_ssim_scales: usize,
    scorer: Option<&dyn PerceptualScorer>,
) -> Result<MetricReport> {
    let test = &dataset.split.test;
    if test.is_empty() {
        return Err(Error::validation("test split is empty"));
    }
    if rendered.len() != test.len() {
        return Err(Error::validation(format!("{} rendered frames for {} test frames", rendered.len(), test.len())));
    }
    let rows = test
        .iter()
        .zip(rendered)
        .map(|(&i, img)| {
            let reference = &dataset.frames[i].image;
            Ok(FrameMetrics {
                frame: i,
                psnr: psnr(img, reference, 1.0)?,
                ssim: ssim(img, reference)?,
                ms_ssim: ms_ssim(img, reference, ms_ssim_scales)?,
                perceptual: scorer.map(|s| s.score(img, reference)).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricReport::from_frames(rows, scorer.map(|s| s.name().to_string())))
}

/// Renders every test pose with `state` and scores it.
pub fn evaluate_field(
    state: &FieldState<f32>,
    dataset: &SweepDataset,
    cfg: &RenderConfig,
    path: RenderPath,
    seed: u64,
    ms_ssim_scales: usize,
    scorer: Option<&dyn PerceptualScorer>,
) -> Result<MetricReport> {
    let rendered = dataset
        .split
        .test
        .iter()
        .map(|&i| render_frame_path(state, &dataset.frames[i].pose, &dataset.probe, cfg, seed, path))
        .collect::<Result<Vec<_>>>()?;
    evaluate_frames(&rendered, dataset, ms_ssim_scales, scorer)
}

/// Loads `{index:05}.png` for every test index from `dir` and scores it.
pub fn evaluate_dir(
    dir: &Path,
    dataset: &SweepDataset,
    ms_ssim_scales: usize,
    scorer: Option<&dyn PerceptualScorer>,
) -> Result<MetricReport> {
    let rendered = dataset
        .split
        .test
        .iter()
        .map(|&i| {
            let p = dir.join(frame_file_name(i));
            if !p.exists() {
                return Err(Error::MissingFile { path: p });
            }
            read_png(&p)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_frames(&rendered, dataset, ms_ssim_scales, scorer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> f32) -> GrayImage {
        GrayImage::from_vec(h, w, (0..h * w).map(|i| f(i / w, i % w)).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = img(16, 16, |_, _| 0.0);
        let b = img(16, 16, |_, _| 1.0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 0.0);
        assert!(psnr(&a, &img(8, 16, |_, _| 0.0), 1.0).is_err());
    }

    #[test]
    fn ssim_checkerboard_is_negative() {
        let a = img(32, 32, |y, x| ((x + y) % 2) as f32);
        let b = img(32, 32, |y, x| 1.0 - ((x + y) % 2) as f32);
        assert!(ssim(&a, &b).unwrap() < 0.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ms_ssim_reduces_scales() {
        assert_eq!(usable_scales(128, 64, 5, 11), 3);
        assert_eq!(usable_scales(256, 256, 5, 11), 5);
        let a = img(64, 64, |y, x| ((x * 7 + y * 3) % 11) as f32 / 10.0);
        assert!((ms_ssim(&a, &a, 5).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn report_formats() {
        let rows = vec![
            FrameMetrics { frame: 0, psnr: 20.0, ssim: 0.5, ms_ssim: 0.6, perceptual: None },
            FrameMetrics { frame: 8, psnr: 30.0, ssim: 0.7, ms_ssim: 0.8, perceptual: None },
        ];
        let r = MetricReport::from_frames(rows, None);
        assert_eq!(r.psnr.mean, 25.0);
        assert_eq!(r.psnr.std, 5.0);
        assert_eq!(r.to_csv().lines().count(), 3);
        let back: MetricReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("mean"));
    }
}
