//! Evaluation metrics on the 8-bit display scale.
//!
//! Volumes are compared after mapping the normalized [-1, 1] range onto
//! [0, 255], which keeps the reported magnitudes commensurable with the
//! usual CT reconstruction literature. PSNR caps at 99 dB for identical
//! inputs, NRMSE normalizes by the ground-truth dynamic range (asymmetric
//! by design), SSIM uses the standard constants with a 3D Gaussian
//! window, and the slice-perceptual metric is the mean unit-normalized
//! feature distance over coronal slices, reported x100.

use serde::{Deserialize, Serialize};

use crate::perceptual::PerceptualBackbone;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const DISPLAY_PEAK: f64 = 255.0;

/// Map a normalized [-1, 1] tensor onto the [0, 255] display scale.
pub fn to_display<T: Scalar>(t: &Tensor<T>) -> Tensor<f64> {
    let mut out = t.to_f64_tensor();
    for v in out.data_mut() {
        *v = (*v + 1.0) * (DISPLAY_PEAK / 2.0);
    }
    out
}

fn check_pair<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<()> {
    if y.shape() != y_hat.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            y.shape(),
            y_hat.shape()
        )));
    }
    if !y.all_finite() || !y_hat.all_finite() {
        return Err(Error::Contract("metric inputs must be finite".into()));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB on display-scale inputs.
pub fn psnr(y: &Tensor<f64>, y_hat: &Tensor<f64>, peak: f64) -> Result<f64> {
    check_pair(y, y_hat)?;
    let mut mse = 0.0;
    for (&a, &b) in y.data().iter().zip(y_hat.data()) {
        mse += (a - b) * (a - b);
    }
    mse /= y.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

/// Root-mean-square error divided by the ground-truth dynamic range.
pub fn nrmse(y: &Tensor<f64>, y_hat: &Tensor<f64>) -> Result<f64> {
    check_pair(y, y_hat)?;
    let mut mse = 0.0;
    for (&a, &b) in y.data().iter().zip(y_hat.data()) {
        mse += (a - b) * (a - b);
    }
    mse /= y.len() as f64;
    let (lo, hi) = y.min_max();
    let range = hi - lo;
    if range == 0.0 {
        return Err(Error::DegenerateRange(lo));
    }
    Ok(mse.sqrt() / range)
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-(d * d) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable convolution along one axis of a 3D tensor, reflect padding.
fn filter_axis(t: &Tensor<f64>, kernel: &[f64], axis: usize) -> Tensor<f64> {
    let s = t.shape();
    let [d, h, w] = [s[0], s[1], s[2]];
    let radius = kernel.len() / 2;
    let n_axis = [d, h, w][axis];
    let reflect = |i: isize| -> usize {
        let n = n_axis as isize;
        let mut i = i;
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        i as usize
    };
    let mut out = Tensor::zeros(s);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let off = ki as isize - radius as isize;
                    let (zz, yy, xx) = match axis {
                        0 => (reflect(z as isize + off), y, x),
                        1 => (z, reflect(y as isize + off), x),
                        _ => (z, y, reflect(x as isize + off)),
                    };
                    acc += kv * t.data()[(zz * h + yy) * w + xx];
                }
                out.data_mut()[(z * h + y) * w + x] = acc;
            }
        }
    }
    out
}

fn gauss3(t: &Tensor<f64>, kernel: &[f64]) -> Tensor<f64> {
    let a = filter_axis(t, kernel, 0);
    let b = filter_axis(&a, kernel, 1);
    filter_axis(&b, kernel, 2)
}

/// Volumetric SSIM with a 3D Gaussian window (sigma 1.5, radius 5) and
/// the standard constants (K1 = 0.01, K2 = 0.03) on display-scale input.
pub fn ssim(y: &Tensor<f64>, y_hat: &Tensor<f64>) -> Result<f64> {
    check_pair(y, y_hat)?;
    if y.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "ssim expects 3D volumes, got {:?}",
            y.shape()
        )));
    }
    let kernel = gaussian_kernel(1.5, 5);
    let c1 = (0.01 * DISPLAY_PEAK).powi(2);
    let c2 = (0.03 * DISPLAY_PEAK).powi(2);
    let mu_x = gauss3(y, &kernel);
    let mu_y = gauss3(y_hat, &kernel);
    let xx = gauss3(&y.zip_map(y, |a, b| a * b), &kernel);
    let yy = gauss3(&y_hat.zip_map(y_hat, |a, b| a * b), &kernel);
    let xy = gauss3(&y.zip_map(y_hat, |a, b| a * b), &kernel);
    let mut acc = 0.0;
    for i in 0..y.len() {
        let (mx, my) = (mu_x.data()[i], mu_y.data()[i]);
        let vx = xx.data()[i] - mx * mx;
        let vy = yy.data()[i] - my * my;
        let cxy = xy.data()[i] - mx * my;
        let s =
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        acc += s;
    }
    Ok(acc / y.len() as f64)
}

/// Unit-normalize feature channels at every spatial position.
fn unit_normalize(t: &Tensor<f32>) -> Tensor<f32> {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = t.clone();
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let mut norm = 0.0f64;
                for ci in 0..c {
                    let v = t.data()[((ni * c + ci) * h + y) * w + x] as f64;
                    norm += v * v;
                }
                let inv = 1.0 / (norm.sqrt() + 1e-10);
                for ci in 0..c {
                    let idx = ((ni * c + ci) * h + y) * w + x;
                    out.data_mut()[idx] = (t.data()[idx] as f64 * inv) as f32;
                }
            }
        }
    }
    out
}

/// Mean unit-normalized feature distance over coronal slices, x100.
/// Inputs are normalized [-1, 1] volumes (the backbone's input scale).
pub fn lpips3d(
    y: &Tensor<f32>,
    y_hat: &Tensor<f32>,
    backbone: &PerceptualBackbone<f32>,
) -> Result<f64> {
    check_pair(y, y_hat)?;
    if y.shape().len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "lpips3d expects 3D volumes, got {:?}",
            y.shape()
        )));
    }
    let s = y.shape();
    let (d, h, w) = (s[0], s[1], s[2]);
    let slices_a = y.reshaped(&[d, 1, h, w]);
    let slices_b = y_hat.reshaped(&[d, 1, h, w]);
    let fa = backbone.features(&slices_a);
    let fb = backbone.features(&slices_b);
    let mut total = 0.0;
    for (ta, tb) in fa.iter().zip(&fb) {
        let na = unit_normalize(ta);
        let nb = unit_normalize(tb);
        let mut acc = 0.0;
        for (&u, &v) in na.data().iter().zip(nb.data()) {
            let dif = u as f64 - v as f64;
            acc += dif * dif;
        }
        total += acc / na.len() as f64;
    }
    Ok(100.0 * total / fa.len() as f64)
}

/// Absolute display-scale difference scaled to [0, 1].
pub fn error_map(y: &Tensor<f64>, y_hat: &Tensor<f64>) -> Result<Tensor<f64>> {
    check_pair(y, y_hat)?;
    Ok(y.zip_map(y_hat, |a, b| (a - b).abs() / DISPLAY_PEAK))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub nrmse: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Population standard deviation over the per-sample values.
    pub std: f64,
}

pub fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub psnr_db: MeanStd,
    pub ssim: MeanStd,
    pub lpips: MeanStd,
    pub nrmse: MeanStd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_sample: Vec<SampleMetrics>,
    pub aggregate: Aggregate,
}

impl MetricReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::Config(
                "metric report needs at least one sample".into(),
            ));
        }
        let collect =
            |f: fn(&SampleMetrics) -> f64| -> Vec<f64> { per_sample.iter().map(f).collect() };
        let aggregate = Aggregate {
            psnr_db: mean_std(&collect(|s| s.psnr_db)),
            ssim: mean_std(&collect(|s| s.ssim)),
            lpips: mean_std(&collect(|s| s.lpips)),
            nrmse: mean_std(&collect(|s| s.nrmse)),
        };
        Ok(MetricReport {
            per_sample,
            aggregate,
        })
    }

    /// Human-readable fixed-width table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>10} {:>8} {:>8} {:>8}\n",
            "id", "psnr_db", "ssim", "lpips", "nrmse"
        ));
        for s in &self.per_sample {
            out.push_str(&format!(
                "{:<10} {:>10.3} {:>8.4} {:>8.3} {:>8.4}\n",
                s.id, s.psnr_db, s.ssim, s.lpips, s.nrmse
            ));
        }
        let a = &self.aggregate;
        out.push_str(&format!(
            "{:<10} {:>6.3}±{:<5.3} {:>4.3}±{:<4.3} {:>4.3}±{:<4.3} {:>4.3}±{:<4.3}\n",
            "aggregate",
            a.psnr_db.mean,
            a.psnr_db.std,
            a.ssim.mean,
            a.ssim.std,
            a.lpips.mean,
            a.lpips.std,
            a.nrmse.mean,
            a.nrmse.std
        ));
        out
    }
}

/// All four metrics for one normalized (y, y_hat) pair.
pub fn evaluate_pair(
    id: &str,
    y: &Tensor<f32>,
    y_hat: &Tensor<f32>,
    backbone: &PerceptualBackbone<f32>,
) -> Result<SampleMetrics> {
    let yd = to_display(y);
    let yh = to_display(y_hat);
    Ok(SampleMetrics {
        id: id.to_string(),
        psnr_db: psnr(&yd, &yh, DISPLAY_PEAK)?,
        ssim: ssim(&yd, &yh)?,
        lpips: lpips3d(y, y_hat, backbone)?,
        nrmse: nrmse(&yd, &yh)?,
    })
}
