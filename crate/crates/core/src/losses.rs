//! The full objective algebra for both networks.
//!
//! Every norm is an element-wise mean (mean-square for quadratic terms,
//! mean-absolute for the projection term), so magnitudes are invariant
//! to volume size and batch size. Each loss exists twice: a value-level
//! scalar function (the reference implementation, validated against
//! brute-force oracles) and a graph builder used by training; the loss
//! log ties the two together every step.
//!
//! Generator total: `lambda1 * adv + lambda2 * voxel + lambda3 *
//! projection + lambda4 * slice-perceptual` (the perceptual term is
//! gated by `g3dpcept_enabled`). Discriminator total: `lambda1 * adv +
//! reconstruction`, where the reconstruction term averages the part and
//! global decoder pairs and adds the slice-perceptual distance only in
//! the `dae-b` variant.

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::perceptual::PerceptualBackbone;
use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum DaeVariant {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "dae-a")]
    DaeA,
    #[default]
    #[serde(rename = "dae-b")]
    DaeB,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VoxelLossKind {
    #[default]
    Mse,
    /// Huber-smoothed alternative reading of the voxel objective.
    Huber,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda4: f64,
    pub variant: DaeVariant,
    pub g3dpcept_enabled: bool,
    pub voxel_loss: VoxelLossKind,
    pub huber_delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 0.1,
            lambda2: 10.0,
            lambda3: 10.0,
            lambda4: 0.01,
            variant: DaeVariant::DaeB,
            g3dpcept_enabled: true,
            voxel_loss: VoxelLossKind::Mse,
            huber_delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("lambda4", self.lambda4),
        ] {
            if !(l > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {l}")));
            }
        }
        if self.huber_delta <= 0.0 {
            return Err(Error::Config("huber_delta must be > 0".into()));
        }
        Ok(())
    }
}

fn check_finite<T: Scalar>(name: &str, t: &Tensor<T>) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::NonFinite {
            term: name.into(),
            step: 0,
        });
    }
    Ok(())
}

fn check_same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Generator adversarial term: mean (1 - score)^2 over the score map of
/// generated data.
pub fn adv_loss_g<T: Scalar>(score_map: &Tensor<T>) -> Result<f64> {
    check_finite("adv_g scores", score_map)?;
    let mut acc = 0.0;
    for &s in score_map.data() {
        let d = 1.0 - s.to_f64();
        acc += d * d;
    }
    Ok(acc / score_map.len() as f64)
}

/// Discriminator adversarial term: mean (0 - fake)^2 + mean (1 - real)^2.
pub fn adv_loss_d<T: Scalar>(score_real: &Tensor<T>, score_fake: &Tensor<T>) -> Result<f64> {
    check_finite("adv_d real scores", score_real)?;
    check_finite("adv_d fake scores", score_fake)?;
    let mut fake = 0.0;
    for &s in score_fake.data() {
        let v = s.to_f64();
        fake += v * v;
    }
    let mut real = 0.0;
    for &s in score_real.data() {
        let d = 1.0 - s.to_f64();
        real += d * d;
    }
    Ok(fake / score_fake.len() as f64 + real / score_real.len() as f64)
}

/// Mean squared voxel difference.
pub fn voxel_loss<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    check_same_shape(y, y_hat)?;
    check_finite("voxel y", y)?;
    check_finite("voxel y_hat", y_hat)?;
    let mut acc = 0.0;
    for (&a, &b) in y.data().iter().zip(y_hat.data()) {
        let d = a.to_f64() - b.to_f64();
        acc += d * d;
    }
    Ok(acc / y.len() as f64)
}

/// Huber-smoothed voxel difference (mean).
pub fn voxel_loss_huber<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>, delta: f64) -> Result<f64> {
    check_same_shape(y, y_hat)?;
    let mut acc = 0.0;
    for (&a, &b) in y.data().iter().zip(y_hat.data()) {
        let d = (a.to_f64() - b.to_f64()).abs();
        acc += if d <= delta {
            0.5 * d * d
        } else {
            delta * (d - 0.5 * delta)
        };
    }
    Ok(acc / y.len() as f64)
}

/// Reshape any volume batch to 5D (N, 1, D, H, W).
fn as5d<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    match s.len() {
        3 => t.reshaped(&[1, 1, s[0], s[1], s[2]]),
        5 => t.clone(),
        _ => panic!("expected a 3D or 5D volume, got {s:?}"),
    }
}

/// Mean absolute difference of the three orthogonal mean projections,
/// averaged over the planes.
pub fn projection_loss<T: Scalar>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    check_same_shape(y, y_hat)?;
    check_finite("projection y", y)?;
    check_finite("projection y_hat", y_hat)?;
    let (a5, b5) = (as5d(y), as5d(y_hat));
    let mut total = 0.0;
    for axis in 0..3 {
        let pa = crate::kernels::mean_spatial_axis(&a5, axis);
        let pb = crate::kernels::mean_spatial_axis(&b5, axis);
        let mut acc = 0.0;
        for (&u, &v) in pa.data().iter().zip(pb.data()) {
            acc += (u.to_f64() - v.to_f64()).abs();
        }
        total += acc / pa.len() as f64;
    }
    Ok(total / 3.0)
}

/// Squared feature-space distance between matching coronal slices,
/// averaged over samples, slices, and backbone taps (element-wise means
/// throughout, like every other norm in this module).
pub fn perceptual_3d_loss<T: Scalar>(
    y: &Tensor<T>,
    y_hat: &Tensor<T>,
    backbone: &PerceptualBackbone<T>,
) -> Result<f64> {
    check_same_shape(y, y_hat)?;
    check_finite("perceptual y", y)?;
    check_finite("perceptual y_hat", y_hat)?;
    let (a5, b5) = (as5d(y), as5d(y_hat));
    let s = a5.shape().to_vec();
    if s[1] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "expected single-channel volume, got {s:?}"
        )));
    }
    // coronal slicing: each depth index becomes one (H, W) image
    let slices_a = a5.reshaped(&[s[0] * s[2], 1, s[3], s[4]]);
    let slices_b = b5.reshaped(&[s[0] * s[2], 1, s[3], s[4]]);
    let fa = backbone.features(&slices_a);
    let fb = backbone.features(&slices_b);
    let mut total = 0.0;
    for (ta, tb) in fa.iter().zip(&fb) {
        let mut acc = 0.0;
        for (&u, &v) in ta.data().iter().zip(tb.data()) {
            let d = u.to_f64() - v.to_f64();
            acc += d * d;
        }
        total += acc / ta.len() as f64;
    }
    Ok(total / fa.len() as f64)
}

/// Raw (unweighted) generator loss terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GeneratorTerms {
    pub adv: f64,
    pub voxel: f64,
    pub projection: f64,
    pub perceptual: f64,
}

/// Weighted generator total.
pub fn total_g(terms: &GeneratorTerms, w: &LossWeights) -> f64 {
    let mut total = w.lambda1 * terms.adv + w.lambda2 * terms.voxel + w.lambda3 * terms.projection;
    if w.g3dpcept_enabled {
        total += w.lambda4 * terms.perceptual;
    }
    total
}

/// Raw (unweighted) discriminator reconstruction measurements.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ReconstrTerms {
    /// Mean of the part/global voxel MSEs.
    pub voxel: f64,
    /// Mean of the part/global slice-perceptual distances.
    pub perceptual: f64,
}

/// Voxel (and, for `dae-b`, perceptual) reconstruction error over the
/// two decoder pairs, each pair weighted equally.
pub fn d_reconstr_terms<T: Scalar>(
    part: (&Tensor<T>, &Tensor<T>),
    global: (&Tensor<T>, &Tensor<T>),
    backbone: &PerceptualBackbone<T>,
) -> Result<ReconstrTerms> {
    let voxel = 0.5 * (voxel_loss(part.1, part.0)? + voxel_loss(global.1, global.0)?);
    let perceptual = 0.5
        * (perceptual_3d_loss(part.1, part.0, backbone)?
            + perceptual_3d_loss(global.1, global.0, backbone)?);
    Ok(ReconstrTerms { voxel, perceptual })
}

/// Weighted reconstruction loss for the configured variant.
pub fn d_reconstr_loss(terms: &ReconstrTerms, w: &LossWeights) -> f64 {
    match w.variant {
        DaeVariant::None => 0.0,
        DaeVariant::DaeA => w.lambda2 * terms.voxel,
        DaeVariant::DaeB => w.lambda2 * terms.voxel + w.lambda4 * terms.perceptual,
    }
}

/// Weighted discriminator total.
pub fn total_d(adv: f64, reconstr: f64, w: &LossWeights) -> f64 {
    w.lambda1 * adv + reconstr
}

// ---------------------------------------------------------------------------
// graph builders (training path)
// ---------------------------------------------------------------------------

pub fn adv_g_var<T: Scalar>(g: &mut Graph<T>, score: Var) -> Var {
    let ones = g.constant(Tensor::full(g.shape(score), T::ONE));
    g.mse_loss(score, ones)
}

pub fn adv_d_var<T: Scalar>(g: &mut Graph<T>, score_real: Var, score_fake: Var) -> Var {
    let zeros = g.constant(Tensor::zeros(g.shape(score_fake)));
    let ones = g.constant(Tensor::full(g.shape(score_real), T::ONE));
    let fake = g.mse_loss(score_fake, zeros);
    let real = g.mse_loss(score_real, ones);
    g.add(fake, real)
}

pub fn voxel_var<T: Scalar>(g: &mut Graph<T>, y: Var, y_hat: Var, w: &LossWeights) -> Var {
    match w.voxel_loss {
        VoxelLossKind::Mse => g.mse_loss(y, y_hat),
        VoxelLossKind::Huber => g.huber_loss(y, y_hat, w.huber_delta),
    }
}

pub fn projection_var<T: Scalar>(g: &mut Graph<T>, y: Var, y_hat: Var) -> Var {
    let mut terms = Vec::with_capacity(3);
    for axis in 0..3 {
        let pa = g.mean_spatial_axis(y, axis);
        let pb = g.mean_spatial_axis(y_hat, axis);
        terms.push((g.mae_loss(pa, pb), 1.0 / 3.0));
    }
    g.weighted_sum(&terms)
}

/// Slice-perceptual distance between two 5D single-channel volumes.
pub fn perceptual_var<T: Scalar>(
    g: &mut Graph<T>,
    backbone: &PerceptualBackbone<T>,
    y: Var,
    y_hat: Var,
) -> Var {
    let s = g.shape(y).to_vec();
    assert_eq!(s.len(), 5, "perceptual_var expects 5D volumes");
    let sa = g.reshape(y, &[s[0] * s[2], 1, s[3], s[4]]);
    let sb = g.reshape(y_hat, &[s[0] * s[2], 1, s[3], s[4]]);
    let fa = backbone.features_graph(g, sa);
    let fb = backbone.features_graph(g, sb);
    let inv = 1.0 / fa.len() as f64;
    let terms: Vec<(Var, f64)> = fa
        .into_iter()
        .zip(fb)
        .map(|(a, b)| (g.mse_loss(a, b), inv))
        .collect();
    g.weighted_sum(&terms)
}

/// [`perceptual_var`] against precomputed target features (the target
/// side of this loss is constant across steps, so trainers cache it).
pub fn perceptual_var_cached<T: Scalar>(
    g: &mut Graph<T>,
    backbone: &PerceptualBackbone<T>,
    target_feats: &[Tensor<T>],
    y_hat: Var,
) -> Var {
    let s = g.shape(y_hat).to_vec();
    assert_eq!(s.len(), 5, "perceptual_var_cached expects a 5D volume");
    let sb = g.reshape(y_hat, &[s[0] * s[2], 1, s[3], s[4]]);
    let fb = backbone.features_graph(g, sb);
    let inv = 1.0 / target_feats.len() as f64;
    let terms: Vec<(Var, f64)> = target_feats
        .iter()
        .zip(fb)
        .map(|(a, b)| {
            let av = g.constant(a.clone());
            (g.mse_loss(av, b), inv)
        })
        .collect();
    g.weighted_sum(&terms)
}

/// Target-side tap features of a batched volume, for caching.
pub fn perceptual_target_features<T: Scalar>(
    backbone: &PerceptualBackbone<T>,
    y: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let s = y.shape();
    assert_eq!(s.len(), 5);
    backbone.features(&y.reshaped(&[s[0] * s[2], 1, s[3], s[4]]))
}
