//! CT volumes, X-ray projection pairs, and intensity normalization.
//!
//! Axis convention, fixed once for the whole crate: volumes are indexed
//! (depth, height, width). The frontal X-ray is the projection along
//! depth and has shape (H, W); the lateral X-ray is the projection along
//! width and has shape (D, H). Mixing these up is the classic failure
//! mode of this problem, so every consumer goes through these types.

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ViewMode {
    Single,
    Dual,
}

/// 3D scalar field with voxel spacing and raw intensity-range metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T: Scalar> {
    data: Tensor<T>,
    pub spacing_mm: [f64; 3],
    /// (lo, hi) of the raw scale the volume was produced on, e.g. a
    /// Hounsfield-like range. Preserved by normalization.
    pub intensity_range: (f64, f64),
}

impl<T: Scalar> Volume<T> {
    pub fn new(data: Tensor<T>, spacing_mm: [f64; 3], intensity_range: (f64, f64)) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!(
                "volume must be 3D, got {shape:?}"
            )));
        }
        for &e in shape {
            if e < 4 || !e.is_power_of_two() {
                return Err(Error::ShapeMismatch(format!(
                    "volume extents must be powers of two >= 4, got {shape:?}"
                )));
            }
        }
        if !data.all_finite() {
            return Err(Error::Contract("volume contains non-finite values".into()));
        }
        Ok(Volume {
            data,
            spacing_mm,
            intensity_range,
        })
    }

    pub fn data(&self) -> &Tensor<T> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Tensor<T> {
        &mut self.data
    }

    pub fn into_data(self) -> Tensor<T> {
        self.data
    }

    /// (depth, height, width)
    pub fn dhw(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[0], s[1], s[2]]
    }

    pub fn to_f64(&self) -> Volume<f64> {
        Volume {
            data: self.data.to_f64_tensor(),
            spacing_mm: self.spacing_mm,
            intensity_range: self.intensity_range,
        }
    }
}

/// Map the raw intensity range affinely onto [-1, 1]; metadata is kept so
/// [`denormalize`] is exact up to rounding.
pub fn normalize<T: Scalar>(vol: &Volume<T>) -> Result<Volume<T>> {
    let (lo, hi) = vol.intensity_range;
    if lo >= hi {
        return Err(Error::DegenerateRange(lo));
    }
    let scale = T::from_f64(2.0 / (hi - lo));
    let lo_t = T::from_f64(lo);
    let data = vol.data.map(|v| (v - lo_t) * scale - T::ONE);
    Ok(Volume {
        data,
        spacing_mm: vol.spacing_mm,
        intensity_range: vol.intensity_range,
    })
}

/// Inverse of [`normalize`].
pub fn denormalize<T: Scalar>(vol: &Volume<T>) -> Result<Volume<T>> {
    let (lo, hi) = vol.intensity_range;
    if lo >= hi {
        return Err(Error::DegenerateRange(lo));
    }
    let half_span = T::from_f64((hi - lo) / 2.0);
    let lo_t = T::from_f64(lo);
    let data = vol.data.map(|v| (v + T::ONE) * half_span + lo_t);
    Ok(Volume {
        data,
        spacing_mm: vol.spacing_mm,
        intensity_range: vol.intensity_range,
    })
}

/// Frontal (always) and lateral (dual-view only) X-ray projections,
/// normalized to [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionPair<T: Scalar> {
    pub frontal: Tensor<T>,
    pub lateral: Option<Tensor<T>>,
    pub view_mode: ViewMode,
}

impl<T: Scalar> ProjectionPair<T> {
    pub fn new(frontal: Tensor<T>, lateral: Option<Tensor<T>>) -> Result<Self> {
        if frontal.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "frontal must be 2D, got {:?}",
                frontal.shape()
            )));
        }
        if !frontal.all_finite() {
            return Err(Error::Contract(
                "frontal projection has non-finite values".into(),
            ));
        }
        if let Some(lat) = &lateral {
            if lat.shape().len() != 2 {
                return Err(Error::ShapeMismatch(format!(
                    "lateral must be 2D, got {:?}",
                    lat.shape()
                )));
            }
            if !lat.all_finite() {
                return Err(Error::Contract(
                    "lateral projection has non-finite values".into(),
                ));
            }
        }
        let view_mode = if lateral.is_some() {
            ViewMode::Dual
        } else {
            ViewMode::Single
        };
        Ok(ProjectionPair {
            frontal,
            lateral,
            view_mode,
        })
    }

    /// Drop the lateral view, yielding the single-view variant.
    pub fn to_single(&self) -> Self {
        ProjectionPair {
            frontal: self.frontal.clone(),
            lateral: None,
            view_mode: ViewMode::Single,
        }
    }

    pub fn to_f64(&self) -> ProjectionPair<f64> {
        ProjectionPair {
            frontal: self.frontal.to_f64_tensor(),
            lateral: self.lateral.as_ref().map(|l| l.to_f64_tensor()),
            view_mode: self.view_mode,
        }
    }
}

/// One dataset sample: paired X-rays and ground-truth CT.
#[derive(Debug, Clone)]
pub struct SampleRecord<T: Scalar> {
    pub id: String,
    pub xrays: ProjectionPair<T>,
    pub ct: Volume<T>,
}

impl<T: Scalar> SampleRecord<T> {
    pub fn new(id: String, xrays: ProjectionPair<T>, ct: Volume<T>) -> Result<Self> {
        let rec = SampleRecord { id, xrays, ct };
        rec.validate()?;
        Ok(rec)
    }

    /// Projection extents must equal the matching volume faces.
    pub fn validate(&self) -> Result<()> {
        let [d, h, w] = self.ct.dhw();
        let fs = self.xrays.frontal.shape();
        if fs != [h, w] {
            return Err(Error::ShapeMismatch(format!(
                "sample {}: frontal {:?} vs volume face ({h}, {w})",
                self.id, fs
            )));
        }
        if let Some(lat) = &self.xrays.lateral {
            let ls = lat.shape();
            if ls != [d, h] {
                return Err(Error::ShapeMismatch(format!(
                    "sample {}: lateral {:?} vs volume face ({d}, {h})",
                    self.id, ls
                )));
            }
        }
        match (self.xrays.view_mode, &self.xrays.lateral) {
            (ViewMode::Dual, None) => Err(Error::Contract(format!(
                "sample {}: dual view without lateral",
                self.id
            ))),
            (ViewMode::Single, Some(_)) => Err(Error::Contract(format!(
                "sample {}: single view with lateral",
                self.id
            ))),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    fn vol8(rng: &mut SeedRng) -> Volume<f64> {
        let data = Tensor::rand_uniform(&[8, 8, 8], -1000.0, 400.0, rng);
        Volume::new(data, [1.0; 3], (-1000.0, 400.0)).unwrap()
    }

    #[test]
    fn endpoint_and_midpoint_mapping() {
        // range (-1000, 400): -1000 -> -1, midpoint -300 -> 0, 400 -> +1
        let data = Tensor::from_vec(&[4, 4, 4], {
            let mut v = vec![-1000.0f64; 64];
            v[1] = -300.0;
            v[2] = 400.0;
            v
        });
        let vol = Volume::new(data, [1.0; 3], (-1000.0, 400.0)).unwrap();
        let n = normalize(&vol).unwrap();
        assert_eq!(n.data().data()[0], -1.0);
        assert!(n.data().data()[1].abs() < 1e-12);
        assert_eq!(n.data().data()[2], 1.0);
    }

    #[test]
    fn normalize_roundtrip_within_1e6_relative() {
        let mut rng = SeedRng::new(21);
        let vol = vol8(&mut rng);
        let back = denormalize(&normalize(&vol).unwrap()).unwrap();
        for (a, b) in vol.data().data().iter().zip(back.data().data()) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + a.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn normalize_is_monotone_and_preserves_argmax() {
        let mut rng = SeedRng::new(22);
        let vol = vol8(&mut rng);
        let n = normalize(&vol).unwrap();
        let argmax = |t: &Tensor<f64>| {
            t.data()
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        assert_eq!(argmax(vol.data()), argmax(n.data()));
        // affine: differences scale uniformly
        let s = 2.0 / 1400.0;
        for (a, b) in vol.data().data().iter().zip(n.data().data()) {
            assert!(((a - (-1000.0)) * s - 1.0 - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_range_is_an_error() {
        let data = Tensor::<f64>::zeros(&[4, 4, 4]);
        let vol = Volume::new(data, [1.0; 3], (5.0, 5.0)).unwrap();
        assert!(matches!(normalize(&vol), Err(Error::DegenerateRange(_))));
    }

    #[test]
    fn volume_shape_validation() {
        assert!(Volume::new(Tensor::<f32>::zeros(&[3, 4, 4]), [1.0; 3], (0.0, 1.0)).is_err());
        assert!(Volume::new(Tensor::<f32>::zeros(&[6, 4, 4]), [1.0; 3], (0.0, 1.0)).is_err());
        assert!(Volume::new(Tensor::<f32>::zeros(&[4, 4]), [1.0; 3], (0.0, 1.0)).is_err());
        assert!(Volume::new(Tensor::<f32>::zeros(&[8, 4, 16]), [1.0; 3], (0.0, 1.0)).is_ok());
    }

    #[test]
    fn sample_record_checks_faces() {
        let ct = Volume::new(Tensor::<f32>::zeros(&[8, 16, 4]), [1.0; 3], (0.0, 1.0)).unwrap();
        let good =
            ProjectionPair::new(Tensor::zeros(&[16, 4]), Some(Tensor::zeros(&[8, 16]))).unwrap();
        assert!(SampleRecord::new("s".into(), good, ct.clone()).is_ok());
        let bad = ProjectionPair::new(Tensor::zeros(&[4, 16]), None).unwrap();
        assert!(SampleRecord::new("s".into(), bad, ct).is_err());
    }
}
