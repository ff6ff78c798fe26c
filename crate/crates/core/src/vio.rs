//! Volume and image file I/O.
//!
//! A stored array is two files: `<name>.vol` holding the raw C-order
//! little-endian f32 payload, and `<name>.json` holding the sidecar
//! header with `shape`, `spacing_mm`, `intensity_lo`, `intensity_hi`
//! and `dtype: "f32le"`. Images use the same scheme with a 2-element
//! shape. The pairing is language-neutral on purpose.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::volume::Volume;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    pub spacing_mm: Vec<f64>,
    pub intensity_lo: f64,
    pub intensity_hi: f64,
    pub dtype: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn write_payload(path: &Path, data: &[f32]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in data {
        w.write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn read_payload(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expect * 4 {
        return Err(Error::corrupt(
            path,
            format!(
                "payload holds {} bytes, header implies {}",
                bytes.len(),
                expect * 4
            ),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_sidecar(vol_path: &Path) -> Result<Sidecar> {
    let sc_path = sidecar_path(vol_path);
    let text = std::fs::read_to_string(&sc_path).map_err(|e| Error::io(&sc_path, e))?;
    let sc: Sidecar = serde_json::from_str(&text)
        .map_err(|e| Error::corrupt(&sc_path, format!("sidecar: {e}")))?;
    if sc.dtype != "f32le" {
        return Err(Error::corrupt(
            &sc_path,
            format!("unsupported dtype {}", sc.dtype),
        ));
    }
    if sc.spacing_mm.len() != sc.shape.len() {
        return Err(Error::corrupt(
            &sc_path,
            "spacing_mm length != shape length",
        ));
    }
    Ok(sc)
}

/// Write `<path>` (payload) plus its `.json` sidecar.
pub fn save_volume(vol: &Volume<f32>, path: &Path) -> Result<()> {
    let sc = Sidecar {
        shape: vol.dhw().to_vec(),
        spacing_mm: vol.spacing_mm.to_vec(),
        intensity_lo: vol.intensity_range.0,
        intensity_hi: vol.intensity_range.1,
        dtype: "f32le".into(),
    };
    let sc_path = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sc)?;
    std::fs::write(&sc_path, text).map_err(|e| Error::io(&sc_path, e))?;
    write_payload(path, vol.data().data())
}

pub fn load_volume(path: &Path) -> Result<Volume<f32>> {
    let sc = read_sidecar(path)?;
    if sc.shape.len() != 3 {
        return Err(Error::corrupt(
            path,
            format!("expected 3D shape, got {:?}", sc.shape),
        ));
    }
    let data = read_payload(path, sc.shape.iter().product())?;
    let spacing = [sc.spacing_mm[0], sc.spacing_mm[1], sc.spacing_mm[2]];
    Volume::new(
        Tensor::from_vec(&sc.shape, data),
        spacing,
        (sc.intensity_lo, sc.intensity_hi),
    )
}

/// Sidecar only; the payload is not read.
pub fn load_volume_meta(path: &Path) -> Result<Sidecar> {
    read_sidecar(path)
}

/// Save a 2D image with the volume file scheme.
pub fn save_image(img: &Tensor<f32>, path: &Path, intensity: (f64, f64)) -> Result<()> {
    if img.shape().len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "image must be 2D, got {:?}",
            img.shape()
        )));
    }
    let sc = Sidecar {
        shape: img.shape().to_vec(),
        spacing_mm: vec![1.0; 2],
        intensity_lo: intensity.0,
        intensity_hi: intensity.1,
        dtype: "f32le".into(),
    };
    let sc_path = sidecar_path(path);
    let text = serde_json::to_string_pretty(&sc)?;
    std::fs::write(&sc_path, text).map_err(|e| Error::io(&sc_path, e))?;
    write_payload(path, img.data())
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let sc = read_sidecar(path)?;
    if sc.shape.len() != 2 {
        return Err(Error::corrupt(
            path,
            format!("expected 2D shape, got {:?}", sc.shape),
        ));
    }
    let data = read_payload(path, sc.shape.iter().product())?;
    Ok(Tensor::from_vec(&sc.shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedRng;

    #[test]
    fn volume_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let mut rng = SeedRng::new(30);
        let vol = Volume::new(
            Tensor::<f32>::rand_uniform(&[8, 8, 8], -1.0, 1.0, &mut rng),
            [0.5, 1.0, 1.5],
            (-1000.0, 400.0),
        )
        .unwrap();
        save_volume(&vol, &path).unwrap();
        let back = load_volume(&path).unwrap();
        assert_eq!(back.data().data(), vol.data().data());
        assert_eq!(back.spacing_mm, vol.spacing_mm);
        assert_eq!(back.intensity_range, vol.intensity_range);
    }

    #[test]
    fn truncated_payload_is_a_shape_mismatch_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let vol = Volume::new(Tensor::<f32>::zeros(&[8, 8, 8]), [1.0; 3], (0.0, 1.0)).unwrap();
        save_volume(&vol, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        match load_volume(&path) {
            Err(Error::Corrupt { .. }) => {}
            other => panic!("expected corrupt error, got {other:?}"),
        }
    }

    #[test]
    fn meta_only_read_matches_full_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        let vol = Volume::new(Tensor::<f32>::zeros(&[16, 8, 4]), [1.0; 3], (-5.0, 9.0)).unwrap();
        save_volume(&vol, &path).unwrap();
        let meta = load_volume_meta(&path).unwrap();
        let full = load_volume(&path).unwrap();
        assert_eq!(meta.shape, full.dhw().to_vec());
        assert_eq!(meta.intensity_lo, -5.0);
        assert_eq!(meta.intensity_hi, 9.0);
    }

    #[test]
    fn image_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.vol");
        let mut rng = SeedRng::new(31);
        let img = Tensor::<f32>::rand_uniform(&[8, 16], -1.0, 1.0, &mut rng);
        save_image(&img, &path, (-1.0, 1.0)).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn corrupt_sidecar_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        std::fs::write(dir.path().join("v.json"), "{not json").unwrap();
        std::fs::write(&path, [0u8; 16]).unwrap();
        assert!(matches!(load_volume(&path), Err(Error::Corrupt { .. })));
    }
}
