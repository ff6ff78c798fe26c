//! Error-map rendering: center slices along the three anatomical planes,
//! written as PNG with a fixed blue-to-red colormap (blue = small error).

use std::path::{Path, PathBuf};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Jet-style colormap over [0, 1].
pub fn colormap(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let seg = |x: f64| (255.0 * x.clamp(0.0, 1.0)) as u8;
    let r = seg(1.5 - (4.0 * v - 3.0).abs());
    let g = seg(1.5 - (4.0 * v - 2.0).abs());
    let b = seg(1.5 - (4.0 * v - 1.0).abs());
    [r, g, b]
}

fn write_png(path: &Path, rows: usize, cols: usize, rgb: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), cols as u32, rows as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::corrupt(path, format!("png header: {e}")))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::corrupt(path, format!("png payload: {e}")))?;
    Ok(())
}

fn slice_to_png(path: &Path, img: &[f64], rows: usize, cols: usize) -> Result<()> {
    let mut rgb = Vec::with_capacity(rows * cols * 3);
    for &v in img {
        rgb.extend_from_slice(&colormap(v));
    }
    write_png(path, rows, cols, &rgb)
}

/// Render the center slice of an error volume along the sagittal,
/// coronal, and axial planes to `<stem>_{sag,cor,axi}.png`.
/// Returns the written paths.
pub fn save_error_map_pngs(err: &Tensor<f64>, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let s = err.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!(
            "error map must be 3D, got {s:?}"
        )));
    }
    let [d, h, w] = [s[0], s[1], s[2]];
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    // coronal: fix depth
    let mut cor = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            cor.push(err.data()[((d / 2) * h + y) * w + x]);
        }
    }
    let p = out_dir.join(format!("{stem}_cor.png"));
    slice_to_png(&p, &cor, h, w)?;
    written.push(p);

    // sagittal: fix width
    let mut sag = Vec::with_capacity(d * h);
    for z in 0..d {
        for y in 0..h {
            sag.push(err.data()[(z * h + y) * w + w / 2]);
        }
    }
    let p = out_dir.join(format!("{stem}_sag.png"));
    slice_to_png(&p, &sag, d, h)?;
    written.push(p);

    // axial: fix height
    let mut axi = Vec::with_capacity(d * w);
    for z in 0..d {
        for x in 0..w {
            axi.push(err.data()[(z * h + h / 2) * w + x]);
        }
    }
    let p = out_dir.join(format!("{stem}_axi.png"));
    slice_to_png(&p, &axi, d, w)?;
    written.push(p);

    Ok(written)
}
