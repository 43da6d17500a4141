//! IDX (MNIST-style) tensors and binary PGM/PPM image dumps.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_U8: u8 = 0x08;
const IDX_F32: u8 = 0x0D;

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "IDX",
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Raw IDX payload: dimensions plus values widened to f32 (bytes are not rescaled).
pub fn read_idx(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(idx_err(path, "bad magic"));
    }
    let (ty, rank) = (bytes[2], bytes[3] as usize);
    let header = 4 + 4 * rank;
    if rank == 0 || bytes.len() < header {
        return Err(idx_err(path, "truncated header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let body = &bytes[header..];
    let values = match ty {
        IDX_U8 => {
            if body.len() != count {
                return Err(idx_err(path, format!("expected {count} bytes, found {}", body.len())));
            }
            body.iter().map(|&b| b as f32).collect()
        }
        IDX_F32 => {
            if body.len() != 4 * count {
                return Err(idx_err(path, format!("expected {} bytes, found {}", 4 * count, body.len())));
            }
            body.chunks(4)
                .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        }
        other => return Err(idx_err(path, format!("unsupported element type {other:#04x}"))),
    };
    Ok((dims, values))
}

fn idx_header(ty: u8, dims: &[usize]) -> Vec<u8> {
    let mut out = vec![0, 0, ty, dims.len() as u8];
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

pub fn write_idx_f32(path: &Path, dims: &[usize], values: &[f32]) -> Result<()> {
    let mut out = idx_header(IDX_F32, dims);
    for v in values {
        out.extend_from_slice(&v.to_be_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_u8(path: &Path, dims: &[usize], values: &[u8]) -> Result<()> {
    let mut out = idx_header(IDX_U8, dims);
    out.extend_from_slice(values);
    fs::write(path, out)?;
    Ok(())
}

/// Load images and labels. Byte images are scaled to `[0, 1]`; rank-3
/// image files (`n, h, w`) get a single channel axis.
pub fn load_idx_dataset(images: &Path, labels: &Path, class_count: Option<usize>) -> Result<Dataset> {
    let (dims, mut values) = read_idx(images)?;
    let is_bytes = fs::read(images)?.get(2) == Some(&IDX_U8);
    if is_bytes {
        values.iter_mut().for_each(|v| *v /= 255.0);
    }
    let shape = match dims.len() {
        3 => vec![dims[0], 1, dims[1], dims[2]],
        4 => dims.clone(),
        _ => return Err(idx_err(images, format!("expected rank 3 or 4, got {dims:?}"))),
    };
    let (ldims, lvals) = read_idx(labels)?;
    if ldims.len() != 1 {
        return Err(idx_err(labels, "labels must be rank 1"));
    }
    let labels_v: Vec<usize> = lvals.iter().map(|&v| v as usize).collect();
    let k = class_count.unwrap_or_else(|| labels_v.iter().max().map_or(0, |m| m + 1));
    Dataset::new(Tensor::new(shape, values)?, labels_v, k)
}

/// Write images as float IDX and labels as byte IDX.
pub fn save_idx_dataset(data: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    write_idx_f32(images, data.images().shape(), data.images().data())?;
    if data.class_count() > 256 {
        return Err(Error::invalid("byte labels hold at most 256 classes"));
    }
    let l: Vec<u8> = data.labels().iter().map(|&l| l as u8).collect();
    write_idx_u8(labels, &[l.len()], &l)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary greyscale PGM (`P5`) of a `h×w` plane.
pub fn write_pgm(path: &Path, height: usize, width: usize, plane: &[f32]) -> Result<()> {
    if plane.len() != height * width {
        return Err(Error::shape(format!(
            "PGM {height}x{width} needs {} values, got {}",
            height * width,
            plane.len()
        )));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(plane.iter().map(|&v| to_byte(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Binary colour PPM (`P6`) of a planar `[3, h, w]` image. Single-channel
/// images are replicated to grey.
pub fn write_ppm(path: &Path, shape: [usize; 3], image: &[f32]) -> Result<()> {
    let [c, h, w] = shape;
    if image.len() != c * h * w || (c != 1 && c != 3) {
        return Err(Error::shape(format!("PPM needs [1|3, h, w], got {shape:?}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..h * w {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            out.push(to_byte(image[src * h * w + p]));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Dump an image as PGM for one channel and PPM otherwise.
pub fn write_image(path_stem: &Path, shape: [usize; 3], image: &[f32]) -> Result<std::path::PathBuf> {
    if shape[0] == 1 {
        let path = path_stem.with_extension("pgm");
        write_pgm(&path, shape[1], shape[2], image)?;
        Ok(path)
    } else {
        let path = path_stem.with_extension("ppm");
        write_ppm(&path, shape, image)?;
        Ok(path)
    }
}
