//! Image file I/O and pixel-range conversions.
//!
//! In memory an image is a `[C, H, W]` [`Tensor`]. Files are 8-bit PNG or JPEG
//! with 1 (luma) or 3 (RGB) channels. Values are in `[0, 1]` unless a function
//! says otherwise; diffusion code works in `[-1, 1]`.

use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use synthvision_nn::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Decode {
        path: String,
        source: image::ImageError,
    },
    #[error("{path}: {source}")]
    Encode {
        path: String,
        source: image::ImageError,
    },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("expected a [C, H, W] tensor, got shape {0:?}")]
    Shape(Vec<usize>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn dims(t: &Tensor) -> Result<(usize, usize, usize), ImageError> {
    match *t.shape() {
        [c, h, w] if c == 1 || c == 3 => Ok((c, h, w)),
        [c, _, _] => Err(ImageError::Channels(c)),
        _ => Err(ImageError::Shape(t.shape().to_vec())),
    }
}

/// Decode an image file into `[channels, H, W]` with values in `[0, 1]`.
pub fn load(path: &Path, channels: usize) -> Result<Tensor, ImageError> {
    let img = image::open(path).map_err(|source| ImageError::Decode {
        path: path.display().to_string(),
        source,
    })?;
    from_dynamic(&img, channels)
}

pub fn from_dynamic(img: &DynamicImage, channels: usize) -> Result<Tensor, ImageError> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    match channels {
        1 => {
            let buf = img.to_luma8();
            let data = buf.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect();
            Ok(Tensor::new(&[1, h, w], data).expect("luma dims"))
        }
        3 => {
            let buf = img.to_rgb8();
            let mut data = vec![0.0; 3 * h * w];
            for (i, p) in buf.pixels().enumerate() {
                for c in 0..3 {
                    data[c * h * w + i] = f64::from(p.0[c]) / 255.0;
                }
            }
            Ok(Tensor::new(&[3, h, w], data).expect("rgb dims"))
        }
        c => Err(ImageError::Channels(c)),
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_dynamic(t: &Tensor) -> Result<DynamicImage, ImageError> {
    let (c, h, w) = dims(t)?;
    let d = t.data();
    Ok(if c == 1 {
        let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            Luma([quantize(d[y as usize * w + x as usize])])
        });
        DynamicImage::ImageLuma8(buf)
    } else {
        let plane = h * w;
        let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let i = y as usize * w + x as usize;
            Rgb([
                quantize(d[i]),
                quantize(d[plane + i]),
                quantize(d[2 * plane + i]),
            ])
        });
        DynamicImage::ImageRgb8(buf)
    })
}

/// Encode `[C, H, W]` values in `[0, 1]` as an 8-bit PNG (values are clamped).
pub fn save_png(path: &Path, t: &Tensor) -> Result<(), ImageError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    to_dynamic(t)?
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| ImageError::Encode {
            path: path.display().to_string(),
            source,
        })
}

/// Bilinear (triangle-filter) resize of a `[C, H, W]` tensor.
pub fn resize(t: &Tensor, height: usize, width: usize) -> Result<Tensor, ImageError> {
    let (c, h, w) = dims(t)?;
    if (h, w) == (height, width) {
        return Ok(t.clone());
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let src: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_vec(
            w as u32,
            h as u32,
            t.data()[ch * plane..(ch + 1) * plane]
                .iter()
                .map(|&v| v as f32)
                .collect(),
        )
        .expect("plane dims");
        let dst = image::imageops::resize(&src, width as u32, height as u32, FilterType::Triangle);
        out.extend(dst.into_raw().into_iter().map(f64::from));
    }
    Ok(Tensor::new(&[c, height, width], out).expect("resized dims"))
}

/// Average-pool by an integer factor (exact box downsampling).
pub fn downsample(t: &Tensor, factor: usize) -> Result<Tensor, ImageError> {
    let (c, h, w) = dims(t)?;
    assert!(factor >= 1 && h % factor == 0 && w % factor == 0);
    let (oh, ow) = (h / factor, w / factor);
    let norm = (factor * factor) as f64;
    let d = t.data();
    let data = (0..c * oh * ow)
        .map(|i| {
            let (ch, rem) = (i / (oh * ow), i % (oh * ow));
            let (y, x) = (rem / ow, rem % ow);
            let mut s = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    s += d[(ch * h + y * factor + dy) * w + x * factor + dx];
                }
            }
            s / norm
        })
        .collect();
    Ok(Tensor::new(&[c, oh, ow], data).expect("pooled dims"))
}

/// `[0, 1]` → `[-1, 1]`.
pub fn to_signed(t: &Tensor) -> Tensor {
    t.map(|v| 2.0 * v - 1.0)
}

/// `[-1, 1]` → `[0, 1]`, clamped.
pub fn to_unit(t: &Tensor) -> Tensor {
    t.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}

pub fn content_type(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("png") => "image/png",
        Some("jpg" | "jpeg") => "image/jpeg",
        _ => "application/octet-stream",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_u8_grid() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| (i % 256) as f64 / 255.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        save_png(&p, &t).unwrap();
        assert_eq!(load(&p, 3).unwrap(), t);
    }

    #[test]
    fn downsample_averages_blocks() {
        let t = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(downsample(&t, 2).unwrap().data(), &[0.5]);
    }

    #[test]
    fn resize_keeps_constant_images_constant() {
        let t = Tensor::full(&[1, 8, 8], 0.25);
        let r = resize(&t, 16, 16).unwrap();
        assert!(r.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }
}
