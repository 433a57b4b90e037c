//! PNG decode/encode and bilinear resizing into the model's tensor layout.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single image as a `[3, size, size]` tensor with values in [0, 1].
#[derive(Clone, Debug)]
pub struct ImageTensor {
    tensor: Tensor,
}

impl ImageTensor {
    pub fn new(tensor: Tensor) -> Result<Self> {
        let shape = tensor.shape();
        if shape.len() != 3 || shape[0] != 3 || shape[1] != shape[2] {
            return Err(Error::InvalidInput(format!(
                "image tensor must be [3, s, s], got {shape:?}"
            )));
        }
        if tensor.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput("image values must lie in [0, 1]".into()));
        }
        Ok(ImageTensor { tensor })
    }

    pub fn size(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor {
        self.tensor
    }

    /// As a single-sample NCHW batch.
    pub fn to_batch(&self) -> Tensor {
        let s = self.size();
        self.tensor
            .clone()
            .reshape(&[1, 3, s, s])
            .expect("rank change only")
    }
}

/// Decodes an 8-bit image file, resizes it bilinearly to `target_size`
/// square, and scales to [0, 1]. Grayscale sources are replicated to three
/// channels.
pub fn load_image(path: &Path, target_size: usize) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path.display().to_string(), other.to_string()),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut channels = vec![vec![0.0f64; w * h]; 3];
    for (i, px) in rgb.pixels().enumerate() {
        channels[0][i] = px.0[0] as f64 / 255.0;
        channels[1][i] = px.0[1] as f64 / 255.0;
        channels[2][i] = px.0[2] as f64 / 255.0;
    }
    let mut out = Tensor::zeros(&[3, target_size, target_size]);
    for (c, chan) in channels.iter().enumerate() {
        let resized = bilinear_resize(chan, h, w, target_size, target_size);
        let plane_len = target_size * target_size;
        out.data_mut()[c * plane_len..(c + 1) * plane_len].copy_from_slice(&resized);
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    ImageTensor::new(out)
}

/// Writes a `[3, h, w]` (or `[1, 3, h, w]`) tensor in [0, 1] as 8-bit PNG.
pub fn save_image(tensor: &Tensor, path: &Path) -> Result<()> {
    let shape = tensor.shape().to_vec();
    let (c, h, w) = match shape.as_slice() {
        [3, h, w] => (3usize, *h, *w),
        [1, 3, h, w] => (3usize, *h, *w),
        other => {
            return Err(Error::InvalidInput(format!(
                "expected [3, h, w] image tensor, got {other:?}"
            )))
        }
    };
    let data = tensor.data();
    let plane = h * w;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let px = [
                to_u8(data[i]),
                to_u8(data[plane + i]),
                to_u8(data[2 * plane + i]),
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let _ = c;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    img.save(path)
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Center-aligned bilinear resampling.
pub fn bilinear_resize(
    src: &[f64],
    src_h: usize,
    src_w: usize,
    dst_h: usize,
    dst_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; dst_h * dst_w];
    let scale_y = src_h as f64 / dst_h as f64;
    let scale_x = src_w as f64 / dst_w as f64;
    for dy in 0..dst_h {
        let sy = ((dy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (src_h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let ty = sy - y0 as f64;
        for dx in 0..dst_w {
            let sx = ((dx as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (src_w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let tx = sx - x0 as f64;
            let top = src[y0 * src_w + x0] * (1.0 - tx) + src[y0 * src_w + x1] * tx;
            let bottom = src[y1 * src_w + x0] * (1.0 - tx) + src[y1 * src_w + x1] * tx;
            out[dy * dst_w + dx] = top * (1.0 - ty) + bottom * ty;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_constant_plane_is_exact() {
        let src = vec![0.7; 10 * 10];
        let out = bilinear_resize(&src, 10, 10, 4, 4);
        assert!(out.iter().all(|v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn load_resizes_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("white.png");
        let img = image::RgbImage::from_pixel(128, 128, image::Rgb([255, 255, 255]));
        img.save(&path).unwrap();
        let loaded = load_image(&path, 64).unwrap();
        assert_eq!(loaded.size(), 64);
        assert!(loaded.tensor().data().iter().all(|v| (*v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn grayscale_replicates_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.png");
        let img = image::GrayImage::from_pixel(32, 32, image::Luma([100]));
        img.save(&path).unwrap();
        let loaded = load_image(&path, 32).unwrap();
        let plane = 32 * 32;
        let d = loaded.tensor().data();
        for i in 0..plane {
            assert_eq!(d[i], d[plane + i]);
            assert_eq!(d[i], d[2 * plane + i]);
        }
    }

    #[test]
    fn save_load_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rt.png");
        let mut t = Tensor::zeros(&[3, 8, 8]);
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            *v = (i % 255) as f64 / 255.0;
        }
        save_image(&t, &path).unwrap();
        let back = load_image(&path, 8).unwrap();
        for (a, b) in back.tensor().data().iter().zip(t.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn undecodable_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.png");
        std::fs::write(&path, b"garbage bytes").unwrap();
        assert!(load_image(&path, 16).is_err());
    }
}
