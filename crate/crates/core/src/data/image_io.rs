//! PNG <-> `[H, W, 3]` tensors in `[0, 1]`, and bilinear resampling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| b as f64 / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

pub fn save_png(image: &Tensor, path: &Path) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::dim("save_png", s, &[3]));
    }
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let buf = image::RgbImage::from_raw(s[1] as u32, s[0] as u32, bytes).expect("buffer sized from shape");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an image at `resolution x resolution`, resampling when `resize` is
/// set and failing with a dimension error otherwise.
pub fn load_at(path: &Path, resolution: usize, resize: bool) -> Result<Tensor> {
    let img = load_png(path)?;
    if img.shape()[..2] == [resolution, resolution] {
        Ok(img)
    } else if resize {
        resize_bilinear(&img, resolution, resolution)
    } else {
        Err(Error::dim("load_image", img.shape(), &[resolution, resolution, 3]))
    }
}

/// Samples channel `c` at fractional coordinates with edge clamping.
pub(crate) fn sample_bilinear(img: &Tensor, y: f64, x: f64, c: usize) -> f64 {
    let s = img.shape();
    let (h, w, ch) = (s[0], s[1], s[2]);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let d = img.data();
    let at = |yy: usize, xx: usize| d[(yy * w + xx) * ch + c];
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Half-pixel-centre bilinear resize of a `[H, W, C]` map.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    resize_region(img, (0.0, 0.0), (img.shape()[0] as f64, img.shape()[1] as f64), out_h, out_w)
}

/// Resamples the window at `origin` with extent `size` (in pixels) to `out_h x out_w`.
pub(crate) fn resize_region(img: &Tensor, origin: (f64, f64), size: (f64, f64), out_h: usize, out_w: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::dim("resize", s, &[out_h, out_w]));
    }
    let c = s[2];
    let (sy, sx) = (size.0 / out_h as f64, size.1 / out_w as f64);
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let y = origin.0 + (oy as f64 + 0.5) * sy - 0.5;
        for ox in 0..out_w {
            let x = origin.1 + (ox as f64 + 0.5) * sx - 0.5;
            for ch in 0..c {
                out.push(sample_bilinear(img, y, x, ch));
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}
