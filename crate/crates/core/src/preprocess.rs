//! Deterministic image conditioning (normalization, CLAHE, aspect-preserving
//! resize with padding) and stochastic training-time augmentation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gray::GrayImage;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("empty image")]
    EmptyImage,
    #[error("image {width}x{height} smaller than the {cols}x{rows} tile grid")]
    ImageSmallerThanGrid {
        width: usize,
        height: usize,
        cols: usize,
        rows: usize,
    },
    #[error("bad parameter: {0}")]
    BadParameter(String),
}

/// CLAHE parameters: clip limit is a multiple of the uniform bin count.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClaheParams {
    pub clip_limit: f64,
    /// (columns, rows) of the tile grid.
    pub tiles: (usize, usize),
    pub bins: usize,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams {
            clip_limit: 2.0,
            tiles: (8, 8),
            bins: 256,
        }
    }
}

impl ClaheParams {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.clip_limit < 1.0 {
            return Err(PreprocessError::BadParameter(format!(
                "clip_limit {} < 1",
                self.clip_limit
            )));
        }
        if self.tiles.0 == 0 || self.tiles.1 == 0 {
            return Err(PreprocessError::BadParameter("zero tile count".into()));
        }
        if self.bins < 2 {
            return Err(PreprocessError::BadParameter(format!(
                "bins {} < 2",
                self.bins
            )));
        }
        Ok(())
    }
}

/// Target geometry for the aspect-preserving resize.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResizeSpec {
    /// (width, height) of the output canvas.
    pub target: (usize, usize),
    pub pad_value: f32,
}

impl Default for ResizeSpec {
    fn default() -> Self {
        ResizeSpec {
            target: (512, 1024),
            pad_value: 0.0,
        }
    }
}

/// Training-time augmentation magnitudes. Horizontal flips are deliberately
/// absent: they would mirror laterality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation_max_deg: f64,
    pub vflip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_max: f64,
    pub brightness_delta_max: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_max_deg: 15.0,
            vflip_prob: 0.5,
            blur_prob: 0.3,
            blur_sigma_max: 1.5,
            brightness_delta_max: 0.1,
            seed: 0,
        }
    }
}

/// Identity configuration, for pipelines that must not perturb images.
impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            rotation_max_deg: 0.0,
            vflip_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma_max: 0.0,
            brightness_delta_max: 0.0,
            seed: 0,
        }
    }
}

/// Min-max normalize to `[0,1]`; a constant image maps to all zeros.
pub fn normalize_intensity(img: &GrayImage) -> Result<GrayImage, PreprocessError> {
    if img.pixels().is_empty() {
        return Err(PreprocessError::EmptyImage);
    }
    let (lo, hi) = img.min_max();
    let range = hi - lo;
    let pixels = if range > 0.0 {
        img.pixels().iter().map(|&p| (p - lo) / range).collect()
    } else {
        vec![0.0; img.pixels().len()]
    };
    Ok(GrayImage::new(img.width(), img.height(), pixels).expect("same dimensions"))
}

/// Per-tile equalization mapping: bins-bucket histogram, clipped at
/// `clip_limit * tile_pixels / bins` with the excess spread uniformly in one
/// pass, then the normalized CDF. A tile whose mass sits in a single bin
/// (possible only when nothing was clipped) maps every bin to its midpoint.
fn tile_mapping(values: impl Iterator<Item = f32>, params: &ClaheParams) -> Vec<f64> {
    let bins = params.bins;
    let mut hist = vec![0.0f64; bins];
    let mut count = 0usize;
    for v in values {
        let b = ((f64::from(v) * bins as f64) as usize).min(bins - 1);
        hist[b] += 1.0;
        count += 1;
    }
    let total = count as f64;
    let ceiling = params.clip_limit * total / bins as f64;
    let mut excess = 0.0;
    for h in hist.iter_mut() {
        if *h > ceiling {
            excess += *h - ceiling;
            *h = ceiling;
        }
    }
    if excess > 0.0 {
        let share = excess / bins as f64;
        for h in hist.iter_mut() {
            *h += share;
        }
    }
    // cdf_min = cumulative count at the first occupied bin
    let mut cdf = vec![0.0f64; bins];
    let mut acc = 0.0;
    let mut cdf_min = None;
    for (b, &h) in hist.iter().enumerate() {
        acc += h;
        cdf[b] = acc;
        if cdf_min.is_none() && h > 0.0 {
            cdf_min = Some(acc);
        }
    }
    let cdf_min = cdf_min.unwrap_or(total);
    if cdf_min < total {
        cdf.iter()
            .map(|&c| ((c - cdf_min) / (total - cdf_min)).clamp(0.0, 1.0))
            .collect()
    } else {
        (0..bins).map(|b| (b as f64 + 0.5) / bins as f64).collect()
    }
}

/// Axis geometry for tile interpolation: per coordinate, the surrounding
/// tile pair and the blend weight toward the right/lower tile.
fn axis_blend(extent: usize, tiles: usize) -> Vec<(usize, usize, f64)> {
    let bounds: Vec<(usize, usize)> = (0..tiles)
        .map(|t| (t * extent / tiles, (t + 1) * extent / tiles))
        .collect();
    let centers: Vec<f64> = bounds
        .iter()
        .map(|&(s, e)| (s + e - 1) as f64 / 2.0)
        .collect();
    (0..extent)
        .map(|x| {
            let xf = x as f64;
            if xf <= centers[0] {
                (0, 0, 0.0)
            } else if xf >= centers[tiles - 1] {
                (tiles - 1, tiles - 1, 0.0)
            } else {
                let right = centers.partition_point(|&c| c <= xf).min(tiles - 1);
                let left = right - 1;
                let w = (xf - centers[left]) / (centers[right] - centers[left]);
                (left, right, w)
            }
        })
        .collect()
}

/// Contrast-limited adaptive histogram equalization.
///
/// Each output pixel bilinearly blends the equalization mappings of its four
/// nearest tile centers (clamped at the borders). Input must be in `[0,1]`.
pub fn clahe(img: &GrayImage, params: &ClaheParams) -> Result<GrayImage, PreprocessError> {
    params.validate()?;
    let (w, h) = (img.width(), img.height());
    let (cols, rows) = params.tiles;
    if w < cols || h < rows {
        return Err(PreprocessError::ImageSmallerThanGrid {
            width: w,
            height: h,
            cols,
            rows,
        });
    }
    let bins = params.bins;
    // per-tile lookup tables
    let mut luts = vec![vec![0.0f64; bins]; cols * rows];
    for ty in 0..rows {
        let (y0, y1) = (ty * h / rows, (ty + 1) * h / rows);
        for tx in 0..cols {
            let (x0, x1) = (tx * w / cols, (tx + 1) * w / cols);
            let values = (y0..y1).flat_map(|y| (x0..x1).map(move |x| (x, y)));
            luts[ty * cols + tx] = tile_mapping(values.map(|(x, y)| img.get(x, y)), params);
        }
    }
    let xb = axis_blend(w, cols);
    let yb = axis_blend(h, rows);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let (t_up, t_dn, wy) = yb[y];
        for x in 0..w {
            let (t_lf, t_rt, wx) = xb[x];
            let b = ((f64::from(img.get(x, y)) * bins as f64) as usize).min(bins - 1);
            let ul = luts[t_up * cols + t_lf][b];
            let ur = luts[t_up * cols + t_rt][b];
            let ll = luts[t_dn * cols + t_lf][b];
            let lr = luts[t_dn * cols + t_rt][b];
            let top = ul + (ur - ul) * wx;
            let bot = ll + (lr - ll) * wx;
            out.push((top + (bot - top) * wy).clamp(0.0, 1.0) as f32);
        }
    }
    Ok(GrayImage::new(w, h, out).expect("same dimensions"))
}

#[inline]
fn sample_bilinear(img: &GrayImage, x: f64, y: f64, fill: f32) -> f32 {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if x <= -1.0 || y <= -1.0 || x >= w || y >= h {
        return fill;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let fetch = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= w || yi >= h {
            f64::from(fill)
        } else {
            f64::from(img.get(xi as usize, yi as usize))
        }
    };
    let v00 = fetch(x0, y0);
    let v10 = fetch(x0 + 1.0, y0);
    let v01 = fetch(x0, y0 + 1.0);
    let v11 = fetch(x0 + 1.0, y0 + 1.0);
    let top = v00 + (v10 - v00) * fx;
    let bot = v01 + (v11 - v01) * fx;
    (top + (bot - top) * fy) as f32
}

/// Bilinear resize by `s = min(tw/w, th/h)` onto a `target`-sized canvas;
/// the area right/below the scaled content is filled with `pad_value`.
pub fn resize_pad(img: &GrayImage, spec: &ResizeSpec) -> Result<GrayImage, PreprocessError> {
    if img.pixels().is_empty() {
        return Err(PreprocessError::EmptyImage);
    }
    let (tw, th) = spec.target;
    if tw == 0 || th == 0 {
        return Err(PreprocessError::BadParameter("empty resize target".into()));
    }
    let (w, h) = (img.width(), img.height());
    let scale = (tw as f64 / w as f64).min(th as f64 / h as f64);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, tw);
    let ch = ((h as f64 * scale).round() as usize).clamp(1, th);
    let mut out = vec![spec.pad_value; tw * th];
    for y in 0..ch {
        let sy = (y as f64 + 0.5) / scale - 0.5;
        let sy = sy.clamp(0.0, h as f64 - 1.0);
        for x in 0..cw {
            let sx = (x as f64 + 0.5) / scale - 0.5;
            let sx = sx.clamp(0.0, w as f64 - 1.0);
            out[y * tw + x] = sample_bilinear(img, sx, sy, spec.pad_value);
        }
    }
    Ok(GrayImage::new(tw, th, out).expect("target dimensions"))
}

/// Rotate around the image center by `degrees`, bilinear sampling with zero
/// fill outside the source.
pub fn rotate(img: &GrayImage, degrees: f64) -> GrayImage {
    if degrees == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let rad = degrees.to_radians();
    let (sin, cos) = rad.sin_cos();
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cx + cos * dx + sin * dy;
            let sy = cy - sin * dx + cos * dy;
            out.push(sample_bilinear(img, sx, sy, 0.0));
        }
    }
    GrayImage::new(w, h, out).expect("same dimensions")
}

/// Flip top to bottom.
pub fn vflip(img: &GrayImage) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    let mut out = Vec::with_capacity(w * h);
    for y in (0..h).rev() {
        out.extend_from_slice(&img.pixels()[y * w..(y + 1) * w]);
    }
    GrayImage::new(w, h, out).expect("same dimensions")
}

/// Separable Gaussian blur with replicated borders, so constants are fixed
/// points. `sigma == 0` is the identity.
pub fn gaussian_blur(img: &GrayImage, sigma: f64) -> GrayImage {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let denom = 2.0 * sigma * sigma;
    for k in -radius..=radius {
        kernel.push((-((k * k) as f64) / denom).exp());
    }
    let sum: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= sum;
    }
    let (w, h) = (img.width() as i64, img.height() as i64);
    let pixels = img.pixels();
    let mut horiz = vec![0.0f64; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let sx = (x + i as i64 - radius).clamp(0, w - 1);
                acc += kv * f64::from(pixels[(y * w + sx) as usize]);
            }
            horiz[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![0.0f32; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in kernel.iter().enumerate() {
                let sy = (y + i as i64 - radius).clamp(0, h - 1);
                acc += kv * horiz[(sy * w + x) as usize];
            }
            out[(y * w + x) as usize] = acc as f32;
        }
    }
    GrayImage::new(img.width(), img.height(), out).expect("same dimensions")
}

/// Add `delta` to every pixel, clamped to `[0,1]`.
pub fn brightness(img: &GrayImage, delta: f64) -> GrayImage {
    if delta == 0.0 {
        return img.clone();
    }
    let pixels = img
        .pixels()
        .iter()
        .map(|&p| (f64::from(p) + delta).clamp(0.0, 1.0) as f32)
        .collect();
    GrayImage::new(img.width(), img.height(), pixels).expect("same dimensions")
}

/// Apply the stochastic augmentation chain: rotation, vertical flip,
/// Gaussian blur, brightness shift. Deterministic given the draw state.
pub fn augment(img: &GrayImage, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> GrayImage {
    let mut out = if config.rotation_max_deg > 0.0 {
        let angle = rng.random_range(-config.rotation_max_deg..=config.rotation_max_deg);
        rotate(img, angle)
    } else {
        img.clone()
    };
    if config.vflip_prob > 0.0 && rng.random_bool(config.vflip_prob) {
        out = vflip(&out);
    }
    if config.blur_prob > 0.0 && rng.random_bool(config.blur_prob) {
        let sigma = rng.random_range(0.0..=config.blur_sigma_max.max(0.0));
        out = gaussian_blur(&out, sigma);
    }
    if config.brightness_delta_max > 0.0 {
        let delta = rng.random_range(-config.brightness_delta_max..=config.brightness_delta_max);
        out = brightness(&out, delta);
    }
    out
}
