//! Preprocessing pipeline: Gaussian smoothing, Hough-based skew estimation
//! and correction, ink dilation, bilinear resizing, channel reordering, and
//! [0,1] normalization.
//!
//! Coordinate convention: `x` is the row index and `y` the column index, so a
//! horizontal stroke has constant `x`. Ink is dark on a light background.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel layout tag for 3-channel images; single-channel images use `Gray`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelOrder {
    Bgr,
    Rgb,
    Gray,
}

/// 8-bit raster, row-major, `channels` interleaved per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub order: ChannelOrder,
    pub pixels: Vec<u8>,
}

/// Real-valued image with every value in [0,1], always 3-channel RGB.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, order: ChannelOrder, fill: u8) -> Self {
        Image {
            height,
            width,
            channels,
            order,
            pixels: vec![fill; height * width * channels],
        }
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> u8 {
        self.pixels[(row * self.width + col) * self.channels + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: u8) {
        self.pixels[(row * self.width + col) * self.channels + ch] = v;
    }

    /// Per-pixel mean across channels.
    pub fn luma(&self) -> Vec<u8> {
        if self.channels == 1 {
            return self.pixels.clone();
        }
        self.pixels
            .chunks_exact(self.channels)
            .map(|px| {
                let sum: u32 = px.iter().map(|&v| v as u32).sum();
                (sum / self.channels as u32) as u8
            })
            .collect()
    }

    /// Decodes a PNG or JPEG from disk. Color files come back BGR-tagged (the
    /// capture convention this pipeline expects); grayscale files stay
    /// single-channel.
    pub fn load(path: &Path) -> Result<Self> {
        let dynimg = image::open(path)?;
        Ok(match dynimg {
            image::DynamicImage::ImageLuma8(g) => {
                let (w, h) = (g.width() as usize, g.height() as usize);
                Image {
                    height: h,
                    width: w,
                    channels: 1,
                    order: ChannelOrder::Gray,
                    pixels: g.into_raw(),
                }
            }
            other => {
                let rgb = other.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let mut pixels = rgb.into_raw();
                for px in pixels.chunks_exact_mut(3) {
                    px.swap(0, 2);
                }
                Image {
                    height: h,
                    width: w,
                    channels: 3,
                    order: ChannelOrder::Bgr,
                    pixels,
                }
            }
        })
    }

    /// Writes the image as PNG, converting to RGB byte order if needed.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        match self.channels {
            1 => {
                let buf = image::GrayImage::from_raw(
                    self.width as u32,
                    self.height as u32,
                    self.pixels.clone(),
                )
                .expect("buffer size matches dims");
                buf.save_with_format(path, image::ImageFormat::Png)?;
            }
            3 => {
                let mut pixels = self.pixels.clone();
                if self.order == ChannelOrder::Bgr {
                    for px in pixels.chunks_exact_mut(3) {
                        px.swap(0, 2);
                    }
                }
                let buf =
                    image::RgbImage::from_raw(self.width as u32, self.height as u32, pixels)
                        .expect("buffer size matches dims");
                buf.save_with_format(path, image::ImageFormat::Png)?;
            }
            n => return Err(Error::Shape(format!("cannot encode {}-channel image", n))),
        }
        Ok(())
    }
}

impl NormalizedImage {
    /// View as an `[H, W, 3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(vec![self.height, self.width, 3], self.pixels.clone())
            .expect("pixel buffer matches dims")
    }
}

/// Unnormalized Gaussian weight at offset `(dx, dy)`.
pub fn gaussian_weight(dx: f64, dy: f64, sigma: f64) -> f64 {
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma)
}

/// Gaussian kernel sampled on `[-radius, radius]^2` and renormalized to sum 1.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    if sigma <= 0.0 {
        return Err(Error::Parameter(format!("gaussian sigma must be positive, got {}", sigma)));
    }
    if radius == 0 {
        return Err(Error::Parameter("gaussian radius must be at least 1".into()));
    }
    let n = 2 * radius + 1;
    let mut k = Vec::with_capacity(n * n);
    for dx in -(radius as isize)..=radius as isize {
        for dy in -(radius as isize)..=radius as isize {
            k.push(gaussian_weight(dx as f64, dy as f64, sigma));
        }
    }
    let sum: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    Ok(k)
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // symmetric reflection with edge duplication
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Smooths with a renormalized Gaussian kernel; reflected borders, rounded
/// back to 8 bits.
pub fn gaussian_blur(img: &Image, sigma: f64, radius: usize) -> Result<Image> {
    let kernel = gaussian_kernel(sigma, radius)?;
    let n = 2 * radius + 1;
    let mut out = img.clone();
    for r in 0..img.height {
        for c in 0..img.width {
            for ch in 0..img.channels {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let dx = (ki / n) as isize - radius as isize;
                    let dy = (ki % n) as isize - radius as isize;
                    let sr = reflect(r as isize + dx, img.height);
                    let sc = reflect(c as isize + dy, img.width);
                    acc += kv * img.get(sr, sc, ch) as f64;
                }
                out.set(r, c, ch, acc.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Ok(out)
}

/// Otsu threshold over the luma histogram; returns the cut `t` such that ink
/// is `luma <= t`. Errors when no split leaves both sides populated.
pub fn otsu_threshold(luma: &[u8]) -> Result<u8> {
    let mut hist = [0u64; 256];
    for &v in luma {
        hist[v as usize] += 1;
    }
    let total: u64 = luma.len() as u64;
    let total_sum: f64 = hist.iter().enumerate().map(|(v, &c)| v as f64 * c as f64).sum();
    let mut best: Option<(f64, u8)> = None;
    let mut w0 = 0u64;
    let mut sum0 = 0.0;
    for t in 0..255usize {
        w0 += hist[t];
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0 || w1 == 0 {
            continue;
        }
        let m0 = sum0 / w0 as f64;
        let m1 = (total_sum - sum0) / w1 as f64;
        let between = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
        if best.map_or(true, |(b, _)| between > b) {
            best = Some((between, t as u8));
        }
    }
    best.map(|(_, t)| t).ok_or(Error::NoForeground)
}

/// Resolution of the skew accumulator in degrees.
const HOUGH_STEP_DEG: f64 = 0.5;
const HOUGH_RANGE_DEG: f64 = 45.0;

/// Normal-form vote for a point: rho = x cos(theta) + y sin(theta), with x
/// the row and y the column coordinate.
pub fn hough_rho(x_row: f64, y_col: f64, theta_rad: f64) -> f64 {
    x_row * theta_rad.cos() + y_col * theta_rad.sin()
}

/// Estimates the dominant stroke angle from horizontal, in degrees, by voting
/// Otsu-foreground boundary pixels into a (rho, theta) accumulator over
/// theta in [-45, 45] at 0.5 degree steps. Interior ink pixels are skipped:
/// a stroke of thickness w only localizes its angle to atan(w/length), while
/// its two edges are single-pixel lines. The returned angle is the one
/// [`deskew`] removes.
pub fn estimate_skew(img: &Image) -> Result<f64> {
    let luma = img.luma();
    let t = otsu_threshold(&luma)?;
    let ink = |r: isize, c: isize| -> bool {
        if r < 0 || c < 0 || r >= img.height as isize || c >= img.width as isize {
            return false;
        }
        luma[r as usize * img.width + c as usize] <= t
    };
    let fg: Vec<(usize, usize)> = (0..img.height)
        .flat_map(|r| (0..img.width).map(move |c| (r, c)))
        .filter(|&(r, c)| {
            let (ri, ci) = (r as isize, c as isize);
            ink(ri, ci)
                && !(ink(ri - 1, ci) && ink(ri + 1, ci) && ink(ri, ci - 1) && ink(ri, ci + 1))
        })
        .collect();
    if fg.is_empty() {
        return Err(Error::NoForeground);
    }
    let n_theta = (2.0 * HOUGH_RANGE_DEG / HOUGH_STEP_DEG) as usize + 1;
    let rho_offset = (img.width as f64 * 0.75).ceil() as isize + 1;
    let n_rho = img.height + 2 * rho_offset as usize + 2;
    // Fractional rho is split between its two neighboring bins so that thick
    // strokes do not alias into spurious off-angle peaks. Strokes wider than
    // one pixel make every near-parallel angle collect a similar maximum, so
    // the winning angle is the one whose rho profile is most concentrated
    // (largest sum of squared bin counts); ties prefer the smaller tilt.
    let mut best = (0.0f64, 0usize);
    let mut order: Vec<usize> = (0..n_theta).collect();
    let center = (n_theta - 1) / 2;
    order.sort_by_key(|&ti| ti.abs_diff(center));
    let mut acc = vec![0.0f64; n_rho];
    for ti in order {
        let theta = (-HOUGH_RANGE_DEG + ti as f64 * HOUGH_STEP_DEG).to_radians();
        let (s, c) = theta.sin_cos();
        acc.fill(0.0);
        for &(r, col) in &fg {
            let rho = r as f64 * c + col as f64 * s;
            let lo = rho.floor();
            let frac = rho - lo;
            let bin = (lo as isize + rho_offset) as usize;
            acc[bin] += 1.0 - frac;
            acc[bin + 1] += frac;
        }
        let score: f64 = acc.iter().map(|&v| v * v).sum();
        if score > best.0 {
            best = (score, ti);
        }
    }
    let theta_deg = -HOUGH_RANGE_DEG + best.1 as f64 * HOUGH_STEP_DEG;
    // A stroke tilted by +a (row growing with column) peaks at theta = -a.
    Ok(-theta_deg)
}

/// Rotates image content by `angle_deg` about the center with bilinear
/// sampling; samples falling outside take background white.
pub fn rotate(img: &Image, angle_deg: f64) -> Image {
    let a = angle_deg.to_radians();
    let (sin, cos) = a.sin_cos();
    let cy = (img.height as f64 - 1.0) / 2.0;
    let cx = (img.width as f64 - 1.0) / 2.0;
    let mut out = Image::new(img.height, img.width, img.channels, img.order, 255);
    for r in 0..img.height {
        for c in 0..img.width {
            let dr = r as f64 - cy;
            let dc = c as f64 - cx;
            // inverse mapping: rotate the sampling grid by -angle
            let src_r = cy + cos * dr - sin * dc;
            let src_c = cx + sin * dr + cos * dc;
            for ch in 0..img.channels {
                let v = bilinear_u8(img, src_r, src_c, ch, 255.0);
                out.set(r, c, ch, v);
            }
        }
    }
    out
}

fn bilinear_u8(img: &Image, r: f64, c: f64, ch: usize, background: f64) -> u8 {
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let sample = |ri: f64, ci: f64| -> f64 {
        if ri < 0.0 || ci < 0.0 || ri >= img.height as f64 || ci >= img.width as f64 {
            background
        } else {
            img.get(ri as usize, ci as usize, ch) as f64
        }
    };
    let v00 = sample(r0, c0);
    let v01 = sample(r0, c0 + 1.0);
    let v10 = sample(r0 + 1.0, c0);
    let v11 = sample(r0 + 1.0, c0 + 1.0);
    let v = v00 * (1.0 - fr) * (1.0 - fc)
        + v01 * (1.0 - fr) * fc
        + v10 * fr * (1.0 - fc)
        + v11 * fr * fc;
    v.round().clamp(0.0, 255.0) as u8
}

/// Removes a measured skew of `angle_deg` by rotating the content back.
pub fn deskew(img: &Image, angle_deg: f64) -> Image {
    rotate(img, -angle_deg)
}

/// Grayscale dilation of dark ink: minimum over an odd square window,
/// replicated borders.
pub fn dilate(img: &Image, kernel_size: usize) -> Result<Image> {
    if kernel_size % 2 == 0 || kernel_size == 0 {
        return Err(Error::Parameter(format!(
            "dilation kernel size must be odd, got {}",
            kernel_size
        )));
    }
    let half = (kernel_size / 2) as isize;
    let mut out = img.clone();
    for r in 0..img.height {
        for c in 0..img.width {
            for ch in 0..img.channels {
                let mut min = 255u8;
                for dr in -half..=half {
                    for dc in -half..=half {
                        let sr = (r as isize + dr).clamp(0, img.height as isize - 1) as usize;
                        let sc = (c as isize + dc).clamp(0, img.width as isize - 1) as usize;
                        min = min.min(img.get(sr, sc, ch));
                    }
                }
                out.set(r, c, ch, min);
            }
        }
    }
    Ok(out)
}

/// Bilinear resize with corner-aligned sampling: source coordinate
/// r * (H-1) / (out_h - 1), evaluated per pixel.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Parameter("resize dims must be positive".into()));
    }
    let mut out = Image::new(out_h, out_w, img.channels, img.order, 0);
    for r in 0..out_h {
        for c in 0..out_w {
            let sr = if out_h > 1 {
                r as f64 * (img.height as f64 - 1.0) / (out_h as f64 - 1.0)
            } else {
                0.0
            };
            let sc = if out_w > 1 {
                c as f64 * (img.width as f64 - 1.0) / (out_w as f64 - 1.0)
            } else {
                0.0
            };
            for ch in 0..img.channels {
                out.set(r, c, ch, bilinear_clamped(img, sr, sc, ch));
            }
        }
    }
    Ok(out)
}

fn bilinear_clamped(img: &Image, r: f64, c: f64, ch: usize) -> u8 {
    let r0 = r.floor() as usize;
    let c0 = c.floor() as usize;
    let r1 = (r0 + 1).min(img.height - 1);
    let c1 = (c0 + 1).min(img.width - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let v = img.get(r0, c0, ch) as f64 * (1.0 - fr) * (1.0 - fc)
        + img.get(r0, c1, ch) as f64 * (1.0 - fr) * fc
        + img.get(r1, c0, ch) as f64 * fr * (1.0 - fc)
        + img.get(r1, c1, ch) as f64 * fr * fc;
    v.round().clamp(0.0, 255.0) as u8
}

/// Reorders BGR to RGB (replicating single-channel input) and scales every
/// value by 1/255.
pub fn to_rgb_normalized(img: &Image) -> Result<NormalizedImage> {
    let pixels = match (img.channels, img.order) {
        (1, _) => img
            .pixels
            .iter()
            .flat_map(|&v| {
                let f = v as f64 / 255.0;
                [f, f, f]
            })
            .collect(),
        (3, ChannelOrder::Bgr) => img
            .pixels
            .chunks_exact(3)
            .flat_map(|px| [px[2] as f64 / 255.0, px[1] as f64 / 255.0, px[0] as f64 / 255.0])
            .collect(),
        (c, o) => {
            return Err(Error::Parameter(format!(
                "to_rgb_normalized expects BGR or grayscale input, got {} channels tagged {:?}",
                c, o
            )))
        }
    };
    Ok(NormalizedImage {
        height: img.height,
        width: img.width,
        pixels,
    })
}

/// Stage toggles and parameters for [`preprocess_pipeline`].
#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub gaussian: bool,
    pub sigma: f64,
    pub radius: usize,
    pub deskew: bool,
    pub dilate: bool,
    pub dilate_kernel: usize,
    pub resize: bool,
    pub target_height: usize,
    pub target_width: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gaussian: true,
            sigma: 1.0,
            radius: 2,
            deskew: true,
            dilate: true,
            dilate_kernel: 3,
            resize: true,
            target_height: 128,
            target_width: 128,
        }
    }
}

/// Stage order: noise reduction, skew correction, dilation, resizing, channel
/// reorder + normalization. Returns the final image and, when requested, each
/// intermediate stage by name.
pub fn preprocess_pipeline_stages(
    img: &Image,
    cfg: &PipelineConfig,
    mut dump: Option<&mut Vec<(&'static str, Image)>>,
) -> Result<NormalizedImage> {
    if img.height == 0 || img.width == 0 {
        return Err(Error::Shape("empty input image".into()));
    }
    let record = |name: &'static str, im: &Image, dump: &mut Option<&mut Vec<(&'static str, Image)>>| {
        if let Some(d) = dump.as_deref_mut() {
            d.push((name, im.clone()));
        }
    };
    let mut current = img.clone();
    if cfg.gaussian {
        current = gaussian_blur(&current, cfg.sigma, cfg.radius)?;
        record("noise", &current, &mut dump);
    }
    if cfg.deskew {
        let angle = estimate_skew(&current)?;
        current = deskew(&current, angle);
        record("deskew", &current, &mut dump);
    }
    if cfg.dilate {
        current = dilate(&current, cfg.dilate_kernel)?;
        record("dilate", &current, &mut dump);
    }
    if cfg.resize {
        current = resize(&current, cfg.target_height, cfg.target_width)?;
        record("resize", &current, &mut dump);
    }
    to_rgb_normalized(&current)
}

pub fn preprocess_pipeline(img: &Image, cfg: &PipelineConfig) -> Result<NormalizedImage> {
    preprocess_pipeline_stages(img, cfg, None)
}
