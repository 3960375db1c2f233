//! Stochastic view generation: resized crop, horizontal flip, color jitter,
//! grayscale and Gaussian blur, each adopted with its own probability.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::numerics::{Real, Tensor};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AugmentError {
    #[error("image {width}x{height} is smaller than the minimum side {min}")]
    TooSmall { width: usize, height: usize, min: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("policy: {0}")]
    Policy(String),
    #[error("image buffer has {got} values, expected {expected}")]
    Buffer { expected: usize, got: usize },
}

/// An RGB image, row-major `height x width x 3`, values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self, AugmentError> {
        let expected = width * height * 3;
        if data.len() != expected {
            return Err(AugmentError::Buffer {
                expected,
                got: data.len(),
            });
        }
        let mut img = Self { width, height, data };
        img.clamp();
        Ok(img)
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn clamp(&mut self) {
        for v in &mut self.data {
            // NaN also maps to 0
            *v = if *v > 0.0 { v.min(1.0) } else { 0.0 };
        }
    }

    fn map_pixels(&mut self, f: impl Fn([f32; 3]) -> [f32; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            let out = f([px[0], px[1], px[2]]);
            px.copy_from_slice(&out);
        }
        self.clamp();
    }

    /// Bilinear sample of the sub-rectangle `(x0, y0, w, h)` onto an
    /// `out_w x out_h` grid, using pixel-center alignment.
    pub fn crop_resize(&self, x0: f64, y0: f64, w: f64, h: f64, out_w: usize, out_h: usize) -> Image {
        let mut data = Vec::with_capacity(out_w * out_h * 3);
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        for v in 0..out_h {
            let sy = (y0 + (v as f64 + 0.5) * h / out_h as f64 - 0.5).clamp(0.0, max_y);
            let y_lo = sy.floor() as usize;
            let y_hi = (y_lo + 1).min(self.height - 1);
            let fy = (sy - y_lo as f64) as f32;
            for u in 0..out_w {
                let sx = (x0 + (u as f64 + 0.5) * w / out_w as f64 - 0.5).clamp(0.0, max_x);
                let x_lo = sx.floor() as usize;
                let x_hi = (x_lo + 1).min(self.width - 1);
                let fx = (sx - x_lo as f64) as f32;
                let (p00, p10) = (self.pixel(x_lo, y_lo), self.pixel(x_hi, y_lo));
                let (p01, p11) = (self.pixel(x_lo, y_hi), self.pixel(x_hi, y_hi));
                for ch in 0..3 {
                    let top = p00[ch] + (p10[ch] - p00[ch]) * fx;
                    let bottom = p01[ch] + (p11[ch] - p01[ch]) * fx;
                    data.push(top + (bottom - top) * fy);
                }
            }
        }
        let mut img = Image {
            width: out_w,
            height: out_h,
            data,
        };
        img.clamp();
        img
    }

    /// Whole-image bilinear resize; identity when the size already matches.
    pub fn resize(&self, out_w: usize, out_h: usize) -> Image {
        if out_w == self.width && out_h == self.height {
            return self.clone();
        }
        self.crop_resize(0.0, 0.0, self.width as f64, self.height as f64, out_w, out_h)
    }

    fn hflip(&mut self) {
        let w = self.width;
        for row in self.data.chunks_exact_mut(w * 3) {
            for x in 0..w / 2 {
                for ch in 0..3 {
                    row.swap(x * 3 + ch, (w - 1 - x) * 3 + ch);
                }
            }
        }
    }
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as i32).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Per-transform probabilities and strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub output_size: usize,
    /// smallest accepted input side
    pub min_input_size: usize,
    pub crop_p: f64,
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
    pub blur_p: f64,
    pub blur_sigma: [f64; 2],
    /// blur kernel side as a fraction of the output size (odd, at least 3)
    pub blur_kernel_frac: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            output_size: 16,
            min_input_size: 8,
            crop_p: 1.0,
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
            blur_p: 0.5,
            blur_sigma: [0.1, 2.0],
            blur_kernel_frac: 0.1,
        }
    }
}

impl AugmentPolicy {
    /// Every transform off: output is the input resized to `output_size`.
    pub fn identity(output_size: usize) -> Self {
        Self {
            output_size,
            crop_p: 0.0,
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            blur_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: String| Err(AugmentError::Policy(m));
        for (name, p) in [
            ("crop_p", self.crop_p),
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return bad(format!("crop_scale must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"));
        }
        let [rlo, rhi] = self.crop_ratio;
        if !(rlo > 0.0 && rlo <= rhi && rhi.is_finite()) {
            return bad(format!("crop_ratio must satisfy 0 < lo <= hi, got [{rlo}, {rhi}]"));
        }
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("{name} must lie in [0, 1], got {s}"));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return bad(format!("hue must lie in [0, 0.5], got {}", self.hue));
        }
        let [slo, shi] = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi && shi.is_finite()) {
            return bad(format!("blur_sigma must satisfy 0 < lo <= hi, got [{slo}, {shi}]"));
        }
        if !(0.0..=1.0).contains(&self.blur_kernel_frac) {
            return bad(format!("blur_kernel_frac must lie in [0, 1], got {}", self.blur_kernel_frac));
        }
        if self.output_size == 0 || self.min_input_size == 0 {
            return bad("output_size and min_input_size must be > 0".into());
        }
        Ok(())
    }

    fn blur_kernel(&self) -> usize {
        let k = (self.blur_kernel_frac * self.output_size as f64).ceil() as usize;
        (k.max(3)) | 1
    }
}

/// Deterministic RNG substream for one `(seed, parts...)` coordinate.
pub fn substream(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    // splitmix64 chain
    let mix = |mut z: u64| {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    };
    let mut h = mix(seed);
    for &p in parts {
        h = mix(h ^ mix(p));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn random_crop_box(img: &Image, policy: &AugmentPolicy, rng: &mut impl Rng) -> (f64, f64, f64, f64) {
    let (w, h) = (img.width as f64, img.height as f64);
    let area = w * h;
    let [lo, hi] = policy.crop_scale;
    let (log_lo, log_hi) = (policy.crop_ratio[0].ln(), policy.crop_ratio[1].ln());
    for _ in 0..10 {
        let target = area * rng.random_range(lo..=hi);
        let ratio = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * ratio).sqrt().round();
        let ch = (target / ratio).sqrt().round();
        if cw >= 1.0 && ch >= 1.0 && cw <= w && ch <= h {
            let x0 = rng.random_range(0..=(w - cw) as usize) as f64;
            let y0 = rng.random_range(0..=(h - ch) as usize) as f64;
            return (x0, y0, cw, ch);
        }
    }
    // center crop fallback at the nearest admissible aspect ratio
    let in_ratio = w / h;
    let (cw, ch) = if in_ratio < policy.crop_ratio[0] {
        (w, (w / policy.crop_ratio[0]).round())
    } else if in_ratio > policy.crop_ratio[1] {
        ((h * policy.crop_ratio[1]).round(), h)
    } else {
        (w, h)
    };
    (((w - cw) / 2.0).floor(), ((h - ch) / 2.0).floor(), cw, ch)
}

fn jitter(img: &mut Image, policy: &AugmentPolicy, rng: &mut impl Rng) {
    let factor = |s: f64, rng: &mut dyn rand::RngCore| -> f32 {
        if s > 0.0 {
            rng.random_range((1.0 - s).max(0.0)..=1.0 + s) as f32
        } else {
            1.0
        }
    };
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 => {
                let b = factor(policy.brightness, rng);
                img.map_pixels(|p| p.map(|v| v * b));
            }
            1 => {
                let c = factor(policy.contrast, rng);
                let n = (img.width * img.height) as f32;
                let mean = img.data.chunks_exact(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f32>() / n;
                img.map_pixels(|p| p.map(|v| (v - mean) * c + mean));
            }
            2 => {
                let s = factor(policy.saturation, rng);
                img.map_pixels(|p| {
                    let l = luma(p);
                    p.map(|v| (v - l) * s + l)
                });
            }
            _ => {
                if policy.hue > 0.0 {
                    let shift = rng.random_range(-policy.hue..=policy.hue) as f32;
                    img.map_pixels(|p| {
                        let [h, s, v] = rgb_to_hsv(p);
                        hsv_to_rgb([h + shift, s, v])
                    });
                }
            }
        }
    }
}

fn gaussian_blur(img: &mut Image, sigma: f64, kernel: usize) {
    let r = (kernel / 2) as isize;
    let weights: Vec<f32> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() as f32).collect();
    let total: f32 = weights.iter().sum();
    let weights: Vec<f32> = weights.iter().map(|w| w / total).collect();
    let (w, h) = (img.width as isize, img.height as isize);
    // reflect padding without repeating the edge pixel
    let reflect = |i: isize, n: isize| -> usize {
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (k, &wt) in weights.iter().enumerate() {
                    let d = k as isize - r;
                    let (sx, sy) = if horizontal {
                        (reflect(x + d, w), y as usize)
                    } else {
                        (x as usize, reflect(y + d, h))
                    };
                    let i = (sy * w as usize + sx) * 3;
                    for ch in 0..3 {
                        acc[ch] += wt * src[i + ch];
                    }
                }
                let o = (y as usize * w as usize + x as usize) * 3;
                out[o..o + 3].copy_from_slice(&acc);
            }
        }
        out
    };
    let tmp = pass(&img.data, true);
    img.data = pass(&tmp, false);
    img.clamp();
}

/// Applies the policy to one image. Output is `output_size` square with
/// values in `[0, 1]`.
pub fn apply_policy(img: &Image, policy: &AugmentPolicy, rng: &mut impl Rng) -> Result<Image, AugmentError> {
    policy.validate()?;
    if img.width.min(img.height) < policy.min_input_size {
        return Err(AugmentError::TooSmall {
            width: img.width,
            height: img.height,
            min: policy.min_input_size,
        });
    }
    let size = policy.output_size;
    let mut out = if rng.random_bool(policy.crop_p) {
        let (x0, y0, w, h) = random_crop_box(img, policy, rng);
        img.crop_resize(x0, y0, w, h, size, size)
    } else {
        img.resize(size, size)
    };
    if rng.random_bool(policy.flip_p) {
        out.hflip();
    }
    if rng.random_bool(policy.jitter_p) {
        jitter(&mut out, policy, rng);
    }
    if rng.random_bool(policy.grayscale_p) {
        out.map_pixels(|p| [luma(p); 3]);
    }
    if rng.random_bool(policy.blur_p) {
        let [lo, hi] = policy.blur_sigma;
        let sigma = rng.random_range(lo..=hi);
        gaussian_blur(&mut out, sigma, policy.blur_kernel());
    }
    Ok(out)
}

/// The three augmented views of one batch, in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewTriple {
    pub a: Vec<Image>,
    pub b: Vec<Image>,
    pub c: Vec<Image>,
}

/// Draws three independent views of every image. Image `i` of view `v`
/// uses the substream `(seed, stream, v, i)`, where `stream` identifies the
/// batch (for example epoch and batch index folded together by the caller).
pub fn make_views(
    batch: &[Image],
    policy: &AugmentPolicy,
    seed: u64,
    stream: &[u64],
) -> Result<ViewTriple, AugmentError> {
    if batch.is_empty() {
        return Err(AugmentError::EmptyBatch);
    }
    let view = |v: u64| -> Result<Vec<Image>, AugmentError> {
        batch
            .iter()
            .enumerate()
            .map(|(i, img)| {
                let mut parts = stream.to_vec();
                parts.extend([v, i as u64]);
                apply_policy(img, policy, &mut substream(seed, &parts))
            })
            .collect()
    };
    Ok(ViewTriple {
        a: view(0)?,
        b: view(1)?,
        c: view(2)?,
    })
}

/// Stacks same-sized images into an `N x H x W x 3` tensor.
pub fn images_to_tensor<T: Real>(images: &[Image]) -> Tensor<T> {
    let (w, h) = images.first().map_or((0, 0), |i| (i.width, i.height));
    let mut data = Vec::with_capacity(images.len() * w * h * 3);
    for img in images {
        assert_eq!((img.width, img.height), (w, h), "images_to_tensor: mixed sizes");
        data.extend(img.data.iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(vec![images.len(), h, w, 3], data).expect("consistent sizes")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noisy(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_policy_resizes_only() {
        let img = noisy(16, 16, 1);
        let out = apply_policy(&img, &AugmentPolicy::identity(16), &mut substream(0, &[])).unwrap();
        assert_eq!(out, img);
        let big = noisy(32, 24, 2);
        let out = apply_policy(&big, &AugmentPolicy::identity(16), &mut substream(0, &[])).unwrap();
        assert_eq!(out, big.resize(16, 16));
    }

    #[test]
    fn resize_preserves_constant_images_and_halves_exactly() {
        let c = Image::filled(13, 7, [0.2, 0.5, 0.9]);
        let r = c.resize(16, 16);
        assert!(r.data().chunks(3).all(|p| (p[0] - 0.2).abs() < 1e-6 && (p[2] - 0.9).abs() < 1e-6));
        // 2x downsample with center alignment averages 2x2 blocks
        let img = noisy(4, 4, 3);
        let half = img.resize(2, 2);
        for ch in 0..3 {
            let avg = (img.pixel(0, 0)[ch] + img.pixel(1, 0)[ch] + img.pixel(0, 1)[ch] + img.pixel(1, 1)[ch]) / 4.0;
            assert!((half.pixel(0, 0)[ch] - avg).abs() < 1e-6);
        }
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let policy = AugmentPolicy {
            grayscale_p: 1.0,
            ..AugmentPolicy::identity(16)
        };
        let out = apply_policy(&noisy(16, 16, 4), &policy, &mut substream(1, &[])).unwrap();
        assert!(out.data().chunks(3).all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn flip_is_an_involution() {
        let img = noisy(5, 3, 5);
        let mut f = img.clone();
        f.hflip();
        assert_eq!(f.pixel(0, 1), img.pixel(4, 1));
        f.hflip();
        assert_eq!(f, img);
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..1000 {
            let p = [rng.random_range(0.0..1.0f32), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let back = hsv_to_rgb(rgb_to_hsv(p));
            for ch in 0..3 {
                assert!((back[ch] - p[ch]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn blur_keeps_constant_images_and_mass() {
        let mut c = Image::filled(9, 9, [0.3, 0.6, 0.1]);
        gaussian_blur(&mut c, 1.5, 5);
        assert!(c.data().chunks(3).all(|p| (p[1] - 0.6).abs() < 1e-6));
        let mut img = noisy(9, 9, 7);
        let before: f32 = img.data().iter().sum();
        gaussian_blur(&mut img, 0.8, 3);
        let after: f32 = img.data().iter().sum();
        // reflect padding keeps the total close, not exact
        assert!((before - after).abs() / before < 0.05);
    }

    #[test]
    fn too_small_and_bad_policy_are_errors() {
        let tiny = noisy(4, 4, 8);
        assert!(matches!(
            apply_policy(&tiny, &AugmentPolicy::default(), &mut substream(0, &[])),
            Err(AugmentError::TooSmall { .. })
        ));
        let bad = AugmentPolicy {
            flip_p: 1.5,
            ..AugmentPolicy::default()
        };
        assert!(matches!(
            apply_policy(&noisy(16, 16, 1), &bad, &mut substream(0, &[])),
            Err(AugmentError::Policy(_))
        ));
        assert_eq!(make_views(&[], &AugmentPolicy::default(), 0, &[]), Err(AugmentError::EmptyBatch));
    }

    #[test]
    fn views_replay_and_differ() {
        let batch: Vec<Image> = (0..4).map(|s| noisy(16, 16, s)).collect();
        let p = AugmentPolicy::default();
        let v1 = make_views(&batch, &p, 42, &[0, 0]).unwrap();
        let v2 = make_views(&batch, &p, 42, &[0, 0]).unwrap();
        assert_eq!(v1, v2);
        let mut distinct = 0;
        for draw in 0..100u64 {
            let v = make_views(&batch[..1], &p, 42, &[draw]).unwrap();
            if v.a[0] != v.b[0] && v.b[0] != v.c[0] && v.a[0] != v.c[0] {
                distinct += 1;
            }
        }
        assert!(distinct >= 99, "{distinct}");

        let id = make_views(&batch[..1], &AugmentPolicy::identity(16), 3, &[]).unwrap();
        assert_eq!(id.a, id.b);
        assert_eq!(id.b, id.c);
    }

    #[test]
    fn tensor_layout_is_nhwc() {
        let imgs = vec![noisy(3, 2, 1), noisy(3, 2, 2)];
        let t: Tensor<f64> = images_to_tensor(&imgs);
        assert_eq!(t.shape(), &[2, 2, 3, 3]);
        assert_eq!(t.data()[18 + 5] as f32, imgs[1].data()[5]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn outputs_stay_in_range_with_fixed_shape(seed in 0u64..10_000, w in 8usize..40, h in 8usize..40) {
                let img = noisy(w, h, seed);
                let policy = AugmentPolicy {
                    jitter_p: 1.0,
                    blur_p: 0.7,
                    brightness: 1.0,
                    contrast: 1.0,
                    saturation: 1.0,
                    hue: 0.5,
                    ..AugmentPolicy::default()
                };
                let out = apply_policy(&img, &policy, &mut substream(seed, &[1])).unwrap();
                prop_assert_eq!((out.width(), out.height()), (16, 16));
                prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
