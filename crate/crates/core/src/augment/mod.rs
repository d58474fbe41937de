//! Training-time augmentation, post-processing operators for robustness
//! sweeps, and the PGD baselines.
//!
//! Every operator takes and returns a single `[H, W]` image in `[-1, 1]`.

mod jpeg;
mod pgd;

pub use jpeg::{compress_blockdct, quant_steps, Q_LUMA};
pub use pgd::{pgd_latent, pgd_pixel, PgdConfig, PgdSpace};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::{normal, Rng};
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

pub(crate) fn hw<F: Real>(x: &Tensor<F>) -> Result<(usize, usize)> {
    match x.dims() {
        &[h, w] if h > 0 && w > 0 => Ok((h, w)),
        d => Err(Error::shape(format!(
            "expected a non-empty [H, W] image, got {d:?}"
        ))),
    }
}

fn clamp_unit<F: Real>(v: f64) -> F {
    F::c(v.clamp(-1.0, 1.0))
}

/// Mirror an out-of-range index back into `[0, n)` (edge pixel not repeated).
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m < n as isize { m } else { period - m }) as usize
}

/// Separable Gaussian blur with radius `ceil(3 sigma)` and reflect padding.
pub fn gaussian_blur<F: Real>(x: &Tensor<F>, sigma: f64) -> Result<Tensor<F>> {
    let (h, w) = hw(x)?;
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("blur sigma {sigma} must be >= 0")));
    }
    if sigma == 0.0 {
        return Ok(x.clone());
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let src: Vec<f64> = x.data().iter().map(|v| v.f64()).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            tmp[y * w + xx] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * src[y * w + reflect(xx as isize + k as isize - r, w)])
                .sum();
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for xx in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - r, h) * w + xx])
                .sum();
            out.push(clamp_unit(v));
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Additive Gaussian noise; `std_255` is on the 0–255 scale.
pub fn add_noise<F: Real>(x: &Tensor<F>, std_255: f64, rng: &mut Rng) -> Result<Tensor<F>> {
    hw(x)?;
    if !(std_255 >= 0.0) {
        return Err(Error::Config(format!("noise std {std_255} must be >= 0")));
    }
    if std_255 == 0.0 {
        return Ok(x.clone());
    }
    let std = std_255 * 2.0 / 255.0;
    let data = x
        .data()
        .iter()
        .map(|v| clamp_unit(v.f64() + std * normal::<f64>(rng)))
        .collect();
    Tensor::new(x.dims().to_vec(), data)
}

/// Bilinear resampling to `round(H * scale) x round(W * scale)` using
/// half-pixel centres.
pub fn resize<F: Real>(x: &Tensor<F>, scale: f64) -> Result<Tensor<F>> {
    let (h, w) = hw(x)?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Config(format!("resize scale {scale} must be > 0")));
    }
    if scale == 1.0 {
        return Ok(x.clone());
    }
    let (oh, ow) = (
        (h as f64 * scale).round() as usize,
        (w as f64 * scale).round() as usize,
    );
    if oh < 2 || ow < 2 {
        return Err(Error::Config(format!(
            "resize by {scale} gives {oh}x{ow}, below 2 pixels"
        )));
    }
    let src = |y: usize, xx: usize| x.data()[y * w + xx].f64();
    let coord = |d: usize, n: usize, scale_n: f64| {
        let s = ((d as f64 + 0.5) / scale_n - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    let (sy, sx) = (oh as f64 / h as f64, ow as f64 / w as f64);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, sy);
        for xx in 0..ow {
            let (x0, x1, fx) = coord(xx, w, sx);
            let top = src(y0, x0) * (1.0 - fx) + src(y0, x1) * fx;
            let bot = src(y1, x0) * (1.0 - fx) + src(y1, x1) * fx;
            out.push(clamp_unit(top * (1.0 - fy) + bot * fy));
        }
    }
    Tensor::new(vec![oh, ow], out)
}

pub fn flip_horizontal<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    let (h, w) = hw(x)?;
    let d = x.data();
    Tensor::new(
        vec![h, w],
        (0..h * w)
            .map(|i| d[(i / w) * w + (w - 1 - i % w)])
            .collect(),
    )
}

/// Counter-clockwise rotation by `quarter_turns * 90` degrees.
pub fn rotate90<F: Real>(x: &Tensor<F>, quarter_turns: usize) -> Result<Tensor<F>> {
    let mut cur = x.clone();
    for _ in 0..quarter_turns % 4 {
        let (h, w) = hw(&cur)?;
        let d = cur.data();
        let mut out = Vec::with_capacity(h * w);
        for y in 0..w {
            for xx in 0..h {
                out.push(d[xx * w + (w - 1 - y)]);
            }
        }
        cur = Tensor::new(vec![w, h], out)?;
    }
    Ok(cur)
}

pub fn crop<F: Real>(
    x: &Tensor<F>,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
) -> Result<Tensor<F>> {
    let (h, w) = hw(x)?;
    if ch == 0 || cw == 0 || top + ch > h || left + cw > w {
        return Err(Error::shape(format!(
            "crop {ch}x{cw}+{top}+{left} outside {h}x{w}"
        )));
    }
    let d = x.data();
    let mut out = Vec::with_capacity(ch * cw);
    for y in top..top + ch {
        out.extend_from_slice(&d[y * w + left..y * w + left + cw]);
    }
    Tensor::new(vec![ch, cw], out)
}

/// Reflect-pad on the bottom/right so that both sides are at least `min_h`, `min_w`.
pub fn reflect_pad_to<F: Real>(x: &Tensor<F>, min_h: usize, min_w: usize) -> Result<Tensor<F>> {
    let (h, w) = hw(x)?;
    let (oh, ow) = (h.max(min_h), w.max(min_w));
    if (oh, ow) == (h, w) {
        return Ok(x.clone());
    }
    let d = x.data();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = reflect(y as isize, h);
        for xx in 0..ow {
            out.push(d[sy * w + reflect(xx as isize, w)]);
        }
    }
    Tensor::new(vec![oh, ow], out)
}

/// Brightness/contrast jitter: `clamp(contrast * x + brightness)`.
pub fn jitter<F: Real>(x: &Tensor<F>, brightness: f64, contrast: f64) -> Result<Tensor<F>> {
    hw(x)?;
    if brightness == 0.0 && contrast == 1.0 {
        return Ok(x.clone());
    }
    Ok(x.map(|v| clamp_unit(contrast * v.f64() + brightness)))
}

/// Bring an arbitrary-size image to exactly `size x size`: reflect-pad if
/// smaller, random crop if larger.
pub fn fit_to_size<F: Real>(x: &Tensor<F>, size: usize, rng: &mut Rng) -> Result<Tensor<F>> {
    let padded = reflect_pad_to(x, size, size)?;
    let (h, w) = hw(&padded)?;
    if (h, w) == (size, size) {
        return Ok(padded);
    }
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    crop(&padded, top, left, size, size)
}

/// Ranges and switches for [`random_augment`]. Each enabled operator is
/// applied independently with probability `prob`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentPolicy {
    pub prob: f64,
    pub compress_quality_range: Option<[u32; 2]>,
    pub blur_sigma_range: Option<[f64; 2]>,
    pub noise_std_range: Option<[f64; 2]>,
    pub resize_scale_range: Option<[f64; 2]>,
    pub flip: bool,
    pub rotate: bool,
    /// Minimum side fraction kept by a random crop.
    pub crop_min_frac: Option<f64>,
    pub brightness_jitter: f64,
    pub contrast_jitter: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            prob: 0.1,
            compress_quality_range: Some([50, 100]),
            blur_sigma_range: Some([0.0, 3.0]),
            noise_std_range: Some([0.0, 55.0]),
            resize_scale_range: Some([0.5, 2.0]),
            flip: true,
            rotate: true,
            crop_min_frac: Some(0.75),
            brightness_jitter: 0.1,
            contrast_jitter: 0.1,
        }
    }
}

impl AugmentPolicy {
    /// Every operator disabled.
    pub fn identity() -> Self {
        Self {
            prob: 0.0,
            compress_quality_range: None,
            blur_sigma_range: None,
            noise_std_range: None,
            resize_scale_range: None,
            flip: false,
            rotate: false,
            crop_min_frac: None,
            brightness_jitter: 0.0,
            contrast_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("augment: {m}")));
        if !(0.0..=1.0).contains(&self.prob) {
            return bad(format!("prob {} outside [0, 1]", self.prob));
        }
        if let Some([lo, hi]) = self.compress_quality_range {
            if !(1 <= lo && lo <= hi && hi <= 100) {
                return bad(format!("quality range [{lo}, {hi}]"));
            }
        }
        for (name, r, min) in [
            ("blur", self.blur_sigma_range, 0.0),
            ("noise", self.noise_std_range, 0.0),
            ("resize", self.resize_scale_range, f64::MIN_POSITIVE),
        ] {
            if let Some([lo, hi]) = r {
                if !(lo >= min && lo <= hi && hi.is_finite()) {
                    return bad(format!("{name} range [{lo}, {hi}]"));
                }
            }
        }
        if let Some(f) = self.crop_min_frac {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("crop_min_frac {f} outside (0, 1]"));
            }
        }
        if !(self.brightness_jitter >= 0.0 && (0.0..1.0).contains(&self.contrast_jitter)) {
            return bad("jitter ranges".into());
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Apply the policy in fixed order: compress, blur, noise, resize,
/// geometric (flip, rotate, crop), jitter. Output size may differ from the
/// input when resizing or cropping.
pub fn random_augment<F: Real>(
    x: &Tensor<F>,
    policy: &AugmentPolicy,
    rng: &mut Rng,
) -> Result<Tensor<F>> {
    let mut cur = x.clone();
    let fire = |rng: &mut Rng| policy.prob > 0.0 && rng.random_bool(policy.prob);
    if let Some([lo, hi]) = policy.compress_quality_range {
        if fire(rng) {
            cur = compress_blockdct(&cur, rng.random_range(lo..=hi))?;
        }
    }
    if let Some(r) = policy.blur_sigma_range {
        if fire(rng) {
            cur = gaussian_blur(&cur, uniform(rng, r))?;
        }
    }
    if let Some(r) = policy.noise_std_range {
        if fire(rng) {
            let std = uniform(rng, r);
            cur = add_noise(&cur, std, rng)?;
        }
    }
    if let Some(r) = policy.resize_scale_range {
        if fire(rng) {
            let (h, w) = hw(&cur)?;
            // Keep at least 2 pixels per side.
            let floor = 2.0 / h.min(w) as f64;
            cur = resize(&cur, uniform(rng, r).max(floor))?;
        }
    }
    if policy.flip && fire(rng) {
        cur = flip_horizontal(&cur)?;
    }
    if policy.rotate && fire(rng) {
        cur = rotate90(&cur, rng.random_range(1..4))?;
    }
    if let Some(min_frac) = policy.crop_min_frac {
        if fire(rng) {
            let (h, w) = hw(&cur)?;
            let frac = uniform(rng, [min_frac, 1.0]);
            let (ch, cw) = (
                ((h as f64 * frac).round() as usize).max(1),
                ((w as f64 * frac).round() as usize).max(1),
            );
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            cur = crop(&cur, top, left, ch, cw)?;
        }
    }
    if (policy.brightness_jitter > 0.0 || policy.contrast_jitter > 0.0) && fire(rng) {
        let b = uniform(rng, [-policy.brightness_jitter, policy.brightness_jitter]);
        let c = uniform(
            rng,
            [1.0 - policy.contrast_jitter, 1.0 + policy.contrast_jitter],
        );
        cur = jitter(&cur, b, c)?;
    }
    Ok(cur)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_indexing() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn rotate_four_times_is_identity() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let r = rotate90(&x, 1).unwrap();
        assert_eq!(r.dims(), &[3, 2]);
        assert_eq!(r.data(), &[3., 6., 2., 5., 1., 4.]);
        assert_eq!(rotate90(&x, 4).unwrap(), x);
    }

    #[test]
    fn fit_pads_small_and_crops_large() {
        let mut rng = crate::rng::rng(1);
        let small = Tensor::<f64>::full(&[5, 7], 0.25);
        let f = fit_to_size(&small, 8, &mut rng).unwrap();
        assert_eq!(f.dims(), &[8, 8]);
        assert!(f.data().iter().all(|&v| v == 0.25));
        let big = Tensor::<f64>::zeros(&[20, 12]);
        assert_eq!(fit_to_size(&big, 8, &mut rng).unwrap().dims(), &[8, 8]);
    }
}
