//! Stochastic image transforms on normalised `(3, H, W)` tensors.
//!
//! Transforms run in list order. Colour operations work on de-normalised
//! `[0, 1]` values and clamp to that range; the grey conversion and erasing
//! act directly in normalised space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Normalization;
use crate::error::{Error, Result};
use crate::nn::{resize_bilinear, Tensor3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransformSpec {
    /// Random area/aspect crop, resized back to the input size.
    ResizedCrop { scale: [f64; 2], ratio: [f64; 2] },
    HorizontalFlip { p: f64 },
    /// Brightness/contrast/saturation factors drawn from `[1 - s, 1 + s]`,
    /// hue shift from `[-hue, hue]` (fraction of a turn).
    ColorJitter {
        p: f64,
        brightness: f64,
        contrast: f64,
        saturation: f64,
        hue: f64,
    },
    Grayscale { p: f64 },
    /// Separable Gaussian, kernel size ≈ `kernel_fraction × side` (odd).
    GaussianBlur { p: f64, sigma: [f64; 2], kernel_fraction: f64 },
    /// One rectangle of `area` fraction and `ratio` aspect set to `fill`.
    RandomErase {
        p: f64,
        area: [f64; 2],
        ratio: [f64; 2],
        #[serde(default)]
        fill: f32,
    },
}

impl TransformSpec {
    pub fn is_geometric(&self) -> bool {
        matches!(self, Self::ResizedCrop { .. } | Self::HorizontalFlip { .. })
    }

    fn name(&self) -> &'static str {
        match self {
            Self::ResizedCrop { .. } => "resized_crop",
            Self::HorizontalFlip { .. } => "horizontal_flip",
            Self::ColorJitter { .. } => "color_jitter",
            Self::Grayscale { .. } => "grayscale",
            Self::GaussianBlur { .. } => "gaussian_blur",
            Self::RandomErase { .. } => "random_erase",
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Policy(format!("{}: {msg}", self.name())));
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        let range = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        match *self {
            Self::ResizedCrop { scale, ratio } => {
                if !range(scale) {
                    return bad(format!("scale range {scale:?} is degenerate (max < min)"));
                }
                if !(scale[0] > 0.0 && scale[1] <= 1.0) {
                    return bad(format!("scale range {scale:?} must lie in (0, 1]"));
                }
                if !range(ratio) || ratio[0] <= 0.0 {
                    return bad(format!("aspect ratio range {ratio:?} is invalid"));
                }
            }
            Self::HorizontalFlip { p } | Self::Grayscale { p } => {
                if !prob(p) {
                    return bad(format!("probability {p} outside [0, 1]"));
                }
            }
            Self::ColorJitter {
                p,
                brightness,
                contrast,
                saturation,
                hue,
            } => {
                if !prob(p) {
                    return bad(format!("probability {p} outside [0, 1]"));
                }
                for s in [brightness, contrast, saturation] {
                    if !(0.0..=1.0).contains(&s) {
                        return bad(format!("strength {s} outside [0, 1]"));
                    }
                }
                if !(0.0..=0.5).contains(&hue) {
                    return bad(format!("hue {hue} outside [0, 0.5]"));
                }
            }
            Self::GaussianBlur {
                p,
                sigma,
                kernel_fraction,
            } => {
                if !prob(p) {
                    return bad(format!("probability {p} outside [0, 1]"));
                }
                if !range(sigma) || sigma[0] < 0.0 {
                    return bad(format!("sigma range {sigma:?} is invalid"));
                }
                if !(kernel_fraction > 0.0 && kernel_fraction <= 1.0) {
                    return bad(format!("kernel fraction {kernel_fraction} outside (0, 1]"));
                }
            }
            Self::RandomErase { p, area, ratio, fill } => {
                if !prob(p) {
                    return bad(format!("probability {p} outside [0, 1]"));
                }
                if !range(area) || area[0] <= 0.0 || area[1] > 1.0 {
                    return bad(format!("area range {area:?} must lie in (0, 1]"));
                }
                if !range(ratio) || ratio[0] <= 0.0 {
                    return bad(format!("aspect ratio range {ratio:?} is invalid"));
                }
                if !fill.is_finite() {
                    return bad("fill must be finite".into());
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub transforms: Vec<TransformSpec>,
    #[serde(default)]
    pub normalization: Normalization,
}

impl AugmentationPolicy {
    /// Crop/resize, flip, colour distortion, grey, blur, erasing.
    pub fn ssl_default() -> Self {
        Self {
            transforms: vec![
                TransformSpec::ResizedCrop {
                    scale: [0.08, 1.0],
                    ratio: [3.0 / 4.0, 4.0 / 3.0],
                },
                TransformSpec::HorizontalFlip { p: 0.5 },
                TransformSpec::ColorJitter {
                    p: 0.8,
                    brightness: 0.8,
                    contrast: 0.8,
                    saturation: 0.8,
                    hue: 0.2,
                },
                TransformSpec::Grayscale { p: 0.2 },
                TransformSpec::GaussianBlur {
                    p: 0.5,
                    sigma: [0.1, 2.0],
                    kernel_fraction: 0.1,
                },
                TransformSpec::RandomErase {
                    p: 0.25,
                    area: [0.02, 0.2],
                    ratio: [0.3, 3.3],
                    fill: 0.0,
                },
            ],
            normalization: Normalization::default(),
        }
    }

    /// Grey, blur, erasing: pixel-value transforms only.
    pub fn detector_default() -> Self {
        let mut p = Self::ssl_default();
        p.transforms.retain(|t| {
            matches!(
                t,
                TransformSpec::Grayscale { .. } | TransformSpec::GaussianBlur { .. } | TransformSpec::RandomErase { .. }
            )
        });
        p
    }

    /// The default transforms with gentler geometry and colour: crop scale
    /// `[0.6, 1]` and half-strength jitter. Used for the 64-image desk runs.
    pub fn ssl_desk() -> Self {
        let mut p = Self::ssl_default();
        for t in &mut p.transforms {
            match t {
                TransformSpec::ResizedCrop { scale, .. } => *scale = [0.6, 1.0],
                TransformSpec::ColorJitter {
                    brightness,
                    contrast,
                    saturation,
                    hue,
                    ..
                } => {
                    *brightness = 0.4;
                    *contrast = 0.4;
                    *saturation = 0.4;
                    *hue = 0.1;
                }
                _ => {}
            }
        }
        p
    }

    pub fn identity() -> Self {
        Self {
            transforms: Vec::new(),
            normalization: Normalization::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.normalization.validate()?;
        self.transforms.iter().try_for_each(TransformSpec::validate)
    }

    /// Detector policies must leave the box valid, so geometry is rejected.
    pub fn validate_detector(&self) -> Result<()> {
        self.validate()?;
        if let Some(t) = self.transforms.iter().find(|t| t.is_geometric()) {
            return Err(Error::Policy(format!(
                "{} is geometric and would move the ground-truth box",
                t.name()
            )));
        }
        Ok(())
    }

    /// One draw of the whole policy. Assumes the policy has been validated.
    pub fn apply<R: Rng>(&self, image: &Tensor3, rng: &mut R) -> Tensor3 {
        let mut x = image.clone();
        for t in &self.transforms {
            x = apply_one(t, x, self.normalization, rng);
        }
        x
    }
}

/// Two independently augmented views of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view_a: Tensor3,
    pub view_b: Tensor3,
}

pub fn ssl_view_pair<R: Rng>(image: &Tensor3, policy: &AugmentationPolicy, rng: &mut R) -> Result<ViewPair> {
    policy.validate()?;
    check_image(image)?;
    let view_a = policy.apply(image, rng);
    let view_b = policy.apply(image, rng);
    Ok(ViewPair { view_a, view_b })
}

pub fn detector_augment<R: Rng>(image: &Tensor3, policy: &AugmentationPolicy, rng: &mut R) -> Result<Tensor3> {
    policy.validate_detector()?;
    check_image(image)?;
    Ok(policy.apply(image, rng))
}

fn check_image(image: &Tensor3) -> Result<()> {
    if image.channels != 3 || image.height == 0 || image.width == 0 {
        return Err(Error::Contract(format!(
            "augmentation expects a (3, H, W) image, got {:?}",
            image.shape()
        )));
    }
    Ok(())
}

fn apply_one<R: Rng>(t: &TransformSpec, x: Tensor3, norm: Normalization, rng: &mut R) -> Tensor3 {
    match *t {
        TransformSpec::ResizedCrop { scale, ratio } => resized_crop(&x, scale, ratio, rng),
        TransformSpec::HorizontalFlip { p } => {
            if rng.gen_bool(p) {
                hflip(x)
            } else {
                x
            }
        }
        TransformSpec::ColorJitter {
            p,
            brightness,
            contrast,
            saturation,
            hue,
        } => {
            if !rng.gen_bool(p) {
                return x;
            }
            let b = factor(rng, brightness);
            let c = factor(rng, contrast);
            let s = factor(rng, saturation);
            let h = if hue > 0.0 { rng.gen_range(-hue..=hue) } else { 0.0 };
            color_jitter(x, norm, b as f32, c as f32, s as f32, h as f32)
        }
        TransformSpec::Grayscale { p } => {
            if rng.gen_bool(p) {
                grayscale(x)
            } else {
                x
            }
        }
        TransformSpec::GaussianBlur {
            p,
            sigma,
            kernel_fraction,
        } => {
            if !rng.gen_bool(p) {
                return x;
            }
            let s = if sigma[0] < sigma[1] { rng.gen_range(sigma[0]..=sigma[1]) } else { sigma[0] };
            gaussian_blur(&x, s, kernel_size(x.height.min(x.width), kernel_fraction))
        }
        TransformSpec::RandomErase { p, area, ratio, fill } => {
            if rng.gen_bool(p) {
                random_erase(x, area, ratio, fill, rng)
            } else {
                x
            }
        }
    }
}

fn factor<R: Rng>(rng: &mut R, strength: f64) -> f64 {
    if strength > 0.0 {
        rng.gen_range((1.0 - strength).max(0.0)..=1.0 + strength)
    } else {
        1.0
    }
}

fn uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] < r[1] {
        rng.gen_range(r[0]..=r[1])
    } else {
        r[0]
    }
}

fn log_uniform<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    uniform(rng, [r[0].ln(), r[1].ln()]).exp()
}

fn resized_crop<R: Rng>(x: &Tensor3, scale: [f64; 2], ratio: [f64; 2], rng: &mut R) -> Tensor3 {
    let (h, w) = (x.height, x.width);
    let area = (h * w) as f64;
    for _ in 0..10 {
        let target = area * uniform(rng, scale);
        let r = log_uniform(rng, ratio);
        let cw = (target * r).sqrt().round() as usize;
        let ch = (target / r).sqrt().round() as usize;
        if cw > 0 && cw <= w && ch > 0 && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return resize_bilinear(x, (left as f32, top as f32, cw as f32, ch as f32), h, w);
        }
    }
    // Fall back to the largest centred crop within the ratio bounds.
    let in_ratio = w as f64 / h as f64;
    let (cw, ch) = if in_ratio < ratio[0] {
        (w, (w as f64 / ratio[0]).round() as usize)
    } else if in_ratio > ratio[1] {
        ((h as f64 * ratio[1]).round() as usize, h)
    } else {
        (w, h)
    };
    let top = (h - ch) / 2;
    let left = (w - cw) / 2;
    resize_bilinear(x, (left as f32, top as f32, cw as f32, ch as f32), h, w)
}

fn hflip(mut x: Tensor3) -> Tensor3 {
    let w = x.width;
    for row in x.data.chunks_mut(w) {
        row.reverse();
    }
    x
}

/// ITU-R 601 luma replicated into all three channels.
pub fn grayscale(mut x: Tensor3) -> Tensor3 {
    let n = x.plane_len();
    for i in 0..n {
        let l = 0.299 * x.data[i] + 0.587 * x.data[n + i] + 0.114 * x.data[2 * n + i];
        x.data[i] = l;
        x.data[n + i] = l;
        x.data[2 * n + i] = l;
    }
    x
}

fn color_jitter(mut x: Tensor3, norm: Normalization, b: f32, c: f32, s: f32, h: f32) -> Tensor3 {
    let n = x.plane_len();
    x.data.iter_mut().for_each(|v| *v = norm.invert(*v));
    let clamp = |v: f32| v.clamp(0.0, 1.0);
    if b != 1.0 {
        x.data.iter_mut().for_each(|v| *v = clamp(*v * b));
    }
    if c != 1.0 {
        let mean = (0..n)
            .map(|i| 0.299 * x.data[i] + 0.587 * x.data[n + i] + 0.114 * x.data[2 * n + i])
            .sum::<f32>()
            / n as f32;
        x.data.iter_mut().for_each(|v| *v = clamp((*v - mean) * c + mean));
    }
    if s != 1.0 {
        for i in 0..n {
            let g = 0.299 * x.data[i] + 0.587 * x.data[n + i] + 0.114 * x.data[2 * n + i];
            for ch in 0..3 {
                let v = &mut x.data[ch * n + i];
                *v = clamp((*v - g) * s + g);
            }
        }
    }
    if h != 0.0 {
        for i in 0..n {
            let (hh, ss, vv) = rgb_to_hsv(x.data[i], x.data[n + i], x.data[2 * n + i]);
            let (r, g, bl) = hsv_to_rgb((hh + h).rem_euclid(1.0), ss, vv);
            x.data[i] = r;
            x.data[n + i] = g;
            x.data[2 * n + i] = bl;
        }
    }
    x.data.iter_mut().for_each(|v| *v = norm.apply(*v));
    x
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (i as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn kernel_size(side: usize, fraction: f64) -> usize {
    let k = ((side as f64 * fraction) as usize).max(1);
    if k % 2 == 0 {
        k + 1
    } else {
        k
    }
}

fn gaussian_blur(x: &Tensor3, sigma: f64, ksize: usize) -> Tensor3 {
    let r = (ksize / 2) as isize;
    let sigma = sigma.max(1e-6);
    let mut kern: Vec<f32> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let total: f32 = kern.iter().sum();
    kern.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (x.height as isize, x.width as isize);
    let mut tmp = Tensor3::zeros(x.channels, x.height, x.width);
    let mut out = Tensor3::zeros(x.channels, x.height, x.width);
    for c in 0..x.channels {
        let src = x.plane(c);
        let dst = tmp.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kern.iter().enumerate() {
                    let sx = (xx + k as isize - r).clamp(0, w - 1);
                    acc += kv * src[(y * w + sx) as usize];
                }
                dst[(y * w + xx) as usize] = acc;
            }
        }
        let src = tmp.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kern.iter().enumerate() {
                    let sy = (y + k as isize - r).clamp(0, h - 1);
                    acc += kv * src[(sy * w + xx) as usize];
                }
                dst[(y * w + xx) as usize] = acc;
            }
        }
    }
    out
}

fn random_erase<R: Rng>(mut x: Tensor3, area: [f64; 2], ratio: [f64; 2], fill: f32, rng: &mut R) -> Tensor3 {
    let (h, w) = (x.height, x.width);
    let total = (h * w) as f64;
    for _ in 0..10 {
        let target = total * uniform(rng, area);
        let r = log_uniform(rng, ratio);
        let eh = (target * r).sqrt().round() as usize;
        let ew = (target / r).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh >= h || ew >= w {
            continue;
        }
        let top = rng.gen_range(0..=h - eh);
        let left = rng.gen_range(0..=w - ew);
        for c in 0..x.channels {
            for y in top..top + eh {
                for xx in left..left + ew {
                    *x.at_mut(c, y, xx) = fill;
                }
            }
        }
        return x;
    }
    x
}
