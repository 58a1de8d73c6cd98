//! The six common-corruption transforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::imaging::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CorruptionSpec {
    /// Adds i.i.d. `N(0, sigma²)` noise per value.
    GaussianNoise {
        sigma: f64,
    },
    /// Separable normalized Gaussian, radius `⌈2·sigma⌉`, reflect padding.
    GaussianBlur {
        sigma: f64,
    },
    Brightness {
        delta: f64,
    },
    /// `x → 0.5 + factor·(x − 0.5)`.
    Contrast {
        factor: f64,
    },
    VerticalFlip,
    HorizontalFlip,
}

impl CorruptionSpec {
    /// The standard six at default severities.
    pub fn defaults() -> Vec<CorruptionSpec> {
        vec![
            CorruptionSpec::GaussianNoise { sigma: 0.1 },
            CorruptionSpec::GaussianBlur { sigma: 1.0 },
            CorruptionSpec::Brightness { delta: 0.2 },
            CorruptionSpec::Contrast { factor: 0.5 },
            CorruptionSpec::VerticalFlip,
            CorruptionSpec::HorizontalFlip,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            CorruptionSpec::GaussianNoise { .. } => "gaussian_noise",
            CorruptionSpec::GaussianBlur { .. } => "gaussian_blur",
            CorruptionSpec::Brightness { .. } => "brightness",
            CorruptionSpec::Contrast { .. } => "contrast",
            CorruptionSpec::VerticalFlip => "vertical_flip",
            CorruptionSpec::HorizontalFlip => "horizontal_flip",
        }
    }
}

/// Standard normal pairs by the Box–Muller transform, `u1` taken from
/// `(0, 1]` so the logarithm stays finite.
pub(crate) struct BoxMuller {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl BoxMuller {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub(crate) fn next(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.rng.random::<f64>();
        let u2 = self.rng.random::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }
}

fn map(image: &Image, f: impl Fn(f64) -> f64) -> Image {
    let data = image
        .data()
        .iter()
        .map(|&v| f(f64::from(v)) as f32)
        .collect();
    Image::from_clamped(image.height(), image.width(), image.channels(), data).expect("same dims")
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`.
pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (2.0 * sigma).ceil().max(1.0) as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Mirror index about the pixel edge: `-1 → 0`, `n → n − 1`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn blur(image: &Image, sigma: f64) -> Image {
    if sigma <= 0.0 {
        return image.clone();
    }
    let (h, w, c) = image.dims();
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src: Vec<f64> = image.data().iter().map(|&v| f64::from(v)).collect();
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                tmp[(y * w + x) * c + ch] = k
                    .iter()
                    .enumerate()
                    .map(|(t, &g)| g * src[(y * w + reflect(x as i64 + t as i64 - r, w)) * c + ch])
                    .sum();
            }
        }
    }
    let mut out = Vec::with_capacity(src.len());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(t, &g)| g * tmp[(reflect(y as i64 + t as i64 - r, h) * w + x) * c + ch])
                    .sum();
                out.push(v as f32);
            }
        }
    }
    Image::from_clamped(h, w, c, out).expect("same dims")
}

fn flip(image: &Image, vertical: bool) -> Image {
    let (h, w, c) = image.dims();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = if vertical {
                (h - 1 - y, x)
            } else {
                (y, w - 1 - x)
            };
            out.extend_from_slice(image.pixel(sy, sx));
        }
    }
    Image::new(h, w, c, out).expect("permutation of valid pixels")
}

/// Applies one corruption; results are clamped to `[0, 1]`. `seed` only
/// matters for noise.
pub fn apply_corruption(image: &Image, spec: &CorruptionSpec, seed: u64) -> Image {
    match *spec {
        CorruptionSpec::GaussianNoise { sigma } => {
            let mut g = BoxMuller::new(seed);
            let data = image
                .data()
                .iter()
                .map(|&v| (f64::from(v) + sigma * g.next()) as f32)
                .collect();
            Image::from_clamped(image.height(), image.width(), image.channels(), data)
                .expect("same dims")
        }
        CorruptionSpec::GaussianBlur { sigma } => blur(image, sigma),
        CorruptionSpec::Brightness { delta } => map(image, |x| x + delta),
        CorruptionSpec::Contrast { factor } => map(image, |x| 0.5 + factor * (x - 0.5)),
        CorruptionSpec::VerticalFlip => flip(image, true),
        CorruptionSpec::HorizontalFlip => flip(image, false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn random_image(seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(
            9,
            7,
            3,
            (0..9 * 7 * 3).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn flips_are_involutions() {
        let img = random_image(1);
        for spec in [CorruptionSpec::HorizontalFlip, CorruptionSpec::VerticalFlip] {
            let once = apply_corruption(&img, &spec, 0);
            assert_ne!(once, img);
            assert_eq!(apply_corruption(&once, &spec, 0), img);
        }
        let h = apply_corruption(&img, &CorruptionSpec::HorizontalFlip, 0);
        assert_eq!(h.pixel(2, 0), img.pixel(2, 6));
        let v = apply_corruption(&img, &CorruptionSpec::VerticalFlip, 0);
        assert_eq!(v.pixel(0, 3), img.pixel(8, 3));
    }

    #[test]
    fn identity_parameters() {
        let img = random_image(2);
        assert_eq!(
            apply_corruption(&img, &CorruptionSpec::Contrast { factor: 1.0 }, 0),
            img
        );
        assert_eq!(
            apply_corruption(&img, &CorruptionSpec::Brightness { delta: 0.0 }, 0),
            img
        );
        assert_eq!(
            apply_corruption(&img, &CorruptionSpec::GaussianNoise { sigma: 0.0 }, 0),
            img
        );
        assert_eq!(
            apply_corruption(&img, &CorruptionSpec::GaussianBlur { sigma: 0.0 }, 0),
            img
        );
    }

    #[test]
    fn brightness_and_contrast_values() {
        let img = Image::new(1, 3, 1, vec![0.1, 0.5, 0.9]).unwrap();
        let b = apply_corruption(&img, &CorruptionSpec::Brightness { delta: 0.2 }, 0);
        let expect = [0.3f32, 0.7, 1.0];
        for (v, e) in b.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-6);
        }
        let c = apply_corruption(&img, &CorruptionSpec::Contrast { factor: 0.5 }, 0);
        for (v, e) in c.data().iter().zip([0.3f32, 0.5, 0.7]) {
            assert!((v - e).abs() < 1e-6);
        }
        let dark = apply_corruption(&img, &CorruptionSpec::Brightness { delta: -0.2 }, 0);
        assert_eq!(dark.data()[0], 0.0);
    }

    #[test]
    fn kernel_is_normalized_five_taps() {
        let k = gaussian_kernel(1.0);
        assert_eq!(k.len(), 5);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((k[0] - k[4]).abs() < 1e-18 && k[2] > k[1]);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![2, 1, 0, 0, 1, 2, 3, 4, 4, 3, 2]);
    }

    #[test]
    fn blur_preserves_mean() {
        for seed in 0..5 {
            let img = random_image(seed + 10);
            let out = apply_corruption(&img, &CorruptionSpec::GaussianBlur { sigma: 1.0 }, 0);
            let mean = |i: &Image| {
                i.data().iter().map(|&v| f64::from(v)).sum::<f64>() / i.data().len() as f64
            };
            assert!((mean(&img) - mean(&out)).abs() < 1e-3);
        }
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let img = Image::filled(6, 6, 1, 0.4).unwrap();
        let out = apply_corruption(&img, &CorruptionSpec::GaussianBlur { sigma: 1.0 }, 0);
        assert!(out.data().iter().all(|&v| (v - 0.4).abs() < 1e-6));
    }

    /// Reference Box–Muller written against the raw 64-bit stream.
    fn reference_noise(seed: u64, n: usize, sigma: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = |rng: &mut ChaCha8Rng| (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let u1 = 1.0 - unit(&mut rng);
            let u2 = unit(&mut rng);
            let r = (-2.0 * u1.ln()).sqrt();
            out.push(sigma * r * (2.0 * std::f64::consts::PI * u2).cos());
            out.push(sigma * r * (2.0 * std::f64::consts::PI * u2).sin());
        }
        out.truncate(n);
        out
    }

    #[test]
    fn noise_matches_reference_stream() {
        let img = Image::filled(8, 8, 3, 0.5).unwrap();
        let out = apply_corruption(&img, &CorruptionSpec::GaussianNoise { sigma: 0.1 }, 77);
        let reference = reference_noise(77, 8 * 8 * 3, 0.1);
        for (v, r) in out.data().iter().zip(&reference) {
            let expect = (0.5 + r).clamp(0.0, 1.0) as f32;
            assert!((v - expect).abs() < 1e-6);
        }
        let again = apply_corruption(&img, &CorruptionSpec::GaussianNoise { sigma: 0.1 }, 77);
        assert_eq!(out, again);
        let other = apply_corruption(&img, &CorruptionSpec::GaussianNoise { sigma: 0.1 }, 78);
        assert_ne!(out, other);
    }

    #[test]
    fn noise_moments() {
        let mut g = BoxMuller::new(3);
        let z: Vec<f64> = (0..20_000).map(|_| g.next()).collect();
        let mean = z.iter().sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / z.len() as f64;
        assert!(mean.abs() < 0.03 && (var - 1.0).abs() < 0.04);
    }

    #[test]
    fn outputs_stay_in_range() {
        let img = random_image(4);
        for spec in CorruptionSpec::defaults() {
            let out = apply_corruption(&img, &spec, 5);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        assert_eq!(CorruptionSpec::defaults().len(), 6);
    }
}
