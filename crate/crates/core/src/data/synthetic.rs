//! Synthetic stand-in for chest radiographs: a bright filled ellipse (class 1)
//! on a shaded noisy background, and in half the images a brighter crescent
//! straddling the ellipse boundary (class 2, drawn over class 1).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{episode_rng, Dataset, Sample};
use crate::error::Result;
use crate::numerics::Tensor;
use crate::prototype::SegmentationMask;

pub const CLASS_NAMES: [&str; 2] = ["heart", "la_enlargement"];

/// Standard deviation of the additive pixel noise.
pub const NOISE_SIGMA: f64 = 0.05;

/// Geometry of one synthetic image, in pixels. A pixel `(y, x)` is tested at
/// its centre `(y + 0.5, x + 0.5)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeLayout {
    pub size: usize,
    pub center: (f64, f64),
    pub semi_axes: (f64, f64),
    pub rotation: f64,
    pub crescent: Option<Crescent>,
}

/// Disk of `radius` at `center` minus the same disk moved to `cut_center`.
#[derive(Clone, Debug, PartialEq)]
pub struct Crescent {
    pub center: (f64, f64),
    pub cut_center: (f64, f64),
    pub radius: f64,
}

impl ShapeLayout {
    fn sample(rng: &mut impl Rng, size: usize, with_crescent: bool) -> Self {
        let s = size as f64;
        let center = (rng.random_range(0.42..0.58) * s, rng.random_range(0.42..0.58) * s);
        let semi_axes = (rng.random_range(0.17..0.30) * s, rng.random_range(0.17..0.30) * s);
        let rotation = rng.random_range(0.0..std::f64::consts::PI);
        let mut layout = Self {
            size,
            center,
            semi_axes,
            rotation,
            crescent: None,
        };
        if with_crescent {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let on_boundary = layout.boundary_point(theta);
            let radius = rng.random_range(0.08..0.11) * s;
            // inward unit direction at the boundary point
            let (dy, dx) = (center.0 - on_boundary.0, center.1 - on_boundary.1);
            let len = dy.hypot(dx).max(f64::EPSILON);
            let (ny, nx) = (dy / len, dx / len);
            // after the cut the band runs from 0.2r inside to 0.4r outside the boundary
            let disk = (on_boundary.0 + 0.6 * radius * ny, on_boundary.1 + 0.6 * radius * nx);
            layout.crescent = Some(Crescent {
                center: disk,
                cut_center: (disk.0 + 0.6 * radius * ny, disk.1 + 0.6 * radius * nx),
                radius,
            });
        }
        layout
    }

    fn boundary_point(&self, theta: f64) -> (f64, f64) {
        let (a, b) = self.semi_axes;
        let (u, v) = (a * theta.cos(), b * theta.sin());
        let (sin, cos) = self.rotation.sin_cos();
        (self.center.0 + u * sin + v * cos, self.center.1 + u * cos - v * sin)
    }

    pub fn in_ellipse(&self, y: usize, x: usize) -> bool {
        let (py, px) = (y as f64 + 0.5 - self.center.0, x as f64 + 0.5 - self.center.1);
        let (sin, cos) = self.rotation.sin_cos();
        let u = px * cos + py * sin;
        let v = -px * sin + py * cos;
        let (a, b) = self.semi_axes;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    }

    pub fn in_crescent(&self, y: usize, x: usize) -> bool {
        let Some(c) = &self.crescent else {
            return false;
        };
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let inside = |(cy, cx): (f64, f64)| (py - cy).powi(2) + (px - cx).powi(2) <= c.radius * c.radius;
        inside(c.center) && !inside(c.cut_center)
    }

    pub fn label(&self, y: usize, x: usize) -> u8 {
        if self.in_crescent(y, x) {
            2
        } else if self.in_ellipse(y, x) {
            1
        } else {
            0
        }
    }

    pub fn mask(&self) -> SegmentationMask {
        SegmentationMask::from_fn(self.size, self.size, |y, x| self.label(y, x))
    }
}

/// Tunables of the generator. The defaults are what `generate_synthetic` uses.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticParams {
    pub image_size: usize,
    pub background: (f64, f64),
    /// Peak-to-peak amplitude of the linear background shading.
    pub shading: f64,
    pub ellipse: (f64, f64),
    pub crescent: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            image_size: super::IMAGE_SIZE,
            background: (0.15, 0.35),
            shading: 0.2,
            ellipse: (0.5, 0.65),
            crescent: (0.75, 0.9),
            noise_sigma: NOISE_SIGMA,
        }
    }
}

impl SyntheticParams {
    pub fn with_size(image_size: usize) -> Self {
        Self {
            image_size,
            ..Self::default()
        }
    }

    /// Shape geometry of every sample; exactly `count / 2` carry a crescent.
    pub fn layouts(&self, count: usize, seed: u64) -> Vec<ShapeLayout> {
        let mut with_crescent: Vec<bool> = (0..count).map(|i| i < count / 2).collect();
        with_crescent.shuffle(&mut episode_rng(seed, 0));
        with_crescent
            .into_iter()
            .enumerate()
            .map(|(i, c)| ShapeLayout::sample(&mut episode_rng(seed, 1 + 2 * i as u64), self.image_size, c))
            .collect()
    }

    pub fn generate(&self, count: usize, seed: u64) -> Result<Dataset> {
        assert!(count >= 1, "at least one sample is required");
        let noise = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
        let s = self.image_size;
        let samples = self
            .layouts(count, seed)
            .into_iter()
            .enumerate()
            .map(|(i, layout)| {
                let mut rng = episode_rng(seed, 2 + 2 * i as u64);
                let bg = rng.random_range(self.background.0..self.background.1);
                let (gy, gx) = (
                    rng.random_range(-0.5..0.5) * self.shading,
                    rng.random_range(-0.5..0.5) * self.shading,
                );
                let fg = rng.random_range(self.ellipse.0..self.ellipse.1);
                let cr = rng.random_range(self.crescent.0..self.crescent.1);
                let mask = layout.mask();
                let image = Tensor::from_fn(&[1, s, s], |p| {
                    let (y, x) = (p / s, p % s);
                    let base = match mask.get(y, x) {
                        0 => bg + gy * (y as f64 / s as f64 - 0.5) + gx * (x as f64 / s as f64 - 0.5),
                        1 => fg,
                        _ => cr,
                    };
                    let v = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    super::io::from_level((v * 255.0).round() as u8)
                });
                Sample::new(format!("synth_{i:04}"), image, mask)
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, CLASS_NAMES.iter().map(|c| c.to_string()).collect())
    }
}

/// Seeded synthetic dataset at `image_size × image_size`. Pixel values are
/// multiples of 1/255 so the dataset survives an 8-bit PNG round trip.
pub fn generate_synthetic(count: usize, seed: u64, image_size: usize) -> Result<Dataset> {
    SyntheticParams::with_size(image_size).generate(count, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_the_samples_show_the_crescent() {
        let d = generate_synthetic(10, 7, 64).unwrap();
        assert_eq!(d.len(), 10);
        assert_eq!(d.with_class(1).len(), 10);
        assert_eq!(d.with_class(2).len(), 5);
        let odd = generate_synthetic(7, 7, 64).unwrap();
        assert_eq!(odd.with_class(2).len(), 3);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(4, 3, 48).unwrap();
        let b = generate_synthetic(4, 3, 48).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(4, 4, 48).unwrap());
    }

    #[test]
    fn heart_area_stays_within_bounds() {
        for seed in 0..100 {
            for layout in SyntheticParams::default().layouts(2, seed) {
                let mask = layout.mask();
                let frac = mask.labels().iter().filter(|&&l| l == 1).count() as f64 / mask.labels().len() as f64;
                assert!((0.05..=0.40).contains(&frac), "seed {seed}: {frac}");
            }
        }
    }

    #[test]
    fn crescent_straddles_the_ellipse_boundary() {
        for layout in SyntheticParams::with_size(96).layouts(20, 11) {
            let Some(_) = layout.crescent else { continue };
            let (mut inside, mut outside) = (0, 0);
            for y in 0..96 {
                for x in 0..96 {
                    if layout.in_crescent(y, x) {
                        if layout.in_ellipse(y, x) {
                            inside += 1;
                        } else {
                            outside += 1;
                        }
                    }
                }
            }
            assert!(inside > 0 && outside > 0);
        }
    }

    #[test]
    fn crescent_survives_stride_8_sampling_at_224() {
        let params = SyntheticParams::default();
        for seed in 0..20 {
            for layout in params.layouts(10, seed).iter().filter(|l| l.crescent.is_some()) {
                let visible = layout.mask().indicator(2, 28, 28).into_iter().any(|b| b);
                assert!(visible, "seed {seed}: {layout:?}");
            }
        }
    }

    #[test]
    fn pixel_values_are_8_bit_levels() {
        let d = generate_synthetic(2, 1, 32).unwrap();
        for s in d.samples() {
            for &v in s.image.data() {
                let q = v * 255.0;
                assert!((q - q.round()).abs() < 1e-3);
            }
        }
    }
}
