//! Measurement normalization and diversity amplification.
//!
//! Produces the normalized snapshot `Ybar`, the per-view normalizations
//! `D1`, `D2` and their high-pass residuals `D3 = D1 - G(D1)`,
//! `D4 = D2 - G(D2)` where `G` is a Gaussian blur.

use ndarray::{Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sensing::{MaskSet, Measurement};

/// Denominator floor for the mean-mask divisions.
pub const MASK_EPS: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub radius: usize,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self {
            sigma: 5.0,
            radius: 15,
        }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !self.sigma.is_finite() {
            return Err(Error::param(format!("smoothing sigma {} must be positive", self.sigma)));
        }
        if (self.radius as f64) < 3.0 * self.sigma {
            return Err(Error::param(format!(
                "smoothing radius {} below 3*sigma = {}",
                self.radius,
                3.0 * self.sigma
            )));
        }
        Ok(())
    }

    /// Normalized 1-D Gaussian taps, length `2 * radius + 1`.
    pub fn kernel(&self) -> Vec<f64> {
        let r = self.radius as isize;
        let taps: Vec<f64> = (-r..=r)
            .map(|i| (-(i * i) as f64 / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / sum).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AmplifierConfig {
    pub smoothing: SmoothingConfig,
    /// Divide by the plain mask sum instead of the mean mask.
    #[serde(default)]
    pub normalize_by_sum: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityBundle {
    pub ybar: Array2<f32>,
    pub d1: Array2<f32>,
    pub d2: Array2<f32>,
    pub d3: Array2<f32>,
    pub d4: Array2<f32>,
    pub smoothing: SmoothingConfig,
    /// Pixels whose `Ybar` denominator fell below [`MASK_EPS`] and were zeroed.
    pub degenerate_pixels: usize,
}

impl DiversityBundle {
    /// `[D1, D2, D3, D4]` in channel order.
    pub fn diversity(&self) -> [&Array2<f32>; 4] {
        [&self.d1, &self.d2, &self.d3, &self.d4]
    }
}

/// Maps a possibly out-of-range index into `[0, n)` by symmetric reflection
/// (`d c b a | a b c d | d c b a`).
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

fn divide_by_mean_mask(y: &Array2<f32>, sum: &Array2<f32>, count: f32) -> (Array2<f32>, usize) {
    let mut degenerate = 0;
    let mut out = Array2::<f32>::zeros(y.dim());
    Zip::from(&mut out).and(y).and(sum).for_each(|o, &yv, &s| {
        let mean = s as f64 / count as f64;
        if mean < MASK_EPS as f64 {
            degenerate += 1;
            *o = 0.0;
        } else {
            *o = (yv as f64 / mean) as f32;
        }
    });
    (out, degenerate)
}

fn check_shapes(y: &Measurement, masks: &MaskSet) -> Result<()> {
    if y.y.dim() != (masks.rows(), masks.cols()) {
        return Err(Error::shape(format!(
            "measurement {:?} vs masks {}x{}",
            y.y.dim(),
            masks.rows(),
            masks.cols()
        )));
    }
    Ok(())
}

/// `Ybar = Y / max(sum_b C^b / 2B, eps)` over all 2B masks.
///
/// Returns the image and the number of zeroed degenerate pixels.
pub fn normalize_measurement(
    y: &Measurement,
    masks: &MaskSet,
    normalize_by_sum: bool,
) -> Result<(Array2<f32>, usize)> {
    check_shapes(y, masks)?;
    let sum = masks.c1().sum_axis(Axis(0)) + masks.c2().sum_axis(Axis(0));
    let count = if normalize_by_sum {
        1.0
    } else {
        2.0 * masks.frames() as f32
    };
    Ok(divide_by_mean_mask(&y.physical(), &sum, count))
}

/// Single-view variant of the normalization over `C1` only.
pub fn normalize_single_view(y: &Measurement, masks: &MaskSet) -> Result<(Array2<f32>, usize)> {
    check_shapes(y, masks)?;
    let sum = masks.c1().sum_axis(Axis(0));
    Ok(divide_by_mean_mask(&y.physical(), &sum, masks.frames() as f32))
}

/// `D1 = Y / max(sum_b C1^b / B, eps)`, likewise `D2` with `C2`.
pub fn compute_view_normalizations(y: &Measurement, masks: &MaskSet) -> Result<(Array2<f32>, Array2<f32>)> {
    check_shapes(y, masks)?;
    let phys = y.physical();
    let b = masks.frames() as f32;
    let (d1, _) = divide_by_mean_mask(&phys, &masks.c1().sum_axis(Axis(0)), b);
    let (d2, _) = divide_by_mean_mask(&phys, &masks.c2().sum_axis(Axis(0)), b);
    Ok((d1, d2))
}

/// Separable Gaussian blur with reflective boundaries.
pub fn gaussian_smooth(img: &Array2<f32>, cfg: &SmoothingConfig) -> Result<Array2<f32>> {
    cfg.validate()?;
    let k = cfg.kernel();
    let r = cfg.radius as isize;
    let (rows, cols) = img.dim();
    let mut tmp = Array2::<f64>::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for (t, w) in k.iter().enumerate() {
                let jj = reflect_index(j as isize + t as isize - r, cols);
                acc += w * img[[i, jj]] as f64;
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((rows, cols));
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for (t, w) in k.iter().enumerate() {
                let ii = reflect_index(i as isize + t as isize - r, rows);
                acc += w * tmp[[ii, j]];
            }
            out[[i, j]] = acc as f32;
        }
    }
    Ok(out)
}

/// `D3 = D1 - G(D1)`, `D4 = D2 - G(D2)`.
pub fn compute_contrast_images(
    d1: &Array2<f32>,
    d2: &Array2<f32>,
    cfg: &SmoothingConfig,
) -> Result<(Array2<f32>, Array2<f32>)> {
    if d1.dim() != d2.dim() {
        return Err(Error::shape(format!("D1 {:?} vs D2 {:?}", d1.dim(), d2.dim())));
    }
    let d3 = d1 - &gaussian_smooth(d1, cfg)?;
    let d4 = d2 - &gaussian_smooth(d2, cfg)?;
    Ok((d3, d4))
}

pub fn build_bundle(y: &Measurement, masks: &MaskSet, cfg: &AmplifierConfig) -> Result<DiversityBundle> {
    cfg.smoothing.validate()?;
    let (ybar, degenerate_pixels) = normalize_measurement(y, masks, cfg.normalize_by_sum)?;
    let (d1, d2) = compute_view_normalizations(y, masks)?;
    let (d3, d4) = compute_contrast_images(&d1, &d2, &cfg.smoothing)?;
    Ok(DiversityBundle {
        ybar,
        d1,
        d2,
        d3,
        d4,
        smoothing: cfg.smoothing,
        degenerate_pixels,
    })
}

/// Bundle for single-view operation: only `Ybar` is populated, the
/// diversity images are zero.
pub fn build_single_view_bundle(y: &Measurement, masks: &MaskSet, cfg: &AmplifierConfig) -> Result<DiversityBundle> {
    let (ybar, degenerate_pixels) = normalize_single_view(y, masks)?;
    let zero = Array2::<f32>::zeros(ybar.dim());
    Ok(DiversityBundle {
        ybar,
        d1: zero.clone(),
        d2: zero.clone(),
        d3: zero.clone(),
        d4: zero,
        smoothing: cfg.smoothing,
        degenerate_pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::MeasurementMeta;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn meas(y: Array2<f32>) -> Measurement {
        Measurement {
            y,
            meta: MeasurementMeta {
                frames_per_view: 1,
                views: 2,
                mask_ref: String::new(),
                noise_sigma: 0.0,
                normalized: false,
                scale: 1.0,
            },
        }
    }

    fn random_image(rows: usize, cols: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random::<f32>())
    }

    /// Direct 2-D convolution with the outer-product kernel.
    fn direct_smooth(img: &Array2<f32>, cfg: &SmoothingConfig) -> Array2<f64> {
        let r = cfg.radius as isize;
        let s2 = 2.0 * cfg.sigma * cfg.sigma;
        let mut norm = 0.0;
        for a in -r..=r {
            for b in -r..=r {
                norm += (-((a * a + b * b) as f64) / s2).exp();
            }
        }
        let (rows, cols) = img.dim();
        Array2::from_shape_fn((rows, cols), |(i, j)| {
            let mut acc = 0.0;
            for a in -r..=r {
                for b in -r..=r {
                    let w = (-((a * a + b * b) as f64) / s2).exp() / norm;
                    let ii = reflect_index(i as isize + a, rows);
                    let jj = reflect_index(j as isize + b, cols);
                    acc += w * img[[ii, jj]] as f64;
                }
            }
            acc
        })
    }

    #[test]
    fn reflect_index_mirrors() {
        assert_eq!(reflect_index(-1, 4), 0);
        assert_eq!(reflect_index(-2, 4), 1);
        assert_eq!(reflect_index(4, 4), 3);
        assert_eq!(reflect_index(5, 4), 2);
        assert_eq!(reflect_index(9, 4), 1);
        assert_eq!(reflect_index(-9, 4), 0);
    }

    #[test]
    fn kernel_normalized_and_config_checked() {
        let cfg = SmoothingConfig::default();
        assert!((cfg.kernel().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(SmoothingConfig { sigma: 5.0, radius: 14 }.validate().is_err());
        assert!(SmoothingConfig { sigma: 0.0, radius: 14 }.validate().is_err());
    }

    #[test]
    fn smoothing_preserves_constants() {
        let img = Array2::from_elem((9, 13), 0.37f32);
        let out = gaussian_smooth(&img, &SmoothingConfig::default()).unwrap();
        for v in out.iter() {
            assert!((v - 0.37).abs() < 1e-6);
        }
    }

    #[test]
    fn impulse_response_is_kernel() {
        let cfg = SmoothingConfig { sigma: 1.0, radius: 3 };
        let mut img = Array2::<f32>::zeros((15, 15));
        img[[7, 7]] = 1.0;
        let out = gaussian_smooth(&img, &cfg).unwrap();
        let k = cfg.kernel();
        for a in 0..7 {
            for b in 0..7 {
                let expect = k[a] * k[b];
                assert!((out[[4 + a, 4 + b]] as f64 - expect).abs() < 1e-7);
            }
        }
        assert_eq!(out[[0, 0]], 0.0);
    }

    #[test]
    fn smoothing_matches_direct_convolution() {
        let cfg = SmoothingConfig { sigma: 1.5, radius: 5 };
        let img = random_image(12, 17, 3);
        let out = gaussian_smooth(&img, &cfg).unwrap();
        let oracle = direct_smooth(&img, &cfg);
        for (a, b) in out.iter().zip(oracle.iter()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        // radius larger than the image exercises repeated reflection
        let big = SmoothingConfig::default();
        let small = random_image(6, 7, 4);
        let out = gaussian_smooth(&small, &big).unwrap();
        let oracle = direct_smooth(&small, &big);
        for (a, b) in out.iter().zip(oracle.iter()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn all_ones_masks_identity() {
        let c1 = Array3::<f32>::ones((3, 8, 8));
        let masks = MaskSet::from_primary(c1, (0, 2), 1.0, 0).unwrap();
        let y = meas(random_image(8, 8, 1));
        let bundle = build_bundle(&y, &masks, &AmplifierConfig::default()).unwrap();
        assert_eq!(bundle.ybar, y.y);
        assert_eq!(bundle.d1, y.y);
        assert_eq!(bundle.d2, y.y);
        let expect = &y.y - &gaussian_smooth(&y.y, &bundle.smoothing).unwrap();
        assert_eq!(bundle.d3, expect);
        assert_eq!(bundle.d4, expect);
        assert_eq!(bundle.degenerate_pixels, 0);
    }

    #[test]
    fn half_coverage_doubles() {
        // per-pixel temporal sum over the 2B masks is exactly B
        let mut c1 = Array3::<f32>::zeros((2, 4, 4));
        for r in 0..4 {
            for c in 0..4 {
                c1[[(r + c) % 2, r, c]] = 1.0;
            }
        }
        let masks = MaskSet::from_primary(c1, (0, 2), 0.5, 0).unwrap();
        let y = meas(random_image(4, 4, 2));
        let (ybar, _) = normalize_measurement(&y, &masks, false).unwrap();
        for (a, b) in ybar.iter().zip(y.y.iter()) {
            assert!((a - 2.0 * b).abs() < 1e-6);
        }
    }

    #[test]
    fn normalizations_match_loop_oracle() {
        let masks = MaskSet::generate(16, 16, 3, 0.5, (0, 3), 5).unwrap();
        let y = meas(random_image(16, 16, 6));
        let (ybar, degenerate) = normalize_measurement(&y, &masks, false).unwrap();
        let (d1, d2) = compute_view_normalizations(&y, &masks).unwrap();
        let mut zeroed = 0;
        for r in 0..16 {
            for c in 0..16 {
                let mut s1 = 0.0f64;
                let mut s2 = 0.0f64;
                for b in 0..3 {
                    s1 += masks.c1()[[b, r, c]] as f64;
                    s2 += masks.c2()[[b, r, c]] as f64;
                }
                let yv = y.y[[r, c]] as f64;
                let all = (s1 + s2) / 6.0;
                let e = if all < 1e-6 {
                    zeroed += 1;
                    0.0
                } else {
                    yv / all
                };
                assert!((ybar[[r, c]] as f64 - e).abs() < 1e-6);
                let e1 = if s1 / 3.0 < 1e-6 { 0.0 } else { yv / (s1 / 3.0) };
                let e2 = if s2 / 3.0 < 1e-6 { 0.0 } else { yv / (s2 / 3.0) };
                assert!((d1[[r, c]] as f64 - e1).abs() < 1e-6);
                assert!((d2[[r, c]] as f64 - e2).abs() < 1e-6);
            }
        }
        assert_eq!(zeroed, degenerate);
    }

    #[test]
    fn identical_masks_make_views_indistinguishable() {
        let masks = MaskSet::generate(8, 8, 2, 0.5, (0, 8), 1).unwrap();
        // an 8-column circular shift on 8 columns is the identity
        assert_eq!(masks.c1(), masks.c2());
        let y = meas(random_image(8, 8, 9));
        let (d1, d2) = compute_view_normalizations(&y, &masks).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn contrast_of_constant_is_zero() {
        let d = Array2::from_elem((10, 10), 3.0f32);
        let (d3, d4) = compute_contrast_images(&d, &d, &SmoothingConfig::default()).unwrap();
        assert!(d3.iter().chain(d4.iter()).all(|v| v.abs() < 1e-5));
    }

    #[test]
    fn contrast_matches_oracle_composition() {
        let cfg = SmoothingConfig { sigma: 1.0, radius: 3 };
        let d1 = random_image(9, 9, 12);
        let d2 = random_image(9, 9, 13);
        let (d3, d4) = compute_contrast_images(&d1, &d2, &cfg).unwrap();
        let o3 = d1.mapv(|v| v as f64) - direct_smooth(&d1, &cfg);
        let o4 = d2.mapv(|v| v as f64) - direct_smooth(&d2, &cfg);
        for (a, b) in d3.iter().zip(o3.iter()).chain(d4.iter().zip(o4.iter())) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_measurement_gives_zero_bundle() {
        let masks = MaskSet::generate(8, 8, 2, 0.5, (0, 2), 3).unwrap();
        let bundle = build_bundle(&meas(Array2::zeros((8, 8))), &masks, &AmplifierConfig::default()).unwrap();
        for img in [&bundle.ybar, &bundle.d1, &bundle.d2, &bundle.d3, &bundle.d4] {
            assert!(img.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let masks = MaskSet::generate(8, 8, 2, 0.5, (0, 2), 3).unwrap();
        assert!(build_bundle(&meas(Array2::zeros((8, 7))), &masks, &AmplifierConfig::default()).is_err());
    }
}
