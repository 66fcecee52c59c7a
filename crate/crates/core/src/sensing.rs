//! Dual-view snapshot sensing model.
//!
//! Two scenes of `B` frames each are modulated by per-frame binary coding
//! patterns and integrated onto one detector:
//!
//! ```text
//! Y = sum_b (X1[b] * C1[b] + X2[b] * C2[b]) + G
//! ```
//!
//! The sensing matrix is a horizontal stack of diagonal blocks, so it is only
//! ever applied matrix-free. All cubes use `(frame, row, col)` ordering.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Which field of view a cube belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ViewId {
    One,
    Two,
    Single,
}

impl ViewId {
    pub fn as_str(self) -> &'static str {
        match self {
            ViewId::One => "1",
            ViewId::Two => "2",
            ViewId::Single => "single",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1" => Some(ViewId::One),
            "2" => Some(ViewId::Two),
            "single" => Some(ViewId::Single),
            _ => None,
        }
    }
}

/// One view's frame stack with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoCube {
    data: Array3<f32>,
    view: ViewId,
}

impl VideoCube {
    pub fn new(data: Array3<f32>, view: ViewId) -> Result<Self> {
        let (b, r, c) = data.dim();
        if b == 0 || r == 0 || c == 0 {
            return Err(Error::shape(format!("empty video cube {b}x{r}x{c}")));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::param(format!(
                "video cube entries must be finite and in [0,1], found {v}"
            )));
        }
        Ok(Self { data, view })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn view(&self) -> ViewId {
        self.view
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn rows(&self) -> usize {
        self.data.dim().1
    }

    pub fn cols(&self) -> usize {
        self.data.dim().2
    }
}

/// Paired binary coding-pattern stacks. `c2` is always `c1` circularly shifted
/// by `shift` (rows, cols).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    c1: Array3<f32>,
    c2: Array3<f32>,
    shift: (isize, isize),
    density: f64,
    seed: u64,
}

/// Smallest accepted lateral displacement between the two mask stacks.
pub const MIN_MASK_SHIFT: usize = 2;

pub(crate) fn check_shift(shift: (isize, isize)) -> Result<()> {
    let mag = shift.0.unsigned_abs().max(shift.1.unsigned_abs());
    if mag < MIN_MASK_SHIFT {
        return Err(Error::param(format!(
            "mask shift {shift:?} must exceed the 1-pixel feature size (max(|dr|,|dc|) >= {MIN_MASK_SHIFT})"
        )));
    }
    Ok(())
}

fn circular_shift(c: &Array3<f32>, shift: (isize, isize)) -> Array3<f32> {
    let (b, rows, cols) = c.dim();
    Array3::from_shape_fn((b, rows, cols), |(k, r, col)| {
        let sr = (r as isize - shift.0).rem_euclid(rows as isize) as usize;
        let sc = (col as isize - shift.1).rem_euclid(cols as isize) as usize;
        c[[k, sr, sc]]
    })
}

impl MaskSet {
    /// Draws `C1` i.i.d. Bernoulli(`density`) and derives `C2` by circular shift.
    pub fn generate(
        rows: usize,
        cols: usize,
        frames: usize,
        density: f64,
        shift: (isize, isize),
        seed: u64,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 || frames == 0 {
            return Err(Error::shape(format!(
                "mask geometry must be positive, got {rows}x{cols}x{frames}"
            )));
        }
        if !(density > 0.0 && density <= 1.0) {
            return Err(Error::param(format!("mask density {density} outside (0,1]")));
        }
        check_shift(shift)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c1 = Array3::from_shape_simple_fn((frames, rows, cols), || {
            if rng.random::<f64>() < density {
                1.0
            } else {
                0.0
            }
        });
        let c2 = circular_shift(&c1, shift);
        Ok(Self {
            c1,
            c2,
            shift,
            density,
            seed,
        })
    }

    /// Rebuilds a mask set from a stored `C1` stack, re-deriving `C2`.
    pub fn from_primary(c1: Array3<f32>, shift: (isize, isize), density: f64, seed: u64) -> Result<Self> {
        check_shift(shift)?;
        if c1.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::param("mask entries must be 0 or 1"));
        }
        let c2 = circular_shift(&c1, shift);
        Ok(Self {
            c1,
            c2,
            shift,
            density,
            seed,
        })
    }

    pub fn c1(&self) -> &Array3<f32> {
        &self.c1
    }

    pub fn c2(&self) -> &Array3<f32> {
        &self.c2
    }

    pub fn view(&self, view: ViewId) -> &Array3<f32> {
        match view {
            ViewId::Two => &self.c2,
            _ => &self.c1,
        }
    }

    pub fn shift(&self) -> (isize, isize) {
        self.shift
    }

    pub fn density(&self) -> f64 {
        self.density
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frames(&self) -> usize {
        self.c1.dim().0
    }

    pub fn rows(&self) -> usize {
        self.c1.dim().1
    }

    pub fn cols(&self) -> usize {
        self.c1.dim().2
    }

    /// `[C1; C2]` concatenated along the frame axis (2B frames).
    pub fn stacked(&self) -> Array3<f32> {
        ndarray::concatenate(Axis(0), &[self.c1.view(), self.c2.view()]).expect("same shape")
    }

    /// Content hash identifying this mask realization.
    pub fn reference(&self) -> String {
        let mut h = Sha256::new();
        let (b, r, c) = self.c1.dim();
        h.update(format!("{b}x{r}x{c};{:?};", self.shift).as_bytes());
        h.update(self.c1.iter().map(|&v| v as u8).collect::<Vec<u8>>());
        hex::encode(&h.finalize()[..8])
    }
}

/// Provenance of a snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementMeta {
    pub frames_per_view: usize,
    pub views: usize,
    pub mask_ref: String,
    pub noise_sigma: f64,
    pub normalized: bool,
    /// Factor mapping stored values back to detector units (1 unless normalized).
    pub scale: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub y: Array2<f32>,
    pub meta: MeasurementMeta,
}

impl Measurement {
    pub fn rows(&self) -> usize {
        self.y.nrows()
    }

    pub fn cols(&self) -> usize {
        self.y.ncols()
    }

    /// Snapshot in detector units, undoing any max-normalization.
    pub fn physical(&self) -> Array2<f32> {
        if self.meta.normalized {
            &self.y * self.meta.scale
        } else {
            self.y.clone()
        }
    }
}

/// Matrix-free sensing operator `Phi = [diag(C^1), ..., diag(C^F)]`.
#[derive(Debug, Clone)]
pub struct SensingOperator {
    masks: Array3<f32>,
}

impl SensingOperator {
    /// Dual-view operator over the 2B stacked masks.
    pub fn new(masks: &MaskSet) -> Self {
        Self {
            masks: masks.stacked(),
        }
    }

    /// Single-view operator over `C1` only.
    pub fn single_view(masks: &MaskSet) -> Self {
        Self {
            masks: masks.c1.clone(),
        }
    }

    /// Operator over an arbitrary mask stack.
    pub fn from_stacked(masks: Array3<f32>) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::shape("empty mask stack"));
        }
        Ok(Self { masks })
    }

    pub fn masks(&self) -> &Array3<f32> {
        &self.masks
    }

    /// Number of frames multiplexed into one snapshot.
    pub fn frames(&self) -> usize {
        self.masks.dim().0
    }

    pub fn image_dim(&self) -> (usize, usize) {
        let (_, r, c) = self.masks.dim();
        (r, c)
    }

    pub fn sampling_ratio(&self) -> f64 {
        1.0 / self.frames() as f64
    }

    fn check_cube(&self, dim: (usize, usize, usize)) -> Result<()> {
        if dim != self.masks.dim() {
            return Err(Error::shape(format!(
                "cube {dim:?} does not match operator {:?}",
                self.masks.dim()
            )));
        }
        Ok(())
    }

    fn check_image(&self, dim: (usize, usize)) -> Result<()> {
        if dim != self.image_dim() {
            return Err(Error::shape(format!(
                "image {dim:?} does not match operator {:?}",
                self.image_dim()
            )));
        }
        Ok(())
    }

    /// `Phi x`, accumulated in ascending frame order in double precision.
    pub fn forward(&self, x: ArrayView3<f32>) -> Result<Array2<f32>> {
        self.check_cube(x.dim())?;
        let mut acc = Array2::<f64>::zeros(self.image_dim());
        for (xb, cb) in x.outer_iter().zip(self.masks.outer_iter()) {
            Zip::from(&mut acc).and(&xb).and(&cb).for_each(|a, &xv, &cv| {
                *a += xv as f64 * cv as f64;
            });
        }
        Ok(acc.mapv(|v| v as f32))
    }

    pub fn forward_f64(&self, x: ArrayView3<f64>) -> Result<Array2<f64>> {
        self.check_cube(x.dim())?;
        let mut acc = Array2::<f64>::zeros(self.image_dim());
        for (xb, cb) in x.outer_iter().zip(self.masks.outer_iter()) {
            Zip::from(&mut acc).and(&xb).and(&cb).for_each(|a, &xv, &cv| {
                *a += xv * cv as f64;
            });
        }
        Ok(acc)
    }

    /// `Phi^T r`: frame `b` is `r * C^b`.
    pub fn adjoint(&self, r: ArrayView2<f32>) -> Result<Array3<f32>> {
        self.check_image(r.dim())?;
        let mut out = Array3::<f32>::zeros(self.masks.dim());
        for (mut ob, cb) in out.outer_iter_mut().zip(self.masks.outer_iter()) {
            Zip::from(&mut ob).and(&r).and(&cb).for_each(|o, &rv, &cv| *o = rv * cv);
        }
        Ok(out)
    }

    pub fn adjoint_f64(&self, r: ArrayView2<f64>) -> Result<Array3<f64>> {
        self.check_image(r.dim())?;
        let mut out = Array3::<f64>::zeros(self.masks.dim());
        for (mut ob, cb) in out.outer_iter_mut().zip(self.masks.outer_iter()) {
            Zip::from(&mut ob).and(&r).and(&cb).for_each(|o, &rv, &cv| *o = rv * cv as f64);
        }
        Ok(out)
    }

    /// Diagonal of `Phi Phi^T`: per-pixel `sum_b (C^b)^2`.
    pub fn phi_phit_diagonal(&self) -> Array2<f32> {
        self.masks.map_axis(Axis(0), |lane| lane.iter().map(|c| c * c).sum())
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("noise sigma {sigma} must be finite and >= 0")));
    }
    Ok(())
}

fn add_gaussian(y: &mut Array2<f32>, sigma: f64, seed: u64) {
    if sigma == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    y.mapv_inplace(|v| (v as f64 + normal.sample(&mut rng)) as f32);
}

/// Encodes two views into one snapshot, optionally with additive Gaussian noise.
pub fn encode(
    x1: &VideoCube,
    x2: &VideoCube,
    masks: &MaskSet,
    noise_sigma: f64,
    seed: u64,
) -> Result<Measurement> {
    check_sigma(noise_sigma)?;
    if x1.data.dim() != masks.c1.dim() || x2.data.dim() != masks.c2.dim() {
        return Err(Error::shape(format!(
            "views {:?} / {:?} do not match masks {:?}",
            x1.data.dim(),
            x2.data.dim(),
            masks.c1.dim()
        )));
    }
    let mut acc = Array2::<f64>::zeros((masks.rows(), masks.cols()));
    for b in 0..masks.frames() {
        Zip::from(&mut acc)
            .and(x1.data.index_axis(Axis(0), b))
            .and(masks.c1.index_axis(Axis(0), b))
            .and(x2.data.index_axis(Axis(0), b))
            .and(masks.c2.index_axis(Axis(0), b))
            .for_each(|a, &p1, &m1, &p2, &m2| {
                *a += p1 as f64 * m1 as f64 + p2 as f64 * m2 as f64;
            });
    }
    let mut y = acc.mapv(|v| v as f32);
    add_gaussian(&mut y, noise_sigma, seed);
    Ok(Measurement {
        y,
        meta: MeasurementMeta {
            frames_per_view: masks.frames(),
            views: 2,
            mask_ref: masks.reference(),
            noise_sigma,
            normalized: false,
            scale: 1.0,
        },
    })
}

/// Single-view encoding with `C1` only.
pub fn encode_single(x: &VideoCube, masks: &MaskSet, noise_sigma: f64, seed: u64) -> Result<Measurement> {
    check_sigma(noise_sigma)?;
    let op = SensingOperator::single_view(masks);
    let mut y = op.forward(x.data.view())?;
    add_gaussian(&mut y, noise_sigma, seed);
    Ok(Measurement {
        y,
        meta: MeasurementMeta {
            frames_per_view: masks.frames(),
            views: 1,
            mask_ref: masks.reference(),
            noise_sigma,
            normalized: false,
            scale: 1.0,
        },
    })
}

/// Noiseless encoding of a concatenated `[X1; X2]` cube with `[C1; C2]`.
pub fn encode_stacked(x: ArrayView3<f32>, c: ArrayView3<f32>) -> Result<Measurement> {
    if x.dim() != c.dim() {
        return Err(Error::shape(format!("cube {:?} vs masks {:?}", x.dim(), c.dim())));
    }
    let frames = x.dim().0;
    if frames % 2 != 0 {
        return Err(Error::shape(format!("stacked temporal length {frames} is odd")));
    }
    let half = frames / 2;
    let mut acc = Array2::<f64>::zeros((x.dim().1, x.dim().2));
    for b in 0..half {
        Zip::from(&mut acc)
            .and(x.index_axis(Axis(0), b))
            .and(c.index_axis(Axis(0), b))
            .and(x.index_axis(Axis(0), b + half))
            .and(c.index_axis(Axis(0), b + half))
            .for_each(|a, &p1, &m1, &p2, &m2| {
                *a += p1 as f64 * m1 as f64 + p2 as f64 * m2 as f64;
            });
    }
    let mut h = Sha256::new();
    h.update(c.iter().map(|&v| v as u8).collect::<Vec<u8>>());
    Ok(Measurement {
        y: acc.mapv(|v| v as f32),
        meta: MeasurementMeta {
            frames_per_view: half,
            views: 2,
            mask_ref: hex::encode(&h.finalize()[..8]),
            noise_sigma: 0.0,
            normalized: false,
            scale: 1.0,
        },
    })
}

/// Scales the snapshot by its own maximum, then adds zero-mean Gaussian noise.
pub fn normalize_and_add_noise(y: &Measurement, sigma: f64, seed: u64) -> Result<Measurement> {
    check_sigma(sigma)?;
    let phys = y.physical();
    let max = phys.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(max > 0.0) {
        return Err(Error::param("cannot normalize an all-zero measurement"));
    }
    let mut out = phys.mapv(|v| v / max);
    add_gaussian(&mut out, sigma, seed);
    Ok(Measurement {
        y: out,
        meta: MeasurementMeta {
            noise_sigma: sigma,
            normalized: true,
            scale: max,
            ..y.meta.clone()
        },
    })
}

/// Splits a 2B-frame cube into its two views.
pub fn split_views(x: &Array3<f32>) -> (Array3<f32>, Array3<f32>) {
    let half = x.dim().0 / 2;
    (
        x.slice(s![..half, .., ..]).to_owned(),
        x.slice(s![half.., .., ..]).to_owned(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cube(data: Array3<f32>, view: ViewId) -> VideoCube {
        VideoCube::new(data, view).unwrap()
    }

    #[test]
    fn density_one_gives_all_ones() {
        let m = MaskSet::generate(4, 4, 1, 1.0, (0, 2), 0).unwrap();
        assert!(m.c1().iter().all(|&v| v == 1.0));
        assert!(m.c2().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn masks_are_deterministic() {
        let a = MaskSet::generate(16, 12, 3, 0.5, (1, 3), 42).unwrap();
        let b = MaskSet::generate(16, 12, 3, 0.5, (1, 3), 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.reference(), b.reference());
        let c = MaskSet::generate(16, 12, 3, 0.5, (1, 3), 43).unwrap();
        assert_ne!(a.reference(), c.reference());
    }

    #[test]
    fn mask_density_matches_bernoulli_rate() {
        let m = MaskSet::generate(64, 64, 10, 0.5, (0, 10), 7).unwrap();
        let ones: f32 = m.c1().sum();
        let mean = ones / m.c1().len() as f32;
        assert!((mean - 0.5).abs() <= 0.05, "mean {mean}");
    }

    #[test]
    fn small_shifts_rejected() {
        for shift in [(0, 0), (1, 0), (0, -1), (1, 1), (-1, 1)] {
            assert!(MaskSet::generate(8, 8, 2, 0.5, shift, 1).is_err(), "{shift:?}");
        }
        assert!(MaskSet::generate(8, 8, 2, 0.5, (-2, 0), 1).is_ok());
    }

    #[test]
    fn shift_relation_holds_for_every_frame() {
        for shift in [(0, 2), (3, -2), (-5, 7), (2, 9)] {
            let m = MaskSet::generate(6, 5, 4, 0.4, shift, 9).unwrap();
            for b in 0..4 {
                for r in 0..6isize {
                    for c in 0..5isize {
                        let sr = (r + shift.0).rem_euclid(6) as usize;
                        let sc = (c + shift.1).rem_euclid(5) as usize;
                        assert_eq!(m.c2()[[b, sr, sc]], m.c1()[[b, r as usize, c as usize]]);
                    }
                }
            }
        }
    }

    #[test]
    fn single_pixel_disjoint_masks() {
        let x1 = cube(array![[[0.5f32]]], ViewId::One);
        let x2 = cube(array![[[0.25f32]]], ViewId::Two);
        let y = encode_stacked(
            ndarray::concatenate(Axis(0), &[x1.data().view(), x2.data().view()])
                .unwrap()
                .view(),
            array![[[1.0f32]], [[0.0]]].view(),
        )
        .unwrap();
        assert_eq!(y.y, array![[0.5f32]]);
    }

    #[test]
    fn zero_masks_give_zero_measurement() {
        let op = SensingOperator::from_stacked(Array3::zeros((4, 3, 3))).unwrap();
        let y = op.forward(Array3::from_elem((4, 3, 3), 0.7f32).view()).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
        assert!(op.phi_phit_diagonal().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binary_video_equal_to_mask_counts_ones() {
        let m = MaskSet::generate(5, 5, 3, 0.5, (0, 2), 3).unwrap();
        let c = m.stacked();
        let y = encode_stacked(c.view(), c.view()).unwrap();
        let count = c.sum_axis(Axis(0));
        assert_eq!(y.y, count);
    }

    #[test]
    fn odd_stack_rejected() {
        let x = Array3::<f32>::zeros((3, 2, 2));
        assert!(matches!(encode_stacked(x.view(), x.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn encode_errors() {
        let m = MaskSet::generate(4, 4, 2, 0.5, (0, 2), 1).unwrap();
        let good = cube(Array3::zeros((2, 4, 4)), ViewId::One);
        let bad = cube(Array3::zeros((2, 4, 5)), ViewId::Two);
        assert!(matches!(encode(&good, &bad, &m, 0.0, 0), Err(Error::Shape(_))));
        assert!(matches!(
            encode(&good, &good, &m, -0.1, 0),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn all_ones_diagonal_is_frame_count() {
        let op = SensingOperator::from_stacked(Array3::ones((20, 4, 4))).unwrap();
        assert!(op.phi_phit_diagonal().iter().all(|&v| v == 20.0));
        assert!((op.sampling_ratio() - 1.0 / 20.0).abs() < 1e-15);
    }

    #[test]
    fn normalization_of_constant_measurement() {
        let y = Measurement {
            y: Array2::from_elem((3, 3), 2.5),
            meta: MeasurementMeta {
                frames_per_view: 1,
                views: 2,
                mask_ref: String::new(),
                noise_sigma: 0.0,
                normalized: false,
                scale: 1.0,
            },
        };
        let n = normalize_and_add_noise(&y, 0.0, 0).unwrap();
        assert!(n.y.iter().all(|&v| v == 1.0));
        assert_eq!(n.meta.scale, 2.5);
        assert_eq!(n.physical(), y.y);
        let zero = Measurement {
            y: Array2::zeros((2, 2)),
            ..y.clone()
        };
        assert!(normalize_and_add_noise(&zero, 0.0, 0).is_err());
    }

    #[test]
    fn noise_std_matches_sigma() {
        let y = Measurement {
            y: Array2::from_elem((256, 256), 1.0),
            meta: MeasurementMeta {
                frames_per_view: 1,
                views: 2,
                mask_ref: String::new(),
                noise_sigma: 0.0,
                normalized: false,
                scale: 1.0,
            },
        };
        let n = normalize_and_add_noise(&y, 0.05, 11).unwrap();
        let resid: Vec<f64> = n.y.iter().map(|&v| v as f64 - 1.0).collect();
        let mean = resid.iter().sum::<f64>() / resid.len() as f64;
        let var = resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / resid.len() as f64;
        assert!((var.sqrt() - 0.05).abs() <= 0.005, "std {}", var.sqrt());
        let again = normalize_and_add_noise(&y, 0.05, 11).unwrap();
        assert_eq!(n, again);
    }

    #[test]
    fn video_cube_validation() {
        assert!(VideoCube::new(Array3::from_elem((1, 2, 2), 1.5), ViewId::One).is_err());
        assert!(VideoCube::new(Array3::from_elem((1, 2, 2), f32::NAN), ViewId::One).is_err());
        assert!(VideoCube::new(Array3::zeros((0, 2, 2)), ViewId::One).is_err());
    }
}
