//! Iterative baselines: generalized alternating projection with a TV prior
//! and its plug-and-play generalization. All arithmetic is in `f64`.

use ndarray::{s, Array2, Array3, Zip};
use serde::{Deserialize, Serialize};

use crate::amplifier::{reflect_index, SmoothingConfig};
use crate::error::{Error, Result};
use crate::sensing::{MaskSet, Measurement, SensingOperator};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GapTvConfig {
    pub iterations: usize,
    pub lambda: f64,
    pub tv_iterations: usize,
    #[serde(default)]
    pub accelerate: bool,
}

impl Default for GapTvConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            lambda: 0.07,
            tv_iterations: 5,
            accelerate: false,
        }
    }
}

impl GapTvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.tv_iterations == 0 {
            return Err(Error::param("iteration counts must be >= 1"));
        }
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::param(format!("TV weight must be positive, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    /// Current `2B`-frame estimate (view 1 first).
    pub x: Array3<f64>,
    /// `‖y − Φx‖₂` after each completed iteration.
    pub residuals: Vec<f64>,
    /// Relative data misfit right after each projection, over pixels with a
    /// nonzero `ΦΦᵀ` diagonal.
    pub projection_residuals: Vec<f64>,
    pub iterations: usize,
}

/// A cube-to-cube denoiser usable inside the projection loop.
pub trait Denoiser {
    fn name(&self) -> &str;
    fn denoise(&self, x: &Array3<f64>) -> Result<Array3<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvDenoiser {
    pub lambda: f64,
    pub iterations: usize,
}

impl Denoiser for TvDenoiser {
    fn name(&self) -> &str {
        "tv"
    }

    fn denoise(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        tv_denoise(x, self.lambda, self.iterations)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct IdentityDenoiser;

impl Denoiser for IdentityDenoiser {
    fn name(&self) -> &str {
        "identity"
    }

    fn denoise(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        Ok(x.clone())
    }
}

/// Frame-wise Gaussian blur.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianDenoiser {
    pub smoothing: SmoothingConfig,
}

impl Denoiser for GaussianDenoiser {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn denoise(&self, x: &Array3<f64>) -> Result<Array3<f64>> {
        self.smoothing.validate()?;
        let k = self.smoothing.kernel();
        let mut out = x.clone();
        for mut f in out.outer_iter_mut() {
            let blurred = blur(&f.to_owned(), &k);
            f.assign(&blurred);
        }
        Ok(out)
    }
}

fn blur(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let r = (k.len() / 2) as isize;
    let (rows, cols) = img.dim();
    let tmp = Array2::from_shape_fn((rows, cols), |(i, j)| {
        k.iter()
            .enumerate()
            .map(|(t, w)| w * img[[i, reflect_index(j as isize + t as isize - r, cols)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        k.iter()
            .enumerate()
            .map(|(t, w)| w * tmp[[reflect_index(i as isize + t as isize - r, rows), j]])
            .sum::<f64>()
    })
}

/// Anisotropic TV proximal step applied frame by frame:
/// `argmin_z ½‖z − x‖² + λ Σ (|∂_h z| + |∂_v z|)`, approximated with a fixed
/// number of projected dual-gradient iterations started from zero.
pub fn tv_denoise(x: &Array3<f64>, lambda: f64, iterations: usize) -> Result<Array3<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::param(format!("TV weight must be positive, got {lambda}")));
    }
    let mut out = x.clone();
    for mut f in out.outer_iter_mut() {
        let z = tv_frame(&f.to_owned(), lambda, iterations);
        f.assign(&z);
    }
    Ok(out)
}

/// Divergence with the negative-adjoint convention of forward differences.
fn divergence(px: &Array2<f64>, py: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = px.dim();
    Array2::from_shape_fn((rows, cols), |(i, j)| {
        let dx = if cols == 1 {
            0.0
        } else if j == 0 {
            px[[i, j]]
        } else if j == cols - 1 {
            -px[[i, j - 1]]
        } else {
            px[[i, j]] - px[[i, j - 1]]
        };
        let dy = if rows == 1 {
            0.0
        } else if i == 0 {
            py[[i, j]]
        } else if i == rows - 1 {
            -py[[i - 1, j]]
        } else {
            py[[i, j]] - py[[i - 1, j]]
        };
        dx + dy
    })
}

fn tv_frame(x: &Array2<f64>, lambda: f64, iterations: usize) -> Array2<f64> {
    const TAU: f64 = 0.125;
    let (rows, cols) = x.dim();
    let mut px = Array2::<f64>::zeros((rows, cols));
    let mut py = Array2::<f64>::zeros((rows, cols));
    for _ in 0..iterations {
        let u = divergence(&px, &py) - x / lambda;
        for i in 0..rows {
            for j in 0..cols {
                if j + 1 < cols {
                    let g = u[[i, j + 1]] - u[[i, j]];
                    px[[i, j]] = (px[[i, j]] + TAU * g).clamp(-1.0, 1.0);
                }
                if i + 1 < rows {
                    let g = u[[i + 1, j]] - u[[i, j]];
                    py[[i, j]] = (py[[i, j]] + TAU * g).clamp(-1.0, 1.0);
                }
            }
        }
    }
    x - &(divergence(&px, &py) * lambda)
}

/// Residual `y − Φx` divided by the `ΦΦᵀ` diagonal, zero where it vanishes.
fn weighted_residual(r: &Array2<f64>, diag: &Array2<f64>) -> Array2<f64> {
    let mut out = r.clone();
    Zip::from(&mut out).and(diag).for_each(|o, &d| {
        *o = if d > 0.0 { *o / d } else { 0.0 };
    });
    out
}

fn informative_norm(r: &Array2<f64>, diag: &Array2<f64>) -> f64 {
    r.iter()
        .zip(diag.iter())
        .filter(|(_, &d)| d > 0.0)
        .map(|(v, _)| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Generic projection loop over an explicit operator.
pub fn solve_with_operator(
    op: &SensingOperator,
    y: &Array2<f64>,
    denoiser: &dyn Denoiser,
    iterations: usize,
    accelerate: bool,
) -> Result<SolverState> {
    if iterations == 0 {
        return Err(Error::param("iterations must be >= 1"));
    }
    if y.dim() != op.image_dim() {
        return Err(Error::shape(format!("measurement {:?} vs operator {:?}", y.dim(), op.image_dim())));
    }
    let diag = op.phi_phit_diagonal().mapv(|v| v as f64);
    if diag.iter().all(|&d| d == 0.0) {
        return Err(Error::param("all masks are zero"));
    }
    let y_norm = informative_norm(y, &diag).max(f64::MIN_POSITIVE);
    let mut x = op.adjoint_f64(weighted_residual(y, &diag).view())?;
    let mut y_acc = y.clone();
    let mut residuals = Vec::with_capacity(iterations);
    let mut projection_residuals = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let target = if accelerate { &y_acc } else { y };
        let r = target - &op.forward_f64(x.view())?;
        let v = &x + &op.adjoint_f64(weighted_residual(&r, &diag).view())?;
        let pr = y - &op.forward_f64(v.view())?;
        projection_residuals.push(informative_norm(&pr, &diag) / y_norm);
        let z = denoiser.denoise(&v)?;
        if z.dim() != v.dim() {
            return Err(Error::shape(format!(
                "denoiser {} changed shape {:?} -> {:?}",
                denoiser.name(),
                v.dim(),
                z.dim()
            )));
        }
        x = z;
        let res = y - &op.forward_f64(x.view())?;
        if accelerate {
            y_acc += &res;
        }
        residuals.push(res.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    Ok(SolverState {
        x,
        residuals,
        projection_residuals,
        iterations,
    })
}

fn split(x: &Array3<f64>) -> (Array3<f32>, Array3<f32>) {
    let b = x.dim().0 / 2;
    (
        x.slice(s![..b, .., ..]).mapv(|v| v as f32),
        x.slice(s![b.., .., ..]).mapv(|v| v as f32),
    )
}

/// Plug-and-play reconstruction of both views with an arbitrary denoiser.
pub fn pnp_solve(
    y: &Measurement,
    masks: &MaskSet,
    denoiser: &dyn Denoiser,
    iterations: usize,
    accelerate: bool,
) -> Result<(Array3<f32>, Array3<f32>, SolverState)> {
    let op = SensingOperator::new(masks);
    let yp = y.physical().mapv(|v| v as f64);
    let st = solve_with_operator(&op, &yp, denoiser, iterations, accelerate)?;
    let (a, b) = split(&st.x);
    Ok((a, b, st))
}

pub fn gap_tv(y: &Measurement, masks: &MaskSet, cfg: &GapTvConfig) -> Result<(Array3<f32>, Array3<f32>, SolverState)> {
    cfg.validate()?;
    let tv = TvDenoiser {
        lambda: cfg.lambda,
        iterations: cfg.tv_iterations,
    };
    pnp_solve(y, masks, &tv, cfg.iterations, cfg.accelerate)
}

/// Single-view GAP-TV over `C1` only.
pub fn gap_tv_single(y: &Measurement, masks: &MaskSet, cfg: &GapTvConfig) -> Result<(Array3<f32>, SolverState)> {
    cfg.validate()?;
    let op = SensingOperator::single_view(masks);
    let tv = TvDenoiser {
        lambda: cfg.lambda,
        iterations: cfg.tv_iterations,
    };
    let st = solve_with_operator(&op, &y.physical().mapv(|v| v as f64), &tv, cfg.iterations, cfg.accelerate)?;
    Ok((st.x.mapv(|v| v as f32), st))
}

/// Plain-text `iteration residual projection_residual` table.
pub fn residual_table(st: &SolverState) -> String {
    let mut s = String::from("iteration\tresidual\tprojection_residual\n");
    for (i, (r, p)) in st.residuals.iter().zip(&st.projection_residuals).enumerate() {
        s.push_str(&format!("{}\t{r:.6e}\t{p:.6e}\n", i + 1));
    }
    s
}

/// Total anisotropic variation of one frame, for diagnostics.
pub fn total_variation(f: &Array2<f64>) -> f64 {
    let h: f64 = f.windows((1, 2)).into_iter().map(|w| (w[[0, 1]] - w[[0, 0]]).abs()).sum();
    let v: f64 = f.windows((2, 1)).into_iter().map(|w| (w[[1, 0]] - w[[0, 0]]).abs()).sum();
    h + v
}

/// Convenience: frames of `x` as `f32`.
pub fn to_f32(x: &Array3<f64>) -> Array3<f32> {
    x.mapv(|v| v as f32)
}
