//! Inverse-compositional Lucas-Kanade over multi-channel grids.
//!
//! The template's steepest-descent images and Gauss-Newton Hessian are
//! computed once ([`precompute_template`]); every iteration then samples the
//! image under the current warp, forms `b = sum [grad T dW/dp]^T (I(W(x;p)) - T(x))`
//! over valid pixels, solves the damped system for `dp`, and folds it in
//! with `H_p <- H_p * H_dp^-1`.
//!
//! Warps map template-frame coordinates to image-frame coordinates, where
//! each grid's `origin` places its samples in its frame.

use nalgebra::{Cholesky, SMatrix, SVector, SymmetricEigen, U8};

use crate::error::{Error, Result};
use crate::grid::{gradient, BilinearCell, Grid, Sample};
use crate::warp::{
    apply_matrix, update_inverse_compositional, warp_jacobian, warp_point, Homography, Point,
    WarpParams,
};

pub type Mat8 = SMatrix<f64, 8, 8>;
pub type Vec8 = SVector<f64, 8>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopKind {
    /// Stop when `dp` moves every template corner by less than
    /// `delta_p_corner_epsilon` pixels.
    DeltaP,
    /// Stop when the mean absolute residual over valid samples drops below
    /// `residual_epsilon`.
    Residual,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iterations: usize,
    pub stop_kind: StopKind,
    pub delta_p_corner_epsilon: f64,
    pub residual_epsilon: f64,
    /// Relative Tikhonov damping: the system solved is `H + damping * diag(H)`.
    pub hessian_damping: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iterations: 50,
            stop_kind: StopKind::DeltaP,
            delta_p_corner_epsilon: 0.01,
            residual_epsilon: 1e-3,
            hessian_damping: 1e-6,
        }
    }
}

impl SolverConfig {
    /// The iteration cap used inside training forward passes.
    pub fn training() -> Self {
        SolverConfig {
            max_iterations: 15,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be at least 1".into()));
        }
        if !(self.delta_p_corner_epsilon > 0.0 && self.residual_epsilon > 0.0) {
            return Err(Error::Config("stopping thresholds must be positive".into()));
        }
        if !(self.hessian_damping >= 0.0) {
            return Err(Error::Config("hessian_damping must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Everything about the template that does not change across iterations.
#[derive(Clone, Debug)]
pub struct TemplateSystem {
    channels: usize,
    height: usize,
    width: usize,
    /// Template samples, channel-major.
    template: Vec<f64>,
    /// Frame coordinate of each template pixel, row-major.
    coords: Vec<Point>,
    /// Steepest-descent row per (channel, pixel), index `c * N + j`.
    steepest: Vec<[f64; 8]>,
    hessian: Mat8,
    damping: f64,
    factor: Option<Cholesky<f64, U8>>,
    corners: [Point; 4],
}

/// Smallest ratio of extreme eigenvalues accepted for the damped Hessian.
const CONDITION_FLOOR: f64 = 1e-14;

pub fn precompute_template<T: Sample>(t: &Grid<T>, cfg: &SolverConfig) -> Result<TemplateSystem> {
    let t64 = t.cast::<f64>();
    let (gx, gy) = gradient(&t64)?;
    let (h, w) = (t.height(), t.width());
    let n = h * w;
    let o = t.origin();
    let coords: Vec<Point> = (0..n)
        .map(|j| [o[0] + (j % w) as f64, o[1] + (j / w) as f64])
        .collect();
    let mut steepest = Vec::with_capacity(t.channels() * n);
    for c in 0..t.channels() {
        let (gxc, gyc) = (gx.channel(c), gy.channel(c));
        for (j, x) in coords.iter().enumerate() {
            steepest.push(steepest_row(gxc[j], gyc[j], *x));
        }
    }
    let hessian = hessian_of(&steepest);
    let corners = [
        coords[0],
        coords[w - 1],
        coords[n - 1],
        coords[n - w],
    ];
    let mut sys = TemplateSystem {
        channels: t.channels(),
        height: h,
        width: w,
        template: t64.into_data(),
        coords,
        steepest,
        hessian,
        damping: cfg.hessian_damping,
        factor: None,
        corners,
    };
    sys.factor = factor_damped(&sys.damped());
    Ok(sys)
}

#[inline]
pub(crate) fn steepest_row(gx: f64, gy: f64, x: Point) -> [f64; 8] {
    let j = warp_jacobian(x);
    let mut row = [0.0; 8];
    for k in 0..8 {
        row[k] = gx * j[0][k] + gy * j[1][k];
    }
    row
}

pub(crate) fn hessian_of(steepest: &[[f64; 8]]) -> Mat8 {
    let mut hess = Mat8::zeros();
    for s in steepest {
        for a in 0..8 {
            if s[a] == 0.0 {
                continue;
            }
            for b in a..8 {
                hess[(a, b)] += s[a] * s[b];
            }
        }
    }
    for a in 0..8 {
        for b in 0..a {
            hess[(a, b)] = hess[(b, a)];
        }
    }
    hess
}

fn factor_damped(d: &Mat8) -> Option<Cholesky<f64, U8>> {
    if !d.iter().all(|v| v.is_finite()) {
        return None;
    }
    let eig = SymmetricEigen::new(*d);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= CONDITION_FLOOR * max {
        return None;
    }
    Cholesky::new(*d)
}

impl TemplateSystem {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn hessian(&self) -> &Mat8 {
        &self.hessian
    }

    /// `H + damping * diag(H)`.
    pub fn damped(&self) -> Mat8 {
        let mut d = self.hessian;
        for k in 0..8 {
            d[(k, k)] *= 1.0 + self.damping;
        }
        d
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn is_singular(&self) -> bool {
        self.factor.is_none()
    }

    /// Steepest-descent row of channel `c` at template pixel `j`.
    pub fn steepest(&self, c: usize, j: usize) -> &[f64; 8] {
        &self.steepest[c * self.coords.len() + j]
    }

    pub(crate) fn steepest_all(&self) -> &[[f64; 8]] {
        &self.steepest
    }

    pub(crate) fn template_values(&self) -> &[f64] {
        &self.template
    }

    pub fn coords(&self) -> &[Point] {
        &self.coords
    }

    /// Frame coordinates of the template's corner samples, top-left first,
    /// clockwise.
    pub fn corners(&self) -> &[Point; 4] {
        &self.corners
    }

    /// Solves the damped normal equations.
    pub fn solve_damped(&self, b: &Vec8) -> Result<Vec8> {
        let f = self.factor.as_ref().ok_or(Error::SingularHessian)?;
        Ok(f.solve(b))
    }
}

/// Result of one solver iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub delta: WarpParams,
    pub mean_abs_residual: f64,
    pub valid_count: usize,
}

/// One Gauss-Newton increment for the image under the `current` warp.
pub fn iclk_step<T: Sample>(
    sys: &TemplateSystem,
    image: &Grid<T>,
    current: &Homography,
) -> Result<StepOutput> {
    step_impl(sys, image, current, None)
}

fn step_impl<T: Sample>(
    sys: &TemplateSystem,
    image: &Grid<T>,
    current: &Homography,
    cells_out: Option<&mut Vec<Option<BilinearCell>>>,
) -> Result<StepOutput> {
    if image.channels() != sys.channels {
        return Err(Error::ShapeMismatch(format!(
            "template has {} channels, image has {}",
            sys.channels,
            image.channels()
        )));
    }
    if sys.factor.is_none() {
        return Err(Error::SingularHessian);
    }
    let grid_map = image_grid_matrix(current, image.origin());
    let n = sys.coords.len();
    let mut b = Vec8::zeros();
    let mut abs_sum = 0.0;
    let mut valid = 0usize;
    let mut cells = Vec::with_capacity(if cells_out.is_some() { n } else { 0 });
    for (j, x) in sys.coords.iter().enumerate() {
        let cell = apply_matrix(&grid_map, *x)
            .ok()
            .and_then(|q| BilinearCell::locate(image.width(), image.height(), q));
        if cells_out.is_some() {
            cells.push(cell);
        }
        let Some(cell) = cell else { continue };
        valid += 1;
        for c in 0..sys.channels {
            let r = cell.eval(image, c) - sys.template[c * n + j];
            abs_sum += r.abs();
            let s = &sys.steepest[c * n + j];
            for k in 0..8 {
                b[k] += s[k] * r;
            }
        }
    }
    if let Some(out) = cells_out {
        *out = cells;
    }
    if valid == 0 {
        return Err(Error::NoOverlap);
    }
    let dp = sys.solve_damped(&b)?;
    if !dp.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateWarp("non-finite parameter increment"));
    }
    Ok(StepOutput {
        delta: WarpParams(dp.into()),
        mean_abs_residual: abs_sum / (valid * sys.channels) as f64,
        valid_count: valid,
    })
}

/// Maps template-frame points straight to image sample coordinates.
pub(crate) fn image_grid_matrix(warp: &Homography, image_origin: Point) -> nalgebra::Matrix3<f64> {
    let shift = Homography::translation(-image_origin[0], -image_origin[1]);
    shift.matrix() * warp.matrix()
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationLog {
    pub delta_p: WarpParams,
    pub mean_residual: f64,
    pub valid_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveResult {
    /// Template frame to image frame.
    pub warp: Homography,
    pub converged: bool,
    pub iterations_used: usize,
    pub log: Vec<IterationLog>,
}

/// A solve that stopped on an error; `partial` holds the warp and log
/// reached before the failing iteration.
#[derive(Debug, thiserror::Error)]
#[error("solve failed after {} iterations: {error}", partial.iterations_used)]
pub struct SolveFailure {
    pub error: Error,
    pub partial: SolveResult,
}

impl From<SolveFailure> for Error {
    fn from(f: SolveFailure) -> Self {
        f.error
    }
}

/// Largest displacement `dp` induces on any of the given points.
pub fn max_corner_displacement(delta: &WarpParams, corners: &[Point; 4]) -> f64 {
    corners
        .iter()
        .map(|c| match warp_point(delta, *c) {
            Ok(q) => (q[0] - c[0]).hypot(q[1] - c[1]),
            Err(_) => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

/// Iterates until the stop criterion fires or `max_iterations` is reached.
pub fn solve<T: Sample>(
    sys: &TemplateSystem,
    image: &Grid<T>,
    init: &Homography,
    cfg: &SolverConfig,
) -> Result<SolveResult, SolveFailure> {
    run(sys, image, init, cfg, None, None)
}

/// Precomputes the template and solves.
pub fn solve_grids<T: Sample, U: Sample>(
    template: &Grid<T>,
    image: &Grid<U>,
    init: &Homography,
    cfg: &SolverConfig,
) -> Result<SolveResult, SolveFailure> {
    let fail = |error| SolveFailure {
        error,
        partial: SolveResult {
            warp: *init,
            converged: false,
            iterations_used: 0,
            log: Vec::new(),
        },
    };
    cfg.validate().map_err(fail)?;
    let sys = precompute_template(template, cfg).map_err(fail)?;
    solve(&sys, image, init, cfg)
}

/// What the differentiable pipeline needs to replay one iteration.
#[derive(Clone, Debug)]
pub(crate) struct IterationTrace {
    pub warp_before: Homography,
    pub cells: Vec<Option<BilinearCell>>,
    pub delta: Vec8,
}

/// Like [`solve`], additionally recording per-iteration traces. With
/// `exact_iterations`, runs exactly that many iterations and ignores the
/// stop criterion (the `converged` flag still reports whether it fired on
/// the last one).
pub(crate) fn solve_traced<T: Sample>(
    sys: &TemplateSystem,
    image: &Grid<T>,
    init: &Homography,
    cfg: &SolverConfig,
    exact_iterations: Option<usize>,
    trace: &mut Vec<IterationTrace>,
) -> Result<SolveResult, SolveFailure> {
    run(sys, image, init, cfg, exact_iterations, Some(trace))
}

fn run<T: Sample>(
    sys: &TemplateSystem,
    image: &Grid<T>,
    init: &Homography,
    cfg: &SolverConfig,
    exact_iterations: Option<usize>,
    mut trace: Option<&mut Vec<IterationTrace>>,
) -> Result<SolveResult, SolveFailure> {
    let mut result = SolveResult {
        warp: *init,
        converged: false,
        iterations_used: 0,
        log: Vec::new(),
    };
    if let Err(error) = cfg.validate() {
        return Err(SolveFailure {
            error,
            partial: result,
        });
    }
    let budget = exact_iterations.unwrap_or(cfg.max_iterations);
    for _ in 0..budget {
        let mut cells = Vec::new();
        let step = step_impl(
            sys,
            image,
            &result.warp,
            trace.is_some().then_some(&mut cells),
        );
        let step = match step {
            Ok(s) => s,
            Err(error) => {
                return Err(SolveFailure {
                    error,
                    partial: result,
                })
            }
        };
        let next = match update_inverse_compositional(&result.warp, &step.delta) {
            Ok(h) => h,
            Err(error) => {
                return Err(SolveFailure {
                    error,
                    partial: result,
                })
            }
        };
        if let Some(t) = trace.as_deref_mut() {
            t.push(IterationTrace {
                warp_before: result.warp,
                cells,
                delta: Vec8::from(step.delta.0),
            });
        }
        result.warp = next;
        result.iterations_used += 1;
        let stop = match cfg.stop_kind {
            StopKind::DeltaP => {
                max_corner_displacement(&step.delta, &sys.corners) < cfg.delta_p_corner_epsilon
            }
            StopKind::Residual => step.mean_abs_residual < cfg.residual_epsilon,
        };
        result.log.push(IterationLog {
            delta_p: step.delta,
            mean_residual: step.mean_abs_residual,
            valid_count: step.valid_count,
        });
        result.converged = stop;
        if stop && exact_iterations.is_none() {
            break;
        }
    }
    Ok(result)
}
