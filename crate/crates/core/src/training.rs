//! Learning convolutional features for alignment by differentiating the
//! corner loss through every executed solver iteration.
//!
//! A forward pass extracts features from both sides of a pair, runs the
//! solver from the identity while recording each iteration, maps the result
//! to image coordinates and scores it. The backward pass is hand-written
//! reverse mode over that record: loss, stride conjugation, each
//! inverse-compositional update, the damped 8x8 solve, the residual and
//! bilinear lookups, the Hessian and steepest-descent images, the template
//! gradient, and finally the convolution stack. The number of iterations is
//! a constant of the realized run.

use nalgebra::Matrix3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{AlignmentPair, PairStream};
use crate::error::{Error, Result};
use crate::extract::{ConvGrads, ConvStack, ConvTape};
use crate::grid::{gradient_adjoint_plane, to_grayscale, FeatureGrid, Grid};
use crate::loss::{loss_and_grad, LossKind};
use crate::solver::{precompute_template, solve_traced, IterationTrace, SolverConfig, TemplateSystem, Vec8};
use crate::warp::{conjugate_by_scale, warp_jacobian, Homography, Point, WarpParams};

/// How many solver iterations a training forward pass executes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationMode {
    /// Iterate until the update is small, up to `train_max_iters`.
    #[default]
    Dynamic,
    /// Exactly one iteration.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub train_max_iters: usize,
    pub validation_size: usize,
    /// Validate every this many steps, and after the last one.
    pub validation_interval: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub mode: IterationMode,
    /// Treat the Hessian as a constant in the backward pass.
    pub detach_hessian: bool,
    /// Rescale the batch-mean gradient to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 5,
            learning_rate: 1e-3,
            steps: 3000,
            train_max_iters: 15,
            validation_size: 20,
            validation_interval: 50,
            seed: 0,
            loss: LossKind::Corner,
            mode: IterationMode::Dynamic,
            detach_hessian: false,
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.train_max_iters == 0 || self.validation_interval == 0 {
            return Err(Error::Config(
                "batch_size, train_max_iters and validation_interval must be at least 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and nonnegative".into()));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config("max_grad_norm must be positive and finite".into()));
            }
        }
        if let LossKind::ConditionalHuber { delta } = self.loss {
            if !(delta > 0.0) {
                return Err(Error::Config("huber delta must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn forward_options(&self) -> ForwardOptions {
        ForwardOptions {
            solver: SolverConfig {
                max_iterations: self.train_max_iters,
                ..SolverConfig::training()
            },
            exact_iterations: match self.mode {
                IterationMode::Dynamic => None,
                IterationMode::Single => Some(1),
            },
            loss: self.loss,
            detach_hessian: self.detach_hessian,
        }
    }
}

/// Settings of one differentiable forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub solver: SolverConfig,
    /// Run exactly this many iterations instead of using the stop rule.
    pub exact_iterations: Option<usize>,
    pub loss: LossKind,
    pub detach_hessian: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        TrainConfig::default().forward_options()
    }
}

/// Converts a grid to the channel count an extractor expects.
pub fn match_channels(g: &FeatureGrid, channels: usize) -> Result<FeatureGrid> {
    match (g.channels(), channels) {
        (a, b) if a == b => Ok(g.clone()),
        (3, 1) => Ok(to_grayscale(g)),
        (a, b) => Err(Error::ShapeMismatch(format!(
            "cannot feed a {a}-channel grid to a {b}-channel extractor"
        ))),
    }
}

#[derive(Clone, Debug)]
enum Features {
    Identity,
    Conv {
        stack: ConvStack,
        template: ConvTape,
        image: ConvTape,
    },
}

/// Everything recorded by one forward pass.
#[derive(Clone, Debug)]
pub struct Tape {
    features: Features,
    inputs: (FeatureGrid, FeatureGrid),
    gt: Homography,
    corners: [Point; 4],
    options: ForwardOptions,
    sys: Option<TemplateSystem>,
    image_features: Grid<f64>,
    traces: Vec<IterationTrace>,
    stride: f64,
    warp: Homography,
    loss: f64,
    loss_grad: Matrix3<f64>,
    converged: bool,
    solver_error: Option<String>,
}

impl Tape {
    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// Template-to-image warp in image coordinates.
    pub fn warp(&self) -> &Homography {
        &self.warp
    }

    pub fn iterations(&self) -> usize {
        self.traces.len()
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Why the solver stopped early, if it did.
    pub fn solver_error(&self) -> Option<&str> {
        self.solver_error.as_deref()
    }

    /// Re-runs the recorded forward pass with the same iteration count.
    pub fn replay(&self) -> Result<f64> {
        let stack = match &self.features {
            Features::Identity => None,
            Features::Conv { stack, .. } => Some(stack),
        };
        let options = ForwardOptions {
            exact_iterations: self.options.exact_iterations.or(Some(self.traces.len()).filter(|n| *n > 0)),
            ..self.options
        };
        let t = forward_grids(stack, &self.inputs.0, &self.inputs.1, &self.gt, &self.corners, &options)?;
        Ok(t.loss)
    }
}

/// Forward pass on a generated pair.
pub fn forward_pair(stack: Option<&ConvStack>, pair: &AlignmentPair, options: &ForwardOptions) -> Result<Tape> {
    forward_grids(stack, &pair.template, &pair.image, &pair.gt_warp, &pair.corners(), options)
}

/// Forward pass on an explicit template/image pair. `gt` maps the template
/// frame to the image frame and `corners` are template-frame points.
pub fn forward_grids(
    stack: Option<&ConvStack>,
    template: &FeatureGrid,
    image: &FeatureGrid,
    gt: &Homography,
    corners: &[Point; 4],
    options: &ForwardOptions,
) -> Result<Tape> {
    let (features, template_features, image_features, stride) = match stack {
        None => (
            Features::Identity,
            template.cast::<f64>(),
            image.cast::<f64>(),
            1.0,
        ),
        Some(stack) => {
            let t = stack.forward(&match_channels(template, stack.in_channels())?)?;
            let i = stack.forward(&match_channels(image, stack.in_channels())?)?;
            let (tf, imf) = (t.output_grid(), i.output_grid());
            (
                Features::Conv {
                    stack: stack.clone(),
                    template: t,
                    image: i,
                },
                tf,
                imf,
                stack.total_stride() as f64,
            )
        }
    };
    let sys = precompute_template(&template_features, &options.solver)?;
    let mut traces = Vec::new();
    let (warp_feat, converged, solver_error) = match solve_traced(
        &sys,
        &image_features,
        &Homography::identity(),
        &options.solver,
        options.exact_iterations,
        &mut traces,
    ) {
        Ok(r) => (r.warp, r.converged, None),
        Err(f) => (f.partial.warp, false, Some(f.error.to_string())),
    };
    let warp = conjugate_by_scale(&warp_feat, stride);
    let (loss, loss_grad) = loss_and_grad(options.loss, gt, &warp, corners)?;
    Ok(Tape {
        features,
        inputs: (template.clone(), image.clone()),
        gt: *gt,
        corners: *corners,
        options: *options,
        sys: Some(sys),
        image_features,
        traces,
        stride,
        warp,
        loss,
        loss_grad,
        converged,
        solver_error,
    })
}

/// Gradients of the adjoint pass with respect to the two feature grids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrads {
    pub template: Vec<f64>,
    pub image: Vec<f64>,
}

/// Reverse pass from `seed * d loss` down to the feature grids.
pub fn backward_features(tape: &Tape, seed: f64) -> Result<FeatureGrads> {
    let sys = tape.sys.as_ref().ok_or(Error::IncompleteTape("no template system recorded"))?;
    let img = &tape.image_features;
    let (c_n, n) = (sys.channels(), sys.coords().len());
    let plane_i = img.height() * img.width();
    let mut t_bar = vec![0.0; c_n * n];
    let mut i_bar = vec![0.0; c_n * plane_i];
    if tape.traces.is_empty() {
        return Ok(FeatureGrads {
            template: t_bar,
            image: i_bar,
        });
    }

    // Image-coordinate warp to feature-coordinate warp.
    let s = [tape.stride, tape.stride, 1.0];
    let mut m_bar = Matrix3::from_fn(|a, b| seed * tape.loss_grad[(a, b)] * s[a] / s[b]);

    let mut sd_bar = vec![[0.0f64; 8]; c_n * n];
    let mut d_bar = nalgebra::SMatrix::<f64, 8, 8>::zeros();
    let template = sys.template_values();
    let steepest = sys.steepest_all();
    let origin = img.origin();

    for tr in tape.traces.iter().rev() {
        let m = *tr.warp_before.matrix();
        let p = WarpParams(tr.delta.into()).matrix();
        let k = p.try_inverse().ok_or(Error::IncompleteTape("recorded increment is singular"))?;
        let nm = m * k;
        let n22 = nm[(2, 2)];
        // Normalization by the bottom-right entry.
        let mut n_bar = m_bar / n22;
        n_bar[(2, 2)] -= m_bar.component_mul(&nm).sum() / (n22 * n22);
        let mut m_prev = n_bar * k.transpose();
        let k_bar = m.transpose() * n_bar;
        let p_bar = -(k.transpose() * k_bar * k.transpose());
        let dp_bar = Vec8::from([
            p_bar[(0, 0)],
            p_bar[(1, 0)],
            p_bar[(0, 1)],
            p_bar[(1, 1)],
            p_bar[(0, 2)],
            p_bar[(1, 2)],
            p_bar[(2, 0)],
            p_bar[(2, 1)],
        ]);
        let b_bar = sys.solve_damped(&dp_bar)?;
        if !tape.options.detach_hessian {
            d_bar -= b_bar * tr.delta.transpose();
        }

        let mut q_m = Matrix3::<f64>::zeros();
        for (j, cell) in tr.cells.iter().enumerate() {
            let Some(cell) = cell else { continue };
            let mut qb = [0.0; 2];
            for c in 0..c_n {
                let idx = c * n + j;
                let r = cell.eval(img, c) - template[idx];
                let sd = &steepest[idx];
                let mut r_bar = 0.0;
                let sb = &mut sd_bar[idx];
                for kk in 0..8 {
                    sb[kk] += r * b_bar[kk];
                    r_bar += sd[kk] * b_bar[kk];
                }
                t_bar[idx] -= r_bar;
                for (pos, w) in cell.weights(img.width()) {
                    i_bar[c * plane_i + pos] += r_bar * w;
                }
                let g = cell.eval_gradient(img, c);
                qb[0] += r_bar * g[0];
                qb[1] += r_bar * g[1];
            }
            let xi = sys.coords()[j];
            let xt = [xi[0], xi[1], 1.0];
            let hz = m[(2, 0)] * xi[0] + m[(2, 1)] * xi[1] + m[(2, 2)];
            let wx = cell_frame(cell.x0, cell.fx, origin[0]);
            let wy = cell_frame(cell.y0, cell.fy, origin[1]);
            let (ax, ay) = (qb[0] / hz, qb[1] / hz);
            let az = -(ax * wx + ay * wy);
            for kk in 0..3 {
                q_m[(0, kk)] += ax * xt[kk];
                q_m[(1, kk)] += ay * xt[kk];
                q_m[(2, kk)] += az * xt[kk];
            }
        }
        m_prev += q_m;
        m_bar = m_prev;
    }

    if !tape.options.detach_hessian {
        // D = H + mu diag(H), H = sum s s^T.
        let mut h_bar = d_bar;
        for kk in 0..8 {
            h_bar[(kk, kk)] *= 1.0 + sys.damping();
        }
        let sym = h_bar + h_bar.transpose();
        for (sb, sd) in sd_bar.iter_mut().zip(steepest) {
            let v = sym * Vec8::from(*sd);
            for kk in 0..8 {
                sb[kk] += v[kk];
            }
        }
    }

    // Steepest-descent rows to template gradients, then to the template.
    let (th, tw) = (sys.height(), sys.width());
    for c in 0..c_n {
        let mut gx_bar = vec![0.0; n];
        let mut gy_bar = vec![0.0; n];
        for j in 0..n {
            let jac = warp_jacobian(sys.coords()[j]);
            let sb = &sd_bar[c * n + j];
            for kk in 0..8 {
                gx_bar[j] += sb[kk] * jac[0][kk];
                gy_bar[j] += sb[kk] * jac[1][kk];
            }
        }
        gradient_adjoint_plane(&gx_bar, &gy_bar, th, tw, &mut t_bar[c * n..(c + 1) * n]);
    }
    Ok(FeatureGrads {
        template: t_bar,
        image: i_bar,
    })
}

/// Frame coordinate of a bilinear lookup along one axis.
#[inline]
fn cell_frame(i0: usize, f: f64, origin: f64) -> f64 {
    i0 as f64 + f + origin
}

/// Gradients of `seed * loss` with respect to every stack parameter. A
/// tape recorded without a stack has zero gradient.
pub fn backward(tape: &Tape, stack: &ConvStack, seed: f64) -> Result<ConvGrads> {
    let fg = backward_features(tape, seed)?;
    match &tape.features {
        Features::Identity => Ok(ConvGrads::zeros_like(stack)),
        Features::Conv {
            stack: recorded,
            template,
            image,
        } => {
            if recorded.shapes() != stack.shapes() {
                return Err(Error::IncompleteTape("tape was recorded with a different stack"));
            }
            let mut g = stack.backward(template, &fg.template)?;
            g.add_assign(&stack.backward(image, &fg.image)?);
            Ok(g)
        }
    }
}

/// One row of the training history. Validation rows carry `val_loss`.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: Option<f64>,
    pub val_loss: Option<f64>,
    pub mean_iters: Option<f64>,
}

/// Resumable training state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub stack: ConvStack,
    pub step: usize,
    pub best: ConvStack,
    pub best_step: usize,
    pub best_val: f64,
}

impl TrainState {
    pub fn fresh(stack: ConvStack) -> Self {
        TrainState {
            best: stack.clone(),
            stack,
            step: 0,
            best_step: 0,
            best_val: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
    /// Pairs whose forward pass failed and were left out of their batch.
    pub skipped_pairs: usize,
}

struct PairResult {
    loss: f64,
    iterations: usize,
    grads: ConvGrads,
}

fn pair_gradient(stack: &ConvStack, pair: &AlignmentPair, options: &ForwardOptions) -> Result<PairResult> {
    let tape = forward_pair(Some(stack), pair, options)?;
    let grads = backward(&tape, stack, 1.0)?;
    Ok(PairResult {
        loss: tape.loss,
        iterations: tape.iterations(),
        grads,
    })
}

/// Mean loss over `pairs`, leaving out pairs whose forward pass fails.
pub fn mean_loss(stack: &ConvStack, pairs: &[AlignmentPair], options: &ForwardOptions) -> f64 {
    let losses: Vec<Option<f64>> = pairs
        .par_iter()
        .map(|p| forward_pair(Some(stack), p, options).ok().map(|t| t.loss))
        .collect();
    let ok: Vec<f64> = losses.into_iter().flatten().collect();
    if ok.is_empty() {
        f64::NAN
    } else {
        ok.iter().sum::<f64>() / ok.len() as f64
    }
}

/// Plain SGD on the batch-mean loss with validation checkpointing.
pub fn train(cfg: &TrainConfig, pairs: &PairStream, stack: ConvStack) -> Result<TrainOutcome> {
    train_from(cfg, pairs, TrainState::fresh(stack), &mut |_, _| Ok(()))
}

/// [`train`] with every forward pass limited to one solver iteration.
pub fn train_single_iteration_mode(cfg: &TrainConfig, pairs: &PairStream, stack: ConvStack) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        mode: IterationMode::Single,
        ..cfg.clone()
    };
    train(&cfg, pairs, stack)
}

/// Continues training from `state` up to `cfg.steps`. `observer` sees the
/// state and the history so far after every validation.
pub fn train_from(
    cfg: &TrainConfig,
    pairs: &PairStream,
    mut state: TrainState,
    observer: &mut dyn FnMut(&TrainState, &[HistoryRow]) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let options = cfg.forward_options();
    let validation: Vec<AlignmentPair> = (0..cfg.validation_size as u64)
        .map(|i| pairs.validation_pair(i))
        .collect::<Result<_>>()?;
    let mut history = Vec::new();
    let mut skipped = 0;

    let mut validate = |state: &mut TrainState, history: &mut Vec<HistoryRow>, row: HistoryRow| -> Result<()> {
        let val = if validation.is_empty() {
            f64::NAN
        } else {
            mean_loss(&state.stack, &validation, &options)
        };
        if val < state.best_val {
            state.best_val = val;
            state.best = state.stack.clone();
            state.best_step = state.step;
        }
        history.push(HistoryRow {
            val_loss: Some(val),
            ..row
        });
        observer(state, history)
    };

    if state.step == 0 {
        validate(
            &mut state,
            &mut history,
            HistoryRow {
                step: 0,
                train_loss: None,
                val_loss: None,
                mean_iters: None,
            },
        )?;
    }

    while state.step < cfg.steps {
        let step = state.step + 1;
        let base = (step as u64 - 1) * cfg.batch_size as u64;
        let batch: Vec<AlignmentPair> = (0..cfg.batch_size as u64)
            .map(|i| pairs.train_pair(base + i))
            .collect::<Result<_>>()?;
        let results: Vec<Result<PairResult>> = batch
            .par_iter()
            .map(|p| pair_gradient(&state.stack, p, &options))
            .collect();
        let mut grads = ConvGrads::zeros_like(&state.stack);
        let (mut loss, mut iters, mut count) = (0.0, 0usize, 0usize);
        for r in results {
            match r {
                Ok(r) => {
                    loss += r.loss;
                    iters += r.iterations;
                    count += 1;
                    grads.add_assign(&r.grads);
                }
                Err(_) => skipped += 1,
            }
        }
        let loss = if count == 0 { f64::NAN } else { loss / count as f64 };
        let flat = grads.flatten();
        if !loss.is_finite() || flat.iter().any(|g| !g.is_finite()) {
            return Err(Error::DivergenceDetected { step });
        }
        let mut inv = 1.0 / count as f64;
        if let Some(c) = cfg.max_grad_norm {
            let norm = inv * flat.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                inv *= c / norm;
            }
        }
        let mut params = state.stack.params();
        for (p, g) in params.iter_mut().zip(&flat) {
            *p -= cfg.learning_rate * (g * inv);
        }
        state.stack.set_params(&params);
        state.step = step;
        let row = HistoryRow {
            step,
            train_loss: Some(loss),
            val_loss: None,
            mean_iters: Some(iters as f64 / count as f64),
        };
        if step % cfg.validation_interval == 0 || step == cfg.steps {
            validate(&mut state, &mut history, row)?;
        } else {
            history.push(row);
        }
    }
    Ok(TrainOutcome {
        state,
        history,
        skipped_pairs: skipped,
    })
}
