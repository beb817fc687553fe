//! Oracles and fixtures shared by the integration and acceptance tests.

#![allow(dead_code)]

use iclk::datagen::{derive_seed, sample_pair, synthetic_scene, AlignmentPair, PairConfig, Region, SourceSet};
use iclk::extract::{default_stack_shape, init_conv_stack, ConvStack};
use iclk::grid::{crop, warp_grid, FeatureGrid};
use iclk::training::{backward, forward_pair, ForwardOptions};
use iclk::warp::Homography;

/// Central difference of `f` at a step on a single smooth piece.
///
/// The loss is piecewise smooth (bilinear cells, rectifiers), so a step can
/// straddle a kink. Steps are halved from `1e-4` until two successive
/// estimates agree, and the agreeing estimate is returned. If none agree,
/// the estimate at `1e-4` is returned: it is the least sensitive to
/// rounding.
pub fn stable_central_difference(mut f: impl FnMut(f64) -> f64) -> f64 {
    let mut h = 1e-4;
    let first = (f(h) - f(-h)) / (2.0 * h);
    let mut prev = first;
    while h > 2e-7 {
        h *= 0.5;
        let d = (f(h) - f(-h)) / (2.0 * h);
        if (d - prev).abs() <= 1e-5 * d.abs().max(prev.abs()) + 1e-9 {
            return d;
        }
        prev = d;
    }
    first
}

/// Agreement rule for one parameter: relative error below `1e-3`, or both
/// values within `1e-8` of each other when the gradient is near zero.
pub fn gradients_agree(fd: f64, analytic: f64) -> (bool, Option<f64>) {
    if analytic.abs() <= 1e-8 && fd.abs() <= 1e-8 {
        return ((fd - analytic).abs() < 1e-8, None);
    }
    let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs());
    (rel < 1e-3, Some(rel))
}

/// A clean 32x32 pair on which the untrained default stack converges in at
/// least three iterations.
pub fn converging_pair(seed: u64) -> (AlignmentPair, ConvStack, usize) {
    let src = SourceSet::new(vec![synthetic_scene(140, 140, 100 + seed)]).unwrap();
    let cfg = PairConfig {
        patch_min: 32,
        patch_max: 32,
        max_noop_error_pct: 8.0,
        ..PairConfig::default()
    };
    let stack = init_conv_stack(&default_stack_shape(), seed).unwrap();
    for attempt in 0..100 {
        let pair = sample_pair(&src, Region::Full, &cfg, derive_seed(seed, 0, attempt)).unwrap();
        let tape = forward_pair(Some(&stack), &pair, &ForwardOptions::default()).unwrap();
        if tape.converged() && tape.iterations() >= 3 {
            return (pair, stack, tape.iterations());
        }
    }
    panic!("no converging pair for seed {seed}");
}

pub struct FdOutcome {
    pub iterations: usize,
    pub worst_rel: f64,
    pub failures: usize,
    pub params: usize,
}

/// Compares every parameter gradient of the full pipeline with the
/// step-stable central difference, holding the iteration count at the
/// realized one.
pub fn fd_gradient_pair(seed: u64) -> FdOutcome {
    let (pair, mut stack, iterations) = converging_pair(seed);
    let tape = forward_pair(Some(&stack), &pair, &ForwardOptions::default()).unwrap();
    let grads = backward(&tape, &stack, 1.0).unwrap().flatten();
    let fixed = ForwardOptions {
        exact_iterations: Some(iterations),
        ..ForwardOptions::default()
    };
    let base = stack.params();
    let mut worst_rel = 0.0f64;
    let mut failures = 0;
    for k in 0..base.len() {
        let fd = stable_central_difference(|h| {
            let mut p = base.clone();
            p[k] += h;
            stack.set_params(&p);
            forward_pair(Some(&stack), &pair, &fixed).unwrap().loss()
        });
        let (ok, rel) = gradients_agree(fd, grads[k]);
        if let Some(r) = rel {
            worst_rel = worst_rel.max(r);
        }
        if !ok {
            if std::env::var("FD_VERBOSE").is_ok() {
                println!("  param {k}: fd {fd:e} analytic {:e} loss {:e}", grads[k], tape.loss());
            }
            failures += 1;
        }
    }
    stack.set_params(&base);
    FdOutcome {
        iterations,
        worst_rel,
        failures,
        params: base.len(),
    }
}

/// An `n x n` template cut from a smooth synthetic scene and a padded image
/// whose content is the template shifted by `d`, so that the true warp is
/// `translation(d)`. The image's sample (0, 0) sits at frame `(-pad, -pad)`.
pub fn translated_pair(scene_seed: u64, loc: [usize; 2], d: [f64; 2], n: usize, pad: usize) -> (FeatureGrid, FeatureGrid) {
    let scene = synthetic_scene(loc[1] + n + 2 * pad + 8, loc[0] + n + 2 * pad + 8, scene_seed);
    let template = crop(&scene, loc[0] as isize, loc[1] as isize, n, n)
        .unwrap()
        .with_origin([0.0, 0.0]);
    let to_scene = Homography::translation(loc[0] as f64 - pad as f64 - d[0], loc[1] as f64 - pad as f64 - d[1]);
    let (image, mask) = warp_grid(&scene, &to_scene, n + 2 * pad, n + 2 * pad).unwrap();
    assert!(mask.all_valid(), "image window leaves the scene");
    (template, image.with_origin([-(pad as f64), -(pad as f64)]))
}
