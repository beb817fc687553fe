//! Synthetic alignment pairs: patch sampling from co-registered sources,
//! bounded random homographies and photometric perturbation.
//!
//! A pair's template is an unwarped `n x n` patch; its image is a padded
//! `(n + 2 pad)^2` patch resampled so that template point `x` appears at
//! image point `gt_warp(x)`. Both live in the template's frame, with the
//! image grid's origin at `(-pad, -pad)`.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{crop, warp_grid, FeatureGrid, Grid};
use crate::loss::corner_error_pct;
use crate::warp::{grid_corners, homography_from_corner_offsets, Homography, Point};

/// Attempts allowed before [`random_bounded_warp`] gives up.
pub const REJECTION_BUDGET: usize = 1000;

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seed for item `index` of sub-stream `stream`.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    mix(mix(mix(base) ^ stream) ^ index)
}

pub fn default_pad(patch_size: usize) -> usize {
    (0.35 * patch_size as f64).ceil() as usize
}

/// Which columns of the source frames a sampler may touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Train,
    Test,
    Full,
}

/// Co-registered frames of one scene, optionally split into a training
/// region and a held-out region of contiguous columns on the right.
#[derive(Clone, Debug)]
pub struct SourceSet {
    frames: Vec<FeatureGrid>,
    test_x0: Option<usize>,
}

impl SourceSet {
    pub fn new(frames: Vec<FeatureGrid>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Config("source set needs at least one frame".into()))?;
        if !matches!(first.channels(), 1 | 3) {
            return Err(Error::ShapeMismatch("source frames must have 1 or 3 channels".into()));
        }
        if frames.iter().any(|f| !f.same_shape(first)) {
            return Err(Error::ShapeMismatch("source frames differ in shape".into()));
        }
        Ok(SourceSet {
            frames,
            test_x0: None,
        })
    }

    pub fn frames(&self) -> &[FeatureGrid] {
        &self.frames
    }

    pub fn height(&self) -> usize {
        self.frames[0].height()
    }

    pub fn width(&self) -> usize {
        self.frames[0].width()
    }

    pub fn channels(&self) -> usize {
        self.frames[0].channels()
    }

    pub fn is_split(&self) -> bool {
        self.test_x0.is_some()
    }

    pub fn columns(&self, region: Region) -> Range<usize> {
        let w = self.width();
        match (region, self.test_x0) {
            (Region::Full, _) | (Region::Train, None) | (Region::Test, None) => 0..w,
            (Region::Train, Some(x0)) => 0..x0,
            (Region::Test, Some(x0)) => x0..w,
        }
    }

    /// Row-major membership mask of a region.
    pub fn region_mask(&self, region: Region) -> Vec<bool> {
        let cols = self.columns(region);
        let w = self.width();
        (0..self.height() * w).map(|i| cols.contains(&(i % w))).collect()
    }
}

/// Holds out the rightmost `round(fraction * width)` columns.
pub fn split_train_test(src: &SourceSet, test_fraction: f64) -> Result<SourceSet> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config("test fraction must lie in (0, 1)".into()));
    }
    let w = src.width();
    let held = (test_fraction * w as f64).round() as usize;
    Ok(SourceSet {
        frames: src.frames.clone(),
        test_x0: Some(w - held),
    })
}

/// Multi-octave value noise in `[0, 1]`, a stand-in for natural imagery.
pub fn synthetic_scene(height: usize, width: usize, seed: u64) -> FeatureGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0f64; height * width];
    let mut cell = 24.0;
    let mut amp = 1.0;
    while cell >= 1.5 {
        add_value_noise(&mut acc, height, width, cell, amp, &mut rng);
        cell /= 2.0;
        amp *= 0.65;
    }
    let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    Grid::from_fn(1, height, width, |_, y, x| (acc[y * width + x] - lo) / span)
}

/// Adds one octave of smoothly interpolated lattice noise with values in
/// `[0, amp]` and lattice spacing `cell`.
fn add_value_noise(acc: &mut [f64], height: usize, width: usize, cell: f64, amp: f64, rng: &mut impl Rng) {
    let gw = (width as f64 / cell).ceil() as usize + 2;
    let gh = (height as f64 / cell).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
    let (ox, oy) = (rng.random::<f64>(), rng.random::<f64>());
    for y in 0..height {
        let v = y as f64 / cell + oy;
        let (iy, ty) = (v.floor() as usize, smoothstep(v.fract()));
        for x in 0..width {
            let u = x as f64 / cell + ox;
            let (ix, tx) = (u.floor() as usize, smoothstep(u.fract()));
            let l = |j: usize, i: usize| lattice[j * gw + i];
            let top = l(iy, ix) * (1.0 - tx) + l(iy, ix + 1) * tx;
            let bot = l(iy + 1, ix) * (1.0 - tx) + l(iy + 1, ix + 1) * tx;
            acc[y * width + x] += amp * (top * (1.0 - ty) + bot * ty);
        }
    }
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Magnitudes of the random photometric changes. All zero is the identity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhotometricConfig {
    /// Global gain is `exp(u)`, `u` uniform in `[-gain_log, gain_log]`.
    pub gain_log: f64,
    /// Per-channel gain spread, same form as `gain_log`.
    pub channel_gain_log: f64,
    /// Bias is uniform in `[-bias, bias]`.
    pub bias: f64,
    /// Gamma is `exp(u)`, `u` uniform in `[-gamma_log, gamma_log]`.
    pub gamma_log: f64,
    /// Probability of inverting intensities.
    pub invert_prob: f64,
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Amplitude of the smooth multiplicative shading field.
    pub shading: f64,
}

/// One concrete draw of [`PhotometricConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct PhotometricParams {
    pub gain: f64,
    pub channel_gains: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
    pub invert: bool,
    pub noise_sigma: f64,
    pub shading: f64,
}

impl PhotometricParams {
    pub fn identity(channels: usize) -> Self {
        PhotometricParams {
            gain: 1.0,
            channel_gains: vec![1.0; channels],
            bias: 0.0,
            gamma: 1.0,
            invert: false,
            noise_sigma: 0.0,
            shading: 0.0,
        }
    }
}

fn sym(rng: &mut impl Rng, a: f64) -> f64 {
    if a > 0.0 {
        rng.random_range(-a..=a)
    } else {
        0.0
    }
}

impl PhotometricConfig {
    pub fn sample(&self, channels: usize, rng: &mut impl Rng) -> PhotometricParams {
        PhotometricParams {
            gain: sym(rng, self.gain_log).exp(),
            channel_gains: (0..channels).map(|_| sym(rng, self.channel_gain_log).exp()).collect(),
            bias: sym(rng, self.bias),
            gamma: sym(rng, self.gamma_log).exp(),
            invert: self.invert_prob > 0.0 && rng.random::<f64>() < self.invert_prob,
            noise_sigma: self.noise_sigma,
            shading: self.shading,
        }
    }
}

/// Applies a concrete photometric change: gamma, optional inversion,
/// gains and bias, shading, then noise, clamped to `[0, 1]`. `seed` drives
/// the shading field and the noise.
pub fn apply_photometric(g: &FeatureGrid, p: &PhotometricParams, seed: u64) -> FeatureGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (g.height(), g.width());
    let shading_field = (p.shading > 0.0).then(|| {
        // One coarse octave, spanning the grid with a few lattice cells.
        let mut field = vec![0.0; h * w];
        add_value_noise(&mut field, h, w, (h.max(w) as f64 / 2.0).max(1.0), 2.0, &mut rng);
        field.iter_mut().for_each(|v| *v -= 1.0);
        field
    });
    let noise = (p.noise_sigma > 0.0).then(|| Normal::new(0.0, p.noise_sigma).expect("finite sigma"));
    Grid::from_fn(g.channels(), h, w, |c, y, x| {
        let i = y * w + x;
        let mut v = g.get(c, y, x).max(0.0);
        if p.gamma != 1.0 {
            v = v.powf(p.gamma);
        }
        if p.invert {
            v = 1.0 - v;
        }
        v = v * p.gain * p.channel_gains.get(c).copied().unwrap_or(1.0) + p.bias;
        if let Some(f) = &shading_field {
            v *= 1.0 + p.shading * f[i];
        }
        if let Some(n) = &noise {
            v += n.sample(&mut rng);
        }
        v.clamp(0.0, 1.0)
    })
    .with_origin(g.origin())
}

/// Seeded random photometric change drawn from `cfg`.
pub fn photometric_perturb(g: &FeatureGrid, cfg: &PhotometricConfig, seed: u64) -> FeatureGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = cfg.sample(g.channels(), &mut rng);
    apply_photometric(g, &params, rng.random())
}

/// A homography for an `n x n` patch whose no-op corner error is at most
/// `max_noop_error_pct` percent of `n`.
///
/// Each corner moves by an independent uniform offset in a square of
/// half-side `max_noop_error_pct / 100 * n`; draws are rejected until the
/// bound holds and the warp is well-conditioned over the default padded
/// image.
pub fn random_bounded_warp(patch_size: usize, max_noop_error_pct: f64, seed: u64) -> Result<Homography> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    bounded_warp(patch_size, max_noop_error_pct, default_pad(patch_size), &mut rng)
}

fn bounded_warp(n: usize, bound: f64, pad: usize, rng: &mut impl Rng) -> Result<Homography> {
    if !(bound > 0.0 && bound <= 50.0) {
        return Err(Error::Config("no-op error bound must lie in (0, 50]".into()));
    }
    if n < 2 {
        return Err(Error::Config("patch size must be at least 2".into()));
    }
    let corners = grid_corners(n, n);
    let r = bound / 100.0 * n as f64;
    for _ in 0..REJECTION_BUDGET {
        let dst = corners.map(|c| [c[0] + rng.random_range(-r..=r), c[1] + rng.random_range(-r..=r)]);
        let Ok(h) = homography_from_corner_offsets(&corners, &dst) else {
            continue;
        };
        if !well_conditioned(&h, n, pad) {
            continue;
        }
        match corner_error_pct(&Homography::identity(), &h, &corners, n as f64) {
            Ok(e) if e <= bound => return Ok(h),
            _ => continue,
        }
    }
    Err(Error::RejectionBudgetExhausted(REJECTION_BUDGET))
}

fn padded_box(n: usize, pad: usize) -> [Point; 4] {
    let (lo, hi) = (-(pad as f64), (n - 1 + pad) as f64);
    [[lo, lo], [hi, lo], [hi, hi], [lo, hi]]
}

fn ccw_convex(q: &[Point; 4]) -> Option<f64> {
    let mut sign = 0.0;
    for i in 0..4 {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        let cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0]);
        if cross == 0.0 || (sign != 0.0 && cross.signum() != sign) {
            return None;
        }
        sign = cross.signum();
    }
    Some(sign)
}

/// Smallest ratio between projective denominators accepted over the
/// template (forward) and over the padded image (inverse); bounds the
/// perspective stretch to 2x.
const MIN_DENOMINATOR_RATIO: f64 = 0.5;

fn denominator_ratio(h: &Homography, pts: &[Point; 4]) -> f64 {
    let m = h.matrix();
    let d = pts.map(|p| m[(2, 0)] * p[0] + m[(2, 1)] * p[1] + m[(2, 2)]);
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if lo > 0.0 {
        lo / hi
    } else {
        0.0
    }
}

/// Orientation-preserving, convex on the template, and with bounded
/// perspective stretch over the padded image.
fn well_conditioned(h: &Homography, n: usize, pad: usize) -> bool {
    if h.determinant() <= 1e-6 {
        return false;
    }
    let Ok(inv) = h.inverse() else { return false };
    let corners = grid_corners(n, n);
    if denominator_ratio(&inv, &padded_box(n, pad)) < MIN_DENOMINATOR_RATIO
        || denominator_ratio(h, &corners) < MIN_DENOMINATOR_RATIO
    {
        return false;
    }
    let Ok(img) = corners
        .iter()
        .map(|c| h.apply(*c))
        .collect::<Result<Vec<_>>>()
    else {
        return false;
    };
    let src = ccw_convex(&corners);
    let dst = ccw_convex(&[img[0], img[1], img[2], img[3]]);
    src.is_some() && src == dst
}

/// How pairs are drawn.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairConfig {
    pub patch_min: usize,
    pub patch_max: usize,
    pub max_noop_error_pct: f64,
    /// Padding around the image side; `None` is `ceil(0.35 n)`.
    pub pad: Option<usize>,
    /// Applied independently to both sides of each pair.
    pub photometric: PhotometricConfig,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            patch_min: 175,
            patch_max: 300,
            max_noop_error_pct: 30.0,
            pad: None,
            photometric: PhotometricConfig::default(),
        }
    }
}

impl PairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_min < 8 || self.patch_min > self.patch_max {
            return Err(Error::Config("patch size range must satisfy 8 <= min <= max".into()));
        }
        if !(self.max_noop_error_pct > 0.0 && self.max_noop_error_pct <= 50.0) {
            return Err(Error::Config("no-op error bound must lie in (0, 50]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub template_frame: usize,
    pub image_frame: usize,
    /// Source column and row of the template's top-left sample.
    pub location: [usize; 2],
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct AlignmentPair {
    pub template: FeatureGrid,
    pub image: FeatureGrid,
    /// Template frame to image frame.
    pub gt_warp: Homography,
    pub patch_size: usize,
    pub pad: usize,
    pub provenance: Provenance,
}

impl AlignmentPair {
    pub fn corners(&self) -> [Point; 4] {
        grid_corners(self.patch_size, self.patch_size)
    }

    /// Corner error of predicting the identity.
    pub fn noop_error_pct(&self) -> f64 {
        corner_error_pct(
            &self.gt_warp,
            &Homography::identity(),
            &self.corners(),
            self.patch_size as f64,
        )
        .expect("validated pairs have finite corners")
    }

    /// Checks the pair's own invariants.
    pub fn validate(&self, max_noop_error_pct: f64) -> Result<()> {
        let n = self.patch_size;
        let side = n + 2 * self.pad;
        if self.template.height() != n
            || self.template.width() != n
            || self.image.height() != side
            || self.image.width() != side
        {
            return Err(Error::ShapeMismatch("pair grids do not match patch geometry".into()));
        }
        let (lo, hi) = (-(self.pad as f64), (n - 1 + self.pad) as f64);
        for c in self.corners() {
            let q = self.gt_warp.apply(c)?;
            if !(q[0] >= lo && q[0] <= hi && q[1] >= lo && q[1] <= hi) {
                return Err(Error::OutOfBounds("warped template corner leaves the padded image".into()));
            }
        }
        if self.noop_error_pct() > max_noop_error_pct + 1e-9 {
            return Err(Error::Config("pair exceeds its no-op error bound".into()));
        }
        Ok(())
    }
}

/// Draws one pair from `region` of `src`, deterministically in `seed`.
pub fn sample_pair(src: &SourceSet, region: Region, cfg: &PairConfig, seed: u64) -> Result<AlignmentPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.patch_min..=cfg.patch_max);
    let pad = cfg.pad.unwrap_or_else(|| default_pad(n));
    let nf = src.frames.len();
    let fa = rng.random_range(0..nf);
    let fb = if nf > 1 {
        (fa + rng.random_range(1..nf)) % nf
    } else {
        fa
    };
    let gt = bounded_warp(n, cfg.max_noop_error_pct, pad, &mut rng)?;
    let inv = gt.inverse()?;

    // Source extent, relative to the template's top-left, that both sides
    // need, with one sample of margin.
    let pre: Vec<Point> = padded_box(n, pad)
        .iter()
        .map(|p| inv.apply(*p))
        .collect::<Result<_>>()?;
    let lo_x = pre.iter().map(|p| p[0]).fold(0.0, f64::min) - 1.0;
    let lo_y = pre.iter().map(|p| p[1]).fold(0.0, f64::min) - 1.0;
    let hi_x = pre.iter().map(|p| p[0]).fold((n - 1) as f64, f64::max) + 1.0;
    let hi_y = pre.iter().map(|p| p[1]).fold((n - 1) as f64, f64::max) + 1.0;

    let cols = src.columns(region);
    let range = |lo: f64, hi: f64, a: usize, b: usize| -> Option<(usize, usize)> {
        let first = (a as f64 - lo).ceil();
        let last = ((b as f64 - 1.0) - hi).floor();
        (b > a && first >= 0.0 && last >= first).then_some((first as usize, last as usize))
    };
    let (Some((x_first, x_last)), Some((y_first, y_last))) = (
        range(lo_x, hi_x, cols.start, cols.end),
        range(lo_y, hi_y, 0, src.height()),
    ) else {
        return Err(Error::SourceTooSmall(format!(
            "a {n}px patch with {pad}px padding and this warp does not fit in the {:?} region ({} columns x {} rows)",
            region,
            cols.len(),
            src.height()
        )));
    };
    let loc = [rng.random_range(x_first..=x_last), rng.random_range(y_first..=y_last)];

    let template = crop(&src.frames[fa], loc[0] as isize, loc[1] as isize, n, n)?.with_origin([0.0, 0.0]);

    let cx0 = (loc[0] as f64 + lo_x).floor() as usize;
    let cy0 = (loc[1] as f64 + lo_y).floor() as usize;
    let cx1 = (loc[0] as f64 + hi_x).ceil() as usize;
    let cy1 = (loc[1] as f64 + hi_y).ceil() as usize;
    let region_img = crop(&src.frames[fb], cx0 as isize, cy0 as isize, cx1 - cx0 + 1, cy1 - cy0 + 1)?;
    let side = n + 2 * pad;
    let sampler = Homography::translation(loc[0] as f64 - cx0 as f64, loc[1] as f64 - cy0 as f64)
        .compose(&inv)
        .compose(&Homography::translation(-(pad as f64), -(pad as f64)));
    let (image, mask) = warp_grid(&region_img, &sampler, side, side)?;
    if !mask.all_valid() {
        return Err(Error::OutOfBounds("padded image is not fully covered by the source".into()));
    }
    let image = image.with_origin([-(pad as f64), -(pad as f64)]);

    let photo = &cfg.photometric;
    let (template, image) = if *photo == PhotometricConfig::default() {
        (template, image)
    } else {
        (
            photometric_perturb(&template, photo, rng.random()),
            photometric_perturb(&image, photo, rng.random()),
        )
    };

    let pair = AlignmentPair {
        template,
        image,
        gt_warp: gt,
        patch_size: n,
        pad,
        provenance: Provenance {
            template_frame: fa,
            image_frame: fb,
            location: loc,
            seed,
        },
    };
    pair.validate(cfg.max_noop_error_pct)?;
    Ok(pair)
}

/// Seed streams of a [`PairStream`].
pub mod streams {
    pub const TRAIN: u64 = 1;
    pub const VALIDATION: u64 = 2;
    pub const EVALUATION: u64 = 3;
}

/// Deterministic pair streams over a split source: training pairs come from
/// the training columns, validation and evaluation pairs from the held-out
/// columns.
#[derive(Clone, Debug)]
pub struct PairStream {
    pub source: SourceSet,
    pub config: PairConfig,
    pub seed: u64,
}

impl PairStream {
    pub fn new(source: SourceSet, config: PairConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if !source.is_split() {
            return Err(Error::Config("pair streams need a train/test split".into()));
        }
        Ok(PairStream { source, config, seed })
    }

    pub fn pair(&self, stream: u64, index: u64) -> Result<AlignmentPair> {
        let region = if stream == streams::TRAIN {
            Region::Train
        } else {
            Region::Test
        };
        sample_pair(&self.source, region, &self.config, derive_seed(self.seed, stream, index))
    }

    pub fn train_pair(&self, index: u64) -> Result<AlignmentPair> {
        self.pair(streams::TRAIN, index)
    }

    pub fn validation_pair(&self, index: u64) -> Result<AlignmentPair> {
        self.pair(streams::VALIDATION, index)
    }

    pub fn evaluation_pair(&self, index: u64) -> Result<AlignmentPair> {
        self.pair(streams::EVALUATION, index)
    }
}
