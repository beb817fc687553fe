//! Multi-channel sample grids.
//!
//! A [`Grid`] stores `C x H x W` samples, channel-major then row-major. Each
//! grid also carries an `origin`: the coordinate, in the grid's canonical
//! frame, of sample `(0, 0)`. Plain images have origin `(0, 0)`; padded
//! patches and strided feature maps use it to stay registered with the frame
//! the warps are expressed in. Resampling operations ([`sample_bilinear`],
//! [`warp_grid`]) work in raw sample coordinates and ignore the origin.

use std::fmt::Debug;
use std::path::Path;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::warp::{apply_matrix, Homography, Point, DEGENERACY_EPS};

/// Scalar storage types for grids.
pub trait Sample: Copy + Default + Debug + PartialEq + Send + Sync + 'static {
    /// FGT1 dtype tag.
    const DTYPE: u8;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Sample for f32 {
    const DTYPE: u8 = 0;
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Sample for f64 {
    const DTYPE: u8 = 1;
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<T>,
    origin: Point,
}

/// Single-precision storage, the default for images and extracted features.
pub type FeatureGrid = Grid<f32>;

impl<T: Sample> Grid<T> {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::InvalidGrid(format!(
                "empty shape {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::InvalidGrid(format!(
                "expected {} samples for {channels}x{height}x{width}, got {}",
                channels * height * width,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.to_f64().is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite sample at index {i}")));
        }
        Ok(Grid {
            channels,
            height,
            width,
            data,
            origin: [0.0, 0.0],
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        assert!(channels > 0 && height > 0 && width > 0);
        Grid {
            channels,
            height,
            width,
            data: vec![T::default(); channels * height * width],
            origin: [0.0, 0.0],
        }
    }

    /// Builds a grid from a function of `(channel, y, x)`.
    ///
    /// Panics if the function yields a non-finite value.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(T::from_f64(f(c, y, x)));
                }
            }
        }
        Self::new(channels, height, width, data).expect("from_fn produced an invalid grid")
    }

    pub fn with_origin(mut self, origin: Point) -> Self {
        self.origin = origin;
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn origin(&self) -> Point {
        self.origin
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.at(c, y, x).to_f64()
    }

    pub fn cast<U: Sample>(&self) -> Grid<U> {
        Grid {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            origin: self.origin,
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.channels == other.channels && self.height == other.height && self.width == other.width
    }

    /// Largest absolute sample difference to a grid of the same shape.
    pub fn max_abs_diff<U: Sample>(&self, other: &Grid<U>) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// Neighbors and weights of one bilinear lookup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BilinearCell {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub fx: f64,
    pub fy: f64,
}

impl BilinearCell {
    /// Locates `x` inside a `width x height` grid; `None` outside
    /// `[0, W-1] x [0, H-1]`.
    #[inline]
    pub fn locate(width: usize, height: usize, x: Point) -> Option<Self> {
        let (u, v) = (x[0], x[1]);
        let (wmax, hmax) = ((width - 1) as f64, (height - 1) as f64);
        if !(u >= 0.0 && u <= wmax && v >= 0.0 && v <= hmax) {
            return None;
        }
        let (x0, x1, fx) = axis(u, width);
        let (y0, y1, fy) = axis(v, height);
        Some(BilinearCell {
            x0,
            y0,
            x1,
            y1,
            fx,
            fy,
        })
    }

    /// Interpolated value of channel `c`.
    #[inline]
    pub fn eval<T: Sample>(&self, g: &Grid<T>, c: usize) -> f64 {
        let a00 = g.get(c, self.y0, self.x0);
        let a01 = g.get(c, self.y0, self.x1);
        let a10 = g.get(c, self.y1, self.x0);
        let a11 = g.get(c, self.y1, self.x1);
        let top = (1.0 - self.fx) * a00 + self.fx * a01;
        let bottom = (1.0 - self.fx) * a10 + self.fx * a11;
        (1.0 - self.fy) * top + self.fy * bottom
    }

    /// Partial derivatives of the interpolated value of channel `c` with
    /// respect to the lookup coordinate, within this cell.
    #[inline]
    pub fn eval_gradient<T: Sample>(&self, g: &Grid<T>, c: usize) -> [f64; 2] {
        let a00 = g.get(c, self.y0, self.x0);
        let a01 = g.get(c, self.y0, self.x1);
        let a10 = g.get(c, self.y1, self.x0);
        let a11 = g.get(c, self.y1, self.x1);
        [
            (1.0 - self.fy) * (a01 - a00) + self.fy * (a11 - a10),
            (1.0 - self.fx) * (a10 - a00) + self.fx * (a11 - a01),
        ]
    }

    /// `(flat index within a plane, weight)` for the four neighbors.
    #[inline]
    pub fn weights(&self, width: usize) -> [(usize, f64); 4] {
        [
            (self.y0 * width + self.x0, (1.0 - self.fy) * (1.0 - self.fx)),
            (self.y0 * width + self.x1, (1.0 - self.fy) * self.fx),
            (self.y1 * width + self.x0, self.fy * (1.0 - self.fx)),
            (self.y1 * width + self.x1, self.fy * self.fx),
        ]
    }
}

#[inline]
fn axis(u: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let i0 = (u.floor() as usize).min(n - 2);
    (i0, i0 + 1, u - i0 as f64)
}

/// Bilinear interpolation at a continuous sample coordinate. Outside the
/// grid's support the value is all zeros and the flag is `false`.
pub fn sample_bilinear<T: Sample>(g: &Grid<T>, x: Point) -> (Vec<f64>, bool) {
    match BilinearCell::locate(g.width, g.height, x) {
        Some(cell) => ((0..g.channels).map(|c| cell.eval(g, c)).collect(), true),
        None => (vec![0.0; g.channels], false),
    }
}

/// Central-difference spatial gradients `(d/dx, d/dy)` per channel, with
/// one-sided differences on the border.
pub fn gradient<T: Sample>(g: &Grid<T>) -> Result<(Grid<T>, Grid<T>)> {
    if g.height < 3 || g.width < 3 {
        return Err(Error::GridTooSmall {
            min: 3,
            height: g.height,
            width: g.width,
        });
    }
    let (h, w) = (g.height, g.width);
    let mut gx = Vec::with_capacity(g.data.len());
    let mut gy = Vec::with_capacity(g.data.len());
    for c in 0..g.channels {
        for y in 0..h {
            for x in 0..w {
                gx.push(T::from_f64(diff_at(|i| g.get(c, y, i), x, w)));
            }
        }
        for y in 0..h {
            for x in 0..w {
                gy.push(T::from_f64(diff_at(|i| g.get(c, i, x), y, h)));
            }
        }
    }
    let mk = |data| Grid {
        channels: g.channels,
        height: h,
        width: w,
        data,
        origin: g.origin,
    };
    Ok((mk(gx), mk(gy)))
}

#[inline]
fn diff_at(f: impl Fn(usize) -> f64, i: usize, n: usize) -> f64 {
    if i == 0 {
        f(1) - f(0)
    } else if i == n - 1 {
        f(n - 1) - f(n - 2)
    } else {
        0.5 * (f(i + 1) - f(i - 1))
    }
}

/// Transpose of [`gradient`] for one plane: accumulates into `out` the
/// adjoint of the plane given adjoints of its x and y derivatives.
pub(crate) fn gradient_adjoint_plane(
    gx_bar: &[f64],
    gy_bar: &[f64],
    height: usize,
    width: usize,
    out: &mut [f64],
) {
    let idx = |y: usize, x: usize| y * width + x;
    for y in 0..height {
        for x in 0..width {
            let a = gx_bar[idx(y, x)];
            if a != 0.0 {
                if x == 0 {
                    out[idx(y, 1)] += a;
                    out[idx(y, 0)] -= a;
                } else if x == width - 1 {
                    out[idx(y, width - 1)] += a;
                    out[idx(y, width - 2)] -= a;
                } else {
                    out[idx(y, x + 1)] += 0.5 * a;
                    out[idx(y, x - 1)] -= 0.5 * a;
                }
            }
            let b = gy_bar[idx(y, x)];
            if b != 0.0 {
                if y == 0 {
                    out[idx(1, x)] += b;
                    out[idx(0, x)] -= b;
                } else if y == height - 1 {
                    out[idx(height - 1, x)] += b;
                    out[idx(height - 2, x)] -= b;
                } else {
                    out[idx(y + 1, x)] += 0.5 * b;
                    out[idx(y - 1, x)] -= 0.5 * b;
                }
            }
        }
    }
}

/// Per-pixel record of which warped lookups fell inside the source support.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    height: usize,
    width: usize,
    valid: Vec<bool>,
}

impl ValidityMask {
    pub fn new(height: usize, width: usize, valid: Vec<bool>) -> Self {
        assert_eq!(valid.len(), height * width);
        ValidityMask {
            height,
            width,
            valid,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.valid
    }

    pub fn count_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn all_valid(&self) -> bool {
        self.valid.iter().all(|v| *v)
    }
}

/// Resamples `g` so that output pixel `x` holds `g(h(x))`. Lookups outside
/// the source support, or mapped to infinity, are zero and marked invalid.
pub fn warp_grid<T: Sample>(
    g: &Grid<T>,
    h: &Homography,
    out_h: usize,
    out_w: usize,
) -> Result<(Grid<T>, ValidityMask)> {
    if h.determinant().abs() <= DEGENERACY_EPS {
        return Err(Error::DegenerateWarp("singular homography"));
    }
    let m: &Matrix3<f64> = h.matrix();
    let plane = out_h * out_w;
    let mut data = vec![T::default(); g.channels * plane];
    let mut valid = vec![false; plane];
    for y in 0..out_h {
        for x in 0..out_w {
            let Ok(q) = apply_matrix(m, [x as f64, y as f64]) else {
                continue;
            };
            if let Some(cell) = BilinearCell::locate(g.width, g.height, q) {
                let i = y * out_w + x;
                valid[i] = true;
                for c in 0..g.channels {
                    data[c * plane + i] = T::from_f64(cell.eval(g, c));
                }
            }
        }
    }
    Ok((
        Grid {
            channels: g.channels,
            height: out_h,
            width: out_w,
            data,
            origin: [0.0, 0.0],
        },
        ValidityMask::new(out_h, out_w, valid),
    ))
}

/// Standard deviation below which a channel is only mean-subtracted.
pub const NORMALIZE_MIN_STD: f64 = 1e-8;

/// Zero-mean, unit population variance per channel.
pub fn normalize_per_channel<T: Sample>(g: &Grid<T>) -> Grid<T> {
    let n = g.plane_len();
    let mut data = Vec::with_capacity(g.data.len());
    for c in 0..g.channels {
        let plane = g.channel(c);
        let mean = plane.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
        let var = plane
            .iter()
            .map(|v| (v.to_f64() - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.sqrt();
        let scale = if std >= NORMALIZE_MIN_STD { 1.0 / std } else { 1.0 };
        data.extend(plane.iter().map(|v| T::from_f64((v.to_f64() - mean) * scale)));
    }
    Grid {
        data,
        ..g.clone()
    }
}

/// Copies the `width x height` block whose top-left sample is `(x0, y0)`.
/// The origin of the result is shifted so that canonical coordinates are
/// preserved.
pub fn crop<T: Sample>(
    g: &Grid<T>,
    x0: isize,
    y0: isize,
    width: usize,
    height: usize,
) -> Result<Grid<T>> {
    if x0 < 0
        || y0 < 0
        || width == 0
        || height == 0
        || x0 as usize + width > g.width
        || y0 as usize + height > g.height
    {
        return Err(Error::OutOfBounds(format!(
            "block {width}x{height} at ({x0}, {y0}) does not fit in {}x{}",
            g.width, g.height
        )));
    }
    let (x0, y0) = (x0 as usize, y0 as usize);
    let mut data = Vec::with_capacity(g.channels * width * height);
    for c in 0..g.channels {
        for y in y0..y0 + height {
            let row = (c * g.height + y) * g.width;
            data.extend_from_slice(&g.data[row + x0..row + x0 + width]);
        }
    }
    Ok(Grid {
        channels: g.channels,
        height,
        width,
        data,
        origin: [g.origin[0] + x0 as f64, g.origin[1] + y0 as f64],
    })
}

/// Extracts a square `size` patch at `top_left` together with `pad` extra
/// samples on every side. The result's origin is `(-pad, -pad)`, so the
/// unpadded patch occupies canonical coordinates `[0, size-1]^2`.
pub fn extract_patch<T: Sample>(
    g: &Grid<T>,
    top_left: [usize; 2],
    size: usize,
    pad: usize,
) -> Result<Grid<T>> {
    let x0 = top_left[0] as isize - pad as isize;
    let y0 = top_left[1] as isize - pad as isize;
    let side = size + 2 * pad;
    let mut out = crop(g, x0, y0, side, side)?;
    out.origin = [-(pad as f64), -(pad as f64)];
    Ok(out)
}

/// Channel mean; identity for single-channel grids.
pub fn to_grayscale<T: Sample>(g: &Grid<T>) -> Grid<T> {
    if g.channels == 1 {
        return g.clone();
    }
    let n = g.plane_len();
    let data = (0..n)
        .map(|i| {
            let s: f64 = (0..g.channels).map(|c| g.data[c * n + i].to_f64()).sum();
            T::from_f64(s / g.channels as f64)
        })
        .collect();
    Grid {
        channels: 1,
        data,
        ..g.clone()
    }
}

/// Loads a PNG or JPEG as a grayscale (1 channel) or RGB (3 channel) grid
/// with samples in `[0, 1]`. Alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    let path = path.as_ref();
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb32f();
        let px = rgb.as_raw();
        let data = (0..3)
            .flat_map(|c| (0..w * h).map(move |i| px[3 * i + c]))
            .collect();
        Grid::new(3, h, w, data)
    } else {
        let luma = img.to_luma32f();
        Grid::new(1, h, w, luma.into_raw())
    }
}

/// Writes a 1- or 3-channel grid with samples in `[0, 1]` as an 8-bit PNG.
pub fn save_png<T: Sample>(g: &Grid<T>, path: impl AsRef<Path>) -> Result<()> {
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (g.width as u32, g.height as u32);
    let n = g.plane_len();
    match g.channels {
        1 => {
            let buf: Vec<u8> = g.data.iter().map(|v| to_u8(v.to_f64())).collect();
            image::GrayImage::from_raw(w, h, buf)
                .expect("buffer size")
                .save(path.as_ref())?;
        }
        3 => {
            let buf: Vec<u8> = (0..n)
                .flat_map(|i| (0..3).map(move |c| (c, i)))
                .map(|(c, i)| to_u8(g.data[c * n + i].to_f64()))
                .collect();
            image::RgbImage::from_raw(w, h, buf)
                .expect("buffer size")
                .save(path.as_ref())?;
        }
        c => {
            return Err(Error::ShapeMismatch(format!(
                "cannot write {c}-channel grid as PNG"
            )))
        }
    }
    Ok(())
}
