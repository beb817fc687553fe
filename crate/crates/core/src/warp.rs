//! Projective warp parameterization and homography algebra.
//!
//! A warp is either an 8-vector `p` (identity at `p = 0`) or the equivalent
//! 3x3 matrix
//!
//! ```text
//! [ 1 + p1   p3     p5 ]
//! [ p2       1 + p4 p6 ]
//! [ p7       p8     1  ]
//! ```
//!
//! so that `W(x; p) = ((1+p1) x + p3 y + p5, p2 x + (1+p4) y + p6) / (1 + p7 x + p8 y)`.
//! Pixel `(0, 0)` is the center of the top-left sample. All algebra is `f64`.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};

use crate::error::{Error, Result};

/// Absolute threshold for denominators and determinants.
pub const DEGENERACY_EPS: f64 = 1e-12;

pub type Point = [f64; 2];

/// The eight warp parameters, `p[0]` is `p1`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct WarpParams(pub [f64; 8]);

impl WarpParams {
    pub const fn identity() -> Self {
        WarpParams([0.0; 8])
    }

    pub const fn translation(dx: f64, dy: f64) -> Self {
        WarpParams([0.0, 0.0, 0.0, 0.0, dx, dy, 0.0, 0.0])
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        let p = &self.0;
        Matrix3::new(
            1.0 + p[0],
            p[2],
            p[4],
            p[1],
            1.0 + p[3],
            p[5],
            p[6],
            p[7],
            1.0,
        )
    }

    pub fn to_homography(&self) -> Homography {
        Homography(self.matrix())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// A 3x3 projective transform, kept normalized so that `m[(2, 2)] == 1`
/// whenever that entry is not vanishing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(Matrix3<f64>);

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        WarpParams::translation(dx, dy).to_homography()
    }

    /// Uniform scaling about the origin.
    pub fn scale(s: f64) -> Self {
        Homography(Matrix3::new(s, 0.0, 0.0, 0.0, s, 0.0, 0.0, 0.0, 1.0))
    }

    /// Wraps a matrix, normalizing the bottom-right entry to 1 when it is
    /// representable.
    pub fn from_matrix(m: Matrix3<f64>) -> Self {
        Homography(normalized(m))
    }

    pub fn from_row_slice(rows: &[f64; 9]) -> Self {
        Self::from_matrix(Matrix3::from_row_slice(rows))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Row-major entries.
    pub fn to_row_array(&self) -> [f64; 9] {
        let m = &self.0;
        [
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 0)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
            m[(2, 2)],
        ]
    }

    /// The parameter vector of this homography.
    pub fn params(&self) -> Result<WarpParams> {
        let m = &self.0;
        if (m[(2, 2)] - 1.0).abs() > 1e-9 {
            return Err(Error::DegenerateWarp("bottom-right entry is not representable"));
        }
        Ok(WarpParams([
            m[(0, 0)] - 1.0,
            m[(1, 0)],
            m[(0, 1)],
            m[(1, 1)] - 1.0,
            m[(0, 2)],
            m[(1, 2)],
            m[(2, 0)],
            m[(2, 1)],
        ]))
    }

    pub fn determinant(&self) -> f64 {
        self.0.determinant()
    }

    /// `self * other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Homography) -> Homography {
        Homography::from_matrix(self.0 * other.0)
    }

    pub fn inverse(&self) -> Result<Homography> {
        if self.determinant().abs() <= DEGENERACY_EPS {
            return Err(Error::DegenerateWarp("singular homography"));
        }
        self.0
            .try_inverse()
            .map(Homography::from_matrix)
            .ok_or(Error::DegenerateWarp("singular homography"))
    }

    pub fn apply(&self, x: Point) -> Result<Point> {
        apply_matrix(&self.0, x)
    }

    /// Largest absolute entry-wise difference to another homography.
    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.0 - other.0).abs().max()
    }
}

fn normalized(m: Matrix3<f64>) -> Matrix3<f64> {
    let w = m[(2, 2)];
    if w.abs() > DEGENERACY_EPS {
        m / w
    } else {
        m
    }
}

pub(crate) fn apply_matrix(m: &Matrix3<f64>, x: Point) -> Result<Point> {
    let h = m * Vector3::new(x[0], x[1], 1.0);
    if h[2].abs() <= DEGENERACY_EPS {
        return Err(Error::DegenerateWarp("point maps to infinity"));
    }
    Ok([h[0] / h[2], h[1] / h[2]])
}

/// Evaluates the parametric warp at a point, exactly as the closed form is
/// written (no matrix round trip).
pub fn warp_point(p: &WarpParams, x: Point) -> Result<Point> {
    let p = &p.0;
    let den = 1.0 + p[6] * x[0] + p[7] * x[1];
    if den.abs() <= DEGENERACY_EPS {
        return Err(Error::DegenerateWarp("point maps to infinity"));
    }
    Ok([
        ((1.0 + p[0]) * x[0] + p[2] * x[1] + p[4]) / den,
        (p[1] * x[0] + (1.0 + p[3]) * x[1] + p[5]) / den,
    ])
}

/// Derivative of the warped point with respect to `p`, evaluated at `p = 0`.
///
/// Columns follow the parameter order of [`WarpParams`]:
/// row 0 is `[x, 0, y, 0, 1, 0, -x^2, -xy]`, row 1 is `[0, x, 0, y, 0, 1, -xy, -y^2]`.
pub fn warp_jacobian(x: Point) -> [[f64; 8]; 2] {
    let (u, v) = (x[0], x[1]);
    [
        [u, 0.0, v, 0.0, 1.0, 0.0, -u * u, -u * v],
        [0.0, u, 0.0, v, 0.0, 1.0, -u * v, -v * v],
    ]
}

/// Inverse-compositional update `H_p <- H_p * H_dp^-1`, renormalized.
pub fn update_inverse_compositional(current: &Homography, delta: &WarpParams) -> Result<Homography> {
    let step = delta.to_homography();
    let inv = step.inverse()?;
    Ok(current.compose(&inv))
}

/// Maps a homography between coordinate frames related by uniform scaling:
/// returns `S H S^-1` with `S = diag(s, s, 1)`.
pub fn conjugate_by_scale(h: &Homography, s: f64) -> Homography {
    assert!(s > 0.0, "scale must be positive");
    let mut m = *h.matrix();
    m[(0, 2)] *= s;
    m[(1, 2)] *= s;
    m[(2, 0)] /= s;
    m[(2, 1)] /= s;
    Homography::from_matrix(m)
}

/// The homography sending each `src[i]` to `dst[i]`.
///
/// Corner order is top-left, top-right, bottom-right, bottom-left, although
/// any consistent order works.
pub fn homography_from_corner_offsets(src: &[Point; 4], dst: &[Point; 4]) -> Result<Homography> {
    check_non_collinear(src)?;
    check_non_collinear(dst)?;

    let (src_n, t_src) = condition(src);
    let (dst_n, t_dst) = condition(dst);

    // h33 = 1 leaves 8 unknowns for 8 equations.
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for i in 0..4 {
        let [x, y] = src_n[i];
        let [u, v] = dst_n[i];
        let r = 2 * i;
        a[(r, 0)] = x;
        a[(r, 1)] = y;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -u * x;
        a[(r, 7)] = -u * y;
        b[r] = u;
        a[(r + 1, 3)] = x;
        a[(r + 1, 4)] = y;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -v * x;
        a[(r + 1, 7)] = -v * y;
        b[r + 1] = v;
    }
    let h = a
        .lu()
        .solve(&b)
        .ok_or(Error::DegenerateConfiguration("corner system is singular"))?;
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    let t_dst_inv = t_dst
        .try_inverse()
        .ok_or(Error::DegenerateConfiguration("conditioning failed"))?;
    let m = t_dst_inv * hn * t_src;
    if m[(2, 2)].abs() <= DEGENERACY_EPS {
        return Err(Error::DegenerateConfiguration("origin maps to infinity"));
    }
    Ok(Homography::from_matrix(m))
}

fn check_non_collinear(pts: &[Point; 4]) -> Result<()> {
    let extent = pts
        .iter()
        .flat_map(|p| pts.iter().map(move |q| (p[0] - q[0]).hypot(p[1] - q[1])))
        .fold(0.0, f64::max);
    if extent <= DEGENERACY_EPS {
        return Err(Error::DegenerateConfiguration("coincident points"));
    }
    let tol = 1e-9 * extent * extent;
    for i in 0..4 {
        for j in (i + 1)..4 {
            for k in (j + 1)..4 {
                let (a, b, c) = (pts[i], pts[j], pts[k]);
                let cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]);
                if cross.abs() <= tol {
                    return Err(Error::DegenerateConfiguration("three collinear points"));
                }
            }
        }
    }
    Ok(())
}

// Translate to the centroid and scale to unit mean distance.
fn condition(pts: &[Point; 4]) -> ([Point; 4], Matrix3<f64>) {
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / 4.0;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / 4.0;
    let mean = pts
        .iter()
        .map(|p| (p[0] - cx).hypot(p[1] - cy))
        .sum::<f64>()
        / 4.0;
    let s = 1.0 / mean;
    let out = pts.map(|p| [(p[0] - cx) * s, (p[1] - cy) * s]);
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    (out, t)
}

/// The four corner sample centers of a `width x height` grid, in the order
/// top-left, top-right, bottom-right, bottom-left.
pub fn grid_corners(width: usize, height: usize) -> [Point; 4] {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn matrix_oracle_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        out
    }

    #[test]
    fn warp_point_examples() {
        let p = WarpParams([0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0]);
        assert_eq!(warp_point(&p, [3.0, 7.0]).unwrap(), [5.0, 7.0]);
        assert_eq!(warp_point(&WarpParams::identity(), [10.0, -4.0]).unwrap(), [10.0, -4.0]);
        let p = WarpParams([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1, 0.0]);
        let q = warp_point(&p, [10.0, 0.0]).unwrap();
        assert_abs_diff_eq!(q[0], 5.0, epsilon = 1e-15);
        assert_eq!(q[1], 0.0);
    }

    #[test]
    fn warp_point_at_infinity() {
        let p = WarpParams([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.1, 0.0]);
        assert!(matches!(warp_point(&p, [10.0, 0.0]), Err(Error::DegenerateWarp(_))));
    }

    #[test]
    fn jacobian_examples() {
        assert_eq!(
            warp_jacobian([0.0, 0.0]),
            [[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]]
        );
        assert_eq!(
            warp_jacobian([2.0, 3.0]),
            [
                [2.0, 0.0, 3.0, 0.0, 1.0, 0.0, -4.0, -6.0],
                [0.0, 2.0, 0.0, 3.0, 0.0, 1.0, -6.0, -9.0]
            ]
        );
    }

    #[test]
    fn jacobian_is_column_permutation_of_grouped_layout() {
        // The grouped layout lists (x, y, 1) per output row; the parameter order
        // interleaves them as p1=x-coef row 0, p2=x-coef row 1, and so on.
        let grouped = |x: f64, y: f64| {
            [
                [x, y, 1.0, 0.0, 0.0, 0.0, -x * x, -x * y],
                [0.0, 0.0, 0.0, x, y, 1.0, -x * y, -y * y],
            ]
        };
        let perm = [0, 3, 1, 4, 2, 5, 6, 7];
        for &(x, y) in &[(2.0, 3.0), (1.0, 1.0), (-4.5, 0.25)] {
            let g = grouped(x, y);
            let j = warp_jacobian([x, y]);
            for r in 0..2 {
                for c in 0..8 {
                    assert_eq!(j[r][c], g[r][perm[c]]);
                }
            }
        }
        assert_eq!(grouped(1.0, 1.0)[0], [1.0, 1.0, 1.0, 0.0, 0.0, 0.0, -1.0, -1.0]);
    }

    #[test]
    fn inverse_compositional_examples() {
        let h = update_inverse_compositional(&Homography::identity(), &WarpParams::translation(1.0, 0.0))
            .unwrap();
        assert!(h.max_abs_diff(&Homography::translation(-1.0, 0.0)) < 1e-15);

        let cur = Homography::translation(5.0, 0.0);
        let h = update_inverse_compositional(&cur, &WarpParams::identity()).unwrap();
        assert_eq!(h, cur);

        let scale2 = WarpParams([1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).to_homography();
        let h = update_inverse_compositional(&scale2, &WarpParams::translation(1.0, 0.0)).unwrap();
        // oracle: [[2,0,0],[0,2,0],[0,0,1]] * [[1,0,-1],[0,1,0],[0,0,1]]
        let expect = matrix_oracle_mul(
            &[[2.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]],
            &[[1.0, 0.0, -1.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        );
        assert_eq!(expect, [[2.0, 0.0, -2.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]]);
        let flat: Vec<f64> = expect.iter().flatten().copied().collect();
        for (a, b) in h.to_row_array().iter().zip(&flat) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn singular_delta_rejected() {
        let delta = WarpParams([-1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(
            update_inverse_compositional(&Homography::identity(), &delta),
            Err(Error::DegenerateWarp(_))
        ));
    }

    #[test]
    fn conjugate_examples() {
        let h = conjugate_by_scale(&Homography::translation(1.0, 0.0), 4.0);
        assert_eq!(h, Homography::translation(4.0, 0.0));
        assert_eq!(conjugate_by_scale(&Homography::identity(), 3.7), Homography::identity());

        let proj = WarpParams([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.1, 0.0]).to_homography();
        let got = conjugate_by_scale(&proj, 2.0);
        let s = Matrix3::new(2.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 1.0);
        let oracle = Homography::from_matrix(s * proj.matrix() * s.try_inverse().unwrap());
        assert!(got.max_abs_diff(&oracle) < 1e-15);
        assert_abs_diff_eq!(got.params().unwrap().0[6], 0.05, epsilon = 1e-15);
    }

    #[test]
    fn four_point_examples() {
        let src = grid_corners(11, 11);
        let h = homography_from_corner_offsets(&src, &src).unwrap();
        assert!(h.max_abs_diff(&Homography::identity()) < 1e-12);

        let dst = src.map(|p| [p[0] + 2.0, p[1]]);
        let h = homography_from_corner_offsets(&src, &dst).unwrap();
        assert!(h.max_abs_diff(&Homography::translation(2.0, 0.0)) < 1e-12);

        let unit = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
        let quad = [[0.0, 0.0], [1.0, 0.1], [1.1, 1.0], [0.0, 0.9]];
        let h = homography_from_corner_offsets(&unit, &quad).unwrap();
        for (s, d) in unit.iter().zip(&quad) {
            let q = h.apply(*s).unwrap();
            assert!((q[0] - d[0]).hypot(q[1] - d[1]) < 1e-8);
        }
    }

    #[test]
    fn four_point_collinear_rejected() {
        let src = [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [0.0, 1.0]];
        let dst = grid_corners(3, 3);
        assert!(matches!(
            homography_from_corner_offsets(&src, &dst),
            Err(Error::DegenerateConfiguration(_))
        ));
        assert!(matches!(
            homography_from_corner_offsets(&dst, &src),
            Err(Error::DegenerateConfiguration(_))
        ));
    }

    #[test]
    fn params_round_trip() {
        // Exact when 1 + p1 and 1 + p4 are representable, otherwise within an ulp of 1.
        let p = WarpParams([0.125, -0.2, 0.03, -0.25, 5.0, -6.0, 1e-3, -2e-3]);
        assert_eq!(p.to_homography().params().unwrap(), p);
        let p = WarpParams([0.1, -0.2, 0.03, 0.04, 5.0, -6.0, 1e-3, -2e-3]);
        let back = p.to_homography().params().unwrap();
        for (a, b) in back.0.iter().zip(&p.0) {
            assert!((a - b).abs() <= f64::EPSILON);
        }
    }

    fn small_params() -> impl Strategy<Value = WarpParams> {
        (
            prop::array::uniform6(-0.2f64..0.2),
            prop::array::uniform2(-1e-3f64..1e-3),
        )
            .prop_map(|(a, b)| {
                WarpParams([a[0], a[1], a[2], a[3], a[4] * 50.0, a[5] * 50.0, b[0], b[1]])
            })
    }

    proptest! {
        #[test]
        fn group_laws(p in small_params()) {
            let h = p.to_homography();
            prop_assert!(h.compose(&Homography::identity()).max_abs_diff(&h) < 1e-12);
            let id = h.compose(&h.inverse().unwrap());
            prop_assert!(id.max_abs_diff(&Homography::identity()) < 1e-9);
        }

        #[test]
        fn affine_warps_preserve_affine_combinations(
            a in prop::array::uniform6(-0.5f64..0.5),
            x in prop::array::uniform2(-100f64..100.0),
            y in prop::array::uniform2(-100f64..100.0),
            t in -2f64..2.0,
        ) {
            let p = WarpParams([a[0], a[1], a[2], a[3], a[4] * 10.0, a[5] * 10.0, 0.0, 0.0]);
            let z = [t * x[0] + (1.0 - t) * y[0], t * x[1] + (1.0 - t) * y[1]];
            let wz = warp_point(&p, z).unwrap();
            let wx = warp_point(&p, x).unwrap();
            let wy = warp_point(&p, y).unwrap();
            for k in 0..2 {
                prop_assert!((wz[k] - (t * wx[k] + (1.0 - t) * wy[k])).abs() < 1e-12 * (1.0 + wz[k].abs()));
            }
        }

        #[test]
        fn point_warp_matches_matrix(p in small_params(), x in prop::array::uniform2(-100f64..100.0)) {
            let a = warp_point(&p, x).unwrap();
            let b = p.to_homography().apply(x).unwrap();
            prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
        }
    }
}
