//! Alignment losses and the corner-error metric.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::warp::{apply_matrix, Homography, Point, WarpParams};

/// Sum over the corners of the squared distance between where the two warps
/// send each corner.
pub fn corner_loss(gt: &Homography, est: &Homography, corners: &[Point; 4]) -> Result<f64> {
    Ok(corner_distances(gt, est, corners)?.iter().map(|d| d * d).sum())
}

/// Mean corner displacement between the two warps as a percentage of
/// `width`.
pub fn corner_error_pct(gt: &Homography, est: &Homography, corners: &[Point; 4], width: f64) -> Result<f64> {
    if !(width > 0.0) {
        return Err(Error::Config("corner error needs a positive width".into()));
    }
    let d = corner_distances(gt, est, corners)?;
    Ok(d.iter().sum::<f64>() / 4.0 / width * 100.0)
}

pub fn corner_distances(gt: &Homography, est: &Homography, corners: &[Point; 4]) -> Result<[f64; 4]> {
    let mut out = [0.0; 4];
    for (o, c) in out.iter_mut().zip(corners) {
        let a = gt.apply(*c)?;
        let b = est.apply(*c)?;
        *o = (a[0] - b[0]).hypot(a[1] - b[1]);
    }
    Ok(out)
}

#[inline]
fn huber(a: f64, delta: f64) -> f64 {
    let a = a.abs();
    if a <= delta {
        0.5 * a * a
    } else {
        delta * (a - 0.5 * delta)
    }
}

#[inline]
fn huber_grad(a: f64, delta: f64) -> f64 {
    a.clamp(-delta, delta)
}

/// Huber penalty on the parameter difference, summed over the 8 components.
pub fn conditional_huber_loss(gt: &WarpParams, est: &WarpParams, delta: f64) -> f64 {
    est.0.iter().zip(&gt.0).map(|(e, g)| huber(e - g, delta)).sum()
}

/// Which scalar training minimizes.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LossKind {
    Corner,
    ConditionalHuber { delta: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::Corner
    }
}

/// Loss value and its gradient with respect to the entries of `est`'s
/// matrix (assumed normalized so that the bottom-right entry is 1).
pub(crate) fn loss_and_grad(
    kind: LossKind,
    gt: &Homography,
    est: &Homography,
    corners: &[Point; 4],
) -> Result<(f64, Matrix3<f64>)> {
    match kind {
        LossKind::Corner => {
            let m = est.matrix();
            let mut loss = 0.0;
            let mut grad = Matrix3::zeros();
            for c in corners {
                let g = gt.apply(*c)?;
                let w = apply_matrix(m, *c)?;
                let (dx, dy) = (w[0] - g[0], w[1] - g[1]);
                loss += dx * dx + dy * dy;
                let ct = Vector3::new(c[0], c[1], 1.0);
                let hw = (m.row(2) * ct)[0];
                let (bx, by) = (2.0 * dx / hw, 2.0 * dy / hw);
                let bz = -(bx * w[0] + by * w[1]);
                for k in 0..3 {
                    grad[(0, k)] += bx * ct[k];
                    grad[(1, k)] += by * ct[k];
                    grad[(2, k)] += bz * ct[k];
                }
            }
            Ok((loss, grad))
        }
        LossKind::ConditionalHuber { delta } => {
            let pg = gt.params()?;
            let pe = est.params()?;
            let loss = conditional_huber_loss(&pg, &pe, delta);
            let d: Vec<f64> = (0..8).map(|k| huber_grad(pe.0[k] - pg.0[k], delta)).collect();
            let grad = Matrix3::new(d[0], d[2], d[4], d[1], d[3], d[5], d[6], d[7], 0.0);
            Ok((loss, grad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warp::{grid_corners, warp_point};
    use approx::assert_relative_eq;

    #[test]
    fn worked_examples() {
        let c = grid_corners(101, 101);
        let h = Homography::from_row_slice(&[1.1, 0.02, 3.0, -0.05, 0.95, 1.0, 1e-4, -2e-4, 1.0]);
        assert_eq!(corner_loss(&h, &h, &c).unwrap(), 0.0);
        assert_eq!(corner_error_pct(&h, &h, &c, 100.0).unwrap(), 0.0);
        let t = Homography::translation(3.0, 4.0);
        assert_relative_eq!(
            corner_loss(&Homography::identity(), &t, &c).unwrap(),
            4.0 * 25.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            corner_error_pct(&Homography::identity(), &t, &c, 100.0).unwrap(),
            5.0,
            max_relative = 1e-12
        );
        let z = WarpParams::identity();
        let mut p = z;
        assert_eq!(conditional_huber_loss(&z, &p, 1.0), 0.0);
        p.0[3] = 0.5;
        assert_eq!(conditional_huber_loss(&z, &p, 1.0), 0.125);
        p.0[3] = 2.0;
        assert_eq!(conditional_huber_loss(&z, &p, 1.0), 1.5);
    }

    #[test]
    fn corner_loss_matches_direct_evaluation() {
        let c = grid_corners(48, 48);
        let pa = WarpParams([0.05, -0.02, 0.03, 0.01, 2.0, -1.0, 1e-4, 2e-4]);
        let pb = WarpParams([-0.03, 0.04, 0.0, 0.02, -1.5, 0.5, -2e-4, 1e-4]);
        let mut oracle = 0.0;
        for x in &c {
            let a = warp_point(&pa, *x).unwrap();
            let b = warp_point(&pb, *x).unwrap();
            oracle += (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        }
        let got = corner_loss(&pa.to_homography(), &pb.to_homography(), &c).unwrap();
        assert_relative_eq!(got, oracle, max_relative = 1e-12);
        let d = corner_distances(&pa.to_homography(), &pb.to_homography(), &c).unwrap();
        let pct = corner_error_pct(&pa.to_homography(), &pb.to_homography(), &c, 48.0).unwrap();
        assert_relative_eq!(pct, d.iter().sum::<f64>() / (4.0 * 48.0) * 100.0, max_relative = 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let c = grid_corners(32, 32);
        let gt = Homography::from_row_slice(&[1.02, 0.01, 1.5, -0.03, 0.97, -0.5, 2e-4, 1e-4, 1.0]);
        let est = Homography::from_row_slice(&[0.99, -0.02, 0.3, 0.01, 1.01, 0.8, -1e-4, 3e-4, 1.0]);
        for kind in [LossKind::Corner, LossKind::ConditionalHuber { delta: 0.5 }] {
            let (_, g) = loss_and_grad(kind, &gt, &est, &c).unwrap();
            for a in 0..3 {
                for b in 0..3 {
                    if (a, b) == (2, 2) {
                        continue;
                    }
                    let eps = if a == 2 { 1e-9 } else { 1e-6 };
                    let f = |s: f64| {
                        let mut m = *est.matrix();
                        m[(a, b)] += s;
                        loss_and_grad(kind, &gt, &Homography::from_matrix(m), &c).unwrap().0
                    };
                    let fd = (f(eps) - f(-eps)) / (2.0 * eps);
                    assert!(
                        (fd - g[(a, b)]).abs() <= 1e-5 * (1.0 + fd.abs()),
                        "{kind:?} ({a},{b}): {fd} vs {}",
                        g[(a, b)]
                    );
                }
            }
        }
    }
}
