//! Axis-angle rotations: exponential map over [`Real`] scalars and helpers
//! on top of nalgebra for the plain `f64` paths.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::autodiff::Real;

/// Rotation matrix (row-major) of the axis-angle vector `w`.
///
/// Uses the Rodrigues form `I + a K + b K^2` with `a = sin t / t` and
/// `b = (1 - cos t) / t^2`, switching to their Taylor series near the
/// identity so derivatives stay finite at `w = 0`.
pub fn exp<T: Real>(w: [T; 3]) -> [[T; 3]; 3] {
    let t2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
    let (a, b) = if t2.value() < 1e-4 {
        let t4 = t2 * t2;
        (
            T::one() - t2 / 6.0 + t4 / 120.0,
            T::cst(0.5) - t2 / 24.0 + t4 / 720.0,
        )
    } else {
        let t = t2.sqrt();
        (t.sin() / t, (T::one() - t.cos()) / t2)
    };
    let [x, y, z] = w;
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, xz, yz) = (x * y, x * z, y * z);
    // K^2 = w w^T - |w|^2 I
    [
        [
            T::one() + b * (xx - t2),
            b * xy - a * z,
            b * xz + a * y,
        ],
        [
            b * xy + a * z,
            T::one() + b * (yy - t2),
            b * yz - a * x,
        ],
        [
            b * xz - a * y,
            b * yz + a * x,
            T::one() + b * (zz - t2),
        ],
    ]
}

pub fn exp_f64(w: &[f64; 3]) -> Matrix3<f64> {
    Rotation3::new(Vector3::from(*w)).into_inner()
}

/// Axis-angle vector of a rotation matrix, magnitude in `[0, pi]`.
pub fn log_f64(r: &Matrix3<f64>) -> [f64; 3] {
    let rot = Rotation3::from_matrix_unchecked(*r);
    let v = rot.scaled_axis();
    [v.x, v.y, v.z]
}

/// Maps an axis-angle vector to the canonical chart `|w| < pi`.
pub fn canonical(w: &[f64; 3]) -> [f64; 3] {
    let t = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if t < std::f64::consts::PI {
        *w
    } else {
        log_f64(&exp_f64(w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Dual;

    #[test]
    fn generic_exp_matches_nalgebra() {
        for w in [[0.0, 0.0, 0.0], [1e-3, -2e-3, 5e-4], [0.3, -1.2, 0.7], [2.0, 0.1, -0.4]] {
            let a = exp(w);
            let b = exp_f64(&w);
            for i in 0..3 {
                for j in 0..3 {
                    assert!((a[i][j] - b[(i, j)]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn exp_derivative_is_finite_and_correct_at_identity() {
        // d(R e_x)/d w_z = e_y at the identity.
        let w = [
            Dual::<3>::variable(0.0, 0),
            Dual::<3>::variable(0.0, 1),
            Dual::<3>::variable(0.0, 2),
        ];
        let r = exp(w);
        assert_eq!(r[1][0].d, [0.0, 0.0, 1.0]);
        assert_eq!(r[0][0].d, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn exp_derivative_matches_finite_differences_across_branch() {
        let h = 1e-7;
        for w0 in [[0.004, 0.003, -0.002], [0.2, -0.1, 0.3]] {
            let w: [Dual<3>; 3] = std::array::from_fn(|k| Dual::variable(w0[k], k));
            let r = exp(w);
            for k in 0..3 {
                let mut wp = w0;
                let mut wm = w0;
                wp[k] += h;
                wm[k] -= h;
                let (rp, rm) = (exp_f64(&wp), exp_f64(&wm));
                for i in 0..3 {
                    for j in 0..3 {
                        let fd = (rp[(i, j)] - rm[(i, j)]) / (2.0 * h);
                        assert!((r[i][j].d[k] - fd).abs() < 1e-7);
                    }
                }
            }
        }
    }

    #[test]
    fn log_inverts_exp() {
        let w = [0.4, -0.2, 1.1];
        let back = log_f64(&exp_f64(&w));
        for k in 0..3 {
            assert!((back[k] - w[k]).abs() < 1e-12);
        }
    }
}
