//! Principal-axes analysis of intensity-weighted image moments, and the
//! affine initialization derived from a fixed/moving pair of axis frames.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::transform::AffineTransform;
use crate::volume::Volume;

/// Centroid and orthonormal principal frame of a volume.
///
/// Columns of `axes` are the principal directions sorted by descending
/// eigenvalue; the frame is right-handed (`det = +1`) and each of the first
/// two columns has its largest-magnitude component positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrincipalAxes<T> {
    pub centroid: Vector3<T>,
    pub axes: Matrix3<T>,
    pub eigenvalues: Vector3<T>,
}

/// Intensity-weighted centroid (mm) and covariance (mm^2) of a volume.
///
/// Weights are the voxel intensities; negative intensities (noise dipping
/// below zero) contribute zero weight so the covariance stays positive
/// semidefinite.
pub fn intensity_moments<T: Real>(vol: &Volume<T>) -> Result<(Vector3<T>, Matrix3<T>)> {
    weighted_moments(vol, |v| v.max(T::zero()))
}

/// Moments of the binarized volume: weight 1 where intensity >= `threshold`.
pub fn binary_moments<T: Real>(vol: &Volume<T>, threshold: T) -> Result<(Vector3<T>, Matrix3<T>)> {
    weighted_moments(vol, move |v| if v >= threshold { T::one() } else { T::zero() })
}

fn weighted_moments<T: Real>(
    vol: &Volume<T>,
    weight: impl Fn(T) -> T,
) -> Result<(Vector3<T>, Matrix3<T>)> {
    let [nx, ny, nz] = vol.dims();
    let mut w_sum = T::zero();
    let mut first = Vector3::zeros();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let w = weight(vol.get(i, j, k));
                if w > T::zero() {
                    w_sum += w;
                    first += vol.index_to_world(i, j, k) * w;
                }
            }
        }
    }
    if w_sum <= T::zero() {
        return Err(Error::AllZeroVolume);
    }
    let centroid = first / w_sum;

    // Second pass about the centroid keeps the covariance well conditioned.
    let mut cov = Matrix3::zeros();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let w = weight(vol.get(i, j, k));
                if w > T::zero() {
                    let d = vol.index_to_world(i, j, k) - centroid;
                    cov += (d * d.transpose()) * w;
                }
            }
        }
    }
    cov /= w_sum;
    Ok((centroid, cov))
}

/// Eigendecompose a covariance into a deterministic principal frame.
///
/// Eigenpairs are sorted by descending eigenvalue, each eigenvector's sign is
/// fixed so its largest-magnitude component is positive, and the third axis
/// is replaced by the cross product of the first two so the frame is always
/// right-handed. Tiny negative eigenvalues from rounding are clamped to zero.
pub fn principal_axes<T: Real>(centroid: Vector3<T>, covariance: Matrix3<T>) -> PrincipalAxes<T> {
    let eig = covariance.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
    });

    let mut axes = Matrix3::zeros();
    let mut eigenvalues = Vector3::zeros();
    for (slot, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        let mut dominant = 0;
        for a in 1..3 {
            if col[a].abs() > col[dominant].abs() {
                dominant = a;
            }
        }
        if col[dominant] < T::zero() {
            col = -col;
        }
        axes.set_column(slot, &col);
        eigenvalues[slot] = eig.eigenvalues[src].max(T::zero());
    }
    let third = axes.column(0).cross(&axes.column(1));
    axes.set_column(2, &third);

    PrincipalAxes {
        centroid,
        axes,
        eigenvalues,
    }
}

/// Principal axes straight from a volume's intensity moments.
pub fn principal_axes_of<T: Real>(vol: &Volume<T>) -> Result<PrincipalAxes<T>> {
    let (c, cov) = intensity_moments(vol)?;
    Ok(principal_axes(c, cov))
}

/// Initial moving<-fixed affine from two principal frames: rotation
/// `R = moving.axes * fixed.axes^T`, translation mapping the fixed centroid
/// onto the moving centroid, unit scale and no shear.
///
/// The transform is centered on the fixed centroid, which keeps the rotation
/// block and the translation block of the parameter vector decoupled for the
/// optimizer that refines it.
pub fn initial_affine<T: Real>(
    fixed: &PrincipalAxes<T>,
    moving: &PrincipalAxes<T>,
) -> AffineTransform<T> {
    let rotation = moving.axes * fixed.axes.transpose();
    AffineTransform {
        matrix: rotation,
        translation: moving.centroid - fixed.centroid,
        center: fixed.centroid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Voxelized ellipsoid mask with a slim antialiased rim.
    pub(crate) fn ellipsoid_volume(
        dims: [usize; 3],
        spacing: [f64; 3],
        center: Vector3<f64>,
        semi_axes: [f64; 3],
        rotation: Matrix3<f64>,
    ) -> Volume<f64> {
        Volume::from_fn(dims, spacing, [0.0; 3], |i, j, k| {
            let p = Vector3::new(
                i as f64 * spacing[0],
                j as f64 * spacing[1],
                k as f64 * spacing[2],
            );
            let d = rotation.transpose() * (p - center);
            let level = (d.x / semi_axes[0]).powi(2)
                + (d.y / semi_axes[1]).powi(2)
                + (d.z / semi_axes[2]).powi(2);
            let edge = 0.05;
            if level <= 1.0 - edge {
                1.0
            } else if level >= 1.0 + edge {
                0.0
            } else {
                (1.0 + edge - level) / (2.0 * edge)
            }
        })
        .unwrap()
    }

    fn angle_deg(a: Vector3<f64>, b: Vector3<f64>) -> f64 {
        let c = (a.dot(&b).abs() / (a.norm() * b.norm())).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }

    #[test]
    fn moments_single_and_pair_of_voxels() {
        let mut data = vec![0.0; 4 * 4 * 4];
        data[1 + 4 * (2 + 4 * 3)] = 5.0;
        let v = Volume::new([4, 4, 4], [1.0, 2.0, 0.5], [10.0, 0.0, 0.0], data).unwrap();
        let (c, cov) = intensity_moments(&v).unwrap();
        assert_eq!(c, Vector3::new(11.0, 4.0, 1.5));
        assert!(cov.norm() < 1e-15);

        let mut data = vec![0.0; 4 * 4 * 4];
        data[0] = 3.0;
        data[3 + 4 * (3 + 4 * 3)] = 3.0;
        let v = Volume::new([4, 4, 4], [1.0; 3], [0.0; 3], data).unwrap();
        let (c, _) = intensity_moments(&v).unwrap();
        assert_eq!(c, Vector3::new(1.5, 1.5, 1.5));
    }

    #[test]
    fn moments_match_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let v = Volume::from_fn([8, 8, 8], [0.7, 1.1, 2.0], [3.0, -1.0, 0.5], |_, _, _| {
            rng.gen_range(0.0..10.0)
        })
        .unwrap();
        let (c, cov) = intensity_moments(&v).unwrap();

        // Naive oracle, one flat accumulation pass per quantity.
        let mut sw = 0.0;
        let mut sx = Vector3::zeros();
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    let w = v.get(i, j, k);
                    sw += w;
                    sx += v.index_to_world(i, j, k) * w;
                }
            }
        }
        let c_want = sx / sw;
        let mut cov_want = Matrix3::zeros();
        for k in 0..8 {
            for j in 0..8 {
                for i in 0..8 {
                    let w = v.get(i, j, k);
                    let d = v.index_to_world(i, j, k) - c_want;
                    cov_want += (d * d.transpose()) * w;
                }
            }
        }
        cov_want /= sw;

        assert!((c - c_want).norm() / c_want.norm() < 1e-10);
        assert!((cov - cov_want).norm() / cov_want.norm() < 1e-10);
    }

    #[test]
    fn moments_invariant_to_intensity_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v = Volume::from_fn([6, 6, 6], [1.0; 3], [0.0; 3], |_, _, _| {
            rng.gen_range(0.0..5.0)
        })
        .unwrap();
        let scaled = v.map(|x| x * 7.0);
        let (c1, cov1) = intensity_moments(&v).unwrap();
        let (c2, cov2) = intensity_moments(&scaled).unwrap();
        assert!((c1 - c2).norm() < 1e-10 * (1.0 + c1.norm()));
        assert!((cov1 - cov2).norm() < 1e-10 * (1.0 + cov1.norm()));
    }

    #[test]
    fn moments_reject_all_zero() {
        let v = Volume::<f64>::new([2, 2, 2], [1.; 3], [0.; 3], vec![0.0; 8]).unwrap();
        assert!(matches!(
            intensity_moments(&v).unwrap_err(),
            Error::AllZeroVolume
        ));
    }

    #[test]
    fn binary_moments_threshold() {
        let mut data = vec![0.0; 8];
        data[0] = 1.0;
        data[7] = 100.0;
        let v = Volume::new([2, 2, 2], [1.; 3], [0.; 3], data).unwrap();
        let (c, _) = binary_moments(&v, 50.0).unwrap();
        assert_eq!(c, Vector3::new(1.0, 1.0, 1.0));
    }

    #[test]
    fn axes_of_axis_aligned_ellipsoid_are_identity() {
        let v = ellipsoid_volume(
            [48, 48, 48],
            [1.0; 3],
            Vector3::new(23.5, 23.5, 23.5),
            [18.0, 12.0, 7.0],
            Matrix3::identity(),
        );
        let p = principal_axes_of(&v).unwrap();
        assert!((p.axes - Matrix3::identity()).norm() < 1e-3);
        assert!(p.eigenvalues[0] > p.eigenvalues[1]);
        assert!(p.eigenvalues[1] > p.eigenvalues[2]);
    }

    #[test]
    fn axes_of_isotropic_covariance_are_identity() {
        let p = principal_axes(Vector3::zeros(), Matrix3::identity() * 4.0);
        assert_eq!(p.axes, Matrix3::identity());
        assert_eq!(p.eigenvalues, Vector3::new(4.0, 4.0, 4.0));
    }

    #[test]
    fn axes_frame_is_orthonormal_right_handed_and_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0f64));
            let cov = m * m.transpose(); // random PSD
            let p = principal_axes(Vector3::zeros(), cov);

            let gram = p.axes.transpose() * p.axes;
            assert!((gram - Matrix3::identity()).norm() < 1e-10);
            assert!((p.axes.determinant() - 1.0).abs() < 1e-10);
            assert!(p.eigenvalues[0] >= p.eigenvalues[1]);
            assert!(p.eigenvalues[1] >= p.eigenvalues[2]);
            assert!(p.eigenvalues[2] >= 0.0);

            // Reconstruction is insensitive to per-column sign choices.
            let rec = p.axes * Matrix3::from_diagonal(&p.eigenvalues) * p.axes.transpose();
            assert!((rec - cov).norm() < 1e-8 * (1.0 + cov.norm()));

            // First two columns follow the largest-component-positive rule.
            for col in 0..2 {
                let c = p.axes.column(col);
                let mut dom = 0;
                for a in 1..3 {
                    if c[a].abs() > c[dom].abs() {
                        dom = a;
                    }
                }
                assert!(c[dom] > 0.0);
            }
        }
    }

    #[test]
    fn rotated_ellipsoid_axes_recovered_within_half_degree() {
        let rot = AffineTransform::<f64>::from_prs(
            [0.35, -0.25, 0.5],
            Vector3::zeros(),
            [1.0; 3],
            [0.0; 3],
            Vector3::zeros(),
        )
        .unwrap()
        .matrix;
        let v = ellipsoid_volume(
            [64, 64, 64],
            [1.0; 3],
            Vector3::new(31.5, 31.5, 31.5),
            [22.0, 14.0, 8.0],
            rot,
        );
        let p = principal_axes_of(&v).unwrap();
        for col in 0..3 {
            let got: Vector3<f64> = p.axes.column(col).into_owned();
            let want: Vector3<f64> = rot.column(col).into_owned();
            assert!(
                angle_deg(got, want) < 0.5,
                "axis {col} off by {} deg",
                angle_deg(got, want)
            );
        }
    }

    #[test]
    fn initial_affine_identity_and_translation() {
        let p = PrincipalAxes {
            centroid: Vector3::new(1.0, 2.0, 3.0),
            axes: Matrix3::identity(),
            eigenvalues: Vector3::new(3.0, 2.0, 1.0),
        };
        let t = initial_affine(&p, &p);
        assert!((t.matrix - Matrix3::identity()).norm() < 1e-15);
        assert!(t.translation.norm() < 1e-15);
        let q = Vector3::new(-4.0, 0.5, 9.0);
        assert!((t.apply(q) - q).norm() < 1e-14);

        let mut shifted = p;
        shifted.centroid += Vector3::new(5.0, -2.0, 1.0);
        let t = initial_affine(&p, &shifted);
        assert!((t.matrix - Matrix3::identity()).norm() < 1e-15);
        assert_eq!(t.translation, Vector3::new(5.0, -2.0, 1.0));
        assert!((t.apply(q) - (q + t.translation)).norm() < 1e-14);
    }

    #[test]
    fn initial_affine_recovers_rotation_about_centroid() {
        // Voxelized ellipsoid pair: moving is the fixed shape rotated by a
        // known modest rotation about its centroid.
        let r0 = AffineTransform::<f64>::from_prs(
            [0.18, -0.12, 0.25],
            Vector3::zeros(),
            [1.0; 3],
            [0.0; 3],
            Vector3::zeros(),
        )
        .unwrap()
        .matrix;
        let center = Vector3::new(31.5, 31.5, 31.5);
        let fixed = ellipsoid_volume([64, 64, 64], [1.0; 3], center, [22.0, 14.0, 8.0], Matrix3::identity());
        let moving = ellipsoid_volume([64, 64, 64], [1.0; 3], center, [22.0, 14.0, 8.0], r0);

        let pf = principal_axes_of(&fixed).unwrap();
        let pm = principal_axes_of(&moving).unwrap();
        let t = initial_affine(&pf, &pm);

        // The recovered transform must map fixed-body points onto their true
        // rotated positions.
        let mut worst: f64 = 0.0;
        for &dx in &[-10.0, 0.0, 10.0] {
            for &dy in &[-6.0, 0.0, 6.0] {
                for &dz in &[-4.0, 0.0, 4.0] {
                    let p = center + Vector3::new(dx, dy, dz);
                    let truth = r0 * (p - center) + center;
                    worst = worst.max((t.apply(p) - truth).norm());
                }
            }
        }
        assert!(worst < 0.1, "worst landmark error {worst} mm");
    }
}
