//! Cubic B-spline image interpolation: recursive coefficient prefilter,
//! tensor-product evaluation with spatial gradients, and resampling of a
//! moving volume through a spatial transform.
//!
//! The prefilter is the classic two-pass (causal/anticausal) recursive filter
//! with pole `z1 = sqrt(3) - 2` and mirror (reflect-without-repeat) boundary
//! handling, so that evaluating the spline at the voxel centers reproduces
//! the original samples.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::Result;
use crate::scalar::Real;
use crate::transform::SpatialTransform;
use crate::volume::{Geometry, Volume};

/// B-spline coefficients over the same grid as the source volume.
#[derive(Debug, Clone)]
pub struct SplineCoefficients<T> {
    geom: Geometry<T>,
    coeffs: Vec<T>,
}

/// One spline evaluation: interpolated value and spatial gradient (per mm).
///
/// Out-of-bounds evaluations return the background value 0 with zero gradient
/// and `in_bounds = false`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplineSample<T> {
    pub value: T,
    pub gradient: Vector3<T>,
    pub in_bounds: bool,
}

/// Mirror an index into `[0, n)` with period `2n - 2` (reflect without
/// repeating the edge sample).
#[inline]
fn mirror(k: i64, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as i64) - 2;
    let mut k = k % period;
    if k < 0 {
        k += period;
    }
    if k >= n as i64 {
        (period - k) as usize
    } else {
        k as usize
    }
}

fn causal_init<T: Real>(line: &[T], z: T) -> T {
    let n = line.len();
    // Truncate the geometric tail once it drops below machine precision.
    let horizon = (T::default_epsilon().ln() / z.abs().ln()).ceil().as_f64() as usize;
    if horizon < n {
        let mut zk = z;
        let mut sum = line[0];
        for &x in line.iter().take(horizon).skip(1) {
            sum += zk * x;
            zk *= z;
        }
        sum
    } else {
        // Exact sum over one mirror period.
        let period = 2 * n - 2;
        let mut sum = line[0];
        let mut zk = z;
        for k in 1..period {
            let x = if k < n { line[k] } else { line[period - k] };
            sum += zk * x;
            zk *= z;
        }
        sum / (T::one() - z.powi(period as i32))
    }
}

/// In-place 1-D prefilter (gain already applied by the caller).
fn filter_line<T: Real>(line: &mut [T], z: T) {
    let n = line.len();
    if n < 2 {
        return;
    }
    line[0] = causal_init(line, z);
    for k in 1..n {
        let prev = line[k - 1];
        line[k] += z * prev;
    }
    line[n - 1] = (z / (z * z - T::one())) * (line[n - 1] + z * line[n - 2]);
    for k in (0..n - 1).rev() {
        line[k] = z * (line[k + 1] - line[k]);
    }
}

/// Compute the cubic B-spline coefficients of `vol`.
///
/// Axes of length 1 are passed through unchanged (the spline is constant
/// along them).
pub fn prefilter<T: Real>(vol: &Volume<T>) -> SplineCoefficients<T> {
    let geom = vol.geometry();
    let [nx, ny, nz] = geom.dims;
    let mut coeffs = vol.data().to_vec();
    let z = T::of(3.0).sqrt() - T::of(2.0);
    // (1 - z)(1 - 1/z) = 6: one gain factor per filtered axis.
    let gain = (T::one() - z) * (T::one() - T::one() / z);

    if nx > 1 {
        for val in coeffs.iter_mut() {
            *val *= gain;
        }
        for row in coeffs.chunks_exact_mut(nx) {
            filter_line(row, z);
        }
    }
    if ny > 1 {
        for val in coeffs.iter_mut() {
            *val *= gain;
        }
        let mut line = vec![T::zero(); ny];
        for k in 0..nz {
            for i in 0..nx {
                for (j, slot) in line.iter_mut().enumerate() {
                    *slot = coeffs[i + nx * (j + ny * k)];
                }
                filter_line(&mut line, z);
                for (j, slot) in line.iter().enumerate() {
                    coeffs[i + nx * (j + ny * k)] = *slot;
                }
            }
        }
    }
    if nz > 1 {
        for val in coeffs.iter_mut() {
            *val *= gain;
        }
        let mut line = vec![T::zero(); nz];
        let plane = nx * ny;
        for j in 0..ny {
            for i in 0..nx {
                for (k, slot) in line.iter_mut().enumerate() {
                    *slot = coeffs[i + nx * j + plane * k];
                }
                filter_line(&mut line, z);
                for (k, slot) in line.iter().enumerate() {
                    coeffs[i + nx * j + plane * k] = *slot;
                }
            }
        }
    }
    SplineCoefficients { geom, coeffs }
}

impl<T: Real> SplineCoefficients<T> {
    pub fn geometry(&self) -> Geometry<T> {
        self.geom
    }

    pub fn coefficients(&self) -> &[T] {
        &self.coeffs
    }

    /// Evaluate the spline at a continuous voxel index.
    pub fn eval(&self, q: Vector3<T>) -> SplineSample<T> {
        let [nx, ny, nz] = self.geom.dims;
        let dims = [nx, ny, nz];
        for a in 0..3 {
            if !(q[a] >= T::zero() && q[a] <= T::of((dims[a] - 1) as f64)) {
                return SplineSample {
                    value: T::zero(),
                    gradient: Vector3::zeros(),
                    in_bounds: false,
                };
            }
        }

        let mut base = [0i64; 3];
        let mut wv = [[T::zero(); 4]; 3];
        let mut wd = [[T::zero(); 4]; 3];
        for a in 0..3 {
            if dims[a] == 1 {
                base[a] = 0;
                wv[a] = [T::one(), T::zero(), T::zero(), T::zero()];
                wd[a] = [T::zero(); 4];
                continue;
            }
            let i0 = q[a].floor();
            let u = q[a] - i0;
            let b = crate::transform::CubicBasis::eval(u);
            base[a] = i0.as_f64() as i64 - 1;
            wv[a] = b.values;
            wd[a] = b.derivs;
        }

        let mut value = T::zero();
        let mut grad = Vector3::zeros();
        for k in 0..4 {
            let zk = mirror(base[2] + k as i64, nz);
            for j in 0..4 {
                let yj = mirror(base[1] + j as i64, ny);
                let row = nx * (yj + ny * zk);
                let wyz = wv[1][j] * wv[2][k];
                let dy_z = wd[1][j] * wv[2][k];
                let y_dz = wv[1][j] * wd[2][k];
                for i in 0..4 {
                    let xi = mirror(base[0] + i as i64, nx);
                    let c = self.coeffs[row + xi];
                    value += c * (wv[0][i] * wyz);
                    grad.x += c * (wd[0][i] * wyz);
                    grad.y += c * (wv[0][i] * dy_z);
                    grad.z += c * (wv[0][i] * y_dz);
                }
            }
        }
        // d/d(index) -> d/d(mm)
        grad.x /= self.geom.spacing[0];
        grad.y /= self.geom.spacing[1];
        grad.z /= self.geom.spacing[2];
        SplineSample {
            value,
            gradient: grad,
            in_bounds: true,
        }
    }

    /// Evaluate at a world-space point (mm).
    pub fn eval_world(&self, p: Vector3<T>) -> SplineSample<T> {
        self.eval(self.geom.world_to_index(p))
    }
}

/// Trilinear sample at a continuous voxel index; `None` out of bounds.
pub fn linear_sample<T: Real>(vol: &Volume<T>, q: Vector3<T>) -> Option<T> {
    let dims = vol.dims();
    for a in 0..3 {
        if !(q[a] >= T::zero() && q[a] <= T::of((dims[a] - 1) as f64)) {
            return None;
        }
    }
    let mut i0 = [0usize; 3];
    let mut f = [T::zero(); 3];
    for a in 0..3 {
        if dims[a] == 1 {
            continue;
        }
        let mut idx = q[a].floor().as_f64() as usize;
        if idx + 1 >= dims[a] {
            idx = dims[a] - 2;
        }
        i0[a] = idx;
        f[a] = q[a] - T::of(idx as f64);
    }
    let mut out = T::zero();
    for dk in 0..2 {
        let wz = if dk == 0 { T::one() - f[2] } else { f[2] };
        let k = (i0[2] + dk).min(dims[2] - 1);
        for dj in 0..2 {
            let wy = if dj == 0 { T::one() - f[1] } else { f[1] };
            let j = (i0[1] + dj).min(dims[1] - 1);
            for di in 0..2 {
                let wx = if di == 0 { T::one() - f[0] } else { f[0] };
                let i = (i0[0] + di).min(dims[0] - 1);
                out += vol.get(i, j, k) * (wx * wy * wz);
            }
        }
    }
    Some(out)
}

/// Resample `moving` through `t` onto `fixed_geometry`.
///
/// Each output voxel takes the spline value of `moving` at the mapped world
/// point; points mapping outside the moving volume (or outside a B-spline
/// transform's support) become background 0.
pub fn resample<T: Real>(
    moving: &Volume<T>,
    t: &SpatialTransform<T>,
    fixed_geometry: &Geometry<T>,
) -> Result<Volume<T>> {
    match t {
        SpatialTransform::Affine(a) | SpatialTransform::Composed { affine: a, .. } => {
            if a.determinant().abs() <= T::of(1e-12) {
                return Err(crate::error::Error::SingularTransform(
                    a.determinant().as_f64(),
                ));
            }
        }
        SpatialTransform::Ffd(_) => {}
    }
    let coeffs = prefilter(moving);
    let g = *fixed_geometry;
    let [nx, ny, nz] = g.dims;
    let mut data = vec![T::zero(); nx * ny * nz];
    data.par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(k, slice)| {
            for j in 0..ny {
                for i in 0..nx {
                    let p = g.index_to_world(i, j, k);
                    if let Some(q) = t.map(p) {
                        slice[i + nx * j] = coeffs.eval_world(q).value;
                    }
                }
            }
        });
    Volume::new(g.dims, g.spacing, g.origin, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transform::AffineTransform;
    use nalgebra::Matrix3;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_volume(dims: [usize; 3], seed: u64) -> Volume<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, [1.0, 1.0, 1.0], [0.0; 3], |_, _, _| {
            rng.gen_range(0.0..100.0)
        })
        .unwrap()
    }

    /// Smooth test image on an arbitrary grid.
    fn smooth_volume(dims: [usize; 3], spacing: [f64; 3]) -> Volume<f64> {
        Volume::from_fn(dims, spacing, [0.0; 3], |i, j, k| {
            let x = i as f64 / dims[0] as f64;
            let y = j as f64 / dims[1] as f64;
            let z = k as f64 / dims[2] as f64;
            50.0 + 40.0 * (2.5 * x).sin() * (1.7 * y).cos() + 20.0 * (1.3 * z).sin()
        })
        .unwrap()
    }

    #[test]
    fn constant_volume_has_constant_coefficients() {
        let v = Volume::<f64>::new([6, 5, 4], [1.; 3], [0.; 3], vec![7.5; 120]).unwrap();
        let c = prefilter(&v);
        for &x in c.coefficients() {
            assert!((x - 7.5).abs() < 1e-11);
        }
        let s = c.eval(Vector3::new(2.3, 1.7, 1.1));
        assert!(s.gradient.norm() < 1e-10);
        assert!((s.value - 7.5).abs() < 1e-10);
    }

    #[test]
    fn linear_ramp_reproduced_in_interior() {
        let v = Volume::<f64>::from_fn([16, 4, 4], [1.; 3], [0.; 3], |i, _, _| 3.0 * i as f64)
            .unwrap();
        let c = prefilter(&v);
        for i in 0..16 {
            let s = c.eval(Vector3::new(i as f64, 2.0, 2.0));
            assert!((s.value - 3.0 * i as f64).abs() < 1e-9, "i={i}");
        }
        // Between samples, away from the mirrored edges.
        let mut x = 3.0;
        while x <= 12.0 {
            let s = c.eval(Vector3::new(x, 2.0, 2.0));
            assert!((s.value - 3.0 * x).abs() < 1e-9, "x={x}");
            assert!((s.gradient.x - 3.0).abs() < 1e-9);
            x += 0.25;
        }
    }

    #[test]
    fn interpolation_property_random_volume() {
        let v = random_volume([16, 16, 16], 1);
        let c = prefilter(&v);
        for k in 0..16 {
            for j in 0..16 {
                for i in 0..16 {
                    let s = c.eval(Vector3::new(i as f64, j as f64, k as f64));
                    let want = v.get(i, j, k);
                    assert!(
                        (s.value - want).abs() <= 1e-8 * (1.0 + want.abs()),
                        "({i},{j},{k}): {} vs {want}",
                        s.value
                    );
                }
            }
        }
    }

    #[test]
    fn interpolation_property_anisotropic_and_thin() {
        // Thin-z grid like the anatomical volumes.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v =
            Volume::<f64>::from_fn([12, 10, 3], [0.27, 0.27, 3.0], [5.0, -2.0, 0.0], |_, _, _| {
                rng.gen_range(0.0..10.0)
            })
            .unwrap();
        let c = prefilter(&v);
        for k in 0..3 {
            for j in 0..10 {
                for i in 0..12 {
                    let s = c.eval(Vector3::new(i as f64, j as f64, k as f64));
                    assert!((s.value - v.get(i, j, k)).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let v = smooth_volume([20, 18, 16], [1.0, 1.0, 1.0]);
        let c = prefilter(&v);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-4;
        for _ in 0..100 {
            let q = Vector3::new(
                rng.gen_range(3.0..16.0),
                rng.gen_range(3.0..14.0),
                rng.gen_range(3.0..12.0),
            );
            let s = c.eval(q);
            for a in 0..3 {
                let mut qp = q;
                let mut qm = q;
                qp[a] += h;
                qm[a] -= h;
                let fd = (c.eval(qp).value - c.eval(qm).value) / (2.0 * h);
                let rel = (s.gradient[a] - fd).abs() / (1.0 + fd.abs());
                assert!(rel < 1e-5, "axis {a} at {q:?}: {} vs {fd}", s.gradient[a]);
            }
        }
    }

    #[test]
    fn gradient_respects_spacing() {
        let v = smooth_volume([20, 18, 6], [0.5, 2.0, 3.0]);
        let c = prefilter(&v);
        let q = Vector3::new(8.3, 7.1, 2.4);
        let h = 1e-5;
        let mut qp = q;
        let mut qm = q;
        qp.x += h;
        qm.x -= h;
        let fd_index = (c.eval(qp).value - c.eval(qm).value) / (2.0 * h);
        // gradient is per mm: d/dmm = d/dindex / spacing
        assert!((c.eval(q).gradient.x - fd_index / 0.5).abs() < 1e-6);
    }

    #[test]
    fn out_of_bounds_returns_background() {
        let v = random_volume([8, 8, 8], 4);
        let c = prefilter(&v);
        let s = c.eval(Vector3::new(-0.5, 2.0, 2.0));
        assert!(!s.in_bounds);
        assert_eq!(s.value, 0.0);
        assert_eq!(s.gradient, Vector3::zeros());
        assert!(!c.eval(Vector3::new(7.0001, 2.0, 2.0)).in_bounds);
        assert!(c.eval(Vector3::new(7.0, 2.0, 2.0)).in_bounds);
    }

    #[test]
    fn eval_is_smooth_under_tiny_perturbation() {
        let v = random_volume([12, 12, 12], 5);
        let c = prefilter(&v);
        let (lo, hi) = v.min_max();
        let range = hi - lo;
        let q = Vector3::new(5.5, 6.25, 4.75);
        let a = c.eval(q).value;
        let b = c.eval(q + Vector3::new(1e-9, 1e-9, 1e-9)).value;
        assert!((a - b).abs() <= 1e-6 * range);
    }

    #[test]
    fn resample_identity_is_identity() {
        let v = smooth_volume([10, 9, 8], [1.0, 1.2, 0.8]);
        let out = resample(
            &v,
            &SpatialTransform::Affine(AffineTransform::identity()),
            &v.geometry(),
        )
        .unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn resample_one_voxel_translation_shifts_grid() {
        let v = random_volume([10, 10, 10], 6);
        // Maps fixed p to moving p + spacing_x, so output voxel i holds input
        // voxel i+1.
        let t = AffineTransform {
            matrix: Matrix3::identity(),
            translation: Vector3::new(1.0, 0.0, 0.0),
            center: Vector3::zeros(),
        };
        let out = resample(&v, &SpatialTransform::Affine(t), &v.geometry()).unwrap();
        for k in 2..8 {
            for j in 2..8 {
                for i in 2..8 {
                    assert!(
                        (out.get(i, j, k) - v.get(i + 1, j, k)).abs() < 1e-7,
                        "({i},{j},{k})"
                    );
                }
            }
        }
    }

    #[test]
    fn resample_matches_nearest_neighbor_within_lipschitz_bound() {
        let v = smooth_volume([24, 24, 12], [1.0, 1.0, 1.0]);
        // Global per-voxel Lipschitz bound of the image.
        let mut lip: f64 = 0.0;
        let d = v.dims();
        for k in 0..d[2] {
            for j in 0..d[1] {
                for i in 0..d[0] {
                    if i + 1 < d[0] {
                        lip = lip.max((v.get(i + 1, j, k) - v.get(i, j, k)).abs());
                    }
                    if j + 1 < d[1] {
                        lip = lip.max((v.get(i, j + 1, k) - v.get(i, j, k)).abs());
                    }
                    if k + 1 < d[2] {
                        lip = lip.max((v.get(i, j, k + 1) - v.get(i, j, k)).abs());
                    }
                }
            }
        }
        let t = AffineTransform::<f64>::from_prs(
            [0.05, -0.03, 0.08],
            Vector3::new(0.7, -0.4, 0.3),
            [1.02, 0.98, 1.0],
            [0.0; 3],
            Vector3::new(12.0, 12.0, 6.0),
        )
        .unwrap();
        let out = resample(&v, &SpatialTransform::Affine(t), &v.geometry()).unwrap();
        let mut checked = 0;
        for k in 2..10 {
            for j in 2..22 {
                for i in 2..22 {
                    let p = v.index_to_world(i, j, k);
                    let q = v.world_to_index(t.apply(p));
                    let (ri, rj, rk) = (q.x.round(), q.y.round(), q.z.round());
                    if ri < 1.0 || rj < 1.0 || rk < 1.0 || ri > 22.0 || rj > 22.0 || rk > 10.0 {
                        continue;
                    }
                    let nn = v.get(ri as usize, rj as usize, rk as usize);
                    let half_voxel_err = 0.5 * 3.0f64.sqrt() * lip + 1e-6;
                    assert!(
                        (out.get(i, j, k) - nn).abs() <= half_voxel_err,
                        "({i},{j},{k}): spline {} vs nn {nn}, bound {half_voxel_err}",
                        out.get(i, j, k)
                    );
                    checked += 1;
                }
            }
        }
        assert!(checked > 1000, "test exercised too few voxels: {checked}");
    }

    #[test]
    fn resample_rejects_singular_affine() {
        let v = random_volume([4, 4, 4], 7);
        let t = AffineTransform {
            matrix: Matrix3::zeros(),
            translation: Vector3::zeros(),
            center: Vector3::zeros(),
        };
        assert!(resample(&v, &SpatialTransform::Affine(t), &v.geometry()).is_err());
    }

    #[test]
    fn linear_sample_interpolates() {
        let v =
            Volume::<f64>::from_fn([4, 4, 4], [1.; 3], [0.; 3], |i, j, k| (i + j + k) as f64)
                .unwrap();
        let got = linear_sample(&v, Vector3::new(1.5, 2.0, 0.25)).unwrap();
        assert!((got - 3.75).abs() < 1e-12);
        assert!(linear_sample(&v, Vector3::new(-0.1, 0.0, 0.0)).is_none());
    }
}
