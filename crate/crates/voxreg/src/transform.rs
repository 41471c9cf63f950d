//! Spatial transform models: 12-DOF affine and cubic B-spline free-form
//! deformation, with the parameter-vector views the optimizers drive.
//!
//! All transforms map fixed-image world points (mm) into moving-image world
//! points (mm), which is the direction resampling needs.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Number of affine parameters: 9 matrix entries plus 3 translations.
pub const AFFINE_DOF: usize = 12;

/// A transform with a flat parameter vector and a point jacobian, as consumed
/// by the similarity metric and the optimizers.
pub trait TransformModel<T: Real> {
    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<T>;
    fn set_params(&mut self, p: &[T]);
    /// Map a fixed-space world point; `None` when outside the transform's
    /// support (B-spline lattice edge).
    fn map_point(&self, p: Vector3<T>) -> Option<Vector3<T>>;
    /// Visit the nonzero columns of d(map_point)/d(params) at `p`.
    fn visit_jacobian(&self, p: Vector3<T>, visit: &mut dyn FnMut(usize, Vector3<T>));
}

// ---------------------------------------------------------------------------
// Affine
// ---------------------------------------------------------------------------

/// 12-DOF affine transform applied about a fixed center point:
/// `T(p) = matrix * (p - center) + center + translation`.
///
/// Parameter layout is the row-major matrix followed by the translation:
/// `[m11, m12, m13, m21, ..., m33, t1, t2, t3]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineTransform<T> {
    pub matrix: Matrix3<T>,
    pub translation: Vector3<T>,
    pub center: Vector3<T>,
}

impl<T: Real> Default for AffineTransform<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> AffineTransform<T> {
    pub fn identity() -> Self {
        AffineTransform {
            matrix: Matrix3::identity(),
            translation: Vector3::zeros(),
            center: Vector3::zeros(),
        }
    }

    /// Compose matrix = Rz(rz)*Ry(ry)*Rx(rx) * Shear * diag(scale).
    ///
    /// Shear is the unit upper-triangular matrix with entries
    /// (xy, xz, yz) above the diagonal. Euler order is fixed as Z*Y*X.
    pub fn from_prs(
        rotation: [T; 3],
        translation: Vector3<T>,
        scale: [T; 3],
        shear: [T; 3],
        center: Vector3<T>,
    ) -> Result<Self> {
        if scale.iter().any(|s| *s == T::zero()) {
            return Err(Error::InvalidParameter("affine scale must be nonzero".into()));
        }
        let (sx, cx) = (rotation[0].sin(), rotation[0].cos());
        let (sy, cy) = (rotation[1].sin(), rotation[1].cos());
        let (sz, cz) = (rotation[2].sin(), rotation[2].cos());
        let rx = Matrix3::new(
            T::one(), T::zero(), T::zero(),
            T::zero(), cx, -sx,
            T::zero(), sx, cx,
        );
        let ry = Matrix3::new(
            cy, T::zero(), sy,
            T::zero(), T::one(), T::zero(),
            -sy, T::zero(), cy,
        );
        let rz = Matrix3::new(
            cz, -sz, T::zero(),
            sz, cz, T::zero(),
            T::zero(), T::zero(), T::one(),
        );
        let h = Matrix3::new(
            T::one(), shear[0], shear[1],
            T::zero(), T::one(), shear[2],
            T::zero(), T::zero(), T::one(),
        );
        let s = Matrix3::from_diagonal(&Vector3::new(scale[0], scale[1], scale[2]));
        Ok(AffineTransform {
            matrix: rz * ry * rx * h * s,
            translation,
            center,
        })
    }

    pub fn apply(&self, p: Vector3<T>) -> Vector3<T> {
        self.matrix * (p - self.center) + self.center + self.translation
    }

    pub fn determinant(&self) -> T {
        self.matrix.determinant()
    }

    /// Inverse map as an affine about the same center.
    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix
            .try_inverse()
            .filter(|_| self.determinant().abs() > T::of(1e-12))
            .ok_or_else(|| Error::SingularTransform(self.determinant().as_f64()))?;
        Ok(AffineTransform {
            matrix: inv,
            translation: -(inv * self.translation),
            center: self.center,
        })
    }

    pub fn to_params(&self) -> [T; AFFINE_DOF] {
        let m = &self.matrix;
        [
            m[(0, 0)], m[(0, 1)], m[(0, 2)],
            m[(1, 0)], m[(1, 1)], m[(1, 2)],
            m[(2, 0)], m[(2, 1)], m[(2, 2)],
            self.translation.x, self.translation.y, self.translation.z,
        ]
    }

    pub fn from_params(p: &[T], center: Vector3<T>) -> Self {
        assert_eq!(p.len(), AFFINE_DOF, "affine parameter vector has 12 entries");
        AffineTransform {
            matrix: Matrix3::new(p[0], p[1], p[2], p[3], p[4], p[5], p[6], p[7], p[8]),
            translation: Vector3::new(p[9], p[10], p[11]),
            center,
        }
    }
}

impl<T: Real> TransformModel<T> for AffineTransform<T> {
    fn num_params(&self) -> usize {
        AFFINE_DOF
    }

    fn params(&self) -> Vec<T> {
        self.to_params().to_vec()
    }

    fn set_params(&mut self, p: &[T]) {
        *self = AffineTransform::from_params(p, self.center);
    }

    fn map_point(&self, p: Vector3<T>) -> Option<Vector3<T>> {
        Some(self.apply(p))
    }

    fn visit_jacobian(&self, p: Vector3<T>, visit: &mut dyn FnMut(usize, Vector3<T>)) {
        let d = p - self.center;
        for row in 0..3 {
            for col in 0..3 {
                let mut column = Vector3::zeros();
                column[row] = d[col];
                visit(row * 3 + col, column);
            }
        }
        for row in 0..3 {
            let mut column = Vector3::zeros();
            column[row] = T::one();
            visit(9 + row, column);
        }
    }
}

// ---------------------------------------------------------------------------
// Cubic B-spline basis
// ---------------------------------------------------------------------------

/// The four uniform cubic B-spline blending weights at fraction `u` in [0,1),
/// together with their derivatives d/du.
#[derive(Debug, Clone, Copy)]
pub struct CubicBasis<T> {
    pub values: [T; 4],
    pub derivs: [T; 4],
}

impl<T: Real> CubicBasis<T> {
    pub fn eval(u: T) -> Self {
        debug_assert!(u >= T::zero() && u < T::one(), "basis fraction in [0,1)");
        let one = T::one();
        let six = T::of(6.0);
        let half = T::of(0.5);
        let u2 = u * u;
        let u3 = u2 * u;
        let om = one - u;
        let values = [
            om * om * om / six,
            (T::of(3.0) * u3 - T::of(6.0) * u2 + T::of(4.0)) / six,
            (-T::of(3.0) * u3 + T::of(3.0) * u2 + T::of(3.0) * u + one) / six,
            u3 / six,
        ];
        let derivs = [
            -om * om * half,
            (T::of(3.0) * u2 - T::of(4.0) * u) * half,
            (-T::of(3.0) * u2 + T::of(2.0) * u + one) * half,
            u2 * half,
        ];
        CubicBasis { values, derivs }
    }
}

/// Split a continuous grid coordinate into the 4-point window base index and
/// the in-cell fraction.
#[inline]
fn spline_window<T: Real>(u: T) -> (i64, T) {
    let i0 = u.floor();
    (i0.as_f64() as i64 - 1, u - i0)
}

// ---------------------------------------------------------------------------
// B-spline free-form deformation
// ---------------------------------------------------------------------------

/// Free-form deformation: a lattice of 3-vector displacement coefficients
/// (mm) blended by tensor-product cubic B-splines.
///
/// Control node `(i,j,k)` sits at `grid_origin + (i,j,k) * grid_spacing`. The
/// deformation is defined where the full 4x4x4 window lies inside the
/// lattice, i.e. grid coordinates in `[1, dims-2)` per axis;
/// [`BSplineFfd::for_domain`] sizes the lattice so a requested world box is
/// covered with one margin node on each side.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineFfd<T> {
    grid_origin: Vector3<T>,
    grid_spacing: Vector3<T>,
    grid_dims: [usize; 3],
    coeffs: Vec<Vector3<T>>,
}

impl<T: Real> BSplineFfd<T> {
    pub fn new(
        grid_origin: Vector3<T>,
        grid_spacing: Vector3<T>,
        grid_dims: [usize; 3],
        coeffs: Vec<Vector3<T>>,
    ) -> Result<Self> {
        if grid_dims.iter().any(|&d| d < 4) {
            return Err(Error::InvalidParameter(format!(
                "B-spline grid dims {grid_dims:?} must be >= 4 per axis"
            )));
        }
        if grid_spacing.iter().any(|s| *s <= T::zero()) {
            return Err(Error::InvalidParameter("B-spline grid spacing must be > 0".into()));
        }
        let n = grid_dims[0] * grid_dims[1] * grid_dims[2];
        if coeffs.len() != n {
            return Err(Error::InvalidParameter(format!(
                "B-spline coefficient count {} != {n}",
                coeffs.len()
            )));
        }
        Ok(BSplineFfd {
            grid_origin,
            grid_spacing,
            grid_dims,
            coeffs,
        })
    }

    /// Zero deformation whose support covers the world box `[lo, hi]` with
    /// roughly `spacing` between control nodes.
    pub fn for_domain(lo: Vector3<T>, hi: Vector3<T>, spacing: Vector3<T>) -> Result<Self> {
        if spacing.iter().any(|s| *s <= T::zero()) {
            return Err(Error::InvalidParameter("B-spline grid spacing must be > 0".into()));
        }
        let origin = lo - spacing;
        let mut dims = [0usize; 3];
        for a in 0..3 {
            let extent = (hi[a] - lo[a]).max(T::zero());
            dims[a] = (extent / spacing[a]).floor().as_f64() as usize + 4;
        }
        let n = dims[0] * dims[1] * dims[2];
        BSplineFfd::new(origin, spacing, dims, vec![Vector3::zeros(); n])
    }

    pub fn grid_origin(&self) -> Vector3<T> {
        self.grid_origin
    }

    pub fn grid_spacing(&self) -> Vector3<T> {
        self.grid_spacing
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    pub fn coefficients(&self) -> &[Vector3<T>] {
        &self.coeffs
    }

    pub fn node_count(&self) -> usize {
        self.coeffs.len()
    }

    #[inline]
    pub fn node_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.grid_dims[0] * (j + self.grid_dims[1] * k)
    }

    pub fn node_world(&self, i: usize, j: usize, k: usize) -> Vector3<T> {
        self.grid_origin
            + Vector3::new(
                T::of(i as f64) * self.grid_spacing[0],
                T::of(j as f64) * self.grid_spacing[1],
                T::of(k as f64) * self.grid_spacing[2],
            )
    }

    pub fn set_coefficient(&mut self, node: usize, value: Vector3<T>) {
        self.coeffs[node] = value;
    }

    pub fn max_displacement(&self) -> T {
        let mut m = T::zero();
        for c in &self.coeffs {
            m = m.max(c.norm());
        }
        m
    }

    #[inline]
    fn window(&self, p: Vector3<T>) -> Option<([i64; 3], [CubicBasis<T>; 3])> {
        let mut base = [0i64; 3];
        let mut basis = [CubicBasis {
            values: [T::zero(); 4],
            derivs: [T::zero(); 4],
        }; 3];
        for a in 0..3 {
            let u = (p[a] - self.grid_origin[a]) / self.grid_spacing[a];
            let (b, frac) = spline_window(u);
            if b < 0 || b + 3 >= self.grid_dims[a] as i64 {
                return None;
            }
            base[a] = b;
            basis[a] = CubicBasis::eval(frac);
        }
        Some((base, basis))
    }

    /// Displacement (mm) at `p`, or `None` outside the lattice support.
    pub fn displacement(&self, p: Vector3<T>) -> Option<Vector3<T>> {
        let (base, basis) = self.window(p)?;
        let mut disp = Vector3::zeros();
        for k in 0..4 {
            let wk = basis[2].values[k];
            for j in 0..4 {
                let wjk = basis[1].values[j] * wk;
                let row = self.node_index(
                    base[0] as usize,
                    (base[1] + j as i64) as usize,
                    (base[2] + k as i64) as usize,
                );
                for i in 0..4 {
                    disp += self.coeffs[row + i] * (basis[0].values[i] * wjk);
                }
            }
        }
        Some(disp)
    }

    /// Deformed position `p + displacement(p)`.
    pub fn apply(&self, p: Vector3<T>) -> Option<Vector3<T>> {
        Some(p + self.displacement(p)?)
    }

    /// The 64 `(node, weight)` pairs such that moving coefficient `node` by
    /// `d` moves `apply(p)` by `weight * d`.
    pub fn param_gradient(&self, p: Vector3<T>) -> Option<Vec<(usize, T)>> {
        let (base, basis) = self.window(p)?;
        let mut out = Vec::with_capacity(64);
        for k in 0..4 {
            for j in 0..4 {
                let wjk = basis[1].values[j] * basis[2].values[k];
                for i in 0..4 {
                    let node = self.node_index(
                        (base[0] + i as i64) as usize,
                        (base[1] + j as i64) as usize,
                        (base[2] + k as i64) as usize,
                    );
                    out.push((node, basis[0].values[i] * wjk));
                }
            }
        }
        Some(out)
    }
}

impl<T: Real> TransformModel<T> for BSplineFfd<T> {
    fn num_params(&self) -> usize {
        3 * self.coeffs.len()
    }

    fn params(&self) -> Vec<T> {
        let mut p = Vec::with_capacity(3 * self.coeffs.len());
        for c in &self.coeffs {
            p.extend_from_slice(&[c.x, c.y, c.z]);
        }
        p
    }

    fn set_params(&mut self, p: &[T]) {
        assert_eq!(p.len(), 3 * self.coeffs.len());
        for (c, chunk) in self.coeffs.iter_mut().zip(p.chunks_exact(3)) {
            *c = Vector3::new(chunk[0], chunk[1], chunk[2]);
        }
    }

    fn map_point(&self, p: Vector3<T>) -> Option<Vector3<T>> {
        self.apply(p)
    }

    fn visit_jacobian(&self, p: Vector3<T>, visit: &mut dyn FnMut(usize, Vector3<T>)) {
        if let Some(weights) = self.param_gradient(p) {
            for (node, w) in weights {
                for axis in 0..3 {
                    let mut column = Vector3::zeros();
                    column[axis] = w;
                    visit(3 * node + axis, column);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Resampling transform (affine, FFD, or their composition)
// ---------------------------------------------------------------------------

/// A transform as consumed by the resampler: affine, FFD, or the pipeline's
/// composition `affine(ffd(p))` (local refinement first, then the global map
/// into the moving volume).
#[derive(Debug, Clone, PartialEq)]
pub enum SpatialTransform<T> {
    Affine(AffineTransform<T>),
    Ffd(BSplineFfd<T>),
    Composed {
        affine: AffineTransform<T>,
        ffd: BSplineFfd<T>,
    },
}

impl<T: Real> SpatialTransform<T> {
    pub fn map(&self, p: Vector3<T>) -> Option<Vector3<T>> {
        match self {
            SpatialTransform::Affine(a) => Some(a.apply(p)),
            SpatialTransform::Ffd(f) => f.apply(p),
            SpatialTransform::Composed { affine, ffd } => Some(affine.apply(ffd.apply(p)?)),
        }
    }

    /// Apply a sequence of transform files in order: `p -> t1(p) -> t2(t1(p))`.
    pub fn map_chain(chain: &[SpatialTransform<T>], p: Vector3<T>) -> Option<Vector3<T>> {
        let mut q = p;
        for t in chain {
            q = t.map(q)?;
        }
        Some(q)
    }
}

// ---------------------------------------------------------------------------
// Transform text files
// ---------------------------------------------------------------------------

fn fmt_triple<T: Real>(v: Vector3<T>) -> String {
    format!("{} {} {}", v.x.as_f64(), v.y.as_f64(), v.z.as_f64())
}

/// Serialize an affine or B-spline transform to the plain-text format the
/// `resample` command reads back.
pub fn transform_to_string<T: Real>(t: &SpatialTransform<T>) -> Result<String> {
    let mut s = String::new();
    match t {
        SpatialTransform::Affine(a) => {
            s.push_str("affine\n");
            let _ = writeln!(s, "{}", fmt_triple(a.center));
            let params = a.to_params();
            let line: Vec<String> = params.iter().map(|p| p.as_f64().to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        SpatialTransform::Ffd(f) => {
            s.push_str("bspline\n");
            let _ = writeln!(s, "{}", fmt_triple(f.grid_origin));
            let _ = writeln!(s, "{}", fmt_triple(f.grid_spacing));
            let d = f.grid_dims;
            let _ = writeln!(s, "{} {} {}", d[0], d[1], d[2]);
            for c in &f.coeffs {
                let _ = writeln!(s, "{}", fmt_triple(*c));
            }
        }
        SpatialTransform::Composed { .. } => {
            return Err(Error::InvalidParameter(
                "composed transforms are written as separate affine and bspline files".into(),
            ))
        }
    }
    Ok(s)
}

pub fn save_transform<T: Real>(t: &SpatialTransform<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, transform_to_string(t)?).map_err(|e| Error::io(path, e))
}

fn parse_vec3<T: Real>(path: &Path, line: Option<&str>, what: &str) -> Result<Vector3<T>> {
    let line = line.ok_or_else(|| Error::TransformParse {
        path: path.to_path_buf(),
        detail: format!("missing {what} line"),
    })?;
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|v| v.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::TransformParse {
            path: path.to_path_buf(),
            detail: format!("{what} line \"{line}\" is not numeric"),
        })?;
    if vals.len() != 3 {
        return Err(Error::TransformParse {
            path: path.to_path_buf(),
            detail: format!("{what} line needs 3 values, got {}", vals.len()),
        });
    }
    Ok(Vector3::new(T::of(vals[0]), T::of(vals[1]), T::of(vals[2])))
}

pub fn load_transform<T: Real>(path: impl AsRef<Path>) -> Result<SpatialTransform<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let kind = lines.next().ok_or_else(|| Error::TransformParse {
        path: path.to_path_buf(),
        detail: "empty file".into(),
    })?;
    match kind {
        "affine" => {
            let center = parse_vec3::<T>(path, lines.next(), "center")?;
            let pline = lines.next().ok_or_else(|| Error::TransformParse {
                path: path.to_path_buf(),
                detail: "missing parameter line".into(),
            })?;
            let vals: Vec<f64> = pline
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::TransformParse {
                    path: path.to_path_buf(),
                    detail: "parameter line is not numeric".into(),
                })?;
            if vals.len() != AFFINE_DOF {
                return Err(Error::TransformParse {
                    path: path.to_path_buf(),
                    detail: format!("affine needs {AFFINE_DOF} parameters, got {}", vals.len()),
                });
            }
            let params: Vec<T> = vals.into_iter().map(T::of).collect();
            Ok(SpatialTransform::Affine(AffineTransform::from_params(
                &params, center,
            )))
        }
        "bspline" => {
            let origin = parse_vec3::<T>(path, lines.next(), "grid origin")?;
            let spacing = parse_vec3::<T>(path, lines.next(), "grid spacing")?;
            let dims_v = parse_vec3::<f64>(path, lines.next(), "grid dims")?;
            let dims = [dims_v.x as usize, dims_v.y as usize, dims_v.z as usize];
            let n = dims[0] * dims[1] * dims[2];
            let mut coeffs = Vec::with_capacity(n);
            for idx in 0..n {
                coeffs.push(parse_vec3::<T>(
                    path,
                    lines.next(),
                    &format!("coefficient {idx}"),
                )?);
            }
            Ok(SpatialTransform::Ffd(BSplineFfd::new(
                origin, spacing, dims, coeffs,
            )?))
        }
        other => Err(Error::TransformParse {
            path: path.to_path_buf(),
            detail: format!("unknown transform kind \"{other}\""),
        }),
    }
}
