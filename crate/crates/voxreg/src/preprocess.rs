//! Functional-volume preprocessing: sigmoid intensity remapping and z-slice
//! thickness harmonization between the two modalities.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::volume::Volume;

/// Parameters of the logistic intensity remap
/// `I' = (out_max - out_min) / (1 + exp(-(I - beta)/alpha)) + out_min`.
///
/// `alpha` sets the width of the input band being expanded (negative alpha
/// inverts the map) and `beta` the intensity the band is centered on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmoidParams<T> {
    pub alpha: T,
    pub beta: T,
    pub out_min: T,
    pub out_max: T,
}

impl<T: Real> SigmoidParams<T> {
    pub fn new(alpha: T, beta: T, out_min: T, out_max: T) -> Result<Self> {
        if alpha == T::zero() {
            return Err(Error::InvalidParameter("sigmoid alpha must be nonzero".into()));
        }
        if out_max <= out_min {
            return Err(Error::InvalidParameter(format!(
                "sigmoid output range [{}, {}] is empty",
                out_min, out_max
            )));
        }
        Ok(SigmoidParams {
            alpha,
            beta,
            out_min,
            out_max,
        })
    }

    #[inline]
    pub fn remap(&self, intensity: T) -> T {
        let t = -(intensity - self.beta) / self.alpha;
        (self.out_max - self.out_min) / (T::one() + t.exp()) + self.out_min
    }
}

/// Remap every voxel through the sigmoid; geometry is unchanged.
pub fn sigmoid_transform<T: Real>(vol: &Volume<T>, p: &SigmoidParams<T>) -> Volume<T> {
    vol.map(|v| p.remap(v))
}

/// Linear-interpolated percentile of a sorted slice, `p` in [0, 1].
fn percentile_sorted<T: Real>(sorted: &[T], p: f64) -> T {
    debug_assert!(!sorted.is_empty());
    let rank = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = T::of(rank - lo as f64);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Derive sigmoid parameters that expand the band of nonzero intensities
/// between the `low_pct` and `high_pct` percentiles.
///
/// `beta` is the percentile midway between the two, `alpha` one sixth of the
/// band width (the band covers beta +/- 3 alpha), the output range is
/// `[0, max(vol)]`. Alpha is floored at 1e-9 of the intensity range so a
/// degenerate band still yields a usable (step-like) remap.
pub fn auto_sigmoid_params<T: Real>(
    vol: &Volume<T>,
    low_pct: f64,
    high_pct: f64,
) -> Result<SigmoidParams<T>> {
    if !(0.0..=1.0).contains(&low_pct) || !(0.0..=1.0).contains(&high_pct) || low_pct >= high_pct {
        return Err(Error::InvalidParameter(format!(
            "percentiles must satisfy 0 <= low ({low_pct}) < high ({high_pct}) <= 1"
        )));
    }
    let mut nonzero: Vec<T> = vol
        .data()
        .iter()
        .copied()
        .filter(|v| *v != T::zero())
        .collect();
    if nonzero.is_empty() {
        return Err(Error::AllZeroVolume);
    }
    nonzero.sort_by(|a, b| a.partial_cmp(b).expect("no NaN intensities"));

    let lo = percentile_sorted(&nonzero, low_pct);
    let hi = percentile_sorted(&nonzero, high_pct);
    let beta = percentile_sorted(&nonzero, 0.5 * (low_pct + high_pct));

    let (vmin, vmax) = vol.min_max();
    let range = vmax - vmin;
    let guard = if range > T::zero() {
        range
    } else {
        vmax.abs().max(T::one())
    };
    let alpha = ((hi - lo) / T::of(6.0)).max(T::of(1e-9) * guard);
    SigmoidParams::new(alpha, beta, T::zero(), vmax)
}

/// Make the two volumes' z-spacings equal by degrading the thinner-sliced one.
///
/// The volume with the larger z-spacing is returned unchanged; the other is
/// resampled along z by averaging the source slices overlapping each output
/// slab (weighted by overlap length). x/y geometry is untouched, so world
/// coordinates remain comparable. Equal spacings return both inputs as-is,
/// which also makes the operation idempotent.
pub fn harmonize_slices<T: Real>(a: &Volume<T>, b: &Volume<T>) -> (Volume<T>, Volume<T>) {
    let za = a.spacing()[2];
    let zb = b.spacing()[2];
    let rel = (za - zb).abs() / za.max(zb);
    if rel <= T::of(1e-9) {
        return (a.clone(), b.clone());
    }
    if za < zb {
        (average_slabs(a, zb), b.clone())
    } else {
        (a.clone(), average_slabs(b, za))
    }
}

/// Resample `vol` along z to slab thickness `new_sz` by overlap-weighted
/// slice averaging.
fn average_slabs<T: Real>(vol: &Volume<T>, new_sz: T) -> Volume<T> {
    let [nx, ny, nz] = vol.dims();
    let sz = vol.spacing()[2];
    // Physical z extent covered by the slices seen as slabs of thickness sz.
    let total = T::of(nz as f64) * sz;
    let new_nz = ((total / new_sz).round().as_f64() as usize).max(1);

    // Slab k of the output covers [k, k+1) * new_sz starting at the lower
    // face of input slice 0.
    let lo_face = vol.origin()[2] - sz / T::of(2.0);
    let mut weights: Vec<Vec<(usize, T)>> = Vec::with_capacity(new_nz);
    for k_new in 0..new_nz {
        let slab_lo = T::of(k_new as f64) * new_sz;
        let slab_hi = slab_lo + new_sz;
        let mut row = Vec::new();
        for k in 0..nz {
            let s_lo = T::of(k as f64) * sz;
            let s_hi = s_lo + sz;
            let overlap = s_hi.min(slab_hi) - s_lo.max(slab_lo);
            if overlap > T::zero() {
                row.push((k, overlap));
            }
        }
        let sum: T = row.iter().fold(T::zero(), |acc, (_, w)| acc + *w);
        for (_, w) in row.iter_mut() {
            *w /= sum;
        }
        weights.push(row);
    }

    let mut data = Vec::with_capacity(nx * ny * new_nz);
    for row in &weights {
        for j in 0..ny {
            for i in 0..nx {
                let mut v = T::zero();
                for &(k, w) in row {
                    v += vol.get(i, j, k) * w;
                }
                data.push(v);
            }
        }
    }
    let sp = vol.spacing();
    let or = vol.origin();
    // New slice centers sit at slab midpoints.
    let new_origin_z = lo_face + new_sz / T::of(2.0);
    Volume::new(
        [nx, ny, new_nz],
        [sp[0], sp[1], new_sz],
        [or[0], or[1], new_origin_z],
        data,
    )
    .expect("slab-averaged geometry is valid")
}
