//! Nadaraya-Watson interpolation of PSFs across the image field.
//!
//! The product kernel runs over field position `(r, φ)` and kernel pixel
//! offsets `(u, v)`. The fast path works on kernels rotated into a common
//! frame, where only the `(u, v)` factors couple pixels; those factors are
//! separable and tabulated over integer offsets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotate_plane, wrap_angle, GlobalCoord};
use crate::plane::Plane;
use crate::psf_lab::{normalize_psf, PsfRecord};

/// Table entries below this weight are dropped.
pub const TABLE_CUTOFF: f64 = 1e-8;

/// Minimum total weight before a query counts as unsupported.
pub const MIN_TOTAL_WEIGHT: f64 = 1e-300;

/// Squared-exponential weight `exp(−δ²/2ℓ²)`.
pub fn se_kernel(delta: f64, lengthscale: f64) -> f64 {
    debug_assert!(lengthscale > 0.0);
    (-0.5 * (delta / lengthscale).powi(2)).exp()
}

/// Lengthscales of the product kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KrConfig {
    /// Millimetres.
    pub l_r: f64,
    /// Radians.
    pub l_phi: f64,
    /// Pixels.
    pub l_u: f64,
    pub l_v: f64,
}

impl KrConfig {
    /// Twice the sampling spacing in each field coordinate, half a pixel
    /// in each kernel coordinate.
    pub fn for_grid(r_spacing_mm: f64, phi_spacing: f64) -> Self {
        KrConfig {
            l_r: 2.0 * r_spacing_mm,
            l_phi: 2.0 * phi_spacing,
            l_u: 0.5,
            l_v: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.l_r, self.l_phi, self.l_u, self.l_v];
        if all.iter().all(|l| *l > 0.0 && l.is_finite()) {
            Ok(())
        } else {
            Err(Error::param("kernel-regression lengthscales must be positive"))
        }
    }

    /// Field weight of a record for a query.
    pub fn field_weight(&self, record: GlobalCoord, query: GlobalCoord) -> f64 {
        se_kernel(record.r - query.r, self.l_r) * se_kernel(wrap_angle(record.phi - query.phi), self.l_phi)
    }
}

fn common_size(records: &[PsfRecord]) -> Result<usize> {
    let first = records.first().ok_or(Error::EmptyDataset)?;
    let p = first.size();
    if records.iter().any(|r| r.size() != p) {
        return Err(Error::dims("records differ in kernel size"));
    }
    Ok(p)
}

fn field_weights(records: &[PsfRecord], query: GlobalCoord, cfg: &KrConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let w: Vec<f64> = records.iter().map(|r| cfg.field_weight(r.location, query)).collect();
    let total: f64 = w.iter().sum();
    if !(total >= MIN_TOTAL_WEIGHT) {
        return Err(Error::QueryTooFar(total));
    }
    Ok(w)
}

/// Weighted average over every pixel of every record, before the final
/// renormalization. Each output pixel is a convex combination of input
/// pixels.
pub fn kr_naive_raw(records: &[PsfRecord], query: GlobalCoord, cfg: &KrConfig) -> Result<Plane> {
    let p = common_size(records)?;
    let wf = field_weights(records, query, cfg)?;
    let ku: Vec<f64> = (0..p).map(|d| se_kernel(d as f64, cfg.l_u)).collect();
    let kv: Vec<f64> = (0..p).map(|d| se_kernel(d as f64, cfg.l_v)).collect();
    let mut out = Plane::zeros(p, p);
    for v in 0..p {
        for u in 0..p {
            let (mut num, mut den) = (0.0, 0.0);
            for (rec, &w) in records.iter().zip(&wf) {
                let k = rec.kernel();
                for y in 0..p {
                    let wy = w * kv[v.abs_diff(y)];
                    for x in 0..p {
                        let weight = wy * ku[u.abs_diff(x)];
                        num += weight * k.get(x, y);
                        den += weight;
                    }
                }
            }
            out.set(u, v, num / den);
        }
    }
    Ok(out)
}

/// Direct evaluation of the kernel-regression estimate, normalized to
/// unit sum.
pub fn kr_naive(records: &[PsfRecord], query: GlobalCoord, cfg: &KrConfig) -> Result<Plane> {
    normalize_psf(&kr_naive_raw(records, query, cfg)?)
}

/// Records whose kernels have been rotated by `−φ` so that the radial
/// direction is horizontal in every kernel.
#[derive(Debug, Clone)]
pub struct RotatedPsfDataset {
    records: Vec<PsfRecord>,
    size: usize,
}

impl RotatedPsfDataset {
    pub fn records(&self) -> &[PsfRecord] {
        &self.records
    }

    pub fn kernel_size(&self) -> usize {
        self.size
    }

    pub fn max_radius(&self) -> f64 {
        self.records.iter().map(|r| r.location.r).fold(0.0, f64::max)
    }
}

pub fn rotate_to_common_frame(records: &[PsfRecord]) -> Result<RotatedPsfDataset> {
    let size = common_size(records)?;
    let rotated = records
        .iter()
        .map(|r| {
            let k = if r.location.phi == 0.0 {
                r.kernel().clone()
            } else {
                normalize_psf(&rotate_plane(r.kernel(), -r.location.phi, 0.0))?
            };
            PsfRecord::new(k, r.location, r.settings.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RotatedPsfDataset { records: rotated, size })
}

/// Symmetric 1-D kernel table over offsets `−t..=t`, truncated where the
/// weight drops below [`TABLE_CUTOFF`].
fn table(lengthscale: f64, size: usize) -> Vec<f64> {
    let reach = (0..size).take_while(|&d| se_kernel(d as f64, lengthscale) >= TABLE_CUTOFF).count().max(1);
    let t = reach - 1;
    (0..=2 * t).map(|i| se_kernel(i as f64 - t as f64, lengthscale)).collect()
}

/// Correlates each row (`horizontal`) or column with `taps` and returns
/// the result along with the per-position sum of in-range tap weights.
fn smooth_axis(plane: &Plane, taps: &[f64], horizontal: bool) -> (Plane, Vec<f64>) {
    let (w, h) = (plane.width(), plane.height());
    let n = if horizontal { w } else { h };
    let t = (taps.len() / 2) as isize;
    let mut support = vec![0.0; n];
    for (i, s) in support.iter_mut().enumerate() {
        for (j, &k) in taps.iter().enumerate() {
            let src = i as isize + j as isize - t;
            if (0..n as isize).contains(&src) {
                *s += k;
            }
        }
    }
    let out = Plane::from_fn(w, h, |x, y| {
        let i = if horizontal { x } else { y };
        let mut acc = 0.0;
        for (j, &k) in taps.iter().enumerate() {
            let src = i as isize + j as isize - t;
            if (0..n as isize).contains(&src) {
                let s = src as usize;
                acc += k * if horizontal { plane.get(s, y) } else { plane.get(x, s) };
            }
        }
        acc
    });
    (out, support)
}

/// Factorized evaluation on a common-frame dataset: field weights once per
/// record, one weighted sum of kernels, then separable `(u, v)`
/// smoothing. The denominator factorizes as `W · S_u(u) · S_v(v)`.
pub fn kr_fast(dataset: &RotatedPsfDataset, query: GlobalCoord, cfg: &KrConfig) -> Result<Plane> {
    let p = dataset.size;
    let wf = field_weights(&dataset.records, query, cfg)?;
    let total: f64 = wf.iter().sum();
    let mut acc = vec![0.0; p * p];
    for (rec, &w) in dataset.records.iter().zip(&wf) {
        if w == 0.0 {
            continue;
        }
        for (a, k) in acc.iter_mut().zip(rec.kernel().data()) {
            *a += w * k;
        }
    }
    let acc = Plane::new(p, p, acc)?;
    let (su_plane, su) = smooth_axis(&acc, &table(cfg.l_u, p), true);
    let (smooth, sv) = smooth_axis(&su_plane, &table(cfg.l_v, p), false);
    let raw = Plane::from_fn(p, p, |x, y| smooth.get(x, y) / (total * su[x] * sv[y]));
    normalize_psf(&raw)
}

/// `n` interpolated records with `r` uniform on `[0, r_max]` and `φ`
/// uniform on `(−π, π]`, so every radius is equally represented.
pub fn resample_balanced(dataset: &RotatedPsfDataset, n: usize, seed: u64, cfg: &KrConfig) -> Result<Vec<PsfRecord>> {
    let first = dataset.records.first().ok_or(Error::EmptyDataset)?;
    let r_max = dataset.max_radius();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let locations = (0..n)
        .map(|_| {
            let r = if r_max > 0.0 { rng.random_range(0.0..=r_max) } else { 0.0 };
            let phi = wrap_angle(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
            let phi = if phi == -std::f64::consts::PI { std::f64::consts::PI } else { phi };
            GlobalCoord::new(r, phi)
        })
        .collect::<Result<Vec<_>>>()?;
    let settings = first.settings.clone();
    locations
        .into_par_iter()
        .map(|loc| PsfRecord::new(kr_fast(dataset, loc, cfg)?, loc, settings.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psf_lab::{synth_two_gaussian_psf, CaptureSettings, TwoGaussianParams};

    fn record(sigma: (f64, f64), rotation: f64, r: f64, phi: f64) -> PsfRecord {
        let k = synth_two_gaussian_psf(&TwoGaussianParams::single(sigma, rotation), 15).unwrap();
        PsfRecord::new(k, GlobalCoord::new(r, phi).unwrap(), CaptureSettings::default()).unwrap()
    }

    fn cfg() -> KrConfig {
        KrConfig {
            l_r: 1.0,
            l_phi: 0.3,
            l_u: 0.5,
            l_v: 0.7,
        }
    }

    #[test]
    fn se_kernel_values() {
        assert_eq!(se_kernel(0.0, 2.0), 1.0);
        assert!((se_kernel(2.0, 2.0) - (-0.5f64).exp()).abs() < 1e-15);
        assert!((se_kernel(6.0, 2.0) - (-4.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.l_u = 0.0;
        assert!(c.validate().is_err());
        let g = KrConfig::for_grid(1.5, 0.2);
        assert_eq!((g.l_r, g.l_phi, g.l_u), (3.0, 0.4, 0.5));
    }

    #[test]
    fn single_record_is_reproduced_up_to_smoothing() {
        let rec = record((1.0, 2.0), 0.3, 2.0, 0.5);
        let q = GlobalCoord::new(7.0, -1.0).unwrap();
        let tiny = KrConfig {
            l_u: 1e-3,
            l_v: 1e-3,
            ..cfg()
        };
        let out = kr_naive(std::slice::from_ref(&rec), q, &tiny).unwrap();
        assert!(out.max_abs_diff(rec.kernel()) < 1e-12);
    }

    #[test]
    fn identical_kernels_interpolate_to_themselves() {
        let a = record((1.2, 1.2), 0.0, 1.0, 0.0);
        let b = record((1.2, 1.2), 0.0, 3.0, 0.0);
        let q = GlobalCoord::new(2.0, 0.0).unwrap();
        let sharp = KrConfig {
            l_u: 1e-3,
            l_v: 1e-3,
            ..cfg()
        };
        let out = kr_naive(&[a.clone(), b], q, &sharp).unwrap();
        assert!(out.max_abs_diff(a.kernel()) < 1e-9);
    }

    #[test]
    fn empty_and_far_queries_fail() {
        let q = GlobalCoord::new(1.0, 0.0).unwrap();
        assert!(matches!(kr_naive(&[], q, &cfg()), Err(Error::EmptyDataset)));
        let rec = record((1.0, 1.0), 0.0, 0.0, 0.0);
        let far = GlobalCoord::new(1e4, 0.0).unwrap();
        assert!(matches!(kr_naive(&[rec], far, &cfg()), Err(Error::QueryTooFar(_))));
    }

    #[test]
    fn naive_is_convex_before_normalization() {
        let recs = [record((0.8, 2.0), 0.2, 1.0, 0.1), record((1.5, 1.0), 1.0, 2.0, -0.2)];
        let q = GlobalCoord::new(1.4, 0.0).unwrap();
        let raw = kr_naive_raw(&recs, q, &cfg()).unwrap();
        let lo = recs.iter().map(|r| r.kernel().min()).fold(f64::INFINITY, f64::min);
        let hi = recs.iter().map(|r| r.kernel().max()).fold(0.0, f64::max);
        assert!(raw.data().iter().all(|&v| v >= lo - 1e-15 && v <= hi + 1e-15));
    }

    #[test]
    fn rotation_to_common_frame() {
        let k = synth_two_gaussian_psf(&TwoGaussianParams::single((2.5, 2.5), 0.0), 31).unwrap();
        let iso = PsfRecord::new(k, GlobalCoord::new(3.0, 1.1).unwrap(), CaptureSettings::default()).unwrap();
        let rot = rotate_to_common_frame(std::slice::from_ref(&iso)).unwrap();
        let d = rot.records()[0].kernel().max_abs_diff(iso.kernel());
        assert!(d < 1e-3, "{d}");
        let zero = record((2.0, 0.8), 0.0, 3.0, 0.0);
        let rot = rotate_to_common_frame(std::slice::from_ref(&zero)).unwrap();
        assert_eq!(rot.records()[0].kernel(), zero.kernel());
        let horiz = record((2.0, 0.8), 0.0, 3.0, std::f64::consts::FRAC_PI_2);
        let k = rotate_to_common_frame(std::slice::from_ref(&horiz)).unwrap().records()[0].kernel().clone();
        let c = 7;
        assert!(k.get(c, c + 2) > 5.0 * k.get(c + 2, c));
    }

    #[test]
    fn fast_matches_naive_on_rotated_data() {
        let recs: Vec<PsfRecord> = (0..6)
            .map(|i| {
                let t = i as f64;
                record((0.8 + 0.1 * t, 1.4 - 0.1 * t), 0.3 * t, 0.5 * t, -1.0 + 0.4 * t)
            })
            .collect();
        let rot = rotate_to_common_frame(&recs).unwrap();
        for (r, phi) in [(0.3, -0.8), (1.2, 0.0), (2.4, 1.5)] {
            let q = GlobalCoord::new(r, phi).unwrap();
            let fast = kr_fast(&rot, q, &cfg()).unwrap();
            let naive = kr_naive(rot.records(), q, &cfg()).unwrap();
            assert!(fast.max_abs_diff(&naive) < 1e-9);
        }
    }

    #[test]
    fn degenerate_pixel_kernel_is_plain_average() {
        let recs = [record((1.0, 1.0), 0.0, 1.0, 0.0), record((2.0, 1.0), 0.0, 2.0, 0.0)];
        let rot = rotate_to_common_frame(&recs).unwrap();
        let c = KrConfig {
            l_u: 1e-3,
            l_v: 1e-3,
            ..cfg()
        };
        let q = GlobalCoord::new(1.5, 0.0).unwrap();
        let out = kr_fast(&rot, q, &c).unwrap();
        let mean = Plane::from_fn(15, 15, |x, y| 0.5 * (recs[0].kernel().get(x, y) + recs[1].kernel().get(x, y)));
        assert!(out.max_abs_diff(&mean) < 1e-12);
    }

    #[test]
    fn resampling_is_deterministic() {
        let recs = [record((1.0, 1.0), 0.0, 0.0, 0.0), record((1.5, 1.0), 0.0, 4.0, 0.0)];
        let rot = rotate_to_common_frame(&recs).unwrap();
        let wide = KrConfig {
            l_r: 3.0,
            l_phi: 10.0,
            ..cfg()
        };
        let a = resample_balanced(&rot, 5, 1, &wide).unwrap();
        let b = resample_balanced(&rot, 5, 1, &wide).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|r| r.location.r <= 4.0 && r.location.phi > -std::f64::consts::PI));
        assert!(resample_balanced(&rot, 0, 1, &wide).unwrap().is_empty());
    }
}
