//! From local MTF estimates to global MTF charts.
//!
//! Local estimates are gathered on a polar grid of patch centers, each
//! center also sampled at small angular offsets. Gaussian-process
//! regression over the radius smooths them per frequency and direction.

use std::f64::consts::PI;
use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{predict_multi, ModelParams};
use crate::geometry::{extract_rotated_patch, wrap_angle, GlobalCoord};
use crate::mtf_core::{mtf_at_cycles_per_mm, Direction, MtfLabel};
use crate::plane::{GrayImage, Plane};

/// Chart frequencies, cy/mm on the sensor.
pub const CHART_FREQS: [f64; 4] = [10.0, 20.0, 30.0, 40.0];

/// Default multipliers for natural-scene models at [`CHART_FREQS`].
pub const COMPENSATION: [f64; 4] = [0.98, 0.95, 0.90, 0.83];

/// Angular offsets added to each grid angle, radians.
pub const ANGLE_OFFSETS: [f64; 3] = [-0.02, 0.0, 0.02];

/// Number of points on the chart's radius grid.
pub const CHART_POINTS: usize = 200;

/// Anything that maps a set of co-blurred local-frame patches to a label.
pub trait LocalEstimator: Sync {
    fn patch_size(&self) -> usize;
    fn estimate(&self, patches: &[Plane]) -> Result<MtfLabel>;
}

impl LocalEstimator for ModelParams {
    fn patch_size(&self) -> usize {
        self.config().input_size
    }

    fn estimate(&self, patches: &[Plane]) -> Result<MtfLabel> {
        predict_multi(self, patches)
    }
}

/// MTF at the requested frequencies in both directions at one location.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEstimate {
    pub location: GlobalCoord,
    /// Index of the grid angle the location belongs to.
    pub ray: usize,
    pub freqs_cy_mm: Vec<f64>,
    pub radial: Vec<f64>,
    pub tangential: Vec<f64>,
    pub n_patches: usize,
}

impl LocalEstimate {
    /// Converts a label to the given physical frequencies.
    pub fn from_label(
        location: GlobalCoord,
        ray: usize,
        label: &MtfLabel,
        pixel_pitch_um: f64,
        freqs_cy_mm: &[f64],
        n_patches: usize,
    ) -> Result<Self> {
        let conv = |d| -> Result<Vec<f64>> {
            Ok(mtf_at_cycles_per_mm(&label.curve(d), pixel_pitch_um, freqs_cy_mm)?
                .into_iter()
                .map(|v| v.clamp(0.0, 1.0))
                .collect())
        };
        Ok(LocalEstimate {
            location,
            ray,
            freqs_cy_mm: freqs_cy_mm.to_vec(),
            radial: conv(Direction::Radial)?,
            tangential: conv(Direction::Tangential)?,
            n_patches,
        })
    }

    pub fn values(&self, d: Direction) -> &[f64] {
        match d {
            Direction::Radial => &self.radial,
            Direction::Tangential => &self.tangential,
        }
    }
}

/// Polar grid of patch centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub radii: usize,
    pub angles: usize,
    pub offsets: Vec<f64>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            radii: 12,
            angles: 16,
            offsets: ANGLE_OFFSETS.to_vec(),
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radii < 1 || self.angles < 1 || self.offsets.is_empty() {
            return Err(Error::param("grid needs at least one radius, angle and offset"));
        }
        Ok(())
    }

    /// `(location, ray)` pairs: radius `i · r_max/(radii − 1)`, angle
    /// `2πk/angles`; the center appears once.
    pub fn locations(&self, r_max: f64) -> Result<Vec<(GlobalCoord, usize)>> {
        self.validate()?;
        let mut out = Vec::new();
        for i in 0..self.radii {
            let r = if self.radii == 1 {
                0.0
            } else {
                r_max * i as f64 / (self.radii - 1) as f64
            };
            if r == 0.0 {
                out.push((GlobalCoord::new(0.0, 0.0)?, 0));
                continue;
            }
            for k in 0..self.angles {
                let phi = wrap_angle(2.0 * PI * k as f64 / self.angles as f64);
                out.push((GlobalCoord::new(r, phi)?, k));
            }
        }
        Ok(out)
    }

    pub fn angle_of_ray(&self, ray: usize) -> f64 {
        wrap_angle(2.0 * PI * ray as f64 / self.angles as f64)
    }
}

/// Patches at a location across images and angle offsets. At `r = 0` all
/// offsets land on the same center and only one is used per image.
pub fn gather_patches(images: &[GrayImage], location: GlobalCoord, offsets: &[f64], size: usize) -> Vec<Plane> {
    let offsets: &[f64] = if location.r == 0.0 { &[0.0] } else { offsets };
    let mut patches = Vec::new();
    for img in images {
        for &d in offsets {
            let Ok(at) = GlobalCoord::new(location.r, wrap_angle(location.phi + d)) else {
                continue;
            };
            if let Ok(p) = extract_rotated_patch(img, at, size) {
                patches.push(p);
            }
        }
    }
    patches
}

/// Local estimates over the grid. Locations without any in-bounds patch
/// are skipped with a warning.
pub fn collect_local_estimates(
    images: &[GrayImage],
    estimator: &dyn LocalEstimator,
    grid: &GridConfig,
    freqs_cy_mm: &[f64],
) -> Result<Vec<LocalEstimate>> {
    let first = images.first().ok_or_else(|| Error::Empty("no images".into()))?;
    let size = estimator.patch_size();
    if images.iter().any(|i| i.width() != first.width() || i.height() != first.height()) {
        return Err(Error::dims("images differ in size"));
    }
    if size > first.width().min(first.height()) {
        return Err(Error::param(format!(
            "patch size {size} larger than image {}x{}",
            first.width(),
            first.height()
        )));
    }
    let pitch = first.pixel_pitch_um();
    let locations = grid.locations(first.half_diagonal_mm())?;
    let results: Vec<Option<LocalEstimate>> = locations
        .par_iter()
        .map(|&(loc, ray)| {
            let patches = gather_patches(images, loc, &grid.offsets, size);
            if patches.is_empty() {
                return Ok(None);
            }
            let label = estimator.estimate(&patches)?;
            LocalEstimate::from_label(loc, ray, &label, pitch, freqs_cy_mm, patches.len()).map(Some)
        })
        .collect::<Result<_>>()?;
    let skipped = results.iter().filter(|r| r.is_none()).count();
    if skipped > 0 {
        warn!("{skipped} grid locations had no in-bounds patch and were skipped");
    }
    let out: Vec<LocalEstimate> = results.into_iter().flatten().collect();
    if out.is_empty() {
        return Err(Error::Empty("no grid location produced a patch".into()));
    }
    Ok(out)
}

/// Squared-exponential GP hyperparameters over the radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpConfig {
    pub signal_std: f64,
    /// Millimetres.
    pub lengthscale: f64,
    pub noise_std: f64,
    pub jitter: f64,
    /// Maximize the log marginal likelihood over the three
    /// hyperparameters before the final fit.
    pub optimize: bool,
}

impl GpConfig {
    pub fn for_radius(r_max: f64) -> Self {
        GpConfig {
            signal_std: 0.15,
            lengthscale: 0.15 * r_max,
            noise_std: 0.05,
            jitter: 1e-8,
            optimize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.signal_std > 0.0 && self.lengthscale > 0.0 && self.noise_std >= 0.0 && self.jitter >= 0.0) {
            return Err(Error::param("GP hyperparameters must be positive"));
        }
        if self.noise_std == 0.0 && self.jitter == 0.0 {
            return Err(Error::param("GP needs observation noise or jitter"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct GpModel {
    pub config: GpConfig,
    inputs: Vec<f64>,
    prior_mean: f64,
    chol_l: DMatrix<f64>,
    alpha: DVector<f64>,
}

fn se(a: f64, b: f64, sf2: f64, l: f64) -> f64 {
    sf2 * (-0.5 * ((a - b) / l).powi(2)).exp()
}

fn gram(r: &[f64], cfg: &GpConfig) -> DMatrix<f64> {
    let n = r.len();
    let sf2 = cfg.signal_std.powi(2);
    let diag = cfg.noise_std.powi(2) + cfg.jitter;
    DMatrix::from_fn(n, n, |i, j| se(r[i], r[j], sf2, cfg.lengthscale) + if i == j { diag } else { 0.0 })
}

/// Cholesky factor, `α = K⁻¹(y − m)` and the log marginal likelihood.
fn factor(r: &[f64], y: &DVector<f64>, cfg: &GpConfig) -> Result<(DMatrix<f64>, DVector<f64>, f64)> {
    let chol = gram(r, cfg)
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("GP covariance".into()))?;
    let alpha = chol.solve(y);
    let l = chol.l();
    let logdet: f64 = l.diagonal().iter().map(|d| d.ln()).sum();
    let n = r.len() as f64;
    let lml = -0.5 * y.dot(&alpha) - logdet - 0.5 * n * (2.0 * PI).ln();
    Ok((l, alpha, lml))
}

/// Hyperparameters by gradient ascent of the log marginal likelihood in
/// log space, with step halving on failure.
fn optimize_hyper(r: &[f64], y: &DVector<f64>, start: GpConfig) -> Result<GpConfig> {
    let span = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - r.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = span.max(1e-6);
    let clamp = |c: GpConfig| GpConfig {
        signal_std: c.signal_std.clamp(1e-4, 10.0),
        lengthscale: c.lengthscale.clamp(1e-3 * span, 10.0 * span),
        noise_std: c.noise_std.clamp(1e-4, 1.0),
        ..c
    };
    let mut cfg = clamp(GpConfig {
        noise_std: start.noise_std.max(1e-4),
        ..start
    });
    let (_, _, mut best) = factor(r, y, &cfg)?;
    let mut step = 0.5;
    let n = r.len();
    for _ in 0..200 {
        let k = gram(r, &cfg);
        let Some(chol) = k.clone().cholesky() else { break };
        let alpha = chol.solve(y);
        let kinv = chol.inverse();
        let w = &alpha * alpha.transpose() - kinv;
        let sf2 = cfg.signal_std.powi(2);
        let (mut g_sf, mut g_l, mut g_n) = (0.0, 0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let kf = se(r[i], r[j], sf2, cfg.lengthscale);
                let d2 = ((r[i] - r[j]) / cfg.lengthscale).powi(2);
                g_sf += w[(i, j)] * 2.0 * kf;
                g_l += w[(i, j)] * kf * d2;
            }
            g_n += w[(i, i)] * 2.0 * cfg.noise_std.powi(2);
        }
        let g = [0.5 * g_sf, 0.5 * g_l, 0.5 * g_n];
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            break;
        }
        let mut improved = false;
        while step > 1e-6 {
            let s = step / norm;
            let trial = clamp(GpConfig {
                signal_std: cfg.signal_std * (s * g[0]).exp(),
                lengthscale: cfg.lengthscale * (s * g[1]).exp(),
                noise_std: cfg.noise_std * (s * g[2]).exp(),
                ..cfg
            });
            match factor(r, y, &trial) {
                Ok((_, _, lml)) if lml > best => {
                    best = lml;
                    cfg = trial;
                    step *= 1.5;
                    improved = true;
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !improved {
            break;
        }
    }
    Ok(cfg)
}

/// Exact GP regression with the sample mean as prior mean.
pub fn gp_fit(samples: &[(f64, f64)], cfg: &GpConfig) -> Result<GpModel> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(Error::param("GP fit needs at least two samples"));
    }
    if samples.iter().any(|s| !s.0.is_finite() || !s.1.is_finite()) {
        return Err(Error::NonFinite("GP sample".into()));
    }
    if cfg.noise_std == 0.0 {
        for (i, a) in samples.iter().enumerate() {
            if samples[i + 1..].iter().any(|b| b.0 == a.0 && b.1 != a.1) {
                return Err(Error::NotPositiveDefinite(format!(
                    "conflicting noise-free samples at r = {}",
                    a.0
                )));
            }
        }
    }
    let r: Vec<f64> = samples.iter().map(|s| s.0).collect();
    let prior_mean = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
    let y = DVector::from_iterator(samples.len(), samples.iter().map(|s| s.1 - prior_mean));
    let config = if cfg.optimize {
        optimize_hyper(&r, &y, *cfg)?
    } else {
        *cfg
    };
    let (chol_l, alpha, _) = factor(&r, &y, &config)?;
    Ok(GpModel {
        config,
        inputs: r,
        prior_mean,
        chol_l,
        alpha,
    })
}

impl GpModel {
    pub fn prior_mean(&self) -> f64 {
        self.prior_mean
    }

    pub fn log_marginal_likelihood(&self) -> f64 {
        let y = self.chol_l.clone() * self.chol_l.transpose() * &self.alpha;
        let logdet: f64 = self.chol_l.diagonal().iter().map(|d| d.ln()).sum();
        -0.5 * y.dot(&self.alpha) - logdet - 0.5 * self.inputs.len() as f64 * (2.0 * PI).ln()
    }
}

/// Posterior mean and standard deviation of the latent function.
pub fn gp_predict(model: &GpModel, grid: &[f64]) -> Vec<(f64, f64)> {
    let sf2 = model.config.signal_std.powi(2);
    let l = model.config.lengthscale;
    grid.iter()
        .map(|&x| {
            let ks = DVector::from_iterator(model.inputs.len(), model.inputs.iter().map(|&r| se(x, r, sf2, l)));
            let mean = model.prior_mean + ks.dot(&model.alpha);
            let v = model
                .chol_l
                .solve_lower_triangular(&ks)
                .expect("Cholesky factor has a positive diagonal");
            let var = (sf2 - v.dot(&v)).max(0.0);
            (mean, var.sqrt())
        })
        .collect()
}

/// Statistics of one radial bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialBin {
    pub r_lo: f64,
    pub r_hi: f64,
    pub count: usize,
    /// Per frequency.
    pub radial_mean: Vec<f64>,
    pub radial_std: Vec<f64>,
    pub tangential_mean: Vec<f64>,
    pub tangential_std: Vec<f64>,
    /// Set when the bin holds a single estimate and its std is reported as 0.
    pub single: bool,
}

impl RadialBin {
    pub fn center(&self) -> f64 {
        0.5 * (self.r_lo + self.r_hi)
    }

    pub fn stats(&self, d: Direction) -> (&[f64], &[f64]) {
        match d {
            Direction::Radial => (&self.radial_mean, &self.radial_std),
            Direction::Tangential => (&self.tangential_mean, &self.tangential_std),
        }
    }
}

fn mean_std(mut v: Vec<f64>) -> (f64, f64) {
    // Sorting makes the result independent of input order.
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample std per bin `[edges[i], edges[i+1])`, the last bin
/// closed. Empty bins are omitted.
pub fn azimuthal_average(estimates: &[LocalEstimate], edges: &[f64]) -> Result<Vec<RadialBin>> {
    let first = estimates.first().ok_or_else(|| Error::Empty("no estimates".into()))?;
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::param("bin edges must be strictly increasing"));
    }
    let nf = first.freqs_cy_mm.len();
    let last = edges.len() - 2;
    let mut bins = Vec::new();
    for b in 0..=last {
        let (lo, hi) = (edges[b], edges[b + 1]);
        let members: Vec<&LocalEstimate> = estimates
            .iter()
            .filter(|e| {
                let r = e.location.r;
                r >= lo && (r < hi || (b == last && r <= hi))
            })
            .collect();
        if members.is_empty() {
            continue;
        }
        let stat = |d: Direction| -> (Vec<f64>, Vec<f64>) {
            (0..nf).map(|k| mean_std(members.iter().map(|e| e.values(d)[k]).collect())).unzip()
        };
        let (rm, rs) = stat(Direction::Radial);
        let (tm, ts) = stat(Direction::Tangential);
        bins.push(RadialBin {
            r_lo: lo,
            r_hi: hi,
            count: members.len(),
            radial_mean: rm,
            radial_std: rs,
            tangential_mean: tm,
            tangential_std: ts,
            single: members.len() == 1,
        });
    }
    Ok(bins)
}

/// Elementwise product with `factors`, clipped to `[0, 1]`.
pub fn apply_compensation(values: &[f64], factors: &[f64]) -> Result<Vec<f64>> {
    if values.len() != factors.len() {
        return Err(Error::dims(format!(
            "{} values but {} compensation factors",
            values.len(),
            factors.len()
        )));
    }
    Ok(values.iter().zip(factors).map(|(v, f)| (v * f).clamp(0.0, 1.0)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChartMode {
    /// GP along one ray.
    Ray,
    /// Average over rays.
    Azimuthal,
}

/// How azimuthal charts are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AzimuthalSource {
    /// Mean and spread over rays of per-ray GP means.
    GpMeans,
    /// Binned raw estimates, linearly interpolated onto the grid.
    RawBins,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartConfig {
    pub mode: ChartMode,
    pub azimuthal_source: AzimuthalSource,
    /// Ray angle for [`ChartMode::Ray`]; estimates within half the grid's
    /// angular spacing belong to it.
    pub ray_phi: f64,
    pub ray_tolerance: f64,
    pub r_max: f64,
    pub points: usize,
    pub gp: GpConfig,
    /// Multipliers applied last; `None` leaves raw values.
    pub compensation: Option<Vec<f64>>,
}

impl ChartConfig {
    /// Defaults for a sensor: ray toward the top-right corner, 200-point
    /// grid up to the half-diagonal.
    pub fn for_sensor(width: usize, height: usize, pixel_pitch_um: f64, grid: &GridConfig) -> Self {
        let r_max = 0.5 * ((width * width + height * height) as f64).sqrt() * pixel_pitch_um / 1000.0;
        ChartConfig {
            mode: ChartMode::Azimuthal,
            azimuthal_source: AzimuthalSource::GpMeans,
            ray_phi: (height as f64).atan2(width as f64),
            ray_tolerance: PI / grid.angles.max(1) as f64,
            r_max,
            points: CHART_POINTS,
            gp: GpConfig::for_radius(r_max),
            compensation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartCurve {
    pub freq_cy_mm: f64,
    pub direction: Direction,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n_samples: usize,
    /// Raw `(r, value)` inputs.
    pub samples: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ChartMeta {
    pub lens_id: String,
    pub aperture: Option<f64>,
    pub n_photos: usize,
    pub pixel_pitch_um: f64,
    pub compensated: bool,
    pub mode: Option<ChartMode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtfChart {
    pub r_grid: Vec<f64>,
    pub curves: Vec<ChartCurve>,
    pub meta: ChartMeta,
}

pub fn r_grid(r_max: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| r_max * i as f64 / (n - 1) as f64).collect(),
    }
}

/// GP mean and std on `grid`; with fewer than two samples the curve is
/// flat at the single value.
fn smooth_samples(samples: &[(f64, f64)], grid: &[f64], gp: &GpConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    match samples {
        [] => Err(Error::Empty("no samples for curve".into())),
        [(_, v)] => {
            warn!("single location; chart is flat");
            Ok((vec![*v; grid.len()], vec![0.0; grid.len()]))
        }
        _ => {
            let model = gp_fit(samples, gp)?;
            Ok(gp_predict(&model, grid).into_iter().unzip())
        }
    }
}

fn interp_bins(bins: &[RadialBin], d: Direction, k: usize, x: f64) -> (f64, f64) {
    let at = |b: &RadialBin| (b.stats(d).0[k], b.stats(d).1[k]);
    let i = bins.partition_point(|b| b.center() <= x);
    if i == 0 {
        return at(&bins[0]);
    }
    if i == bins.len() {
        return at(&bins[bins.len() - 1]);
    }
    let (a, b) = (&bins[i - 1], &bins[i]);
    let t = (x - a.center()) / (b.center() - a.center());
    let (ma, sa) = at(a);
    let (mb, sb) = at(b);
    (ma + t * (mb - ma), sa + t * (sb - sa))
}

/// Global chart from local estimates; compensation is applied last.
pub fn build_chart(estimates: &[LocalEstimate], cfg: &ChartConfig, meta: ChartMeta) -> Result<MtfChart> {
    let first = estimates.first().ok_or_else(|| Error::Empty("no estimates".into()))?;
    let freqs = first.freqs_cy_mm.clone();
    if estimates.iter().any(|e| e.freqs_cy_mm != freqs) {
        return Err(Error::param("estimates use different frequencies"));
    }
    if let Some(f) = &cfg.compensation {
        if f.len() != freqs.len() {
            return Err(Error::dims("compensation factors do not match the frequencies"));
        }
    }
    let grid = r_grid(cfg.r_max, cfg.points);
    let mut curves = Vec::new();
    for d in [Direction::Tangential, Direction::Radial] {
        for (k, &f) in freqs.iter().enumerate() {
            let (mean, std, samples, n) = match cfg.mode {
                ChartMode::Ray => {
                    let samples: Vec<(f64, f64)> = estimates
                        .iter()
                        .filter(|e| e.location.r == 0.0 || wrap_angle(e.location.phi - cfg.ray_phi).abs() <= cfg.ray_tolerance)
                        .map(|e| (e.location.r, e.values(d)[k]))
                        .collect();
                    let (m, s) = smooth_samples(&samples, &grid, &cfg.gp)?;
                    let n = samples.len();
                    (m, s, samples, n)
                }
                ChartMode::Azimuthal => {
                    let samples: Vec<(f64, f64)> = estimates.iter().map(|e| (e.location.r, e.values(d)[k])).collect();
                    match cfg.azimuthal_source {
                        AzimuthalSource::GpMeans => {
                            let (m, s, n) = average_ray_curves(estimates, d, k, &grid, &cfg.gp)?;
                            (m, s, samples, n)
                        }
                        AzimuthalSource::RawBins => {
                            let edges = r_grid(cfg.r_max, cfg.points.clamp(2, 24));
                            let bins = azimuthal_average(estimates, &edges)?;
                            let (m, s): (Vec<f64>, Vec<f64>) = grid.iter().map(|&x| interp_bins(&bins, d, k, x)).unzip();
                            let n = samples.len();
                            (m, s, samples, n)
                        }
                    }
                }
            };
            let factor = cfg.compensation.as_ref().map_or(1.0, |c| c[k]);
            curves.push(ChartCurve {
                freq_cy_mm: f,
                direction: d,
                mean: mean.iter().map(|v| (v * factor).clamp(0.0, 1.0)).collect(),
                std: std.iter().map(|v| v * factor).collect(),
                n_samples: n,
                samples,
            });
        }
    }
    Ok(MtfChart {
        r_grid: grid,
        curves,
        meta: ChartMeta {
            compensated: cfg.compensation.is_some(),
            mode: Some(cfg.mode),
            ..meta
        },
    })
}

/// Per-ray GP means averaged over rays; the center estimate joins every
/// ray. Returns mean, spread across rays and the ray count.
fn average_ray_curves(
    estimates: &[LocalEstimate],
    d: Direction,
    k: usize,
    grid: &[f64],
    gp: &GpConfig,
) -> Result<(Vec<f64>, Vec<f64>, usize)> {
    let mut rays: Vec<usize> = estimates.iter().filter(|e| e.location.r > 0.0).map(|e| e.ray).collect();
    rays.sort_unstable();
    rays.dedup();
    let center: Vec<(f64, f64)> = estimates
        .iter()
        .filter(|e| e.location.r == 0.0)
        .map(|e| (0.0, e.values(d)[k]))
        .collect();
    if rays.is_empty() {
        let (m, s) = smooth_samples(&center, grid, gp)?;
        return Ok((m, s, 1));
    }
    let curves = rays
        .iter()
        .map(|&ray| {
            let mut samples = center.clone();
            samples.extend(
                estimates
                    .iter()
                    .filter(|e| e.location.r > 0.0 && e.ray == ray)
                    .map(|e| (e.location.r, e.values(d)[k])),
            );
            smooth_samples(&samples, grid, gp).map(|c| c.0)
        })
        .collect::<Result<Vec<_>>>()?;
    let (mean, std) = (0..grid.len()).map(|i| mean_std(curves.iter().map(|c| c[i]).collect())).unzip();
    Ok((mean, std, rays.len()))
}

impl MtfChart {
    pub fn curve(&self, freq: f64, d: Direction) -> Option<&ChartCurve> {
        self.curves.iter().find(|c| c.freq_cy_mm == freq && c.direction == d)
    }

    /// One row per curve and grid point.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "r_mm,direction,freq_cy_mm,mtf_mean,mtf_std,n_samples,compensated")?;
        for c in &self.curves {
            for (i, r) in self.r_grid.iter().enumerate() {
                writeln!(
                    out,
                    "{:.6},{},{},{:.6},{:.6},{},{}",
                    r, c.direction, c.freq_cy_mm, c.mean[i], c.std[i], c.n_samples, self.meta.compensated
                )?;
            }
        }
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// Line plot of every curve: tangential solid, radial dashed.
    pub fn to_svg(&self) -> String {
        const W: f64 = 720.0;
        const H: f64 = 440.0;
        const L: f64 = 60.0;
        const R: f64 = 150.0;
        const T: f64 = 30.0;
        const B: f64 = 50.0;
        const COLORS: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];
        let r_max = self.r_grid.last().copied().unwrap_or(1.0).max(1e-9);
        let sx = |r: f64| L + (W - L - R) * r / r_max;
        let sy = |v: f64| T + (H - T - B) * (1.0 - v.clamp(0.0, 1.0));
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
        );
        s += &format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n");
        for i in 0..=10 {
            let v = i as f64 / 10.0;
            s += &format!(
                "<line x1=\"{L}\" y1=\"{y:.1}\" x2=\"{x2:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\n<text x=\"{tx:.1}\" y=\"{ty:.1}\" text-anchor=\"end\">{v:.1}</text>\n",
                y = sy(v),
                x2 = W - R,
                tx = L - 6.0,
                ty = sy(v) + 4.0
            );
        }
        for i in 0..=5 {
            let r = r_max * i as f64 / 5.0;
            s += &format!(
                "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"middle\">{r:.1}</text>\n",
                x = sx(r),
                y = H - B + 18.0
            );
        }
        s += &format!(
            "<rect x=\"{L}\" y=\"{T}\" width=\"{w:.1}\" height=\"{h:.1}\" fill=\"none\" stroke=\"black\"/>\n",
            w = W - L - R,
            h = H - T - B
        );
        s += &format!(
            "<text x=\"{x:.1}\" y=\"{y:.1}\" text-anchor=\"middle\">radius (mm)</text>\n",
            x = L + 0.5 * (W - L - R),
            y = H - 12.0
        );
        s += &format!("<text x=\"16\" y=\"{y:.1}\" transform=\"rotate(-90 16 {y:.1})\" text-anchor=\"middle\">MTF</text>\n", y = T + 0.5 * (H - T - B));
        let mut freqs: Vec<f64> = self.curves.iter().map(|c| c.freq_cy_mm).collect();
        freqs.dedup();
        for c in &self.curves {
            let color = COLORS[freqs.iter().position(|f| *f == c.freq_cy_mm).unwrap_or(0) % COLORS.len()];
            let dash = match c.direction {
                Direction::Tangential => "",
                Direction::Radial => " stroke-dasharray=\"6 4\"",
            };
            let pts: Vec<String> = self
                .r_grid
                .iter()
                .zip(&c.mean)
                .map(|(r, v)| format!("{:.1},{:.1}", sx(*r), sy(*v)))
                .collect();
            s += &format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"{dash} points=\"{}\"/>\n",
                pts.join(" ")
            );
        }
        for (i, f) in freqs.iter().enumerate() {
            let y = T + 16.0 + 18.0 * i as f64;
            s += &format!(
                "<line x1=\"{x1:.1}\" y1=\"{y:.1}\" x2=\"{x2:.1}\" y2=\"{y:.1}\" stroke=\"{c}\" stroke-width=\"2\"/><text x=\"{tx:.1}\" y=\"{ty:.1}\">MTF{f}</text>\n",
                x1 = W - R + 14.0,
                x2 = W - R + 40.0,
                c = COLORS[i % COLORS.len()],
                tx = W - R + 46.0,
                ty = y + 4.0
            );
        }
        let y = T + 16.0 + 18.0 * freqs.len() as f64 + 10.0;
        s += &format!(
            "<line x1=\"{x1:.1}\" y1=\"{y:.1}\" x2=\"{x2:.1}\" y2=\"{y:.1}\" stroke=\"black\"/><text x=\"{tx:.1}\" y=\"{ty:.1}\">tangential</text>\n",
            x1 = W - R + 14.0,
            x2 = W - R + 40.0,
            tx = W - R + 46.0,
            ty = y + 4.0
        );
        let y = y + 18.0;
        s += &format!(
            "<line x1=\"{x1:.1}\" y1=\"{y:.1}\" x2=\"{x2:.1}\" y2=\"{y:.1}\" stroke=\"black\" stroke-dasharray=\"6 4\"/><text x=\"{tx:.1}\" y=\"{ty:.1}\">radial</text>\n",
            x1 = W - R + 14.0,
            x2 = W - R + 40.0,
            tx = W - R + 46.0,
            ty = y + 4.0
        );
        s += "</svg>\n";
        s
    }
}
