//! Supervised examples: sharp sources blurred by random PSFs and labeled
//! with the MTF of the exact kernel used.
//!
//! Every example is generated from its own RNG stream `(seed, index)`, so a
//! stream is identical regardless of how many workers produce it.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mtf_core::{mtf_label_of_psf, MtfLabel};
use crate::pgm::read_pgm;
use crate::plane::Plane;
use crate::psf_lab::{blur_patch, synth_two_gaussian_psf, PsfRecord, TwoGaussianParams};

/// Supersampling offsets within a pixel, symmetric about its center.
const SUBSAMPLES: [f64; 2] = [-0.25, 0.25];

/// Radius of the inscribed disk in cell units.
const DISK_RADIUS: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceKind {
    Pattern,
    Natural,
    Stripe,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Pattern => "pattern",
            SourceKind::Natural => "natural",
            SourceKind::Stripe => "stripe",
        }
    }
}

impl std::str::FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pattern" => Ok(SourceKind::Pattern),
            "natural" => Ok(SourceKind::Natural),
            "stripe" => Ok(SourceKind::Stripe),
            other => Err(Error::param(format!("unknown source '{other}'"))),
        }
    }
}

/// Geometry and contrast of the checker-with-disks motif.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternParams {
    /// Length of two checker cells, pixels.
    pub period: f64,
    /// Counter-clockwise as displayed, radians.
    pub rotation: f64,
    pub contrast: (f64, f64),
    /// Offsets along the rotated axes, pixels.
    pub phase: (f64, f64),
}

impl Default for PatternParams {
    fn default() -> Self {
        PatternParams {
            period: 16.0,
            rotation: 0.0,
            contrast: (0.0, 1.0),
            phase: (0.0, 0.0),
        }
    }
}

impl PatternParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.period >= 4.0) || !self.period.is_finite() {
            return Err(Error::param(format!("pattern period {} below 4 px", self.period)));
        }
        check_contrast(self.contrast)?;
        if !self.rotation.is_finite() || !self.phase.0.is_finite() || !self.phase.1.is_finite() {
            return Err(Error::NonFinite("pattern geometry".into()));
        }
        Ok(())
    }
}

fn check_contrast((low, high): (f64, f64)) -> Result<()> {
    if !(0.0 <= low && low < high && high <= 1.0) {
        return Err(Error::param(format!("contrast ({low}, {high}) must satisfy 0 <= low < high <= 1")));
    }
    Ok(())
}

fn check_size(size: usize, period: f64) -> Result<()> {
    if (size as f64) < 2.0 * period {
        return Err(Error::dims(format!("size {size} smaller than two periods of {period} px")));
    }
    Ok(())
}

/// Rasterizes a binary indicator over pixel-centered, y-up coordinates
/// relative to the image center, averaging a 2x2 grid of subsamples.
fn rasterize(width: usize, height: usize, contrast: (f64, f64), inside: impl Fn(f64, f64) -> bool) -> Plane {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let n = (SUBSAMPLES.len() * SUBSAMPLES.len()) as f64;
    let (low, high) = contrast;
    Plane::from_fn(width, height, |x, y| {
        let mut hits = 0usize;
        for oy in SUBSAMPLES {
            for ox in SUBSAMPLES {
                let dx = x as f64 + 0.5 + ox - cx;
                let dy = cy - (y as f64 + 0.5 + oy);
                hits += inside(dx, dy) as usize;
            }
        }
        low + (high - low) * hits as f64 / n
    })
}

/// Checkerboard whose cells each carry an inscribed disk of the opposite
/// color, so edges occur at every orientation.
pub fn gen_regular_pattern(params: &PatternParams, size: usize) -> Result<Plane> {
    gen_regular_pattern_rect(params, size, size)
}

/// [`gen_regular_pattern`] on a `width`x`height` canvas.
pub fn gen_regular_pattern_rect(params: &PatternParams, width: usize, height: usize) -> Result<Plane> {
    params.validate()?;
    check_size(width.min(height), params.period)?;
    let cell = params.period / 2.0;
    let (s, co) = params.rotation.sin_cos();
    let (pu, pv) = params.phase;
    Ok(rasterize(width, height, params.contrast, |dx, dy| {
        let u = (dx * co + dy * s - pu) / cell;
        let v = (-dx * s + dy * co - pv) / cell;
        let (i, j) = (u.floor(), v.floor());
        let (fu, fv) = (u - i - 0.5, v - j - 0.5);
        let dark = (i + j).rem_euclid(2.0) != 0.0;
        let disk = fu * fu + fv * fv < DISK_RADIUS * DISK_RADIUS;
        dark != disk
    }))
}

/// Binary stripes whose intensity varies along direction `angle`; angle 0
/// gives vertical edges. Symmetric about the patch center, so `angle` and
/// `angle + π` give the same image.
pub fn gen_stripe_pattern(angle: f64, period: f64, contrast: (f64, f64), size: usize) -> Result<Plane> {
    if !(period >= 2.0) || !angle.is_finite() {
        return Err(Error::param(format!("stripe period {period} below 2 px")));
    }
    check_contrast(contrast)?;
    check_size(size, period)?;
    let (s, co) = angle.rem_euclid(PI).sin_cos();
    Ok(rasterize(size, size, contrast, |dx, dy| {
        (2.0 * PI * (dx * co + dy * s) / period).cos() >= 0.0
    }))
}

/// Central regions of downsampled natural images.
#[derive(Debug, Clone)]
pub struct NaturalImages {
    regions: Vec<Plane>,
}

/// 2x2 box average; odd trailing rows and columns are dropped.
pub fn downsample2(plane: &Plane) -> Plane {
    let (w, h) = (plane.width() / 2, plane.height() / 2);
    Plane::from_fn(w, h, |x, y| {
        0.25 * (plane.get(2 * x, 2 * y)
            + plane.get(2 * x + 1, 2 * y)
            + plane.get(2 * x, 2 * y + 1)
            + plane.get(2 * x + 1, 2 * y + 1))
    })
}

/// Rectangle with half the dimensions, centered.
pub fn central_region(plane: &Plane) -> Result<Plane> {
    let (w, h) = (plane.width() / 2, plane.height() / 2);
    plane.crop((plane.width() - w) / 2, (plane.height() - h) / 2, w, h)
}

impl NaturalImages {
    /// Reads every `.pgm` in `dir` in name order.
    pub fn load(dir: &Path) -> Result<Self> {
        let mut paths: Vec<_> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            return Err(Error::Empty(format!("no images in {}", dir.display())));
        }
        let regions = paths
            .iter()
            .map(|p| central_region(&downsample2(&read_pgm(p)?.pixels)))
            .collect::<Result<Vec<_>>>()?;
        Ok(NaturalImages { regions })
    }

    pub fn from_regions(regions: Vec<Plane>) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::Empty("no natural images".into()));
        }
        Ok(NaturalImages { regions })
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    /// Random `size`x`size` crop of a random region.
    pub fn sample_patch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Plane> {
        let region = &self.regions[rng.random_range(0..self.regions.len())];
        if region.width() < size || region.height() < size {
            return Err(Error::dims(format!(
                "central region {}x{} smaller than patch {size}",
                region.width(),
                region.height()
            )));
        }
        let x0 = rng.random_range(0..=region.width() - size);
        let y0 = rng.random_range(0..=region.height() - size);
        region.crop(x0, y0, size, size)
    }
}

/// `count` random patches from the central regions of the images in `dir`.
pub fn load_natural_patches(dir: &Path, seed: u64, count: usize, size: usize) -> Result<Vec<Plane>> {
    let images = NaturalImages::load(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| images.sample_patch(size, &mut rng)).collect()
}

/// Sampling ranges for random motif patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternRanges {
    pub period: (f64, f64),
    pub low: (f64, f64),
    pub high: (f64, f64),
}

impl Default for PatternRanges {
    fn default() -> Self {
        PatternRanges {
            period: (8.0, 24.0),
            low: (0.0, 0.3),
            high: (0.7, 1.0),
        }
    }
}

impl PatternRanges {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PatternParams {
        let period = uniform(rng, self.period);
        PatternParams {
            period,
            rotation: rng.random_range(0.0..2.0 * PI),
            contrast: (uniform(rng, self.low), uniform(rng, self.high)),
            phase: (rng.random_range(0.0..period), rng.random_range(0.0..period)),
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    uniform(rng, (lo.ln(), hi.ln())).exp()
}

/// Provider of sharp patches.
#[derive(Debug, Clone)]
pub enum SharpSource {
    Pattern(PatternRanges),
    Natural(NaturalImages),
    /// Stripes at a random angle.
    Stripe { period: (f64, f64) },
}

impl SharpSource {
    pub fn kind(&self) -> SourceKind {
        match self {
            SharpSource::Pattern(_) => SourceKind::Pattern,
            SharpSource::Natural(_) => SourceKind::Natural,
            SharpSource::Stripe { .. } => SourceKind::Stripe,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Plane> {
        match self {
            SharpSource::Pattern(r) => {
                let mut p = r.sample(rng);
                p.period = p.period.min(size as f64 / 2.0);
                gen_regular_pattern(&p, size)
            }
            SharpSource::Natural(images) => images.sample_patch(size, rng),
            SharpSource::Stripe { period } => {
                let period = uniform(rng, *period).min(size as f64 / 2.0);
                gen_stripe_pattern(rng.random_range(0.0..PI), period, (0.0, 1.0), size)
            }
        }
    }
}

/// Random anisotropic two-Gaussian PSFs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArtificialPsfConfig {
    pub size: usize,
    /// Core widths per principal axis, drawn log-uniformly.
    pub sigma: (f64, f64),
    /// Wing-to-core width ratio per axis.
    pub wing_ratio: (f64, f64),
    pub weight_core: (f64, f64),
}

impl Default for ArtificialPsfConfig {
    fn default() -> Self {
        ArtificialPsfConfig {
            size: 31,
            sigma: (0.4, 3.0),
            wing_ratio: (1.0, 3.0),
            weight_core: (0.4, 1.0),
        }
    }
}

impl ArtificialPsfConfig {
    pub fn sample_params<R: Rng + ?Sized>(&self, rng: &mut R) -> TwoGaussianParams {
        let cap = self.size as f64 / 6.0;
        let core = (log_uniform(rng, self.sigma).min(cap), log_uniform(rng, self.sigma).min(cap));
        let wing = (
            (core.0 * uniform(rng, self.wing_ratio)).min(cap),
            (core.1 * uniform(rng, self.wing_ratio)).min(cap),
        );
        TwoGaussianParams {
            sigma_core: core,
            sigma_wing: wing,
            rotation: rng.random_range(0.0..PI),
            weight_core: uniform(rng, self.weight_core),
        }
    }
}

/// A stored kernel with its precomputed label.
#[derive(Debug, Clone)]
pub struct PoolPsf {
    pub id: String,
    pub kernel: Plane,
    pub label: MtfLabel,
}

impl PoolPsf {
    pub fn new(id: impl Into<String>, kernel: Plane) -> Result<Self> {
        let label = mtf_label_of_psf(&kernel)?;
        Ok(PoolPsf {
            id: id.into(),
            kernel,
            label,
        })
    }
}

/// Stored (measured or interpolated) kernels mixed with artificial ones.
#[derive(Debug, Clone)]
pub struct PsfPool {
    stored: Vec<PoolPsf>,
    artificial: Option<ArtificialPsfConfig>,
    /// Probability of drawing an artificial PSF when both kinds exist.
    artificial_fraction: f64,
}

impl PsfPool {
    pub fn new(stored: Vec<PoolPsf>, artificial: Option<ArtificialPsfConfig>, artificial_fraction: f64) -> Result<Self> {
        if stored.is_empty() && artificial.is_none() {
            return Err(Error::Empty("PSF pool has no kernels".into()));
        }
        if !(0.0..=1.0).contains(&artificial_fraction) {
            return Err(Error::param("artificial fraction must lie in [0, 1]"));
        }
        Ok(PsfPool {
            stored,
            artificial,
            artificial_fraction,
        })
    }

    pub fn artificial(cfg: ArtificialPsfConfig) -> Self {
        PsfPool {
            stored: Vec::new(),
            artificial: Some(cfg),
            artificial_fraction: 1.0,
        }
    }

    pub fn from_records(records: &[PsfRecord], artificial: Option<ArtificialPsfConfig>, artificial_fraction: f64) -> Result<Self> {
        let stored = records
            .iter()
            .enumerate()
            .map(|(i, r)| PoolPsf::new(format!("record-{i}"), r.kernel().clone()))
            .collect::<Result<Vec<_>>>()?;
        PsfPool::new(stored, artificial, artificial_fraction)
    }

    pub fn stored(&self) -> &[PoolPsf] {
        &self.stored
    }

    /// Largest kernel the pool can produce.
    pub fn max_size(&self) -> usize {
        let stored = self.stored.iter().map(|p| p.kernel.width()).max().unwrap_or(0);
        stored.max(self.artificial.map_or(0, |a| a.size))
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<PoolPsf> {
        let use_artificial = match (&self.artificial, self.stored.is_empty()) {
            (None, _) => false,
            (Some(_), true) => true,
            (Some(_), false) => rng.random_bool(self.artificial_fraction),
        };
        if let (true, Some(cfg)) = (use_artificial, &self.artificial) {
            let params = cfg.sample_params(rng);
            let kernel = synth_two_gaussian_psf(&params, cfg.size)?;
            let label = mtf_label_of_psf(&kernel)?;
            return Ok(PoolPsf {
                id: format!(
                    "artificial:{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                    params.sigma_core.0,
                    params.sigma_core.1,
                    params.sigma_wing.0,
                    params.sigma_wing.1,
                    params.rotation,
                    params.weight_core
                ),
                kernel,
                label,
            });
        }
        Ok(self.stored[rng.random_range(0..self.stored.len())].clone())
    }
}

/// Noise level range; each example draws its σ uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma: (f64, f64),
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { sigma: (0.0, 0.02) }
    }
}

impl NoiseConfig {
    pub fn fixed(sigma: f64) -> Self {
        NoiseConfig { sigma: (sigma, sigma) }
    }
}

#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub input: Plane,
    pub label: MtfLabel,
    pub psf_id: String,
    pub source: SourceKind,
    pub noise_sigma: f64,
}

/// RNG for example `index` of the stream seeded by `seed`.
pub fn example_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn blurred_input<R: Rng + ?Sized>(
    source: &SharpSource,
    psf: &Plane,
    sigma: f64,
    input_size: usize,
    rng: &mut R,
) -> Result<Plane> {
    let sharp = source.sample(input_size + psf.width() - 1, rng)?;
    let blurred = blur_patch(&sharp, psf, sigma, rng)?;
    if blurred.width() == input_size && blurred.height() == input_size {
        Ok(blurred)
    } else {
        blurred.crop_center(input_size, input_size)
    }
}

/// One blurred, labeled patch. Kernels must be square.
pub fn sample_training_example<R: Rng + ?Sized>(
    source: &SharpSource,
    pool: &PsfPool,
    noise: &NoiseConfig,
    input_size: usize,
    rng: &mut R,
) -> Result<TrainingExample> {
    let psf = pool.draw(rng)?;
    let sigma = uniform(rng, noise.sigma);
    let input = blurred_input(source, &psf.kernel, sigma, input_size, rng)?;
    Ok(TrainingExample {
        input,
        label: psf.label,
        psf_id: psf.id,
        source: source.kind(),
        noise_sigma: sigma,
    })
}

/// Several patches blurred by one PSF, each with its own noise draw.
#[derive(Debug, Clone)]
pub struct ExampleGroup {
    pub inputs: Vec<Plane>,
    pub label: MtfLabel,
    pub psf_id: String,
    pub kernel: Plane,
}

/// Deterministic, index-addressed example stream.
#[derive(Debug, Clone)]
pub struct ExampleStream {
    pub source: SharpSource,
    pub pool: PsfPool,
    pub noise: NoiseConfig,
    pub input_size: usize,
    pub seed: u64,
}

impl ExampleStream {
    pub fn example(&self, index: u64) -> Result<TrainingExample> {
        let mut rng = example_rng(self.seed, index);
        sample_training_example(&self.source, &self.pool, &self.noise, self.input_size, &mut rng)
    }

    pub fn group(&self, index: u64, patches: usize) -> Result<ExampleGroup> {
        let mut rng = example_rng(self.seed, index);
        let psf = self.pool.draw(&mut rng)?;
        let inputs = (0..patches)
            .map(|_| {
                let sigma = uniform(&mut rng, self.noise.sigma);
                blurred_input(&self.source, &psf.kernel, sigma, self.input_size, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ExampleGroup {
            inputs,
            label: psf.label,
            psf_id: psf.id,
            kernel: psf.kernel,
        })
    }

    /// Groups `first..first + count`, generated in parallel, in index order.
    pub fn groups(&self, first: u64, count: usize, patches: usize) -> Result<Vec<ExampleGroup>> {
        (0..count as u64)
            .into_par_iter()
            .map(|i| self.group(first + i, patches))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sobel_gradient, Axis};
    use crate::mtf_core::{gaussian_mtf, LABEL_FREQS};

    fn delta_pool() -> PsfPool {
        let mut k = Plane::zeros(5, 5);
        k.set(2, 2, 1.0);
        PsfPool::new(vec![PoolPsf::new("delta", k).unwrap()], None, 0.0).unwrap()
    }

    #[test]
    fn pattern_spans_contrast() {
        let p = gen_regular_pattern(&PatternParams::default(), 64).unwrap();
        assert_eq!((p.min(), p.max()), (0.0, 1.0));
        let q = gen_regular_pattern(
            &PatternParams {
                contrast: (0.2, 0.8),
                rotation: 0.3,
                ..Default::default()
            },
            64,
        )
        .unwrap();
        assert!((q.min() - 0.2).abs() < 1e-12 && (q.max() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn pattern_quarter_turn_matches_image_rotation() {
        let base = PatternParams {
            period: 13.0,
            phase: (1.7, 0.4),
            ..Default::default()
        };
        let a = gen_regular_pattern(&base, 64).unwrap();
        let b = gen_regular_pattern(
            &PatternParams {
                rotation: PI / 2.0,
                ..base
            },
            64,
        )
        .unwrap();
        assert!(b.max_abs_diff(&a.rotate_ccw90()) <= 0.02);
    }

    #[test]
    fn pattern_rejects_bad_params() {
        let small = PatternParams {
            period: 3.0,
            ..Default::default()
        };
        assert!(gen_regular_pattern(&small, 64).is_err());
        assert!(gen_regular_pattern(&PatternParams::default(), 20).is_err());
        let flat = PatternParams {
            contrast: (0.5, 0.5),
            ..Default::default()
        };
        assert!(gen_regular_pattern(&flat, 64).is_err());
    }

    #[test]
    fn stripe_orientation() {
        let interior = |g: &Plane| {
            let mut m: f64 = 0.0;
            for y in 2..g.height() - 2 {
                for x in 2..g.width() - 2 {
                    m = m.max(g.get(x, y).abs());
                }
            }
            m
        };
        let v = gen_stripe_pattern(0.0, 10.0, (0.0, 1.0), 40).unwrap();
        let h = gen_stripe_pattern(PI / 2.0, 10.0, (0.0, 1.0), 40).unwrap();
        let gv = interior(&sobel_gradient(&v, Axis::Horizontal).unwrap());
        let gh = interior(&sobel_gradient(&h, Axis::Horizontal).unwrap());
        assert!(gv > 1.0);
        assert!(gh < 1e-12);
        assert!(interior(&sobel_gradient(&v, Axis::Vertical).unwrap()) < 1e-12);
    }

    #[test]
    fn stripe_half_turn_is_identical() {
        for angle in [0.0, 0.4, 1.3, 2.9] {
            let a = gen_stripe_pattern(angle, 9.0, (0.1, 0.9), 40).unwrap();
            let b = gen_stripe_pattern(angle + PI, 9.0, (0.1, 0.9), 40).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-12, "angle {angle}");
        }
    }

    #[test]
    fn downsample_and_center() {
        let p = Plane::from_fn(8, 6, |x, y| (x + 10 * y) as f64);
        let d = downsample2(&p);
        assert_eq!((d.width(), d.height()), (4, 3));
        assert_eq!(d.get(0, 0), 5.5);
        let img = Plane::zeros(4000, 3000);
        let r = central_region(&downsample2(&img)).unwrap();
        assert_eq!((r.width(), r.height()), (1000, 750));
    }

    #[test]
    fn natural_patches_from_directory() {
        let dir = tempfile::tempdir().unwrap();
        let img = Plane::from_fn(200, 160, |x, y| ((x * 7 + y * 3) % 50) as f64 / 49.0);
        crate::pgm::write_pgm16(dir.path().join("a.pgm"), &img).unwrap();
        let a = load_natural_patches(dir.path(), 3, 5, 20).unwrap();
        let b = load_natural_patches(dir.path(), 3, 5, 20).unwrap();
        assert_eq!(a.len(), 5);
        assert!(a.iter().zip(&b).all(|(p, q)| p == q));
        assert!(load_natural_patches(dir.path(), 3, 0, 20).unwrap().is_empty());
        assert!(load_natural_patches(dir.path(), 3, 1, 60).is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(NaturalImages::load(empty.path()).is_err());
    }

    #[test]
    fn delta_pool_gives_unblurred_patch() {
        let source = SharpSource::Pattern(PatternRanges::default());
        let ex = sample_training_example(&source, &delta_pool(), &NoiseConfig::fixed(0.0), 48, &mut example_rng(1, 0))
            .unwrap();
        assert!(ex.label.to_array().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        let mut rng = example_rng(1, 0);
        let _psf = delta_pool().draw(&mut rng).unwrap();
        let _sigma = uniform(&mut rng, (0.0, 0.0));
        let sharp = source.sample(52, &mut rng).unwrap();
        assert!(ex.input.max_abs_diff(&sharp.crop_center(48, 48).unwrap()) < 1e-12);
    }

    #[test]
    fn label_is_that_of_the_blurring_kernel() {
        let stream = ExampleStream {
            source: SharpSource::Pattern(PatternRanges::default()),
            pool: PsfPool::artificial(ArtificialPsfConfig::default()),
            noise: NoiseConfig::default(),
            input_size: 48,
            seed: 9,
        };
        for g in stream.groups(0, 6, 2).unwrap() {
            assert_eq!(g.label, mtf_label_of_psf(&g.kernel).unwrap());
            assert!(g.inputs.iter().all(|p| p.width() == 48 && p.min() >= 0.0 && p.max() <= 1.0));
            assert!(g.label.to_array().iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
        }
    }

    #[test]
    fn artificial_labels_match_closed_form() {
        let cfg = ArtificialPsfConfig {
            sigma: (0.8, 2.0),
            ..Default::default()
        };
        let mut rng = example_rng(4, 0);
        for _ in 0..10 {
            let p = cfg.sample_params(&mut rng);
            let kernel = synth_two_gaussian_psf(&p, cfg.size).unwrap();
            let label = mtf_label_of_psf(&kernel).unwrap();
            // Slice of a rotated Gaussian along the u axis has width
            // sqrt(σu² cos² + σv² sin²).
            let w = |s: (f64, f64)| (s.0.powi(2) * p.rotation.cos().powi(2) + s.1.powi(2) * p.rotation.sin().powi(2)).sqrt();
            for (v, &f) in label.radial.iter().zip(&LABEL_FREQS) {
                let exact = p.weight_core * gaussian_mtf(w(p.sigma_core), f)
                    + (1.0 - p.weight_core) * gaussian_mtf(w(p.sigma_wing), f);
                assert!((v - exact).abs() < 1e-3, "{v} vs {exact}");
            }
        }
    }

    #[test]
    fn stream_is_independent_of_batching() {
        let stream = ExampleStream {
            source: SharpSource::Pattern(PatternRanges::default()),
            pool: PsfPool::artificial(ArtificialPsfConfig::default()),
            noise: NoiseConfig::default(),
            input_size: 48,
            seed: 2,
        };
        let all = stream.groups(10, 4, 1).unwrap();
        let one = stream.group(12, 1).unwrap();
        assert_eq!(all[2].inputs, one.inputs);
        assert_eq!(all[2].label, one.label);
        let other = stream.group(13, 1).unwrap();
        assert_ne!(other.psf_id, one.psf_id);
    }

    #[test]
    fn mixed_pool_draws_both_kinds() {
        let mut k = Plane::zeros(7, 7);
        k.set(3, 3, 1.0);
        let pool = PsfPool::new(vec![PoolPsf::new("m", k).unwrap()], Some(ArtificialPsfConfig::default()), 0.5).unwrap();
        let mut rng = example_rng(0, 0);
        let n = 400;
        let artificial = (0..n).filter(|_| pool.draw(&mut rng).unwrap().id.starts_with("artificial")).count();
        assert!((150..250).contains(&artificial), "{artificial}");
        assert_eq!(pool.max_size(), 31);
    }
}
