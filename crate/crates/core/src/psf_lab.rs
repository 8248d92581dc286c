//! PSF measurement from pinhole-panel photographs, PSF synthesis, and
//! synthetic blurring.

use std::collections::VecDeque;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pixel_to_global, GlobalCoord};
use crate::plane::{GrayImage, Plane};

/// Default PSF patch side, matching the panel's PSF spacing on the sensor.
pub const DEFAULT_PSF_SIZE: usize = 111;

/// Sample value treated as saturated in normalized data.
pub const SATURATION_LEVEL: f64 = 1.0;

const CORNER: usize = 5;
const NORM_TOL: f64 = 1e-9;

/// Capture metadata attached to a measured PSF.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CaptureSettings {
    pub lens_id: String,
    pub f_number: f64,
    pub exposure_index: u32,
}

/// A normalized PSF at a known field position.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfRecord {
    kernel: Plane,
    pub location: GlobalCoord,
    pub settings: CaptureSettings,
}

impl PsfRecord {
    /// Validates that the kernel is square, odd-sized, nonnegative and
    /// sums to one.
    pub fn new(kernel: Plane, location: GlobalCoord, settings: CaptureSettings) -> Result<Self> {
        check_kernel(&kernel)?;
        Ok(PsfRecord {
            kernel,
            location,
            settings,
        })
    }

    pub fn kernel(&self) -> &Plane {
        &self.kernel
    }

    pub fn size(&self) -> usize {
        self.kernel.width()
    }
}

fn check_kernel(k: &Plane) -> Result<()> {
    if !k.is_square() || k.width() % 2 == 0 {
        return Err(Error::dims(format!(
            "PSF must be square with odd side, got {}x{}",
            k.width(),
            k.height()
        )));
    }
    if k.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::param("PSF has negative or non-finite entries"));
    }
    let s = k.sum();
    if (s - 1.0).abs() > NORM_TOL {
        return Err(Error::param(format!("PSF sums to {s}, expected 1")));
    }
    Ok(())
}

/// Geometry of the pinhole panel and its image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelSpec {
    pub pinhole_spacing_mm: f64,
    pub pinhole_diameter_um: f64,
    pub columns: usize,
    pub rows: usize,
    /// Distance between neighbouring PSFs on the sensor, pixels.
    pub image_spacing_px: usize,
}

impl Default for PanelSpec {
    fn default() -> Self {
        PanelSpec {
            pinhole_spacing_mm: 25.0,
            pinhole_diameter_um: 150.0,
            columns: 80,
            rows: 60,
            image_spacing_px: DEFAULT_PSF_SIZE,
        }
    }
}

impl PanelSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.pinhole_spacing_mm > 0.0 && self.pinhole_diameter_um > 0.0)
            || self.columns == 0
            || self.rows == 0
            || self.image_spacing_px == 0
        {
            return Err(Error::param("panel spec fields must be positive"));
        }
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.columns * self.rows
    }
}

/// Parameters of a two-Gaussian PSF: a narrow core plus a wider wing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoGaussianParams {
    /// Core standard deviations `(σ_u, σ_v)`, pixels.
    pub sigma_core: (f64, f64),
    /// Wing standard deviations, componentwise at least the core ones.
    pub sigma_wing: (f64, f64),
    /// Rotation of the principal axes, radians, counter-clockwise as displayed.
    pub rotation: f64,
    pub weight_core: f64,
}

impl TwoGaussianParams {
    /// A single Gaussian expressed as a degenerate mixture.
    pub fn single(sigma: (f64, f64), rotation: f64) -> Self {
        TwoGaussianParams {
            sigma_core: sigma,
            sigma_wing: sigma,
            rotation,
            weight_core: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, w) = (self.sigma_core, self.sigma_wing);
        if !(c.0 > 0.0 && c.1 > 0.0 && w.0 > 0.0 && w.1 > 0.0) {
            return Err(Error::param("Gaussian widths must be positive"));
        }
        if w.0 < c.0 || w.1 < c.1 {
            return Err(Error::param("wing must be at least as wide as the core"));
        }
        if !(0.0..=1.0).contains(&self.weight_core) || !self.rotation.is_finite() {
            return Err(Error::param("core weight must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn max_sigma(&self) -> f64 {
        self.sigma_core.0.max(self.sigma_core.1).max(self.sigma_wing.0).max(self.sigma_wing.1)
    }
}

fn sampled_gaussian(sigma: (f64, f64), rotation: f64, size: usize) -> Plane {
    let c = (size / 2) as f64;
    let (s, co) = rotation.sin_cos();
    let g = Plane::from_fn(size, size, |x, y| {
        let dx = x as f64 - c;
        let dy = c - y as f64;
        let u = dx * co + dy * s;
        let v = -dx * s + dy * co;
        (-0.5 * (u * u / (sigma.0 * sigma.0) + v * v / (sigma.1 * sigma.1))).exp()
    });
    let sum = g.sum();
    g.map(|v| v / sum)
}

/// Mixture `w·G(core) + (1−w)·G(wing)` of unit-mass sampled Gaussians on a
/// `size`x`size` grid, normalized to sum one.
pub fn synth_two_gaussian_psf(params: &TwoGaussianParams, size: usize) -> Result<Plane> {
    params.validate()?;
    if size % 2 == 0 {
        return Err(Error::dims(format!("PSF size {size} must be odd")));
    }
    if 6.0 * params.max_sigma() > size as f64 {
        return Err(Error::SupportOverflow(format!(
            "6 x sigma {} exceeds size {size}",
            params.max_sigma()
        )));
    }
    let core = sampled_gaussian(params.sigma_core, params.rotation, size);
    let w = params.weight_core;
    let mix = if w >= 1.0 {
        core
    } else {
        let wing = sampled_gaussian(params.sigma_wing, params.rotation, size);
        let data = core
            .data()
            .iter()
            .zip(wing.data())
            .map(|(a, b)| w * a + (1.0 - w) * b)
            .collect();
        Plane::new(size, size, data)?
    };
    normalize_psf(&mix)
}

/// Divides a kernel by its sum.
pub fn normalize_psf(kernel: &Plane) -> Result<Plane> {
    let s = kernel.sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::ZeroSum);
    }
    Ok(kernel.map(|v| v / s))
}

pub fn is_saturated(patch: &Plane) -> bool {
    patch.data().iter().any(|&v| v >= SATURATION_LEVEL)
}

/// Statistics of the four `5x5` corner areas of a patch.
pub fn corner_background(patch: &Plane) -> Result<(f64, f64)> {
    let (w, h) = (patch.width(), patch.height());
    if w < 2 * CORNER || h < 2 * CORNER {
        return Err(Error::dims(format!("patch {w}x{h} too small for corner statistics")));
    }
    let mut vals = Vec::with_capacity(4 * CORNER * CORNER);
    for &(x0, y0) in &[(0, 0), (w - CORNER, 0), (0, h - CORNER), (w - CORNER, h - CORNER)] {
        for y in y0..y0 + CORNER {
            for x in x0..x0 + CORNER {
                vals.push(patch.get(x, y));
            }
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Background removal: pixels below `μ + 4σ` (corner statistics) become
/// zero, the rest are reduced by `μ`.
pub fn segment_psf(patch: &Plane) -> Result<Plane> {
    if is_saturated(patch) {
        return Err(Error::Saturated);
    }
    let (mu, sigma) = corner_background(patch)?;
    let threshold = mu + 4.0 * sigma;
    Ok(patch.map(|v| if v < threshold { 0.0 } else { (v - mu).max(0.0) }))
}

/// Longest-exposure patch without saturated samples; `stack` is ordered
/// by increasing exposure.
pub fn select_best_exposure(stack: &[Plane]) -> Result<&Plane> {
    if stack.is_empty() {
        return Err(Error::Empty("exposure stack".into()));
    }
    stack.iter().rev().find(|p| !is_saturated(p)).ok_or(Error::AllSaturated)
}

/// Pixelwise mean of co-located patches.
pub fn average_exposures(patches: &[Plane]) -> Result<Plane> {
    let first = patches.first().ok_or_else(|| Error::Empty("no patches to average".into()))?;
    let (w, h) = (first.width(), first.height());
    let mut acc = vec![0.0; w * h];
    for p in patches {
        if p.width() != w || p.height() != h {
            return Err(Error::dims(format!(
                "patch {}x{} differs from {w}x{h}",
                p.width(),
                p.height()
            )));
        }
        for (a, v) in acc.iter_mut().zip(p.data()) {
            *a += v;
        }
    }
    let n = patches.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Plane::new(w, h, acc)
}

/// Valid-mode 2-D convolution (kernel flipped), output
/// `(W − kw + 1) x (H − kh + 1)`.
pub fn convolve_valid(image: &Plane, kernel: &Plane) -> Result<Plane> {
    let (w, h) = (image.width(), image.height());
    let (kw, kh) = (kernel.width(), kernel.height());
    if kw > w || kh > h {
        return Err(Error::InsufficientMargin(format!(
            "kernel {kw}x{kh} larger than image {w}x{h}"
        )));
    }
    let (ow, oh) = (w - kw + 1, h - kh + 1);
    let mut out = vec![0.0; ow * oh];
    let src = image.data();
    let k = kernel.data();
    for oy in 0..oh {
        let dst = &mut out[oy * ow..(oy + 1) * ow];
        for i in 0..kh {
            let row = &src[(oy + i) * w..(oy + i + 1) * w];
            let krow = &k[(kh - 1 - i) * kw..(kh - i) * kw];
            for j in 0..kw {
                let kv = krow[kw - 1 - j];
                if kv == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(&row[j..j + ow]) {
                    *d += kv * s;
                }
            }
        }
    }
    Plane::new(ow, oh, out)
}

/// Blurs a sharp patch with `psf` in valid mode, adds iid Gaussian noise
/// and clips to `[0, 1]`.
pub fn blur_patch<R: Rng + ?Sized>(sharp: &Plane, psf: &Plane, noise_sigma: f64, rng: &mut R) -> Result<Plane> {
    if sharp.width() < psf.width() || sharp.height() < psf.height() {
        return Err(Error::InsufficientMargin(format!(
            "sharp patch {}x{} smaller than PSF {}x{}",
            sharp.width(),
            sharp.height(),
            psf.width(),
            psf.height()
        )));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::param("noise sigma must be nonnegative"));
    }
    let mut out = convolve_valid(sharp, psf)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::param(e.to_string()))?;
        for v in out.data_mut() {
            *v += normal.sample(rng);
        }
    }
    for v in out.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// Sub-pixel spot positions `(x, y)` in row-major grid order.
///
/// Pixels above `median + 4·1.4826·MAD` (at least a tenth of the way from
/// the median to the maximum) form the foreground. Eight-connected regions
/// that survive an erosion by a 3x3 cross are kept; each yields the
/// background-subtracted center of mass of its foreground pixels.
pub fn detect_psf_centroids(image: &GrayImage, spec: &PanelSpec) -> Result<Vec<(f64, f64)>> {
    spec.validate()?;
    let px = image.pixels();
    let (w, h) = (px.width(), px.height());
    let median = quantile(px.data(), 0.5);
    let mad = {
        let dev: Vec<f64> = px.data().iter().map(|v| (v - median).abs()).collect();
        quantile(&dev, 0.5)
    };
    let peak = px.max();
    let threshold = (median + 4.0 * 1.4826 * mad).max(median + 0.1 * (peak - median));
    if !(peak > threshold) {
        return Err(Error::NoRegions);
    }
    let mask: Vec<bool> = px.data().iter().map(|&v| v > threshold).collect();
    let at = |x: isize, y: isize| x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && mask[y as usize * w + x as usize];
    let eroded: Vec<bool> = (0..w * h)
        .map(|i| {
            let (x, y) = ((i % w) as isize, (i / w) as isize);
            at(x, y) && at(x - 1, y) && at(x + 1, y) && at(x, y - 1) && at(x, y + 1)
        })
        .collect();

    let mut label = vec![usize::MAX; w * h];
    let mut spots = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        let id = spots.len();
        label[start] = id;
        queue.push_back(start);
        let (mut sw, mut sx, mut sy, mut core) = (0.0, 0.0, 0.0, false);
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % w, i / w);
            let wt = px.data()[i] - median;
            sw += wt;
            sx += wt * x as f64;
            sy += wt * y as f64;
            core |= eroded[i];
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (nx, ny) = (x as isize + dx, y as isize + dy);
                    if (dx, dy) != (0, 0) && at(nx, ny) {
                        let j = ny as usize * w + nx as usize;
                        if label[j] == usize::MAX {
                            label[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        spots.push((core && sw > 0.0).then(|| (sx / sw, sy / sw)));
    }
    let mut found: Vec<(f64, f64)> = spots.into_iter().flatten().collect();
    if found.is_empty() {
        return Err(Error::NoRegions);
    }

    let min_dist = spec.image_spacing_px as f64 / 2.0;
    let merged: Vec<bool> = (0..found.len())
        .map(|i| {
            found.iter().enumerate().any(|(j, q)| {
                j != i && (found[i].0 - q.0).hypot(found[i].1 - q.1) < min_dist
            })
        })
        .collect();
    let n_merged = merged.iter().filter(|m| **m).count();
    if n_merged > 0 {
        warn!("excluding {n_merged} spots closer than {min_dist} px to a neighbour");
        found = found.into_iter().zip(&merged).filter(|(_, m)| !**m).map(|(c, _)| c).collect();
    }
    if found.len() > spec.capacity() {
        return Err(Error::param(format!(
            "found {} spots, more than the {}x{} grid",
            found.len(),
            spec.columns,
            spec.rows
        )));
    }
    if found.is_empty() {
        return Err(Error::NoRegions);
    }
    Ok(order_row_major(found, min_dist))
}

fn order_row_major(mut pts: Vec<(f64, f64)>, gap: f64) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.1.total_cmp(&b.1));
    let mut rows: Vec<Vec<(f64, f64)>> = Vec::new();
    for p in pts {
        match rows.last_mut() {
            Some(row) if p.1 - row.last().expect("rows are non-empty").1 <= gap => row.push(p),
            _ => rows.push(vec![p]),
        }
    }
    rows.into_iter()
        .flat_map(|mut r| {
            r.sort_by(|a, b| a.0.total_cmp(&b.0));
            r
        })
        .collect()
}

fn quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    let k = ((s.len() - 1) as f64 * q).round() as usize;
    let (_, m, _) = s.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    *m
}

/// `size`x`size` crop centered on the pixel nearest to `(x, y)`, or `None` if it
/// does not fit.
pub fn crop_around(plane: &Plane, x: f64, y: f64, size: usize) -> Option<Plane> {
    let half = (size / 2) as isize;
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    let (x0, y0) = (cx - half, cy - half);
    if x0 < 0 || y0 < 0 {
        return None;
    }
    plane.crop(x0 as usize, y0 as usize, size, size).ok()
}

/// Co-registered captures of one panel: `exposures[e][k]` is repeat `k`
/// at exposure level `e`, levels ordered by increasing exposure.
#[derive(Debug, Clone)]
pub struct PanelCaptures {
    pub exposures: Vec<Vec<GrayImage>>,
}

/// Full measurement pipeline: detect spots on the shortest exposure, then
/// per spot average the repeats of each exposure level, pick the longest
/// unsaturated level, segment and normalize. Spots that fail (border,
/// saturation at every level, empty after segmentation) are skipped.
pub fn measure_panel(
    captures: &PanelCaptures,
    spec: &PanelSpec,
    psf_size: usize,
    settings: &CaptureSettings,
) -> Result<Vec<PsfRecord>> {
    let first = captures
        .exposures
        .first()
        .and_then(|e| e.first())
        .ok_or_else(|| Error::Empty("no images".into()))?;
    if psf_size % 2 == 0 {
        return Err(Error::dims(format!("PSF size {psf_size} must be odd")));
    }
    let (w, h) = (first.width(), first.height());
    if captures.exposures.iter().flatten().any(|im| im.width() != w || im.height() != h) {
        return Err(Error::dims("panel images differ in size"));
    }
    let shortest = average_images(&captures.exposures[0])?;
    let centroids = detect_psf_centroids(&shortest, spec)?;
    let mut records = Vec::with_capacity(centroids.len());
    let mut skipped = 0usize;
    for &(x, y) in &centroids {
        let stack: Option<Vec<Plane>> = captures
            .exposures
            .iter()
            .map(|level| {
                let crops: Option<Vec<Plane>> = level.iter().map(|im| crop_around(im.pixels(), x, y, psf_size)).collect();
                crops.and_then(|c| average_exposures(&c).ok())
            })
            .collect();
        let rec = stack.ok_or(Error::NoRegions).and_then(|stack| {
            let best = select_best_exposure(&stack)?;
            let kernel = normalize_psf(&segment_psf(best)?)?;
            let loc = pixel_to_global(x.round(), y.round(), first)?;
            PsfRecord::new(kernel, loc, settings.clone())
        });
        match rec {
            Ok(r) => records.push(r),
            Err(_) => skipped += 1,
        }
    }
    if skipped > 0 {
        warn!("skipped {skipped} of {} spots", centroids.len());
    }
    if records.is_empty() {
        return Err(Error::NoRegions);
    }
    Ok(records)
}

fn average_images(images: &[GrayImage]) -> Result<GrayImage> {
    let planes: Vec<Plane> = images.iter().map(|i| i.pixels().clone()).collect();
    let pitch = images.first().map(|i| i.pixel_pitch_um()).ok_or_else(|| Error::Empty("no images".into()))?;
    GrayImage::new(average_exposures(&planes)?, pitch)
}

/// Renders a panel photograph: each grid point gets `psf(index)` scaled by
/// `peak / max(psf)` at a sub-pixel offset via bilinear splatting, on a
/// constant background. Returns the image and the true spot centers.
pub fn render_panel(
    width: usize,
    height: usize,
    spec: &PanelSpec,
    origin: (f64, f64),
    background: f64,
    peak: f64,
    mut psf: impl FnMut(usize) -> Plane,
) -> (Plane, Vec<(f64, f64)>) {
    let mut img = Plane::filled(width, height, background);
    let mut centers = Vec::new();
    let s = spec.image_spacing_px as f64;
    for row in 0..spec.rows {
        for col in 0..spec.columns {
            let (cx, cy) = (origin.0 + col as f64 * s, origin.1 + row as f64 * s);
            let k = psf(centers.len());
            let half = (k.width() / 2) as f64;
            if cx - half < 1.0 || cy - half < 1.0 || cx + half + 2.0 >= width as f64 || cy + half + 2.0 >= height as f64 {
                continue;
            }
            let scale = peak / k.max();
            let (fx, fy) = (cx.floor(), cy.floor());
            let (tx, ty) = (cx - fx, cy - fy);
            for ky in 0..k.height() {
                for kx in 0..k.width() {
                    let v = k.get(kx, ky) * scale;
                    let x = (fx - half) as usize + kx;
                    let y = (fy - half) as usize + ky;
                    for (dx, dy, wgt) in [
                        (0, 0, (1.0 - tx) * (1.0 - ty)),
                        (1, 0, tx * (1.0 - ty)),
                        (0, 1, (1.0 - tx) * ty),
                        (1, 1, tx * ty),
                    ] {
                        let cur = img.get(x + dx, y + dy);
                        img.set(x + dx, y + dy, cur + v * wgt);
                    }
                }
            }
            centers.push((cx, cy));
        }
    }
    (img, centers)
}

const DATASET_MANIFEST: &str = "manifest.json";
const DATASET_BLOB: &str = "kernels.f32";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecordLocation {
    pub r_mm: f64,
    pub phi_rad: f64,
}

/// On-disk description of a PSF dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub panel: PanelSpec,
    pub lens_id: String,
    pub aperture: f64,
    pub psf_size: usize,
    pub count: usize,
    pub pixel_pitch_um: f64,
    pub records: Vec<RecordLocation>,
}

/// Writes `manifest.json` and `kernels.f32` (little-endian, row-major per record).
pub fn write_dataset(dir: &Path, panel: &PanelSpec, pixel_pitch_um: f64, records: &[PsfRecord]) -> Result<()> {
    let first = records.first().ok_or(Error::EmptyDataset)?;
    let p = first.size();
    if records.iter().any(|r| r.size() != p) {
        return Err(Error::dims("records differ in PSF size"));
    }
    fs::create_dir_all(dir)?;
    let manifest = DatasetManifest {
        panel: panel.clone(),
        lens_id: first.settings.lens_id.clone(),
        aperture: first.settings.f_number,
        psf_size: p,
        count: records.len(),
        pixel_pitch_um,
        records: records
            .iter()
            .map(|r| RecordLocation {
                r_mm: r.location.r,
                phi_rad: r.location.phi,
            })
            .collect(),
    };
    fs::write(dir.join(DATASET_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    let mut blob = Vec::with_capacity(records.len() * p * p * 4);
    for r in records {
        for &v in r.kernel().data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::File::create(dir.join(DATASET_BLOB))?.write_all(&blob)?;
    Ok(())
}

/// Reads a dataset; kernels are renormalized after the f32 round trip.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<PsfRecord>)> {
    let mpath = dir.join(DATASET_MANIFEST);
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(&mpath)?).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let p = manifest.psf_size;
    if manifest.records.len() != manifest.count {
        return Err(Error::format(&mpath, "record count mismatch"));
    }
    let bpath = dir.join(DATASET_BLOB);
    let mut bytes = Vec::new();
    fs::File::open(&bpath)?.read_to_end(&mut bytes)?;
    if bytes.len() != manifest.count * p * p * 4 {
        return Err(Error::format(&bpath, format!("expected {} bytes, found {}", manifest.count * p * p * 4, bytes.len())));
    }
    let settings = CaptureSettings {
        lens_id: manifest.lens_id.clone(),
        f_number: manifest.aperture,
        exposure_index: 0,
    };
    let records = bytes
        .chunks_exact(p * p * 4)
        .zip(&manifest.records)
        .map(|(chunk, loc)| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let kernel = normalize_psf(&Plane::new(p, p, data)?)
                .map_err(|e| Error::format(&bpath, e.to_string()))?;
            PsfRecord::new(kernel, GlobalCoord::new(loc.r_mm, loc.phi_rad)?, settings.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gauss(sigma: f64, size: usize) -> Plane {
        synth_two_gaussian_psf(&TwoGaussianParams::single((sigma, sigma), 0.0), size).unwrap()
    }

    #[test]
    fn two_gaussian_is_normalized_and_nonnegative() {
        let p = TwoGaussianParams {
            sigma_core: (0.8, 1.5),
            sigma_wing: (2.0, 4.0),
            rotation: 0.3,
            weight_core: 0.6,
        };
        let k = synth_two_gaussian_psf(&p, 31).unwrap();
        assert!((k.sum() - 1.0).abs() < 1e-12);
        assert!(k.data().iter().all(|v| *v >= 0.0));
        let flipped = synth_two_gaussian_psf(&TwoGaussianParams { rotation: 0.3 + std::f64::consts::PI, ..p }, 31).unwrap();
        assert!(k.max_abs_diff(&flipped) < 1e-15);
    }

    #[test]
    fn quarter_rotation_transposes() {
        let a = synth_two_gaussian_psf(&TwoGaussianParams::single((1.0, 3.0), 0.0), 31).unwrap();
        let b = synth_two_gaussian_psf(&TwoGaussianParams::single((1.0, 3.0), std::f64::consts::FRAC_PI_2), 31).unwrap();
        assert!(a.transpose().max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn equal_widths_collapse() {
        let mix = TwoGaussianParams {
            sigma_core: (1.2, 2.0),
            sigma_wing: (1.2, 2.0),
            rotation: 0.7,
            weight_core: 0.3,
        };
        let a = synth_two_gaussian_psf(&mix, 21).unwrap();
        let b = synth_two_gaussian_psf(&TwoGaussianParams::single((1.2, 2.0), 0.7), 21).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn support_overflow() {
        let r = synth_two_gaussian_psf(&TwoGaussianParams::single((6.0, 1.0), 0.0), 31);
        assert!(matches!(r, Err(Error::SupportOverflow(_))));
    }

    #[test]
    fn normalize_cases() {
        let mut k = Plane::zeros(5, 5);
        k.set(1, 3, 7.0);
        let n = normalize_psf(&k).unwrap();
        assert_eq!(n.get(1, 3), 1.0);
        let u = normalize_psf(&Plane::filled(111, 111, 3.0)).unwrap();
        assert!((u.get(5, 5) - 1.0 / 12321.0).abs() < 1e-18);
        let again = normalize_psf(&u).unwrap();
        assert!(u.max_abs_diff(&again) < 1e-12);
        assert!(matches!(normalize_psf(&Plane::zeros(3, 3)), Err(Error::ZeroSum)));
    }

    #[test]
    fn segment_threshold_and_background() {
        // corners alternate 0.0875 / 0.1125: mean 0.1, std 0.0125
        let mut p = Plane::from_fn(31, 31, |x, y| if (x + y) % 2 == 0 { 0.0875 } else { 0.1125 });
        p.set(15, 15, 0.16);
        p.set(16, 15, 0.149);
        let (mu, sd) = corner_background(&p).unwrap();
        assert!((mu - 0.1).abs() < 1e-3 && (sd - 0.0125).abs() < 1e-3);
        let s = segment_psf(&p).unwrap();
        assert!((s.get(15, 15) - (0.16 - mu)).abs() < 1e-12);
        assert_eq!(s.get(16, 15), 0.0);
        assert_eq!(s.data().iter().filter(|v| **v > 0.0).count(), 1);
        let mut sat = p.clone();
        sat.set(0, 0, 1.0);
        assert!(matches!(segment_psf(&sat), Err(Error::Saturated)));
    }

    #[test]
    fn segment_recovers_spot_mass() {
        let g = gauss(2.0, 41);
        let patch = g.map(|v| 0.05 + v * 0.8 / g.max());
        let k = normalize_psf(&segment_psf(&patch).unwrap()).unwrap();
        let diff: f64 = k.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff < 0.01, "{diff}");
    }

    #[test]
    fn exposure_selection() {
        let un = Plane::filled(3, 3, 0.5);
        let mut sat = un.clone();
        sat.set(1, 1, 1.0);
        let two = Plane::filled(3, 3, 0.7);
        assert_eq!(select_best_exposure(&[un.clone(), two.clone(), sat.clone()]).unwrap(), &two);
        assert_eq!(select_best_exposure(&[un.clone()]).unwrap(), &un);
        assert!(matches!(select_best_exposure(&[sat.clone(), sat]), Err(Error::AllSaturated)));
    }

    #[test]
    fn averaging() {
        let a = Plane::filled(1, 1, 0.0);
        let b = Plane::filled(1, 1, 1.0);
        assert_eq!(average_exposures(&[a.clone(), b]).unwrap().data(), &[0.5]);
        assert!(average_exposures(&[a, Plane::zeros(2, 1)]).is_err());
    }

    #[test]
    fn averaging_reduces_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = Normal::new(0.0, 0.1).unwrap();
        let trials = 1000;
        let mut ss = 0.0;
        for _ in 0..trials {
            let ps: Vec<Plane> = (0..10).map(|_| Plane::filled(1, 1, normal.sample(&mut rng))).collect();
            ss += average_exposures(&ps).unwrap().data()[0].powi(2);
        }
        let sd = (ss / trials as f64).sqrt();
        let expected = 0.1 / 10f64.sqrt();
        assert!((sd - expected).abs() < 0.1 * expected, "{sd}");
    }

    #[test]
    fn blur_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sharp = Plane::from_fn(20, 20, |x, y| ((x * 3 + y * 5) % 7) as f64 / 7.0);
        let mut delta = Plane::zeros(5, 5);
        delta.set(2, 2, 1.0);
        let out = blur_patch(&sharp, &delta, 0.0, &mut rng).unwrap();
        assert_eq!(out, sharp.crop(2, 2, 16, 16).unwrap());
        let c = blur_patch(&Plane::filled(20, 20, 0.3), &gauss(1.5, 11), 0.0, &mut rng).unwrap();
        assert!(c.data().iter().all(|v| (v - 0.3).abs() < 1e-15));
        assert!(matches!(
            blur_patch(&Plane::zeros(4, 40), &delta, 0.0, &mut rng),
            Err(Error::InsufficientMargin(_))
        ));
    }

    #[test]
    fn convolution_flips_kernel() {
        let img = Plane::from_fn(5, 1, |x, _| if x == 2 { 1.0 } else { 0.0 });
        let k = Plane::new(3, 1, vec![0.2, 0.3, 0.5]).unwrap();
        let out = convolve_valid(&img, &k).unwrap();
        // output[x] = sum_j k[j] img[x + 2 - j], so a delta reproduces the kernel
        assert_eq!(out.data(), &[0.2, 0.3, 0.5]);
    }

    #[test]
    fn blurred_edge_follows_erf() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let sharp = Plane::from_fn(80, 25, |x, _| if x >= 40 { 1.0 } else { 0.0 });
        // pixel-integrated Gaussian, whose cumulative sums hit the erf profile
        let cdf = |t: f64| 0.5 * (1.0 + erf(t / (2.0 * 2f64.sqrt())));
        let taps: Vec<f64> = (-12..=12).map(|m| cdf(m as f64 + 0.5) - cdf(m as f64 - 0.5)).collect();
        let psf = normalize_psf(&Plane::from_fn(25, 25, |x, y| taps[x] * taps[y])).unwrap();
        let out = blur_patch(&sharp, &psf, 0.0, &mut rng).unwrap();
        // output column x sees source x + 12; the step sits between 39 and 40
        for x in 0..out.width() {
            let d = (x + 12) as f64 - 39.5;
            let expected = cdf(d);
            assert!((out.get(x, 0) - expected).abs() < 1e-3, "x={x} {} {expected}", out.get(x, 0));
        }
    }

    fn erf(x: f64) -> f64 {
        let n = 20000;
        let h = x / n as f64;
        let f = |t: f64| (-t * t).exp();
        let mut s = f(0.0) + f(x);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn centroids_on_rendered_panel() {
        let spec = PanelSpec {
            columns: 6,
            rows: 4,
            image_spacing_px: 40,
            ..PanelSpec::default()
        };
        let (img, truth) = render_panel(300, 200, &spec, (30.3, 25.7), 0.05, 0.6, |i| gauss(1.0 + 0.1 * (i % 3) as f64, 11));
        let gi = GrayImage::new(img, 4.14).unwrap();
        let found = detect_psf_centroids(&gi, &spec).unwrap();
        assert_eq!(found.len(), truth.len());
        for (f, t) in found.iter().zip(&truth) {
            assert!((f.0 - t.0).hypot(f.1 - t.1) < 0.1, "{f:?} vs {t:?}");
        }
    }

    #[test]
    fn dark_panel_has_no_regions() {
        let gi = GrayImage::new(Plane::filled(50, 50, 0.0), 4.0).unwrap();
        assert!(matches!(detect_psf_centroids(&gi, &PanelSpec::default()), Err(Error::NoRegions)));
    }

    #[test]
    fn merged_spots_are_excluded() {
        let spec = PanelSpec {
            columns: 3,
            rows: 1,
            image_spacing_px: 40,
            ..PanelSpec::default()
        };
        let (mut img, _) = render_panel(200, 60, &spec, (30.0, 30.0), 0.0, 0.5, |_| gauss(1.0, 9));
        // a second spot 8 px from the first one
        let (extra, _) = render_panel(200, 60, &PanelSpec { columns: 1, ..spec.clone() }, (38.0, 30.0), 0.0, 0.5, |_| gauss(1.0, 9));
        for (a, b) in img.data_mut().iter_mut().zip(extra.data()) {
            *a += b;
        }
        let found = detect_psf_centroids(&GrayImage::new(img, 4.0).unwrap(), &spec).unwrap();
        assert_eq!(found.len(), 2);
        assert!(found.iter().all(|c| c.0 > 60.0));
    }

    #[test]
    fn dataset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let settings = CaptureSettings {
            lens_id: "test".into(),
            f_number: 5.6,
            exposure_index: 0,
        };
        let recs: Vec<PsfRecord> = (0..3)
            .map(|i| PsfRecord::new(gauss(1.0 + i as f64 * 0.3, 15), GlobalCoord::new(i as f64, 0.5).unwrap(), settings.clone()).unwrap())
            .collect();
        write_dataset(dir.path(), &PanelSpec::default(), 4.14, &recs).unwrap();
        let (m, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m.count, 3);
        for (a, b) in recs.iter().zip(&back) {
            assert!(a.kernel().max_abs_diff(b.kernel()) < 1e-7);
            assert_eq!(a.location, b.location);
        }
    }
}
