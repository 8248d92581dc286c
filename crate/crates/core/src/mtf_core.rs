//! Optical and modulation transfer functions of discrete PSFs.
//!
//! Frequencies are in cycles per pixel unless tagged otherwise; Nyquist is
//! 0.5 cy/px, or `1000 / (2 · pitch_um)` cy/mm on the sensor.

use std::fmt;
use std::io::Write;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::psf_lab::convolve_valid;

/// Default FFT size for label computation.
pub const DEFAULT_PAD: usize = 256;

/// Number of Nyquist fractions per direction.
pub const LABEL_LEN: usize = 8;

/// Label frequencies in cy/px: `k/16` of Nyquist for `k = 1..=8`.
pub const LABEL_FREQS: [f64; LABEL_LEN] = [
    1.0 / 32.0,
    2.0 / 32.0,
    3.0 / 32.0,
    4.0 / 32.0,
    5.0 / 32.0,
    6.0 / 32.0,
    7.0 / 32.0,
    8.0 / 32.0,
];

/// Grating amplitude around mean 0.5 for the photometric oracle.
pub const GRATING_AMPLITUDE: f64 = 0.4;

/// Minimum number of full grating periods in the measured region.
pub const MIN_PERIODS: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Radial,
    Tangential,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::Radial, Direction::Tangential];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Radial => "radial",
            Direction::Tangential => "tangential",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrequencyUnit {
    #[serde(rename = "cy/px")]
    CyclesPerPixel,
    #[serde(rename = "cy/mm")]
    CyclesPerMm,
}

impl FrequencyUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            FrequencyUnit::CyclesPerPixel => "cy/px",
            FrequencyUnit::CyclesPerMm => "cy/mm",
        }
    }
}

/// Nyquist frequency in cy/mm for a pixel pitch in micrometres.
pub fn nyquist_cy_mm(pixel_pitch_um: f64) -> f64 {
    1000.0 / (2.0 * pixel_pitch_um)
}

/// Closed-form MTF of an isotropic Gaussian of standard deviation `sigma` px.
pub fn gaussian_mtf(sigma: f64, f: f64) -> f64 {
    (-2.0 * std::f64::consts::PI.powi(2) * sigma * sigma * f * f).exp()
}

/// Centered 2-D spectrum. Index `(n/2, n/2)` holds DC; bin `k` along an
/// axis sits at frequency `(k − n/2) / n`.
#[derive(Debug, Clone)]
pub struct OtfSpectrum {
    size: usize,
    values: Vec<Complex64>,
}

impl OtfSpectrum {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn spacing(&self) -> f64 {
        1.0 / self.size as f64
    }

    /// Value at integer frequency bins `(ku, kv)` relative to DC; wraps periodically.
    pub fn at(&self, ku: isize, kv: isize) -> Complex64 {
        let n = self.size as isize;
        let c = n / 2;
        let col = (c + ku).rem_euclid(n) as usize;
        let row = (c + kv).rem_euclid(n) as usize;
        self.values[row * self.size + col]
    }

    pub fn dc_value(&self) -> Complex64 {
        self.at(0, 0)
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    /// Every value multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> OtfSpectrum {
        OtfSpectrum {
            size: self.size,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    /// Magnitude over the whole grid, centered like the spectrum.
    pub fn mtf_plane(&self) -> Plane {
        Plane::from_fn(self.size, self.size, |x, y| self.values[y * self.size + x].norm())
    }

    /// Phase transfer function over the grid.
    pub fn phase_plane(&self) -> Plane {
        Plane::from_fn(self.size, self.size, |x, y| self.values[y * self.size + x].arg())
    }
}

/// 2-D FFT of `kernel`, zero-padded to `pad_to`, with the kernel's center
/// pixel at the origin so a symmetric PSF has a real spectrum.
pub fn otf_of_psf(kernel: &Plane, pad_to: usize) -> Result<OtfSpectrum> {
    let (w, h) = (kernel.width(), kernel.height());
    if pad_to < w || pad_to < h {
        return Err(Error::param(format!(
            "pad size {pad_to} smaller than kernel {w}x{h}"
        )));
    }
    let n = pad_to;
    let mut buf = vec![Complex64::new(0.0, 0.0); n * n];
    let (cx, cy) = (w / 2, h / 2);
    for y in 0..h {
        let row = (y + n - cy) % n;
        for x in 0..w {
            let col = (x + n - cx) % n;
            buf[row * n + col] = Complex64::new(kernel.get(x, y), 0.0);
        }
    }
    fft2_in_place(&mut buf, n);
    let dc = buf[0];
    let scale = dc.norm();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::ZeroSum);
    }
    let inv = 1.0 / scale;
    let c = n / 2;
    let mut values = vec![Complex64::new(0.0, 0.0); n * n];
    for row in 0..n {
        let dst_row = (row + c) % n;
        for col in 0..n {
            values[dst_row * n + (col + c) % n] = buf[row * n + col] * inv;
        }
    }
    Ok(OtfSpectrum { size: n, values })
}

fn fft2_in_place(buf: &mut [Complex64], n: usize) {
    let fft = FftPlanner::new().plan_fft_forward(n);
    for row in buf.chunks_exact_mut(n) {
        fft.process(row);
    }
    let mut col = vec![Complex64::new(0.0, 0.0); n];
    for x in 0..n {
        for (y, c) in col.iter_mut().enumerate() {
            *c = buf[y * n + x];
        }
        fft.process(&mut col);
        for (y, c) in col.iter().enumerate() {
            buf[y * n + x] = *c;
        }
    }
}

/// MTF samples along one direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtfCurve {
    pub direction: Direction,
    pub unit: FrequencyUnit,
    samples: Vec<(f64, f64)>,
}

impl MtfCurve {
    pub fn new(direction: Direction, unit: FrequencyUnit, samples: Vec<(f64, f64)>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("MTF curve has no samples".into()));
        }
        if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::param("curve frequencies must be strictly increasing"));
        }
        if samples.iter().any(|s| !s.0.is_finite() || !s.1.is_finite()) {
            return Err(Error::NonFinite("MTF curve sample".into()));
        }
        Ok(MtfCurve {
            direction,
            unit,
            samples,
        })
    }

    pub fn samples(&self) -> &[(f64, f64)] {
        &self.samples
    }

    /// Linear interpolation; `None` outside the sampled range.
    pub fn value_at(&self, f: f64) -> Option<f64> {
        let s = &self.samples;
        if f < s[0].0 || f > s[s.len() - 1].0 {
            return None;
        }
        let i = s.partition_point(|p| p.0 <= f);
        if i == 0 {
            return Some(s[0].1);
        }
        if i == s.len() {
            return Some(s[s.len() - 1].1);
        }
        let (f0, v0) = s[i - 1];
        let (f1, v1) = s[i];
        let t = (f - f0) / (f1 - f0);
        Some(v0 + t * (v1 - v0))
    }
}

/// Positive-axis slice of `|OTF|` from DC to Nyquist: along `f_u` for the
/// radial direction, along `f_v` for the tangential one.
pub fn mtf_slice(otf: &OtfSpectrum, direction: Direction) -> MtfCurve {
    let half = otf.size / 2;
    let samples = (0..=half)
        .map(|k| {
            let v = match direction {
                Direction::Radial => otf.at(k as isize, 0),
                Direction::Tangential => otf.at(0, k as isize),
            };
            (k as f64 / otf.size as f64, v.norm())
        })
        .collect();
    MtfCurve {
        direction,
        unit: FrequencyUnit::CyclesPerPixel,
        samples,
    }
}

/// Evaluates a cy/px curve at physical frequencies. A `(0, 1)` anchor is
/// used below the first sample.
pub fn mtf_at_cycles_per_mm(curve: &MtfCurve, pixel_pitch_um: f64, freqs_cy_mm: &[f64]) -> Result<Vec<f64>> {
    if curve.unit != FrequencyUnit::CyclesPerPixel {
        return Err(Error::param("curve must be sampled in cy/px"));
    }
    if !(pixel_pitch_um > 0.0) {
        return Err(Error::param("pixel pitch must be positive"));
    }
    let nyq = nyquist_cy_mm(pixel_pitch_um);
    let pitch_mm = pixel_pitch_um / 1000.0;
    freqs_cy_mm
        .iter()
        .map(|&f| {
            if !(f >= 0.0) || f > nyq * (1.0 + 1e-12) {
                return Err(Error::AboveNyquist { freq: f, nyquist: nyq });
            }
            let fp = f * pitch_mm;
            let first = curve.samples[0];
            if fp < first.0 {
                let t = fp / first.0;
                return Ok(1.0 + t * (first.1 - 1.0));
            }
            curve
                .value_at(fp)
                .ok_or(Error::AboveNyquist { freq: f, nyquist: curve.samples[curve.samples.len() - 1].0 / pitch_mm })
        })
        .collect()
}

/// Radial and tangential MTF at the eight Nyquist fractions in [`LABEL_FREQS`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MtfLabel {
    pub radial: [f64; LABEL_LEN],
    pub tangential: [f64; LABEL_LEN],
}

impl MtfLabel {
    pub fn ones() -> Self {
        MtfLabel {
            radial: [1.0; LABEL_LEN],
            tangential: [1.0; LABEL_LEN],
        }
    }

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != 2 * LABEL_LEN {
            return Err(Error::dims(format!("label needs {} values, got {}", 2 * LABEL_LEN, v.len())));
        }
        let mut l = MtfLabel::ones();
        l.radial.copy_from_slice(&v[..LABEL_LEN]);
        l.tangential.copy_from_slice(&v[LABEL_LEN..]);
        Ok(l)
    }

    /// Radial values followed by tangential values.
    pub fn to_array(&self) -> [f64; 2 * LABEL_LEN] {
        let mut out = [0.0; 2 * LABEL_LEN];
        out[..LABEL_LEN].copy_from_slice(&self.radial);
        out[LABEL_LEN..].copy_from_slice(&self.tangential);
        out
    }

    pub fn direction(&self, d: Direction) -> &[f64; LABEL_LEN] {
        match d {
            Direction::Radial => &self.radial,
            Direction::Tangential => &self.tangential,
        }
    }

    pub fn swapped(&self) -> Self {
        MtfLabel {
            radial: self.tangential,
            tangential: self.radial,
        }
    }

    pub fn mean_abs_error(&self, other: &MtfLabel) -> f64 {
        let (a, b) = (self.to_array(), other.to_array());
        a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
    }

    /// Piecewise-linear curve through `(0, 1)` and the eight label points.
    pub fn curve(&self, d: Direction) -> MtfCurve {
        let mut samples = vec![(0.0, 1.0)];
        samples.extend(LABEL_FREQS.iter().copied().zip(self.direction(d).iter().copied()));
        MtfCurve {
            direction: d,
            unit: FrequencyUnit::CyclesPerPixel,
            samples,
        }
    }
}

/// Label of a PSF. The label frequencies fall exactly on bins of the
/// 256-point padded FFT, so its axis slices are evaluated directly: the
/// spectrum along `f_u` is the 1-D DFT of the kernel's column sums, and
/// along `f_v` that of its row sums.
pub fn mtf_label_of_psf(kernel: &Plane) -> Result<MtfLabel> {
    let (w, h) = (kernel.width(), kernel.height());
    let mut cols = vec![0.0; w];
    let mut rows = vec![0.0; h];
    for y in 0..h {
        for x in 0..w {
            let v = kernel.get(x, y);
            cols[x] += v;
            rows[y] += v;
        }
    }
    let total: f64 = cols.iter().sum();
    if !(total.abs() > 0.0) || !total.is_finite() {
        return Err(Error::ZeroSum);
    }
    let dft = |m: &[f64], f: f64| {
        let c = (m.len() / 2) as f64;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in m.iter().enumerate() {
            let (s, co) = (2.0 * std::f64::consts::PI * f * (i as f64 - c)).sin_cos();
            re += v * co;
            im -= v * s;
        }
        re.hypot(im) / total.abs()
    };
    let mut label = MtfLabel::ones();
    for (k, &f) in LABEL_FREQS.iter().enumerate() {
        label.radial[k] = dft(&cols, f);
        label.tangential[k] = dft(&rows, f);
    }
    Ok(label)
}

/// Relative contrast of a blurred sine grating divided by that of the
/// unblurred grating, at `f` cy/px along `direction`. The grating spans
/// 16 periods of valid convolution output.
pub fn photometric_mtf_oracle(kernel: &Plane, f: f64, direction: Direction) -> Result<f64> {
    if !(f > 0.0 && f <= 0.5) {
        return Err(Error::param(format!("grating frequency {f} outside (0, 0.5]")));
    }
    let valid = (16.0 / f).ceil() as usize;
    photometric_mtf_oracle_with_length(kernel, f, direction, valid)
}

/// As [`photometric_mtf_oracle`] with an explicit number of valid output samples.
pub fn photometric_mtf_oracle_with_length(
    kernel: &Plane,
    f: f64,
    direction: Direction,
    valid_len: usize,
) -> Result<f64> {
    if !(f > 0.0 && f <= 0.5) {
        return Err(Error::param(format!("grating frequency {f} outside (0, 0.5]")));
    }
    let periods = valid_len as f64 * f;
    if periods < MIN_PERIODS {
        return Err(Error::TooFewPeriods { periods });
    }
    let (kw, kh) = (kernel.width(), kernel.height());
    let (ox, oy) = (kw / 2, kh / 2);
    let tau = 2.0 * std::f64::consts::PI;
    let (grating, reference): (Plane, Vec<f64>) = match direction {
        Direction::Radial => {
            let len = valid_len + kw - 1;
            let img = Plane::from_fn(len, kh, |x, _| 0.5 + GRATING_AMPLITUDE * (tau * f * x as f64).sin());
            let reference = (0..valid_len).map(|x| img.get(x + ox, oy)).collect();
            (img, reference)
        }
        Direction::Tangential => {
            let len = valid_len + kh - 1;
            let img = Plane::from_fn(kw, len, |_, y| 0.5 + GRATING_AMPLITUDE * (tau * f * y as f64).sin());
            let reference = (0..valid_len).map(|y| img.get(ox, y + oy)).collect();
            (img, reference)
        }
    };
    let blurred = convolve_valid(&grating, kernel)?;
    let c_blur = contrast(blurred.data());
    let c_ref = contrast(&reference);
    if !(c_ref > 0.0) {
        return Err(Error::NonFinite("reference grating has no contrast".into()));
    }
    Ok(c_blur / c_ref)
}

fn contrast(v: &[f64]) -> f64 {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    (hi - lo) / (hi + lo)
}

/// Separable Gaussian whose discrete-time Fourier transform equals
/// `exp(−2π²σ²f²)` on `|f| ≤ 1/2`, truncated to `size` taps per axis.
/// Taps are the inverse DTFT of the truncated spectrum; a few far taps are
/// slightly negative, so this is a reference kernel rather than a PSF.
pub fn bandlimited_gaussian_kernel(sigma: f64, size: usize) -> Result<Plane> {
    if !(sigma > 0.0) || size % 2 == 0 {
        return Err(Error::param("sigma must be positive and size odd"));
    }
    let half = (size / 2) as isize;
    // composite Simpson over [0, 1/2] of the even integrand
    const INTERVALS: usize = 4000;
    let step = 0.5 / INTERVALS as f64;
    let tap = |n: isize| -> f64 {
        let g = |f: f64| gaussian_mtf(sigma, f) * (2.0 * std::f64::consts::PI * f * n as f64).cos();
        let mut s = g(0.0) + g(0.5);
        for i in 1..INTERVALS {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * g(i as f64 * step);
        }
        2.0 * s * step / 3.0
    };
    let taps: Vec<f64> = (-half..=half).map(tap).collect();
    Ok(Plane::from_fn(size, size, |x, y| taps[x] * taps[y]))
}

/// Writes curves as CSV with columns `direction,frequency_unit,frequency,mtf`.
pub fn write_curves_csv<W: Write>(mut out: W, curves: &[MtfCurve]) -> Result<()> {
    writeln!(out, "direction,frequency_unit,frequency,mtf")?;
    for c in curves {
        for &(f, v) in c.samples() {
            writeln!(out, "{},{},{},{}", c.direction, c.unit.as_str(), f, v)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::psf_lab::{synth_two_gaussian_psf, TwoGaussianParams};

    fn delta(p: usize) -> Plane {
        let mut k = Plane::zeros(p, p);
        k.set(p / 2, p / 2, 1.0);
        k
    }

    fn gaussian(sigma: (f64, f64), rotation: f64, p: usize) -> Plane {
        synth_two_gaussian_psf(&TwoGaussianParams::single(sigma, rotation), p).unwrap()
    }

    #[test]
    fn delta_has_unit_otf() {
        let otf = otf_of_psf(&delta(31), 64).unwrap();
        assert!(otf.values().iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        assert_eq!(mtf_label_of_psf(&delta(31)).unwrap(), MtfLabel::ones());
    }

    #[test]
    fn pad_smaller_than_kernel_is_rejected() {
        assert!(otf_of_psf(&delta(31), 16).is_err());
    }

    #[test]
    fn point_sampled_gaussian_matches_closed_form_in_passband() {
        // point sampling aliases near Nyquist for small sigma, so this
        // checks the band where the aliased tail is negligible
        for sigma in [1.0, 2.0, 4.0] {
            let k = gaussian((sigma, sigma), 0.0, 31);
            let curve = mtf_slice(&otf_of_psf(&k, 256).unwrap(), Direction::Radial);
            for &(f, v) in curve.samples().iter().filter(|s| s.0 <= 0.35) {
                assert!((v - gaussian_mtf(sigma, f)).abs() < 1e-3, "sigma {sigma} f {f}");
            }
        }
    }

    #[test]
    fn bandlimited_gaussian_matches_over_full_band() {
        let k = bandlimited_gaussian_kernel(2.0, 31).unwrap();
        let curve = mtf_slice(&otf_of_psf(&k, 256).unwrap(), Direction::Tangential);
        let worst = curve
            .samples()
            .iter()
            .map(|&(f, v)| (v - gaussian_mtf(2.0, f)).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-6, "{worst}");
    }

    #[test]
    fn spectrum_is_hermitian() {
        let mut k = Plane::from_fn(11, 11, |x, y| ((x * 7 + y * 3) % 5) as f64 + 0.1);
        let s = k.sum();
        k = k.map(|v| v / s);
        let otf = otf_of_psf(&k, 32).unwrap();
        for ku in -15..16 {
            for kv in -15..16 {
                let d = otf.at(ku, kv) - otf.at(-ku, -kv).conj();
                assert!(d.norm() < 1e-12);
            }
        }
    }

    #[test]
    fn elongated_gaussian_slices() {
        // narrow along u, wide along v
        let k = gaussian((1.0, 3.0), 0.0, 31);
        let otf = otf_of_psf(&k, 256).unwrap();
        let r = mtf_slice(&otf, Direction::Radial);
        let t = mtf_slice(&otf, Direction::Tangential);
        assert!(r.value_at(0.1).unwrap() > t.value_at(0.1).unwrap() + 0.3);
        let rot = k.rotate_ccw90();
        let otf_rot = otf_of_psf(&rot, 256).unwrap();
        let r2 = mtf_slice(&otf_rot, Direction::Radial);
        let t2 = mtf_slice(&otf_rot, Direction::Tangential);
        for (a, b) in r.samples().iter().zip(t2.samples()) {
            assert!((a.1 - b.1).abs() < 1e-9);
        }
        for (a, b) in t.samples().iter().zip(r2.samples()) {
            assert!((a.1 - b.1).abs() < 1e-9);
        }
    }

    #[test]
    fn nyquist_at_reference_pitch() {
        assert!((nyquist_cy_mm(4.14) - 120.77).abs() < 0.01);
    }

    #[test]
    fn physical_frequency_lookup() {
        let k = gaussian((2.0, 2.0), 0.0, 31);
        let curve = mtf_slice(&otf_of_psf(&k, 256).unwrap(), Direction::Radial);
        let v = mtf_at_cycles_per_mm(&curve, 4.14, &[0.0, 30.0]).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-12);
        let expected = gaussian_mtf(2.0, 30.0 * 0.00414);
        assert!((expected - 0.296).abs() < 1e-3);
        assert!((v[1] - expected).abs() < 2e-3, "{} vs {expected}", v[1]);
        assert!(matches!(
            mtf_at_cycles_per_mm(&curve, 4.14, &[121.0]),
            Err(Error::AboveNyquist { .. })
        ));
    }

    #[test]
    fn label_anchor_below_first_sample() {
        let mut l = MtfLabel::ones();
        l.radial = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2];
        let c = l.curve(Direction::Radial);
        // half of the first label frequency
        let f = 0.5 / 32.0 / 0.00414;
        let v = mtf_at_cycles_per_mm(&c, 4.14, &[f]).unwrap();
        assert!((v[0] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn photometric_oracle_basics() {
        let d = delta(15);
        for f in [0.05, 0.1, 0.2, 0.5] {
            let v = photometric_mtf_oracle(&d, f, Direction::Radial).unwrap();
            assert!((v - 1.0).abs() < 1e-12);
        }
        let k = gaussian((2.0, 2.0), 0.0, 31);
        let v = photometric_mtf_oracle(&k, 0.1, Direction::Tangential).unwrap();
        assert!((v - 0.4539).abs() < 0.02 * 0.4539 + 1e-3, "{v}");
        assert!(matches!(
            photometric_mtf_oracle_with_length(&k, 0.1, Direction::Radial, 70),
            Err(Error::TooFewPeriods { .. })
        ));
    }

    #[test]
    fn label_matches_padded_fft_slices() {
        let p = TwoGaussianParams {
            sigma_core: (0.7, 1.9),
            sigma_wing: (2.0, 3.5),
            rotation: 0.4,
            weight_core: 0.55,
        };
        let k = synth_two_gaussian_psf(&p, 31).unwrap();
        let label = mtf_label_of_psf(&k).unwrap();
        let otf = otf_of_psf(&k, DEFAULT_PAD).unwrap();
        for d in Direction::BOTH {
            let curve = mtf_slice(&otf, d);
            for (v, &f) in label.direction(d).iter().zip(&LABEL_FREQS) {
                assert!((v - curve.value_at(f).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn label_matches_closed_form_mixture() {
        let (wc, sc, sw) = (0.6, 1.0, 2.5);
        let p = TwoGaussianParams {
            sigma_core: (sc, sc),
            sigma_wing: (sw, sw),
            rotation: 0.0,
            weight_core: wc,
        };
        let label = mtf_label_of_psf(&synth_two_gaussian_psf(&p, 31).unwrap()).unwrap();
        for (v, &f) in label.radial.iter().zip(&LABEL_FREQS) {
            let expected = wc * gaussian_mtf(sc, f) + (1.0 - wc) * gaussian_mtf(sw, f);
            assert!((v - expected).abs() < 1e-3, "f {f}: {v} vs {expected}");
        }
    }

    #[test]
    fn label_ignores_translation() {
        let mut k = Plane::zeros(31, 31);
        let g = gaussian((1.0, 2.0), 0.3, 21);
        for y in 0..21 {
            for x in 0..21 {
                k.set(x + 2, y + 7, g.get(x, y));
            }
        }
        let a = mtf_label_of_psf(&k).unwrap();
        let b = mtf_label_of_psf(&k.roll(3, -5)).unwrap();
        assert!(a.mean_abs_error(&b) < 1e-12);
    }

    #[test]
    fn isotropic_label_is_symmetric() {
        let l = mtf_label_of_psf(&gaussian((1.5, 1.5), 0.0, 31)).unwrap();
        for (a, b) in l.radial.iter().zip(&l.tangential) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn curve_csv_header() {
        let mut buf = Vec::new();
        write_curves_csv(&mut buf, &[MtfLabel::ones().curve(Direction::Radial)]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("direction,frequency_unit,frequency,mtf\nradial,cy/px,0,1\n"));
    }
}
