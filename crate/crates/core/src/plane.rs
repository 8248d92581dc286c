//! Dense single-channel 2-D arrays and the grayscale image type built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major 2-D array of `f64` samples.
///
/// Used for image patches, PSF kernels and anything else that is a plain
/// grid of scalars. Row index `y` grows downwards, column index `x` to the
/// right.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width * height != data.len() {
            return Err(Error::dims(format!(
                "{}x{} plane needs {} samples, got {}",
                width,
                height,
                width * height,
                data.len()
            )));
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: f64) {
        self.data[y * self.width + x] = value;
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the `w`x`h` window whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Plane> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::OutOfBounds {
                x: (x0 + w) as f64,
                y: (y0 + h) as f64,
                width: self.width,
                height: self.height,
            });
        }
        let mut data = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            data.extend_from_slice(&self.data[y * self.width + x0..y * self.width + x0 + w]);
        }
        Ok(Plane {
            width: w,
            height: h,
            data,
        })
    }

    /// Centered crop to `w`x`h`; offsets round down.
    pub fn crop_center(&self, w: usize, h: usize) -> Result<Plane> {
        if w > self.width || h > self.height {
            return Err(Error::dims(format!(
                "cannot center-crop {}x{} to {}x{}",
                self.width, self.height, w, h
            )));
        }
        self.crop((self.width - w) / 2, (self.height - h) / 2, w, h)
    }

    pub fn transpose(&self) -> Plane {
        Plane::from_fn(self.height, self.width, |x, y| self.get(y, x))
    }

    /// Quarter turn clockwise as displayed (rows grow downwards), i.e. a
    /// rotation by −90° in the counter-clockwise-positive convention.
    pub fn rotate_cw90(&self) -> Plane {
        let h = self.height;
        Plane::from_fn(self.height, self.width, |x, y| self.get(y, h - 1 - x))
    }

    /// Quarter turn counter-clockwise as displayed (+90°).
    pub fn rotate_ccw90(&self) -> Plane {
        let w = self.width;
        Plane::from_fn(self.height, self.width, |x, y| self.get(w - 1 - y, x))
    }

    pub fn rotate180(&self) -> Plane {
        let mut data = self.data.clone();
        data.reverse();
        Plane {
            width: self.width,
            height: self.height,
            data,
        }
    }

    /// Cyclic shift by whole pixels.
    pub fn roll(&self, dx: isize, dy: isize) -> Plane {
        let (w, h) = (self.width as isize, self.height as isize);
        Plane::from_fn(self.width, self.height, |x, y| {
            let sx = (x as isize - dx).rem_euclid(w) as usize;
            let sy = (y as isize - dy).rem_euclid(h) as usize;
            self.get(sx, sy)
        })
    }

    pub fn max_abs_diff(&self, other: &Plane) -> f64 {
        assert_eq!(self.width, other.width);
        assert_eq!(self.height, other.height);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// A linear grayscale photograph with its sensor pixel pitch.
///
/// Intensities are scalars normalized to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pixels: Plane,
    pixel_pitch_um: f64,
}

impl GrayImage {
    pub fn new(pixels: Plane, pixel_pitch_um: f64) -> Result<Self> {
        if !(pixel_pitch_um > 0.0) || !pixel_pitch_um.is_finite() {
            return Err(Error::param(format!(
                "pixel pitch must be positive, got {pixel_pitch_um}"
            )));
        }
        if let Some(v) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::param(format!("intensity {v} outside [0, 1]")));
        }
        Ok(GrayImage {
            pixels,
            pixel_pitch_um,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    #[inline]
    pub fn pixel_pitch_um(&self) -> f64 {
        self.pixel_pitch_um
    }

    #[inline]
    pub fn pixels(&self) -> &Plane {
        &self.pixels
    }

    pub fn into_pixels(self) -> Plane {
        self.pixels
    }

    /// Pixel coordinates of the optical center, `(width/2, height/2)`.
    pub fn center(&self) -> (f64, f64) {
        (self.width() as f64 / 2.0, self.height() as f64 / 2.0)
    }

    /// Sensor half-diagonal in millimetres.
    pub fn half_diagonal_mm(&self) -> f64 {
        let (w, h) = (self.width() as f64, self.height() as f64);
        0.5 * (w * w + h * h).sqrt() * self.pixel_pitch_um / 1000.0
    }
}
