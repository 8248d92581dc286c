//! Global and local coordinate frames, patch extraction, and the
//! channel-rearranging preprocessing primitives.
//!
//! Conventions: pixel `(x, y)` has `x` to the right and `y` downwards. The
//! optical center sits at `(width/2, height/2)`. The azimuth `phi` is
//! measured from the positive horizontal axis and grows counter-clockwise
//! as displayed, so a point straight above the center has `phi = π/2`.
//!
//! A local patch at `(r, phi)` has its horizontal axis along the outward
//! radial direction `u` and its vertical axis (rows) along the tangential
//! direction `v`; at `phi = 0` this is a plain crop.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plane::{GrayImage, Plane};

/// Position on the sensor in global polar coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalCoord {
    /// Radial distance from the image center in millimetres.
    pub r: f64,
    /// Azimuth in radians, `(-π, π]`.
    pub phi: f64,
}

impl GlobalCoord {
    pub fn new(r: f64, phi: f64) -> Result<Self> {
        if !(r >= 0.0) || !r.is_finite() || !phi.is_finite() {
            return Err(Error::param(format!("invalid global coordinate ({r}, {phi})")));
        }
        Ok(GlobalCoord {
            r,
            phi: wrap_angle(phi),
        })
    }
}

/// Offset inside a patch: `u` radial, `v` tangential, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalCoord {
    pub u: f64,
    pub v: f64,
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// Multi-channel planar tensor, channel-major (`data[(c * height + y) * width + x]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStack {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ChannelStack {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height * width * channels != data.len() {
            return Err(Error::dims(format!(
                "{height}x{width}x{channels} stack needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        Ok(ChannelStack {
            height,
            width,
            channels,
            data,
        })
    }

    /// Stacks equally sized planes as channels.
    pub fn from_planes(planes: &[&Plane]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Empty("no planes to stack".into()))?;
        let (w, h) = (first.width(), first.height());
        let mut data = Vec::with_capacity(w * h * planes.len());
        for p in planes {
            if p.width() != w || p.height() != h {
                return Err(Error::dims("planes differ in size"));
            }
            data.extend_from_slice(p.data());
        }
        Self::new(h, w, planes.len(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> Plane {
        let n = self.height * self.width;
        Plane::new(self.width, self.height, self.data[c * n..(c + 1) * n].to_vec())
            .expect("channel slice has plane size")
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Maps a pixel position to global polar coordinates.
pub fn pixel_to_global(x: f64, y: f64, image: &GrayImage) -> Result<GlobalCoord> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    if !(0.0..=w - 1.0).contains(&x) || !(0.0..=h - 1.0).contains(&y) {
        return Err(Error::OutOfBounds {
            x,
            y,
            width: image.width(),
            height: image.height(),
        });
    }
    let (cx, cy) = image.center();
    let dx = x - cx;
    let dy = cy - y;
    let r = (dx * dx + dy * dy).sqrt() * image.pixel_pitch_um() / 1000.0;
    let phi = if dx == 0.0 && dy == 0.0 {
        0.0
    } else {
        wrap_angle(dy.atan2(dx))
    };
    Ok(GlobalCoord { r, phi })
}

/// Inverse of [`pixel_to_global`]; may land outside the image.
pub fn global_to_pixel(coord: GlobalCoord, image: &GrayImage) -> (f64, f64) {
    let (cx, cy) = image.center();
    let rp = coord.r * 1000.0 / image.pixel_pitch_um();
    (cx + rp * coord.phi.cos(), cy - rp * coord.phi.sin())
}

/// Bilinear interpolation at a sub-pixel position.
pub fn bilinear_sample(plane: &Plane, x: f64, y: f64) -> Result<f64> {
    let (w, h) = (plane.width(), plane.height());
    if w == 0 || h == 0 || !(0.0..=(w - 1) as f64).contains(&x) || !(0.0..=(h - 1) as f64).contains(&y)
    {
        return Err(Error::OutOfBounds {
            x,
            y,
            width: w,
            height: h,
        });
    }
    Ok(bilinear_unchecked(plane, x, y))
}

#[inline]
pub(crate) fn bilinear_unchecked(plane: &Plane, x: f64, y: f64) -> f64 {
    let (w, h) = (plane.width(), plane.height());
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let d = plane.data();
    let v00 = d[y0 * w + x0];
    let v10 = d[y0 * w + x1];
    let v01 = d[y1 * w + x0];
    let v11 = d[y1 * w + x1];
    // written so that integer positions reproduce the grid value exactly
    let top = v00 + fx * (v10 - v00);
    let bottom = v01 + fx * (v11 - v01);
    top + fy * (bottom - top)
}

/// Offset of sample `i` from the patch center for a patch of `size` samples.
///
/// The center sits at index `size / 2`, so an integer center yields
/// integer sample positions at zero rotation.
#[inline]
fn patch_offset(i: usize, size: usize) -> f64 {
    i as f64 - (size / 2) as f64
}

/// Side of the axis-aligned square that must fit around a patch center to
/// allow arbitrary rotation.
pub fn rotation_margin_side(size: usize) -> usize {
    (size as f64 * std::f64::consts::SQRT_2).ceil() as usize + 2
}

/// Samples a `size`x`size` patch around the pixel position `(cx, cy)`
/// whose horizontal axis points along azimuth `phi` (rows along the
/// tangential direction). Single bilinear resampling from the source.
pub fn extract_rotated_patch_at(
    plane: &Plane,
    cx: f64,
    cy: f64,
    phi: f64,
    size: usize,
) -> Result<Plane> {
    let half = rotation_margin_side(size) as f64 / 2.0;
    let (w, h) = (plane.width() as f64, plane.height() as f64);
    if cx - half < 0.0 || cy - half < 0.0 || cx + half > w - 1.0 || cy + half > h - 1.0 {
        return Err(Error::OutOfBounds {
            x: cx,
            y: cy,
            width: plane.width(),
            height: plane.height(),
        });
    }
    let (s, c) = phi.sin_cos();
    Ok(Plane::from_fn(size, size, |j, i| {
        let a = patch_offset(j, size);
        let b = patch_offset(i, size);
        let sx = cx + a * c + b * s;
        let sy = cy - a * s + b * c;
        bilinear_unchecked(plane, sx, sy)
    }))
}

/// Extracts the local-frame patch at a global position.
pub fn extract_rotated_patch(image: &GrayImage, center: GlobalCoord, size: usize) -> Result<Plane> {
    let (cx, cy) = global_to_pixel(center, image);
    extract_rotated_patch_at(image.pixels(), cx, cy, center.phi, size)
}

/// Rotates a plane about its center sample by `angle` (counter-clockwise
/// positive as displayed), keeping its size. Samples falling outside the
/// source take `fill`.
pub fn rotate_plane(plane: &Plane, angle: f64, fill: f64) -> Plane {
    let (w, h) = (plane.width(), plane.height());
    let cx = (w / 2) as f64;
    let cy = (h / 2) as f64;
    // output sample at offset q comes from source offset R(-angle) q
    let (s, c) = (-angle).sin_cos();
    Plane::from_fn(w, h, |x, y| {
        let a = x as f64 - cx;
        let b = y as f64 - cy;
        let sx = cx + a * c + b * s;
        let sy = cy - a * s + b * c;
        const EPS: f64 = 1e-9;
        let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
        if sx < -EPS || sy < -EPS || sx > xmax + EPS || sy > ymax + EPS {
            fill
        } else {
            bilinear_unchecked(plane, sx.clamp(0.0, xmax), sy.clamp(0.0, ymax))
        }
    })
}

/// Direction along which a derivative is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// 3x3 Sobel derivative with edge replication at the border.
///
/// The horizontal kernel is `[[-1,0,1],[-2,0,2],[-1,0,1]]`, applied as a
/// correlation, so a ramp rising to the right gives a positive response
/// of eight times its slope.
pub fn sobel_gradient(patch: &Plane, axis: Axis) -> Result<Plane> {
    let (w, h) = (patch.width(), patch.height());
    if w < 3 || h < 3 {
        return Err(Error::dims(format!("Sobel needs at least 3x3, got {w}x{h}")));
    }
    let at = |x: isize, y: isize| {
        let xc = x.clamp(0, w as isize - 1) as usize;
        let yc = y.clamp(0, h as isize - 1) as usize;
        patch.get(xc, yc)
    };
    Ok(Plane::from_fn(w, h, |x, y| {
        let (x, y) = (x as isize, y as isize);
        match axis {
            Axis::Horizontal => {
                (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1))
            }
            Axis::Vertical => {
                (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1))
                    - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1))
            }
        }
    }))
}

/// Moves every pixel of each `factor`x`factor` group into its own channel.
///
/// Input pixel `(i, j)` of channel `c` lands at `(i / M, j / M)` in channel
/// `c·M² + (i mod M)·M + (j mod M)`.
pub fn subsample_to_channels(stack: &ChannelStack, factor: usize) -> Result<ChannelStack> {
    let m = factor;
    if m == 0 || stack.height % m != 0 || stack.width % m != 0 {
        return Err(Error::dims(format!(
            "{}x{} not divisible by subsampling factor {m}",
            stack.height, stack.width
        )));
    }
    let (oh, ow) = (stack.height / m, stack.width / m);
    let oc = stack.channels * m * m;
    let mut out = vec![0.0; stack.data.len()];
    for c in 0..stack.channels {
        for i in 0..stack.height {
            for j in 0..stack.width {
                let ch = c * m * m + (i % m) * m + (j % m);
                out[(ch * oh + i / m) * ow + j / m] = stack.get(i, j, c);
            }
        }
    }
    ChannelStack::new(oh, ow, oc, out)
}

/// Exact inverse of [`subsample_to_channels`].
pub fn inverse_subsample(stack: &ChannelStack, factor: usize) -> Result<ChannelStack> {
    let m = factor;
    if m == 0 || stack.channels % (m * m) != 0 {
        return Err(Error::dims(format!(
            "{} channels not divisible by {}",
            stack.channels,
            m * m
        )));
    }
    let (oh, ow) = (stack.height * m, stack.width * m);
    let oc = stack.channels / (m * m);
    let mut out = vec![0.0; stack.data.len()];
    for c in 0..oc {
        for i in 0..oh {
            for j in 0..ow {
                let ch = c * m * m + (i % m) * m + (j % m);
                out[(c * oh + i) * ow + j] = stack.get(i / m, j / m, ch);
            }
        }
    }
    ChannelStack::new(oh, ow, oc, out)
}
