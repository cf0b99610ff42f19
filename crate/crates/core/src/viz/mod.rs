//! Rendering of attribution outputs as 8-bit RGB images.
//!
//! Heatmap colormap, piecewise linear in each channel with control points
//!
//! | value | R   | G   | B   |
//! |-------|-----|-----|-----|
//! | 0.0   | 0   | 0   | 255 |
//! | 0.5   | 0   | 255 | 0   |
//! | 1.0   | 255 | 0   | 0   |
//!
//! Between control points each channel is `round(255 * t)` or
//! `round(255 * (1 - t))` with `t` the position within the segment, rounding
//! half away from zero.

mod io;

use crate::error::{Error, Result};
use crate::lime::LimeExplanation;
use crate::tensor::{Scalar, Tensor};

pub use io::{decode_ppm, encode_ppm, read_image, write_image, ImageFormat};

/// Default blend strength for heatmap overlays.
pub const DEFAULT_ALPHA: f64 = 0.4;
/// Background colour for isolated LIME segments.
pub const NEUTRAL_GRAY: [u8; 3] = [128, 128, 128];
pub const POSITIVE_TINT: [u8; 3] = [0, 255, 0];
pub const NEGATIVE_TINT: [u8; 3] = [255, 0, 0];
/// Blend strength of the tint on the strongest LIME segment.
pub const MAX_TINT: f64 = 0.6;

/// `height x width` pixels, three interleaved 8-bit channels, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Image(format!(
                "{width}x{height} image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, color: [u8; 3]) -> Self {
        RgbImage {
            width,
            height,
            data: color.repeat(width * height),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    fn same_size(&self, other: &RgbImage) -> Result<()> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::Image(format!(
                "dimension mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// `3 x H x W` tensor with values in `[0, 1]`.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let (h, w) = (self.height, self.width);
        let mut data = vec![T::zero(); 3 * h * w];
        for p in 0..h * w {
            for c in 0..3 {
                data[c * h * w + p] = T::of(f64::from(self.data[p * 3 + c]) / 255.0);
            }
        }
        Tensor::from_raw(vec![3, h, w], data)
    }

    /// Inverse of [`RgbImage::to_tensor`]; values are clamped to `[0, 1]`.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let &[c, h, w] = t.shape() else {
            return Err(Error::InvalidShape {
                shape: t.shape().to_vec(),
                reason: "expected C x H x W".into(),
            });
        };
        if c != 3 && c != 1 {
            return Err(Error::Image(format!("cannot render {c} channels")));
        }
        let mut data = Vec::with_capacity(3 * h * w);
        for p in 0..h * w {
            for ch in 0..3 {
                let v = t.data()[ch.min(c - 1) * h * w + p].as_f64();
                data.push(to_byte(v.clamp(0.0, 1.0) * 255.0));
            }
        }
        RgbImage::new(w, h, data)
    }
}

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn lerp_color(a: [u8; 3], b: [u8; 3], t: f64) -> [u8; 3] {
    std::array::from_fn(|i| to_byte((1.0 - t) * f64::from(a[i]) + t * f64::from(b[i])))
}

/// Maps one value in `[0, 1]` through the blue-green-red colormap.
pub fn colormap_value(v: f64) -> Result<[u8; 3]> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!(
            "colormap input {v} outside [0, 1]; normalize first"
        )));
    }
    Ok(if v <= 0.5 {
        let t = v * 2.0;
        [0, to_byte(255.0 * t), to_byte(255.0 * (1.0 - t))]
    } else {
        let t = (v - 0.5) * 2.0;
        [to_byte(255.0 * t), to_byte(255.0 * (1.0 - t)), 0]
    })
}

/// Renders an `H x W` map with values in `[0, 1]`.
pub fn colormap<T: Scalar>(map: &Tensor<T>) -> Result<RgbImage> {
    let &[h, w] = map.shape() else {
        return Err(Error::InvalidShape {
            shape: map.shape().to_vec(),
            reason: "colormap needs H x W".into(),
        });
    };
    let mut data = Vec::with_capacity(h * w * 3);
    for &v in map.data() {
        data.extend(colormap_value(v.as_f64())?);
    }
    RgbImage::new(w, h, data)
}

/// `round((1 - alpha) * base + alpha * heat)` per channel.
pub fn overlay(base: &RgbImage, heat: &RgbImage, alpha: f64) -> Result<RgbImage> {
    base.same_size(heat)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!(
            "overlay alpha {alpha} outside [0, 1]"
        )));
    }
    let data = base
        .data
        .iter()
        .zip(&heat.data)
        .map(|(&b, &h)| to_byte((1.0 - alpha) * f64::from(b) + alpha * f64::from(h)))
        .collect();
    RgbImage::new(base.width, base.height, data)
}

/// Channel-summed absolute attributions of a `C x H x W` tensor, min-max
/// normalized to `[0, 1]`.
pub fn attribution_magnitude<T: Scalar>(attributions: &Tensor<T>) -> Result<Tensor<T>> {
    let &[_, h, w] = attributions.shape() else {
        return Err(Error::InvalidShape {
            shape: attributions.shape().to_vec(),
            reason: "expected C x H x W".into(),
        });
    };
    let mut acc = vec![T::zero(); h * w];
    for plane in attributions.data().chunks_exact(h * w) {
        for (a, &v) in acc.iter_mut().zip(plane) {
            *a += v.abs();
        }
    }
    Ok(Tensor::new(vec![h, w], acc)?.minmax_normalize())
}

/// Green for positive, red for negative channel-summed attribution, with
/// intensity proportional to magnitude over the maximum magnitude.
pub fn signed_attribution_mask<T: Scalar>(attributions: &Tensor<T>) -> Result<RgbImage> {
    let &[_, h, w] = attributions.shape() else {
        return Err(Error::InvalidShape {
            shape: attributions.shape().to_vec(),
            reason: "expected C x H x W".into(),
        });
    };
    let mut acc = vec![0.0f64; h * w];
    for plane in attributions.data().chunks_exact(h * w) {
        for (a, &v) in acc.iter_mut().zip(plane) {
            *a += v.as_f64();
        }
    }
    let max = acc.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut data = Vec::with_capacity(h * w * 3);
    for v in acc {
        let s = if max > 0.0 { v.abs() / max } else { 0.0 };
        let tint = if v >= 0.0 {
            POSITIVE_TINT
        } else {
            NEGATIVE_TINT
        };
        data.extend(lerp_color([0, 0, 0], tint, s));
    }
    RgbImage::new(w, h, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LimeRender {
    /// Keep the `num_features` highest positive segments, gray elsewhere.
    Isolate { num_features: usize },
    /// Green tint on positive segments, red on negative.
    Signed,
}

pub fn render_lime(
    image: &RgbImage,
    explanation: &LimeExplanation,
    mode: LimeRender,
) -> Result<RgbImage> {
    let seg = &explanation.segments;
    if (seg.width(), seg.height()) != (image.width, image.height) {
        return Err(Error::Image(format!(
            "segment map {}x{} does not match image {}x{}",
            seg.width(),
            seg.height(),
            image.width,
            image.height
        )));
    }
    let labels = seg.labels();
    match mode {
        LimeRender::Isolate { num_features } => {
            let mut keep = vec![false; seg.count()];
            for s in explanation.ranked_segments().into_iter().take(num_features) {
                if explanation.coefficients[s] > 0.0 {
                    keep[s] = true;
                }
            }
            let mut out = RgbImage::filled(image.width, image.height, NEUTRAL_GRAY);
            for (p, &l) in labels.iter().enumerate() {
                if keep[l as usize] {
                    out.data[p * 3..p * 3 + 3].copy_from_slice(&image.data[p * 3..p * 3 + 3]);
                }
            }
            Ok(out)
        }
        LimeRender::Signed => {
            let max = explanation
                .coefficients
                .iter()
                .fold(0.0f64, |m, c| m.max(c.abs()));
            let mut out = image.clone();
            if max == 0.0 {
                return Ok(out);
            }
            for (p, &l) in labels.iter().enumerate() {
                let c = explanation.coefficients[l as usize];
                if c == 0.0 {
                    continue;
                }
                let tint = if c > 0.0 {
                    POSITIVE_TINT
                } else {
                    NEGATIVE_TINT
                };
                let px = [
                    image.data[p * 3],
                    image.data[p * 3 + 1],
                    image.data[p * 3 + 2],
                ];
                out.data[p * 3..p * 3 + 3].copy_from_slice(&lerp_color(
                    px,
                    tint,
                    MAX_TINT * c.abs() / max,
                ));
            }
            Ok(out)
        }
    }
}
