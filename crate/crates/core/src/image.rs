//! Channel-major floating-point images and 8-bit PNG I/O.

use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer as RawImage, Luma, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Lsr,
    Reference,
    Sr,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
    pub role: Role,
    pub source: Option<PathBuf>,
}

impl ImageBuffer {
    /// Builds an image from channel-major values, which must lie in `[0,1]`.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
        role: Role,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(
                "image",
                format!("channel count must be 1 or 3, got {channels}"),
            ));
        }
        if height == 0 || width == 0 || values.len() != channels * height * width {
            return Err(Error::invalid(
                "image",
                format!(
                    "{} values do not fit {channels}x{height}x{width}",
                    values.len()
                ),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("image", format!("value {v} outside [0,1]")));
        }
        Ok(ImageBuffer {
            channels,
            height,
            width,
            values,
            role,
            source: None,
        })
    }

    /// Clips into `[0,1]` first; non-finite values map to 0.
    pub fn from_tensor<T: Real>(t: &Tensor<T>, role: Role) -> Result<Self> {
        let (c, h, w) = t.chw()?;
        let values = t
            .data()
            .iter()
            .map(|v| {
                let v = v.f64();
                if v.is_finite() {
                    v.clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect();
        ImageBuffer::new(c, h, w, values, role)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.channels, self.height, self.width], |k| {
            T::of(self.values[k])
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn band(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    /// Crops a `height x width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width || height == 0 || width == 0 {
            return Err(Error::invalid(
                "crop",
                format!(
                    "window {height}x{width} at ({top},{left}) exceeds {}x{}",
                    self.height, self.width
                ),
            ));
        }
        let mut values = Vec::with_capacity(self.channels * height * width);
        for c in 0..self.channels {
            let band = self.band(c);
            for y in top..top + height {
                values.extend_from_slice(&band[y * self.width + left..y * self.width + left + width]);
            }
        }
        Ok(ImageBuffer {
            channels: self.channels,
            height,
            width,
            values,
            role: self.role,
            source: self.source.clone(),
        })
    }

    /// Center crop to the largest extents divisible by `multiple`.
    /// Returns the cropped image with its `(top, left)` offset.
    pub fn center_crop_to_multiple(&self, multiple: usize) -> Result<(Self, (usize, usize))> {
        let h = self.height / multiple * multiple;
        let w = self.width / multiple * multiple;
        if h == 0 || w == 0 {
            return Err(Error::invalid(
                "crop",
                format!(
                    "{}x{} image is smaller than the required multiple {multiple}",
                    self.height, self.width
                ),
            ));
        }
        self.center_crop(h, w)
    }

    pub fn center_crop(&self, height: usize, width: usize) -> Result<(Self, (usize, usize))> {
        if height > self.height || width > self.width {
            return Err(Error::invalid(
                "crop",
                format!(
                    "cannot crop {}x{} to a larger {height}x{width}",
                    self.height, self.width
                ),
            ));
        }
        let top = (self.height - height) / 2;
        let left = (self.width - width) / 2;
        Ok((self.crop(top, left, height, width)?, (top, left)))
    }

    pub fn transpose(&self) -> Self {
        let (h, w) = (self.height, self.width);
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.channels {
            let band = self.band(c);
            for x in 0..w {
                for y in 0..h {
                    values.push(band[y * w + x]);
                }
            }
        }
        ImageBuffer {
            channels: self.channels,
            height: w,
            width: h,
            values,
            role: self.role,
            source: self.source.clone(),
        }
    }
}

fn image_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Loads an 8-bit grayscale or RGB PNG (alpha is dropped).
pub fn load_image(path: impl AsRef<Path>, role: Role) -> Result<ImageBuffer> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(image_err(path, "file not found"));
    }
    let img = image::ImageReader::open(path)
        .map_err(|e| image_err(path, e.to_string()))?
        .with_guessed_format()
        .map_err(|e| image_err(path, e.to_string()))?;
    if img.format() != Some(image::ImageFormat::Png) {
        return Err(image_err(path, "unsupported format: only PNG is accepted"));
    }
    let img = img.decode().map_err(|e| image_err(path, e.to_string()))?;
    let (channels, bytes, w, h) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.as_raw().clone(), b.width(), b.height()),
        DynamicImage::ImageLumaA8(_) => {
            let b = img.to_luma8();
            (1, b.as_raw().clone(), b.width(), b.height())
        }
        DynamicImage::ImageRgb8(b) => (3, b.as_raw().clone(), b.width(), b.height()),
        DynamicImage::ImageRgba8(_) => {
            let b = img.to_rgb8();
            (3, b.as_raw().clone(), b.width(), b.height())
        }
        other => {
            return Err(image_err(
                path,
                format!(
                    "unsupported pixel format {:?}: only 8-bit gray or RGB",
                    other.color()
                ),
            ))
        }
    };
    let (w, h) = (w as usize, h as usize);
    let mut values = vec![0.0; channels * h * w];
    for (k, &b) in bytes.iter().enumerate() {
        let (pix, c) = (k / channels, k % channels);
        values[c * h * w + pix] = b as f64 / 255.0;
    }
    let mut out = ImageBuffer::new(channels, h, w, values, role)?;
    out.source = Some(path.to_path_buf());
    Ok(out)
}

/// `round(v * 255)` with halves away from zero.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes the image as 8-bit PNG bytes.
pub fn encode_png(img: &ImageBuffer) -> Result<Vec<u8>> {
    let (c, h, w) = (img.channels, img.height, img.width);
    let mut raw = vec![0u8; c * h * w];
    for ch in 0..c {
        for (pix, &v) in img.band(ch).iter().enumerate() {
            raw[pix * c + ch] = quantize(v);
        }
    }
    let dynimg = match c {
        1 => DynamicImage::ImageLuma8(
            RawImage::<Luma<u8>, _>::from_raw(w as u32, h as u32, raw).expect("luma buffer"),
        ),
        _ => DynamicImage::ImageRgb8(
            RawImage::<Rgb<u8>, _>::from_raw(w as u32, h as u32, raw).expect("rgb buffer"),
        ),
    };
    let mut out = Vec::new();
    dynimg
        .write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)
        .map_err(|e| image_err(Path::new("<memory>"), e.to_string()))?;
    Ok(out)
}

pub fn save_image(img: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(img)?;
    std::fs::write(path, bytes).map_err(|e| image_err(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn quantize_rounding_rule() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.2), 255);
    }

    #[test]
    fn load_exact_division() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let raw = RawImage::<Luma<u8>, _>::from_raw(3, 1, vec![0u8, 128, 255]).unwrap();
        raw.save(&p).unwrap();
        let img = load_image(&p, Role::Lsr).unwrap();
        assert_eq!(img.shape(), [1, 1, 3]);
        assert_eq!(img.values(), &[0.0, 128.0 / 255.0, 1.0]);
        assert!((img.values()[1] - 0.501960).abs() < 1e-6);
        assert_eq!(img.source.as_deref(), Some(p.as_path()));
    }

    #[test]
    fn load_strips_alpha() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let raw = image::RgbaImage::from_raw(1, 1, vec![10, 20, 30, 40]).unwrap();
        raw.save(&p).unwrap();
        let img = load_image(&p, Role::Reference).unwrap();
        assert_eq!(img.values(), &[10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
    }

    #[test]
    fn load_rejects_16_bit_missing_and_non_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let raw = RawImage::<Luma<u16>, _>::from_raw(2, 1, vec![0u16, 65535]).unwrap();
        raw.save(&p).unwrap();
        let err = load_image(&p, Role::Lsr).unwrap_err().to_string();
        assert!(err.contains("unsupported pixel format"), "{err}");
        assert!(load_image(dir.path().join("missing.png"), Role::Lsr).is_err());
        let q = dir.path().join("x.png");
        std::fs::write(&q, b"not an image").unwrap();
        assert!(load_image(&q, Role::Lsr).is_err());
    }

    #[test]
    fn save_is_deterministic_and_rejects_bad_path() {
        let img = ImageBuffer::new(3, 4, 5, (0..60).map(|k| k as f64 / 59.0).collect(), Role::Sr)
            .unwrap();
        assert_eq!(encode_png(&img).unwrap(), encode_png(&img).unwrap());
        assert!(save_image(&img, "/nonexistent-dir/x.png").is_err());
    }

    #[test]
    fn center_crop_offsets() {
        let img = ImageBuffer::new(1, 10, 7, (0..70).map(|k| k as f64 / 69.0).collect(), Role::Lsr)
            .unwrap();
        let (c, off) = img.center_crop_to_multiple(4).unwrap();
        assert_eq!((c.height(), c.width()), (8, 4));
        assert_eq!(off, (1, 1));
        assert_eq!(c.values()[0], img.values()[7 + 1]);
    }

    #[test]
    fn rejects_out_of_range_values() {
        assert!(ImageBuffer::new(1, 1, 2, vec![0.5, 1.5], Role::Lsr).is_err());
        assert!(ImageBuffer::new(2, 1, 1, vec![0.5, 0.5], Role::Lsr).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn png_roundtrip_within_half_step(
            vals in proptest::collection::vec(0.0f64..=1.0, 3 * 4 * 6),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("r.png");
            let img = ImageBuffer::new(3, 4, 6, vals, Role::Sr).unwrap();
            save_image(&img, &p).unwrap();
            let back = load_image(&p, Role::Sr).unwrap();
            for (a, b) in img.values().iter().zip(back.values()) {
                prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
            }
        }
    }
}
