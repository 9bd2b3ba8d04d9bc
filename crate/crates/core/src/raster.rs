//! 8-bit RGB raster type and the pixel operations the evaluation needs.
//!
//! Boxes map to pixels by their centers: pixel `(i, j)` belongs to a box when
//! `x_min <= (i + 0.5) / width < x_max` and likewise vertically.

use std::io::Cursor;
use std::path::Path;

use image::codecs::jpeg::JpegEncoder;
use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::types::NormalizedBBox;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Rgb(pub [u8; 3]);

impl Rgb {
    pub const BLACK: Rgb = Rgb([0, 0, 0]);
    pub const RED: Rgb = Rgb([255, 0, 0]);
    pub const GREEN: Rgb = Rgb([0, 255, 0]);
    pub const BLUE: Rgb = Rgb([0, 0, 255]);
}

/// Owned 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, PartialEq, Eq)]
pub struct Image {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl std::fmt::Debug for Image {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Image")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

/// Half-open pixel index range covered by a box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn count(&self) -> u64 {
        if self.is_empty() {
            0
        } else {
            u64::from(self.x1 - self.x0) * u64::from(self.y1 - self.y0)
        }
    }
}

fn first_center_at_or_after(edge: f64, size: u32) -> u32 {
    // smallest i with (i + 0.5) / size >= edge
    let i = (edge * f64::from(size) - 0.5).ceil().max(0.0);
    (i as u32).min(size)
}

/// Pixel rectangle whose centers fall inside `b`.
pub fn pixel_rect(b: &NormalizedBBox, width: u32, height: u32) -> PixelRect {
    PixelRect {
        x0: first_center_at_or_after(b.x_min(), width),
        x1: first_center_at_or_after(b.x_max(), width),
        y0: first_center_at_or_after(b.y_min(), height),
        y1: first_center_at_or_after(b.y_max(), height),
    }
}

impl Image {
    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width as usize * height as usize * 3 {
            return Err(Error::BufferSize {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let data = color
            .0
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        let o = self.offset(x, y);
        Rgb([self.data[o], self.data[o + 1], self.data[o + 2]])
    }

    pub fn put(&mut self, x: u32, y: u32, c: Rgb) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&c.0);
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data.chunks_exact(3).map(|p| Rgb([p[0], p[1], p[2]]))
    }

    /// Number of pixels whose value differs between two same-sized images.
    pub fn count_changed(&self, other: &Image) -> usize {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.data
            .chunks_exact(3)
            .zip(other.data.chunks_exact(3))
            .filter(|(a, b)| a != b)
            .count()
    }

    /// Largest per-channel absolute difference.
    pub fn max_channel_delta(&self, other: &Image) -> u8 {
        assert_eq!((self.width, self.height), (other.width, other.height));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a.abs_diff(*b))
            .max()
            .unwrap_or(0)
    }

    /// Hex SHA-256 of dimensions and pixel buffer.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.width.to_le_bytes());
        h.update(self.height.to_le_bytes());
        h.update(&self.data);
        hex::encode(h.finalize())
    }

    fn to_rgb_image(&self) -> RgbImage {
        RgbImage::from_raw(self.width, self.height, self.data.clone()).expect("buffer length checked at construction")
    }

    fn from_dynamic(img: image::DynamicImage) -> Self {
        // alpha is dropped
        let rgb = img.into_rgb8();
        let (width, height) = rgb.dimensions();
        Self {
            width,
            height,
            data: rgb.into_raw(),
        }
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes).map_err(|e| Error::Codec(e.to_string()))?;
        Ok(Self::from_dynamic(img))
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| Error::Codec(format!("{}: {e}", path.display())))
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut out = Cursor::new(Vec::new());
        self.to_rgb_image()
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| Error::Codec(e.to_string()))?;
        Ok(out.into_inner())
    }

    pub fn encode_jpeg(&self, quality: u8) -> Result<Vec<u8>> {
        if !(1..=100).contains(&quality) {
            return Err(Error::QualityOutOfRange(quality));
        }
        let mut out = Vec::new();
        JpegEncoder::new_with_quality(&mut out, quality)
            .encode_image(&self.to_rgb_image())
            .map_err(|e| Error::Codec(e.to_string()))?;
        Ok(out)
    }

    /// Writes PNG or JPEG depending on the file extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("jpg") | Some("jpeg") => self.encode_jpeg(95)?,
            _ => self.encode_png()?,
        };
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}

/// Copy of `img` with an axis-aligned rectangle outline drawn inside `b`.
///
/// The outline occupies the outermost `thickness` rows and columns of the
/// pixel rectangle covered by the box, so it never leaves the box or the image.
pub fn draw_box_outline(img: &Image, b: &NormalizedBBox, color: Rgb, thickness: u32) -> Result<Image> {
    if thickness == 0 {
        return Err(Error::ZeroThickness);
    }
    let mut out = img.clone();
    let r = pixel_rect(b, img.width, img.height);
    if r.is_empty() {
        return Ok(out);
    }
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            let on_edge =
                x - r.x0 < thickness || r.x1 - 1 - x < thickness || y - r.y0 < thickness || r.y1 - 1 - y < thickness;
            if on_edge {
                out.put(x, y, color);
            }
        }
    }
    Ok(out)
}

/// Copy of `img` with every pixel whose center lies inside `b` set to `fill`.
pub fn fill_region(img: &Image, b: &NormalizedBBox, fill: Rgb) -> Image {
    let mut out = img.clone();
    fill_region_in_place(&mut out, b, fill);
    out
}

/// Applies [`fill_region`] for every box in turn.
pub fn fill_regions<'a>(img: &Image, boxes: impl IntoIterator<Item = &'a NormalizedBBox>, fill: Rgb) -> Image {
    let mut out = img.clone();
    for b in boxes {
        fill_region_in_place(&mut out, b, fill);
    }
    out
}

fn fill_region_in_place(img: &mut Image, b: &NormalizedBBox, fill: Rgb) {
    let r = pixel_rect(b, img.width, img.height);
    for y in r.y0..r.y1 {
        for x in r.x0..r.x1 {
            img.put(x, y, fill);
        }
    }
}

/// Round-trips `img` through a JPEG encoder at `quality` (1..=100).
pub fn jpeg_reencode(img: &Image, quality: u8) -> Result<Image> {
    let bytes = img.encode_jpeg(quality)?;
    let out = Image::decode(&bytes)?;
    debug_assert_eq!((out.width, out.height), (img.width, img.height));
    Ok(out)
}
