//! Pixel containers shared by every stage: RGB images, per-pixel class masks
//! and the fixed class vocabulary.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Default lane-keeping camera size (height × width).
pub const DEFAULT_HEIGHT: usize = 160;
pub const DEFAULT_WIDTH: usize = 320;
/// Urban multi-view camera size (height × width).
pub const URBAN_HEIGHT: usize = 600;
pub const URBAN_WIDTH: usize = 800;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("pixel buffer has {actual} bytes, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("class index {index} at pixel {pixel} is not a declared class")]
    UndeclaredClass { index: u8, pixel: usize },
    #[error("dimension mismatch: {a_w}x{a_h} vs {b_w}x{b_h}")]
    DimensionMismatch { a_w: usize, a_h: usize, b_w: usize, b_h: usize },
}

pub type Rgb = [u8; 3];

/// Semantic class index.
///
/// Ids are fixed: background 0, road 1, then the four urban classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ClassId(pub u8);

impl ClassId {
    pub const BACKGROUND: ClassId = ClassId(0);
    pub const ROAD: ClassId = ClassId(1);
    pub const PEDESTRIAN: ClassId = ClassId(2);
    pub const VEHICLE: ClassId = ClassId(3);
    pub const TRAFFIC_SIGN: ClassId = ClassId(4);
    pub const TRAFFIC_LIGHT: ClassId = ClassId(5);

    pub const ALL: [ClassId; 6] = [
        ClassId::BACKGROUND,
        ClassId::ROAD,
        ClassId::PEDESTRIAN,
        ClassId::VEHICLE,
        ClassId::TRAFFIC_SIGN,
        ClassId::TRAFFIC_LIGHT,
    ];

    /// The five classes an urban validator checks (everything except background).
    pub const URBAN_CHECKED: [ClassId; 5] = [
        ClassId::ROAD,
        ClassId::PEDESTRIAN,
        ClassId::VEHICLE,
        ClassId::TRAFFIC_SIGN,
        ClassId::TRAFFIC_LIGHT,
    ];

    pub fn name(self) -> &'static str {
        match self.0 {
            0 => "background",
            1 => "road",
            2 => "pedestrian",
            3 => "vehicle",
            4 => "traffic_sign",
            5 => "traffic_light",
            _ => "unknown",
        }
    }

    pub fn from_name(name: &str) -> Option<ClassId> {
        ClassId::ALL.into_iter().find(|c| c.name() == name)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClassId::from_name(s).ok_or_else(|| format!("unknown class '{s}'"))
    }
}

impl TryFrom<String> for ClassId {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ClassId> for String {
    fn from(c: ClassId) -> String {
        c.name().to_string()
    }
}

/// Row-major RGB image, 8 bits per channel, top-left origin.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions { width, height });
        }
        let expected = width * height * 3;
        if pixels.len() != expected {
            return Err(ImageError::BufferLength {
                expected,
                actual: pixels.len(),
            });
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    /// Image filled with one color. Panics on zero dimensions.
    pub fn filled(width: usize, height: usize, color: Rgb) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be non-zero");
        let mut pixels = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            pixels.extend_from_slice(&color);
        }
        Image {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    /// Pixel by flat index.
    pub fn at(&self, i: usize) -> Rgb {
        let i = i * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn row_bytes(&self) -> usize {
        self.width * 3
    }

    /// Mirror left/right.
    pub fn flip_horizontal(&self) -> Image {
        let mut out = self.clone();
        let w = self.width;
        for y in 0..self.height {
            for x in 0..w {
                out.set(w - 1 - x, y, self.get(x, y));
            }
        }
        out
    }
}

/// Row-major per-pixel class indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SemanticMask {
    width: usize,
    height: usize,
    classes: Vec<u8>,
}

impl SemanticMask {
    pub fn new(width: usize, height: usize, classes: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyDimensions { width, height });
        }
        if classes.len() != width * height {
            return Err(ImageError::BufferLength {
                expected: width * height,
                actual: classes.len(),
            });
        }
        Ok(SemanticMask {
            width,
            height,
            classes,
        })
    }

    /// Like [`SemanticMask::new`] but also checks every index against `declared`.
    pub fn with_classes(
        width: usize,
        height: usize,
        classes: Vec<u8>,
        declared: &[ClassId],
    ) -> Result<Self, ImageError> {
        let mask = SemanticMask::new(width, height, classes)?;
        mask.check_declared(declared)?;
        Ok(mask)
    }

    pub fn filled(width: usize, height: usize, class: ClassId) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be non-zero");
        SemanticMask {
            width,
            height,
            classes: vec![class.0; width * height],
        }
    }

    pub fn check_declared(&self, declared: &[ClassId]) -> Result<(), ImageError> {
        let mut ok = [false; 256];
        for c in declared {
            ok[c.index()] = true;
        }
        match self.classes.iter().position(|&v| !ok[v as usize]) {
            Some(pixel) => Err(ImageError::UndeclaredClass {
                index: self.classes[pixel],
                pixel,
            }),
            None => Ok(()),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn classes_mut(&mut self) -> &mut [u8] {
        &mut self.classes
    }

    pub fn get(&self, x: usize, y: usize) -> ClassId {
        ClassId(self.classes[y * self.width + x])
    }

    pub fn set(&mut self, x: usize, y: usize, c: ClassId) {
        self.classes[y * self.width + x] = c.0;
    }

    /// Number of pixels labelled `class`.
    pub fn count(&self, class: ClassId) -> usize {
        self.classes.iter().filter(|&&v| v == class.0).count()
    }

    pub fn same_dims(&self, other: &SemanticMask) -> Result<(), ImageError> {
        if self.dims() != other.dims() {
            return Err(ImageError::DimensionMismatch {
                a_w: self.width,
                a_h: self.height,
                b_w: other.width,
                b_h: other.height,
            });
        }
        Ok(())
    }

    pub fn flip_horizontal(&self) -> SemanticMask {
        let mut out = self.clone();
        let w = self.width;
        for y in 0..self.height {
            for x in 0..w {
                out.set(w - 1 - x, y, self.get(x, y));
            }
        }
        out
    }
}

/// Rec. 601 luma of an RGB triple, on the 0..=255 scale.
pub fn luminance(c: Rgb) -> f64 {
    0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64
}
