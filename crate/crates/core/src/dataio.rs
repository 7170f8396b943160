//! Image and mask files, the class palette and dataset splits.
//!
//! Grayscale frames are 8-bit PNG or PGM. Ground-truth masks are 8-bit RGB
//! PNGs whose colours map one-to-one onto class indices through a
//! [`ClassPalette`].

use std::fmt;
use std::path::Path;

use image::{DynamicImage, GrayImage, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Number of wear classes.
pub const NUM_CLASSES: usize = 6;

/// Wear classes in label-index order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum WearClass {
    Background = 0,
    Unworn = 1,
    Contamination = 2,
    Grooves = 3,
    SurfaceSpalling = 4,
    AdhesiveWear = 5,
}

impl WearClass {
    pub const ALL: [WearClass; NUM_CLASSES] = [
        WearClass::Background,
        WearClass::Unworn,
        WearClass::Contamination,
        WearClass::Grooves,
        WearClass::SurfaceSpalling,
        WearClass::AdhesiveWear,
    ];

    pub fn index(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            WearClass::Background => "background",
            WearClass::Unworn => "unworn",
            WearClass::Contamination => "contamination",
            WearClass::Grooves => "grooves",
            WearClass::SurfaceSpalling => "surface_spalling",
            WearClass::AdhesiveWear => "adhesive_wear",
        }
    }
}

/// Per-pixel class indices, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelMask {
    width: usize,
    height: usize,
    classes: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, classes: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::data("mask extents must be positive"));
        }
        if classes.len() != width * height {
            return Err(Error::data(format!(
                "mask of {width} x {height} needs {} labels, got {}",
                width * height,
                classes.len()
            )));
        }
        if let Some(i) = classes.iter().position(|&c| c as usize >= NUM_CLASSES) {
            return Err(Error::data(format!(
                "label {} at ({}, {}) is not a valid class index",
                classes[i],
                i % width,
                i / width
            )));
        }
        Ok(LabelMask {
            width,
            height,
            classes,
        })
    }

    pub fn filled(width: usize, height: usize, class: WearClass) -> Self {
        LabelMask {
            width,
            height,
            classes: vec![class.index(); width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    pub(crate) fn set(&mut self, x: usize, y: usize, class: WearClass) {
        self.classes[y * self.width + x] = class.index();
    }

    pub fn into_classes(self) -> Vec<u8> {
        self.classes
    }

    /// Pixel count per class; the entries sum to `width * height`.
    pub fn class_counts(&self) -> [u64; NUM_CLASSES] {
        let mut counts = [0u64; NUM_CLASSES];
        for &c in &self.classes {
            counts[c as usize] += 1;
        }
        counts
    }

    pub fn count(&self, class: WearClass) -> u64 {
        self.classes.iter().filter(|&&c| c == class.index()).count() as u64
    }

    /// Mirror about the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut classes = Vec::with_capacity(self.classes.len());
        for row in self.classes.chunks(self.width) {
            classes.extend(row.iter().rev());
        }
        LabelMask { classes, ..*self }
    }

    /// Region `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::data("crop window exceeds mask extents"));
        }
        let mut classes = Vec::with_capacity(w * h);
        for y in y0..y0 + h {
            classes.extend_from_slice(&self.classes[y * self.width + x0..][..w]);
        }
        LabelMask::new(w, h, classes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub index: u8,
    pub name: String,
    pub rgb: [u8; 3],
}

/// Bijection between class indices and ground-truth colours.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPalette {
    entries: Vec<PaletteEntry>,
}

impl Default for ClassPalette {
    fn default() -> Self {
        let colours = [
            [0, 0, 0],
            [0, 255, 0],
            [255, 0, 0],
            [0, 0, 255],
            [255, 255, 0],
            [255, 0, 255],
        ];
        ClassPalette {
            entries: WearClass::ALL
                .iter()
                .zip(colours)
                .map(|(c, rgb)| PaletteEntry {
                    index: c.index(),
                    name: c.name().to_string(),
                    rgb,
                })
                .collect(),
        }
    }
}

impl ClassPalette {
    /// Validates totality over `0..NUM_CLASSES` and distinct colours.
    pub fn new(mut entries: Vec<PaletteEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.index);
        if entries.len() != NUM_CLASSES
            || entries.iter().enumerate().any(|(i, e)| e.index as usize != i)
        {
            return Err(Error::data(format!(
                "palette must define each class index 0..{} exactly once",
                NUM_CLASSES - 1
            )));
        }
        for (i, a) in entries.iter().enumerate() {
            if let Some(b) = entries[i + 1..].iter().find(|b| b.rgb == a.rgb) {
                return Err(Error::data(format!(
                    "classes {} and {} share colour {:?}",
                    a.index, b.index, a.rgb
                )));
            }
        }
        Ok(ClassPalette { entries })
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn color(&self, class: u8) -> [u8; 3] {
        self.entries[class as usize].rgb
    }

    pub fn class_of(&self, rgb: [u8; 3]) -> Option<u8> {
        self.entries.iter().find(|e| e.rgb == rgb).map(|e| e.index)
    }

    /// Parses lines of `index name R G B`; blank lines and `#` comments are
    /// ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::data(format!("palette line {}: expected `index name R G B`", lineno + 1));
            if fields.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<u8>().map_err(|_| bad());
            entries.push(PaletteEntry {
                index: num(fields[0])?,
                name: fields[1].to_string(),
                rgb: [num(fields[2])?, num(fields[3])?, num(fields[4])?],
            });
        }
        ClassPalette::new(entries)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl fmt::Display for ClassPalette {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{} {} {} {} {}", e.index, e.name, e.rgb[0], e.rgb[1], e.rgb[2])?;
        }
        Ok(())
    }
}

/// Maps every pixel colour to its class; unknown colours are a data error
/// naming the first offending pixel.
pub fn decode_mask(rgb: &RgbImage, palette: &ClassPalette) -> Result<LabelMask> {
    let (w, h) = rgb.dimensions();
    let mut classes = Vec::with_capacity((w * h) as usize);
    for (x, y, px) in rgb.enumerate_pixels() {
        match palette.class_of(px.0) {
            Some(c) => classes.push(c),
            None => {
                return Err(Error::data(format!(
                    "unknown mask colour ({}, {}, {}) at pixel ({x}, {y})",
                    px[0], px[1], px[2]
                )))
            }
        }
    }
    LabelMask::new(w as usize, h as usize, classes)
}

pub fn encode_mask(mask: &LabelMask, palette: &ClassPalette) -> RgbImage {
    RgbImage::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Rgb(palette.color(mask.get(x as usize, y as usize)))
    })
}

fn image_err(path: &Path, e: impl fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn save_mask(path: impl AsRef<Path>, mask: &LabelMask, palette: &ClassPalette) -> Result<()> {
    let path = path.as_ref();
    encode_mask(mask, palette)
        .save(path)
        .map_err(|e| image_err(path, e))
}

pub fn load_mask(path: impl AsRef<Path>, palette: &ClassPalette) -> Result<LabelMask> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    match img {
        DynamicImage::ImageRgb8(rgb) => decode_mask(&rgb, palette),
        other => Err(Error::data(format!(
            "{}: masks must be 8-bit RGB, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn save_gray(path: impl AsRef<Path>, image: &GrayImage) -> Result<()> {
    let path = path.as_ref();
    image.save(path).map_err(|e| image_err(path, e))
}

/// Reads an 8-bit single-channel PNG or PGM.
pub fn load_gray(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    match img {
        DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(Error::data(format!(
            "{}: unsupported colour type/bit depth {:?}, expected 8-bit grayscale",
            path.display(),
            other.color()
        ))),
    }
}

/// How to bring image extents to a multiple of the network stride.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Fit {
    /// Keep extents; the caller must ensure divisibility.
    None,
    /// Pad symmetrically with edge replication.
    Pad(usize),
    /// Centre-crop down to the next multiple.
    Crop(usize),
}

/// Where the original frame sits inside the fitted one. For crops the
/// offsets refer to the original frame instead.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub original_width: usize,
    pub original_height: usize,
    pub width: usize,
    pub height: usize,
    pub offset_x: usize,
    pub offset_y: usize,
    pub padded: bool,
}

impl Placement {
    /// Cuts a mask predicted on the fitted frame back to the original extent
    /// (only meaningful for padding).
    pub fn restore_mask(&self, mask: &LabelMask) -> Result<LabelMask> {
        if !self.padded {
            return Ok(mask.clone());
        }
        mask.crop(
            self.offset_x,
            self.offset_y,
            self.original_width,
            self.original_height,
        )
    }
}

fn fit_extent(size: usize, fit: Fit) -> (usize, usize) {
    match fit {
        Fit::None => (size, 0),
        Fit::Pad(m) => {
            let target = size.div_ceil(m) * m;
            (target, (target - size) / 2)
        }
        Fit::Crop(m) => {
            let target = (size / m).max(1) * m;
            let target = target.min(size);
            (target, (size - target) / 2)
        }
    }
}

/// Applies `fit` to an 8-bit frame.
pub fn fit_gray(image: &GrayImage, fit: Fit) -> (GrayImage, Placement) {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let (fw, ox) = fit_extent(w, fit);
    let (fh, oy) = fit_extent(h, fit);
    let padded = matches!(fit, Fit::Pad(_));
    let out = GrayImage::from_fn(fw as u32, fh as u32, |x, y| {
        let (sx, sy) = if padded {
            (
                (x as isize - ox as isize).clamp(0, w as isize - 1) as u32,
                (y as isize - oy as isize).clamp(0, h as isize - 1) as u32,
            )
        } else {
            (x + ox as u32, y + oy as u32)
        };
        *image.get_pixel(sx, sy)
    });
    let placement = Placement {
        original_width: w,
        original_height: h,
        width: fw,
        height: fh,
        offset_x: ox,
        offset_y: oy,
        padded,
    };
    (out, placement)
}

/// An input frame ready for the network.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    /// `1 x 1 x H x W`, values `v / 255`.
    pub tensor: Tensor<f32>,
    pub placement: Placement,
}

pub fn gray_to_tensor(image: &GrayImage) -> Tensor<f32> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let data = image.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::new(vec![1, 1, h, w], data).expect("image buffer matches its extents")
}

pub fn load_image(path: impl AsRef<Path>, fit: Fit) -> Result<LoadedImage> {
    let gray = load_gray(path)?;
    let (fitted, placement) = fit_gray(&gray, fit);
    Ok(LoadedImage {
        tensor: gray_to_tensor(&fitted),
        placement,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitStrategy {
    /// Pick `count` items at equal spacing along the ordered id list, then
    /// assign them to subsets at random.
    Equidistant { count: usize },
    /// Shuffle all ids.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    Train,
    Validation,
    Test,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Train => "train",
            Subset::Validation => "validation",
            Subset::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Subset::Train),
            "validation" | "val" => Some(Subset::Validation),
            "test" => Some(Subset::Test),
            _ => None,
        }
    }
}

/// Disjoint train/validation/test partition of item ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub validation: Vec<String>,
    pub test: Vec<String>,
    pub fractions: [f64; 3],
    pub seed: u64,
}

/// Partitions `ids` by `fractions` (train, validation, test).
///
/// Validation and test sizes are `floor(n * fraction)`; train takes the
/// remainder.
pub fn split(
    ids: &[String],
    fractions: [f64; 3],
    seed: u64,
    strategy: SplitStrategy,
) -> Result<DatasetSplit> {
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!(
            "split fractions {fractions:?} must lie in [0, 1] and sum to 1"
        )));
    }
    let mut chosen: Vec<String> = match strategy {
        SplitStrategy::Random => ids.to_vec(),
        SplitStrategy::Equidistant { count } => {
            if count > ids.len() || count < 2 {
                return Err(Error::config(format!(
                    "cannot pick {count} equidistant items out of {}",
                    ids.len()
                )));
            }
            (0..count)
                .map(|i| {
                    let pos = (i as f64 * (ids.len() - 1) as f64 / (count - 1) as f64).round();
                    ids[pos as usize].clone()
                })
                .collect()
        }
    };
    let n = chosen.len();
    if n < 5 {
        return Err(Error::config(format!("need at least 5 items to split, got {n}")));
    }
    let n_val = (n as f64 * fractions[1] + 1e-9).floor() as usize;
    let n_test = (n as f64 * fractions[2] + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    chosen.shuffle(&mut rng);
    let test = chosen.split_off(n - n_test);
    let validation = chosen.split_off(n - n_test - n_val);
    Ok(DatasetSplit {
        train: chosen,
        validation,
        test,
        fractions,
        seed,
    })
}

impl DatasetSplit {
    pub fn subset(&self, which: Subset) -> &[String] {
        match which {
            Subset::Train => &self.train,
            Subset::Validation => &self.validation,
            Subset::Test => &self.test,
        }
    }

    /// Manifest text: one `id<TAB>subset` line per item.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for which in [Subset::Train, Subset::Validation, Subset::Test] {
            for id in self.subset(which) {
                out.push_str(id);
                out.push('\t');
                out.push_str(which.as_str());
                out.push('\n');
            }
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let mut split = DatasetSplit {
            train: Vec::new(),
            validation: Vec::new(),
            test: Vec::new(),
            fractions: [0.0; 3],
            seed: 0,
        };
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (id, subset) = line
                .split_once('\t')
                .ok_or_else(|| Error::data(format!("split manifest line {}: missing tab", lineno + 1)))?;
            let subset = Subset::parse(subset.trim()).ok_or_else(|| {
                Error::data(format!("split manifest line {}: unknown subset `{subset}`", lineno + 1))
            })?;
            match subset {
                Subset::Train => split.train.push(id.to_string()),
                Subset::Validation => split.validation.push(id.to_string()),
                Subset::Test => split.test.push(id.to_string()),
            }
        }
        let n = (split.train.len() + split.validation.len() + split.test.len()) as f64;
        if n > 0.0 {
            split.fractions = [
                split.train.len() as f64 / n,
                split.validation.len() as f64 / n,
                split.test.len() as f64 / n,
            ];
        }
        Ok(split)
    }
}
