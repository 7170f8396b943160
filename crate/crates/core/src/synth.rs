//! Procedural punch-surface images with exact ground truth.
//!
//! A frame is a stack of horizontal bands, top to bottom: background,
//! unworn surface, surface spalling, grooves and contamination. Adhesive wear
//! shows up as small dark ellipses inside the spalling band and is labelled
//! as its own class. Grooves are thin dark vertical stripes.
//!
//! Geometry (band boundaries, stripe and blob positions, and a master list of
//! adhesive dots) is derived from the spec seed. The wear level selects how
//! many of the master dots are drawn, so a growing wear level only ever adds
//! dots. That is what makes wear sequences monotone between cleaning events.

use std::path::Path;

use image::{GrayImage, Luma};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{self, ClassPalette, LabelMask, WearClass};
use crate::error::{Error, Result};

/// Minimum rendered band height in pixels.
pub const MIN_BAND_PX: usize = 4;

/// Band order, top to bottom.
pub const BAND_ORDER: [WearClass; 5] = [
    WearClass::Background,
    WearClass::Unworn,
    WearClass::SurfaceSpalling,
    WearClass::Grooves,
    WearClass::Contamination,
];

/// Base gray levels of each band and of adhesive dots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrayLevels {
    pub background: f64,
    pub unworn: f64,
    pub spalling: f64,
    pub grooves: f64,
    pub contamination: f64,
    pub adhesive: f64,
}

impl Default for GrayLevels {
    fn default() -> Self {
        GrayLevels {
            background: 25.0,
            unworn: 175.0,
            spalling: 125.0,
            grooves: 160.0,
            contamination: 215.0,
            adhesive: 45.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    /// Height fractions in [`BAND_ORDER`]; must sum to 1.
    pub band_fractions: [f64; 5],
    /// Each inner boundary moves by up to this fraction of the height.
    pub band_jitter: f64,
    /// Wear level in `[0, 1]`.
    pub wear: f64,
    /// Adhesive dots per spalling-band pixel at wear level 1. The density at
    /// wear level `t` is `t` times this value.
    pub max_dot_density: f64,
    /// Range of the ellipse semi-axes in pixels.
    pub dot_radius: (f64, f64),
    pub groove_count: usize,
    /// Horizontal sway of each stripe in pixels.
    pub groove_amplitude: f64,
    /// How much darker a stripe is than the groove band.
    pub groove_darkness: f64,
    pub contamination_blobs: usize,
    pub gray: GrayLevels,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            width: 64,
            height: 64,
            band_fractions: [0.15, 0.2, 0.3, 0.2, 0.15],
            band_jitter: 0.03,
            wear: 0.5,
            max_dot_density: 0.02,
            dot_radius: (1.0, 2.5),
            groove_count: 6,
            groove_amplitude: 1.0,
            groove_darkness: 60.0,
            contamination_blobs: 4,
            gray: GrayLevels::default(),
            noise_sigma: 6.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.width % 16 != 0 || self.height % 16 != 0 {
            return Err(Error::config(format!(
                "synthetic frames must be a positive multiple of 16, got {} x {}",
                self.width, self.height
            )));
        }
        if self.band_fractions.iter().any(|&f| !(f >= 0.0))
            || (self.band_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::config("band fractions must be >= 0 and sum to 1"));
        }
        if !(0.0..=1.0).contains(&self.wear) {
            return Err(Error::config(format!("wear level {} must lie in [0, 1]", self.wear)));
        }
        if !(self.max_dot_density >= 0.0) || !(self.band_jitter >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::config("densities, jitter and noise must be >= 0"));
        }
        if !(self.dot_radius.0 > 0.0 && self.dot_radius.0 <= self.dot_radius.1) {
            return Err(Error::config("dot radius range must be positive and ordered"));
        }
        let g = &self.gray;
        for v in [g.background, g.unworn, g.spalling, g.grooves, g.contamination, g.adhesive] {
            if !(0.0..=255.0).contains(&v) {
                return Err(Error::config(format!("gray level {v} must lie in [0, 255]")));
            }
        }
        for (class, f) in BAND_ORDER.iter().zip(self.band_fractions) {
            let rows = f * self.height as f64 - 2.0 * self.band_jitter * self.height as f64;
            if rows < MIN_BAND_PX as f64 {
                return Err(Error::config(format!(
                    "{} band is {rows:.1} px at worst, below the {MIN_BAND_PX} px needed for its texture",
                    class.name()
                )));
            }
        }
        Ok(())
    }

    /// Expected ellipse area `pi * E[rx] * E[ry]` of one dot.
    pub fn mean_dot_area(&self) -> f64 {
        let m = 0.5 * (self.dot_radius.0 + self.dot_radius.1);
        std::f64::consts::PI * m * m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dot {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Dot {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone)]
struct Stripe {
    x: f64,
    half_width: f64,
    phase: f64,
    period: f64,
}

#[derive(Debug, Clone)]
struct Blob {
    cx: f64,
    cy: f64,
    r: f64,
    gain: f64,
}

/// Seed-determined frame geometry shared by every frame of a sequence.
#[derive(Debug, Clone)]
pub struct Layout {
    /// Band `i` spans rows `bounds[i]..bounds[i + 1]`.
    bounds: [usize; 6],
    dots: Vec<Dot>,
    stripes: Vec<Stripe>,
    blobs: Vec<Blob>,
    mottle: [(f64, f64, f64); 3],
}

impl Layout {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_1A70);
        let h = spec.height as f64;
        let w = spec.width as f64;

        let mut bounds = [0usize; 6];
        let mut acc = 0.0;
        for i in 0..5 {
            acc += spec.band_fractions[i];
            bounds[i + 1] = (acc * h).round() as usize;
        }
        bounds[5] = spec.height;
        for i in 1..5 {
            let jitter = spec.band_jitter * h;
            let shift = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
            bounds[i] = (bounds[i] as f64 + shift).round() as usize;
        }
        for i in 1..6 {
            if bounds[i] < bounds[i - 1] + MIN_BAND_PX {
                return Err(Error::config(format!(
                    "{} band collapsed below {MIN_BAND_PX} px",
                    BAND_ORDER[i - 1].name()
                )));
            }
        }

        // Master dot list for wear level 1, fully inside the spalling band.
        let (top, bottom) = (bounds[2] as f64, bounds[3] as f64);
        let area = w * (bottom - top);
        let n_dots = (spec.max_dot_density * area).round() as usize;
        let (rmin, rmax) = spec.dot_radius;
        let mut dots = Vec::with_capacity(n_dots);
        for _ in 0..n_dots {
            let rx = rng.random_range(rmin..=rmax);
            let ry = rng.random_range(rmin..=rmax);
            let cx = rng.random_range(rx.min(w / 2.0)..=(w - rx).max(w / 2.0));
            let cy = if bottom - top > 2.0 * ry {
                rng.random_range(top + ry..=bottom - ry)
            } else {
                0.5 * (top + bottom)
            };
            dots.push(Dot { cx, cy, rx, ry });
        }

        let stripes = (0..spec.groove_count)
            .map(|_| Stripe {
                x: rng.random_range(0.0..w),
                half_width: rng.random_range(0.5..1.2),
                phase: rng.random_range(0.0..std::f64::consts::TAU),
                period: rng.random_range(8.0..24.0),
            })
            .collect();
        let (ctop, cbot) = (bounds[4] as f64, bounds[5] as f64);
        let blobs = (0..spec.contamination_blobs)
            .map(|_| Blob {
                cx: rng.random_range(0.0..w),
                cy: rng.random_range(ctop..cbot),
                r: rng.random_range(2.0..6.0),
                gain: rng.random_range(-25.0..25.0),
            })
            .collect();
        let mut mottle = [(0.0, 0.0, 0.0); 3];
        for m in &mut mottle {
            *m = (
                rng.random_range(0.1..0.5),
                rng.random_range(0.1..0.5),
                rng.random_range(0.0..std::f64::consts::TAU),
            );
        }
        Ok(Layout {
            bounds,
            dots,
            stripes,
            blobs,
            mottle,
        })
    }

    pub fn band_rows(&self, class: WearClass) -> std::ops::Range<usize> {
        let i = BAND_ORDER.iter().position(|&c| c == class).expect("banded class");
        self.bounds[i]..self.bounds[i + 1]
    }

    pub fn master_dot_count(&self) -> usize {
        self.dots.len()
    }

    fn band_at(&self, y: usize) -> WearClass {
        let i = (0..5).find(|&i| y < self.bounds[i + 1]).unwrap_or(4);
        BAND_ORDER[i]
    }

    /// Renders the frame with the first `n_dots` master dots drawn.
    pub fn render(&self, spec: &SyntheticSpec, n_dots: usize, noise_seed: u64) -> (GrayImage, LabelMask) {
        let (w, h) = (spec.width, spec.height);
        let g = &spec.gray;
        let dots = &self.dots[..n_dots.min(self.dots.len())];
        let mut mask = LabelMask::filled(w, h, WearClass::Background);
        let mut level = vec![0.0f64; w * h];

        for y in 0..h {
            let band = self.band_at(y);
            let fy = y as f64;
            for x in 0..w {
                let fx = x as f64;
                let v = match band {
                    WearClass::Background => g.background,
                    WearClass::Unworn => {
                        let r = self.band_rows(WearClass::Unworn);
                        let rel = (fy - r.start as f64) / (r.len() as f64);
                        g.unworn + 8.0 * (std::f64::consts::PI * rel).sin()
                    }
                    WearClass::SurfaceSpalling => {
                        let mottle: f64 = self
                            .mottle
                            .iter()
                            .map(|&(kx, ky, ph)| (kx * fx + ky * fy + ph).sin())
                            .sum();
                        g.spalling + 6.0 * mottle
                    }
                    WearClass::Grooves => {
                        let dark = self.stripes.iter().any(|s| {
                            let centre = s.x
                                + spec.groove_amplitude * (std::f64::consts::TAU * fy / s.period + s.phase).sin();
                            (fx + 0.5 - centre).abs() <= s.half_width
                        });
                        if dark {
                            g.grooves - spec.groove_darkness
                        } else {
                            g.grooves
                        }
                    }
                    _ => {
                        let blob: f64 = self
                            .blobs
                            .iter()
                            .map(|b| {
                                let d2 = (fx - b.cx).powi(2) + (fy - b.cy).powi(2);
                                b.gain * (-d2 / (2.0 * b.r * b.r)).exp()
                            })
                            .sum();
                        g.contamination + blob
                    }
                };
                level[y * w + x] = v;
                mask.set(x, y, band);
            }
        }

        for dot in dots {
            let y0 = (dot.cy - dot.ry).floor().max(0.0) as usize;
            let y1 = ((dot.cy + dot.ry).ceil() as usize).min(h);
            let x0 = (dot.cx - dot.rx).floor().max(0.0) as usize;
            let x1 = ((dot.cx + dot.rx).ceil() as usize).min(w);
            for y in y0..y1 {
                for x in x0..x1 {
                    if mask.get(x, y) == WearClass::SurfaceSpalling.index() && dot.contains(x, y) {
                        mask.set(x, y, WearClass::AdhesiveWear);
                        level[y * w + x] = g.adhesive;
                    }
                }
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let noise = Normal::new(0.0, spec.noise_sigma.max(1e-12)).expect("sigma is positive");
        let pixels: Vec<u8> = level
            .iter()
            .map(|&v| {
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                (v + n).round().clamp(0.0, 255.0) as u8
            })
            .collect();
        let image = GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches extents");
        (image, mask)
    }

    /// Number of master dots drawn at wear level `t`.
    pub fn dots_for_wear(&self, t: f64) -> usize {
        (t.clamp(0.0, 1.0) * self.dots.len() as f64).round() as usize
    }
}

/// One synthetic frame and its exact label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: GrayImage,
    pub mask: LabelMask,
}

/// Renders a single frame for `spec`.
pub fn generate(spec: &SyntheticSpec) -> Result<Sample> {
    let layout = Layout::new(spec)?;
    let (image, mask) = layout.render(spec, layout.dots_for_wear(spec.wear), spec.seed);
    Ok(Sample { image, mask })
}

/// `count` independent frames with wear levels drawn uniformly from `wear`.
/// Frame `i` uses its own seed derived from `spec.seed` and `i`, and
/// `spec.wear` is ignored.
pub fn generate_dataset(spec: &SyntheticSpec, count: usize, wear: (f64, f64)) -> Result<Vec<Sample>> {
    if !(0.0 <= wear.0 && wear.0 <= wear.1 && wear.1 <= 1.0) {
        return Err(Error::config(format!("wear range {wear:?} must be ordered within [0, 1]")));
    }
    (0..count as u64)
        .into_par_iter()
        .map(|i| {
            let seed = spec.seed.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(i);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let level = if wear.0 == wear.1 { wear.0 } else { rng.random_range(wear.0..=wear.1) };
            generate(&SyntheticSpec {
                wear: level,
                seed,
                ..spec.clone()
            })
        })
        .collect()
}

/// Frames of a wear-progression sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSpec {
    /// Stroke index of each frame; strictly increasing.
    pub strokes: Vec<u64>,
    /// Strokes for the wear level to reach `1 - 1/e` from a clean surface.
    pub wear_time_constant: f64,
    /// Strokes at which the tool is cleaned.
    pub cleanings: Vec<u64>,
    /// Fraction of the wear level that survives a cleaning.
    pub residual_after_cleaning: f64,
}

impl SequenceSpec {
    pub fn evenly_spaced(num_frames: usize, stroke_step: u64, wear_time_constant: f64, cleanings: Vec<u64>) -> Self {
        SequenceSpec {
            strokes: (0..num_frames as u64).map(|i| (i + 1) * stroke_step).collect(),
            wear_time_constant,
            cleanings,
            residual_after_cleaning: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strokes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("sequence stroke indices must be strictly increasing"));
        }
        if !(self.wear_time_constant > 0.0) {
            return Err(Error::config("wear time constant must be positive"));
        }
        if !(0.0..1.0).contains(&self.residual_after_cleaning) {
            return Err(Error::config("residual wear after cleaning must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Saturating wear level at `stroke`, restarting from a residual level
    /// after every cleaning at or before `stroke`.
    pub fn wear_at(&self, stroke: u64) -> f64 {
        let mut cleanings: Vec<u64> = self.cleanings.iter().copied().filter(|&c| c <= stroke).collect();
        cleanings.sort_unstable();
        let mut level = 0.0;
        let mut since = 0u64;
        for c in cleanings {
            let grown = 1.0 - (1.0 - level) * (-((c - since) as f64) / self.wear_time_constant).exp();
            level = grown * self.residual_after_cleaning;
            since = c;
        }
        1.0 - (1.0 - level) * (-((stroke - since) as f64) / self.wear_time_constant).exp()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub stroke: u64,
    pub wear: f64,
    pub image: GrayImage,
    pub mask: LabelMask,
}

/// Iterator over the frames of a sequence; geometry is fixed by `spec.seed`
/// and only sensor noise changes from frame to frame.
pub struct SequenceFrames<'a> {
    seq: &'a SequenceSpec,
    spec: &'a SyntheticSpec,
    layout: Layout,
    next: usize,
}

impl Iterator for SequenceFrames<'_> {
    type Item = Frame;

    fn next(&mut self) -> Option<Frame> {
        let stroke = *self.seq.strokes.get(self.next)?;
        self.next += 1;
        let wear = self.seq.wear_at(stroke);
        let noise_seed = self.spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stroke;
        let (image, mask) = self
            .layout
            .render(self.spec, self.layout.dots_for_wear(wear), noise_seed);
        Some(Frame {
            stroke,
            wear,
            image,
            mask,
        })
    }
}

pub fn generate_sequence<'a>(seq: &'a SequenceSpec, spec: &'a SyntheticSpec) -> Result<SequenceFrames<'a>> {
    seq.validate()?;
    Ok(SequenceFrames {
        seq,
        spec,
        layout: Layout::new(spec)?,
        next: 0,
    })
}

/// Writes every frame as `frame_<stroke>.png` / `mask_<stroke>.png` into
/// `dir` plus a `sequence.csv` manifest (`stroke,image,mask`).
pub fn write_sequence(dir: &Path, seq: &SequenceSpec, spec: &SyntheticSpec, palette: &ClassPalette) -> Result<Vec<(u64, String, String)>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::new();
    for frame in generate_sequence(seq, spec)? {
        let image = format!("frame_{:08}.png", frame.stroke);
        let mask = format!("mask_{:08}.png", frame.stroke);
        dataio::save_gray(dir.join(&image), &frame.image)?;
        dataio::save_mask(dir.join(&mask), &frame.mask, palette)?;
        rows.push((frame.stroke, image, mask));
    }
    let path = dir.join("sequence.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["stroke", "image", "mask"])?;
    for (s, i, m) in &rows {
        w.write_record([s.to_string().as_str(), i, m])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// Reads a `stroke,image,mask` manifest.
pub fn read_sequence_manifest(path: &Path) -> Result<Vec<(u64, String, String)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<(u64, String, String)>().enumerate() {
        rows.push(rec.map_err(|e| Error::data(format!("{}: row {}: {e}", path.display(), i + 2)))?);
    }
    Ok(rows)
}

/// A gray pixel value at `(x, y)`; convenience for tests and examples.
pub fn pixel(image: &GrayImage, x: u32, y: u32) -> u8 {
    let Luma([v]) = *image.get_pixel(x, y);
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_wear_has_no_adhesive_pixels() {
        let spec = SyntheticSpec {
            wear: 0.0,
            ..Default::default()
        };
        let s = generate(&spec).unwrap();
        assert_eq!(s.mask.count(WearClass::AdhesiveWear), 0);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = SyntheticSpec {
            seed: 17,
            ..Default::default()
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = SyntheticSpec { seed: 18, ..spec.clone() };
        assert_ne!(generate(&other).unwrap().image, generate(&spec).unwrap().image);
    }

    #[test]
    fn bands_appear_in_order() {
        let spec = SyntheticSpec {
            wear: 0.0,
            ..Default::default()
        };
        let s = generate(&spec).unwrap();
        let row_class: Vec<u8> = (0..spec.height).map(|y| s.mask.get(0, y)).collect();
        let mut order = row_class.clone();
        order.dedup();
        let want: Vec<u8> = BAND_ORDER.iter().map(|c| c.index()).collect();
        assert_eq!(order, want);
    }

    #[test]
    fn thin_band_is_rejected() {
        let spec = SyntheticSpec {
            band_fractions: [0.02, 0.28, 0.3, 0.2, 0.2],
            ..Default::default()
        };
        assert_eq!(generate(&spec).unwrap_err().category(), "config");
    }

    #[test]
    fn non_multiple_of_16_is_rejected() {
        let spec = SyntheticSpec {
            width: 60,
            ..Default::default()
        };
        assert!(generate(&spec).is_err());
    }

    #[test]
    fn wear_curve_resets_at_cleaning() {
        let seq = SequenceSpec::evenly_spaced(10, 100, 300.0, vec![500]);
        assert!(seq.wear_at(400) < seq.wear_at(499));
        assert!(seq.wear_at(500) < seq.wear_at(499));
        assert!(seq.wear_at(600) > seq.wear_at(500));
        assert_eq!(seq.wear_at(0), 0.0);
    }

    #[test]
    fn pixel_values_cover_expected_range() {
        let s = generate(&SyntheticSpec::default()).unwrap();
        let bg = pixel(&s.image, 10, 1) as f64;
        assert!((bg - 25.0).abs() < 30.0);
    }
}
