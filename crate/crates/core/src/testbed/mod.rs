//! Synthetic shortcut-learning benchmark.
//!
//! Each image shows an object made of up to three separated part glyphs on
//! a textured gray background. Every glyph shape belongs to exactly one
//! class, so any single part identifies the class. Training images also
//! carry a small saturated color patch in the top-left corner: with
//! probability `p_spurious` the color of their own class (the shortcut),
//! otherwise the color of a different class.
//!
//! Glyphs are colorless and symmetric under both flips, and the cue is the
//! only colored content, so a cue can be detected by its channel spread.

pub mod corrupt;
pub mod store;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Image;

pub use corrupt::{apply_corruption, CorruptionSpec};
pub use store::{load_dataset, load_meta, save_dataset, DatasetMeta};

/// Cue colors, one per class.
const CUE_COLORS: [[f32; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
];

/// Channel spread above which a pixel counts as cue-colored.
pub const CUE_SPREAD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShortcutDatasetConfig {
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub donor_count: usize,
    pub p_spurious: f64,
    pub cue_size: usize,
    pub parts: usize,
    pub part_presence: f64,
    pub part_size: usize,
    /// Standard deviation of the per-pixel luminance noise.
    pub noise_level: f64,
    /// Brightness added to the background under a glyph stroke, before
    /// a per-part jitter of ±25%.
    pub part_contrast: f64,
    pub seed: u64,
}

impl Default for ShortcutDatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            height: 32,
            width: 32,
            train_per_class: 500,
            test_per_class: 250,
            donor_count: 200,
            p_spurious: 0.95,
            cue_size: 4,
            parts: 3,
            part_presence: 0.85,
            part_size: 7,
            noise_level: 0.04,
            part_contrast: 0.25,
            seed: 0,
        }
    }
}

pub const CHANNELS: usize = 3;

impl ShortcutDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(2..=Glyph::ALL.len()).contains(&self.num_classes) {
            return bad(format!("num_classes must be in 2..={}", Glyph::ALL.len()));
        }
        if !(0.0..=1.0).contains(&self.p_spurious) {
            return bad(format!("p_spurious {} outside [0, 1]", self.p_spurious));
        }
        if !(0.0..=1.0).contains(&self.part_presence) || self.part_presence == 0.0 {
            return bad(format!(
                "part_presence {} outside (0, 1]",
                self.part_presence
            ));
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return bad("noise_level must be finite and nonnegative".into());
        }
        if !(self.part_contrast > 0.0 && self.part_contrast <= 1.0) {
            return bad(format!("part_contrast {} outside (0, 1]", self.part_contrast));
        }
        if self.parts == 0 || self.part_size < 3 || self.cue_size == 0 {
            return bad("parts, part_size ≥ 3 and cue_size must be positive".into());
        }
        if self.part_size % 2 == 0 {
            return bad(format!(
                "part_size {} must be odd for symmetric glyphs",
                self.part_size
            ));
        }
        if self.cue_size >= self.height.min(self.width) {
            return bad(format!(
                "cue of {} pixels does not fit the image",
                self.cue_size
            ));
        }
        // Parts are placed on a coarse lattice of slots that avoid the cue
        // corner; the lattice must hold every part.
        if self.slots().len() < self.parts {
            return bad(format!(
                "{}x{} image cannot hold {} parts of size {} beside a {} pixel cue",
                self.height, self.width, self.parts, self.part_size, self.cue_size
            ));
        }
        Ok(())
    }

    pub fn image_dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, CHANNELS)
    }

    /// Top-left corners of non-overlapping part slots on a centered lattice.
    /// A slot spans `part_size + 2` pixels to leave room for jitter; slots
    /// touching the cue corner (plus a one-pixel margin) are dropped.
    fn slots(&self) -> Vec<(usize, usize)> {
        let span = self.part_size + 2;
        let (rows, cols) = (self.height / span, self.width / span);
        let (oy, ox) = (
            (self.height - rows * span) / 2,
            (self.width - cols * span) / 2,
        );
        let mut out = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let (y, x) = (oy + r * span, ox + c * span);
                if y > self.cue_size || x > self.cue_size {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Part shapes; class `c` uses `Glyph::ALL[c]`.
///
/// Each glyph has a distinct local texture, so any single part identifies
/// the class. Every glyph is mirror-symmetric along both axes when the part
/// size is odd, which keeps flipped images in-distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Glyph {
    HorizontalStripes,
    VerticalStripes,
    Checker,
    Solid,
    DotLattice,
    Frame,
}

impl Glyph {
    pub const ALL: [Glyph; 6] = [
        Glyph::HorizontalStripes,
        Glyph::VerticalStripes,
        Glyph::Checker,
        Glyph::Solid,
        Glyph::DotLattice,
        Glyph::Frame,
    ];

    /// Whether pixel `(y, x)` of an `s × s` glyph is stroked.
    pub fn stroke(self, y: usize, x: usize, s: usize) -> bool {
        let last = s - 1;
        match self {
            Glyph::HorizontalStripes => y % 2 == 0,
            Glyph::VerticalStripes => x % 2 == 0,
            Glyph::Checker => (y + x) % 2 == 0,
            Glyph::Solid => true,
            Glyph::DotLattice => y % 2 == 0 && x % 2 == 0,
            Glyph::Frame => y == 0 || x == 0 || y == last || x == last,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    TestId,
    TestOodDecorrelated,
    TestOodCuefree,
}

impl SplitName {
    pub const ALL: [SplitName; 4] = [
        SplitName::Train,
        SplitName::TestId,
        SplitName::TestOodDecorrelated,
        SplitName::TestOodCuefree,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::TestId => "test_id",
            SplitName::TestOodDecorrelated => "test_ood_decorrelated",
            SplitName::TestOodCuefree => "test_ood_cuefree",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }

    fn stream_id(self) -> u64 {
        match self {
            SplitName::Train => 1,
            SplitName::TestId => 2,
            SplitName::TestOodDecorrelated => 3,
            SplitName::TestOodCuefree => 4,
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labeled images of one split; `cues[i]` is the class whose cue image `i`
/// carries, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub cues: Vec<Option<usize>>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: ShortcutDatasetConfig,
    pub splits: Vec<DatasetSplit>,
    /// Texture-only backgrounds for background refilling.
    pub donors: Vec<Image>,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &DatasetSplit {
        self.splits
            .iter()
            .find(|s| s.name == name)
            .expect("datasets hold every split")
    }
}

/// Stream id for donor backgrounds, disjoint from the split ids.
const DONOR_STREAM: u64 = 9;

fn sample_rng(seed: u64, stream: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 40) | index as u64);
    rng
}

fn background(cfg: &ShortcutDatasetConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let (h, w) = (cfg.height, cfg.width);
    let level: f64 = rng.random_range(0.3..0.55);
    // Low-frequency texture: two random plane waves.
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            (
                rng.random_range(0.03..0.08),
                rng.random_range(0.15..0.6),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let noise = Normal::new(0.0, cfg.noise_level).expect("validated noise level");
    let mut data = Vec::with_capacity(h * w * CHANNELS);
    for y in 0..h {
        for x in 0..w {
            let tex: f64 = waves
                .iter()
                .map(|&(amp, freq, angle, phase)| {
                    let t = (y as f64 * angle.sin() + x as f64 * angle.cos()) * freq + phase;
                    amp * t.sin()
                })
                .sum();
            // Noise is shared across channels so the background stays gray.
            let v = (level + tex + noise.sample(rng)).clamp(0.0, 1.0) as f32;
            data.extend_from_slice(&[v; CHANNELS]);
        }
    }
    data
}

fn draw_glyph(
    cfg: &ShortcutDatasetConfig,
    data: &mut [f32],
    glyph: Glyph,
    top: usize,
    left: usize,
    delta: f32,
) {
    let s = cfg.part_size;
    for dy in 0..s {
        for dx in 0..s {
            if glyph.stroke(dy, dx, s) {
                let base = ((top + dy) * cfg.width + left + dx) * CHANNELS;
                for v in &mut data[base..base + CHANNELS] {
                    *v = (*v + delta).min(1.0);
                }
            }
        }
    }
}

fn draw_cue(cfg: &ShortcutDatasetConfig, data: &mut [f32], class: usize) {
    for y in 0..cfg.cue_size {
        for x in 0..cfg.cue_size {
            let base = (y * cfg.width + x) * CHANNELS;
            data[base..base + CHANNELS].copy_from_slice(&CUE_COLORS[class]);
        }
    }
}

/// Renders one labeled sample with the given cue.
fn render(
    cfg: &ShortcutDatasetConfig,
    rng: &mut ChaCha8Rng,
    label: usize,
    cue: Option<usize>,
) -> Image {
    let mut data = background(cfg, rng);
    let mut slots = cfg.slots();
    // Partial Fisher-Yates: the first `parts` entries become the chosen slots.
    for i in 0..cfg.parts {
        let j = rng.random_range(i..slots.len());
        slots.swap(i, j);
    }
    let mut present: Vec<bool> = (0..cfg.parts)
        .map(|_| rng.random_bool(cfg.part_presence))
        .collect();
    while !present.iter().any(|&p| p) {
        present = (0..cfg.parts)
            .map(|_| rng.random_bool(cfg.part_presence))
            .collect();
    }
    for (&(y, x), &on) in slots.iter().zip(&present) {
        let jy = rng.random_range(0..=2);
        let jx = rng.random_range(0..=2);
        let c = cfg.part_contrast as f32;
        let delta = rng.random_range(0.75 * c..=1.25 * c);
        if on {
            draw_glyph(cfg, &mut data, Glyph::ALL[label], y + jy, x + jx, delta);
        }
    }
    if let Some(c) = cue {
        draw_cue(cfg, &mut data, c);
    }
    Image::new(cfg.height, cfg.width, CHANNELS, data).expect("rendered values are clamped")
}

/// The cue shown on a sample. Training and ID images carry their own
/// class's cue with probability `p_spurious` and otherwise a uniformly
/// drawn other class's cue, so the minority is cue-conflicting.
fn draw_cue_class(
    cfg: &ShortcutDatasetConfig,
    name: SplitName,
    label: usize,
    rng: &mut ChaCha8Rng,
) -> Option<usize> {
    match name {
        SplitName::Train | SplitName::TestId => {
            if rng.random_bool(cfg.p_spurious) {
                Some(label)
            } else {
                let other = rng.random_range(0..cfg.num_classes - 1);
                Some(if other >= label { other + 1 } else { other })
            }
        }
        SplitName::TestOodDecorrelated => Some(rng.random_range(0..cfg.num_classes)),
        SplitName::TestOodCuefree => None,
    }
}

fn generate_split(cfg: &ShortcutDatasetConfig, name: SplitName) -> DatasetSplit {
    let per_class = match name {
        SplitName::Train => cfg.train_per_class,
        _ => cfg.test_per_class,
    };
    let n = per_class * cfg.num_classes;
    let rendered: Vec<(Image, usize, Option<usize>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = sample_rng(cfg.seed, name.stream_id(), i);
            let label = i % cfg.num_classes;
            let cue = draw_cue_class(cfg, name, label, &mut rng);
            (render(cfg, &mut rng, label, cue), label, cue)
        })
        .collect();
    let mut split = DatasetSplit {
        name,
        images: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        cues: Vec::with_capacity(n),
    };
    for (img, label, cue) in rendered {
        split.images.push(img);
        split.labels.push(label);
        split.cues.push(cue);
    }
    split
}

/// A texture-only background, the same distribution as sample backgrounds.
pub fn render_background(cfg: &ShortcutDatasetConfig, index: usize) -> Image {
    let mut rng = sample_rng(cfg.seed, DONOR_STREAM, index);
    Image::new(cfg.height, cfg.width, CHANNELS, background(cfg, &mut rng)).expect("clamped")
}

/// Generates every split plus the donor backgrounds. Each sample draws
/// from its own index-keyed stream, so output does not depend on thread
/// count or generation order.
pub fn generate(cfg: &ShortcutDatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let splits = SplitName::ALL
        .iter()
        .map(|&n| generate_split(cfg, n))
        .collect();
    let donors = (0..cfg.donor_count)
        .into_par_iter()
        .map(|i| render_background(cfg, i))
        .collect();
    Ok(Dataset {
        config: cfg.clone(),
        splits,
        donors,
    })
}

/// Whether any pixel has cue-like channel spread.
pub fn has_cue_pixels(image: &Image) -> bool {
    image.data().chunks(image.channels()).any(|p| {
        let max = p.iter().copied().fold(f32::MIN, f32::max);
        let min = p.iter().copied().fold(f32::MAX, f32::min);
        max - min > CUE_SPREAD
    })
}
