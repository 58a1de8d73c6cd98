//! Pixel rasters, rectangular region grids and the masking primitives the
//! attribution search and augmentation build on.
//!
//! Images are stored row-major as `(y, x, c)` with `f32` intensities in
//! `[0, 1]`. A [`RegionGrid`] tiles an image into `gh × gw` disjoint
//! axis-aligned cells; a [`RegionMask`] is a subset of those cells.

pub mod io;

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense `height × width × channels` raster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image, checking the buffer length and that every intensity
    /// is finite and inside `[0, 1]`.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::dims(format!(
                "image dimensions must be nonzero, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::dims(format!(
                "buffer of {} values for {height}x{width}x{channels} image",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "pixel intensity {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]` (NaN maps to 0).
    pub fn from_clamped(
        height: usize,
        width: usize,
        channels: usize,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(height, width, channels, data)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(
            height,
            width,
            channels,
            vec![value; height * width * channels],
        )
    }

    /// An image where every pixel equals the baseline colour.
    pub fn baseline(
        height: usize,
        width: usize,
        channels: usize,
        baseline: &Baseline,
    ) -> Result<Self> {
        baseline.check_channels(channels)?;
        let mut data = Vec::with_capacity(height * width * channels);
        for _ in 0..height * width {
            for c in 0..channels {
                data.push(baseline.value(c));
            }
        }
        Self::new(height, width, channels, data)
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

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    /// Sets one intensity; the value is clamped to keep the range invariant.
    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f32) {
        let i = self.index(y, x, c);
        self.data[i] = if value.is_nan() {
            0.0
        } else {
            value.clamp(0.0, 1.0)
        };
    }

    /// All channels of pixel `(y, x)`.
    pub fn pixel(&self, y: usize, x: usize) -> &[f32] {
        let i = self.index(y, x, 0);
        &self.data[i..i + self.channels]
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::dims(format!(
                "{:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// Overwrites the pixels of `cell` with the baseline colour.
    pub fn fill_cell(&mut self, cell: &Cell, baseline: &Baseline) {
        for y in cell.top..cell.bottom {
            for x in cell.left..cell.right {
                let base = self.index(y, x, 0);
                for c in 0..self.channels {
                    self.data[base + c] = baseline.value(c);
                }
            }
        }
    }

    /// Copies the pixels of `cell` from `src`, which must share dimensions.
    pub fn copy_cell_from(&mut self, src: &Image, cell: &Cell) {
        debug_assert_eq!(self.dims(), src.dims());
        let row = (cell.right - cell.left) * self.channels;
        for y in cell.top..cell.bottom {
            let start = self.index(y, cell.left, 0);
            self.data[start..start + row].copy_from_slice(&src.data[start..start + row]);
        }
    }
}

/// Fill colour for masked pixels, one value per channel. A single value is
/// broadcast across all channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baseline(Vec<f32>);

impl Default for Baseline {
    fn default() -> Self {
        Baseline::zero()
    }
}

impl Baseline {
    pub fn zero() -> Self {
        Baseline(vec![0.0])
    }

    pub fn uniform(value: f32) -> Self {
        Baseline(vec![value])
    }

    pub fn per_channel(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidArgument(
                "baseline needs at least one value".into(),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "baseline value {bad} outside [0, 1]"
            )));
        }
        Ok(Baseline(values))
    }

    #[inline]
    pub fn value(&self, channel: usize) -> f32 {
        if self.0.len() == 1 {
            self.0[0]
        } else {
            self.0[channel]
        }
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn check_channels(&self, channels: usize) -> Result<()> {
        if self.0.len() == 1 || self.0.len() == channels {
            Ok(())
        } else {
            Err(Error::dims(format!(
                "baseline has {} values for {channels}-channel image",
                self.0.len()
            )))
        }
    }

    /// True when every channel of `pixel` equals the baseline.
    pub fn matches(&self, pixel: &[f32]) -> bool {
        pixel.iter().enumerate().all(|(c, &v)| v == self.value(c))
    }
}

/// Half-open pixel rectangle `[top, bottom) × [left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cell {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl Cell {
    pub fn area(&self) -> usize {
        (self.bottom - self.top) * (self.right - self.left)
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.bottom).contains(&y) && (self.left..self.right).contains(&x)
    }
}

/// A partition of an image into `gh × gw` rectangular cells, ids assigned
/// row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGrid {
    gh: usize,
    gw: usize,
    image_height: usize,
    image_width: usize,
    cells: Vec<Cell>,
}

/// Splits `len` into `parts` spans; the last `len % parts` spans are one
/// element longer.
fn spans(len: usize, parts: usize) -> Vec<(usize, usize)> {
    let base = len / parts;
    let extra = len % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for i in 0..parts {
        let size = base + usize::from(i >= parts - extra);
        out.push((start, start + size));
        start += size;
    }
    out
}

/// Tiles an `h × w` image into `gh × gw` rectangular cells.
pub fn partition_grid(h: usize, w: usize, gh: usize, gw: usize) -> Result<RegionGrid> {
    if gh == 0 || gw == 0 {
        return Err(Error::dims("grid must have at least one row and column"));
    }
    if gh > h || gw > w {
        return Err(Error::dims(format!(
            "grid {gh}x{gw} finer than image {h}x{w}"
        )));
    }
    let rows = spans(h, gh);
    let cols = spans(w, gw);
    let mut cells = Vec::with_capacity(gh * gw);
    for &(top, bottom) in &rows {
        for &(left, right) in &cols {
            cells.push(Cell {
                top,
                left,
                bottom,
                right,
            });
        }
    }
    Ok(RegionGrid {
        gh,
        gw,
        image_height: h,
        image_width: w,
        cells,
    })
}

impl RegionGrid {
    pub fn rows(&self) -> usize {
        self.gh
    }

    pub fn cols(&self) -> usize {
        self.gw
    }

    /// Number of cells `m`.
    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn image_height(&self) -> usize {
        self.image_height
    }

    pub fn image_width(&self) -> usize {
        self.image_width
    }

    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn cell(&self, id: usize) -> &Cell {
        &self.cells[id]
    }

    /// Total pixel area `A`.
    pub fn area(&self) -> usize {
        self.image_height * self.image_width
    }

    /// Id of the cell containing pixel `(y, x)`.
    pub fn cell_of(&self, y: usize, x: usize) -> Option<usize> {
        self.cells.iter().position(|c| c.contains(y, x))
    }

    pub fn matches(&self, image: &Image) -> Result<()> {
        if image.height() != self.image_height || image.width() != self.image_width {
            return Err(Error::dims(format!(
                "grid built for {}x{}, image is {}x{}",
                self.image_height,
                self.image_width,
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }
}

/// A subset `S` of the cells of a grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMask {
    grid: Arc<RegionGrid>,
    selected: BTreeSet<usize>,
}

impl RegionMask {
    pub fn empty(grid: Arc<RegionGrid>) -> Self {
        Self {
            grid,
            selected: BTreeSet::new(),
        }
    }

    pub fn full(grid: Arc<RegionGrid>) -> Self {
        let selected = (0..grid.len()).collect();
        Self { grid, selected }
    }

    /// Builds a mask from region ids; rejects out-of-range and repeated ids.
    pub fn from_ids(grid: Arc<RegionGrid>, ids: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut selected = BTreeSet::new();
        for id in ids {
            if id >= grid.len() {
                return Err(Error::InvalidArgument(format!(
                    "region id {id} out of range for {} cells",
                    grid.len()
                )));
            }
            if !selected.insert(id) {
                return Err(Error::InvalidArgument(format!("duplicate region id {id}")));
            }
        }
        Ok(Self { grid, selected })
    }

    pub fn grid(&self) -> &Arc<RegionGrid> {
        &self.grid
    }

    pub fn selected(&self) -> &BTreeSet<usize> {
        &self.selected
    }

    pub fn contains(&self, id: usize) -> bool {
        self.selected.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    /// Adds a region; returns false if it was already selected.
    pub fn insert(&mut self, id: usize) -> Result<bool> {
        if id >= self.grid.len() {
            return Err(Error::InvalidArgument(format!(
                "region id {id} out of range"
            )));
        }
        Ok(self.selected.insert(id))
    }

    pub fn union(&self, other: &RegionMask) -> Result<RegionMask> {
        if self.grid != other.grid {
            return Err(Error::dims("masks reference different grids"));
        }
        Ok(RegionMask {
            grid: Arc::clone(&self.grid),
            selected: self.selected.union(&other.selected).copied().collect(),
        })
    }

    pub fn complement(&self) -> RegionMask {
        RegionMask {
            grid: Arc::clone(&self.grid),
            selected: (0..self.grid.len())
                .filter(|i| !self.selected.contains(i))
                .collect(),
        }
    }

    fn covered_cells(&self) -> impl Iterator<Item = &Cell> {
        self.selected.iter().map(|&id| self.grid.cell(id))
    }
}

/// The 0/1 pixel raster `M_S` of a mask.
pub fn render_pixel_mask(mask: &RegionMask) -> Image {
    let grid = mask.grid();
    let (h, w) = (grid.image_height(), grid.image_width());
    let mut data = vec![0.0f32; h * w];
    for cell in mask.covered_cells() {
        for y in cell.top..cell.bottom {
            data[y * w + cell.left..y * w + cell.right].fill(1.0);
        }
    }
    Image {
        height: h,
        width: w,
        channels: 1,
        data,
    }
}

/// `I(V \ S)`: pixels inside the selected cells replaced by the baseline.
pub fn mask_delete(image: &Image, mask: &RegionMask, baseline: &Baseline) -> Result<Image> {
    mask.grid().matches(image)?;
    baseline.check_channels(image.channels())?;
    let mut out = image.clone();
    for cell in mask.covered_cells() {
        out.fill_cell(cell, baseline);
    }
    Ok(out)
}

/// `I(S)`: only the selected cells kept, everything else set to the baseline.
pub fn mask_insert(image: &Image, mask: &RegionMask, baseline: &Baseline) -> Result<Image> {
    mask.grid().matches(image)?;
    let mut out = Image::baseline(image.height(), image.width(), image.channels(), baseline)?;
    for cell in mask.covered_cells() {
        out.copy_cell_from(image, cell);
    }
    Ok(out)
}

/// Background refilling: `I ⊙ (1 − M) + donor ⊙ M`.
pub fn composite(image: &Image, donor: &Image, mask: &RegionMask) -> Result<Image> {
    image.same_dims(donor)?;
    mask.grid().matches(image)?;
    let mut out = image.clone();
    for cell in mask.covered_cells() {
        out.copy_cell_from(donor, cell);
    }
    Ok(out)
}

/// Selected area over total image area.
pub fn area_fraction(grid: &RegionGrid, mask: &RegionMask) -> f64 {
    let covered: usize = mask.selected().iter().map(|&id| grid.cell(id).area()).sum();
    covered as f64 / grid.area() as f64
}
