//! The black-box classifier interface queried by attribution, plus
//! deterministic mock scorers with closed-form outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Baseline, Image, RegionGrid};

const SIMPLEX_TOL: f64 = 1e-6;

/// Per-class confidences, optionally with the raw logits they came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logits: Option<Vec<f64>>,
}

impl ScoreVector {
    /// Wraps probabilities, checking that they lie on the simplex.
    pub fn from_probs(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidArgument(
                "a score vector needs at least 2 classes".into(),
            ));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::NonFinite(format!("invalid probabilities {probs:?}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::InvalidArgument(format!(
                "probabilities sum to {sum}"
            )));
        }
        Ok(Self {
            probs,
            logits: None,
        })
    }

    /// Numerically stable softmax over `logits`.
    pub fn from_logits(logits: Vec<f64>) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("logits {logits:?}")));
        }
        let probs = softmax(&logits);
        let mut sv = Self::from_probs(probs)?;
        sv.logits = Some(logits);
        Ok(sv)
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn logits(&self) -> Option<&[f64]> {
        self.logits.as_deref()
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len()
    }

    /// Confidence `f_c` for class `c`.
    pub fn prob(&self, class: usize) -> f64 {
        self.probs[class]
    }

    /// Logits when present, probabilities otherwise. Both give the same
    /// ordering, so argmax-style decisions can use either.
    pub fn ranking_values(&self) -> &[f64] {
        self.logits.as_deref().unwrap_or(&self.probs)
    }

    /// Top-1 class; ties go to the lowest id.
    pub fn argmax(&self) -> usize {
        argmax_lowest(self.ranking_values())
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest value, lowest index on ties.
pub(crate) fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Shape contract of a scorer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerInfo {
    pub num_classes: usize,
    pub expected_height: usize,
    pub expected_width: usize,
    pub expected_channels: usize,
}

impl ScorerInfo {
    pub fn check(&self, image: &Image) -> Result<()> {
        let want = (
            self.expected_height,
            self.expected_width,
            self.expected_channels,
        );
        if image.dims() != want {
            return Err(Error::dims(format!(
                "scorer expects {want:?}, image is {:?}",
                image.dims()
            )));
        }
        Ok(())
    }
}

/// A classifier seen as a black box: images in, class confidences out.
///
/// Implementations must be deterministic and free of interior mutation so
/// one instance can be scored from many threads at once.
pub trait Scorer: Sync {
    fn info(&self) -> ScorerInfo;

    /// Scores a batch, preserving order. An empty batch yields an empty list.
    fn score_batch(&self, images: &[Image]) -> Result<Vec<ScoreVector>>;

    /// Scores one variant of `base` per entry of `cells`, where variant `i`
    /// equals `base` with cell `cells[i]` overwritten by the pixels of
    /// `source`.
    ///
    /// The result must equal scoring the materialised variants with
    /// [`Scorer::score_batch`]. Scorers with spatially local structure can
    /// override this to avoid recomputing unaffected activations.
    fn score_patched(
        &self,
        base: &Image,
        source: &Image,
        grid: &RegionGrid,
        cells: &[usize],
    ) -> Result<Vec<ScoreVector>> {
        base.same_dims(source)?;
        grid.matches(base)?;
        let variants: Vec<Image> = cells
            .iter()
            .map(|&id| {
                let mut v = base.clone();
                v.copy_cell_from(source, grid.cell(id));
                v
            })
            .collect();
        self.score_batch(&variants)
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn info(&self) -> ScorerInfo {
        (**self).info()
    }

    fn score_batch(&self, images: &[Image]) -> Result<Vec<ScoreVector>> {
        (**self).score_batch(images)
    }

    fn score_patched(
        &self,
        base: &Image,
        source: &Image,
        grid: &RegionGrid,
        cells: &[usize],
    ) -> Result<Vec<ScoreVector>> {
        (**self).score_patched(base, source, grid, cells)
    }
}

fn two_class_probs(gt: usize, cf: usize, f_gt: f64) -> Result<ScoreVector> {
    let mut probs = vec![0.0; 2];
    probs[gt] = f_gt;
    probs[cf] = 1.0 - f_gt;
    ScoreVector::from_probs(probs)
}

fn check_pair(gt: usize, cf: usize) -> Result<()> {
    if gt > 1 || cf > 1 || gt == cf {
        return Err(Error::InvalidArgument(format!(
            "mock scorers are two-class: gt and cf must be distinct ids in {{0, 1}}, got {gt}, {cf}"
        )));
    }
    Ok(())
}

/// Two-class mock whose ground-truth confidence is the fraction of pixels
/// strictly brighter than the baseline in at least one channel.
#[derive(Debug, Clone)]
pub struct MockAreaScorer {
    gt: usize,
    cf: usize,
    dims: (usize, usize, usize),
    baseline: Baseline,
}

impl MockAreaScorer {
    pub fn new(
        gt: usize,
        cf: usize,
        dims: (usize, usize, usize),
        baseline: Baseline,
    ) -> Result<Self> {
        check_pair(gt, cf)?;
        baseline.check_channels(dims.2)?;
        Ok(Self {
            gt,
            cf,
            dims,
            baseline,
        })
    }

    fn visible_fraction(&self, image: &Image) -> f64 {
        let (h, w, _) = image.dims();
        let mut above = 0usize;
        for y in 0..h {
            for x in 0..w {
                if image
                    .pixel(y, x)
                    .iter()
                    .enumerate()
                    .any(|(c, &v)| v > self.baseline.value(c))
                {
                    above += 1;
                }
            }
        }
        above as f64 / (h * w) as f64
    }
}

impl Scorer for MockAreaScorer {
    fn info(&self) -> ScorerInfo {
        ScorerInfo {
            num_classes: 2,
            expected_height: self.dims.0,
            expected_width: self.dims.1,
            expected_channels: self.dims.2,
        }
    }

    fn score_batch(&self, images: &[Image]) -> Result<Vec<ScoreVector>> {
        let info = self.info();
        images
            .iter()
            .map(|img| {
                info.check(img)?;
                two_class_probs(self.gt, self.cf, self.visible_fraction(img))
            })
            .collect()
    }
}

/// Two-class mock with a modular utility: the ground-truth confidence is the
/// summed weight of the regions whose pixels all differ from the baseline.
#[derive(Debug, Clone)]
pub struct MockRegionWeightScorer {
    grid: RegionGrid,
    weights: Vec<f64>,
    gt: usize,
    cf: usize,
    channels: usize,
    baseline: Baseline,
}

impl MockRegionWeightScorer {
    pub fn new(
        grid: RegionGrid,
        weights: Vec<f64>,
        gt: usize,
        cf: usize,
        channels: usize,
        baseline: Baseline,
    ) -> Result<Self> {
        check_pair(gt, cf)?;
        if weights.len() != grid.len() {
            return Err(Error::dims(format!(
                "{} weights for {} regions",
                weights.len(),
                grid.len()
            )));
        }
        if weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidArgument(
                "region weights must be nonnegative".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "region weights sum to {sum}, expected 1"
            )));
        }
        baseline.check_channels(channels)?;
        Ok(Self {
            grid,
            weights,
            gt,
            cf,
            channels,
            baseline,
        })
    }

    /// Convenience constructor with baseline 0 and `(gt, cf) = (0, 1)`.
    pub fn simple(grid: RegionGrid, weights: Vec<f64>, channels: usize) -> Result<Self> {
        Self::new(grid, weights, 0, 1, channels, Baseline::zero())
    }

    fn visible_weight(&self, image: &Image) -> f64 {
        let mut visible_sum = 0.0;
        let mut total = 0.0;
        for (id, cell) in self.grid.cells().iter().enumerate() {
            let visible = (cell.top..cell.bottom).all(|y| {
                (cell.left..cell.right).all(|x| !self.baseline.matches(image.pixel(y, x)))
            });
            if visible {
                visible_sum += self.weights[id];
            }
            total += self.weights[id];
        }
        // Normalising by the identically-accumulated total makes the
        // all-visible case exactly 1.
        (visible_sum / total).min(1.0)
    }
}

impl Scorer for MockRegionWeightScorer {
    fn info(&self) -> ScorerInfo {
        ScorerInfo {
            num_classes: 2,
            expected_height: self.grid.image_height(),
            expected_width: self.grid.image_width(),
            expected_channels: self.channels,
        }
    }

    fn score_batch(&self, images: &[Image]) -> Result<Vec<ScoreVector>> {
        let info = self.info();
        images
            .iter()
            .map(|img| {
                info.check(img)?;
                two_class_probs(self.gt, self.cf, self.visible_weight(img))
            })
            .collect()
    }
}

/// Adapts a closure into a scorer; handy for lookup-table and constant
/// scorers in evaluation harnesses.
pub struct FnScorer<F> {
    info: ScorerInfo,
    f: F,
}

impl<F> FnScorer<F>
where
    F: Fn(&Image) -> ScoreVector + Sync,
{
    pub fn new(info: ScorerInfo, f: F) -> Self {
        Self { info, f }
    }
}

impl<F> Scorer for FnScorer<F>
where
    F: Fn(&Image) -> ScoreVector + Sync,
{
    fn info(&self) -> ScorerInfo {
        self.info
    }

    fn score_batch(&self, images: &[Image]) -> Result<Vec<ScoreVector>> {
        images
            .iter()
            .map(|img| {
                self.info.check(img)?;
                Ok((self.f)(img))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::partition_grid;
    use proptest::prelude::*;

    fn area() -> MockAreaScorer {
        MockAreaScorer::new(0, 1, (4, 4, 1), Baseline::zero()).unwrap()
    }

    #[test]
    fn empty_batch_is_empty() {
        assert!(area().score_batch(&[]).unwrap().is_empty());
    }

    #[test]
    fn duplicates_score_identically() {
        let img = Image::filled(4, 4, 1, 0.3).unwrap();
        let out = area().score_batch(&[img.clone(), img]).unwrap();
        assert_eq!(out[0], out[1]);
    }

    #[test]
    fn area_mock_values() {
        let s = area();
        let full = Image::filled(4, 4, 1, 0.5).unwrap();
        let blank = Image::filled(4, 4, 1, 0.0).unwrap();
        let mut half = full.clone();
        for y in 0..2 {
            for x in 0..4 {
                half.set(y, x, 0, 0.0);
            }
        }
        let out = s.score_batch(&[full, blank, half]).unwrap();
        assert_eq!(out[0].probs(), &[1.0, 0.0]);
        assert_eq!(out[1].probs(), &[0.0, 1.0]);
        assert_eq!(out[2].prob(0), 0.5);
    }

    #[test]
    fn area_mock_class_mapping() {
        let s = MockAreaScorer::new(1, 0, (2, 2, 1), Baseline::zero()).unwrap();
        let out = s
            .score_batch(&[Image::filled(2, 2, 1, 0.0).unwrap()])
            .unwrap();
        assert_eq!(out[0].probs(), &[1.0, 0.0]);
        assert!(MockAreaScorer::new(0, 0, (2, 2, 1), Baseline::zero()).is_err());
    }

    #[test]
    fn region_weight_mock_values() {
        let g = partition_grid(4, 4, 2, 2).unwrap();
        let s = MockRegionWeightScorer::simple(g.clone(), vec![0.6, 0.3, 0.08, 0.02], 1).unwrap();
        let full = Image::filled(4, 4, 1, 0.5).unwrap();
        let blank = Image::filled(4, 4, 1, 0.0).unwrap();
        let mut partial = blank.clone();
        partial.copy_cell_from(&full, g.cell(0));
        partial.copy_cell_from(&full, g.cell(2));
        let out = s.score_batch(&[full, blank, partial]).unwrap();
        assert_eq!(out[0].prob(0), 1.0);
        assert_eq!(out[1].prob(0), 0.0);
        assert!((out[2].prob(0) - 0.68).abs() < 1e-12);
        assert!(MockRegionWeightScorer::simple(g, vec![0.5, 0.5, 0.5, 0.5], 1).is_err());
    }

    #[test]
    fn dims_checked() {
        let err = area().score_batch(&[Image::filled(3, 4, 1, 0.5).unwrap()]);
        assert!(matches!(err, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn softmax_and_argmax() {
        let sv = ScoreVector::from_logits(vec![1.0, 3.0, 3.0]).unwrap();
        assert!((sv.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(sv.argmax(), 1);
        assert!(ScoreVector::from_probs(vec![0.5, 0.6]).is_err());
        assert!(ScoreVector::from_logits(vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn default_patched_matches_batch() {
        let g = partition_grid(4, 4, 2, 2).unwrap();
        let s = area();
        let base = Image::filled(4, 4, 1, 0.0).unwrap();
        let src = Image::filled(4, 4, 1, 0.7).unwrap();
        let patched = s.score_patched(&base, &src, &g, &[1, 3]).unwrap();
        assert_eq!(patched[0].prob(0), 0.25);
        assert_eq!(patched[1].prob(0), 0.25);
    }

    proptest! {
        #[test]
        fn mock_outputs_complement_exactly(vals in proptest::collection::vec(0.0f32..=1.0, 16), batch_split in 0usize..2) {
            let img = Image::new(4, 4, 1, vals).unwrap();
            let s = area();
            let g = partition_grid(4, 4, 2, 2).unwrap();
            let r = MockRegionWeightScorer::simple(g, vec![0.1, 0.2, 0.3, 0.4], 1).unwrap();
            for sv in s.score_batch(&[img.clone()]).unwrap().into_iter().chain(r.score_batch(&[img.clone()]).unwrap()) {
                prop_assert_eq!(sv.prob(0) + sv.prob(1), 1.0);
                prop_assert!(sv.probs().iter().all(|p| *p >= 0.0));
            }
            let other = Image::filled(4, 4, 1, 0.2).unwrap();
            let pair = if batch_split == 0 { vec![img.clone(), other.clone()] } else { vec![other.clone(), img.clone()] };
            let both = s.score_batch(&pair).unwrap();
            for (i, x) in pair.iter().enumerate() {
                prop_assert_eq!(&both[i], &s.score_batch(std::slice::from_ref(x)).unwrap()[0]);
            }
        }
    }
}
