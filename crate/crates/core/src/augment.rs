//! Attribution-guided background refilling and hard mining.
//!
//! A candidate image is searched for the regions that carry its prediction,
//! those regions are overwritten with the same cells of a cue-free donor
//! background, and the result keeps the original label. Only candidates
//! whose search pushed the counter-class confidence above `tau_aug` are kept.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    greedy_counterfactual, greedy_factual_lima, random_counterfactual, select_counter_target,
    trace_order, AttributionResult, SearchConfig,
};
use crate::error::{Error, Result};
use crate::imaging::io::{stack_images, write_atomic};
use crate::imaging::{composite, Image, RegionMask};
use crate::scorer::Scorer;

/// Cue-free backgrounds used to refill masked regions.
#[derive(Debug, Clone, PartialEq)]
pub struct DonorPool {
    donors: Vec<Image>,
    seed: u64,
}

/// Validates backgrounds into a pool. Donor order is kept as given.
pub fn build_donor_pool(backgrounds: Vec<Image>, seed: u64) -> Result<DonorPool> {
    let Some(first) = backgrounds.first() else {
        return Err(Error::EmptySource(
            "donor pool needs at least one background".into(),
        ));
    };
    for d in &backgrounds[1..] {
        first.same_dims(d)?;
    }
    Ok(DonorPool {
        donors: backgrounds,
        seed,
    })
}

impl DonorPool {
    pub fn len(&self) -> usize {
        self.donors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.donors.is_empty()
    }

    pub fn get(&self, index: usize) -> &Image {
        &self.donors[index]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn check_dims(&self, image: &Image) -> Result<()> {
        self.donors[0].same_dims(image)
    }

    /// Uniform donor index stream derived from the pool seed and a caller
    /// chosen stream id.
    pub fn sampler(&self, stream: u64) -> DonorSampler {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        DonorSampler { rng, n: self.len() }
    }
}

pub struct DonorSampler {
    rng: ChaCha8Rng,
    n: usize,
}

impl DonorSampler {
    pub fn next_index(&mut self) -> usize {
        self.rng.random_range(0..self.n)
    }

    /// A seed for per-candidate randomness such as random region orders.
    pub fn next_seed(&mut self) -> u64 {
        self.rng.random()
    }
}

/// How the refilled regions are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Guidance {
    /// Greedy counterfactual search.
    Counterfactual,
    /// Greedy factual ordering, truncated by the same budget and stop rule.
    FactualLima,
    /// Uniformly random region order under the same budget and stop rule.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub tau_aug: f64,
    pub candidate_fraction: f64,
    pub guidance: Guidance,
    pub search: SearchConfig,
}

impl Default for MiningConfig {
    fn default() -> Self {
        Self {
            tau_aug: 0.5,
            candidate_fraction: 0.5,
            guidance: Guidance::Counterfactual,
            search: SearchConfig::default(),
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau_aug) {
            return Err(Error::InvalidArgument(format!(
                "tau_aug {} outside [0, 1]",
                self.tau_aug
            )));
        }
        if !(0.0..=1.0).contains(&self.candidate_fraction) {
            return Err(Error::InvalidArgument(format!(
                "candidate_fraction {} outside [0, 1]",
                self.candidate_fraction
            )));
        }
        self.search.validate()
    }

    /// `⌈candidate_fraction · n⌉`, robust to products like `0.1 · 30`.
    pub fn candidate_count(&self, n: usize) -> usize {
        let raw = self.candidate_fraction * n as f64;
        ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSample {
    pub image: Image,
    /// The ground-truth label of the source image.
    pub label: usize,
    pub c_max: f64,
    pub source_index: usize,
    pub donor_index: usize,
    pub mask: RegionMask,
    pub y_counter: usize,
}

/// One image to attribute, with its position in the training set.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub image: &'a Image,
    pub label: usize,
    pub source_index: usize,
}

/// Runs the configured search for a labeled image.
pub fn attribute(
    scorer: &impl Scorer,
    image: &Image,
    label: usize,
    config: &MiningConfig,
    seed: u64,
) -> Result<AttributionResult> {
    let scores = scorer.score_batch(std::slice::from_ref(image))?.remove(0);
    let y_counter = select_counter_target(&scores, label)?;
    let search = &config.search;
    match config.guidance {
        Guidance::Counterfactual => greedy_counterfactual(scorer, image, label, y_counter, search),
        Guidance::Random => random_counterfactual(scorer, image, label, y_counter, search, seed),
        Guidance::FactualLima => {
            let grid = search.grid_for(image)?;
            let order = greedy_factual_lima(
                scorer,
                image,
                label,
                grid,
                search.budget()?,
                &search.baseline,
            )?;
            trace_order(
                scorer,
                image,
                label,
                y_counter,
                &order.ordered_regions,
                search,
            )
        }
    }
}

/// Replaces the masked cells of `image` with the donor's pixels.
pub fn refill(image: &Image, donor: &Image, mask: &RegionMask) -> Result<Image> {
    composite(image, donor, mask)
}

/// Searches one candidate and refills its final mask from donor
/// `donor_index`. The returned sample always carries the input label.
pub fn counterfactual_augment(
    candidate: Candidate<'_>,
    scorer: &impl Scorer,
    pool: &DonorPool,
    config: &MiningConfig,
    donor_index: usize,
    seed: u64,
) -> Result<AugmentedSample> {
    pool.check_dims(candidate.image)?;
    let result = attribute(scorer, candidate.image, candidate.label, config, seed)?;
    let image = refill(candidate.image, pool.get(donor_index), &result.final_mask)?;
    Ok(AugmentedSample {
        image,
        label: candidate.label,
        c_max: result.c_max,
        source_index: candidate.source_index,
        donor_index,
        mask: result.final_mask,
        y_counter: result.y_counter,
    })
}

/// Per-candidate mining outcome, in candidate order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub source_index: usize,
    pub c_max: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinedBatch {
    pub kept: Vec<AugmentedSample>,
    pub candidates: Vec<CandidateReport>,
}

/// Attributes the first `⌈candidate_fraction · N⌉` entries of an already
/// shuffled batch and keeps the augmentations with `c_max > tau_aug`.
///
/// Donor indices and search seeds are drawn from `sampler` in candidate
/// order before any search runs, so the output does not depend on how the
/// searches are scheduled.
pub fn mine_hard_batch(
    batch: &[Candidate<'_>],
    scorer: &impl Scorer,
    pool: &DonorPool,
    config: &MiningConfig,
    sampler: &mut DonorSampler,
) -> Result<MinedBatch> {
    config.validate()?;
    let chosen = &batch[..config.candidate_count(batch.len())];
    let draws: Vec<(usize, u64)> = chosen
        .iter()
        .map(|_| (sampler.next_index(), sampler.next_seed()))
        .collect();
    let augmented: Vec<AugmentedSample> = chosen
        .par_iter()
        .zip(&draws)
        .map(|(c, &(donor, seed))| counterfactual_augment(*c, scorer, pool, config, donor, seed))
        .collect::<Result<_>>()?;
    let mut out = MinedBatch {
        kept: Vec::new(),
        candidates: Vec::with_capacity(augmented.len()),
    };
    for a in augmented {
        let kept = a.c_max > config.tau_aug;
        out.candidates.push(CandidateReport {
            source_index: a.source_index,
            c_max: a.c_max,
            kept,
        });
        if kept {
            out.kept.push(a);
        }
    }
    Ok(out)
}

/// JSON sidecar entry for an exported augmented sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSidecar {
    pub label: usize,
    pub c_max: f64,
    pub donor_index: usize,
    pub source_index: usize,
    pub y_counter: usize,
    pub mask_region_ids: Vec<usize>,
}

impl From<&AugmentedSample> for SampleSidecar {
    fn from(a: &AugmentedSample) -> Self {
        Self {
            label: a.label,
            c_max: a.c_max,
            donor_index: a.donor_index,
            source_index: a.source_index,
            y_counter: a.y_counter,
            mask_region_ids: a.mask.selected().iter().copied().collect(),
        }
    }
}

/// Writes `images.ssca` (stacked) and `samples.json` into `dir`. An empty
/// sample list writes only an empty `samples.json`.
pub fn export_augmented(dir: &Path, samples: &[AugmentedSample]) -> Result<()> {
    if !samples.is_empty() {
        let images: Vec<Image> = samples.iter().map(|s| s.image.clone()).collect();
        write_atomic(&dir.join("images.ssca"), &stack_images(&images)?.to_bytes())?;
    }
    let sidecar: Vec<SampleSidecar> = samples.iter().map(SampleSidecar::from).collect();
    write_atomic(
        &dir.join("samples.json"),
        &serde_json::to_vec_pretty(&sidecar)?,
    )
}

/// Rebuilds the mask of an exported sample on a grid.
pub fn sidecar_mask(
    sidecar: &SampleSidecar,
    grid: Arc<crate::imaging::RegionGrid>,
) -> Result<RegionMask> {
    RegionMask::from_ids(grid, sidecar.mask_region_ids.iter().copied())
}
