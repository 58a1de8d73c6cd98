//! Accuracy, corruption robustness and flip-rate evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    greedy_counterfactual, random_counterfactual, select_counter_target, SearchConfig,
};
use crate::augment::Guidance;
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::scorer::Scorer;
use crate::testbed::{apply_corruption, CorruptionSpec};

/// Images scored per batch call during evaluation.
const EVAL_CHUNK: usize = 256;

/// Deletion-image counter-class confidence that counts as a flip.
pub const FLIP_THRESHOLD: f64 = 0.5;

/// 97.5% standard normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

fn predictions(scorer: &impl Scorer, images: &[Image]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        out.extend(scorer.score_batch(chunk)?.iter().map(|s| s.argmax()));
    }
    Ok(out)
}

/// Top-1 accuracy in percent; argmax ties go to the lowest class id.
pub fn evaluate(scorer: &impl Scorer, images: &[Image], labels: &[usize]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::EmptySource("cannot evaluate an empty split".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::dims(format!(
            "{} images, {} labels",
            images.len(),
            labels.len()
        )));
    }
    let pred = predictions(scorer, images)?;
    let correct = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / images.len() as f64)
}

/// SplitMix64 finalizer; derives per-image noise seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRow {
    pub name: String,
    pub spec: CorruptionSpec,
    pub accuracy: f64,
}

/// Image `i` under `spec` uses noise seed `mix_seed(seed, i)`, so two models
/// evaluated with the same seed see identical corrupted inputs.
pub fn corrupt_split(images: &[Image], spec: &CorruptionSpec, seed: u64) -> Vec<Image> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| apply_corruption(img, spec, mix_seed(seed, i as u64)))
        .collect()
}

/// One accuracy per spec, corruptions applied on the fly.
pub fn evaluate_corruptions(
    scorer: &impl Scorer,
    images: &[Image],
    labels: &[usize],
    specs: &[CorruptionSpec],
    seed: u64,
) -> Result<Vec<CorruptionRow>> {
    specs
        .iter()
        .map(|spec| {
            let corrupted = corrupt_split(images, spec, seed);
            Ok(CorruptionRow {
                name: spec.name().into(),
                spec: *spec,
                accuracy: evaluate(scorer, &corrupted, labels)?,
            })
        })
        .collect()
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: usize, n: usize) -> Option<[f64; 2]> {
    if n == 0 {
        return None;
    }
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    Some([(center - half).max(0.0), (center + half).min(1.0)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRateReport {
    /// Successes over `n`; `None` when no correctly classified image was found.
    pub rate: Option<f64>,
    pub ci95: Option<[f64; 2]>,
    pub n: usize,
    pub successes: usize,
    /// Images inspected to find `n` correctly classified ones.
    pub considered: usize,
    pub indices: Vec<usize>,
    pub c_max: Vec<f64>,
    pub guidance: Guidance,
}

/// Searches up to `sample_count` correctly classified images, visited in a
/// seeded random order, and counts those reaching `c_max > 0.5`.
///
/// The sample set depends only on `seed` and the scorer's predictions, so
/// different guidance strategies with the same seed see the same images.
pub fn flip_rate(
    scorer: &impl Scorer,
    images: &[Image],
    labels: &[usize],
    search: &SearchConfig,
    sample_count: usize,
    seed: u64,
    guidance: Guidance,
) -> Result<FlipRateReport> {
    if images.len() != labels.len() {
        return Err(Error::dims("images and labels differ in length"));
    }
    if guidance == Guidance::FactualLima {
        return Err(Error::InvalidArgument(
            "flip rate supports counterfactual and random guidance".into(),
        ));
    }
    search.validate()?;
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = Vec::with_capacity(sample_count);
    let mut considered = 0;
    for &i in &order {
        if chosen.len() == sample_count {
            break;
        }
        considered += 1;
        let sv = scorer
            .score_batch(std::slice::from_ref(&images[i]))?
            .remove(0);
        if sv.argmax() == labels[i] {
            chosen.push((i, select_counter_target(&sv, labels[i])?));
        }
    }
    let c_max: Vec<f64> = chosen
        .par_iter()
        .map(|&(i, y_cf)| {
            let r = match guidance {
                Guidance::Random => random_counterfactual(
                    scorer,
                    &images[i],
                    labels[i],
                    y_cf,
                    search,
                    mix_seed(seed, i as u64),
                )?,
                _ => greedy_counterfactual(scorer, &images[i], labels[i], y_cf, search)?,
            };
            Ok(r.c_max)
        })
        .collect::<Result<_>>()?;
    let successes = c_max.iter().filter(|&&c| c > FLIP_THRESHOLD).count();
    let n = c_max.len();
    Ok(FlipRateReport {
        rate: (n > 0).then(|| successes as f64 / n as f64),
        ci95: wilson_interval(successes, n),
        n,
        successes,
        considered,
        indices: chosen.iter().map(|&(i, _)| i).collect(),
        c_max,
        guidance,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipRateSummary {
    pub rate: Option<f64>,
    pub ci95: Option<[f64; 2]>,
    pub n: usize,
}

impl From<&FlipRateReport> for FlipRateSummary {
    fn from(r: &FlipRateReport) -> Self {
        Self {
            rate: r.rate,
            ci95: r.ci95,
            n: r.n,
        }
    }
}

/// Evaluation output written by the `eval` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub tool_version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Top-1 accuracy in percent per split.
    pub splits: BTreeMap<String, f64>,
    /// Top-1 accuracy in percent per corruption.
    pub corruptions: BTreeMap<String, f64>,
    pub flip_rate: Option<FlipRateSummary>,
    pub per_step_loss_csv: Option<String>,
    pub params_hash: String,
    pub dataset_hash: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::{FnScorer, ScoreVector, ScorerInfo};

    fn info() -> ScorerInfo {
        ScorerInfo {
            num_classes: 4,
            expected_height: 2,
            expected_width: 2,
            expected_channels: 1,
        }
    }

    /// Images encode their label in the first pixel as `label / 4`.
    fn labeled(n: usize) -> (Vec<Image>, Vec<usize>) {
        let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
        let images = labels
            .iter()
            .map(|&l| Image::filled(2, 2, 1, l as f32 / 4.0).unwrap())
            .collect();
        (images, labels)
    }

    fn perfect() -> impl Scorer {
        FnScorer::new(info(), |img: &Image| {
            let l = ((img.data()[0] * 4.0).round() as usize).min(3);
            let mut p = vec![0.0; 4];
            p[l] = 1.0;
            ScoreVector::from_probs(p).unwrap()
        })
    }

    fn uniform() -> impl Scorer {
        FnScorer::new(info(), |_: &Image| {
            ScoreVector::from_probs(vec![0.25; 4]).unwrap()
        })
    }

    #[test]
    fn accuracy_examples() {
        let (images, labels) = labeled(40);
        assert_eq!(evaluate(&perfect(), &images, &labels).unwrap(), 100.0);
        assert_eq!(evaluate(&uniform(), &images, &labels).unwrap(), 25.0);
        let doubled: Vec<Image> = images.iter().chain(&images).cloned().collect();
        let dl: Vec<usize> = labels.iter().chain(&labels).copied().collect();
        assert_eq!(evaluate(&perfect(), &doubled, &dl).unwrap(), 100.0);
        assert!(evaluate(&perfect(), &[], &[]).is_err());
    }

    #[test]
    fn identity_corruption_matches_clean() {
        let (images, labels) = labeled(20);
        let clean = evaluate(&perfect(), &images, &labels).unwrap();
        let rows = evaluate_corruptions(
            &perfect(),
            &images,
            &labels,
            &[CorruptionSpec::Contrast { factor: 1.0 }],
            3,
        )
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].accuracy, clean);
        let rows =
            evaluate_corruptions(&perfect(), &images, &labels, &CorruptionSpec::defaults(), 3)
                .unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.name.as_str()).collect();
        assert_eq!(
            names,
            [
                "gaussian_noise",
                "gaussian_blur",
                "brightness",
                "contrast",
                "vertical_flip",
                "horizontal_flip"
            ]
        );
    }

    #[test]
    fn corruption_noise_is_paired() {
        let (images, _) = labeled(8);
        let spec = CorruptionSpec::GaussianNoise { sigma: 0.1 };
        assert_eq!(
            corrupt_split(&images, &spec, 5),
            corrupt_split(&images, &spec, 5)
        );
        assert_ne!(
            corrupt_split(&images, &spec, 5),
            corrupt_split(&images, &spec, 6)
        );
        let c = corrupt_split(&images, &spec, 5);
        assert_ne!(c[0], c[4], "images with equal content get distinct noise");
    }

    #[test]
    fn wilson_values() {
        assert_eq!(wilson_interval(0, 0), None);
        let [lo, hi] = wilson_interval(50, 100).unwrap();
        assert!((lo - 0.4038).abs() < 1e-4 && (hi - 0.5962).abs() < 1e-4);
        let [lo, hi] = wilson_interval(0, 20).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 0.1611).abs() < 1e-4);
        let [lo, hi] = wilson_interval(20, 20).unwrap();
        assert!((lo - 0.8389).abs() < 1e-4 && hi == 1.0);
    }

    #[test]
    fn flip_rate_on_uniform_net_is_empty() {
        let (images, labels) = labeled(12);
        let search = SearchConfig {
            grid_rows: 2,
            grid_cols: 2,
            ..SearchConfig::default()
        };
        // Uniform scores predict class 0; only label-0 images qualify.
        let r = flip_rate(
            &uniform(),
            &images,
            &labels,
            &search,
            5,
            1,
            Guidance::Counterfactual,
        )
        .unwrap();
        assert_eq!(r.n, 3);
        assert_eq!(r.successes, 0);
        assert_eq!(r.considered, 12);
        let none = flip_rate(
            &uniform(),
            &images[1..2],
            &labels[1..2],
            &search,
            5,
            1,
            Guidance::Counterfactual,
        )
        .unwrap();
        assert_eq!(none.rate, None);
        assert_eq!(none.ci95, None);
    }
}
