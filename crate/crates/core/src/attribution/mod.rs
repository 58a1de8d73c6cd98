//! Region attribution by greedy subset selection.
//!
//! The counterfactual search grows a region set `S` one cell at a time,
//! scoring every remaining cell by the utility
//!
//! ```text
//! F(S) = λ1·f_cf(I(V\S)) + λ1·(1 − f_cf(I(S))) + λ2·(1 − f_gt(I(V\S))) + λ2·f_gt(I(S))
//! ```
//!
//! where `I(V\S)` masks `S` to the baseline and `I(S)` keeps only `S`.
//! The factual variant orders regions by area-weighted recovery of the
//! ground-truth confidence. All ties resolve to the lowest region or class id.

mod curve;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    area_fraction, mask_delete, mask_insert, partition_grid, Baseline, Image, RegionGrid,
    RegionMask,
};
use crate::scorer::{argmax_lowest, ScoreVector, Scorer};

pub use curve::{curve_to_csv, deletion_curve, write_curve_csv, CurvePoint, CURVE_HEADER};

/// Largest grid accepted by [`brute_force_best_set`].
pub const BRUTE_FORCE_MAX_REGIONS: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilityWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for UtilityWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

impl UtilityWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda1) || !ok(self.lambda2) {
            return Err(Error::InvalidArgument(
                "utility weights must be finite and nonnegative".into(),
            ));
        }
        if self.lambda1 == 0.0 && self.lambda2 == 0.0 {
            return Err(Error::InvalidArgument(
                "lambda1 and lambda2 cannot both be zero".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Region budget; `None` means `⌈m / 4⌉`.
    pub budget_k: Option<usize>,
    pub tau_cf: f64,
    pub weights: UtilityWeights,
    pub baseline: Baseline,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            grid_rows: 7,
            grid_cols: 7,
            budget_k: None,
            tau_cf: 0.5,
            weights: UtilityWeights::default(),
            baseline: Baseline::zero(),
        }
    }
}

impl SearchConfig {
    pub fn num_regions(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    /// Effective budget, checked against `1 ≤ k ≤ m`.
    pub fn budget(&self) -> Result<usize> {
        let m = self.num_regions();
        let k = self.budget_k.unwrap_or(m.div_ceil(4));
        if k == 0 || k > m {
            return Err(Error::InvalidArgument(format!(
                "budget {k} outside 1..={m}"
            )));
        }
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.tau_cf) {
            return Err(Error::InvalidArgument(format!(
                "tau_cf {} outside [0, 1]",
                self.tau_cf
            )));
        }
        self.budget().map(|_| ())
    }

    pub fn grid_for(&self, image: &Image) -> Result<Arc<RegionGrid>> {
        Ok(Arc::new(partition_grid(
            image.height(),
            image.width(),
            self.grid_rows,
            self.grid_cols,
        )?))
    }
}

/// The four utility terms, before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UtilityTerms {
    /// `f_cf(I(V\S))`
    pub a: f64,
    /// `1 − f_cf(I(S))`
    pub b: f64,
    /// `1 − f_gt(I(V\S))`
    pub c: f64,
    /// `f_gt(I(S))`
    pub d: f64,
}

/// Confidences of the two classes on the deletion and insertion images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confidences {
    pub f_gt_del: f64,
    pub f_cf_del: f64,
    pub f_gt_ins: f64,
    pub f_cf_ins: f64,
}

impl Confidences {
    fn from_scores(del: &ScoreVector, ins: &ScoreVector, y_gt: usize, y_cf: usize) -> Self {
        Self {
            f_gt_del: del.prob(y_gt),
            f_cf_del: del.prob(y_cf),
            f_gt_ins: ins.prob(y_gt),
            f_cf_ins: ins.prob(y_cf),
        }
    }

    pub fn terms(&self) -> UtilityTerms {
        UtilityTerms {
            a: self.f_cf_del,
            b: 1.0 - self.f_cf_ins,
            c: 1.0 - self.f_gt_del,
            d: self.f_gt_ins,
        }
    }

    pub fn utility(&self, w: &UtilityWeights) -> f64 {
        let t = self.terms();
        w.lambda1 * t.a + w.lambda1 * t.b + w.lambda2 * t.c + w.lambda2 * t.d
    }
}

/// One greedy step: the region added and the state after adding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based step index.
    pub step: usize,
    pub region_id: usize,
    pub utility: f64,
    pub terms: UtilityTerms,
    pub confidences: Confidences,
    /// Cumulative selected area over image area.
    pub area_fraction: f64,
}

impl StepRecord {
    /// Utility recomputed from the stored confidences.
    pub fn recompute_utility(&self, w: &UtilityWeights) -> f64 {
        self.confidences.utility(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetExhausted,
    ThresholdReached,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub ordered_regions: Vec<usize>,
    pub final_mask: RegionMask,
    pub steps: Vec<StepRecord>,
    /// Largest counter-class confidence seen on a deletion image.
    pub c_max: f64,
    pub stop_reason: StopReason,
    pub y_gt: usize,
    pub y_counter: usize,
    pub weights: UtilityWeights,
    pub tau_cf: f64,
    pub budget_k: usize,
    pub baseline: Baseline,
}

/// The strongest competitor of `y_gt`: argmax of the logits (or the
/// probabilities when no logits are available) over every other class.
pub fn select_counter_target(scores: &ScoreVector, y_gt: usize) -> Result<usize> {
    let n = scores.num_classes();
    if y_gt >= n {
        return Err(Error::InvalidArgument(format!(
            "class {y_gt} out of range for {n} classes"
        )));
    }
    let values = scores.ranking_values();
    let others: Vec<f64> = (0..n).filter(|&i| i != y_gt).map(|i| values[i]).collect();
    let j = argmax_lowest(&others);
    Ok(if j >= y_gt { j + 1 } else { j })
}

fn check_classes(scorer: &impl Scorer, image: &Image, y_gt: usize, y_counter: usize) -> Result<()> {
    let info = scorer.info();
    info.check(image)?;
    if y_gt >= info.num_classes || y_counter >= info.num_classes {
        return Err(Error::InvalidArgument(format!(
            "classes ({y_gt}, {y_counter}) out of range for {} classes",
            info.num_classes
        )));
    }
    if y_gt == y_counter {
        return Err(Error::InvalidArgument(
            "counter class must differ from the ground truth".into(),
        ));
    }
    Ok(())
}

/// Scores the deletion and insertion images of `mask` in one batch.
pub fn confidences(
    scorer: &impl Scorer,
    image: &Image,
    mask: &RegionMask,
    y_gt: usize,
    y_counter: usize,
    baseline: &Baseline,
) -> Result<Confidences> {
    let del = mask_delete(image, mask, baseline)?;
    let ins = mask_insert(image, mask, baseline)?;
    let s = scorer.score_batch(&[del, ins])?;
    Ok(Confidences::from_scores(&s[0], &s[1], y_gt, y_counter))
}

/// Evaluates `F(S)` with two fresh scorer calls.
pub fn counterfactual_utility(
    scorer: &impl Scorer,
    image: &Image,
    mask: &RegionMask,
    y_gt: usize,
    y_counter: usize,
    weights: &UtilityWeights,
    baseline: &Baseline,
) -> Result<(f64, Confidences)> {
    scorer.info().check(image)?;
    let c = confidences(scorer, image, mask, y_gt, y_counter, baseline)?;
    Ok((c.utility(weights), c))
}

/// Incremental search state: the current deletion and insertion images.
struct SearchState {
    grid: Arc<RegionGrid>,
    mask: RegionMask,
    del: Image,
    ins: Image,
    blank: Image,
    steps: Vec<StepRecord>,
    c_max: f64,
}

impl SearchState {
    fn new(image: &Image, grid: Arc<RegionGrid>, baseline: &Baseline) -> Result<Self> {
        grid.matches(image)?;
        baseline.check_channels(image.channels())?;
        let blank = Image::baseline(image.height(), image.width(), image.channels(), baseline)?;
        Ok(Self {
            mask: RegionMask::empty(Arc::clone(&grid)),
            grid,
            del: image.clone(),
            ins: blank.clone(),
            blank,
            steps: Vec::new(),
            c_max: 0.0,
        })
    }

    fn remaining(&self) -> Vec<usize> {
        (0..self.grid.len())
            .filter(|id| !self.mask.contains(*id))
            .collect()
    }

    /// Confidences after adding each candidate, via two patched batches.
    fn sweep(
        &self,
        scorer: &impl Scorer,
        image: &Image,
        candidates: &[usize],
        y_gt: usize,
        y_counter: usize,
    ) -> Result<Vec<Confidences>> {
        let del = scorer.score_patched(&self.del, &self.blank, &self.grid, candidates)?;
        let ins = scorer.score_patched(&self.ins, image, &self.grid, candidates)?;
        Ok(del
            .iter()
            .zip(&ins)
            .map(|(d, i)| Confidences::from_scores(d, i, y_gt, y_counter))
            .collect())
    }

    fn push(
        &mut self,
        image: &Image,
        id: usize,
        conf: Confidences,
        w: &UtilityWeights,
    ) -> Result<()> {
        self.mask.insert(id)?;
        let cell = *self.grid.cell(id);
        self.del.copy_cell_from(&self.blank, &cell);
        self.ins.copy_cell_from(image, &cell);
        self.c_max = self.c_max.max(conf.f_cf_del);
        self.steps.push(StepRecord {
            step: self.steps.len() + 1,
            region_id: id,
            utility: conf.utility(w),
            terms: conf.terms(),
            confidences: conf,
            area_fraction: area_fraction(&self.grid, &self.mask),
        });
        Ok(())
    }

    fn finish(
        self,
        y_gt: usize,
        y_counter: usize,
        config: &SearchConfig,
        k: usize,
        reason: StopReason,
    ) -> AttributionResult {
        AttributionResult {
            ordered_regions: self.steps.iter().map(|s| s.region_id).collect(),
            final_mask: self.mask,
            steps: self.steps,
            c_max: self.c_max,
            stop_reason: reason,
            y_gt,
            y_counter,
            weights: config.weights,
            tau_cf: config.tau_cf,
            budget_k: k,
            baseline: config.baseline.clone(),
        }
    }
}

/// Greedy maximisation of `F`, stopping once the chosen candidate's
/// counter-class deletion confidence exceeds `tau_cf` or `k` regions are chosen.
pub fn greedy_counterfactual(
    scorer: &impl Scorer,
    image: &Image,
    y_gt: usize,
    y_counter: usize,
    config: &SearchConfig,
) -> Result<AttributionResult> {
    config.validate()?;
    check_classes(scorer, image, y_gt, y_counter)?;
    let k = config.budget()?;
    let mut state = SearchState::new(image, config.grid_for(image)?, &config.baseline)?;
    for _ in 0..k {
        let candidates = state.remaining();
        let confs = state.sweep(scorer, image, &candidates, y_gt, y_counter)?;
        let mut best = 0;
        let mut best_f = confs[0].utility(&config.weights);
        for (i, c) in confs.iter().enumerate().skip(1) {
            let f = c.utility(&config.weights);
            if f > best_f {
                best = i;
                best_f = f;
            }
        }
        let chosen = confs[best];
        state.push(image, candidates[best], chosen, &config.weights)?;
        if chosen.f_cf_del > config.tau_cf {
            return Ok(state.finish(y_gt, y_counter, config, k, StopReason::ThresholdReached));
        }
    }
    Ok(state.finish(y_gt, y_counter, config, k, StopReason::BudgetExhausted))
}

/// Follows a fixed region order under the same stopping rule as the greedy
/// search, recording the same per-step quantities.
pub fn trace_order(
    scorer: &impl Scorer,
    image: &Image,
    y_gt: usize,
    y_counter: usize,
    order: &[usize],
    config: &SearchConfig,
) -> Result<AttributionResult> {
    config.validate()?;
    check_classes(scorer, image, y_gt, y_counter)?;
    let k = config.budget()?;
    let mut state = SearchState::new(image, config.grid_for(image)?, &config.baseline)?;
    let mut seen = RegionMask::empty(Arc::clone(&state.grid));
    for &id in order {
        if !seen.insert(id)? {
            return Err(Error::InvalidArgument(format!(
                "region {id} repeated in order"
            )));
        }
    }
    for &id in order.iter().take(k) {
        let conf = state.sweep(scorer, image, &[id], y_gt, y_counter)?[0];
        state.push(image, id, conf, &config.weights)?;
        if conf.f_cf_del > config.tau_cf {
            return Ok(state.finish(y_gt, y_counter, config, k, StopReason::ThresholdReached));
        }
    }
    Ok(state.finish(y_gt, y_counter, config, k, StopReason::BudgetExhausted))
}

/// Baseline search: regions in a seeded uniformly random order.
pub fn random_counterfactual(
    scorer: &impl Scorer,
    image: &Image,
    y_gt: usize,
    y_counter: usize,
    config: &SearchConfig,
    seed: u64,
) -> Result<AttributionResult> {
    let mut order: Vec<usize> = (0..config.num_regions()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    trace_order(scorer, image, y_gt, y_counter, &order, config)
}

/// Re-scores every remaining candidate of each recorded step with fresh,
/// materialised evaluations. Returns the first step whose chosen region is
/// beaten by another candidate, or beaten by an equal-valued lower id.
pub fn audit_greedy(
    scorer: &impl Scorer,
    image: &Image,
    result: &AttributionResult,
) -> Result<Option<usize>> {
    let grid = Arc::clone(result.final_mask.grid());
    let mut mask = RegionMask::empty(Arc::clone(&grid));
    for step in &result.steps {
        let mut best: Option<(f64, usize)> = None;
        let mut chosen_f = f64::NAN;
        for v in (0..grid.len()).filter(|v| !mask.contains(*v)) {
            let mut cand = mask.clone();
            cand.insert(v)?;
            let (f, _) = counterfactual_utility(
                scorer,
                image,
                &cand,
                result.y_gt,
                result.y_counter,
                &result.weights,
                &result.baseline,
            )?;
            if v == step.region_id {
                chosen_f = f;
            }
            if best.is_none_or(|(bf, _)| f > bf) {
                best = Some((f, v));
            }
        }
        match best {
            Some((bf, bv)) if bf > chosen_f || (bf == chosen_f && bv != step.region_id) => {
                return Ok(Some(step.step));
            }
            None => return Ok(Some(step.step)),
            _ => {}
        }
        mask.insert(step.region_id)?;
    }
    Ok(None)
}

/// Exhaustive maximum of `F` over all subsets of exactly `size_k` regions.
/// Ties go to the lexicographically smallest id set.
pub fn brute_force_best_set(
    scorer: &impl Scorer,
    image: &Image,
    grid: Arc<RegionGrid>,
    y_gt: usize,
    y_counter: usize,
    weights: &UtilityWeights,
    baseline: &Baseline,
    size_k: usize,
) -> Result<(Vec<usize>, f64)> {
    let m = grid.len();
    if m > BRUTE_FORCE_MAX_REGIONS {
        return Err(Error::InvalidArgument(format!(
            "exhaustive search limited to {BRUTE_FORCE_MAX_REGIONS} regions, got {m}"
        )));
    }
    if size_k > m {
        return Err(Error::InvalidArgument(format!(
            "subset size {size_k} exceeds {m} regions"
        )));
    }
    check_classes(scorer, image, y_gt, y_counter)?;
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut subset: Vec<usize> = (0..size_k).collect();
    loop {
        let mask = RegionMask::from_ids(Arc::clone(&grid), subset.iter().copied())?;
        let (f, _) =
            counterfactual_utility(scorer, image, &mask, y_gt, y_counter, weights, baseline)?;
        if best.as_ref().is_none_or(|(_, bf)| f > *bf) {
            best = Some((subset.clone(), f));
        }
        if !next_combination(&mut subset, m) {
            break;
        }
    }
    Ok(best.expect("at least one subset"))
}

/// Advances to the next k-combination of `0..m` in lexicographic order.
fn next_combination(c: &mut [usize], m: usize) -> bool {
    let k = c.len();
    let Some(i) = (0..k).rev().find(|&i| c[i] < m - k + i) else {
        return false;
    };
    c[i] += 1;
    for j in i + 1..k {
        c[j] = c[j - 1] + 1;
    }
    true
}

/// Greedy ordering under the area-weighted factual objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactualResult {
    pub ordered_regions: Vec<usize>,
    /// `f_gt` on the insertion image after each step.
    pub f_gt_ins: Vec<f64>,
    /// Cumulative objective `Σ_j (|s_j|/A)·f_gt(I(S_j))` after each step.
    pub objective: Vec<f64>,
    pub y_gt: usize,
}

/// Greedy insertion: each step appends the region `v` maximising
/// `(|v|/A)·f_gt(I(S ∪ {v}))`.
pub fn greedy_factual_lima(
    scorer: &impl Scorer,
    image: &Image,
    y_gt: usize,
    grid: Arc<RegionGrid>,
    budget_k: usize,
    baseline: &Baseline,
) -> Result<FactualResult> {
    let info = scorer.info();
    info.check(image)?;
    if y_gt >= info.num_classes {
        return Err(Error::InvalidArgument(format!("class {y_gt} out of range")));
    }
    if budget_k > grid.len() {
        return Err(Error::InvalidArgument(format!(
            "budget {budget_k} exceeds {} regions",
            grid.len()
        )));
    }
    let mut state = SearchState::new(image, Arc::clone(&grid), baseline)?;
    let total = grid.area() as f64;
    let mut out = FactualResult {
        ordered_regions: Vec::with_capacity(budget_k),
        f_gt_ins: Vec::with_capacity(budget_k),
        objective: Vec::with_capacity(budget_k),
        y_gt,
    };
    let mut objective = 0.0;
    for _ in 0..budget_k {
        let candidates = state.remaining();
        let scores = scorer.score_patched(&state.ins, image, &grid, &candidates)?;
        let gain = |i: usize| grid.cell(candidates[i]).area() as f64 / total * scores[i].prob(y_gt);
        let mut best = 0;
        for i in 1..candidates.len() {
            if gain(i) > gain(best) {
                best = i;
            }
        }
        let id = candidates[best];
        objective += gain(best);
        state.mask.insert(id)?;
        state.ins.copy_cell_from(image, grid.cell(id));
        out.ordered_regions.push(id);
        out.f_gt_ins.push(scores[best].prob(y_gt));
        out.objective.push(objective);
    }
    Ok(out)
}
