//! Deletion and insertion curves along a selected region order.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{AttributionResult, Confidences};
use crate::error::{Error, Result};
use crate::imaging::io::write_atomic;
use crate::imaging::{area_fraction, mask_delete, mask_insert, Image, RegionMask};
use crate::scorer::Scorer;

pub const CURVE_HEADER: &str =
    "step,region_id,area_removed,f_gt_del,f_cf_del,f_gt_ins,f_cf_ins,utility";

/// One point of the curve; point 0 is the unmasked image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub region_id: Option<usize>,
    pub area_removed: f64,
    pub f_gt_del: f64,
    pub f_cf_del: f64,
    pub f_gt_ins: f64,
    pub f_cf_ins: f64,
    pub utility: f64,
}

/// Re-scores the prefixes of `result.ordered_regions` with fresh batch calls.
pub fn deletion_curve(
    scorer: &impl Scorer,
    image: &Image,
    result: &AttributionResult,
) -> Result<Vec<CurvePoint>> {
    let grid = Arc::clone(result.final_mask.grid());
    let mut mask = RegionMask::empty(Arc::clone(&grid));
    let mut masks = vec![mask.clone()];
    for &id in &result.ordered_regions {
        mask.insert(id)?;
        masks.push(mask.clone());
    }
    let mut batch = Vec::with_capacity(2 * masks.len());
    for m in &masks {
        batch.push(mask_delete(image, m, &result.baseline)?);
        batch.push(mask_insert(image, m, &result.baseline)?);
    }
    let scores = scorer.score_batch(&batch)?;
    Ok(masks
        .iter()
        .enumerate()
        .map(|(t, m)| {
            let c = Confidences::from_scores(
                &scores[2 * t],
                &scores[2 * t + 1],
                result.y_gt,
                result.y_counter,
            );
            CurvePoint {
                step: t,
                region_id: t.checked_sub(1).map(|i| result.ordered_regions[i]),
                area_removed: area_fraction(&grid, m),
                f_gt_del: c.f_gt_del,
                f_cf_del: c.f_cf_del,
                f_gt_ins: c.f_gt_ins,
                f_cf_ins: c.f_cf_ins,
                utility: c.utility(&result.weights),
            }
        })
        .collect())
}

pub fn curve_to_csv(points: &[CurvePoint]) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(CURVE_HEADER.split(','))?;
    for p in points {
        w.write_record([
            p.step.to_string(),
            p.region_id.map(|r| r.to_string()).unwrap_or_default(),
            p.area_removed.to_string(),
            p.f_gt_del.to_string(),
            p.f_cf_del.to_string(),
            p.f_gt_ins.to_string(),
            p.f_cf_ins.to_string(),
            p.utility.to_string(),
        ])?;
    }
    w.into_inner()
        .map_err(|e| Error::Format(format!("csv buffer: {e}")))
}

pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    write_atomic(path, &curve_to_csv(points)?)
}
