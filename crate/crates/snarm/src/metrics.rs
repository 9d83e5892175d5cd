//! Threshold-independent evaluation: image AUROC, pixel AUROC, pixel average
//! precision and per-region overlap (PRO).
//!
//! AUROC uses midrank Mann-Whitney; AP is the step-interpolated sum over
//! descending unique thresholds; PRO sweeps every unique score (or a quantile
//! subsample for large maps), averages per-component overlap and integrates
//! the curve against global FPR up to a limit with the trapezoid rule. The
//! brute-force threshold-enumeration oracles live in the test suites.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SnarmError};
use crate::grid::Grid2;

/// Binary ground-truth mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> bool {
        self.data[i * self.w + j]
    }
}

/// One evaluated image: its score, pixel map, label and mask.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub image_score: f64,
    pub pixel_scores: Grid2,
    pub gt_label: bool,
    pub gt_mask: BinaryMask,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        if self.pixel_scores.h != self.gt_mask.h || self.pixel_scores.w != self.gt_mask.w {
            return Err(SnarmError::shape(
                format!("{}x{}", self.pixel_scores.h, self.pixel_scores.w),
                format!("{}x{}", self.gt_mask.h, self.gt_mask.w),
            ));
        }
        if !self.gt_label && self.gt_mask.any() {
            return Err(SnarmError::data(
                "normal record carries a nonzero ground-truth mask",
            ));
        }
        Ok(())
    }
}

/// Mann-Whitney AUROC with midranks for ties.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SnarmError::shape(
            format!("{} labels", scores.len()),
            format!("{}", labels.len()),
        ));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(SnarmError::data(format!(
            "AUROC needs both classes, got {n_pos} positive / {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // midrank of the tied group (ranks are 1-based)
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Step-interpolated average precision over descending unique thresholds.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(SnarmError::shape(
            format!("{} labels", scores.len()),
            format!("{}", labels.len()),
        ));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    if n_pos == 0 {
        return Err(SnarmError::data("average precision needs >=1 positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall_prev = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / n_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - recall_prev) * precision;
        recall_prev = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Threshold sweep strategy for curve metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Every unique score value; exact curves.
    Exact,
    /// Quantile subsample; approximate, for large maps.
    Subsampled(usize),
}

#[derive(Debug, Clone, Copy)]
pub struct ProConfig {
    pub fpr_limit: f64,
    /// 4 or 8
    pub connectivity: u8,
    pub thresholds: ThresholdMode,
}

impl Default for ProConfig {
    fn default() -> Self {
        ProConfig {
            fpr_limit: 0.3,
            connectivity: 8,
            thresholds: ThresholdMode::Exact,
        }
    }
}

/// Connected components of a mask; returns pixel indices per component.
pub fn connected_components(mask: &BinaryMask, connectivity: u8) -> Vec<Vec<usize>> {
    assert!(connectivity == 4 || connectivity == 8);
    let (h, w) = (mask.h, mask.w);
    let mut seen = vec![false; h * w];
    let mut components = Vec::new();
    let offsets_4: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];
    let offsets_8: [(isize, isize); 8] = [
        (-1, -1),
        (-1, 0),
        (-1, 1),
        (0, -1),
        (0, 1),
        (1, -1),
        (1, 0),
        (1, 1),
    ];
    let offsets: &[(isize, isize)] = if connectivity == 4 {
        &offsets_4
    } else {
        &offsets_8
    };
    for start in 0..h * w {
        if !mask.data[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        let mut comp = Vec::new();
        seen[start] = true;
        while let Some(idx) = stack.pop() {
            comp.push(idx);
            let (i, j) = (idx / w, idx % w);
            for &(di, dj) in offsets {
                let (ni, nj) = (i as isize + di, j as isize + dj);
                if ni < 0 || nj < 0 || ni >= h as isize || nj >= w as isize {
                    continue;
                }
                let nidx = ni as usize * w + nj as usize;
                if mask.data[nidx] && !seen[nidx] {
                    seen[nidx] = true;
                    stack.push(nidx);
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    components
}

/// Trapezoid integral of a nondecreasing-x curve over [0, limit], normalized
/// by the limit. Interpolates at the limit boundary.
fn integrate_normalized(points: &[(f64, f64)], limit: f64) -> f64 {
    let mut area = 0.0;
    for pair in points.windows(2) {
        let (x0, y0) = pair[0];
        let (x1, y1) = pair[1];
        if x0 >= limit {
            break;
        }
        if x1 <= limit {
            area += (x1 - x0) * (y0 + y1) * 0.5;
        } else {
            let frac = (limit - x0) / (x1 - x0);
            let yl = y0 + (y1 - y0) * frac;
            area += (limit - x0) * (y0 + yl) * 0.5;
            break;
        }
    }
    area / limit
}

/// Per-region overlap integrated over global FPR up to `fpr_limit`.
///
/// `images` pairs a pixel score map with its ground-truth mask. Components
/// are collected per image; the false-positive rate pools every negative
/// pixel across the set.
pub fn pro(images: &[(&Grid2, &BinaryMask)], cfg: &ProConfig) -> Result<f64> {
    if !(cfg.fpr_limit > 0.0 && cfg.fpr_limit <= 1.0) {
        return Err(SnarmError::config(format!(
            "PRO fpr limit must lie in (0,1], got {}",
            cfg.fpr_limit
        )));
    }
    // per-component score lists, descending
    let mut component_scores: Vec<Vec<f64>> = Vec::new();
    let mut negative_scores: Vec<f64> = Vec::new();
    let mut all_scores: Vec<f64> = Vec::new();
    for (scores, mask) in images {
        if scores.h != mask.h || scores.w != mask.w {
            return Err(SnarmError::shape(
                format!("{}x{}", scores.h, scores.w),
                format!("{}x{}", mask.h, mask.w),
            ));
        }
        for comp in connected_components(mask, cfg.connectivity) {
            let mut vals: Vec<f64> = comp.iter().map(|&i| scores.data[i]).collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            component_scores.push(vals);
        }
        for (idx, &m) in mask.data.iter().enumerate() {
            if !m {
                negative_scores.push(scores.data[idx]);
            }
        }
        all_scores.extend_from_slice(&scores.data);
    }
    if component_scores.is_empty() {
        return Err(SnarmError::data("PRO needs at least one mask component"));
    }
    if negative_scores.is_empty() {
        return Err(SnarmError::data("PRO needs at least one negative pixel"));
    }
    negative_scores.sort_by(|a, b| b.total_cmp(a));

    // descending unique thresholds
    all_scores.sort_by(|a, b| b.total_cmp(a));
    all_scores.dedup();
    let thresholds: Vec<f64> = match cfg.thresholds {
        ThresholdMode::Exact => all_scores,
        ThresholdMode::Subsampled(count) => {
            let count = count.max(2);
            if all_scores.len() <= count {
                all_scores
            } else {
                let mut picks = Vec::with_capacity(count);
                for k in 0..count {
                    let pos = k * (all_scores.len() - 1) / (count - 1);
                    picks.push(all_scores[pos]);
                }
                picks.dedup();
                picks
            }
        }
    };

    let n_neg = negative_scores.len() as f64;
    let n_comp = component_scores.len() as f64;
    // two-pointer sweep: counts of >= threshold grow as thresholds descend
    let mut neg_ptr = 0usize;
    let mut comp_ptr = vec![0usize; component_scores.len()];
    // theta = +inf: empty prediction
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(thresholds.len() + 1);
    points.push((0.0, 0.0));
    for &theta in &thresholds {
        while neg_ptr < negative_scores.len() && negative_scores[neg_ptr] >= theta {
            neg_ptr += 1;
        }
        let mut overlap_sum = 0.0;
        for (c, vals) in component_scores.iter().enumerate() {
            let p = &mut comp_ptr[c];
            while *p < vals.len() && vals[*p] >= theta {
                *p += 1;
            }
            overlap_sum += *p as f64 / vals.len() as f64;
        }
        points.push((neg_ptr as f64 / n_neg, overlap_sum / n_comp));
    }
    Ok(integrate_normalized(&points, cfg.fpr_limit))
}

/// Evaluation report: the four metrics, in [0,1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    #[serde(rename = "I_AUROC")]
    pub i_auroc: f64,
    #[serde(rename = "P_AUROC")]
    pub p_auroc: f64,
    #[serde(rename = "P_AP")]
    pub p_ap: f64,
    #[serde(rename = "PRO")]
    pub pro: f64,
}

/// The four metrics over a record set. Pixel metrics pool all pixels across
/// images; image AUROC needs both normal and anomalous records.
pub fn evaluate(records: &[EvalRecord], cfg: &ProConfig) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(SnarmError::data("evaluate needs at least one record"));
    }
    for r in records {
        r.validate()?;
    }
    let image_scores: Vec<f64> = records.iter().map(|r| r.image_score).collect();
    let image_labels: Vec<bool> = records.iter().map(|r| r.gt_label).collect();
    let i_auroc = auroc(&image_scores, &image_labels)?;

    let mut pixel_scores = Vec::new();
    let mut pixel_labels = Vec::new();
    for r in records {
        pixel_scores.extend_from_slice(&r.pixel_scores.data);
        pixel_labels.extend(r.gt_mask.data.iter().copied());
    }
    let p_auroc = auroc(&pixel_scores, &pixel_labels)?;
    let p_ap = average_precision(&pixel_scores, &pixel_labels)?;

    let pairs: Vec<(&Grid2, &BinaryMask)> = records
        .iter()
        .map(|r| (&r.pixel_scores, &r.gt_mask))
        .collect();
    let pro_value = pro(&pairs, cfg)?;

    Ok(MetricReport {
        i_auroc,
        p_auroc,
        p_ap,
        pro: pro_value,
    })
}
