//! Residual Navigator: waypoint map from inter-residuals, trusted-patch
//! selection, intra-residuals against the trusted set, and hybrid residuals.

use serde::{Deserialize, Serialize};

use crate::bank::{self, PrototypeBank, ResidualGrid, ResidualKind};
use crate::encoder::PatchFeatureGrid;
use crate::error::{Result, SnarmError};
use crate::grid::{Grid2, Grid3};
use crate::ops::sigmoid;
use crate::param::Param;

/// 1x1 convolution over residual channels plus bias: the unary classifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NavigatorParams {
    pub weight: Param,
    pub bias: Param,
}

impl NavigatorParams {
    /// Zero init: q starts at 0.5 and q_star is carried by the residual mean.
    pub fn zeros(dim: usize) -> Self {
        NavigatorParams {
            weight: Param::zeros("nav.weight", dim),
            bias: Param::zeros("nav.bias", 1),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// q is the sigmoid classifier output; q_star adds the channel-mean residual
/// magnitude and is the map that guides trusted selection and token scans.
#[derive(Debug, Clone)]
pub struct WaypointMap {
    pub q: Grid2,
    pub q_star: Grid2,
}

pub fn waypoint(residuals: &ResidualGrid, params: &NavigatorParams) -> Result<WaypointMap> {
    if residuals.kind != ResidualKind::Inter {
        return Err(SnarmError::data(
            "waypoint map expects inter-residual input",
        ));
    }
    let g = &residuals.grid;
    if params.weight.len() != g.c {
        return Err(SnarmError::shape(
            format!("{} channels", g.c),
            format!("{} navigator weights", params.weight.len()),
        ));
    }
    let mut q = Grid2::zeros(g.h, g.w);
    let mut q_star = Grid2::zeros(g.h, g.w);
    let inv_c = 1.0 / g.c as f64;
    for i in 0..g.h {
        for j in 0..g.w {
            let cell = g.cell(i, j);
            let mut z = params.bias.value[0];
            let mut mean = 0.0;
            for (k, v) in cell.iter().enumerate() {
                z += params.weight.value[k] * v;
                mean += v;
            }
            mean *= inv_c;
            let s = sigmoid(z);
            *q.at_mut(i, j) = s;
            *q_star.at_mut(i, j) = s + mean;
        }
    }
    Ok(WaypointMap { q, q_star })
}

/// Patches assumed normal: indices into the flattened grid plus their
/// descriptors, ready to serve as an in-image reference bank.
#[derive(Debug, Clone)]
pub struct TrustedSet {
    pub indices: Vec<usize>,
    pub dim: usize,
    features: Vec<f64>,
}

impl TrustedSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn feature(&self, n: usize) -> &[f64] {
        &self.features[n * self.dim..(n + 1) * self.dim]
    }

    fn as_bank(&self) -> PrototypeBank {
        PrototypeBank::from_vectors(
            self.dim,
            self.features.clone(),
            self.indices.iter().map(|&i| i as u32).collect(),
            0,
        )
        .expect("trusted set is internally consistent")
    }
}

/// Nearest-rank percentile threshold: the ceil(p/100 * M)-th smallest value.
fn nearest_rank_threshold(values: &[f64], p: f64) -> (f64, usize) {
    let m = values.len();
    let rank = ((p / 100.0 * m as f64).ceil() as usize).clamp(1, m);
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (sorted[rank - 1], rank)
}

/// Select patches whose waypoint score is strictly below the nearest-rank
/// p-th percentile. If strict comparison selects nothing (flat or bottom-tied
/// scores) fall back to the `rank` smallest (score, index) pairs, which for an
/// all-equal map is the index prefix.
pub fn select_trusted(
    wm: &WaypointMap,
    features: &PatchFeatureGrid,
    p: f64,
) -> Result<TrustedSet> {
    if !(0.0 < p && p < 100.0) {
        return Err(SnarmError::config(format!(
            "trusted percentile must lie in (0,100), got {p}"
        )));
    }
    let m = wm.q_star.len();
    if features.patch_count() != m {
        return Err(SnarmError::shape(
            format!("{m} patches"),
            format!("{}", features.patch_count()),
        ));
    }
    let scores = &wm.q_star.data;
    let (threshold, rank) = nearest_rank_threshold(scores, p);
    let mut indices: Vec<usize> = (0..m).filter(|&k| scores[k] < threshold).collect();
    if indices.is_empty() {
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        indices = order[..rank].to_vec();
        indices.sort_unstable();
    }
    let dim = features.grid().c;
    let mut flat = Vec::with_capacity(indices.len() * dim);
    for &k in &indices {
        flat.extend_from_slice(features.descriptor(k));
    }
    Ok(TrustedSet {
        indices,
        dim,
        features: flat,
    })
}

/// Re-match every patch against the trusted set (top-k mean reference) and
/// take the powered absolute difference. Self-matching is allowed, so trusted
/// patches carry zero residual at k=1.
pub fn intra_residual_grid(
    features: &PatchFeatureGrid,
    trusted: &TrustedSet,
    theta: u8,
    k: usize,
) -> Result<ResidualGrid> {
    if trusted.is_empty() {
        return Err(SnarmError::data("intra-matching needs a nonempty trusted set"));
    }
    let k = k.min(trusted.len());
    let tbank = trusted.as_bank();
    let g = features.grid();
    let mut out = Grid3::zeros(g.h, g.w, g.c);
    for patch in 0..features.patch_count() {
        let query = features.descriptor(patch);
        let reference = bank::topk_reference(query, &tbank, k)?;
        let res = bank::inter_residual(query, &reference, theta)?;
        out.data[patch * g.c..(patch + 1) * g.c].copy_from_slice(&res);
    }
    Ok(ResidualGrid {
        grid: out,
        theta,
        kind: ResidualKind::Intra,
    })
}

/// Channel concatenation [inter || intra]; lossless, 2*d_f channels.
pub fn hybrid(inter: &ResidualGrid, intra: &ResidualGrid) -> Result<ResidualGrid> {
    if inter.kind != ResidualKind::Inter || intra.kind != ResidualKind::Intra {
        return Err(SnarmError::data(format!(
            "hybrid expects (inter, intra) inputs, got ({:?}, {:?})",
            inter.kind, intra.kind
        )));
    }
    if inter.grid.h != intra.grid.h || inter.grid.w != intra.grid.w || inter.grid.c != intra.grid.c
    {
        return Err(SnarmError::shape(
            format!(
                "{}x{}x{}",
                inter.grid.h, inter.grid.w, inter.grid.c
            ),
            format!(
                "{}x{}x{}",
                intra.grid.h, intra.grid.w, intra.grid.c
            ),
        ));
    }
    Ok(ResidualGrid {
        grid: Grid3::concat_channels(&inter.grid, &intra.grid)?,
        theta: inter.theta,
        kind: ResidualKind::Hybrid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PatchGeometry;

    fn residuals(h: usize, w: usize, c: usize, data: Vec<f64>) -> ResidualGrid {
        ResidualGrid {
            grid: Grid3::from_vec(h, w, c, data).unwrap(),
            theta: 2,
            kind: ResidualKind::Inter,
        }
    }

    fn feature_grid(h: usize, w: usize, c: usize, data: Vec<f64>) -> PatchFeatureGrid {
        PatchFeatureGrid {
            grid: Grid3::from_vec(h, w, c, data).unwrap(),
            geometry: PatchGeometry {
                image_h: h * 4,
                image_w: w * 4,
                grid_h: h,
                grid_w: w,
            },
        }
    }

    #[test]
    fn waypoint_zero_everything_is_half() {
        let r = residuals(2, 2, 3, vec![0.0; 12]);
        let wm = waypoint(&r, &NavigatorParams::zeros(3)).unwrap();
        assert!(wm.q.data.iter().all(|&v| v == 0.5));
        assert!(wm.q_star.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn waypoint_channel_mean_branch() {
        // residual channels (1,2,3,4) with zero classifier -> q_star = 0.5 + 2.5
        let r = residuals(1, 1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        let wm = waypoint(&r, &NavigatorParams::zeros(4)).unwrap();
        assert!((wm.q_star.at(0, 0) - 3.0).abs() < 1e-12);
        assert_eq!(wm.q.at(0, 0), 0.5);
    }

    #[test]
    fn waypoint_mean_branch_is_linear() {
        let data = vec![0.5, 1.5, 0.25, 0.75];
        let r1 = residuals(2, 1, 2, data.clone());
        let r2 = residuals(2, 1, 2, data.iter().map(|v| v * 2.0).collect());
        let params = NavigatorParams::zeros(2);
        let w1 = waypoint(&r1, &params).unwrap();
        let w2 = waypoint(&r2, &params).unwrap();
        for (a, b) in w1.q_star.data.iter().zip(&w2.q_star.data) {
            assert!(((b - 0.5) - 2.0 * (a - 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn waypoint_rejects_mismatched_params() {
        let r = residuals(1, 1, 4, vec![0.0; 4]);
        assert!(waypoint(&r, &NavigatorParams::zeros(3)).is_err());
    }

    #[test]
    fn waypoint_qstar_dominates_q_for_nonnegative_residuals() {
        let r = residuals(2, 2, 2, vec![0.0, 0.1, 0.3, 0.0, 1.0, 2.0, 0.5, 0.25]);
        let mut params = NavigatorParams::zeros(2);
        params.weight.value = vec![0.3, -0.7];
        params.bias.value[0] = 0.2;
        let wm = waypoint(&r, &params).unwrap();
        for (q, qs) in wm.q.data.iter().zip(&wm.q_star.data) {
            assert!(qs >= q);
        }
    }

    #[test]
    fn trusted_selection_nearest_rank() {
        // q_star = (0.1, 0.2, 0.3, 0.9), p=75: threshold 0.3, strict less-than
        let wm = WaypointMap {
            q: Grid2::zeros(2, 2),
            q_star: Grid2::from_vec(2, 2, vec![0.1, 0.2, 0.3, 0.9]).unwrap(),
        };
        let f = feature_grid(2, 2, 1, vec![10.0, 20.0, 30.0, 40.0]);
        let ts = select_trusted(&wm, &f, 75.0).unwrap();
        assert_eq!(ts.indices, vec![0, 1]);
        assert_eq!(ts.feature(0), &[10.0]);
        assert_eq!(ts.feature(1), &[20.0]);
    }

    #[test]
    fn trusted_selection_uniform_fallback_is_prefix() {
        let wm = WaypointMap {
            q: Grid2::zeros(2, 2),
            q_star: Grid2::from_vec(2, 2, vec![0.5; 4]).unwrap(),
        };
        let f = feature_grid(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let ts = select_trusted(&wm, &f, 75.0).unwrap();
        // ceil(0.75 * 4) = 3
        assert_eq!(ts.indices, vec![0, 1, 2]);
    }

    #[test]
    fn trusted_selection_rejects_bad_percentile() {
        let wm = WaypointMap {
            q: Grid2::zeros(1, 1),
            q_star: Grid2::from_vec(1, 1, vec![0.5]).unwrap(),
        };
        let f = feature_grid(1, 1, 1, vec![0.0]);
        assert!(select_trusted(&wm, &f, 0.0).is_err());
        assert!(select_trusted(&wm, &f, 100.0).is_err());
    }

    #[test]
    fn trusted_size_nondecreasing_in_p() {
        let wm = WaypointMap {
            q: Grid2::zeros(2, 3),
            q_star: Grid2::from_vec(2, 3, vec![0.9, 0.1, 0.4, 0.4, 0.2, 0.7]).unwrap(),
        };
        let f = feature_grid(2, 3, 1, vec![0.0; 6]);
        let mut last = 0;
        for p in [10.0, 25.0, 50.0, 75.0, 90.0, 99.0] {
            let n = select_trusted(&wm, &f, p).unwrap().len();
            assert!(n >= last, "p={p}");
            last = n;
        }
    }

    #[test]
    fn intra_self_match_is_zero() {
        let f = feature_grid(1, 3, 2, vec![0.0, 0.0, 1.0, 0.0, 5.0, 5.0]);
        let ts = TrustedSet {
            indices: vec![0, 1],
            dim: 2,
            features: vec![0.0, 0.0, 1.0, 0.0],
        };
        let rg = intra_residual_grid(&f, &ts, 1, 1).unwrap();
        assert_eq!(&rg.grid.data[0..4], &[0.0, 0.0, 0.0, 0.0]);
        // (5,5) matches (1,0): |5-1|, |5-0| = (4,5)
        assert_eq!(&rg.grid.data[4..6], &[4.0, 5.0]);
        assert_eq!(rg.kind, ResidualKind::Intra);
    }

    #[test]
    fn intra_identical_patches_all_zero() {
        let f = feature_grid(2, 2, 1, vec![3.0; 4]);
        let ts = TrustedSet {
            indices: vec![0],
            dim: 1,
            features: vec![3.0],
        };
        let rg = intra_residual_grid(&f, &ts, 2, 1).unwrap();
        assert!(rg.grid.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn intra_rejects_empty_trusted() {
        let f = feature_grid(1, 1, 1, vec![0.0]);
        let ts = TrustedSet {
            indices: vec![],
            dim: 1,
            features: vec![],
        };
        assert!(intra_residual_grid(&f, &ts, 1, 1).is_err());
    }

    #[test]
    fn hybrid_concat_order_and_losslessness() {
        let inter = residuals(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let intra = ResidualGrid {
            grid: Grid3::from_vec(1, 2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap(),
            theta: 2,
            kind: ResidualKind::Intra,
        };
        let h = hybrid(&inter, &intra).unwrap();
        assert_eq!(h.kind, ResidualKind::Hybrid);
        assert_eq!(h.grid.c, 4);
        assert_eq!(h.grid.cell(0, 0), &[1.0, 2.0, 5.0, 6.0]);
        let (l, r) = h.grid.split_channels(2).unwrap();
        assert_eq!(l.data, inter.grid.data);
        assert_eq!(r.data, intra.grid.data);
    }

    #[test]
    fn hybrid_rejects_kind_and_shape_mismatch() {
        let inter = residuals(1, 2, 2, vec![0.0; 4]);
        let wrong_kind = residuals(1, 2, 2, vec![0.0; 4]);
        assert!(hybrid(&inter, &wrong_kind).is_err());
        let intra_small = ResidualGrid {
            grid: Grid3::zeros(1, 1, 2),
            theta: 2,
            kind: ResidualKind::Intra,
        };
        assert!(hybrid(&inter, &intra_small).is_err());
    }
}
