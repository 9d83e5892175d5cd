//! The trainable model bundle (navigator, SNMM, decoder branches) and the
//! forward composition shared by training and inference.

use serde::{Deserialize, Serialize};

use crate::bank::{self, PrototypeBank, ResidualGrid, ResidualKind};
use crate::decoder::{self, AnomalyMap, DecoderParams, ScoreReduction};
use crate::encoder::PatchFeatureGrid;
use crate::error::{Result, SnarmError};
use crate::grid::Grid3;
use crate::navigator::{self, NavigatorParams, WaypointMap};
use crate::ops::BilinearPlan;
use crate::param::Param;
use crate::snmm::{self, DirectionalOutputs, SnmmParams};

/// Whether the SNMM consumes full hybrid residuals or inter-only (the intra
/// half zeroed), keeping the architecture identical for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    Hybrid,
    InterOnly,
}

/// Settings the forward composition needs; a strict subset of the run config.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StageConfig {
    pub theta: u8,
    pub topk: usize,
    pub intra_topk: usize,
    pub trusted_percent: f64,
    pub keep_ratio: f64,
    pub residual_mode: ResidualMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnarmModel {
    /// residual channel count (fused feature dim)
    pub d_f: usize,
    pub navigator: NavigatorParams,
    pub snmm: SnmmParams,
    pub decoder: DecoderParams,
}

impl SnarmModel {
    pub fn init(d_f: usize, snmm_dim: usize, state_dim: usize, seed: u64) -> Self {
        SnarmModel {
            d_f,
            navigator: NavigatorParams::zeros(d_f),
            snmm: SnmmParams::init(2 * d_f, snmm_dim, state_dim, seed),
            decoder: DecoderParams::init(snmm_dim, seed),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.navigator.visit_params_mut(f);
        self.snmm.visit_params_mut(f);
        self.decoder.visit_params_mut(f);
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// Restore grad buffers after deserialization.
    pub fn ensure_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.ensure_grad());
    }
}

/// From features plus their (possibly augmented) inter-residuals to the
/// waypoint map and the SNMM input: trusted selection, intra-matching and
/// hybrid concatenation.
pub fn residual_stage(
    features: &PatchFeatureGrid,
    inter: &ResidualGrid,
    navigator_params: &NavigatorParams,
    cfg: &StageConfig,
) -> Result<(WaypointMap, ResidualGrid)> {
    let wm = navigator::waypoint(inter, navigator_params)?;
    let hybrid = match cfg.residual_mode {
        ResidualMode::Hybrid => {
            let trusted = navigator::select_trusted(&wm, features, cfg.trusted_percent)?;
            let intra =
                navigator::intra_residual_grid(features, &trusted, cfg.theta, cfg.intra_topk)?;
            navigator::hybrid(inter, &intra)?
        }
        ResidualMode::InterOnly => {
            let zero = ResidualGrid {
                grid: Grid3::zeros(inter.grid.h, inter.grid.w, inter.grid.c),
                theta: inter.theta,
                kind: ResidualKind::Intra,
            };
            navigator::hybrid(inter, &zero)?
        }
    };
    Ok((wm, hybrid))
}

/// Full inference for one image's features: inter-matching against the bank,
/// residual stage, SNMM, all 16 decoder branches, ensemble and image score.
pub fn infer_features(
    model: &SnarmModel,
    bank: &PrototypeBank,
    features: &PatchFeatureGrid,
    cfg: &StageConfig,
    reduction: ScoreReduction,
) -> Result<InferOutput> {
    let inter = bank::compute_inter_grid(features, bank, cfg.theta, cfg.topk)?;
    let (wm, hybrid) = residual_stage(features, &inter, &model.navigator, cfg)?;
    let (outs, _) = snmm::snmm_forward(&hybrid, &wm, cfg.keep_ratio, &model.snmm)?;
    let (target_h, target_w) = (features.geometry.image_h, features.geometry.image_w);
    let maps = decode_all(model, &outs, target_h, target_w)?;
    let mut map = decoder::ensemble(&maps)?;
    map.image_score = decoder::image_score(&map.values, reduction);
    Ok(InferOutput {
        map,
        waypoint: wm,
    })
}

pub struct InferOutput {
    pub map: AnomalyMap,
    pub waypoint: WaypointMap,
}

/// All 16 branch maps, rate-major order matching `DecoderParams`.
pub fn decode_all(
    model: &SnarmModel,
    outs: &DirectionalOutputs,
    target_h: usize,
    target_w: usize,
) -> Result<Vec<AnomalyMap>> {
    let grids = outs.as_array();
    let (h, w) = (grids[0].h, grids[0].w);
    if target_h < h || target_w < w {
        return Err(SnarmError::config(format!(
            "decode target {target_h}x{target_w} below grid {h}x{w}"
        )));
    }
    let plan = BilinearPlan::new(h, w, target_h, target_w);
    let mut maps = Vec::with_capacity(16);
    for rate_idx in 0..4 {
        for (dir_idx, grid) in grids.iter().enumerate() {
            let branch = model.decoder.branch(rate_idx, dir_idx);
            let (values, _) = decoder::branch_forward(grid, branch, &plan);
            let score = decoder::image_score(&values, ScoreReduction::Max);
            maps.push(AnomalyMap {
                values,
                image_score: score,
            });
        }
    }
    Ok(maps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PatchGeometry;
    use crate::grid::Grid2;

    fn toy_features() -> PatchFeatureGrid {
        PatchFeatureGrid {
            grid: Grid3::from_vec(2, 2, 2, vec![0.1, 0.2, 0.3, 0.4, 2.0, 2.0, 0.15, 0.25])
                .unwrap(),
            geometry: PatchGeometry {
                image_h: 8,
                image_w: 8,
                grid_h: 2,
                grid_w: 2,
            },
        }
    }

    fn toy_bank() -> PrototypeBank {
        PrototypeBank::from_vectors(2, vec![0.1, 0.2, 0.3, 0.4], vec![0, 1], 0).unwrap()
    }

    fn stage_cfg(mode: ResidualMode) -> StageConfig {
        StageConfig {
            theta: 2,
            topk: 1,
            intra_topk: 1,
            trusted_percent: 75.0,
            keep_ratio: 1.0,
            residual_mode: mode,
        }
    }

    #[test]
    fn infer_is_deterministic_and_bounded() {
        let model = SnarmModel::init(2, 4, 2, 42);
        let features = toy_features();
        let bank = toy_bank();
        let cfg = stage_cfg(ResidualMode::Hybrid);
        let a = infer_features(&model, &bank, &features, &cfg, ScoreReduction::Max).unwrap();
        let b = infer_features(&model, &bank, &features, &cfg, ScoreReduction::Max).unwrap();
        assert_eq!(a.map.values.data, b.map.values.data);
        assert_eq!(a.map.image_score, b.map.image_score);
        assert!(a
            .map
            .values
            .data
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!((a.map.values.h, a.map.values.w), (8, 8));
    }

    #[test]
    fn inter_only_mode_zeroes_the_intra_half() {
        let features = toy_features();
        let bank = toy_bank();
        let inter = bank::compute_inter_grid(&features, &bank, 2, 1).unwrap();
        let model = SnarmModel::init(2, 4, 2, 7);
        let (_, hybrid) = residual_stage(
            &features,
            &inter,
            &model.navigator,
            &stage_cfg(ResidualMode::InterOnly),
        )
        .unwrap();
        let (left, right) = hybrid.grid.split_channels(2).unwrap();
        assert_eq!(left.data, inter.grid.data);
        assert!(right.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn untrained_model_on_bank_features_gives_flat_half_waypoint() {
        // features identical to bank members, k=1: zero residuals, q* = 0.5
        let features = PatchFeatureGrid {
            grid: Grid3::from_vec(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap(),
            geometry: PatchGeometry {
                image_h: 4,
                image_w: 4,
                grid_h: 1,
                grid_w: 2,
            },
        };
        let bank = toy_bank();
        let model = SnarmModel::init(2, 4, 2, 1);
        let out = infer_features(
            &model,
            &bank,
            &features,
            &stage_cfg(ResidualMode::Hybrid),
            ScoreReduction::Max,
        )
        .unwrap();
        assert_eq!(out.waypoint.q_star.data, vec![0.5, 0.5]);
        let _: &Grid2 = &out.map.values;
    }
}
