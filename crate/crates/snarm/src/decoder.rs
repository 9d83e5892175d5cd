//! Multi-View Decoder: four dilation-rate branches times four scan
//! directions. Each branch runs a dilated 3x3 convolution, a GELU, a 1x1
//! prediction head, bilinear upsampling of the logits and a sigmoid; the 16
//! maps are ensemble-averaged at inference.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnarmError};
use crate::grid::{Grid2, Grid3};
use crate::ops::{gelu, gelu_prime, sigmoid, BilinearPlan, Conv2d, PadMode};
use crate::param::Param;
use crate::seeding;
use crate::snmm::Direction;

pub const DILATION_RATES: [usize; 4] = [3, 6, 12, 24];

/// Per-pixel anomaly probabilities plus the reduced image-level score.
#[derive(Debug, Clone)]
pub struct AnomalyMap {
    pub values: Grid2,
    pub image_score: f64,
}

/// Image-score reduction over the map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "q")]
pub enum ScoreReduction {
    Max,
    TopQMean(f64),
}

pub fn image_score(values: &Grid2, reduction: ScoreReduction) -> f64 {
    debug_assert!(!values.is_empty());
    match reduction {
        ScoreReduction::Max => values.data.iter().copied().fold(f64::MIN, f64::max),
        ScoreReduction::TopQMean(q) => {
            let n = values.len();
            let take = ((q * n as f64).ceil() as usize).clamp(1, n);
            let mut sorted = values.data.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            sorted[..take].iter().sum::<f64>() / take as f64
        }
    }
}

/// One (dilation rate, direction) branch with its own atrous and head params.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewBranch {
    pub rate: usize,
    pub direction: Direction,
    pub atrous_w: Param,
    pub atrous_b: Param,
    pub head_w: Param,
    pub head_b: Param,
}

impl ViewBranch {
    fn init(rate: usize, direction: Direction, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv = Conv2d::new(dim, dim, 3, rate, PadMode::Zero);
        let scale = 1.0 / ((9 * dim) as f64).sqrt();
        let prefix = format!("dec.r{rate}.{}", direction.label());
        ViewBranch {
            rate,
            direction,
            atrous_w: Param::new(
                format!("{prefix}.atrous_w"),
                (0..conv.weight_len())
                    .map(|_| seeding::normal(rng) * scale)
                    .collect(),
            ),
            atrous_b: Param::zeros(format!("{prefix}.atrous_b"), dim),
            // zero head: every branch starts at a flat 0.5 map
            head_w: Param::zeros(format!("{prefix}.head_w"), dim),
            head_b: Param::zeros(format!("{prefix}.head_b"), 1),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.atrous_w);
        f(&mut self.atrous_b);
        f(&mut self.head_w);
        f(&mut self.head_b);
    }

    fn conv(&self, dim: usize) -> Conv2d {
        Conv2d::new(dim, dim, 3, self.rate, PadMode::Zero)
    }
}

/// The 16 view branches, rate-major (r3 right,left,down,up, r6 ...).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecoderParams {
    pub dim: usize,
    pub branches: Vec<ViewBranch>,
}

impl DecoderParams {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = seeding::substream(seed, "decoder-init", 0);
        let mut branches = Vec::with_capacity(16);
        for &rate in &DILATION_RATES {
            for dir in Direction::ALL {
                branches.push(ViewBranch::init(rate, dir, dim, &mut rng));
            }
        }
        DecoderParams { dim, branches }
    }

    pub fn branch(&self, rate_idx: usize, dir_idx: usize) -> &ViewBranch {
        &self.branches[rate_idx * 4 + dir_idx]
    }

    pub fn branch_mut(&mut self, rate_idx: usize, dir_idx: usize) -> &mut ViewBranch {
        &mut self.branches[rate_idx * 4 + dir_idx]
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for b in &mut self.branches {
            b.visit_params_mut(f);
        }
    }
}

/// Raw dilated convolution of the branch (no nonlinearity), dims preserved.
pub fn atrous_apply(features: &Grid3, branch: &ViewBranch) -> Grid3 {
    branch
        .conv(features.c)
        .forward(features, &branch.atrous_w.value, &branch.atrous_b.value)
}

/// 1x1 convolution, bilinear upsample of the logits, then sigmoid.
pub fn head_apply(
    features: &Grid3,
    branch: &ViewBranch,
    target_h: usize,
    target_w: usize,
) -> Result<AnomalyMap> {
    if target_h < features.h || target_w < features.w {
        return Err(SnarmError::config(format!(
            "head target {target_h}x{target_w} below feature grid {}x{}",
            features.h, features.w
        )));
    }
    let mut logits = Grid2::zeros(features.h, features.w);
    for cell in 0..features.cells() {
        let f = &features.data[cell * features.c..(cell + 1) * features.c];
        let mut z = branch.head_b.value[0];
        for (wv, fv) in branch.head_w.value.iter().zip(f) {
            z += wv * fv;
        }
        logits.data[cell] = z;
    }
    let up = BilinearPlan::new(features.h, features.w, target_h, target_w).apply2(&logits);
    let values = Grid2 {
        h: target_h,
        w: target_w,
        data: up.data.iter().map(|&z| sigmoid(z)).collect(),
    };
    let score = image_score(&values, ScoreReduction::Max);
    Ok(AnomalyMap {
        values,
        image_score: score,
    })
}

/// Intermediates of one branch forward, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BranchCache {
    pre_act: Grid3,
    act: Grid3,
    m: Grid2,
}

/// Full branch: atrous conv, GELU, head. Returns the probability map.
pub fn branch_forward(
    input: &Grid3,
    branch: &ViewBranch,
    plan: &BilinearPlan,
) -> (Grid2, BranchCache) {
    let pre_act = atrous_apply(input, branch);
    let act = Grid3 {
        h: pre_act.h,
        w: pre_act.w,
        c: pre_act.c,
        data: pre_act.data.iter().map(|&v| gelu(v)).collect(),
    };
    let mut logits = Grid2::zeros(act.h, act.w);
    for cell in 0..act.cells() {
        let f = &act.data[cell * act.c..(cell + 1) * act.c];
        let mut z = branch.head_b.value[0];
        for (wv, fv) in branch.head_w.value.iter().zip(f) {
            z += wv * fv;
        }
        logits.data[cell] = z;
    }
    let up = plan.apply2(&logits);
    let m = Grid2 {
        h: plan.out_h,
        w: plan.out_w,
        data: up.data.iter().map(|&z| sigmoid(z)).collect(),
    };
    (
        m.clone(),
        BranchCache {
            pre_act,
            act,
            m,
        },
    )
}

/// Backward through one branch given dL/dm; accumulates parameter gradients
/// and returns dL/d(input grid).
pub fn branch_backward(
    dm: &Grid2,
    input: &Grid3,
    cache: &BranchCache,
    branch: &mut ViewBranch,
    plan: &BilinearPlan,
) -> Grid3 {
    // sigmoid
    let dup = Grid2 {
        h: dm.h,
        w: dm.w,
        data: dm
            .data
            .iter()
            .zip(&cache.m.data)
            .map(|(g, m)| g * m * (1.0 - m))
            .collect(),
    };
    // upsample transpose
    let dlogits = plan.backward2(&dup);
    // head
    let c = cache.act.c;
    let mut dact = Grid3::zeros(cache.act.h, cache.act.w, c);
    for cell in 0..cache.act.cells() {
        let g = dlogits.data[cell];
        if g == 0.0 {
            continue;
        }
        branch.head_b.grad[0] += g;
        let f = &cache.act.data[cell * c..(cell + 1) * c];
        let d = &mut dact.data[cell * c..(cell + 1) * c];
        for k in 0..c {
            branch.head_w.grad[k] += g * f[k];
            d[k] = g * branch.head_w.value[k];
        }
    }
    // gelu
    let dpre = Grid3 {
        h: dact.h,
        w: dact.w,
        c,
        data: dact
            .data
            .iter()
            .zip(&cache.pre_act.data)
            .map(|(g, x)| g * gelu_prime(*x))
            .collect(),
    };
    branch.conv(c).backward(
        input,
        &branch.atrous_w.value,
        &dpre,
        &mut branch.atrous_w.grad,
        &mut branch.atrous_b.grad,
    )
}

/// Arithmetic mean of exactly 16 equal-shape maps.
pub fn ensemble(maps: &[AnomalyMap]) -> Result<AnomalyMap> {
    if maps.len() != 16 {
        return Err(SnarmError::data(format!(
            "ensemble expects 16 maps, got {}",
            maps.len()
        )));
    }
    let (h, w) = (maps[0].values.h, maps[0].values.w);
    if !maps.iter().all(|m| m.values.h == h && m.values.w == w) {
        return Err(SnarmError::data("ensemble maps differ in shape"));
    }
    let mut out = Grid2::zeros(h, w);
    // canonical (sorted) summation order makes the mean bit-exactly
    // permutation-invariant
    let mut vals = [0.0f64; 16];
    for (idx, acc) in out.data.iter_mut().enumerate() {
        for (slot, m) in vals.iter_mut().zip(maps) {
            *slot = m.values.data[idx];
        }
        vals.sort_by(f64::total_cmp);
        *acc = vals.iter().sum::<f64>() / 16.0;
    }
    let score = image_score(&out, ScoreReduction::Max);
    Ok(AnomalyMap {
        values: out,
        image_score: score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn branch_with(dim: usize, rate: usize, seed: u64) -> ViewBranch {
        let mut rng = seeding::substream(seed, "dec-test", 0);
        ViewBranch::init(rate, Direction::Right, dim, &mut rng)
    }

    fn map_of(h: usize, w: usize, v: f64) -> AnomalyMap {
        AnomalyMap {
            values: Grid2::from_vec(h, w, vec![v; h * w]).unwrap(),
            image_score: v,
        }
    }

    #[test]
    fn atrous_delta_kernel_is_identity() {
        for rate in DILATION_RATES {
            let mut branch = branch_with(2, rate, 1);
            branch.atrous_w.value.fill(0.0);
            for o in 0..2 {
                branch.atrous_w.value[((o * 2 + o) * 3 + 1) * 3 + 1] = 1.0;
            }
            branch.atrous_b.value.fill(0.0);
            let input = Grid3::from_vec(4, 4, 2, (0..32).map(|i| i as f64 * 0.1).collect()).unwrap();
            let out = atrous_apply(&input, &branch);
            assert_eq!(out.data, input.data, "rate {rate}");
        }
    }

    #[test]
    fn atrous_impulse_response_at_rate_offsets() {
        let mut branch = branch_with(1, 3, 2);
        branch.atrous_w.value.fill(1.0);
        branch.atrous_b.value.fill(0.0);
        let mut input = Grid3::zeros(7, 7, 1);
        *input.at_mut(3, 3, 0) = 1.0;
        let out = atrous_apply(&input, &branch);
        for i in 0..7 {
            for j in 0..7 {
                let hit = (i == 0 || i == 3 || i == 6) && (j == 0 || j == 3 || j == 6);
                assert_eq!(out.at(i, j, 0), if hit { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn atrous_zero_input_zero_bias_gives_zero() {
        let branch = branch_with(3, 6, 3);
        let out = atrous_apply(&Grid3::zeros(5, 5, 3), &branch);
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_zero_everything_is_half() {
        let branch = branch_with(3, 3, 4);
        let features = Grid3::zeros(2, 2, 3);
        let map = head_apply(&features, &branch, 4, 4).unwrap();
        assert!(map.values.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn head_constant_features_give_constant_map() {
        let mut branch = branch_with(2, 3, 5);
        branch.head_w.value = vec![0.4, -0.3];
        branch.head_b.value = vec![0.1];
        let features = Grid3::from_vec(2, 2, 2, vec![1.0, 2.0].repeat(4)).unwrap();
        let map = head_apply(&features, &branch, 6, 6).unwrap();
        let first = map.values.data[0];
        assert!(map.values.data.iter().all(|&v| (v - first).abs() < 1e-12));
    }

    #[test]
    fn head_upsamples_logits_before_sigmoid() {
        // head as identity over a 1-channel grid: features are the logits
        let mut branch = branch_with(1, 3, 6);
        branch.head_w.value = vec![1.0];
        branch.head_b.value = vec![0.0];
        let logits = [0.5, -1.0, 2.0, 0.25];
        let features = Grid3::from_vec(2, 2, 1, logits.to_vec()).unwrap();
        let map = head_apply(&features, &branch, 4, 4).unwrap();
        // hand bilinear: axis weights for 2 -> 4 are rows of
        // [1,0], [.75,.25], [.25,.75], [0,1]
        let wts = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        for oi in 0..4 {
            for oj in 0..4 {
                let mut z = 0.0;
                for si in 0..2 {
                    for sj in 0..2 {
                        z += wts[oi][si] * wts[oj][sj] * logits[si * 2 + sj];
                    }
                }
                let want = 1.0 / (1.0 + (-z as f64).exp());
                let got = map.values.at(oi, oj);
                assert!((got - want).abs() < 1e-12, "({oi},{oj}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn ensemble_mean_and_bounds() {
        let maps: Vec<AnomalyMap> = (0..16)
            .map(|i| map_of(2, 2, if i < 8 { 0.2 } else { 0.6 }))
            .collect();
        let out = ensemble(&maps).unwrap();
        assert!(out.values.data.iter().all(|&v| (v - 0.4).abs() < 1e-12));

        let same: Vec<AnomalyMap> = (0..16).map(|_| map_of(2, 2, 0.37)).collect();
        let out = ensemble(&same).unwrap();
        assert!(out.values.data.iter().all(|&v| (v - 0.37).abs() < 1e-12));

        assert!(ensemble(&same[..15]).is_err());
    }

    #[test]
    fn ensemble_permutation_invariant() {
        let mut maps: Vec<AnomalyMap> = (0..16)
            .map(|i| map_of(2, 2, (i as f64 + 1.0) / 20.0))
            .collect();
        let a = ensemble(&maps).unwrap();
        maps.reverse();
        maps.swap(3, 9);
        let b = ensemble(&maps).unwrap();
        assert_eq!(a.values.data, b.values.data);
    }

    #[test]
    fn image_score_reductions() {
        let values = Grid2::from_vec(2, 2, vec![0.1, 0.9, 0.2, 0.8]).unwrap();
        assert_eq!(image_score(&values, ScoreReduction::Max), 0.9);
        let top = image_score(&values, ScoreReduction::TopQMean(0.5));
        assert!((top - 0.85).abs() < 1e-12);
        let constant = Grid2::from_vec(1, 3, vec![0.3; 3]).unwrap();
        assert_eq!(image_score(&constant, ScoreReduction::Max), 0.3);
        assert_eq!(image_score(&constant, ScoreReduction::TopQMean(0.5)), 0.3);
    }

    #[test]
    fn branch_gradients_match_finite_differences() {
        let dim = 2;
        let mut branch = branch_with(dim, 3, 9);
        // randomize the head so atrous gradients are exercised
        let mut rng = seeding::substream(10, "dec-gc", 0);
        for v in branch.head_w.value.iter_mut() {
            *v = seeding::normal(&mut rng) * 0.5;
        }
        branch.head_b.value[0] = 0.2;
        let input = Grid3::from_vec(
            3,
            3,
            dim,
            (0..18).map(|i| ((i * 7 % 11) as f64 - 5.0) / 6.0).collect(),
        )
        .unwrap();
        let plan = BilinearPlan::new(3, 3, 6, 6);
        let weights: Vec<f64> = (0..36).map(|i| 0.5 + 0.01 * i as f64).collect();
        let loss = |b: &ViewBranch, inp: &Grid3| -> f64 {
            let (m, _) = branch_forward(inp, b, &plan);
            m.data.iter().zip(&weights).map(|(v, w)| v * w).sum()
        };
        let (m, cache) = branch_forward(&input, &branch, &plan);
        let dm = Grid2::from_vec(6, 6, weights.clone()).unwrap();
        let mut b = branch.clone();
        let dinput = branch_backward(&dm, &input, &cache, &mut b, &plan);
        let _ = m;
        let h = 1e-5;
        for idx in 0..input.data.len() {
            let mut plus = input.clone();
            plus.data[idx] += h;
            let mut minus = input.clone();
            minus.data[idx] -= h;
            let fd = (loss(&branch, &plus) - loss(&branch, &minus)) / (2.0 * h);
            let rel = (fd - dinput.data[idx]).abs() / fd.abs().max(dinput.data[idx].abs()).max(1.0);
            assert!(rel < 1e-6, "input[{idx}]");
        }
        let names: Vec<(String, usize)> = {
            let mut v = Vec::new();
            let mut q = branch.clone();
            q.visit_params_mut(&mut |p| v.push((p.name.clone(), p.len())));
            v
        };
        for (name, len) in names {
            for idx in 0..len {
                let mut plus = branch.clone();
                plus.visit_params_mut(&mut |p| {
                    if p.name == name {
                        p.value[idx] += h;
                    }
                });
                let mut minus = branch.clone();
                minus.visit_params_mut(&mut |p| {
                    if p.name == name {
                        p.value[idx] -= h;
                    }
                });
                let fd = (loss(&plus, &input) - loss(&minus, &input)) / (2.0 * h);
                let mut analytic = 0.0;
                b.visit_params_mut(&mut |p| {
                    if p.name == name {
                        analytic = p.grad[idx];
                    }
                });
                let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1.0);
                assert!(rel < 1e-6, "{name}[{idx}]: {fd} vs {analytic}");
            }
        }
    }
}
