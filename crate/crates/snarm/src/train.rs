//! Training: focal losses, cyclic branch optimization with a continuously
//! trained navigator, consistent feature jittering, and feature-level
//! pseudo-anomaly synthesis that supplies the anomalous supervision the
//! losses need.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{self, PrototypeBank, ResidualGrid, ResidualKind};
use crate::decoder;
use crate::encoder::PatchFeatureGrid;
use crate::error::{Result, SnarmError};
use crate::grid::Grid2;
use crate::metrics::BinaryMask;
use crate::model::{residual_stage, SnarmModel, StageConfig};
use crate::ops::BilinearPlan;
use crate::param::Param;
use crate::seeding;
use crate::snmm::{self, DirectionalOutputs};

const PRED_CLAMP: f64 = 1e-7;

/// Loss and optimizer hyperparameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha_nav: f64,
    pub gamma_nav: f64,
    pub alpha_branch: f64,
    pub gamma_branch: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub cycle_length: usize,
    pub jitter_lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha_nav: 0.5,
            gamma_nav: 4.0,
            alpha_branch: 0.25,
            gamma_branch: 4.0,
            lr: 0.001,
            weight_decay: 0.05,
            cycle_length: 100,
            jitter_lambda: 30.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_nav > 0.0 && self.alpha_nav < 1.0)
            || !(self.alpha_branch > 0.0 && self.alpha_branch < 1.0)
        {
            return Err(SnarmError::config("focal alpha must lie in (0,1)"));
        }
        if self.gamma_nav < 0.0 || self.gamma_branch < 0.0 {
            return Err(SnarmError::config("focal gamma must be >= 0"));
        }
        if self.cycle_length == 0 {
            return Err(SnarmError::config("cycle length must be >= 1"));
        }
        if self.jitter_lambda < 0.0 {
            return Err(SnarmError::config("jitter lambda must be >= 0"));
        }
        Ok(())
    }
}

#[inline]
fn clamp_pred(m: f64) -> f64 {
    m.clamp(PRED_CLAMP, 1.0 - PRED_CLAMP)
}

/// Focal loss, summed over pixels. Predictions are clamped at 1e-7.
pub fn focal_loss(pred: &Grid2, y: &BinaryMask, alpha: f64, gamma: f64) -> Result<f64> {
    if pred.h != y.h || pred.w != y.w {
        return Err(SnarmError::shape(
            format!("{}x{}", pred.h, pred.w),
            format!("{}x{}", y.h, y.w),
        ));
    }
    let mut loss = 0.0;
    for (m, &pos) in pred.data.iter().zip(&y.data) {
        let m = clamp_pred(*m);
        if pos {
            loss -= alpha * (1.0 - m).powf(gamma) * m.ln();
        } else {
            loss -= (1.0 - alpha) * m.powf(gamma) * (1.0 - m).ln();
        }
    }
    Ok(loss)
}

/// dL/dpred of the focal loss. The clamp gate zeroes gradients of saturated
/// predictions.
pub fn focal_loss_grad(pred: &Grid2, y: &BinaryMask, alpha: f64, gamma: f64) -> Grid2 {
    let mut grad = Grid2::zeros(pred.h, pred.w);
    for ((g, m), &pos) in grad.data.iter_mut().zip(&pred.data).zip(&y.data) {
        let raw = *m;
        if raw <= PRED_CLAMP || raw >= 1.0 - PRED_CLAMP {
            continue;
        }
        let m = raw;
        if pos {
            *g = -alpha * (-gamma * (1.0 - m).powf(gamma - 1.0) * m.ln() + (1.0 - m).powf(gamma) / m);
        } else {
            *g = -(1.0 - alpha)
                * (gamma * m.powf(gamma - 1.0) * (1.0 - m).ln() - m.powf(gamma) / (1.0 - m));
        }
    }
    grad
}

/// Total loss of a training step: navigator focal on the upsampled Q plus the
/// mean focal of the active scale branch's four directional maps.
/// `branch_maps` is indexed by scale; only the active entry is read and it
/// must hold the four directional maps.
pub fn total_loss(
    nav_q_up: &Grid2,
    branch_maps: &[Vec<Grid2>],
    y: &BinaryMask,
    cfg: &LossConfig,
    active_branch: usize,
) -> Result<f64> {
    if active_branch >= branch_maps.len() {
        return Err(SnarmError::config(format!(
            "active branch {active_branch} out of range 0..{}",
            branch_maps.len()
        )));
    }
    let active = &branch_maps[active_branch];
    if active.len() != 4 {
        return Err(SnarmError::config(format!(
            "active branch must carry 4 directional maps, got {}",
            active.len()
        )));
    }
    let mut loss = focal_loss(nav_q_up, y, cfg.alpha_nav, cfg.gamma_nav)?;
    for m in active {
        loss += 0.25 * focal_loss(m, y, cfg.alpha_branch, cfg.gamma_branch)?;
    }
    Ok(loss)
}

/// Perturb a feature and its residual with the same standard-normal draw,
/// each scaled by lambda * ||v||_2 / dim.
pub fn consistent_jitter(
    f: &[f64],
    r: &[f64],
    lambda: f64,
    noise: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    debug_assert_eq!(f.len(), noise.len());
    debug_assert_eq!(r.len(), noise.len());
    let d = f.len() as f64;
    let f_scale = lambda * crate::ops::l2_norm(f) / d;
    let r_scale = lambda * crate::ops::l2_norm(r) / d;
    let f_out = f
        .iter()
        .zip(noise)
        .map(|(v, e)| v + f_scale * e)
        .collect();
    let r_out = r
        .iter()
        .zip(noise)
        .map(|(v, e)| v + r_scale * e)
        .collect();
    (f_out, r_out)
}

/// One training example: fused features plus a pixel-level label mask.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: PatchFeatureGrid,
    pub mask: BinaryMask,
    pub is_synthetic: bool,
}

impl TrainSample {
    pub fn normal(features: PatchFeatureGrid) -> Self {
        let (h, w) = (features.geometry.image_h, features.geometry.image_w);
        TrainSample {
            features,
            mask: BinaryMask::zeros(h, w),
            is_synthetic: false,
        }
    }
}

/// Replace a random elliptical or rectangular block of patches with donor
/// features (or scaled noise when no donor is available) and mark the exact
/// pixel footprint in the label mask. Region size targets 1-20% of the image.
pub fn synthesize_anomaly(
    normal: &TrainSample,
    donors: &[&PatchFeatureGrid],
    seed: u64,
) -> Result<TrainSample> {
    if normal.mask.any() {
        return Err(SnarmError::data(
            "synthesize_anomaly needs an anomaly-free sample",
        ));
    }
    let mut rng = seeding::substream(seed, "synth-anomaly", 0);
    let grid = normal.features.grid();
    let (gh, gw) = (grid.h, grid.w);
    let m = gh * gw;
    let max_cells = ((0.20 * m as f64).floor() as usize).max(1);
    let min_cells = ((0.01 * m as f64).round() as usize).max(1);
    let target = rng.gen_range(min_cells..=max_cells.max(min_cells));

    let cells: Vec<(usize, usize)> = if rng.gen_bool(0.5) {
        // rectangle
        let rh = rng.gen_range(1..=target.min(gh));
        let rw = ((target + rh - 1) / rh).clamp(1, gw).min((max_cells / rh).max(1));
        let i0 = rng.gen_range(0..=gh - rh);
        let j0 = rng.gen_range(0..=gw - rw);
        (i0..i0 + rh)
            .flat_map(|i| (j0..j0 + rw).map(move |j| (i, j)))
            .collect()
    } else {
        // ellipse around a random center; shrink until within the area cap
        let ci = rng.gen_range(0..gh) as f64;
        let cj = rng.gen_range(0..gw) as f64;
        let aspect: f64 = rng.gen_range(0.5..2.0);
        let mut ra = (target as f64 / std::f64::consts::PI * aspect).sqrt().max(0.5);
        let mut rb = (target as f64 / (std::f64::consts::PI * ra)).max(0.5);
        loop {
            let mut picked = Vec::new();
            for i in 0..gh {
                for j in 0..gw {
                    let di = (i as f64 - ci) / ra;
                    let dj = (j as f64 - cj) / rb;
                    if di * di + dj * dj <= 1.0 {
                        picked.push((i, j));
                    }
                }
            }
            if picked.len() <= max_cells && !picked.is_empty() {
                break picked;
            }
            if picked.is_empty() {
                break vec![(ci as usize, cj as usize)];
            }
            ra *= 0.85;
            rb *= 0.85;
        }
    };

    let mut features = normal.features.clone();
    let dim = grid.c;
    let donor = if donors.is_empty() || rng.gen_bool(0.5) {
        None
    } else {
        Some(donors[rng.gen_range(0..donors.len())])
    };
    let mut mask = BinaryMask::zeros(normal.mask.h, normal.mask.w);
    for &(i, j) in &cells {
        let cell = features.grid.cell_mut(i, j);
        match donor {
            Some(d) if d.grid().h == gh && d.grid().w == gw && d.grid().c == dim => {
                cell.copy_from_slice(d.grid().cell(i, j));
            }
            _ => {
                let norm = crate::ops::l2_norm(cell);
                // sized to the feature scale so synthetic residuals stay in
                // the regime real defects produce
                let scale = 0.5 * (norm + 0.1) / (dim as f64).sqrt();
                for v in cell.iter_mut() {
                    *v += scale * seeding::normal(&mut rng);
                }
            }
        }
        let (r0, r1, c0, c1) = features.geometry.rect(i, j);
        for pi in r0..r1 {
            for pj in c0..c1 {
                mask.data[pi * mask.w + pj] = true;
            }
        }
    }
    Ok(TrainSample {
        features,
        mask,
        is_synthetic: true,
    })
}

/// Adam with decoupled weight decay; per-tensor state keyed by name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub slots: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            slots: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, p: &mut Param) {
        let slot = self.slots.entry(p.name.clone()).or_insert_with(|| AdamState {
            step: 0,
            m: vec![0.0; p.len()],
            v: vec![0.0; p.len()],
        });
        slot.step += 1;
        let bc1 = 1.0 - self.beta1.powi(slot.step as i32);
        let bc2 = 1.0 - self.beta2.powi(slot.step as i32);
        for i in 0..p.len() {
            let g = p.grad[i];
            slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
            slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = slot.m[i] / bc1;
            let vhat = slot.v[i] / bc2;
            p.value[i] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p.value[i]);
        }
    }
}

/// Everything the trainer needs beyond the model and data.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub loss: LossConfig,
    pub stage: StageConfig,
    pub cycles: usize,
    /// When true the SNMM updates only during the first branch segment of
    /// each cycle instead of continuously.
    pub snmm_cyclic: bool,
    pub seed: u64,
}

/// Loss milestones over training (step, eval loss). Step 0 is recorded before
/// the first update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: usize,
    pub milestones: Vec<(usize, f64)>,
}

impl TrainReport {
    pub fn loss_at(&self, step: usize) -> Option<f64> {
        self.milestones
            .iter()
            .find(|(s, _)| *s == step)
            .map(|(_, l)| *l)
    }

    pub fn initial_loss(&self) -> f64 {
        self.milestones.first().map(|(_, l)| *l).unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.milestones.last().map(|(_, l)| *l).unwrap_or(f64::NAN)
    }
}

/// Drives cyclic optimization: branches take K-step segments in the fixed
/// rate order while the navigator (and by default the SNMM) trains at every
/// step. Holds the precomputed inter-residuals of every sample.
pub struct Trainer<'a> {
    model: &'a mut SnarmModel,
    samples: &'a [TrainSample],
    inters: Vec<ResidualGrid>,
    opts: TrainOptions,
    adam: Adam,
    plan: BilinearPlan,
    image_h: usize,
    image_w: usize,
    global_step: usize,
    order: Vec<usize>,
}

/// Inter-residual grids for a sample set against one bank.
pub fn compute_inters(
    samples: &[TrainSample],
    bank: &PrototypeBank,
    theta: u8,
    topk: usize,
) -> Result<Vec<ResidualGrid>> {
    samples
        .iter()
        .map(|s| bank::compute_inter_grid(&s.features, bank, theta, topk))
        .collect()
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: &'a mut SnarmModel,
        samples: &'a [TrainSample],
        bank: &PrototypeBank,
        opts: TrainOptions,
    ) -> Result<Self> {
        let inters = compute_inters(samples, bank, opts.stage.theta, opts.stage.topk)?;
        Trainer::with_inters(model, samples, inters, opts)
    }

    /// Build the trainer from precomputed inter-residuals (needed when
    /// samples match against per-category banks).
    pub fn with_inters(
        model: &'a mut SnarmModel,
        samples: &'a [TrainSample],
        inters: Vec<ResidualGrid>,
        opts: TrainOptions,
    ) -> Result<Self> {
        opts.loss.validate()?;
        let Some(first) = samples.first() else {
            return Err(SnarmError::data("training needs at least one sample"));
        };
        if inters.len() != samples.len() {
            return Err(SnarmError::data("one inter-residual grid per sample required"));
        }
        let (gh, gw) = (first.features.grid().h, first.features.grid().w);
        let (ih, iw) = (first.mask.h, first.mask.w);
        for s in samples {
            if s.features.grid().h != gh
                || s.features.grid().w != gw
                || s.mask.h != ih
                || s.mask.w != iw
            {
                return Err(SnarmError::data("training samples differ in shape"));
            }
        }
        let adam = Adam::new(opts.loss.lr, opts.loss.weight_decay);
        Ok(Trainer {
            model,
            samples,
            inters,
            opts,
            adam,
            plan: BilinearPlan::new(gh, gw, ih, iw),
            image_h: ih,
            image_w: iw,
            global_step: 0,
            order: Vec::new(),
        })
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn restore_optimizer(&mut self, adam: Adam) {
        self.adam = adam;
    }

    fn next_sample(&mut self) -> usize {
        let n = self.samples.len();
        let pos = self.global_step % n;
        if pos == 0 {
            let epoch = (self.global_step / n) as u64;
            let mut rng = seeding::substream(self.opts.seed, "sample-order", epoch);
            self.order = (0..n).collect();
            self.order.shuffle(&mut rng);
        }
        self.order[pos]
    }

    /// One optimization step against the given branch. Returns the loss.
    pub fn step(&mut self, active_branch: usize) -> Result<f64> {
        if active_branch >= 4 {
            return Err(SnarmError::config(format!(
                "active branch {active_branch} out of range 0..4"
            )));
        }
        let idx = self.next_sample();
        let sample = &self.samples[idx];
        let lambda = self.opts.loss.jitter_lambda;

        // consistent jittering of features and inter-residuals
        let (features, inter) = if lambda > 0.0 {
            let mut rng = seeding::substream(self.opts.seed, "jitter", self.global_step as u64);
            let src_f = sample.features.grid();
            let src_r = &self.inters[idx].grid;
            let mut jf = src_f.clone();
            let mut jr = src_r.clone();
            let dim = src_f.c;
            let mut noise = vec![0.0; dim];
            for cell in 0..src_f.cells() {
                for e in noise.iter_mut() {
                    *e = seeding::normal(&mut rng);
                }
                let (f_out, r_out) = consistent_jitter(
                    &src_f.data[cell * dim..(cell + 1) * dim],
                    &src_r.data[cell * dim..(cell + 1) * dim],
                    lambda,
                    &noise,
                );
                jf.data[cell * dim..(cell + 1) * dim].copy_from_slice(&f_out);
                jr.data[cell * dim..(cell + 1) * dim].copy_from_slice(&r_out);
            }
            (
                PatchFeatureGrid {
                    grid: jf,
                    geometry: sample.features.geometry,
                },
                ResidualGrid {
                    grid: jr,
                    theta: self.inters[idx].theta,
                    kind: ResidualKind::Inter,
                },
            )
        } else {
            (sample.features.clone(), self.inters[idx].clone())
        };

        let (wm, hybrid) = residual_stage(&features, &inter, &self.model.navigator, &self.opts.stage)?;
        let (outs, snmm_cache) =
            snmm::snmm_forward(&hybrid, &wm, self.opts.stage.keep_ratio, &self.model.snmm)?;

        let grids = outs.as_array();
        let mut maps = Vec::with_capacity(4);
        let mut caches = Vec::with_capacity(4);
        for (dir_idx, grid) in grids.iter().enumerate() {
            let branch = self.model.decoder.branch(active_branch, dir_idx);
            let (m, cache) = decoder::branch_forward(grid, branch, &self.plan);
            maps.push(m);
            caches.push(cache);
        }
        let q_up = self.plan.apply2(&wm.q);
        let cfgl = &self.opts.loss;
        let mut loss = focal_loss(&q_up, &sample.mask, cfgl.alpha_nav, cfgl.gamma_nav)?;
        for m in &maps {
            loss += 0.25 * focal_loss(m, &sample.mask, cfgl.alpha_branch, cfgl.gamma_branch)?;
        }
        if !loss.is_finite() {
            return Err(SnarmError::numeric(format!(
                "non-finite loss at step {} (branch {active_branch}, sample {idx})",
                self.global_step
            )));
        }

        self.model.zero_grads();

        // navigator gradient: focal -> upsample -> sigmoid -> 1x1 conv
        let dq_up = focal_loss_grad(&q_up, &sample.mask, cfgl.alpha_nav, cfgl.gamma_nav);
        let dq = self.plan.backward2(&dq_up);
        let rg = &inter.grid;
        for cell in 0..rg.cells() {
            let q = wm.q.data[cell];
            let dz = dq.data[cell] * q * (1.0 - q);
            if dz == 0.0 {
                continue;
            }
            self.model.navigator.bias.grad[0] += dz;
            let r = &rg.data[cell * rg.c..(cell + 1) * rg.c];
            for (slot, rv) in self.model.navigator.weight.grad.iter_mut().zip(r) {
                *slot += dz * rv;
            }
        }

        // branch gradients back to the directional outputs
        let mut d_outs = Vec::with_capacity(4);
        for (dir_idx, (m, cache)) in maps.iter().zip(&caches).enumerate() {
            let mut dm = focal_loss_grad(m, &sample.mask, cfgl.alpha_branch, cfgl.gamma_branch);
            for g in dm.data.iter_mut() {
                *g *= 0.25;
            }
            let branch = self.model.decoder.branch_mut(active_branch, dir_idx);
            d_outs.push(decoder::branch_backward(
                &dm,
                grids[dir_idx],
                cache,
                branch,
                &self.plan,
            ));
        }
        let d_dir = DirectionalOutputs {
            o_right: d_outs[0].clone(),
            o_left: d_outs[1].clone(),
            o_down: d_outs[2].clone(),
            o_up: d_outs[3].clone(),
        };
        snmm::snmm_backward(&d_dir, &snmm_cache, &mut self.model.snmm);

        // update: navigator always, SNMM per policy, only the active branch
        let adam = &mut self.adam;
        self.model.navigator.visit_params_mut(&mut |p| adam.step(p));
        let snmm_trains = !self.opts.snmm_cyclic || active_branch == 0;
        if snmm_trains {
            self.model.snmm.visit_params_mut(&mut |p| adam.step(p));
        }
        for dir_idx in 0..4 {
            self.model
                .decoder
                .branch_mut(active_branch, dir_idx)
                .visit_params_mut(&mut |p| adam.step(p));
        }

        self.global_step += 1;
        Ok(loss)
    }

    /// K steps against one branch, others frozen.
    pub fn segment(&mut self, active_branch: usize, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step(active_branch)?;
        }
        Ok(())
    }

    /// Deterministic evaluation loss over all samples: navigator term plus
    /// the branch term averaged over the four scales. No jittering.
    pub fn eval_loss(&self) -> Result<f64> {
        let mut total = 0.0;
        for (idx, sample) in self.samples.iter().enumerate() {
            let (wm, hybrid) = residual_stage(
                &sample.features,
                &self.inters[idx],
                &self.model.navigator,
                &self.opts.stage,
            )?;
            let (outs, _) =
                snmm::snmm_forward(&hybrid, &wm, self.opts.stage.keep_ratio, &self.model.snmm)?;
            let q_up = self.plan.apply2(&wm.q);
            let cfgl = &self.opts.loss;
            let mut loss = focal_loss(&q_up, &sample.mask, cfgl.alpha_nav, cfgl.gamma_nav)?;
            let grids = outs.as_array();
            let mut branch_term = 0.0;
            for rate_idx in 0..4 {
                for (dir_idx, grid) in grids.iter().enumerate() {
                    let branch = self.model.decoder.branch(rate_idx, dir_idx);
                    let (m, _) = decoder::branch_forward(grid, branch, &self.plan);
                    branch_term +=
                        0.25 * focal_loss(&m, &sample.mask, cfgl.alpha_branch, cfgl.gamma_branch)?;
                }
            }
            loss += branch_term / 4.0;
            total += loss;
        }
        Ok(total / self.samples.len() as f64)
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.image_h, self.image_w)
    }
}

/// Full cyclic schedule: `cycles` passes over the four branches, K steps
/// each. Records eval-loss milestones at step 0, step 400 (when reached) and
/// the final step.
pub fn cyclic_train(
    model: &mut SnarmModel,
    samples: &[TrainSample],
    bank: &PrototypeBank,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    let inters = compute_inters(samples, bank, opts.stage.theta, opts.stage.topk)?;
    cyclic_train_with(model, samples, inters, opts).map(|(report, _)| report)
}

/// Cyclic schedule over precomputed inter-residuals; also returns the final
/// optimizer state for checkpointing.
pub fn cyclic_train_with(
    model: &mut SnarmModel,
    samples: &[TrainSample],
    inters: Vec<ResidualGrid>,
    opts: &TrainOptions,
) -> Result<(TrainReport, Adam)> {
    let k = opts.loss.cycle_length;
    let total = opts.cycles * 4 * k;
    let mut trainer = Trainer::with_inters(model, samples, inters, opts.clone())?;
    let mut milestones = vec![(0usize, trainer.eval_loss()?)];
    for cycle in 0..opts.cycles {
        for branch in 0..4 {
            trainer.segment(branch, k)?;
            let done = (cycle * 4 + branch + 1) * k;
            let crossed_400 = done >= 400 && done - k < 400;
            if crossed_400 && done != total {
                milestones.push((done, trainer.eval_loss()?));
            }
        }
    }
    milestones.push((total, trainer.eval_loss()?));
    let adam = trainer.optimizer().clone();
    Ok((
        TrainReport {
            steps: total,
            milestones,
        },
        adam,
    ))
}

/// Hash of all parameter bytes, for freeze-contract checks.
pub fn params_fingerprint(model: &mut SnarmModel, prefix: &str) -> u64 {
    use std::collections::hash_map::DefaultHasher;
    use std::hash::{Hash, Hasher};
    let mut hasher = DefaultHasher::new();
    model.visit_params_mut(&mut |p| {
        if p.name.starts_with(prefix) {
            p.name.hash(&mut hasher);
            for v in &p.value {
                v.to_bits().hash(&mut hasher);
            }
        }
    });
    hasher.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PatchGeometry;
    use crate::grid::Grid3;
    use crate::model::ResidualMode;

    fn mask_of(h: usize, w: usize, ones: &[usize]) -> BinaryMask {
        let mut m = BinaryMask::zeros(h, w);
        for &i in ones {
            m.data[i] = true;
        }
        m
    }

    #[test]
    fn focal_perfect_prediction_is_tiny() {
        let y = mask_of(1, 2, &[0]);
        let pred = Grid2::from_vec(1, 2, vec![1.0 - 1e-7, 1e-7]).unwrap();
        let loss = focal_loss(&pred, &y, 0.5, 4.0).unwrap();
        assert!(loss < 2e-5, "{loss}");
    }

    #[test]
    fn focal_derived_scalar_case() {
        // M=0.5, Y=1, alpha=0.25, gamma=4: 0.25 * 0.0625 * ln 2
        let y = mask_of(1, 1, &[0]);
        let pred = Grid2::from_vec(1, 1, vec![0.5]).unwrap();
        let loss = focal_loss(&pred, &y, 0.25, 4.0).unwrap();
        let expect = 0.25 * 0.0625 * 2f64.ln();
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
        assert!((expect - 0.01083).abs() < 1e-5);
    }

    #[test]
    fn focal_gamma_zero_is_alpha_weighted_bce() {
        let y = mask_of(2, 2, &[0, 3]);
        let pred = Grid2::from_vec(2, 2, vec![0.7, 0.2, 0.4, 0.9]).unwrap();
        let loss = focal_loss(&pred, &y, 0.5, 0.0).unwrap();
        // independent BCE accumulation
        let mut bce = 0.0;
        for (m, &pos) in pred.data.iter().zip(&y.data) {
            bce -= if pos { m.ln() } else { (1.0 - m).ln() };
        }
        assert!((loss - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_rejects_shape_mismatch() {
        let y = mask_of(1, 2, &[]);
        let pred = Grid2::zeros(2, 2);
        assert!(focal_loss(&pred, &y, 0.5, 2.0).is_err());
    }

    #[test]
    fn focal_loss_nonnegative_random() {
        let mut rng = seeding::substream(8, "focal-prop", 0);
        for _ in 0..50 {
            let pred = Grid2::from_vec(2, 3, (0..6).map(|_| rng.gen::<f64>()).collect()).unwrap();
            let y = mask_of(2, 3, &[(rng.gen::<u64>() % 6) as usize]);
            let loss = focal_loss(&pred, &y, 0.25, 4.0).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn focal_grad_matches_finite_differences() {
        let y = mask_of(2, 2, &[1, 2]);
        let pred = Grid2::from_vec(2, 2, vec![0.3, 0.6, 0.45, 0.8]).unwrap();
        for (alpha, gamma) in [(0.25, 4.0), (0.5, 4.0), (0.5, 0.0), (0.3, 2.0)] {
            let grad = focal_loss_grad(&pred, &y, alpha, gamma);
            let h = 1e-6;
            for i in 0..4 {
                let mut plus = pred.clone();
                plus.data[i] += h;
                let mut minus = pred.clone();
                minus.data[i] -= h;
                let fd = (focal_loss(&plus, &y, alpha, gamma).unwrap()
                    - focal_loss(&minus, &y, alpha, gamma).unwrap())
                    / (2.0 * h);
                let rel = (fd - grad.data[i]).abs() / fd.abs().max(grad.data[i].abs()).max(1.0);
                assert!(rel < 1e-4, "a={alpha} g={gamma} i={i}: {fd} vs {}", grad.data[i]);
            }
        }
    }

    #[test]
    fn total_loss_composition() {
        let y = mask_of(1, 2, &[0]);
        let q = Grid2::from_vec(1, 2, vec![0.6, 0.3]).unwrap();
        let m = Grid2::from_vec(1, 2, vec![0.7, 0.2]).unwrap();
        let cfg = LossConfig::default();
        let maps = vec![
            vec![m.clone(), m.clone(), m.clone(), m.clone()],
            vec![],
            vec![],
            vec![],
        ];
        let got = total_loss(&q, &maps, &y, &cfg, 0).unwrap();
        let expect = focal_loss(&q, &y, 0.5, 4.0).unwrap() + focal_loss(&m, &y, 0.25, 4.0).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!(total_loss(&q, &maps, &y, &cfg, 4).is_err());
        assert!(total_loss(&q, &maps, &y, &cfg, 1).is_err());
    }

    #[test]
    fn total_loss_perfect_predictions_near_zero() {
        let y = mask_of(1, 2, &[1]);
        let q = Grid2::from_vec(1, 2, vec![1e-7, 1.0 - 1e-7]).unwrap();
        let maps = vec![vec![q.clone(), q.clone(), q.clone(), q.clone()]; 4];
        let got = total_loss(&q, &maps, &y, &LossConfig::default(), 2).unwrap();
        assert!(got < 1e-4);
    }

    #[test]
    fn jitter_examples() {
        // lambda = 0: untouched
        let (f, r) = consistent_jitter(&[1.0, 2.0], &[0.5, 0.25], 0.0, &[1.0, -1.0]);
        assert_eq!(f, vec![1.0, 2.0]);
        assert_eq!(r, vec![0.5, 0.25]);
        // f=(3,4), d=2, lambda=1, eps=(1,0): norm 5, scale 2.5
        let (f, _) = consistent_jitter(&[3.0, 4.0], &[0.0, 0.0], 1.0, &[1.0, 0.0]);
        assert_eq!(f, vec![5.5, 4.0]);
        // zero vectors stay zero
        let (f, r) = consistent_jitter(&[0.0, 0.0], &[0.0, 0.0], 5.0, &[1.0, 1.0]);
        assert_eq!(f, vec![0.0, 0.0]);
        assert_eq!(r, vec![0.0, 0.0]);
    }

    #[test]
    fn jitter_same_epsilon_for_both() {
        let f = [1.5, -2.0, 0.75];
        let r = [0.5, 1.0, 2.0];
        let noise = [0.3, -1.2, 0.9];
        let lambda = 2.0;
        let (jf, jr) = consistent_jitter(&f, &r, lambda, &noise);
        let d = f.len() as f64;
        let fs = lambda * crate::ops::l2_norm(&f) / d;
        let rs = lambda * crate::ops::l2_norm(&r) / d;
        for i in 0..3 {
            let ef = (jf[i] - f[i]) / fs;
            let er = (jr[i] - r[i]) / rs;
            assert!((ef - er).abs() < 1e-12);
            assert!((ef - noise[i]).abs() < 1e-12);
        }
    }

    fn toy_normal_sample(seed: u64, base: f64) -> TrainSample {
        let mut rng = seeding::substream(seed, "toy-sample", 0);
        let data: Vec<f64> = (0..4 * 4 * 3)
            .map(|_| base + 0.05 * seeding::normal(&mut rng))
            .collect();
        TrainSample::normal(PatchFeatureGrid {
            grid: Grid3::from_vec(4, 4, 3, data).unwrap(),
            geometry: PatchGeometry {
                image_h: 16,
                image_w: 16,
                grid_h: 4,
                grid_w: 4,
            },
        })
    }

    #[test]
    fn synthesize_always_marks_at_least_one_patch() {
        let normal = toy_normal_sample(1, 0.2);
        for seed in 0..30 {
            let syn = synthesize_anomaly(&normal, &[], seed).unwrap();
            assert!(syn.mask.any(), "seed {seed}");
            assert!(syn.is_synthetic);
        }
    }

    #[test]
    fn synthesize_mask_footprint_matches_changed_patches() {
        let normal = toy_normal_sample(2, 0.1);
        let syn = synthesize_anomaly(&normal, &[], 7).unwrap();
        let geo = normal.features.geometry;
        for i in 0..4 {
            for j in 0..4 {
                let changed = syn.features.grid().cell(i, j) != normal.features.grid().cell(i, j);
                let (r0, r1, c0, c1) = geo.rect(i, j);
                let masked = syn.mask.at(r0, c0);
                assert_eq!(changed, masked, "cell ({i},{j})");
                // footprint is uniform over the patch rectangle
                for pi in r0..r1 {
                    for pj in c0..c1 {
                        assert_eq!(syn.mask.at(pi, pj), masked);
                    }
                }
            }
        }
    }

    #[test]
    fn synthesize_rejects_anomalous_input() {
        let mut s = toy_normal_sample(3, 0.3);
        s.mask.data[0] = true;
        assert!(synthesize_anomaly(&s, &[], 0).is_err());
    }

    #[test]
    fn synthetic_residuals_dominate_clean_regions() {
        // Monte-Carlo: perturbed-region mean inter-residual above the clean
        // mean on >= 95% of 200 draws, bank built on clean data.
        let clean: Vec<TrainSample> = (0..6).map(|i| toy_normal_sample(i, 0.2)).collect();
        let grids: Vec<PatchFeatureGrid> = clean.iter().map(|s| s.features.clone()).collect();
        let pool = bank::build_raw_pool(&grids).unwrap();
        let bank = bank::coreset_select(&pool, 48, 11).unwrap();
        let mut wins = 0;
        let draws = 200;
        for seed in 0..draws {
            let syn = synthesize_anomaly(&clean[(seed % 6) as usize], &[], 1000 + seed).unwrap();
            let rg = bank::compute_inter_grid(&syn.features, &bank, 2, 1).unwrap();
            let geo = syn.features.geometry;
            let mut dirty_sum = 0.0;
            let mut dirty_n = 0usize;
            let mut clean_sum = 0.0;
            let mut clean_n = 0usize;
            for i in 0..4 {
                for j in 0..4 {
                    let (r0, _, c0, _) = geo.rect(i, j);
                    let mean: f64 =
                        rg.grid.cell(i, j).iter().sum::<f64>() / rg.grid.c as f64;
                    if syn.mask.at(r0, c0) {
                        dirty_sum += mean;
                        dirty_n += 1;
                    } else {
                        clean_sum += mean;
                        clean_n += 1;
                    }
                }
            }
            if dirty_n > 0 && (clean_n == 0 || dirty_sum / dirty_n as f64 > clean_sum / clean_n as f64)
            {
                wins += 1;
            }
        }
        assert!(
            wins as f64 >= 0.95 * draws as f64,
            "only {wins}/{draws} draws dominated"
        );
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = Param::new("q", vec![5.0, -3.0]);
        let mut adam = Adam::new(0.05, 0.0);
        for _ in 0..500 {
            p.zero_grad();
            for i in 0..2 {
                p.grad[i] = 2.0 * p.value[i];
            }
            adam.step(&mut p);
        }
        assert!(p.value.iter().all(|v| v.abs() < 1e-2), "{:?}", p.value);
    }

    fn trainer_fixture(
        samples: &[TrainSample],
    ) -> (SnarmModel, PrototypeBank, TrainOptions) {
        let grids: Vec<PatchFeatureGrid> = samples
            .iter()
            .filter(|s| !s.is_synthetic)
            .map(|s| s.features.clone())
            .collect();
        let pool = bank::build_raw_pool(&grids).unwrap();
        let bank = bank::coreset_select(&pool, 24.min(pool.len()), 5).unwrap();
        let model = SnarmModel::init(3, 4, 2, 21);
        let opts = TrainOptions {
            loss: LossConfig {
                cycle_length: 2,
                jitter_lambda: 0.1,
                ..Default::default()
            },
            stage: StageConfig {
                theta: 2,
                topk: 1,
                intra_topk: 1,
                trusted_percent: 75.0,
                keep_ratio: 1.0,
                residual_mode: ResidualMode::Hybrid,
            },
            cycles: 1,
            snmm_cyclic: false,
            seed: 3,
        };
        (model, bank, opts)
    }

    fn training_set() -> Vec<TrainSample> {
        let clean: Vec<TrainSample> = (0..4).map(|i| toy_normal_sample(10 + i, 0.25)).collect();
        let mut samples = clean.clone();
        for (i, c) in clean.iter().enumerate() {
            samples.push(synthesize_anomaly(c, &[], 500 + i as u64).unwrap());
        }
        samples
    }

    #[test]
    fn segment_freezes_inactive_branches() {
        let samples = training_set();
        let (mut model, bank, opts) = trainer_fixture(&samples);
        let before: Vec<u64> = (0..4)
            .map(|r| params_fingerprint(&mut model, &format!("dec.r{}", decoder::DILATION_RATES[r])))
            .collect();
        let nav_before = params_fingerprint(&mut model, "nav.");
        let snmm_before = params_fingerprint(&mut model, "snmm.");
        {
            let mut trainer = Trainer::new(&mut model, &samples, &bank, opts).unwrap();
            trainer.segment(1, 3).unwrap();
        }
        let after: Vec<u64> = (0..4)
            .map(|r| params_fingerprint(&mut model, &format!("dec.r{}", decoder::DILATION_RATES[r])))
            .collect();
        assert_eq!(before[0], after[0], "branch 0 should be frozen");
        assert_ne!(before[1], after[1], "active branch must move");
        assert_eq!(before[2], after[2]);
        assert_eq!(before[3], after[3]);
        assert_ne!(nav_before, params_fingerprint(&mut model, "nav."));
        assert_ne!(snmm_before, params_fingerprint(&mut model, "snmm."));
    }

    #[test]
    fn navigator_moves_every_segment() {
        let samples = training_set();
        let (mut model, bank, opts) = trainer_fixture(&samples);
        let mut hashes = Vec::new();
        {
            let mut trainer = Trainer::new(&mut model, &samples, &bank, opts).unwrap();
            for branch in 0..4 {
                trainer.segment(branch, 2).unwrap();
                hashes.push(trainer.global_step());
            }
        }
        assert_eq!(hashes, vec![2, 4, 6, 8]);
    }

    #[test]
    fn cyclic_train_reduces_loss_on_toy_set() {
        let samples = training_set();
        let (mut model, bank, mut opts) = trainer_fixture(&samples);
        opts.loss.cycle_length = 20;
        opts.loss.lr = 0.01;
        let report = cyclic_train(&mut model, &samples, &bank, &opts).unwrap();
        let first = report.initial_loss();
        let last = report.final_loss();
        assert!(last < first, "loss did not decrease: {first} -> {last}");
        assert_eq!(report.steps, 80);
    }
}
