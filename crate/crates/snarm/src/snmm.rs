//! Self-Navigated Mamba Module: hybrid residuals are embedded into tokens,
//! the waypoint map picks which tokens enter the scan, and two stacked blocks
//! run a selective state-space recurrence in four directions with a 3x3
//! convolution before each scan.
//!
//! The recurrence uses input-dependent discretization: per step,
//! delta = softplus(w_d . x + b_d), Abar = exp(delta * A) with A = -exp(a_log),
//! h = Abar (*) h_prev + (delta * B(x)) outer x, y = C(x) . h + D (*) x.
//! Forward passes cache every step so the backward pass is exact
//! backpropagation through time.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bank::{ResidualGrid, ResidualKind};
use crate::error::{Result, SnarmError};
use crate::grid::Grid3;
use crate::navigator::WaypointMap;
use crate::ops::{matvec, sigmoid, softplus, softplus_inv, Conv2d, PadMode};
use crate::param::Param;
use crate::seeding;

/// Scan directions in their fixed order (also the decoder's branch order).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Right,
    Left,
    Down,
    Up,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::Right,
        Direction::Left,
        Direction::Down,
        Direction::Up,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Direction::Right => "right",
            Direction::Left => "left",
            Direction::Down => "down",
            Direction::Up => "up",
        }
    }

    /// Full raster order of the direction over an h x w grid.
    /// Right: rows top-down, left-to-right. Left: rows top-down,
    /// right-to-left. Down: columns left-to-right, top-down. Up: columns
    /// left-to-right, bottom-up. Horizontal/vertical flips therefore swap
    /// Right/Left and Down/Up.
    pub fn raster(self, h: usize, w: usize) -> Vec<usize> {
        let mut order = Vec::with_capacity(h * w);
        match self {
            Direction::Right => {
                for i in 0..h {
                    for j in 0..w {
                        order.push(i * w + j);
                    }
                }
            }
            Direction::Left => {
                for i in 0..h {
                    for j in (0..w).rev() {
                        order.push(i * w + j);
                    }
                }
            }
            Direction::Down => {
                for j in 0..w {
                    for i in 0..h {
                        order.push(i * w + j);
                    }
                }
            }
            Direction::Up => {
                for j in 0..w {
                    for i in (0..h).rev() {
                        order.push(i * w + j);
                    }
                }
            }
        }
        order
    }
}

/// Embedded tokens plus the scan-selection mask.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Grid3,
    pub mask: Vec<bool>,
}

impl TokenGrid {
    pub fn selected_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Selective-scan parameters for one directional unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SsmParams {
    pub dim: usize,
    pub state_dim: usize,
    pub a_log: Param,
    pub delta_w: Param,
    pub delta_b: Param,
    pub b_w: Param,
    pub b_b: Param,
    pub c_w: Param,
    pub c_b: Param,
    pub d_skip: Param,
}

impl SsmParams {
    pub fn init(prefix: &str, dim: usize, state_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let rand_vec = |rng: &mut ChaCha8Rng, len: usize, s: f64| -> Vec<f64> {
            (0..len).map(|_| seeding::normal(rng) * s).collect()
        };
        SsmParams {
            dim,
            state_dim,
            // a_log = 0 -> A = -1 everywhere
            a_log: Param::zeros(format!("{prefix}.a_log"), dim * state_dim),
            delta_w: Param::new(format!("{prefix}.delta_w"), rand_vec(rng, dim, 0.01)),
            // softplus(bias) = 1 so Abar starts in (0,1) with unit step
            delta_b: Param::new(format!("{prefix}.delta_b"), vec![softplus_inv(1.0)]),
            b_w: Param::new(format!("{prefix}.b_w"), rand_vec(rng, state_dim * dim, scale)),
            b_b: Param::zeros(format!("{prefix}.b_b"), state_dim),
            c_w: Param::new(format!("{prefix}.c_w"), rand_vec(rng, state_dim * dim, scale)),
            c_b: Param::zeros(format!("{prefix}.c_b"), state_dim),
            d_skip: Param::new(format!("{prefix}.d_skip"), vec![1.0; dim]),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.a_log);
        f(&mut self.delta_w);
        f(&mut self.delta_b);
        f(&mut self.b_w);
        f(&mut self.b_b);
        f(&mut self.c_w);
        f(&mut self.c_b);
        f(&mut self.d_skip);
    }
}

/// Per-step intermediates kept for backpropagation through time.
#[derive(Debug, Clone)]
pub struct ScanCache {
    pub t_len: usize,
    dim: usize,
    state_dim: usize,
    xs: Vec<f64>,
    deltas_raw: Vec<f64>,
    deltas: Vec<f64>,
    bs: Vec<f64>,
    cs: Vec<f64>,
    abars: Vec<f64>,
    hs: Vec<f64>,
}

/// Run the recurrence over a compacted token sequence (`xs` is t_len x dim).
pub fn selective_scan(xs: &[f64], t_len: usize, params: &SsmParams) -> (Vec<f64>, ScanCache) {
    let d = params.dim;
    let n = params.state_dim;
    debug_assert_eq!(xs.len(), t_len * d);
    let mut ys = vec![0.0; t_len * d];
    let mut cache = ScanCache {
        t_len,
        dim: d,
        state_dim: n,
        xs: xs.to_vec(),
        deltas_raw: vec![0.0; t_len],
        deltas: vec![0.0; t_len],
        bs: vec![0.0; t_len * n],
        cs: vec![0.0; t_len * n],
        abars: vec![0.0; t_len * d * n],
        hs: vec![0.0; t_len * d * n],
    };
    let mut h = vec![0.0; d * n];
    let mut b_t = vec![0.0; n];
    let mut c_t = vec![0.0; n];
    for t in 0..t_len {
        let x = &xs[t * d..(t + 1) * d];
        let mut delta_raw = params.delta_b.value[0];
        for (wv, xv) in params.delta_w.value.iter().zip(x) {
            delta_raw += wv * xv;
        }
        let delta = softplus(delta_raw);
        matvec(&params.b_w.value, &params.b_b.value, x, &mut b_t);
        matvec(&params.c_w.value, &params.c_b.value, x, &mut c_t);
        cache.deltas_raw[t] = delta_raw;
        cache.deltas[t] = delta;
        cache.bs[t * n..(t + 1) * n].copy_from_slice(&b_t);
        cache.cs[t * n..(t + 1) * n].copy_from_slice(&c_t);
        let abar_slot = &mut cache.abars[t * d * n..(t + 1) * d * n];
        for p in 0..d {
            let xp = x[p];
            let y_slot = &mut ys[t * d + p];
            let mut acc = params.d_skip.value[p] * xp;
            for i in 0..n {
                let a = -params.a_log.value[p * n + i].exp();
                let abar = (delta * a).exp();
                abar_slot[p * n + i] = abar;
                let hv = abar * h[p * n + i] + delta * b_t[i] * xp;
                h[p * n + i] = hv;
                acc += c_t[i] * hv;
            }
            *y_slot = acc;
        }
        cache.hs[t * d * n..(t + 1) * d * n].copy_from_slice(&h);
    }
    (ys, cache)
}

/// BPTT through the scan. Accumulates parameter gradients and returns the
/// gradient w.r.t. the input sequence.
pub fn selective_scan_backward(
    dys: &[f64],
    cache: &ScanCache,
    params: &mut SsmParams,
) -> Vec<f64> {
    let d = cache.dim;
    let n = cache.state_dim;
    let t_len = cache.t_len;
    debug_assert_eq!(dys.len(), t_len * d);
    let mut dxs = vec![0.0; t_len * d];
    let mut dh = vec![0.0; d * n];
    for t in (0..t_len).rev() {
        let x = &cache.xs[t * d..(t + 1) * d];
        let delta = cache.deltas[t];
        let delta_raw = cache.deltas_raw[t];
        let b_t = &cache.bs[t * n..(t + 1) * n];
        let c_t = &cache.cs[t * n..(t + 1) * n];
        let abar = &cache.abars[t * d * n..(t + 1) * d * n];
        let h_t = &cache.hs[t * d * n..(t + 1) * d * n];
        let h_prev_store;
        let h_prev: &[f64] = if t == 0 {
            h_prev_store = vec![0.0; d * n];
            &h_prev_store
        } else {
            &cache.hs[(t - 1) * d * n..t * d * n]
        };
        let dy = &dys[t * d..(t + 1) * d];
        let dx = &mut dxs[t * d..(t + 1) * d];

        let mut ddelta = 0.0;
        let mut dc_t = vec![0.0; n];
        let mut db_t = vec![0.0; n];
        for p in 0..d {
            let g = dy[p];
            params.d_skip.grad[p] += g * x[p];
            dx[p] += g * params.d_skip.value[p];
            let mut dh_dot_bbar = 0.0;
            for i in 0..n {
                let idx = p * n + i;
                dc_t[i] += g * h_t[idx];
                // total gradient on h_t = carry from t+1 plus the y_t term
                let dht = dh[idx] + g * c_t[i];
                let dabar = dht * h_prev[idx];
                let a = -params.a_log.value[idx].exp();
                ddelta += dabar * abar[idx] * a;
                // da = dabar * abar * delta; da_log = da * a
                params.a_log.grad[idx] += dabar * abar[idx] * delta * a;
                db_t[i] += dht * delta * x[p];
                ddelta += dht * b_t[i] * x[p];
                dh_dot_bbar += dht * delta * b_t[i];
                // carry to t-1
                dh[idx] = dht * abar[idx];
            }
            dx[p] += dh_dot_bbar;
        }
        // B_t = b_w x + b_b ; C_t = c_w x + c_b
        for i in 0..n {
            params.b_b.grad[i] += db_t[i];
            params.c_b.grad[i] += dc_t[i];
            for p in 0..d {
                params.b_w.grad[i * d + p] += db_t[i] * x[p];
                params.c_w.grad[i * d + p] += dc_t[i] * x[p];
                dx[p] += db_t[i] * params.b_w.value[i * d + p]
                    + dc_t[i] * params.c_w.value[i * d + p];
            }
        }
        // delta = softplus(delta_raw)
        let ddelta_raw = ddelta * sigmoid(delta_raw);
        params.delta_b.grad[0] += ddelta_raw;
        for p in 0..d {
            params.delta_w.grad[p] += ddelta_raw * x[p];
            dx[p] += ddelta_raw * params.delta_w.value[p];
        }
    }
    dxs
}

/// One directional unit of a block: pre-scan convolution plus its SSM.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectionalUnit {
    pub conv_w: Param,
    pub conv_b: Param,
    pub ssm: SsmParams,
}

impl DirectionalUnit {
    fn init(prefix: &str, dim: usize, state_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv = Conv2d::new(dim, dim, 3, 1, PadMode::Reflect);
        let scale = 1.0 / ((9 * dim) as f64).sqrt();
        let w = (0..conv.weight_len())
            .map(|_| seeding::normal(rng) * scale)
            .collect();
        DirectionalUnit {
            conv_w: Param::new(format!("{prefix}.conv_w"), w),
            conv_b: Param::zeros(format!("{prefix}.conv_b"), dim),
            ssm: SsmParams::init(&format!("{prefix}.ssm"), dim, state_dim, rng),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.conv_w);
        f(&mut self.conv_b);
        self.ssm.visit_params_mut(f);
    }
}

/// Self-Navigated Mamba Block: four directional units over one token grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SmbParams {
    pub units: Vec<DirectionalUnit>,
}

impl SmbParams {
    fn init(prefix: &str, dim: usize, state_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let units = Direction::ALL
            .iter()
            .map(|d| DirectionalUnit::init(&format!("{prefix}.{}", d.label()), dim, state_dim, rng))
            .collect();
        SmbParams { units }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        for u in &mut self.units {
            u.visit_params_mut(f);
        }
    }
}

/// Embedding plus two stacked blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SnmmParams {
    pub dim: usize,
    pub state_dim: usize,
    pub in_channels: usize,
    pub embed_w: Param,
    pub embed_b: Param,
    pub blocks: Vec<SmbParams>,
}

impl SnmmParams {
    pub fn init(in_channels: usize, dim: usize, state_dim: usize, seed: u64) -> Self {
        let mut rng = seeding::substream(seed, "snmm-init", 0);
        let scale = 1.0 / (in_channels as f64).sqrt();
        let embed_w = (0..dim * in_channels)
            .map(|_| seeding::normal(&mut rng) * scale)
            .collect();
        SnmmParams {
            dim,
            state_dim,
            in_channels,
            embed_w: Param::new("snmm.embed_w", embed_w),
            embed_b: Param::zeros("snmm.embed_b", dim),
            blocks: (0..2)
                .map(|b| SmbParams::init(&format!("snmm.block{b}"), dim, state_dim, &mut rng))
                .collect(),
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.embed_w);
        f(&mut self.embed_b);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
    }

    fn conv(&self) -> Conv2d {
        Conv2d::new(self.dim, self.dim, 3, 1, PadMode::Reflect)
    }
}

/// Four directionally-aware output grids.
#[derive(Debug, Clone)]
pub struct DirectionalOutputs {
    pub o_right: Grid3,
    pub o_left: Grid3,
    pub o_down: Grid3,
    pub o_up: Grid3,
}

impl DirectionalOutputs {
    pub fn as_array(&self) -> [&Grid3; 4] {
        [&self.o_right, &self.o_left, &self.o_down, &self.o_up]
    }

    pub fn get(&self, d: Direction) -> &Grid3 {
        match d {
            Direction::Right => &self.o_right,
            Direction::Left => &self.o_left,
            Direction::Down => &self.o_down,
            Direction::Up => &self.o_up,
        }
    }

    fn from_vec(mut v: Vec<Grid3>) -> Self {
        let o_up = v.pop().unwrap();
        let o_down = v.pop().unwrap();
        let o_left = v.pop().unwrap();
        let o_right = v.pop().unwrap();
        DirectionalOutputs {
            o_right,
            o_left,
            o_down,
            o_up,
        }
    }
}

/// Linear projection of hybrid residual channels into token space.
pub fn embed(hybrid: &ResidualGrid, params: &SnmmParams) -> Result<TokenGrid> {
    if hybrid.kind != ResidualKind::Hybrid {
        return Err(SnarmError::data("embed expects hybrid residuals"));
    }
    let g = &hybrid.grid;
    if g.c != params.in_channels {
        return Err(SnarmError::shape(
            format!("{} channels", params.in_channels),
            format!("{}", g.c),
        ));
    }
    let mut tokens = Grid3::zeros(g.h, g.w, params.dim);
    for i in 0..g.h {
        for j in 0..g.w {
            matvec(
                &params.embed_w.value,
                &params.embed_b.value,
                g.cell(i, j),
                tokens.cell_mut(i, j),
            );
        }
    }
    Ok(TokenGrid {
        tokens,
        mask: vec![true; g.h * g.w],
    })
}

/// Keep the ceil(keep_ratio * M) tokens with the highest waypoint score,
/// ties broken by lower index. The rest bypass the scan via skip connection.
pub fn navigate_tokens(grid: &TokenGrid, wm: &WaypointMap, keep_ratio: f64) -> Result<TokenGrid> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(SnarmError::config(format!(
            "keep_ratio must lie in (0,1], got {keep_ratio}"
        )));
    }
    let m = grid.tokens.cells();
    if wm.q_star.len() != m {
        return Err(SnarmError::shape(
            format!("{m} waypoint scores"),
            format!("{}", wm.q_star.len()),
        ));
    }
    let keep = ((keep_ratio * m as f64).ceil() as usize).clamp(1, m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        wm.q_star.data[b]
            .total_cmp(&wm.q_star.data[a])
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; m];
    for &k in &order[..keep] {
        mask[k] = true;
    }
    Ok(TokenGrid {
        tokens: grid.tokens.clone(),
        mask,
    })
}

#[derive(Debug, Clone)]
struct DirCache {
    order: Vec<usize>,
    scan: ScanCache,
}

#[derive(Debug, Clone)]
pub struct SmbCache {
    x: Grid3,
    dirs: Vec<DirCache>,
}

/// One block: per direction, 3x3 reflect convolution, scan of the selected
/// tokens in direction order, scatter back (unselected keep the conv value),
/// then add the block input.
pub fn smb_forward(
    x: &Grid3,
    mask: &[bool],
    params: &SmbParams,
    conv: &Conv2d,
) -> (Vec<Grid3>, SmbCache) {
    let d = x.c;
    let mut outs = Vec::with_capacity(4);
    let mut dirs = Vec::with_capacity(4);
    for (di, dir) in Direction::ALL.iter().enumerate() {
        let unit = &params.units[di];
        let u = conv.forward(x, &unit.conv_w.value, &unit.conv_b.value);
        let order: Vec<usize> = dir
            .raster(x.h, x.w)
            .into_iter()
            .filter(|&cell| mask[cell])
            .collect();
        let mut seq = Vec::with_capacity(order.len() * d);
        for &cell in &order {
            seq.extend_from_slice(&u.data[cell * d..(cell + 1) * d]);
        }
        let (ys, scan) = selective_scan(&seq, order.len(), &unit.ssm);
        let mut y = u;
        for (t, &cell) in order.iter().enumerate() {
            y.data[cell * d..(cell + 1) * d].copy_from_slice(&ys[t * d..(t + 1) * d]);
        }
        for (yv, xv) in y.data.iter_mut().zip(&x.data) {
            *yv += xv;
        }
        outs.push(y);
        dirs.push(DirCache { order, scan });
    }
    (
        outs,
        SmbCache {
            x: x.clone(),
            dirs,
        },
    )
}

/// Backward through one block; returns the gradient w.r.t. the block input.
pub fn smb_backward(
    d_outs: &[Grid3],
    cache: &SmbCache,
    params: &mut SmbParams,
    conv: &Conv2d,
) -> Grid3 {
    let d = cache.x.c;
    let mut dx = Grid3::zeros(cache.x.h, cache.x.w, d);
    for (di, d_out) in d_outs.iter().enumerate() {
        let unit = &mut params.units[di];
        let dir_cache = &cache.dirs[di];
        // residual connection
        for (g, acc) in d_out.data.iter().zip(dx.data.iter_mut()) {
            *acc += g;
        }
        // scanned positions route through the scan; bypassed ones hit the conv
        let mut dseq = vec![0.0; dir_cache.order.len() * d];
        let mut du = d_out.clone();
        for (t, &cell) in dir_cache.order.iter().enumerate() {
            dseq[t * d..(t + 1) * d].copy_from_slice(&d_out.data[cell * d..(cell + 1) * d]);
            du.data[cell * d..(cell + 1) * d].fill(0.0);
        }
        let dseq_in = selective_scan_backward(&dseq, &dir_cache.scan, &mut unit.ssm);
        for (t, &cell) in dir_cache.order.iter().enumerate() {
            du.data[cell * d..(cell + 1) * d].copy_from_slice(&dseq_in[t * d..(t + 1) * d]);
        }
        let dxc = conv.backward(
            &cache.x,
            &unit.conv_w.value,
            &du,
            &mut unit.conv_w.grad,
            &mut unit.conv_b.grad,
        );
        for (g, acc) in dxc.data.iter().zip(dx.data.iter_mut()) {
            *acc += g;
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct SnmmCache {
    embed_input: Grid3,
    block1: SmbCache,
    block2: SmbCache,
}

/// Full module: embed, navigate, block 1, mean-fuse the four directional
/// outputs, block 2.
pub fn snmm_forward(
    hybrid: &ResidualGrid,
    wm: &WaypointMap,
    keep_ratio: f64,
    params: &SnmmParams,
) -> Result<(DirectionalOutputs, SnmmCache)> {
    let tokens = navigate_tokens(&embed(hybrid, params)?, wm, keep_ratio)?;
    let conv = params.conv();
    let (outs1, block1) = smb_forward(&tokens.tokens, &tokens.mask, &params.blocks[0], &conv);
    let mut fused = Grid3::zeros(tokens.tokens.h, tokens.tokens.w, params.dim);
    for o in &outs1 {
        for (f, v) in fused.data.iter_mut().zip(&o.data) {
            *f += v * 0.25;
        }
    }
    let (outs2, block2) = smb_forward(&fused, &tokens.mask, &params.blocks[1], &conv);
    Ok((
        DirectionalOutputs::from_vec(outs2),
        SnmmCache {
            embed_input: hybrid.grid.clone(),
            block1,
            block2,
        },
    ))
}

/// Backward through the module; parameter gradients accumulate in `params`.
pub fn snmm_backward(d_out: &DirectionalOutputs, cache: &SnmmCache, params: &mut SnmmParams) {
    let conv = params.conv();
    let d_outs2: Vec<Grid3> = d_out.as_array().iter().map(|g| (*g).clone()).collect();
    let dfused = smb_backward(&d_outs2, &cache.block2, &mut params.blocks[1], &conv);
    let mut quarter = dfused;
    for v in quarter.data.iter_mut() {
        *v *= 0.25;
    }
    let d_outs1 = vec![quarter; 4];
    let dtokens = smb_backward(&d_outs1, &cache.block1, &mut params.blocks[0], &conv);
    // embed: tokens = W r + b per cell
    let c_in = params.in_channels;
    let d_m = params.dim;
    for cell in 0..cache.embed_input.cells() {
        let r = &cache.embed_input.data[cell * c_in..(cell + 1) * c_in];
        let g = &dtokens.data[cell * d_m..(cell + 1) * d_m];
        for o in 0..d_m {
            params.embed_b.grad[o] += g[o];
            let row = &mut params.embed_w.grad[o * c_in..(o + 1) * c_in];
            for (slot, rv) in row.iter_mut().zip(r) {
                *slot += g[o] * rv;
            }
        }
    }
}
