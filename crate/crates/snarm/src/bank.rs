//! Prototype bank: raw feature pool, greedy k-center coreset, exact
//! nearest/top-k queries and inter-residual computation.
//!
//! Queries are exact. The scan keeps a (distance, index) bound and abandons a
//! candidate as soon as its partial sum exceeds it, which preserves the
//! left-to-right summation order, so results (including ties) are identical
//! to an exhaustive scan.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::encoder::PatchFeatureGrid;
use crate::error::{Result, SnarmError};
use crate::grid::Grid3;
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ResidualKind {
    Inter,
    Intra,
    Hybrid,
}

/// Per-patch nonnegative residual vectors.
#[derive(Debug, Clone)]
pub struct ResidualGrid {
    pub grid: Grid3,
    pub theta: u8,
    pub kind: ResidualKind,
}

/// All patch descriptors of the training set, with (image, patch) provenance.
#[derive(Debug, Clone)]
pub struct RawFeaturePool {
    pub dim: usize,
    vectors: Vec<f64>,
    pub origins: Vec<(u32, u32)>,
}

impl RawFeaturePool {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    #[inline]
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn from_vectors(dim: usize, vectors: Vec<f64>, origins: Vec<(u32, u32)>) -> Result<Self> {
        if vectors.len() != origins.len() * dim {
            return Err(SnarmError::shape(
                format!("{} x {}", origins.len(), dim),
                format!("{} values", vectors.len()),
            ));
        }
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(SnarmError::data("feature pool contains non-finite values"));
        }
        Ok(RawFeaturePool {
            dim,
            vectors,
            origins,
        })
    }
}

pub fn build_raw_pool(training_grids: &[PatchFeatureGrid]) -> Result<RawFeaturePool> {
    let Some(first) = training_grids.first() else {
        return Err(SnarmError::data("raw pool needs at least one feature grid"));
    };
    let dim = first.grid().c;
    let mut vectors = Vec::new();
    let mut origins = Vec::new();
    for (img, grid) in training_grids.iter().enumerate() {
        if grid.grid().c != dim {
            return Err(SnarmError::data(format!(
                "grid {img} has {} channels, expected {dim}",
                grid.grid().c
            )));
        }
        if !grid.grid().all_finite() {
            return Err(SnarmError::data(format!(
                "grid {img} contains non-finite values"
            )));
        }
        for patch in 0..grid.patch_count() {
            vectors.extend_from_slice(grid.descriptor(patch));
            origins.push((img as u32, patch as u32));
        }
    }
    RawFeaturePool::from_vectors(dim, vectors, origins)
}

/// Coreset of the raw pool; prototypes are exact copies of selected vectors.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    pub dim: usize,
    prototypes: Vec<f64>,
    pub selected_indices: Vec<u32>,
    pub build_seed: u64,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.selected_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected_indices.is_empty()
    }

    #[inline]
    pub fn prototype(&self, t: usize) -> &[f64] {
        &self.prototypes[t * self.dim..(t + 1) * self.dim]
    }

    /// Bank over explicit vectors, e.g. the in-image trusted set.
    pub fn from_vectors(
        dim: usize,
        prototypes: Vec<f64>,
        selected_indices: Vec<u32>,
        build_seed: u64,
    ) -> Result<Self> {
        if prototypes.len() != selected_indices.len() * dim {
            return Err(SnarmError::shape(
                format!("{} x {}", selected_indices.len(), dim),
                format!("{} values", prototypes.len()),
            ));
        }
        Ok(PrototypeBank {
            dim,
            prototypes,
            selected_indices,
            build_seed,
        })
    }
}

/// Greedy farthest-point (k-center) selection: the first element comes from
/// the seed, each next element maximises its L2 distance to the selected set.
/// Ties break to the lowest index.
pub fn coreset_select(pool: &RawFeaturePool, t: usize, seed: u64) -> Result<PrototypeBank> {
    if pool.is_empty() {
        return Err(SnarmError::data("cannot build a bank from an empty pool"));
    }
    let first = seeding::substream(seed, "coreset-start", 0).gen_range(0..pool.len());
    coreset_select_from(pool, t, first, seed)
}

/// Greedy selection with an explicit start index.
pub fn coreset_select_from(
    pool: &RawFeaturePool,
    t: usize,
    first: usize,
    seed: u64,
) -> Result<PrototypeBank> {
    let n = pool.len();
    if t == 0 || t > n {
        return Err(SnarmError::config(format!(
            "coreset size {t} out of range 1..={n}"
        )));
    }
    if first >= n {
        return Err(SnarmError::config(format!("start index {first} >= {n}")));
    }
    let mut selected = Vec::with_capacity(t);
    selected.push(first as u32);
    // squared distance of each pool vector to the selected set
    let mut min_d2: Vec<f64> = (0..n)
        .map(|i| squared_distance_accum(pool.vector(i), pool.vector(first)))
        .collect();
    while selected.len() < t {
        let mut best = 0usize;
        let mut best_d2 = f64::NEG_INFINITY;
        for (i, &d2) in min_d2.iter().enumerate() {
            if d2 > best_d2 {
                best_d2 = d2;
                best = i;
            }
        }
        selected.push(best as u32);
        let picked = pool.vector(best).to_vec();
        for (i, slot) in min_d2.iter_mut().enumerate() {
            let d2 = squared_distance_accum(pool.vector(i), &picked);
            if d2 < *slot {
                *slot = d2;
            }
        }
    }
    let mut prototypes = Vec::with_capacity(t * pool.dim);
    for &idx in &selected {
        prototypes.extend_from_slice(pool.vector(idx as usize));
    }
    Ok(PrototypeBank {
        dim: pool.dim,
        prototypes,
        selected_indices: selected,
        build_seed: seed,
    })
}

/// Covering radius of a selected set over the pool (max of min distances).
pub fn covering_radius(pool: &RawFeaturePool, selected: &[u32]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..pool.len() {
        let mut best = f64::INFINITY;
        for &s in selected {
            let d2 = squared_distance_accum(pool.vector(i), pool.vector(s as usize));
            if d2 < best {
                best = d2;
            }
        }
        worst = worst.max(best);
    }
    worst.sqrt()
}

#[inline]
fn squared_distance_accum(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Exact k smallest (squared distance, index) pairs, ordered ascending with
/// index tie-break. Partial sums only grow, so a candidate is dropped once its
/// running sum strictly exceeds the current k-th best.
fn k_nearest(query: &[f64], bank: &PrototypeBank, k: usize) -> Vec<(f64, usize)> {
    debug_assert!(k >= 1 && k <= bank.len());
    let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
    for t in 0..bank.len() {
        let bound = if best.len() == k {
            best[k - 1].0
        } else {
            f64::INFINITY
        };
        let proto = bank.prototype(t);
        let mut s = 0.0;
        let mut pruned = false;
        for (x, y) in query.iter().zip(proto) {
            let d = x - y;
            s += d * d;
            if s > bound {
                pruned = true;
                break;
            }
        }
        if pruned {
            continue;
        }
        // equal distances keep the earlier index ahead; we scan ascending t
        let pos = best.partition_point(|&(d, i)| d < s || (d == s && i < t));
        best.insert(pos, (s, t));
        if best.len() > k {
            best.pop();
        }
    }
    best
}

/// Index and L2 distance of the nearest prototype; ties go to the lowest index.
pub fn nearest(query: &[f64], bank: &PrototypeBank) -> Result<(usize, f64)> {
    if bank.is_empty() {
        return Err(SnarmError::data("nearest query against an empty bank"));
    }
    if query.len() != bank.dim {
        return Err(SnarmError::shape(
            format!("{}-dim query", bank.dim),
            format!("{}", query.len()),
        ));
    }
    let best = k_nearest(query, bank, 1)[0];
    Ok((best.1, best.0.sqrt()))
}

/// Arithmetic mean of the k nearest prototypes.
pub fn topk_reference(query: &[f64], bank: &PrototypeBank, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > bank.len() {
        return Err(SnarmError::config(format!(
            "top-k {k} out of range 1..={}",
            bank.len()
        )));
    }
    if query.len() != bank.dim {
        return Err(SnarmError::shape(
            format!("{}-dim query", bank.dim),
            format!("{}", query.len()),
        ));
    }
    let picks = k_nearest(query, bank, k);
    let mut mean = vec![0.0; bank.dim];
    for &(_, t) in &picks {
        for (m, v) in mean.iter_mut().zip(bank.prototype(t)) {
            *m += v;
        }
    }
    let inv = 1.0 / k as f64;
    for m in &mut mean {
        *m *= inv;
    }
    Ok(mean)
}

/// Elementwise |query - reference|^theta with theta in {1, 2}.
pub fn inter_residual(query: &[f64], reference: &[f64], theta: u8) -> Result<Vec<f64>> {
    if !matches!(theta, 1 | 2) {
        return Err(SnarmError::config(format!(
            "residual exponent must be 1 or 2, got {theta}"
        )));
    }
    if query.len() != reference.len() {
        return Err(SnarmError::shape(
            format!("{}", query.len()),
            format!("{}", reference.len()),
        ));
    }
    Ok(query
        .iter()
        .zip(reference)
        .map(|(q, r)| {
            let a = (q - r).abs();
            if theta == 1 {
                a
            } else {
                a * a
            }
        })
        .collect())
}

/// Inter-residual grid: every patch matched against its top-k bank reference.
pub fn compute_inter_grid(
    grid: &PatchFeatureGrid,
    bank: &PrototypeBank,
    theta: u8,
    k: usize,
) -> Result<ResidualGrid> {
    if !grid.grid().all_finite() {
        return Err(SnarmError::data("feature grid contains non-finite values"));
    }
    let g = grid.grid();
    let mut out = Grid3::zeros(g.h, g.w, g.c);
    for patch in 0..grid.patch_count() {
        let query = grid.descriptor(patch);
        let reference = topk_reference(query, bank, k)?;
        let res = inter_residual(query, &reference, theta)?;
        out.data[patch * g.c..(patch + 1) * g.c].copy_from_slice(&res);
    }
    Ok(ResidualGrid {
        grid: out,
        theta,
        kind: ResidualKind::Inter,
    })
}

const BANK_MAGIC: &[u8; 8] = b"SNRMBANK";
const BANK_VERSION: u16 = 1;

/// Bank container: magic, version u16, T u32, d_f u32, seed u64, row-major
/// f32 prototypes, then u32 selected indices. All little-endian.
pub fn write_bank(path: &Path, bank: &PrototypeBank) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 2 + 4 + 4 + 8 + bank.prototypes.len() * 4);
    buf.extend_from_slice(BANK_MAGIC);
    buf.extend_from_slice(&BANK_VERSION.to_le_bytes());
    buf.extend_from_slice(&(bank.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(bank.dim as u32).to_le_bytes());
    buf.extend_from_slice(&bank.build_seed.to_le_bytes());
    for v in &bank.prototypes {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for idx in &bank.selected_indices {
        buf.extend_from_slice(&idx.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_bank(path: &Path) -> Result<PrototypeBank> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 26 || &bytes[0..8] != BANK_MAGIC {
        return Err(SnarmError::data(format!(
            "{} is not a bank file",
            path.display()
        )));
    }
    let version = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
    if version != BANK_VERSION {
        return Err(SnarmError::data(format!(
            "unsupported bank version {version}"
        )));
    }
    let t = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[14..18].try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(bytes[18..26].try_into().unwrap());
    let need = 26 + t * dim * 4 + t * 4;
    if bytes.len() != need {
        return Err(SnarmError::data(format!(
            "bank file {}: expected {} bytes, got {}",
            path.display(),
            need,
            bytes.len()
        )));
    }
    let mut prototypes = Vec::with_capacity(t * dim);
    for n in 0..t * dim {
        let off = 26 + n * 4;
        prototypes.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    let mut selected = Vec::with_capacity(t);
    for n in 0..t {
        let off = 26 + t * dim * 4 + n * 4;
        selected.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
    }
    Ok(PrototypeBank {
        dim,
        prototypes,
        selected_indices: selected,
        build_seed: seed,
    })
}

#[cfg(test)]
pub(crate) fn bank_from_rows(rows: &[&[f64]]) -> PrototypeBank {
    let dim = rows[0].len();
    let mut prototypes = Vec::new();
    for r in rows {
        assert_eq!(r.len(), dim);
        prototypes.extend_from_slice(r);
    }
    PrototypeBank {
        dim,
        prototypes,
        selected_indices: (0..rows.len() as u32).collect(),
        build_seed: 0,
    }
}

#[cfg(test)]
pub(crate) fn pool_from_rows(rows: &[&[f64]]) -> RawFeaturePool {
    let dim = rows[0].len();
    let mut vectors = Vec::new();
    for r in rows {
        vectors.extend_from_slice(r);
    }
    RawFeaturePool::from_vectors(
        dim,
        vectors,
        (0..rows.len()).map(|i| (0, i as u32)).collect(),
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::PatchGeometry;

    fn grid_of(rows: usize, cols: usize, c: usize, data: Vec<f64>) -> PatchFeatureGrid {
        PatchFeatureGrid {
            grid: Grid3::from_vec(rows, cols, c, data).unwrap(),
            geometry: PatchGeometry {
                image_h: rows * 4,
                image_w: cols * 4,
                grid_h: rows,
                grid_w: cols,
            },
        }
    }

    #[test]
    fn raw_pool_counts_and_origins() {
        let g = grid_of(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]);
        let pool = build_raw_pool(&[g.clone()]).unwrap();
        assert_eq!(pool.len(), 4);
        assert_eq!(pool.origins, vec![(0, 0), (0, 1), (0, 2), (0, 3)]);
        let pool2 = build_raw_pool(&[g.clone(), g]).unwrap();
        assert_eq!(pool2.len(), 8);
        assert_eq!(pool2.origins[4], (1, 0));
    }

    #[test]
    fn raw_pool_rejects_nan() {
        let g = grid_of(1, 2, 1, vec![1.0, f64::NAN]);
        assert!(build_raw_pool(&[g]).is_err());
    }

    #[test]
    fn coreset_exhaustive_selection_equals_pool() {
        let pool = pool_from_rows(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 2.0]]);
        let bank = coreset_select(&pool, 3, 9).unwrap();
        let mut sel = bank.selected_indices.clone();
        sel.sort_unstable();
        assert_eq!(sel, vec![0, 1, 2]);
    }

    #[test]
    fn coreset_greedy_picks_farthest() {
        // {(0,0),(1,0),(10,0)}, T=2, start 0 -> picks 0 then 2 (max-min distance)
        let pool = pool_from_rows(&[&[0.0, 0.0], &[1.0, 0.0], &[10.0, 0.0]]);
        let bank = coreset_select_from(&pool, 2, 0, 0).unwrap();
        assert_eq!(bank.selected_indices, vec![0, 2]);
    }

    #[test]
    fn coreset_rejects_oversized_t() {
        let pool = pool_from_rows(&[&[0.0], &[1.0]]);
        assert!(coreset_select(&pool, 3, 0).is_err());
        assert!(coreset_select(&pool, 0, 0).is_err());
    }

    #[test]
    fn nearest_self_and_derived() {
        let bank = bank_from_rows(&[&[0.0, 0.0], &[2.0, 2.0]]);
        let (idx, d) = nearest(&[2.0, 2.0], &bank).unwrap();
        assert_eq!((idx, d), (1, 0.0));
        let (idx, d) = nearest(&[1.0, 3.0], &bank).unwrap();
        assert_eq!(idx, 1);
        assert!((d - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn nearest_tie_goes_to_lower_index() {
        let bank = bank_from_rows(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let (idx, _) = nearest(&[0.0, 0.0], &bank).unwrap();
        assert_eq!(idx, 0);
    }

    #[test]
    fn topk_mean_and_degenerate_k() {
        let bank = bank_from_rows(&[&[0.0, 0.0], &[2.0, 0.0], &[10.0, 10.0]]);
        let r1 = topk_reference(&[1.0, 0.0], &bank, 1).unwrap();
        assert_eq!(r1, vec![0.0, 0.0]);
        let r2 = topk_reference(&[1.0, 0.0], &bank, 2).unwrap();
        assert_eq!(r2, vec![1.0, 0.0]);
        assert!(topk_reference(&[1.0, 0.0], &bank, 4).is_err());
    }

    #[test]
    fn inter_residual_examples() {
        assert_eq!(
            inter_residual(&[1.0, 3.0], &[1.0, 3.0], 2).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            inter_residual(&[1.0, 3.0], &[2.0, 2.0], 2).unwrap(),
            vec![1.0, 1.0]
        );
        assert_eq!(
            inter_residual(&[1.0, 3.0], &[2.0, 2.0], 1).unwrap(),
            vec![1.0, 1.0]
        );
        assert!(inter_residual(&[1.0], &[1.0], 3).is_err());
    }

    #[test]
    fn inter_residual_symmetry() {
        let a = [0.25, -1.5, 3.0];
        let b = [1.0, 0.5, -0.25];
        for theta in [1u8, 2] {
            let ab = inter_residual(&a, &b, theta).unwrap();
            let ba = inter_residual(&b, &a, theta).unwrap();
            assert_eq!(ab, ba);
            assert!(ab.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn inter_grid_of_bank_members_is_zero() {
        let g = grid_of(1, 2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let pool = build_raw_pool(&[g.clone()]).unwrap();
        let bank = coreset_select(&pool, 2, 5).unwrap();
        let rg = compute_inter_grid(&g, &bank, 2, 1).unwrap();
        assert!(rg.grid.data.iter().all(|v| *v == 0.0));
        assert_eq!(rg.kind, ResidualKind::Inter);
    }

    #[test]
    fn inter_grid_matches_bruteforce_oracle() {
        let g = grid_of(2, 2, 2, vec![0.1, 0.2, 1.5, -0.5, 3.0, 3.0, -1.0, 0.0]);
        let bank = bank_from_rows(&[&[0.0, 0.0], &[1.0, -1.0], &[3.0, 3.5]]);
        let rg = compute_inter_grid(&g, &bank, 2, 1).unwrap();
        for patch in 0..4 {
            let q = g.descriptor(patch);
            // exhaustive scan oracle
            let mut best = (f64::INFINITY, usize::MAX);
            for t in 0..bank.len() {
                let d2 = squared_distance_accum(q, bank.prototype(t));
                if d2 < best.0 {
                    best = (d2, t);
                }
            }
            let proto = bank.prototype(best.1);
            for k in 0..2 {
                let expect = (q[k] - proto[k]) * (q[k] - proto[k]);
                assert!((rg.grid.data[patch * 2 + k] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bank_file_roundtrip() {
        let pool = pool_from_rows(&[&[0.5, 0.25], &[1.0, -1.0], &[4.0, 2.0]]);
        let bank = coreset_select(&pool, 2, 77).unwrap();
        let dir = std::env::temp_dir().join("snarm_bank_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bank.bin");
        write_bank(&path, &bank).unwrap();
        let back = read_bank(&path).unwrap();
        assert_eq!(back.dim, bank.dim);
        assert_eq!(back.selected_indices, bank.selected_indices);
        assert_eq!(back.build_seed, 77);
        assert_eq!(back.prototypes, bank.prototypes);
    }

    #[test]
    fn covering_radius_is_monotone_in_t() {
        let pool = pool_from_rows(&[
            &[0.0, 0.0],
            &[5.0, 1.0],
            &[2.0, 8.0],
            &[-3.0, 4.0],
            &[7.0, -2.0],
            &[1.0, 1.0],
        ]);
        let mut last = f64::INFINITY;
        for t in 1..=pool.len() {
            let bank = coreset_select_from(&pool, t, 0, 0).unwrap();
            let r = covering_radius(&pool, &bank.selected_indices);
            assert!(r <= last + 1e-12, "radius grew at T={t}");
            last = r;
        }
    }
}
