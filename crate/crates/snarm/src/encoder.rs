//! Patch-feature extraction: pluggable backbone, multi-layer fusion and the
//! flat binary feature container.
//!
//! Backends emit f32-representable values and fusion accumulates in f32, so
//! grids survive the 32-bit file container losslessly. Everything downstream
//! computes in f64.

use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SnarmError};
use crate::grid::{Grid2, Grid3};
use crate::ops::BilinearPlan;
use crate::seeding;

/// RGB image with values in [0,1], row-major (i * w + j) * 3 + ch.
#[derive(Debug, Clone)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f64>,
    pub source_id: String,
}

impl Image {
    pub fn new(h: usize, w: usize, pixels: Vec<f64>, source_id: impl Into<String>) -> Result<Self> {
        if h == 0 || w == 0 || pixels.len() != h * w * 3 {
            return Err(SnarmError::shape(
                format!("{}x{}x3={}", h, w, h * w * 3),
                format!("{} pixel values", pixels.len()),
            ));
        }
        if !pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) {
            return Err(SnarmError::data(format!(
                "image `{}` has pixel values outside [0,1]",
                source_id.into()
            )));
        }
        Ok(Image {
            h,
            w,
            pixels,
            source_id: source_id.into(),
        })
    }

    #[inline]
    pub fn pixel(&self, i: usize, j: usize) -> [f64; 3] {
        let base = (i * self.w + j) * 3;
        [
            self.pixels[base],
            self.pixels[base + 1],
            self.pixels[base + 2],
        ]
    }

    /// One channel as a Grid2, for per-channel resampling.
    fn channel(&self, ch: usize) -> Grid2 {
        let mut g = Grid2::zeros(self.h, self.w);
        for (cell, px) in g.data.iter_mut().zip(self.pixels.chunks_exact(3)) {
            *cell = px[ch];
        }
        g
    }
}

/// Bilinear resize to `resize` x `resize`, then center crop to `crop` x `crop`.
pub fn preprocess(image: &Image, resize: usize, crop: usize) -> Result<Image> {
    if crop == 0 || resize < crop {
        return Err(SnarmError::config(format!(
            "preprocess requires resize >= crop > 0, got resize={resize} crop={crop}"
        )));
    }
    if image.h < 2 || image.w < 2 {
        return Err(SnarmError::data(format!(
            "image `{}` is smaller than 2x2",
            image.source_id
        )));
    }
    let resized = if image.h == resize && image.w == resize {
        image.clone()
    } else {
        let plan = BilinearPlan::new(image.h, image.w, resize, resize);
        let chans: Vec<Grid2> = (0..3).map(|c| plan.apply2(&image.channel(c))).collect();
        let mut pixels = vec![0.0; resize * resize * 3];
        for idx in 0..resize * resize {
            for (c, chan) in chans.iter().enumerate() {
                // interpolation of [0,1] values stays in [0,1] up to rounding
                pixels[idx * 3 + c] = chan.data[idx].clamp(0.0, 1.0);
            }
        }
        Image {
            h: resize,
            w: resize,
            pixels,
            source_id: image.source_id.clone(),
        }
    };
    let off = (resize - crop) / 2;
    let mut pixels = vec![0.0; crop * crop * 3];
    for i in 0..crop {
        for j in 0..crop {
            let src = ((i + off) * resize + (j + off)) * 3;
            let dst = (i * crop + j) * 3;
            pixels[dst..dst + 3].copy_from_slice(&resized.pixels[src..src + 3]);
        }
    }
    Ok(Image {
        h: crop,
        w: crop,
        pixels,
        source_id: image.source_id.clone(),
    })
}

/// Ordered multi-layer feature maps sharing one spatial/channel shape.
#[derive(Debug, Clone)]
pub struct LayerFeatureStack {
    pub layers: Vec<Grid3>,
}

impl LayerFeatureStack {
    pub fn new(layers: Vec<Grid3>) -> Result<Self> {
        if layers.len() < 2 {
            return Err(SnarmError::data("feature stack needs at least 2 layers"));
        }
        let (h, w, c) = (layers[0].h, layers[0].w, layers[0].c);
        if !layers.iter().all(|l| l.h == h && l.w == w && l.c == c) {
            return Err(SnarmError::data("feature stack layers differ in shape"));
        }
        Ok(LayerFeatureStack { layers })
    }
}

/// Maps a feature-grid cell to the image-pixel rectangle it summarises.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PatchGeometry {
    pub image_h: usize,
    pub image_w: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl PatchGeometry {
    /// Half-open pixel rectangle (row0, row1, col0, col1) of cell (i, j).
    pub fn rect(&self, i: usize, j: usize) -> (usize, usize, usize, usize) {
        let r0 = i * self.image_h / self.grid_h;
        let r1 = (i + 1) * self.image_h / self.grid_h;
        let c0 = j * self.image_w / self.grid_w;
        let c1 = (j + 1) * self.image_w / self.grid_w;
        (r0, r1, c0, c1)
    }
}

/// Fused per-patch descriptors plus their pixel footprint.
#[derive(Debug, Clone)]
pub struct PatchFeatureGrid {
    pub grid: Grid3,
    pub geometry: PatchGeometry,
}

impl PatchFeatureGrid {
    /// Descriptor of flattened patch index k (row-major).
    pub fn descriptor(&self, k: usize) -> &[f64] {
        let c = self.grid.c;
        &self.grid.data[k * c..(k + 1) * c]
    }

    pub fn patch_count(&self) -> usize {
        self.grid.cells()
    }
}

/// Feature extraction backbone. Implementations must be deterministic:
/// identical input bytes produce identical stacks. `thread_safe` tells the
/// pipeline whether calls may run concurrently or must be serialized.
pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;
    fn layer_count(&self) -> usize;
    fn channels(&self) -> usize;
    fn patch_size(&self) -> usize;
    fn thread_safe(&self) -> bool {
        true
    }
    fn extract(&self, image: &Image) -> Result<LayerFeatureStack>;
}

/// Seeded random projection of non-overlapping pixel patches through tanh.
/// Stands in for a foundation-model backbone so the full pipeline runs and
/// tests without external weights.
pub struct SyntheticBackend {
    seed: u64,
    layers: usize,
    channels: usize,
    patch_size: usize,
    // per layer: (weights d x (ps*ps*3), bias d), all f32
    projections: Vec<(Vec<f32>, Vec<f32>)>,
}

impl SyntheticBackend {
    pub fn new(seed: u64, layers: usize, channels: usize, patch_size: usize) -> Result<Self> {
        if layers < 2 || layers % 2 != 0 {
            return Err(SnarmError::config(format!(
                "encoder.layers must be even and >= 2, got {layers}"
            )));
        }
        if channels == 0 || patch_size == 0 {
            return Err(SnarmError::config(
                "encoder.channels and encoder.patch_size must be positive",
            ));
        }
        let fan_in = patch_size * patch_size * 3;
        let scale = 1.0 / (fan_in as f64).sqrt();
        let projections = (0..layers)
            .map(|l| {
                let mut rng: ChaCha8Rng = seeding::substream(seed, "encoder-layer", l as u64);
                let weights: Vec<f32> = (0..channels * fan_in)
                    .map(|_| (seeding::normal(&mut rng) * scale) as f32)
                    .collect();
                let bias: Vec<f32> = (0..channels)
                    .map(|_| (seeding::normal(&mut rng) * 0.1) as f32)
                    .collect();
                (weights, bias)
            })
            .collect();
        Ok(SyntheticBackend {
            seed,
            layers,
            channels,
            patch_size,
            projections,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

impl EncoderBackend for SyntheticBackend {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn layer_count(&self) -> usize {
        self.layers
    }

    fn channels(&self) -> usize {
        self.channels
    }

    fn patch_size(&self) -> usize {
        self.patch_size
    }

    fn extract(&self, image: &Image) -> Result<LayerFeatureStack> {
        let ps = self.patch_size;
        if image.h % ps != 0 || image.w % ps != 0 {
            return Err(SnarmError::Backend {
                backend: self.name().to_string(),
                message: format!(
                    "image {}x{} not divisible by patch size {ps}",
                    image.h, image.w
                ),
            });
        }
        let (gh, gw) = (image.h / ps, image.w / ps);
        let fan_in = ps * ps * 3;
        let mut patch = vec![0f32; fan_in];
        let mut layers = vec![Grid3::zeros(gh, gw, self.channels); self.layers];
        for pi in 0..gh {
            for pj in 0..gw {
                let mut n = 0;
                for di in 0..ps {
                    let row = (pi * ps + di) * image.w;
                    for dj in 0..ps {
                        let base = (row + pj * ps + dj) * 3;
                        patch[n] = image.pixels[base] as f32;
                        patch[n + 1] = image.pixels[base + 1] as f32;
                        patch[n + 2] = image.pixels[base + 2] as f32;
                        n += 3;
                    }
                }
                for (l, (weights, bias)) in self.projections.iter().enumerate() {
                    let cell = layers[l].cell_mut(pi, pj);
                    for (o, out) in cell.iter_mut().enumerate() {
                        let mut acc = bias[o];
                        let row = &weights[o * fan_in..(o + 1) * fan_in];
                        for (wv, xv) in row.iter().zip(&patch) {
                            acc += wv * xv;
                        }
                        *out = acc.tanh() as f64;
                    }
                }
            }
        }
        LayerFeatureStack::new(layers)
    }
}

pub fn extract(image: &Image, backend: &dyn EncoderBackend) -> Result<LayerFeatureStack> {
    backend.extract(image)
}

/// Average the early and late halves of the stack, concatenate channel-wise,
/// then apply 3x3 stride-1 mean pooling with reflect padding. Accumulation in
/// f32 keeps the result representable in the 32-bit container.
pub fn fuse(stack: &LayerFeatureStack, image_h: usize, image_w: usize) -> Result<PatchFeatureGrid> {
    let l = stack.layers.len();
    if l % 2 != 0 {
        return Err(SnarmError::data(format!(
            "fuse requires an even layer count, got {l}"
        )));
    }
    let (h, w, c) = (stack.layers[0].h, stack.layers[0].w, stack.layers[0].c);
    let half = l / 2;
    let inv = 1.0f32 / half as f32;
    let mut fused = Grid3::zeros(h, w, 2 * c);
    for i in 0..h {
        for j in 0..w {
            let dst = fused.cell_mut(i, j);
            for k in 0..c {
                let mut early = 0f32;
                let mut late = 0f32;
                for layer in &stack.layers[..half] {
                    early += layer.at(i, j, k) as f32;
                }
                for layer in &stack.layers[half..] {
                    late += layer.at(i, j, k) as f32;
                }
                dst[k] = (early * inv) as f64;
                dst[c + k] = (late * inv) as f64;
            }
        }
    }
    let pooled = mean_pool3_reflect(&fused);
    Ok(PatchFeatureGrid {
        grid: pooled,
        geometry: PatchGeometry {
            image_h,
            image_w,
            grid_h: h,
            grid_w: w,
        },
    })
}

/// Depthwise 3x3 mean pooling, stride 1, reflect padding, f32 accumulation.
fn mean_pool3_reflect(grid: &Grid3) -> Grid3 {
    let (h, w, c) = (grid.h, grid.w, grid.c);
    let reflect = |i: isize, n: usize| -> usize {
        if n == 1 {
            return 0;
        }
        let n = n as isize;
        let period = 2 * (n - 1);
        let mut m = i % period;
        if m < 0 {
            m += period;
        }
        if m >= n {
            m = period - m;
        }
        m as usize
    };
    let third = 1.0f32 / 9.0f32;
    let mut out = Grid3::zeros(h, w, c);
    for i in 0..h {
        for j in 0..w {
            let dst = out.cell_mut(i, j);
            for di in -1isize..=1 {
                let si = reflect(i as isize + di, h);
                for dj in -1isize..=1 {
                    let sj = reflect(j as isize + dj, w);
                    let src = grid.cell(si, sj);
                    for k in 0..c {
                        dst[k] += src[k];
                    }
                }
            }
            for v in dst.iter_mut() {
                *v = (*v as f32 * third) as f64;
            }
        }
    }
    out
}

/// Bilinear upsample to (target_h, target_w); the returned grid's row-major
/// cells are the M = target_h * target_w descriptors.
pub fn flatten_features(
    grid: &PatchFeatureGrid,
    target_h: usize,
    target_w: usize,
) -> Result<PatchFeatureGrid> {
    if target_h < grid.grid().h || target_w < grid.grid().w {
        return Err(SnarmError::config(format!(
            "flatten target {}x{} below source {}x{}",
            target_h,
            target_w,
            grid.grid().h,
            grid.grid().w
        )));
    }
    let up = if target_h == grid.grid().h && target_w == grid.grid().w {
        grid.grid.clone()
    } else {
        BilinearPlan::new(grid.grid.h, grid.grid.w, target_h, target_w).apply3(&grid.grid)
    };
    Ok(PatchFeatureGrid {
        grid: up,
        geometry: PatchGeometry {
            image_h: grid.geometry.image_h,
            image_w: grid.geometry.image_w,
            grid_h: target_h,
            grid_w: target_w,
        },
    })
}

impl PatchFeatureGrid {
    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }
}

/// Flat binary container: little-endian u32 (h, w, c) header then row-major
/// 32-bit floats.
pub fn write_feature_grid(path: &Path, grid: &PatchFeatureGrid) -> Result<()> {
    let g = &grid.grid;
    let mut buf = Vec::with_capacity(12 + g.data.len() * 4 + 16);
    buf.extend_from_slice(&(g.h as u32).to_le_bytes());
    buf.extend_from_slice(&(g.w as u32).to_le_bytes());
    buf.extend_from_slice(&(g.c as u32).to_le_bytes());
    for v in &g.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    // geometry trailer so cached grids keep their pixel footprint
    buf.extend_from_slice(&(grid.geometry.image_h as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.geometry.image_w as u32).to_le_bytes());
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_feature_grid(path: &Path) -> Result<PatchFeatureGrid> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 12 {
        return Err(SnarmError::data(format!(
            "feature container {} truncated",
            path.display()
        )));
    }
    let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize;
    let (h, w, c) = (u32_at(0), u32_at(4), u32_at(8));
    let need = 12 + h * w * c * 4 + 8;
    if bytes.len() != need {
        return Err(SnarmError::data(format!(
            "feature container {}: expected {} bytes, got {}",
            path.display(),
            need,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(h * w * c);
    for n in 0..h * w * c {
        let off = 12 + n * 4;
        data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
    }
    let image_h = u32_at(12 + h * w * c * 4);
    let image_w = u32_at(12 + h * w * c * 4 + 4);
    Ok(PatchFeatureGrid {
        grid: Grid3::from_vec(h, w, c, data)?,
        geometry: PatchGeometry {
            image_h,
            image_w,
            grid_h: h,
            grid_w: w,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checkerboard(n: usize) -> Image {
        let mut pixels = vec![0.0; n * n * 3];
        for i in 0..n {
            for j in 0..n {
                let v = if (i + j) % 2 == 0 { 1.0 } else { 0.0 };
                let base = (i * n + j) * 3;
                pixels[base] = v;
                pixels[base + 1] = v;
                pixels[base + 2] = v;
            }
        }
        Image::new(n, n, pixels, "checker").unwrap()
    }

    #[test]
    fn preprocess_noop_when_dims_match() {
        let img = checkerboard(8);
        let out = preprocess(&img, 8, 8).unwrap();
        assert_eq!(out.pixels, img.pixels);
    }

    #[test]
    fn preprocess_center_crop_of_identity_resize() {
        // 4x4 checkerboard, resize=4 (identity), crop=2 -> center block rows/cols 1..3
        let img = checkerboard(4);
        let out = preprocess(&img, 4, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(out.pixel(i, j), img.pixel(i + 1, j + 1));
            }
        }
    }

    #[test]
    fn preprocess_output_size() {
        let img = checkerboard(16);
        let out = preprocess(&img, 448 / 8, 392 / 8).unwrap();
        assert_eq!((out.h, out.w), (49, 49));
    }

    #[test]
    fn preprocess_rejects_tiny_input() {
        let img = Image::new(1, 4, vec![0.0; 12], "tiny").unwrap();
        assert!(preprocess(&img, 4, 4).is_err());
    }

    #[test]
    fn synthetic_backend_shapes_and_determinism() {
        // 392x392 with patch 14 -> 28x28 grids
        let backend = SyntheticBackend::new(7, 8, 32, 14).unwrap();
        let img = Image::new(392, 392, vec![0.25; 392 * 392 * 3], "flat").unwrap();
        let a = backend.extract(&img).unwrap();
        assert_eq!(a.layers.len(), 8);
        assert_eq!((a.layers[0].h, a.layers[0].w, a.layers[0].c), (28, 28, 32));
        let b = backend.extract(&img).unwrap();
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            assert_eq!(la.data, lb.data);
        }
    }

    #[test]
    fn synthetic_backend_zero_image_gives_constant_grids() {
        let backend = SyntheticBackend::new(3, 4, 8, 4).unwrap();
        let img = Image::new(8, 8, vec![0.0; 8 * 8 * 3], "zero").unwrap();
        let stack = backend.extract(&img).unwrap();
        for layer in &stack.layers {
            let first = layer.cell(0, 0).to_vec();
            for i in 0..layer.h {
                for j in 0..layer.w {
                    assert_eq!(layer.cell(i, j), &first[..]);
                }
            }
        }
    }

    #[test]
    fn fuse_means_of_halves_on_constant_layers() {
        // scalar-valued 1x1 layers 1,3,5,7 -> concat(2, 6); pooling is identity there
        let layers: Vec<Grid3> = [1.0, 3.0, 5.0, 7.0]
            .iter()
            .map(|&v| Grid3::from_vec(1, 1, 1, vec![v]).unwrap())
            .collect();
        let stack = LayerFeatureStack::new(layers).unwrap();
        let fused = fuse(&stack, 14, 14).unwrap();
        assert_eq!(fused.grid.c, 2);
        assert_eq!(fused.grid.data, vec![2.0, 6.0]);
    }

    #[test]
    fn fuse_l2_is_concat() {
        let a = Grid3::from_vec(1, 1, 2, vec![0.5, -0.25]).unwrap();
        let b = Grid3::from_vec(1, 1, 2, vec![0.125, 1.0]).unwrap();
        let stack = LayerFeatureStack::new(vec![a, b]).unwrap();
        let fused = fuse(&stack, 4, 4).unwrap();
        assert_eq!(fused.grid.data, vec![0.5, -0.25, 0.125, 1.0]);
    }

    #[test]
    fn fuse_rejects_odd_layer_count() {
        let g = Grid3::zeros(1, 1, 1);
        let stack = LayerFeatureStack {
            layers: vec![g.clone(), g.clone(), g],
        };
        assert!(fuse(&stack, 4, 4).is_err());
    }

    #[test]
    fn fuse_channel_law_for_all_even_l() {
        for l in [2usize, 4, 6, 8] {
            let layers = vec![Grid3::zeros(2, 2, 5); l];
            let stack = LayerFeatureStack::new(layers).unwrap();
            let fused = fuse(&stack, 8, 8).unwrap();
            assert_eq!(fused.grid.c, 10);
        }
    }

    #[test]
    fn flatten_identity_and_broadcast() {
        let grid = PatchFeatureGrid {
            grid: Grid3::from_vec(1, 1, 2, vec![3.0, 4.0]).unwrap(),
            geometry: PatchGeometry {
                image_h: 4,
                image_w: 4,
                grid_h: 1,
                grid_w: 1,
            },
        };
        let same = flatten_features(&grid, 1, 1).unwrap();
        assert_eq!(same.grid.data, grid.grid.data);
        let up = flatten_features(&grid, 2, 2).unwrap();
        assert_eq!(up.patch_count(), 4);
        for k in 0..4 {
            assert_eq!(up.descriptor(k), &[3.0, 4.0]);
        }
    }

    #[test]
    fn flatten_bilinear_center() {
        // 2x2 scalar grid [[a,b],[c,d]] to 3x3: center = mean
        let grid = PatchFeatureGrid {
            grid: Grid3::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            geometry: PatchGeometry {
                image_h: 8,
                image_w: 8,
                grid_h: 2,
                grid_w: 2,
            },
        };
        let up = flatten_features(&grid, 3, 3).unwrap();
        assert!((up.grid.at(1, 1, 0) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn feature_container_roundtrip_is_exact() {
        let backend = SyntheticBackend::new(11, 2, 4, 4).unwrap();
        let img = checkerboard(8);
        let fused = fuse(&backend.extract(&img).unwrap(), 8, 8).unwrap();
        let dir = std::env::temp_dir().join("snarm_feat_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("grid.sft");
        write_feature_grid(&path, &fused).unwrap();
        let back = read_feature_grid(&path).unwrap();
        assert_eq!(back.grid.data, fused.grid.data);
        assert_eq!(back.geometry, fused.geometry);
    }

    #[test]
    fn patch_geometry_rectangles_tile_the_image() {
        let geo = PatchGeometry {
            image_h: 64,
            image_w: 64,
            grid_h: 8,
            grid_w: 8,
        };
        assert_eq!(geo.rect(0, 0), (0, 8, 0, 8));
        assert_eq!(geo.rect(7, 7), (56, 64, 56, 64));
    }
}
