//! Dataset handling: the canonical on-disk layout
//! (`<cat>/train/good`, `<cat>/test/<defect>`, `<cat>/ground_truth/<defect>`)
//! and a seed-deterministic procedural generator that fills it with textured
//! images, planted defects and exact masks.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SnarmError};
use crate::metrics::BinaryMask;
use crate::pipeline::config::SynthSection;
use crate::pipeline::pnm;
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub category: String,
    pub split: Split,
    pub label: bool,
    pub defect: String,
    pub mask_path: Option<PathBuf>,
    pub mask_missing: bool,
}

impl ManifestEntry {
    /// Stable id: `<category>/<defect>/<stem>`.
    pub fn image_id(&self) -> String {
        let stem = self
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default();
        format!("{}/{}/{}", self.category, self.defect, stem)
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub categories: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    pub warnings: Vec<String>,
}

impl DatasetManifest {
    pub fn train_entries(&self, category: &str) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.split == Split::Train && e.category == category)
            .collect()
    }

    pub fn test_entries(&self, category: &str) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.split == Split::Test && e.category == category)
            .collect()
    }
}

const IMAGE_EXTS: [&str; 3] = ["ppm", "pgm", "png"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .map(|e| IMAGE_EXTS.contains(&e.to_string_lossy().to_lowercase().as_str()))
        .unwrap_or(false)
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    out.sort();
    Ok(out)
}

/// Walk the canonical layout; lexicographic ordering throughout. Anomalous
/// test images without a mask are flagged (warning, not an error); images
/// directly under a category directory are a structural error.
pub fn load_manifest(root: &Path) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(SnarmError::data(format!(
            "dataset root {} does not exist",
            root.display()
        )));
    }
    let mut categories = Vec::new();
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for cat_dir in sorted_dir(root)? {
        if !cat_dir.is_dir() {
            continue;
        }
        let category = cat_dir.file_name().unwrap().to_string_lossy().to_string();
        for item in sorted_dir(&cat_dir)? {
            if item.is_file() && is_image(&item) {
                return Err(SnarmError::data(format!(
                    "malformed layout: image {} sits directly under category `{}` \
                     (expected train/good or test/<defect> subdirectories)",
                    item.display(),
                    category
                )));
            }
        }
        categories.push(category.clone());

        let train_good = cat_dir.join("train").join("good");
        if train_good.is_dir() {
            for img in sorted_dir(&train_good)? {
                if img.is_file() && is_image(&img) {
                    entries.push(ManifestEntry {
                        path: img,
                        category: category.clone(),
                        split: Split::Train,
                        label: false,
                        defect: "good".to_string(),
                        mask_path: None,
                        mask_missing: false,
                    });
                }
            }
        }

        let test_dir = cat_dir.join("test");
        if test_dir.is_dir() {
            for defect_dir in sorted_dir(&test_dir)? {
                if !defect_dir.is_dir() {
                    continue;
                }
                let defect = defect_dir.file_name().unwrap().to_string_lossy().to_string();
                let anomalous = defect != "good";
                for img in sorted_dir(&defect_dir)? {
                    if !(img.is_file() && is_image(&img)) {
                        continue;
                    }
                    let stem = img.file_stem().unwrap().to_string_lossy().to_string();
                    let mut mask_path = None;
                    let mut mask_missing = false;
                    if anomalous {
                        let candidates = IMAGE_EXTS.iter().map(|ext| {
                            cat_dir
                                .join("ground_truth")
                                .join(&defect)
                                .join(format!("{stem}_mask.{ext}"))
                        });
                        mask_path = candidates.into_iter().find(|p| p.is_file());
                        if mask_path.is_none() {
                            mask_missing = true;
                            warnings.push(format!(
                                "missing mask for anomalous test image {}",
                                img.display()
                            ));
                        }
                    }
                    entries.push(ManifestEntry {
                        path: img,
                        category: category.clone(),
                        split: Split::Test,
                        label: anomalous,
                        defect: defect.clone(),
                        mask_path,
                        mask_missing,
                    });
                }
            }
        }
    }
    if categories.is_empty() {
        return Err(SnarmError::data(format!(
            "no categories found under {}",
            root.display()
        )));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        categories,
        entries,
        warnings,
    })
}

/// Load a mask image as a binary map (0 = normal, nonzero = anomalous).
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    match pnm::read_pnm(path)? {
        pnm::Pnm::Gray8 { w, h, data } => Ok(BinaryMask {
            h,
            w,
            data: data.iter().map(|&v| v > 127).collect(),
        }),
        pnm::Pnm::Gray16 { w, h, data } => Ok(BinaryMask {
            h,
            w,
            data: data.iter().map(|&v| v > 32767).collect(),
        }),
        pnm::Pnm::Rgb8 { w, h, data } => Ok(BinaryMask {
            h,
            w,
            data: data.chunks_exact(3).map(|px| px[0] > 127).collect(),
        }),
    }
}

/// Load an RGB image as [0,1] pixels.
pub fn load_image(path: &Path) -> Result<crate::encoder::Image> {
    let id = path.to_string_lossy().to_string();
    match pnm::read_pnm(path)? {
        pnm::Pnm::Rgb8 { w, h, data } => {
            let pixels = data.iter().map(|&v| v as f64 / 255.0).collect();
            crate::encoder::Image::new(h, w, pixels, id)
        }
        pnm::Pnm::Gray8 { w, h, data } => {
            let mut pixels = Vec::with_capacity(w * h * 3);
            for &v in &data {
                let f = v as f64 / 255.0;
                pixels.extend_from_slice(&[f, f, f]);
            }
            crate::encoder::Image::new(h, w, pixels, id)
        }
        pnm::Pnm::Gray16 { w, h, data } => {
            let mut pixels = Vec::with_capacity(w * h * 3);
            for &v in &data {
                let f = v as f64 / 65535.0;
                pixels.extend_from_slice(&[f, f, f]);
            }
            crate::encoder::Image::new(h, w, pixels, id)
        }
    }
}

// --- synthetic dataset generation ---

#[derive(Debug, Clone, Copy)]
enum Texture {
    Stripes,
    Speckle,
    Blobs,
}

const TEXTURES: [Texture; 3] = [Texture::Stripes, Texture::Speckle, Texture::Blobs];
const DEFECT_NAMES: [&str; 3] = ["blotch", "patch", "scratch"];

struct Palette {
    low: [f64; 3],
    high: [f64; 3],
}

fn palette_for(seed: u64, cat: usize) -> Palette {
    let mut rng = seeding::substream(seed, "palette", cat as u64);
    let mut low = [0.0; 3];
    let mut high = [0.0; 3];
    for c in 0..3 {
        low[c] = rng.gen_range(0.10..0.40);
        high[c] = rng.gen_range(0.60..0.90);
    }
    Palette { low, high }
}

fn lerp(p: &Palette, t: f64) -> [f64; 3] {
    [
        p.low[0] + (p.high[0] - p.low[0]) * t,
        p.low[1] + (p.high[1] - p.low[1]) * t,
        p.low[2] + (p.high[2] - p.low[2]) * t,
    ]
}

fn render_texture(
    texture: Texture,
    palette: &Palette,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let mut pixels = vec![0.0; size * size * 3];
    match texture {
        Texture::Stripes => {
            let period = rng.gen_range(8.0..16.0);
            let angle: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let phase = rng.gen_range(0.0..period);
            let (ca, sa) = (angle.cos(), angle.sin());
            for i in 0..size {
                for j in 0..size {
                    let proj = ca * j as f64 + sa * i as f64;
                    let t = 0.5 + 0.5 * (std::f64::consts::TAU * (proj + phase) / period).sin();
                    let c = lerp(palette, t);
                    let base = (i * size + j) * 3;
                    pixels[base..base + 3].copy_from_slice(&c);
                }
            }
        }
        Texture::Speckle => {
            let cells = 8;
            let lattice: Vec<f64> = (0..(cells + 1) * (cells + 1))
                .map(|_| rng.gen::<f64>())
                .collect();
            for i in 0..size {
                for j in 0..size {
                    let fi = i as f64 * cells as f64 / size as f64;
                    let fj = j as f64 * cells as f64 / size as f64;
                    let (i0, j0) = (fi as usize, fj as usize);
                    let (di, dj) = (fi - i0 as f64, fj - j0 as f64);
                    let idx = |a: usize, b: usize| lattice[a * (cells + 1) + b];
                    let t = idx(i0, j0) * (1.0 - di) * (1.0 - dj)
                        + idx(i0, j0 + 1) * (1.0 - di) * dj
                        + idx(i0 + 1, j0) * di * (1.0 - dj)
                        + idx(i0 + 1, j0 + 1) * di * dj;
                    let c = lerp(palette, t);
                    let base = (i * size + j) * 3;
                    pixels[base..base + 3].copy_from_slice(&c);
                }
            }
        }
        Texture::Blobs => {
            let blobs: Vec<(f64, f64, f64, f64)> = (0..5)
                .map(|_| {
                    (
                        rng.gen_range(0.0..size as f64),
                        rng.gen_range(0.0..size as f64),
                        rng.gen_range(size as f64 / 10.0..size as f64 / 4.0),
                        if rng.gen_bool(0.5) { 0.6 } else { -0.6 },
                    )
                })
                .collect();
            for i in 0..size {
                for j in 0..size {
                    let mut t = 0.5;
                    for &(ci, cj, sigma, amp) in &blobs {
                        let d2 = (i as f64 - ci).powi(2) + (j as f64 - cj).powi(2);
                        t += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                    let c = lerp(palette, t.clamp(0.0, 1.0));
                    let base = (i * size + j) * 3;
                    pixels[base..base + 3].copy_from_slice(&c);
                }
            }
        }
    }
    // per-pixel sensor noise
    for v in pixels.iter_mut() {
        *v = (*v + 0.02 * seeding::normal(rng)).clamp(0.0, 1.0);
    }
    pixels
}

/// Rasterize a defect with pixel area within [min_frac, max_frac] of the
/// image; returns the affected pixel indices.
fn rasterize_defect(
    kind: usize,
    size: usize,
    min_frac: f64,
    max_frac: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let total = (size * size) as f64;
    let min_px = (min_frac * total).ceil() as usize;
    let max_px = (max_frac * total).floor() as usize;
    let target = rng.gen_range(min_px..=max_px.max(min_px)) as f64;
    let ci = rng.gen_range(0.25 * size as f64..0.75 * size as f64);
    let cj = rng.gen_range(0.25 * size as f64..0.75 * size as f64);

    let rasterize = |scale: f64, rng_state: (f64, f64, f64)| -> Vec<usize> {
        let mut px = Vec::new();
        match kind {
            0 => {
                // ellipse
                let (aspect, _, _) = rng_state;
                let ra = (target / std::f64::consts::PI * aspect).sqrt() * scale;
                let rb = (target / (std::f64::consts::PI * aspect)).sqrt() * scale;
                for i in 0..size {
                    for j in 0..size {
                        let di = (i as f64 - ci) / ra.max(0.5);
                        let dj = (j as f64 - cj) / rb.max(0.5);
                        if di * di + dj * dj <= 1.0 {
                            px.push(i * size + j);
                        }
                    }
                }
            }
            1 => {
                // rectangle
                let (aspect, _, _) = rng_state;
                let rh = (target * aspect).sqrt() * scale;
                let rw = (target / aspect).sqrt() * scale;
                for i in 0..size {
                    for j in 0..size {
                        if (i as f64 - ci).abs() <= rh / 2.0 && (j as f64 - cj).abs() <= rw / 2.0 {
                            px.push(i * size + j);
                        }
                    }
                }
            }
            _ => {
                // thick line segment through (ci,cj)
                let (angle, len_frac, _) = rng_state;
                let len = size as f64 * len_frac;
                let thick = (target / len).max(1.5) * scale;
                let (dx, dy) = (angle.cos(), angle.sin());
                let (x0, y0) = (cj - dx * len / 2.0, ci - dy * len / 2.0);
                let (x1, y1) = (cj + dx * len / 2.0, ci + dy * len / 2.0);
                for i in 0..size {
                    for j in 0..size {
                        let (px_, py_) = (j as f64, i as f64);
                        let t = (((px_ - x0) * (x1 - x0) + (py_ - y0) * (y1 - y0))
                            / (len * len))
                            .clamp(0.0, 1.0);
                        let (qx, qy) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
                        let d = ((px_ - qx).powi(2) + (py_ - qy).powi(2)).sqrt();
                        if d <= thick / 2.0 {
                            px.push(i * size + j);
                        }
                    }
                }
            }
        }
        px
    };

    let state = (
        rng.gen_range(0.5..2.0),
        rng.gen_range(0.4..0.7),
        rng.gen_range(0.0..std::f64::consts::PI),
    );
    let state = if kind == 2 { (state.2, state.1, state.0) } else { state };
    let mut scale = 1.0;
    let mut px = rasterize(scale, state);
    for _ in 0..64 {
        if px.len() > max_px {
            scale *= 0.92;
        } else if px.len() < min_px {
            scale *= 1.09;
        } else {
            break;
        }
        px = rasterize(scale, state);
    }
    px
}

fn apply_defect(pixels: &mut [f64], defect_px: &[usize], rng: &mut ChaCha8Rng) {
    // push every pixel toward the far side of the intensity range so the
    // contrast survives clamping regardless of the local base value
    for &p in defect_px {
        let lum = (pixels[p * 3] + pixels[p * 3 + 1] + pixels[p * 3 + 2]) / 3.0;
        let shift = if lum > 0.5 { -0.45 } else { 0.45 };
        for c in 0..3 {
            let v = pixels[p * 3 + c] + shift + 0.05 * seeding::normal(rng);
            pixels[p * 3 + c] = v.clamp(0.0, 1.0);
        }
    }
}

fn to_rgb8(pixels: &[f64]) -> Vec<u8> {
    pixels
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Generate the on-disk dataset; fully determined by (spec, seed).
pub fn generate_synthetic_dataset(
    spec: &SynthSection,
    seed: u64,
    root: &Path,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(root)?;
    let size = spec.image_size;
    for cat in 0..spec.categories {
        let category = format!("cat{cat:02}");
        let texture = TEXTURES[cat % TEXTURES.len()];
        let palette = palette_for(seed, cat);
        let cat_dir = root.join(&category);
        let train_dir = cat_dir.join("train").join("good");
        std::fs::create_dir_all(&train_dir)?;

        for idx in 0..spec.train_per_category {
            let mut rng = seeding::substream(seed, "synth-train", (cat * 100_000 + idx) as u64);
            let pixels = render_texture(texture, &palette, size, &mut rng);
            pnm::write_ppm8(
                &train_dir.join(format!("{idx:03}.ppm")),
                size,
                size,
                &to_rgb8(&pixels),
            )?;
        }

        let n_defect = spec.test_per_category / 2;
        let n_good = spec.test_per_category - n_defect;
        let test_good = cat_dir.join("test").join("good");
        std::fs::create_dir_all(&test_good)?;
        for idx in 0..n_good {
            let mut rng = seeding::substream(seed, "synth-test-good", (cat * 100_000 + idx) as u64);
            let pixels = render_texture(texture, &palette, size, &mut rng);
            pnm::write_ppm8(
                &test_good.join(format!("{idx:03}.ppm")),
                size,
                size,
                &to_rgb8(&pixels),
            )?;
        }
        for idx in 0..n_defect {
            let mut rng =
                seeding::substream(seed, "synth-test-defect", (cat * 100_000 + idx) as u64);
            let defect_kind = idx % DEFECT_NAMES.len();
            let defect = DEFECT_NAMES[defect_kind];
            let test_dir = cat_dir.join("test").join(defect);
            let gt_dir = cat_dir.join("ground_truth").join(defect);
            std::fs::create_dir_all(&test_dir)?;
            std::fs::create_dir_all(&gt_dir)?;
            let mut pixels = render_texture(texture, &palette, size, &mut rng);
            let px = rasterize_defect(
                defect_kind,
                size,
                spec.defect_min_frac,
                spec.defect_max_frac,
                &mut rng,
            );
            apply_defect(&mut pixels, &px, &mut rng);
            let mut mask = vec![0u8; size * size];
            for &p in &px {
                mask[p] = 255;
            }
            pnm::write_ppm8(
                &test_dir.join(format!("{idx:03}.ppm")),
                size,
                size,
                &to_rgb8(&pixels),
            )?;
            pnm::write_pgm8(&gt_dir.join(format!("{idx:03}_mask.pgm")), size, size, &mask)?;
        }
    }
    load_manifest(root)
}

/// Select k train images per category for the few-shot regime, seeded.
pub fn fewshot_subset(
    manifest: &DatasetManifest,
    k: usize,
    seed: u64,
) -> Result<BTreeSet<PathBuf>> {
    let mut keep = BTreeSet::new();
    for (cat_idx, cat) in manifest.categories.iter().enumerate() {
        let entries = manifest.train_entries(cat);
        if entries.is_empty() {
            return Err(SnarmError::data(format!("category {cat} has no train images")));
        }
        let mut indices: Vec<usize> = (0..entries.len()).collect();
        let mut rng = seeding::substream(seed, "fewshot", cat_idx as u64);
        // partial Fisher-Yates: first k slots
        let take = k.min(indices.len());
        for i in 0..take {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }
        for &i in indices.iter().take(take) {
            keep.insert(entries[i].path.clone());
        }
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_root(name: &str) -> PathBuf {
        let dir = std::env::temp_dir().join("snarm_dataset_test").join(name);
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn small_spec() -> SynthSection {
        SynthSection {
            categories: 2,
            train_per_category: 3,
            test_per_category: 4,
            image_size: 32,
            defect_min_frac: 0.02,
            defect_max_frac: 0.10,
        }
    }

    #[test]
    fn generator_layout_and_manifest() {
        let root = tmp_root("layout");
        let manifest = generate_synthetic_dataset(&small_spec(), 7, &root).unwrap();
        assert_eq!(manifest.categories, vec!["cat00", "cat01"]);
        assert_eq!(manifest.train_entries("cat00").len(), 3);
        let test = manifest.test_entries("cat00");
        assert_eq!(test.len(), 4);
        let anomalous: Vec<_> = test.iter().filter(|e| e.label).collect();
        assert_eq!(anomalous.len(), 2);
        for e in &anomalous {
            assert!(e.mask_path.is_some());
            assert!(!e.mask_missing);
            assert!(e.defect != "good");
        }
        assert!(manifest.warnings.is_empty());
    }

    #[test]
    fn generator_is_byte_deterministic() {
        let root_a = tmp_root("det_a");
        let root_b = tmp_root("det_b");
        generate_synthetic_dataset(&small_spec(), 42, &root_a).unwrap();
        generate_synthetic_dataset(&small_spec(), 42, &root_b).unwrap();
        let ma = load_manifest(&root_a).unwrap();
        for entry in &ma.entries {
            let rel = entry.path.strip_prefix(&root_a).unwrap();
            let a = std::fs::read(&entry.path).unwrap();
            let b = std::fs::read(root_b.join(rel)).unwrap();
            assert_eq!(a, b, "{}", rel.display());
        }
    }

    #[test]
    fn generator_respects_defect_area_bounds() {
        let root = tmp_root("area");
        let spec = small_spec();
        let manifest = generate_synthetic_dataset(&spec, 3, &root).unwrap();
        let total = (spec.image_size * spec.image_size) as f64;
        for e in manifest.entries.iter().filter(|e| e.label) {
            let mask = load_mask(e.mask_path.as_ref().unwrap()).unwrap();
            let area = mask.data.iter().filter(|&&b| b).count() as f64;
            let frac = area / total;
            assert!(
                frac >= spec.defect_min_frac && frac <= spec.defect_max_frac,
                "{}: {frac}",
                e.image_id()
            );
        }
    }

    #[test]
    fn empty_test_split_gives_train_only_manifest() {
        let root = tmp_root("train_only");
        let dir = root.join("catx").join("train").join("good");
        std::fs::create_dir_all(&dir).unwrap();
        pnm::write_ppm8(&dir.join("0.ppm"), 2, 2, &[128; 12]).unwrap();
        let manifest = load_manifest(&root).unwrap();
        assert_eq!(manifest.entries.len(), 1);
        assert_eq!(manifest.entries[0].split, Split::Train);
    }

    #[test]
    fn malformed_layout_is_a_structured_error() {
        let root = tmp_root("malformed");
        let dir = root.join("caty");
        std::fs::create_dir_all(&dir).unwrap();
        pnm::write_ppm8(&dir.join("stray.ppm"), 2, 2, &[0; 12]).unwrap();
        let err = load_manifest(&root).unwrap_err();
        assert!(err.to_string().contains("stray.ppm"), "{err}");
    }

    #[test]
    fn missing_mask_is_flagged_not_fatal() {
        let root = tmp_root("missing_mask");
        let test_dir = root.join("catz").join("test").join("hole");
        std::fs::create_dir_all(root.join("catz").join("train").join("good")).unwrap();
        std::fs::create_dir_all(&test_dir).unwrap();
        pnm::write_ppm8(&test_dir.join("0.ppm"), 2, 2, &[0; 12]).unwrap();
        let manifest = load_manifest(&root).unwrap();
        let entry = manifest.entries.iter().find(|e| e.label).unwrap();
        assert!(entry.mask_missing);
        assert_eq!(manifest.warnings.len(), 1);
    }

    #[test]
    fn fewshot_subset_is_seeded_and_sized() {
        let root = tmp_root("fewshot");
        let manifest = generate_synthetic_dataset(&small_spec(), 5, &root).unwrap();
        let a = fewshot_subset(&manifest, 2, 9).unwrap();
        let b = fewshot_subset(&manifest, 2, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4); // 2 per category
        let c = fewshot_subset(&manifest, 2, 10).unwrap();
        assert_eq!(c.len(), 4);
    }
}
