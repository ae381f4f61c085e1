//! On-disk datasets, subset sampling, synthetic composition and the toy world.
//!
//! Layout of every dataset directory: `<root>/images/<id>.png` and
//! `<root>/labels/<id>.png`, labels being 8-bit single-channel PNGs.

mod toy;

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{composite, AlphaMatte, Grid, RgbImage, SegMask};
use crate::resample::resize_rgb;
use crate::seeding::{rng_for, tag};

pub use toy::{coarsen_mask, generate_toy_world, mean_local_variance, ToyConfig, ToyWorld, MATTE_DOMAIN, NATURAL_DOMAIN};

pub const IMAGES_DIR: &str = "images";
pub const LABELS_DIR: &str = "labels";
pub const MANIFEST_CACHE: &str = "manifest.jsonl";

/// What the label of an entry means.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    /// Natural image with a binary segmentation label.
    Seg,
    /// Foreground colours with their alpha matte, composited at training time.
    MatteFg,
    /// Already composited image with its exact alpha matte (evaluation sets).
    Composite,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub image: PathBuf,
    pub label: PathBuf,
    pub kind: SampleKind,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatteSample {
    pub fg: RgbImage,
    pub matte: AlphaMatte,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: RgbImage,
    pub seg: SegMask,
    pub source_id: String,
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_rgb_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    let mut data = vec![0.0; 3 * h * w];
    for (i, px) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = f64::from(px[c]) / 255.0;
        }
    }
    RgbImage::new(h, w, data)
}

pub fn write_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let (h, w) = img.dims();
    let mut raw = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            raw.extend(img.pixel(y, x).map(to_u8));
        }
    }
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer sized from dims");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

/// Reads a single-channel 8-bit label (colour files are converted to luma).
pub fn read_gray_png(path: &Path) -> Result<Grid<u8>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Grid::new(h, w, img.into_raw())
}

pub fn write_gray_png(path: &Path, grid: &Grid<u8>) -> Result<()> {
    let (h, w) = grid.dims();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, grid.values().to_vec()).expect("buffer sized from dims");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))
}

pub fn read_matte_png(path: &Path) -> Result<AlphaMatte> {
    AlphaMatte::from_grid(read_gray_png(path)?.map(|v| f64::from(v) / 255.0))
}

pub fn write_matte_png(path: &Path, matte: &AlphaMatte) -> Result<()> {
    write_gray_png(path, &matte.grid().map(to_u8))
}

/// Segmentation labels are stored as 0/255; anything at or above 128 counts as foreground.
pub fn read_seg_png(path: &Path) -> Result<SegMask> {
    SegMask::from_grid(read_gray_png(path)?.map(|v| u8::from(v >= 128)))
}

pub fn write_seg_png(path: &Path, seg: &SegMask) -> Result<()> {
    write_gray_png(path, &seg.grid().map(|v| v * 255))
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Lists every `(image, label)` pair under `root`, sorted by id.
pub fn load_manifest(root: &Path, kind: SampleKind) -> Result<DatasetManifest> {
    let images = root.join(IMAGES_DIR);
    let labels = root.join(LABELS_DIR);
    if !images.is_dir() {
        if root.is_dir() {
            return Err(Error::EmptyDataset(root.to_path_buf()));
        }
        return Err(Error::Manifest(format!("{} is not a dataset directory", root.display())));
    }
    let ids = png_ids(&images)?;
    if ids.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    let mut entries = Vec::with_capacity(ids.len());
    for id in ids {
        let image = images.join(format!("{id}.png"));
        let label = labels.join(format!("{id}.png"));
        if !label.is_file() {
            return Err(Error::Manifest(format!(
                "image {} has no label (expected {})",
                image.display(),
                label.display()
            )));
        }
        entries.push(ManifestEntry { id, image, label, kind });
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        seed: 0,
    })
}

/// Writes the manifest as JSON lines `{id, image, label, kind}`.
pub fn write_manifest_cache(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for entry in &manifest.entries {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSON-lines manifest cache, checking that every listed file exists.
pub fn read_manifest_cache(root: &Path, path: &Path) -> Result<DatasetManifest> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut entries = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), n + 1)))?;
        for p in [&entry.image, &entry.label] {
            if !p.is_file() {
                return Err(Error::Manifest(format!("listed file {} does not exist", p.display())));
            }
        }
        entries.push(entry);
    }
    if entries.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        entries,
        seed: 0,
    })
}

/// Deterministic subset of `count` entries. For a fixed seed, smaller subsets are
/// contained in larger ones; entries keep their manifest order.
pub fn sample_subset(manifest: &DatasetManifest, count: usize, seed: u64) -> Result<DatasetManifest> {
    let n = manifest.entries.len();
    if count > n {
        return Err(Error::invalid(format!(
            "subset of {count} requested from a dataset of {n} entries ({})",
            manifest.root.display()
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[tag("subset")]));
    let mut chosen = order[..count].to_vec();
    chosen.sort_unstable();
    Ok(DatasetManifest {
        root: manifest.root.clone(),
        entries: chosen.into_iter().map(|i| manifest.entries[i].clone()).collect(),
        seed,
    })
}

/// Image and exact matte of a composite (or foreground) entry; segmentation
/// labels are returned as hard mattes.
pub fn load_image_pair(entry: &ManifestEntry) -> Result<(RgbImage, AlphaMatte)> {
    let image = read_rgb_png(&entry.image)?;
    let matte = match entry.kind {
        SampleKind::Seg => AlphaMatte::from(&read_seg_png(&entry.label)?),
        SampleKind::MatteFg | SampleKind::Composite => read_matte_png(&entry.label)?,
    };
    if image.dims() != matte.dims() {
        return Err(Error::Manifest(format!(
            "{}: image is {:?} but label is {:?}",
            entry.id,
            image.dims(),
            matte.dims()
        )));
    }
    Ok((image, matte))
}

pub fn load_matte_samples(manifest: &DatasetManifest) -> Result<Vec<MatteSample>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let (fg, matte) = load_image_pair(e)?;
            Ok(MatteSample {
                fg,
                matte,
                source_id: e.id.clone(),
            })
        })
        .collect()
}

pub fn load_seg_samples(manifest: &DatasetManifest) -> Result<Vec<SegSample>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let image = read_rgb_png(&e.image)?;
            let seg = read_seg_png(&e.label)?;
            if image.dims() != seg.dims() {
                return Err(Error::Manifest(format!("{}: image and label sizes differ", e.id)));
            }
            Ok(SegSample {
                image,
                seg,
                source_id: e.id.clone(),
            })
        })
        .collect()
}

/// Loads every PNG in `<dir>/images` (or directly in `dir` when that is absent).
pub fn load_backgrounds(dir: &Path) -> Result<Vec<RgbImage>> {
    let images = dir.join(IMAGES_DIR);
    let base = if images.is_dir() { images } else { dir.to_path_buf() };
    let ids = png_ids(&base)?;
    if ids.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    ids.par_iter()
        .map(|id| read_rgb_png(&base.join(format!("{id}.png"))))
        .collect()
}

/// Scales `bg` so its shorter side covers the target, then takes the centre crop.
pub fn fit_background(bg: &RgbImage, h: usize, w: usize) -> RgbImage {
    let (bh, bw) = bg.dims();
    if (bh, bw) == (h, w) {
        return bg.clone();
    }
    let scale = (h as f64 / bh as f64).max(w as f64 / bw as f64);
    let sh = ((bh as f64 * scale).round() as usize).max(h);
    let sw = ((bw as f64 * scale).round() as usize).max(w);
    let scaled = resize_rgb(bg, sh, sw);
    scaled.crop((sh - h) / 2, (sw - w) / 2, h, w)
}

/// Background index used for sample `index` under `seed`.
pub fn background_choice(seed: u64, index: u64, n_backgrounds: usize) -> usize {
    rng_for(seed, &[tag("background"), index]).gen_range(0..n_backgrounds)
}

/// Composites one foreground onto its seeded background.
pub fn compose_sample(sample: &MatteSample, backgrounds: &[RgbImage], seed: u64, index: u64) -> Result<(RgbImage, AlphaMatte)> {
    if backgrounds.is_empty() {
        return Err(Error::invalid("background pool is empty"));
    }
    let (h, w) = sample.fg.dims();
    let bg = fit_background(&backgrounds[background_choice(seed, index, backgrounds.len())], h, w);
    Ok((composite(&sample.fg, &bg, &sample.matte)?, sample.matte.clone()))
}

pub fn compose_matte_batch(samples: &[MatteSample], backgrounds: &[RgbImage], seed: u64) -> Result<Vec<(RgbImage, AlphaMatte)>> {
    if backgrounds.is_empty() {
        return Err(Error::invalid("background pool is empty"));
    }
    samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| compose_sample(s, backgrounds, seed, i as u64))
        .collect()
}

/// Writes `(image, matte)` pairs as a composite dataset directory.
pub fn write_composite_dataset(root: &Path, items: &[(String, RgbImage, AlphaMatte)]) -> Result<()> {
    fs::create_dir_all(root.join(IMAGES_DIR))?;
    fs::create_dir_all(root.join(LABELS_DIR))?;
    for (id, img, matte) in items {
        write_rgb_png(&root.join(IMAGES_DIR).join(format!("{id}.png")), img)?;
        write_matte_png(&root.join(LABELS_DIR).join(format!("{id}.png")), matte)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pair(root: &Path, id: &str, label: bool) {
        fs::create_dir_all(root.join(IMAGES_DIR)).unwrap();
        fs::create_dir_all(root.join(LABELS_DIR)).unwrap();
        write_rgb_png(&root.join(IMAGES_DIR).join(format!("{id}.png")), &RgbImage::filled(4, 5, [0.2, 0.4, 0.6])).unwrap();
        if label {
            write_matte_png(&root.join(LABELS_DIR).join(format!("{id}.png")), &AlphaMatte::filled(4, 5, 0.5)).unwrap();
        }
    }

    #[test]
    fn manifest_lists_pairs_in_order() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["c", "a", "b"] {
            write_pair(dir.path(), id, true);
        }
        let m = load_manifest(dir.path(), SampleKind::Composite).unwrap();
        let ids: Vec<_> = m.entries.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids, ["a", "b", "c"]);
        assert_eq!(m, load_manifest(dir.path(), SampleKind::Composite).unwrap());
    }

    #[test]
    fn missing_label_names_the_image() {
        let dir = tempfile::tempdir().unwrap();
        write_pair(dir.path(), "a", true);
        write_pair(dir.path(), "lonely", false);
        let err = load_manifest(dir.path(), SampleKind::Seg).unwrap_err().to_string();
        assert!(err.contains("lonely.png"), "{err}");
    }

    #[test]
    fn empty_directory_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join(IMAGES_DIR)).unwrap();
        assert!(matches!(load_manifest(dir.path(), SampleKind::Seg), Err(Error::EmptyDataset(_))));
        let bare = tempfile::tempdir().unwrap();
        assert!(matches!(load_manifest(bare.path(), SampleKind::Seg), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["x", "y"] {
            write_pair(dir.path(), id, true);
        }
        let m = load_manifest(dir.path(), SampleKind::MatteFg).unwrap();
        let cache = dir.path().join(MANIFEST_CACHE);
        write_manifest_cache(&m, &cache).unwrap();
        assert_eq!(read_manifest_cache(dir.path(), &cache).unwrap(), m);
    }

    #[test]
    fn png_round_trip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn_clamped(3, 4, |y, x| [y as f64 / 3.0, x as f64 / 7.0, 0.123]);
        let p = dir.path().join("i.png");
        write_rgb_png(&p, &img).unwrap();
        let back = read_rgb_png(&p).unwrap();
        for (a, b) in img.values().iter().zip(back.values()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let seg = SegMask::from_fn(3, 3, |y, x| y == x);
        let q = dir.path().join("s.png");
        write_seg_png(&q, &seg).unwrap();
        assert_eq!(read_seg_png(&q).unwrap(), seg);
    }

    fn fake_manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::from("/nowhere"),
            entries: (0..n)
                .map(|i| ManifestEntry {
                    id: format!("{i:03}"),
                    image: PathBuf::from(format!("{i}.png")),
                    label: PathBuf::from(format!("{i}.png")),
                    kind: SampleKind::Seg,
                })
                .collect(),
            seed: 0,
        }
    }

    #[test]
    fn subsets_are_nested_and_exact() {
        let m = fake_manifest(300);
        let full = sample_subset(&m, 300, 7).unwrap();
        assert_eq!(full.entries, m.entries);
        assert!(sample_subset(&m, 0, 7).unwrap().entries.is_empty());
        let small = sample_subset(&m, 50, 7).unwrap();
        let big = sample_subset(&m, 200, 7).unwrap();
        assert_eq!(small.entries.len(), 50);
        assert!(small.entries.iter().all(|e| big.entries.contains(e)));
        assert!(sample_subset(&m, 301, 7).is_err());
    }

    #[test]
    fn single_background_composite_is_exact() {
        let fg = RgbImage::filled(2, 2, [1.0, 0.0, 0.0]);
        let bg = RgbImage::filled(2, 2, [0.0, 0.0, 1.0]);
        let matte = AlphaMatte::new(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        let s = MatteSample {
            fg: fg.clone(),
            matte: matte.clone(),
            source_id: "s".into(),
        };
        let out = compose_matte_batch(&[s], &[bg.clone()], 3).unwrap();
        assert_eq!(out[0].0, composite(&fg, &bg, &matte).unwrap());
        assert!(compose_matte_batch(&[], &[], 3).is_err());
    }

    #[test]
    fn background_is_center_cropped() {
        let bg = RgbImage::from_fn_clamped(4, 8, |_, x| [x as f64 / 7.0; 3]);
        let fit = fit_background(&bg, 4, 4);
        assert_eq!(fit.dims(), (4, 4));
        assert_eq!(fit.pixel(0, 0), bg.pixel(0, 2));
    }
}
