//! Dataset ingestion and materialization.
//!
//! Four sources share one interface: the crate's own array format (binary
//! samples plus a JSON manifest), a directory of PNG images with a label
//! index, the CIFAR-10 binary archive layout, and a deterministic synthetic
//! two-class generator for desk-scale experiments.

use std::collections::BTreeMap;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::Array4;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::ImageBatch;
use crate::error::{Error, Result};
use crate::rng::SeededNoise;

pub const ARRAY_MANIFEST: &str = "manifest.json";
pub const ARRAY_SAMPLES: &str = "samples.bin";
pub const ARRAY_LABELS: &str = "labels.bin";

/// Manifest of an on-disk array dataset: little-endian f64 samples in
/// (N, C, H, W) order plus optional u32 labels, both checksummed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayManifest {
    pub schema_version: u32,
    pub count: usize,
    pub shape: (usize, usize, usize),
    pub dtype: String,
    pub num_classes: Option<usize>,
    pub sha256_samples: String,
    pub sha256_labels: Option<String>,
    /// Provenance block: producing command, purifier echo, seed, source.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

/// Hash a file without loading it wholesale.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Write an array dataset atomically: everything lands in a staging
/// directory that is renamed into place only once complete.
pub fn write_array_dataset(
    dir: &Path,
    batch: &ImageBatch,
    num_classes: Option<usize>,
    provenance: serde_json::Value,
) -> Result<ArrayManifest> {
    if batch.is_empty() {
        return Err(Error::Domain("refusing to write an empty dataset".into()));
    }
    let parent = dir
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(parent)?;
    let staging = tempfile::tempdir_in(parent)?;

    let mut sample_bytes = Vec::with_capacity(batch.data().len() * 8);
    for &v in batch.data().iter() {
        sample_bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(staging.path().join(ARRAY_SAMPLES))?.write_all(&sample_bytes)?;
    let sha256_samples = sha256_hex(&sample_bytes);

    let sha256_labels = match batch.labels() {
        Some(labels) => {
            let mut label_bytes = Vec::with_capacity(labels.len() * 4);
            for &l in labels {
                label_bytes.extend_from_slice(&(l as u32).to_le_bytes());
            }
            std::fs::File::create(staging.path().join(ARRAY_LABELS))?.write_all(&label_bytes)?;
            Some(sha256_hex(&label_bytes))
        }
        None => None,
    };

    let manifest = ArrayManifest {
        schema_version: 1,
        count: batch.len(),
        shape: batch.image_shape(),
        dtype: "f64le".into(),
        num_classes,
        sha256_samples,
        sha256_labels,
        provenance,
    };
    std::fs::write(
        staging.path().join(ARRAY_MANIFEST),
        serde_json::to_string_pretty(&manifest)?,
    )?;

    if dir.exists() {
        return Err(Error::Domain(format!(
            "output directory {} already exists",
            dir.display()
        )));
    }
    // keep the staged dir alive through the rename
    let staged = staging.keep();
    std::fs::rename(&staged, dir)?;
    Ok(manifest)
}

pub fn read_array_manifest(dir: &Path) -> Result<ArrayManifest> {
    let text = std::fs::read_to_string(dir.join(ARRAY_MANIFEST))?;
    let manifest: ArrayManifest = serde_json::from_str(&text)?;
    if manifest.dtype != "f64le" {
        return Err(Error::Serde(format!("unsupported dtype {}", manifest.dtype)));
    }
    Ok(manifest)
}

fn read_array_rows(dir: &Path, manifest: &ArrayManifest, indices: &[usize]) -> Result<ImageBatch> {
    let (c, h, w) = manifest.shape;
    let row_len = c * h * w;
    let mut samples = std::fs::File::open(dir.join(ARRAY_SAMPLES))?;
    let mut data = Array4::zeros((indices.len(), c, h, w));
    let mut buf = vec![0u8; row_len * 8];
    for (row, &i) in indices.iter().enumerate() {
        if i >= manifest.count {
            return Err(Error::Domain(format!("sample index {i} out of range")));
        }
        samples.seek(SeekFrom::Start((i * row_len * 8) as u64))?;
        samples.read_exact(&mut buf)?;
        for (j, chunk) in buf.chunks_exact(8).enumerate() {
            data[[row, j / (h * w), (j / w) % h, j % w]] =
                f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    let labels = if dir.join(ARRAY_LABELS).exists() {
        let mut file = std::fs::File::open(dir.join(ARRAY_LABELS))?;
        let mut out = Vec::with_capacity(indices.len());
        let mut lbuf = [0u8; 4];
        for &i in indices {
            file.seek(SeekFrom::Start((i * 4) as u64))?;
            file.read_exact(&mut lbuf)?;
            out.push(u32::from_le_bytes(lbuf) as usize);
        }
        Some(out)
    } else {
        None
    };
    ImageBatch::new(data, labels)
}

/// Index file for a directory-of-images dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageDirIndex {
    pub num_classes: usize,
    pub samples: Vec<ImageDirEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageDirEntry {
    pub file: String,
    pub label: usize,
}

pub const IMAGE_DIR_INDEX: &str = "labels.json";

/// Write a batch as zero-padded PNGs (`000000.png`, ...). Grayscale for one
/// channel, RGB for three. Returns the filenames in batch order.
pub fn save_png_dir(batch: &ImageBatch, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let (c, h, w) = batch.image_shape();
    let mut names = Vec::with_capacity(batch.len());
    for n in 0..batch.len() {
        let name = format!("{n:06}.png");
        let path = dir.join(&name);
        let to_u8 = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
        match c {
            1 => {
                let mut img = image::GrayImage::new(w as u32, h as u32);
                for i in 0..h {
                    for j in 0..w {
                        img.put_pixel(
                            j as u32,
                            i as u32,
                            image::Luma([to_u8(batch.data()[[n, 0, i, j]])]),
                        );
                    }
                }
                img.save(&path)
                    .map_err(|e| Error::Serde(format!("png write: {e}")))?;
            }
            3 => {
                let mut img = image::RgbImage::new(w as u32, h as u32);
                for i in 0..h {
                    for j in 0..w {
                        let px = [
                            to_u8(batch.data()[[n, 0, i, j]]),
                            to_u8(batch.data()[[n, 1, i, j]]),
                            to_u8(batch.data()[[n, 2, i, j]]),
                        ];
                        img.put_pixel(j as u32, i as u32, image::Rgb(px));
                    }
                }
                img.save(&path)
                    .map_err(|e| Error::Serde(format!("png write: {e}")))?;
            }
            other => {
                return Err(Error::Domain(format!(
                    "png export supports 1 or 3 channels, got {other}"
                )))
            }
        }
        names.push(name);
    }
    Ok(names)
}

fn load_png(path: &Path, expect: (usize, usize, usize)) -> Result<Vec<f64>> {
    let img = image::open(path).map_err(|e| Error::Serde(format!("png read {}: {e}", path.display())))?;
    let (c, h, w) = expect;
    let mut out = vec![0.0; c * h * w];
    match c {
        1 => {
            let gray = img.to_luma8();
            if (gray.width() as usize, gray.height() as usize) != (w, h) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{w}x{h}"),
                    actual: format!("{}x{}", gray.width(), gray.height()),
                });
            }
            for i in 0..h {
                for j in 0..w {
                    out[i * w + j] = gray.get_pixel(j as u32, i as u32).0[0] as f64 / 255.0;
                }
            }
        }
        3 => {
            let rgb = img.to_rgb8();
            if (rgb.width() as usize, rgb.height() as usize) != (w, h) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{w}x{h}"),
                    actual: format!("{}x{}", rgb.width(), rgb.height()),
                });
            }
            for ch in 0..3 {
                for i in 0..h {
                    for j in 0..w {
                        out[ch * h * w + i * w + j] =
                            rgb.get_pixel(j as u32, i as u32).0[ch] as f64 / 255.0;
                    }
                }
            }
        }
        other => {
            return Err(Error::Domain(format!(
                "image ingestion supports 1 or 3 channels, got {other}"
            )))
        }
    }
    Ok(out)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Synthetic two-class generator parameters. The class-defining feature is a
/// 4x4 patch whose brightness sits `feature_delta` above the background, at
/// one of two positions; the margin is deliberately small so an L-inf
/// adversary inside an 8/255 ball can rewrite it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub count: usize,
    pub seed: u64,
}

pub const SYNTH_SIDE: usize = 16;
pub const SYNTH_FEATURE_DELTA: f64 = 0.05;
pub const SYNTH_PATCH: usize = 4;
pub const SYNTH_CLASS_NAMES: [&str; 2] = ["square in the upper left", "square in the lower right"];

fn synth_patch_origin(label: usize) -> (usize, usize) {
    if label == 0 {
        (3, 3)
    } else {
        (9, 9)
    }
}

/// Deterministic synthetic two-class batch, labels alternating 0, 1, 0, ...
pub fn synthetic_two_class(count: usize, seed: u64) -> ImageBatch {
    let mut rng = SeededNoise::new(seed);
    let mut data = Array4::zeros((count, 1, SYNTH_SIDE, SYNTH_SIDE));
    let mut labels = Vec::with_capacity(count);
    for n in 0..count {
        let label = n % 2;
        labels.push(label);
        let bg = rng.uniform(0.25, 0.35);
        let (pr, pc) = synth_patch_origin(label);
        for i in 0..SYNTH_SIDE {
            for j in 0..SYNTH_SIDE {
                let in_patch = i >= pr && i < pr + SYNTH_PATCH && j >= pc && j < pc + SYNTH_PATCH;
                let v = bg
                    + if in_patch { SYNTH_FEATURE_DELTA } else { 0.0 }
                    + 0.01 * rng.normal();
                data[[n, 0, i, j]] = v.clamp(0.0, 1.0);
            }
        }
    }
    ImageBatch::new(data, Some(labels)).expect("values clamped")
}

/// Storage layout of a dataset on disk (or the synthetic generator).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetFormat {
    Array,
    ImageDir,
    Cifar10,
    Synthetic,
}

enum Backing {
    Array(ArrayManifest),
    ImageDir {
        index: ImageDirIndex,
        shape: (usize, usize, usize),
    },
    Cifar10 {
        /// (file, records in file), in canonical order.
        files: Vec<(PathBuf, usize)>,
        total: usize,
    },
    Synthetic(SyntheticSpec),
}

/// A loadable dataset: root, format, split identity, and label mapping.
pub struct DatasetSource {
    root: PathBuf,
    format: DatasetFormat,
    split: String,
    backing: Backing,
}

impl DatasetSource {
    /// Open and validate a dataset. For image directories every listed file
    /// must exist; for CIFAR-10 the split's files must be present and
    /// record-aligned.
    pub fn open(
        root: impl Into<PathBuf>,
        format: DatasetFormat,
        split: &str,
        synthetic: Option<SyntheticSpec>,
    ) -> Result<Self> {
        let root = root.into();
        let backing = match format {
            DatasetFormat::Array => Backing::Array(read_array_manifest(&root)?),
            DatasetFormat::ImageDir => {
                let text = std::fs::read_to_string(root.join(IMAGE_DIR_INDEX))?;
                let index: ImageDirIndex = serde_json::from_str(&text)?;
                if index.samples.is_empty() {
                    return Err(Error::Domain("image dir index lists no samples".into()));
                }
                for entry in &index.samples {
                    if !root.join(&entry.file).exists() {
                        return Err(Error::Domain(format!("listed file {} missing", entry.file)));
                    }
                    if entry.label >= index.num_classes {
                        return Err(Error::Domain(format!(
                            "label {} out of range for {} classes",
                            entry.label, index.num_classes
                        )));
                    }
                }
                // Shape comes from the first image.
                let probe = image::open(root.join(&index.samples[0].file))
                    .map_err(|e| Error::Serde(format!("probe image: {e}")))?;
                let c = match probe.color().channel_count() {
                    1 => 1,
                    _ => 3,
                };
                let shape = (c, probe.height() as usize, probe.width() as usize);
                Backing::ImageDir { index, shape }
            }
            DatasetFormat::Cifar10 => {
                let names: &[&str] = if split == "train" {
                    &[
                        "data_batch_1.bin",
                        "data_batch_2.bin",
                        "data_batch_3.bin",
                        "data_batch_4.bin",
                        "data_batch_5.bin",
                    ]
                } else {
                    &["test_batch.bin"]
                };
                let mut files = Vec::new();
                let mut total = 0usize;
                for name in names {
                    let path = root.join(name);
                    let meta = std::fs::metadata(&path).map_err(|e| {
                        Error::Domain(format!("cifar10 file {} missing: {e}", path.display()))
                    })?;
                    let len = meta.len() as usize;
                    if len % CIFAR_RECORD != 0 {
                        return Err(Error::Domain(format!(
                            "{} is not record-aligned",
                            path.display()
                        )));
                    }
                    let records = len / CIFAR_RECORD;
                    total += records;
                    files.push((path, records));
                }
                Backing::Cifar10 { files, total }
            }
            DatasetFormat::Synthetic => {
                let spec = synthetic.ok_or_else(|| {
                    Error::Config("synthetic dataset needs count and seed".into())
                })?;
                if spec.count == 0 {
                    return Err(Error::Config("synthetic dataset count must be positive".into()));
                }
                Backing::Synthetic(spec)
            }
        };
        Ok(Self {
            root,
            format,
            split: split.to_string(),
            backing,
        })
    }

    pub fn len(&self) -> usize {
        match &self.backing {
            Backing::Array(m) => m.count,
            Backing::ImageDir { index, .. } => index.samples.len(),
            Backing::Cifar10 { total, .. } => *total,
            Backing::Synthetic(s) => s.count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        match &self.backing {
            Backing::Array(m) => m.shape,
            Backing::ImageDir { shape, .. } => *shape,
            Backing::Cifar10 { .. } => (3, 32, 32),
            Backing::Synthetic(_) => (1, SYNTH_SIDE, SYNTH_SIDE),
        }
    }

    pub fn num_classes(&self) -> Option<usize> {
        match &self.backing {
            Backing::Array(m) => m.num_classes,
            Backing::ImageDir { index, .. } => Some(index.num_classes),
            Backing::Cifar10 { .. } => Some(10),
            Backing::Synthetic(_) => Some(2),
        }
    }

    pub fn format(&self) -> DatasetFormat {
        self.format
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Identity block for reports.
    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "root": self.root.display().to_string(),
            "format": self.format,
            "split": self.split,
            "len": self.len(),
            "image_shape": self.image_shape(),
            "num_classes": self.num_classes(),
            "fingerprint": self.fingerprint(),
        })
    }

    /// Cheap content identity: manifest checksums where available,
    /// otherwise a digest of the listing (or generator parameters).
    pub fn fingerprint(&self) -> String {
        match &self.backing {
            Backing::Array(m) => m.sha256_samples.clone(),
            Backing::ImageDir { index, .. } => {
                let listing: Vec<String> = index
                    .samples
                    .iter()
                    .map(|e| format!("{}:{}", e.file, e.label))
                    .collect();
                sha256_hex(listing.join("\n").as_bytes())
            }
            Backing::Cifar10 { files, .. } => {
                let listing: Vec<String> = files
                    .iter()
                    .map(|(p, n)| format!("{}:{}", p.display(), n))
                    .collect();
                sha256_hex(listing.join("\n").as_bytes())
            }
            Backing::Synthetic(s) => format!("synthetic:{}:{}", s.count, s.seed),
        }
    }

    /// Load specific samples, labels attached where the source has them.
    pub fn load_indices(&self, indices: &[usize]) -> Result<ImageBatch> {
        match &self.backing {
            Backing::Array(m) => read_array_rows(&self.root, m, indices),
            Backing::ImageDir { index, shape } => {
                let (c, h, w) = *shape;
                let mut data = Array4::zeros((indices.len(), c, h, w));
                let mut labels = Vec::with_capacity(indices.len());
                for (row, &i) in indices.iter().enumerate() {
                    let entry = index
                        .samples
                        .get(i)
                        .ok_or_else(|| Error::Domain(format!("index {i} out of range")))?;
                    let flat = load_png(&self.root.join(&entry.file), *shape)?;
                    for (j, &v) in flat.iter().enumerate() {
                        data[[row, j / (h * w), (j / w) % h, j % w]] = v;
                    }
                    labels.push(entry.label);
                }
                ImageBatch::new(data, Some(labels))
            }
            Backing::Cifar10 { files, total } => {
                let mut data = Array4::zeros((indices.len(), 3, 32, 32));
                let mut labels = Vec::with_capacity(indices.len());
                let mut buf = vec![0u8; CIFAR_RECORD];
                for (row, &i) in indices.iter().enumerate() {
                    if i >= *total {
                        return Err(Error::Domain(format!("index {i} out of range")));
                    }
                    let mut offset = i;
                    let mut handle = None;
                    for (path, records) in files {
                        if offset < *records {
                            handle = Some((path, offset));
                            break;
                        }
                        offset -= records;
                    }
                    let (path, rec) = handle.expect("offset within total");
                    let mut file = std::fs::File::open(path)?;
                    file.seek(SeekFrom::Start((rec * CIFAR_RECORD) as u64))?;
                    file.read_exact(&mut buf)?;
                    labels.push(buf[0] as usize);
                    for ch in 0..3 {
                        for px in 0..1024 {
                            data[[row, ch, px / 32, px % 32]] =
                                buf[1 + ch * 1024 + px] as f64 / 255.0;
                        }
                    }
                }
                ImageBatch::new(data, Some(labels))
            }
            Backing::Synthetic(s) => {
                let all = synthetic_two_class(s.count, s.seed);
                all.select(indices)
            }
        }
    }

    pub fn load_all(&self) -> Result<ImageBatch> {
        let indices: Vec<usize> = (0..self.len()).collect();
        self.load_indices(&indices)
    }
}

/// Named checksums for report provenance.
pub fn checksum_map(pairs: &[(&str, String)]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_batch(n: usize) -> ImageBatch {
        let data = Array4::from_shape_fn((n, 1, 3, 3), |(i, _, r, c)| {
            ((i * 9 + r * 3 + c) % 11) as f64 / 11.0
        });
        ImageBatch::new(data, Some((0..n).map(|i| i % 3).collect())).unwrap()
    }

    #[test]
    fn array_dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        let batch = sample_batch(5);
        let manifest =
            write_array_dataset(&out, &batch, Some(3), serde_json::json!({"source": "test"}))
                .unwrap();
        assert_eq!(manifest.count, 5);

        let source = DatasetSource::open(&out, DatasetFormat::Array, "train", None).unwrap();
        assert_eq!(source.len(), 5);
        assert_eq!(source.image_shape(), (1, 3, 3));
        let loaded = source.load_all().unwrap();
        assert_eq!(loaded, batch);

        let subset = source.load_indices(&[4, 0]).unwrap();
        assert_eq!(subset.labels().unwrap(), &[1, 0]);
        assert_eq!(
            subset.data().index_axis(ndarray::Axis(0), 0),
            batch.data().index_axis(ndarray::Axis(0), 4)
        );
    }

    #[test]
    fn array_dataset_refuses_overwrite() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("ds");
        write_array_dataset(&out, &sample_batch(2), None, serde_json::Value::Null).unwrap();
        assert!(write_array_dataset(&out, &sample_batch(2), None, serde_json::Value::Null).is_err());
    }

    #[test]
    fn png_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let batch = sample_batch(3);
        let names = save_png_dir(&batch, dir.path()).unwrap();
        let index = ImageDirIndex {
            num_classes: 3,
            samples: names
                .iter()
                .enumerate()
                .map(|(i, f)| ImageDirEntry {
                    file: f.clone(),
                    label: i % 3,
                })
                .collect(),
        };
        std::fs::write(
            dir.path().join(IMAGE_DIR_INDEX),
            serde_json::to_string(&index).unwrap(),
        )
        .unwrap();

        let source =
            DatasetSource::open(dir.path(), DatasetFormat::ImageDir, "test", None).unwrap();
        assert_eq!(source.len(), 3);
        let loaded = source.load_all().unwrap();
        // PNG quantizes to 8 bits.
        for (a, b) in loaded.data().iter().zip(batch.data().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn image_dir_with_missing_file_fails_open() {
        let dir = tempfile::tempdir().unwrap();
        let index = ImageDirIndex {
            num_classes: 1,
            samples: vec![ImageDirEntry {
                file: "missing.png".into(),
                label: 0,
            }],
        };
        std::fs::write(
            dir.path().join(IMAGE_DIR_INDEX),
            serde_json::to_string(&index).unwrap(),
        )
        .unwrap();
        assert!(DatasetSource::open(dir.path(), DatasetFormat::ImageDir, "test", None).is_err());
    }

    #[test]
    fn cifar10_binary_records() {
        let dir = tempfile::tempdir().unwrap();
        // Two fake records: label 7 with all-128 pixels, label 2 with a ramp.
        let mut bytes = vec![7u8];
        bytes.extend(std::iter::repeat(128u8).take(3072));
        bytes.push(2u8);
        bytes.extend((0..3072u32).map(|i| (i % 256) as u8));
        std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();

        let source =
            DatasetSource::open(dir.path(), DatasetFormat::Cifar10, "test", None).unwrap();
        assert_eq!(source.len(), 2);
        assert_eq!(source.image_shape(), (3, 32, 32));
        let batch = source.load_indices(&[0, 1]).unwrap();
        assert_eq!(batch.labels().unwrap(), &[7, 2]);
        assert!((batch.data()[[0, 0, 0, 0]] - 128.0 / 255.0).abs() < 1e-12);
        assert!((batch.data()[[1, 0, 0, 1]] - 1.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = synthetic_two_class(64, 5);
        let b = synthetic_two_class(64, 5);
        assert_eq!(a, b);
        let ones = a.labels().unwrap().iter().filter(|&&l| l == 1).count();
        assert_eq!(ones, 32);
        let c = synthetic_two_class(64, 6);
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn synthetic_patch_is_brighter_at_class_position() {
        let batch = synthetic_two_class(8, 1);
        for n in 0..8 {
            let label = batch.labels().unwrap()[n];
            let (pr, pc) = synth_patch_origin(label);
            let (qr, qc) = synth_patch_origin(1 - label);
            let mut own = 0.0;
            let mut other = 0.0;
            for i in 0..SYNTH_PATCH {
                for j in 0..SYNTH_PATCH {
                    own += batch.data()[[n, 0, pr + i, pc + j]];
                    other += batch.data()[[n, 0, qr + i, qc + j]];
                }
            }
            assert!(own > other, "sample {n}: {own} vs {other}");
        }
    }
}
