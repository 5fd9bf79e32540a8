//! Synthetic phantoms, the volume file format, dataset splits and
//! checkpoints.
//!
//! A volume is stored as two files sharing a stem: `<stem>.json`, a header
//! with shape, element type, byte order, spacing and class count, and
//! `<stem>.raw`, the little-endian payload (`f32` intensities or `u8`
//! labels). A checkpoint is a directory holding `manifest.json` (model
//! config plus one entry per tensor with its byte range) and `params.bin`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::ParamStore;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::metrics::LabelMask;
use crate::rng::stream;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveKind {
    Ellipsoid,
    Box,
    /// Cylinder spanning the whole grid along `axis`.
    Tube,
}

/// Randomly placed shapes of one class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeRule {
    pub class: u8,
    pub kind: PrimitiveKind,
    /// Inclusive range of shapes per phantom.
    pub count: [usize; 2],
    /// Inclusive range of per-axis radii (half extents for boxes), in voxels.
    pub radius: [f64; 2],
}

/// A shape with explicit placement, in voxel-index coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub class: u8,
    pub kind: PrimitiveKind,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    #[serde(default)]
    pub axis: usize,
}

impl Primitive {
    fn contains(&self, p: [f64; 3]) -> bool {
        let q: [f64; 3] = std::array::from_fn(|a| (p[a] - self.center[a]) / self.radii[a]);
        match self.kind {
            PrimitiveKind::Ellipsoid => q.iter().map(|v| v * v).sum::<f64>() <= 1.0,
            PrimitiveKind::Box => q.iter().all(|v| v.abs() <= 1.0),
            PrimitiveKind::Tube => (0..3).filter(|&a| a != self.axis).map(|a| q[a] * q[a]).sum::<f64>() <= 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub grid: [usize; 3],
    pub num_classes: usize,
    /// Random shapes, rasterized in order (later shapes overwrite earlier ones).
    pub rules: Vec<ShapeRule>,
    /// Fixed shapes, rasterized after the random ones.
    pub fixed: Vec<Primitive>,
    pub class_means: Vec<f64>,
    pub class_std: Vec<f64>,
    /// Additive Gaussian noise over the whole volume.
    pub noise_std: f64,
    pub spacing: [f64; 3],
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            grid: [16, 16, 16],
            num_classes: 2,
            rules: vec![ShapeRule {
                class: 1,
                kind: PrimitiveKind::Ellipsoid,
                count: [1, 2],
                radius: [2.5, 5.0],
            }],
            fixed: Vec::new(),
            class_means: vec![0.0, 1.0],
            class_std: vec![0.05, 0.05],
            noise_std: 0.1,
            spacing: [1.0, 1.0, 1.0],
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.num_classes;
        if !(2..=256).contains(&n) {
            return Err(Error::config(format!("num_classes must lie in 2..=256, got {n}")));
        }
        if self.grid.contains(&0) {
            return Err(Error::config(format!("grid {:?} has a zero extent", self.grid)));
        }
        if self.grid[2] % 2 != 0 {
            return Err(Error::config(format!(
                "grid width {} must be even (pad width to even)",
                self.grid[2]
            )));
        }
        if self.class_means.len() != n || self.class_std.len() != n {
            return Err(Error::config(format!(
                "class_means and class_std need {n} entries, got {} and {}",
                self.class_means.len(),
                self.class_std.len()
            )));
        }
        if self.class_std.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::config(format!("class_std {:?} must be >= 0", self.class_std)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config(format!("spacing {:?} must be positive", self.spacing)));
        }
        let half = *self.grid.iter().min().unwrap() as f64 / 2.0;
        for (i, r) in self.rules.iter().enumerate() {
            if r.class == 0 || r.class as usize >= n {
                return Err(Error::config(format!("rules[{i}].class {} outside 1..{n}", r.class)));
            }
            if r.count[0] > r.count[1] {
                return Err(Error::config(format!("rules[{i}].count range {:?} is empty", r.count)));
            }
            if !(r.radius[0] > 0.0) || r.radius[0] > r.radius[1] {
                return Err(Error::config(format!("rules[{i}].radius range {:?} is invalid", r.radius)));
            }
            if r.radius[0] > half {
                return Err(Error::config(format!(
                    "rules[{i}]: radius {} does not fit in grid {:?}",
                    r.radius[0], self.grid
                )));
            }
        }
        for (i, p) in self.fixed.iter().enumerate() {
            if p.class as usize >= n {
                return Err(Error::config(format!("fixed[{i}].class {} outside 0..{n}", p.class)));
            }
            if p.radii.iter().any(|&r| !(r > 0.0)) || p.axis > 2 {
                return Err(Error::config(format!("fixed[{i}] needs positive radii and axis < 3")));
            }
        }
        Ok(())
    }
}

/// One generated or loaded case: a `(1, D, H, W, 1)` intensity volume and
/// its labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub label: LabelMask,
}

fn place(rule: &ShapeRule, grid: [usize; 3], rng: &mut impl Rng) -> Primitive {
    let radii: [f64; 3] = std::array::from_fn(|a| {
        let r = if rule.radius[0] == rule.radius[1] {
            rule.radius[0]
        } else {
            rng.random_range(rule.radius[0]..=rule.radius[1])
        };
        r.min(grid[a] as f64 / 2.0)
    });
    let axis = rng.random_range(0..3);
    let center = std::array::from_fn(|a| {
        let hi = grid[a] as f64 - 1.0;
        let (lo_c, hi_c) = (radii[a].min(hi / 2.0), (hi - radii[a]).max(hi / 2.0));
        if lo_c >= hi_c {
            lo_c
        } else {
            rng.random_range(lo_c..=hi_c)
        }
    });
    Primitive {
        class: rule.class,
        kind: rule.kind,
        center,
        radii,
        axis,
    }
}

pub fn rasterize(shapes: &[Primitive], grid: [usize; 3]) -> Vec<u8> {
    let [d, h, w] = grid;
    let mut out = vec![0u8; d * h * w];
    for s in shapes {
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if s.contains([z as f64, y as f64, x as f64]) {
                        out[(z * h + y) * w + x] = s.class;
                    }
                }
            }
        }
    }
    out
}

/// Deterministic in `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Sample> {
    spec.validate()?;
    let mut rng = stream(spec.seed, "phantom");
    let mut shapes = Vec::new();
    for rule in &spec.rules {
        let k = rng.random_range(rule.count[0]..=rule.count[1]);
        for _ in 0..k {
            shapes.push(place(rule, spec.grid, &mut rng));
        }
    }
    shapes.extend(spec.fixed.iter().cloned());
    let labels = rasterize(&shapes, spec.grid);
    let image: Vec<f32> = labels
        .iter()
        .map(|&l| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            (spec.class_means[l as usize] + spec.class_std[l as usize] * a + spec.noise_std * b) as f32
        })
        .collect();
    let [d, h, w] = spec.grid;
    Ok(Sample {
        image: Tensor::new(vec![1, d, h, w, 1], image)?,
        label: LabelMask::new(spec.grid, labels, spec.num_classes)?,
    })
}

/// `n` phantoms with per-sample seeds derived from `spec.seed`.
pub fn generate_dataset(spec: &PhantomSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            let s = PhantomSpec {
                seed: crate::rng::derive_seed(spec.seed, &format!("sample/{i}")),
                ..spec.clone()
            };
            generate_phantom(&s)
        })
        .collect()
}

/// Seeded shuffle split into `round(n * fraction)` training and the rest
/// held-out indices.
pub fn make_splits(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let n_train = (n as f64 * train_fraction).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::config(format!(
            "{n} samples at fraction {train_fraction} leave an empty split"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, "splits");
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub byte_order: String,
    pub spacing: [f64; 3],
    #[serde(default)]
    pub num_classes: Option<usize>,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_raw(stem: &Path, header: &VolumeHeader, payload: &[u8]) -> Result<()> {
    let json = serde_json::to_vec_pretty(header).map_err(|e| Error::format(e.to_string()))?;
    write_file(&with_ext(stem, "json"), &json)?;
    write_file(&with_ext(stem, "raw"), payload)
}

fn read_raw(stem: &Path, expected: DType) -> Result<(VolumeHeader, Vec<u8>)> {
    let hpath = with_ext(stem, "json");
    let header: VolumeHeader = serde_json::from_slice(&read_file(&hpath)?)
        .map_err(|e| Error::format(format!("{}: {e}", hpath.display())))?;
    if header.byte_order != "little" {
        return Err(Error::format(format!(
            "{}: unsupported byte order {:?}",
            hpath.display(),
            header.byte_order
        )));
    }
    if header.dtype != expected {
        return Err(Error::format(format!(
            "{}: element type {:?}, expected {expected:?}",
            hpath.display(),
            header.dtype
        )));
    }
    if header.shape.is_empty() || header.shape.contains(&0) {
        return Err(Error::format(format!(
            "{}: shape {:?} has a zero extent",
            hpath.display(),
            header.shape
        )));
    }
    let ppath = with_ext(stem, "raw");
    let payload = read_file(&ppath)?;
    let want = header.shape.iter().product::<usize>() * header.dtype.size();
    if payload.len() != want {
        return Err(Error::format(format!(
            "{}: expected {want} bytes for shape {:?}, found {}",
            ppath.display(),
            header.shape,
            payload.len()
        )));
    }
    Ok((header, payload))
}

/// Writes a `(D, H, W)` or `(B, D, H, W, C)` intensity volume.
pub fn write_volume(stem: &Path, volume: &Tensor<f32>, spacing: [f64; 3]) -> Result<()> {
    if volume.shape().contains(&0) {
        return Err(Error::format(format!("refusing to write empty shape {:?}", volume.shape())));
    }
    let mut payload = Vec::with_capacity(volume.numel() * 4);
    for &v in volume.data() {
        v.write_le(&mut payload);
    }
    let header = VolumeHeader {
        shape: volume.shape().to_vec(),
        dtype: DType::F32,
        byte_order: "little".into(),
        spacing,
        num_classes: None,
    };
    write_raw(stem, &header, &payload)
}

pub fn read_volume(stem: &Path) -> Result<(Tensor<f32>, VolumeHeader)> {
    let (header, payload) = read_raw(stem, DType::F32)?;
    let data = payload.chunks_exact(4).map(f32::read_le).collect();
    Ok((Tensor::new(header.shape.clone(), data)?, header))
}

pub fn write_mask(stem: &Path, mask: &LabelMask, spacing: [f64; 3]) -> Result<()> {
    if mask.shape().contains(&0) {
        return Err(Error::format(format!("refusing to write empty shape {:?}", mask.shape())));
    }
    let header = VolumeHeader {
        shape: mask.shape().to_vec(),
        dtype: DType::U8,
        byte_order: "little".into(),
        spacing,
        num_classes: Some(mask.num_classes()),
    };
    write_raw(stem, &header, mask.data())
}

pub fn read_mask(stem: &Path) -> Result<(LabelMask, VolumeHeader)> {
    let (header, payload) = read_raw(stem, DType::U8)?;
    let shape: [usize; 3] = header.shape.as_slice().try_into().map_err(|_| {
        Error::format(format!("label volume must be 3-axis, got shape {:?}", header.shape))
    })?;
    let n = header
        .num_classes
        .ok_or_else(|| Error::format("label header lacks num_classes"))?;
    let mask = LabelMask::new(shape, payload, n).map_err(|e| Error::format(e.to_string()))?;
    Ok((mask, header))
}

/// Index of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub num_classes: usize,
    pub grid: [usize; 3],
    pub spacing: [f64; 3],
    /// Sample ids; files are `<id>_image.{json,raw}` and `<id>_label.{json,raw}`.
    pub samples: Vec<String>,
}

pub const DATASET_INDEX: &str = "dataset.json";

pub fn sample_stems(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}_image")), dir.join(format!("{id}_label")))
}

/// Writes every sample plus `dataset.json`; returns the index.
pub fn save_dataset(dir: &Path, samples: &[Sample], spacing: [f64; 3]) -> Result<DatasetIndex> {
    let first = samples.first().ok_or_else(|| Error::input("no samples to write"))?;
    let ids: Vec<String> = (0..samples.len()).map(|i| format!("case_{i:04}")).collect();
    for (id, s) in ids.iter().zip(samples) {
        let (img, lab) = sample_stems(dir, id);
        let [d, h, w] = s.label.shape();
        write_volume(&img, &s.image.clone().reshape(&[d, h, w])?, spacing)?;
        write_mask(&lab, &s.label, spacing)?;
    }
    let index = DatasetIndex {
        num_classes: first.label.num_classes(),
        grid: first.label.shape(),
        spacing,
        samples: ids,
    };
    let json = serde_json::to_vec_pretty(&index).map_err(|e| Error::format(e.to_string()))?;
    write_file(&dir.join(DATASET_INDEX), &json)?;
    Ok(index)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetIndex, Vec<Sample>)> {
    let ipath = dir.join(DATASET_INDEX);
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let index: DatasetIndex = serde_json::from_slice(&read_file(&ipath)?)
        .map_err(|e| Error::format(format!("{}: {e}", ipath.display())))?;
    let samples = index
        .samples
        .iter()
        .map(|id| {
            let (img, lab) = sample_stems(dir, id);
            let (image, _) = read_volume(&img)?;
            let (label, _) = read_mask(&lab)?;
            let [d, h, w] = label.shape();
            if image.shape() != [d, h, w] {
                return Err(Error::format(format!(
                    "{id}: image shape {:?} differs from label grid {:?}",
                    image.shape(),
                    label.shape()
                )));
            }
            Ok(Sample {
                image: image.reshape(&[1, d, h, w, 1])?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((index, samples))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub complex: bool,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
}

pub const CHECKPOINT_FORMAT: &str = "amber-afno-checkpoint";

pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub buffers: ParamStore<T>,
}

pub fn save_checkpoint<T: Scalar>(
    dir: &Path,
    config: &ModelConfig,
    params: &ParamStore<T>,
    buffers: &ParamStore<T>,
) -> Result<CheckpointManifest> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (kind, store) in [(TensorKind::Param, params), (TensorKind::Buffer, buffers)] {
        for e in store.entries() {
            let offset = payload.len();
            for &v in e.tensor.data() {
                v.write_le(&mut payload);
            }
            tensors.push(TensorEntry {
                name: e.name.clone(),
                kind,
                shape: e.tensor.shape().to_vec(),
                dtype: T::DTYPE,
                complex: e.complex,
                offset,
                nbytes: payload.len() - offset,
            });
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        version: 1,
        config: config.clone(),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::format(e.to_string()))?;
    write_file(&dir.join("params.bin"), &payload)?;
    write_file(&dir.join("manifest.json"), &json)?;
    Ok(manifest)
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join("manifest.json");
    let manifest: CheckpointManifest = serde_json::from_slice(&read_file(&mpath)?)
        .map_err(|e| Error::format(format!("{}: {e}", mpath.display())))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::format(format!(
            "{}: not a checkpoint manifest (format {:?})",
            mpath.display(),
            manifest.format
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint, converting stored elements to `T` if needed.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<Checkpoint<T>> {
    let manifest = read_checkpoint_manifest(dir)?;
    let ppath = dir.join("params.bin");
    let payload = read_file(&ppath)?;
    let mut params = ParamStore::new();
    let mut buffers = ParamStore::new();
    for e in &manifest.tensors {
        let n: usize = e.shape.iter().product();
        let size = e.dtype.size();
        if e.nbytes != n * size || e.offset + e.nbytes > payload.len() {
            return Err(Error::format(format!(
                "{}: tensor {} declares {} bytes at offset {} (shape {:?}), payload has {}",
                ppath.display(),
                e.name,
                e.nbytes,
                e.offset,
                e.shape,
                payload.len()
            )));
        }
        let bytes = &payload[e.offset..e.offset + e.nbytes];
        let data: Vec<T> = match e.dtype {
            DType::F32 => bytes.chunks_exact(4).map(|b| T::lit(f32::read_le(b) as f64)).collect(),
            DType::F64 => bytes.chunks_exact(8).map(|b| T::lit(f64::read_le(b))).collect(),
            DType::U8 => return Err(Error::format(format!("tensor {} has integer type", e.name))),
        };
        let t = Tensor::new(e.shape.clone(), data)?;
        let store = match e.kind {
            TensorKind::Param => &mut params,
            TensorKind::Buffer => &mut buffers,
        };
        store.insert(e.name.clone(), t, e.complex)?;
    }
    Ok(Checkpoint {
        config: manifest.config,
        params,
        buffers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn splits_follow_fraction() {
        let (tr, te) = make_splits(200, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (160, 40));
        let (tr, te) = make_splits(5, 0.8, 1).unwrap();
        assert_eq!((tr.len(), te.len()), (4, 1));
        assert!(make_splits(1, 0.8, 1).is_err());
        assert!(make_splits(10, 1.0, 1).is_err());
        for n in 2..60 {
            let (tr, te) = make_splits(n, 0.5, n as u64).unwrap();
            let all: HashSet<usize> = tr.iter().chain(&te).copied().collect();
            assert_eq!(all.len(), n);
            assert_eq!(tr.len() + te.len(), n);
        }
        assert_eq!(make_splits(30, 0.7, 9).unwrap(), make_splits(30, 0.7, 9).unwrap());
    }

    #[test]
    fn phantom_without_shapes_is_background() {
        let spec = PhantomSpec {
            rules: vec![],
            ..PhantomSpec::default()
        };
        let s = generate_phantom(&spec).unwrap();
        assert_eq!(s.label.count(0), 16 * 16 * 16);
        assert!(s.image.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn phantoms_are_deterministic() {
        let spec = PhantomSpec { seed: 42, ..Default::default() };
        assert_eq!(generate_phantom(&spec).unwrap(), generate_phantom(&spec).unwrap());
        let a = generate_dataset(&spec, 3).unwrap();
        assert_eq!(a, generate_dataset(&spec, 3).unwrap());
        assert_ne!(a[0], a[1]);
    }

    #[test]
    fn centered_ellipsoid_cardinality() {
        let spec = PhantomSpec {
            rules: vec![],
            fixed: vec![Primitive {
                class: 1,
                kind: PrimitiveKind::Ellipsoid,
                center: [8.0, 8.0, 8.0],
                radii: [4.0, 4.0, 4.0],
                axis: 0,
            }],
            ..PhantomSpec::default()
        };
        let s = generate_phantom(&spec).unwrap();
        let mut expected = 0;
        for z in 0i64..16 {
            for y in 0i64..16 {
                for x in 0i64..16 {
                    if (z - 8).pow(2) + (y - 8).pow(2) + (x - 8).pow(2) <= 16 {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(s.label.count(1), expected);
        assert_eq!(expected, 257);
    }

    #[test]
    fn impossible_geometry_rejected() {
        let spec = PhantomSpec {
            rules: vec![ShapeRule {
                class: 1,
                kind: PrimitiveKind::Box,
                count: [1, 1],
                radius: [9.0, 10.0],
            }],
            ..PhantomSpec::default()
        };
        assert!(generate_phantom(&spec).is_err());
        let odd = PhantomSpec { grid: [16, 16, 15], ..Default::default() };
        assert!(odd.validate().unwrap_err().to_string().contains("even"));
    }

    #[test]
    fn volume_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("v");
        let t = Tensor::from_fn(&[3, 4, 2], |i| (i as f32).sin());
        write_volume(&stem, &t, [1.0, 2.0, 0.5]).unwrap();
        let (back, h) = read_volume(&stem).unwrap();
        assert_eq!(back, t);
        assert_eq!(h.spacing, [1.0, 2.0, 0.5]);
        assert!(write_volume(&dir.path().join("e"), &Tensor::zeros(&[0, 2]), [1.0; 3]).is_err());

        let mask = LabelMask::new([2, 2, 2], vec![0, 1, 2, 1, 0, 0, 2, 2], 3).unwrap();
        write_mask(&dir.path().join("m"), &mask, [1.0; 3]).unwrap();
        assert_eq!(read_mask(&dir.path().join("m")).unwrap().0, mask);

        // header says 16^3, payload holds 15^3
        let bad = dir.path().join("bad");
        write_volume(&bad, &Tensor::zeros(&[16, 16, 16]), [1.0; 3]).unwrap();
        fs::write(with_ext(&bad, "raw"), vec![0u8; 15 * 15 * 15 * 4]).unwrap();
        let err = read_volume(&bad).unwrap_err().to_string();
        assert!(err.contains("16384") && err.contains("13500"), "{err}");

        let mut h = serde_json::from_slice::<VolumeHeader>(&fs::read(with_ext(&stem, "json")).unwrap()).unwrap();
        h.byte_order = "big".into();
        fs::write(with_ext(&stem, "json"), serde_json::to_vec(&h).unwrap()).unwrap();
        assert!(matches!(read_volume(&stem), Err(Error::Format(_))));
        assert!(matches!(read_mask(&stem), Err(Error::Format(_))));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec { grid: [4, 4, 4], rules: vec![], ..Default::default() };
        let samples = generate_dataset(&spec, 3).unwrap();
        let idx = save_dataset(dir.path(), &samples, [1.0; 3]).unwrap();
        assert_eq!(idx.samples.len(), 3);
        let (_, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, samples);
        assert!(matches!(load_dataset(&dir.path().join("missing")), Err(Error::Io { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = ParamStore::<f64>::new();
        p.insert("a.weight", Tensor::from_fn(&[2, 3], |i| i as f64 * 0.1), false).unwrap();
        p.insert("a.mixer.w1", Tensor::from_fn(&[1, 2, 2, 2], |i| -(i as f64)), true).unwrap();
        let mut b = ParamStore::<f64>::new();
        b.insert("bn.running_mean", Tensor::zeros(&[3]), false).unwrap();
        let cfg = ModelConfig::tiny();
        save_checkpoint(dir.path(), &cfg, &p, &b).unwrap();
        let ck = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(ck.params, p);
        assert_eq!(ck.buffers, b);
        assert_eq!(ck.config, cfg);
        let ck32 = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(ck32.params.get("a.weight").unwrap().data()[1], 0.1f32);
    }
}
