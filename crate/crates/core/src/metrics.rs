//! Overlap and surface-distance metrics on label grids.
//!
//! HD95 uses the 6-connected boundary of each mask (voxels outside the grid
//! count as background), Euclidean distances in physical units and the
//! nearest-rank 95th percentile. Distances from one boundary to the other are
//! read off a separable exact distance transform.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Integer class labels on a `(D, H, W)` grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    shape: [usize; 3],
    data: Vec<u8>,
    num_classes: usize,
}

impl LabelMask {
    pub fn new(shape: [usize; 3], data: Vec<u8>, num_classes: usize) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::input(format!(
                "label grid {shape:?} needs {n} voxels, got {}",
                data.len()
            )));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(Error::input(format!("class count {num_classes} outside 1..=256")));
        }
        if let Some(&bad) = data.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { shape, data, num_classes })
    }

    /// Per-voxel argmax over the channel axis of sample `b` of a logit volume.
    pub fn from_logits<T: Scalar>(logits: &Tensor<T>, b: usize) -> Result<Self> {
        let d = logits.dims5()?;
        if b >= d.b {
            return Err(Error::input(format!("sample {b} out of range for batch {}", d.b)));
        }
        let v = d.voxels();
        let data = logits.data()[b * v * d.c..(b + 1) * v * d.c]
            .chunks_exact(d.c)
            .map(|row| {
                let mut best = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = i;
                    }
                }
                best as u8
            })
            .collect();
        Self::new(d.spatial(), data, d.c)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn binary(&self, class: u8) -> Vec<bool> {
        self.data.iter().map(|&l| l == class).collect()
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&l| l == class).count()
    }
}

/// `2 |G n P| / (|G| + |P|)`; two empty masks agree perfectly and score 1.
pub fn dsc(g: &[bool], p: &[bool]) -> Result<f64> {
    if g.len() != p.len() {
        return Err(Error::input(format!(
            "mask sizes differ: {} vs {}",
            g.len(),
            p.len()
        )));
    }
    let (mut inter, mut ng, mut np) = (0usize, 0usize, 0usize);
    for (&a, &b) in g.iter().zip(p) {
        inter += (a && b) as usize;
        ng += a as usize;
        np += b as usize;
    }
    if ng + np == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (ng + np) as f64)
}

/// Foreground voxels with at least one background 6-neighbour.
pub fn boundary(mask: &[bool], shape: [usize; 3]) -> Vec<usize> {
    let [d, h, w] = shape;
    let at = |z: usize, y: usize, x: usize| mask[(z * h + y) * w + x];
    let mut out = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0
                    || z + 1 == d
                    || y == 0
                    || y + 1 == h
                    || x == 0
                    || x + 1 == w
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1);
                if edge {
                    out.push((z * h + y) * w + x);
                }
            }
        }
    }
    out
}

/// Exact 1D squared distance transform (lower envelope of parabolas) with
/// sample spacing `s`, in place over a strided line.
fn edt_line(f: &mut [f64], idx: &[usize], s: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = idx.len();
    let s2 = s * s;
    v.clear();
    z.clear();
    out.clear();
    let val = |q: usize, f: &[f64]| f[idx[q]];
    let first = (0..n).find(|&q| val(q, f).is_finite());
    let Some(first) = first else { return };
    v.push(first);
    z.push(f64::NEG_INFINITY);
    for q in first + 1..n {
        let fq = val(q, f);
        if !fq.is_finite() {
            continue;
        }
        loop {
            let p = *v.last().unwrap();
            let fp = val(p, f);
            let (qf, pf) = (q as f64, p as f64);
            let sct = ((fq + s2 * qf * qf) - (fp + s2 * pf * pf)) / (2.0 * s2 * (qf - pf));
            if sct <= *z.last().unwrap() {
                v.pop();
                z.pop();
                if v.is_empty() {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
            } else {
                v.push(q);
                z.push(sct);
                break;
            }
        }
    }
    let mut k = 0;
    for q in 0..n {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = (q as f64 - v[k] as f64) * s;
        out.push(dq * dq + val(v[k], f));
    }
    for (q, &o) in out.iter().enumerate() {
        f[idx[q]] = o;
    }
}

/// Squared Euclidean distance from every voxel to the nearest seed voxel.
pub fn squared_distance_transform(seeds: &[usize], shape: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut f = vec![f64::INFINITY; d * h * w];
    for &s in seeds {
        f[s] = 0.0;
    }
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut idx = Vec::new();
    // width, then height, then depth
    for zz in 0..d {
        for y in 0..h {
            idx.clear();
            idx.extend((0..w).map(|x| (zz * h + y) * w + x));
            edt_line(&mut f, &idx, spacing[2], &mut v, &mut z, &mut out);
        }
    }
    for zz in 0..d {
        for x in 0..w {
            idx.clear();
            idx.extend((0..h).map(|y| (zz * h + y) * w + x));
            edt_line(&mut f, &idx, spacing[1], &mut v, &mut z, &mut out);
        }
    }
    for y in 0..h {
        for x in 0..w {
            idx.clear();
            idx.extend((0..d).map(|zz| (zz * h + y) * w + x));
            edt_line(&mut f, &idx, spacing[0], &mut v, &mut z, &mut out);
        }
    }
    f
}

/// Index of the nearest-rank `q`-th percentile in a sorted list of `n`
/// values: `ceil(q n / 100) - 1`.
pub fn nearest_rank(n: usize, q: usize) -> usize {
    ((q * n + 99) / 100).max(1) - 1
}

fn directed_d95(from: &[usize], to_sq: &[f64]) -> f64 {
    let mut d: Vec<f64> = from.iter().map(|&i| to_sq[i].sqrt()).collect();
    d.sort_by(f64::total_cmp);
    d[nearest_rank(d.len(), 95)]
}

/// Symmetric 95th-percentile Hausdorff distance; `None` when either mask is
/// empty.
pub fn hd95(y: &[bool], p: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Result<Option<f64>> {
    let n: usize = shape.iter().product();
    if y.len() != n || p.len() != n {
        return Err(Error::input(format!(
            "mask sizes {} and {} do not match grid {shape:?}",
            y.len(),
            p.len()
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::input(format!("voxel spacing {spacing:?} must be positive")));
    }
    let by = boundary(y, shape);
    let bp = boundary(p, shape);
    if by.is_empty() || bp.is_empty() {
        return Ok(None);
    }
    let (ty, tp) = rayon::join(
        || squared_distance_transform(&by, shape, spacing),
        || squared_distance_transform(&bp, shape, spacing),
    );
    Ok(Some(directed_d95(&by, &tp).max(directed_d95(&bp, &ty))))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub dsc: f64,
    /// `None` marks an undefined distance (class absent from a mask).
    pub hd95: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Foreground classes `1..N`.
    pub per_class: Vec<ClassMetrics>,
    pub mean_dsc: f64,
    /// Mean over classes with a defined HD95; `None` if there are none.
    pub mean_hd95: Option<f64>,
    pub hd95_undefined: usize,
}

/// One-vs-rest metrics for every foreground class; background (class 0)
/// is excluded from the means.
pub fn evaluate(pred: &LabelMask, truth: &LabelMask, spacing: [f64; 3]) -> Result<MetricReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::input(format!(
            "prediction grid {:?} differs from ground truth {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    let n = truth.num_classes();
    if pred.num_classes() != n {
        return Err(Error::input(format!(
            "prediction has {} classes, ground truth {n}",
            pred.num_classes()
        )));
    }
    let per_class = (1..n)
        .into_par_iter()
        .map(|c| {
            let g = truth.binary(c as u8);
            let p = pred.binary(c as u8);
            Ok(ClassMetrics {
                class: c,
                dsc: dsc(&g, &p)?,
                hd95: hd95(&g, &p, truth.shape(), spacing)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(per_class))
}

fn summarize(per_class: Vec<ClassMetrics>) -> MetricReport {
    let k = per_class.len().max(1) as f64;
    let mean_dsc = per_class.iter().map(|c| c.dsc).sum::<f64>() / k;
    let defined: Vec<f64> = per_class.iter().filter_map(|c| c.hd95).collect();
    MetricReport {
        hd95_undefined: per_class.len() - defined.len(),
        mean_hd95: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        mean_dsc,
        per_class,
    }
}

/// Averages per-sample reports class by class (undefined HD95 entries are
/// skipped and counted).
pub fn aggregate(reports: &[MetricReport]) -> Option<MetricReport> {
    let first = reports.first()?;
    let per_class = first
        .per_class
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let dscs: Vec<f64> = reports.iter().map(|r| r.per_class[i].dsc).collect();
            let hds: Vec<f64> = reports.iter().filter_map(|r| r.per_class[i].hd95).collect();
            ClassMetrics {
                class: c.class,
                dsc: dscs.iter().sum::<f64>() / dscs.len() as f64,
                hd95: (!hds.is_empty()).then(|| hds.iter().sum::<f64>() / hds.len() as f64),
            }
        })
        .collect();
    let mut out = summarize(per_class);
    out.mean_dsc = reports.iter().map(|r| r.mean_dsc).sum::<f64>() / reports.len() as f64;
    out.hd95_undefined = reports.iter().map(|r| r.hd95_undefined).sum();
    Some(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_hd95(y: &[bool], p: &[bool], shape: [usize; 3], sp: [f64; 3]) -> Option<f64> {
        let [_, h, w] = shape;
        let coords = |i: usize| [(i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64];
        let by = boundary(y, shape);
        let bp = boundary(p, shape);
        if by.is_empty() || bp.is_empty() {
            return None;
        }
        let directed = |a: &[usize], b: &[usize]| {
            let mut d: Vec<f64> = a
                .iter()
                .map(|&i| {
                    let ca = coords(i);
                    b.iter()
                        .map(|&j| {
                            let cb = coords(j);
                            let dx = (ca[2] - cb[2]) * sp[2];
                            let dy = (ca[1] - cb[1]) * sp[1];
                            let dz = (ca[0] - cb[0]) * sp[0];
                            (dx * dx + dy * dy + dz * dz).sqrt()
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            d.sort_by(f64::total_cmp);
            let rank = (0.95 * d.len() as f64 - 1e-9).ceil() as usize;
            d[rank.max(1) - 1]
        };
        Some(directed(&by, &bp).max(directed(&bp, &by)))
    }

    #[test]
    fn dsc_examples() {
        let g = [true, true, true, true, false, false];
        let p = [true, true, false, false, false, false];
        assert!((dsc(&g, &p).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(dsc(&g, &g).unwrap(), 1.0);
        let q = [false, false, false, false, true, true];
        assert_eq!(dsc(&g, &q).unwrap(), 0.0);
        assert_eq!(dsc(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(dsc(&[true], &[true, false]).is_err());
    }

    #[test]
    fn single_voxels_three_apart() {
        let shape = [1, 1, 8];
        let mut y = vec![false; 8];
        let mut p = vec![false; 8];
        y[1] = true;
        p[4] = true;
        assert_eq!(hd95(&y, &p, shape, [1.0; 3]).unwrap(), Some(3.0));
        assert_eq!(hd95(&y, &p, shape, [1.0, 1.0, 0.5]).unwrap(), Some(1.5));
        assert_eq!(hd95(&y, &y, shape, [1.0; 3]).unwrap(), Some(0.0));
        assert_eq!(hd95(&y, &[false; 8], shape, [1.0; 3]).unwrap(), None);
    }

    #[test]
    fn nearest_rank_matches_definition() {
        for n in 1..500 {
            let expected = (0.95 * n as f64 - 1e-9).ceil() as usize;
            assert_eq!(nearest_rank(n, 95) + 1, expected.max(1), "n = {n}");
        }
        assert_eq!(nearest_rank(1, 95), 0);
        assert_eq!(nearest_rank(20, 95), 18);
        assert_eq!(nearest_rank(21, 95), 19);
    }

    #[test]
    fn interior_voxels_are_not_boundary() {
        let shape = [3, 3, 3];
        let full = vec![true; 27];
        let b = boundary(&full, shape);
        assert_eq!(b.len(), 26);
        assert!(!b.contains(&13));
    }

    #[test]
    fn fast_path_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..60 {
            let shape = [rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(1..=8)];
            let n: usize = shape.iter().product();
            let dens = rng.random_range(0.05..0.7);
            let y: Vec<bool> = (0..n).map(|_| rng.random_bool(dens)).collect();
            let p: Vec<bool> = (0..n).map(|_| rng.random_bool(dens)).collect();
            let sp = if trial % 2 == 0 { [1.0; 3] } else { [2.0, 1.0, 3.0] };
            assert_eq!(hd95(&y, &p, shape, sp).unwrap(), brute_hd95(&y, &p, shape, sp), "trial {trial}");
        }
    }

    #[test]
    fn evaluate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = [4, 4, 4];
        let truth = LabelMask::new(shape, (0..64).map(|_| rng.random_range(0..3)).collect(), 3).unwrap();
        let same = evaluate(&truth, &truth, [1.0; 3]).unwrap();
        assert!(same.per_class.iter().all(|c| c.dsc == 1.0 && c.hd95 == Some(0.0)));
        let pred = LabelMask::new(shape, (0..64).map(|_| rng.random_range(0..3)).collect(), 3).unwrap();
        let r = evaluate(&pred, &truth, [1.0; 3]).unwrap();
        let mut manual = 0.0;
        for c in 1..3u8 {
            let g = truth.binary(c);
            let p = pred.binary(c);
            let inter = g.iter().zip(&p).filter(|(a, b)| **a && **b).count();
            let d = 2.0 * inter as f64 / (g.iter().filter(|v| **v).count() + p.iter().filter(|v| **v).count()) as f64;
            assert!((r.per_class[c as usize - 1].dsc - d).abs() < 1e-15);
            manual += d;
        }
        assert!((r.mean_dsc - manual / 2.0).abs() < 1e-15);

        let background = LabelMask::new(shape, vec![0; 64], 3).unwrap();
        let r = evaluate(&background, &truth, [1.0; 3]).unwrap();
        assert!(r.per_class.iter().all(|c| c.dsc == 0.0 && c.hd95.is_none()));
        assert_eq!(r.hd95_undefined, 2);
        assert_eq!(r.mean_hd95, None);
    }

    #[test]
    fn labels_are_bounded() {
        assert!(LabelMask::new([1, 1, 2], vec![0, 2], 2).is_err());
        assert!(LabelMask::new([1, 1, 2], vec![0], 2).is_err());
    }

    #[test]
    fn argmax_of_logits() {
        let logits = Tensor::new(vec![1, 1, 1, 2, 3], vec![0.1, 0.5, 0.2, 0.9, -1.0, 0.0]).unwrap();
        let m = LabelMask::from_logits(&logits, 0).unwrap();
        assert_eq!(m.data(), &[1, 0]);
    }
}
