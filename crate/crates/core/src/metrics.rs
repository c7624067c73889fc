//! Overlap and surface-distance metrics between binary masks.
//!
//! Surfaces use 6-connectivity (out-of-bounds counts as background) and
//! distances are Euclidean between voxel centres in voxel units. Nearest-surface
//! distances come from an exact separable squared distance transform, so they
//! agree bit-for-bit with an all-pairs search.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{BinaryMask, Shape3};
use crate::error::{Error, Result};
use crate::exec;

fn check_shapes(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("mask shapes {} and {} differ", a.shape(), b.shape())));
    }
    Ok(())
}

fn overlap_counts(a: &BinaryMask, b: &BinaryMask) -> Result<(usize, usize, usize)> {
    check_shapes(a, b)?;
    let (mut na, mut nb, mut both) = (0, 0, 0);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        both += (x & y) as usize;
    }
    Ok((na, nb, both))
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (na, nb, both) = overlap_counts(a, b)?;
    Ok(if na + nb == 0 {
        1.0
    } else {
        2.0 * both as f64 / (na + nb) as f64
    })
}

/// `|A∩B| / |A∪B|`; 1 when both masks are empty.
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (na, nb, both) = overlap_counts(a, b)?;
    let union = na + nb - both;
    Ok(if union == 0 { 1.0 } else { both as f64 / union as f64 })
}

/// Boundary voxels of a mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurfaceSet {
    pub shape: Shape3,
    pub points: Vec<[usize; 3]>,
}

impl SurfaceSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Foreground voxels with at least one background or out-of-bounds 6-neighbour.
pub fn extract_surface(m: &BinaryMask) -> SurfaceSet {
    let s = m.shape();
    let [d, h, w] = s.0;
    let fg = |z: isize, y: isize, x: isize| -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < d
            && (y as usize) < h
            && (x as usize) < w
            && m.get(z as usize, y as usize, x as usize)
    };
    let mut points = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if !m.get(z, y, x) {
                    continue;
                }
                let (zi, yi, xi) = (z as isize, y as isize, x as isize);
                let boundary = !fg(zi - 1, yi, xi)
                    || !fg(zi + 1, yi, xi)
                    || !fg(zi, yi - 1, xi)
                    || !fg(zi, yi + 1, xi)
                    || !fg(zi, yi, xi - 1)
                    || !fg(zi, yi, xi + 1);
                if boundary {
                    points.push([z, y, x]);
                }
            }
        }
    }
    SurfaceSet { shape: s, points }
}

/// Exact 1D squared distance transform (lower envelope of parabolas) over one
/// line; `f` holds squared distances so far, `INFINITY` where unknown.
fn edt_line(f: &[f64], out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let pf = p as f64;
                    let s = ((fq + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
                    if s <= *z.last().expect("paired with v") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let p = v[k] as f64;
        *o = (qf - p) * (qf - p) + f[v[k]];
    }
}

/// Squared Euclidean distance from every voxel to the nearest point of `set`.
fn squared_distance_map(set: &SurfaceSet) -> Vec<f64> {
    let s = set.shape;
    let [d, h, w] = s.0;
    let mut g = vec![f64::INFINITY; s.voxels()];
    for &p in &set.points {
        g[s.index(p[0], p[1], p[2])] = 0.0;
    }
    let dims = [d, h, w];
    let strides = [h * w, w, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        line.resize(n, 0.0);
        out.resize(n, 0.0);
        for start in 0..s.voxels() {
            let coord = (start / stride) % n;
            if coord != 0 {
                continue;
            }
            for i in 0..n {
                line[i] = g[start + i * stride];
            }
            edt_line(&line, &mut out, &mut v, &mut z);
            for i in 0..n {
                g[start + i * stride] = out[i];
            }
        }
    }
    g
}

/// Distance from each point of `from` to the nearest point of `to`.
pub fn surface_distances(from: &SurfaceSet, to: &SurfaceSet) -> Vec<f64> {
    let map = squared_distance_map(to);
    from.points.iter().map(|&p| map[from.shape.index(p[0], p[1], p[2])].sqrt()).collect()
}

/// All-pairs nearest distance; the reference the transform is checked against.
pub fn surface_distances_brute_force(from: &SurfaceSet, to: &SurfaceSet) -> Vec<f64> {
    from.points
        .iter()
        .map(|p| {
            to.points
                .iter()
                .map(|q| {
                    let d2: f64 = (0..3).map(|k| (p[k] as f64 - q[k] as f64).powi(2)).sum();
                    d2
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// Linear-interpolation percentile of unsorted values, `q` in [0, 100].
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

fn directed_distances(a: &BinaryMask, b: &BinaryMask, brute: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    check_shapes(a, b)?;
    let (sa, sb) = (extract_surface(a), extract_surface(b));
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::MetricUndefined(
            "surface distances need two nonempty masks".into(),
        ));
    }
    Ok(if brute {
        (surface_distances_brute_force(&sa, &sb), surface_distances_brute_force(&sb, &sa))
    } else {
        (surface_distances(&sa, &sb), surface_distances(&sb, &sa))
    })
}

fn asd_from(ab: &[f64], ba: &[f64]) -> f64 {
    (ab.iter().sum::<f64>() + ba.iter().sum::<f64>()) / (ab.len() + ba.len()) as f64
}

fn hd95_from(ab: &[f64], ba: &[f64]) -> f64 {
    percentile(ab, 95.0).max(percentile(ba, 95.0))
}

/// Symmetric average surface distance in voxels.
pub fn asd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (ab, ba) = directed_distances(a, b, false)?;
    Ok(asd_from(&ab, &ba))
}

/// Larger of the two directed 95th-percentile surface distances, in voxels.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    let (ab, ba) = directed_distances(a, b, false)?;
    Ok(hd95_from(&ab, &ba))
}

/// `asd` and `hd95` computed by all-pairs search.
pub fn surface_metrics_brute_force(a: &BinaryMask, b: &BinaryMask) -> Result<(f64, f64)> {
    let (ab, ba) = directed_distances(a, b, true)?;
    Ok((asd_from(&ab, &ba), hd95_from(&ab, &ba)))
}

/// Metrics for one case. Dice and Jaccard are fractions in [0, 1]; distances
/// are absent when either mask is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub asd: Option<f64>,
    pub hd95: Option<f64>,
}

pub fn evaluate_case(id: &str, pred: &BinaryMask, gt: &BinaryMask) -> Result<CaseMetrics> {
    let dice_v = dice(pred, gt)?;
    let jac = jaccard(pred, gt)?;
    let (asd_v, hd) = match directed_distances(pred, gt, false) {
        Ok((ab, ba)) => (Some(asd_from(&ab, &ba)), Some(hd95_from(&ab, &ba))),
        Err(Error::MetricUndefined(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(CaseMetrics {
        id: id.to_string(),
        dice: dice_v,
        jaccard: jac,
        asd: asd_v,
        hd95: hd,
    })
}

/// Evaluates `(id, prediction, ground truth)` triples, in parallel when enabled.
pub fn evaluate_cases(cases: &[(String, BinaryMask, BinaryMask)]) -> Result<Vec<CaseMetrics>> {
    exec::map_slice(cases, |(id, p, g)| evaluate_case(id, p, g))
        .into_iter()
        .collect()
}

pub const MEAN_ROW: &str = "mean";

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values.flatten() {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean over cases; distance means skip cases where they are undefined.
pub fn summarize(records: &[CaseMetrics]) -> Result<CaseMetrics> {
    if records.is_empty() {
        return Err(Error::MetricUndefined("no cases to summarize".into()));
    }
    let n = records.len() as f64;
    Ok(CaseMetrics {
        id: MEAN_ROW.into(),
        dice: records.iter().map(|r| r.dice).sum::<f64>() / n,
        jaccard: records.iter().map(|r| r.jaccard).sum::<f64>() / n,
        asd: mean_defined(records.iter().map(|r| r.asd)),
        hd95: mean_defined(records.iter().map(|r| r.hd95)),
    })
}

/// Per-case rows followed by the mean row.
pub fn report_table(records: &[CaseMetrics]) -> Result<Vec<CaseMetrics>> {
    let mut rows = records.to_vec();
    rows.push(summarize(records)?);
    Ok(rows)
}

/// CSV with columns `id, dice, jaccard, asd, hd95`; undefined distances are empty cells.
pub fn write_metrics_csv(path: &Path, rows: &[CaseMetrics]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<CaseMetrics>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.2}"))
}

/// Aligned text: Dice[%] Jaccard[%] ASD[voxel] 95HD[voxel].
pub fn format_table(rows: &[CaseMetrics]) -> String {
    let width = rows.iter().map(|r| r.id.len()).max().unwrap_or(2).max(2);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>8}  {:>10}  {:>10}  {:>11}",
        "id", "Dice[%]", "Jaccard[%]", "ASD[voxel]", "95HD[voxel]"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<width$}  {:>8.2}  {:>10.2}  {:>10}  {:>11}",
            r.id,
            100.0 * r.dice,
            100.0 * r.jaccard,
            cell(r.asd),
            cell(r.hd95)
        );
    }
    s
}
