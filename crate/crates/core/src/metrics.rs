//! Volumetric and surface Dice.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVolume;

/// Volumes with fewer voxels than this use all-pairs boundary distances.
pub const BRUTE_FORCE_LIMIT: usize = 16 * 16 * 16;

fn same_extent(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.extents() != b.extents() {
        return Err(Error::shape(format!(
            "label volumes differ in extent: {} vs {}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)` for the masks of `class`; 1 when both are empty.
pub fn volumetric_dice(pred: &LabelVolume, gt: &LabelVolume, class: usize) -> Result<f64> {
    same_extent(pred, gt)?;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (ip, ig) = (p as usize == class, g as usize == class);
        a += ip as usize;
        b += ig as usize;
        both += (ip && ig) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Mask voxels with at least one face neighbour outside the mask; the volume
/// border counts as outside.
pub fn boundary(mask: &[bool], [h, w, d]: [usize; 3]) -> Vec<[usize; 3]> {
    let at = |i: usize, j: usize, k: usize| mask[(i * w + j) * d + k];
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                if !at(i, j, k) {
                    continue;
                }
                let edge = i == 0 || j == 0 || k == 0 || i + 1 == h || j + 1 == w || k + 1 == d;
                if edge
                    || !at(i - 1, j, k)
                    || !at(i + 1, j, k)
                    || !at(i, j - 1, k)
                    || !at(i, j + 1, k)
                    || !at(i, j, k - 1)
                    || !at(i, j, k + 1)
                {
                    out.push([i, j, k]);
                }
            }
        }
    }
    out
}

/// Euclidean distance between voxel centres under `spacing`.
pub fn voxel_distance(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for ax in 0..3 {
        let delta = (a[ax] as f64 - b[ax] as f64) * spacing[ax];
        s += delta * delta;
    }
    s.sqrt()
}

fn count_within_pairs(from: &[[usize; 3]], to: &[[usize; 3]], tol: f64, spacing: [f64; 3]) -> usize {
    from.iter()
        .filter(|&&a| to.iter().any(|&b| voxel_distance(a, b, spacing) <= tol))
        .count()
}

/// Marks every voxel within `tol` of a surface voxel by stamping the
/// tolerance ball around each one.
fn tolerance_map(surface: &[[usize; 3]], ext: [usize; 3], tol: f64, spacing: [f64; 3]) -> Vec<bool> {
    let [h, w, d] = ext;
    let reach: Vec<usize> = (0..3)
        .map(|ax| {
            // One voxel of slack; the exact distance test below decides.
            let r = (tol / spacing[ax]).floor() + 1.0;
            if r.is_finite() { (r as usize).min(ext[ax]) } else { ext[ax] }
        })
        .collect();
    let mut near = vec![false; h * w * d];
    for &b in surface {
        let lo = |ax: usize| b[ax].saturating_sub(reach[ax]);
        let hi = |ax: usize| (b[ax] + reach[ax]).min(ext[ax] - 1);
        for i in lo(0)..=hi(0) {
            for j in lo(1)..=hi(1) {
                for k in lo(2)..=hi(2) {
                    let idx = (i * w + j) * d + k;
                    if !near[idx] && voxel_distance([i, j, k], b, spacing) <= tol {
                        near[idx] = true;
                    }
                }
            }
        }
    }
    near
}

fn count_within_map(from: &[[usize; 3]], to: &[[usize; 3]], ext: [usize; 3], tol: f64, spacing: [f64; 3]) -> usize {
    let near = tolerance_map(to, ext, tol, spacing);
    let [_, w, d] = ext;
    from.iter().filter(|a| near[(a[0] * w + a[1]) * d + a[2]]).count()
}

/// Fraction of boundary voxels of either mask lying within `tolerance` of the
/// other mask's boundary. 1 when both masks are empty, 0 when exactly one is.
pub fn surface_dice(
    pred: &LabelVolume,
    gt: &LabelVolume,
    class: usize,
    tolerance: f64,
    spacing: [f64; 3],
) -> Result<f64> {
    same_extent(pred, gt)?;
    if !(tolerance >= 0.0) {
        return Err(Error::Contract(format!("tolerance must be ≥ 0, got {tolerance}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Contract(format!("voxel spacing must be positive, got {spacing:?}")));
    }
    let ext = pred.extents();
    let ba = boundary(&pred.mask(class), ext);
    let bb = boundary(&gt.mask(class), ext);
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let (na, nb) = if pred.len() < BRUTE_FORCE_LIMIT {
        (
            count_within_pairs(&ba, &bb, tolerance, spacing),
            count_within_pairs(&bb, &ba, tolerance, spacing),
        )
    } else {
        (
            count_within_map(&ba, &bb, ext, tolerance, spacing),
            count_within_map(&bb, &ba, ext, tolerance, spacing),
        )
    };
    Ok((na + nb) as f64 / (ba.len() + bb.len()) as f64)
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub volume_id: usize,
    pub class_id: usize,
    pub vol_dice: f64,
    pub surf_dice: f64,
    pub tolerance: f64,
}

/// Rows for every class of one prediction, background included.
pub fn score_volume(
    volume_id: usize,
    pred: &LabelVolume,
    gt: &LabelVolume,
    n_classes: usize,
    tolerance: f64,
    spacing: [f64; 3],
) -> Result<Vec<MetricRow>> {
    (0..n_classes)
        .map(|c| {
            Ok(MetricRow {
                volume_id,
                class_id: c,
                vol_dice: volumetric_dice(pred, gt, c)?,
                surf_dice: surface_dice(pred, gt, c, tolerance, spacing)?,
                tolerance,
            })
        })
        .collect()
}

/// Mean volumetric and surface Dice over foreground rows (class ≥ 1).
pub fn foreground_means(rows: &[MetricRow]) -> (f64, f64) {
    let fg: Vec<&MetricRow> = rows.iter().filter(|r| r.class_id > 0).collect();
    if fg.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = fg.len() as f64;
    (
        fg.iter().map(|r| r.vol_dice).sum::<f64>() / n,
        fg.iter().map(|r| r.surf_dice).sum::<f64>() / n,
    )
}

pub fn write_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(csv_error))
        .collect()
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
