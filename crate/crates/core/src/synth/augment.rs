//! Spatial augmentation. Intensities are resampled trilinearly, labels by
//! nearest neighbour.

use serde::{Deserialize, Serialize};

use super::{Phantom, PhantomSpec};
use crate::autodiff::Axis;
use crate::labels::LabelVolume;
use crate::tensor::{Rng, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentKind {
    Rot90,
    SmallRotation,
    Elastic,
}

/// Draws one augmentation of `kind`; bounds come from `spec`.
pub fn augment(phantom: &Phantom, rng: &mut Rng, kind: AugmentKind, spec: &PhantomSpec) -> Phantom {
    match kind {
        AugmentKind::Rot90 => {
            let axis = Axis::ALL[rng.below(3)];
            rot90(phantom, axis, 1 + rng.below(3))
        }
        AugmentKind::SmallRotation => {
            let axis = Axis::ALL[rng.below(3)];
            let deg = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg);
            small_rotation(phantom, axis, deg)
        }
        AugmentKind::Elastic => {
            let mut control = [[0.0; 64]; 3];
            for field in &mut control {
                for v in field.iter_mut() {
                    *v = rng.uniform(-spec.max_displacement, spec.max_displacement);
                }
            }
            elastic(phantom, &control)
        }
    }
}

fn extents(p: &Phantom) -> [usize; 3] {
    p.labels.extents()
}

fn rebuild(p: &Phantom, ext: [usize; 3], intensity: Vec<f64>, labels: Vec<u8>) -> Phantom {
    let [h, w, d] = ext;
    let mut out = Phantom {
        intensity: Tensor::from_data(Shape::new(1, h, w, d).unwrap(), intensity).unwrap(),
        labels: LabelVolume::new(h, w, d, labels).unwrap(),
        class_counts: p.class_counts.clone(),
        seed: p.seed,
        structures: Vec::new(),
    };
    out.recount();
    out
}

/// The two axes spanning the plane orthogonal to `axis`.
fn plane(axis: Axis) -> (usize, usize) {
    match axis {
        Axis::H => (1, 2),
        Axis::W => (0, 2),
        Axis::D => (0, 1),
    }
}

/// `k` quarter turns about `axis`. Exact; extents in the rotation plane swap
/// for odd `k`.
pub fn rot90(p: &Phantom, axis: Axis, k: usize) -> Phantom {
    let mut cur = p.clone();
    for _ in 0..k % 4 {
        let src = extents(&cur);
        let (a, b) = plane(axis);
        let mut dst = src;
        dst.swap(a, b);
        let [h, w, d] = dst;
        let mut intensity = Vec::with_capacity(h * w * d);
        let mut labels = Vec::with_capacity(h * w * d);
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let o = [i, j, k];
                    let mut q = o;
                    q[a] = src[a] - 1 - o[b];
                    q[b] = o[a];
                    intensity.push(cur.intensity.get(0, q[0], q[1], q[2]));
                    labels.push(cur.labels.get(q[0], q[1], q[2]));
                }
            }
        }
        cur = rebuild(&cur, dst, intensity, labels);
    }
    cur.structures = if k % 4 == 0 { p.structures.clone() } else { Vec::new() };
    cur
}

fn trilinear(t: &Tensor, q: [f64; 3]) -> f64 {
    let s = t.shape();
    let ext = [s.h, s.w, s.d];
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for ax in 0..3 {
        let x = q[ax].clamp(0.0, (ext[ax] - 1) as f64);
        let lo = (x.floor() as usize).min(ext[ax].saturating_sub(2));
        base[ax] = lo;
        frac[ax] = x - lo as f64;
    }
    let mut v = 0.0;
    for corner in 0..8 {
        let mut idx = [0usize; 3];
        let mut wgt = 1.0;
        for ax in 0..3 {
            let up = (corner >> (2 - ax)) & 1 == 1;
            idx[ax] = (base[ax] + up as usize).min(ext[ax] - 1);
            wgt *= if up { frac[ax] } else { 1.0 - frac[ax] };
        }
        v += wgt * t.get(0, idx[0], idx[1], idx[2]);
    }
    v
}

fn nearest(l: &LabelVolume, q: [f64; 3]) -> u8 {
    let ext = l.extents();
    let mut idx = [0usize; 3];
    for ax in 0..3 {
        let r = q[ax].round();
        if !(r >= 0.0 && r <= (ext[ax] - 1) as f64) {
            return 0;
        }
        idx[ax] = r as usize;
    }
    l.get(idx[0], idx[1], idx[2])
}

/// Pulls every output voxel from `source(p)` in the input.
fn warp(p: &Phantom, source: impl Fn([usize; 3]) -> [f64; 3]) -> Phantom {
    let ext = extents(p);
    let [h, w, d] = ext;
    let mut intensity = Vec::with_capacity(h * w * d);
    let mut labels = Vec::with_capacity(h * w * d);
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let q = source([i, j, k]);
                intensity.push(trilinear(&p.intensity, q));
                labels.push(nearest(&p.labels, q));
            }
        }
    }
    rebuild(p, ext, intensity, labels)
}

/// Rotation by `degrees` about `axis` through the volume centre.
pub fn small_rotation(p: &Phantom, axis: Axis, degrees: f64) -> Phantom {
    let ext = extents(p);
    let (a, b) = plane(axis);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let ca = (ext[a] as f64 - 1.0) / 2.0;
    let cb = (ext[b] as f64 - 1.0) / 2.0;
    warp(p, |o| {
        let mut q = o.map(|v| v as f64);
        let (x, y) = (q[a] - ca, q[b] - cb);
        // Inverse rotation maps output voxels back to their source.
        q[a] = cos * x + sin * y + ca;
        q[b] = -sin * x + cos * y + cb;
        q
    })
}

/// Displacement field from a 4³ control grid per axis (index `(i·4 + j)·4 + k`),
/// spread over the volume by trilinear interpolation.
pub fn elastic(p: &Phantom, control: &[[f64; 64]; 3]) -> Phantom {
    let ext = extents(p);
    let grids: Vec<Tensor> = control
        .iter()
        .map(|c| Tensor::from_data(Shape::new(1, 4, 4, 4).unwrap(), c.to_vec()).unwrap())
        .collect();
    warp(p, |o| {
        let g = [0, 1, 2].map(|ax| {
            if ext[ax] > 1 {
                o[ax] as f64 * 3.0 / (ext[ax] - 1) as f64
            } else {
                0.0
            }
        });
        [0, 1, 2].map(|ax| o[ax] as f64 + trilinear(&grids[ax], g))
    })
}
