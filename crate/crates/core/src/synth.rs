//! Seeded ellipsoid phantoms with large and small structures.

mod augment;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelVolume;
use crate::tensor::{Rng, Shape, Tensor};

pub use augment::{augment, elastic, rot90, small_rotation, AugmentKind};

/// Placement attempts per structure before giving up.
pub const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    /// `(H, W, D)`, each divisible by 4.
    pub extents: [usize; 3],
    pub n_classes: usize,
    /// Classes `1..=n_large` are large; the remaining foreground classes are small.
    pub n_large: usize,
    /// Per-axis radius range of large structures, in voxels.
    pub large_radius: [f64; 2],
    pub small_radius: [f64; 2],
    /// Half-width of the uniform intensity noise.
    pub noise: f64,
    pub class_means: Vec<f64>,
    /// Elastic control-point displacement bound, in voxels.
    pub max_displacement: f64,
    pub max_rotation_deg: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            extents: [16, 16, 16],
            n_classes: 4,
            n_large: 1,
            large_radius: [4.5, 5.5],
            small_radius: [1.45, 1.7],
            noise: 0.05,
            class_means: vec![0.1, 0.4, 0.65, 0.9],
            max_displacement: 2.0,
            max_rotation_deg: 10.0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.extents.iter().any(|&e| e == 0 || e % 4 != 0) {
            return bad(format!("extents {:?} must be positive multiples of 4", self.extents));
        }
        if self.n_classes < 3 || self.n_large == 0 || self.n_large + 1 >= self.n_classes {
            return bad(format!(
                "need background, at least one large and one small class; got n_classes = {}, n_large = {}",
                self.n_classes, self.n_large
            ));
        }
        if self.n_classes > 256 {
            return bad(format!("{} classes do not fit u8 labels", self.n_classes));
        }
        if self.class_means.len() != self.n_classes {
            return bad(format!("{} class means for {} classes", self.class_means.len(), self.n_classes));
        }
        for (name, [lo, hi]) in [("large_radius", self.large_radius), ("small_radius", self.small_radius)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return bad(format!("{name} range [{lo}, {hi}] is invalid"));
            }
        }
        if self.small_radius[1] >= self.large_radius[0] {
            return bad("small structures must be strictly smaller than large ones".into());
        }
        let min_extent = *self.extents.iter().min().unwrap() as f64;
        if 2.0 * self.large_radius[1].ceil() + 1.0 > min_extent {
            return bad(format!("large radius {} does not fit extents {:?}", self.large_radius[1], self.extents));
        }
        if !(self.noise >= 0.0) || !(self.max_displacement >= 0.0) || !(self.max_rotation_deg >= 0.0) {
            return bad("noise, displacement and rotation bounds must be ≥ 0".into());
        }
        Ok(())
    }

    pub fn radius_range(&self, class: usize) -> [f64; 2] {
        if class <= self.n_large {
            self.large_radius
        } else {
            self.small_radius
        }
    }
}

/// Axis-aligned ellipsoid in voxel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipsoid {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl Ellipsoid {
    pub fn contains(&self, p: [usize; 3]) -> bool {
        let mut s = 0.0;
        for ax in 0..3 {
            let t = (p[ax] as f64 - self.center[ax]) / self.radii[ax];
            s += t * t;
        }
        s <= 1.0
    }

    /// Voxels whose centres lie inside, clipped to `extents`.
    pub fn voxels(&self, extents: [usize; 3]) -> Vec<[usize; 3]> {
        let range = |ax: usize| {
            let lo = (self.center[ax] - self.radii[ax]).floor().max(0.0) as usize;
            let hi = ((self.center[ax] + self.radii[ax]).ceil() as usize).min(extents[ax] - 1);
            lo..=hi
        };
        let mut out = Vec::new();
        for i in range(0) {
            for j in range(1) {
                for k in range(2) {
                    if self.contains([i, j, k]) {
                        out.push([i, j, k]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    /// `(1, H, W, D)` in `[0, 1]`.
    pub intensity: Tensor,
    pub labels: LabelVolume,
    pub class_counts: Vec<usize>,
    pub seed: u64,
    pub structures: Vec<(usize, Ellipsoid)>,
}

impl Phantom {
    pub fn n_classes(&self) -> usize {
        self.class_counts.len()
    }

    /// Rebuilds `class_counts` after `labels` changed.
    pub(crate) fn recount(&mut self) {
        let n = self.class_counts.len();
        self.class_counts = self.labels.histogram(n).expect("labels stay below n_classes");
    }

    /// Largest over smallest foreground class count.
    pub fn imbalance_ratio(&self) -> f64 {
        let fg = &self.class_counts[1..];
        let max = *fg.iter().max().unwrap() as f64;
        let min = *fg.iter().min().unwrap() as f64;
        max / min
    }
}

/// Places one ellipsoid per foreground class, large classes first, each fully
/// inside the volume and at least one voxel clear of earlier structures.
pub fn generate(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let ext = spec.extents;
    let [h, w, d] = ext;
    let mut rng = Rng::new(seed);
    let mut labels = LabelVolume::zeros(h, w, d)?;
    // Occupied voxels dilated by one (26-neighbourhood).
    let mut blocked = vec![false; h * w * d];
    let idx = |p: [usize; 3]| (p[0] * w + p[1]) * d + p[2];
    let mut structures = Vec::with_capacity(spec.n_classes - 1);

    for class in 1..spec.n_classes {
        let [lo, hi] = spec.radius_range(class);
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let radii = [0; 3].map(|_| rng.uniform(lo, hi));
            let mut center = [0.0; 3];
            let mut fits = true;
            for ax in 0..3 {
                let margin = radii[ax].ceil() as usize;
                if 2 * margin + 1 > ext[ax] {
                    fits = false;
                    break;
                }
                center[ax] = (margin + rng.below(ext[ax] - 2 * margin)) as f64;
            }
            if !fits {
                continue;
            }
            let e = Ellipsoid { center, radii };
            let vox = e.voxels(ext);
            if !vox.is_empty() && vox.iter().all(|&p| !blocked[idx(p)]) {
                placed = Some((e, vox));
                break;
            }
        }
        let Some((e, vox)) = placed else {
            return Err(Error::Generation {
                class,
                attempts: MAX_ATTEMPTS,
            });
        };
        for &p in &vox {
            labels.set(p[0], p[1], p[2], class as u8);
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    for dk in -1i64..=1 {
                        let q = [p[0] as i64 + di, p[1] as i64 + dj, p[2] as i64 + dk];
                        if (0..3).all(|ax| q[ax] >= 0 && (q[ax] as usize) < ext[ax]) {
                            blocked[idx(q.map(|v| v as usize))] = true;
                        }
                    }
                }
            }
        }
        structures.push((class, e));
    }

    let data = labels
        .data()
        .iter()
        .map(|&l| {
            let noise = if spec.noise > 0.0 { rng.uniform(-spec.noise, spec.noise) } else { 0.0 };
            (spec.class_means[l as usize] + noise).clamp(0.0, 1.0)
        })
        .collect();
    let intensity = Tensor::from_data(Shape::new(1, h, w, d)?, data)?;
    let class_counts = labels.histogram(spec.n_classes)?;
    Ok(Phantom {
        intensity,
        labels,
        class_counts,
        seed,
        structures,
    })
}
