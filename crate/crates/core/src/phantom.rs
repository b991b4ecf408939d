//! Seeded brain-like phantoms: a head ellipsoid with left-right mirrored
//! internal structures, plus asymmetric bright lesions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, AsaError, Result};
use crate::rng::{derive_seed, rng_from};
use crate::volume::Volume;

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_TISSUE: u8 = 1;
pub const LABEL_LESION: u8 = 2;

const LESION_RETRIES: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    /// Mirrored pairs of internal ellipsoids.
    pub n_structures: usize,
    pub n_lesions: usize,
    pub noise_sigma: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self { dims: [32, 32, 32], seed: 0, n_structures: 4, n_lesions: 2, noise_sigma: 0.02 }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(contract(format!("phantom dims must be >= 16, got {:?}", self.dims)));
        }
        if self.n_structures == 0 {
            return Err(contract("a phantom needs at least one internal structure"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(contract("noise_sigma must be non-negative"));
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

/// Ellipsoid in the mirrored frame: `u` is the distance from the mid-W plane.
struct Structure {
    center: [f64; 3],
    radii: [f64; 3],
    delta: f64,
}

struct Lesion {
    center: [f64; 3],
    radius: f64,
    gain: f64,
}

fn smooth_step(d: f64) -> f64 {
    1.0 / (1.0 + ((d - 1.0) * 10.0).exp())
}

fn norm_dist(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> f64 {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>().sqrt()
}

fn sample_structure(rng: &mut ChaCha8Rng, head: [f64; 3]) -> Structure {
    // Centres sit inside the head; `u` stays off the midline so each pair is
    // two distinct blobs.
    let center = [
        rng.random_range(-0.4..0.4) * head[0],
        rng.random_range(-0.4..0.4) * head[1],
        rng.random_range(0.2..0.55) * head[2],
    ];
    let radii = [
        rng.random_range(0.15..0.3) * head[0],
        rng.random_range(0.15..0.3) * head[1],
        rng.random_range(0.12..0.25) * head[2],
    ];
    let mag = rng.random_range(0.15..0.35);
    let delta = if rng.random_bool(0.5) { mag } else { -mag };
    Structure { center, radii, delta }
}

/// Generates a labelled phantom. Intensities are min-max normalized to
/// `[0, 1]`; labels are background 0, tissue 1, lesion 2.
///
/// With `n_lesions == 0` and `noise_sigma == 0` the field is exactly
/// mirror-symmetric: `v(t, h, w) == v(t, h, W-1-w)`.
pub fn gen_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let [t_n, h_n, w_n] = spec.dims;
    let mut rng = rng_from(spec.seed);
    let center = [(t_n - 1) as f64 / 2.0, (h_n - 1) as f64 / 2.0, (w_n - 1) as f64 / 2.0];
    let head = [0.42 * t_n as f64, 0.42 * h_n as f64, 0.42 * w_n as f64];
    let base = rng.random_range(0.45..0.55);
    let min_dim = *spec.dims.iter().min().expect("three dims") as f64;
    let structures: Vec<Structure> = (0..spec.n_structures).map(|_| sample_structure(&mut rng, head)).collect();

    let mut lesions: Vec<Lesion> = Vec::with_capacity(spec.n_lesions);
    for k in 0..spec.n_lesions {
        let mut placed = None;
        for _ in 0..LESION_RETRIES {
            let radius = rng.random_range(0.08..0.125) * min_dim;
            let c = [
                center[0] + rng.random_range(-0.6..0.6) * head[0],
                center[1] + rng.random_range(-0.6..0.6) * head[1],
                center[2] + rng.random_range(-0.6..0.6) * head[2],
            ];
            let inside = norm_dist(c, center, head) <= 0.65;
            let apart = lesions.iter().all(|l| {
                let d: f64 = (0..3).map(|a| (c[a] - l.center[a]).powi(2)).sum::<f64>().sqrt();
                d > l.radius + radius + 1.0
            });
            if inside && apart {
                placed = Some(Lesion { center: c, radius, gain: rng.random_range(0.6..0.8) });
                break;
            }
        }
        let Some(lesion) = placed else {
            return Err(AsaError::Generation(format!(
                "lesion {k}: no centre within 0.65 of the head radius and clear of other lesions after {LESION_RETRIES} tries"
            )));
        };
        lesions.push(lesion);
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| AsaError::Generation(e.to_string()))?;
    let mut field = Vec::with_capacity(t_n * h_n * w_n);
    let mut labels = Vec::with_capacity(t_n * h_n * w_n);
    for t in 0..t_n {
        for h in 0..h_n {
            for w in 0..w_n {
                // Everything symmetric is evaluated on |w - centre|.
                let u = (w as f64 - center[2]).abs();
                let mirrored = [t as f64 - center[0], h as f64 - center[1], u];
                let head_d = norm_dist(mirrored, [0.0; 3], head);
                let mut v = base * smooth_step(head_d);
                for s in &structures {
                    v += s.delta * smooth_step(norm_dist(mirrored, s.center, s.radii)) * smooth_step(head_d);
                }
                let mut label = if head_d <= 1.0 { LABEL_TISSUE } else { LABEL_BACKGROUND };
                let p = [t as f64, h as f64, w as f64];
                for l in &lesions {
                    let d = norm_dist(p, l.center, [l.radius; 3]);
                    v += l.gain * smooth_step(d);
                    if d <= 1.0 {
                        label = LABEL_LESION;
                    }
                }
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                field.push(v);
                labels.push(label);
            }
        }
    }

    let (lo, hi) = field.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = hi - lo;
    let voxels = field
        .iter()
        .map(|&v| if span > 0.0 { ((v - lo) / span) as f32 } else { 0.0 })
        .collect();
    Volume::new(spec.dims, voxels)?.with_labels(labels)
}

/// `count` phantoms whose seeds derive from `spec.seed`.
pub fn phantom_set(spec: &PhantomSpec, count: usize) -> Result<Vec<Volume>> {
    (0..count)
        .map(|i| gen_phantom(&spec.with_seed(derive_seed(spec.seed, &[0x5048_414e, i as u64]))))
        .collect()
}
