//! Procedural multi-organ phantoms: non-overlapping shapes at seeded
//! random poses with additive Gaussian intensity noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{DatasetSplit, HiddenLabels, LabelMap, PhantomSpec, ShapeKind, Volume};

const PLACEMENT_TRIES: usize = 500;
const TORUS_ASPECT: f64 = 3.0; // major radius = aspect * minor radius
const TORUS_BEND: f64 = 1.5; // z amplitude of the bent central plane

/// Box-Muller standard normal; keeps the dependency surface at plain
/// uniform draws.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Uniform random rotation from a normalized quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let (mut q0, mut q1, mut q2, mut q3);
    loop {
        q0 = standard_normal(rng);
        q1 = standard_normal(rng);
        q2 = standard_normal(rng);
        q3 = standard_normal(rng);
        let n = (q0 * q0 + q1 * q1 + q2 * q2 + q3 * q3).sqrt();
        if n > 1e-6 {
            q0 /= n;
            q1 /= n;
            q2 /= n;
            q3 /= n;
            break;
        }
    }
    [
        [
            1.0 - 2.0 * (q2 * q2 + q3 * q3),
            2.0 * (q1 * q2 - q0 * q3),
            2.0 * (q1 * q3 + q0 * q2),
        ],
        [
            2.0 * (q1 * q2 + q0 * q3),
            1.0 - 2.0 * (q1 * q1 + q3 * q3),
            2.0 * (q2 * q3 - q0 * q1),
        ],
        [
            2.0 * (q1 * q3 - q0 * q2),
            2.0 * (q2 * q3 + q0 * q1),
            1.0 - 2.0 * (q1 * q1 + q2 * q2),
        ],
    ]
}

fn rotate_t(rot: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    // transpose (inverse) rotation: world -> local
    [
        rot[0][0] * p[0] + rot[1][0] * p[1] + rot[2][0] * p[2],
        rot[0][1] * p[0] + rot[1][1] * p[1] + rot[2][1] * p[2],
        rot[0][2] * p[0] + rot[1][2] * p[1] + rot[2][2] * p[2],
    ]
}

enum Geometry {
    Sphere {
        radius: f64,
    },
    Ellipsoid {
        semi: [f64; 3],
        rot: [[f64; 3]; 3],
    },
    BentTorus {
        major: f64,
        minor: f64,
        bend: f64,
        rot: [[f64; 3]; 3],
    },
}

struct Placed {
    center: [f64; 3],
    bound: f64,
    geom: Geometry,
    class: u8,
}

impl Placed {
    fn contains(&self, p: [f64; 3]) -> bool {
        let q = [
            p[0] - self.center[0],
            p[1] - self.center[1],
            p[2] - self.center[2],
        ];
        match &self.geom {
            Geometry::Sphere { radius } => {
                q[0] * q[0] + q[1] * q[1] + q[2] * q[2] <= radius * radius
            }
            Geometry::Ellipsoid { semi, rot } => {
                let l = rotate_t(rot, q);
                let a = l[0] / semi[0];
                let b = l[1] / semi[1];
                let c = l[2] / semi[2];
                a * a + b * b + c * c <= 1.0
            }
            Geometry::BentTorus {
                major,
                minor,
                bend,
                rot,
            } => {
                let l = rotate_t(rot, q);
                let ring = (l[0] * l[0] + l[1] * l[1]).sqrt();
                let phi = l[1].atan2(l[0]);
                let dz = bend * (2.0 * phi).sin();
                let dr = ring - major;
                let dv = l[2] - dz;
                dr * dr + dv * dv <= minor * minor
            }
        }
    }
}

fn build_geometry(
    kind: ShapeKind,
    target_voxels: f64,
    rng: &mut ChaCha8Rng,
) -> (Geometry, f64) {
    match kind {
        ShapeKind::Sphere => {
            let r = (3.0 * target_voxels / (4.0 * std::f64::consts::PI)).cbrt();
            (Geometry::Sphere { radius: r }, r)
        }
        ShapeKind::Ellipsoid => {
            let r = (3.0 * target_voxels / (4.0 * std::f64::consts::PI)).cbrt();
            let s1 = rng.gen_range(0.75..1.35);
            let s2 = rng.gen_range(0.75..1.35);
            let semi = [r * s1, r * s2, r / (s1 * s2)];
            let rot = random_rotation(rng);
            let bound = semi.iter().cloned().fold(0.0, f64::max);
            (Geometry::Ellipsoid { semi, rot }, bound)
        }
        ShapeKind::Complex => {
            let minor = (target_voxels
                / (2.0 * std::f64::consts::PI.powi(2) * TORUS_ASPECT))
                .cbrt();
            let major = TORUS_ASPECT * minor;
            let rot = random_rotation(rng);
            (
                Geometry::BentTorus {
                    major,
                    minor,
                    bend: TORUS_BEND,
                    rot,
                },
                major + minor + TORUS_BEND,
            )
        }
    }
}

/// One deterministic phantom for (spec.seed, index).
pub fn generate_phantom(spec: &PhantomSpec, index: u64) -> Result<(Volume, LabelMap)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);

    let [d, h, w] = spec.dims;
    let total = (d * h * w) as f64;
    let mut placed: Vec<Placed> = Vec::with_capacity(spec.shapes.len());

    for (i, shape) in spec.shapes.iter().enumerate() {
        let class = (i + 1) as u8;
        let target = shape.volume_fraction * total;
        let mut ok = false;
        for _ in 0..PLACEMENT_TRIES {
            let (geom, bound) = build_geometry(shape.kind, target, &mut rng);
            let margin = bound + 0.5;
            if spec.dims.iter().any(|&e| (e as f64) < 2.0 * margin) {
                return Err(Error::Phantom(format!(
                    "class {class} shape (bounding radius {bound:.1}) cannot fit dims {:?}",
                    spec.dims
                )));
            }
            let center = [
                rng.gen_range(margin..d as f64 - margin),
                rng.gen_range(margin..h as f64 - margin),
                rng.gen_range(margin..w as f64 - margin),
            ];
            let clear = placed.iter().all(|p| {
                let dx = p.center[0] - center[0];
                let dy = p.center[1] - center[1];
                let dz = p.center[2] - center[2];
                let dist = (dx * dx + dy * dy + dz * dz).sqrt();
                dist >= p.bound + bound
            });
            if clear {
                placed.push(Placed {
                    center,
                    bound,
                    geom,
                    class,
                });
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::Phantom(format!(
                "could not place class {class} without overlap after {PLACEMENT_TRIES} tries"
            )));
        }
    }

    let mut labels = vec![0u8; d * h * w];
    for p in &placed {
        let lo = |c: f64, b: f64| (c - b).floor().max(0.0) as usize;
        let hi = |c: f64, b: f64, e: usize| ((c + b).ceil() as usize + 1).min(e);
        for z in lo(p.center[0], p.bound)..hi(p.center[0], p.bound, d) {
            for y in lo(p.center[1], p.bound)..hi(p.center[1], p.bound, h) {
                for x in lo(p.center[2], p.bound)..hi(p.center[2], p.bound, w) {
                    if p.contains([z as f64, y as f64, x as f64]) {
                        labels[(z * h + y) * w + x] = p.class;
                    }
                }
            }
        }
    }

    let mut values = vec![0.0f64; d * h * w];
    for (i, v) in values.iter_mut().enumerate() {
        let (mean, std) = match labels[i] {
            0 => (spec.background_level, spec.background_noise_std),
            c => {
                let s = &spec.shapes[c as usize - 1];
                (s.intensity_mean, s.intensity_noise_std)
            }
        };
        let noise = standard_normal(&mut rng);
        // quantize to f32 so on-disk and in-memory values agree exactly
        *v = (mean + std * noise) as f32 as f64;
    }

    Ok((
        Volume::new(spec.dims, spec.spacing, values)?,
        LabelMap::new(spec.dims, labels)?,
    ))
}

/// Generate `count` phantoms; the first `labeled` become the labeled
/// pool, the rest the unlabeled pool with their true labels hidden.
pub fn generate_phantom_split(
    spec: &PhantomSpec,
    count: usize,
    labeled: usize,
) -> Result<DatasetSplit> {
    if labeled > count {
        return Err(Error::Phantom(format!(
            "labeled count {labeled} exceeds total {count}"
        )));
    }
    let mut labeled_pool = Vec::with_capacity(labeled);
    let mut unlabeled_pool = Vec::with_capacity(count - labeled);
    let mut hidden = Vec::with_capacity(count - labeled);
    for i in 0..count {
        let (vol, lab) = generate_phantom(spec, i as u64)?;
        if i < labeled {
            labeled_pool.push((vol, lab));
        } else {
            unlabeled_pool.push(vol);
            hidden.push(lab);
        }
    }
    DatasetSplit::new(labeled_pool, unlabeled_pool, HiddenLabels::new(hidden))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed_and_index() {
        let spec = PhantomSpec::default_four_class([24, 24, 24], 42);
        let (v1, l1) = generate_phantom(&spec, 3).unwrap();
        let (v2, l2) = generate_phantom(&spec, 3).unwrap();
        assert_eq!(v1, v2);
        assert_eq!(l1, l2);
        let (v3, _) = generate_phantom(&spec, 4).unwrap();
        assert_ne!(v1.values, v3.values);
    }

    #[test]
    fn volume_fractions_near_targets() {
        let spec = PhantomSpec::default_four_class([32, 32, 32], 7);
        let total = 32.0f64.powi(3);
        let mut counts = vec![0usize; 4];
        let n_vols = 16;
        for i in 0..n_vols {
            let (_, lab) = generate_phantom(&spec, i).unwrap();
            for &v in &lab.values {
                counts[v as usize] += 1;
            }
        }
        for (k, shape) in spec.shapes.iter().enumerate() {
            let measured = counts[k + 1] as f64 / (n_vols as f64 * total);
            let rel = (measured - shape.volume_fraction).abs() / shape.volume_fraction;
            assert!(
                rel <= 0.20,
                "class {} fraction {measured:.5} vs target {:.5} (rel {rel:.3})",
                k + 1,
                shape.volume_fraction
            );
        }
    }

    #[test]
    fn zero_noise_gives_exact_means() {
        let mut spec = PhantomSpec::default_four_class([24, 24, 24], 5);
        for s in &mut spec.shapes {
            s.intensity_noise_std = 0.0;
        }
        spec.background_noise_std = 0.0;
        let (vol, lab) = generate_phantom(&spec, 0).unwrap();
        for (v, &l) in vol.values.iter().zip(&lab.values) {
            let expected = match l {
                0 => spec.background_level,
                c => spec.shapes[c as usize - 1].intensity_mean,
            };
            assert_eq!(*v, expected);
        }
    }

    #[test]
    fn oversized_shape_errors() {
        let mut spec = PhantomSpec::default_four_class([12, 12, 12], 1);
        spec.shapes[0].volume_fraction = 0.9;
        spec.shapes[1].volume_fraction = 0.04;
        assert!(generate_phantom(&spec, 0).is_err());
    }

    #[test]
    fn split_hides_unlabeled_labels() {
        let spec = PhantomSpec::default_four_class([16, 16, 16], 9);
        let split = generate_phantom_split(&spec, 4, 2).unwrap();
        assert_eq!(split.labeled.len(), 2);
        assert_eq!(split.unlabeled.len(), 2);
        assert!(!split.hidden().was_accessed());
        assert_eq!(split.hidden().reveal_for_eval().len(), 2);
        assert!(split.hidden().was_accessed());
    }
}
