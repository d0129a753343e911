//! Random crop + flip augmentation and mixed batch sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Batch, DatasetSplit, LabelMap, Volume};

fn crop_volume(v: &Volume, origin: [usize; 3], size: [usize; 3]) -> Volume {
    let [d, h, w] = size;
    let mut values = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            let base = ((origin[0] + z) * v.dims[1] + origin[1] + y) * v.dims[2] + origin[2];
            values.extend_from_slice(&v.values[base..base + w]);
        }
    }
    Volume {
        dims: size,
        spacing: v.spacing,
        values,
    }
}

fn crop_labels(l: &LabelMap, origin: [usize; 3], size: [usize; 3]) -> LabelMap {
    let [d, h, w] = size;
    let mut values = Vec::with_capacity(d * h * w);
    for z in 0..d {
        for y in 0..h {
            let base = ((origin[0] + z) * l.dims[1] + origin[1] + y) * l.dims[2] + origin[2];
            values.extend_from_slice(&l.values[base..base + w]);
        }
    }
    LabelMap {
        dims: size,
        values,
    }
}

fn flip_index(dims: [usize; 3], flips: [bool; 3], z: usize, y: usize, x: usize) -> usize {
    let z = if flips[0] { dims[0] - 1 - z } else { z };
    let y = if flips[1] { dims[1] - 1 - y } else { y };
    let x = if flips[2] { dims[2] - 1 - x } else { x };
    (z * dims[1] + y) * dims[2] + x
}

fn flip_volume(v: &Volume, flips: [bool; 3]) -> Volume {
    let [d, h, w] = v.dims;
    let mut values = vec![0.0; v.values.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                values[(z * h + y) * w + x] = v.values[flip_index(v.dims, flips, z, y, x)];
            }
        }
    }
    Volume {
        dims: v.dims,
        spacing: v.spacing,
        values,
    }
}

fn flip_labels(l: &LabelMap, flips: [bool; 3]) -> LabelMap {
    let [d, h, w] = l.dims;
    let mut values = vec![0u8; l.values.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                values[(z * h + y) * w + x] = l.values[flip_index(l.dims, flips, z, y, x)];
            }
        }
    }
    LabelMap {
        dims: l.dims,
        values,
    }
}

/// Apply one random crop window and per-axis coin-flip mirrors to a
/// volume and its labels together.
pub fn augment(
    v: &Volume,
    y: &LabelMap,
    crop: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, LabelMap)> {
    if v.dims != y.dims {
        return Err(Error::Dataset(format!(
            "volume dims {:?} differ from label dims {:?}",
            v.dims, y.dims
        )));
    }
    let (vol, origin, flips) = augment_volume_inner(v, crop, rng)?;
    let lab = crop_labels(y, origin, crop);
    let lab = flip_labels(&lab, flips);
    Ok((vol, lab))
}

/// Same augmentation for an unlabeled volume.
pub fn augment_unlabeled(v: &Volume, crop: [usize; 3], rng: &mut ChaCha8Rng) -> Result<Volume> {
    Ok(augment_volume_inner(v, crop, rng)?.0)
}

fn augment_volume_inner(
    v: &Volume,
    crop: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<(Volume, [usize; 3], [bool; 3])> {
    for i in 0..3 {
        if crop[i] > v.dims[i] || crop[i] == 0 {
            return Err(Error::Dataset(format!(
                "crop {crop:?} does not fit dims {:?}",
                v.dims
            )));
        }
    }
    let mut origin = [0usize; 3];
    for i in 0..3 {
        origin[i] = rng.gen_range(0..=v.dims[i] - crop[i]);
    }
    let flips = [rng.gen_bool(0.5), rng.gen_bool(0.5), rng.gen_bool(0.5)];
    let cropped = crop_volume(v, origin, crop);
    Ok((flip_volume(&cropped, flips), origin, flips))
}

/// Sample (with replacement) a labeled + unlabeled batch of augmented
/// crops from one seeded stream.
pub fn sample_batch(
    split: &DatasetSplit,
    n_labeled: usize,
    n_unlabeled: usize,
    crop: [usize; 3],
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if split.labeled.is_empty() {
        return Err(Error::Dataset("labeled pool is empty".into()));
    }
    if n_unlabeled > 0 && split.unlabeled.is_empty() {
        return Err(Error::Dataset("unlabeled pool is empty".into()));
    }
    let mut labeled = Vec::with_capacity(n_labeled);
    for _ in 0..n_labeled {
        let i = rng.gen_range(0..split.labeled.len());
        let (v, y) = &split.labeled[i];
        labeled.push(augment(v, y, crop, rng)?);
    }
    let mut unlabeled = Vec::with_capacity(n_unlabeled);
    for _ in 0..n_unlabeled {
        let i = rng.gen_range(0..split.unlabeled.len());
        unlabeled.push(augment_unlabeled(&split.unlabeled[i], crop, rng)?);
    }
    Ok(Batch { labeled, unlabeled })
}
