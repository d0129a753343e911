//! Intensity clipping, spacing resampling and percentile min-max
//! normalization, applied in that order.

use crate::error::{Error, Result};

use super::{LabelMap, Volume};

/// Elementwise clamp of the intensity range (defaults -325..325 HU).
pub fn clip_hu(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if lo >= hi {
        return Err(Error::BadArgument {
            op: "clip_hu",
            msg: format!("lo {lo} must be below hi {hi}"),
        });
    }
    Ok(Volume {
        dims: v.dims,
        spacing: v.spacing,
        values: v.values.iter().map(|x| x.clamp(lo, hi)).collect(),
    })
}

fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    let mut out = [0usize; 3];
    for i in 0..3 {
        out[i] = ((dims[i] as f64 * spacing[i] / target[i]).round() as usize).max(1);
    }
    out
}

/// Source coordinate of output index `i` under pixel-center alignment.
fn source_coord(i: usize, target: f64, spacing: f64) -> f64 {
    (i as f64 + 0.5) * target / spacing - 0.5
}

/// Trilinear resample onto the target spacing grid.
pub fn resample_spacing(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    if target.iter().any(|&s| s <= 0.0) {
        return Err(Error::BadArgument {
            op: "resample_spacing",
            msg: format!("target spacing {target:?} must be positive"),
        });
    }
    let out_dims = resampled_dims(v.dims, v.spacing, target);
    let [d, h, w] = v.dims;
    let [od, oh, ow] = out_dims;
    let mut values = vec![0.0; od * oh * ow];
    let axis = |i: usize, t: f64, s: f64, extent: usize| -> (usize, usize, f64) {
        let c = source_coord(i, t, s).clamp(0.0, (extent - 1) as f64);
        let lo = c.floor() as usize;
        let hi = (lo + 1).min(extent - 1);
        (lo, hi, c - lo as f64)
    };
    for z in 0..od {
        let (z0, z1, fz) = axis(z, target[0], v.spacing[0], d);
        for y in 0..oh {
            let (y0, y1, fy) = axis(y, target[1], v.spacing[1], h);
            for x in 0..ow {
                let (x0, x1, fx) = axis(x, target[2], v.spacing[2], w);
                let val = if fz == 0.0 && fy == 0.0 && fx == 0.0 {
                    v.at(z0, y0, x0)
                } else {
                    let c000 = v.at(z0, y0, x0);
                    let c001 = v.at(z0, y0, x1);
                    let c010 = v.at(z0, y1, x0);
                    let c011 = v.at(z0, y1, x1);
                    let c100 = v.at(z1, y0, x0);
                    let c101 = v.at(z1, y0, x1);
                    let c110 = v.at(z1, y1, x0);
                    let c111 = v.at(z1, y1, x1);
                    let c00 = c000 * (1.0 - fx) + c001 * fx;
                    let c01 = c010 * (1.0 - fx) + c011 * fx;
                    let c10 = c100 * (1.0 - fx) + c101 * fx;
                    let c11 = c110 * (1.0 - fx) + c111 * fx;
                    let c0 = c00 * (1.0 - fy) + c01 * fy;
                    let c1 = c10 * (1.0 - fy) + c11 * fy;
                    c0 * (1.0 - fz) + c1 * fz
                };
                values[(z * oh + y) * ow + x] = val;
            }
        }
    }
    Volume::new(out_dims, target, values)
}

/// Nearest-neighbor label resample onto the target spacing grid.
pub fn resample_labels(l: &LabelMap, spacing: [f64; 3], target: [f64; 3]) -> Result<LabelMap> {
    if target.iter().any(|&s| s <= 0.0) {
        return Err(Error::BadArgument {
            op: "resample_labels",
            msg: format!("target spacing {target:?} must be positive"),
        });
    }
    let out_dims = resampled_dims(l.dims, spacing, target);
    let [_, h, w] = l.dims;
    let [od, oh, ow] = out_dims;
    let mut values = vec![0u8; od * oh * ow];
    let nearest = |i: usize, t: f64, s: f64, extent: usize| -> usize {
        (source_coord(i, t, s).round().max(0.0) as usize).min(extent - 1)
    };
    for z in 0..od {
        let z0 = nearest(z, target[0], spacing[0], l.dims[0]);
        for y in 0..oh {
            let y0 = nearest(y, target[1], spacing[1], l.dims[1]);
            for x in 0..ow {
                let x0 = nearest(x, target[2], spacing[2], l.dims[2]);
                values[(z * oh + y) * ow + x] = l.values[(z0 * h + y0) * w + x0];
            }
        }
    }
    LabelMap::new(out_dims, values)
}

/// Percentile by linear interpolation over the sorted values,
/// p in [0, 100].
pub fn percentile(values: &[f64], p: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN intensities"));
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if frac == 0.0 || lo + 1 == sorted.len() {
        sorted[lo]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// (x - x_0.5) / (x_99.5 - x_0.5); a flat percentile window yields an
/// all-zero volume and sets the degenerate flag.
pub fn percentile_normalize(v: &Volume) -> Result<(Volume, bool)> {
    if v.values.is_empty() {
        return Err(Error::BadArgument {
            op: "percentile_normalize",
            msg: "empty volume".into(),
        });
    }
    let p_lo = percentile(&v.values, 0.5);
    let p_hi = percentile(&v.values, 99.5);
    if p_hi == p_lo {
        return Ok((
            Volume {
                dims: v.dims,
                spacing: v.spacing,
                values: vec![0.0; v.values.len()],
            },
            true,
        ));
    }
    let scale = 1.0 / (p_hi - p_lo);
    Ok((
        Volume {
            dims: v.dims,
            spacing: v.spacing,
            values: v.values.iter().map(|x| (x - p_lo) * scale).collect(),
        },
        false,
    ))
}

/// Clip, resample and normalization settings for the training pipeline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessOptions {
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub target_spacing: [f64; 3],
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            clip_lo: -325.0,
            clip_hi: 325.0,
            target_spacing: [1.0, 1.0, 1.0],
        }
    }
}

/// clip -> resample -> normalize; returns the degenerate-window flag.
pub fn preprocess_volume(v: &Volume, opts: &PreprocessOptions) -> Result<(Volume, bool)> {
    let clipped = clip_hu(v, opts.clip_lo, opts.clip_hi)?;
    let resampled = resample_spacing(&clipped, opts.target_spacing)?;
    percentile_normalize(&resampled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_volume(dims: [usize; 3]) -> Volume {
        let n = dims[0] * dims[1] * dims[2];
        let values = (0..n).map(|i| i as f64 - 500.0).collect();
        Volume::new(dims, [1.0, 1.0, 1.0], values).unwrap()
    }

    #[test]
    fn clip_endpoints() {
        let v = Volume::new([1, 1, 3], [1.0; 3], vec![-500.0, 0.0, 400.0]).unwrap();
        let c = clip_hu(&v, -325.0, 325.0).unwrap();
        assert_eq!(c.values, vec![-325.0, 0.0, 325.0]);
    }

    #[test]
    fn resample_identity() {
        let v = ramp_volume([4, 5, 6]);
        let r = resample_spacing(&v, v.spacing).unwrap();
        assert_eq!(r, v);
    }

    #[test]
    fn halving_spacing_doubles_dims() {
        let v = ramp_volume([4, 4, 4]);
        let r = resample_spacing(&v, [0.5, 0.5, 0.5]).unwrap();
        assert_eq!(r.dims, [8, 8, 8]);
    }

    #[test]
    fn constant_volume_stays_constant() {
        let v = Volume::new([3, 3, 3], [2.0, 1.0, 1.0], vec![7.5; 27]).unwrap();
        let r = resample_spacing(&v, [1.3, 0.7, 0.9]).unwrap();
        assert!(r.values.iter().all(|&x| (x - 7.5).abs() < 1e-12));
    }

    #[test]
    fn label_resample_nearest() {
        let l = LabelMap::new([1, 1, 4], vec![0, 1, 2, 3]).unwrap();
        let r = resample_labels(&l, [1.0, 1.0, 1.0], [1.0, 1.0, 0.5]).unwrap();
        assert_eq!(r.dims, [1, 1, 8]);
        assert_eq!(r.values, vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn percentile_normalize_fixed_points() {
        let v = ramp_volume([10, 10, 10]);
        let p05 = percentile(&v.values, 0.5);
        let p995 = percentile(&v.values, 99.5);
        let (n, flag) = percentile_normalize(&v).unwrap();
        assert!(!flag);
        // find the voxels holding the percentile values themselves
        let lo_idx = v.values.iter().position(|&x| x == p05);
        let hi_idx = v.values.iter().position(|&x| x == p995);
        if let Some(i) = lo_idx {
            assert!((n.values[i] - 0.0).abs() < 1e-12);
        }
        if let Some(i) = hi_idx {
            assert!((n.values[i] - 1.0).abs() < 1e-12);
        }
        // midpoint maps to one half
        let mid = 0.5 * (p05 + p995);
        let normalized_mid = (mid - p05) / (p995 - p05);
        assert!((normalized_mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_window_flags_and_zeroes() {
        let v = Volume::new([2, 2, 2], [1.0; 3], vec![3.0; 8]).unwrap();
        let (n, flag) = percentile_normalize(&v).unwrap();
        assert!(flag);
        assert!(n.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pipeline_invariant_to_noop_resample() {
        let v = ramp_volume([6, 6, 6]);
        let opts = PreprocessOptions::default();
        let (direct, _) = preprocess_volume(&v, &opts).unwrap();
        let pre = resample_spacing(&v, v.spacing).unwrap();
        let (via_noop, _) = preprocess_volume(&pre, &opts).unwrap();
        assert_eq!(direct, via_noop);
    }
}
