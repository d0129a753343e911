//! Synthetic phantom volumes, preprocessing, augmentation, batch
//! assembly and the on-disk dataset layout.

pub mod augment;
pub mod io;
pub mod phantom;
pub mod preprocess;

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Error, Result};

/// Dense 3D scalar field with spacing metadata. Values are 32-bit on
/// disk and widened to 64-bit in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// Extents in (D, H, W) order.
    pub dims: [usize; 3],
    /// Millimetres per voxel in (D, H, W) order.
    pub spacing: [f64; 3],
    /// D-major, then H, then W.
    pub values: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], values: Vec<f64>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if dims.iter().any(|&d| d == 0) || spacing.iter().any(|&s| s <= 0.0) {
            return Err(Error::Dataset(format!(
                "invalid dims {dims:?} or spacing {spacing:?}"
            )));
        }
        if values.len() != n {
            return Err(Error::Dataset(format!(
                "{} values for dims {dims:?}",
                values.len()
            )));
        }
        Ok(Volume {
            dims,
            spacing,
            values,
        })
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        self.values[(z * self.dims[1] + y) * self.dims[2] + x]
    }
}

/// Integer class ids per voxel, same layout as [`Volume`].
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub dims: [usize; 3],
    pub values: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: [usize; 3], values: Vec<u8>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::Dataset(format!(
                "{} labels for dims {dims:?}",
                values.len()
            )));
        }
        Ok(LabelMap { dims, values })
    }

    pub fn validate_classes(&self, num_classes: usize) -> Result<()> {
        for &v in &self.values {
            if v as usize >= num_classes {
                return Err(Error::ClassOutOfRange {
                    class: v as usize,
                    num_classes,
                });
            }
        }
        Ok(())
    }
}

/// Geometry family of one foreground class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Sphere,
    Ellipsoid,
    /// Bent-torus region; higher boundary curvature than the spheres.
    Complex,
}

impl ShapeKind {
    pub fn parse(s: &str) -> Option<ShapeKind> {
        match s {
            "sphere" => Some(ShapeKind::Sphere),
            "ellipsoid" => Some(ShapeKind::Ellipsoid),
            "complex" => Some(ShapeKind::Complex),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Ellipsoid => "ellipsoid",
            ShapeKind::Complex => "complex",
        }
    }
}

/// One foreground class's shape descriptor.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassShape {
    pub kind: ShapeKind,
    pub volume_fraction: f64,
    pub intensity_mean: f64,
    pub intensity_noise_std: f64,
}

/// Full phantom recipe; class k's descriptor sits at shapes[k - 1].
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub num_classes: usize,
    pub shapes: Vec<ClassShape>,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub background_level: f64,
    pub background_noise_std: f64,
    pub seed: u64,
}

impl PhantomSpec {
    /// Size-imbalanced 4-class default: one large sphere, one complex
    /// bent torus, one small sphere, against an out-of-clip-range
    /// background level.
    pub fn default_four_class(dims: [usize; 3], seed: u64) -> Self {
        PhantomSpec {
            num_classes: 4,
            shapes: vec![
                ClassShape {
                    kind: ShapeKind::Sphere,
                    volume_fraction: 0.040,
                    intensity_mean: -60.0,
                    intensity_noise_std: 25.0,
                },
                ClassShape {
                    kind: ShapeKind::Complex,
                    volume_fraction: 0.015,
                    intensity_mean: 60.0,
                    intensity_noise_std: 25.0,
                },
                ClassShape {
                    kind: ShapeKind::Sphere,
                    volume_fraction: 0.004,
                    intensity_mean: 200.0,
                    intensity_noise_std: 25.0,
                },
            ],
            dims,
            spacing: [1.0, 1.0, 1.0],
            background_level: -400.0,
            background_noise_std: 25.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Phantom("need at least 2 classes".into()));
        }
        if self.shapes.len() != self.num_classes - 1 {
            return Err(Error::Phantom(format!(
                "{} shape descriptors for {} foreground classes",
                self.shapes.len(),
                self.num_classes - 1
            )));
        }
        let total: f64 = self.shapes.iter().map(|s| s.volume_fraction).sum();
        if total >= 1.0 {
            return Err(Error::Phantom(format!(
                "volume fractions sum to {total}, must stay below 1"
            )));
        }
        for w in self.shapes.windows(2) {
            if w[1].volume_fraction > w[0].volume_fraction {
                return Err(Error::Phantom(
                    "classes must be ordered largest to smallest".into(),
                ));
            }
        }
        if self.shapes.iter().any(|s| s.volume_fraction <= 0.0) {
            return Err(Error::Phantom("volume fractions must be positive".into()));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::Phantom("dims must be positive".into()));
        }
        Ok(())
    }
}

/// True labels of the unlabeled pool. Only the evaluation path may look
/// inside; the accessor trips an audit flag the trainer checks.
#[derive(Debug)]
pub struct HiddenLabels {
    labels: Vec<LabelMap>,
    accessed: AtomicBool,
}

impl HiddenLabels {
    pub fn new(labels: Vec<LabelMap>) -> Self {
        HiddenLabels {
            labels,
            accessed: AtomicBool::new(false),
        }
    }

    pub fn empty() -> Self {
        Self::new(Vec::new())
    }

    /// Evaluation-only access; flips the audit flag.
    pub fn reveal_for_eval(&self) -> &[LabelMap] {
        self.accessed.store(true, Ordering::SeqCst);
        &self.labels
    }

    pub fn was_accessed(&self) -> bool {
        self.accessed.load(Ordering::SeqCst)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Labeled and unlabeled training pools. The unlabeled items' true
/// labels, when present, live behind [`HiddenLabels`].
#[derive(Debug)]
pub struct DatasetSplit {
    pub labeled: Vec<(Volume, LabelMap)>,
    pub unlabeled: Vec<Volume>,
    hidden: HiddenLabels,
}

impl DatasetSplit {
    pub fn new(
        labeled: Vec<(Volume, LabelMap)>,
        unlabeled: Vec<Volume>,
        hidden: HiddenLabels,
    ) -> Result<Self> {
        if !hidden.is_empty() && hidden.len() != unlabeled.len() {
            return Err(Error::Dataset(format!(
                "{} hidden labels for {} unlabeled volumes",
                hidden.len(),
                unlabeled.len()
            )));
        }
        Ok(DatasetSplit {
            labeled,
            unlabeled,
            hidden,
        })
    }

    pub fn hidden(&self) -> &HiddenLabels {
        &self.hidden
    }
}

/// One training batch: labeled crops first, then unlabeled.
#[derive(Clone, Debug)]
pub struct Batch {
    pub labeled: Vec<(Volume, LabelMap)>,
    pub unlabeled: Vec<Volume>,
}
