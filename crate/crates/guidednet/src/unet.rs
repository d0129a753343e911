//! Tiny configurable 3D U-Net with a tapped decoder feature map.
//!
//! Two instances (model A, model B) share this structure and differ
//! only by their init seeds. One forward pass yields both the class
//! logits and the feature tap; taps from deeper decoder layers are
//! nearest-upsampled so features stay per-voxel at full resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    /// Decoder tap position counted deep-to-shallow: 1 is the
    /// bottleneck output, depth+1 the full-resolution decoder output.
    pub feature_tap_layer: usize,
    pub init_seed: u64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            in_channels: 1,
            num_classes: 2,
            base_channels: 8,
            depth: 2,
            feature_tap_layer: 3,
            init_seed: 0,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::BadNetConfig(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if self.in_channels == 0 || self.base_channels == 0 || self.depth == 0 {
            return Err(Error::BadNetConfig(
                "in_channels, base_channels and depth must be positive".into(),
            ));
        }
        if self.feature_tap_layer == 0 || self.feature_tap_layer > self.depth + 1 {
            return Err(Error::BadNetConfig(format!(
                "feature_tap_layer {} outside 1..={}",
                self.feature_tap_layer,
                self.depth + 1
            )));
        }
        Ok(())
    }

    /// Spatial extents must divide this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    /// Channel width of the tapped feature map.
    pub fn feature_channels(&self) -> usize {
        self.base_channels << (self.depth + 1 - self.feature_tap_layer)
    }

    fn enc_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Total parameter count implied by the layer arithmetic.
    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k * k + cout;
        let mut n = 0;
        for l in 0..self.depth {
            let cin = if l == 0 { self.in_channels } else { self.enc_channels(l - 1) };
            let c = self.enc_channels(l);
            n += conv(cin, c, 3) + conv(c, c, 3);
        }
        let cb = self.enc_channels(self.depth);
        n += conv(self.enc_channels(self.depth - 1), cb, 3) + conv(cb, cb, 3);
        for l in (0..self.depth).rev() {
            let c = self.enc_channels(l);
            let from_below = self.enc_channels(l + 1);
            n += conv(from_below + c, c, 3) + conv(c, c, 3);
        }
        n + conv(self.base_channels, self.num_classes, 1)
    }

    fn conv_layer_count(&self) -> usize {
        4 * self.depth + 3
    }
}

struct Param {
    name: String,
    tensor: Tensor,
}

/// One segmentation network: config plus owned parameters.
pub struct Network {
    config: UNetConfig,
    params: Vec<Param>,
}

/// Tape handles produced by one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    pub features: Var,
    /// Leased parameter leaves in declaration order; read gradients
    /// from these after backward.
    pub params: Vec<Var>,
}

impl Network {
    pub fn build(config: UNetConfig) -> Result<Network> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = Vec::new();
        let mut push_conv = |name: String, cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng| {
            let fan_in = (cin * k * k * k) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let n = cout * cin * k * k * k;
            let values = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
            params.push(Param {
                name: format!("{name}.weight"),
                tensor: Tensor {
                    shape: vec![cout, cin, k, k, k],
                    values,
                },
            });
            params.push(Param {
                name: format!("{name}.bias"),
                tensor: Tensor::zeros(vec![cout]),
            });
        };
        for l in 0..config.depth {
            let cin = if l == 0 {
                config.in_channels
            } else {
                config.enc_channels(l - 1)
            };
            let c = config.enc_channels(l);
            push_conv(format!("enc{l}.conv1"), cin, c, 3, &mut rng);
            push_conv(format!("enc{l}.conv2"), c, c, 3, &mut rng);
        }
        let cb = config.enc_channels(config.depth);
        push_conv("bottleneck.conv1".into(), config.enc_channels(config.depth - 1), cb, 3, &mut rng);
        push_conv("bottleneck.conv2".into(), cb, cb, 3, &mut rng);
        for l in (0..config.depth).rev() {
            let c = config.enc_channels(l);
            let from_below = config.enc_channels(l + 1);
            push_conv(format!("dec{l}.conv1"), from_below + c, c, 3, &mut rng);
            push_conv(format!("dec{l}.conv2"), c, c, 3, &mut rng);
        }
        push_conv("head".into(), config.base_channels, config.num_classes, 1, &mut rng);
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.tensor))
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// FNV-1a over the parameter bit patterns, for cheap identity checks.
    pub fn param_checksum(&self) -> u64 {
        let mut h = crate::util::Fnv1a::new();
        for p in &self.params {
            for v in &p.tensor.values {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    /// Replace all parameters from flat values in declaration order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.params.iter().map(|p| p.tensor.numel()).sum();
        if flat.len() != total {
            return Err(Error::Checkpoint(format!(
                "parameter block holds {} values, network needs {total}",
                flat.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.tensor.numel();
            p.tensor.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for p in &self.params {
            out.extend_from_slice(&p.tensor.values);
        }
        out
    }

    /// One pass over the batch; produces logits and the aligned feature
    /// tap together.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<ForwardPass> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 5 {
            return Err(Error::BadRank {
                op: "forward",
                expected: 5,
                shape,
            });
        }
        if shape[1] != self.config.in_channels {
            return Err(Error::BadShape {
                op: "forward",
                msg: format!("expected {} input channels", self.config.in_channels),
                shape,
            });
        }
        let div = self.config.divisor();
        if shape[2..].iter().any(|&e| e % div != 0 || e == 0) {
            return Err(Error::IndivisibleExtents {
                extents: shape[2..].to_vec(),
                divisor: div,
            });
        }

        let param_vars: Vec<Var> = self.params.iter().map(|p| tape.lease(&p.tensor)).collect();
        let mut next = 0usize;
        let mut take_pair = || {
            let pair = (param_vars[next], param_vars[next + 1]);
            next += 2;
            pair
        };

        let mut block = |tape: &mut Tape, x: Var, (w1, b1): (Var, Var), (w2, b2): (Var, Var)| -> Result<Var> {
            let c1 = tape.conv3d(x, w1, b1, 1, 1)?;
            let r1 = tape.relu(c1)?;
            let c2 = tape.conv3d(r1, w2, b2, 1, 1)?;
            tape.relu(c2)
        };

        let mut skips = Vec::with_capacity(self.config.depth);
        let mut x = input;
        for _ in 0..self.config.depth {
            let p1 = take_pair();
            let p2 = take_pair();
            let e = block(tape, x, p1, p2)?;
            skips.push(e);
            x = tape.maxpool2(e)?;
        }
        let p1 = take_pair();
        let p2 = take_pair();
        x = block(tape, x, p1, p2)?;

        // tap 1 is the bottleneck; tap 1+j the j-th decoder stage output
        let mut taps = Vec::with_capacity(self.config.depth + 1);
        taps.push(x);
        for l in (0..self.config.depth).rev() {
            let up = tape.upsample2(x)?;
            let cat = tape.concat_axis1(&[up, skips[l]])?;
            let p1 = take_pair();
            let p2 = take_pair();
            x = block(tape, cat, p1, p2)?;
            taps.push(x);
        }
        let (wh, bh) = take_pair();
        let logits = tape.conv3d(x, wh, bh, 1, 0)?;

        let mut features = taps[self.config.feature_tap_layer - 1];
        for _ in 0..(self.config.depth + 1 - self.config.feature_tap_layer) {
            features = tape.upsample2(features)?;
        }

        Ok(ForwardPass {
            logits,
            features,
            params: param_vars,
        })
    }
}
