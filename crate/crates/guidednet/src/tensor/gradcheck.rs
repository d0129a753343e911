//! Central finite-difference checking of analytic gradients.
//!
//! The numeric side re-evaluates the full forward pass at perturbed
//! inputs and never touches the backward code, so it stays an
//! independent oracle for it.

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Worst-case deviations between analytic and numeric gradients.
///
/// Entries whose analytic gradient magnitude is at least `SMALL_GRAD`
/// contribute to `max_rel`; smaller ones contribute to `max_abs_small`
/// (relative error is meaningless near zero).
#[derive(Clone, Copy, Debug, Default)]
pub struct GradErrors {
    pub max_rel: f64,
    pub max_abs_small: f64,
}

pub const SMALL_GRAD: f64 = 1e-6;

impl GradErrors {
    pub fn within(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel <= rel_tol && self.max_abs_small <= abs_tol
    }
}

/// Graph builder: given a fresh tape and one leased leaf per input,
/// produce the scalar to differentiate.
pub type GraphFn<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Loss value and analytic gradients for every input element.
pub fn analytic_gradients(inputs: &[Tensor], f: GraphFn<'_>) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.lease(t)).collect();
    let root = f(&mut tape, &vars)?;
    let loss = tape.scalar_value(root);
    tape.backward(root)?;
    let grads = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();
    Ok((loss, grads))
}

fn eval_loss(inputs: &[Tensor], f: GraphFn<'_>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.lease(t)).collect();
    let root = f(&mut tape, &vars)?;
    Ok(tape.scalar_value(root))
}

/// Central difference d loss / d inputs[i][j] with step `h`.
pub fn numeric_gradient(inputs: &[Tensor], f: GraphFn<'_>, i: usize, j: usize, h: f64) -> Result<f64> {
    let mut plus = inputs.to_vec();
    plus[i].values[j] += h;
    let lp = eval_loss(&plus, f)?;
    let mut minus = inputs.to_vec();
    minus[i].values[j] -= h;
    let lm = eval_loss(&minus, f)?;
    Ok((lp - lm) / (2.0 * h))
}

/// Compare analytic and numeric gradients over the given elements,
/// or over every element when `sample` is None.
pub fn compare_gradients(
    inputs: &[Tensor],
    f: GraphFn<'_>,
    h: f64,
    sample: Option<&[(usize, usize)]>,
) -> Result<GradErrors> {
    let (_, analytic) = analytic_gradients(inputs, f)?;
    let mut errs = GradErrors::default();
    let all: Vec<(usize, usize)>;
    let elems: &[(usize, usize)] = match sample {
        Some(s) => s,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
                .collect();
            &all
        }
    };
    for &(i, j) in elems {
        let a = analytic[i][j];
        let n = numeric_gradient(inputs, f, i, j, h)?;
        let diff = (a - n).abs();
        if a.abs() < SMALL_GRAD {
            errs.max_abs_small = errs.max_abs_small.max(diff);
        } else {
            let rel = diff / a.abs().max(n.abs());
            errs.max_rel = errs.max_rel.max(rel);
        }
    }
    Ok(errs)
}

/// One finite-difference scenario for a kernel: an input generator and
/// a graph builder ending in a scalar.
pub struct KernelCheck {
    pub name: &'static str,
    pub gen: fn(&mut rand_chacha::ChaCha8Rng) -> Vec<Tensor>,
    pub graph: fn(&mut Tape, &[Var]) -> Result<Var>,
}

fn uniform(rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor { shape, values }
}

/// Uniform values nudged away from a kink location so central
/// differences stay valid at step 1e-4.
fn uniform_away_from(
    rng: &mut rand_chacha::ChaCha8Rng,
    shape: Vec<usize>,
    lo: f64,
    hi: f64,
    kinks: &[f64],
) -> Tensor {
    let mut t = uniform(rng, shape, lo, hi);
    for v in &mut t.values {
        for &k in kinks {
            if (*v - k).abs() < 1e-3 {
                *v = k + 2e-3 * if *v >= k { 1.0 } else { -1.0 };
            }
        }
    }
    t
}

/// Weighted sum against the last input, so every output element gets a
/// distinct cotangent.
fn contract(t: &mut Tape, out: Var, cot: Var) -> Result<Var> {
    let prod = t.mul(out, cot)?;
    t.reduce_sum(prod)
}

/// Finite-difference scenarios covering every differentiable kernel.
pub fn kernel_checks() -> Vec<KernelCheck> {
    vec![
        KernelCheck {
            name: "add",
            gen: |r| vec![
                uniform(r, vec![2, 3], -1.0, 1.0),
                uniform(r, vec![2, 3], -1.0, 1.0),
                uniform(r, vec![2, 3], -1.0, 1.0),
            ],
            graph: |t, v| {
                let o = t.add(v[0], v[1])?;
                contract(t, o, v[2])
            },
        },
        KernelCheck {
            name: "sub",
            gen: |r| vec![
                uniform(r, vec![2, 3], -1.0, 1.0),
                uniform(r, vec![2, 3], -1.0, 1.0),
                uniform(r, vec![2, 3], -1.0, 1.0),
            ],
            graph: |t, v| {
                let o = t.sub(v[0], v[1])?;
                contract(t, o, v[2])
            },
        },
        KernelCheck {
            name: "mul",
            gen: |r| vec![
                uniform(r, vec![2, 3], -1.0, 1.0),
                uniform(r, vec![2, 3], -1.0, 1.0),
                uniform(r, vec![2, 3], -1.0, 1.0),
            ],
            graph: |t, v| {
                let o = t.mul(v[0], v[1])?;
                contract(t, o, v[2])
            },
        },
        KernelCheck {
            name: "div",
            gen: |r| vec![
                uniform(r, vec![2, 3], -1.0, 1.0),
                uniform(r, vec![2, 3], 0.5, 1.5),
                uniform(r, vec![2, 3], -1.0, 1.0),
            ],
            graph: |t, v| {
                let o = t.div(v[0], v[1])?;
                contract(t, o, v[2])
            },
        },
        KernelCheck {
            name: "neg",
            gen: |r| vec![uniform(r, vec![5], -1.0, 1.0), uniform(r, vec![5], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.neg(v[0])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "add_scalar",
            gen: |r| vec![uniform(r, vec![5], -1.0, 1.0), uniform(r, vec![5], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.add_scalar(v[0], 0.37)?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "mul_scalar",
            gen: |r| vec![uniform(r, vec![5], -1.0, 1.0), uniform(r, vec![5], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.mul_scalar(v[0], -1.3)?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "exp",
            gen: |r| vec![uniform(r, vec![5], -1.0, 1.0), uniform(r, vec![5], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.exp(v[0])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "log",
            gen: |r| vec![uniform(r, vec![5], 0.2, 1.2), uniform(r, vec![5], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.log(v[0])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "clamp",
            gen: |r| vec![
                uniform_away_from(r, vec![12], -1.0, 1.0, &[-0.5, 0.5]),
                uniform(r, vec![12], -1.0, 1.0),
            ],
            graph: |t, v| {
                let o = t.clamp(v[0], -0.5, 0.5)?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "sqrt_floor",
            gen: |r| vec![uniform(r, vec![5], 0.1, 1.1), uniform(r, vec![5], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.sqrt_floor(v[0], 1e-3)?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "reshape",
            gen: |r| vec![uniform(r, vec![2, 6], -1.0, 1.0), uniform(r, vec![3, 4], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.reshape(v[0], vec![3, 4])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "broadcast_to",
            gen: |r| vec![uniform(r, vec![1, 4], -1.0, 1.0), uniform(r, vec![3, 4], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.broadcast_to(v[0], vec![3, 4])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "narrow",
            gen: |r| vec![uniform(r, vec![2, 5], -1.0, 1.0), uniform(r, vec![2, 3], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.narrow(v[0], 1, 1, 3)?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "concat_axis1",
            gen: |r| vec![
                uniform(r, vec![2, 2], -1.0, 1.0),
                uniform(r, vec![2, 3], -1.0, 1.0),
                uniform(r, vec![2, 5], -1.0, 1.0),
            ],
            graph: |t, v| {
                let o = t.concat_axis1(&[v[0], v[1]])?;
                contract(t, o, v[2])
            },
        },
        KernelCheck {
            name: "select_axis1",
            gen: |r| vec![uniform(r, vec![2, 4], -1.0, 1.0), uniform(r, vec![2, 3], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.select_axis1(v[0], &[3, 1, 1])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "reduce_sum",
            gen: |r| vec![uniform(r, vec![2, 3], -1.0, 1.0)],
            graph: |t, v| t.reduce_sum(v[0]),
        },
        KernelCheck {
            name: "reduce_mean",
            gen: |r| vec![uniform(r, vec![2, 3], -1.0, 1.0)],
            graph: |t, v| t.reduce_mean(v[0]),
        },
        KernelCheck {
            name: "sum_axis0",
            gen: |r| vec![uniform(r, vec![3, 4], -1.0, 1.0), uniform(r, vec![4], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.sum_axis0(v[0])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "sum_axis1",
            gen: |r| vec![uniform(r, vec![3, 4], -1.0, 1.0), uniform(r, vec![3], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.sum_axis1(v[0])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "mean_axis0",
            gen: |r| vec![uniform(r, vec![3, 4], -1.0, 1.0), uniform(r, vec![4], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.mean_axis0(v[0])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "scale_rows",
            gen: |r| vec![
                uniform(r, vec![3, 4], -1.0, 1.0),
                uniform(r, vec![3], -1.0, 1.0),
                uniform(r, vec![3, 4], -1.0, 1.0),
            ],
            graph: |t, v| {
                let o = t.scale_rows(v[0], v[1])?;
                contract(t, o, v[2])
            },
        },
        KernelCheck {
            name: "gather_rows",
            gen: |r| vec![uniform(r, vec![4, 2], -1.0, 1.0), uniform(r, vec![3, 2], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.gather_rows(v[0], &[2, 0, 2])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "to_voxel_matrix",
            gen: |r| vec![
                uniform(r, vec![2, 3, 2, 2, 2], -1.0, 1.0),
                uniform(r, vec![16, 3], -1.0, 1.0),
            ],
            graph: |t, v| {
                let o = t.to_voxel_matrix(v[0])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "softmax_axis1",
            gen: |r| vec![uniform(r, vec![3, 4], -1.0, 1.0), uniform(r, vec![3, 4], -1.0, 1.0)],
            graph: |t, v| {
                let o = t.softmax_axis1(v[0])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "relu",
            gen: |r| vec![
                uniform_away_from(r, vec![12], -1.0, 1.0, &[0.0]),
                uniform(r, vec![12], -1.0, 1.0),
            ],
            graph: |t, v| {
                let o = t.relu(v[0])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "maxpool2",
            gen: |r| {
                // spread values so no pooling window has a near-tie
                let mut x = uniform(r, vec![1, 2, 2, 4, 4], -1.0, 1.0);
                spread_pool_windows(&mut x);
                vec![x, uniform(r, vec![1, 2, 1, 2, 2], -1.0, 1.0)]
            },
            graph: |t, v| {
                let o = t.maxpool2(v[0])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "upsample2",
            gen: |r| vec![
                uniform(r, vec![1, 2, 1, 2, 2], -1.0, 1.0),
                uniform(r, vec![1, 2, 2, 4, 4], -1.0, 1.0),
            ],
            graph: |t, v| {
                let o = t.upsample2(v[0])?;
                contract(t, o, v[1])
            },
        },
        KernelCheck {
            name: "conv3d",
            gen: |r| vec![
                uniform(r, vec![1, 2, 3, 3, 3], -1.0, 1.0),
                uniform(r, vec![2, 2, 3, 3, 3], -1.0, 1.0),
                uniform(r, vec![2], -1.0, 1.0),
                uniform(r, vec![1, 2, 3, 3, 3], -1.0, 1.0),
            ],
            graph: |t, v| {
                let o = t.conv3d(v[0], v[1], v[2], 1, 1)?;
                contract(t, o, v[3])
            },
        },
        KernelCheck {
            name: "conv3d_stride2",
            gen: |r| vec![
                uniform(r, vec![1, 1, 5, 5, 5], -1.0, 1.0),
                uniform(r, vec![2, 1, 3, 3, 3], -1.0, 1.0),
                uniform(r, vec![2], -1.0, 1.0),
                uniform(r, vec![1, 2, 2, 2, 2], -1.0, 1.0),
            ],
            graph: |t, v| {
                let o = t.conv3d(v[0], v[1], v[2], 2, 0)?;
                contract(t, o, v[3])
            },
        },
    ]
}

/// Ensure the top-2 entries of every 2x2x2 pooling window differ by a
/// safe margin.
fn spread_pool_windows(t: &mut Tensor) {
    let (b, c, d, h, w) = (t.shape[0], t.shape[1], t.shape[2], t.shape[3], t.shape[4]);
    for bc in 0..b * c {
        let base = bc * d * h * w;
        for z in 0..d / 2 {
            for y in 0..h / 2 {
                for x in 0..w / 2 {
                    let mut idxs = Vec::with_capacity(8);
                    for kz in 0..2 {
                        for ky in 0..2 {
                            for kx in 0..2 {
                                idxs.push(base + (2 * z + kz) * h * w + (2 * y + ky) * w + 2 * x + kx);
                            }
                        }
                    }
                    let mut best = idxs[0];
                    for &i in &idxs {
                        if t.values[i] > t.values[best] {
                            best = i;
                        }
                    }
                    let second = idxs
                        .iter()
                        .filter(|&&i| i != best)
                        .map(|&i| t.values[i])
                        .fold(f64::NEG_INFINITY, f64::max);
                    if t.values[best] - second < 1e-3 {
                        t.values[best] = second + 2e-3;
                    }
                }
            }
        }
    }
}

/// Run every kernel scenario over the given seeds; the worst errors per
/// kernel are returned in catalog order.
pub fn run_kernel_checks(seeds: &[u64], h: f64) -> Result<Vec<(&'static str, GradErrors)>> {
    use rand::SeedableRng;
    let mut out = Vec::new();
    for check in kernel_checks() {
        let mut worst = GradErrors::default();
        for &seed in seeds {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let inputs = (check.gen)(&mut rng);
            let errs = compare_gradients(&inputs, &check.graph, h, None)?;
            worst.max_rel = worst.max_rel.max(errs.max_rel);
            worst.max_abs_small = worst.max_abs_small.max(errs.max_abs_small);
        }
        out.push((check.name, worst));
    }
    Ok(out)
}
