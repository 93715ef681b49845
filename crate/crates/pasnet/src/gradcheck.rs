//! Finite-difference verification of tape gradients.
//!
//! Every differentiable op is exercised on several random small shapes: the
//! op output is contracted against a fixed random projection to obtain a
//! scalar, analytic gradients come from one backward pass, and each input
//! coordinate is re-evaluated at `x ± h` for a central difference.  Checks
//! run in wide (`f64`) precision; in standard precision the difference
//! quotient would be dominated by rounding noise.
//!
//! Inputs for kinked ops (`relu`, `abs`) are sampled away from zero so the
//! difference step cannot straddle the kink.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::tensor::{Result as TensorResult, Tape, Tensor};

/// Central-difference base step.
pub const FD_STEP: f64 = 1e-4;
/// Maximum accepted relative error between analytic and numeric gradients.
pub const FD_TOL: f64 = 1e-4;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    /// Worst relative error seen across all checked coordinates.
    pub max_rel: f64,
    /// Number of coordinates compared.
    pub checked: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel.is_finite() && self.max_rel < FD_TOL
    }
}

/// Relative error with a floor so near-zero gradients compare absolutely.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare tape gradients against central differences for an arbitrary
/// tape-built function.
///
/// `build` receives differentiable leaves made from `inputs` and returns any
/// output tensor; the harness contracts it with a fixed random projection to
/// get the scalar root.  Returns the worst relative error over the checked
/// coordinates (`None` in `coords` means every coordinate of every input).
pub fn check_grads(
    rng: &mut ChaCha20Rng,
    inputs: &[(Vec<usize>, Vec<f64>)],
    coords: Option<&[(usize, usize)]>,
    build: &dyn Fn(&mut Tape<f64>, &[Tensor]) -> TensorResult<Tensor>,
) -> CheckReport {
    // Shape probe: run once to size the projection.
    let out_len = {
        let mut tape: Tape<f64> = Tape::new();
        let leaves: Vec<Tensor> = inputs
            .iter()
            .map(|(shape, data)| tape.leaf(shape, data.clone()).expect("probe leaf"))
            .collect();
        let out = build(&mut tape, &leaves).expect("probe forward");
        tape.numel(out)
    };
    let proj: Vec<f64> = (0..out_len).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut tape: Tape<f64> = Tape::new();
        let leaves: Vec<Tensor> = inputs
            .iter()
            .zip(values)
            .map(|((shape, _), data)| tape.leaf(shape, data.clone()).expect("leaf"))
            .collect();
        let out = build(&mut tape, &leaves).expect("forward");
        let w = tape.leaf(&[out_len], proj.clone()).expect("projection");
        let flat = tape.reshape(out, &[out_len]).expect("flatten");
        let prod = tape.mul(flat, w).expect("project");
        let root = tape.sum_all(prod).expect("reduce");
        tape.data(root)[0]
    };

    // Analytic gradients.
    let mut tape: Tape<f64> = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, data)| tape.var(shape, data.clone()).expect("var"))
        .collect();
    let out = build(&mut tape, &leaves).expect("forward");
    let w = tape.leaf(&[out_len], proj.clone()).expect("projection");
    let flat = tape.reshape(out, &[out_len]).expect("flatten");
    let prod = tape.mul(flat, w).expect("project");
    let root = tape.sum_all(prod).expect("reduce");
    tape.backward(root).expect("backward");
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&l| tape.grad(l).unwrap().to_vec()).collect();

    let all_coords: Vec<(usize, usize)> = match coords {
        Some(c) => c.to_vec(),
        None => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, (_, data))| (0..data.len()).map(move |j| (i, j)))
            .collect(),
    };

    let mut values: Vec<Vec<f64>> = inputs.iter().map(|(_, d)| d.clone()).collect();
    let mut max_rel = 0.0f64;
    for &(i, j) in &all_coords {
        let orig = values[i][j];
        let h = FD_STEP * orig.abs().max(1.0);
        values[i][j] = orig + h;
        let f_plus = eval(&values);
        values[i][j] = orig - h;
        let f_minus = eval(&values);
        values[i][j] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * h);
        let r = rel_err(analytic[i][j], numeric);
        if r > max_rel {
            max_rel = r;
        }
    }
    CheckReport { name: String::new(), max_rel, checked: all_coords.len() }
}

fn uniform(rng: &mut ChaCha20Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Signed values with magnitude in `[min_abs, max_abs]`, for kinked ops.
fn away_from_zero(rng: &mut ChaCha20Rng, n: usize, min_abs: f64, max_abs: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.gen_range(min_abs..max_abs);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

fn rand_dims(rng: &mut ChaCha20Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

type BuildFn = dyn Fn(&mut Tape<f64>, &[Tensor]) -> TensorResult<Tensor>;

/// One registered op check: `cases` distinct random configurations.
struct OpSpec {
    name: &'static str,
    cases: usize,
    /// Draw (inputs, build) for one case.
    draw: fn(&mut ChaCha20Rng) -> (Vec<(Vec<usize>, Vec<f64>)>, Box<BuildFn>),
}

fn binary_case(
    rng: &mut ChaCha20Rng,
    build: fn(&mut Tape<f64>, Tensor, Tensor) -> TensorResult<Tensor>,
    b_lo: f64,
    b_hi: f64,
) -> (Vec<(Vec<usize>, Vec<f64>)>, Box<BuildFn>) {
    let shape = rand_dims(rng, 2, 1, 5);
    let n: usize = shape.iter().product();
    let a = uniform(rng, n, -2.0, 2.0);
    let b = uniform(rng, n, b_lo, b_hi);
    (
        vec![(shape.clone(), a), (shape, b)],
        Box::new(move |t, l| build(t, l[0], l[1])),
    )
}

fn unary_case(
    rng: &mut ChaCha20Rng,
    data: Vec<f64>,
    shape: Vec<usize>,
    build: fn(&mut Tape<f64>, Tensor) -> TensorResult<Tensor>,
) -> (Vec<(Vec<usize>, Vec<f64>)>, Box<BuildFn>) {
    let _ = rng;
    (vec![(shape, data)], Box::new(move |t, l| build(t, l[0])))
}

fn op_specs() -> Vec<OpSpec> {
    vec![
        OpSpec {
            name: "add",
            cases: 5,
            draw: |rng| binary_case(rng, |t, a, b| t.add(a, b), -2.0, 2.0),
        },
        OpSpec {
            name: "sub",
            cases: 5,
            draw: |rng| binary_case(rng, |t, a, b| t.sub(a, b), -2.0, 2.0),
        },
        OpSpec {
            name: "mul",
            cases: 5,
            draw: |rng| binary_case(rng, |t, a, b| t.mul(a, b), -2.0, 2.0),
        },
        OpSpec {
            name: "div",
            cases: 5,
            draw: |rng| binary_case(rng, |t, a, b| t.div(a, b), 0.5, 2.0),
        },
        OpSpec {
            name: "neg",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 2, 1, 5);
                let n = shape.iter().product();
                let d = uniform(rng, n, -2.0, 2.0);
                unary_case(rng, d, shape, |t, x| t.neg(x))
            },
        },
        OpSpec {
            name: "scale",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 2, 1, 5);
                let n = shape.iter().product();
                let d = uniform(rng, n, -2.0, 2.0);
                let c = rng.gen_range(-3.0..3.0);
                (vec![(shape, d)], Box::new(move |t: &mut Tape<f64>, l: &[Tensor]| t.scale(l[0], c)))
            },
        },
        OpSpec {
            name: "add_scalar",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 2, 1, 5);
                let n = shape.iter().product();
                let d = uniform(rng, n, -2.0, 2.0);
                let c = rng.gen_range(-3.0..3.0);
                (vec![(shape, d)], Box::new(move |t: &mut Tape<f64>, l: &[Tensor]| t.add_scalar(l[0], c)))
            },
        },
        OpSpec {
            name: "recip",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 2, 1, 5);
                let n = shape.iter().product();
                let d = away_from_zero(rng, n, 0.5, 2.0);
                unary_case(rng, d, shape, |t, x| t.recip(x))
            },
        },
        OpSpec {
            name: "sqrt",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 2, 1, 5);
                let n = shape.iter().product();
                let d = uniform(rng, n, 0.25, 4.0);
                unary_case(rng, d, shape, |t, x| t.sqrt(x))
            },
        },
        OpSpec {
            name: "exp",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 2, 1, 5);
                let n = shape.iter().product();
                let d = uniform(rng, n, -2.0, 2.0);
                unary_case(rng, d, shape, |t, x| t.exp(x))
            },
        },
        OpSpec {
            name: "abs",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 2, 1, 5);
                let n = shape.iter().product();
                let d = away_from_zero(rng, n, 0.2, 2.0);
                unary_case(rng, d, shape, |t, x| t.abs(x))
            },
        },
        OpSpec {
            name: "relu",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 2, 1, 5);
                let n = shape.iter().product();
                let d = away_from_zero(rng, n, 0.2, 2.0);
                unary_case(rng, d, shape, |t, x| t.relu(x))
            },
        },
        OpSpec {
            name: "sigmoid",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 2, 1, 5);
                let n = shape.iter().product();
                let d = uniform(rng, n, -3.0, 3.0);
                unary_case(rng, d, shape, |t, x| t.sigmoid(x))
            },
        },
        OpSpec {
            name: "matmul",
            cases: 5,
            draw: |rng| {
                let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
                let a = uniform(rng, m * k, -1.5, 1.5);
                let b = uniform(rng, k * n, -1.5, 1.5);
                (
                    vec![(vec![m, k], a), (vec![k, n], b)],
                    Box::new(|t: &mut Tape<f64>, l: &[Tensor]| t.matmul(l[0], l[1])),
                )
            },
        },
        OpSpec {
            name: "bmm",
            cases: 5,
            draw: |rng| {
                let (q, m, k, n) = (
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                    rng.gen_range(1..4),
                );
                let a = uniform(rng, q * m * k, -1.5, 1.5);
                let b = uniform(rng, q * k * n, -1.5, 1.5);
                (
                    vec![(vec![q, m, k], a), (vec![q, k, n], b)],
                    Box::new(|t: &mut Tape<f64>, l: &[Tensor]| t.bmm(l[0], l[1])),
                )
            },
        },
        OpSpec {
            name: "transpose_last2",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 3, 1, 4);
                let n = shape.iter().product();
                let d = uniform(rng, n, -2.0, 2.0);
                unary_case(rng, d, shape, |t, x| t.transpose_last2(x))
            },
        },
        OpSpec {
            name: "permute_0213",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 4, 1, 4);
                let n = shape.iter().product();
                let d = uniform(rng, n, -2.0, 2.0);
                unary_case(rng, d, shape, |t, x| t.permute_0213(x))
            },
        },
        OpSpec {
            name: "reshape",
            cases: 5,
            draw: |rng| {
                let (a, b) = (rng.gen_range(1..5), rng.gen_range(1..5));
                let d = uniform(rng, a * b, -2.0, 2.0);
                (
                    vec![(vec![a, b], d)],
                    Box::new(move |t: &mut Tape<f64>, l: &[Tensor]| t.reshape(l[0], &[b * a])),
                )
            },
        },
        OpSpec {
            name: "softmax",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 3, 1, 4);
                let axis = rng.gen_range(0..3);
                let n = shape.iter().product();
                let d = uniform(rng, n, -2.0, 2.0);
                (
                    vec![(shape, d)],
                    Box::new(move |t: &mut Tape<f64>, l: &[Tensor]| t.softmax(l[0], axis)),
                )
            },
        },
        OpSpec {
            name: "layer_norm",
            cases: 5,
            draw: |rng| {
                let lanes = rng.gen_range(1..4);
                let d = rng.gen_range(2..6);
                let x = uniform(rng, lanes * d, -2.0, 2.0);
                let gamma = uniform(rng, d, 0.5, 1.5);
                let beta = uniform(rng, d, -0.5, 0.5);
                (
                    vec![(vec![lanes, d], x), (vec![d], gamma), (vec![d], beta)],
                    Box::new(|t: &mut Tape<f64>, l: &[Tensor]| t.layer_norm(l[0], l[1], l[2], 1e-5)),
                )
            },
        },
        OpSpec {
            name: "conv2d",
            cases: 6,
            draw: |rng| {
                loop {
                    let (n, cin, f) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
                    let (h, w) = (rng.gen_range(3..8), rng.gen_range(3..8));
                    let k = rng.gen_range(1..4);
                    let stride = rng.gen_range(1..3);
                    let padding = rng.gen_range(0..3);
                    let dilation = rng.gen_range(1..3);
                    let span = dilation * (k - 1) + 1;
                    if h + 2 * padding < span || w + 2 * padding < span {
                        continue;
                    }
                    let x = uniform(rng, n * cin * h * w, -1.5, 1.5);
                    let wt = uniform(rng, f * cin * k * k, -1.0, 1.0);
                    let b = uniform(rng, f, -0.5, 0.5);
                    return (
                        vec![
                            (vec![n, cin, h, w], x),
                            (vec![f, cin, k, k], wt),
                            (vec![f], b),
                        ],
                        Box::new(move |t: &mut Tape<f64>, l: &[Tensor]| {
                            t.conv2d(l[0], l[1], Some(l[2]), stride, padding, dilation)
                        }),
                    );
                }
            },
        },
        OpSpec {
            name: "avg_pool2d",
            cases: 5,
            draw: |rng| {
                loop {
                    let (n, c) = (rng.gen_range(1..3), rng.gen_range(1..3));
                    let (h, w) = (rng.gen_range(3..8), rng.gen_range(3..8));
                    let k = rng.gen_range(1..4);
                    let stride = rng.gen_range(1..3);
                    let padding = rng.gen_range(0..2);
                    if h + 2 * padding < k || w + 2 * padding < k {
                        continue;
                    }
                    let x = uniform(rng, n * c * h * w, -1.5, 1.5);
                    return (
                        vec![(vec![n, c, h, w], x)],
                        Box::new(move |t: &mut Tape<f64>, l: &[Tensor]| {
                            t.avg_pool2d(l[0], k, stride, padding)
                        }),
                    );
                }
            },
        },
        OpSpec {
            name: "upsample_bilinear",
            cases: 5,
            draw: |rng| {
                let (n, c) = (rng.gen_range(1..3), rng.gen_range(1..3));
                let (h, w) = (rng.gen_range(2..5), rng.gen_range(2..5));
                let (oh, ow) = (rng.gen_range(2..9), rng.gen_range(2..9));
                let x = uniform(rng, n * c * h * w, -1.5, 1.5);
                (
                    vec![(vec![n, c, h, w], x)],
                    Box::new(move |t: &mut Tape<f64>, l: &[Tensor]| t.upsample_bilinear(l[0], oh, ow)),
                )
            },
        },
        OpSpec {
            name: "mean_spatial",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 4, 1, 4);
                let n = shape.iter().product();
                let d = uniform(rng, n, -2.0, 2.0);
                unary_case(rng, d, shape, |t, x| t.mean_spatial(x))
            },
        },
        OpSpec {
            name: "mean_channels",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 4, 1, 4);
                let n = shape.iter().product();
                let d = uniform(rng, n, -2.0, 2.0);
                unary_case(rng, d, shape, |t, x| t.mean_channels(x))
            },
        },
        OpSpec {
            name: "add_channels",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 4, 1, 4);
                let n: usize = shape.iter().product();
                let per_sample = rng.gen::<bool>();
                let b_shape = if per_sample { vec![shape[0], shape[1]] } else { vec![shape[1]] };
                let bn: usize = b_shape.iter().product();
                let x = uniform(rng, n, -2.0, 2.0);
                let b = uniform(rng, bn, -1.0, 1.0);
                (
                    vec![(shape, x), (b_shape, b)],
                    Box::new(|t: &mut Tape<f64>, l: &[Tensor]| t.add_channels(l[0], l[1])),
                )
            },
        },
        OpSpec {
            name: "mul_channels",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 4, 1, 4);
                let n: usize = shape.iter().product();
                let per_sample = rng.gen::<bool>();
                let s_shape = if per_sample { vec![shape[0], shape[1]] } else { vec![shape[1]] };
                let sn: usize = s_shape.iter().product();
                let x = uniform(rng, n, -2.0, 2.0);
                let s = uniform(rng, sn, -1.5, 1.5);
                (
                    vec![(shape, x), (s_shape, s)],
                    Box::new(|t: &mut Tape<f64>, l: &[Tensor]| t.mul_channels(l[0], l[1])),
                )
            },
        },
        OpSpec {
            name: "add_bias_cols",
            cases: 5,
            draw: |rng| {
                let (m, n) = (rng.gen_range(1..5), rng.gen_range(1..5));
                let x = uniform(rng, m * n, -2.0, 2.0);
                let b = uniform(rng, n, -1.0, 1.0);
                (
                    vec![(vec![m, n], x), (vec![n], b)],
                    Box::new(|t: &mut Tape<f64>, l: &[Tensor]| t.add_bias_cols(l[0], l[1])),
                )
            },
        },
        OpSpec {
            name: "concat_channels",
            cases: 5,
            draw: |rng| {
                let (n, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
                let (c1, c2) = (rng.gen_range(1..4), rng.gen_range(1..4));
                let a = uniform(rng, n * c1 * h * w, -2.0, 2.0);
                let b = uniform(rng, n * c2 * h * w, -2.0, 2.0);
                (
                    vec![(vec![n, c1, h, w], a), (vec![n, c2, h, w], b)],
                    Box::new(|t: &mut Tape<f64>, l: &[Tensor]| t.concat_channels(&[l[0], l[1]])),
                )
            },
        },
        OpSpec {
            name: "slice_channels",
            cases: 5,
            draw: |rng| {
                let (n, h, w) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(1..4));
                let c = rng.gen_range(2..6);
                let from = rng.gen_range(0..c - 1);
                let to = rng.gen_range(from + 1..=c);
                let x = uniform(rng, n * c * h * w, -2.0, 2.0);
                (
                    vec![(vec![n, c, h, w], x)],
                    Box::new(move |t: &mut Tape<f64>, l: &[Tensor]| t.slice_channels(l[0], from, to)),
                )
            },
        },
        OpSpec {
            name: "diff_w",
            cases: 5,
            draw: |rng| {
                let mut shape = rand_dims(rng, 4, 1, 4);
                shape[3] = rng.gen_range(2..5);
                let n = shape.iter().product();
                let d = uniform(rng, n, -2.0, 2.0);
                unary_case(rng, d, shape, |t, x| t.diff_w(x))
            },
        },
        OpSpec {
            name: "diff_h",
            cases: 5,
            draw: |rng| {
                let mut shape = rand_dims(rng, 4, 1, 4);
                shape[2] = rng.gen_range(2..5);
                let n = shape.iter().product();
                let d = uniform(rng, n, -2.0, 2.0);
                unary_case(rng, d, shape, |t, x| t.diff_h(x))
            },
        },
        OpSpec {
            name: "sum_all",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 2, 1, 5);
                let n = shape.iter().product();
                let d = uniform(rng, n, -2.0, 2.0);
                unary_case(rng, d, shape, |t, x| t.sum_all(x))
            },
        },
        OpSpec {
            name: "mean_all",
            cases: 5,
            draw: |rng| {
                let shape = rand_dims(rng, 2, 1, 5);
                let n = shape.iter().product();
                let d = uniform(rng, n, -2.0, 2.0);
                unary_case(rng, d, shape, |t, x| t.mean_all(x))
            },
        },
    ]
}

/// Names of every op in the default check set.
pub fn default_op_names() -> Vec<&'static str> {
    op_specs().iter().map(|s| s.name).collect()
}

/// Deliberately corrupted comparison used as a negative control: the
/// analytic gradient is scaled before comparison, so this check must fail.
pub const NEGATIVE_CONTROL: &str = "negative-control";

/// Run the named per-op checks.  Unknown names produce an error report with
/// infinite error so callers fail loudly rather than silently skipping.
pub fn run_op_checks(names: &[&str], seed: u64) -> Vec<CheckReport> {
    let specs = op_specs();
    let mut reports = Vec::new();
    for &name in names {
        if name == NEGATIVE_CONTROL {
            reports.push(negative_control(seed));
            continue;
        }
        match specs.iter().find(|s| s.name == name) {
            Some(spec) => {
                let mut rng = ChaCha20Rng::seed_from_u64(seed ^ fxhash(name));
                let mut worst = CheckReport { name: name.into(), max_rel: 0.0, checked: 0 };
                for _ in 0..spec.cases {
                    let (inputs, build) = (spec.draw)(&mut rng);
                    let r = check_grads(&mut rng, &inputs, None, build.as_ref());
                    worst.max_rel = worst.max_rel.max(r.max_rel);
                    worst.checked += r.checked;
                }
                reports.push(worst);
            }
            None => reports.push(CheckReport {
                name: format!("{name} (unknown op)"),
                max_rel: f64::INFINITY,
                checked: 0,
            }),
        }
    }
    reports
}

/// Run every default op check.
pub fn run_all_op_checks(seed: u64) -> Vec<CheckReport> {
    run_op_checks(&default_op_names(), seed)
}

fn negative_control(seed: u64) -> CheckReport {
    // A sigmoid check whose analytic gradient is corrupted by 5%; the
    // reported error is the deliberate discrepancy.
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let data = uniform(&mut rng, 8, -2.0, 2.0);
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.var(&[8], data.clone()).unwrap();
    let y = tape.sigmoid(x).unwrap();
    let s = tape.sum_all(y).unwrap();
    tape.backward(s).unwrap();
    let mut max_rel = 0.0f64;
    for (j, &a) in tape.grad(x).unwrap().iter().enumerate() {
        let corrupted = a * 1.05;
        let h = FD_STEP * data[j].abs().max(1.0);
        let eval = |v: f64| {
            let mut t: Tape<f64> = Tape::new();
            let mut d = data.clone();
            d[j] = v;
            let x = t.leaf(&[8], d).unwrap();
            let y = t.sigmoid(x).unwrap();
            let s = t.sum_all(y).unwrap();
            t.data(s)[0]
        };
        let numeric = (eval(data[j] + h) - eval(data[j] - h)) / (2.0 * h);
        max_rel = max_rel.max(rel_err(corrupted, numeric));
    }
    CheckReport { name: NEGATIVE_CONTROL.into(), max_rel, checked: 8 }
}

/// Tiny stable hash so each op seeds a distinct, reproducible stream.
fn fxhash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Name under which the whole-network check reports.
pub const COMPOSITE: &str = "composite";

/// Build the full forward graph — encoder, estimated-depth fusion, decoder,
/// weighted loss — for one synthetic sample and return the tape, binding and
/// scalar total, leaving backward/readout to the caller.
fn composite_graph(
    model: &crate::model::Model,
    store: &mut crate::params::ParamStore<f64>,
    rgb: &[f64],
    gt: &[f64],
    loss_cfg: &crate::loss::LossCfg,
) -> (Tape<f64>, crate::params::Binding, Tensor) {
    let mut tape: Tape<f64> = Tape::new();
    let bound = store.bind(&mut tape).expect("bind");
    let rgb_t = tape.leaf(&[1, 3, 32, 32], rgb.to_vec()).expect("rgb leaf");
    let gt_t = tape.leaf(&[1, 1, 32, 32], gt.to_vec()).expect("gt leaf");
    // Eval-mode normalization keeps the finite-difference comparison well
    // conditioned; the batch-statistics backward has dedicated small-graph
    // coverage, and the parameter chain rule is identical in both modes.
    let mut f = crate::nn::Fwd { tape: &mut tape, bound: &bound, store, train: false };
    let out = model.forward(&mut f, rgb_t, None).expect("composite forward");
    let terms =
        crate::loss::total_loss(&mut tape, out.saliency, gt_t, rgb_t, loss_cfg).expect("loss");
    (tape, bound, terms.total)
}

/// Whole-network gradient check: one synthetic 32×32 sample pushed through
/// encoder → depth fusion → decoder → weighted total loss, differentiated
/// with respect to `max_coords` parameter coordinates drawn round-robin from
/// every top-level module so no stage escapes coverage.
pub fn run_composite_check(seed: u64, max_coords: usize) -> CheckReport {
    use crate::config::{Config, Mode};

    let mut cfg = Config::default();
    cfg.seed = seed;
    cfg.mode = Mode::M2EstimatedDepth;
    cfg.image_size = 32;
    cfg.stem_channels = 2;
    cfg.d_feat = 4;
    cfg.token_dim = 4;
    cfg.transformer_depth = 2;
    cfg.tap_i = 1;
    cfg.tap_j = 2;
    cfg.mhsa_heads = 2;
    cfg.daspp_rates = vec![1, 2];
    cfg.daspp_branch_channels = 2;
    cfg.reduction_ratio = 2;
    cfg.depth_channels = 2;

    let mut store: crate::params::ParamStore<f64> = crate::params::ParamStore::new();
    let model = crate::model::Model::build(&cfg, &mut store).expect("composite model builds");
    let sample = crate::data::synth::generate(seed, 0, 32);
    let rgb: Vec<f64> = sample.rgb.data.iter().map(|v| *v as f64).collect();
    let gt: Vec<f64> = sample.gt.data.iter().map(|v| *v as f64).collect();
    let loss_cfg = crate::loss::LossCfg::from(&cfg);

    // Analytic gradients for every parameter from one backward pass.
    let (mut tape, bound, total) = composite_graph(&model, &mut store, &rgb, &gt, &loss_cfg);
    tape.backward(total).expect("composite backward");
    let analytic: Vec<Option<Vec<f64>>> = store
        .iter()
        .map(|(id, p)| {
            if p.trainable {
                Some(tape.grad(bound.get(id)).map(<[f64]>::to_vec).unwrap_or_default())
            } else {
                None
            }
        })
        .collect();
    drop(tape);

    // Round-robin coordinate draw across top-level name prefixes.
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ fxhash(COMPOSITE));
    let mut groups: std::collections::BTreeMap<String, Vec<(usize, usize)>> = Default::default();
    for (idx, (_, p)) in store.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let prefix = p.name.split('.').next().unwrap_or("").to_string();
        let slots = groups.entry(prefix).or_default();
        for j in 0..p.data.len() {
            slots.push((idx, j));
        }
    }
    let mut picks: Vec<(usize, usize)> = Vec::with_capacity(max_coords);
    {
        use rand::seq::SliceRandom;
        let mut pools: Vec<Vec<(usize, usize)>> = groups.into_values().collect();
        for pool in &mut pools {
            pool.shuffle(&mut rng);
        }
        let mut round = 0;
        while picks.len() < max_coords {
            let mut took = false;
            for pool in &pools {
                if picks.len() >= max_coords {
                    break;
                }
                if let Some(&c) = pool.get(round) {
                    picks.push(c);
                    took = true;
                }
            }
            if !took {
                break;
            }
            round += 1;
        }
    }

    let ids: Vec<crate::params::ParamId> = store.iter().map(|(id, _)| id).collect();
    let mut max_rel = 0.0f64;
    for &(idx, j) in &picks {
        let id = ids[idx];
        let orig = store.get(id).data[j];
        let h = FD_STEP * orig.abs().max(1.0);
        let mut value_at = |w: f64| -> f64 {
            store.get_mut(id).data[j] = w;
            let (tape, _, total) = composite_graph(&model, &mut store, &rgb, &gt, &loss_cfg);
            tape.data(total)[0]
        };
        let f_plus = value_at(orig + h);
        let f_minus = value_at(orig - h);
        store.get_mut(id).data[j] = orig;
        let numeric = (f_plus - f_minus) / (2.0 * h);
        let a = analytic[idx].as_ref().map(|g| g[j]).unwrap_or(0.0);
        max_rel = max_rel.max(rel_err(a, numeric));
    }
    CheckReport { name: COMPOSITE.into(), max_rel, checked: picks.len() }
}
