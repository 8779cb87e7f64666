//! Finite-difference checks of every differentiable op and every loss,
//! shared by the `grad-check` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::losses::{
    ac_loss, cmc_loss, examiner_bce_loss, im_loss, ordering_targets, source_ce_loss, total_loss, LossWeights,
};
use crate::nets::{BaseNetwork, BaseVars, EncoderVars, ExaminerNetwork, ExaminerVars, NetConfig};
use crate::pseudo::{base_correlation, examiner_correlation};
use crate::tensor::gradcheck::grad_check_many;
use crate::tensor::{Tape, Tensor, Var};
use crate::Result;

/// Largest accepted relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckResult {
    pub name: String,
    /// Worst relative error over all points and coordinates.
    pub max_rel_error: f64,
    pub points: usize,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRAD_TOLERANCE
    }
}

type Loss = for<'t> fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// How inputs are drawn: magnitudes in `[0.2, 1]`, optionally forced positive.
#[derive(Clone, Copy)]
enum Draw {
    Signed,
    Positive,
    Unit,
}

fn draw(rng: &mut ChaCha8Rng, shape: &[usize], how: Draw) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| match how {
        Draw::Unit => rng.gen_range(0.05..0.95),
        _ => {
            let m = rng.gen_range(0.2..1.0);
            if matches!(how, Draw::Signed) && rng.gen_bool(0.5) {
                -m
            } else {
                m
            }
        }
    })
}

/// Reduces `y` to a scalar with fixed, uneven weights so every output
/// coordinate contributes a distinct gradient.
fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = tape.constant(Tensor::from_fn(y.shape(), |i| (1.3 * i as f64 + 0.4).sin() + 1.1));
    Ok(y.mul(&w)?.sum_all())
}

struct Case {
    name: &'static str,
    inputs: Vec<(Vec<usize>, Draw)>,
    f: Loss,
}

fn case(name: &'static str, inputs: &[(&[usize], Draw)], f: Loss) -> Case {
    Case {
        name,
        inputs: inputs.iter().map(|(s, d)| (s.to_vec(), *d)).collect(),
        f,
    }
}

fn op_cases() -> Vec<Case> {
    use Draw::*;
    vec![
        case("add", &[(&[3, 4], Signed), (&[4], Signed)], |t, v| {
            project(t, v[0].add(&v[1])?)
        }),
        case("sub", &[(&[3, 4], Signed), (&[3, 4], Signed)], |t, v| {
            project(t, v[0].sub(&v[1])?)
        }),
        case("mul", &[(&[3, 4], Signed), (&[3, 1], Signed)], |t, v| {
            project(t, v[0].mul(&v[1])?)
        }),
        case("div", &[(&[3, 4], Signed), (&[3, 4], Positive)], |t, v| {
            project(t, v[0].div(&v[1])?)
        }),
        case("scale", &[(&[5], Signed)], |t, v| project(t, v[0].scale(-1.7))),
        case("add_scalar", &[(&[5], Signed)], |t, v| project(t, v[0].add_scalar(0.3))),
        case("neg", &[(&[5], Signed)], |t, v| project(t, v[0].neg())),
        case("matmul", &[(&[3, 4], Signed), (&[4, 2], Signed)], |t, v| {
            project(t, v[0].matmul(&v[1])?)
        }),
        case("transpose", &[(&[3, 4], Signed)], |t, v| project(t, v[0].transpose()?)),
        case("reshape", &[(&[3, 4], Signed)], |t, v| {
            project(t, v[0].reshape(&[2, 6])?)
        }),
        case("relu", &[(&[4, 3], Signed)], |t, v| project(t, v[0].relu())),
        case("sigmoid", &[(&[4, 3], Signed)], |t, v| project(t, v[0].sigmoid())),
        case("softmax", &[(&[3, 4], Signed)], |t, v| project(t, v[0].softmax(1)?)),
        case("log2_softmax", &[(&[3, 4], Signed)], |t, v| {
            project(t, v[0].log2_softmax(1)?)
        }),
        case("log2", &[(&[4, 3], Positive)], |t, v| project(t, v[0].log2())),
        case("sum", &[(&[3, 4], Signed)], |t, v| project(t, v[0].sum(0)?)),
        case("mean", &[(&[3, 4], Signed)], |t, v| project(t, v[0].mean(1)?)),
        case("sum_all", &[(&[3, 4], Signed)], |_, v| Ok(v[0].sum_all())),
        case("mean_all", &[(&[3, 4], Signed)], |_, v| Ok(v[0].mean_all())),
        case("l2_norm", &[(&[3, 4], Signed)], |_, v| Ok(v[0].l2_norm())),
        case("l2_norm_axis", &[(&[3, 4], Signed)], |t, v| {
            project(t, v[0].l2_norm_axis(1)?)
        }),
        case(
            "frobenius_norm_diff",
            &[(&[3, 3], Signed), (&[3, 3], Signed)],
            |_, v| v[0].frobenius_norm_diff(&v[1]),
        ),
        case("conv2d", &[(&[2, 2, 5, 5], Signed), (&[3, 2, 3, 3], Signed)], |t, v| {
            project(t, v[0].conv2d(&v[1], 2, 1)?)
        }),
        case("conv1d_same", &[(&[2, 5], Signed), (&[3], Signed)], |t, v| {
            project(t, v[0].conv1d_same(&v[1])?)
        }),
        case("global_avg_pool", &[(&[2, 3, 3, 4], Signed)], |t, v| {
            project(t, v[0].global_avg_pool()?)
        }),
        case("concat", &[(&[2, 3], Signed), (&[2, 2], Signed)], |t, v| {
            project(t, Var::concat(&[v[0], v[1]], 1)?)
        }),
        case("index_select", &[(&[4, 3], Signed)], |t, v| {
            project(t, v[0].index_select(0, &[2, 0, 2])?)
        }),
    ]
}

fn loss_cases() -> Vec<Case> {
    use Draw::*;
    vec![
        case("im_loss", &[(&[5, 4], Signed)], |_, v| im_loss(&v[0])),
        case("examiner_bce_loss", &[(&[6, 2], Signed)], |_, v| {
            examiner_bce_loss(&v[0], &ordering_targets::<f64>(&[0, 1, 1, 0, 1, 0]))
        }),
        case("cmc_loss", &[(&[4, 4], Unit), (&[4, 4], Unit)], |_, v| {
            cmc_loss(&v[0], &v[1])
        }),
        case("ac_loss", &[(&[3, 5], Unit), (&[3, 5], Unit)], |_, v| {
            ac_loss(&v[0], &v[1])
        }),
        case(
            "total_loss",
            &[
                (&[4, 3], Signed),
                (&[4, 4], Unit),
                (&[4, 4], Unit),
                (&[4, 5], Unit),
                (&[4, 5], Unit),
            ],
            |_, v| {
                let im = im_loss(&v[0])?;
                let cmc = cmc_loss(&v[1], &v[2])?;
                let ac = ac_loss(&v[3], &v[4])?;
                total_loss(&im, &cmc, &ac, LossWeights::default())
            },
        ),
        case("source_ce_loss", &[(&[4, 3], Signed)], |_, v| {
            source_ce_loss(&v[0], &[2, 0, 1, 2])
        }),
        case("base_correlation", &[(&[4, 3], Signed)], |t, v| {
            project(t, base_correlation(&v[0], true)?)
        }),
    ]
}

fn tiny_config() -> NetConfig {
    NetConfig {
        in_channels: 1,
        height: 6,
        width: 6,
        conv1_channels: 2,
        conv2_channels: 3,
        feature_dim: 3,
        num_classes: 2,
        eca_kernel: 3,
        examiner_hidden: 4,
    }
}

const TINY_BATCH: usize = 3;

fn encoder_vars<'t>(v: &[Var<'t, f64>]) -> EncoderVars<'t, f64> {
    EncoderVars {
        conv1_w: v[0],
        conv1_b: v[1],
        conv2_w: v[2],
        conv2_b: v[3],
        eca_w: v[4],
        proj_w: v[5],
        proj_b: v[6],
    }
}

fn base_vars<'t>(v: &[Var<'t, f64>]) -> BaseVars<'t, f64> {
    BaseVars {
        encoder: encoder_vars(v),
        head_w: v[7],
        head_b: v[8],
    }
}

fn examiner_vars<'t>(v: &[Var<'t, f64>]) -> ExaminerVars<'t, f64> {
    ExaminerVars {
        encoder: encoder_vars(v),
        hidden_w: v[7],
        hidden_b: v[8],
        out_w: v[9],
        out_b: v[10],
    }
}

/// Parameters of a tiny base and examiner network plus two image batches,
/// flattened in the order the network closures expect.
fn tiny_inputs(rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let cfg = tiny_config();
    let base = BaseNetwork::<f64>::new(cfg.clone(), rng)?;
    let examiner = ExaminerNetwork::<f64>::new(cfg.clone(), rng)?;
    // Zero biases would sit every ReLU input on the same side; nudge them.
    let jitter = |t: &Tensor<f64>, rng: &mut ChaCha8Rng| {
        Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] + rng.gen_range(-0.1..0.1))
    };
    let mut v: Vec<Tensor<f64>> = base.named_params().into_iter().map(|(_, t)| jitter(t, rng)).collect();
    v.extend(examiner.named_params().into_iter().map(|(_, t)| jitter(t, rng)));
    let shape = [TINY_BATCH, cfg.in_channels, cfg.height, cfg.width];
    v.push(draw(rng, &shape, Draw::Unit));
    v.push(draw(rng, &shape, Draw::Unit));
    Ok(v)
}

const BASE_PARAMS: usize = 9;
const EXAMINER_PARAMS: usize = 11;

/// The combined objective through both networks, with every parameter and
/// the images as inputs.
fn combined_objective<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
    let base = base_vars(&v[..BASE_PARAMS]);
    let examiner = examiner_vars(&v[BASE_PARAMS..BASE_PARAMS + EXAMINER_PARAMS]);
    let (x, aug) = (v[BASE_PARAMS + EXAMINER_PARAMS], v[BASE_PARAMS + EXAMINER_PARAMS + 1]);
    let out = base.forward(&x)?;
    let im = im_loss(&out.logits)?;
    let (c_gamma, a_gamma) = examiner_correlation(&examiner, &x, &aug, false)?;
    let cmc = cmc_loss(&c_gamma, &base_correlation(&out.features, true)?)?;
    let ac = ac_loss(&a_gamma, &out.attention)?;
    total_loss(&im, &cmc, &ac, LossWeights::default())
}

/// Ordering loss of the tiny examiner on one triplet batch.
fn examiner_objective<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
    let examiner = examiner_vars(&v[BASE_PARAMS..BASE_PARAMS + EXAMINER_PARAMS]);
    let (x, aug) = (v[BASE_PARAMS + EXAMINER_PARAMS], v[BASE_PARAMS + EXAMINER_PARAMS + 1]);
    let out = examiner.forward(&[x, aug, x.index_select(0, &[2, 0, 1])?])?;
    examiner_bce_loss(&out.logits, &ordering_targets::<f64>(&[0, 1, 0]))
}

fn run_case(
    name: &str,
    points: usize,
    seed: u64,
    make: impl Fn(&mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>>,
    f: Loss,
) -> Result<GradCheckResult> {
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64);
        let inputs = make(&mut rng)?;
        worst = worst.max(grad_check_many(f, &inputs, EPS)?);
    }
    Ok(GradCheckResult {
        name: name.to_string(),
        max_rel_error: worst,
        points,
    })
}

/// Checks every op, every loss and the combined objective through tiny
/// networks at `points` seeded random inputs each.
pub fn run_suite(points: usize, seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut out = Vec::new();
    for c in op_cases().into_iter().chain(loss_cases()) {
        let make = |rng: &mut ChaCha8Rng| Ok(c.inputs.iter().map(|(s, d)| draw(rng, s, *d)).collect());
        out.push(run_case(c.name, points, seed, make, c.f)?);
    }
    out.push(run_case(
        "examiner_network_bce",
        points,
        seed,
        tiny_inputs,
        examiner_objective,
    )?);
    out.push(run_case(
        "combined_objective_networks",
        points,
        seed,
        tiny_inputs,
        combined_objective,
    )?);
    Ok(out)
}
