//! Finite-difference checks for every op a tape can record.
//!
//! Each case is a small graph written once, generic over the scalar type, so
//! the `f32` tape supplies the analytic gradient and an `f64` tape the
//! numeric one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{gradcheck, GradcheckReport, GraphFn};
use super::{Real, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-3;
pub const ABS_TOL: f64 = 1e-4;
pub const REL_TOL: f64 = 0.01;

/// Every non-leaf op name a tape can record.
pub const REGISTERED_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "sigmoid",
    "silu",
    "exp",
    "abs",
    "tanh",
    "clamp",
    "add_channel_bias",
    "matmul",
    "conv2d",
    "upsample_nearest",
    "group_norm",
    "concat_channels",
    "reshape",
    "sum",
    "custom",
];

pub struct OpCheck {
    pub name: &'static str,
    /// Ops recorded by the case's graph.
    pub covers: Vec<&'static str>,
    pub report: GradcheckReport,
}

impl OpCheck {
    pub fn passes(&self) -> bool {
        self.report.all_pass(ABS_TOL, REL_TOL)
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Values bounded away from zero so kinks (abs, clamp) are not straddled.
fn rand_away_from(rng: &mut ChaCha8Rng, shape: &[usize], kinks: &[f64]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.5..1.5);
            if kinks.iter().all(|k| (v - k).abs() > 0.05) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

fn f_add<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.add(x[0], x[1]).unwrap()
}
fn f_sub<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.sub(x[0], x[1]).unwrap()
}
fn f_mul<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.mul(x[0], x[1]).unwrap()
}
fn f_scale<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    let y = t.scale(x[0], T::from_f(-2.5));
    t.add_scalar(y, T::from_f(0.3))
}
fn f_sigmoid<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.sigmoid(x[0])
}
fn f_silu<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.silu(x[0])
}
fn f_exp<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.exp(x[0])
}
fn f_tanh<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.tanh(x[0])
}
fn f_abs<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.abs(x[0])
}
fn f_clamp<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.clamp(x[0], T::from_f(-0.5), T::from_f(0.7))
}
fn f_bias<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.add_channel_bias(x[0], x[1]).unwrap()
}
fn f_matmul<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.matmul(x[0], x[1]).unwrap()
}
fn f_conv_s1<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.conv2d(x[0], x[1], 1, 1).unwrap()
}
fn f_conv_s2<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.conv2d(x[0], x[1], 2, 1).unwrap()
}
fn f_conv_1x1<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.conv2d(x[0], x[1], 1, 0).unwrap()
}
fn f_upsample<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.upsample_nearest(x[0], 2).unwrap()
}
fn f_upconv<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    let u = t.upsample_nearest(x[0], 2).unwrap();
    t.conv2d(u, x[1], 1, 1).unwrap()
}
fn f_gn<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    t.group_norm(x[0], x[1], x[2], 8, 1e-5).unwrap()
}
fn f_concat<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    let c = t.concat_channels(&[x[0], x[1]]).unwrap();
    t.mul(c, c).unwrap()
}
fn f_reshape<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    let r = t.reshape(x[0], &[6, 2]).unwrap();
    t.matmul(r, x[1]).unwrap()
}
fn f_sum<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    let s = t.sum(x[0]);
    t.mul(s, s).unwrap()
}
fn f_mean<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    let e = t.exp(x[0]);
    t.mean(e)
}
fn f_custom<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    // y = x^3 with a hand-written gradient.
    let xv = t.value(x[0]);
    let out = Tensor::new(xv.shape.clone(), xv.data.iter().map(|&v| v * v * v).collect());
    let saved = xv.clone();
    t.custom(&[x[0]], out, move |g| {
        vec![Tensor::new(
            g.shape.clone(),
            g.data
                .iter()
                .zip(&saved.data)
                .map(|(&g, &v)| g * T::from_f(3.0) * v * v)
                .collect(),
        )]
    })
}
fn f_chain<T: Real>(t: &Tape<T>, x: &[Var]) -> Var {
    let h = t.conv2d(x[0], x[1], 1, 1).unwrap();
    let h = t.add_channel_bias(h, x[2]).unwrap();
    let h = t.group_norm(h, x[3], x[4], 8, 1e-5).unwrap();
    t.silu(h)
}

struct Case {
    name: &'static str,
    f32_graph: GraphFn<f32>,
    f64_graph: GraphFn<f64>,
    inputs: Vec<Tensor<f64>>,
}

fn covered(f: GraphFn<f64>, inputs: &[Tensor<f64>]) -> Vec<&'static str> {
    let tape = Tape::<f64>::new().with_finite_checks(false);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    f(&tape, &vars);
    let mut ops: Vec<&'static str> = tape
        .ops()
        .into_iter()
        .filter(|o| *o != "param" && *o != "constant")
        .collect();
    ops.sort_unstable();
    ops.dedup();
    ops
}

macro_rules! case {
    ($name:literal, $f:ident, $inputs:expr) => {
        Case {
            name: $name,
            f32_graph: $f::<f32>,
            f64_graph: $f::<f64>,
            inputs: $inputs,
        }
    };
}

/// Runs every case; inputs are drawn from a fixed seed.
pub fn op_suite() -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = &mut rng;
    let a = rand_tensor(r, &[3, 4]);
    let b = rand_tensor(r, &[3, 4]);
    let cases = vec![
        case!("add", f_add, vec![a.clone(), b.clone()]),
        case!("sub", f_sub, vec![a.clone(), b.clone()]),
        case!("mul", f_mul, vec![a.clone(), b.clone()]),
        case!("scale/add_scalar", f_scale, vec![a.clone()]),
        case!("sigmoid", f_sigmoid, vec![a.clone()]),
        case!("silu", f_silu, vec![a.clone()]),
        case!("exp", f_exp, vec![a.clone()]),
        case!("tanh", f_tanh, vec![a.clone()]),
        case!("abs", f_abs, vec![rand_away_from(r, &[3, 4], &[0.0])]),
        case!("clamp", f_clamp, vec![rand_away_from(r, &[3, 4], &[-0.5, 0.7])]),
        case!("custom", f_custom, vec![a]),
        case!(
            "add_channel_bias",
            f_bias,
            vec![rand_tensor(r, &[3, 2, 2]), rand_tensor(r, &[3])]
        ),
        case!(
            "matmul",
            f_matmul,
            vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4, 5])]
        ),
        case!(
            "concat_channels",
            f_concat,
            vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[1, 3])]
        ),
        case!(
            "reshape",
            f_reshape,
            vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[2, 3])]
        ),
        case!("sum", f_sum, vec![rand_tensor(r, &[2, 3])]),
        case!("mean", f_mean, vec![rand_tensor(r, &[2, 3])]),
        case!("upsample_nearest", f_upsample, vec![rand_tensor(r, &[2, 3, 2])]),
        case!(
            "conv2d stride 1",
            f_conv_s1,
            vec![rand_tensor(r, &[2, 5, 4]), rand_tensor(r, &[3, 2, 3, 3])]
        ),
        case!(
            "conv2d stride 2",
            f_conv_s2,
            vec![rand_tensor(r, &[2, 6, 5]), rand_tensor(r, &[3, 2, 3, 3])]
        ),
        case!(
            "conv2d 1x1",
            f_conv_1x1,
            vec![rand_tensor(r, &[2, 3, 3]), rand_tensor(r, &[4, 2, 1, 1])]
        ),
        case!(
            "upsample+conv2d",
            f_upconv,
            vec![rand_tensor(r, &[2, 2, 3]), rand_tensor(r, &[2, 2, 3, 3])]
        ),
        case!(
            "group_norm",
            f_gn,
            vec![
                rand_tensor(r, &[16, 3, 2]),
                rand_tensor(r, &[16]),
                rand_tensor(r, &[16])
            ]
        ),
        case!(
            "conv2d+bias+group_norm+silu",
            f_chain,
            vec![
                rand_tensor(r, &[3, 4, 4]),
                rand_tensor(r, &[8, 3, 3, 3]),
                rand_tensor(r, &[8]),
                rand_tensor(r, &[8]),
                rand_tensor(r, &[8]),
            ]
        ),
    ];
    cases
        .into_iter()
        .map(|c| OpCheck {
            name: c.name,
            covers: covered(c.f64_graph, &c.inputs),
            report: gradcheck(c.f32_graph, c.f64_graph, &c.inputs, FD_STEP),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes() {
        for c in op_suite() {
            assert!(c.passes(), "{}: {}", c.name, c.report.summary());
        }
    }

    #[test]
    fn suite_covers_every_registered_op() {
        let suite = op_suite();
        for op in REGISTERED_OPS {
            assert!(suite.iter().any(|c| c.covers.contains(op)), "{op} unchecked");
        }
        for c in &suite {
            for op in &c.covers {
                assert!(REGISTERED_OPS.contains(op), "{op} recorded but not registered");
            }
        }
    }
}
