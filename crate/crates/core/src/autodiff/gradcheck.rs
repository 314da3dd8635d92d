//! Finite-difference gradient checking.
//!
//! The analytic gradient comes from an `f32` tape; the numeric one from
//! central differences of the same graph evaluated on an `f64` tape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Real, Tape, Tensor, Var};

pub type GraphFn<T> = fn(&Tape<T>, &[Var]) -> Var;

#[derive(Clone, Debug)]
pub struct GradcheckEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradcheckEntry {
    pub fn passes(&self, abs_tol: f64, rel_tol: f64) -> bool {
        (self.analytic - self.numeric).abs() <= abs_tol.max(rel_tol * self.numeric.abs())
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn pass_fraction(&self, abs_tol: f64, rel_tol: f64) -> f64 {
        if self.entries.is_empty() {
            return 1.0;
        }
        let ok = self.entries.iter().filter(|e| e.passes(abs_tol, rel_tol)).count();
        ok as f64 / self.entries.len() as f64
    }

    pub fn all_pass(&self, abs_tol: f64, rel_tol: f64) -> bool {
        self.entries.iter().all(|e| e.passes(abs_tol, rel_tol))
    }

    pub fn worst(&self) -> Option<&GradcheckEntry> {
        self.entries.iter().max_by(|a, b| {
            let da = (a.analytic - a.numeric).abs();
            let db = (b.analytic - b.numeric).abs();
            da.total_cmp(&db)
        })
    }

    pub fn summary(&self) -> String {
        match self.worst() {
            Some(w) => format!(
                "{} coords, worst input {} index {}: analytic {:.6e} numeric {:.6e}",
                self.entries.len(),
                w.input,
                w.index,
                w.analytic,
                w.numeric
            ),
            None => "no coordinates".into(),
        }
    }
}

/// Output weights turning any-shaped output into a scalar with a dense
/// Jacobian-vector product.
fn output_weights(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn weighted_loss<T: Real>(tape: &Tape<T>, out: Var, weights: &[f64]) -> Var {
    let shape = tape.shape(out);
    let w = tape.constant(Tensor::new(shape, weights.iter().map(|&v| T::from_f(v)).collect()));
    let p = tape.mul(out, w).expect("weights match output shape");
    tape.sum(p)
}

fn eval_f64(f: GraphFn<f64>, inputs: &[Tensor<f64>], weights: &[f64]) -> f64 {
    let tape = Tape::<f64>::new().with_finite_checks(false);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars);
    let l = weighted_loss(&tape, out, weights);
    tape.value(l).item()
}

/// Compares `f32` reverse-mode gradients against `f64` central differences
/// with the given step for every coordinate of every input.
pub fn gradcheck(
    f32_graph: GraphFn<f32>,
    f64_graph: GraphFn<f64>,
    inputs: &[Tensor<f64>],
    step: f64,
) -> GradcheckReport {
    let tape = Tape::<f32>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.cast())).collect();
    let out = f32_graph(&tape, &vars);
    let weights = output_weights(tape.value(out).len());
    let loss = weighted_loss(&tape, out, &weights);
    let grads = tape.backward(loss).expect("scalar loss");

    let mut report = GradcheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.get_or_zeros(*v, &inputs[i].shape);
        for j in 0..inputs[i].len() {
            let orig = probe[i].data[j];
            probe[i].data[j] = orig + step;
            let plus = eval_f64(f64_graph, &probe, &weights);
            probe[i].data[j] = orig - step;
            let minus = eval_f64(f64_graph, &probe, &weights);
            probe[i].data[j] = orig;
            report.entries.push(GradcheckEntry {
                input: i,
                index: j,
                analytic: g.data[j] as f64,
                numeric: (plus - minus) / (2.0 * step),
            });
        }
    }
    report
}
