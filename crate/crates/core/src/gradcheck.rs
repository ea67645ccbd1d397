//! Central finite differences, used as the oracle for every backward rule.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{build_propagation, make_grid_mesh, Graph};
use crate::network::{Model, ModelKind, NetSpec};
use crate::physics::Trajectory;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;
use crate::train::loss_on_tape;

/// Gradients whose magnitude is below this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Estimates `∂f/∂p` for every entry of every tensor in `params` by
/// `(f(p+eps) − f(p−eps)) / (2 eps)`.
pub fn finite_diff_grad<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::contract(format!("eps must be positive, got {eps}")));
    }
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for ti in 0..params.len() {
        let mut g = Tensor::zeros(params[ti].shape());
        for k in 0..params[ti].numel() {
            let orig = params[ti].data()[k];
            work[ti].data_mut()[k] = orig + eps;
            let plus = f(&work)?;
            work[ti].data_mut()[k] = orig - eps;
            let minus = f(&work)?;
            work[ti].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(REL_FLOOR);
    (a - b).abs() / denom
}

/// Largest entrywise [`relative_error`] between two same-shape tensors.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Builds a scalar loss around a single primitive so its backward rule can
/// be checked in isolation. Operands are leaves in `inputs`; a fixed random
/// weighting keeps the upstream gradient non-uniform.
struct PrimitiveCase {
    kind: OpKind,
    inputs: Vec<Tensor>,
    weights: Tensor,
    graph: Option<Graph>,
}

impl PrimitiveCase {
    fn random<R: Rng>(kind: OpKind, rng: &mut R) -> Self {
        let m = rng.gen_range(1..=4);
        let k = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=4);
        let mut u = |shape: &[usize]| Tensor::uniform(shape, 1.0, rng);
        let (inputs, out_shape, graph) = match kind {
            OpKind::MatMul => (vec![u(&[m, k]), u(&[k, n])], vec![m, n], None),
            OpKind::Add | OpKind::Sub | OpKind::Hadamard => {
                (vec![u(&[m, k]), u(&[m, k])], vec![m, k], None)
            }
            OpKind::Sigmoid | OpKind::Tanh | OpKind::Scale => (vec![u(&[m, k])], vec![m, k], None),
            OpKind::AddBias => (vec![u(&[m, k]), u(&[k])], vec![m, k], None),
            OpKind::Propagate => {
                let nodes = m + 1;
                let x = u(&[nodes, k]);
                let edges: Vec<[usize; 2]> = (0..nodes)
                    .flat_map(|i| (i + 1..nodes).map(move |j| [i, j]))
                    .filter(|_| rng.gen_bool(0.5))
                    .collect();
                let g = build_propagation(nodes, &edges).expect("valid random graph");
                (vec![x], vec![nodes, k], Some(g))
            }
            OpKind::Sum => (vec![u(&[m, k])], vec![1], None),
            // keep rows away from the origin where the norm is not smooth
            OpKind::RowNorms => (vec![u(&[m, k]).map(|v| v + v.signum())], vec![m, 1], None),
            OpKind::Leaf => (vec![u(&[m, k])], vec![m, k], None),
        };
        let weights = Tensor::uniform(&out_shape, 1.0, rng);
        Self {
            kind,
            inputs,
            weights,
            graph,
        }
    }

    fn loss(&self, tape: &mut Tape, vars: &[Var]) -> Result<Var> {
        let out = match self.kind {
            OpKind::MatMul => tape.matmul(vars[0], vars[1])?,
            OpKind::Add => tape.add(vars[0], vars[1])?,
            OpKind::Sub => tape.sub(vars[0], vars[1])?,
            OpKind::Hadamard => tape.hadamard(vars[0], vars[1])?,
            OpKind::Sigmoid => tape.sigmoid(vars[0]),
            OpKind::Tanh => tape.tanh(vars[0]),
            OpKind::AddBias => tape.add_bias(vars[0], vars[1])?,
            OpKind::Propagate => {
                let g = self.graph.as_ref().expect("propagate case carries a graph");
                tape.propagate(g.propagation(), vars[0])?
            }
            OpKind::Sum => tape.sum(vars[0]),
            OpKind::Scale => tape.scale(vars[0], -1.75),
            OpKind::RowNorms => tape.row_norms(vars[0])?,
            OpKind::Leaf => vars[0],
        };
        let w = tape.constant(self.weights.clone());
        let weighted = tape.hadamard(out, w)?;
        Ok(tape.sum(weighted))
    }

    fn eval(&self, params: &[Tensor]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|t| tape.constant(t.clone())).collect();
        let l = self.loss(&mut tape, &vars)?;
        Ok(tape.value(l).item())
    }

    fn analytic(&self, fault: Option<OpKind>) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let vars: Vec<Var> = self.inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let l = self.loss(&mut tape, &vars)?;
        tape.backward(l)?;
        Ok(vars
            .iter()
            .zip(&self.inputs)
            .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect())
    }
}

/// Worst relative error of `kind`'s backward rule against finite
/// differences over `trials` random small shapes.
pub fn check_primitive(kind: OpKind, trials: usize, eps: f64, seed: u64) -> Result<f64> {
    check_primitive_with_fault(kind, trials, eps, seed, None)
}

/// As [`check_primitive`], with an optional corrupted backward rule.
pub fn check_primitive_with_fault(
    kind: OpKind,
    trials: usize,
    eps: f64,
    seed: u64,
    fault: Option<OpKind>,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let case = PrimitiveCase::random(kind, &mut rng);
        let analytic = case.analytic(fault)?;
        let numeric = finite_diff_grad(|p| case.eval(p), &case.inputs, eps)?;
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(max_relative_error(a, n));
        }
    }
    Ok(worst)
}

/// Small end-to-end case: a 6-node grid, a two-layer network (one hidden
/// layer of width 4 plus the output layer) and a random 3-step sequence
/// with rough targets.
#[derive(Debug, Clone)]
pub struct NetworkFixture {
    pub graph: Graph,
    pub model: Model,
    pub seq: Trajectory,
    pub steps: usize,
}

impl NetworkFixture {
    pub fn new(kind: ModelKind, seed: u64) -> Self {
        let (mesh, graph) = make_grid_mesh(3, 2, 0.1).expect("valid grid");
        let spec = NetSpec::plain(vec![4]).expect("valid schedule");
        let model = Model::new(spec, kind, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let rest = mesh.rest_tensor();
        let steps = 3;
        let x: Vec<Tensor> = (0..=steps)
            .map(|_| rest.add(&Tensor::uniform(&[6, 3], 0.05, &mut rng)).expect("same shape"))
            .collect();
        let y: Vec<Tensor> = x
            .iter()
            .map(|xt| xt.add(&Tensor::uniform(&[6, 3], 0.1, &mut rng)).expect("same shape"))
            .collect();
        Self {
            graph,
            model,
            seq: Trajectory {
                fps: 60.0,
                graph_ref: String::new(),
                x,
                y,
            },
            steps,
        }
    }

    /// Teacher-forced loss with the given parameter tensors substituted.
    pub fn loss(&self, params: &[Tensor], teacher: bool) -> Result<f64> {
        let model = self.with_params(params)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let preds = self.unroll(&model, &mut tape, &bound, teacher)?;
        let l = loss_on_tape(&mut tape, &preds, &self.seq.y[1..=self.steps])?;
        Ok(tape.value(l).item())
    }

    fn unroll(
        &self,
        model: &Model,
        tape: &mut Tape,
        bound: &[crate::cell::BoundCell],
        teacher: bool,
    ) -> Result<Vec<Var>> {
        let t = teacher.then_some(self.seq.y.as_slice());
        model.unroll_on_tape(tape, bound, &self.graph, &self.seq.x, &self.seq.y[0], t, self.steps)
    }

    fn with_params(&self, params: &[Tensor]) -> Result<Model> {
        let mut model = self.model.clone();
        let slots = model.tensors_mut();
        if slots.len() != params.len() {
            return Err(Error::contract("parameter list does not match the model"));
        }
        for (slot, p) in slots.into_iter().zip(params) {
            *slot = p.clone();
        }
        Ok(model)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.model.tensors().into_iter().cloned().collect()
    }

    /// Analytic gradient of [`loss`](Self::loss) per parameter tensor.
    pub fn analytic(&self, teacher: bool, fault: Option<OpKind>) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        if let Some(k) = fault {
            tape.inject_fault(k);
        }
        let bound = self.model.bind(&mut tape, true);
        let preds = self.unroll(&self.model, &mut tape, &bound, teacher)?;
        let l = loss_on_tape(&mut tape, &preds, &self.seq.y[1..=self.steps])?;
        tape.backward(l)?;
        Ok(bound
            .iter()
            .flat_map(|b| b.vars())
            .map(|v| {
                tape.grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect())
    }
}

/// Worst relative error of one named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
}

/// Compares analytic and finite-difference gradients of the fixture loss
/// for every parameter tensor, in both teacher-forced and roll-out form.
pub fn check_network(fx: &NetworkFixture, eps: f64, fault: Option<OpKind>) -> Result<Vec<ParamCheck>> {
    let names: Vec<String> = fx.model.named_tensors().into_iter().map(|(n, _)| n).collect();
    let params = fx.params();
    let mut worst = vec![0.0f64; names.len()];
    for teacher in [true, false] {
        let analytic = fx.analytic(teacher, fault)?;
        let numeric = finite_diff_grad(|p| fx.loss(p, teacher), &params, eps)?;
        for (w, (a, n)) in worst.iter_mut().zip(analytic.iter().zip(&numeric)) {
            *w = w.max(max_relative_error(a, n));
        }
    }
    Ok(names
        .into_iter()
        .zip(worst)
        .map(|(name, max_rel_error)| ParamCheck { name, max_rel_error })
        .collect())
}
