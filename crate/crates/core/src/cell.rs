//! The alternating ConvLSTM cell on a graph.
//!
//! One step, with `Conv(Z, W) = P·Z·W`:
//!
//! ```text
//! i = σ(Conv(X, W_xi) + Conv(H₋, W_hi) + Conv(Y₋, W_ci) + b_i)
//! f = σ(Conv(X, W_xf) + Conv(H₋, W_hf) + Conv(Y₋, W_cf) + b_f)
//! C = f∘C₋ + i∘tanh(Conv(X, W_xc) + Conv(H₋, W_hc) + b_c)
//! Y = Y₋ + C
//! o = σ(Conv(X, W_xo) + Conv(H₋, W_ho) + Conv(Y, W_co) + b_o)
//! H = o∘tanh(C)
//! ```
//!
//! The output gate reads the updated accumulation `Y`; the input and forget
//! gates read the previous one.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Gate slots shared by the input, hidden and bias parameter arrays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gate {
    Input = 0,
    Forget = 1,
    Cell = 2,
    Output = 3,
}

const GATE_SUFFIX: [&str; 4] = ["i", "f", "c", "o"];
/// Peephole slots: `W_ci`, `W_cf`, `W_co`.
const PEEP_SUFFIX: [&str; 3] = ["i", "f", "o"];

/// Weights and biases of one cell. Shapes never involve the node count.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    /// `W_x{i,f,c,o}`, each `K_x × K_h`.
    pub input: [Tensor; 4],
    /// `W_h{i,f,c,o}`, each `K_h × K_h`.
    pub hidden: [Tensor; 4],
    /// `W_c{i,f,o}`, each `K_h × K_h`. Absent for peephole-free cells.
    pub peephole: Option<[Tensor; 3]>,
    /// `b_{i,f,c,o}`, each of length `K_h`.
    pub bias: [Tensor; 4],
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl CellParams {
    /// Glorot-uniform weights, zero biases except the forget bias at 1.
    pub fn init<R: Rng + ?Sized>(k_x: usize, k_h: usize, peephole: bool, rng: &mut R) -> Self {
        assert!(k_x >= 1 && k_h >= 1, "channel widths must be positive");
        let wx = glorot_bound(k_x, k_h);
        let wh = glorot_bound(k_h, k_h);
        let input = std::array::from_fn(|_| Tensor::uniform(&[k_x, k_h], wx, rng));
        let hidden = std::array::from_fn(|_| Tensor::uniform(&[k_h, k_h], wh, rng));
        let peephole = peephole.then(|| std::array::from_fn(|_| Tensor::uniform(&[k_h, k_h], wh, rng)));
        let mut bias: [Tensor; 4] = std::array::from_fn(|_| Tensor::zeros(&[k_h]));
        bias[Gate::Forget as usize] = Tensor::ones(&[k_h]);
        Self {
            input,
            hidden,
            peephole,
            bias,
        }
    }

    /// Every weight and bias exactly zero.
    pub fn zeros(k_x: usize, k_h: usize, peephole: bool) -> Self {
        Self {
            input: std::array::from_fn(|_| Tensor::zeros(&[k_x, k_h])),
            hidden: std::array::from_fn(|_| Tensor::zeros(&[k_h, k_h])),
            peephole: peephole.then(|| std::array::from_fn(|_| Tensor::zeros(&[k_h, k_h]))),
            bias: std::array::from_fn(|_| Tensor::zeros(&[k_h])),
        }
    }

    pub fn input_channels(&self) -> usize {
        self.input[0].rows()
    }

    pub fn hidden_channels(&self) -> usize {
        self.hidden[0].rows()
    }

    pub fn has_peephole(&self) -> bool {
        self.peephole.is_some()
    }

    /// Tensors in canonical order with their names (`w_xi`, ..., `b_o`).
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(15);
        for (s, t) in GATE_SUFFIX.iter().zip(&self.input) {
            out.push((format!("w_x{s}"), t));
        }
        for (s, t) in GATE_SUFFIX.iter().zip(&self.hidden) {
            out.push((format!("w_h{s}"), t));
        }
        if let Some(p) = &self.peephole {
            for (s, t) in PEEP_SUFFIX.iter().zip(p) {
                out.push((format!("w_c{s}"), t));
            }
        }
        for (s, t) in GATE_SUFFIX.iter().zip(&self.bias) {
            out.push((format!("b_{s}"), t));
        }
        out
    }

    /// Same order as [`named`](Self::named).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(15);
        out.extend(self.input.iter_mut());
        out.extend(self.hidden.iter_mut());
        if let Some(p) = &mut self.peephole {
            out.extend(p.iter_mut());
        }
        out.extend(self.bias.iter_mut());
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Rebuilds params from tensors in [`named`](Self::named) order.
    pub fn from_tensors(mut tensors: Vec<Tensor>, peephole: bool) -> Result<Self> {
        let expected = if peephole { 15 } else { 12 };
        if tensors.len() != expected {
            return Err(Error::Format(format!(
                "cell needs {expected} tensors, got {}",
                tensors.len()
            )));
        }
        let bias: Vec<Tensor> = tensors.split_off(tensors.len() - 4);
        let peep: Option<Vec<Tensor>> = peephole.then(|| tensors.split_off(8));
        let hidden = tensors.split_off(4);
        let to4 = |v: Vec<Tensor>| -> [Tensor; 4] { v.try_into().expect("four tensors") };
        let params = Self {
            input: to4(tensors),
            hidden: to4(hidden),
            peephole: peep.map(|v| v.try_into().expect("three tensors")),
            bias: to4(bias),
        };
        params.validate()?;
        Ok(params)
    }

    fn validate(&self) -> Result<()> {
        let k_x = self.input_channels();
        let k_h = self.hidden_channels();
        let bad = |name: &str, t: &Tensor| {
            Error::Format(format!("tensor {name} has unexpected shape {:?}", t.shape()))
        };
        for (name, t) in self.named() {
            let want: Vec<usize> = match name.as_bytes()[..3] {
                [b'w', b'_', b'x'] => vec![k_x, k_h],
                [b'b', b'_', _] => vec![k_h],
                _ => vec![k_h, k_h],
            };
            if t.shape() != want.as_slice() {
                return Err(bad(&name, t));
            }
        }
        Ok(())
    }

    /// Total number of scalars across all tensors.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Registers every tensor as a tape leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundCell {
        let mut leaf = |t: &Tensor| tape.leaf(t.clone(), requires_grad);
        BoundCell {
            input: self.input.each_ref().map(&mut leaf),
            hidden: self.hidden.each_ref().map(&mut leaf),
            peephole: self.peephole.as_ref().map(|p| p.each_ref().map(&mut leaf)),
            bias: self.bias.each_ref().map(&mut leaf),
        }
    }
}

/// `4·K_x·K_h + 7·K_h² + 4·K_h`.
pub fn param_count(p: &CellParams) -> usize {
    p.param_count()
}

/// [`CellParams`] registered on a tape.
#[derive(Debug, Clone)]
pub struct BoundCell {
    pub input: [Var; 4],
    pub hidden: [Var; 4],
    pub peephole: Option<[Var; 3]>,
    pub bias: [Var; 4],
}

impl BoundCell {
    /// Vars in the same order as [`CellParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = Vec::with_capacity(15);
        out.extend(self.input);
        out.extend(self.hidden);
        if let Some(p) = self.peephole {
            out.extend(p);
        }
        out.extend(self.bias);
        out
    }
}

/// Recurrent state of one layer: cell state `C` (velocities), hidden state
/// `H` and accumulation state `Y` (positions), each `|V| × K_h`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub c: Tensor,
    pub h: Tensor,
    pub y: Tensor,
}

impl CellState {
    pub fn zeros(num_nodes: usize, k_h: usize) -> Self {
        Self {
            c: Tensor::zeros(&[num_nodes, k_h]),
            h: Tensor::zeros(&[num_nodes, k_h]),
            y: Tensor::zeros(&[num_nodes, k_h]),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> StateVars {
        StateVars {
            c: tape.constant(self.c.clone()),
            h: tape.constant(self.h.clone()),
            y: tape.constant(self.y.clone()),
        }
    }

    pub fn read(tape: &Tape, s: &StateVars) -> Self {
        Self {
            c: tape.value(s.c).clone(),
            h: tape.value(s.h).clone(),
            y: tape.value(s.y).clone(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StateVars {
    pub c: Var,
    pub h: Var,
    pub y: Var,
}

/// Gate activations recorded during a step, for inspection.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub input: Var,
    pub forget: Var,
    pub output: Var,
    pub force: Var,
}

/// Propagated operands shared by all gates of one step.
pub(crate) struct Propagated {
    pub x: Var,
    pub h: Var,
}

pub(crate) fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::numeric(what.to_string()))
    }
}

/// `Conv(X, W_x·) + Conv(H₋, W_h·)` for one gate, on already-propagated
/// operands.
pub(crate) fn gate_base(tape: &mut Tape, p: &BoundCell, gate: Gate, prop: &Propagated) -> Result<Var> {
    let g = gate as usize;
    let a = tape.matmul(prop.x, p.input[g])?;
    let b = tape.matmul(prop.h, p.hidden[g])?;
    tape.add(a, b)
}

/// Adds an optional peephole term and the bias.
pub(crate) fn gate_finish(
    tape: &mut Tape,
    base: Var,
    peep: Option<(Var, Var)>,
    bias: Var,
) -> Result<Var> {
    let pre = match peep {
        Some((propagated_state, w)) => {
            let t = tape.matmul(propagated_state, w)?;
            tape.add(base, t)?
        }
        None => base,
    };
    tape.add_bias(pre, bias)
}

/// `tanh(Conv(X, W_xc) + Conv(H₋, W_hc) + b_c)`.
pub(crate) fn force_on_tape(tape: &mut Tape, p: &BoundCell, prop: &Propagated) -> Result<Var> {
    let base = gate_base(tape, p, Gate::Cell, prop)?;
    let pre = gate_finish(tape, base, None, p.bias[Gate::Cell as usize])?;
    Ok(tape.tanh(pre))
}

pub(crate) fn check_step_shapes(
    g: &Graph,
    k_x: usize,
    k_h: usize,
    x: &Tensor,
    states: &[&Tensor],
) -> Result<()> {
    let n = g.num_nodes();
    if x.shape() != [n, k_x] {
        return Err(Error::shape("cell_step", x.shape(), &[n, k_x]));
    }
    for s in states {
        if s.shape() != [n, k_h] {
            return Err(Error::shape("cell_step", s.shape(), &[n, k_h]));
        }
    }
    Ok(())
}

/// Result of one recorded step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub state: StateVars,
    pub gates: GateVars,
}

/// Records one alternating step. `extra`, when given, is added to the
/// accumulation update (`Y = Y₋ + C + extra`) before the output gate reads
/// it; the network uses it for skip connections.
pub fn alt_step_on_tape(
    tape: &mut Tape,
    g: &Graph,
    p: &BoundCell,
    s: &StateVars,
    x: Var,
    extra: Option<Var>,
) -> Result<StepVars> {
    let peep = p
        .peephole
        .ok_or_else(|| Error::contract("alternating cell needs peephole weights"))?;
    let k_x = tape.value(p.input[0]).rows();
    let k_h = tape.value(p.hidden[0]).rows();
    check_step_shapes(
        g,
        k_x,
        k_h,
        tape.value(x),
        &[tape.value(s.c), tape.value(s.h), tape.value(s.y)],
    )?;

    let prop_mat = g.propagation();
    let prop = Propagated {
        x: tape.propagate(prop_mat, x)?,
        h: tape.propagate(prop_mat, s.h)?,
    };
    let py_prev = tape.propagate(prop_mat, s.y)?;

    let base_i = gate_base(tape, p, Gate::Input, &prop)?;
    let pre_i = gate_finish(tape, base_i, Some((py_prev, peep[0])), p.bias[0])?;
    let i = tape.sigmoid(pre_i);
    check_finite(tape, i, "gate i")?;

    let base_f = gate_base(tape, p, Gate::Forget, &prop)?;
    let pre_f = gate_finish(tape, base_f, Some((py_prev, peep[1])), p.bias[1])?;
    let f = tape.sigmoid(pre_f);
    check_finite(tape, f, "gate f")?;

    let force = force_on_tape(tape, p, &prop)?;
    check_finite(tape, force, "force")?;

    let keep = tape.hadamard(f, s.c)?;
    let write = tape.hadamard(i, force)?;
    let c = tape.add(keep, write)?;
    check_finite(tape, c, "cell state C")?;

    let mut y = tape.add(s.y, c)?;
    if let Some(e) = extra {
        y = tape.add(y, e)?;
    }
    check_finite(tape, y, "accumulation Y")?;

    let py = tape.propagate(prop_mat, y)?;
    let base_o = gate_base(tape, p, Gate::Output, &prop)?;
    let pre_o = gate_finish(tape, base_o, Some((py, peep[2])), p.bias[3])?;
    let o = tape.sigmoid(pre_o);
    check_finite(tape, o, "gate o")?;

    let tc = tape.tanh(c);
    let h = tape.hadamard(o, tc)?;
    check_finite(tape, h, "hidden state H")?;

    Ok(StepVars {
        state: StateVars { c, h, y },
        gates: GateVars {
            input: i,
            forget: f,
            output: o,
            force,
        },
    })
}

/// Fresh params with Glorot weights drawn from `seed` and an all-zero state
/// sized for `g`.
pub fn cell_init(g: &Graph, k_x: usize, k_h: usize, seed: u64) -> Result<(CellParams, CellState)> {
    if k_x == 0 || k_h == 0 {
        return Err(Error::contract("channel widths must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((
        CellParams::init(k_x, k_h, true, &mut rng),
        CellState::zeros(g.num_nodes(), k_h),
    ))
}

/// One step with gate values, outside any training tape.
#[derive(Debug, Clone)]
pub struct CellTrace {
    pub state: CellState,
    pub input_gate: Tensor,
    pub forget_gate: Tensor,
    pub output_gate: Tensor,
    pub force: Tensor,
}

pub fn cell_step_traced(g: &Graph, p: &CellParams, s: &CellState, x: &Tensor) -> Result<CellTrace> {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let sv = s.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = alt_step_on_tape(&mut tape, g, &bound, &sv, xv, None)?;
    Ok(CellTrace {
        state: CellState::read(&tape, &out.state),
        input_gate: tape.value(out.gates.input).clone(),
        forget_gate: tape.value(out.gates.forget).clone(),
        output_gate: tape.value(out.gates.output).clone(),
        force: tape.value(out.gates.force).clone(),
    })
}

pub fn cell_step(g: &Graph, p: &CellParams, s: &CellState, x: &Tensor) -> Result<CellState> {
    cell_step_traced(g, p, s, x).map(|t| t.state)
}

/// The force term `tanh(Conv(X, W_xc) + Conv(H₋, W_hc) + b_c)` that
/// [`cell_step`] feeds through the input gate.
pub fn force_tensor(g: &Graph, p: &CellParams, s: &CellState, x: &Tensor) -> Result<Tensor> {
    check_step_shapes(
        g,
        p.input_channels(),
        p.hidden_channels(),
        x,
        &[&s.c, &s.h, &s.y],
    )?;
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let sv = s.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let prop = Propagated {
        x: tape.propagate(g.propagation(), xv)?,
        h: tape.propagate(g.propagation(), sv.h)?,
    };
    let f = force_on_tape(&mut tape, &bound, &prop)?;
    Ok(tape.value(f).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::make_grid_mesh;

    fn fixture() -> Graph {
        make_grid_mesh(3, 2, 0.1).unwrap().1
    }

    fn random_state(n: usize, k: usize, rng: &mut ChaCha8Rng) -> CellState {
        CellState {
            c: Tensor::uniform(&[n, k], 0.5, rng),
            h: Tensor::uniform(&[n, k], 0.5, rng),
            y: Tensor::uniform(&[n, k], 0.5, rng),
        }
    }

    #[test]
    fn init_is_zero_state_and_deterministic() {
        let g = fixture();
        let (p1, s) = cell_init(&g, 3, 4, 9).unwrap();
        let (p2, _) = cell_init(&g, 3, 4, 9).unwrap();
        assert_eq!(p1, p2);
        for t in [&s.c, &s.h, &s.y] {
            assert_eq!(t.max_abs(), 0.0);
        }
        assert_eq!(p1.bias[1], Tensor::ones(&[4]));
        assert_eq!(p1.bias[0].max_abs(), 0.0);
        assert!(cell_init(&g, 0, 4, 9).is_err());
    }

    #[test]
    fn parameter_counts() {
        let g = fixture();
        assert_eq!(param_count(&cell_init(&g, 3, 4, 0).unwrap().0), 176);
        assert_eq!(param_count(&cell_init(&g, 9, 8, 0).unwrap().0), 768);
        let big = make_grid_mesh(83, 83, 0.01).unwrap().1;
        assert_eq!(
            param_count(&cell_init(&big, 9, 8, 0).unwrap().0),
            param_count(&cell_init(&g, 9, 8, 0).unwrap().0)
        );
    }

    #[test]
    fn all_zero_step_is_zero() {
        let g = fixture();
        let p = CellParams::zeros(3, 4, true);
        let s = CellState::zeros(6, 4);
        let t = cell_step_traced(&g, &p, &s, &Tensor::zeros(&[6, 3])).unwrap();
        assert_eq!(t.state, s);
        assert!(t.input_gate.data().iter().all(|&v| v == 0.5));
        assert_eq!(t.force.max_abs(), 0.0);
    }

    #[test]
    fn zero_cell_state_means_c_is_gated_force() {
        let g = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, _) = cell_init(&g, 3, 4, 2).unwrap();
        let mut s = random_state(6, 4, &mut rng);
        s.c = Tensor::zeros(&[6, 4]);
        let x = Tensor::uniform(&[6, 3], 1.0, &mut rng);
        let t = cell_step_traced(&g, &p, &s, &x).unwrap();
        assert_eq!(t.state.c, t.input_gate.hadamard(&t.force).unwrap());
    }

    #[test]
    fn recomposition_is_bit_exact() {
        let g = fixture();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (p, _) = cell_init(&g, 3, 4, 4).unwrap();
        let s = random_state(6, 4, &mut rng);
        let x = Tensor::uniform(&[6, 3], 1.0, &mut rng);
        let t = cell_step_traced(&g, &p, &s, &x).unwrap();
        let force = force_tensor(&g, &p, &s, &x).unwrap();
        assert_eq!(force, t.force);
        assert!(force.data().iter().all(|v| v.abs() < 1.0));
        let c = t
            .forget_gate
            .hadamard(&s.c)
            .unwrap()
            .add(&t.input_gate.hadamard(&force).unwrap())
            .unwrap();
        assert_eq!(c, t.state.c);
        assert_eq!(t.state.y, s.y.add(&t.state.c).unwrap());
        assert!(t.state.h.data().iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn shape_errors() {
        let g = fixture();
        let (p, s) = cell_init(&g, 3, 4, 0).unwrap();
        assert!(matches!(
            cell_step(&g, &p, &s, &Tensor::zeros(&[5, 3])),
            Err(Error::Shape { .. })
        ));
        assert!(cell_step(&g, &p, &s, &Tensor::zeros(&[6, 2])).is_err());
        let np = CellParams::zeros(3, 4, false);
        assert!(cell_step(&g, &np, &s, &Tensor::zeros(&[6, 3])).is_err());
    }

    #[test]
    fn nan_is_reported_with_gate_name() {
        let g = fixture();
        let (mut p, s) = cell_init(&g, 3, 4, 0).unwrap();
        p.bias[0].data_mut()[0] = f64::NAN;
        let err = cell_step(&g, &p, &s, &Tensor::zeros(&[6, 3])).unwrap_err();
        assert!(err.to_string().contains("gate i"), "{err}");
    }

    #[test]
    fn tensors_round_trip_through_named_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for peep in [true, false] {
            let p = CellParams::init(3, 5, peep, &mut rng);
            let flat: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
            assert_eq!(CellParams::from_tensors(flat, peep).unwrap(), p);
        }
        let p = CellParams::init(3, 5, true, &mut rng);
        let mut flat: Vec<Tensor> = p.tensors().into_iter().cloned().collect();
        flat.swap(0, 4);
        assert!(CellParams::from_tensors(flat, true).is_err());
    }
}
