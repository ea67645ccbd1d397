//! Vanilla graph-ConvLSTM baselines.
//!
//! Four variants: convolutional peepholes (`CP`) or none (`NP`), crossed
//! with what the output cell state means: per-step position increments
//! (`ΔY`) or positions (`Y`). Both output semantics sit behind the same
//! input-to-output skip framing as the alternating network so that only
//! the recurrence differs.
//!
//! * `ΔY`: `Ŷ_t = Ŷ_{t-1} + C_t + ΔX_t`; teacher forcing replaces `Ŷ_{t-1}`.
//! * `Y`:  `S_t = S_{t-1} + ΔX_t` with `S_0 = Y_0`, and `Ŷ_t = S_t + C_t`;
//!   teacher forcing replaces the output cell's `C_{t-1}` with
//!   `Y_{t-1} − S_{t-1}`.
//!
//! The output layer keeps the running `Ŷ` (or `S`) in its `y` slot; hidden
//! vanilla layers leave `y` untouched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cell::{
    check_finite, check_step_shapes, force_on_tape, gate_base, gate_finish, BoundCell,
    CellParams, CellState, Gate, Propagated, StateVars,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Peephole {
    /// Gates read `Conv(C, W_c·)`.
    #[serde(rename = "cp")]
    Convolutional,
    /// No peephole terms.
    #[serde(rename = "np")]
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OutputSemantics {
    #[serde(rename = "y")]
    Positions,
    #[serde(rename = "dy")]
    Increments,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BaselineSpec {
    pub peephole: Peephole,
    pub output: OutputSemantics,
}

impl BaselineSpec {
    pub const ALL: [BaselineSpec; 4] = [
        BaselineSpec::new(Peephole::Convolutional, OutputSemantics::Increments),
        BaselineSpec::new(Peephole::None, OutputSemantics::Increments),
        BaselineSpec::new(Peephole::Convolutional, OutputSemantics::Positions),
        BaselineSpec::new(Peephole::None, OutputSemantics::Positions),
    ];

    pub const fn new(peephole: Peephole, output: OutputSemantics) -> Self {
        Self { peephole, output }
    }

    pub fn has_peephole(self) -> bool {
        self.peephole == Peephole::Convolutional
    }

    /// CLI name, e.g. `convlstm-np-y`.
    pub fn slug(self) -> &'static str {
        match (self.peephole, self.output) {
            (Peephole::Convolutional, OutputSemantics::Positions) => "convlstm-cp-y",
            (Peephole::None, OutputSemantics::Positions) => "convlstm-np-y",
            (Peephole::Convolutional, OutputSemantics::Increments) => "convlstm-cp-dy",
            (Peephole::None, OutputSemantics::Increments) => "convlstm-np-dy",
        }
    }
}

impl fmt::Display for BaselineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.peephole {
            Peephole::Convolutional => "CP",
            Peephole::None => "NP",
        };
        let o = match self.output {
            OutputSemantics::Positions => "Y",
            OutputSemantics::Increments => "dY",
        };
        write!(f, "ConvLSTM-{p}-{o}")
    }
}

impl FromStr for BaselineSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.slug() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::contract(format!("unknown baseline variant '{s}'")))
    }
}

/// Records one vanilla ConvLSTM step. The input and forget gates peep at
/// `C_{t-1}`, the output gate at `C_t`; peephole-free cells skip those terms.
/// The returned state carries `s.y` through unchanged.
pub fn vanilla_step_on_tape(
    tape: &mut Tape,
    g: &Graph,
    p: &BoundCell,
    s: &StateVars,
    x: Var,
) -> Result<StateVars> {
    let k_x = tape.value(p.input[0]).rows();
    let k_h = tape.value(p.hidden[0]).rows();
    check_step_shapes(g, k_x, k_h, tape.value(x), &[tape.value(s.c), tape.value(s.h)])?;

    let prop_mat = g.propagation();
    let prop = Propagated {
        x: tape.propagate(prop_mat, x)?,
        h: tape.propagate(prop_mat, s.h)?,
    };
    let pc_prev = match p.peephole {
        Some(_) => Some(tape.propagate(prop_mat, s.c)?),
        None => None,
    };

    let base_i = gate_base(tape, p, Gate::Input, &prop)?;
    let peep_i = p.peephole.zip(pc_prev).map(|(w, pc)| (pc, w[0]));
    let pre_i = gate_finish(tape, base_i, peep_i, p.bias[0])?;
    let i = tape.sigmoid(pre_i);
    check_finite(tape, i, "gate i")?;

    let base_f = gate_base(tape, p, Gate::Forget, &prop)?;
    let peep_f = p.peephole.zip(pc_prev).map(|(w, pc)| (pc, w[1]));
    let pre_f = gate_finish(tape, base_f, peep_f, p.bias[1])?;
    let f = tape.sigmoid(pre_f);
    check_finite(tape, f, "gate f")?;

    let force = force_on_tape(tape, p, &prop)?;
    let keep = tape.hadamard(f, s.c)?;
    let write = tape.hadamard(i, force)?;
    let c = tape.add(keep, write)?;
    check_finite(tape, c, "cell state C")?;

    let base_o = gate_base(tape, p, Gate::Output, &prop)?;
    let peep_o = match p.peephole {
        Some(w) => Some((tape.propagate(prop_mat, c)?, w[2])),
        None => None,
    };
    let pre_o = gate_finish(tape, base_o, peep_o, p.bias[3])?;
    let o = tape.sigmoid(pre_o);
    check_finite(tape, o, "gate o")?;

    let tc = tape.tanh(c);
    let h = tape.hadamard(o, tc)?;
    Ok(StateVars { c, h, y: s.y })
}

/// One vanilla step on plain tensors. Only `C` and `H` are updated.
pub fn vanilla_cell_step(g: &Graph, p: &CellParams, s: &CellState, x: &Tensor) -> Result<CellState> {
    let mut tape = Tape::new();
    let bound = p.bind(&mut tape, false);
    let sv = s.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let out = vanilla_step_on_tape(&mut tape, g, &bound, &sv, xv)?;
    Ok(CellState::read(&tape, &out))
}

/// Baseline counterpart of the alternating network step: hidden vanilla
/// layers feed `C` forward, then the output layer applies the variant's
/// output framing. Returns the new states and `Ŷ_t`.
pub(crate) fn baseline_step_on_tape(
    spec: BaselineSpec,
    tape: &mut Tape,
    bound: &[BoundCell],
    g: &Graph,
    states: &[StateVars],
    features: Var,
    delta_x: Var,
    teacher: Option<Var>,
) -> Result<(Vec<StateVars>, Var)> {
    let out_idx = bound.len() - 1;
    let mut next = Vec::with_capacity(bound.len());
    let mut input = features;
    for (l, (p, s)) in bound.iter().zip(states).enumerate() {
        let mut s = *s;
        if l == out_idx {
            if let Some(t) = teacher {
                match spec.output {
                    OutputSemantics::Increments => s.y = t,
                    OutputSemantics::Positions => s.c = tape.sub(t, s.y)?,
                }
            }
        }
        let mut stepped = vanilla_step_on_tape(tape, g, p, &s, input).map_err(|e| at_layer(e, l))?;
        input = stepped.c;
        if l == out_idx {
            let pred = match spec.output {
                OutputSemantics::Increments => {
                    let acc = tape.add(s.y, stepped.c)?;
                    stepped.y = tape.add(acc, delta_x)?;
                    stepped.y
                }
                OutputSemantics::Positions => {
                    stepped.y = tape.add(s.y, delta_x)?;
                    tape.add(stepped.y, stepped.c)?
                }
            };
            next.push(stepped);
            return Ok((next, pred));
        }
        next.push(stepped);
    }
    unreachable!("network has an output layer")
}

pub(crate) fn at_layer(e: Error, layer: usize) -> Error {
    match e {
        Error::NumericFault { location } => Error::NumericFault {
            location: format!("layer {layer}: {location}"),
        },
        other => other,
    }
}
