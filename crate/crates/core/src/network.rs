//! Stacked encoder-decoder network of graph recurrent cells.
//!
//! Layer `l` consumes the cell state `C` of layer `l−1`; layer 0 consumes
//! the assembled features `[X_t, X_t − X_{t−1}, Y_0 − X_0]`. Accumulation
//! skips add `C^{l−m}` into `Y^l`, and the output layer always receives the
//! driver motion `ΔX_t` in its accumulation update, so its `Y` is the
//! predicted position `Ŷ_t`.

use std::fmt;
use std::str::FromStr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{at_layer, baseline_step_on_tape, BaselineSpec};
use crate::cell::{alt_step_on_tape, BoundCell, CellParams, CellState, StateVars};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Accumulation skip `Y^to += C^from`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skip {
    pub to: usize,
    pub from: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    /// Hidden layer widths.
    pub channel_schedule: Vec<usize>,
    pub input_channels: usize,
    pub output_channels: usize,
    pub skips: Vec<Skip>,
}

impl NetSpec {
    /// Checked constructor. The schedule must rise then fall unless `force`
    /// is set; skips must join non-adjacent hidden layers of equal width.
    pub fn new(channel_schedule: Vec<usize>, skips: Vec<Skip>, force: bool) -> Result<Self> {
        let spec = Self {
            channel_schedule,
            input_channels: 9,
            output_channels: 3,
            skips,
        };
        spec.validate(force)?;
        Ok(spec)
    }

    /// `8, 16, 32, 16, 8` with one skip between the two 8-channel layers.
    pub fn desk() -> Self {
        Self::new(vec![8, 16, 32, 16, 8], vec![Skip { to: 4, from: 0 }], false)
            .expect("valid default")
    }

    /// `32, 64, 128, 64, 32` with the matching outer skip, for large meshes.
    pub fn full_scale() -> Self {
        Self::new(vec![32, 64, 128, 64, 32], vec![Skip { to: 4, from: 0 }], false)
            .expect("valid default")
    }

    /// Schedule without skips.
    pub fn plain(channel_schedule: Vec<usize>) -> Result<Self> {
        Self::new(channel_schedule, vec![], false)
    }

    pub fn validate(&self, force: bool) -> Result<()> {
        let s = &self.channel_schedule;
        if s.is_empty() || s.contains(&0) {
            return Err(Error::contract("channel schedule must be non-empty and positive"));
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::contract("input/output channels must be positive"));
        }
        if !force && !is_rise_then_fall(s) {
            return Err(Error::contract(format!(
                "channel schedule {s:?} is not increasing-then-decreasing"
            )));
        }
        for sk in &self.skips {
            if sk.to >= s.len() || sk.from >= sk.to || sk.to - sk.from < 2 {
                return Err(Error::contract(format!(
                    "skip {} <- {} must join non-adjacent hidden layers",
                    sk.to, sk.from
                )));
            }
            if s[sk.to] != s[sk.from] {
                return Err(Error::contract(format!(
                    "skip {} <- {} joins widths {} and {}",
                    sk.to, sk.from, s[sk.to], s[sk.from]
                )));
            }
        }
        Ok(())
    }

    pub fn num_layers(&self) -> usize {
        self.channel_schedule.len() + 1
    }

    pub fn output_layer(&self) -> usize {
        self.channel_schedule.len()
    }

    /// `(K_x, K_h)` per layer, output layer last.
    pub fn layer_widths(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_layers());
        let mut k_x = self.input_channels;
        for &k_h in self.channel_schedule.iter().chain([&self.output_channels]) {
            out.push((k_x, k_h));
            k_x = k_h;
        }
        out
    }
}

fn is_rise_then_fall(s: &[usize]) -> bool {
    let peak = s.iter().position(|&w| w == *s.iter().max().unwrap()).unwrap();
    s[..=peak].windows(2).all(|w| w[0] <= w[1]) && s[peak..].windows(2).all(|w| w[0] >= w[1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Alt,
    ConvLstm(BaselineSpec),
}

impl ModelKind {
    pub fn has_peephole(self) -> bool {
        match self {
            ModelKind::Alt => true,
            ModelKind::ConvLstm(b) => b.has_peephole(),
        }
    }

    pub fn slug(self) -> &'static str {
        match self {
            ModelKind::Alt => "alt",
            ModelKind::ConvLstm(b) => b.slug(),
        }
    }

    pub fn all() -> [ModelKind; 5] {
        let b = BaselineSpec::ALL;
        [
            ModelKind::Alt,
            ModelKind::ConvLstm(b[0]),
            ModelKind::ConvLstm(b[1]),
            ModelKind::ConvLstm(b[2]),
            ModelKind::ConvLstm(b[3]),
        ]
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Alt => write!(f, "Alt-ConvLSTM"),
            ModelKind::ConvLstm(b) => b.fmt(f),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("alt") || s.eq_ignore_ascii_case("alt-convlstm") {
            Ok(ModelKind::Alt)
        } else {
            s.parse().map(ModelKind::ConvLstm)
        }
    }
}

/// Network architecture and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: NetSpec,
    kind: ModelKind,
    layers: Vec<CellParams>,
}

impl Model {
    pub fn new(spec: NetSpec, kind: ModelKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = spec
            .layer_widths()
            .into_iter()
            .map(|(k_x, k_h)| CellParams::init(k_x, k_h, kind.has_peephole(), &mut rng))
            .collect();
        Self { spec, kind, layers }
    }

    /// Multiplies every weight and bias by `gain`. A small gain starts
    /// training near rigid following of the driver.
    pub fn scaled(mut self, gain: f64) -> Self {
        for t in self.tensors_mut() {
            *t = t.scale(gain);
        }
        self
    }

    /// Every weight and bias zero.
    pub fn zeros(spec: NetSpec, kind: ModelKind) -> Self {
        let layers = spec
            .layer_widths()
            .into_iter()
            .map(|(k_x, k_h)| CellParams::zeros(k_x, k_h, kind.has_peephole()))
            .collect();
        Self { spec, kind, layers }
    }

    /// Assembles a model from loaded parameters, checking them against the
    /// spec.
    pub fn from_parts(spec: NetSpec, kind: ModelKind, layers: Vec<CellParams>) -> Result<Self> {
        spec.validate(true)?;
        let widths = spec.layer_widths();
        if layers.len() != widths.len() {
            return Err(Error::Format(format!(
                "spec has {} layers, got {}",
                widths.len(),
                layers.len()
            )));
        }
        for (l, (p, (k_x, k_h))) in layers.iter().zip(widths).enumerate() {
            if p.input_channels() != k_x
                || p.hidden_channels() != k_h
                || p.has_peephole() != kind.has_peephole()
            {
                return Err(Error::Format(format!("layer {l} does not match the spec")));
            }
        }
        Ok(Self { spec, kind, layers })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn layers(&self) -> &[CellParams] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CellParams] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(CellParams::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(CellParams::is_finite)
    }

    /// All tensors in layer order, each layer in [`CellParams::named`] order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.tensors()).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, p)| {
                p.named()
                    .into_iter()
                    .map(move |(n, t)| (format!("layer{l}.{n}"), t))
            })
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<BoundCell> {
        self.layers.iter().map(|p| p.bind(tape, requires_grad)).collect()
    }

    /// Records one network step and returns the new states and `Ŷ_t`.
    ///
    /// When `teacher` is given it replaces the stored previous prediction
    /// of the output layer before the update; hidden layers are never
    /// overwritten.
    #[allow(clippy::too_many_arguments)]
    pub fn step_on_tape(
        &self,
        tape: &mut Tape,
        bound: &[BoundCell],
        g: &Graph,
        states: &[StateVars],
        features: Var,
        delta_x: Var,
        teacher: Option<Var>,
    ) -> Result<(Vec<StateVars>, Var)> {
        if states.len() != self.layers.len() || bound.len() != self.layers.len() {
            return Err(Error::contract(format!(
                "expected {} layer states, got {}",
                self.layers.len(),
                states.len()
            )));
        }
        match self.kind {
            ModelKind::Alt => self.alt_step(tape, bound, g, states, features, delta_x, teacher),
            ModelKind::ConvLstm(spec) => {
                baseline_step_on_tape(spec, tape, bound, g, states, features, delta_x, teacher)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn alt_step(
        &self,
        tape: &mut Tape,
        bound: &[BoundCell],
        g: &Graph,
        states: &[StateVars],
        features: Var,
        delta_x: Var,
        teacher: Option<Var>,
    ) -> Result<(Vec<StateVars>, Var)> {
        let out_idx = self.spec.output_layer();
        let mut next: Vec<StateVars> = Vec::with_capacity(states.len());
        let mut input = features;
        for (l, (p, s)) in bound.iter().zip(states).enumerate() {
            let mut s = *s;
            let extra = if l == out_idx {
                if let Some(t) = teacher {
                    s.y = t;
                }
                Some(delta_x)
            } else {
                self.spec
                    .skips
                    .iter()
                    .find(|sk| sk.to == l)
                    .map(|sk| next[sk.from].c)
            };
            let stepped = alt_step_on_tape(tape, g, p, &s, input, extra).map_err(|e| at_layer(e, l))?;
            input = stepped.state.c;
            next.push(stepped.state);
        }
        let pred = next[out_idx].y;
        Ok((next, pred))
    }

    /// Records `steps` network steps over a trajectory on one tape. With
    /// `teacher`, frame `Y_{t−1}` replaces the previous prediction at step
    /// `t`. Returns the prediction vars `Ŷ_1 ..= Ŷ_steps`.
    pub fn unroll_on_tape(
        &self,
        tape: &mut Tape,
        bound: &[BoundCell],
        g: &Graph,
        drivers: &[Tensor],
        y0: &Tensor,
        teacher: Option<&[Tensor]>,
        steps: usize,
    ) -> Result<Vec<Var>> {
        check_sequence(drivers, teacher, steps)?;
        let ctx = Context::new(&drivers[0], y0)?;
        let mut states: Vec<StateVars> = init_states(self, g, y0)?
            .iter()
            .map(|s| s.bind(tape))
            .collect();
        let mut preds = Vec::with_capacity(steps);
        for t in 1..=steps {
            let features = tape.constant(assemble_input(&drivers[t], &drivers[t - 1], &ctx.x0, &ctx.y0)?);
            let dx = tape.constant(drivers[t].sub(&drivers[t - 1])?);
            let tv = teacher.map(|ys| tape.constant(ys[t - 1].clone()));
            let (next, pred) = self.step_on_tape(tape, bound, g, &states, features, dx, tv)?;
            states = next;
            preds.push(pred);
        }
        Ok(preds)
    }
}

/// Reference frame of a sequence: driver and target at frame 0.
#[derive(Debug, Clone)]
pub struct Context {
    pub x0: Tensor,
    pub y0: Tensor,
}

impl Context {
    pub fn new(x0: &Tensor, y0: &Tensor) -> Result<Self> {
        if x0.shape() != y0.shape() || x0.dims2()?.1 != 3 {
            return Err(Error::shape("context", x0.shape(), y0.shape()));
        }
        Ok(Self {
            x0: x0.clone(),
            y0: y0.clone(),
        })
    }
}

/// `[X_t, X_t − X_{t−1}, Y_0 − X_0]`, `|V| × 9`.
pub fn assemble_input(x_t: &Tensor, x_prev: &Tensor, x0: &Tensor, y0: &Tensor) -> Result<Tensor> {
    for t in [x_prev, x0, y0] {
        if t.shape() != x_t.shape() {
            return Err(Error::shape("assemble_input", x_t.shape(), t.shape()));
        }
    }
    if x_t.dims2()?.1 != 3 {
        return Err(Error::shape("assemble_input", x_t.shape(), &[x_t.rows(), 3]));
    }
    Tensor::concat_cols(&[x_t, &x_t.sub(x_prev)?, &y0.sub(x0)?])
}

/// All-zero layer states, except the output layer whose accumulation holds
/// `Y_0`.
pub fn init_states(model: &Model, g: &Graph, y0: &Tensor) -> Result<Vec<CellState>> {
    let n = g.num_nodes();
    if y0.shape() != [n, model.spec.output_channels] {
        return Err(Error::shape("init_states", y0.shape(), &[n, model.spec.output_channels]));
    }
    let mut states: Vec<CellState> = model
        .spec
        .layer_widths()
        .into_iter()
        .map(|(_, k_h)| CellState::zeros(n, k_h))
        .collect();
    states.last_mut().expect("output layer").y = y0.clone();
    Ok(states)
}

/// One network step on plain tensors.
pub fn network_step(
    model: &Model,
    g: &Graph,
    states: &[CellState],
    x_t: &Tensor,
    x_prev: &Tensor,
    ctx: &Context,
    teacher_prev: Option<&Tensor>,
) -> Result<(Vec<CellState>, Tensor)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let sv: Vec<StateVars> = states.iter().map(|s| s.bind(&mut tape)).collect();
    let features = tape.constant(assemble_input(x_t, x_prev, &ctx.x0, &ctx.y0)?);
    let dx = tape.constant(x_t.sub(x_prev)?);
    let tv = teacher_prev.map(|t| tape.constant(t.clone()));
    let (next, pred) = model.step_on_tape(&mut tape, &bound, g, &sv, features, dx, tv)?;
    Ok((
        next.iter().map(|s| CellState::read(&tape, s)).collect(),
        tape.value(pred).clone(),
    ))
}

/// How previous positions are supplied during prediction.
#[derive(Debug, Clone, Copy)]
pub enum PredictMode<'a> {
    /// Ground-truth frames `Y_0, Y_1, ...`; frame `t−1` is fed at step `t`.
    SingleStep(&'a [Tensor]),
    /// Predictions are fed back; only `Y_0` is read.
    RollOut,
}

fn check_sequence(drivers: &[Tensor], teacher: Option<&[Tensor]>, steps: usize) -> Result<()> {
    if drivers.len() < steps + 1 {
        return Err(Error::contract(format!(
            "{steps} steps need {} driver frames, got {}",
            steps + 1,
            drivers.len()
        )));
    }
    if let Some(ys) = teacher {
        if ys.len() < steps {
            return Err(Error::contract(format!(
                "single-step prediction over {steps} steps needs {steps} ground-truth frames, got {}",
                ys.len()
            )));
        }
    }
    Ok(())
}

/// Predicts `Ŷ_1 ..= Ŷ_T` for drivers `X_0 ..= X_T`.
pub fn predict_sequence(
    model: &Model,
    g: &Graph,
    drivers: &[Tensor],
    y0: &Tensor,
    mode: PredictMode<'_>,
) -> Result<Vec<Tensor>> {
    let steps = drivers.len().saturating_sub(1);
    let teacher = match mode {
        PredictMode::SingleStep(ys) => Some(ys),
        PredictMode::RollOut => None,
    };
    check_sequence(drivers, teacher, steps)?;
    if steps == 0 {
        return Ok(Vec::new());
    }
    let ctx = Context::new(&drivers[0], y0)?;
    let mut states = init_states(model, g, y0)?;
    let mut preds = Vec::with_capacity(steps);
    for t in 1..=steps {
        let tp = teacher.map(|ys| &ys[t - 1]);
        let (next, pred) = network_step(model, g, &states, &drivers[t], &drivers[t - 1], &ctx, tp)?;
        states = next;
        preds.push(pred);
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::make_grid_mesh;

    #[test]
    fn scaling_the_initial_parameters() {
        let m = Model::new(NetSpec::desk(), ModelKind::Alt, 3);
        assert_eq!(m.clone().scaled(1.0), m);
        assert_eq!(m.scaled(0.0), Model::zeros(NetSpec::desk(), ModelKind::Alt));
    }

    #[test]
    fn schedule_validation() {
        assert!(NetSpec::plain(vec![8, 16, 32, 16, 8]).is_ok());
        assert!(NetSpec::plain(vec![4]).is_ok());
        assert!(NetSpec::plain(vec![16, 8, 16]).is_err());
        assert!(NetSpec::new(vec![16, 8, 16], vec![], true).is_ok());
        assert!(NetSpec::plain(vec![]).is_err());
        // adjacent or width-mismatched skips
        assert!(NetSpec::new(vec![8, 8], vec![Skip { to: 1, from: 0 }], false).is_err());
        assert!(NetSpec::new(vec![8, 16, 32], vec![Skip { to: 2, from: 0 }], false).is_err());
        assert!(NetSpec::new(vec![8, 16, 8], vec![Skip { to: 2, from: 0 }], false).is_ok());
    }

    #[test]
    fn desk_counts() {
        let spec = NetSpec::desk();
        let widths = spec.layer_widths();
        assert_eq!(widths, vec![(9, 8), (8, 16), (16, 32), (32, 16), (16, 8), (8, 3)]);
        let formula: usize = widths
            .iter()
            .map(|&(kx, kh)| 4 * kx * kh + 7 * kh * kh + 4 * kh)
            .sum();
        assert_eq!(Model::new(spec, ModelKind::Alt, 0).param_count(), formula);
    }

    #[test]
    fn model_kind_names() {
        for k in ModelKind::all() {
            assert_eq!(k.slug().parse::<ModelKind>().unwrap(), k);
        }
        assert_eq!(ModelKind::Alt.to_string(), "Alt-ConvLSTM");
    }

    #[test]
    fn assemble_blocks() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let y0 = x.scale(2.0);
        let xp = x.clone();
        let f = assemble_input(&x, &xp, &x, &x).unwrap();
        assert_eq!(f.slice_cols(0, 3).unwrap(), x);
        assert_eq!(f.slice_cols(3, 3).unwrap().max_abs(), 0.0);
        assert_eq!(f.slice_cols(6, 3).unwrap().max_abs(), 0.0);
        let f = assemble_input(&x, &x.scale(0.5), &x.scale(0.25), &y0).unwrap();
        assert_eq!(f.slice_cols(3, 3).unwrap(), x.sub(&x.scale(0.5)).unwrap());
        assert_eq!(f.slice_cols(6, 3).unwrap(), y0.sub(&x.scale(0.25)).unwrap());
        assert!(assemble_input(&x, &Tensor::zeros(&[3, 3]), &x, &x).is_err());
    }

    #[test]
    fn init_states_layout() {
        let g = make_grid_mesh(3, 2, 0.1).unwrap().1;
        let model = Model::new(NetSpec::desk(), ModelKind::Alt, 1);
        let y0 = Tensor::full(&[6, 3], 0.25);
        let s = init_states(&model, &g, &y0).unwrap();
        assert_eq!(s.len(), 6);
        for l in &s[..5] {
            assert_eq!(l.c.max_abs() + l.h.max_abs() + l.y.max_abs(), 0.0);
        }
        assert_eq!(s[5].y, y0);
        assert_eq!(s[5].c.max_abs(), 0.0);
        assert!(init_states(&model, &g, &Tensor::zeros(&[5, 3])).is_err());
    }

    #[test]
    fn empty_and_mismatched_sequences() {
        let g = make_grid_mesh(3, 2, 0.1).unwrap().1;
        let model = Model::new(NetSpec::plain(vec![4]).unwrap(), ModelKind::Alt, 1);
        let x0 = Tensor::zeros(&[6, 3]);
        let out = predict_sequence(&model, &g, std::slice::from_ref(&x0), &x0, PredictMode::RollOut).unwrap();
        assert!(out.is_empty());
        let drivers = vec![x0.clone(); 4];
        let short = vec![x0.clone(); 2];
        assert!(predict_sequence(&model, &g, &drivers, &x0, PredictMode::SingleStep(&short)).is_err());
    }
}
