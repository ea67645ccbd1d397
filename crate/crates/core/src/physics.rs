//! Explicit-Euler mass-spring generator for ground-truth trajectories.
//!
//! A rigid driver surface `X` follows a scripted motion. A tissue sheet `Y`
//! with the same topology sits `tissue_offset` above it, held by zero-rest
//! attachment springs to where the driver carries each tissue node's rest
//! position, and by internal springs along the mesh edges. Each output frame
//! is `substeps` Euler steps of
//!
//! ```text
//! v' = v + h·M⁻¹(f_ex + f_in(y, v))
//! y' = y + h·v
//! ```
//!
//! where the position update reads the velocity from before the step.

use std::f64::consts::TAU;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{decode, encode, read_all, write_atomic};
use crate::graph::{Graph, MeshSpec};
use crate::tensor::Tensor;

/// Speed above which the integrator is considered to have blown up, m/s.
pub const DIVERGENCE_SPEED: f64 = 1e3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    /// Output frame rate, Hz.
    pub fps: f64,
    /// Euler steps per output frame.
    pub substeps: usize,
    /// Per-node mass, kg.
    pub mass: f64,
    /// Internal spring stiffness, N/m.
    pub stiffness: f64,
    /// Internal damping along each spring on relative velocity, N·s/m.
    pub damping: f64,
    /// Tissue-to-driver attachment stiffness, N/m.
    pub attach_stiffness: f64,
    /// Attachment damping on velocity relative to the driver, N·s/m.
    pub attach_damping: f64,
    /// Height of the tissue rest pose above the driver, m.
    pub tissue_offset: f64,
    /// Relative spread of the per-node mass and per-spring stiffness
    /// perturbation; 0 gives a uniform material.
    pub perturbation: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            fps: 60.0,
            substeps: 8,
            mass: 0.01,
            stiffness: 20.0,
            damping: 0.1,
            attach_stiffness: 6.25,
            attach_damping: 0.05,
            tissue_offset: 0.01,
            perturbation: 0.0,
        }
    }
}

impl SimConfig {
    /// Physics step size `h`, seconds.
    pub fn step_size(&self) -> f64 {
        1.0 / (self.fps * self.substeps as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("fps", self.fps),
            ("mass", self.mass),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be positive, got {v}")));
            }
        }
        if self.substeps == 0 {
            return Err(Error::contract("substeps must be at least 1"));
        }
        let nonneg = [
            ("stiffness", self.stiffness),
            ("damping", self.damping),
            ("attach_stiffness", self.attach_stiffness),
            ("attach_damping", self.attach_damping),
            ("tissue_offset", self.tissue_offset),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(0.0..0.5).contains(&self.perturbation) {
            return Err(Error::contract(format!(
                "perturbation must lie in [0, 0.5), got {}",
                self.perturbation
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spring {
    pub a: usize,
    pub b: usize,
    pub stiffness: f64,
    pub rest: f64,
    pub damping: f64,
}

/// Masses, internal springs and per-node attachment springs.
#[derive(Debug, Clone, PartialEq)]
pub struct SpringSystem {
    pub masses: Vec<f64>,
    pub springs: Vec<Spring>,
    pub attach_stiffness: Vec<f64>,
    pub attach_damping: Vec<f64>,
}

impl SpringSystem {
    pub fn new(
        masses: Vec<f64>,
        springs: Vec<Spring>,
        attach_stiffness: Vec<f64>,
        attach_damping: Vec<f64>,
    ) -> Result<Self> {
        let n = masses.len();
        if n == 0 || attach_stiffness.len() != n || attach_damping.len() != n {
            return Err(Error::contract("per-node arrays must be non-empty and equally long"));
        }
        if masses.iter().any(|&m| !(m > 0.0 && m.is_finite())) {
            return Err(Error::contract("masses must be positive"));
        }
        for s in &springs {
            if s.a >= n || s.b >= n {
                return Err(Error::Index {
                    index: s.a.max(s.b),
                    bound: n,
                });
            }
            if s.a == s.b || s.stiffness < 0.0 || s.rest < 0.0 || s.damping < 0.0 {
                return Err(Error::contract(format!("invalid spring {}-{}", s.a, s.b)));
            }
        }
        Ok(Self {
            masses,
            springs,
            attach_stiffness,
            attach_damping,
        })
    }

    /// The tissue system for `mesh`. With a nonzero `cfg.perturbation`,
    /// masses and stiffnesses are scaled by factors drawn from `seed`.
    pub fn from_mesh(cfg: &SimConfig, mesh: &MeshSpec, graph: &Graph, seed: u64) -> Result<Self> {
        cfg.validate()?;
        mesh.validate(graph)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spread = cfg.perturbation;
        let mut jitter = |base: f64| {
            if spread > 0.0 {
                base * (1.0 + rng.gen_range(-spread..=spread))
            } else {
                base
            }
        };
        let n = graph.num_nodes();
        let masses = (0..n).map(|_| jitter(cfg.mass)).collect();
        let springs = graph
            .edges()
            .iter()
            .map(|&[a, b]| Spring {
                a,
                b,
                stiffness: jitter(cfg.stiffness),
                rest: mesh.rest_length([a, b]),
                damping: cfg.damping,
            })
            .collect();
        let attach = (0..n).map(|_| jitter(cfg.attach_stiffness)).collect();
        Self::new(masses, springs, attach, vec![cfg.attach_damping; n])
    }

    pub fn num_nodes(&self) -> usize {
        self.masses.len()
    }

    /// Checks `h < 2·sqrt(m/k)` per node, with `k` the summed stiffness of
    /// every spring touching it, and the matching bound `h < 2·m/c` for
    /// damping. Explicit Euler also amplifies any spring mode whose damping
    /// is below `h·k`, so that is rejected too.
    pub fn check_stability(&self, h: f64) -> Result<()> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::contract(format!("step size must be positive, got {h}")));
        }
        for s in &self.springs {
            if s.damping < h * s.stiffness {
                return Err(Error::contract(format!(
                    "spring {}-{} needs damping >= {:.3e} N·s/m at step {h} s",
                    s.a,
                    s.b,
                    h * s.stiffness
                )));
            }
        }
        for (v, (&k, &c)) in self.attach_stiffness.iter().zip(&self.attach_damping).enumerate() {
            if c < h * k {
                return Err(Error::contract(format!(
                    "attachment of node {v} needs damping >= {:.3e} N·s/m at step {h} s",
                    h * k
                )));
            }
        }
        let mut k = self.attach_stiffness.clone();
        let mut c = self.attach_damping.clone();
        for s in &self.springs {
            for v in [s.a, s.b] {
                k[v] += s.stiffness;
                c[v] += s.damping;
            }
        }
        for (v, &m) in self.masses.iter().enumerate() {
            if k[v] > 0.0 && h >= 2.0 * (m / k[v]).sqrt() {
                return Err(Error::contract(format!(
                    "step {h} s breaks the stability bound {:.3e} s at node {v}",
                    2.0 * (m / k[v]).sqrt()
                )));
            }
            if c[v] > 0.0 && h >= 2.0 * m / c[v] {
                return Err(Error::contract(format!(
                    "step {h} s is too large for the damping at node {v}"
                )));
            }
        }
        Ok(())
    }
}

fn node(t: &Tensor, i: usize) -> [f64; 3] {
    let r = t.row(i);
    [r[0], r[1], r[2]]
}

fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn check_positions(sys: &SpringSystem, ts: &[&Tensor]) -> Result<()> {
    let want = [sys.num_nodes(), 3];
    for t in ts {
        if t.shape() != want {
            return Err(Error::shape("physics state", t.shape(), &want));
        }
    }
    Ok(())
}

/// Spring forces plus damping on relative velocity along each spring.
/// Every spring applies equal and opposite forces to its endpoints.
pub fn internal_forces(sys: &SpringSystem, y: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_positions(sys, &[y, v])?;
    let mut f = Tensor::zeros(&[sys.num_nodes(), 3]);
    let out = f.data_mut();
    for s in &sys.springs {
        let d = sub3(node(y, s.b), node(y, s.a));
        let len = dot3(d, d).sqrt();
        let mut force = if s.rest == 0.0 {
            d.map(|x| s.stiffness * x)
        } else if len > 0.0 {
            let mag = s.stiffness * (len - s.rest) / len;
            d.map(|x| mag * x)
        } else {
            [0.0; 3]
        };
        if s.damping > 0.0 && len > 0.0 {
            let dv = sub3(node(v, s.b), node(v, s.a));
            let mag = s.damping * dot3(dv, d) / (len * len);
            for (fk, dk) in force.iter_mut().zip(d) {
                *fk += mag * dk;
            }
        }
        for k in 0..3 {
            out[3 * s.a + k] += force[k];
            out[3 * s.b + k] -= force[k];
        }
    }
    Ok(f)
}

/// Zero-rest attachment springs pulling each node toward its anchor, with
/// damping on velocity relative to the anchor.
pub fn attachment_forces(
    sys: &SpringSystem,
    y: &Tensor,
    v: &Tensor,
    anchor_pos: &Tensor,
    anchor_vel: &Tensor,
) -> Result<Tensor> {
    check_positions(sys, &[y, v, anchor_pos, anchor_vel])?;
    let mut f = Tensor::zeros(&[sys.num_nodes(), 3]);
    let out = f.data_mut();
    for i in 0..sys.num_nodes() {
        let (k, c) = (sys.attach_stiffness[i], sys.attach_damping[i]);
        for d in 0..3 {
            let j = 3 * i + d;
            out[j] = k * (anchor_pos.data()[j] - y.data()[j]) + c * (anchor_vel.data()[j] - v.data()[j]);
        }
    }
    Ok(f)
}

/// One explicit Euler step. `f_ex` holds every force not produced by the
/// internal springs.
pub fn euler_step(
    sys: &SpringSystem,
    h: f64,
    y: &Tensor,
    v: &Tensor,
    f_ex: &Tensor,
) -> Result<(Tensor, Tensor)> {
    check_positions(sys, &[f_ex])?;
    let f_in = internal_forces(sys, y, v)?;
    let mut v_next = v.clone();
    let mut y_next = y.clone();
    for i in 0..sys.num_nodes() {
        let inv_m = 1.0 / sys.masses[i];
        for d in 0..3 {
            let j = 3 * i + d;
            v_next.data_mut()[j] = v.data()[j] + h * (inv_m * (f_ex.data()[j] + f_in.data()[j]));
            y_next.data_mut()[j] = y.data()[j] + h * v.data()[j];
        }
    }
    for i in 0..sys.num_nodes() {
        let s = node(&v_next, i);
        let speed = dot3(s, s).sqrt();
        if speed.is_nan() || speed > DIVERGENCE_SPEED || !y_next.row(i).iter().all(|x| x.is_finite()) {
            return Err(Error::Divergence {
                at: format!("node {i}"),
                detail: format!("speed {speed:.3e} m/s exceeds {DIVERGENCE_SPEED:e}"),
            });
        }
    }
    Ok((y_next, v_next))
}

pub fn kinetic_energy(sys: &SpringSystem, v: &Tensor) -> f64 {
    (0..sys.num_nodes())
        .map(|i| {
            let s = node(v, i);
            0.5 * sys.masses[i] * dot3(s, s)
        })
        .sum()
}

/// Elastic energy of the internal springs, plus the attachment springs when
/// anchor positions are given.
pub fn potential_energy(sys: &SpringSystem, y: &Tensor, anchors: Option<&Tensor>) -> f64 {
    let springs: f64 = sys
        .springs
        .iter()
        .map(|s| {
            let d = sub3(node(y, s.b), node(y, s.a));
            let stretch = dot3(d, d).sqrt() - s.rest;
            0.5 * s.stiffness * stretch * stretch
        })
        .sum();
    let attach: f64 = anchors.map_or(0.0, |a| {
        (0..sys.num_nodes())
            .map(|i| {
                let d = sub3(node(y, i), node(a, i));
                0.5 * sys.attach_stiffness[i] * dot3(d, d)
            })
            .sum()
    });
    springs + attach
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    /// No motion.
    Static,
    /// Rotation about the x axis through the mesh centroid, radians.
    Swing,
    /// Rotation about the z axis through the mesh centroid, radians.
    Twist,
    /// Translation along z, meters.
    Bounce,
    /// Translation along x, meters.
    Sway,
}

impl MotionKind {
    pub const MOVING: [MotionKind; 4] = [
        MotionKind::Swing,
        MotionKind::Twist,
        MotionKind::Bounce,
        MotionKind::Sway,
    ];
}

/// A sinusoidal rigid motion of the driver, optionally frozen after
/// `stop_after` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriverScript {
    pub kind: MotionKind,
    pub amplitude: f64,
    /// Hz.
    pub frequency: f64,
    /// Radians.
    pub phase: f64,
    /// Seconds of motion available.
    pub duration: f64,
    pub stop_after: Option<f64>,
}

impl DriverScript {
    pub fn still(duration: f64) -> Self {
        Self {
            kind: MotionKind::Static,
            amplitude: 0.0,
            frequency: 0.0,
            phase: 0.0,
            duration,
            stop_after: None,
        }
    }

    /// Random amplitude, frequency and phase for `kind`.
    pub fn random<R: Rng + ?Sized>(kind: MotionKind, duration: f64, rng: &mut R) -> Self {
        let amplitude = match kind {
            MotionKind::Static => 0.0,
            MotionKind::Swing | MotionKind::Twist => rng.gen_range(0.2..0.6),
            MotionKind::Bounce | MotionKind::Sway => rng.gen_range(0.01..0.03),
        };
        Self {
            kind,
            amplitude,
            frequency: rng.gen_range(0.5..2.0),
            phase: rng.gen_range(0.0..TAU),
            duration,
            stop_after: None,
        }
    }

    fn signal(&self, t: f64) -> f64 {
        let t = self.stop_after.map_or(t, |s| t.min(s));
        self.amplitude * (TAU * self.frequency * t + self.phase).sin()
    }

    /// Applies the pose at time `t` to `points` (`|V|×3`), pivoting about
    /// `pivot`.
    pub fn apply(&self, t: f64, points: &Tensor, pivot: [f64; 3]) -> Tensor {
        let s = self.signal(t);
        let (sin, cos) = s.sin_cos();
        let mut out = points.clone();
        for row in out.data_mut().chunks_exact_mut(3) {
            let p = sub3([row[0], row[1], row[2]], pivot);
            let q = match self.kind {
                MotionKind::Static => p,
                MotionKind::Swing => [p[0], cos * p[1] - sin * p[2], sin * p[1] + cos * p[2]],
                MotionKind::Twist => [cos * p[0] - sin * p[1], sin * p[0] + cos * p[1], p[2]],
                MotionKind::Bounce => [p[0], p[1], p[2] + s],
                MotionKind::Sway => [p[0] + s, p[1], p[2]],
            };
            for d in 0..3 {
                row[d] = q[d] + pivot[d];
            }
        }
        out
    }
}

/// Scripts cycling through the moving kinds with parameters drawn from
/// `seed`.
pub fn random_scripts(count: usize, duration: f64, seed: u64) -> Vec<DriverScript> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| DriverScript::random(MotionKind::MOVING[i % 4], duration, &mut rng))
        .collect()
}

pub const TRAJECTORY_MAGIC: &[u8; 8] = b"ALTTRAJ1";
pub const TRAJECTORY_VERSION: u32 = 1;

/// Driver frames `X_0..=X_T` and tissue frames `Y_0..=Y_T`, each `|V|×3`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub fps: f64,
    /// Name of the graph file the frames live on.
    pub graph_ref: String,
    pub x: Vec<Tensor>,
    pub y: Vec<Tensor>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrajHeader {
    version: u32,
    num_nodes: usize,
    num_frames: usize,
    fps: f64,
    graph_ref: String,
}

impl Trajectory {
    pub fn num_frames(&self) -> usize {
        self.x.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.x.first().map_or(0, Tensor::rows)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let n = self.num_nodes();
        if self.x.is_empty() || self.y.len() != self.x.len() {
            return Err(Error::contract("trajectory needs matching, non-empty X and Y frames"));
        }
        let mut payload = Vec::with_capacity(self.x.len() * n * 6);
        for (x, y) in self.x.iter().zip(&self.y) {
            if x.shape() != [n, 3] || y.shape() != [n, 3] {
                return Err(Error::shape("trajectory frame", x.shape(), y.shape()));
            }
            payload.extend_from_slice(x.data());
            payload.extend_from_slice(y.data());
        }
        let header = TrajHeader {
            version: TRAJECTORY_VERSION,
            num_nodes: n,
            num_frames: self.x.len(),
            fps: self.fps,
            graph_ref: self.graph_ref.clone(),
        };
        encode(TRAJECTORY_MAGIC, &header, &payload)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, payload): (TrajHeader, Vec<f64>) = decode(TRAJECTORY_MAGIC, bytes, |h: &TrajHeader| {
            if h.version != TRAJECTORY_VERSION {
                return Err(Error::Format(format!(
                    "trajectory version {} is not supported",
                    h.version
                )));
            }
            if h.num_nodes == 0 || h.num_frames == 0 {
                return Err(Error::Format("empty trajectory".into()));
            }
            Ok(h.num_frames * h.num_nodes * 6)
        })?;
        let block = h.num_nodes * 3;
        let mut x = Vec::with_capacity(h.num_frames);
        let mut y = Vec::with_capacity(h.num_frames);
        for frame in payload.chunks_exact(2 * block) {
            x.push(Tensor::new(vec![h.num_nodes, 3], frame[..block].to_vec())?);
            y.push(Tensor::new(vec![h.num_nodes, 3], frame[block..].to_vec())?);
        }
        Ok(Self {
            fps: h.fps,
            graph_ref: h.graph_ref,
            x,
            y,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_all(path)?)
    }
}

fn centroid(points: &Tensor) -> [f64; 3] {
    let n = points.rows() as f64;
    let mut c = [0.0; 3];
    for row in points.data().chunks_exact(3) {
        for d in 0..3 {
            c[d] += row[d];
        }
    }
    c.map(|v| v / n)
}

/// Frame-by-frame integrator for one driver script.
#[derive(Debug, Clone)]
pub struct Simulator {
    sys: SpringSystem,
    script: DriverScript,
    h: f64,
    substeps: usize,
    driver_rest: Tensor,
    tissue_rest: Tensor,
    pivot: [f64; 3],
    frame: usize,
    y: Tensor,
    v: Tensor,
}

impl Simulator {
    /// Starts the tissue at its anchors, moving with the driver. `seed`
    /// only drives the material perturbation.
    pub fn new(cfg: &SimConfig, mesh: &MeshSpec, graph: &Graph, script: &DriverScript, seed: u64) -> Result<Self> {
        let sys = SpringSystem::from_mesh(cfg, mesh, graph, seed)?;
        let h = cfg.step_size();
        sys.check_stability(h)?;
        let driver_rest = mesh.rest_tensor();
        let mut tissue_rest = driver_rest.clone();
        for row in tissue_rest.data_mut().chunks_exact_mut(3) {
            row[2] += cfg.tissue_offset;
        }
        let pivot = centroid(&driver_rest);
        let mut sim = Self {
            sys,
            script: *script,
            h,
            substeps: cfg.substeps,
            driver_rest,
            tissue_rest,
            pivot,
            frame: 0,
            y: Tensor::zeros(&[1, 3]),
            v: Tensor::zeros(&[1, 3]),
        };
        sim.y = sim.anchor(0.0);
        sim.v = sim.anchor_velocity(0.0);
        Ok(sim)
    }

    fn anchor(&self, t: f64) -> Tensor {
        self.script.apply(t, &self.tissue_rest, self.pivot)
    }

    fn anchor_velocity(&self, t: f64) -> Tensor {
        let h = self.h;
        self.anchor(t + 0.5 * h)
            .sub(&self.anchor(t - 0.5 * h))
            .expect("same shape")
            .scale(1.0 / h)
    }

    pub fn system(&self) -> &SpringSystem {
        &self.sys
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn time(&self) -> f64 {
        (self.frame * self.substeps) as f64 * self.h
    }

    /// Driver positions at the current frame.
    pub fn driver(&self) -> Tensor {
        self.script.apply(self.time(), &self.driver_rest, self.pivot)
    }

    pub fn positions(&self) -> &Tensor {
        &self.y
    }

    pub fn velocities(&self) -> &Tensor {
        &self.v
    }

    /// Anchor positions at the current frame.
    pub fn anchors(&self) -> Tensor {
        self.anchor(self.time())
    }

    /// Runs the substeps of the next output frame.
    pub fn advance(&mut self) -> Result<()> {
        let frame = self.frame + 1;
        for s in 0..self.substeps {
            let t = ((frame - 1) * self.substeps + s) as f64 * self.h;
            let f_ex = attachment_forces(&self.sys, &self.y, &self.v, &self.anchor(t), &self.anchor_velocity(t))?;
            let (y, v) = euler_step(&self.sys, self.h, &self.y, &self.v, &f_ex).map_err(|e| match e {
                Error::Divergence { at, detail } => Error::Divergence {
                    at: format!("frame {frame}, substep {s}, {at}"),
                    detail,
                },
                other => other,
            })?;
            self.y = y;
            self.v = v;
        }
        self.frame = frame;
        Ok(())
    }
}

/// Integrates `frames` output frames of the tissue under `script`.
/// `seed` only drives the material perturbation.
pub fn generate_sequence(
    cfg: &SimConfig,
    mesh: &MeshSpec,
    graph: &Graph,
    script: &DriverScript,
    frames: usize,
    seed: u64,
) -> Result<Trajectory> {
    if (frames as f64) / cfg.fps > script.duration + 1e-12 {
        return Err(Error::contract(format!(
            "script lasts {} s but {frames} frames at {} fps were requested",
            script.duration, cfg.fps
        )));
    }
    let mut sim = Simulator::new(cfg, mesh, graph, script, seed)?;
    let mut xs = vec![sim.driver()];
    let mut ys = vec![sim.positions().clone()];
    for _ in 0..frames {
        sim.advance()?;
        xs.push(sim.driver());
        ys.push(sim.positions().clone());
    }
    Ok(Trajectory {
        fps: cfg.fps,
        graph_ref: String::new(),
        x: xs,
        y: ys,
    })
}

/// Generates one trajectory per script, in parallel. Sequence `i` uses
/// material seed `seed + i`.
pub fn generate_many(
    cfg: &SimConfig,
    mesh: &MeshSpec,
    graph: &Graph,
    scripts: &[DriverScript],
    frames: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    scripts
        .par_iter()
        .enumerate()
        .map(|(i, s)| generate_sequence(cfg, mesh, graph, s, frames, seed.wrapping_add(i as u64)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::make_grid_mesh;

    fn single_anchor() -> SpringSystem {
        SpringSystem::new(vec![1.0], vec![], vec![1.0], vec![0.0]).unwrap()
    }

    fn damped_anchor() -> SpringSystem {
        SpringSystem::new(vec![1.0], vec![], vec![1.0], vec![2.0]).unwrap()
    }

    #[test]
    fn hand_derived_spring_steps() {
        let sys = single_anchor();
        let zero = Tensor::zeros(&[1, 3]);
        let mut y = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]);
        let mut v = zero.clone();
        let mut expected = [(1.0, -0.1), (0.99, -0.2)].into_iter();
        for _ in 0..2 {
            let f = attachment_forces(&sys, &y, &v, &zero, &zero).unwrap();
            (y, v) = euler_step(&sys, 0.1, &y, &v, &f).unwrap();
            let (ey, ev) = expected.next().unwrap();
            assert_eq!((y.get2(0, 0), v.get2(0, 0)), (ey, ev));
        }
    }

    #[test]
    fn equilibrium_is_fixed() {
        let (mesh, g) = make_grid_mesh(3, 3, 0.1).unwrap();
        let sys = SpringSystem::from_mesh(&SimConfig::default(), &mesh, &g, 0).unwrap();
        let y = mesh.rest_tensor();
        let v = Tensor::zeros(&[9, 3]);
        let (y2, v2) = euler_step(&sys, 1e-3, &y, &v, &v).unwrap();
        assert_eq!(y2, y);
        assert!(v2.max_abs() < 1e-15);
    }

    #[test]
    fn internal_forces_balance() {
        let (mesh, g) = make_grid_mesh(4, 3, 0.05).unwrap();
        let cfg = SimConfig {
            perturbation: 0.05,
            ..SimConfig::default()
        };
        let sys = SpringSystem::from_mesh(&cfg, &mesh, &g, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = mesh
            .rest_tensor()
            .add(&Tensor::uniform(&[12, 3], 0.02, &mut rng))
            .unwrap();
        let v = Tensor::uniform(&[12, 3], 0.5, &mut rng);
        let f = internal_forces(&sys, &y, &v).unwrap();
        for d in 0..3 {
            let total: f64 = (0..12).map(|i| f.get2(i, d)).sum();
            assert!(total.abs() <= 1e-10, "{total}");
        }
    }

    #[test]
    fn divergence_is_reported() {
        let sys = single_anchor();
        let y = Tensor::from_rows(&[vec![1e6, 0.0, 0.0]]);
        let v = Tensor::zeros(&[1, 3]);
        let f = attachment_forces(&sys, &y, &v, &v, &v).unwrap();
        assert!(matches!(
            euler_step(&sys, 0.1, &y, &v, &f),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn stability_bound() {
        let sys = damped_anchor();
        assert!(sys.check_stability(0.9).is_ok());
        assert!(sys.check_stability(1.0).is_err());
        // undamped springs grow under explicit Euler at any step size
        assert!(single_anchor().check_stability(1e-3).is_err());
        let stiff = SpringSystem::new(vec![1.0], vec![], vec![1.0], vec![1.5]).unwrap();
        assert!(stiff.check_stability(1.5).is_err());
    }

    #[test]
    fn still_script_stays_at_rest() {
        let (mesh, g) = make_grid_mesh(4, 4, 0.02).unwrap();
        let cfg = SimConfig::default();
        let tr = generate_sequence(&cfg, &mesh, &g, &DriverScript::still(2.0), 60, 0).unwrap();
        assert_eq!(tr.num_frames(), 61);
        for y in &tr.y {
            assert!(y.sub(&tr.y[0]).unwrap().max_abs() <= 1e-9);
        }
        assert!(tr.x.iter().all(|x| *x == mesh.rest_tensor()));
    }

    #[test]
    fn short_script_rejected() {
        let (mesh, g) = make_grid_mesh(2, 2, 0.02).unwrap();
        let cfg = SimConfig::default();
        assert!(generate_sequence(&cfg, &mesh, &g, &DriverScript::still(0.5), 60, 0).is_err());
    }

    #[test]
    fn trajectory_bytes_round_trip() {
        let (mesh, g) = make_grid_mesh(3, 2, 0.02).unwrap();
        let script = random_scripts(1, 1.0, 9)[0];
        let mut tr = generate_sequence(&SimConfig::default(), &mesh, &g, &script, 12, 0).unwrap();
        tr.graph_ref = "graph.json".into();
        let bytes = tr.to_bytes().unwrap();
        let back = Trajectory::from_bytes(&bytes).unwrap();
        assert_eq!(back, tr);
        assert!(Trajectory::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn rigid_motions_preserve_distances() {
        let (mesh, _) = make_grid_mesh(3, 3, 0.1).unwrap();
        let p = mesh.rest_tensor();
        let c = centroid(&p);
        for kind in MotionKind::MOVING {
            let s = DriverScript {
                kind,
                amplitude: 0.4,
                frequency: 1.0,
                phase: 0.3,
                duration: 1.0,
                stop_after: None,
            };
            let q = s.apply(0.37, &p, c);
            for (a, b) in [(0, 8), (1, 5), (2, 6)] {
                let d0 = sub3(node(&p, a), node(&p, b));
                let d1 = sub3(node(&q, a), node(&q, b));
                assert!((dot3(d0, d0) - dot3(d1, d1)).abs() < 1e-12);
            }
        }
    }
}
