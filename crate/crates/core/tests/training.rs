//! Training regressions at desk scale: an 8×8 grid and the default
//! network, on a handful of simulated sequences.

use altsim_core::eval::{evaluate, EvalMode};
use altsim_core::graph::make_grid_mesh;
use altsim_core::network::{Model, ModelKind, NetSpec};
use altsim_core::physics::{generate_many, random_scripts, SimConfig, Trajectory};
use altsim_core::train::{train, EpochRecord, TrainConfig};
use altsim_core::Graph;

fn desk_data(count: usize, frames: usize) -> (Graph, Vec<Trajectory>) {
    let cfg = SimConfig::default();
    let (mesh, g) = make_grid_mesh(8, 8, 0.02).unwrap();
    let scripts = random_scripts(count, frames as f64 / cfg.fps + 0.1, 21);
    let seqs = generate_many(&cfg, &mesh, &g, &scripts, frames, 400).unwrap();
    (g, seqs)
}

fn run(g: &Graph, seqs: &[Trajectory], epochs: usize, seed: u64) -> (Model, Vec<EpochRecord>) {
    let cfg = TrainConfig {
        epochs,
        lr: 0.01,
        t_train: 10,
        seed,
        ..TrainConfig::default()
    };
    let model = Model::new(NetSpec::desk(), ModelKind::Alt, 8);
    let mut curve = Vec::new();
    let out = train(model, g, seqs, &[], &cfg, |r| curve.push(*r)).unwrap();
    (out.best.model, curve)
}

#[test]
fn loss_halves_within_200_epochs() {
    let (g, seqs) = desk_data(2, 10);
    let (_, curve) = run(&g, &seqs, 200, 1);
    let first = curve[0].train_loss;
    let best = curve.iter().map(|r| r.train_loss).fold(f64::INFINITY, f64::min);
    let at = curve.iter().position(|r| r.train_loss <= 0.5 * first);
    assert!(
        at.is_some(),
        "training loss went from {first:.3e} to at best {best:.3e}"
    );
}

#[test]
fn epoch_order_changes_the_curve_but_not_the_outcome() {
    let (g, seqs) = desk_data(4, 20);
    let (reference, ref_curve) = run(&g, &seqs, 40, 1);
    let (shuffled, curve) = run(&g, &seqs, 40, 2);
    assert_ne!(ref_curve, curve);
    let err = |m: &Model| {
        let r = evaluate(m, &g, &seqs, &[20], EvalMode::SingleStep).unwrap();
        r.rows[0].mean_mm
    };
    let (a, b) = (err(&reference), err(&shuffled));
    assert!(b <= 2.0 * a && a <= 2.0 * b, "single-step error {a:.4} mm vs {b:.4} mm");
}
