//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use altsim_core::checkpoint::{Checkpoint, TrainMeta, CHECKPOINT_MAGIC};
use altsim_core::eval::{evaluate, reports_to_csv, EvalMode, EvalReport};
use altsim_core::gradcheck::{check_network, check_primitive_with_fault, NetworkFixture};
use altsim_core::graph::{make_grid_mesh, make_ring_mesh, GraphFile};
use altsim_core::network::{predict_sequence, Model, PredictMode};
use altsim_core::physics::{generate_sequence, DriverScript, MotionKind, Trajectory, TRAJECTORY_MAGIC};
use altsim_core::tape::OpKind;
use altsim_core::train::{train as run_training, EpochRecord, TrainError};
use anyhow::{bail, Context, Result};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use crate::chart::{Chart, Series};
use crate::config::{set, MeshChoice, RunConfig};
use crate::dataset::{create_dir, require, sha256_hex, write_json, Dataset, Manifest, SequenceEntry, GRAPH, MANIFEST, MANIFEST_VERSION};
use crate::{
    CheckFailed, EvalArgs, GenDataArgs, GradcheckArgs, InspectArgs, PredictArgs, TrainArgs, UsageError,
};

/// Random shapes tried per primitive.
const PRIMITIVE_TRIALS: usize = 25;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError::new(msg).into()
}

fn parse_motion(name: &str) -> Result<MotionKind> {
    Ok(match name.trim().to_ascii_lowercase().as_str() {
        "static" => MotionKind::Static,
        "swing" => MotionKind::Swing,
        "twist" => MotionKind::Twist,
        "bounce" => MotionKind::Bounce,
        "sway" => MotionKind::Sway,
        other => return Err(usage(format!("unknown motion '{other}'"))),
    })
}

fn parse_mesh(name: &str) -> Result<MeshChoice> {
    match name {
        "grid" => Ok(MeshChoice::Grid),
        "ring" => Ok(MeshChoice::Ring),
        other => Err(usage(format!("unknown mesh '{other}', expected grid or ring"))),
    }
}

fn parse_mode(name: &str) -> Result<EvalMode> {
    name.parse().map_err(|e| usage(format!("{e}")))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.cfg.config.as_deref())?;
    let d = &mut cfg.data;
    if let Some(m) = &a.mesh {
        d.mesh = parse_mesh(m)?;
    }
    set(&mut d.nx, a.nx);
    set(&mut d.ny, a.ny);
    set(&mut d.spacing, a.spacing);
    set(&mut d.nodes, a.nodes);
    set(&mut d.frames, a.frames);
    set(&mut d.sequences, a.sequences);
    set(&mut d.seed, a.seed);
    if let Some(ms) = &a.motions {
        d.motions = ms.iter().map(|m| parse_motion(m)).collect::<Result<_>>()?;
    }
    if a.stop_after.is_some() {
        d.stop_after = a.stop_after;
    }
    let d = cfg.data.clone();
    if d.frames == 0 {
        return Err(usage("--frames must be at least 1"));
    }
    if d.sequences == 0 {
        return Err(usage("--sequences must be at least 1"));
    }
    if d.motions.is_empty() {
        return Err(usage("at least one motion kind is required"));
    }
    if d.stop_after.is_some_and(|s| s.is_nan() || s < 0.0) {
        return Err(usage("stop_after must be non-negative"));
    }
    cfg.sim.validate().map_err(|e| usage(format!("sim: {e}")))?;
    let (mesh, graph) = match d.mesh {
        MeshChoice::Grid => make_grid_mesh(d.nx, d.ny, d.spacing),
        MeshChoice::Ring => make_ring_mesh(d.nodes, d.radius),
    }
    .map_err(|e| usage(format!("mesh: {e}")))?;

    let duration = d.frames as f64 / cfg.sim.fps;
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let plan: Vec<(DriverScript, u64)> = (0..d.sequences)
        .map(|i| {
            let mut script = DriverScript::random(d.motions[i % d.motions.len()], duration, &mut rng);
            script.stop_after = d.stop_after;
            (script, rng.gen())
        })
        .collect();

    let sim = &cfg.sim;
    let seqs: Vec<Trajectory> = plan
        .par_iter()
        .map(|(script, seed)| {
            let mut t = generate_sequence(sim, &mesh, &graph, script, d.frames, *seed)?;
            t.graph_ref = GRAPH.to_string();
            Ok(t)
        })
        .collect::<altsim_core::Result<_>>()
        .context("simulation failed")?;

    create_dir(&a.out)?;
    let graph_path = a.out.join(GRAPH);
    GraphFile::from_mesh(&mesh, &graph).save(&graph_path)?;
    let graph_sha256 = sha256_hex(&fs::read(&graph_path)?);
    let mut sequences = Vec::with_capacity(seqs.len());
    for (i, (seq, (script, material_seed))) in seqs.iter().zip(&plan).enumerate() {
        let file = format!("seq_{i:03}.traj");
        let bytes = seq.to_bytes()?;
        fs::write(a.out.join(&file), &bytes).with_context(|| format!("writing {file}"))?;
        sequences.push(SequenceEntry {
            file,
            sha256: sha256_hex(&bytes),
            material_seed: *material_seed,
            script: *script,
        });
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        seed: d.seed,
        graph: GRAPH.to_string(),
        graph_sha256,
        fps: cfg.sim.fps,
        frames: d.frames,
        sequences,
    };
    write_json(&a.out.join(MANIFEST), &manifest)?;
    cfg.echo(&a.out)?;
    info!(
        "wrote {} sequences of {} frames on {} nodes to {}",
        d.sequences,
        d.frames,
        graph.num_nodes(),
        a.out.display()
    );
    Ok(())
}

fn curve_csv(curve: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_loss\n");
    for r in curve {
        let _ = writeln!(s, "{},{:e},{:e},{:e}", r.epoch, r.lr, r.train_loss, r.val_loss);
    }
    s
}

fn loss_chart(curve: &[EpochRecord]) -> String {
    let pick = |f: fn(&EpochRecord) -> f64| curve.iter().map(|r| (r.epoch as f64, f(r))).collect();
    Chart {
        title: "teacher-forced loss",
        x_label: "epoch",
        y_label: "loss (m)",
        log_y: true,
    }
    .render(&[
        Series {
            name: "train".into(),
            points: pick(|r| r.train_loss),
        },
        Series {
            name: "validation".into(),
            points: pick(|r| r.val_loss),
        },
    ])
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    model: String,
    parameters: usize,
    epochs: usize,
    best_epoch: usize,
    best_loss: Option<f64>,
    final_train_loss: Option<f64>,
    selection: &'a str,
    weight_decay: String,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.cfg.config.as_deref())?;
    set(&mut cfg.model.kind, a.model);
    if let Some(schedule) = a.schedule {
        // The default skip only fits the default schedule.
        cfg.model.schedule = schedule;
        cfg.model.skips.clear();
    }
    set(&mut cfg.model.init_gain, a.init_gain);
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.lr, a.lr);
    set(&mut cfg.train.lr_decay, a.lr_decay);
    set(&mut cfg.train.l2, a.l2);
    set(&mut cfg.train.t_train, a.t_train);
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.train.validate().map_err(|e| usage(format!("train: {e}")))?;
    let kind = cfg.model.kind()?;
    let spec = cfg.model.net_spec()?;
    let gain = cfg.model.init_gain()?;

    let data = Dataset::load(&a.data)?;
    let val = a.val.as_deref().map(Dataset::load).transpose()?;
    if let Some(v) = &val {
        data.check_same_graph(v)?;
    }
    let need = cfg.train.t_train + 1;
    for d in std::iter::once(&data).chain(&val) {
        if d.min_frames() < need {
            return Err(usage(format!(
                "t_train {} needs {need} frames per sequence but {} has {}",
                cfg.train.t_train,
                d.dir.display(),
                d.min_frames()
            )));
        }
    }

    create_dir(&a.out)?;
    cfg.echo(&a.out)?;
    let model = Model::new(spec, kind, cfg.model.seed).scaled(gain);
    let params = model.param_count();
    info!("training {kind} ({params} parameters) on {} sequences", data.sequences.len());
    let val_seqs = val.as_ref().map_or(&[][..], |v| &v.sequences[..]);
    let mut curve = Vec::new();
    let outcome = run_training(model, &data.graph, &data.sequences, val_seqs, &cfg.train, |r| {
        info!(
            "epoch {:>5}  lr {:.3e}  train {:.6e}  val {:.6e}",
            r.epoch, r.lr, r.train_loss, r.val_loss
        );
        curve.push(*r);
    });
    write_text(&a.out.join("curve.csv"), &curve_csv(&curve))?;
    write_text(&a.out.join("loss.svg"), &loss_chart(&curve))?;
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::Diverged { epoch, cause, last_good }) => {
            let path = a.out.join("last_good.ckpt");
            last_good.save(&path)?;
            bail!(
                "training diverged in epoch {epoch}: {cause}; last finite parameters saved to {}",
                path.display()
            );
        }
        Err(TrainError::Invalid(e)) => return Err(usage(format!("{e}"))),
    };

    outcome.best.save(&a.out.join("best.ckpt"))?;
    let last_meta = TrainMeta {
        epoch: cfg.train.epochs,
        loss: curve.last().map(|r| r.val_loss),
        seed: cfg.model.seed,
    };
    Checkpoint::new(outcome.last, last_meta).save(&a.out.join("last.ckpt"))?;
    let summary = TrainSummary {
        model: kind.slug().to_string(),
        parameters: params,
        epochs: cfg.train.epochs,
        best_epoch: outcome.best.meta.epoch,
        best_loss: outcome.best.meta.loss,
        final_train_loss: curve.last().map(|r| r.train_loss),
        selection: if val.is_some() {
            "lowest validation loss"
        } else {
            "lowest training-set loss (no validation split given)"
        },
        weight_decay: format!(
            "learning-rate schedule lr * {}^epoch; L2 penalty coefficient {}",
            cfg.train.lr_decay, cfg.train.l2
        ),
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    info!(
        "best epoch {} (loss {:?}); outputs in {}",
        summary.best_epoch,
        summary.best_loss,
        a.out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require(path, "checkpoint")?;
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn errors_chart(reports: &[EvalReport]) -> String {
    let series: Vec<Series> = reports
        .iter()
        .map(|r| Series {
            name: format!("{} {}", r.model, r.mode),
            points: r.rows.iter().map(|h| (h.horizon as f64, h.mean_mm)).collect(),
        })
        .collect();
    Chart {
        title: "mean vertex error",
        x_label: "horizon (frames)",
        y_label: "error (mm)",
        log_y: false,
    }
    .render(&series)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg = RunConfig::load(a.cfg.config.as_deref())?;
    if let Some(m) = &a.mode {
        cfg.eval.modes = match m.as_str() {
            "both" => EvalMode::BOTH.to_vec(),
            other => vec![parse_mode(other)?],
        };
    }
    set(&mut cfg.eval.horizons, a.horizons);
    if cfg.eval.horizons.is_empty() || cfg.eval.horizons.contains(&0) {
        return Err(usage("horizons must be positive"));
    }
    let ckpt = load_checkpoint(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let max_h = *cfg.eval.horizons.iter().max().expect("non-empty");
    if max_h + 1 > data.min_frames() {
        return Err(usage(format!(
            "horizon {max_h} needs {} frames but {} has {}",
            max_h + 1,
            data.dir.display(),
            data.min_frames()
        )));
    }
    let reports = cfg
        .eval
        .modes
        .iter()
        .map(|&m| evaluate(&ckpt.model, &data.graph, &data.sequences, &cfg.eval.horizons, m))
        .collect::<altsim_core::Result<Vec<_>>>()?;
    let csv = reports_to_csv(&reports);
    print!("{csv}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        cfg.echo(out)?;
        write_text(&out.join("report.csv"), &csv)?;
        write_json(&out.join("report.json"), &reports)?;
        write_text(&out.join("errors.svg"), &errors_chart(&reports))?;
    }
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let mode = parse_mode(&a.mode)?;
    let ckpt = load_checkpoint(&a.model)?;
    let data = Dataset::load(&a.data)?;
    let Some(seq) = data.sequences.get(a.sequence) else {
        return Err(usage(format!(
            "sequence {} out of range, the dataset has {}",
            a.sequence,
            data.sequences.len()
        )));
    };
    let available = seq.num_frames() - 1;
    let steps = a.steps.unwrap_or(available);
    if steps == 0 || steps > available {
        return Err(usage(format!("--steps must lie in 1..={available}, got {steps}")));
    }
    let drivers = &seq.x[..=steps];
    let pmode = match mode {
        EvalMode::SingleStep => PredictMode::SingleStep(&seq.y),
        EvalMode::RollOut => PredictMode::RollOut,
    };
    let preds = predict_sequence(&ckpt.model, &data.graph, drivers, &seq.y[0], pmode)?;
    let mut y = Vec::with_capacity(steps + 1);
    y.push(seq.y[0].clone());
    y.extend(preds);
    let out = Trajectory {
        fps: seq.fps,
        graph_ref: data.manifest.graph.clone(),
        x: drivers.to_vec(),
        y,
    };
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    out.save(&a.out)?;
    info!("wrote {steps} predicted frames to {}", a.out.display());
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if !(a.eps > 0.0 && a.tol > 0.0) {
        return Err(usage("--eps and --tol must be positive"));
    }
    let kind = a.model.parse().map_err(|e| usage(format!("model: {e}")))?;
    let fault = match &a.inject_fault {
        None => None,
        Some(name) => Some(OpKind::from_name(name).ok_or_else(|| {
            let names: Vec<_> = OpKind::DIFFERENTIABLE.iter().map(|k| k.name()).collect();
            usage(format!("unknown op '{name}', expected one of {}", names.join(", ")))
        })?),
    };
    if let Some(f) = fault {
        warn!("corrupting the backward rule of {}", f.name());
    }

    let mut failures: Vec<(String, f64)> = Vec::new();
    println!("check,max_rel_error,status");
    for (i, op) in OpKind::DIFFERENTIABLE.into_iter().enumerate() {
        let worst = check_primitive_with_fault(op, PRIMITIVE_TRIALS, a.eps, a.seed.wrapping_add(i as u64), fault)?;
        let ok = worst <= a.tol;
        println!("op:{},{worst:.3e},{}", op.name(), if ok { "ok" } else { "FAIL" });
        if !ok {
            failures.push((format!("op {}", op.name()), worst));
        }
    }
    let fx = NetworkFixture::new(kind, a.seed);
    for p in check_network(&fx, a.eps, fault)? {
        let ok = p.max_rel_error <= a.tol;
        println!("param:{},{:.3e},{}", p.name, p.max_rel_error, if ok { "ok" } else { "FAIL" });
        if !ok {
            failures.push((format!("parameter {}", p.name), p.max_rel_error));
        }
    }
    if failures.is_empty() {
        info!("all gradients within {:e}", a.tol);
        return Ok(());
    }
    let (worst_name, worst) = failures
        .iter()
        .max_by(|x, y| x.1.total_cmp(&y.1))
        .expect("non-empty");
    let ops: Vec<&str> = failures
        .iter()
        .filter_map(|(n, _)| n.strip_prefix("op "))
        .collect();
    Err(CheckFailed(format!(
        "{} checks exceed tolerance {:e}; worst is {worst_name} ({worst:.3e}); failing ops: {}",
        failures.len(),
        a.tol,
        if ops.is_empty() { "none".to_string() } else { ops.join(", ") }
    ))
    .into())
}

#[derive(Serialize)]
struct LayerInfo {
    layer: usize,
    input_channels: usize,
    hidden_channels: usize,
    peephole: bool,
    parameters: usize,
    formula: String,
}

/// Input and hidden weights for four gates, three peephole matrices when
/// present, four biases.
fn layer_formula(kx: usize, kh: usize, peephole: bool) -> String {
    let hh = if peephole { 7 } else { 4 };
    let count = 4 * kx * kh + hh * kh * kh + 4 * kh;
    format!("4*{kx}*{kh} + {hh}*{kh}^2 + 4*{kh} = {count}")
}

fn inspect_checkpoint(a: &InspectArgs, ckpt: &Checkpoint) -> Result<()> {
    let m = &ckpt.model;
    let layers: Vec<LayerInfo> = m
        .layers()
        .iter()
        .enumerate()
        .map(|(l, p)| {
            let (kx, kh) = (p.input_channels(), p.hidden_channels());
            let formula = layer_formula(kx, kh, p.has_peephole());
            LayerInfo {
                layer: l,
                input_channels: kx,
                hidden_channels: kh,
                peephole: p.has_peephole(),
                parameters: p.param_count(),
                formula,
            }
        })
        .collect();
    let total = m.param_count();
    let note = "parameter shapes depend only on channel widths, so the count is the same for every node count";
    if a.json {
        let v = json!({
            "file": a.file.display().to_string(),
            "type": "checkpoint",
            "model": m.kind().slug(),
            "schedule": m.spec().channel_schedule,
            "skips": m.spec().skips.iter().map(|s| [s.to, s.from]).collect::<Vec<_>>(),
            "meta": ckpt.meta,
            "layers": layers,
            "total_parameters": total,
            "node_count_independent": true,
            "note": note,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else if a.csv {
        println!("layer,input_channels,hidden_channels,peephole,parameters");
        for l in &layers {
            println!(
                "{},{},{},{},{}",
                l.layer, l.input_channels, l.hidden_channels, l.peephole, l.parameters
            );
        }
        println!("total,,,,{total}");
    } else {
        println!("{}: {} checkpoint, epoch {}", a.file.display(), m.kind(), ckpt.meta.epoch);
        for l in &layers {
            println!("  layer {}: {}", l.layer, l.formula);
        }
        println!("  total: {total}");
        println!("  {note}");
    }
    Ok(())
}

fn inspect_trajectory(a: &InspectArgs, t: &Trajectory) -> Result<()> {
    let mut max_offset = 0.0f64;
    for (x, y) in t.x.iter().zip(&t.y) {
        max_offset = max_offset.max(y.sub(x)?.max_abs());
    }
    let (frames, nodes) = (t.num_frames(), t.num_nodes());
    if a.json {
        let v = json!({
            "file": a.file.display().to_string(),
            "type": "trajectory",
            "frames": frames,
            "nodes": nodes,
            "fps": t.fps,
            "graph_ref": t.graph_ref,
            "max_tissue_driver_offset_m": max_offset,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else if a.csv {
        println!("frames,nodes,fps,graph_ref,max_tissue_driver_offset_m");
        println!("{frames},{nodes},{},{},{max_offset:e}", t.fps, t.graph_ref);
    } else {
        println!(
            "{}: trajectory, {frames} frames of {nodes} nodes at {} fps on '{}'",
            a.file.display(),
            t.fps,
            t.graph_ref
        );
        println!("  largest tissue-driver offset: {max_offset:.6e} m");
    }
    Ok(())
}

pub fn inspect(a: InspectArgs) -> Result<()> {
    require(&a.file, "file")?;
    let bytes = fs::read(&a.file).with_context(|| format!("reading {}", a.file.display()))?;
    let context = || format!("decoding {}", a.file.display());
    if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ckpt = Checkpoint::from_bytes(&bytes).with_context(context)?;
        inspect_checkpoint(&a, &ckpt)
    } else if bytes.starts_with(TRAJECTORY_MAGIC) {
        let t = Trajectory::from_bytes(&bytes).with_context(context)?;
        inspect_trajectory(&a, &t)
    } else {
        Err(usage(format!(
            "{} is neither a checkpoint nor a trajectory file",
            a.file.display()
        )))
    }
}
