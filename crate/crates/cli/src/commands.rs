//! Command bodies. Each artifact-producing command is split into a pure
//! `*_text` function (settings + seed -> bytes) and the part that writes,
//! so `replay` can regenerate any artifact and compare.

use std::fs;
use std::path::{Path, PathBuf};

use floe_core::cn::{self, CnConfig, CnModel, DemStepModel, StepModel, TrainConfig};
use floe_core::io::{self, Checkpoint, GraphMeta, Provenance};
use floe_core::metrics;
use floe_core::render::{self, FrameStyle};
use floe_core::{build_chain_graph, dem, seeded_rng, AssimConfig, FloeSystem, Trajectory};

use crate::error::CliError;
use crate::settings::*;

fn required<'a>(path: &'a Path, flag: &str) -> Result<&'a Path, CliError> {
    if path.as_os_str().is_empty() {
        Err(CliError::Usage(format!("--{flag} is required")))
    } else {
        Ok(path)
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(io::write_atomic(path, text.as_bytes())?)
}

fn read_truth(path: &Path) -> Result<Trajectory, CliError> {
    Ok(io::read_trajectory(required(path, "truth")?)?.trajectory)
}

fn load_model(path: &Path, truth: &Trajectory) -> Result<CnModel, CliError> {
    let ck = io::read_checkpoint(required(path, "checkpoint")?)?;
    let system = ck.graph.system()?;
    if system.n_floes() != truth.n_floes() {
        return Err(CliError::Data(format!(
            "checkpoint is for {} floes, trajectory has {}",
            system.n_floes(),
            truth.n_floes()
        )));
    }
    if ck.graph.dt != truth.dt {
        return Err(CliError::Data(format!(
            "checkpoint time step {} differs from trajectory time step {}",
            ck.graph.dt, truth.dt
        )));
    }
    Ok(CnModel::new(ck.params, system, ck.graph.dt))
}

pub fn generate_text(s: &GenerateSettings, seed: u64) -> Result<String, CliError> {
    if s.floes == 0 {
        return Err(CliError::Usage("--floes must be at least 1".into()));
    }
    if !(s.speed_min >= 0.0 && s.speed_min <= s.speed_max) {
        return Err(CliError::Usage("speed range must satisfy 0 <= min <= max".into()));
    }
    let system = FloeSystem::new(
        vec![s.radius; s.floes],
        vec![s.thickness; s.floes],
        s.density,
        s.youngs_modulus,
        s.domain.0,
        s.domain.1,
    )?;
    let mut rng = seeded_rng(seed, s.index as u64);
    let init = dem::sample_initial_conditions(&system, (s.speed_min, s.speed_max), &mut rng)?;
    let traj = dem::generate_trajectory(init, &system, s.steps, s.dt)?;
    let prov = Provenance::new("generate", seed, to_json(s));
    Ok(io::format_trajectory(&traj, Some(&prov)))
}

pub fn generate(s: &GenerateSettings, seed: u64, output: &Path) -> Result<(), CliError> {
    match s.count {
        0 => Err(CliError::Usage("--count must be at least 1".into())),
        1 => write(output, &generate_text(s, seed)?),
        n => {
            fs::create_dir_all(output)
                .map_err(|e| CliError::Data(format!("cannot create {}: {e}", output.display())))?;
            for i in 0..n {
                // Each file records itself as a single run, so it replays alone.
                let one = GenerateSettings {
                    count: 1,
                    index: s.index + i,
                    ..s.clone()
                };
                write(&output.join(format!("traj_{i:04}.csv")), &generate_text(&one, seed)?)?;
            }
            eprintln!("wrote {n} trajectories to {}", output.display());
            Ok(())
        }
    }
}

/// Expands directories into their `.csv` files, in name order.
fn collect_data(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| CliError::Data(format!("cannot list {}: {e}", p.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "csv"))
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn train_text(s: &TrainSettings, seed: u64) -> Result<String, CliError> {
    let files = collect_data(&s.data)?;
    if files.is_empty() {
        return Err(CliError::Usage("no training data; pass --data".into()));
    }
    let trajs: Vec<Trajectory> = files
        .iter()
        .map(|f| io::read_trajectory(f).map(|t| t.trajectory))
        .collect::<Result<_, _>>()?;
    let config = CnConfig {
        activation: s.activation,
        history: s.history,
        target: s.target,
        residual: s.residual,
        message_width: s.message_width,
        ..CnConfig::default()
    };
    let hyper = TrainConfig {
        batch_size: s.batch_size,
        learning_rate: s.learning_rate,
        lr_decay: s.lr_decay,
        epochs: s.epochs,
        pairs_per_epoch: s.pairs_per_epoch,
        validation_fraction: s.validation_fraction,
        contact_fraction: s.contact_fraction,
        ..TrainConfig::default()
    };
    let mut rng = seeded_rng(seed, 0);
    let (params, report) = cn::train_with_progress(&trajs, config, &hyper, &mut rng, |e| {
        eprintln!(
            "epoch {:>4}  lr {:.3e}  train {:.6e}  validation {:.6e}",
            e.epoch, e.learning_rate, e.train_loss, e.validation_loss
        );
    })?;
    let ck = Checkpoint {
        params,
        graph: GraphMeta::from_system(&trajs[0].system, trajs[0].dt),
        seed,
        train_config: Some(hyper),
        report: Some(report),
        provenance: Some(Provenance::new("train", seed, to_json(s))),
    };
    Ok(io::checkpoint_to_string(&ck))
}

pub fn train(s: &TrainSettings, seed: u64, output: &Path) -> Result<(), CliError> {
    write(output, &train_text(s, seed)?)
}

pub fn rollout_text(s: &RolloutSettings, seed: u64) -> Result<String, CliError> {
    let truth = read_truth(&s.truth)?;
    let model = load_model(&s.checkpoint, &truth)?;
    if truth.len() < 2 {
        return Err(CliError::Data("reference needs at least two states".into()));
    }
    let steps = s.steps.unwrap_or(truth.len() - 2);
    let run = cn::rollout(&model, &truth.system, &truth.states[0], &truth.states[1], steps)?;
    let violations = run.ordering_violations();
    if violations > 0 {
        eprintln!("warning: {violations} states with floes out of order");
    }
    Ok(io::format_trajectory(&run, Some(&Provenance::new("rollout", seed, to_json(s)))))
}

pub fn rollout(s: &RolloutSettings, seed: u64, output: &Path) -> Result<(), CliError> {
    write(output, &rollout_text(s, seed)?)
}

/// Mean trajectory, diagnostics table and time-mean RMSE.
pub fn assimilate_text(s: &AssimilateSettings, seed: u64) -> Result<(String, String, f64), CliError> {
    let truth = read_truth(&s.truth)?;
    // Without a checkpoint the contact model itself is the forecast model.
    let model: Box<dyn StepModel> = if s.checkpoint.as_os_str().is_empty() {
        Box::new(DemStepModel {
            system: truth.system.clone(),
            dt: truth.dt,
        })
    } else {
        Box::new(load_model(&s.checkpoint, &truth)?)
    };
    let cfg = AssimConfig {
        filter: s.filter,
        ensemble_size: s.members,
        sigma_model: s.sigma_model,
        sigma_obs: s.sigma_obs,
        interval: s.interval,
        observed: (!s.observe.is_empty()).then(|| s.observe.clone()),
        inflation: s.inflation,
        noise_schedule: s.noise_schedule,
    };
    let mut rng = seeded_rng(seed, 0);
    let result = floe_core::assim::run_assimilation(&truth, model.as_ref(), &cfg, &mut rng)?;
    let mean = io::format_trajectory(&result.mean, Some(&Provenance::new("assimilate", seed, to_json(s))));
    let mut diag = String::from("step,rmse,spread\n");
    for row in result.diagnostics.iter().filter(|r| r.analysis) {
        diag.push_str(&format!("{},{:.16e},{:.16e}\n", row.step, row.rmse, row.spread));
    }
    Ok((mean, diag, result.mean_rmse()))
}

pub fn assimilate(s: &AssimilateSettings, seed: u64, output: &Path, diagnostics: Option<&Path>) -> Result<(), CliError> {
    let (mean, diag, mean_rmse) = assimilate_text(s, seed)?;
    write(output, &mean)?;
    if let Some(p) = diagnostics {
        write(p, &diag)?;
    }
    println!("mean_rmse={mean_rmse:.9e}");
    Ok(())
}

/// Report text and the per-floe correlations behind it.
pub fn evaluate_text(s: &EvaluateSettings, seed: u64) -> Result<(String, Vec<f64>), CliError> {
    let truth = read_truth(&s.truth)?;
    let model = load_model(&s.checkpoint, &truth)?;
    let pred = match &s.prediction {
        Some(p) => io::read_trajectory(p)?.trajectory,
        None => {
            if truth.len() < 3 {
                return Err(CliError::Data("reference needs at least three states".into()));
            }
            cn::rollout(&model, &truth.system, &truth.states[0], &truth.states[1], truth.len() - 2)?
        }
    };
    let report = metrics::evaluate(&pred, &truth, &model)?;
    let mut text = report.to_string();
    text.push_str(&format!("ordering_violations={}\n", pred.ordering_violations()));
    if !s.horizons.is_empty() {
        for row in metrics::horizon_sweep_on(&model, &truth, &s.horizons)? {
            text.push_str(&format!("horizon_{}_pcc={:.9}\n", row.horizon, row.pcc));
            text.push_str(&format!("horizon_{}_simulation_rmse={:.9e}\n", row.horizon, row.simulation_rmse));
        }
    }
    let prov = Provenance::new("evaluate", seed, to_json(s));
    text.push_str(&format!("provenance={}\n", serde_json::to_string(&prov).expect("provenance serializes")));
    Ok((text, report.pcc_per_floe))
}

pub fn evaluate(s: &EvaluateSettings, seed: u64, output: Option<&Path>, chart: Option<&Path>) -> Result<(), CliError> {
    let (text, pcc) = evaluate_text(s, seed)?;
    match output {
        Some(p) => write(p, &text)?,
        None => print!("{text}"),
    }
    if let Some(p) = chart {
        write(p, &render::pcc_bar_chart(&pcc))?;
    }
    Ok(())
}

pub fn render(s: &RenderSettings, output: &Path) -> Result<(), CliError> {
    let traj = io::read_trajectory(required(&s.trajectory, "trajectory")?)?.trajectory;
    let end = s.end.unwrap_or(traj.len());
    let frames = render::render_frames(&traj, s.start..end, s.stride, &FrameStyle::default())?;
    fs::create_dir_all(output).map_err(|e| CliError::Data(format!("cannot create {}: {e}", output.display())))?;
    for (k, svg) in &frames {
        write(&output.join(format!("frame_{k:06}.svg")), svg)?;
    }
    eprintln!("wrote {} frames to {}", frames.len(), output.display());
    Ok(())
}

pub fn graph(n_floes: usize, dense: bool) -> Result<(), CliError> {
    if n_floes == 0 {
        return Err(CliError::Usage("--floes must be at least 1".into()));
    }
    let (rel, perm) = build_chain_graph(n_floes);
    rel.validate_chain().map_err(|e| CliError::Numerical(e.to_string()))?;
    println!("nodes={} edges={}", rel.n_nodes(), rel.n_edges());
    for k in 0..rel.n_edges() {
        println!("edge {k}: {} -> {} (reverse {})", rel.sender_of(k), rel.receiver_of(k), perm.partner(k));
    }
    if dense {
        print!("{rel}");
    }
    Ok(())
}

/// Regenerates the primary bytes an artifact's provenance describes.
fn regenerate(prov: &Provenance) -> Result<String, CliError> {
    let seed = prov.seed;
    match prov.command.as_str() {
        "generate" => generate_text(&from_json(&prov.config, "generate")?, seed),
        "train" => train_text(&from_json(&prov.config, "train")?, seed),
        "rollout" => rollout_text(&from_json(&prov.config, "rollout")?, seed),
        "assimilate" => assimilate_text(&from_json(&prov.config, "assimilate")?, seed).map(|r| r.0),
        "evaluate" => evaluate_text(&from_json(&prov.config, "evaluate")?, seed).map(|r| r.0),
        other => Err(CliError::Data(format!("cannot replay command `{other}`"))),
    }
}

fn embedded_provenance(path: &Path, text: &str) -> Result<Provenance, CliError> {
    let missing = || CliError::Data(format!("{} carries no provenance", path.display()));
    if text.starts_with('{') {
        io::checkpoint_from_str(text, path)?.provenance.ok_or_else(missing)
    } else if text.starts_with('#') {
        io::parse_trajectory(text, path)?.provenance.ok_or_else(missing)
    } else {
        let line = text.lines().find_map(|l| l.strip_prefix("provenance=")).ok_or_else(missing)?;
        serde_json::from_str(line).map_err(|e| CliError::Data(format!("{}: provenance: {e}", path.display())))
    }
}

pub fn replay(path: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let prov = embedded_provenance(path, &text)?;
    if prov.version != env!("CARGO_PKG_VERSION") {
        eprintln!("warning: artifact written by floe {}, replaying with {}", prov.version, env!("CARGO_PKG_VERSION"));
    }
    let again = regenerate(&prov)?;
    match text.bytes().zip(again.bytes()).position(|(a, b)| a != b) {
        None if text.len() == again.len() => {
            println!("identical: {} ({} bytes, command `{}`)", path.display(), text.len(), prov.command);
            Ok(())
        }
        at => Err(CliError::Data(format!(
            "replay of `{}` differs from {} at byte {}",
            prov.command,
            path.display(),
            at.unwrap_or(text.len().min(again.len()))
        ))),
    }
}
