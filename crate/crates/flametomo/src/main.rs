use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flametomo::config::{load_scene, Scene};
use flametomo::fields::{make_phantom, normalized_mse, read_grid, write_grid, GridField};
use flametomo::neural::{pretrain_to_field, write_checkpoint, NeuralRepresentation, Network};
use flametomo::optimize::{
    run_reconstruction, write_history, ReconstructionProblem, Regularizer, Representation,
};
use flametomo::render::{
    read_measurement, render_measurement, write_measurement, RenderMode, SceneRep,
};
use flametomo::voxel::init_from_truth;
use flametomo::{Error, Result};

#[derive(Parser)]
#[command(
    name = "flametomo",
    version,
    about = "Differentiable hyperspectral infrared emission tomography"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthesize the ground-truth field and FTIR measurement files.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct the field from the measurement.
    Reconstruct {
        #[arg(long)]
        config: PathBuf,
        /// Representation/regularizer pair: vg|nn / nr|tikh|tv, e.g. vg/tv.
        #[arg(long)]
        method: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare reconstructions in the output directory against the truth.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RepKind {
    Vg,
    Nn,
}

const METHODS: [(RepKind, Regularizer, &str); 6] = [
    (RepKind::Vg, Regularizer::None, "vg_nr"),
    (RepKind::Vg, Regularizer::Tikhonov, "vg_tikh"),
    (RepKind::Vg, Regularizer::TotalVariation, "vg_tv"),
    (RepKind::Nn, Regularizer::None, "nn_nr"),
    (RepKind::Nn, Regularizer::Tikhonov, "nn_tikh"),
    (RepKind::Nn, Regularizer::TotalVariation, "nn_tv"),
];

fn parse_method(s: &str) -> Option<(RepKind, Regularizer, &'static str)> {
    let (rep, reg) = s.split_once('/')?;
    let rep = match rep {
        "vg" => RepKind::Vg,
        "nn" => RepKind::Nn,
        _ => return None,
    };
    let reg = match reg {
        "nr" => Regularizer::None,
        "tikh" => Regularizer::Tikhonov,
        "tv" => Regularizer::TotalVariation,
        _ => return None,
    };
    METHODS
        .iter()
        .find(|(k, r, _)| *k == rep && *r == reg)
        .map(|&(k, r, tag)| (k, r, tag))
}

fn check_workers_env() -> Result<()> {
    if let Ok(v) = std::env::var("FLAMETOMO_WORKERS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("FLAMETOMO_WORKERS=`{v}` is not a count")))?;
        if n == 0 {
            return Err(Error::Config("FLAMETOMO_WORKERS must be >= 1".into()));
        }
        // Scheduling hint; the current build executes ray work serially
        // under the deterministic-accumulation contract.
    }
    Ok(())
}

fn cmd_synth(scene: &Scene, seed: u64, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let truth = make_phantom(&scene.phantom, &scene.geom, &scene.species)?;
    write_grid(&truth, out.join("truth.grid"))?;
    let m = render_measurement(
        &SceneRep::Grid(&truth),
        &scene.geom,
        &scene.cameras,
        &scene.evaluator,
        &scene.kernel,
        &RenderMode::VoxelTraversal,
        seed,
    )?;
    write_measurement(&m, &out.join("meas.txt"))?;
    println!(
        "synth: {} cells, {} cameras, {} spectra x {} points -> {}",
        scene.geom.n_cells(),
        scene.cameras.len(),
        m.data.len() / m.output_grid.count,
        m.output_grid.count,
        out.display()
    );
    Ok(())
}

/// Probe a neural representation at the voxel centers (the evaluation
/// convention: reconstructions are compared on the truth lattice).
fn probe_neural(rep: &NeuralRepresentation, geom: &flametomo::geometry::GridGeometry) -> GridField {
    let d = geom.dims;
    let mut data = Vec::with_capacity(geom.n_cells());
    for k in 0..d[2] {
        for j in 0..d[1] {
            for i in 0..d[0] {
                data.push(rep.field_eval(Network::Fine, geom.cell_center([i, j, k])));
            }
        }
    }
    GridField {
        geom: geom.clone(),
        species_list: rep.species_list.clone(),
        data,
    }
}

fn cmd_reconstruct(
    scene: &Scene,
    kind: RepKind,
    reg: Regularizer,
    tag: &str,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let truth = read_grid(out.join("truth.grid"))?;
    let measurement = read_measurement(&out.join("meas.txt"))?;
    let bounds = &scene.config.bounds;
    let init = init_from_truth(
        &truth,
        bounds.t_floor,
        bounds.t_ceil,
        bounds.noise_frac,
        seed,
    )?;
    let (rep, mode, neural) = match kind {
        RepKind::Vg => (
            Representation::Voxel(init),
            RenderMode::VoxelTraversal,
            false,
        ),
        RepKind::Nn => {
            let mut nn = NeuralRepresentation::new(
                scene.geom.box_min,
                scene.geom.box_max,
                scene.species.clone(),
                bounds.t_floor,
                bounds.t_ceil,
                scene.encoding(),
                scene.mlp(),
                seed,
            )?;
            let fit = pretrain_to_field(
                &mut nn,
                &init.to_grid(),
                scene.config.neural.pretrain_epochs,
                scene.config.neural.pretrain_lr,
                seed ^ 0xA5A5_5A5A_0F0F_F0F0,
            )?;
            println!("pretrain: fit MSE {fit:.3e}");
            (
                Representation::Neural(nn),
                scene.hierarchical_mode(),
                true,
            )
        }
    };
    let cfg = scene.loss_config(reg, neural, seed);
    let mut problem = ReconstructionProblem::new(
        rep,
        scene.geom.clone(),
        scene.evaluator.clone(),
        scene.kernel.clone(),
        mode,
        measurement,
        cfg,
    )?;
    let outcome = run_reconstruction(&mut problem)?;
    let recon = match &problem.rep {
        Representation::Voxel(v) => v.to_grid(),
        Representation::Neural(n) => probe_neural(n, &scene.geom),
    };
    write_grid(&recon, out.join(format!("recon_{tag}.grid")))?;
    write_history(&outcome.history, &out.join(format!("history_{tag}.csv")))?;
    if let Representation::Neural(n) = &problem.rep {
        write_checkpoint(n, &out.join(format!("recon_{tag}.net")))?;
    }
    if let Some(epoch) = outcome.diverged_at {
        eprintln!("loss went non-finite at epoch {epoch}; wrote the last good parameters");
        return Err(Error::Diverged { epoch });
    }
    if let (Some(first), Some(last)) = (outcome.history.first(), outcome.history.last()) {
        println!(
            "reconstruct {tag}: loss {:.6e} -> {:.6e} over {} epochs",
            first.total,
            last.total,
            outcome.history.len()
        );
    }
    Ok(())
}

fn history_stats(path: &Path) -> Option<(f64, u64)> {
    let text = std::fs::read_to_string(path).ok()?;
    let mut ms = Vec::new();
    let mut mem = 0u64;
    for line in text.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return None;
        }
        ms.push(cols[4].parse::<f64>().ok()?);
        mem = cols[5].parse().ok()?;
    }
    if ms.is_empty() {
        return None;
    }
    Some((ms.iter().sum::<f64>() / ms.len() as f64, mem))
}

fn cmd_evaluate(scene: &Scene, out: &Path) -> Result<()> {
    let truth = read_grid(out.join("truth.grid"))?;
    if truth.geom != scene.geom {
        return Err(Error::Shape(
            "truth grid does not match the configured scene".into(),
        ));
    }
    let mut rows = Vec::new();
    for (_, _, tag) in METHODS {
        let grid_path = out.join(format!("recon_{tag}.grid"));
        if !grid_path.exists() {
            continue;
        }
        let recon = read_grid(&grid_path)?;
        let mses = normalized_mse(&recon, &truth)?;
        let stats = history_stats(&out.join(format!("history_{tag}.csv")));
        rows.push((tag, mses, stats));
    }
    if rows.is_empty() {
        return Err(Error::Config(format!(
            "no recon_*.grid files in {}",
            out.display()
        )));
    }
    let field_names: Vec<String> = rows[0].1.iter().map(|m| m.name.clone()).collect();
    let mut csv = String::from("method");
    for f in &field_names {
        csv.push_str(&format!(",mse_{f}"));
    }
    csv.push_str(",mean_epoch_ms,mem_bytes\n");
    let mut table = format!("{:<8}", "method");
    for f in &field_names {
        table.push_str(&format!(" {:>12}", format!("MSE_{f}")));
    }
    table.push_str(&format!(" {:>14} {:>12}\n", "epoch_ms(avg)", "mem_bytes"));
    for (tag, mses, stats) in &rows {
        csv.push_str(tag);
        table.push_str(&format!("{tag:<8}"));
        for m in mses {
            csv.push_str(&format!(",{:.6e}", m.mse));
            table.push_str(&format!(" {:>12.4e}", m.mse));
        }
        match stats {
            Some((ms, mem)) => {
                csv.push_str(&format!(",{ms:.3},{mem}\n"));
                table.push_str(&format!(" {ms:>14.3} {mem:>12}\n"));
            }
            None => {
                csv.push_str(",,\n");
                table.push_str(&format!(" {:>14} {:>12}\n", "-", "-"));
            }
        }
    }
    std::fs::write(out.join("evaluation.csv"), &csv)?;
    std::fs::write(out.join("evaluation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    check_workers_env()?;
    match cli.cmd {
        Cmd::Synth { config, seed, out } => {
            let scene = load_scene(&config)?;
            let seed = seed.unwrap_or(scene.config.optimize.seed);
            cmd_synth(&scene, seed, &out)
        }
        Cmd::Reconstruct {
            config,
            method,
            seed,
            out,
        } => {
            let (kind, reg, tag) = parse_method(&method).ok_or(Error::Usage)?;
            let scene = load_scene(&config)?;
            let seed = seed.unwrap_or(scene.config.optimize.seed);
            cmd_reconstruct(&scene, kind, reg, tag, seed, &out)
        }
        Cmd::Evaluate { config, out } => {
            let scene = load_scene(&config)?;
            cmd_evaluate(&scene, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems (bad flags/subcommands) exit 64; --help and
            // --version are not errors.
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(64),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Usage) => {
            eprintln!("error: method must be one of vg|nn / nr|tikh|tv, e.g. --method vg/tv");
            ExitCode::from(64)
        }
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } | Error::Io(_) | Error::Shape(_) => {
                    ExitCode::from(2)
                }
                _ => ExitCode::FAILURE,
            }
        }
    }
}
