use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;
use viewpose::pipeline::{
    evaluate_from_disk, run_pipeline, write_canonical_tables, DetectorMode, PipelineConfig,
};
use viewpose::refine::RefineMode;
use viewpose::synth::write_dataset;
use viewpose::viewspace::build_icosphere;
use viewpose::{Error, SymmetryClass};

#[derive(Debug, Parser)]
#[command(name = "viewpose", version, about = "Discrete-viewpoint 6D pose estimation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_parser = ["none", "edges", "icp", "both"])]
    refine: Option<String>,
    #[arg(long, global = true, value_parser = ["oracle", "external"])]
    detector: Option<String>,
    /// Output directory for results, evaluation and view-space files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Writes the view space of every model to `viewspace.json`.
    Viewspace,
    /// Precomputes the canonical box tables.
    Canonical,
    /// Renders the synthetic dataset.
    GenData,
    /// Detects, lifts, refines and selects poses for every frame.
    Run,
    /// Scores stored results against the dataset annotations.
    Eval,
}

#[derive(Serialize)]
struct ModelViews {
    model: String,
    symmetry: SymmetryClass,
    level: u32,
    icosphere_vertices: usize,
    hemisphere: bool,
    num_views: usize,
    num_inplane: usize,
    num_cells: usize,
    inplane_bins_deg: Vec<f64>,
    views: Vec<[f64; 3]>,
}

fn config(cli: &Cli) -> viewpose::Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    if let Some(r) = &cli.refine {
        cfg.refinement = r.parse::<RefineMode>()?;
    }
    if let Some(d) = &cli.detector {
        cfg.detector = d.parse::<DetectorMode>()?;
    }
    if let Some(o) = &cli.out {
        cfg.paths.output = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &std::path::Path, value: &T) -> viewpose::Result<()> {
    let dir = path.parent().unwrap_or(std::path::Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn execute(cli: &Cli) -> viewpose::Result<()> {
    let cfg = config(cli)?;
    match cli.command {
        Command::Viewspace => {
            let models = cfg.load_models()?;
            let vertices = build_icosphere(cfg.viewspace.level)?.len();
            let out: Vec<ModelViews> = models
                .iter()
                .map(|m| {
                    let vs = &m.viewspace;
                    println!(
                        "{}: {} icosphere vertices, {} views, {} in-plane bins, {} cells",
                        m.name,
                        vertices,
                        vs.num_views(),
                        vs.num_inplane(),
                        vs.num_cells()
                    );
                    ModelViews {
                        model: m.name.clone(),
                        symmetry: vs.symmetry(),
                        level: vs.level(),
                        icosphere_vertices: vertices,
                        hemisphere: vs.hemisphere(),
                        num_views: vs.num_views(),
                        num_inplane: vs.num_inplane(),
                        num_cells: vs.num_cells(),
                        inplane_bins_deg: vs.inplane_bins().to_vec(),
                        views: vs.views().iter().map(|v| [v.x, v.y, v.z]).collect(),
                    }
                })
                .collect();
            write_json(&cfg.paths.output.join("viewspace.json"), &out)
        }
        Command::Canonical => {
            let models = cfg.load_models()?;
            let paths = cfg.install(|| write_canonical_tables(&cfg, &models))??;
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::GenData => {
            let models = cfg.load_models()?;
            let spec = cfg.scene_spec();
            let dir = &cfg.paths.dataset;
            let m = cfg.install(|| write_dataset(dir, &spec, &models, &cfg.viewspace, &cfg.camera))??;
            println!("wrote {} frames to {}", m.frames, dir.display());
            Ok(())
        }
        Command::Run => {
            let out = run_pipeline(&cfg)?;
            let n: usize = out.results.iter().map(|r| r.instances.len()).sum();
            println!(
                "{} frames, {} instances -> {}",
                out.results.len(),
                n,
                cfg.paths.output.join("results.json").display()
            );
            Ok(())
        }
        Command::Eval => {
            let s = evaluate_from_disk(&cfg)?;
            println!("detection AP {:.4}", s.detection.average_precision);
            for m in &s.models {
                println!(
                    "{}: {} instances, IoU-2D {:.4}, VSS {:.4}, ADD {:.4}",
                    m.model, m.instances, m.iou2d, m.vss, m.add
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Data(_) | Error::Io { .. } | Error::Json(_) => 3,
                Error::Domain(_) | Error::Contract(_) => 1,
            })
        }
    }
}
