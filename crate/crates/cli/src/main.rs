use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use airecon::geometry::CameraIntrinsics;
use airecon::meshing::{export_ply, marching_cubes, ISO_LEVEL};
use airecon::nbv::PlannerMethod;
use airecon::pipeline::{
    load_field, render_checkpoint, resume_active_loop, run_ablation, run_active_loop,
    run_comparison, AblationKind, RunConfig, RunCurve, StepReport,
};

/// Active implicit reconstruction with next-best-view planning.
#[derive(Parser)]
#[command(name = "airecon", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the active reconstruction loop.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        method: Option<PlannerMethod>,
        /// Continue from a checkpoint directory (`<out>/checkpoints/round_NNN`).
        #[arg(long, conflicts_with_all = ["config", "smoke"])]
        resume: Option<PathBuf>,
    },
    /// Run several planners on the same scenes and seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated planner names.
        #[arg(long, value_delimiter = ',', default_value = "optimized,candidate,random")]
        methods: Vec<PlannerMethod>,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Paired runs with and without one component.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// free-ray, pose-refinement, topnt-vs-sum or init-strategy.
        #[arg(long)]
        kind: AblationKind,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Extract a mesh from a saved field.
    Mesh {
        /// Checkpoint directory or field file.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 128)]
        resolution: usize,
        #[arg(long, default_value_t = ISO_LEVEL)]
        iso: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render color and depth images of a saved field.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        azimuth: f64,
        #[arg(long, allow_hyphen_values = true)]
        elevation: f64,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
        #[arg(long, default_value_t = 128)]
        width: u32,
        #[arg(long, default_value_t = 128)]
        height: u32,
        #[arg(long, default_value_t = 24.0)]
        fov: f64,
        #[arg(long, default_value_t = 128)]
        samples: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration as TOML.
    Config {
        #[arg(long)]
        smoke: bool,
    },
}

#[derive(Args)]
struct Common {
    /// TOML configuration; missing keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the reduced quick-check configuration.
    #[arg(long)]
    smoke: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Builtin scene name or scene TOML path.
    #[arg(long)]
    scene: Option<String>,
    /// Number of views to capture.
    #[arg(long)]
    views: Option<usize>,
    /// Use one worker thread.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None if self.smoke => RunConfig::smoke(),
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(s) = &self.scene {
            cfg.run.scene = s.clone();
        }
        if let Some(v) = self.views {
            cfg.run.max_views = v;
        }
        if self.deterministic {
            cfg.run.deterministic = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_reports(reports: &[StepReport]) {
    println!("round views coverage entropy_bits floaters loss next_az_deg next_el_deg train_s plan_s");
    for r in reports {
        let m = &r.metrics;
        let (az, el) = r
            .nbv
            .as_ref()
            .map(|n| (n.view.azimuth.to_degrees(), n.view.elevation.to_degrees()))
            .unwrap_or((f64::NAN, f64::NAN));
        println!(
            "{:5} {:5} {:8.4} {:12.5} {:8.5} {:8.5} {:11.1} {:11.1} {:7.1} {:6.1}",
            m.round,
            m.views,
            m.coverage,
            m.entropy_bits,
            m.floater_fraction,
            m.loss,
            az,
            el,
            r.timings.train,
            r.timings.plan
        );
    }
}

fn print_curves(curves: &[RunCurve]) {
    println!("variant seed final_coverage final_entropy_bits");
    for c in curves {
        if let Some(last) = c.rows.last() {
            println!("{} {} {:.4} {:.5}", c.label, c.seed, last.coverage, last.entropy_bits);
        }
    }
}

fn seeds_or_default(seeds: Vec<u64>, cfg: &RunConfig) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.run.seed]
    } else {
        seeds
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            common,
            method,
            resume,
        } => {
            let reports = if let Some(ckpt) = resume {
                resume_active_loop(&ckpt, Some(&common.out))?
            } else {
                let mut cfg = common.config()?;
                if let Some(m) = method {
                    cfg.run.method = m;
                }
                run_active_loop(&cfg, Some(&common.out))?
            };
            print_reports(&reports);
            println!("outputs written to {}", common.out.display());
        }
        Command::Compare {
            common,
            methods,
            seeds,
        } => {
            let cfg = common.config()?;
            if methods.len() < 2 {
                bail!("--methods needs at least two planners");
            }
            let seeds = seeds_or_default(seeds, &cfg);
            let curves = run_comparison(&cfg, &methods, &seeds, Some(&common.out))?;
            print_curves(&curves);
        }
        Command::Ablate {
            common,
            kind,
            seeds,
        } => {
            let cfg = common.config()?;
            let seeds = seeds_or_default(seeds, &cfg);
            let curves = run_ablation(kind, &cfg, &seeds, Some(&common.out))?;
            print_curves(&curves);
        }
        Command::Mesh {
            checkpoint,
            resolution,
            iso,
            out,
        } => {
            let field = load_field(&checkpoint)?;
            let mesh = marching_cubes(&field, resolution, iso, true)?;
            export_ply(&mesh, &out)?;
            println!(
                "{} vertices, {} triangles written to {}",
                mesh.vertices.len(),
                mesh.triangles.len(),
                out.display()
            );
        }
        Command::Render {
            checkpoint,
            azimuth,
            elevation,
            radius,
            width,
            height,
            fov,
            samples,
            out,
        } => {
            let field = load_field(&checkpoint)?;
            let intr = CameraIntrinsics::from_fov(width, height, fov)?;
            let view = airecon::geometry::SphericalView {
                azimuth: azimuth.to_radians(),
                elevation: elevation.to_radians(),
                radius,
                center: field_center(&field),
            };
            let cap = render_checkpoint(&field, &view, &intr, samples, &out)?;
            println!(
                "{} of {} pixels with depth; images written to {}",
                cap.num_valid(),
                intr.num_pixels(),
                out.display()
            );
        }
        Command::Config { smoke } => {
            let cfg = if smoke { RunConfig::smoke() } else { RunConfig::default() };
            print!("{}", cfg.to_toml());
        }
    }
    Ok(())
}

fn field_center(field: &airecon::field::Field) -> airecon::geometry::Vec3 {
    use airecon::field::OccupancyField;
    field.aabb().center()
}
