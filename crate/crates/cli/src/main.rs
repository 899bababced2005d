//! `vertplan`: phantoms, shape models, radiographs, two-view fitting and
//! pedicle trajectory planning from the command line.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Category, CliError};
use crate::manifest::RunContext;

#[derive(Debug, Parser)]
#[command(name = "vertplan", version, about = "Two-view vertebra fitting and pedicle trajectory planning")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// TOML configuration with one section per module.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Force deterministic execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Views as `camera.json:image.pgm:landmarks.csv`; image and landmarks
    /// may be left empty.
    #[arg(long = "views", global = true, num_args = 1.., value_delimiter = ',')]
    views: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom family: training shapes and posed held-out cases.
    Phantom,
    /// Build a shape model from corresponded training meshes.
    BuildSsm {
        /// Directory of `.ply` training shapes.
        #[arg(long)]
        training: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Render a two-view pair with projected landmarks and trajectory lines.
    Drr {
        /// Posed mesh (world coordinates).
        #[arg(long)]
        mesh: Option<PathBuf>,
        /// Vertex annotations for `--mesh`.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Shape model; with `--params` renders that instance instead.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Fit pose and shape to the given views.
    Fit {
        #[arg(long)]
        model: PathBuf,
        /// Start from these parameters instead of landmark initialisation.
        #[arg(long)]
        init_params: Option<PathBuf>,
        /// View labels (`ap`, `lat`) enabling the backup initialisation.
        #[arg(long, value_delimiter = ',')]
        labels: Vec<String>,
    },
    /// Plan both trajectories from fitted parameters.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        params: PathBuf,
    },
    /// Triangulate trajectories from 2D line annotations in two views.
    Geoplan {
        /// One line-annotation file per view, in `--views` order.
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        lines: Vec<PathBuf>,
    },
    /// Score reconstructions and compare planned trajectories.
    Eval {
        /// Ground-truth mesh.
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Reconstructed mesh to compare volumetrically.
        #[arg(long)]
        estimate: Option<PathBuf>,
        /// Vertex annotations of the truth mesh (pedicle points).
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// `name=trajectories.json`; repeatable.
        #[arg(long = "plan")]
        plans: Vec<String>,
        /// Directory of `case_*` directories. Truth, estimate and plan paths
        /// are then relative to each case; missing estimates or plans count
        /// as absent.
        #[arg(long)]
        cases: Option<PathBuf>,
    },
    /// Draw planned cannulas into a radiograph.
    Overlay {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long, num_args = 1.., value_delimiter = ',')]
        trajectories: Vec<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom => "phantom",
            Command::BuildSsm { .. } => "build-ssm",
            Command::Drr { .. } => "drr",
            Command::Fit { .. } => "fit",
            Command::Plan { .. } => "plan",
            Command::Geoplan { .. } => "geoplan",
            Command::Eval { .. } => "eval",
            Command::Overlay { .. } => "overlay",
        }
    }
}

fn effective_config(g: &GlobalArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if g.deterministic {
        cfg.deterministic = true;
        cfg.fit.deterministic = true;
    }
    Ok(cfg)
}

fn run(cli: Cli, args: Vec<String>) -> Result<(), CliError> {
    let config = effective_config(&cli.global)?;
    let out_dir = cli
        .global
        .out_dir
        .clone()
        .ok_or_else(|| CliError::new(Category::Usage, "--out-dir is required"))?;
    let mut ctx = RunContext::new(cli.command.name(), args, config, out_dir)?;
    if let Some(p) = &cli.global.config {
        ctx.input(p)?;
    }
    let result = dispatch(&mut ctx, &cli);
    ctx.finish(&result)?;
    result
}

fn dispatch(ctx: &mut RunContext, cli: &Cli) -> Result<(), CliError> {
    let views = commands::parse_views(&cli.global.views)?;
    match &cli.command {
        Command::Phantom => commands::data::phantom(ctx),
        Command::BuildSsm { training, annotations } => commands::data::build_ssm(ctx, training, annotations),
        Command::Drr {
            mesh,
            annotations,
            model,
            params,
        } => commands::data::drr(ctx, mesh.as_deref(), annotations.as_deref(), model.as_deref(), params.as_deref()),
        Command::Fit {
            model,
            init_params,
            labels,
        } => commands::fit::fit(ctx, model, &views, init_params.as_deref(), labels),
        Command::Plan { model, params } => commands::plan::plan(ctx, model, params),
        Command::Geoplan { lines } => commands::plan::geoplan(ctx, &views, lines),
        Command::Eval {
            truth,
            estimate,
            annotations,
            plans,
            cases,
        } => commands::eval::eval(
            ctx,
            &commands::eval::EvalInputs {
                truth: truth.clone(),
                estimate: estimate.clone(),
                annotations: annotations.clone(),
                plans: plans.clone(),
            },
            cases.as_deref(),
        ),
        Command::Overlay {
            image,
            camera,
            trajectories,
        } => commands::plan::overlay(ctx, image, camera, trajectories),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let cli = Cli::parse();
    match run(cli, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.category.exit_code() as u8)
        }
    }
}
