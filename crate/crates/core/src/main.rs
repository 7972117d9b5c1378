use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::error;

use loopfield::features::FeatureBackend;
use loopfield::pipeline::{cmd_check, cmd_pipeline, cmd_stage, Failure, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "loopfield", version, about = "Looping 3D cinemagraphs from Gaussian splatting clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print scene diagnostics (point count, bbox, eccentricity, mask coverage, voxels).
    Check(Overrides),
    /// Embed dynamic Gaussians into feature space.
    Features(Overrides),
    /// Group dynamic Gaussians into SuperGaussians.
    Cluster(Overrides),
    /// Estimate the sparse, kriged and neural motion field.
    Field(Overrides),
    /// Integrate the field into loop-closed PLY frames.
    Animate(Overrides),
    /// Render every frame from every camera to PNG.
    Render(Overrides),
    /// Run all stages, reusing valid caches.
    Pipeline(Overrides),
    /// Print the effective configuration as JSON.
    Config(Overrides),
}

#[derive(Args)]
struct Overrides {
    /// JSON config file; relative paths inside it are resolved against its directory.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    cameras: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long, value_parser = parse_backend)]
    feature_backend: Option<FeatureBackend>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    pe_frequencies: Option<usize>,
    /// Hidden layer sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sh_degree_render: Option<usize>,
    /// Output size as WIDTHxHEIGHT.
    #[arg(long, value_parser = parse_resolution)]
    resolution: Option<[usize; 2]>,
    /// Fixed ψ vector "x,y,z", bypassing (ω/T)·e^{−h}.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    psi_override: Option<Vec<f64>>,
}

enum Action {
    Check,
    Pipeline,
    PrintConfig,
    Stage(Stage),
}

fn parse_backend(s: &str) -> Result<FeatureBackend, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown backend `{s}` (expected autoencoder or handcrafted)"))
}

fn parse_resolution(s: &str) -> Result<[usize; 2], String> {
    let (w, h) = s.split_once('x').ok_or("expected WIDTHxHEIGHT")?;
    Ok([w.parse().map_err(|_| "bad width")?, h.parse().map_err(|_| "bad height")?])
}

impl Overrides {
    fn resolve(self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
            None => PipelineConfig::default(),
        };
        macro_rules! set {
            ($($field:ident => $target:expr),* $(,)?) => {
                $(if let Some(v) = self.$field { $target = v; })*
            };
        }
        set!(
            input => cfg.input_ply,
            output_dir => cfg.output_dir,
            lambda => cfg.lambda,
            mu => cfg.mu,
            omega => cfg.omega,
            frames => cfg.frames,
            feature_backend => cfg.feature_backend,
            feature_dim => cfg.feature_dim,
            pe_frequencies => cfg.pe_frequencies,
            hidden => cfg.hidden,
            sh_degree_render => cfg.sh_degree_render,
            resolution => cfg.resolution,
        );
        if let Some(m) = self.mask {
            cfg.mask_path = Some(m);
        }
        if let Some(c) = self.cameras {
            cfg.cameras_path = Some(c);
        }
        if let Some(seed) = self.seed {
            cfg.seeds.features = seed;
            cfg.seeds.cluster = seed.wrapping_add(1);
            cfg.seeds.field = seed.wrapping_add(2);
        }
        if let Some(p) = self.psi_override {
            cfg.psi_override = Some([p[0], p[1], p[2]]);
        }
        Ok(cfg)
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("LOOPFIELD_THREADS") {
        let n: usize = v.parse().with_context(|| format!("LOOPFIELD_THREADS={v} is not a number"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn report(failure: Failure) -> ExitCode {
    error!("{failure}");
    eprintln!("error: {failure}");
    ExitCode::from(failure.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let (action, overrides) = match cli.command {
        Command::Check(o) => (Action::Check, o),
        Command::Pipeline(o) => (Action::Pipeline, o),
        Command::Config(o) => (Action::PrintConfig, o),
        Command::Features(o) => (Action::Stage(Stage::Features), o),
        Command::Cluster(o) => (Action::Stage(Stage::Cluster), o),
        Command::Field(o) => (Action::Stage(Stage::Field), o),
        Command::Animate(o) => (Action::Stage(Stage::Animate), o),
        Command::Render(o) => (Action::Stage(Stage::Render), o),
    };
    let cfg = match overrides.resolve() {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let result = match action {
        Action::PrintConfig => {
            println!("{}", cfg.to_json());
            Ok(())
        }
        Action::Check => cmd_check(&cfg).map(|r| println!("{r}")),
        Action::Stage(stage) => cmd_stage(stage, &cfg).map(|status| println!("{stage}: {status}")),
        Action::Pipeline => cmd_pipeline(&cfg).map(|statuses| {
            for (stage, status) in statuses {
                println!("{stage}: {status}");
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}
