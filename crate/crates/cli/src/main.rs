//! `volest`: batch front end for the volume estimation pipeline.
//!
//! Exit codes: 0 success, 2 invalid input, 3 pipeline failure. Errors are
//! printed to stderr as a single line starting with `error:`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "volest",
    version,
    about = "Food volume estimation from posed frames and masks"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every random draw (surface sampling).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads; output does not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Carving grid size along the longest box axis.
    #[arg(long, global = true, default_value_t = vole_core::reconstruction::DEFAULT_RESOLUTION)]
    pub resolution: usize,
    /// Fraction of masked views a point or voxel must satisfy.
    #[arg(long, global = true, default_value_t = 1.0)]
    pub quota: f64,
}

#[derive(Args, Debug, Clone)]
pub struct RefineArgs {
    /// Taubin λ/μ step pairs.
    #[arg(long, default_value_t = 5)]
    pub smooth_iters: usize,
    #[arg(long, default_value_t = 0.5)]
    pub smooth_lambda: f64,
    #[arg(long, default_value_t = -0.53, allow_hyphen_values = true)]
    pub taubin_mu: f64,
    /// Vertex-clustering cell in meters; 0 disables simplification.
    #[arg(long, default_value_t = 0.0)]
    pub simplify_cell: f64,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum SolidArg {
    Sphere,
    Box,
    Cylinder,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Full pipeline on a manifest: align, mask, carve, refine, measure.
    Run {
        manifest: PathBuf,
        /// Output directory for clouds, meshes and the report.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        refine: RefineArgs,
        /// Drop the worst tenth of AR correspondences and re-fit.
        #[arg(long)]
        trimmed_alignment: bool,
    },
    /// Write an analytic scene with known volume.
    Synth {
        #[arg(long, value_enum)]
        kind: SolidArg,
        /// Sphere or cylinder radius in meters.
        #[arg(long, default_value_t = 0.05)]
        radius: f64,
        /// Box edge lengths in meters, as x,y,z.
        #[arg(long, value_parser = parse_extents, default_value = "0.04,0.05,0.06")]
        extents: [f64; 3],
        /// Cylinder height in meters.
        #[arg(long, default_value_t = 0.08)]
        height: f64,
        #[arg(long, default_value_t = 64)]
        views: usize,
        /// Image size in pixels, as WxH.
        #[arg(long, value_parser = parse_size, default_value = "1024x1024")]
        image_size: (u32, u32),
        /// Re-express poses and cloud with this scale (and a fixed
        /// rotation and offset), as an SfM reconstruction would.
        #[arg(long)]
        gauge_scale: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Isolate the object's points; writes the metric, masked cloud.
    Mask {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Carve and extract a watertight surface.
    Reconstruct {
        manifest: PathBuf,
        /// Metric masked cloud giving the carving extent; masked from the
        /// manifest's cloud when absent.
        #[arg(long)]
        cloud: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simplify and smooth a mesh.
    Refine {
        mesh: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        refine: RefineArgs,
    },
    /// Integrate a mesh's enclosed volume.
    Volume {
        mesh: PathBuf,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate per-item predictions against ground truth.
    Evaluate {
        /// Directory holding `<item>.json` prediction files.
        #[arg(long)]
        predictions: PathBuf,
        /// Ground-truth document listing the items.
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = vole_core::metrics::DEFAULT_CHAMFER_SAMPLES)]
        chamfer_samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reduce a manifest's frames by interval or perceptual hash.
    SelectFrames {
        manifest: PathBuf,
        #[arg(long, conflicts_with = "hamming", required_unless_present = "hamming")]
        skip: Option<usize>,
        /// Keep a frame when its hash differs from the last kept one in at
        /// least this many bits.
        #[arg(long)]
        hamming: Option<u32>,
        /// Output directory for the filtered manifest.
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_extents(s: &str) -> Result<[f64; 3], String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(v).map_err(|_| "expected three comma-separated lengths".to_string())
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s.split_once('x').ok_or("expected WxH")?;
    let parse = |p: &str| p.parse::<u32>().map_err(|e| format!("{p:?}: {e}"));
    Ok((parse(w)?, parse(h)?))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or_default();
            eprintln!("error: {}", first.strip_prefix("error: ").unwrap_or(first));
            return ExitCode::from(2);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<vole_core::Error>()) {
        Some(core) if !core.is_input_error() => 3,
        _ => 2,
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.common.threads {
        anyhow::ensure!(n >= 1, "--threads must be at least 1");
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let c = &cli.common;
    match cli.command {
        Command::Run {
            manifest,
            out,
            refine,
            trimmed_alignment,
        } => commands::run(c, &manifest, &out, &refine, trimmed_alignment),
        Command::Synth {
            kind,
            radius,
            extents,
            height,
            views,
            image_size,
            gauge_scale,
            out,
        } => {
            let solid = match kind {
                SolidArg::Sphere => vole_core::SyntheticSolid::sphere(radius),
                SolidArg::Box => vole_core::SyntheticSolid::cuboid(extents[0], extents[1], extents[2]),
                SolidArg::Cylinder => vole_core::SyntheticSolid::cylinder(radius, height),
            };
            commands::synth(c, &solid, views, image_size, gauge_scale, &out)
        }
        Command::Mask { manifest, out } => commands::mask(c, &manifest, &out),
        Command::Reconstruct { manifest, cloud, out } => commands::reconstruct(c, &manifest, cloud.as_deref(), &out),
        Command::Refine { mesh, out, refine } => commands::refine(&mesh, &out, &refine),
        Command::Volume { mesh, out } => commands::volume(&mesh, out.as_deref()),
        Command::Evaluate {
            predictions,
            gt,
            chamfer_samples,
            out,
        } => commands::evaluate(c, &predictions, &gt, chamfer_samples, out.as_deref()),
        Command::SelectFrames {
            manifest,
            skip,
            hamming,
            out,
        } => commands::select_frames(&manifest, skip, hamming, &out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_parsers() {
        assert_eq!(parse_size("640x480"), Ok((640, 480)));
        assert!(parse_size("640").is_err());
        assert!(parse_size("ax2").is_err());
        assert_eq!(parse_extents("0.1, 0.2,0.3"), Ok([0.1, 0.2, 0.3]));
        assert!(parse_extents("0.1,0.2").is_err());
    }

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let input = anyhow::Error::new(vole_core::Error::EmptyList);
        assert_eq!(exit_code(&input), 2);
        let failure = anyhow::Error::new(vole_core::Error::EmptyGrid).context("reconstruct");
        assert_eq!(exit_code(&failure), 3);
        assert_eq!(exit_code(&anyhow::anyhow!("plain")), 2);
    }
}
