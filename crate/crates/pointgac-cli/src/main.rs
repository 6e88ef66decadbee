//! Command line front end: every pipeline stage as a subcommand.
//!
//! Exit codes: 0 success, 1 validation/usage error, 2 runtime fault.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pointgac::codebook::utilization_export;
use pointgac::config::RunConfig;
use pointgac::data::{build_dataset, load_cloud, save_cloud};
use pointgac::diffcore::checkpoint::atomic_write;
use pointgac::error::Error;
use pointgac::geometry::{build_knn_graph, compute_geometric_features, potts_segmentation, PointCloud};
use pointgac::training::{
    linear_probe, model_grad_check, prepare_dataset, pretrain_loop, run_with_threads, TrainState,
};
use pointgac::transport::partition_pipeline;

const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (checkpoint format 1, cloud format 1)"
);

#[derive(Parser)]
#[command(name = "pointgac", version = VERSION, about = "Clustering-based masked point cloud pretraining")]
struct Cli {
    /// Worker threads (0 = all cores). 1 pins the determinism contract.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Potts-energy segmentation: read a cloud, write it back with labels.
    Segment {
        input: PathBuf,
        output: PathBuf,
        /// Partition coarseness.
        #[arg(long, default_value_t = 0.3)]
        mu: f64,
        /// Neighbor count for the point graph.
        #[arg(long, default_value_t = 16)]
        k: usize,
    },
    /// Partition a cloud into patches; writes `point_index patch_id` lines
    /// plus a JSON sidecar with centers and labels.
    Partition {
        input: PathBuf,
        output: PathBuf,
        /// Number of patches.
        #[arg(long, default_value_t = 32)]
        groups: usize,
        /// gap (geometry-aware) or knn (overlapping baseline).
        #[arg(long, default_value = "gap")]
        grouping: String,
        #[arg(long, default_value_t = 0.3)]
        mu: f64,
        #[arg(long, default_value_t = 16)]
        k: usize,
    },
    /// Pretrain on the synthetic dataset; writes checkpoints, metrics CSV,
    /// and utilization heatmaps under the output directory.
    Pretrain {
        #[command(flatten)]
        with_config: WithConfig,
        #[arg(long)]
        out: PathBuf,
        /// Override the mask ratio from the config file.
        #[arg(long)]
        mask_ratio: Option<f64>,
        /// Override the grouping strategy (gap|knn).
        #[arg(long)]
        grouping: Option<String>,
        /// Override the maintenance mode (meaningful|random|off).
        #[arg(long)]
        maintenance: Option<String>,
    },
    /// Linear probe of a pretrained checkpoint; prints accuracy.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        with_config: WithConfig,
        /// Probe a freshly initialized encoder instead of the checkpoint.
        #[arg(long, default_value_t = false)]
        random_init: bool,
    },
    /// Export the codebook utilization heatmap from a checkpoint.
    Heatmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        with_config: WithConfig,
        /// HxW grid, e.g. 16x32; must cover the codebook exactly.
        #[arg(long)]
        hw: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full-model gradient check on the micro configuration; nonzero exit
    /// on failure.
    Gradcheck {
        #[command(flatten)]
        with_config: WithConfig,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

#[derive(Args)]
struct WithConfig {
    /// Configuration file (flat `key = value` with [sections]); defaults
    /// apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl WithConfig {
    fn load(&self) -> Result<RunConfig, Error> {
        let mut config = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Ok(seed) = std::env::var("POINTGAC_SEED") {
            config.seed = seed
                .parse()
                .map_err(|_| Error::invalid(format!("POINTGAC_SEED=`{seed}` is not a u64")))?;
        }
        config.validate()?;
        Ok(config)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage error (exit 1, usage text included in the message).
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = cli.threads;
    let outcome = std::panic::catch_unwind(|| run_with_threads(threads, || dispatch(cli)));
    match outcome {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
        Err(_) => {
            eprintln!("error: runtime fault (panic)");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Segment { input, output, mu, k } => segment(&input, &output, mu, k),
        Command::Partition {
            input,
            output,
            groups,
            grouping,
            mu,
            k,
        } => partition(&input, &output, groups, &grouping, mu, k),
        Command::Pretrain {
            with_config,
            out,
            mask_ratio,
            grouping,
            maintenance,
        } => {
            let mut config = with_config.load()?;
            if let Some(r) = mask_ratio {
                config.mask_ratio = r;
            }
            if let Some(g) = &grouping {
                config.grouping = parse_grouping(g)?;
            }
            if let Some(m) = &maintenance {
                config.maintenance = parse_maintenance(m)?;
            }
            config.validate()?;
            pretrain(&config, &out)
        }
        Command::Probe {
            checkpoint,
            with_config,
            random_init,
        } => {
            let config = with_config.load()?;
            probe(&checkpoint, &config, random_init)
        }
        Command::Heatmap {
            checkpoint,
            with_config,
            hw,
            out,
        } => {
            let config = with_config.load()?;
            heatmap(&checkpoint, &config, &hw, &out)
        }
        Command::Gradcheck {
            with_config,
            tolerance,
        } => {
            let config = with_config.load()?;
            let report = model_grad_check(config.seed, 1e-5, tolerance)?;
            print!("{}", report.render());
            if report.pass {
                Ok(())
            } else {
                Err(Error::Fault("gradient check failed".into()))
            }
        }
    }
}

fn parse_grouping(s: &str) -> Result<pointgac::transport::Grouping, Error> {
    match s {
        "gap" => Ok(pointgac::transport::Grouping::Gap),
        "knn" => Ok(pointgac::transport::Grouping::Knn),
        other => Err(Error::invalid(format!("grouping must be gap or knn, got `{other}`"))),
    }
}

fn parse_maintenance(s: &str) -> Result<pointgac::codebook::MaintenanceMode, Error> {
    match s {
        "meaningful" => Ok(pointgac::codebook::MaintenanceMode::Meaningful),
        "random" => Ok(pointgac::codebook::MaintenanceMode::Random),
        "off" => Ok(pointgac::codebook::MaintenanceMode::Off),
        other => Err(Error::invalid(format!(
            "maintenance must be meaningful, random or off, got `{other}`"
        ))),
    }
}

fn segment(input: &Path, output: &Path, mu: f64, k: usize) -> Result<(), Error> {
    if mu <= 0.0 {
        return Err(Error::invalid("--mu must be positive"));
    }
    let cloud = load_cloud(input)?;
    cloud.validate()?;
    if k == 0 || k >= cloud.len() {
        return Err(Error::invalid(format!(
            "--k {k} must satisfy 1 <= k < N = {}",
            cloud.len()
        )));
    }
    let graph = build_knn_graph(&cloud, k)?;
    let features = compute_geometric_features(&cloud, &graph);
    let result = potts_segmentation(&features, &graph, mu, 1);
    let labeled = PointCloud::with_labels(cloud.points, result.labels);
    save_cloud(output, &labeled)?;
    println!(
        "segments: {}  energy: {:.6e}  merges: {}",
        result.num_segments,
        result.energy,
        result.trace.len() - 1
    );
    Ok(())
}

fn partition(
    input: &Path,
    output: &Path,
    groups: usize,
    grouping: &str,
    mu: f64,
    k: usize,
) -> Result<(), Error> {
    let cloud = load_cloud(input)?;
    cloud.validate()?;
    let config = pointgac::transport::PartitionConfig {
        grouping: parse_grouping(grouping)?,
        knn_k: k,
        mu,
        ..pointgac::transport::PartitionConfig::default()
    };
    let patches = partition_pipeline(&cloud, groups, &config)?;

    let mut body = String::new();
    for (i, &p) in patches.patch_of.iter().enumerate() {
        body.push_str(&format!("{i} {p}\n"));
    }
    atomic_write(output, body.as_bytes())?;

    let sidecar = serde_json::json!({
        "groups": patches.num_patches(),
        "overlapping": patches.overlapping,
        "centers": patches.centers,
        "center_indices": patches.center_indices,
        "center_labels": patches.center_labels,
        "patch_sizes": patches.patch_points.iter().map(|p| p.len()).collect::<Vec<_>>(),
    });
    let sidecar_path = output.with_extension("json");
    atomic_write(
        &sidecar_path,
        serde_json::to_string_pretty(&sidecar).unwrap().as_bytes(),
    )?;
    println!(
        "patches: {}  sidecar: {}",
        patches.num_patches(),
        sidecar_path.display()
    );
    Ok(())
}

fn pretrain(config: &RunConfig, out: &Path) -> Result<(), Error> {
    let manifest = build_dataset(config, &out.join("data"))?;
    let dataset = prepare_dataset(&manifest, config)?;
    let outcome = pretrain_loop(&dataset, config, out)?;
    let last = outcome.metrics.last().expect("at least one step");
    println!(
        "done: {} steps, final loss {:.6}, dead fraction (last epoch window) {:.4}",
        outcome.state.step, last.loss, outcome.final_epoch_dead_fraction
    );
    println!("checkpoint: {}", out.join("checkpoint.bin").display());
    Ok(())
}

fn probe(checkpoint: &Path, config: &RunConfig, random_init: bool) -> Result<(), Error> {
    let state = if random_init {
        TrainState::new(config.clone())?
    } else {
        TrainState::load(checkpoint, config)?
    };
    let manifest = build_dataset(config, &default_data_dir(checkpoint))?;
    let dataset = prepare_dataset(&manifest, config)?;
    let result = linear_probe(&state.student, config, &dataset)?;
    println!(
        "probe accuracy: {:.4} ({}/{})",
        result.accuracy, result.correct, result.total
    );
    Ok(())
}

/// The pretrain layout keeps data next to the checkpoint; probing a bare
/// checkpoint regenerates the dataset there.
fn default_data_dir(checkpoint: &Path) -> PathBuf {
    let dir = checkpoint.parent().unwrap_or_else(|| Path::new("."));
    dir.join("data")
}

fn heatmap(checkpoint: &Path, config: &RunConfig, hw: &str, out: &Path) -> Result<(), Error> {
    let (h, w) = hw
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| Error::invalid(format!("--hw expects HxW, got `{hw}`")))?;
    let state = TrainState::load(checkpoint, config)?;
    let cb = state
        .codebook
        .as_ref()
        .ok_or_else(|| Error::invalid("checkpoint has no codebook (no training step ran)"))?;
    utilization_export(cb, h, w, out)?;
    println!(
        "wrote {} and {}",
        out.display(),
        out.with_extension("csv").display()
    );
    Ok(())
}
