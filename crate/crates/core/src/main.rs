use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedlab::experiment::{
    compare_paths, format_comparison, load_config, partition_stats, run_experiment,
    write_comparison_csv, SeedContext, Snapshot,
};
use fedlab::flatness::{
    interpolate_1d, landscape_2d, local_global_eigs, write_eigs_csv, write_interp_csv,
    write_landscape_csv, LandscapeSpec, PowerIterConfig,
};
use fedlab::{Error, Result};

#[derive(Parser)]
#[command(name = "fedlab", version, about = "Federated optimization sweeps and flatness diagnostics")]
struct Cli {
    /// Worker threads for the sweep (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every strategy and seed of a config.
    Run {
        config: PathBuf,
        /// Run only this master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare metrics files (or run directories) against FedAvg.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// 2D loss landscape around a snapshot's global model.
    Landscape {
        snapshot: PathBuf,
        #[arg(long, default_value_t = 21)]
        resolution: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        test: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dominant Hessian eigenvalue of each last-round client model on its own
    /// shard and on the full train set.
    Eigs {
        snapshot: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Loss and accuracy along the line through two snapshots' models.
    Interpolate {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 31)]
        points: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label statistics of a config's client partition.
    PartitionStats {
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn out_or(out: Option<PathBuf>, snapshot: &Path, name: &str) -> PathBuf {
    out.unwrap_or_else(|| snapshot.with_file_name(name))
}

fn context(snap: &Snapshot) -> Result<SeedContext> {
    SeedContext::build(&snap.config, snap.seed)
}

fn execute(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let report = run_experiment(&cfg)?;
            for row in report.summary.iter().filter(|r| r.seed == "mean") {
                println!(
                    "{:<16} final_acc {:>7} lambda1 {:>9} bits {:>12}",
                    row.label,
                    row.final_acc.map_or("-".into(), |a| format!("{a:.4}")),
                    row.lambda1.map_or("-".into(), |l| format!("{l:.4}")),
                    row.bits_total.map_or("-".into(), |b| format!("{b:.0}")),
                );
            }
            let divergences = report.divergences();
            for (label, seed, ev) in &divergences {
                eprintln!("diverged: {label} seed {seed} at round {}: {}", ev.round, ev.reason);
            }
            println!("results in {}", cfg.output_dir.display());
            Ok(divergences.is_empty())
        }
        Command::Compare { runs, out } => {
            let rows = compare_paths(&runs)?;
            print!("{}", format_comparison(&rows));
            if let Some(path) = out {
                write_comparison_csv(&path, &rows)?;
            }
            Ok(true)
        }
        Command::Landscape {
            snapshot,
            resolution,
            seed,
            test,
            out,
        } => {
            let snap = Snapshot::load(&snapshot)?;
            let ctx = context(&snap)?;
            let obj = if test { ctx.test_objective()? } else { ctx.train_objective()? };
            let spec = LandscapeSpec {
                resolution,
                extent: 1.0,
                seed,
            };
            let grid = landscape_2d(&obj, &snap.state.server.w, &ctx.arch.layer_segments(), &spec)?;
            let path = out_or(out, &snapshot, "landscape.csv");
            write_landscape_csv(&path, &grid)?;
            println!("center loss {:.6}; wrote {}", grid.center_loss(), path.display());
            Ok(true)
        }
        Command::Eigs { snapshot, out } => {
            let snap = Snapshot::load(&snapshot)?;
            let ctx = context(&snap)?;
            let clients = ctx.client_objectives()?;
            let train = ctx.train_objective()?;
            let cfg = PowerIterConfig {
                seed: snap.seed,
                ..snap.config.diagnostics.power_iter.clone()
            };
            let rows = local_global_eigs(&snap.state.last_client_models, &clients, &train, &cfg)?;
            println!("{:>6} {:>14} {:>14}", "client", "lambda1_local", "lambda1_global");
            for r in &rows {
                println!("{:>6} {:>14.6} {:>14.6}", r.client, r.lambda_local, r.lambda_global);
            }
            write_eigs_csv(&out_or(out, &snapshot, "eigs.csv"), &rows)?;
            Ok(true)
        }
        Command::Interpolate { a, b, points, out } => {
            let (sa, sb) = (Snapshot::load(&a)?, Snapshot::load(&b)?);
            if sa.seed != sb.seed || sa.config.data != sb.config.data {
                return Err(Error::Config("snapshots were trained on different data".into()));
            }
            let ctx = context(&sa)?;
            let curve = interpolate_1d(&ctx.train_objective()?, &sa.state.server.w, &sb.state.server.w, points)?;
            for p in &curve {
                println!("{:>7.3} {:>10.6} {:>8}", p.gamma, p.loss, p.accuracy.map_or("-".into(), |x| format!("{x:.4}")));
            }
            write_interp_csv(&out_or(out, &a, "interpolation.csv"), &curve)?;
            Ok(true)
        }
        Command::PartitionStats { config, seed } => {
            let cfg = load_config(&config)?;
            let stats = partition_stats(&cfg, seed)?;
            println!(
                "clients {}  alpha {}  shard {}  classes/client {:.3}  label entropy {:.4}",
                stats.num_clients,
                stats.alpha,
                stats.shard_size,
                stats.mean_classes_per_client,
                stats.mean_label_entropy
            );
            for (k, h) in stats.histograms.iter().enumerate() {
                println!("client {k:>4}: {h:?}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Validation(_) | Error::Toml(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
