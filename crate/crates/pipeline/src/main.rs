use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dci_pipeline::io::Layout;
use dci_pipeline::run::{self, Inversion, TvReport};
use dci_pipeline::simulate::simulate;
use dci_pipeline::{PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "dci", version, about = "Data-consistent inversion from noisy time-series data")]
struct Cli {
    /// TOML config; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate wave-equation data sets at the config's data paths.
    Simulate,
    /// Filter predicted and observed data and write the filtered values.
    Filter,
    /// Filter, cluster and learn QoI maps; saves a state for `apply-obs`.
    Learn,
    /// Run the configured stages through a single inversion.
    Invert,
    /// Run the configured stages through the iteration over time steps.
    Iterate,
    /// Invert a new observed data set against a saved state.
    ApplyObs {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        observed: PathBuf,
        /// `shared`, or `per-row:<dim>` for per-row coordinates.
        #[arg(long, default_value = "shared", value_parser = parse_layout)]
        layout: Layout,
        /// Samples of the reference distribution, for TV scores.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Check whether the filtered coordinate set is sufficient.
    Sufficiency,
    /// Write density grids for a saved state's final weights.
    ExportDensities {
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
    },
}

fn parse_layout(s: &str) -> Result<Layout, String> {
    match s.split_once(':') {
        None if s == "shared" => Ok(Layout::Shared),
        Some(("per-row", d)) => d.parse().ok().filter(|&d| d > 0).map(|dim| Layout::PerRow { dim }).ok_or_else(|| format!("bad dimension `{d}`")),
        _ => Err(format!("unknown layout `{s}`, expected `shared` or `per-row:<dim>`")),
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => {
            let mut c = PipelineConfig::default();
            c.resolve_paths(Path::new("."));
            c
        }
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    Ok(cfg)
}

fn print_inversion(inv: &Inversion, tv: Option<&TvReport>) {
    for c in &inv.clusters {
        let d = c.diagnostic.map_or("-".to_string(), |d| format!("{d:.4}"));
        println!("cluster {}: members {}, observed {}, weight {:.4}, diagnostic {d}", c.cluster, c.members, c.observed, c.weight);
    }
    println!("diagnostic {:.4}, significance {:.4}", inv.diagnostic, inv.significance);
    if let Some(t) = tv {
        if let Some(j) = t.joint {
            println!("tv joint {j:.4}");
        }
        println!("tv marginals {:?}", t.marginals.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>());
    }
}

fn list(files: &[PathBuf]) {
    for f in files {
        println!("wrote {}", f.display());
    }
}

fn execute(cli: &Cli) -> Result<(), PipelineError> {
    match &cli.command {
        Command::Simulate => {
            let f = simulate(&load_config(cli)?)?;
            list(&[vec![f.params, f.predicted], f.observed, f.reference].concat());
        }
        Command::Filter => {
            let mut cfg = load_config(cli)?;
            cfg.stages.filter = true;
            list(&run::filter_only(&cfg)?);
        }
        Command::Learn | Command::Invert | Command::Iterate => {
            let mut cfg = load_config(cli)?;
            cfg.data.slice = cfg.base_slice();
            let s = &mut cfg.stages;
            (s.invert, s.iterate) = match cli.command {
                Command::Learn => (false, false),
                Command::Invert => (true, false),
                _ => (false, true),
            };
            let summary = run::run(&cfg)?;
            list(&summary.files);
            if let Some(inv) = &summary.inversion {
                print_inversion(inv, summary.inversion_tv.as_ref());
            }
            for rec in &summary.iterations {
                println!("step {}: {:?}, d {}, diagnostic {:.4}", rec.label, rec.decision, rec.d_used, rec.diagnostic);
            }
        }
        Command::ApplyObs { state, observed, layout, reference } => {
            let out = cli.out.clone().unwrap_or_else(|| state.parent().unwrap_or(Path::new(".")).join("apply"));
            let (report, files) = run::apply_and_write(state, observed, *layout, reference.as_deref(), &out)?;
            list(&files);
            print_inversion(&report.inversion, report.tv.as_ref());
        }
        Command::Sufficiency => {
            let cfg = load_config(cli)?;
            let report = run::sufficiency(&cfg)?;
            let path = cfg.output.dir.join("sufficiency.csv");
            run::write_sufficiency(&path, &report)?;
            list(&[path]);
            println!("sufficient: {}", report.pass);
        }
        Command::ExportDensities { state, reference } => {
            let out = cli.out.clone().unwrap_or_else(|| state.parent().unwrap_or(Path::new(".")).to_path_buf());
            list(&run::export_densities(state, reference.as_deref(), &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
