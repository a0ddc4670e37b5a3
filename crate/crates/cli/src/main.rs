//! Command line front end: run scenarios, verify run directories, print
//! model benchmarks, export the bundled presets.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use icsim_core::engine::World;
use icsim_core::scenario::{presets, ScenarioConfig};

mod bench;
mod manifest;
mod verify;

#[derive(Parser)]
#[command(name = "icsim", version, about = "Infection-control ledger simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write the evidence bundle to a directory.
    Run {
        /// Preset name (demo, tracing-sweep, adversary-suite) or a TOML path.
        scenario: String,
        /// Output directory; defaults to runs/<scenario name>.
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Upload every record alone instead of folding groups into one
        /// aggregate signature.
        #[arg(long)]
        no_aggregation: bool,
        /// Publish raw key lists in status blocks instead of filters.
        #[arg(long)]
        no_bloom: bool,
        /// Skip the journal on stdout.
        #[arg(short, long)]
        quiet: bool,
    },
    /// Re-check a run directory: trace digest, traffic accounting, chain
    /// links and leader signatures.
    Verify { dir: PathBuf },
    /// Print the cost tables implied by the operation model.
    Bench {
        /// Also time the real group arithmetic on this machine.
        #[arg(long)]
        wall_clock: bool,
    },
    /// Write the bundled presets as editable TOML files.
    Export {
        /// Output directory; defaults to scenarios/.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn load_scenario(name: &str) -> Result<ScenarioConfig> {
    match name {
        "demo" => Ok(presets::demo()),
        "tracing-sweep" => Ok(presets::tracing_sweep()),
        "adversary-suite" => Ok(presets::adversary_suite()),
        other => {
            let path = Path::new(other);
            if !path.exists() {
                bail!(
                    "no preset or file named {other}; presets are demo, \
                     tracing-sweep, adversary-suite"
                );
            }
            ScenarioConfig::from_path(path)
                .with_context(|| format!("loading scenario from {}", path.display()))
        }
    }
}

fn cmd_run(
    scenario: String,
    out: Option<PathBuf>,
    seed: Option<u64>,
    no_aggregation: bool,
    no_bloom: bool,
    quiet: bool,
) -> Result<()> {
    let mut config = load_scenario(&scenario)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if no_aggregation {
        config.policy.aggregation = false;
    }
    if no_bloom {
        config.policy.bloom = false;
    }
    let out = out.unwrap_or_else(|| PathBuf::from("runs").join(&config.name));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let report = World::new(config)?.run();

    fs::write(out.join("trace.bin"), report.trace.to_bytes())?;
    fs::write(out.join("comm.csv"), report.comm.to_csv())?;
    fs::write(out.join("compute.csv"), report.compute.to_csv())?;
    fs::write(out.join("storage.csv"), report.storage.to_csv())?;
    fs::write(out.join("status_chain.txt"), &report.status_chain_hex)?;
    fs::write(out.join("zone_chain.txt"), &report.zone_chain_hex)?;
    let summary = report.summary();
    fs::write(out.join("summary.txt"), &summary)?;
    let manifest = manifest::Manifest::from_report(&report);
    fs::write(out.join("manifest.toml"), manifest.to_toml()?)?;

    if quiet {
        for line in summary.lines().take_while(|l| *l != "journal:") {
            println!("{line}");
        }
    } else {
        print!("{summary}");
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_export(out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| PathBuf::from("scenarios"));
    fs::create_dir_all(&out)?;
    for preset in presets::all() {
        let path = out.join(format!("{}.toml", preset.name));
        fs::write(&path, preset.to_toml_string())?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            scenario,
            out,
            seed,
            no_aggregation,
            no_bloom,
            quiet,
        } => cmd_run(scenario, out, seed, no_aggregation, no_bloom, quiet),
        Command::Verify { dir } => verify::cmd_verify(&dir),
        Command::Bench { wall_clock } => {
            bench::cmd_bench(wall_clock);
            Ok(())
        }
        Command::Export { out } => cmd_export(out),
    }
}
