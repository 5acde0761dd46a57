use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use otfs_scma::scma::{AllocationScheme, ScmaCodebookSet};
use otfs_scma::sim::{records_to_csv, run_ber, BerRecord, Link, SimConfig, System};
use otfs_scma::{Error, Result};

#[derive(Parser)]
#[command(name = "otfs-scma", version, about = "Monte Carlo BER simulator for OTFS-SCMA links")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one system and print (or write) its BER curve as CSV.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Print the full records as JSON instead of CSV.
        #[arg(long)]
        json: bool,
    },
    /// Check a codebook file and print its dimensions.
    ValidateCodebook { path: PathBuf },
    /// Simulate several systems and write `{system}_P{P}.csv` for each path count.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        /// Systems to compare, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "otfs_scma,ofdm_scma")]
        systems: Vec<String>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct Overrides {
    /// JSON configuration; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "M")]
    m: Option<usize>,
    #[arg(long = "N")]
    n: Option<usize>,
    /// Path count(s), comma separated.
    #[arg(long = "P", value_delimiter = ',')]
    p: Option<Vec<usize>>,
    /// SNR grid as `start:stop:step` in dB, or a single value.
    #[arg(long)]
    snr: Option<String>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    link: Option<String>,
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    /// Give the MPA one noise level per equalized cell.
    #[arg(long)]
    per_cell_noise: bool,
}

impl Overrides {
    fn resolve(&self) -> Result<SimConfig> {
        let mut cfg = match &self.config {
            Some(path) => SimConfig::load(path)?,
            None => SimConfig::default(),
        };
        if let Some(m) = self.m {
            cfg.m = m;
        }
        if let Some(n) = self.n {
            cfg.n = n;
        }
        if let Some(p) = &self.p {
            cfg.paths = p.clone();
        }
        if let Some(snr) = &self.snr {
            cfg.snr_points = parse_snr(snr)?;
        }
        if let Some(frames) = self.frames {
            cfg.frames = frames;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(link) = &self.link {
            cfg.link = link.parse::<Link>()?;
        }
        if let Some(system) = &self.system {
            cfg.system = system.parse::<System>()?;
        }
        if let Some(scheme) = &self.scheme {
            cfg.scheme = scheme.parse::<AllocationScheme>()?;
        }
        if let Some(codebook) = &self.codebook {
            cfg.codebook = Some(codebook.clone());
        }
        cfg.per_cell_noise |= self.per_cell_noise;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_snr(text: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidConfig(format!("cannot parse SNR grid '{text}', expected start:stop:step"));
    let parts = text.split(':').map(|s| s.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>>>()?;
    match parts[..] {
        [v] => Ok(vec![v]),
        [start, stop, step] => {
            if !(step > 0.0 && stop >= start) {
                return Err(bad());
            }
            // Tolerate rounding in the step so the end point is kept.
            let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
            Ok((0..count).map(|i| start + step * i as f64).collect())
        }
        _ => Err(bad()),
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn run(overrides: &Overrides, output: Option<&Path>, json: bool) -> Result<()> {
    let cfg = overrides.resolve()?;
    let records = run_ber(&cfg)?;
    let text = if json { json_records(&records)? } else { records_to_csv(&records) };
    match output {
        Some(path) => write_file(path, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn json_records(records: &[BerRecord]) -> Result<String> {
    Ok(serde_json::to_string_pretty(records)? + "\n")
}

fn sweep(overrides: &Overrides, systems: &[String], out_dir: &Path) -> Result<()> {
    let base = overrides.resolve()?;
    let systems = systems.iter().map(|s| s.parse::<System>()).collect::<Result<Vec<_>>>()?;
    for system in &systems {
        SimConfig { system: *system, ..base.clone() }.validate()?;
    }
    std::fs::create_dir_all(out_dir).map_err(|source| Error::Io { path: out_dir.display().to_string(), source })?;
    for system in systems {
        for &p in &base.paths {
            let cfg = SimConfig { system, paths: vec![p], ..base.clone() };
            let path = out_dir.join(format!("{}_P{p}.csv", system.name()));
            write_file(&path, &records_to_csv(&run_ber(&cfg)?))?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn validate_codebook(path: &Path) -> Result<()> {
    let set = ScmaCodebookSet::load(path)?;
    println!(
        "J={} K={} A={} dv={} df={} overloading={:.0}%",
        set.users(),
        set.resources(),
        set.alphabet(),
        set.dv(),
        set.df(),
        100.0 * set.overloading()
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let outcome = match &cli.command {
        Command::Run { overrides, output, json } => run(overrides, output.as_deref(), *json),
        Command::ValidateCodebook { path } => validate_codebook(path),
        Command::Sweep { overrides, systems, out_dir } => sweep(overrides, systems, out_dir),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
