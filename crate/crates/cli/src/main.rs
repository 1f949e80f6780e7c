use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use hbdc::metrics::{nmi, purity};
use hbdc_cli::pipeline::{generate, run_pipeline, serve_global, serve_site, write_run, RunResults};
use hbdc_cli::report::write_report;
use hbdc_cli::{default_config, Mode, PipelineConfig};

#[derive(Parser)]
#[command(name = "hbdc", version, about = "Hashing-based distributed clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON pipeline config; the built-in default is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> anyhow::Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => default_config(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as CSV plus a manifest.
    Generate(Common),
    /// Run training, encoding and clustering end to end.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
    },
    /// Tabulate results JSON files into CSV.
    Report {
        results: Vec<PathBuf>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the global site of a multi-process wire session.
    Global {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
    },
    /// Run one sub-site of a multi-process wire session.
    Site {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: String,
        #[arg(long)]
        site: usize,
    },
}

fn out_dir(cfg: &PipelineConfig, fallback: &str) -> PathBuf {
    cfg.out
        .clone()
        .unwrap_or_else(|| Path::new("runs").join(fallback))
}

fn main() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Generate(common) => {
            let cfg = common.load()?;
            let dir = out_dir(&cfg, &cfg.name);
            let m = generate(&cfg, &dir)?;
            println!(
                "wrote {} rows to {}",
                m.n_samples,
                dir.join("dataset.csv").display()
            );
        }
        Command::Pipeline { common, mode } => {
            let mut cfg = common.load()?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            let run = run_pipeline(&cfg)?;
            let dir = out_dir(&cfg, &format!("{}-{}", cfg.name, cfg.seed));
            write_run(&cfg, &run, &dir)?;
            let r = &run.results;
            println!(
                "purity {:.4}  nmi {:.4}  codes {}  total {} bits  -> {}",
                r.purity,
                r.nmi,
                r.n_codes,
                r.ledger.total_bits,
                dir.join("results.json").display()
            );
        }
        Command::Report { results, out } => {
            let runs = results
                .iter()
                .map(|p| {
                    let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
                    serde_json::from_reader(f).with_context(|| format!("parsing {}", p.display()))
                })
                .collect::<anyhow::Result<Vec<RunResults>>>()?;
            match out {
                Some(p) => write_report(&runs, BufWriter::new(File::create(p)?))?,
                None => write_report(&runs, std::io::stdout().lock())?,
            }
        }
        Command::Global { common, listen } => {
            let cfg = common.load()?;
            let report = serve_global(&cfg, listen.as_str())?;
            let dir = out_dir(&cfg, &format!("{}-{}", cfg.name, cfg.seed));
            std::fs::create_dir_all(&dir)?;
            serde_json::to_writer_pretty(File::create(dir.join("global.json"))?, &report)?;
            println!(
                "codes {}  total {} bits",
                report.n_codes, report.ledger.total_bits
            );
        }
        Command::Site {
            common,
            connect,
            site,
        } => {
            let cfg = common.load()?;
            let (shard, result) = serve_site(&cfg, connect.as_str(), site)?;
            let dir = out_dir(&cfg, &format!("{}-{}", cfg.name, cfg.seed));
            std::fs::create_dir_all(&dir)?;
            let mut w = csv::Writer::from_path(dir.join(format!("site-{site}.csv")))?;
            w.write_record(["row", "cluster", "label"])?;
            for ((row, c), t) in shard.indices.iter().zip(&result.labels).zip(&shard.labels) {
                w.write_record([row.to_string(), c.to_string(), t.to_string()])?;
            }
            w.flush()?;
            println!(
                "site {site}: {} samples, local purity {:.4}, local nmi {:.4}",
                shard.len(),
                purity(&result.labels, &shard.labels)?,
                nmi(&result.labels, &shard.labels)?
            );
        }
    }
    Ok(())
}
