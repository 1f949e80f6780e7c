use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use hbdc::codebook::{
    codes_payload_bits, encode_codebook, encode_shard, merge_codebooks, Codebook,
};
use hbdc::data::{Dataset, Shard};
use hbdc::datagen::{gen_dataset, shard_dataset};
use hbdc::fedtrain::{initial_params, payload_value_bits, rer, train_from, Rer, TrainingHistory};
use hbdc::hashnet::{decode_params, encode_params, param_count, HashCode, NetworkParams};
use hbdc::metrics::{
    nmi, nmi_unnormalized_product, purity, total_cost_bits, CostLedger, MeasuredTraffic,
};
use hbdc::spectral::{build_graph, propagate_labels, spectral_cluster, Partition};
use hbdc::wire::{accept_sites, run_site, GlobalSession, SiteResult};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSource, Mode, PipelineConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTiming {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResults {
    pub name: String,
    pub seed: u64,
    pub mode: Mode,
    pub n_samples: usize,
    pub purity: f64,
    pub nmi: f64,
    pub nmi_unnormalized_product: f64,
    pub rer_series: Vec<f64>,
    pub rer_degenerate: bool,
    pub loss_series: Vec<f64>,
    pub ledger: CostLedger,
    pub n_codes: usize,
    pub cluster_sizes: Vec<usize>,
    pub timings: Vec<PhaseTiming>,
}

/// Everything a run produces; `results` is what gets written as JSON.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub results: RunResults,
    /// Cluster label per sample, in dataset order.
    pub labels: Vec<usize>,
    pub truth: Vec<usize>,
    pub params: NetworkParams,
    pub history: TrainingHistory,
    pub site_books: Vec<Codebook>,
    pub global_book: Codebook,
    pub partition: Partition,
}

struct Timer(Vec<PhaseTiming>, Instant);

impl Timer {
    fn new() -> Self {
        Self(Vec::new(), Instant::now())
    }

    fn lap(&mut self, phase: &str) {
        let now = Instant::now();
        self.0.push(PhaseTiming {
            phase: phase.into(),
            seconds: (now - self.1).as_secs_f64(),
        });
        self.1 = now;
    }
}

pub fn load_dataset(cfg: &PipelineConfig) -> anyhow::Result<Dataset> {
    match &cfg.dataset {
        DatasetSource::Generate(_) => {
            let spec = cfg.dataset_spec().expect("generate source");
            Ok(gen_dataset(&spec)?)
        }
        DatasetSource::Csv(path) => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            Ok(Dataset::read_csv(BufReader::new(f))?)
        }
    }
}

/// Feature dimension without materializing the dataset.
pub fn input_dim(cfg: &PipelineConfig) -> anyhow::Result<usize> {
    match &cfg.dataset {
        DatasetSource::Generate(g) => Ok(g.ambient_dim),
        DatasetSource::Csv(path) => {
            let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
            let mut header = String::new();
            BufReader::new(f).read_line(&mut header)?;
            let cols = header.trim_end().split(',').count();
            if cols < 2 {
                bail!("{} has no feature columns", path.display());
            }
            Ok(cols - 1)
        }
    }
}

pub fn make_shards(cfg: &PipelineConfig, data: &Dataset) -> anyhow::Result<Vec<Shard>> {
    Ok(shard_dataset(
        data,
        cfg.sites,
        cfg.min_per_site,
        cfg.shard_seed(),
    )?)
}

fn check_conservation(book: &Codebook, n: usize) -> anyhow::Result<()> {
    if book.total_degree() != n as u64 {
        bail!(
            "codebook degrees sum to {}, expected {n}",
            book.total_degree()
        );
    }
    let cap = 1usize
        .checked_shl(book.code_len as u32)
        .unwrap_or(usize::MAX)
        .min(n);
    if book.len() > cap {
        bail!(
            "codebook holds {} entries, at most {cap} possible",
            book.len()
        );
    }
    Ok(())
}

/// Merges site codebooks and clusters the code graph.
pub fn cluster_codes(
    books: &[Codebook],
    k: usize,
    seed: u64,
) -> anyhow::Result<(Codebook, Partition)> {
    let global = merge_codebooks(books).context("merge")?;
    let graph = build_graph(&global).context("graph")?;
    let partition = spectral_cluster(&graph, k, seed).context("spectral clustering")?;
    Ok((global, partition))
}

pub fn cluster_table(global: &Codebook, partition: &Partition) -> Vec<(HashCode, usize)> {
    global
        .entries
        .iter()
        .zip(&partition.labels)
        .map(|(e, &c)| (e.code.clone(), c))
        .collect()
}

struct Trained {
    params: NetworkParams,
    history: TrainingHistory,
    site_books: Vec<Codebook>,
    global: Codebook,
    partition: Partition,
    site_labels: Vec<Vec<usize>>,
    measured: MeasuredTraffic,
}

fn run_sim(
    cfg: &PipelineConfig,
    shards: &[Shard],
    init: NetworkParams,
    timer: &mut Timer,
) -> anyhow::Result<Trained> {
    let tcfg = cfg.training();
    let (params, history) = train_from(shards, init, &tcfg).context("training")?;
    timer.lap("train");

    // sites hash with the broadcast copy, as in wire mode
    let final_payload = encode_params(&params);
    let received = decode_params(&final_payload)?;
    let encoded = shards
        .iter()
        .map(|s| encode_shard(&received, s))
        .collect::<hbdc::Result<Vec<_>>>()
        .context("encode")?;
    let mut measured = MeasuredTraffic {
        counted_bits: history.total_bits()
            + payload_value_bits(&final_payload)? * shards.len() as u64,
        physical_bits: history.total_physical_bits()
            + (final_payload.len() * 8 * shards.len()) as u64,
    };
    for (book, _) in &encoded {
        let bytes = encode_codebook(book)?;
        measured.counted_bits += codes_payload_bits(&bytes, book.code_len)?;
        measured.physical_bits += (bytes.len() * 8) as u64;
    }
    timer.lap("encode");

    let site_books: Vec<Codebook> = encoded.iter().map(|(b, _)| b.clone()).collect();
    let (global, partition) = cluster_codes(&site_books, cfg.k, cfg.cluster_seed())?;
    timer.lap("cluster");
    let site_labels = propagate_labels(&partition, &global, &encoded).context("propagate")?;
    timer.lap("propagate");
    Ok(Trained {
        params,
        history,
        site_books,
        global,
        partition,
        site_labels,
        measured,
    })
}

fn run_wire(
    cfg: &PipelineConfig,
    shards: &[Shard],
    init: NetworkParams,
    timer: &mut Timer,
) -> anyhow::Result<Trained> {
    let tcfg = cfg.training();
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    std::thread::scope(|scope| {
        let handles: Vec<_> = shards
            .iter()
            .map(|shard| {
                let tcfg = &tcfg;
                scope.spawn(move || -> hbdc::Result<SiteResult> {
                    let stream = TcpStream::connect(addr)?;
                    stream.set_nodelay(true)?;
                    run_site(stream, shard, tcfg)
                })
            })
            .collect();

        let global = (|| -> anyhow::Result<_> {
            let streams = accept_sites(&listener, shards.len())?;
            let mut session = GlobalSession::handshake(streams)?;
            let trained = session.train_and_collect(init, &tcfg).context("training")?;
            let (global, partition) =
                cluster_codes(&trained.site_books, cfg.k, cfg.cluster_seed())?;
            let measured = session.finish(&cluster_table(&global, &partition))?;
            Ok((trained, global, partition, measured))
        })();

        let sites = handles
            .into_iter()
            .map(|h| h.join().map_err(|_| anyhow!("site thread panicked")))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let (trained, global, partition, measured) = global?;
        let site_labels = sites
            .into_iter()
            .map(|r| r.map(|s| s.labels).context("site"))
            .collect::<anyhow::Result<Vec<_>>>()?;
        timer.lap("train+encode+cluster");
        Ok(Trained {
            params: trained.params,
            history: trained.history,
            site_books: trained.site_books,
            global,
            partition,
            site_labels,
            measured,
        })
    })
}

/// Runs the whole pipeline for `cfg` in its configured mode.
pub fn run_pipeline(cfg: &PipelineConfig) -> anyhow::Result<PipelineRun> {
    cfg.validate()?;
    let mut timer = Timer::new();
    let data = load_dataset(cfg).context("dataset")?;
    timer.lap("dataset");
    let shards = make_shards(cfg, &data).context("sharding")?;
    timer.lap("shard");
    let init =
        initial_params(&cfg.network_spec(data.dim()), cfg.training_seed()).context("init")?;

    let trained = match cfg.mode {
        Mode::Sim => run_sim(cfg, &shards, init, &mut timer)?,
        Mode::Wire => run_wire(cfg, &shards, init, &mut timer)?,
    };

    for (book, shard) in trained.site_books.iter().zip(&shards) {
        check_conservation(book, shard.len()).with_context(|| format!("site {}", shard.site))?;
    }
    check_conservation(&trained.global, data.len()).context("global codebook")?;

    let mut labels = vec![usize::MAX; data.len()];
    for (shard, site) in shards.iter().zip(&trained.site_labels) {
        for (&row, &l) in shard.indices.iter().zip(site) {
            labels[row] = l;
        }
    }
    let truth = data.labels.clone();
    let pur = purity(&labels, &truth)?;
    let nm = nmi(&labels, &truth)?;
    let nmi_raw = nmi_unnormalized_product(&labels, &truth)?;
    let r = if trained.history.rounds.is_empty() {
        Rer {
            values: Vec::new(),
            degenerate: true,
        }
    } else {
        rer(&trained.history).context("convergence")?
    };

    let codes_per_site: Vec<usize> = trained.site_books.iter().map(|b| b.len()).collect();
    let mut ledger = total_cost_bits(
        cfg.sites,
        param_count(&trained.params),
        cfg.rounds,
        &codes_per_site,
        cfg.code_len,
    );
    ledger.measured = Some(trained.measured);
    let mut cluster_sizes = vec![0usize; cfg.k];
    labels.iter().for_each(|&l| cluster_sizes[l] += 1);
    timer.lap("metrics");

    Ok(PipelineRun {
        results: RunResults {
            name: cfg.name.clone(),
            seed: cfg.seed,
            mode: cfg.mode,
            n_samples: data.len(),
            purity: pur,
            nmi: nm,
            nmi_unnormalized_product: nmi_raw,
            rer_series: r.values,
            rer_degenerate: r.degenerate,
            loss_series: trained.history.losses(),
            ledger,
            n_codes: trained.global.len(),
            cluster_sizes,
            timings: timer.0,
        },
        labels,
        truth,
        params: trained.params,
        history: trained.history,
        site_books: trained.site_books,
        global_book: trained.global,
        partition: trained.partition,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w =
        BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub n_samples: usize,
    pub dim: usize,
    pub dataset_seed: u64,
    pub spec: Option<hbdc::datagen::DatasetSpec>,
}

/// Writes `dataset.csv` and `manifest.json` into `dir`.
pub fn generate(cfg: &PipelineConfig, dir: &Path) -> anyhow::Result<Manifest> {
    std::fs::create_dir_all(dir)?;
    let data = load_dataset(cfg)?;
    let f = File::create(dir.join("dataset.csv"))?;
    data.write_csv(BufWriter::new(f))?;
    let manifest = Manifest {
        name: cfg.name.clone(),
        n_samples: data.len(),
        dim: data.dim(),
        dataset_seed: cfg.dataset_seed(),
        spec: cfg.dataset_spec(),
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Writes config, manifest, results and per-sample labels into `dir`.
pub fn write_run(cfg: &PipelineConfig, run: &PipelineRun, dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("config.json"), cfg)?;
    write_json(
        &dir.join("manifest.json"),
        &Manifest {
            name: cfg.name.clone(),
            n_samples: run.results.n_samples,
            dim: run.params.input_dim(),
            dataset_seed: cfg.dataset_seed(),
            spec: cfg.dataset_spec(),
        },
    )?;
    write_json(&dir.join("results.json"), &run.results)?;
    let mut w = csv::Writer::from_path(dir.join("labels.csv"))?;
    w.write_record(["row", "cluster", "label"])?;
    for (i, (c, t)) in run.labels.iter().zip(&run.truth).enumerate() {
        w.write_record([i.to_string(), c.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Summary written by a standalone global process.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GlobalReport {
    pub name: String,
    pub seed: u64,
    pub loss_series: Vec<f64>,
    pub rer_series: Vec<f64>,
    pub ledger: CostLedger,
    pub n_codes: usize,
    pub code_cluster_sizes: Vec<u64>,
}

/// Global end of a multi-process wire run.
pub fn serve_global(
    cfg: &PipelineConfig,
    listen: impl ToSocketAddrs,
) -> anyhow::Result<GlobalReport> {
    cfg.validate()?;
    let listener = TcpListener::bind(listen)?;
    let init = initial_params(&cfg.network_spec(input_dim(cfg)?), cfg.training_seed())?;
    let streams = accept_sites(&listener, cfg.sites)?;
    let mut session = GlobalSession::handshake(streams)?;
    let trained = session.train_and_collect(init, &cfg.training())?;
    let (global, partition) = cluster_codes(&trained.site_books, cfg.k, cfg.cluster_seed())?;
    let measured = session.finish(&cluster_table(&global, &partition))?;
    let codes_per_site: Vec<usize> = trained.site_books.iter().map(|b| b.len()).collect();
    let mut ledger = total_cost_bits(
        cfg.sites,
        param_count(&trained.params),
        cfg.rounds,
        &codes_per_site,
        cfg.code_len,
    );
    ledger.measured = Some(measured);
    let mut code_cluster_sizes = vec![0u64; cfg.k];
    for (e, &c) in global.entries.iter().zip(&partition.labels) {
        code_cluster_sizes[c] += e.degree;
    }
    Ok(GlobalReport {
        name: cfg.name.clone(),
        seed: cfg.seed,
        loss_series: trained.history.losses(),
        rer_series: if trained.history.rounds.is_empty() {
            Vec::new()
        } else {
            rer(&trained.history)?.values
        },
        ledger,
        n_codes: global.len(),
        code_cluster_sizes,
    })
}

/// Sub-site end of a multi-process wire run. Every site regenerates or
/// reloads the dataset and keeps only its own shard.
pub fn serve_site(
    cfg: &PipelineConfig,
    connect: impl ToSocketAddrs,
    site: usize,
) -> anyhow::Result<(Shard, SiteResult)> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let shard = make_shards(cfg, &data)?
        .into_iter()
        .nth(site)
        .ok_or_else(|| anyhow!("site {site} out of range for {} sites", cfg.sites))?;
    let stream = TcpStream::connect(connect)?;
    stream.set_nodelay(true)?;
    let result = run_site(stream, &shard, &cfg.training())?;
    Ok((shard, result))
}
