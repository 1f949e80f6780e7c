//! End-to-end acceptance gate. Each test prints one `PASS`/`FAIL` line.

mod gradient;
mod ncut;

use std::io::Write;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use hbdc::data::Shard;
use hbdc::datagen::{gen_dataset, shard_dataset, DatasetSpec};
use hbdc::fedtrain::{global_step, initial_params, site_update, train_from, TrainingConfig};
use hbdc::hashnet::{encode_params, mlp_spec, NetworkParams};
use hbdc::metrics::{nmi, purity};
use hbdc::pairloss::LossConfig;
use hbdc_cli::config::{default_config, Mode, PipelineConfig};
use hbdc_cli::pipeline::{input_dim, load_dataset, make_shards, run_pipeline, PipelineRun};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Timed criteria run one at a time so limits are not skewed by each other.
static SERIAL: Mutex<()> = Mutex::new(());

fn gate(
    id: u32,
    name: &str,
    limit: Option<Duration>,
    check: impl FnOnce() -> Result<String, String>,
) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = check();
    let elapsed = start.elapsed();
    let outcome = match (outcome, limit) {
        (Ok(_), Some(l)) if elapsed > l => Err(format!("took {elapsed:.1?}, limit {l:?}")),
        (o, _) => o,
    };
    let (status, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    // written to the handle directly so the line survives output capture
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{status} criterion {id} ({name}): {detail} [{elapsed:.1?}]"
    );
    let _ = out.flush();
    if let Err(detail) = outcome {
        panic!("criterion {id} failed: {detail}");
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn with(seed: u64, f: impl FnOnce(&mut PipelineConfig)) -> PipelineConfig {
    let mut cfg = default_config();
    cfg.seed = seed;
    f(&mut cfg);
    cfg
}

fn param_count_of(input: usize, hidden: &[usize], code_len: usize) -> u64 {
    let mut widths = vec![input];
    widths.extend_from_slice(hidden);
    widths.push(code_len);
    widths.windows(2).map(|w| (w[0] * w[1] + w[1]) as u64).sum()
}

/// Ledger against the closed form, the bound, and measured payload bits.
fn check_cost(cfg: &PipelineConfig, run: &PipelineRun) -> Result<(), String> {
    let ledger = &run.results.ledger;
    let m = cfg.sites as u64;
    let n = cfg.rounds as u64;
    let l = cfg.code_len as u64;
    let theta = param_count_of(
        input_dim(cfg).map_err(|e| e.to_string())?,
        &cfg.hidden,
        cfg.code_len,
    );
    let codes: Vec<u64> = run.site_books.iter().map(|b| b.len() as u64).collect();
    let expected = 32 * (2 * n + 1) * m * theta + codes.iter().map(|c| (32 + l) * c).sum::<u64>();
    let bound = 32 * (2 * n + 1) * m * theta + m * (32 + l) * (1 << l);
    let tag = format!("{} seed {} {:?}", cfg.name, cfg.seed, cfg.mode);
    ensure(ledger.total_bits == expected, || {
        format!("{tag}: ledger {} != formula {expected}", ledger.total_bits)
    })?;
    ensure(ledger.total_bits <= bound, || {
        format!("{tag}: ledger {} > bound {bound}", ledger.total_bits)
    })?;
    ensure(ledger.upper_bound_bits == bound, || {
        format!("{tag}: bound {} != {bound}", ledger.upper_bound_bits)
    })?;
    let measured = ledger
        .measured
        .ok_or_else(|| format!("{tag}: no measured traffic"))?;
    ensure(measured.counted_bits == ledger.total_bits, || {
        format!(
            "{tag}: measured {} != ledger {}",
            measured.counted_bits, ledger.total_bits
        )
    })
}

/// Degree sums and entry caps on every site and on the merged book.
fn check_conservation(cfg: &PipelineConfig, run: &PipelineRun) -> Result<(), String> {
    let data = load_dataset(cfg).map_err(|e| e.to_string())?;
    let shards = make_shards(cfg, &data).map_err(|e| e.to_string())?;
    let cube = 1usize << cfg.code_len;
    let tag = format!("{} seed {}", cfg.name, cfg.seed);
    for (book, shard) in run.site_books.iter().zip(&shards) {
        let total: u64 = book.entries.iter().map(|e| e.degree).sum();
        ensure(total == shard.len() as u64, || {
            format!("{tag} site {}: Σdeg {total} != {}", shard.site, shard.len())
        })?;
        ensure(book.len() <= cube.min(shard.len()), || {
            format!("{tag} site {}: {} entries", shard.site, book.len())
        })?;
    }
    let total: u64 = run.global_book.entries.iter().map(|e| e.degree).sum();
    ensure(total == data.len() as u64, || {
        format!("{tag}: global Σdeg {total} != {}", data.len())
    })?;
    ensure(run.global_book.len() <= cube.min(data.len()), || {
        format!("{tag}: {} global entries", run.global_book.len())
    })
}

/// Configurations that exercise the pipeline end to end without relying on
/// clustering quality: enough codes are guaranteed by a small `k`.
fn sweep_configs() -> Vec<PipelineConfig> {
    let mut out = Vec::new();
    for (i, (sites, code_len, rounds, hidden)) in [
        (4, 8, 10, vec![16, 16]),
        (2, 4, 5, vec![8]),
        (8, 6, 3, vec![]),
        (3, 10, 0, vec![12, 6]),
        (5, 12, 4, vec![16]),
    ]
    .into_iter()
    .enumerate()
    {
        for mode in [Mode::Sim, Mode::Wire] {
            out.push(with(10 + i as u64, |c| {
                c.name = format!("sweep{i}");
                c.sites = sites;
                c.code_len = code_len;
                c.rounds = rounds;
                c.hidden = hidden.clone();
                c.k = 1;
                c.mode = mode;
            }));
        }
    }
    out
}

#[test]
fn criterion_1_gradient_oracle() {
    gate(1, "gradient oracle", Some(Duration::from_secs(30)), || {
        let (worst, failed) = gradient::run(100);
        match failed {
            None => Ok(format!(
                "100 configurations, worst relative error {worst:.2e}"
            )),
            Some(seed) => Err(format!("configuration {seed} failed, worst {worst:.2e}")),
        }
    });
}

#[test]
fn criterion_2_ncut_oracle() {
    gate(2, "NCut oracle", Some(Duration::from_secs(60)), || {
        let planted = ncut::planted_agreement(100);
        let components = ncut::component_recovery(100);
        let detail = format!("planted {planted}/100, components {components}/100");
        ensure(planted >= 95 && components == 100, || detail.clone())?;
        Ok(detail)
    });
}

#[test]
fn criterion_3_cost_exactness() {
    gate(3, "cost exactness", None, || {
        let mut runs = 0;
        for cfg in sweep_configs() {
            let run = run_pipeline(&cfg).map_err(|e| format!("{}: {e:#}", cfg.name))?;
            check_cost(&cfg, &run)?;
            runs += 1;
        }
        for seed in 1..=4 {
            for mode in [Mode::Sim, Mode::Wire] {
                let cfg = with(seed, |c| {
                    c.k = 1;
                    c.mode = mode;
                });
                let run = run_pipeline(&cfg).map_err(|e| format!("default seed {seed}: {e:#}"))?;
                check_cost(&cfg, &run)?;
                runs += 1;
            }
        }
        Ok(format!(
            "{runs} runs match the closed form, bound and measured payloads"
        ))
    });
}

#[test]
fn criterion_4_desk_scale_clustering() {
    gate(
        4,
        "desk-scale clustering",
        Some(Duration::from_secs(120)),
        || {
            let mut passed = 0;
            let mut lines = Vec::new();
            for seed in 1..=4 {
                let cfg = with(seed, |_| {});
                match run_pipeline(&cfg) {
                    Ok(run) => {
                        let r = &run.results;
                        if r.purity >= 0.9 && r.nmi >= 0.8 {
                            passed += 1;
                        }
                        lines.push(format!(
                            "seed {seed}: purity {:.3} nmi {:.3} codes {}",
                            r.purity, r.nmi, r.n_codes
                        ));
                    }
                    Err(e) => lines.push(format!("seed {seed}: {e:#}")),
                }
            }
            let detail = format!(
                "{passed}/4 seeds reach purity 0.90 and NMI 0.80 ({})",
                lines.join("; ")
            );
            ensure(passed >= 3, || detail.clone())?;
            Ok(detail)
        },
    );
}

fn final_loss(seed: u64, sites: usize) -> Result<f64, String> {
    let cfg = with(seed, |c| c.sites = sites);
    let data = load_dataset(&cfg).map_err(|e| e.to_string())?;
    let shards = make_shards(&cfg, &data).map_err(|e| e.to_string())?;
    let init = initial_params(&cfg.network_spec(data.dim()), cfg.training_seed())
        .map_err(|e| e.to_string())?;
    let (_, history) = train_from(&shards, init, &cfg.training()).map_err(|e| e.to_string())?;
    history
        .losses()
        .last()
        .copied()
        .ok_or_else(|| "no rounds".into())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

#[test]
fn criterion_5_convergence_shape() {
    gate(5, "convergence shape", None, || {
        let cfg = default_config();
        let data = load_dataset(&cfg).map_err(|e| e.to_string())?;
        let shards = make_shards(&cfg, &data).map_err(|e| e.to_string())?;
        let init = initial_params(&cfg.network_spec(data.dim()), cfg.training_seed())
            .map_err(|e| e.to_string())?;
        let (_, history) = train_from(&shards, init, &cfg.training()).map_err(|e| e.to_string())?;
        let r = hbdc::fedtrain::rer(&history).map_err(|e| e.to_string())?;
        let last = *r.values.last().unwrap();
        let min = r.values.iter().copied().fold(f64::INFINITY, f64::min);
        ensure(last <= 0.2, || format!("final RER {last:.3}"))?;
        ensure(min == 0.0, || format!("min RER {min}"))?;

        let mut two = Vec::new();
        let mut eight = Vec::new();
        for seed in 1..=5 {
            two.push(final_loss(seed, 2)?);
            eight.push(final_loss(seed, 8)?);
        }
        let (m2, m8) = (median(two), median(eight));
        ensure(m8 <= m2, || {
            format!("median final loss 8 sites {m8:.4} > 2 sites {m2:.4}")
        })?;
        Ok(format!(
            "final RER {last:.3}, min 0; median final loss 8 sites {m8:.4} <= 2 sites {m2:.4}"
        ))
    });
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

fn relabel(labels: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let top = labels.iter().max().map_or(0, |m| m + 1);
    let mut ids: Vec<usize> = (0..top).map(|i| i * 3 + 7).collect();
    ids.shuffle(rng);
    labels.iter().map(|&l| ids[l]).collect()
}

#[test]
fn criterion_6_metric_hand_cases() {
    gate(6, "metric hand cases", None, || {
        let m = |r: hbdc::Result<f64>| r.map_err(|e| e.to_string());
        let truth = [0, 0, 1, 1, 2, 2];
        ensure(close(m(purity(&truth, &truth))?, 1.0), || {
            "purity identity".into()
        })?;
        ensure(close(m(purity(&[4, 4, 9, 9, 0, 0], &truth))?, 1.0), || {
            "purity relabeled identity".into()
        })?;
        let half = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        ensure(close(m(purity(&[0; 10], &half))?, 0.5), || {
            "purity single cluster".into()
        })?;
        ensure(
            close(
                m(purity(&[0, 0, 0, 1, 1, 1], &[0, 0, 1, 1, 1, 1]))?,
                5.0 / 6.0,
            ),
            || "purity 5/6".into(),
        )?;
        ensure(close(m(nmi(&truth, &truth))?, 1.0), || {
            "nmi identity".into()
        })?;
        let split = nmi(&[0, 0, 1, 1, 0, 0, 1, 1], &[0, 0, 0, 0, 1, 1, 1, 1]);
        ensure(close(m(split)?, 0.0), || "nmi independent".into())?;
        ensure(close(m(nmi(&[0; 6], &truth))?, 0.0), || {
            "nmi single cluster".into()
        })?;

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for trial in 0..50 {
            let n = rng.random_range(5..200);
            let kp = rng.random_range(1..6);
            let kt = rng.random_range(1..6);
            let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..kp)).collect();
            let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..kt)).collect();
            let (p, t) = (relabel(&pred, &mut rng), relabel(&truth, &mut rng));
            let base_p = m(purity(&pred, &truth))?;
            let base_n = m(nmi(&pred, &truth))?;
            ensure(close(m(purity(&p, &t))?, base_p), || {
                format!("purity relabeling {trial}")
            })?;
            ensure(close(m(nmi(&p, &t))?, base_n), || {
                format!("nmi relabeling {trial}")
            })?;
            ensure(close(m(nmi(&truth, &pred))?, base_n), || {
                format!("nmi symmetry {trial}")
            })?;
            ensure((0.0..=1.0).contains(&base_n), || {
                format!("nmi bound {trial}")
            })?;
        }
        Ok("7 hand cases to 1e-12, 50 relabelings invariant".into())
    });
}

fn trajectory(
    shards: &[Shard],
    init: &NetworkParams,
    cfg: &TrainingConfig,
) -> hbdc::Result<Vec<Vec<u64>>> {
    let mut params = init.clone();
    let bits = |p: &NetworkParams| p.values.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
    let mut out = vec![bits(&params)];
    for round in 0..cfg.n_rounds {
        let payload = encode_params(&params);
        let grads = shards
            .iter()
            .map(|s| site_update(s, &payload, cfg, round).map(|u| u.gradient_payload))
            .collect::<hbdc::Result<Vec<_>>>()?;
        params = global_step(&params, &grads, cfg.learning_rate)?;
        out.push(bits(&params));
    }
    Ok(out)
}

#[test]
fn criterion_7_protocol_equivalence() {
    gate(7, "protocol equivalence", None, || {
        let e = |err: hbdc::Error| err.to_string();
        let data = gen_dataset(&DatasetSpec::uniform(3, 8, 2, 60, 21)).map_err(e)?;
        let base = shard_dataset(&data, 1, 10, 4).map_err(e)?.remove(0);
        let init = initial_params(&mlp_spec(8, &[8, 8], 6), 5).map_err(e)?;
        let cfg = |sites| TrainingConfig {
            n_rounds: 15,
            n_sites: sites,
            batch_size: 16,
            learning_rate: 0.05,
            loss: LossConfig::default(),
            seed: 9,
        };
        let single = trajectory(std::slice::from_ref(&base), &init, &cfg(1)).map_err(e)?;
        for m in [2, 3, 4, 7, 8] {
            let copies: Vec<Shard> = (0..m)
                .map(|site| Shard {
                    site,
                    ..base.clone()
                })
                .collect();
            let many = trajectory(&copies, &init, &cfg(m)).map_err(e)?;
            ensure(single == many, || {
                format!("{m} identical shards diverge from single-site training")
            })?;
        }

        let mut compared = 0;
        for seed in 1..=4 {
            for k in [1, 4] {
                let sim = run_pipeline(&with(seed, |c| c.k = k));
                let wire = run_pipeline(&with(seed, |c| {
                    c.k = k;
                    c.mode = Mode::Wire;
                }));
                match (sim, wire) {
                    (Ok(s), Ok(w)) => {
                        let tag = format!("seed {seed} k {k}");
                        ensure(s.params.values == w.params.values, || {
                            format!("{tag}: parameters differ")
                        })?;
                        ensure(s.labels == w.labels, || format!("{tag}: labels differ"))?;
                        ensure(s.results.purity == w.results.purity, || {
                            format!("{tag}: purity differs")
                        })?;
                        ensure(s.results.nmi == w.results.nmi, || {
                            format!("{tag}: nmi differs")
                        })?;
                        ensure(
                            s.results.ledger.measured.map(|t| t.counted_bits)
                                == w.results.ledger.measured.map(|t| t.counted_bits),
                            || format!("{tag}: counted bits differ"),
                        )?;
                        compared += 1;
                    }
                    (Err(s), Err(w)) => ensure(s.to_string() == w.to_string(), || {
                        format!("seed {seed}: {s} vs {w}")
                    })?,
                    (s, w) => {
                        return Err(format!(
                            "seed {seed} k {k}: sim ok {} wire ok {}",
                            s.is_ok(),
                            w.is_ok()
                        ))
                    }
                }
            }
        }
        ensure(compared >= 4, || {
            format!("only {compared} sim/wire pairs completed")
        })?;
        Ok(format!(
            "trajectories bitwise equal for M in 2..8; {compared} sim/wire pairs identical"
        ))
    });
}

#[test]
fn criterion_8_codebook_conservation() {
    gate(8, "codebook conservation", None, || {
        let mut configs = sweep_configs();
        configs.extend((1..=4).map(|seed| with(seed, |c| c.k = 1)));
        configs.push(with(3, |c| {
            c.name = "tiny-code".into();
            c.code_len = 2;
            c.k = 1;
        }));
        for cfg in &configs {
            let run =
                run_pipeline(cfg).map_err(|e| format!("{} seed {}: {e:#}", cfg.name, cfg.seed))?;
            check_conservation(cfg, &run)?;
        }
        Ok(format!(
            "{} runs conserve degrees and respect min(2^L, n)",
            configs.len()
        ))
    });
}
