//! Subcommand implementations.
//!
//! Every run directory receives the fully resolved config, a provenance
//! record (crate version, config fingerprint, seed) and the command's
//! outputs, which together reproduce the run bit for bit.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use serde::Serialize;

use gdnorm_core::checkpoint::{load_checkpoint, load_path, save_checkpoint, save_path};
use gdnorm_core::config::{Baseline, ExperimentConfig};
use gdnorm_core::datagen::{
    gen_domains, read_dataset_jsonl, write_dataset_jsonl, DomainDataset, GenOutput, RetrievalSplit,
};
use gdnorm_core::error::{GdError, Result};
use gdnorm_core::evalkit::{
    eval_ensemble, eval_mean_path, eval_path, eval_single_path, path_spread, sweep_lambda,
    EnsembleSpec, RetrievalResult,
};
use gdnorm_core::gdnorm::{estimate_gp, mean_path, sample_path, BnPath};
use gdnorm_core::hashing::fnv1a64_hex;
use gdnorm_core::model::EmbedNet;
use gdnorm_core::repro::{run_suite, Suite};
use gdnorm_core::rng::{streams, Rng};
use gdnorm_core::train::{train, TrainerKind};

use crate::{CommonOpts, OutputFormat, TrainerArg};

/// Resolve config file, seed precedence (flag > env > file) and out dir.
fn resolve(common: &CommonOpts, default_out: &str) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Ok(env_seed) = std::env::var("GDNORM_SEED") {
        cfg.train.seed = env_seed
            .parse()
            .map_err(|_| GdError::Config(format!("GDNORM_SEED is not a u64: {env_seed:?}")))?;
    }
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    // The generator follows the training seed unless the config pinned its
    // own data seed explicitly different from the default.
    if common.seed.is_some() || std::env::var("GDNORM_SEED").is_ok() {
        cfg.data.generator.seed = cfg.train.seed;
    }
    cfg.validate()?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from(default_out));
    std::fs::create_dir_all(&out)?;
    Ok((cfg, out))
}

#[derive(Serialize)]
struct Provenance<'a> {
    crate_version: &'a str,
    config_hash: String,
    seed: u64,
    command: &'a str,
}

fn persist_run_metadata(cfg: &ExperimentConfig, out: &Path, command: &str) -> Result<String> {
    let resolved = cfg.canonical_json()?;
    std::fs::write(out.join("resolved_config.json"), &resolved)?;
    let hash = cfg.fingerprint()?;
    let prov = Provenance {
        crate_version: env!("CARGO_PKG_VERSION"),
        config_hash: hash.clone(),
        seed: cfg.train.seed,
        command,
    };
    std::fs::write(
        out.join("provenance.json"),
        serde_json::to_string_pretty(&prov)?,
    )?;
    Ok(hash)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Load datasets from a `gen` output directory, or generate them in memory.
fn load_or_generate(cfg: &ExperimentConfig, data_dir: Option<&Path>) -> Result<GenOutput> {
    let dir = data_dir.or(cfg.data.dir.as_deref());
    match dir {
        Some(dir) => {
            let mut sources = Vec::new();
            for k in 0.. {
                let path = dir.join(format!("domain_{k}.jsonl"));
                if !path.exists() {
                    break;
                }
                sources.push(read_dataset_jsonl(&path)?);
            }
            if sources.len() < 2 {
                return Err(GdError::contract(format!(
                    "{} holds {} source datasets, need at least 2 (domain_<k>.jsonl)",
                    dir.display(),
                    sources.len()
                )));
            }
            let held_out = read_dataset_jsonl(&dir.join("held_out.jsonl"))?;
            Ok(GenOutput { sources, held_out })
        }
        None => gen_domains(&cfg.data.generator),
    }
}

fn union_ids(sources: &[DomainDataset]) -> usize {
    sources.iter().map(|d| d.ids.len()).sum()
}

fn build_net(cfg: &ExperimentConfig, sources: &[DomainDataset]) -> Result<EmbedNet> {
    let slots = match cfg.train.trainer {
        TrainerKind::Gdnorm => {
            if cfg.train.allow_degenerate_gp {
                1
            } else {
                sources.len()
            }
        }
        TrainerKind::SharedBn | TrainerKind::SharedBnMatched => 1,
    };
    let mut init_rng = Rng::with_stream(cfg.train.seed, streams::INIT);
    EmbedNet::new(
        cfg.arch.clone(),
        slots,
        union_ids(sources),
        cfg.train.bn_eps,
        cfg.train.bn_momentum,
        &mut init_rng,
    )
}

// ── gen ──────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct ManifestFile {
    file: String,
    domain: usize,
    samples: usize,
    identities: usize,
    fnv64: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: u32,
    generator: &'a gdnorm_core::datagen::GeneratorSpec,
    files: Vec<ManifestFile>,
}

pub fn cmd_gen(common: &CommonOpts) -> Result<ExitCode> {
    let (cfg, out) = resolve(common, "runs/gen")?;
    persist_run_metadata(&cfg, &out, "gen")?;
    let data = gen_domains(&cfg.data.generator)?;
    let mut files = Vec::new();
    let mut record = |name: String, ds: &DomainDataset| -> Result<()> {
        let path = out.join(&name);
        write_dataset_jsonl(&path, ds)?;
        files.push(ManifestFile {
            file: name,
            domain: ds.domain_id,
            samples: ds.samples.len(),
            identities: ds.ids.len(),
            fnv64: fnv1a64_hex(&std::fs::read(&path)?),
        });
        Ok(())
    };
    for (k, ds) in data.sources.iter().enumerate() {
        record(format!("domain_{k}.jsonl"), ds)?;
    }
    record("held_out.jsonl".into(), &data.held_out)?;
    let manifest = Manifest {
        version: 1,
        generator: &cfg.data.generator,
        files,
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "wrote {} source domains + 1 held-out domain to {}",
        data.sources.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

// ── train ────────────────────────────────────────────────────────────

pub fn cmd_train(
    common: &CommonOpts,
    data_dir: Option<&Path>,
    epochs: Option<usize>,
    trainer: Option<TrainerArg>,
) -> Result<ExitCode> {
    let (mut cfg, out) = resolve(common, "runs/train")?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    if let Some(t) = trainer {
        cfg.train.trainer = match t {
            TrainerArg::Gdnorm => TrainerKind::Gdnorm,
            TrainerArg::SharedBn => TrainerKind::SharedBn,
            TrainerArg::SharedBnMatched => TrainerKind::SharedBnMatched,
        };
    }
    let config_hash = persist_run_metadata(&cfg, &out, "train")?;
    let data = load_or_generate(&cfg, data_dir)?;
    let mut net = build_net(&cfg, &data.sources)?;
    let report = train(&mut net, &data.sources, &cfg.train)?;

    write_jsonl(&out.join("metrics.jsonl"), &report.steps)?;
    write_jsonl(&out.join("epochs.jsonl"), &report.epochs)?;
    save_checkpoint(&out.join("checkpoint.gdn"), &net, &config_hash)?;
    let paths_dir = out.join("paths");
    std::fs::create_dir_all(&paths_dir)?;
    let gp = estimate_gp(&net, true)?;
    save_path(
        &paths_dir.join("mean.gdnpath"),
        &mean_path(&gp),
        &config_hash,
    )?;
    for d in 0..net.num_bn_domains() {
        save_path(
            &paths_dir.join(format!("domain_{d}.gdnpath")),
            &net.linearize_path(d)?,
            &config_hash,
        )?;
    }
    let last_val = report.epochs.last().and_then(|e| e.val_map);
    println!(
        "trained {} epochs ({} steps); final val mAP {}; outputs in {}",
        cfg.train.epochs,
        report.steps.len(),
        last_val.map_or("n/a".into(), |v| format!("{v:.4}")),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

// ── eval ─────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct EvalRow {
    baseline: String,
    seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    domain: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    map: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    rank1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_map: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_map: Option<f64>,
    forward_passes: u64,
    batches: u64,
    seconds_per_batch: f64,
}

impl EvalRow {
    fn from_result(baseline: &str, seed: u64, res: &RetrievalResult) -> Self {
        EvalRow {
            baseline: baseline.into(),
            seed,
            domain: None,
            lambda: None,
            map: res.map,
            rank1: Some(res.rank1()),
            min_map: None,
            max_map: None,
            forward_passes: res.forward_passes,
            batches: res.batches,
            seconds_per_batch: res.seconds_per_batch,
        }
    }
}

fn render_table(rows: &[EvalRow]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<14} {:>5} {:>7} {:>8} {:>8} {:>8} {:>10} {:>9}\n",
        "baseline", "seed", "domain", "lambda", "mAP", "rank1", "fwd/batch", "s/batch"
    ));
    for r in rows {
        let domain = r.domain.map_or(String::from("-"), |d| d.to_string());
        let lambda = r.lambda.map_or(String::from("-"), |l| format!("{l:.2}"));
        let fwd = format!("{}/{}", r.forward_passes, r.batches);
        let rank1 = r.rank1.map_or(String::from("-"), |v| format!("{v:.4}"));
        s.push_str(&format!(
            "{:<14} {:>5} {:>7} {:>8} {:>8.4} {:>8} {:>10} {:>9.6}\n",
            r.baseline, r.seed, domain, lambda, r.map, rank1, fwd, r.seconds_per_batch
        ));
    }
    s
}

pub fn cmd_eval(
    common: &CommonOpts,
    checkpoint: &Path,
    data_dir: Option<&Path>,
    format: OutputFormat,
) -> Result<ExitCode> {
    let (cfg, out) = resolve(common, "runs/eval")?;
    persist_run_metadata(&cfg, &out, "eval")?;
    let (net, _meta) = load_checkpoint(checkpoint)?;
    let data = load_or_generate(&cfg, data_dir)?;
    let split = RetrievalSplit::from_dataset(&data.held_out, cfg.eval.queries_per_id)?;
    let bs = cfg.eval.batch_size;

    let mut rows: Vec<EvalRow> = Vec::new();
    for &seed in &cfg.eval.seeds {
        for baseline in &cfg.eval.baselines {
            match baseline {
                Baseline::MeanPath => {
                    let gp = estimate_gp(&net, true)?;
                    let res = eval_mean_path(&net, &gp, &split, bs)?;
                    rows.push(EvalRow::from_result("mean_path", seed, &res));
                }
                Baseline::SinglePaths => {
                    for d in 0..net.num_bn_domains() {
                        let res = eval_single_path(&net, d, &split, bs)?;
                        let mut row = EvalRow::from_result("single_path", seed, &res);
                        row.domain = Some(d);
                        rows.push(row);
                    }
                }
                Baseline::Ensemble => {
                    let spec = EnsembleSpec::uniform(&net)?;
                    let res = eval_ensemble(&net, &spec, &split, bs, cfg.eval.fusion)?;
                    rows.push(EvalRow::from_result("ensemble", seed, &res));
                }
                Baseline::Spread => {
                    let gp = estimate_gp(&net, true)?;
                    let points = path_spread(
                        &net,
                        &gp,
                        &split,
                        &cfg.eval.lambda_grid,
                        cfg.eval.spread_paths,
                        cfg.train.noise_scale,
                        seed,
                        bs,
                    )?;
                    for p in points {
                        rows.push(EvalRow {
                            baseline: "spread".into(),
                            seed,
                            domain: None,
                            lambda: Some(p.lambda),
                            map: p.mean_map,
                            rank1: None,
                            min_map: Some(p.min_map),
                            max_map: Some(p.max_map),
                            forward_passes: 0,
                            batches: 0,
                            seconds_per_batch: 0.0,
                        });
                    }
                }
            }
        }
    }
    write_jsonl(&out.join("results.jsonl"), &rows)?;
    let table = render_table(&rows);
    std::fs::write(out.join("results.txt"), &table)?;
    match format {
        OutputFormat::Table => print!("{table}"),
        OutputFormat::Json => {
            for row in &rows {
                println!("{}", serde_json::to_string(row)?);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

// ── sweep ────────────────────────────────────────────────────────────

pub fn cmd_sweep(common: &CommonOpts, data_dir: Option<&Path>) -> Result<ExitCode> {
    let (cfg, out) = resolve(common, "runs/sweep")?;
    persist_run_metadata(&cfg, &out, "sweep")?;
    let data = load_or_generate(&cfg, data_dir)?;
    let split = RetrievalSplit::from_dataset(&data.held_out, cfg.eval.queries_per_id)?;

    // One training per lambda in the grid.
    let rows = sweep_lambda(
        &cfg.arch,
        &data.sources,
        &split,
        &cfg.train,
        &cfg.eval.sweep_grid,
        cfg.eval.batch_size,
    )?;
    write_jsonl(&out.join("sweep.jsonl"), &rows)?;
    println!("{:<8} {:>8} {:>8}", "lambda", "mAP", "rank1");
    for r in &rows {
        println!("{:<8.2} {:>8.4} {:>8.4}", r.lambda, r.map, r.rank1);
    }

    // Sampled-path spread for a model trained at the configured lambda.
    let mut net = build_net(&cfg, &data.sources)?;
    train(&mut net, &data.sources, &cfg.train)?;
    let gp = estimate_gp(&net, cfg.train.allow_degenerate_gp)?;
    let spread = path_spread(
        &net,
        &gp,
        &split,
        &cfg.eval.lambda_grid,
        cfg.eval.spread_paths,
        cfg.train.noise_scale,
        cfg.train.seed,
        cfg.eval.batch_size,
    )?;
    write_jsonl(&out.join("spread.jsonl"), &spread)?;
    println!(
        "\n{:<8} {:>8} {:>8} {:>8} {:>10}",
        "lambda", "min", "mean", "max", "mean-path"
    );
    for p in &spread {
        println!(
            "{:<8.2} {:>8.4} {:>8.4} {:>8.4} {:>10.4}",
            p.lambda, p.min_map, p.mean_map, p.max_map, p.mean_path_map
        );
    }
    Ok(ExitCode::SUCCESS)
}

// ── export / import paths ────────────────────────────────────────────

pub fn cmd_export_path(
    checkpoint: &Path,
    out: &Path,
    kind: &str,
    lambda: Option<f64>,
) -> Result<ExitCode> {
    let (net, meta) = load_checkpoint(checkpoint)?;
    let path: BnPath = if kind == "mean" {
        mean_path(&estimate_gp(&net, true)?)
    } else if let Some(d) = kind.strip_prefix("domain:") {
        let d: usize = d
            .parse()
            .map_err(|_| GdError::Config(format!("bad domain index in kind {kind:?}")))?;
        net.linearize_path(d)?
    } else if let Some(seed) = kind.strip_prefix("sample:") {
        let seed: u64 = seed
            .parse()
            .map_err(|_| GdError::Config(format!("bad seed in kind {kind:?}")))?;
        let gp = estimate_gp(&net, true)?;
        let mut rng = Rng::with_stream(seed, streams::NOISE);
        sample_path(
            &gp,
            lambda.unwrap_or(0.6),
            gdnorm_core::gdnorm::NoiseScale::Variance,
            &mut rng,
        )?
    } else {
        return Err(GdError::Config(format!(
            "unknown path kind {kind:?}; use mean | domain:<k> | sample:<seed>"
        )));
    };
    save_path(out, &path, &meta.config_hash)?;
    println!("wrote {} ({} layers)", out.display(), path.layers.len());
    Ok(ExitCode::SUCCESS)
}

pub fn cmd_import_path(
    common: &CommonOpts,
    path_file: &Path,
    checkpoint: &Path,
    data_dir: Option<&Path>,
    format: OutputFormat,
) -> Result<ExitCode> {
    let (cfg, out) = resolve(common, "runs/import-path")?;
    persist_run_metadata(&cfg, &out, "import-path")?;
    let (net, _) = load_checkpoint(checkpoint)?;
    let path = load_path(path_file)?;
    if path.widths() != net.bn_widths() {
        return Err(GdError::Checkpoint(format!(
            "path widths {:?} do not match model BN widths {:?}",
            path.widths(),
            net.bn_widths()
        )));
    }
    let data = load_or_generate(&cfg, data_dir)?;
    let split = RetrievalSplit::from_dataset(&data.held_out, cfg.eval.queries_per_id)?;
    let res = eval_path(&net, &path, &split, cfg.eval.batch_size)?;
    let row = EvalRow::from_result("imported_path", cfg.train.seed, &res);
    write_jsonl(&out.join("results.jsonl"), std::slice::from_ref(&row))?;
    match format {
        OutputFormat::Table => print!("{}", render_table(std::slice::from_ref(&row))),
        OutputFormat::Json => println!("{}", serde_json::to_string(&row)?),
    }
    Ok(ExitCode::SUCCESS)
}

// ── repro ────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct ReproRow<'a> {
    id: usize,
    name: &'a str,
    pass: bool,
    seconds: f64,
    details: &'a str,
}

pub fn cmd_repro(suite: &str, out: Option<&Path>) -> Result<ExitCode> {
    let Some(suite) = Suite::parse(suite) else {
        eprintln!("unknown suite {suite:?}; expected \"unit\" or \"full\"");
        return Ok(ExitCode::from(2));
    };
    let reports = run_suite(suite);
    for rep in &reports {
        println!("{}", rep.line());
    }
    if let Some(path) = out {
        let rows: Vec<ReproRow> = reports
            .iter()
            .map(|r| ReproRow {
                id: r.id,
                name: r.name,
                pass: r.pass,
                seconds: r.seconds,
                details: &r.details,
            })
            .collect();
        write_jsonl(path, &rows)?;
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    if failed > 0 {
        eprintln!("{failed} criterion(s) failed");
        Ok(ExitCode::from(1))
    } else {
        println!("all {} criteria passed", reports.len());
        Ok(ExitCode::SUCCESS)
    }
}
