use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fidel::alphabet::{AlphabetSchema, AlphabetTable, Split};
use fidel::dataset::{ingest, validate_dataset, DatasetIndex, IngestOptions, PreprocessConfig};
use fidel::episodes::{
    derive_seed, episode_rng, make_stream_plan_with, sample_episode, EpisodeItem, Method,
    SeedStream,
};
use fidel::evaluation::{compare_methods, evaluate, reproduce_table, results_csv, Finding};
use fidel::protonet::{load_checkpoint, BackboneKind};
use fidel::synthetic::{write_corpus, SyntheticConfig};
use fidel::training::{run_experiment, train as train_model, write_run_dir};
use fidel::EpisodeSpec;
use serde::Serialize;

use crate::config::{resolve, DataArgs, ExperimentConfig, SchemaKind, TrainArgs};
use crate::{ConfigArgs, UsageError};

fn load_table(cfg: &ExperimentConfig) -> anyhow::Result<AlphabetTable> {
    let data = &cfg.data;
    let manifest = data.manifest.clone().or_else(|| {
        let candidate = data.root.as_ref()?.join("manifest.csv");
        (data.schema == SchemaKind::Inferred && candidate.is_file()).then_some(candidate)
    });
    let table = match (manifest, data.schema) {
        (None, _) => AlphabetTable::builtin(),
        (Some(path), SchemaKind::Amharic) => {
            AlphabetTable::from_path(&path, &AlphabetSchema::amharic())
                .with_context(|| format!("manifest {}", path.display()))?
        }
        (Some(path), SchemaKind::Inferred) => AlphabetTable::from_path_inferred(&path)
            .with_context(|| format!("manifest {}", path.display()))?,
    };
    Ok(table)
}

/// Builds the index from the cache when it exists and matches, otherwise
/// from the image files (and then writes the cache).
fn load_index(
    cfg: &ExperimentConfig,
    preprocess: PreprocessConfig,
) -> anyhow::Result<DatasetIndex> {
    let table = load_table(cfg)?;
    if let Some(cache) = cfg.data.cache.as_ref().filter(|p| p.is_file()) {
        let index = DatasetIndex::load_cache(cache, &table)?;
        if *index.preprocess() == preprocess {
            log::info!(
                "loaded {} images from cache {}",
                index.len(),
                cache.display()
            );
            return Ok(index);
        }
        log::warn!(
            "cache {} uses different preprocessing; rebuilding",
            cache.display()
        );
    }
    let root = cfg.data.root.as_ref().ok_or_else(|| {
        UsageError(
            "no dataset root: pass --data-root, set FIDEL_DATA_ROOT or data.root in the config"
                .into(),
        )
    })?;
    let options = IngestOptions {
        path_pattern: cfg.data.path_pattern.clone(),
        images_per_char: cfg.data.images_per_char,
        preprocess,
    };
    let index =
        ingest(root, &table, &options).with_context(|| format!("dataset {}", root.display()))?;
    if let Some(cache) = &cfg.data.cache {
        index.save_cache(cache)?;
    }
    Ok(index)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

pub fn validate_data(cfg: &ConfigArgs, data: &DataArgs, json: bool) -> anyhow::Result<()> {
    let cfg = resolve(cfg.config.as_deref(), false, data, None)?;
    let index = load_index(&cfg, cfg.preprocess())?;
    let report = validate_dataset(&index);
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!(
            "{} images, {} classes",
            report.total_images, report.num_classes
        );
        println!(
            "train {} / val {} / test {} images",
            report.train_images, report.val_images, report.test_images
        );
        for anomaly in &report.anomalies {
            println!("anomaly: {}", serde_json::to_string(anomaly)?);
        }
    }
    if !report.is_healthy() {
        anyhow::bail!("{} anomalies found", report.anomalies.len());
    }
    Ok(())
}

#[derive(Serialize)]
struct ItemDump {
    image: usize,
    char_label: u32,
    row_label: u32,
    col_label: u32,
    local_class: usize,
    source: String,
}

#[derive(Serialize)]
struct EpisodeDump {
    granularity: fidel::Granularity,
    index: usize,
    seed: u64,
    way: usize,
    shot: usize,
    class_identities: Vec<u32>,
    support: Vec<ItemDump>,
    query: Vec<ItemDump>,
}

#[derive(Serialize)]
struct SampleDump {
    method: Method,
    seed: u64,
    split: Split,
    episodes: Vec<EpisodeDump>,
}

fn dump_items(index: &DatasetIndex, items: &[EpisodeItem]) -> Vec<ItemDump> {
    items
        .iter()
        .map(|it| {
            let img = index.image(it.image);
            ItemDump {
                image: it.image,
                char_label: img.char_label,
                row_label: img.row_label,
                col_label: img.col_label,
                local_class: it.local_class,
                source: img.source.clone(),
            }
        })
        .collect()
}

pub fn sample_episodes(
    cfg: &ConfigArgs,
    data: &DataArgs,
    train: &TrainArgs,
    n: usize,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = resolve(cfg.config.as_deref(), cfg.desk_scale, data, Some(train))?;
    let index = load_index(&cfg, cfg.preprocess())?;
    let t = &cfg.train;
    let plan = make_stream_plan_with(t.method, 2, t.base_spec(), t.mix_mode, t.seed)?;
    let mut episodes = Vec::new();
    for &granularity in plan.counts().keys() {
        let spec = t.base_spec().with_granularity(granularity);
        for i in 0..n {
            let seed = derive_seed(
                t.seed,
                SeedStream::Inspect,
                ((granularity as u64) << 32) | i as u64,
            );
            let ep = sample_episode(&index, Split::Train, &spec, &mut episode_rng(seed))?;
            episodes.push(EpisodeDump {
                granularity,
                index: i,
                seed,
                way: spec.way,
                shot: spec.shot,
                class_identities: ep.class_identities.clone(),
                support: dump_items(&index, &ep.support),
                query: dump_items(&index, &ep.query),
            });
        }
    }
    let dump = SampleDump {
        method: t.method,
        seed: t.seed,
        split: Split::Train,
        episodes,
    };
    let text = serde_json::to_string_pretty(&dump)?;
    match out {
        Some(path) => write_file(path, text)?,
        None => println!("{text}"),
    }
    Ok(())
}

pub fn train(
    cfg: &ConfigArgs,
    data: &DataArgs,
    train: &TrainArgs,
    out: &Path,
) -> anyhow::Result<()> {
    let cfg = resolve(cfg.config.as_deref(), cfg.desk_scale, data, Some(train))?;
    let index = load_index(&cfg, cfg.preprocess())?;
    let mut outcome = train_model(&cfg.train, &index)?;
    write_run_dir(out, &cfg, &mut outcome, index.preprocess())?;
    println!(
        "best validation accuracy {:.4} at episode {} of {}; run written to {}",
        outcome.history.best_accuracy,
        outcome.history.best_episode,
        cfg.train.total_episodes,
        out.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub backbone: Option<BackboneKind>,
    pub split: Split,
    pub tasks: Option<usize>,
    pub way: Option<usize>,
    pub shot: Option<usize>,
    pub queries_per_class: Option<usize>,
    pub seed: Option<u64>,
    pub json: bool,
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: PathBuf,
    split: Split,
    way: usize,
    shot: usize,
    seed: u64,
    n_tasks: usize,
    accuracy: f64,
    ci_half_width: f64,
}

pub fn eval(cfg: &ConfigArgs, data: &DataArgs, args: &EvalArgs) -> anyhow::Result<()> {
    let cfg = resolve(cfg.config.as_deref(), cfg.desk_scale, data, None)?;
    let (net, header) = load_checkpoint(&args.checkpoint, args.backbone)
        .with_context(|| format!("checkpoint {}", args.checkpoint.display()))?;
    if let Some(kind) = cfg.data.preprocess {
        if kind.config() != header.preprocess {
            log::warn!("ignoring configured preprocessing; using the checkpoint's");
        }
    }
    let index = load_index(&cfg, header.preprocess.clone())?;
    let t = &cfg.train;
    let spec = EpisodeSpec::character(
        args.way.unwrap_or(t.way),
        args.shot.unwrap_or(t.shot),
        args.queries_per_class.unwrap_or(t.queries_per_class),
    );
    let seed = args.seed.unwrap_or(t.seed);
    let n_tasks = args.tasks.unwrap_or(cfg.eval.test_tasks);
    let result = evaluate(&net, &index, args.split, n_tasks, &spec, seed)?;
    let report = EvalReport {
        checkpoint: args.checkpoint.clone(),
        split: args.split,
        way: spec.way,
        shot: spec.shot,
        seed,
        n_tasks,
        accuracy: result.accuracy,
        ci_half_width: result.ci_half_width,
    };
    if args.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!(
            "{} {}-way {}-shot: accuracy {:.4} ± {:.4} over {} tasks",
            args.split, spec.way, spec.shot, result.accuracy, result.ci_half_width, n_tasks
        );
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn reproduce(
    cfg: &ConfigArgs,
    data: &DataArgs,
    train: &TrainArgs,
    methods: Option<Vec<Method>>,
    shots: Option<Vec<usize>>,
    seeds: Option<Vec<u64>>,
    test_tasks: Option<usize>,
    out: &Path,
) -> anyhow::Result<()> {
    let mut cfg = resolve(cfg.config.as_deref(), cfg.desk_scale, data, Some(train))?;
    if let Some(m) = methods {
        cfg.eval.methods = m;
    }
    if let Some(s) = shots {
        cfg.eval.shots = s;
    }
    if let Some(s) = seeds {
        cfg.eval.seeds = s;
    }
    if let Some(n) = test_tasks {
        cfg.eval.test_tasks = n;
    }
    if cfg.eval.seeds.len() != 3 {
        return Err(UsageError(format!(
            "exactly 3 seeds are required, got {}",
            cfg.eval.seeds.len()
        ))
        .into());
    }
    let index = load_index(&cfg, cfg.preprocess())?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_file(&out.join("config.json"), serde_json::to_vec_pretty(&cfg)?)?;

    let runs = out.join("runs");
    let mut results = Vec::new();
    for &method in &cfg.eval.methods {
        for &shot in &cfg.eval.shots {
            let mut template = cfg.train.clone();
            template.method = method;
            template.shot = shot;
            log::info!(
                "{method} {shot}-shot: training {} seeds",
                cfg.eval.seeds.len()
            );
            let result = run_experiment(
                &template,
                &cfg.eval.seeds,
                &index,
                cfg.eval.test_tasks,
                Some(&runs),
            )?;
            results.push(result);
            write_file(&out.join("results.csv"), results_csv(&results))?;
        }
    }

    let report = reproduce_table(results.clone());
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let findings = compare_methods(&report.table);
    write_file(&out.join("table.md"), &report.markdown)?;
    write_file(&out.join("table.csv"), &report.csv)?;
    write_file(
        &out.join("findings.json"),
        serde_json::to_vec_pretty(&findings)?,
    )?;
    println!("{}", report.markdown);
    for f in &findings {
        println!("- {}", Finding::describe(f));
    }
    Ok(())
}

pub fn synth(
    out: &Path,
    amharic: bool,
    rows: u32,
    cols: u32,
    split_rows: &[u32],
    images_per_char: usize,
    seed: u64,
) -> anyhow::Result<()> {
    let split_rows: [u32; 3] = split_rows
        .try_into()
        .map_err(|_| UsageError("--split-rows takes three comma-separated counts".into()))?;
    let (config, table) = if amharic {
        let table = AlphabetTable::builtin();
        let config = SyntheticConfig {
            rows: table.schema().num_rows,
            cols: table.schema().num_cols,
            images_per_char,
            seed,
            ..SyntheticConfig::default()
        };
        (config, table)
    } else {
        if split_rows.iter().sum::<u32>() != rows || rows == 0 || cols == 0 {
            return Err(UsageError(
                "--split-rows must add up to --rows, and both grid sizes must be positive".into(),
            )
            .into());
        }
        let config = SyntheticConfig {
            rows,
            cols,
            split_rows,
            images_per_char,
            seed,
            ..SyntheticConfig::default()
        };
        let table = config.table();
        (config, table)
    };
    write_corpus(&config, &table, out)
        .with_context(|| format!("writing corpus to {}", out.display()))?;
    println!(
        "wrote {} images for {} classes to {}",
        table.len() * images_per_char,
        table.len(),
        out.display()
    );
    Ok(())
}
