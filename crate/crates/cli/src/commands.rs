use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dm2rm::data::{
    generate_synthetic, load_dataset, save_dataset, DatasetBundle, SplitRatios, SyntheticSpec,
};
use dm2rm::encoders::{EmbeddingCache, Providers, SyntheticImageEncoder, SyntheticTextEncoder};
use dm2rm::features::{dataset_image_features, precompute_images, precompute_text, FeatureStore};
use dm2rm::lang::{HttpLlmClient, LangPipeline, LlmConfig, PromptTemplates};
use dm2rm::model::RankerModel;
use dm2rm::retrieval::{
    dual_rank_encoded, evaluate, export_text_embeddings, Candidate, CandidateSet, EvalReport,
};
use dm2rm::training::fit;
use dm2rm::{validate_config, Config, FetchCarrySample, InstructionRecord, RankedList};
use dm2rm_service::{AppState, Phrases, PresentedImage, ServiceConfig};
use serde::Serialize;

use crate::{CliError, Command, LangArgs};

type Result<T> = std::result::Result<T, CliError>;

pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best";
pub const LAST_CHECKPOINT: &str = "last";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynthetic {
            envs,
            images,
            samples,
            distractor_rate,
            side,
            split,
            seed,
            out,
        } => gen_synthetic(
            SyntheticSpec {
                environments: envs,
                images_per_environment: images,
                samples_per_environment: samples,
                distractor_rate,
                image_side: side,
                split: parse_ratios(&split)?,
                seed,
                ..SyntheticSpec::default()
            },
            &out,
        ),
        Command::Embed {
            provider,
            manifest,
            out,
            config,
            lang,
        } => embed(&provider, &manifest, &out, config.as_deref(), &lang),
        Command::Train {
            dataset,
            config,
            out,
            seed,
            epochs,
            lang,
        } => train(&dataset, &config, &out, seed, epochs, &lang),
        Command::Eval {
            ckpt,
            dataset,
            split,
            report,
            ks,
            lang,
        } => {
            let ks: Vec<usize> = ks.into_iter().map(|k| k as usize).collect();
            eval(&ckpt, &dataset, &split, report.as_deref(), &ks, &lang)
        }
        Command::Rank {
            ckpt,
            dataset,
            instruction,
            env,
            topk,
            json: _,
            pretty,
            lang,
        } => rank(
            &ckpt,
            &dataset,
            &instruction,
            &env,
            topk as usize,
            pretty,
            &lang,
        ),
        Command::ExportEmbeddings {
            ckpt,
            dataset,
            split,
            out,
            lang,
        } => export(&ckpt, &dataset, split.as_deref(), out.as_deref(), &lang),
        Command::Serve {
            ckpt,
            dataset,
            host,
            port,
            topk,
            log_dir,
            cors_origins,
            lang,
        } => serve(
            ckpt.as_deref(),
            &dataset,
            &host,
            port,
            ServiceConfig {
                topk: topk as usize,
                log_dir,
                cors_origins,
            },
            &lang,
        ),
    }
}

fn parse_ratios(s: &str) -> Result<SplitRatios> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Validation(format!("--split {s:?}: {e}")))?;
    match parts[..] {
        [train, val, test_hm3d, test_mp3d] => Ok(SplitRatios {
            train,
            val,
            test_hm3d,
            test_mp3d,
        }),
        _ => Err(CliError::Validation(format!(
            "--split needs four comma-separated ratios, got {s:?}"
        ))),
    }
}

fn lang_pipeline(args: &LangArgs) -> Result<LangPipeline> {
    let mut pipeline = match &args.llm {
        Some(path) => {
            let config: LlmConfig = read_json(path)?;
            LangPipeline::with_client(Arc::new(HttpLlmClient::new(config)))
        }
        None => LangPipeline::offline(),
    };
    if let Some(dir) = &args.prompts {
        let templates = PromptTemplates::load(dir)
            .map_err(|e| CliError::Validation(format!("{}: {e}", dir.display())))?;
        pipeline = pipeline.templates(templates);
    }
    Ok(pipeline)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn read_config(path: &Path) -> Result<Config> {
    let config: Config = read_json(path)?;
    check_config(&config)?;
    Ok(config)
}

fn check_config(config: &Config) -> Result<()> {
    let report = validate_config(config);
    if report.is_valid() {
        Ok(())
    } else {
        Err(CliError::Validation(format!(
            "invalid configuration: {report}"
        )))
    }
}

fn providers(config: &Config) -> Result<Providers> {
    Providers::from_config(config).map_err(CliError::validation)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(out: &mut dyn Write, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value).map_err(CliError::runtime)?;
    writeln!(out)
        .and_then(|_| out.flush())
        .map_err(CliError::runtime)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    write_json(&mut std::io::stdout().lock(), value)
}

fn load_model(path: &Path) -> Result<RankerModel> {
    Ok(RankerModel::load(path)?)
}

#[derive(Serialize)]
struct GenSummary<'a> {
    out: &'a Path,
    stats: &'a dm2rm::data::DatasetStats,
    splits: std::collections::BTreeMap<&'static str, usize>,
}

fn gen_synthetic(spec: SyntheticSpec, out: &Path) -> Result<()> {
    let bundle = generate_synthetic(&spec)?;
    save_dataset(&bundle, out)?;
    let splits = bundle
        .splits
        .named()
        .into_iter()
        .map(|(name, ids)| (name, ids.len()))
        .collect();
    print_json(&GenSummary {
        out,
        stats: &bundle.stats,
        splits,
    })
}

#[derive(Serialize)]
struct EmbedSummary<'a> {
    provider: &'a str,
    out: &'a Path,
    added: usize,
    total: usize,
}

fn embed(
    provider: &str,
    manifest: &Path,
    out: &Path,
    config: Option<&Path>,
    lang: &LangArgs,
) -> Result<()> {
    let config = match config {
        Some(p) => read_config(p)?,
        None => Config::default(),
    };
    let root = if manifest.is_file() {
        manifest.parent().unwrap_or(Path::new("."))
    } else {
        manifest
    };
    let dataset = load_dataset(root)?;
    let providers = Providers::synthetic(&config);
    let (cache, added) = match provider {
        SyntheticTextEncoder::TAG => {
            let cache =
                EmbeddingCache::open(out, config.text_feat_dim).map_err(CliError::validation)?;
            let added =
                precompute_text(&dataset, &lang_pipeline(lang)?, &providers, &config, &cache)?;
            (cache, added)
        }
        SyntheticImageEncoder::TAG => {
            let cache =
                EmbeddingCache::open(out, config.image_feat_dim).map_err(CliError::validation)?;
            let added = precompute_images(&dataset, &providers, &cache)?;
            (cache, added)
        }
        other => {
            return Err(CliError::Validation(format!(
                "unknown provider {other:?}; available: {}, {}",
                SyntheticTextEncoder::TAG,
                SyntheticImageEncoder::TAG
            )))
        }
    };
    cache.save().map_err(CliError::runtime)?;
    print_json(&EmbedSummary {
        provider,
        out,
        added,
        total: cache.len(),
    })
}

#[derive(Serialize)]
struct TrainSummary {
    epochs: usize,
    best_epoch: usize,
    best_score: f64,
    best: PathBuf,
    last: PathBuf,
    log: PathBuf,
    best_report: EvalReport,
}

fn train(
    dataset_dir: &Path,
    config_path: &Path,
    out: &Path,
    seed: Option<u64>,
    epochs: Option<usize>,
    lang: &LangArgs,
) -> Result<()> {
    let mut config = read_config(config_path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(e) = epochs {
        config.epochs = e;
    }
    check_config(&config)?;
    let dataset = load_dataset(dataset_dir)?;
    let train = dataset.split_samples("train")?;
    let val = dataset.split_samples("val")?;
    let all: Vec<&FetchCarrySample> = train.iter().chain(&val).copied().collect();
    let features = FeatureStore::build(
        &dataset,
        &all,
        &lang_pipeline(lang)?,
        &providers(&config)?,
        &config,
    )?;

    let log_path = out.join(TRAIN_LOG);
    let mut log = create(&log_path)?;
    let mut write_error = None;
    let report = fit(
        RankerModel::new(&config)?,
        &dataset,
        &train,
        &val,
        &features,
        |record, _| {
            let line = serde_json::to_string(record).expect("epoch records serialize");
            if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
                write_error.get_or_insert(e);
            }
        },
    )?;
    if let Some(e) = write_error {
        return Err(CliError::Runtime(format!("{}: {e}", log_path.display())));
    }
    let best = out.join(BEST_CHECKPOINT);
    let last = out.join(LAST_CHECKPOINT);
    report.best.save(&best).map_err(CliError::runtime)?;
    report.last.save(&last).map_err(CliError::runtime)?;
    print_json(&TrainSummary {
        epochs: report.history.len(),
        best_epoch: report.best_epoch,
        best_score: report.best_score,
        best,
        last,
        log: log_path,
        best_report: report.best_report,
    })
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    split: &'a str,
    checkpoint_step: u64,
    #[serde(flatten)]
    report: &'a EvalReport,
}

fn eval(
    ckpt: &Path,
    dataset_dir: &Path,
    split: &str,
    report_path: Option<&Path>,
    ks: &[usize],
    lang: &LangArgs,
) -> Result<()> {
    let model = load_model(ckpt)?;
    let dataset = load_dataset(dataset_dir)?;
    let samples = dataset.split_samples(split)?;
    if samples.is_empty() {
        return Err(CliError::Validation(format!("split {split} is empty")));
    }
    let features = FeatureStore::build(
        &dataset,
        &samples,
        &lang_pipeline(lang)?,
        &providers(&model.config)?,
        &model.config,
    )?;
    let report = evaluate(&model, &dataset, &samples, &features, ks)?;
    let output = EvalOutput {
        split,
        checkpoint_step: model.step,
        report: &report,
    };
    match report_path {
        Some(p) => write_json(&mut create(p)?, &output),
        None => print_json(&output),
    }
}

fn environment_pool(
    model: &RankerModel,
    dataset: &DatasetBundle,
    env: &str,
    providers: &Providers,
) -> Result<CandidateSet> {
    let records = dataset.environment_images(env);
    if records.is_empty() {
        return Err(CliError::Validation(format!("unknown environment {env}")));
    }
    let candidates = records
        .iter()
        .map(|r| {
            Ok(Candidate {
                image_id: r.id.clone(),
                environment_id: r.environment_id.clone(),
                features: dataset_image_features(dataset, &r.id, providers)?,
            })
        })
        .collect::<std::result::Result<Vec<_>, dm2rm::features::FeatureError>>()?;
    Ok(CandidateSet::encode(model, &candidates)?)
}

#[derive(Serialize)]
struct RankOutput {
    instruction: String,
    paraphrase: String,
    phrases: Phrases,
    environment_id: String,
    topk: usize,
    candidate_count: usize,
    target: Vec<PresentedImage>,
    receptacle: Vec<PresentedImage>,
}

fn present(list: &RankedList, k: usize) -> Vec<PresentedImage> {
    list.entries
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, e)| PresentedImage {
            rank: i + 1,
            image_id: e.image_id.clone(),
            score: e.score,
        })
        .collect()
}

fn processed(
    lang: &LangPipeline,
    id: &str,
    text: &str,
    config: &Config,
) -> Result<InstructionRecord> {
    lang.process(id, text, config.max_noun_phrases)
        .map_err(|e| CliError::Validation(format!("instruction {id}: {e}")))
}

#[allow(clippy::too_many_arguments)]
fn rank(
    ckpt: &Path,
    dataset_dir: &Path,
    instruction: &str,
    env: &str,
    topk: usize,
    pretty: bool,
    lang: &LangArgs,
) -> Result<()> {
    let model = load_model(ckpt)?;
    let dataset = load_dataset(dataset_dir)?;
    let providers = providers(&model.config)?;
    let record = processed(&lang_pipeline(lang)?, "query", instruction, &model.config)?;
    let pool = environment_pool(&model, &dataset, env, &providers)?;
    let (t, r) = dual_rank_encoded(&model, &record, &pool, &providers)?;
    let output = RankOutput {
        instruction: record.raw_text.clone(),
        paraphrase: record.paraphrase.clone().unwrap_or_default(),
        phrases: Phrases {
            target: record.target_phrase.clone().unwrap_or_default(),
            receptacle: record.receptacle_phrase.clone().unwrap_or_default(),
            noun_phrases: record.noun_phrases.clone(),
        },
        environment_id: env.to_string(),
        topk,
        candidate_count: pool.len(),
        target: present(&t, topk),
        receptacle: present(&r, topk),
    };
    if !pretty {
        return print_json(&output);
    }
    let mut out = std::io::stdout().lock();
    let table = (|| -> std::io::Result<()> {
        writeln!(out, "instruction: {}", output.instruction)?;
        writeln!(out, "paraphrase:  {}", output.paraphrase)?;
        writeln!(out, "target:      {}", output.phrases.target)?;
        writeln!(out, "receptacle:  {}", output.phrases.receptacle)?;
        writeln!(
            out,
            "{:>4}  {:<24} {:>8}  {:<24} {:>8}",
            "rank", "target", "score", "receptacle", "score"
        )?;
        for (a, b) in output.target.iter().zip(&output.receptacle) {
            writeln!(
                out,
                "{:>4}  {:<24} {:>8.4}  {:<24} {:>8.4}",
                a.rank, a.image_id, a.score, b.image_id, b.score
            )?;
        }
        Ok(())
    })();
    table.map_err(CliError::runtime)
}

fn export(
    ckpt: &Path,
    dataset_dir: &Path,
    split: Option<&str>,
    out: Option<&Path>,
    lang: &LangArgs,
) -> Result<()> {
    let model = load_model(ckpt)?;
    let dataset = load_dataset(dataset_dir)?;
    let samples: Vec<&FetchCarrySample> = match split {
        Some(s) => dataset.split_samples(s)?,
        None => dataset.samples.iter().collect(),
    };
    let lang = lang_pipeline(lang)?;
    let instructions = samples
        .iter()
        .map(|s| processed(&lang, &s.instruction_id, &s.raw_text, &model.config))
        .collect::<Result<Vec<_>>>()?;
    let rows = export_text_embeddings(&model, &instructions, &providers(&model.config)?)?;
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for row in &rows {
        let line = serde_json::to_string(row).map_err(CliError::runtime)?;
        writeln!(sink, "{line}").map_err(CliError::runtime)?;
    }
    sink.flush().map_err(CliError::runtime)
}

fn serve(
    ckpt: Option<&Path>,
    dataset_dir: &Path,
    host: &str,
    port: u16,
    config: ServiceConfig,
    lang: &LangArgs,
) -> Result<()> {
    let dataset = load_dataset(dataset_dir)?;
    let model = ckpt.map(load_model).transpose()?;
    let providers = match &model {
        Some(m) => providers(&m.config)?,
        None => Providers::synthetic(&Config::default()),
    };
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| CliError::Validation(format!("address {host}:{port}: {e}")))?;
    let state = AppState::new(dataset, model, providers, lang_pipeline(lang)?, config)
        .map_err(CliError::validation)?;
    let runtime = tokio::runtime::Runtime::new().map_err(CliError::runtime)?;
    eprintln!("serving on http://{addr}");
    runtime
        .block_on(dm2rm_service::serve(Arc::new(state), addr))
        .map_err(CliError::runtime)
}
