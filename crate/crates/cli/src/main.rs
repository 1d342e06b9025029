use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use albumseq::eval::{run_evaluation, EvalConfig, Method};
use albumseq::ingest::{
    generate_synthetic, load_corpus, save_corpus, split_corpus, LoadedCorpus, SplitFractions,
    DEFAULT_MAX_TRACKS, DEFAULT_MIN_TRACKS,
};
use albumseq::nn::{load_checkpoint, save_checkpoint, train_with_progress, AdamConfig};
use albumseq::sequencer::{
    builtin_templates, extract_essence, find_template, fit_to_template, sample_orders,
    top_n_orders, Sampling,
};
use albumseq::{
    seeded_rng, Album, Corpus, FeatureScaler, Hyperparams, LoadConfig, OrderingModel,
    ProposedOrder, SyntheticSpec, TrainConfig,
};
use albumseq_service::ServiceConfig;
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "albumseq", version, about = "Order the tracks of an album")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a feature corpus and write it back in canonical form.
    Ingest(IngestArgs),
    /// Generate a synthetic corpus with a planted ordering signal.
    Synth(SynthArgs),
    /// Train an ordering model and save a checkpoint.
    Train(TrainArgs),
    /// Propose orders for albums with a trained checkpoint.
    Sequence(SequenceArgs),
    /// Score direct, template and random proposals against known orders.
    Evaluate(EvaluateArgs),
    /// Run the HTTP API and serve the web UI.
    Serve(ServeArgs),
}

#[derive(Args)]
struct FilterArgs {
    /// Required feature dimension (default: taken from the file).
    #[arg(long)]
    dimension: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MIN_TRACKS)]
    min_tracks: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_TRACKS)]
    max_tracks: usize,
}

impl FilterArgs {
    fn load_config(&self) -> LoadConfig {
        LoadConfig {
            dimension: self.dimension,
            min_tracks: self.min_tracks,
            max_tracks: self.max_tracks,
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    /// Corpus file (.csv or .json).
    input: PathBuf,
    /// Output file; format follows the extension.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    albums: usize,
    #[arg(long, default_value_t = 3)]
    min_tracks: usize,
    #[arg(long, default_value_t = 8)]
    max_tracks: usize,
    #[arg(long, default_value_t = 32)]
    dimension: usize,
    /// Strength of the planted order signal; 0 gives order-free data.
    #[arg(long, default_value_t = 1.0)]
    signal: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Training corpus.
    #[arg(long)]
    corpus: PathBuf,
    /// Held-out corpus for model selection; otherwise split off the training corpus.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    /// Checkpoint to write.
    #[arg(long, short)]
    out: PathBuf,
    /// Per-epoch losses as JSON.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Stop after this many epochs without validation improvement.
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 1)]
    essence_dim: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    d_ff: usize,
    #[arg(long, default_value_t = 20)]
    max_len: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum SequenceMethod {
    Direct,
    Template,
}

#[derive(Args)]
struct SequenceArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Only this album (default: every album in the file).
    #[arg(long)]
    album: Option<String>,
    #[arg(long, value_enum, default_value_t = SequenceMethod::Direct)]
    method: SequenceMethod,
    /// Template for the template method (default: all built-ins).
    #[arg(long)]
    template: Option<String>,
    /// Number of distinct orders for the direct method.
    #[arg(long, short, default_value_t = 1)]
    n: usize,
    /// Orders sampled before ranking (default: max(10n, 100)).
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write JSON here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Albums in their true order.
    #[arg(long)]
    corpus: PathBuf,
    /// Comma-separated proposal counts.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    k: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "direct,template,random")]
    methods: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 64)]
    random_trials: usize,
    /// Shuffles per album for the information estimate; 0 skips it.
    #[arg(long, default_value_t = 4)]
    information_shuffles: usize,
    /// Directory for report.json, report.csv and plot.json.
    #[arg(long, short)]
    out_dir: PathBuf,
    #[command(flatten)]
    filter: FilterArgs,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "ALBUMSEQ_HOST", default_value = "127.0.0.1")]
    host: String,
    #[arg(long, env = "ALBUMSEQ_PORT", default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "ALBUMSEQ_MODEL")]
    model: Option<PathBuf>,
    #[arg(long, env = "ALBUMSEQ_STATIC_DIR")]
    static_dir: Option<PathBuf>,
    #[arg(long, env = "ALBUMSEQ_SESSION_TTL", default_value_t = 3600)]
    session_ttl_secs: u64,
    #[arg(long, env = "ALBUMSEQ_UPLOAD_LIMIT", default_value_t = albumseq_service::config::DEFAULT_UPLOAD_LIMIT)]
    upload_limit: usize,
    #[arg(long, env = "ALBUMSEQ_CORS_ORIGIN")]
    cors_origin: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Sequence(a) => sequence(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn load(path: &Path, config: &LoadConfig) -> Result<LoadedCorpus> {
    let loaded =
        load_corpus(path, config).with_context(|| format!("loading {}", path.display()))?;
    if !loaded.dropped.is_empty() {
        eprintln!(
            "note: dropped {} album(s) outside {}..={} tracks",
            loaded.dropped.len(),
            config.min_tracks,
            config.max_tracks
        );
    }
    Ok(loaded)
}

fn ingest(args: IngestArgs) -> Result<()> {
    let loaded = load(&args.input, &args.filter.load_config())?;
    if let Some(out) = &args.out {
        save_corpus(&loaded.corpus, out)?;
    }
    let summary = json!({
        "albums": loaded.kept,
        "dropped": loaded.dropped,
        "dimension": loaded.corpus.dimension,
        "tracks": loaded.corpus.albums.iter().map(Album::len).sum::<usize>(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn synth(args: SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        seed: args.seed,
        n_albums: args.albums,
        min_tracks: args.min_tracks,
        max_tracks: args.max_tracks,
        dimension: args.dimension,
        signal_strength: args.signal,
        noise_scale: args.noise,
    };
    let corpus = generate_synthetic(&spec)?;
    save_corpus(&corpus, &args.out)?;
    eprintln!("wrote {} albums to {}", corpus.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let config = args.filter.load_config();
    let corpus = load(&args.corpus, &config)?.corpus;
    let (train_set, validation) = match &args.validation {
        Some(path) => (corpus, load(path, &config)?.corpus),
        None if args.validation_fraction > 0.0 => {
            let f = args.validation_fraction;
            let split = split_corpus(
                &corpus,
                SplitFractions {
                    train: 1.0 - f,
                    validation: f,
                    test: 0.0,
                },
                args.seed,
            )?;
            (split.train, split.validation)
        }
        None => {
            let empty = Corpus {
                albums: Vec::new(),
                ..corpus.clone()
            };
            (corpus, empty)
        }
    };
    let hyper = Hyperparams {
        input_dim: train_set.dimension,
        hidden_dim: args.hidden,
        essence_dim: args.essence_dim,
        d_model: args.d_model,
        n_heads: args.heads,
        d_ff: args.d_ff,
        max_len: args.max_len,
        dropout: args.dropout,
        ..Hyperparams::default()
    };
    let model = OrderingModel::new(hyper, FeatureScaler::fit(&train_set)?, args.seed)?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        adam: AdamConfig {
            learning_rate: args.lr,
            ..AdamConfig::default()
        },
        seed: args.seed,
        resample_sigma_each_epoch: true,
        clip_norm: args.clip_norm,
        patience: args.patience,
    };
    eprintln!(
        "training on {} albums, validating on {}",
        train_set.len(),
        validation.len()
    );
    let outcome = train_with_progress(model, &train_set, &validation, &cfg, |s| {
        eprintln!(
            "epoch {:>4}  train {:.4}  validation {:.4}",
            s.epoch + 1,
            s.train_loss,
            s.validation_loss
        );
    })?;
    save_checkpoint(&outcome.model, &args.out)?;
    if let Some(path) = &args.history {
        write_json(path, &outcome.history)?;
    }
    eprintln!(
        "saved {} (best epoch {})",
        args.out.display(),
        outcome.model.meta.best_epoch.map_or(0, |e| e + 1)
    );
    Ok(())
}

fn order_json(album: &Album, p: &ProposedOrder) -> Value {
    let mut v = json!({
        "order": p.order.as_slice(),
        "track_ids": p.order.as_slice().iter().map(|&i| &album.tracks[i].track_id).collect::<Vec<_>>(),
        "narrative_values": p.narrative_values.values(),
    });
    let obj = v.as_object_mut().expect("object");
    if let Some(ll) = p.log_likelihood {
        obj.insert("log_likelihood".into(), json!(ll));
    }
    if let Some(c) = p.fit_cost {
        obj.insert("fit_cost".into(), json!(c));
    }
    if let Some(t) = &p.template {
        obj.insert("template".into(), json!(t));
    }
    v
}

fn sequence(args: SequenceArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)
        .with_context(|| format!("loading {}", args.model.display()))?;
    let config = LoadConfig {
        dimension: Some(model.hyper().input_dim),
        min_tracks: 1,
        max_tracks: usize::MAX,
    };
    let corpus = load(&args.corpus, &config)?.corpus;
    let albums: Vec<&Album> = match &args.album {
        Some(id) => vec![corpus
            .album(id)
            .with_context(|| format!("no album {id:?} in {}", args.corpus.display()))?],
        None => corpus.albums.iter().collect(),
    };
    if let Some(a) = albums.iter().find(|a| a.len() > model.max_len()) {
        bail!(
            "album {:?} has {} tracks; the model handles at most {}",
            a.album_id,
            a.len(),
            model.max_len()
        );
    }
    let templates = match &args.template {
        Some(name) => vec![find_template(name).with_context(|| {
            let names: Vec<String> = builtin_templates().into_iter().map(|t| t.name).collect();
            format!(
                "unknown template {name:?}; choose one of {}",
                names.join(", ")
            )
        })?],
        None => builtin_templates(),
    };

    let mut rng = seeded_rng(args.seed);
    let mut out = Vec::new();
    for album in albums {
        let (orders, shortfall) = match args.method {
            SequenceMethod::Direct => {
                let count = args
                    .samples
                    .unwrap_or_else(|| albumseq::sequencer::default_sample_count(args.n));
                let samples = sample_orders(
                    &model,
                    album,
                    count,
                    Sampling::Temperature(args.temperature),
                    &mut rng,
                )?;
                let top = top_n_orders(&samples, args.n)?;
                (top.orders, top.shortfall)
            }
            SequenceMethod::Template => {
                let essence = extract_essence(&model, album)?;
                let fits = templates
                    .iter()
                    .map(|t| fit_to_template(&essence, t, album.len()))
                    .collect::<albumseq::Result<Vec<_>>>()?;
                (fits, false)
            }
        };
        out.push(json!({
            "album_id": album.album_id,
            "shortfall": shortfall,
            "orders": orders.iter().map(|p| order_json(album, p)).collect::<Vec<_>>(),
        }));
    }
    let text = serde_json::to_string_pretty(&out)?;
    match &args.out {
        Some(path) => {
            fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?
        }
        None => println!("{text}"),
    }
    Ok(())
}

fn parse_method(name: &str) -> Result<Method> {
    Method::ALL
        .into_iter()
        .find(|m| m.as_str() == name.trim())
        .with_context(|| format!("unknown method {name:?}; use direct, template or random"))
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)
        .with_context(|| format!("loading {}", args.model.display()))?;
    let mut config = args.filter.load_config();
    config.dimension = Some(model.hyper().input_dim);
    config.max_tracks = config.max_tracks.min(model.max_len());
    let corpus = load(&args.corpus, &config)?.corpus;
    let methods = args
        .methods
        .iter()
        .map(|m| parse_method(m))
        .collect::<Result<Vec<_>>>()?;
    let cfg = EvalConfig {
        k_values: args.k.clone(),
        methods,
        seed: args.seed,
        direct_samples: args.samples,
        random_trials: args.random_trials,
        information_shuffles: args.information_shuffles,
    };
    let report = run_evaluation(&model, &corpus, &cfg)?;
    fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    fs::write(args.out_dir.join("report.json"), report.to_json()? + "\n")?;
    fs::write(args.out_dir.join("report.csv"), report.to_csv())?;
    write_json(&args.out_dir.join("plot.json"), &report.plot_data())?;

    for row in &report.aggregates {
        println!(
            "{:<9} k={:<3} edit score {}{}",
            row.method.as_str(),
            row.k,
            row.edit_score,
            if row.truncated_albums > 0 {
                format!("  ({} albums truncated)", row.truncated_albums)
            } else {
                String::new()
            }
        );
    }
    if let Some(info) = &report.information {
        println!(
            "information  {} bits per album (clipped {})",
            info.bits, info.bits_clipped
        );
    }
    Ok(())
}

fn serve(args: ServeArgs) -> Result<()> {
    let config = ServiceConfig {
        host: args.host,
        port: args.port,
        model_path: args.model,
        session_ttl: Duration::from_secs(args.session_ttl_secs),
        upload_limit: args.upload_limit,
        static_dir: args.static_dir,
        cors_origin: args.cors_origin,
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(albumseq_service::serve(config))?;
    Ok(())
}
