use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use orars::dataset::{self, Dataset};
use orars::error::Error;
use orars::experiment::{self, Algorithm, ExperimentConfig};
use orars::features::{self, AgopMode};
use orars::metrics::{self, InterRaterMethod};
use orars::nn::{self, Checkpoint, TrainConfig};
use orars::ranking::{self, ScoredFeatures};
use orars::synth::{self, SynthConfig};

#[derive(Parser)]
#[command(name = "orars", version, about = "Sentence-level pronunciation scoring with rank-based ordinal regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scored corpus
    Synth(SynthArgs),
    /// Extract combined feature vectors to CSV
    ExtractFeatures(ExtractArgs),
    /// Train a pairwise classifier or a direct regressor
    Train(TrainArgs),
    /// Score utterances with a trained model
    Score(ScoreArgs),
    /// Evaluate predictions (or the inter-rater baseline) against a dataset
    Evaluate(EvaluateArgs),
    /// Run k-fold cross-validation for one algorithm
    CrossValidate(CrossValidateArgs),
    /// Project feature vectors onto principal components for plotting
    PcaProject(PcaArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 20)]
    phonemes: usize,
    #[arg(long, default_value_t = 20)]
    t_min: usize,
    #[arg(long, default_value_t = 60)]
    t_max: usize,
    #[arg(long, default_value_t = 0.1)]
    quality_noise: f64,
    #[arg(long, default_value_t = 0.25)]
    rater_noise: f64,
    #[arg(long, default_value_t = 4)]
    raters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "diagonal")]
    agop_mode: String,
    /// Output CSV path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    model_out: PathBuf,
    /// classifier | nnr
    #[arg(long, default_value = "classifier")]
    kind: String,
    #[arg(long, default_value = "diagonal")]
    agop_mode: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    /// Scored reference dataset (training set in rank mode, balanced anchor
    /// set in anchor mode)
    #[arg(long)]
    train_ref: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// rank | anchor
    #[arg(long, default_value = "rank")]
    mode: String,
    /// Rank count for anchor-mode discretization
    #[arg(long, default_value_t = 21)]
    m: usize,
    #[arg(long, default_value = "diagonal")]
    agop_mode: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// CSV of `id,score` lines, as emitted by `score`
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Compute the inter-rater human baseline instead
    #[arg(long)]
    inter_rater: bool,
    /// leave_one_out | pairwise
    #[arg(long, default_value = "leave_one_out")]
    inter_rater_method: String,
    /// Write the machine-readable report here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CrossValidateArgs {
    /// Key/value config file; flags override its entries
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// gop_mean | nnr | orars_rank | orars_anchor
    #[arg(long)]
    algorithm: Option<String>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    stratify: bool,
    #[arg(long)]
    agop_mode: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    pairs_per_epoch: Option<usize>,
    #[arg(long)]
    validation_fraction: Option<f64>,
    /// Write the machine-readable report here
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PcaArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 2)]
    components: usize,
    /// cgop | agop | combined
    #[arg(long, default_value = "cgop")]
    which: String,
    #[arg(long, default_value = "diagonal")]
    agop_mode: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_thread_pool();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn init_thread_pool() {
    #[cfg(feature = "parallel")]
    if let Ok(v) = std::env::var("ORARS_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn run(command: Command) -> orars::Result<()> {
    match command {
        Command::Synth(a) => cmd_synth(a),
        Command::ExtractFeatures(a) => cmd_extract(a),
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::CrossValidate(a) => cmd_cross_validate(a),
        Command::PcaProject(a) => cmd_pca(a),
    }
}

fn write_output(out: Option<&Path>, body: &str) -> orars::Result<()> {
    match out {
        Some(path) => std::fs::write(path, body).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        }),
        None => {
            print!("{body}");
            std::io::stdout().flush().ok();
            Ok(())
        }
    }
}

fn cmd_synth(a: SynthArgs) -> orars::Result<()> {
    let cfg = SynthConfig {
        n_utterances: a.n,
        phoneme_count: a.phonemes,
        t_range: (a.t_min, a.t_max),
        quality_noise: a.quality_noise,
        rater_noise: a.rater_noise,
        n_raters: a.raters,
        seed: a.seed,
    };
    let d = synth::generate_corpus(&cfg)?;
    dataset::save_dataset(&d, &a.out)?;
    println!("wrote {} utterances to {}", d.len(), a.out.display());
    Ok(())
}

fn cmd_extract(a: ExtractArgs) -> orars::Result<()> {
    let d = dataset::load_dataset(&a.dataset)?;
    let mode: AgopMode = a.agop_mode.parse()?;
    let feats = features::extract_features_batch(&d.utterances, mode);
    let mut body = String::new();
    for (u, f) in d.utterances.iter().zip(&feats) {
        body.push_str(&u.id);
        for v in f {
            body.push_str(&format!(",{v}"));
        }
        body.push('\n');
    }
    write_output(a.out.as_deref(), &body)
}

fn scored_features(d: &Dataset, mode: AgopMode) -> orars::Result<ScoredFeatures> {
    ScoredFeatures::new(features::extract_features_batch(&d.utterances, mode), d.scores()?)
}

fn cmd_train(a: TrainArgs) -> orars::Result<()> {
    let d = dataset::load_dataset(&a.dataset)?;
    let mode: AgopMode = a.agop_mode.parse()?;
    let data = scored_features(&d, mode)?;
    let mut cfg = match a.kind.as_str() {
        "classifier" => TrainConfig::classifier(a.seed),
        "nnr" => TrainConfig::regressor(a.seed),
        other => return Err(Error::InvalidConfig(format!("unknown model kind `{other}`"))),
    };
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.validation_fraction {
        cfg.validation_fraction = v;
    }
    cfg.pairs_per_epoch = a.pairs_per_epoch.or(cfg.pairs_per_epoch);
    let model = match a.kind.as_str() {
        "classifier" => ranking::train_classifier(&data, &cfg)?,
        _ => ranking::train_nnr(&data, &cfg)?,
    };
    nn::save_model(
        &Checkpoint {
            model,
            config: Some(cfg),
            seed: a.seed,
        },
        &a.model_out,
    )?;
    println!("saved model to {}", a.model_out.display());
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> orars::Result<()> {
    let ckpt = nn::load_model(&a.model)?;
    let mode: AgopMode = a.agop_mode.parse()?;
    let train = dataset::load_dataset(&a.train_ref)?;
    let input = dataset::load_dataset(&a.input)?;
    let train_feats = scored_features(&train, mode)?;
    let input_feats = features::extract_features_batch(&input.utterances, mode);
    let mut out = std::io::stdout().lock();
    match a.mode.as_str() {
        "rank" => {
            for (u, f) in input.utterances.iter().zip(&input_feats) {
                let r = ranking::score_rank_placement(&ckpt.model, &train_feats, f)?;
                writeln!(out, "{},{}", u.id, r.predicted_score).ok();
            }
        }
        "anchor" => {
            let rank_map = dataset::discretize_scores(&train, a.m)?;
            let ranks: Vec<usize> = train.utterances.iter().map(|u| rank_map[&u.id]).collect();
            let mut counts = BTreeMap::new();
            for &r in &ranks {
                *counts.entry(r).or_insert(0usize) += 1;
            }
            let per_rank = *counts.values().next().ok_or_else(|| Error::Train("empty anchor set".into()))?;
            for (u, f) in input.utterances.iter().zip(&input_feats) {
                let y = ranking::score_anchor_set(&ckpt.model, &train_feats, &ranks, per_rank, f)?;
                writeln!(out, "{},{y}", u.id).ok();
            }
        }
        other => return Err(Error::InvalidConfig(format!("unknown scoring mode `{other}`"))),
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> orars::Result<()> {
    let d = dataset::load_dataset(&a.dataset)?;
    let report = if a.inter_rater {
        let method = match a.inter_rater_method.as_str() {
            "leave_one_out" => InterRaterMethod::LeaveOneOut,
            "pairwise" => InterRaterMethod::Pairwise,
            other => return Err(Error::InvalidConfig(format!("unknown inter-rater method `{other}`"))),
        };
        let rows = rater_matrix(&d)?;
        metrics::inter_rater_baseline(&rows, method)?
    } else {
        let path = a
            .predictions
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig("pass --predictions or --inter-rater".into()))?;
        let preds = read_predictions(path)?;
        let mut x = Vec::new();
        let mut y = Vec::new();
        for u in &d.utterances {
            let p = preds
                .get(&u.id)
                .ok_or_else(|| Error::InvalidConfig(format!("no prediction for utterance `{}`", u.id)))?;
            x.push(*p);
            y.push(u.score.ok_or_else(|| Error::Unscored(u.id.clone()))?);
        }
        metrics::EvalReport::from_predictions(&x, &y, None)?
    };
    print!("{}", report.table());
    if let Some(out) = &a.out {
        write_output(Some(out), &format!("{}\n", serde_json::to_string_pretty(&report).expect("report serializes")))?;
    }
    Ok(())
}

fn rater_matrix(d: &Dataset) -> orars::Result<Vec<Vec<f64>>> {
    let first = d
        .utterances
        .first()
        .and_then(|u| u.rater_scores.as_ref())
        .ok_or_else(|| Error::InvalidConfig("dataset has no rater scores".into()))?;
    let r = first.len();
    let mut rows = vec![Vec::with_capacity(d.len()); r];
    for u in &d.utterances {
        let rs = u
            .rater_scores
            .as_ref()
            .filter(|rs| rs.len() == r)
            .ok_or_else(|| Error::Validation {
                id: u.id.clone(),
                message: format!("expected {r} rater scores"),
            })?;
        for (row, &s) in rows.iter_mut().zip(rs) {
            row.push(s);
        }
    }
    Ok(rows)
}

fn read_predictions(path: &Path) -> orars::Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, score) = line.rsplit_once(',').ok_or_else(|| Error::Parse {
            record: i,
            message: "expected `id,score`".into(),
        })?;
        let score: f64 = score.trim().parse().map_err(|_| Error::Parse {
            record: i,
            message: format!("bad score `{score}`"),
        })?;
        out.insert(id.trim().to_string(), score);
    }
    Ok(out)
}

fn parse_config_file(path: &Path) -> orars::Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            record: i,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn cfg_parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> orars::Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<T>()
            .map(Some)
            .map_err(|_| Error::InvalidConfig(format!("bad value `{v}` for config key `{key}`"))),
    }
}

fn cmd_cross_validate(a: CrossValidateArgs) -> orars::Result<()> {
    let file = match &a.config {
        Some(p) => parse_config_file(p)?,
        None => BTreeMap::new(),
    };
    let dataset_path = a
        .dataset
        .or_else(|| file.get("dataset").map(PathBuf::from))
        .ok_or_else(|| Error::InvalidConfig("no dataset given (flag --dataset or config key `dataset`)".into()))?;
    let algorithm: Algorithm = a
        .algorithm
        .or_else(|| file.get("algorithm").cloned())
        .ok_or_else(|| Error::InvalidConfig("no algorithm given (flag --algorithm or config key `algorithm`)".into()))?
        .parse()?;
    let seed = a.seed.or(cfg_parse(&file, "seed")?).unwrap_or(0);

    let mut cfg = ExperimentConfig::new(algorithm, seed);
    cfg.train.seed = seed;
    if let Some(v) = a.folds.or(cfg_parse(&file, "folds")?) {
        cfg.folds = v;
    }
    if let Some(v) = a.m.or(cfg_parse(&file, "m")?) {
        cfg.m_ranks = v;
    }
    if let Some(v) = a.n.or(cfg_parse(&file, "n")?) {
        cfg.anchors_per_rank = v;
    }
    cfg.stratify = a.stratify || cfg_parse::<bool>(&file, "stratify")?.unwrap_or(false);
    if let Some(v) = a.agop_mode.or_else(|| file.get("agop-mode").cloned()) {
        cfg.agop_mode = v.parse()?;
    }
    if let Some(v) = a.epochs.or(cfg_parse(&file, "epochs")?) {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size.or(cfg_parse(&file, "batch-size")?) {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.learning_rate.or(cfg_parse(&file, "learning-rate")?) {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.pairs_per_epoch.or(cfg_parse(&file, "pairs-per-epoch")?) {
        cfg.train.pairs_per_epoch = Some(v);
    }
    if let Some(v) = a.validation_fraction.or(cfg_parse(&file, "validation-fraction")?) {
        cfg.train.validation_fraction = v;
    }
    let out = a.out.or_else(|| file.get("out").map(PathBuf::from));

    let d = dataset::load_dataset(&dataset_path)?;
    let report = experiment::run_cross_validation(&d, &cfg)?;
    println!("algorithm: {}", report.algorithm.name());
    print!("{}", report.metrics.table());
    if let Some(path) = &out {
        write_output(Some(path), &format!("{}\n", serde_json::to_string(&report).expect("report serializes")))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn cmd_pca(a: PcaArgs) -> orars::Result<()> {
    let d = dataset::load_dataset(&a.dataset)?;
    let mode: AgopMode = a.agop_mode.parse()?;
    let vectors: Vec<Vec<f64>> = d
        .utterances
        .iter()
        .map(|u| {
            let fv = features::extract_features(u, mode);
            match a.which.as_str() {
                "agop" => Ok(fv.agop),
                "cgop" => Ok(fv.cgop),
                "combined" => Ok(fv.combined()),
                other => Err(Error::InvalidConfig(format!("unknown feature subset `{other}`"))),
            }
        })
        .collect::<orars::Result<_>>()?;
    let proj = features::pca_project(&vectors, a.components)?;
    let mut body = String::new();
    body.push_str("id,score");
    for k in 0..a.components {
        body.push_str(&format!(",pc{}", k + 1));
    }
    body.push('\n');
    for (u, row) in d.utterances.iter().zip(&proj) {
        body.push_str(&u.id);
        match u.score {
            Some(s) => body.push_str(&format!(",{s}")),
            None => body.push(','),
        }
        for v in row {
            body.push_str(&format!(",{v}"));
        }
        body.push('\n');
    }
    write_output(a.out.as_deref(), &body)
}
