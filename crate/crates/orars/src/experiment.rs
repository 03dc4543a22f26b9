//! Cross-validation experiment runner tying feature extraction, training,
//! scoring and metrics together.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset};
use crate::error::{Error, Result};
use crate::features::{self, AgopMode};
use crate::metrics::{EvalReport, FoldMetrics};
use crate::nn::TrainConfig;
use crate::ranking::{self, ScoredFeatures};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    GopMean,
    Nnr,
    OrarsRank,
    OrarsAnchor,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gop_mean" => Ok(Algorithm::GopMean),
            "nnr" => Ok(Algorithm::Nnr),
            "orars_rank" => Ok(Algorithm::OrarsRank),
            "orars_anchor" => Ok(Algorithm::OrarsAnchor),
            other => Err(Error::InvalidConfig(format!(
                "unknown algorithm `{other}` (expected gop_mean, nnr, orars_rank or orars_anchor)"
            ))),
        }
    }
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::GopMean => "gop_mean",
            Algorithm::Nnr => "nnr",
            Algorithm::OrarsRank => "orars_rank",
            Algorithm::OrarsAnchor => "orars_anchor",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub folds: usize,
    /// Rank count for score discretization (anchor mode).
    pub m_ranks: usize,
    /// Anchor samples per rank (anchor mode).
    pub anchors_per_rank: usize,
    pub agop_mode: AgopMode,
    pub stratify: bool,
    pub seed: u64,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn new(algorithm: Algorithm, seed: u64) -> Self {
        let train = match algorithm {
            Algorithm::Nnr => TrainConfig::regressor(seed),
            _ => TrainConfig::classifier(seed),
        };
        ExperimentConfig {
            algorithm,
            folds: 5,
            m_ranks: 21,
            anchors_per_rank: 5,
            agop_mode: AgopMode::Diagonal,
            stratify: false,
            seed,
            train,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub truth: f64,
    pub predicted: f64,
    pub fold: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvReport {
    pub algorithm: Algorithm,
    pub folds: usize,
    pub seed: u64,
    pub metrics: EvalReport,
    pub predictions: Vec<Prediction>,
}

/// Seeded shuffle then round-robin fold assignment; stratified variant
/// groups by discretized rank first.
pub fn assign_folds(d: &Dataset, folds: usize, seed: u64, stratify: bool, m_ranks: usize) -> Result<Vec<usize>> {
    let n = d.len();
    if folds < 2 {
        return Err(Error::InvalidConfig("need at least 2 folds".into()));
    }
    if folds > n {
        return Err(Error::InvalidConfig(format!("{folds} folds exceed dataset size {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    if stratify {
        let ranks = dataset::discretize_scores(d, m_ranks)?;
        order.sort_by_key(|&i| ranks[&d.utterances[i].id]);
    }
    let mut assignment = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % folds;
    }
    Ok(assignment)
}

/// Least-squares line through (x, y), for calibrating raw GOP values onto
/// the score scale.
fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
    }
    if sxx == 0.0 {
        (0.0, my)
    } else {
        let slope = sxy / sxx;
        (slope, my - slope * mx)
    }
}

/// Converts an anchor-set rank value in [0, M] onto the score scale.
fn anchor_rank_to_score(y_t: f64, m_ranks: usize) -> f64 {
    ((y_t - 1.0) / (m_ranks as f64 - 1.0) * 5.0).clamp(0.0, 5.0)
}

pub fn run_cross_validation(d: &Dataset, cfg: &ExperimentConfig) -> Result<CvReport> {
    let truth = d.scores()?; // fails on unscored utterances
    let assignment = assign_folds(d, cfg.folds, cfg.seed, cfg.stratify, cfg.m_ranks)?;
    let all_features = features::extract_features_batch(&d.utterances, cfg.agop_mode);
    let gop_scores: Vec<f64> = d.utterances.iter().map(features::classic_gop_sentence_score).collect();

    let mut predicted = vec![f64::NAN; d.len()];
    let mut per_fold = Vec::with_capacity(cfg.folds);

    for fold in 0..cfg.folds {
        let test_idx: Vec<usize> = (0..d.len()).filter(|&i| assignment[i] == fold).collect();
        let train_idx: Vec<usize> = (0..d.len()).filter(|&i| assignment[i] != fold).collect();
        let fold_seed = cfg.train.seed.wrapping_add(fold as u64);
        let fold_train = TrainConfig {
            seed: fold_seed,
            ..cfg.train.clone()
        };

        match cfg.algorithm {
            Algorithm::GopMean => {
                let xs: Vec<f64> = train_idx.iter().map(|&i| gop_scores[i]).collect();
                let ys: Vec<f64> = train_idx.iter().map(|&i| truth[i]).collect();
                let (slope, intercept) = fit_line(&xs, &ys);
                for &i in &test_idx {
                    predicted[i] = (slope * gop_scores[i] + intercept).clamp(0.0, 5.0);
                }
            }
            Algorithm::Nnr => {
                let train = ScoredFeatures::new(
                    train_idx.iter().map(|&i| all_features[i].clone()).collect(),
                    train_idx.iter().map(|&i| truth[i]).collect(),
                )?;
                let model = ranking::train_nnr(&train, &fold_train)?;
                for &i in &test_idx {
                    predicted[i] = ranking::predict_nnr(&model, &all_features[i])?;
                }
            }
            Algorithm::OrarsRank => {
                let train = ScoredFeatures::new(
                    train_idx.iter().map(|&i| all_features[i].clone()).collect(),
                    train_idx.iter().map(|&i| truth[i]).collect(),
                )?;
                let model = ranking::train_classifier(&train, &fold_train)?;
                for &i in &test_idx {
                    let r = ranking::score_rank_placement(&model, &train, &all_features[i])?;
                    predicted[i] = r.predicted_score;
                }
            }
            Algorithm::OrarsAnchor => {
                let train_portion = Dataset {
                    utterances: train_idx.iter().map(|&i| d.utterances[i].clone()).collect(),
                    phoneme_count: d.phoneme_count,
                };
                let (anchor_ds, train_ds) =
                    dataset::split_anchor_set(&train_portion, cfg.m_ranks, cfg.anchors_per_rank, fold_seed)?;
                let anchor_rank_map = dataset::discretize_scores(&anchor_ds, cfg.m_ranks)?;
                let anchor_ranks: Vec<usize> =
                    anchor_ds.utterances.iter().map(|u| anchor_rank_map[&u.id]).collect();
                let anchors = ScoredFeatures::new(
                    features::extract_features_batch(&anchor_ds.utterances, cfg.agop_mode),
                    anchor_ds.scores()?,
                )?;
                let train = ScoredFeatures::new(
                    features::extract_features_batch(&train_ds.utterances, cfg.agop_mode),
                    train_ds.scores()?,
                )?;
                let model = ranking::train_classifier(&train, &fold_train)?;
                for &i in &test_idx {
                    let y_t = ranking::score_anchor_set(
                        &model,
                        &anchors,
                        &anchor_ranks,
                        cfg.anchors_per_rank,
                        &all_features[i],
                    )?;
                    predicted[i] = anchor_rank_to_score(y_t, cfg.m_ranks);
                }
            }
        }

        let fold_pred: Vec<f64> = test_idx.iter().map(|&i| predicted[i]).collect();
        let fold_truth: Vec<f64> = test_idx.iter().map(|&i| truth[i]).collect();
        per_fold.push(FoldMetrics {
            mae: crate::metrics::mae(&fold_pred, &fold_truth)?,
            pcc: crate::metrics::pcc(&fold_pred, &fold_truth)?,
            scc: crate::metrics::scc(&fold_pred, &fold_truth)?,
        });
    }

    let metrics = EvalReport::from_predictions(&predicted, &truth, Some(per_fold))?;
    let predictions = d
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| Prediction {
            id: u.id.clone(),
            truth: truth[i],
            predicted: predicted[i],
            fold: assignment[i],
        })
        .collect();
    Ok(CvReport {
        algorithm: cfg.algorithm,
        folds: cfg.folds,
        seed: cfg.seed,
        metrics,
        predictions,
    })
}
