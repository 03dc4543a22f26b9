//! Domain types for scored utterances and their newline-delimited on-disk
//! format.
//!
//! A dataset file starts with a header object carrying `phoneme_count` and
//! `format_version`, followed by one JSON record per line.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

pub const FORMAT_VERSION: u32 = 1;

/// Probabilities stored as exactly zero are floored here on ingest so logs
/// stay finite.
pub const LOG_PROB_FLOOR: f64 = -23.025850929940457; // ln(1e-10)

const ROW_SUM_TOL: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Utterance {
    pub id: String,
    /// Natural-log posterior probabilities, shape (T, C).
    pub log_ppg: Mat,
    /// Per-frame phoneme index, length T.
    pub alignment: Vec<usize>,
    /// Mean rater score in [0, 5], when rated.
    pub score: Option<f64>,
    pub rater_scores: Option<Vec<f64>>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.log_ppg.rows
    }

    pub fn phoneme_count(&self) -> usize {
        self.log_ppg.cols
    }

    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Validation {
            id: self.id.clone(),
            message: message.into(),
        }
    }

    pub fn validate(&self, phoneme_count: usize) -> Result<()> {
        let (t, c) = (self.log_ppg.rows, self.log_ppg.cols);
        if c != phoneme_count {
            return Err(self.fail(format!("phoneme dimension {c} != dataset phoneme_count {phoneme_count}")));
        }
        if t < 1 {
            return Err(self.fail("empty posteriorgram (T = 0)"));
        }
        if c < 2 {
            return Err(self.fail("phoneme inventory must have C >= 2"));
        }
        if self.alignment.len() != t {
            return Err(self.fail(format!(
                "alignment length {} != frame count {t}",
                self.alignment.len()
            )));
        }
        for (frame, &p) in self.alignment.iter().enumerate() {
            if p >= c {
                return Err(self.fail(format!("alignment index {p} at frame {frame} out of range [0, {c})")));
            }
        }
        for row in 0..t {
            let mut sum = 0.0;
            for &v in self.log_ppg.row(row) {
                if v > 0.0 {
                    return Err(self.fail(format!("log posterior {v} > 0 at frame {row}")));
                }
                sum += v.exp();
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(self.fail(format!("frame {row} posteriors sum to {sum}, not a distribution")));
            }
        }
        if let Some(s) = self.score {
            if !(0.0..=5.0).contains(&s) {
                return Err(self.fail(format!("score {s} outside [0, 5]")));
            }
        }
        if let Some(rs) = &self.rater_scores {
            for &r in rs {
                if !(0.0..=5.0).contains(&r) {
                    return Err(self.fail(format!("rater score {r} outside [0, 5]")));
                }
            }
            if let Some(s) = self.score {
                let mean = rs.iter().sum::<f64>() / rs.len() as f64;
                if (s - mean).abs() > 1e-9 {
                    return Err(self.fail(format!("score {s} != mean of rater scores {mean}")));
                }
            }
        }
        Ok(())
    }
}

/// One-hot frame-by-phoneme matrix derived from an alignment sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentMatrix {
    pub one_hot: Mat,
}

pub fn alignment_to_matrix(alignment: &[usize], phoneme_count: usize) -> Result<AlignmentMatrix> {
    let mut m = Mat::zeros(alignment.len(), phoneme_count);
    for (t, &p) in alignment.iter().enumerate() {
        if p >= phoneme_count {
            return Err(Error::Shape(format!(
                "alignment index {p} at frame {t} out of range [0, {phoneme_count})"
            )));
        }
        m.set(t, p, 1.0);
    }
    Ok(AlignmentMatrix { one_hot: m })
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub phoneme_count: usize,
}

impl Dataset {
    pub fn new(utterances: Vec<Utterance>, phoneme_count: usize) -> Result<Self> {
        let d = Dataset { utterances, phoneme_count };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for u in &self.utterances {
            u.validate(self.phoneme_count)?;
            if !seen.insert(u.id.as_str()) {
                return Err(Error::Validation {
                    id: u.id.clone(),
                    message: "duplicate utterance id".into(),
                });
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> Result<Vec<f64>> {
        self.utterances
            .iter()
            .map(|u| u.score.ok_or_else(|| Error::Unscored(u.id.clone())))
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    phoneme_count: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    log_ppg: Vec<Vec<f64>>,
    alignment: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rater_scores: Option<Vec<f64>>,
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let header_line = match lines.next() {
        Some((_, line)) => line.map_err(|e| io_err(path, e))?,
        None => {
            return Err(Error::Parse {
                record: 0,
                message: "empty file, missing header".into(),
            })
        }
    };
    let header: Header = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        record: 0,
        message: format!("bad header: {e}"),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: header.format_version,
            expected: FORMAT_VERSION,
        });
    }

    let mut utterances = Vec::new();
    for (lineno, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            record: lineno,
            message: e.to_string(),
        })?;
        let t = rec.log_ppg.len();
        let c = rec.log_ppg.first().map_or(0, |r| r.len());
        if rec.log_ppg.iter().any(|r| r.len() != c) {
            return Err(Error::Parse {
                record: lineno,
                message: format!("ragged log_ppg rows in `{}`", rec.id),
            });
        }
        let mut m = Mat::zeros(t, c);
        for (i, row) in rec.log_ppg.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                m.set(i, j, v.max(LOG_PROB_FLOOR));
            }
        }
        let score = match (rec.score, &rec.rater_scores) {
            (Some(s), _) => Some(s),
            (None, Some(rs)) if !rs.is_empty() => Some(rs.iter().sum::<f64>() / rs.len() as f64),
            _ => None,
        };
        utterances.push(Utterance {
            id: rec.id,
            log_ppg: m,
            alignment: rec.alignment,
            score,
            rater_scores: rec.rater_scores,
        });
    }
    Dataset::new(utterances, header.phoneme_count)
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format_version: FORMAT_VERSION,
        phoneme_count: d.phoneme_count,
    };
    writeln!(w, "{}", serde_json::to_string(&header).expect("header serializes")).map_err(|e| io_err(path, e))?;
    for u in &d.utterances {
        let rec = Record {
            id: u.id.clone(),
            log_ppg: (0..u.frames()).map(|t| u.log_ppg.row(t).to_vec()).collect(),
            alignment: u.alignment.clone(),
            score: u.score,
            rater_scores: u.rater_scores.clone(),
        };
        writeln!(w, "{}", serde_json::to_string(&rec).expect("record serializes")).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Maps a score in [0, 5] to a rank in [1, M] by linear rounding.
pub fn rank_of_score(score: f64, m: usize) -> usize {
    let raw = 1 + (score / 5.0 * (m as f64 - 1.0) + 0.5).floor() as i64;
    raw.clamp(1, m as i64) as usize
}

pub fn discretize_scores(d: &Dataset, m: usize) -> Result<BTreeMap<String, usize>> {
    if m < 2 {
        return Err(Error::InvalidConfig(format!("rank count M = {m}, need M >= 2")));
    }
    let mut out = BTreeMap::new();
    for u in &d.utterances {
        let s = u.score.ok_or_else(|| Error::Unscored(u.id.clone()))?;
        out.insert(u.id.clone(), rank_of_score(s, m));
    }
    Ok(out)
}

/// Splits a scored dataset into a balanced anchor set (N samples per occupied
/// rank, chosen uniformly under `seed`) and the remaining training set.
pub fn split_anchor_set(d: &Dataset, m: usize, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    let ranks = discretize_scores(d, m)?;
    let mut by_rank: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, u) in d.utterances.iter().enumerate() {
        by_rank.entry(ranks[&u.id]).or_default().push(idx);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut anchor_idx = Vec::new();
    for (&rank, members) in &by_rank {
        if members.len() < n {
            return Err(Error::InsufficientRank {
                rank,
                have: members.len(),
                need: n,
            });
        }
        let picks = rand::seq::index::sample(&mut rng, members.len(), n);
        anchor_idx.extend(picks.iter().map(|i| members[i]));
    }
    anchor_idx.sort_unstable();
    let anchor_set: std::collections::HashSet<usize> = anchor_idx.iter().copied().collect();
    let mut anchors = Vec::new();
    let mut train = Vec::new();
    for (idx, u) in d.utterances.iter().enumerate() {
        if anchor_set.contains(&idx) {
            anchors.push(u.clone());
        } else {
            train.push(u.clone());
        }
    }
    Ok((
        Dataset {
            utterances: anchors,
            phoneme_count: d.phoneme_count,
        },
        Dataset {
            utterances: train,
            phoneme_count: d.phoneme_count,
        },
    ))
}
