//! Synthetic corpus generator. Each utterance has a latent quality driving
//! both the aligned-phoneme posterior mass and the spread of the competing
//! phonemes, so the extracted features are informative by construction and
//! the whole pipeline can be verified end to end without real speech data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataset::{Dataset, Utterance};
use crate::error::{Error, Result};
use crate::linalg::Mat;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_utterances: usize,
    pub phoneme_count: usize,
    pub t_range: (usize, usize),
    /// Std-dev of the per-utterance perturbation on the aligned posterior
    /// mass.
    pub quality_noise: f64,
    /// Std-dev of each rater's deviation from the latent quality.
    pub rater_noise: f64,
    pub n_raters: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n_utterances: usize, seed: u64) -> Self {
        SynthConfig {
            n_utterances,
            phoneme_count: 20,
            t_range: (20, 60),
            quality_noise: 0.1,
            rater_noise: 0.25,
            n_raters: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_utterances == 0 || self.n_raters == 0 {
            return Err(Error::InvalidConfig("n_utterances and n_raters must be positive".into()));
        }
        if self.phoneme_count < 2 {
            return Err(Error::InvalidConfig("phoneme_count must be >= 2".into()));
        }
        if self.t_range.0 < 1 || self.t_range.0 > self.t_range.1 {
            return Err(Error::InvalidConfig(format!(
                "invalid frame range {:?}",
                self.t_range
            )));
        }
        if self.quality_noise < 0.0 || self.rater_noise < 0.0 {
            return Err(Error::InvalidConfig("noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

/// Aligned-phoneme posterior mass as a function of latent quality in [0, 5].
fn aligned_mass(q: f64) -> f64 {
    0.2 + 0.79 * q / 5.0
}

fn round_quarter(s: f64) -> f64 {
    (s * 4.0).round() / 4.0
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<Dataset> {
    Ok(generate_corpus_with_latent(cfg)?.0)
}

/// Like [`generate_corpus`] but also returns each utterance's latent
/// quality, for oracle checks.
pub fn generate_corpus_with_latent(cfg: &SynthConfig) -> Result<(Dataset, Vec<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let quality_jitter = Normal::new(0.0, cfg.quality_noise.max(1e-300)).expect("valid std dev");
    let rater_jitter = Normal::new(0.0, cfg.rater_noise.max(1e-300)).expect("valid std dev");
    let c = cfg.phoneme_count;
    let width = c - 1;
    let id_width = cfg.n_utterances.to_string().len().max(4);

    let mut utterances = Vec::with_capacity(cfg.n_utterances);
    let mut latents = Vec::with_capacity(cfg.n_utterances);
    for idx in 0..cfg.n_utterances {
        let q: f64 = rng.random_range(0.0..5.0);
        let offset = if cfg.quality_noise > 0.0 {
            quality_jitter.sample(&mut rng)
        } else {
            0.0
        };
        let pi = (aligned_mass(q) + offset).clamp(0.01, 0.995);
        // higher quality concentrates the competing mass
        let concentration = 1.0 + 1.5 * q;
        let t = rng.random_range(cfg.t_range.0..=cfg.t_range.1);

        let mut log_ppg = Mat::zeros(t, c);
        let mut alignment = Vec::with_capacity(t);
        let mut weights = vec![0.0; width];
        for frame in 0..t {
            let target = rng.random_range(0..c);
            alignment.push(target);
            let mut wsum = 0.0;
            for w in weights.iter_mut() {
                *w = (concentration * rng.random_range(0.0..1.0)).exp();
                wsum += *w;
            }
            let rest = 1.0 - pi;
            let row = log_ppg.row_mut(frame);
            let mut k = 0;
            for (j, slot) in row.iter_mut().enumerate() {
                if j == target {
                    *slot = pi.ln();
                } else {
                    *slot = (rest * weights[k] / wsum).ln();
                    k += 1;
                }
            }
        }

        let rater_scores: Vec<f64> = (0..cfg.n_raters)
            .map(|_| {
                let noise = if cfg.rater_noise > 0.0 {
                    rater_jitter.sample(&mut rng)
                } else {
                    0.0
                };
                round_quarter((q + noise).clamp(0.0, 5.0))
            })
            .collect();
        let score = rater_scores.iter().sum::<f64>() / rater_scores.len() as f64;

        utterances.push(Utterance {
            id: format!("synth-{idx:0id_width$}"),
            log_ppg,
            alignment,
            score: Some(score),
            rater_scores: Some(rater_scores),
        });
        latents.push(q);
    }
    let dataset = Dataset::new(utterances, c)?;
    Ok((dataset, latents))
}
