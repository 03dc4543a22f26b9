//! Feature extraction from log posteriorgrams: per-phoneme average GOP,
//! confusion statistics over the non-target phonemes, the classic
//! sentence-level GOP average, and a small PCA for visualization.

use serde::{Deserialize, Serialize};

use crate::dataset::Utterance;
use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

pub const EPSILON: f64 = 1e-6;

/// How the per-phoneme average vector is computed.
///
/// `Diagonal` averages each phoneme's own log posterior over the frames
/// aligned to it. `Literal` instead sums the whole frame's log posteriors
/// before averaging, which is the printed matrix product read verbatim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgopMode {
    #[default]
    Diagonal,
    Literal,
}

impl std::str::FromStr for AgopMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diagonal" => Ok(AgopMode::Diagonal),
            "literal" => Ok(AgopMode::Literal),
            other => Err(Error::InvalidConfig(format!("unknown agop mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureVector {
    /// Per-phoneme average log posterior, length C.
    pub agop: Vec<f64>,
    /// Means then standard deviations of the sorted non-target posteriors,
    /// length 2C-2.
    pub cgop: Vec<f64>,
}

impl FeatureVector {
    pub fn combined(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.agop.len() + self.cgop.len());
        v.extend_from_slice(&self.agop);
        v.extend_from_slice(&self.cgop);
        v
    }

    pub fn dim(&self) -> usize {
        self.agop.len() + self.cgop.len()
    }
}

/// Dimension of the combined feature vector for inventory size `c`.
pub fn feature_dim(c: usize) -> usize {
    3 * c - 2
}

pub fn compute_agop(u: &Utterance, mode: AgopMode) -> Vec<f64> {
    let (t, c) = (u.frames(), u.phoneme_count());
    let mut numer = vec![0.0; c];
    let mut frames_per_phoneme = vec![0.0; c];
    for frame in 0..t {
        let p = u.alignment[frame];
        frames_per_phoneme[p] += 1.0;
        match mode {
            AgopMode::Diagonal => numer[p] += u.log_ppg.get(frame, p),
            AgopMode::Literal => numer[p] += u.log_ppg.row(frame).iter().sum::<f64>(),
        }
    }
    numer
        .iter()
        .zip(&frames_per_phoneme)
        .map(|(&n, &d)| n / (d + EPSILON))
        .collect()
}

pub fn compute_cgop(u: &Utterance) -> Vec<f64> {
    let (t, c) = (u.frames(), u.phoneme_count());
    let width = c - 1;
    let mut means = vec![0.0; width];
    let mut sq = vec![0.0; width];
    let mut sorted_row = Vec::with_capacity(width);
    for frame in 0..t {
        sorted_row.clear();
        let target = u.alignment[frame];
        for (j, &v) in u.log_ppg.row(frame).iter().enumerate() {
            if j != target {
                sorted_row.push(v);
            }
        }
        sorted_row.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for (k, &v) in sorted_row.iter().enumerate() {
            means[k] += v;
            sq[k] += v * v;
        }
    }
    let tf = t as f64;
    let mut out = Vec::with_capacity(2 * width);
    for m in means.iter_mut() {
        *m /= tf;
    }
    out.extend_from_slice(&means);
    for (k, &s) in sq.iter().enumerate() {
        let var = (s / tf - means[k] * means[k]).max(0.0);
        out.push(var.sqrt());
    }
    out
}

pub fn extract_features(u: &Utterance, mode: AgopMode) -> FeatureVector {
    FeatureVector {
        agop: compute_agop(u, mode),
        cgop: compute_cgop(u),
    }
}

/// Extracts combined feature vectors for a batch of utterances, in input
/// order.
pub fn extract_features_batch(utterances: &[Utterance], mode: AgopMode) -> Vec<Vec<f64>> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        utterances
            .par_iter()
            .map(|u| extract_features(u, mode).combined())
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        utterances
            .iter()
            .map(|u| extract_features(u, mode).combined())
            .collect()
    }
}

/// Sequential twin of [`extract_features_batch`], kept for the benches.
pub fn extract_features_batch_seq(utterances: &[Utterance], mode: AgopMode) -> Vec<Vec<f64>> {
    utterances
        .iter()
        .map(|u| extract_features(u, mode).combined())
        .collect()
}

/// Mean over occupied phonemes of that phoneme's average aligned log
/// posterior. Unoccupied phonemes are excluded from the average.
pub fn classic_gop_sentence_score(u: &Utterance) -> f64 {
    let c = u.phoneme_count();
    let mut numer = vec![0.0; c];
    let mut count = vec![0usize; c];
    for frame in 0..u.frames() {
        let p = u.alignment[frame];
        numer[p] += u.log_ppg.get(frame, p);
        count[p] += 1;
    }
    let mut sum = 0.0;
    let mut occupied = 0usize;
    for p in 0..c {
        if count[p] > 0 {
            sum += numer[p] / count[p] as f64;
            occupied += 1;
        }
    }
    sum / occupied as f64
}

/// Mean-centered projection onto the top-k covariance eigenvectors.
/// Components are sign-fixed so each one's largest-magnitude entry is
/// positive.
pub fn pca_project(vectors: &[Vec<f64>], k: usize) -> Result<Vec<Vec<f64>>> {
    if vectors.len() < 2 {
        return Err(Error::InvalidConfig("pca needs at least 2 vectors".into()));
    }
    let dim = vectors[0].len();
    if vectors.iter().any(|v| v.len() != dim) {
        return Err(Error::Shape("pca input vectors have unequal dimensions".into()));
    }
    if k > dim {
        return Err(Error::InvalidConfig(format!("k = {k} exceeds dimension {dim}")));
    }
    let n = vectors.len();
    let mut mean = vec![0.0; dim];
    for v in vectors {
        for (m, &x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut centered = Mat::zeros(n, dim);
    for (i, v) in vectors.iter().enumerate() {
        for (j, &x) in v.iter().enumerate() {
            centered.set(i, j, x - mean[j]);
        }
    }
    let mut cov = linalg::matmul_tn(&centered, &centered);
    for v in cov.data.iter_mut() {
        *v /= (n - 1) as f64;
    }
    let (_, vecs) = linalg::symmetric_eigen(&cov);
    let mut basis = Mat::zeros(dim, k);
    for comp in 0..k {
        let mut best = 0usize;
        for r in 1..dim {
            if vecs.get(r, comp).abs() > vecs.get(best, comp).abs() {
                best = r;
            }
        }
        let sign = if vecs.get(best, comp) < 0.0 { -1.0 } else { 1.0 };
        for r in 0..dim {
            basis.set(r, comp, sign * vecs.get(r, comp));
        }
    }
    let proj = linalg::matmul(&centered, &basis);
    Ok((0..n).map(|i| proj.row(i).to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Dataset, Utterance, LOG_PROB_FLOOR};
    use crate::linalg::Mat;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn utt(probs: &[Vec<f64>], alignment: &[usize]) -> Utterance {
        let t = probs.len();
        let c = probs[0].len();
        let mut m = Mat::zeros(t, c);
        for (i, row) in probs.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                m.set(i, j, p.ln().max(LOG_PROB_FLOOR));
            }
        }
        Utterance {
            id: "t".into(),
            log_ppg: m,
            alignment: alignment.to_vec(),
            score: None,
            rater_scores: None,
        }
    }

    /// Naive per-phoneme loop, independent of the implementation above.
    fn agop_oracle(u: &Utterance) -> Vec<f64> {
        let c = u.phoneme_count();
        (0..c)
            .map(|p| {
                let mut s = 0.0;
                let mut n = 0.0;
                for t in 0..u.frames() {
                    if u.alignment[t] == p {
                        s += u.log_ppg.get(t, p);
                        n += 1.0;
                    }
                }
                s / (n + EPSILON)
            })
            .collect()
    }

    /// Triple-loop reference for the confusion statistics.
    fn cgop_oracle(u: &Utterance) -> Vec<f64> {
        let (t, c) = (u.frames(), u.phoneme_count());
        let mut sorted = Vec::new();
        for frame in 0..t {
            let mut row: Vec<f64> = (0..c)
                .filter(|&j| j != u.alignment[frame])
                .map(|j| u.log_ppg.get(frame, j))
                .collect();
            row.sort_by(|a, b| b.partial_cmp(a).unwrap());
            sorted.push(row);
        }
        let width = c - 1;
        let mut out = Vec::new();
        for k in 0..width {
            out.push(sorted.iter().map(|r| r[k]).sum::<f64>() / t as f64);
        }
        for k in 0..width {
            let m = out[k];
            let var = sorted.iter().map(|r| (r[k] - m) * (r[k] - m)).sum::<f64>() / t as f64;
            out.push(var.sqrt());
        }
        out
    }

    pub(crate) fn random_utterance(rng: &mut ChaCha8Rng, t: usize, c: usize) -> Utterance {
        let mut probs = Vec::with_capacity(t);
        let mut alignment = Vec::with_capacity(t);
        for _ in 0..t {
            let mut row: Vec<f64> = (0..c).map(|_| rng.random_range(0.01..1.0)).collect();
            let sum: f64 = row.iter().sum();
            for v in row.iter_mut() {
                *v /= sum;
            }
            probs.push(row);
            alignment.push(rng.random_range(0..c));
        }
        utt(&probs, &alignment)
    }

    #[test]
    fn agop_hand_example() {
        let u = utt(&[vec![0.7, 0.2, 0.1], vec![0.6, 0.3, 0.1]], &[0, 0]);
        let v = compute_agop(&u, AgopMode::Diagonal);
        let expected = (0.7f64.ln() + 0.6f64.ln()) / (2.0 + EPSILON);
        assert!((v[0] - expected).abs() < 1e-12);
        assert!(v[1].abs() < 1e-12);
        assert!(v[2].abs() < 1e-12);
    }

    #[test]
    fn agop_perfect_posterior_is_zero() {
        // prob 1 at the aligned phoneme, leaving ~0 elsewhere
        let u = utt(&[vec![0.999999999, 5e-10, 5e-10]], &[0]);
        let v = compute_agop(&u, AgopMode::Diagonal);
        assert!(v[0].abs() < 1e-8);
    }

    #[test]
    fn agop_single_frame() {
        let u = utt(&[vec![0.5, 0.5]], &[1]);
        let v = compute_agop(&u, AgopMode::Diagonal);
        assert!(v[0].abs() < 1e-12);
        assert!((v[1] - 0.5f64.ln() / (1.0 + EPSILON)).abs() < 1e-12);
    }

    #[test]
    fn agop_matches_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let t = rng.random_range(1..30);
            let c = rng.random_range(2..20);
            let u = random_utterance(&mut rng, t, c);
            let got = compute_agop(&u, AgopMode::Diagonal);
            let want = agop_oracle(&u);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn literal_mode_sums_whole_frames() {
        let u = utt(&[vec![0.7, 0.2, 0.1], vec![0.6, 0.3, 0.1]], &[0, 0]);
        let v = compute_agop(&u, AgopMode::Literal);
        let frame1: f64 = [0.7, 0.2, 0.1].iter().map(|p: &f64| p.ln()).sum();
        let frame2: f64 = [0.6, 0.3, 0.1].iter().map(|p: &f64| p.ln()).sum();
        assert!((v[0] - (frame1 + frame2) / (2.0 + EPSILON)).abs() < 1e-12);
    }

    #[test]
    fn cgop_hand_example() {
        let u = utt(&[vec![0.7, 0.2, 0.1], vec![0.6, 0.3, 0.1]], &[0, 0]);
        let v = compute_cgop(&u);
        let m0 = (0.2f64.ln() + 0.3f64.ln()) / 2.0;
        let m1 = 0.1f64.ln();
        let s0 = ((0.2f64.ln() - m0).powi(2) / 2.0 + (0.3f64.ln() - m0).powi(2) / 2.0).sqrt();
        assert!((v[0] - m0).abs() < 1e-12);
        assert!((v[1] - m1).abs() < 1e-12);
        assert!((v[2] - s0).abs() < 1e-12);
        assert!(v[3].abs() < 1e-12);
        assert!((v[0] + 1.40672).abs() < 1e-4);
        assert!((v[2] - 0.20273).abs() < 1e-4);
    }

    #[test]
    fn cgop_single_frame_has_zero_deviation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = random_utterance(&mut rng, 1, 6);
        let v = compute_cgop(&u);
        for &s in &v[5..] {
            assert_eq!(s, 0.0);
        }
    }

    #[test]
    fn cgop_identical_frames_have_zero_deviation() {
        let u = utt(&[vec![0.5, 0.3, 0.2], vec![0.5, 0.3, 0.2], vec![0.5, 0.3, 0.2]], &[0, 0, 0]);
        let v = compute_cgop(&u);
        assert!(v[2].abs() < 1e-12);
        assert!(v[3].abs() < 1e-12);
    }

    #[test]
    fn cgop_matches_oracle_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let t = rng.random_range(1..30);
            let c = rng.random_range(2..20);
            let u = random_utterance(&mut rng, t, c);
            let got = compute_cgop(&u);
            let want = cgop_oracle(&u);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn feature_dimension_is_fixed() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let u1 = random_utterance(&mut rng, 5, 3);
        let u2 = random_utterance(&mut rng, 17, 3);
        assert_eq!(extract_features(&u1, AgopMode::Diagonal).dim(), 7);
        assert_eq!(extract_features(&u2, AgopMode::Diagonal).dim(), 7);
        let u3 = random_utterance(&mut rng, 4, 2);
        assert_eq!(extract_features(&u3, AgopMode::Diagonal).dim(), 4);
    }

    #[test]
    fn cgop_invariants_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = random_utterance(&mut rng, 20, 8);
        let fv = extract_features(&u, AgopMode::Diagonal);
        let width = 7;
        for &m in &fv.cgop[..width] {
            assert!(m <= 0.0);
        }
        for &s in &fv.cgop[width..] {
            assert!(s >= 0.0);
        }
        for &a in &fv.agop {
            assert!(a <= 0.0);
        }
    }

    #[test]
    fn classic_gop_examples() {
        let u = utt(&[vec![0.7, 0.2, 0.1], vec![0.6, 0.3, 0.1]], &[0, 0]);
        let per_frame = (0.7f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((classic_gop_sentence_score(&u) - per_frame).abs() < 1e-12);

        // two occupied phonemes -> mean of the two per-phoneme averages
        let u2 = utt(&[vec![0.7, 0.2, 0.1], vec![0.1, 0.8, 0.1]], &[0, 1]);
        let expect = (0.7f64.ln() + 0.8f64.ln()) / 2.0;
        assert!((classic_gop_sentence_score(&u2) - expect).abs() < 1e-12);
    }

    #[test]
    fn batch_extraction_matches_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut utts: Vec<Utterance> = (0..10).map(|_| random_utterance(&mut rng, 12, 5)).collect();
        for (i, u) in utts.iter_mut().enumerate() {
            u.id = format!("u{i}");
        }
        Dataset::new(utts.clone(), 5).unwrap();
        let par = extract_features_batch(&utts, AgopMode::Diagonal);
        let seq = extract_features_batch_seq(&utts, AgopMode::Diagonal);
        assert_eq!(par, seq);
    }

    #[test]
    fn pca_line_captures_all_variance() {
        let pts: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64]).collect();
        let proj = pca_project(&pts, 1).unwrap();
        // reconstruct: 1D projection must preserve all pairwise distances
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d2 = (pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2);
                let p2 = (proj[i][0] - proj[j][0]).powi(2);
                assert!((d2 - p2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_full_rank_preserves_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<Vec<f64>> = (0..20).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let proj = pca_project(&pts, 4).unwrap();
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                let d2: f64 = (0..4).map(|k| (pts[i][k] - pts[j][k]).powi(2)).sum();
                let p2: f64 = (0..4).map(|k| (proj[i][k] - proj[j][k]).powi(2)).sum();
                assert!((d2.sqrt() - p2.sqrt()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pca_matches_dense_eigensolver_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 50;
        let dim = 6;
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let proj = pca_project(&pts, 2).unwrap();

        // independent route: nalgebra's symmetric eigensolver on the
        // covariance matrix
        let mut mean = vec![0.0; dim];
        for p in &pts {
            for (m, &x) in mean.iter_mut().zip(p) {
                *m += x / n as f64;
            }
        }
        let centered = nalgebra::DMatrix::from_fn(n, dim, |i, j| pts[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        for (k, &col) in order.iter().take(2).enumerate() {
            let axis = eig.eigenvectors.column(col);
            let expected: Vec<f64> = (0..n).map(|i| centered.row(i).transpose().dot(&axis)).collect();
            // eigenvectors are sign-ambiguous between the two routes
            let direct: f64 = (0..n).map(|i| (proj[i][k] - expected[i]).abs()).fold(0.0, f64::max);
            let flipped: f64 = (0..n).map(|i| (proj[i][k] + expected[i]).abs()).fold(0.0, f64::max);
            assert!(direct.min(flipped) <= 1e-6, "component {k}: {direct} / {flipped}");
        }
    }

    #[test]
    fn pca_k_too_large_errors() {
        let pts = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(pca_project(&pts, 3).is_err());
    }
}
