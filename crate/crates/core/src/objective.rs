//! Similarity, video relevance and the triplet ranking losses.
//!
//! Loss kernels work on a precomputed similarity matrix and can optionally
//! write `∂loss/∂S` into a caller buffer, so training records them on the
//! tape as single fused nodes.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Hinge summed over every negative.
    #[default]
    Sum,
    /// Hinge against the hardest negative only.
    Max,
}

/// Which terms enter the training objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Proposed,
    Intra,
    Video,
}

/// How moment similarities are pooled into one video–sentence relevance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Pooling {
    LogSumExp { beta: f64 },
    Average,
}

impl Default for Pooling {
    fn default() -> Self {
        Pooling::LogSumExp { beta: 10.0 }
    }
}

/// Similarities between every candidate of every in-batch video (rows,
/// stacked video by video) and every in-batch sentence (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct BatchScores<F> {
    pub sims: Tensor<F>,
    /// Row range of each distinct video in the batch.
    pub video_rows: Vec<Range<usize>>,
    /// Video block each sentence is annotated on.
    pub sentence_video: Vec<usize>,
    /// Absolute positive rows per sentence; `None` marks a skipped sentence.
    pub positives: Vec<Option<Vec<usize>>>,
}

impl<F: Real> BatchScores<F> {
    pub fn new(
        sims: Tensor<F>,
        video_rows: Vec<Range<usize>>,
        sentence_video: Vec<usize>,
        positives: Vec<Option<Vec<usize>>>,
    ) -> Result<Self> {
        let (rows, cols) = sims.dims2("batch_scores")?;
        let mut next = 0;
        for r in &video_rows {
            if r.start != next || r.is_empty() {
                return Err(Error::Contract("video row blocks must tile the rows".into()));
            }
            next = r.end;
        }
        if next != rows || sentence_video.len() != cols || positives.len() != cols {
            return Err(Error::Contract(format!(
                "scores {rows}×{cols} disagree with {} blocks / {} sentences",
                video_rows.len(),
                sentence_video.len()
            )));
        }
        for (b, pos) in positives.iter().enumerate() {
            let v = *sentence_video.get(b).unwrap();
            let block = video_rows
                .get(v)
                .ok_or_else(|| Error::Contract(format!("sentence {b} names video {v}")))?;
            if let Some(p) = pos {
                if p.is_empty() || p.iter().any(|r| !block.contains(r)) {
                    return Err(Error::Contract(format!(
                        "positives of sentence {b} must be nonempty rows of its video"
                    )));
                }
            }
        }
        Ok(Self {
            sims,
            video_rows,
            sentence_video,
            positives,
        })
    }

    pub fn sentences(&self) -> usize {
        self.sentence_video.len()
    }

    pub fn skipped(&self) -> usize {
        self.positives.iter().filter(|p| p.is_none()).count()
    }

    #[inline]
    fn s(&self, row: usize, sentence: usize) -> F {
        self.sims.data()[row * self.sentences() + sentence]
    }
}

/// Cosine similarity; a zero-norm side yields 0.
pub fn similarity<F: Real>(m: &[F], s: &[F]) -> F {
    let nm = dot(m, m).sqrt();
    let ns = dot(s, s).sqrt();
    if nm == F::zero() || ns == F::zero() {
        log::warn!("similarity with a zero-norm embedding");
        return F::zero();
    }
    dot(m, s) / (nm * ns)
}

/// `(1/β)·log Σ exp(β·Sᵢ)`, max-shifted.
pub fn relevance<F: Real>(sims: &[F], beta: F) -> Result<F> {
    pool(sims, Pooling::LogSumExp { beta: beta.f64() }, None)
}

/// Pools `sims` into one relevance value; when `weights` is given it
/// receives `∂R/∂Sᵢ`.
pub fn pool<F: Real>(sims: &[F], pooling: Pooling, weights: Option<&mut [F]>) -> Result<F> {
    if sims.is_empty() {
        return Err(Error::Contract("relevance over an empty moment list".into()));
    }
    match pooling {
        Pooling::LogSumExp { beta } => {
            if !(beta > 0.0) {
                return Err(Error::Contract(format!("beta must be positive, got {beta}")));
            }
            let beta = F::lit(beta);
            let max = sims.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for &s in sims {
                total += (beta * (s - max)).exp();
            }
            if let Some(w) = weights {
                for (wi, &s) in w.iter_mut().zip(sims) {
                    *wi = (beta * (s - max)).exp() / total;
                }
            }
            Ok(max + total.ln() / beta)
        }
        Pooling::Average => {
            let n = F::lit(sims.len() as f64);
            if let Some(w) = weights {
                w.iter_mut().for_each(|wi| *wi = F::one() / n);
            }
            Ok(sims.iter().copied().sum::<F>() / n)
        }
    }
}

/// Intra-video ranking loss. Negatives of a sentence are the candidates of
/// its own video outside its positive set.
pub fn intra_loss<F: Real>(
    scores: &BatchScores<F>,
    alpha: F,
    variant: Variant,
    mut grad: Option<&mut [F]>,
) -> F {
    let nb = scores.sentences();
    let mut loss = F::zero();
    let mut is_pos = Vec::new();
    for (b, pos) in scores.positives.iter().enumerate() {
        let Some(pos) = pos else { continue };
        let block = scores.video_rows[scores.sentence_video[b]].clone();
        is_pos.clear();
        is_pos.resize(block.len(), false);
        for &p in pos {
            is_pos[p - block.start] = true;
        }
        let negatives = block.clone().filter(|r| !is_pos[r - block.start]);
        match variant {
            Variant::Sum => {
                let negs: Vec<usize> = negatives.collect();
                for &p in pos {
                    let sp = scores.s(p, b);
                    for &n in &negs {
                        let h = alpha - sp + scores.s(n, b);
                        if h > F::zero() {
                            loss += h;
                            if let Some(g) = grad.as_deref_mut() {
                                g[p * nb + b] -= F::one();
                                g[n * nb + b] += F::one();
                            }
                        }
                    }
                }
            }
            Variant::Max => {
                let Some(hardest) = argmax(negatives, |r| scores.s(r, b)) else {
                    continue;
                };
                let sn = scores.s(hardest, b);
                for &p in pos {
                    let h = alpha - scores.s(p, b) + sn;
                    if h > F::zero() {
                        loss += h;
                        if let Some(g) = grad.as_deref_mut() {
                            g[p * nb + b] -= F::one();
                            g[hardest * nb + b] += F::one();
                        }
                    }
                }
            }
        }
    }
    loss
}

pub fn intra_loss_sum<F: Real>(scores: &BatchScores<F>, alpha: F) -> F {
    intra_loss(scores, alpha, Variant::Sum, None)
}

pub fn intra_loss_max<F: Real>(scores: &BatchScores<F>, alpha: F) -> F {
    intra_loss(scores, alpha, Variant::Max, None)
}

/// First index achieving the maximum (lowest index wins ties).
fn argmax<F: Real>(items: impl Iterator<Item = usize>, key: impl Fn(usize) -> F) -> Option<usize> {
    let mut best: Option<(usize, F)> = None;
    for i in items {
        let k = key(i);
        if best.is_none_or(|(_, bk)| k > bk) {
            best = Some((i, k));
        }
    }
    best.map(|(i, _)| i)
}

/// Relevance of every in-batch video to every in-batch sentence,
/// `R[v][b]`, with the pooling weights when requested.
/// `rel[v][b]` and, when requested, `∂rel[v][b]/∂S` over the rows of `v`.
type RelevanceMatrix<F> = (Vec<Vec<F>>, Vec<Vec<Vec<F>>>);

fn relevance_matrix<F: Real>(
    scores: &BatchScores<F>,
    pooling: Pooling,
    with_weights: bool,
) -> Result<RelevanceMatrix<F>> {
    let mut rel = Vec::with_capacity(scores.video_rows.len());
    let mut weights = Vec::new();
    let mut column = Vec::new();
    for rows in &scores.video_rows {
        let mut rv = Vec::with_capacity(scores.sentences());
        let mut wv = Vec::new();
        for b in 0..scores.sentences() {
            column.clear();
            column.extend(rows.clone().map(|r| scores.s(r, b)));
            if with_weights {
                let mut w = vec![F::zero(); column.len()];
                rv.push(pool(&column, pooling, Some(&mut w))?);
                wv.push(w);
            } else {
                rv.push(pool(&column, pooling, None)?);
            }
        }
        rel.push(rv);
        weights.push(wv);
    }
    Ok((rel, weights))
}

/// Video-level ranking loss over negative videos `(v⁻, s)` and negative
/// sentences `(v, s⁻)`. A sentence is a negative for `v` iff it is not
/// annotated on `v`. Skipped sentences do not anchor triplets but still
/// serve as negatives.
pub fn video_loss<F: Real>(
    scores: &BatchScores<F>,
    alpha: F,
    pooling: Pooling,
    variant: Variant,
    grad: Option<&mut [F]>,
) -> Result<F> {
    let nv = scores.video_rows.len();
    let nb = scores.sentences();
    if nv < 2 {
        log::warn!("video loss on a batch with {nv} video(s) has no negatives");
        return Ok(F::zero());
    }
    let (rel, weights) = relevance_matrix(scores, pooling, grad.is_some())?;
    let mut d_rel = vec![vec![F::zero(); nb]; nv];
    let mut loss = F::zero();
    let mut hinge_at = |pos: (usize, usize), neg: (usize, usize), d_rel: &mut Vec<Vec<F>>| {
        let h = alpha - rel[pos.0][pos.1] + rel[neg.0][neg.1];
        if h > F::zero() {
            loss += h;
            d_rel[pos.0][pos.1] -= F::one();
            d_rel[neg.0][neg.1] += F::one();
        }
    };
    for b in 0..nb {
        if scores.positives[b].is_none() {
            continue;
        }
        let v = scores.sentence_video[b];
        let neg_videos = (0..nv).filter(|&u| u != v);
        let neg_sentences = (0..nb).filter(|&c| scores.sentence_video[c] != v);
        match variant {
            Variant::Sum => {
                for u in neg_videos {
                    hinge_at((v, b), (u, b), &mut d_rel);
                }
                for c in neg_sentences {
                    hinge_at((v, b), (v, c), &mut d_rel);
                }
            }
            Variant::Max => {
                if let Some(u) = argmax(neg_videos, |u| rel[u][b]) {
                    hinge_at((v, b), (u, b), &mut d_rel);
                }
                if let Some(c) = argmax(neg_sentences, |c| rel[v][c]) {
                    hinge_at((v, b), (v, c), &mut d_rel);
                }
            }
        }
    }
    if let Some(g) = grad {
        for (v, rows) in scores.video_rows.iter().enumerate() {
            for b in 0..nb {
                let dr = d_rel[v][b];
                if dr == F::zero() {
                    continue;
                }
                for (r, &w) in rows.clone().zip(&weights[v][b]) {
                    g[r * nb + b] += dr * w;
                }
            }
        }
    }
    Ok(loss)
}

pub fn video_loss_sum<F: Real>(scores: &BatchScores<F>, alpha: F, beta: F) -> Result<F> {
    video_loss(scores, alpha, Pooling::LogSumExp { beta: beta.f64() }, Variant::Sum, None)
}

pub fn video_loss_max<F: Real>(scores: &BatchScores<F>, alpha: F, beta: F) -> Result<F> {
    video_loss(scores, alpha, Pooling::LogSumExp { beta: beta.f64() }, Variant::Max, None)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub intra: f64,
    pub video: f64,
    pub reg: f64,
    pub total: f64,
    pub skipped_sentences: usize,
}

/// Weights `(intra, video)` an objective puts on the two ranking terms.
pub fn term_weights(objective: Objective, lambda1: f64) -> (f64, f64) {
    match objective {
        Objective::Proposed => (1.0, lambda1),
        Objective::Intra => (1.0, 0.0),
        Objective::Video => (0.0, lambda1),
    }
}

/// `intra + λ₁·video + α·‖W‖²_F`.
pub fn total_loss(intra: f64, video: f64, reg_norm: f64, lambda1: f64, alpha_reg: f64) -> Result<LossReport> {
    for (name, v) in [
        ("intra", intra),
        ("video", video),
        ("reg", reg_norm),
        ("lambda1", lambda1),
        ("alpha_reg", alpha_reg),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} = {v}")));
        }
    }
    Ok(LossReport {
        intra,
        video,
        reg: reg_norm,
        total: intra + lambda1 * video + alpha_reg * reg_norm,
        skipped_sentences: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One video, one sentence, explicit similarity column.
    fn single(col: &[f64], pos: &[usize]) -> BatchScores<f64> {
        BatchScores::new(
            Tensor::new(vec![col.len(), 1], col.to_vec()).unwrap(),
            std::iter::once(0..col.len()).collect(),
            vec![0],
            vec![Some(pos.to_vec())],
        )
        .unwrap()
    }

    #[test]
    fn similarity_examples() {
        let u = [0.3, -2.0, 1.5];
        assert!((similarity::<f64>(&u, &u) - 1.0).abs() < 1e-12);
        assert_eq!(similarity::<f64>(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((similarity::<f64>(&[1.0, 0.0], &[1.0, 1.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(similarity::<f64>(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
        assert!((similarity::<f64>(&[2.0, 6.0], &u[..2]) - similarity::<f64>(&[1.0, 3.0], &u[..2])).abs() < 1e-15);
    }

    #[test]
    fn relevance_examples() {
        assert!((relevance::<f64>(&[0.4], 3.0).unwrap() - 0.4).abs() < 1e-12);
        let n = 5;
        let r = relevance::<f64>(&vec![0.2; n], 10.0).unwrap();
        assert!((r - (0.2 + (n as f64).ln() / 10.0)).abs() < 1e-12);
        // direct evaluation: 0.1·ln(e^9 + e^1)
        let direct = ((9.0f64).exp() + 1.0f64.exp()).ln() / 10.0;
        assert!((direct - 0.90003).abs() < 1e-5);
        assert!((relevance::<f64>(&[0.9, 0.1], 10.0).unwrap() - direct).abs() < 1e-12);
        assert!(relevance::<f64>(&[], 1.0).is_err());
        // no overflow for huge beta
        assert!((relevance::<f64>(&[0.9, 0.1], 1e6).unwrap() - 0.9).abs() < 1e-9);
    }

    #[test]
    fn intra_examples() {
        // pos 0.8, negatives ≤ 0.2
        assert_eq!(intra_loss_sum(&single(&[0.8, 0.2, 0.1], &[0]), 0.05), 0.0);
        let s = single(&[0.5, 0.48], &[0]);
        assert!((intra_loss_sum(&s, 0.05) - 0.03).abs() < 1e-12);
        assert!((intra_loss_max(&s, 0.05) - 0.03).abs() < 1e-12);
        let s = single(&[0.3, 0.5, 0.48], &[1]);
        assert!((intra_loss_max(&s, 0.05) - 0.03).abs() < 1e-12);
        assert_eq!(intra_loss_max(&single(&[0.1, 0.5, 0.44], &[1]), 0.05), 0.0);
    }

    #[test]
    fn intra_sum_matches_triplet_enumeration() {
        let col = [0.5, 0.1, 0.45, 0.3, 0.52];
        let pos = [0, 3];
        let s = single(&col, &pos);
        let mut want = 0.0;
        for &p in &pos {
            for n in [1usize, 2, 4] {
                want += (0.1 - col[p] + col[n]).max(0.0);
            }
        }
        assert!((intra_loss_sum(&s, 0.1) - want).abs() < 1e-12);
        assert!(intra_loss_max(&s, 0.1) <= intra_loss_sum(&s, 0.1));
    }

    #[test]
    fn intra_max_ties_go_to_lowest_row() {
        let s = single(&[0.4, 0.5, 0.4], &[1]);
        let mut g = vec![0.0; 3];
        intra_loss(&s, 0.2, Variant::Max, Some(&mut g));
        assert_eq!(g, vec![1.0, -1.0, 0.0]);
    }

    /// Two videos of one row each, two sentences; relevance equals the
    /// single similarity, so margins can be set directly.
    fn two_by_two(s: [[f64; 2]; 2]) -> BatchScores<f64> {
        BatchScores::new(
            Tensor::from_rows(&[s[0].to_vec(), s[1].to_vec()]).unwrap(),
            vec![0..1, 1..2],
            vec![0, 1],
            vec![Some(vec![0]), Some(vec![1])],
        )
        .unwrap()
    }

    #[test]
    fn video_examples() {
        let ok = two_by_two([[0.9, 0.1], [0.2, 0.8]]);
        assert_eq!(video_loss_sum(&ok, 0.2, 10.0).unwrap(), 0.0);
        assert_eq!(video_loss_max(&ok, 0.2, 10.0).unwrap(), 0.0);

        // sentence 0: R(v,s)=0.6, R(v⁻,s)=0.58, R(v,s⁻)=0.2 → 0.18
        let s = BatchScores::new(
            Tensor::from_rows(&[vec![0.6, 0.2], vec![0.58, 0.9]]).unwrap(),
            vec![0..1, 1..2],
            vec![0, 1],
            vec![Some(vec![0]), None],
        )
        .unwrap();
        let l: f64 = video_loss(&s, 0.2, Pooling::Average, Variant::Sum, None).unwrap();
        assert!((l - 0.18).abs() < 1e-12);
        let m: f64 = video_loss(&s, 0.2, Pooling::Average, Variant::Max, None).unwrap();
        assert!((m - l).abs() < 1e-12);
    }

    #[test]
    fn video_max_picks_hardest() {
        // three single-row videos; sentence 0 sees negatives 0.1 and 0.58
        let s = BatchScores::new(
            Tensor::from_rows(&[vec![0.6, 0.0, 0.0], vec![0.1, 0.9, 0.0], vec![0.58, 0.0, 0.9]])
                .unwrap(),
            vec![0..1, 1..2, 2..3],
            vec![0, 1, 2],
            vec![Some(vec![0]), None, None],
        )
        .unwrap();
        let l: f64 = video_loss(&s, 0.2, Pooling::Average, Variant::Max, None).unwrap();
        assert!((l - 0.18).abs() < 1e-12);
    }

    #[test]
    fn single_video_batch_has_no_video_loss() {
        let s = single(&[0.1, 0.9], &[0]);
        assert_eq!(video_loss_sum(&s, 0.2, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let r = total_loss(1.0, 2.0, 10.0, 5.0, 5e-5).unwrap();
        assert!((r.total - 11.0005).abs() < 1e-12);
        assert_eq!(total_loss(0.0, 0.0, 0.0, 5.0, 5e-5).unwrap().total, 0.0);
        assert!(matches!(
            total_loss(f64::NAN, 0.0, 0.0, 1.0, 1.0),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn bad_positive_rows_are_rejected() {
        let r = BatchScores::new(
            Tensor::<f64>::zeros(&[4, 1]),
            vec![0..2, 2..4],
            vec![0],
            vec![Some(vec![3])],
        );
        assert!(r.is_err());
    }
}
