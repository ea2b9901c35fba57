//! Corpus-wide moment retrieval and its evaluation metrics.

use std::cmp::Ordering;
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{enumerate_candidates, fit_length, iou, DatasetProfile, MomentSpan};
use crate::model::{encode_moments, encode_sentence, ModelParams};
use crate::numcore::{Mode, Real, Tensor};
use crate::synthdata::Corpus;

/// Row metadata: which video and candidate an index row came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowMeta {
    pub video: usize,
    pub candidate: usize,
    pub span: MomentSpan,
}

/// L2-normalised moment embeddings of a whole corpus, row-major, with
/// index-aligned metadata.
#[derive(Clone, Debug)]
pub struct CorpusIndex<F> {
    dim: usize,
    rows: Vec<F>,
    meta: Vec<RowMeta>,
    pub video_ids: Vec<String>,
    pub profile: DatasetProfile,
}

fn normalize_in_place<F: Real>(row: &mut [F]) {
    let n = row.iter().map(|&x| x * x).sum::<F>().sqrt();
    if n > F::zero() {
        row.iter_mut().for_each(|x| *x /= n);
    }
}

impl<F: Real> CorpusIndex<F> {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn meta(&self) -> &[RowMeta] {
        &self.meta
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Builds an index directly from embedding rows (normalised here).
    pub fn from_rows(
        dim: usize,
        mut rows: Vec<F>,
        meta: Vec<RowMeta>,
        video_ids: Vec<String>,
        profile: DatasetProfile,
    ) -> Result<Self> {
        if meta.is_empty() {
            return Err(Error::Contract("cannot index an empty corpus".into()));
        }
        if dim == 0 || rows.len() != dim * meta.len() {
            return Err(Error::Dimension {
                op: "corpus_index",
                lhs: vec![rows.len()],
                rhs: vec![meta.len(), dim],
            });
        }
        rows.chunks_mut(dim).for_each(normalize_in_place);
        Ok(Self {
            dim,
            rows,
            meta,
            video_ids,
            profile,
        })
    }

    fn scores(&self, query: &[F]) -> Vec<F> {
        const BLOCK: usize = 256;
        let score_block = |(rows, out): (&[F], &mut [F])| {
            for (r, o) in rows.chunks_exact(self.dim).zip(out) {
                *o = crate::numcore::dot(r, query);
            }
        };
        let mut out = vec![F::zero(); self.len()];
        #[cfg(feature = "parallel")]
        self.rows
            .par_chunks(BLOCK * self.dim)
            .zip(out.par_chunks_mut(BLOCK))
            .for_each(score_block);
        #[cfg(not(feature = "parallel"))]
        self.rows
            .chunks(BLOCK * self.dim)
            .zip(out.chunks_mut(BLOCK))
            .for_each(score_block);
        out
    }

    /// Exact top-`k` by cosine similarity; `k` beyond the row count returns
    /// the full ranking. Ties go to the lower row (video, then candidate).
    pub fn query_top_k(&self, sentence: &[F], k: usize) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::Contract("k must be at least 1".into()));
        }
        if sentence.len() != self.dim {
            return Err(Error::Dimension {
                op: "query_top_k",
                lhs: vec![sentence.len()],
                rhs: vec![self.dim],
            });
        }
        let mut q = sentence.to_vec();
        normalize_in_place(&mut q);
        let scores = self.scores(&q);
        let cmp = |a: &usize, b: &usize| scores[*b].partial_cmp(&scores[*a]).unwrap_or(Ordering::Equal).then(a.cmp(b));
        let mut order: Vec<usize> = (0..self.len()).collect();
        let k = k.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order
            .into_iter()
            .map(|i| {
                let m = self.meta[i];
                Hit {
                    video: m.video,
                    candidate: m.candidate,
                    span: m.span,
                    score: scores[i].f64(),
                }
            })
            .collect())
    }
}

/// Encodes every video of `corpus` with `params` and indexes the moments.
pub fn build_index<F: Real>(params: &ModelParams<F>, corpus: &Corpus) -> Result<CorpusIndex<F>> {
    if corpus.videos.is_empty() {
        return Err(Error::Contract("cannot index an empty corpus".into()));
    }
    if params.profile != corpus.profile {
        return Err(Error::Config(format!(
            "checkpoint profile {} does not match corpus profile {}",
            params.profile.name, corpus.profile.name
        )));
    }
    if params.dims.clip_dim != corpus.clip_dim {
        return Err(Error::Config(format!(
            "checkpoint expects {} clip dims, corpus has {}",
            params.dims.clip_dim, corpus.clip_dim
        )));
    }
    let candidates = enumerate_candidates(&corpus.profile)?;
    let l = corpus.profile.input_clips;
    let encode = |v: &crate::synthdata::Video| -> Result<Tensor<F>> {
        let clips = fit_length(&v.clips.cast::<F>(), l)?;
        Ok(encode_moments(&clips, params)?.0)
    };
    #[cfg(feature = "parallel")]
    let embedded: Vec<Tensor<F>> = corpus.videos.par_iter().map(encode).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let embedded: Vec<Tensor<F>> = corpus.videos.iter().map(encode).collect::<Result<_>>()?;

    let dim = params.dims.embed_dim;
    let mut rows = Vec::with_capacity(embedded.len() * candidates.len() * dim);
    let mut meta = Vec::with_capacity(embedded.len() * candidates.len());
    for (v, e) in embedded.into_iter().enumerate() {
        rows.extend(e.into_data());
        meta.extend(candidates.candidates.iter().enumerate().map(|(i, c)| RowMeta {
            video: v,
            candidate: i,
            span: c.span,
        }));
    }
    CorpusIndex::from_rows(
        dim,
        rows,
        meta,
        corpus.videos.iter().map(|v| v.id.clone()).collect(),
        corpus.profile.clone(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Hit {
    pub video: usize,
    pub candidate: usize,
    pub span: MomentSpan,
    pub score: f64,
}

/// Per-query rankings, best first.
#[derive(Clone, Debug)]
pub struct RetrievalResult {
    pub rankings: Vec<Arc<[Hit]>>,
    /// Size of the searched pool; `total + 1` is the rank of a miss.
    pub total_moments: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub video: usize,
    pub spans: Vec<MomentSpan>,
}

impl GroundTruth {
    /// A hit is correct when it is in the right video and reaches `iou_m`
    /// against at least `min(min_annotations, #spans)` annotated spans.
    pub fn is_correct(&self, hit: &Hit, iou_m: f64, min_annotations: usize) -> Result<bool> {
        if hit.video != self.video {
            return Ok(false);
        }
        let need = min_annotations.clamp(1, self.spans.len().max(1));
        let mut agree = 0;
        for s in &self.spans {
            if iou(s, &hit.span)? >= iou_m {
                agree += 1;
                if agree >= need {
                    return Ok(true);
                }
            }
        }
        Ok(false)
    }
}

/// Ground truth of every annotation in `corpus`, in corpus order.
pub fn ground_truth(corpus: &Corpus) -> Vec<GroundTruth> {
    corpus
        .videos
        .iter()
        .enumerate()
        .flat_map(|(v, video)| {
            video.annotations.iter().map(move |a| GroundTruth {
                video: v,
                spans: a.spans.clone(),
            })
        })
        .collect()
}

/// 1-based rank of the first correct hit per query; `None` for a miss.
pub fn first_correct_ranks(
    results: &RetrievalResult,
    gt: &[GroundTruth],
    iou_m: f64,
    min_annotations: usize,
) -> Result<Vec<Option<usize>>> {
    if results.rankings.len() != gt.len() {
        return Err(Error::Contract(format!(
            "{} rankings for {} queries",
            results.rankings.len(),
            gt.len()
        )));
    }
    let mut out = Vec::with_capacity(gt.len());
    for (ranking, g) in results.rankings.iter().zip(gt) {
        let mut rank = None;
        for (i, hit) in ranking.iter().enumerate() {
            if g.is_correct(hit, iou_m, min_annotations)? {
                rank = Some(i + 1);
                break;
            }
        }
        out.push(rank);
    }
    Ok(out)
}

pub fn recall_at_k_iou(
    results: &RetrievalResult,
    gt: &[GroundTruth],
    k: usize,
    iou_m: f64,
    min_annotations: usize,
) -> Result<f64> {
    let ranks = first_correct_ranks(results, gt, iou_m, min_annotations)?;
    Ok(recall_from_ranks(&ranks, k))
}

fn recall_from_ranks(ranks: &[Option<usize>], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count() as f64 / ranks.len() as f64
}

/// Misses take the sentinel rank `total + 1`.
fn median_with_sentinel(ranks: &[Option<usize>], total: usize) -> f64 {
    median(ranks.iter().map(|r| r.unwrap_or(total + 1)).collect())
}

pub fn median_rank(
    results: &RetrievalResult,
    gt: &[GroundTruth],
    iou_m: f64,
    min_annotations: usize,
) -> Result<f64> {
    let ranks = first_correct_ranks(results, gt, iou_m, min_annotations)?;
    Ok(median_with_sentinel(&ranks, results.total_moments))
}

/// Median; the mean of the middle pair for even counts.
fn median(mut v: Vec<usize>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

/// Candidate indices ordered by how often a training span is best matched
/// by them, with the counts. Each annotated span votes once for its
/// highest-IoU candidate. Ties go to the lower index.
pub fn moment_frequency_prior(train: &Corpus, profile: &DatasetProfile) -> Result<Vec<(usize, usize)>> {
    let candidates = enumerate_candidates(profile)?;
    let mut counts = vec![0usize; candidates.len()];
    for a in train.videos.iter().flat_map(|v| &v.annotations) {
        for s in &a.spans {
            let mut best: Option<(usize, f64)> = None;
            for (i, c) in candidates.candidates.iter().enumerate() {
                let v = iou(&c.span, s)?;
                if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            if let Some((i, _)) = best {
                counts[i] += 1;
            }
        }
    }
    let mut order: Vec<(usize, usize)> = counts.into_iter().enumerate().collect();
    order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(order)
}

/// The prior's query-independent ranking over `n_videos`: span rank first,
/// then a seeded random video order drawn afresh for every span rank.
pub fn prior_ranking(
    prior: &[(usize, usize)],
    profile: &DatasetProfile,
    n_videos: usize,
    seed: u64,
) -> Result<Arc<[Hit]>> {
    let candidates = enumerate_candidates(profile)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = Vec::with_capacity(prior.len() * n_videos);
    let mut videos: Vec<usize> = (0..n_videos).collect();
    for &(c, count) in prior {
        videos.shuffle(&mut rng);
        hits.extend(videos.iter().map(|&v| Hit {
            video: v,
            candidate: c,
            span: candidates.candidates[c].span,
            score: count as f64,
        }));
    }
    Ok(hits.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub ious: Vec<f64>,
    pub min_annotations: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ks: vec![10, 100],
            ious: vec![0.5, 0.7],
            min_annotations: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecallCell {
    pub k: usize,
    pub iou: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianRankCell {
    pub iou: f64,
    pub median_rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub queries: usize,
    pub total_moments: usize,
    pub recall: Vec<RecallCell>,
    pub median_rank: Vec<MedianRankCell>,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize, iou: f64) -> Option<f64> {
        self.recall
            .iter()
            .find(|c| c.k == k && c.iou == iou)
            .map(|c| c.recall)
    }

    pub fn median_rank_at(&self, iou: f64) -> Option<f64> {
        self.median_rank
            .iter()
            .find(|c| c.iou == iou)
            .map(|c| c.median_rank)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}  queries={} moments={}",
            self.label, self.queries, self.total_moments
        )?;
        write!(f, "{:>8}", "IoU")?;
        let mut ks: Vec<usize> = self.recall.iter().map(|c| c.k).collect();
        ks.dedup();
        for k in &ks {
            write!(f, "{:>10}", format!("R@{k}"))?;
        }
        writeln!(f, "{:>10}", "MR")?;
        for mr in &self.median_rank {
            write!(f, "{:>8.2}", mr.iou)?;
            for &k in &ks {
                match self.recall_at(k, mr.iou) {
                    Some(r) => write!(f, "{:>9.2}%", 100.0 * r)?,
                    None => write!(f, "{:>10}", "-")?,
                }
            }
            writeln!(f, "{:>10}", mr.median_rank)?;
        }
        Ok(())
    }
}

/// Builds every metric cell of `settings` from full rankings.
pub fn report_from_results(
    label: impl Into<String>,
    results: &RetrievalResult,
    gt: &[GroundTruth],
    settings: &EvalSettings,
) -> Result<EvalReport> {
    let mut recall = Vec::new();
    let mut median_rank = Vec::new();
    for &m in &settings.ious {
        let ranks = first_correct_ranks(results, gt, m, settings.min_annotations)?;
        for &k in &settings.ks {
            recall.push(RecallCell {
                k,
                iou: m,
                recall: recall_from_ranks(&ranks, k),
            });
        }
        median_rank.push(MedianRankCell {
            iou: m,
            median_rank: median_with_sentinel(&ranks, results.total_moments),
        });
    }
    recall.sort_by(|a, b| a.k.cmp(&b.k).then(a.iou.total_cmp(&b.iou)));
    Ok(EvalReport {
        label: label.into(),
        queries: gt.len(),
        total_moments: results.total_moments,
        recall,
        median_rank,
    })
}

/// Full rankings for every annotation of `corpus` against its own index.
pub fn retrieve_all<F: Real>(params: &ModelParams<F>, corpus: &Corpus) -> Result<RetrievalResult> {
    let index = build_index(params, corpus)?;
    let feats: Vec<F> = corpus
        .videos
        .iter()
        .flat_map(|v| &v.annotations)
        .flat_map(|a| a.feature.iter().map(|&x| F::lit(x as f64)))
        .collect();
    let n = corpus.pair_count();
    let embedded = encode_sentence(
        &Tensor::new(vec![n, corpus.sent_dim], feats)?,
        &mut params.clone(),
        Mode::Infer,
    )?;
    let rankings = (0..n)
        .map(|q| index.query_top_k(embedded.row(q), index.len()).map(Arc::from))
        .collect::<Result<_>>()?;
    Ok(RetrievalResult {
        rankings,
        total_moments: index.len(),
    })
}

/// Corpus-level evaluation: every annotation of `corpus` queries every
/// moment of `corpus`.
pub fn evaluate<F: Real>(
    params: &ModelParams<F>,
    corpus: &Corpus,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    if corpus.pair_count() == 0 {
        return Err(Error::Contract("corpus has no annotations to query".into()));
    }
    if params.dims.sent_dim != corpus.sent_dim {
        return Err(Error::Config(format!(
            "checkpoint expects {} sentence dims, corpus has {}",
            params.dims.sent_dim, corpus.sent_dim
        )));
    }
    let results = retrieve_all(params, corpus)?;
    report_from_results("model", &results, &ground_truth(corpus), settings)
}

/// The moment-frequency prior fitted on `train`, evaluated on `test`.
pub fn evaluate_prior(
    train: &Corpus,
    test: &Corpus,
    settings: &EvalSettings,
    seed: u64,
) -> Result<EvalReport> {
    let prior = moment_frequency_prior(train, &test.profile)?;
    let ranking = prior_ranking(&prior, &test.profile, test.videos.len(), seed)?;
    let gt = ground_truth(test);
    let results = RetrievalResult {
        rankings: vec![ranking.clone(); gt.len()],
        total_moments: ranking.len(),
    };
    report_from_results("prior", &results, &gt, settings)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(s: u32, e: u32) -> MomentSpan {
        MomentSpan::new(s, e, 5.0).unwrap()
    }

    fn hit(video: usize, s: u32, e: u32) -> Hit {
        Hit {
            video,
            candidate: 0,
            span: span(s, e),
            score: 0.0,
        }
    }

    fn result(rankings: Vec<Vec<Hit>>, total: usize) -> RetrievalResult {
        RetrievalResult {
            rankings: rankings.into_iter().map(Arc::from).collect(),
            total_moments: total,
        }
    }

    #[test]
    fn rank_one_exact_is_recalled() {
        let r = result(vec![vec![hit(0, 1, 3)]], 1);
        let gt = [GroundTruth {
            video: 0,
            spans: vec![span(1, 3)],
        }];
        assert_eq!(recall_at_k_iou(&r, &gt, 1, 0.7, 1).unwrap(), 1.0);
        assert_eq!(median_rank(&r, &gt, 0.7, 1).unwrap(), 1.0);
    }

    #[test]
    fn right_video_low_iou_misses() {
        // [0,2) vs [0,5): IoU 0.4
        let r = result(vec![vec![hit(0, 0, 2)]], 1);
        let gt = [GroundTruth {
            video: 0,
            spans: vec![span(0, 5)],
        }];
        assert_eq!(recall_at_k_iou(&r, &gt, 10, 0.5, 1).unwrap(), 0.0);
        assert_eq!(median_rank(&r, &gt, 0.5, 1).unwrap(), 2.0);
    }

    #[test]
    fn wrong_video_never_counts() {
        let r = result(vec![vec![hit(1, 1, 3), hit(0, 1, 3)]], 2);
        let gt = [GroundTruth {
            video: 0,
            spans: vec![span(1, 3)],
        }];
        assert_eq!(recall_at_k_iou(&r, &gt, 1, 0.5, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k_iou(&r, &gt, 2, 0.5, 1).unwrap(), 1.0);
    }

    #[test]
    fn min_annotations_rule() {
        let gt = GroundTruth {
            video: 0,
            spans: vec![span(0, 2), span(0, 2), span(4, 6)],
        };
        let h = hit(0, 0, 2);
        assert!(gt.is_correct(&h, 1.0, 2).unwrap());
        assert!(!gt.is_correct(&h, 1.0, 3).unwrap());
        let single = GroundTruth {
            video: 0,
            spans: vec![span(0, 2)],
        };
        // a single annotation cannot demand two agreeing spans
        assert!(single.is_correct(&h, 1.0, 2).unwrap());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(vec![1, 3, 5]), 3.0);
        assert_eq!(median(vec![1, 1, 1, 1]), 1.0);
        assert_eq!(median(vec![4, 1, 2, 8]), 3.0);
    }

    fn toy_index(rows: &[[f64; 2]]) -> CorpusIndex<f64> {
        let meta = (0..rows.len())
            .map(|i| RowMeta {
                video: i / 3,
                candidate: i % 3,
                span: span(i as u32 % 3, i as u32 % 3 + 1),
            })
            .collect();
        CorpusIndex::from_rows(
            2,
            rows.iter().flatten().copied().collect(),
            meta,
            vec![],
            DatasetProfile::didemo(),
        )
        .unwrap()
    }

    #[test]
    fn identity_query_ranks_first_with_score_one() {
        let idx = toy_index(&[[1.0, 0.0], [0.0, 2.0], [3.0, 4.0], [-1.0, 0.0]]);
        let hits = idx.query_top_k(&[6.0, 8.0], 1).unwrap();
        assert_eq!((hits[0].video, hits[0].candidate), (0, 2));
        assert!((hits[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_row_and_k_overflow_is_full() {
        let idx = toy_index(&[[1.0, 0.0], [2.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        let hits = idx.query_top_k(&[1.0, 0.0], 99).unwrap();
        let rows: Vec<usize> = hits.iter().map(|h| h.video * 3 + h.candidate).collect();
        assert_eq!(rows, vec![0, 1, 3, 2]);
        assert!(idx.query_top_k(&[1.0, 0.0], 0).is_err());
    }

    #[test]
    fn empty_index_is_an_error() {
        assert!(CorpusIndex::<f64>::from_rows(2, vec![], vec![], vec![], DatasetProfile::didemo()).is_err());
    }

    #[test]
    fn report_table_lists_all_cells() {
        let r = result(vec![vec![hit(0, 1, 3)]], 1);
        let gt = [GroundTruth {
            video: 0,
            spans: vec![span(1, 3)],
        }];
        let rep = report_from_results("t", &r, &gt, &EvalSettings::default()).unwrap();
        assert_eq!(rep.recall.len(), 4);
        assert_eq!(rep.median_rank.len(), 2);
        let table = rep.to_string();
        assert!(table.contains("R@10") && table.contains("R@100"));
        let back: EvalReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(back, rep);
    }
}
