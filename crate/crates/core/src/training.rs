//! Mini-batching, Adam, the epoch loop and HMC1 checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{enumerate_candidates, fit_length, training_positives, CandidateSet, MomentSpan};
use crate::model::{init_params, BoundParams, ModelDims, ModelParams};
use crate::numcore::{Mode, ParamSet, Parameter, Real, Tape, Tensor, Var};
use crate::objective::{
    intra_loss, term_weights, total_loss, video_loss, BatchScores, LossReport, Objective, Pooling,
    Variant,
};
use crate::synthdata::Corpus;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HMC1";
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub epochs: usize,
    pub alpha_intra: f64,
    pub alpha_video: f64,
    pub lambda1: f64,
    pub alpha_reg: f64,
    pub pooling: Pooling,
    pub pos_iou_threshold: f64,
    pub variant: Variant,
    pub objective: Objective,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr0: 1e-3,
            lr_decay: 0.95,
            epochs: 30,
            alpha_intra: 0.05,
            alpha_video: 0.20,
            lambda1: 5.0,
            alpha_reg: 5e-5,
            pooling: Pooling::default(),
            pos_iou_threshold: 0.5,
            variant: Variant::Sum,
            objective: Objective::Proposed,
            clip_grad_norm: None,
            seed: 0,
        }
    }
}

impl Hyperparams {
    /// Published batch size and λ₁ for the shipped profiles.
    pub fn for_profile(name: &str) -> Self {
        let base = Self::default();
        match name {
            "charades" => Self {
                lambda1: 1.0,
                ..base
            },
            "activitynet" => Self {
                lambda1: 1.5,
                batch_size: 32,
                ..base
            },
            _ => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("lr0", self.lr0),
            ("lr_decay", self.lr_decay),
            ("pos_iou_threshold", self.pos_iou_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("alpha_intra", self.alpha_intra),
            ("alpha_video", self.alpha_video),
            ("lambda1", self.lambda1),
            ("alpha_reg", self.alpha_reg),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.pos_iou_threshold > 1.0 {
            return Err(Error::Config("pos_iou_threshold must be at most 1".into()));
        }
        if let Pooling::LogSumExp { beta } = self.pooling {
            if !(beta > 0.0) {
                return Err(Error::Config(format!("beta must be positive, got {beta}")));
            }
        }
        Ok(())
    }
}

/// A (video, annotation) index pair into a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pair {
    pub video: usize,
    pub annotation: usize,
}

pub fn corpus_pairs(corpus: &Corpus) -> Vec<Pair> {
    corpus
        .videos
        .iter()
        .enumerate()
        .flat_map(|(v, video)| {
            (0..video.annotations.len()).map(move |a| Pair {
                video: v,
                annotation: a,
            })
        })
        .collect()
}

/// One shuffled pass over `pairs`, chunked; the final short chunk is kept.
pub fn make_minibatches(
    pairs: &[Pair],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<Pair>>> {
    if pairs.is_empty() {
        return Err(Error::Contract("no video-sentence pairs to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be positive".into()));
    }
    let mut order = pairs.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[Pair]>::to_vec).collect())
}

pub fn lr_at(epoch: usize, lr0: f64, decay: f64) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub t: u64,
}

impl<F: Real> OptimizerState<F> {
    pub fn new(params: &[Parameter<F>]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam update from the gradients stored on `params`.
/// Rejects the whole step, leaving everything untouched, if any gradient is
/// non-finite.
pub fn adam_step<F: Real>(
    params: &mut [Parameter<F>],
    state: &mut OptimizerState<F>,
    lr: f64,
) -> Result<()> {
    if state.m.len() != params.len() {
        return Err(Error::Contract("optimizer state does not match parameters".into()));
    }
    for (p, m) in params.iter().zip(&state.m) {
        if p.grad.shape() != m.shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: p.grad.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        if !p.grad.all_finite() {
            return Err(Error::Numeric(format!("gradient of {} is not finite", p.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (F::lit(ADAM_BETA1), F::lit(ADAM_BETA2));
    let c1 = F::one() - F::lit(ADAM_BETA1.powi(t));
    let c2 = F::one() - F::lit(ADAM_BETA2.powi(t));
    let (lr, eps) = (F::lit(lr), F::lit(ADAM_EPS));
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let grads = p.grad.data();
        let values = p.value.data_mut();
        for (((w, &g), mi), vi) in values
            .iter_mut()
            .zip(grads)
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (F::one() - b1) * g;
            *vi = b2 * *vi + (F::one() - b2) * g * g;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

fn clip_gradients<F: Real>(params: &mut [Parameter<F>], max_norm: f64) {
    let norm: f64 = params.iter().map(|p| p.grad.sum_squares().f64()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::lit(max_norm / norm);
        for p in params {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

#[derive(Clone, Debug)]
pub struct PreparedSentence<F> {
    pub feature: Vec<F>,
    pub spans: Vec<MomentSpan>,
    /// Candidate indices used as positives; `None` when skipped.
    pub positives: Option<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct PreparedVideo<F> {
    pub id: String,
    pub clips: Tensor<F>,
    pub sentences: Vec<PreparedSentence<F>>,
}

/// A corpus converted to the working precision, with clips fitted to the
/// profile length and training positives resolved.
#[derive(Clone, Debug)]
pub struct PreparedCorpus<F> {
    pub candidates: CandidateSet,
    pub videos: Vec<PreparedVideo<F>>,
}

impl<F: Real> PreparedCorpus<F> {
    pub fn new(corpus: &Corpus, pos_iou_threshold: f64) -> Result<Self> {
        let candidates = enumerate_candidates(&corpus.profile)?;
        let l = corpus.profile.input_clips;
        let mut videos = Vec::with_capacity(corpus.videos.len());
        for v in &corpus.videos {
            let clips = fit_length(&v.clips.cast::<F>(), l)?;
            let mut sentences = Vec::with_capacity(v.annotations.len());
            for a in &v.annotations {
                let positives = training_positives(&a.spans, &candidates, pos_iou_threshold)?;
                if positives.is_none() {
                    log::warn!("sentence={} no positive candidate, skipped in training", a.sentence_id);
                }
                sentences.push(PreparedSentence {
                    feature: a.feature.iter().map(|&x| F::lit(x as f64)).collect(),
                    spans: a.spans.clone(),
                    positives,
                });
            }
            videos.push(PreparedVideo {
                id: v.id.clone(),
                clips,
                sentences,
            });
        }
        Ok(Self { candidates, videos })
    }

    pub fn pairs(&self) -> Vec<Pair> {
        self.videos
            .iter()
            .enumerate()
            .flat_map(|(v, video)| {
                (0..video.sentences.len()).map(move |a| Pair {
                    video: v,
                    annotation: a,
                })
            })
            .collect()
    }
}

/// Records the full objective for one mini-batch and returns the total
/// loss node plus its breakdown.
pub fn batch_objective<F: Real>(
    model: &mut ModelParams<F>,
    tape: &mut Tape<F>,
    bound: &BoundParams,
    data: &PreparedCorpus<F>,
    batch: &[Pair],
    hyper: &Hyperparams,
    mode: Mode,
) -> Result<(Var, LossReport)> {
    let mut block_of = Vec::<(usize, usize)>::new();
    let mut blocks = Vec::new();
    let mut embeddings = Vec::new();
    let mut sentence_video = Vec::with_capacity(batch.len());
    for pair in batch {
        let block = match block_of.iter().find(|(v, _)| *v == pair.video) {
            Some(&(_, b)) => b,
            None => {
                let b = blocks.len();
                block_of.push((pair.video, b));
                blocks.push(pair.video);
                let clips = &data.videos[pair.video].clips;
                embeddings.push(model.encode_moments_on(tape, bound, clips)?);
                b
            }
        };
        sentence_video.push(block);
    }
    let m = data.candidates.len();
    let video_rows: Vec<_> = (0..blocks.len()).map(|b| b * m..(b + 1) * m).collect();

    let sent_dim = model.dims.sent_dim;
    let mut feats = Vec::with_capacity(batch.len() * sent_dim);
    let mut positives = Vec::with_capacity(batch.len());
    for (pair, &block) in batch.iter().zip(&sentence_video) {
        let s = &data.videos[pair.video].sentences[pair.annotation];
        feats.extend_from_slice(&s.feature);
        positives.push(
            s.positives
                .as_ref()
                .map(|p| p.iter().map(|&i| block * m + i).collect()),
        );
    }
    let sent_in = tape.input(Tensor::new(vec![batch.len(), sent_dim], feats)?);
    let sentences = model.encode_sentences_on(tape, bound, sent_in, mode)?;

    let moments = tape.concat(&embeddings, 0)?;
    let moments = tape.normalize_rows(moments)?;
    let sentences = tape.normalize_rows(sentences)?;
    let sims = tape.matmul_t(moments, sentences)?;

    let scores = BatchScores::new(tape.value(sims).clone(), video_rows, sentence_video, positives)?;
    let shape = scores.sims.shape().to_vec();
    let (w_intra, w_video) = term_weights(hyper.objective, hyper.lambda1);

    let mut g_intra = vec![F::zero(); scores.sims.len()];
    let intra = intra_loss(&scores, F::lit(hyper.alpha_intra), hyper.variant, Some(&mut g_intra));
    let mut g_video = vec![F::zero(); scores.sims.len()];
    let video = video_loss(
        &scores,
        F::lit(hyper.alpha_video),
        hyper.pooling,
        hyper.variant,
        Some(&mut g_video),
    )?;

    let reg = model.weight_norm_on(tape, bound)?;
    let reg_value = tape.value(reg).data()[0];
    let mut total = tape.scale(reg, F::lit(hyper.alpha_reg));
    if w_video != 0.0 {
        let node = tape.external(sims, video, Tensor::new(shape.clone(), g_video)?)?;
        let node = tape.scale(node, F::lit(w_video));
        total = tape.add(node, total)?;
    }
    if w_intra != 0.0 {
        let node = tape.external(sims, intra, Tensor::new(shape, g_intra)?)?;
        let node = tape.scale(node, F::lit(w_intra));
        total = tape.add(node, total)?;
    }

    let mut report = total_loss(
        w_intra * intra.f64(),
        video.f64(),
        reg_value.f64(),
        w_video,
        hyper.alpha_reg,
    )?;
    report.intra = intra.f64();
    report.total = tape.value(total).data()[0].f64();
    report.skipped_sentences = scores.skipped();
    if !report.total.is_finite() {
        return Err(Error::Numeric(format!("total loss {}", report.total)));
    }
    Ok((total, report))
}

/// Batch norm needs two rows for batch statistics; a single-pair batch
/// falls back to the running statistics.
pub fn batch_mode(batch: &[Pair]) -> Mode {
    if batch.len() < 2 {
        Mode::Infer
    } else {
        Mode::Train
    }
}

/// Objective value of `batch` without touching the model (BN runs on a
/// copy so running statistics are left alone).
pub fn evaluate_objective<F: Real>(
    model: &ModelParams<F>,
    data: &PreparedCorpus<F>,
    batch: &[Pair],
    hyper: &Hyperparams,
) -> Result<LossReport> {
    let mut scratch = model.clone();
    let mut tape = Tape::new();
    let bound = scratch.bind(&mut tape);
    batch_objective(&mut scratch, &mut tape, &bound, data, batch, hyper, batch_mode(batch)).map(|r| r.1)
}

/// The first `batch_size` pairs in corpus order; the loss recorded in a
/// checkpoint is measured on this batch.
pub fn reference_batch(pairs: &[Pair], batch_size: usize) -> &[Pair] {
    &pairs[..batch_size.min(pairs.len())]
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub params: ModelParams<F>,
    pub optimizer: OptimizerState<F>,
    pub hyper: Hyperparams,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    epoch: usize,
    optimizer_step: u64,
    dims: ModelDims,
    profile: crate::geometry::DatasetProfile,
    hyper: Hyperparams,
    metrics: BTreeMap<String, f64>,
    blobs: usize,
}

const RUNNING_MEAN: &str = "sent.bn.running_mean";
const RUNNING_VAR: &str = "sent.bn.running_var";

impl<F: Real> Checkpoint<F> {
    /// HMC1 layout:
    ///
    /// ```text
    /// "HMC1" | u32 LE metadata length | metadata (UTF-8 JSON)
    /// | blobs × (u32 name length | name | u32 rank | u32 extents… | f32 LE data)
    /// ```
    ///
    /// Blobs are the parameters in slot order, the two BN running
    /// statistics, then Adam's `m` and `v` per parameter.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let params = self.params.params();
        let mut blobs: Vec<(String, Tensor<F>)> = params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        blobs.push((RUNNING_MEAN.into(), Tensor::vector(self.params.sent_bn.mean.clone())));
        blobs.push((RUNNING_VAR.into(), Tensor::vector(self.params.sent_bn.var.clone())));
        for (p, m) in params.iter().zip(&self.optimizer.m) {
            blobs.push((format!("adam.m.{}", p.name), m.clone()));
        }
        for (p, v) in params.iter().zip(&self.optimizer.v) {
            blobs.push((format!("adam.v.{}", p.name), v.clone()));
        }
        let meta = CheckpointMeta {
            epoch: self.epoch,
            optimizer_step: self.optimizer.t,
            dims: self.params.dims,
            profile: self.params.profile.clone(),
            hyper: self.hyper.clone(),
            metrics: self.metrics.clone(),
            blobs: blobs.len(),
        };
        let json = serde_json::to_vec(&meta).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (name, t) in &blobs {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if bytes.len() - pos < n {
                return Err(Error::format(
                    bytes.len() as u64,
                    format!("truncated while reading {what} at {pos}"),
                ));
            }
            pos += n;
            Ok(&bytes[pos - n..pos])
        };
        fn u32_of(b: &[u8]) -> u32 {
            u32::from_le_bytes(b.try_into().unwrap())
        }
        if take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::format(0, "bad magic, expected HMC1"));
        }
        let len = u32_of(take(4, "metadata length")?) as usize;
        let meta: CheckpointMeta = serde_json::from_slice(take(len, "metadata")?)
            .map_err(|e| Error::format(8, format!("bad metadata: {e}")))?;
        let mut blobs = Vec::with_capacity(meta.blobs);
        for _ in 0..meta.blobs {
            let n = u32_of(take(4, "name length")?) as usize;
            let name = std::str::from_utf8(take(n, "name")?)
                .map_err(|e| Error::format(0, format!("blob name: {e}")))?
                .to_string();
            let rank = u32_of(take(4, "rank")?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_of(take(4, "extent")?) as usize);
            }
            let count: usize = shape.iter().product();
            let data = take(count * 4, "blob data")?
                .chunks_exact(4)
                .map(|c| F::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            blobs.push((name, Tensor::new(shape, data)?));
        }
        if pos != bytes.len() {
            return Err(Error::format(pos as u64, "trailing bytes after last blob"));
        }

        let mut it = blobs.into_iter();
        let probe: ModelParams<F> = init_params(0, &meta.profile, meta.dims)?;
        let names: Vec<String> = probe.names().map(str::to_string).collect();
        let mut next = |want: &str| -> Result<Tensor<F>> {
            match it.next() {
                Some((name, t)) if name == want => Ok(t),
                Some((name, _)) => Err(Error::format(0, format!("expected blob {want}, found {name}"))),
                None => Err(Error::format(bytes.len() as u64, format!("missing blob {want}"))),
            }
        };
        let values = names.iter().map(|n| next(n)).collect::<Result<Vec<_>>>()?;
        let mut params = ModelParams::from_tensors(meta.profile, meta.dims, values)?;
        params.sent_bn.mean = next(RUNNING_MEAN)?.into_data();
        params.sent_bn.var = next(RUNNING_VAR)?.into_data();
        let m = names
            .iter()
            .map(|n| next(&format!("adam.m.{n}")))
            .collect::<Result<Vec<_>>>()?;
        let v = names
            .iter()
            .map(|n| next(&format!("adam.v.{n}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            optimizer: OptimizerState {
                m,
                v,
                t: meta.optimizer_step,
            },
            hyper: meta.hyper,
            epoch: meta.epoch,
            metrics: meta.metrics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)?.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub batches: usize,
    /// Mean over the epoch's steps.
    pub report: LossReport,
    /// Objective of the end-of-epoch parameters on the reference batch.
    pub checkpoint_loss: LossReport,
}

#[derive(Debug)]
pub struct TrainOutcome<F> {
    pub checkpoint: Checkpoint<F>,
    pub log: Vec<EpochLog>,
}

/// Training stopped on an error; `last_good` is the state at the end of the
/// last completed epoch.
#[derive(Debug)]
pub struct FitAbort<F> {
    pub last_good: Box<Checkpoint<F>>,
    pub error: Error,
}

impl<F: Real> std::fmt::Display for FitAbort<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted after epoch {}: {}", self.last_good.epoch, self.error)
    }
}

impl<F: Real> std::error::Error for FitAbort<F> {}

/// `epoch.*` are means over the epoch's steps; `checkpoint.*` is the
/// objective of the saved parameters on the reference batch.
fn report_metrics(epoch: &LossReport, at_end: &LossReport) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("epoch.intra".to_string(), epoch.intra),
        ("epoch.video".to_string(), epoch.video),
        ("epoch.reg".to_string(), epoch.reg),
        ("epoch.total".to_string(), epoch.total),
        ("checkpoint.intra".to_string(), at_end.intra),
        ("checkpoint.video".to_string(), at_end.video),
        ("checkpoint.reg".to_string(), at_end.reg),
        ("checkpoint.total".to_string(), at_end.total),
    ])
}

/// Trains from a fresh initialisation seeded by `hyper.seed` on every video
/// of `corpus`.
pub fn fit<F: Real>(
    corpus: &Corpus,
    hyper: &Hyperparams,
    dims: ModelDims,
) -> std::result::Result<TrainOutcome<F>, FitAbort<F>> {
    let init = || -> Result<(PreparedCorpus<F>, Checkpoint<F>)> {
        hyper.validate()?;
        if dims.clip_dim != corpus.clip_dim || dims.sent_dim != corpus.sent_dim {
            return Err(Error::Config(format!(
                "model dims {}/{} do not match corpus features {}/{}",
                dims.clip_dim, dims.sent_dim, corpus.clip_dim, corpus.sent_dim
            )));
        }
        let data = PreparedCorpus::new(corpus, hyper.pos_iou_threshold)?;
        let params = init_params(hyper.seed, &corpus.profile, dims)?;
        let optimizer = OptimizerState::new(params.params());
        Ok((
            data,
            Checkpoint {
                params,
                optimizer,
                hyper: hyper.clone(),
                epoch: 0,
                metrics: BTreeMap::new(),
            },
        ))
    };
    let (data, mut state) = match init() {
        Ok(v) => v,
        Err(error) => {
            // nothing trained yet; an untrained snapshot is the best we have
            let params = init_params(hyper.seed, &corpus.profile, dims)
                .or_else(|_| init_params(hyper.seed, &crate::geometry::DatasetProfile::didemo(), dims))
                .expect("default profile is valid");
            let optimizer = OptimizerState::new(params.params());
            return Err(FitAbort {
                last_good: Box::new(Checkpoint {
                    params,
                    optimizer,
                    hyper: hyper.clone(),
                    epoch: 0,
                    metrics: BTreeMap::new(),
                }),
                error,
            });
        }
    };

    let pairs = data.pairs();
    let mut log = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        let last_good = state.clone();
        let abort = |error| FitAbort {
            last_good: Box::new(last_good.clone()),
            error,
        };
        let lr = lr_at(epoch, hyper.lr0, hyper.lr_decay);
        let batches = make_minibatches(&pairs, hyper.batch_size, hyper.seed, epoch as u64)
            .map_err(abort)?;
        let mut sum = LossReport::default();
        let mut used = 0usize;
        for batch in &batches {
            let mut step = || -> Result<LossReport> {
                let mut tape = Tape::new();
                let bound = state.params.bind(&mut tape);
                let (total, report) = batch_objective(
                    &mut state.params,
                    &mut tape,
                    &bound,
                    &data,
                    batch,
                    hyper,
                    batch_mode(batch),
                )?;
                state.params.zero_grad();
                tape.backward(total, state.params.params_mut())?;
                if let Some(max_norm) = hyper.clip_grad_norm {
                    clip_gradients(state.params.params_mut(), max_norm);
                }
                adam_step(state.params.params_mut(), &mut state.optimizer, lr)?;
                Ok(report)
            };
            let r = step().map_err(abort)?;
            sum.intra += r.intra;
            sum.video += r.video;
            sum.reg += r.reg;
            sum.total += r.total;
            sum.skipped_sentences += r.skipped_sentences;
            used += 1;
        }
        if !state.params.all_finite() {
            return Err(abort(Error::Numeric(format!("parameters diverged in epoch {epoch}"))));
        }
        let n = used.max(1) as f64;
        let report = LossReport {
            intra: sum.intra / n,
            video: sum.video / n,
            reg: sum.reg / n,
            total: sum.total / n,
            skipped_sentences: sum.skipped_sentences,
        };
        log::info!(
            "epoch={} lr={:.6e} batches={} intra={:.6} video={:.6} reg={:.6} total={:.6} skipped={}",
            epoch + 1,
            lr,
            used,
            report.intra,
            report.video,
            report.reg,
            report.total,
            report.skipped_sentences
        );
        let at_end = evaluate_objective(&state.params, &data, reference_batch(&pairs, hyper.batch_size), hyper)
            .map_err(abort)?;
        log::info!(
            "epoch={} checkpoint_intra={:.6} checkpoint_video={:.6} checkpoint_total={:.6}",
            epoch + 1,
            at_end.intra,
            at_end.video,
            at_end.total
        );
        state.epoch = epoch + 1;
        state.metrics = report_metrics(&report, &at_end);
        log.push(EpochLog {
            epoch: epoch + 1,
            lr,
            batches: used,
            report,
            checkpoint_loss: at_end,
        });
    }
    Ok(TrainOutcome {
        checkpoint: state,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_corpus, SyntheticSpec};

    fn pairs(n: usize) -> Vec<Pair> {
        (0..n).map(|i| Pair { video: i, annotation: 0 }).collect()
    }

    #[test]
    fn minibatch_chunks_and_determinism() {
        let p = pairs(10);
        let b = make_minibatches(&p, 4, 7, 0).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b, make_minibatches(&p, 4, 7, 0).unwrap());
        assert_ne!(b, make_minibatches(&p, 4, 7, 1).unwrap());
        let mut seen: Vec<usize> = b.concat().iter().map(|p| p.video).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(make_minibatches(&[], 4, 0, 0).is_err());
    }

    #[test]
    fn lr_schedule() {
        assert_eq!(lr_at(0, 1e-3, 0.95), 1e-3);
        assert!((lr_at(2, 1e-3, 0.95) - 9.025e-4).abs() < 1e-15);
        assert_eq!(lr_at(17, 1e-3, 1.0), 1e-3);
    }

    fn one_param(g: &[f64], w: &[f64]) -> Vec<Parameter<f64>> {
        let mut p = Parameter::new("w", Tensor::vector(w.to_vec()));
        p.grad = Tensor::vector(g.to_vec());
        vec![p]
    }

    #[test]
    fn adam_single_step_closed_form() {
        let mut ps = one_param(&[1.0], &[0.0]);
        let mut st = OptimizerState::new(&ps);
        adam_step(&mut ps, &mut st, 1e-3).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction
        let want = -1e-3 * 1.0 / (1.0 + 1e-8);
        assert!((ps[0].value.data()[0] - want).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_zero_grad_and_symmetry() {
        let mut ps = one_param(&[0.0, 0.0], &[0.3, -0.2]);
        let mut st = OptimizerState::new(&ps);
        adam_step(&mut ps, &mut st, 1e-2).unwrap();
        assert_eq!(ps[0].value.data(), &[0.3, -0.2]);

        let mut ps = one_param(&[0.5, 0.5], &[1.0, 2.0]);
        let mut st = OptimizerState::new(&ps);
        adam_step(&mut ps, &mut st, 1e-2).unwrap();
        let d = ps[0].value.data();
        assert_eq!(d[0] - 1.0, d[1] - 2.0);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut ps = one_param(&[f64::NAN], &[1.0]);
        let mut st = OptimizerState::new(&ps);
        assert!(matches!(adam_step(&mut ps, &mut st, 1e-3), Err(Error::Numeric(_))));
        assert_eq!(ps[0].value.data(), &[1.0]);
        assert_eq!(st.t, 0);
    }

    fn toy_corpus() -> Corpus {
        generate_corpus(&SyntheticSpec {
            n_videos: 4,
            clip_dim: 6,
            sent_dim: 6,
            concept_dim: 3,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn smoke_fit_is_finite_and_deterministic() {
        let corpus = toy_corpus();
        let hyper = Hyperparams {
            epochs: 2,
            batch_size: 4,
            ..Hyperparams::default()
        };
        let dims = ModelDims::new(6, 6, 8);
        let a = fit::<f32>(&corpus, &hyper, dims).unwrap();
        assert_eq!(a.log.len(), 2);
        assert!(a.log.iter().all(|e| e.report.total.is_finite()));
        let b = fit::<f32>(&corpus, &hyper, dims).unwrap();
        assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_exact() {
        let corpus = toy_corpus();
        let hyper = Hyperparams {
            epochs: 1,
            batch_size: 4,
            ..Hyperparams::default()
        };
        let out = fit::<f32>(&corpus, &hyper, ModelDims::new(6, 6, 8)).unwrap();
        let bytes = out.checkpoint.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.optimizer, out.checkpoint.optimizer);
        assert_eq!(back.params.sent_bn, out.checkpoint.params.sent_bn);
        for (a, b) in back.params.params().iter().zip(out.checkpoint.params.params()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn mismatched_dims_abort_with_snapshot() {
        let corpus = toy_corpus();
        let err = fit::<f32>(&corpus, &Hyperparams::default(), ModelDims::new(5, 6, 8)).unwrap_err();
        assert!(matches!(err.error, Error::Config(_)));
        assert_eq!(err.last_good.epoch, 0);
    }
}
