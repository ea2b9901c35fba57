//! Self-checks run by `hman verify`: gradients, geometry, relevance bounds
//! and metric oracles.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{enumerate_candidates, DatasetProfile, MomentSpan, Source};
use crate::model::{init_params, ModelDims, ModelParams};
use crate::numcore::{grad_check, Mode, ParamSet, Real, Tape};
use crate::objective::{relevance, Variant};
use crate::retrieval::{median_rank, recall_at_k_iou, GroundTruth, Hit, RetrievalResult};
use crate::synthdata::{generate_corpus, SyntheticSpec};
use crate::training::{batch_objective, Hyperparams, Pair, PreparedCorpus};

/// Deliberate bugs for exercising the failure path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Drops the coarsest layer from the didemo candidate set.
    Geometry,
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// 32 or 64; selects the gradient-check precision and tolerance.
    pub precision: u32,
    pub grad_seeds: u64,
    /// Offsets every seed the suite draws from.
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            precision: 64,
            grad_seeds: 10,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {} {}", self.name, self.detail)
    }
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        passed,
        detail,
    }
}

pub const GRAD_TOL_F64: f64 = 1e-5;
pub const GRAD_TOL_F32: f64 = 1e-3;

/// Two videos with two sentences each, tiny dims, one batch of all four
/// pairs.
pub struct ToyProblem {
    pub data_seed: u64,
    pub dims: ModelDims,
    pub profile: DatasetProfile,
    pub corpus: crate::synthdata::Corpus,
    pub batch: Vec<Pair>,
}

pub fn toy_problem(seed: u64) -> Result<ToyProblem> {
    let spec = SyntheticSpec {
        n_videos: 2,
        sentences_per_video: 2,
        clip_dim: 4,
        sent_dim: 4,
        concept_dim: 2,
        seed,
        ..SyntheticSpec::default()
    };
    let corpus = generate_corpus(&spec)?;
    let batch = (0..2)
        .flat_map(|v| (0..2).map(move |a| Pair { video: v, annotation: a }))
        .collect();
    Ok(ToyProblem {
        data_seed: seed,
        dims: ModelDims::new(4, 4, 4),
        profile: spec.profile,
        corpus,
        batch,
    })
}

/// Toy hyperparameters with a visible regulariser and margins.
pub fn toy_hyper(variant: Variant) -> Hyperparams {
    Hyperparams {
        variant,
        alpha_reg: 1e-2,
        ..Hyperparams::default()
    }
}

/// Initial parameters for the toy check. Biases start at zero, which puts
/// ReLUs fed by dead units exactly on their kink; they are jittered so the
/// check runs at a generic point.
pub fn toy_model<F: Real>(toy: &ToyProblem, seed: u64) -> Result<ModelParams<F>> {
    let mut model: ModelParams<F> = init_params(seed.wrapping_add(1), &toy.profile, toy.dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xb1a5);
    let weights = model.weight_slots();
    for (slot, p) in model.params_mut().iter_mut().enumerate() {
        if !weights.contains(&slot) {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v += F::lit(rng.random_range(-0.1..0.1)));
        }
    }
    Ok(model)
}

/// Max relative error of the composite training loss gradient at precision
/// `F` on the toy problem for `seed`.
pub fn composite_grad_error<F: Real>(seed: u64, variant: Variant) -> Result<f64> {
    let toy = toy_problem(seed)?;
    let hyper = toy_hyper(variant);
    let data = PreparedCorpus::<F>::new(&toy.corpus, hyper.pos_iou_threshold)?;
    let mut model: ModelParams<F> = toy_model(&toy, seed)?;
    let eps = if F::BITS == 64 { 1e-6 } else { 1e-2 };
    let err = grad_check(
        &mut model,
        |m, tape: &mut Tape<F>| {
            let bound = m.bind(tape);
            batch_objective(m, tape, &bound, &data, &toy.batch, &hyper, Mode::Train).map(|r| r.0)
        },
        F::lit(eps),
    )?;
    Ok(err.f64())
}

/// f32 analytic gradient checked against central differences of the same
/// loss evaluated in f64 at the f32 parameter values.
pub fn composite_grad_error_f32_vs_f64(seed: u64, variant: Variant) -> Result<f64> {
    let toy = toy_problem(seed)?;
    let hyper = toy_hyper(variant);
    let data32 = PreparedCorpus::<f32>::new(&toy.corpus, hyper.pos_iou_threshold)?;
    let data64 = PreparedCorpus::<f64>::new(&toy.corpus, hyper.pos_iou_threshold)?;
    let mut m32: ModelParams<f32> = toy_model(&toy, seed)?;
    let mut tape = Tape::new();
    let bound = m32.bind(&mut tape);
    let (loss, _) =
        batch_objective(&mut m32, &mut tape, &bound, &data32, &toy.batch, &hyper, Mode::Train)?;
    m32.zero_grad();
    tape.backward(loss, m32.params_mut())?;

    let mut m64: ModelParams<f64> = m32.cast();
    let eps = 1e-6;
    let eval = |m: &mut ModelParams<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let (l, _) = batch_objective(m, &mut tape, &bound, &data64, &toy.batch, &hyper, Mode::Train)?;
        Ok(tape.value(l).data()[0])
    };
    let mut worst = 0.0f64;
    for p in 0..m64.params().len() {
        for i in 0..m64.params()[p].value.len() {
            let orig = m64.params()[p].value.data()[i];
            m64.params_mut()[p].value.data_mut()[i] = orig + eps;
            let plus = eval(&mut m64)?;
            m64.params_mut()[p].value.data_mut()[i] = orig - eps;
            let minus = eval(&mut m64)?;
            m64.params_mut()[p].value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = m32.params()[p].grad.data()[i] as f64;
            worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

fn check_gradients(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let (tol, label) = if opts.precision == 32 {
        (GRAD_TOL_F32, "f32")
    } else {
        (GRAD_TOL_F64, "f64")
    };
    [Variant::Sum, Variant::Max]
        .into_iter()
        .map(|variant| {
            let name = format!("gradient.{}.{label}", format!("{variant:?}").to_lowercase());
            let mut worst = 0.0f64;
            for seed in opts.seed..opts.seed + opts.grad_seeds {
                let err = if opts.precision == 32 {
                    composite_grad_error_f32_vs_f64(seed, variant)
                } else {
                    composite_grad_error::<f64>(seed, variant)
                };
                match err {
                    Ok(e) => worst = worst.max(e),
                    Err(e) => return outcome(&name, false, format!("seed={seed} error={e}")),
                }
            }
            outcome(
                &name,
                worst <= tol,
                format!("max_rel_err={worst:.3e} tol={tol:.0e} seeds={}", opts.grad_seeds),
            )
        })
        .collect()
}

fn check_geometry(fault: Option<Fault>) -> Vec<CheckOutcome> {
    let mut didemo = DatasetProfile::didemo();
    if fault == Some(Fault::Geometry) {
        didemo.used_layers.pop();
        didemo.candidate_count -= 1;
    }
    let mut out = Vec::new();
    for (profile, want) in [
        (didemo, 21),
        (DatasetProfile::charades(), 61),
        (DatasetProfile::activitynet(), 1023),
    ] {
        let name = format!("geometry.{}", profile.name);
        out.push(match enumerate_candidates(&profile) {
            Ok(set) => outcome(&name, set.len() == want, format!("candidates={} want={want}", set.len())),
            Err(e) => outcome(&name, false, format!("error={e}")),
        });
    }
    let branch = enumerate_candidates(&DatasetProfile::charades()).map(|set| {
        let spans: Vec<MomentSpan> = set
            .candidates
            .iter()
            .filter(|c| c.source == Source::Branch)
            .map(|c| c.span)
            .collect();
        let ok = spans.len() == 30
            && spans
                .iter()
                .enumerate()
                .all(|(i, s)| s.start_unit == i as u32 && s.len_units() == 3);
        (ok, spans.len())
    });
    out.push(match branch {
        Ok((ok, n)) => outcome("geometry.charades_branch", ok, format!("branch_spans={n} want=30x3@1")),
        Err(e) => outcome("geometry.charades_branch", false, format!("error={e}")),
    });
    out
}

/// Counts violations of `max S ≤ R ≤ max S + ln(n)/β` and of `R − max S`
/// being non-increasing in β over `lists` random similarity lists.
pub fn relevance_violations(lists: usize, seed: u64) -> Result<(usize, usize)> {
    let betas = [1.0, 10.0, 100.0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut bound, mut monotone) = (0, 0);
    for _ in 0..lists {
        let n = rng.random_range(1..=64usize);
        let sims: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut prev_gap = f64::INFINITY;
        for beta in betas {
            let r = relevance(&sims, beta)?;
            if !(max <= r && r <= max + (n as f64).ln() / beta) {
                bound += 1;
            }
            let gap = r - max;
            if gap > prev_gap {
                monotone += 1;
            }
            prev_gap = gap;
        }
    }
    Ok((bound, monotone))
}

fn check_relevance(seed: u64) -> Vec<CheckOutcome> {
    match relevance_violations(1000, seed ^ 0x5e1) {
        Ok((b, m)) => vec![
            outcome("relevance.bounds", b == 0, format!("violations={b} lists=1000")),
            outcome("relevance.monotone_beta", m == 0, format!("violations={m} lists=1000")),
        ],
        Err(e) => vec![outcome("relevance.bounds", false, format!("error={e}"))],
    }
}

/// A random retrieval problem over at most `max_moments` moments.
pub struct MetricCase {
    pub results: RetrievalResult,
    pub gt: Vec<GroundTruth>,
}

pub fn random_metric_case(rng: &mut impl Rng, max_moments: usize) -> MetricCase {
    let base = rng.random_range(1..=8u32);
    let per_video = (base * (base + 1) / 2) as usize;
    let n_videos = (max_moments / per_video).clamp(1, 10);
    let n_videos = rng.random_range(1..=n_videos);
    let mut pool = Vec::new();
    for v in 0..n_videos {
        let mut c = 0;
        for s in 0..base {
            for e in s + 1..=base {
                pool.push(Hit {
                    video: v,
                    candidate: c,
                    span: MomentSpan::new(s, e, 1.0).unwrap(),
                    score: 0.0,
                });
                c += 1;
            }
        }
    }
    let queries = rng.random_range(1..=12);
    let mut rankings = Vec::new();
    let mut gt = Vec::new();
    for _ in 0..queries {
        let mut r = pool.clone();
        for i in (1..r.len()).rev() {
            r.swap(i, rng.random_range(0..=i));
        }
        let keep = rng.random_range(1..=r.len());
        r.truncate(keep);
        rankings.push(Arc::from(r));
        let spans = (0..rng.random_range(1..=4))
            .map(|_| {
                let s = rng.random_range(0..base);
                MomentSpan::new(s, rng.random_range(s + 1..=base), 1.0).unwrap()
            })
            .collect();
        gt.push(GroundTruth {
            video: rng.random_range(0..n_videos),
            spans,
        });
    }
    MetricCase {
        results: RetrievalResult {
            rankings,
            total_moments: pool.len(),
        },
        gt,
    }
}

fn naive_iou(a: &MomentSpan, b: &MomentSpan) -> f64 {
    let lo = a.start_unit.max(b.start_unit) as f64;
    let hi = a.end_unit.min(b.end_unit) as f64;
    let inter = (hi - lo).max(0.0);
    let union = (a.end_unit - a.start_unit) as f64 + (b.end_unit - b.start_unit) as f64 - inter;
    inter / union
}

fn naive_correct(h: &Hit, g: &GroundTruth, m: f64, min_ann: usize) -> bool {
    let need = if min_ann > g.spans.len() { g.spans.len() } else { min_ann.max(1) };
    h.video == g.video && g.spans.iter().filter(|s| naive_iou(s, &h.span) >= m).count() >= need
}

/// Reference recall: straightforward loops over the top `k`.
pub fn naive_recall(case: &MetricCase, k: usize, m: f64, min_ann: usize) -> f64 {
    let mut hits = 0;
    for (r, g) in case.results.rankings.iter().zip(&case.gt) {
        if r.iter().take(k).any(|h| naive_correct(h, g, m, min_ann)) {
            hits += 1;
        }
    }
    hits as f64 / case.gt.len() as f64
}

/// Reference median rank: ranks sorted, middle pair averaged.
pub fn naive_median_rank(case: &MetricCase, m: f64, min_ann: usize) -> f64 {
    let mut ranks: Vec<f64> = case
        .results
        .rankings
        .iter()
        .zip(&case.gt)
        .map(|(r, g)| {
            r.iter()
                .position(|h| naive_correct(h, g, m, min_ann))
                .map_or(case.results.total_moments as f64 + 1.0, |p| p as f64 + 1.0)
        })
        .collect();
    ranks.sort_by(f64::total_cmp);
    let n = ranks.len();
    if n % 2 == 1 {
        ranks[n / 2]
    } else {
        (ranks[n / 2 - 1] + ranks[n / 2]) / 2.0
    }
}

/// Number of (case, setting) mismatches between the metric code and the
/// naive reference over `cases` random corpora of ≤ 200 moments.
pub fn metric_oracle_mismatches(cases: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let case = random_metric_case(&mut rng, 200);
        for min_ann in [1, 2] {
            for m in [0.5, 0.7] {
                for k in [1, 5, 10, 100] {
                    let got = recall_at_k_iou(&case.results, &case.gt, k, m, min_ann)?;
                    if got != naive_recall(&case, k, m, min_ann) {
                        bad += 1;
                    }
                }
                if median_rank(&case.results, &case.gt, m, min_ann)? != naive_median_rank(&case, m, min_ann) {
                    bad += 1;
                }
            }
        }
    }
    Ok(bad)
}

fn check_metrics(seed: u64) -> CheckOutcome {
    match metric_oracle_mismatches(100, seed ^ 0x0ac1e) {
        Ok(bad) => outcome("metrics.oracle", bad == 0, format!("mismatches={bad} corpora=100")),
        Err(e) => outcome("metrics.oracle", false, format!("error={e}")),
    }
}

pub fn run_checks(opts: &VerifyOptions) -> Vec<CheckOutcome> {
    let mut out = check_geometry(opts.fault);
    out.extend(check_gradients(opts));
    out.extend(check_relevance(opts.seed));
    out.push(check_metrics(opts.seed));
    out
}
