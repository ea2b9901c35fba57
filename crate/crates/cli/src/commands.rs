use std::path::{Path, PathBuf};

use hman::retrieval::evaluate_prior;
use hman::synthdata::{read_features, write_features, Split};
use hman::verify::{run_checks, Fault, VerifyOptions};
use hman::{
    build_index, evaluate, fit, generate_corpus, Checkpoint, Corpus,
    DatasetProfile, EvalReport, Hyperparams, ModelDims, ModelParams, Objective, Pooling, Real,
    SyntheticSpec, Tensor, Variant,
};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::vectors::parse_vectors;
use crate::*;

pub struct Context {
    cfg: RunConfig,
    seed: Option<u64>,
    precision: Option<u32>,
}

impl Context {
    pub fn new(shared: &Shared, cfg: RunConfig) -> CliResult<Self> {
        let precision = match shared.precision.as_deref() {
            Some(p) => Some(p.parse().map_err(|_| CliError::Usage(format!("bad precision {p}")))?),
            None => cfg.precision,
        };
        if let Some(p) = precision {
            if p != 32 && p != 64 {
                return Err(CliError::Usage(format!("precision must be 32 or 64, got {p}")));
            }
        }
        if let Some(n) = shared.threads.or(cfg.threads) {
            if n == 0 {
                return Err(CliError::Usage("--threads must be at least 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Internal(e.to_string()))?;
        }
        Ok(Self {
            seed: shared.seed.or(cfg.seed),
            precision,
            cfg,
        })
    }

    fn path(&self, flag: Option<PathBuf>, from_cfg: &Option<PathBuf>, name: &str) -> CliResult<PathBuf> {
        flag.or_else(|| from_cfg.clone())
            .ok_or_else(|| CliError::Usage(format!("missing required --{name}")))
    }
}

fn load_corpus(path: &Path) -> CliResult<Corpus> {
    read_features(path).map_err(|e| match e {
        hman::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

fn subset(corpus: &Corpus, split: SplitArg) -> Corpus {
    match split {
        SplitArg::Train => corpus.with_split(Split::Train),
        SplitArg::Test => corpus.with_split(Split::Test),
        SplitArg::All => corpus.clone(),
    }
}

fn preset(name: &str) -> CliResult<SyntheticSpec> {
    if name == "default" {
        return Ok(SyntheticSpec::default());
    }
    if let Some(profile) = DatasetProfile::by_name(name) {
        return Ok(SyntheticSpec {
            profile,
            ..SyntheticSpec::default()
        });
    }
    let path = Path::new(name);
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "unknown spec `{name}`: expected default, didemo, charades, activitynet or a JSON file"
        )));
    }
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let patch: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("spec {name}: {e}")))?;
    RunConfig {
        spec: Some(patch),
        ..RunConfig::default()
    }
    .spec(&SyntheticSpec::default())
}

pub fn gen(ctx: &Context, args: GenArgs) -> CliResult<()> {
    let out = ctx.path(args.out, &ctx.cfg.out, "out")?;
    let mut spec = ctx.cfg.spec(&preset(&args.spec)?)?;
    if let Some(seed) = ctx.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.videos {
        spec.n_videos = n;
    }
    if let Some(s) = args.noise {
        spec.noise_sigma = s;
    }
    let corpus = generate_corpus(&spec)?;
    write_features(&out, &corpus).map_err(|e| match e {
        hman::Error::Io(io) => CliError::io(&out, io),
        other => other.into(),
    })?;
    println!(
        "wrote={} videos={} pairs={} profile={} seed={}",
        out.display(),
        corpus.videos.len(),
        corpus.pair_count(),
        corpus.profile.name,
        spec.seed
    );
    Ok(())
}

fn resolve_hyper(ctx: &Context, base: &Hyperparams) -> CliResult<Hyperparams> {
    let mut h = ctx.cfg.hyper(base)?;
    if let Some(seed) = ctx.seed {
        h.seed = seed;
    }
    Ok(h)
}

pub fn train(ctx: &Context, args: TrainArgs) -> CliResult<()> {
    let features = ctx.path(args.features, &ctx.cfg.features, "features")?;
    let out = ctx.path(args.out, &ctx.cfg.out, "out")?;
    let corpus = load_corpus(&features)?;
    let mut hyper = resolve_hyper(ctx, &Hyperparams::for_profile(&corpus.profile.name))?;
    if let Some(v) = args.variant {
        hyper.variant = match v {
            VariantArg::Sum => Variant::Sum,
            VariantArg::Max => Variant::Max,
        };
    }
    if let Some(o) = args.objective {
        hyper.objective = objective(o);
    }
    if let Some(p) = args.pooling {
        hyper.pooling = match p {
            PoolingArg::Log => Pooling::default(),
            PoolingArg::Ave => Pooling::Average,
        };
    }
    if let Some(e) = args.epochs {
        hyper.epochs = e;
    }
    if let Some(b) = args.batch_size {
        hyper.batch_size = b;
    }
    if let Some(lr) = args.lr {
        hyper.lr0 = lr;
    }
    if let Some(l) = args.lambda1 {
        hyper.lambda1 = l;
    }
    hyper.validate()?;
    let train = subset(&corpus, args.split);
    let embed = args.embed_dim.or(ctx.cfg.embed_dim).unwrap_or(ModelDims::default().embed_dim);
    let dims = ModelDims::new(corpus.clip_dim, corpus.sent_dim, embed);
    match ctx.precision.unwrap_or(32) {
        64 => train_as::<f64>(&train, &hyper, dims, &out),
        _ => train_as::<f32>(&train, &hyper, dims, &out),
    }
}

fn objective(o: ObjectiveArg) -> Objective {
    match o {
        ObjectiveArg::Proposed => Objective::Proposed,
        ObjectiveArg::Intra => Objective::Intra,
        ObjectiveArg::Video => Objective::Video,
    }
}

fn train_as<F: Real>(corpus: &Corpus, hyper: &Hyperparams, dims: ModelDims, out: &Path) -> CliResult<()> {
    let save = |ck: &Checkpoint<F>| {
        ck.save(out).map_err(|e| match e {
            hman::Error::Io(io) => CliError::io(out, io),
            other => other.into(),
        })
    };
    match fit::<F>(corpus, hyper, dims) {
        Ok(outcome) => {
            save(&outcome.checkpoint)?;
            let last = outcome.log.last().map(|l| l.report.total).unwrap_or(f64::NAN);
            println!(
                "wrote={} epochs={} final_loss={last:.6}",
                out.display(),
                outcome.checkpoint.epoch
            );
            Ok(())
        }
        Err(abort) => {
            save(&abort.last_good)?;
            log::error!(
                "event=abort epoch={} saved={}",
                abort.last_good.epoch,
                out.display()
            );
            Err(abort.error.into())
        }
    }
}

#[derive(Serialize)]
struct ReportFile<'a> {
    reports: &'a [EvalReport],
}

pub fn eval(ctx: &Context, args: EvalArgs) -> CliResult<()> {
    let features = ctx.path(args.features, &ctx.cfg.features, "features")?;
    let corpus = load_corpus(&features)?;
    let checkpoint = args.checkpoint.or_else(|| ctx.cfg.checkpoint.clone());
    if checkpoint.is_none() && args.ablate.is_empty() && args.baseline.is_none() {
        return Err(CliError::Usage(
            "nothing to evaluate: give --checkpoint, --ablate or --baseline".into(),
        ));
    }
    let settings = ctx.cfg.eval()?;
    let pool = subset(&corpus, args.split);
    let train = corpus.with_split(Split::Train);
    let precision = ctx.precision.unwrap_or(32);
    let mut reports = Vec::new();

    let mut base = resolve_hyper(ctx, &Hyperparams::for_profile(&corpus.profile.name))?;
    let mut dims = ModelDims::new(
        corpus.clip_dim,
        corpus.sent_dim,
        args.embed_dim.or(ctx.cfg.embed_dim).unwrap_or(ModelDims::default().embed_dim),
    );
    if let Some(path) = &checkpoint {
        let ck = load_checkpoint::<f32>(path)?;
        base = ck.hyper.clone();
        if let Some(seed) = ctx.seed {
            base.seed = seed;
        }
        dims = ck.params.dims;
        let mut r = match precision {
            64 => evaluate(&load_checkpoint::<f64>(path)?.params, &pool, &settings)?,
            _ => evaluate(&ck.params, &pool, &settings)?,
        };
        r.label = "checkpoint".into();
        reports.push(r);
    }
    for ablation in &args.ablate {
        let (label, hyper) = match ablation {
            Ablation::Proposed => ("proposed", Hyperparams { objective: Objective::Proposed, ..base.clone() }),
            Ablation::Intra => ("intra", Hyperparams { objective: Objective::Intra, ..base.clone() }),
            Ablation::Video => ("video", Hyperparams { objective: Objective::Video, ..base.clone() }),
            Ablation::Ave => ("ave", Hyperparams { pooling: Pooling::Average, ..base.clone() }),
            Ablation::Log => ("log", Hyperparams { pooling: Pooling::default(), ..base.clone() }),
        };
        hyper.validate()?;
        log::info!("event=ablation label={label}");
        let mut r = match precision {
            64 => ablation_report::<f64>(&train, &pool, &hyper, dims, &settings)?,
            _ => ablation_report::<f32>(&train, &pool, &hyper, dims, &settings)?,
        };
        r.label = label.into();
        reports.push(r);
    }
    if args.baseline == Some(Baseline::Prior) {
        let seed = ctx.seed.unwrap_or(base.seed);
        reports.push(evaluate_prior(&train, &pool, &settings, seed)?);
    }

    for r in &reports {
        println!("{r}");
    }
    if let Some(path) = args.report.or_else(|| ctx.cfg.report.clone()) {
        let mut json = serde_json::to_string_pretty(&ReportFile { reports: &reports })?;
        json.push('\n');
        std::fs::write(&path, json).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}

fn ablation_report<F: Real>(
    train: &Corpus,
    pool: &Corpus,
    hyper: &Hyperparams,
    dims: ModelDims,
    settings: &hman::EvalSettings,
) -> CliResult<EvalReport> {
    let out = fit::<F>(train, hyper, dims).map_err(|a| a.error)?;
    Ok(evaluate(&out.checkpoint.params, pool, settings)?)
}

fn load_checkpoint<F: Real>(path: &Path) -> CliResult<Checkpoint<F>> {
    Checkpoint::<F>::load(path).map_err(|e| match e {
        hman::Error::Io(io) => CliError::io(path, io),
        other => other.into(),
    })
}

pub fn query(ctx: &Context, args: QueryArgs) -> CliResult<()> {
    if args.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let features = ctx.path(args.features, &ctx.cfg.features, "features")?;
    let checkpoint = ctx.path(args.checkpoint, &ctx.cfg.checkpoint, "checkpoint")?;
    let corpus = load_corpus(&features)?;
    let text = std::fs::read_to_string(&args.vectors).map_err(|e| CliError::io(&args.vectors, e))?;
    match ctx.precision.unwrap_or(32) {
        64 => query_as(&load_checkpoint::<f64>(&checkpoint)?.params, &corpus, &text, args.k),
        _ => query_as(&load_checkpoint::<f32>(&checkpoint)?.params, &corpus, &text, args.k),
    }
}

fn query_as<F: Real>(params: &ModelParams<F>, corpus: &Corpus, text: &str, k: usize) -> CliResult<()> {
    let queries = parse_vectors(text, params.dims.sent_dim)?;
    let index = build_index(params, corpus)?;
    let flat: Vec<F> = queries.iter().flatten().map(|&v| F::lit(v as f64)).collect();
    let sentences = Tensor::new(vec![queries.len(), params.dims.sent_dim], flat)?;
    let mut scratch = params.clone();
    let embedded = hman::model::encode_sentence(&sentences, &mut scratch, hman::Mode::Infer)?;
    let d = params.dims.embed_dim;
    for (q, row) in embedded.data().chunks(d).enumerate() {
        for (rank, hit) in index.query_top_k(row, k)?.iter().enumerate() {
            println!(
                "query={q} rank={} video={} candidate={} start_s={} end_s={} score={:.6}",
                rank + 1,
                index.video_ids[hit.video],
                hit.candidate,
                hit.span.start_seconds(),
                hit.span.end_seconds(),
                hit.score
            );
        }
    }
    Ok(())
}

pub fn verify(ctx: &Context, args: VerifyArgs) -> CliResult<()> {
    let opts = VerifyOptions {
        precision: ctx.precision.unwrap_or(64),
        grad_seeds: args.grad_seeds,
        seed: ctx.seed.unwrap_or(0),
        fault: args.inject_fault.map(|FaultArg::Geometry| Fault::Geometry),
    };
    let outcomes = run_checks(&opts);
    for o in &outcomes {
        println!("{o}");
    }
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", outcomes.len());
        Ok(())
    } else {
        Err(CliError::Verify(failed.join(", ")))
    }
}
