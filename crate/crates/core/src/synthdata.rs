//! Synthetic corpora with planted global/local structure, the HMF1 feature
//! container and video-level splitting.
//!
//! Each video draws a global concept `g` and a background concept; each
//! annotation draws a local concept `u`. With fixed random maps `A, B`
//! (into clip space) and `C, D` (into sentence space):
//!
//! ```text
//! clip i   = A·g + B·(u of the annotation covering i, else background) + σ·ε
//! sentence = C·g + D·u + σ·ε
//! ```
//!
//! so the video is identifiable from `g` and the moment from `u`.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{enumerate_candidates, DatasetProfile, MomentSpan};
use crate::numcore::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"HMF1";
pub const LITTLE_ENDIAN_TAG: u8 = 0x01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanSource {
    /// Ground truth drawn from the profile's candidate spans.
    Grid,
    /// Arbitrary `[start, end)` within the base length.
    Uniform,
    /// Every annotation covers the whole video (one sentence per video).
    Whole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub sentences_per_video: usize,
    pub clip_dim: usize,
    pub sent_dim: usize,
    pub concept_dim: usize,
    pub noise_sigma: f64,
    pub span_source: SpanSource,
    pub test_fraction: f64,
    pub seed: u64,
    pub profile: DatasetProfile,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_videos: 40,
            sentences_per_video: 2,
            clip_dim: 32,
            sent_dim: 32,
            concept_dim: 8,
            noise_sigma: 0.1,
            span_source: SpanSource::Grid,
            test_fraction: 0.2,
            seed: 0,
            profile: DatasetProfile::didemo(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Annotation {
    pub sentence_id: String,
    pub feature: Vec<f32>,
    /// One or more annotated spans (several for multi-annotator data).
    pub spans: Vec<MomentSpan>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub split: Split,
    /// `clip_dim × n_clips`.
    pub clips: Tensor<f32>,
    pub annotations: Vec<Annotation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub clip_dim: usize,
    pub sent_dim: usize,
    pub profile: DatasetProfile,
    pub videos: Vec<Video>,
}

pub type SyntheticCorpus = Corpus;

/// Concepts behind a generated corpus, kept for probing tests.
#[derive(Clone, Debug)]
pub struct PlantedConcepts {
    pub global: Vec<Vec<f64>>,
    /// `local[v][j]` for annotation `j` of video `v`.
    pub local: Vec<Vec<Vec<f64>>>,
}

impl Corpus {
    pub fn with_split(&self, split: Split) -> Corpus {
        Corpus {
            videos: self.videos.iter().filter(|v| v.split == split).cloned().collect(),
            ..self.clone()
        }
    }

    pub fn pair_count(&self) -> usize {
        self.videos.iter().map(|v| v.annotations.len()).sum()
    }

    pub fn unit_seconds(&self) -> f64 {
        self.profile.unit_seconds()
    }
}

const SPAN_RETRIES: usize = 10_000;
const RESTART_EVERY: usize = 50;

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// `rows × cols` map with N(0, 1/cols) entries, row-major.
fn random_map(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    gaussian(rng, rows * cols).into_iter().map(|v| v * scale).collect()
}

fn apply(map: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o += map[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

pub fn generate_corpus(spec: &SyntheticSpec) -> Result<Corpus> {
    generate_with_concepts(spec).map(|(c, _)| c)
}

pub fn generate_with_concepts(spec: &SyntheticSpec) -> Result<(Corpus, PlantedConcepts)> {
    if spec.n_videos == 0
        || spec.sentences_per_video == 0
        || spec.clip_dim == 0
        || spec.sent_dim == 0
        || spec.concept_dim == 0
    {
        return Err(Error::Contract("synthetic spec counts must be positive".into()));
    }
    if !(spec.noise_sigma >= 0.0) {
        return Err(Error::Contract(format!("noise sigma {} < 0", spec.noise_sigma)));
    }
    let profile = &spec.profile;
    let candidates = enumerate_candidates(profile)?;
    let base_len = candidates.base_len as u32;
    let unit = profile.unit_seconds();
    let l = profile.input_clips;
    let p = spec.concept_dim;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let a = random_map(&mut rng, spec.clip_dim, p);
    let b = random_map(&mut rng, spec.clip_dim, p);
    let c = random_map(&mut rng, spec.sent_dim, p);
    let d = random_map(&mut rng, spec.sent_dim, p);

    let mut planted = PlantedConcepts {
        global: Vec::new(),
        local: Vec::new(),
    };
    let mut videos = Vec::with_capacity(spec.n_videos);
    for vi in 0..spec.n_videos {
        let g = gaussian(&mut rng, p);
        let background = gaussian(&mut rng, p);

        let mut spans: Vec<MomentSpan> = Vec::with_capacity(spec.sentences_per_video);
        let mut tries = 0;
        while spans.len() < spec.sentences_per_video {
            tries += 1;
            if tries > SPAN_RETRIES {
                return Err(Error::Contract(format!(
                    "could not place {} disjoint spans in video {vi}",
                    spec.sentences_per_video
                )));
            }
            // an early long span can make the rest impossible; start over
            if tries % RESTART_EVERY == 0 {
                spans.clear();
            }
            let span = match spec.span_source {
                SpanSource::Grid => {
                    candidates.candidates[rng.random_range(0..candidates.len())].span
                }
                SpanSource::Uniform => {
                    let s = rng.random_range(0..base_len);
                    let e = rng.random_range(s + 1..=base_len);
                    MomentSpan::new(s, e, unit)?
                }
                SpanSource::Whole => MomentSpan::new(0, base_len, unit)?,
            };
            let overlaps = spans
                .iter()
                .any(|o| span.start_unit < o.end_unit && o.start_unit < span.end_unit);
            if !overlaps {
                spans.push(span);
            }
        }

        let locals: Vec<Vec<f64>> = (0..spans.len()).map(|_| gaussian(&mut rng, p)).collect();
        let mut clips = vec![0f32; spec.clip_dim * l];
        let mut col = vec![0.0; spec.clip_dim];
        for i in 0..l {
            let u = (i / profile.pool_stride) as u32;
            let concept = spans
                .iter()
                .position(|s| s.contains_unit(u))
                .map_or(&background, |j| &locals[j]);
            col.iter_mut().for_each(|v| *v = 0.0);
            apply(&a, &g, &mut col);
            apply(&b, concept, &mut col);
            for (ch, v) in col.iter().enumerate() {
                let noise: f64 = rng.sample(StandardNormal);
                clips[ch * l + i] = (v + spec.noise_sigma * noise) as f32;
            }
        }

        let mut annotations = Vec::with_capacity(spans.len());
        for (j, (span, u)) in spans.iter().zip(&locals).enumerate() {
            let mut s = vec![0.0; spec.sent_dim];
            apply(&c, &g, &mut s);
            apply(&d, u, &mut s);
            let feature = s
                .iter()
                .map(|v| (v + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            annotations.push(Annotation {
                sentence_id: format!("v{vi:05}_s{j}"),
                feature,
                spans: vec![*span],
            });
        }
        videos.push(Video {
            id: format!("v{vi:05}"),
            split: Split::Train,
            clips: Tensor::new(vec![spec.clip_dim, l], clips)?,
            annotations,
        });
        planted.global.push(g);
        planted.local.push(locals);
    }

    let mut corpus = Corpus {
        clip_dim: spec.clip_dim,
        sent_dim: spec.sent_dim,
        profile: profile.clone(),
        videos,
    };
    // a single video cannot be split; it stays in training
    if corpus.videos.len() >= 2 {
        for i in test_indices(corpus.videos.len(), spec.test_fraction, spec.seed)? {
            corpus.videos[i].split = Split::Test;
        }
    }
    Ok((corpus, planted))
}

fn test_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Contract(format!("test fraction {fraction} outside (0, 1)")));
    }
    if n < 2 {
        return Err(Error::Contract("splitting needs at least two videos".into()));
    }
    let n_test = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5b11);
    order.shuffle(&mut rng);
    let mut test = order[..n_test].to_vec();
    test.sort_unstable();
    Ok(test)
}

/// Video-level split into `(train, test)`, tagging each side.
pub fn split(corpus: &Corpus, test_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    let test = test_indices(corpus.videos.len(), test_fraction, seed)?;
    let mut tagged = corpus.clone();
    for (i, v) in tagged.videos.iter_mut().enumerate() {
        v.split = if test.binary_search(&i).is_ok() {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok((tagged.with_split(Split::Train), tagged.with_split(Split::Test)))
}

#[derive(Serialize, Deserialize)]
struct ManifestSpan {
    start_unit: u32,
    end_unit: u32,
    start_seconds: f64,
    end_seconds: f64,
}

#[derive(Serialize, Deserialize)]
struct ManifestAnnotation {
    sentence_id: String,
    spans: Vec<ManifestSpan>,
}

#[derive(Serialize, Deserialize)]
struct ManifestVideo {
    id: String,
    split: Split,
    n_clips: usize,
    annotations: Vec<ManifestAnnotation>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    clip_dim: usize,
    sent_dim: usize,
    unit_seconds: f64,
    profile: DatasetProfile,
    videos: Vec<ManifestVideo>,
}

/// Serialises a corpus to the HMF1 layout:
///
/// ```text
/// "HMF1" | 0x01 | u32 LE manifest length | manifest (UTF-8 JSON)
/// | f32 LE blocks: per video its clip matrix (clip_dim × n_clips,
///   row-major) followed by each annotation's sentence feature
/// ```
pub fn encode_features(corpus: &Corpus) -> Result<Vec<u8>> {
    let unit = corpus.unit_seconds();
    let manifest = Manifest {
        clip_dim: corpus.clip_dim,
        sent_dim: corpus.sent_dim,
        unit_seconds: unit,
        profile: corpus.profile.clone(),
        videos: corpus
            .videos
            .iter()
            .map(|v| ManifestVideo {
                id: v.id.clone(),
                split: v.split,
                n_clips: v.clips.shape()[1],
                annotations: v
                    .annotations
                    .iter()
                    .map(|a| ManifestAnnotation {
                        sentence_id: a.sentence_id.clone(),
                        spans: a
                            .spans
                            .iter()
                            .map(|s| ManifestSpan {
                                start_unit: s.start_unit,
                                end_unit: s.end_unit,
                                start_seconds: s.start_seconds(),
                                end_seconds: s.end_seconds(),
                            })
                            .collect(),
                    })
                    .collect(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(9 + json.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.push(LITTLE_ENDIAN_TAG);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for v in &corpus.videos {
        if v.clips.shape()[0] != corpus.clip_dim {
            return Err(Error::Config(format!("video {} has wrong clip dim", v.id)));
        }
        for x in v.clips.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for a in &v.annotations {
            if a.feature.len() != corpus.sent_dim {
                return Err(Error::Config(format!("{} has wrong sentence dim", a.sentence_id)));
            }
            for x in &a.feature {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.buf.len() as u64,
                format!("truncated while reading {what}: need {n} bytes at {}", self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<Corpus> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != FEATURE_MAGIC {
        return Err(Error::format(0, "bad magic, expected HMF1"));
    }
    let tag = r.take(1, "endianness tag")?[0];
    if tag != LITTLE_ENDIAN_TAG {
        return Err(Error::format(
            4,
            format!("unsupported endianness tag {tag:#04x}; only little-endian (0x01) is accepted"),
        ));
    }
    let len = r.u32("manifest length")? as usize;
    let at = r.pos as u64;
    let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)
        .map_err(|e| Error::format(at, format!("bad manifest: {e}")))?;
    let unit = manifest.unit_seconds;
    if (unit - manifest.profile.unit_seconds()).abs() > 1e-9 {
        return Err(Error::format(at, "manifest unit duration disagrees with its profile"));
    }

    let mut videos = Vec::with_capacity(manifest.videos.len());
    for mv in manifest.videos {
        let clips = r.f32s(manifest.clip_dim * mv.n_clips, "clip features")?;
        let clips = Tensor::new(vec![manifest.clip_dim, mv.n_clips], clips)?;
        let mut annotations = Vec::with_capacity(mv.annotations.len());
        for ma in mv.annotations {
            let feature = r.f32s(manifest.sent_dim, "sentence feature")?;
            let spans = ma
                .spans
                .iter()
                .map(|s| MomentSpan::new(s.start_unit, s.end_unit, unit))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::format(at, e.to_string()))?;
            if spans.is_empty() {
                return Err(Error::format(at, format!("{} has no spans", ma.sentence_id)));
            }
            annotations.push(Annotation {
                sentence_id: ma.sentence_id,
                feature,
                spans,
            });
        }
        videos.push(Video {
            id: mv.id,
            split: mv.split,
            clips,
            annotations,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            r.pos as u64,
            format!("{} trailing bytes", bytes.len() - r.pos),
        ));
    }
    Ok(Corpus {
        clip_dim: manifest.clip_dim,
        sent_dim: manifest.sent_dim,
        profile: manifest.profile,
        videos,
    })
}

pub fn write_features(path: &Path, corpus: &Corpus) -> Result<()> {
    let bytes = encode_features(corpus)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Corpus> {
    decode_features(&std::fs::read(path)?)
}
