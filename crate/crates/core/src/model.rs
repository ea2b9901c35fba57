//! Hierarchical moment encoder and two-layer sentence encoder.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::DatasetProfile;
use crate::numcore::{BatchNormStats, Mode, ParamSet, Parameter, Real, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub clip_dim: usize,
    pub sent_dim: usize,
    /// Joint embedding size `d`, shared by every moment layer and the
    /// sentence output.
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl ModelDims {
    pub fn new(clip_dim: usize, sent_dim: usize, embed_dim: usize) -> Self {
        Self {
            clip_dim,
            sent_dim,
            embed_dim,
            hidden_dim: embed_dim,
        }
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        Self::new(32, 32, 64)
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Slots {
    proj_w: usize,
    proj_b: usize,
    conv: Vec<(usize, usize)>,
    branch: Option<(usize, usize)>,
    sent_w1: usize,
    sent_b1: usize,
    bn_gamma: usize,
    bn_beta: usize,
    sent_w2: usize,
    sent_b2: usize,
}

/// Every learnable tensor of the network plus the sentence batch-norm
/// running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<F> {
    pub dims: ModelDims,
    pub profile: DatasetProfile,
    params: Vec<Parameter<F>>,
    slots: Slots,
    pub sent_bn: BatchNormStats<F>,
}

/// Parameter leaves of one [`ModelParams`] registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<Var>);

/// `M × d` moment embeddings, row `i` matching candidate `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentEmbeddings<F>(pub Tensor<F>);

impl<F: Real> MomentEmbeddings<F> {
    pub fn rows(&self) -> usize {
        self.0.shape()[0]
    }
}

fn shapes(profile: &DatasetProfile, dims: &ModelDims) -> Vec<(String, Vec<usize>)> {
    let d = dims.embed_dim;
    let mut out = vec![
        ("proj.w".to_string(), vec![dims.clip_dim, d]),
        ("proj.b".to_string(), vec![d]),
    ];
    for (i, layer) in profile.layers.iter().enumerate() {
        out.push((format!("conv{i}.w"), vec![d, d, layer.kernel]));
        out.push((format!("conv{i}.b"), vec![d]));
    }
    if let Some(b) = profile.branch {
        out.push(("branch.w".into(), vec![d, d, b.window]));
        out.push(("branch.b".into(), vec![d]));
    }
    let h = dims.hidden_dim;
    out.extend([
        ("sent.w1".to_string(), vec![dims.sent_dim, h]),
        ("sent.b1".to_string(), vec![h]),
        ("sent.bn.gamma".to_string(), vec![h]),
        ("sent.bn.beta".to_string(), vec![h]),
        ("sent.w2".to_string(), vec![h, d]),
        ("sent.b2".to_string(), vec![d]),
    ]);
    out
}

impl Slots {
    fn layout(profile: &DatasetProfile) -> Self {
        let n = profile.layers.len();
        let conv = (0..n).map(|i| (2 + 2 * i, 3 + 2 * i)).collect();
        let mut next = 2 + 2 * n;
        let branch = profile.branch.map(|_| {
            next += 2;
            (next - 2, next - 1)
        });
        Slots {
            proj_w: 0,
            proj_b: 1,
            conv,
            branch,
            sent_w1: next,
            sent_b1: next + 1,
            bn_gamma: next + 2,
            bn_beta: next + 3,
            sent_w2: next + 4,
            sent_b2: next + 5,
        }
    }
}

/// Uniform fan-based initialisation, zero biases, BN scale 1 / shift 0.
pub fn init_params<F: Real>(
    seed: u64,
    profile: &DatasetProfile,
    dims: ModelDims,
) -> Result<ModelParams<F>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = shapes(profile, &dims)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data = if name.ends_with(".gamma") {
                vec![F::one(); n]
            } else if shape.len() == 1 {
                vec![F::zero(); n]
            } else {
                let (fan_in, fan_out) = match shape.as_slice() {
                    [i, o] => (*i, *o),
                    [o, i, k] => (i * k, o * k),
                    _ => unreachable!(),
                };
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| F::lit(rng.random_range(-a..a))).collect()
            };
            Tensor::new(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(profile.clone(), dims, tensors)
}

impl<F: Real> ModelParams<F> {
    /// Assembles params from tensors in canonical slot order.
    pub fn from_tensors(
        profile: DatasetProfile,
        dims: ModelDims,
        tensors: Vec<Tensor<F>>,
    ) -> Result<Self> {
        profile.validate()?;
        let expected = shapes(&profile, &dims);
        if expected.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(tensors.len());
        for ((name, shape), t) in expected.into_iter().zip(tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.push(Parameter::new(name, t));
        }
        Ok(Self {
            slots: Slots::layout(&profile),
            sent_bn: BatchNormStats::new(dims.hidden_dim),
            dims,
            profile,
            params,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    /// Slots lumped into the Frobenius regulariser: weight matrices and
    /// conv kernels, not biases or BN parameters.
    pub fn weight_slots(&self) -> Vec<usize> {
        let s = &self.slots;
        let mut out = vec![s.proj_w];
        out.extend(s.conv.iter().map(|c| c.0));
        out.extend(s.branch.map(|b| b.0));
        out.extend([s.sent_w1, s.sent_w2]);
        out
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
            && self.sent_bn.mean.iter().chain(&self.sent_bn.var).all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> ModelParams<G> {
        ModelParams {
            dims: self.dims,
            profile: self.profile.clone(),
            params: self
                .params
                .iter()
                .map(|p| Parameter::new(p.name.clone(), p.value.cast()))
                .collect(),
            slots: self.slots.clone(),
            sent_bn: BatchNormStats {
                mean: self.sent_bn.mean.iter().map(|v| G::lit(v.f64())).collect(),
                var: self.sent_bn.var.iter().map(|v| G::lit(v.f64())).collect(),
            },
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>) -> BoundParams {
        BoundParams(
            self.params
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(i, p))
                .collect(),
        )
    }

    /// Records the moment encoder for one video's `clip_dim × l` features
    /// and returns its `M × d` embedding node.
    pub fn encode_moments_on(
        &self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        clips: &Tensor<F>,
    ) -> Result<Var> {
        let (c, l) = clips.dims2("encode_moments")?;
        if c != self.dims.clip_dim || l != self.profile.input_clips {
            return Err(Error::Config(format!(
                "clip features are {c}×{l}, model expects {}×{}",
                self.dims.clip_dim, self.profile.input_clips
            )));
        }
        let v = &bound.0;
        let s = &self.slots;
        let x = tape.input(clips.transpose2()?);
        let projected = tape.linear(x, v[s.proj_w], v[s.proj_b])?;
        let channels = tape.transpose(projected)?;
        let mut h = tape.maxpool1d(channels, self.profile.pool_window, self.profile.pool_stride)?;

        let mut outputs = Vec::with_capacity(self.profile.layers.len());
        for (layer, &(w, b)) in self.profile.layers.iter().zip(&s.conv) {
            let conv = tape.conv1d(h, v[w], v[b], layer.stride)?;
            h = tape.relu(conv);
            outputs.push(h);
        }
        let mut pieces: Vec<Var> = self.profile.used_layers.iter().map(|&k| outputs[k]).collect();
        if let (Some(branch), Some((w, b))) = (self.profile.branch, s.branch) {
            let conv = tape.conv1d(outputs[branch.source_layer], v[w], v[b], branch.stride)?;
            pieces.push(tape.relu(conv));
        }
        let columns = tape.concat(&pieces, 1)?;
        tape.transpose(columns)
    }

    /// Records `W₂·BN(ReLU(W₁ŝ + b₁)) + b₂` for a `B × sent_dim` batch.
    pub fn encode_sentences_on(
        &mut self,
        tape: &mut Tape<F>,
        bound: &BoundParams,
        sentences: Var,
        mode: Mode,
    ) -> Result<Var> {
        let (_, c) = tape.value(sentences).dims2("encode_sentence")?;
        if c != self.dims.sent_dim {
            return Err(Error::Config(format!(
                "sentence features have {c} dims, model expects {}",
                self.dims.sent_dim
            )));
        }
        let v = &bound.0;
        let s = &self.slots;
        let hidden = tape.linear(sentences, v[s.sent_w1], v[s.sent_b1])?;
        let hidden = tape.relu(hidden);
        let normed = tape.batchnorm(hidden, v[s.bn_gamma], v[s.bn_beta], mode, &mut self.sent_bn)?;
        tape.linear(normed, v[s.sent_w2], v[s.sent_b2])
    }

    /// Regulariser `Σ ‖W‖²_F` over [`ModelParams::weight_slots`].
    pub fn weight_norm_on(&self, tape: &mut Tape<F>, bound: &BoundParams) -> Result<Var> {
        let mut total: Option<Var> = None;
        for slot in self.weight_slots() {
            let sq = tape.sum_squares(bound.0[slot]);
            total = Some(match total {
                Some(t) => tape.add(t, sq)?,
                None => sq,
            });
        }
        Ok(total.expect("model always has weights"))
    }

    pub fn weight_norm(&self) -> F {
        self.weight_slots()
            .into_iter()
            .map(|s| self.params[s].value.sum_squares())
            .sum()
    }
}

impl<F> ParamSet<F> for ModelParams<F> {
    fn params(&self) -> &[Parameter<F>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Parameter<F>] {
        &mut self.params
    }
}

/// One forward pass of the moment encoder.
pub fn encode_moments<F: Real>(
    clips: &Tensor<F>,
    params: &ModelParams<F>,
) -> Result<MomentEmbeddings<F>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = params.encode_moments_on(&mut tape, &bound, clips)?;
    Ok(MomentEmbeddings(tape.value(out).clone()))
}

/// Sentence embeddings for a `B × sent_dim` batch. Train mode updates the
/// BN running statistics.
pub fn encode_sentence<F: Real>(
    sentences: &Tensor<F>,
    params: &mut ModelParams<F>,
    mode: Mode,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.input(sentences.clone());
    let out = params.encode_sentences_on(&mut tape, &bound, x, mode)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::enumerate_candidates;
    use rand_distr::StandardNormal;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn small() -> ModelParams<f64> {
        init_params(3, &DatasetProfile::didemo(), ModelDims::new(8, 6, 12)).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = small();
        let b = small();
        assert_eq!(a, b);
        for p in a.params() {
            if p.name.ends_with(".b") || p.name.ends_with(".b1") || p.name.ends_with(".b2") {
                assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
            }
        }
        let limit = (6.0f64 / (8 + 12) as f64).sqrt();
        assert!(a.params()[0].value.data().iter().all(|v| v.abs() < limit));
    }

    #[test]
    fn zero_input_gives_zero_embeddings() {
        let p = small();
        let out = encode_moments(&Tensor::zeros(&[8, 12]), &p).unwrap();
        assert_eq!(out.rows(), 21);
        assert!(out.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_input_gives_finite_embeddings_per_profile() {
        for profile in [DatasetProfile::didemo(), DatasetProfile::charades()] {
            let p: ModelParams<f64> = init_params(1, &profile, ModelDims::new(4, 4, 8)).unwrap();
            let clips = random(&[4, profile.input_clips], 9);
            let out = encode_moments(&clips, &p).unwrap();
            assert_eq!(out.rows(), profile.candidate_count);
            assert_eq!(out.0.shape()[1], 8);
            assert!(out.0.all_finite());
        }
    }

    #[test]
    fn wrong_clip_dims_is_config_error() {
        let p = small();
        assert!(matches!(
            encode_moments(&Tensor::zeros(&[7, 12]), &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn sentence_constant_path() {
        let mut p = small();
        let (w1, b1, beta, w2, b2) = (
            p.slots.sent_w1,
            p.slots.sent_b1,
            p.slots.bn_beta,
            p.slots.sent_w2,
            p.slots.sent_b2,
        );
        let params = p.params_mut();
        params[w1].value.data_mut().fill(0.0);
        params[b1].value.data_mut().fill(0.0);
        params[beta].value.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = i as f64 * 0.1);
        let beta0 = params[beta].value.clone();
        let w2v = params[w2].value.clone();
        params[b2].value.data_mut().fill(0.5);
        let out = encode_sentence(&random(&[3, 6], 4), &mut p, Mode::Train).unwrap();
        assert_eq!(out.shape(), &[3, 12]);
        for r in 0..3 {
            for j in 0..12 {
                let want: f64 = (0..12).map(|i| beta0.data()[i] * w2v.get2(i, j)).sum::<f64>() + 0.5;
                assert!((out.get2(r, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sentence_train_mode_needs_two_rows() {
        let mut p = small();
        let r = encode_sentence(&random(&[1, 6], 1), &mut p, Mode::Train);
        assert!(matches!(r, Err(Error::BatchSize { got: 1, .. })));
    }

    #[test]
    fn infer_rows_are_independent() {
        let mut p = small();
        let _ = encode_sentence(&random(&[5, 6], 2), &mut p, Mode::Train).unwrap();
        let batch = random(&[4, 6], 8);
        let all = encode_sentence(&batch, &mut p, Mode::Infer).unwrap();
        for r in 0..4 {
            let one = Tensor::new(vec![1, 6], batch.row(r).to_vec()).unwrap();
            let single = encode_sentence(&one, &mut p, Mode::Infer).unwrap();
            for (a, b) in single.data().iter().zip(all.row(r)) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rows_follow_receptive_fields() {
        let p = small();
        let set = enumerate_candidates(&p.profile).unwrap();
        let clips = random(&[8, 12], 5);
        let base = encode_moments(&clips, &p).unwrap();
        for unit in 0..6u32 {
            let mut perturbed = clips.clone();
            for c in 0..8 {
                for clip in [2 * unit as usize, 2 * unit as usize + 1] {
                    perturbed.data_mut()[c * 12 + clip] += 3.0;
                }
            }
            let out = encode_moments(&perturbed, &p).unwrap();
            for (i, cand) in set.candidates.iter().enumerate() {
                if !cand.span.contains_unit(unit) {
                    assert_eq!(out.0.row(i), base.0.row(i), "row {i} changed for unit {unit}");
                }
            }
        }
    }

    #[test]
    fn permuting_videos_permutes_embeddings() {
        let p = small();
        let a = random(&[8, 12], 10);
        let b = random(&[8, 12], 11);
        let ea = encode_moments(&a, &p).unwrap();
        let eb = encode_moments(&b, &p).unwrap();
        assert_eq!(encode_moments(&b, &p).unwrap(), eb);
        assert_eq!(encode_moments(&a, &p).unwrap(), ea);
        assert_eq!(encode_moments(&a.clone(), &p).unwrap(), ea);
    }
}
