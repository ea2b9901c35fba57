//! Temporal spans, IoU and candidate-moment enumeration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Real, Tensor};

/// Half-open interval `[start_unit, end_unit)` of base units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentSpan {
    pub start_unit: u32,
    pub end_unit: u32,
    pub unit_seconds: f64,
}

impl MomentSpan {
    pub fn new(start_unit: u32, end_unit: u32, unit_seconds: f64) -> Result<Self> {
        if end_unit <= start_unit {
            return Err(Error::Geometry(format!(
                "empty span [{start_unit}, {end_unit})"
            )));
        }
        if !(unit_seconds > 0.0 && unit_seconds.is_finite()) {
            return Err(Error::Geometry(format!("bad unit duration {unit_seconds}")));
        }
        Ok(Self {
            start_unit,
            end_unit,
            unit_seconds,
        })
    }

    pub fn len_units(&self) -> u32 {
        self.end_unit - self.start_unit
    }

    pub fn seconds(&self) -> f64 {
        self.len_units() as f64 * self.unit_seconds
    }

    pub fn start_seconds(&self) -> f64 {
        self.start_unit as f64 * self.unit_seconds
    }

    pub fn end_seconds(&self) -> f64 {
        self.end_unit as f64 * self.unit_seconds
    }

    pub fn contains_unit(&self, u: u32) -> bool {
        self.start_unit <= u && u < self.end_unit
    }

    pub fn same_interval(&self, other: &MomentSpan) -> bool {
        self.start_unit == other.start_unit && self.end_unit == other.end_unit
    }
}

/// Intersection over union of two half-open spans.
pub fn iou(a: &MomentSpan, b: &MomentSpan) -> Result<f64> {
    if (a.unit_seconds - b.unit_seconds).abs() > 1e-9 * a.unit_seconds.max(b.unit_seconds) {
        return Err(Error::Unit(a.unit_seconds, b.unit_seconds));
    }
    let inter = a
        .end_unit
        .min(b.end_unit)
        .saturating_sub(a.start_unit.max(b.start_unit));
    let union = a.len_units() + b.len_units() - inter;
    Ok(inter as f64 / union as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub dim: usize,
    pub kernel: usize,
    pub stride: usize,
}

/// Extra conv applied to the output of `source_layer` whose units are also
/// candidates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub source_layer: usize,
    pub window: usize,
    pub stride: usize,
}

/// Geometry recipe for one family of videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetProfile {
    pub name: String,
    /// Clips fed to the encoder after `fit_length`.
    pub input_clips: usize,
    pub clip_seconds: f64,
    pub pool_window: usize,
    pub pool_stride: usize,
    pub layers: Vec<ConvLayer>,
    /// Indices into `layers` whose units are candidates.
    pub used_layers: Vec<usize>,
    pub branch: Option<Branch>,
    pub candidate_count: usize,
}

fn conv_len(t: usize, k: usize, s: usize) -> Option<usize> {
    (s > 0 && k > 0 && t >= k).then(|| (t - k) / s + 1)
}

impl DatasetProfile {
    /// 12 clips of 2.5 s pooled to 6 five-second units; a stride-1 stack
    /// yields every contiguous run of units (21 moments).
    pub fn didemo() -> Self {
        let mut layers = vec![ConvLayer {
            dim: 6,
            kernel: 1,
            stride: 1,
        }];
        for dim in (1..=5).rev() {
            layers.push(ConvLayer {
                dim,
                kernel: 2,
                stride: 1,
            });
        }
        Self {
            name: "didemo".into(),
            input_clips: 12,
            clip_seconds: 2.5,
            pool_window: 2,
            pool_stride: 2,
            layers,
            used_layers: (0..6).collect(),
            branch: None,
            candidate_count: 21,
        }
    }

    /// 64 one-second clips pooled to 32 two-second units; halving stack,
    /// last five layers used, plus 30 overlapping 3-unit branch moments.
    pub fn charades() -> Self {
        Self {
            name: "charades".into(),
            input_clips: 64,
            clip_seconds: 1.0,
            pool_window: 2,
            pool_stride: 2,
            layers: halving_stack(32),
            used_layers: (1..6).collect(),
            branch: Some(Branch {
                source_layer: 0,
                window: 3,
                stride: 1,
            }),
            candidate_count: 61,
        }
    }

    /// 512 one-second clips, halving stack down to a single unit.
    pub fn activitynet() -> Self {
        Self {
            name: "activitynet".into(),
            input_clips: 512,
            clip_seconds: 1.0,
            pool_window: 1,
            pool_stride: 1,
            layers: halving_stack(512),
            used_layers: (0..10).collect(),
            branch: None,
            candidate_count: 1023,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "didemo" => Some(Self::didemo()),
            "charades" => Some(Self::charades()),
            "activitynet" => Some(Self::activitynet()),
            _ => None,
        }
    }

    /// Pooled temporal length T₀.
    pub fn base_len(&self) -> Result<usize> {
        conv_len(self.input_clips, self.pool_window, self.pool_stride).ok_or_else(|| {
            Error::Geometry(format!(
                "{} clips cannot be pooled with window {} stride {}",
                self.input_clips, self.pool_window, self.pool_stride
            ))
        })
    }

    pub fn unit_seconds(&self) -> f64 {
        self.clip_seconds * self.pool_stride as f64
    }

    pub fn branch_len(&self) -> Result<Option<usize>> {
        let Some(b) = self.branch else {
            return Ok(None);
        };
        let src = self
            .layers
            .get(b.source_layer)
            .ok_or_else(|| Error::Geometry(format!("branch source {} missing", b.source_layer)))?;
        conv_len(src.dim, b.window, b.stride).map(Some).ok_or_else(|| {
            Error::Geometry(format!(
                "branch window {} does not fit layer of length {}",
                b.window, src.dim
            ))
        })
    }

    /// Checks the layer arithmetic and the declared candidate count.
    pub fn validate(&self) -> Result<()> {
        if self.input_clips == 0 || !(self.clip_seconds > 0.0) {
            return Err(Error::Geometry("profile needs clips of positive duration".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::Geometry("profile has no conv layers".into()));
        }
        let mut t = self.base_len()?;
        for (i, layer) in self.layers.iter().enumerate() {
            let next = conv_len(t, layer.kernel, layer.stride);
            if next != Some(layer.dim) {
                return Err(Error::Geometry(format!(
                    "layer {i}: length {t} with kernel {} stride {} gives {next:?}, profile says {}",
                    layer.kernel, layer.stride, layer.dim
                )));
            }
            t = layer.dim;
        }
        let mut seen = vec![false; self.layers.len()];
        for &u in &self.used_layers {
            if u >= self.layers.len() || std::mem::replace(&mut seen[u], true) {
                return Err(Error::Geometry(format!("bad or repeated used layer {u}")));
            }
        }
        let count: usize = self.used_layers.iter().map(|&u| self.layers[u].dim).sum::<usize>()
            + self.branch_len()?.unwrap_or(0);
        if count != self.candidate_count {
            return Err(Error::Geometry(format!(
                "layers yield {count} candidates, profile declares {}",
                self.candidate_count
            )));
        }
        Ok(())
    }
}

fn halving_stack(base: usize) -> Vec<ConvLayer> {
    let mut layers = vec![ConvLayer {
        dim: base,
        kernel: 1,
        stride: 1,
    }];
    let mut dim = base;
    while dim > 1 {
        dim /= 2;
        layers.push(ConvLayer {
            dim,
            kernel: 2,
            stride: 2,
        });
    }
    layers
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Source {
    Layer(usize),
    Branch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub source: Source,
    pub index: usize,
    pub span: MomentSpan,
}

/// Every candidate moment of one video, layer-major then by index.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub base_len: usize,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn spans(&self) -> impl Iterator<Item = &MomentSpan> {
        self.candidates.iter().map(|c| &c.span)
    }

    pub fn find(&self, span: &MomentSpan) -> Option<usize> {
        self.candidates.iter().position(|c| c.span.same_interval(span))
    }
}

/// Unit `i` of a layer whose units sit `jump` base units apart and see
/// `field` base units covers `[i·jump, i·jump + field)`.
#[derive(Clone, Copy)]
struct Field {
    field: usize,
    jump: usize,
}

impl Field {
    fn after(self, kernel: usize, stride: usize) -> Self {
        Field {
            field: self.field + (kernel - 1) * self.jump,
            jump: self.jump * stride,
        }
    }
}

pub fn enumerate_candidates(profile: &DatasetProfile) -> Result<CandidateSet> {
    profile.validate()?;
    let base_len = profile.base_len()?;
    let unit = profile.unit_seconds();
    let mut fields = Vec::with_capacity(profile.layers.len());
    let mut f = Field { field: 1, jump: 1 };
    for layer in &profile.layers {
        f = f.after(layer.kernel, layer.stride);
        fields.push(f);
    }

    let mut candidates = Vec::with_capacity(profile.candidate_count);
    let mut push_layer = |source: Source, dim: usize, f: Field| -> Result<()> {
        for i in 0..dim {
            let start = i * f.jump;
            let end = start + f.field;
            if end > base_len {
                return Err(Error::Geometry(format!(
                    "{source:?} unit {i} spans past base length {base_len}"
                )));
            }
            candidates.push(Candidate {
                source,
                index: i,
                span: MomentSpan::new(start as u32, end as u32, unit)?,
            });
        }
        Ok(())
    };
    for &k in &profile.used_layers {
        push_layer(Source::Layer(k), profile.layers[k].dim, fields[k])?;
    }
    if let (Some(b), Some(n)) = (profile.branch, profile.branch_len()?) {
        push_layer(Source::Branch, n, fields[b.source_layer].after(b.window, b.stride))?;
    }
    Ok(CandidateSet {
        base_len,
        candidates,
    })
}

/// Indices of candidates with IoU ≥ `threshold` against `gt`; `None` when
/// no candidate qualifies.
pub fn positives_for(
    gt: &MomentSpan,
    candidates: &CandidateSet,
    threshold: f64,
) -> Result<Option<Vec<usize>>> {
    positives_for_any(std::slice::from_ref(gt), candidates, threshold)
}

/// Like [`positives_for`] but a candidate qualifies against any of `gts`.
pub fn positives_for_any(
    gts: &[MomentSpan],
    candidates: &CandidateSet,
    threshold: f64,
) -> Result<Option<Vec<usize>>> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Contract(format!(
            "IoU threshold {threshold} outside (0, 1]"
        )));
    }
    let mut out = Vec::new();
    for (i, c) in candidates.candidates.iter().enumerate() {
        for gt in gts {
            if iou(gt, &c.span)? >= threshold {
                out.push(i);
                break;
            }
        }
    }
    Ok((!out.is_empty()).then_some(out))
}

/// Minimum IoU the single best candidate needs when nothing clears the
/// training threshold.
pub const FALLBACK_IOU: f64 = 0.5;

/// Training positives: the thresholded set, or else the single best-IoU
/// candidate if it reaches [`FALLBACK_IOU`]. `None` means skip the sentence.
pub fn training_positives(
    gts: &[MomentSpan],
    candidates: &CandidateSet,
    threshold: f64,
) -> Result<Option<Vec<usize>>> {
    if let Some(p) = positives_for_any(gts, candidates, threshold)? {
        return Ok(Some(p));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.candidates.iter().enumerate() {
        for gt in gts {
            let v = iou(gt, &c.span)?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    Ok(best.filter(|&(_, v)| v >= FALLBACK_IOU).map(|(i, _)| vec![i]))
}

/// Truncates or zero-pads the time axis of `features: C×T_raw` to `l`.
pub fn fit_length<F: Real>(features: &Tensor<F>, l: usize) -> Result<Tensor<F>> {
    let (c, t) = features.dims2("fit_length")?;
    if t == 0 {
        return Err(Error::Contract("fit_length needs at least one clip".into()));
    }
    let mut out = vec![F::zero(); c * l];
    let keep = t.min(l);
    for ch in 0..c {
        out[ch * l..ch * l + keep].copy_from_slice(&features.row(ch)[..keep]);
    }
    Tensor::new(vec![c, l], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn span(s: u32, e: u32) -> MomentSpan {
        MomentSpan::new(s, e, 5.0).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&span(2, 6), &span(2, 6)).unwrap(), 1.0);
        assert_eq!(iou(&span(0, 2), &span(4, 6)).unwrap(), 0.0);
        assert_eq!(iou(&span(0, 4), &span(2, 8)).unwrap(), 0.25);
        let other = MomentSpan::new(0, 4, 2.0).unwrap();
        assert!(matches!(iou(&span(0, 4), &other), Err(Error::Unit(..))));
    }

    #[test]
    fn shipped_profile_counts() {
        assert_eq!(enumerate_candidates(&DatasetProfile::didemo()).unwrap().len(), 21);
        assert_eq!(enumerate_candidates(&DatasetProfile::charades()).unwrap().len(), 61);
        assert_eq!(enumerate_candidates(&DatasetProfile::activitynet()).unwrap().len(), 1023);
    }

    #[test]
    fn didemo_candidates_are_all_subintervals() {
        let set = enumerate_candidates(&DatasetProfile::didemo()).unwrap();
        let mut got: Vec<(u32, u32)> = set.spans().map(|s| (s.start_unit, s.end_unit)).collect();
        got.sort();
        let mut want = Vec::new();
        for s in 0..6 {
            for e in s + 1..=6 {
                want.push((s, e));
            }
        }
        assert_eq!(got, want);
        assert_eq!(set.candidates[0].span.unit_seconds, 5.0);
    }

    #[test]
    fn charades_branch_spans() {
        let set = enumerate_candidates(&DatasetProfile::charades()).unwrap();
        let branch: Vec<_> = set
            .candidates
            .iter()
            .filter(|c| c.source == Source::Branch)
            .collect();
        assert_eq!(branch.len(), 30);
        for (i, c) in branch.iter().enumerate() {
            assert_eq!((c.span.start_unit, c.span.end_unit), (i as u32, i as u32 + 3));
            assert_eq!(c.span.seconds(), 6.0);
            assert_eq!(c.span.start_seconds(), 2.0 * i as f64);
        }
        // layer of dim 16 partitions 32 units into pairs
        let l1: Vec<_> = set.candidates.iter().filter(|c| c.source == Source::Layer(1)).collect();
        assert_eq!(l1.len(), 16);
        assert_eq!((l1[5].span.start_unit, l1[5].span.end_unit), (10, 12));
    }

    #[test]
    fn inconsistent_profile_is_rejected() {
        let mut p = DatasetProfile::didemo();
        p.layers[3].dim = 4;
        assert!(matches!(enumerate_candidates(&p), Err(Error::Geometry(_))));
        let mut p = DatasetProfile::didemo();
        p.candidate_count = 20;
        assert!(p.validate().is_err());
    }

    #[test]
    fn positives_examples() {
        let set = enumerate_candidates(&DatasetProfile::didemo()).unwrap();
        let p = positives_for(&span(0, 1), &set, 1.0).unwrap().unwrap();
        assert_eq!(p.len(), 1);
        assert!(set.candidates[p[0]].span.same_interval(&span(0, 1)));

        // brute force over all 21 candidates
        let gt = span(0, 3);
        let mut want: Vec<(u32, u32)> = Vec::new();
        for c in &set.candidates {
            let s = c.span;
            let inter = s.end_unit.min(3).saturating_sub(s.start_unit) as f64;
            let union = (s.len_units() + 3) as f64 - inter;
            if inter / union >= 0.5 {
                want.push((s.start_unit, s.end_unit));
            }
        }
        want.sort();
        // [0,5) scores 0.6, [0,6) and [1,4) exactly 0.5
        assert_eq!(want, vec![(0, 2), (0, 3), (0, 4), (0, 5), (0, 6), (1, 3), (1, 4)]);
        let mut got: Vec<(u32, u32)> = positives_for(&gt, &set, 0.5)
            .unwrap()
            .unwrap()
            .into_iter()
            .map(|i| (set.candidates[i].span.start_unit, set.candidates[i].span.end_unit))
            .collect();
        got.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn off_grid_threshold_one_is_flagged() {
        let set = enumerate_candidates(&DatasetProfile::charades()).unwrap();
        let gt = MomentSpan::new(1, 4, 2.0).unwrap();
        assert!(set.find(&gt).is_some()); // branch covers [1,4)
        let gt = MomentSpan::new(1, 6, 2.0).unwrap();
        assert_eq!(positives_for(&gt, &set, 1.0).unwrap(), None);
        assert!(positives_for(&gt, &set, 0.0).is_err());
    }

    #[test]
    fn training_positives_fall_back_to_best_candidate() {
        let set = enumerate_candidates(&DatasetProfile::charades()).unwrap();
        // [1,6): best match is a 4-unit layer cell or a 3-unit branch cell
        let gt = MomentSpan::new(1, 6, 2.0).unwrap();
        let p = training_positives(&[gt], &set, 1.0).unwrap().unwrap();
        assert_eq!(p.len(), 1);
        let best = iou(&gt, &set.candidates[p[0]].span).unwrap();
        assert!(best >= 0.5);
        for c in &set.candidates {
            assert!(iou(&gt, &c.span).unwrap() <= best);
        }
    }

    #[test]
    fn fit_length_cases() {
        let x = Tensor::<f32>::new(vec![2, 5], (0..10).map(|v| v as f32 + 1.0).collect()).unwrap();
        let same = fit_length(&x, 5).unwrap();
        assert_eq!(same, x);
        let padded = fit_length(&x, 12).unwrap();
        assert_eq!(padded.shape(), &[2, 12]);
        assert_eq!(&padded.row(0)[..5], x.row(0));
        assert!(padded.row(1)[5..].iter().all(|&v| v == 0.0));
        let cut = fit_length(&x, 3).unwrap();
        assert_eq!(cut.row(1), &[6.0, 7.0, 8.0]);
    }
}
