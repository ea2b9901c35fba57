use hman::synthdata::{
    decode_features, encode_features, generate_with_concepts, read_features, write_features,
    SpanSource, Split,
};
use hman::*;
use nalgebra::DMatrix;

fn probe_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_videos: 60,
        sentences_per_video: 2,
        sent_dim: 24,
        concept_dim: 4,
        noise_sigma: 0.0,
        span_source: SpanSource::Grid,
        seed,
        ..SyntheticSpec::default()
    }
}

#[test]
fn noiseless_sentences_linearly_encode_their_concepts() {
    let (corpus, planted) = generate_with_concepts(&probe_spec(2)).unwrap();
    let p = planted.global[0].len();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (v, video) in corpus.videos.iter().enumerate() {
        for (j, a) in video.annotations.iter().enumerate() {
            xs.extend(a.feature.iter().map(|&f| f as f64));
            ys.extend(planted.global[v].iter().chain(&planted.local[v][j]).copied());
        }
    }
    let n = ys.len() / (2 * p);
    let x = DMatrix::from_row_slice(n, corpus.sent_dim, &xs);
    let y = DMatrix::from_row_slice(n, 2 * p, &ys);
    let w = x.clone().svd(true, true).solve(&y, 1e-12).unwrap();
    let residual = (&x * &w - &y).norm() / y.norm();
    assert!(residual < 1e-6, "relative residual {residual}");
}

#[test]
fn generation_is_deterministic_per_seed() {
    let a = encode_features(&generate_corpus(&probe_spec(5)).unwrap()).unwrap();
    let b = encode_features(&generate_corpus(&probe_spec(5)).unwrap()).unwrap();
    let c = encode_features(&generate_corpus(&probe_spec(6)).unwrap()).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn feature_file_roundtrip() {
    let corpus = generate_corpus(&SyntheticSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("feat.hmf");
    write_features(&path, &corpus).unwrap();
    let back = read_features(&path).unwrap();
    assert_eq!(back, corpus);
    assert_eq!(encode_features(&back).unwrap(), std::fs::read(&path).unwrap());
}

#[test]
fn truncated_or_corrupt_files_are_format_errors() {
    let bytes = encode_features(&generate_corpus(&probe_spec(1)).unwrap()).unwrap();
    for cut in [0, 3, 9, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(decode_features(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_features(&bad), Err(Error::Format { .. })));
}

#[test]
fn default_corpus_shape() {
    let c = generate_corpus(&SyntheticSpec::default()).unwrap();
    assert_eq!(c.videos.len(), 40);
    assert_eq!(c.pair_count(), 80);
    assert_eq!(c.with_split(Split::Test).videos.len(), 8);
    for v in &c.videos {
        for a in &v.annotations {
            for s in &a.spans {
                assert!(s.end_unit as usize <= 6 && s.start_unit < s.end_unit);
            }
        }
    }
}
