use fae_core::alignment::{Aligner, AlignerConfig};
use fae_core::encoder::{Classifier, ClassifierConfig, Image};
use fae_core::explainer::{ContextScale, DecodeMode, Explainer, ExplainerConfig, Vocabulary};
use fae_core::training::{load_checkpoint, save_checkpoint, Checkpoint, ExplainerBundle, CHECKPOINT_VERSION};
use fae_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn image(seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::new(32, 32, (0..32 * 32 * 3).map(|_| rng.gen::<f32>()).collect()).unwrap()
}

fn checkpoint(with_explainer: bool) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let classifier = Classifier::new(ClassifierConfig::reference(4), &mut rng);
    let vocabulary = Vocabulary::from_captions(["this object has a red square", "a blue bar"]);
    let explainer = with_explainer.then(|| {
        let config = ExplainerConfig {
            vocab_size: vocabulary.len(),
            embed_dim: 8,
            hidden_dim: 12,
            att_dim: 6,
            feature_dim: 64,
            locations: 16,
            context_scale: ContextScale::PerPaper,
            max_len: 9,
        };
        let aligner = AlignerConfig {
            vocab_size: vocabulary.len(),
            embed_dim: 8,
            hidden_dim: 12,
        };
        ExplainerBundle {
            explainer: Explainer::new(config, &mut rng).unwrap(),
            aligner: Aligner::new(aligner, &mut rng).unwrap(),
            vocabulary,
        }
    });
    Checkpoint {
        classifier,
        explainer,
        config: serde_json::json!({"seed": 7, "note": "test"}),
    }
}

fn format_error(bytes: &[u8]) -> bool {
    matches!(Checkpoint::<f32>::from_bytes(bytes), Err(Error::Format(_)))
}

#[test]
fn roundtrip_is_bit_exact() {
    for with_explainer in [false, true] {
        let ck = checkpoint(with_explainer);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.config, ck.config);
        for ((n, x), (m, y)) in back.classifier.params.iter().zip(ck.classifier.params.iter()) {
            assert_eq!(n, m);
            assert_eq!(x.shape(), y.shape());
            assert!(x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(back.explainer.is_some(), with_explainer);
    }
}

#[test]
fn generation_after_load_is_token_identical() {
    let ck = checkpoint(true);
    let back = Checkpoint::<f32>::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    let (a, b) = (ck.explainer.as_ref().unwrap(), back.explainer.as_ref().unwrap());
    assert_eq!(a.vocabulary, b.vocabulary);
    for seed in 0..4 {
        let img = image(seed);
        let fa = ck.classifier.classify_batch(&[&img]).unwrap().remove(0).1;
        let fb = back.classifier.classify_batch(&[&img]).unwrap().remove(0).1;
        assert_eq!(fa.data, fb.data);
        for mode in [DecodeMode::Greedy, DecodeMode::Beam(3)] {
            let ra = a.explainer.generate(&fa, mode).unwrap();
            let rb = b.explainer.generate(&fb, mode).unwrap();
            assert_eq!(ra, rb);
        }
    }
}

#[test]
fn files_are_byte_identical_across_saves() {
    let dir = tempfile::tempdir().unwrap();
    let ck = checkpoint(true);
    let (p, q) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&ck, &p).unwrap();
    let loaded: Checkpoint = load_checkpoint(&p).unwrap();
    save_checkpoint(&loaded, &q).unwrap();
    assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&q).unwrap());
    assert!(matches!(load_checkpoint::<f32>(&dir.path().join("missing")), Err(Error::Path { .. })));
}

#[test]
fn truncation_is_a_format_error() {
    let bytes = checkpoint(true).to_bytes().unwrap();
    for cut in [0, 7, 8, 12, 19, 20, 100, bytes.len() / 2, bytes.len() - 4, bytes.len() - 1] {
        assert!(format_error(&bytes[..cut]), "cut at {cut}");
    }
    let mut longer = bytes.clone();
    longer.extend_from_slice(&[0; 4]);
    assert!(format_error(&longer));
}

#[test]
fn wrong_magic_or_version_is_rejected() {
    let bytes = checkpoint(false).to_bytes().unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(format_error(&bad));
    let mut newer = bytes.clone();
    newer[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    match Checkpoint::<f32>::from_bytes(&newer) {
        Err(Error::Format(msg)) => assert!(msg.contains("version")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn tampered_header_is_rejected() {
    let bytes = checkpoint(true).to_bytes().unwrap();
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + header_len]).unwrap();
    let blob = &bytes[20 + header_len..];
    let rebuild = |h: &serde_json::Value| {
        let h = serde_json::to_vec(h).unwrap();
        let mut out = bytes[..12].to_vec();
        out.extend_from_slice(&(h.len() as u64).to_le_bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(blob);
        out
    };
    assert!(!format_error(&rebuild(&header)));

    let mut h = header.clone();
    h["manifest"][1]["offset"] = serde_json::json!(4);
    assert!(format_error(&rebuild(&h)));

    let mut h = header.clone();
    h["manifest"][0]["name"] = serde_json::json!("classifier.unknown");
    assert!(format_error(&rebuild(&h)));

    let mut h = header.clone();
    h["manifest"][0]["name"] = serde_json::json!("decoder.weight");
    assert!(format_error(&rebuild(&h)));

    let mut h = header.clone();
    h["vocabulary"] = serde_json::Value::Null;
    assert!(format_error(&rebuild(&h)));

    let mut h = header.clone();
    h["extra"] = serde_json::json!(1);
    assert!(format_error(&rebuild(&h)));

    let mut h = header;
    h["explainer"]["vocab_size"] = serde_json::json!(99);
    assert!(format_error(&rebuild(&h)));
}
