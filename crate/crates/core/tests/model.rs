use dm2rm::encoders::{embed_text, SyntheticTextEncoder, TextEncoder};
use dm2rm::model::graph::Graph;
use dm2rm::model::{
    build_text_bundle, sare_forward, similarity, spe_forward, ImageFeatures, Matrix, Mlp,
    ModelError, RankerModel, SareWeights, TextFeatureBundle,
};
use dm2rm::{Config, InstructionRecord, ModeToken};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> Config {
    Config {
        text_feat_dim: 12,
        image_feat_dim: 10,
        joint_dim: 8,
        transformer_hidden: 16,
        transformer_layers: 2,
        attention_heads: 4,
        mlp_hidden: 16,
        max_noun_phrases: 3,
        ..Config::tiny()
    }
}

fn instruction(target: &str, receptacle: &str, nps: &[&str]) -> InstructionRecord {
    let mut r = InstructionRecord::new(
        "i",
        format!("Pick up the {target} and put it on the {receptacle}."),
    );
    r.paraphrase = Some(format!("Carry the {target} to the {receptacle}."));
    r.target_phrase = Some(format!("the {target}"));
    r.receptacle_phrase = Some(format!("the {receptacle}"));
    r.noun_phrases = nps.iter().map(|s| s.to_string()).collect();
    r
}

fn provider(config: &Config) -> SyntheticTextEncoder {
    SyntheticTextEncoder::new(
        config.text_feat_dim,
        3,
        config.vocab_size,
        config.max_token_len,
    )
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_bundle(
    rng: &mut ChaCha8Rng,
    d: usize,
    rows: usize,
    populated: usize,
) -> TextFeatureBundle {
    let mut l_np = Matrix::zeros(rows, d);
    for r in 0..populated {
        l_np.row_mut(r).copy_from_slice(&random_vec(rng, d));
    }
    TextFeatureBundle {
        l_txt: random_vec(rng, d),
        l_prime_txt: random_vec(rng, d),
        l_p: random_vec(rng, d),
        l_np,
        np_mask: (0..rows).map(|r| r < populated).collect(),
    }
}

#[test]
fn bundles_differ_only_in_mode_dependent_fields() {
    let config = small_config();
    let p = provider(&config);
    let instr = instruction("mug", "shelf", &["the mug", "the shelf"]);
    let t = build_text_bundle(ModeToken::Target, &instr, &p, &config).unwrap();
    let r = build_text_bundle(ModeToken::Receptacle, &instr, &p, &config).unwrap();
    assert_ne!(t.l_txt, r.l_txt);
    assert_ne!(t.l_p, r.l_p);
    assert_eq!(t.l_prime_txt, r.l_prime_txt);
    assert_eq!(t.l_np, r.l_np);
    let expected: Vec<f64> = embed_text(&p, "<target> Pick up the mug and put it on the shelf.")
        .unwrap()
        .into_iter()
        .map(f64::from)
        .collect();
    assert_eq!(t.l_txt, expected);
}

#[test]
fn bundle_padding_and_truncation() {
    let config = small_config();
    let p = provider(&config);
    let empty =
        build_text_bundle(ModeToken::Target, &instruction("a", "b", &[]), &p, &config).unwrap();
    assert!(empty.np_mask.iter().all(|m| !m));
    assert!(empty.l_np.data().iter().all(|x| *x == 0.0));

    let many = instruction("a", "b", &["n1", "n2", "n3", "n4", "n5"]);
    let b = build_text_bundle(ModeToken::Target, &many, &p, &config).unwrap();
    assert_eq!(b.noun_phrase_count(), 3);
    let third: Vec<f64> = embed_text(&p, "n3")
        .unwrap()
        .into_iter()
        .map(f64::from)
        .collect();
    assert_eq!(b.l_np.row(2), third.as_slice());
}

#[test]
fn missing_phrases_are_a_precondition_error() {
    let config = small_config();
    let p = provider(&config);
    let raw = InstructionRecord::new("i", "Bring the cup.");
    assert!(matches!(
        build_text_bundle(ModeToken::Target, &raw, &p, &config),
        Err(ModelError::Precondition(_))
    ));
}

#[test]
fn ablation_bundles_are_mode_free() {
    let config = Config {
        mode_switching: false,
        ..small_config()
    };
    let p = provider(&config);
    let instr = instruction("mug", "shelf", &["the mug"]);
    let t = build_text_bundle(ModeToken::Target, &instr, &p, &config).unwrap();
    let r = build_text_bundle(ModeToken::Receptacle, &instr, &p, &config).unwrap();
    assert_eq!(t, r);
}

#[test]
fn spe_output_shape_and_determinism() {
    let config = small_config();
    let model = RankerModel::new(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let b = random_bundle(&mut rng, 12, 3, 2);
    let a1 = spe_forward(&model.spe, &b, None).unwrap();
    let a2 = spe_forward(&model.spe, &b, None).unwrap();
    assert_eq!(a1.len(), 8);
    assert_eq!(a1, a2);
    let dropped = spe_forward(&model.spe, &b, Some(&mut rng)).unwrap();
    assert_ne!(a1, dropped);
}

#[test]
fn zero_weights_map_zero_features_to_zero() {
    let config = small_config();
    let mut model = RankerModel::new(&config).unwrap();
    model.spe.fusion = Mlp::zeros(3 * 12 + 16, 16, 8);
    let zero = TextFeatureBundle {
        l_txt: vec![0.0; 12],
        l_prime_txt: vec![0.0; 12],
        l_p: vec![0.0; 12],
        l_np: Matrix::zeros(3, 12),
        np_mask: vec![false; 3],
    };
    assert_eq!(spe_forward(&model.spe, &zero, None).unwrap(), vec![0.0; 8]);

    let sare = SareWeights {
        fusion: Mlp::zeros(20, 16, 8),
        dropout: 0.0,
    };
    assert_eq!(
        sare_forward(&sare, &[0.0; 10], &[0.0; 10]).unwrap(),
        vec![0.0; 8]
    );
}

#[test]
fn sare_is_not_symmetric_in_its_inputs() {
    let model = RankerModel::new(&small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (a, b) = (random_vec(&mut rng, 10), random_vec(&mut rng, 10));
    let ab = sare_forward(&model.sare, &a, &b).unwrap();
    let ba = sare_forward(&model.sare, &b, &a).unwrap();
    assert_eq!(ab.len(), 8);
    assert_ne!(ab, ba);
}

#[test]
fn shape_mismatch_is_a_config_error() {
    let model = RankerModel::new(&small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let wrong = random_bundle(&mut rng, 7, 3, 1);
    assert!(matches!(
        spe_forward(&model.spe, &wrong, None),
        Err(ModelError::Config(_))
    ));
    assert!(matches!(
        sare_forward(&model.sare, &[0.0; 9], &[0.0; 10]),
        Err(ModelError::Config(_))
    ));
}

#[test]
fn similarity_cases() {
    assert!((similarity(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-12);
    assert!((similarity(&[1.0, 2.0], &[3.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
    assert!(matches!(
        similarity(&[0.0, 0.0], &[1.0, 0.0]),
        Err(ModelError::Degenerate(_))
    ));
}

#[test]
fn batched_encoding_matches_single_calls() {
    let model = RankerModel::new(&small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let bundles: Vec<_> = (0..5)
        .map(|i| random_bundle(&mut rng, 12, 3, i % 4))
        .collect();
    let batched = model.encode_texts(&bundles).unwrap();
    for (b, h) in bundles.iter().zip(&batched) {
        let single = spe_forward(&model.spe, b, None).unwrap();
        for (x, y) in single.iter().zip(h) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut model = RankerModel::new(&small_config()).unwrap();
    model.step = 42;
    model.round_to_checkpoint_precision();
    model.save(&path).unwrap();
    let loaded = RankerModel::load(&path).unwrap();
    assert_eq!(loaded, model);
    assert!(RankerModel::load_expecting(&path, &model.config.digest()).is_ok());
    assert!(RankerModel::load_expecting(&path, "0000").is_err());
}

#[test]
fn checkpoint_detects_tampering() {
    let model = RankerModel::new(&small_config()).unwrap();
    let mut bytes = model.to_checkpoint_bytes();
    bytes[12] ^= 1;
    assert!(RankerModel::from_checkpoint_bytes(&bytes).is_err());
    let bytes = model.to_checkpoint_bytes();
    assert!(RankerModel::from_checkpoint_bytes(&bytes[..bytes.len() - 3]).is_err());
}

/// sim(h_txt, h_img) recorded on a fresh graph.
fn scalar_similarity(
    model: &RankerModel,
    bundle: &TextFeatureBundle,
    image: &ImageFeatures,
) -> (f64, dm2rm::model::graph::Gradients) {
    let mut g = Graph::new();
    let t = model.spe.forward_graph(&mut g, &[bundle], None).unwrap();
    let i = model.sare.forward_graph(&mut g, &[image], None).unwrap();
    let t = g.l2_normalize_rows(t);
    let i = g.l2_normalize_rows(i);
    let s = g.matmul_t(t, i);
    let value = g.value(s).get(0, 0);
    let grads = g.backward(s);
    (value, grads)
}

fn perturbed(model: &RankerModel, name: &str, index: usize, delta: f64) -> RankerModel {
    let mut m = model.clone();
    m.visit_mut(&mut |n, t| {
        if n == name {
            t.data_mut()[index] += delta;
        }
    });
    m
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let model = RankerModel::new(&small_config()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let bundle = random_bundle(&mut rng, 12, 3, 2);
    let image = ImageFeatures {
        v_img: random_vec(&mut rng, 10),
        v_sar: random_vec(&mut rng, 10),
    };
    let (_, grads) = scalar_similarity(&model, &bundle, &image);

    let mut tensors = Vec::new();
    model.visit(&mut |name, m| tensors.push((name, m.data().len())));
    assert_eq!(
        grads.len(),
        tensors.len(),
        "every tensor receives a gradient"
    );

    let h = 1e-4;
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (name, len) in &tensors {
        for _ in 0..4 {
            let idx = rng.random_range(0..*len);
            let plus = scalar_similarity(&perturbed(&model, name, idx, h), &bundle, &image).0;
            let minus = scalar_similarity(&perturbed(&model, name, idx, -h), &bundle, &image).0;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = grads[name].data()[idx];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(
                rel < 1e-3,
                "{name}[{idx}]: analytic {analytic}, numeric {numeric}"
            );
            checked += 1;
        }
    }
    assert!(checked >= 100, "checked {checked} coordinates");
    assert!(worst < 1e-3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn masked_zero_rows_do_not_change_output(seed in 0u64..1000, populated in 0usize..3) {
        let model = RankerModel::new(&small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random_bundle(&mut rng, 12, 3, populated);
        let mut padded = base.clone();
        let mut rows: Vec<Vec<f64>> = (0..3).map(|r| base.l_np.row(r).to_vec()).collect();
        rows.push(vec![0.0; 12]);
        padded.l_np = Matrix::from_rows(&rows);
        padded.np_mask.push(false);
        prop_assert_eq!(spe_forward(&model.spe, &base, None).unwrap(), spe_forward(&model.spe, &padded, None).unwrap());
    }

    #[test]
    fn modes_separate_for_distinct_phrases(a in "[a-z]{3,8}", b in "[a-z]{3,8}", seed in 0u64..50) {
        prop_assume!(a != b);
        let config = Config { seed, ..small_config() };
        let p = provider(&config);
        let model = RankerModel::new(&config).unwrap();
        let instr = instruction(&a, &b, &[]);
        let t = build_text_bundle(ModeToken::Target, &instr, &p, &config).unwrap();
        let r = build_text_bundle(ModeToken::Receptacle, &instr, &p, &config).unwrap();
        let ht = spe_forward(&model.spe, &t, None).unwrap();
        let hr = spe_forward(&model.spe, &r, None).unwrap();
        prop_assert!(similarity(&ht, &hr).unwrap() < 1.0 - 1e-6);
    }

    #[test]
    fn similarity_is_symmetric_and_scale_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        alpha in 0.01f64..100.0,
        beta in 0.01f64..100.0,
    ) {
        prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
        let s = similarity(&a, &b).unwrap();
        prop_assert!((s - similarity(&b, &a).unwrap()).abs() < 1e-12);
        let sa: Vec<f64> = a.iter().map(|x| x * alpha).collect();
        let sb: Vec<f64> = b.iter().map(|x| x * beta).collect();
        prop_assert!((s - similarity(&sa, &sb).unwrap()).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&s));
    }
}

#[test]
fn provider_dimension_is_respected() {
    let config = small_config();
    assert_eq!(provider(&config).dim(), 12);
}
