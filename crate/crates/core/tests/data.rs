use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use dm2rm::data::{
    generate_synthetic, load_dataset, save_dataset, split_dataset, DataError, DatasetBundle,
    SplitRatios, Splits, SyntheticSpec,
};
use dm2rm::encoders::{embed_image, embed_text, SyntheticImageEncoder, SyntheticTextEncoder};
use dm2rm::{FetchCarrySample, ImageRecord, ModeToken};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn fixture_records() -> (Vec<FetchCarrySample>, Vec<ImageRecord>) {
    let mut samples = Vec::new();
    let mut images = Vec::new();
    for e in 0..3 {
        let env = format!("e{e}");
        for k in 0..2 {
            images.push(ImageRecord {
                id: format!("{env}-{k}"),
                environment_id: env.clone(),
                width: 2,
                height: 2,
                path: format!("img/{env}-{k}.ppm"),
                overlay_path: None,
            });
        }
        for s in 0..2 {
            samples.push(FetchCarrySample {
                instruction_id: format!("{env}-s{s}"),
                raw_text: "Move the red cup to the table.".into(),
                target_image_id: format!("{env}-{s}"),
                receptacle_image_id: format!("{env}-{}", 1 - s),
                environment_id: env.clone(),
            });
        }
    }
    (samples, images)
}

fn write_fixture(dir: &Path, splits: &Splits) {
    let (samples, images) = fixture_records();
    let lines = |v: Vec<String>| v.join("\n") + "\n";
    fs::write(
        dir.join("samples.jsonl"),
        lines(
            samples
                .iter()
                .map(|s| serde_json::to_string(s).unwrap())
                .collect(),
        ),
    )
    .unwrap();
    fs::write(
        dir.join("images.jsonl"),
        lines(
            images
                .iter()
                .map(|s| serde_json::to_string(s).unwrap())
                .collect(),
        ),
    )
    .unwrap();
    fs::write(
        dir.join("splits.json"),
        serde_json::to_string(splits).unwrap(),
    )
    .unwrap();
}

fn fixture_splits() -> Splits {
    Splits {
        train: vec![
            "e0-s0".into(),
            "e0-s1".into(),
            "e1-s0".into(),
            "e1-s1".into(),
        ],
        val: vec!["e2-s0".into()],
        test_hm3d: vec!["e2-s1".into()],
        test_mp3d: vec![],
    }
}

#[test]
fn tiny_fixture_loads_with_stats() {
    let dir = tempfile::tempdir().unwrap();
    let mut splits = fixture_splits();
    splits.val = vec!["e2-s0".into(), "e2-s1".into()];
    splits.test_hm3d.clear();
    write_fixture(dir.path(), &splits);
    let bundle = load_dataset(dir.path()).unwrap();
    assert_eq!(bundle.stats.samples, 6);
    assert_eq!(bundle.stats.environments, 3);
    assert_eq!(bundle.stats.images, 6);
    assert_eq!(bundle.stats.vocab_size, 6);
    assert!((bundle.stats.mean_sentence_length - 7.0).abs() < 1e-12);
}

#[test]
fn environment_in_two_splits_is_leakage() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), &fixture_splits());
    match load_dataset(dir.path()) {
        Err(DataError::Leakage { environment, .. }) => assert_eq!(environment, "e2"),
        other => panic!("expected leakage, got {other:?}"),
    }
}

#[test]
fn dangling_ids_are_reported() {
    let (mut samples, images) = fixture_records();
    samples[0].target_image_id = "nope".into();
    match DatasetBundle::new(samples, images, Splits::default()) {
        Err(DataError::Dangling(ids)) => assert_eq!(ids, vec!["nope".to_string()]),
        other => panic!("expected dangling, got {other:?}"),
    }
    let (samples, images) = fixture_records();
    let splits = Splits {
        train: vec!["ghost".into()],
        ..Splits::default()
    };
    assert!(matches!(
        DatasetBundle::new(samples, images, splits),
        Err(DataError::Dangling(_))
    ));
}

#[test]
fn malformed_line_names_file_and_field() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), &Splits::default());
    fs::write(
        dir.path().join("samples.jsonl"),
        "{\"instruction_id\":\"x\"}\n",
    )
    .unwrap();
    match load_dataset(dir.path()) {
        Err(DataError::Parse { file, line, source }) => {
            assert_eq!(file, "samples.jsonl");
            assert_eq!(line, 1);
            assert!(source.to_string().contains("raw_text"), "{source}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
}

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        environments: 10,
        images_per_environment: 8,
        seed,
        ..SyntheticSpec::default()
    }
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn generation_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dataset(&generate_synthetic(&small_spec(7)).unwrap(), a.path()).unwrap();
    save_dataset(&generate_synthetic(&small_spec(7)).unwrap(), b.path()).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), 3 + 80);
    assert_eq!(ta, tb);
}

#[test]
fn save_then_load_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = generate_synthetic(&small_spec(3)).unwrap();
    save_dataset(&bundle, dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(loaded, bundle);
    for record in &bundle.images {
        assert_eq!(
            loaded.load_image(&record.id).unwrap(),
            bundle.load_image(&record.id).unwrap()
        );
    }
}

#[test]
fn generated_samples_have_distinct_targets_and_receptacles() {
    let bundle = generate_synthetic(&small_spec(1)).unwrap();
    assert_eq!(bundle.samples.len(), 80);
    for s in &bundle.samples {
        assert_ne!(s.target_image_id, s.receptacle_image_id);
        assert!(s.raw_text.starts_with("Pick up the "));
    }
    let referenced: BTreeSet<&str> = bundle
        .samples
        .iter()
        .flat_map(|s| [s.target_image_id.as_str(), s.receptacle_image_id.as_str()])
        .collect();
    assert!(
        referenced.len() <= 60,
        "two distractors per environment stay unreferenced"
    );
}

#[test]
fn split_cases() {
    let bundle = generate_synthetic(&small_spec(2)).unwrap();
    let ratios = SplitRatios {
        train: 0.8,
        val: 0.1,
        test_hm3d: 0.1,
        test_mp3d: 0.0,
    };
    let s = split_dataset(&bundle, ratios, 5).unwrap();
    let envs = |ids: &[String]| -> BTreeSet<String> {
        ids.iter()
            .map(|id| id.split('-').next().unwrap().to_string())
            .collect()
    };
    assert_eq!(
        (
            envs(&s.train).len(),
            envs(&s.val).len(),
            envs(&s.test_hm3d).len()
        ),
        (8, 1, 1)
    );
    assert!(s.test_mp3d.is_empty());
    assert_eq!(s, split_dataset(&bundle, ratios, 5).unwrap());

    let two = generate_synthetic(&SyntheticSpec {
        environments: 2,
        split: SplitRatios {
            train: 1.0,
            val: 0.0,
            test_hm3d: 0.0,
            test_mp3d: 0.0,
        },
        ..small_spec(2)
    })
    .unwrap();
    assert!(matches!(
        split_dataset(&two, ratios, 0),
        Err(DataError::Split(_))
    ));
    let bad = SplitRatios {
        train: 0.5,
        ..ratios
    };
    assert!(matches!(
        split_dataset(&bundle, bad, 0),
        Err(DataError::Split(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn environments_never_cross_splits(seed in 0u64..10_000, envs in 4usize..16) {
        let bundle = generate_synthetic(&SyntheticSpec { environments: envs, ..small_spec(seed) }).unwrap();
        let env_of: BTreeMap<&str, &str> = bundle
            .samples
            .iter()
            .map(|s| (s.instruction_id.as_str(), s.environment_id.as_str()))
            .collect();
        let mut owner: BTreeMap<&str, &str> = BTreeMap::new();
        for (name, ids) in bundle.splits.named() {
            for id in ids {
                let env = env_of[id.as_str()];
                prop_assert_eq!(*owner.entry(env).or_insert(name), name);
            }
        }
        prop_assert!(bundle.validate().is_ok());
    }
}

/// Ridge regression from selected-phrase embeddings to target image
/// embeddings, solved in closed form on the training split, then used as a
/// cosine scorer on the held-out splits.
#[test]
fn linear_probe_separates_synthetic_ground_truth() {
    let spec = SyntheticSpec {
        environments: 24,
        ..SyntheticSpec::default()
    };
    let bundle = generate_synthetic(&spec).unwrap();
    let dim = 64;
    let text = SyntheticTextEncoder::new(dim, 11, 4096, 77);
    let image = SyntheticImageEncoder::new(dim, 11);
    let phrase = |s: &FetchCarrySample, mode: ModeToken| {
        let words: Vec<&str> = s
            .raw_text
            .trim_end_matches('.')
            .split_whitespace()
            .collect();
        let word = match mode {
            ModeToken::Target => words[3],
            ModeToken::Receptacle => words[words.len() - 1],
        };
        embed_text(&text, &format!("the {word}")).unwrap()
    };
    let img_vec: BTreeMap<String, Vec<f32>> = bundle
        .images
        .iter()
        .map(|r| {
            (
                r.id.clone(),
                embed_image(&image, &bundle.load_image(&r.id).unwrap()).unwrap(),
            )
        })
        .collect();

    let train = bundle.split_samples("train").unwrap();
    let rows: Vec<(Vec<f32>, &Vec<f32>)> = train
        .iter()
        .flat_map(|s| ModeToken::ALL.map(|m| (phrase(s, m), &img_vec[s.positive_for(m)])))
        .collect();
    let t = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r].0[c] as f64);
    let v = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r].1[c] as f64);
    let gram = t.transpose() * &t + DMatrix::identity(dim, dim) * 1e-3;
    let w = gram
        .cholesky()
        .expect("ridge system is positive definite")
        .solve(&(t.transpose() * &v));

    let cosine = |a: &[f64], b: &[f32]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * *y as f64).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|y| (*y as f64).powi(2)).sum::<f64>().sqrt();
        dot / (na * nb)
    };
    let mut total = 0;
    let mut wins = 0;
    for name in ["val", "test_hm3d", "test_mp3d"] {
        for s in bundle.split_samples(name).unwrap() {
            for m in ModeToken::ALL {
                let p = phrase(s, m);
                let pred: Vec<f64> = (0..dim)
                    .map(|c| (0..dim).map(|k| p[k] as f64 * w[(k, c)]).sum())
                    .collect();
                let gt = cosine(&pred, &img_vec[s.positive_for(m)]);
                let best_other = bundle
                    .environment_images(&s.environment_id)
                    .iter()
                    .filter(|r| r.id != s.positive_for(m))
                    .map(|r| cosine(&pred, &img_vec[&r.id]))
                    .fold(f64::NEG_INFINITY, f64::max);
                total += 1;
                wins += usize::from(gt > best_other);
            }
        }
    }
    let rate = wins as f64 / total as f64;
    assert!(total >= 40, "{total} held-out queries");
    assert!(rate >= 0.95, "probe separates {wins}/{total} = {rate:.3}");
}
