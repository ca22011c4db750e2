use proptest::prelude::*;
use vartune::image::Image;
use vartune::workbench::{
    augment, color, decode_checkpoint, encode_checkpoint, generate_synthetic_dataset,
    load_checkpoint, micro_model, save_checkpoint, zoom_center, RunConfig, ShapeClass,
    SyntheticSpec,
};
use vartune::Error;

#[test]
fn model_checkpoints_are_bitwise_and_byte_stable() {
    let dir = tempfile::tempdir().unwrap();
    let model = micro_model(&[1, 2, 3], 2, 9).unwrap();
    let (a, b) = (dir.path().join("a.varp"), dir.path().join("b.varp"));
    save_checkpoint(&a, &model.to_tensors()).unwrap();
    save_checkpoint(&b, &model.clone().to_tensors()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let back = vartune::model::VarModel::from_tensors(load_checkpoint(&a).unwrap()).unwrap();
    for (name, p) in model.params() {
        assert!(back.param(name).unwrap().bit_eq(&p.value), "{name}");
    }
}

#[test]
fn truncated_and_foreign_files_are_rejected() {
    let model = micro_model(&[1, 2], 1, 0).unwrap();
    let bytes = encode_checkpoint(&model.to_tensors());
    for cut in [0, 3, 11, bytes.len() / 2, bytes.len() - 1] {
        assert!(
            matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Corrupt(_))),
            "cut {cut}"
        );
    }
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x40;
    assert!(matches!(
        decode_checkpoint(&flipped),
        Err(Error::Corrupt(_))
    ));
    assert!(matches!(
        decode_checkpoint(b"P6\n1 1\n255\n\0\0\0"),
        Err(Error::Corrupt(_))
    ));
}

#[test]
fn corpus_excludes_the_subject_tuple_and_is_reproducible() {
    let spec = SyntheticSpec {
        samples_per_class: 30,
        ..SyntheticSpec::default()
    };
    let a = generate_synthetic_dataset(&spec).unwrap();
    assert_eq!(a, generate_synthetic_dataset(&spec).unwrap());
    let fill = color(&spec.subject.fill).unwrap();
    for s in &a.generic {
        assert!(!s.prompt.contains(&spec.subject.fill));
        let center = s.image.pixel(16, 16);
        if s.class == spec.subject.class {
            assert_ne!(center, fill);
        }
    }
    assert_eq!(a.subject.len(), spec.subject.count);
    assert!(a.subject.iter().all(|s| s.class == spec.subject.class));
}

fn disk(size: usize, radius: f64) -> Image {
    let mut img = Image::filled(size, size, [1.0; 3]);
    let c = (size as f64 - 1.0) / 2.0;
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            if dx * dx + dy * dy <= radius * radius {
                img.set_pixel(y, x, [1.0, 0.0, 0.0]);
            }
        }
    }
    img
}

#[test]
fn centre_of_a_centred_disk_survives_augmentation() {
    let img = disk(32, 7.0);
    for seed in 0..100 {
        let out = augment(&img, seed, 1.25);
        assert_eq!((out.height(), out.width()), (32, 32));
        for (y, x) in [(15, 15), (15, 16), (16, 15), (16, 16)] {
            assert_eq!(out.pixel(y, x), [1.0, 0.0, 0.0], "seed {seed}");
        }
    }
    assert_eq!(zoom_center(&img, 1.0), img);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn augmentation_keeps_extents_and_range(seed in 0u64..10_000, side in 4usize..24) {
        let data = (0..side * side * 3).map(|i| ((i * 37) % 101) as f64 / 100.0).collect();
        let img = Image::new(side, side, data).unwrap();
        let out = augment(&img, seed, 1.25);
        prop_assert_eq!((out.height(), out.width()), (side, side));
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(augment(&img, seed, 1.25), out);
    }
}

#[test]
fn ppm_round_trip() {
    let spec = SyntheticSpec {
        samples_per_class: 1,
        classes: vec![ShapeClass::Triangle, ShapeClass::Circle],
        ..SyntheticSpec::default()
    };
    let img = &generate_synthetic_dataset(&spec).unwrap().generic[0].image;
    let bytes = img.to_ppm();
    assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
    let back = Image::from_ppm(&bytes).unwrap();
    assert_eq!(back.to_ppm(), bytes);
}

#[test]
fn every_stage_config_round_trips_through_json() {
    let configs = [
        r#"{"stage": "pretrain-tokenizer", "out": "o", "seed": 3}"#,
        r#"{"stage": "pretrain-var", "out": "o", "tokenizer": "t.varp"}"#,
        r#"{"stage": "finetune", "tokenizer": "t", "model": "m", "finetune": {"variant": "ppl", "lora_rank": 4}}"#,
        r#"{"stage": "sample", "tokenizer": "t", "model": "m", "prompt": "a circle", "sampler": {"cfg_scale": 3.0}}"#,
        r#"{"stage": "analyze-weights", "orig": "a", "tuned": "b"}"#,
        r#"{"stage": "analyze-scales", "tokenizer": "t", "images": 25}"#,
        r#"{"stage": "evaluate", "tokenizer": "t", "model": "m", "protocol": {"samples_per_prompt": 4}}"#,
    ];
    for text in configs {
        let c = RunConfig::from_json(text).unwrap();
        let again = RunConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(c, again, "{text}");
    }
    let err = RunConfig::from_json("{\"out\": \"o\", \"stage\": \"sample\"}").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = RunConfig::from_json("{\"stage\": \"finetune\",\n \"tokenizer\": \"t\",\n \"model\": \"m\",\n \"finetune\": {\"lr\": 1}}")
        .unwrap_err();
    assert!(err.to_string().contains("line 4"), "{err}");
}
