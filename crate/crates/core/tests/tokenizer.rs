use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vartune::image::Image;
use vartune::tensor::Extent;
use vartune::tokenizer::{
    dequantize, dequantize_prefix, nearest_entry, quantize_multiscale, quantize_traced,
    AutoencoderConfig, AutoencoderTrainConfig, AutoencoderWeights, Codebook, FeatureMap,
    ScaleSchedule,
};
use vartune::workbench::{generate_synthetic_dataset, SyntheticSpec};

fn random_feature(rng: &mut ChaCha8Rng, extent: Extent, c: usize) -> FeatureMap {
    let data = (0..extent.area() * c)
        .map(|_| rng.random_range(-1.5..1.5))
        .collect();
    FeatureMap::new(extent, c, data).unwrap()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn telescoping_and_prefix_monotonicity_on_fifty_features() {
    let schedule = ScaleSchedule::desk_default();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let codebook = Codebook::random(64, 16, 0.6, &mut rng);
        let f = random_feature(&mut rng, schedule.final_extent(), 16);
        let trace = quantize_traced(&f, &codebook, &schedule).unwrap();
        let mut previous = f64::INFINITY;
        for k in 0..=schedule.len() {
            let prefix = dequantize_prefix(&trace.tokens, &codebook, &schedule, k).unwrap();
            if k < schedule.len() {
                let expected: Vec<f64> = f
                    .data()
                    .iter()
                    .zip(prefix.data())
                    .map(|(a, b)| a - b)
                    .collect();
                let got = trace.residuals[k].data();
                assert!(
                    expected
                        .iter()
                        .zip(got)
                        .all(|(a, b)| a.to_bits() == b.to_bits()),
                    "case {case}: telescoping broke at scale {k}"
                );
            }
            let err = f.mse(&prefix);
            assert!(
                err <= previous,
                "case {case}: prefix {k} error {err} > {previous}"
            );
            previous = err;
        }
    }
}

#[test]
fn full_reconstruction_beats_every_strict_prefix() {
    let schedule = ScaleSchedule::square(&[1, 2, 3, 5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let codebook = Codebook::random(16, 4, 1.0, &mut rng);
        let f = random_feature(&mut rng, schedule.final_extent(), 4);
        let tokens = quantize_multiscale(&f, &codebook, &schedule).unwrap();
        let full = f.mse(&dequantize(&tokens, &codebook, &schedule).unwrap());
        for k in 0..schedule.len() {
            let partial = dequantize_prefix(&tokens, &codebook, &schedule, k).unwrap();
            assert!(full <= f.mse(&partial));
        }
    }
}

#[test]
fn emitted_tokens_are_nearest_neighbours() {
    let schedule = ScaleSchedule::desk_default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let codebook = Codebook::random(32, 8, 1.0, &mut rng);
    let f = random_feature(&mut rng, schedule.final_extent(), 8);
    let trace = quantize_traced(&f, &codebook, &schedule).unwrap();
    for (k, map) in trace.tokens.maps().iter().enumerate() {
        for (i, &t) in map.tokens().iter().enumerate() {
            let v = trace.downsampled[k].cell(i);
            let chosen = sq_dist(codebook.entry(t), v);
            for j in 0..codebook.len() {
                assert!(sq_dist(codebook.entry(j), v) >= chosen);
            }
        }
    }
}

#[test]
fn autoencoder_shapes_follow_the_patch_size() {
    let ae = AutoencoderWeights::init(
        AutoencoderConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();
    let f = ae
        .encode_image(&Image::filled(32, 32, [0.2, 0.4, 0.6]))
        .unwrap();
    assert_eq!(f.extent(), Extent::new(8, 8));
    assert_eq!(f.channels(), 16);
}

#[test]
fn trained_tokenizer_reconstructs_and_uses_its_codebook() {
    let spec = SyntheticSpec {
        samples_per_class: 60,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic_dataset(&spec).unwrap();
    let images = data.generic_images();
    let train = AutoencoderTrainConfig {
        iterations: 500,
        ..AutoencoderTrainConfig::default()
    };
    let (ae, rows) =
        vartune::tokenizer::train_autoencoder(&images, AutoencoderConfig::default(), &train)
            .unwrap();
    let smooth = |r: &[vartune::tokenizer::AutoencoderTrainRow]| {
        r.iter().map(|x| x.loss).sum::<f64>() / r.len() as f64
    };
    assert!(smooth(&rows[rows.len() - 50..]) < smooth(&rows[..50]));

    let mut used = [false; 64];
    let mut mse = 0.0;
    for img in &images {
        let tokens = ae.tokenize(img).unwrap();
        tokens.flat().into_iter().for_each(|t| used[t] = true);
        mse += ae
            .decode_feature(&ae.encode_image(img).unwrap())
            .unwrap()
            .mse(img)
            .unwrap();
        // round trip is deterministic
        assert_eq!(
            ae.detokenize(&tokens).unwrap(),
            ae.reconstruct(img).unwrap()
        );
    }
    let mse = mse / images.len() as f64;
    assert!(mse < 0.01, "autoencoder mse {mse}");
    assert!(used.iter().filter(|&&u| u).count() >= 32);

    let (again, _) =
        vartune::tokenizer::train_autoencoder(&images, AutoencoderConfig::default(), &train)
            .unwrap();
    assert_eq!(again.to_tensors(), ae.to_tensors());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn prefix_error_never_increases(seed in 0u64..10_000, sides in prop::sample::select(vec![
        vec![1usize, 2, 4], vec![1, 3, 4], vec![2, 2, 5], vec![1, 2, 3, 6]
    ])) {
        let schedule = ScaleSchedule::square(&sides).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codebook = Codebook::random(12, 3, 1.0, &mut rng);
        let f = random_feature(&mut rng, schedule.final_extent(), 3);
        let tokens = quantize_multiscale(&f, &codebook, &schedule).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=schedule.len() {
            let e = f.sq_error(&dequantize_prefix(&tokens, &codebook, &schedule, k).unwrap());
            prop_assert!(e <= prev);
            prev = e;
        }
    }

    #[test]
    fn nearest_entry_has_minimal_distance(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let codebook = Codebook::random(10, 4, 1.0, &mut rng);
        let v: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let best = nearest_entry(&codebook, &v);
        let d = sq_dist(codebook.entry(best), &v);
        for j in 0..codebook.len() {
            let dj = sq_dist(codebook.entry(j), &v);
            prop_assert!(dj > d || (dj == d && j >= best));
        }
    }

    #[test]
    fn tokenize_is_deterministic(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ae = AutoencoderWeights::init(AutoencoderConfig::default(), &mut rng).unwrap();
        let data = (0..32 * 32 * 3).map(|_| rng.random::<f64>()).collect();
        let img = Image::new(32, 32, data).unwrap();
        prop_assert_eq!(ae.tokenize(&img).unwrap(), ae.tokenize(&img).unwrap());
    }
}
