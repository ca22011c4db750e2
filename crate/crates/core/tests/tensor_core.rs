use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vartune::tensor::{finite_diff_check, Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Per-row scalar loop, no shared helpers with the library.
fn ce_oracle(logits: &[f64], v: usize, targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &tg) in targets.iter().enumerate() {
        let row = &logits[i * v..(i + 1) * v];
        let mut m = f64::NEG_INFINITY;
        for &x in row {
            if x > m {
                m = x;
            }
        }
        let mut s = 0.0;
        for &x in row {
            s += (x - m).exp();
        }
        total += m + s.ln() - row[tg];
    }
    total / targets.len() as f64
}

#[test]
fn cross_entropy_matches_scalar_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let logits: Vec<f64> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
    let targets = [0, 2, 4];
    let mut tape = Tape::new();
    let l = tape.param(t(&[3, 5], &logits));
    let ce = tape.softmax_cross_entropy(l, &targets).unwrap();
    let expected = ce_oracle(&logits, 5, &targets);
    assert!((tape.value(ce).item() - expected).abs() < 1e-12);
}

#[test]
fn kl_matches_explicit_sum_oracle() {
    let teacher = [0.0, 0.0, 0.0, 0.0];
    let student = [10.0, 0.0, 0.0, 0.0];
    let p = [0.25; 4];
    let z: f64 = student.iter().map(|s: &f64| s.exp()).sum();
    let q: Vec<f64> = student.iter().map(|s| s.exp() / z).collect();
    let expected: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();

    let mut tape = Tape::new();
    let tv = tape.param(t(&[1, 4], &teacher));
    let sv = tape.param(t(&[1, 4], &student));
    let kl = tape.kl_divergence(tv, sv).unwrap();
    assert!((tape.value(kl).item() - expected).abs() < 1e-10);
    let g = tape.backward(kl).unwrap();
    // detached teacher
    assert!(g.get(tv).is_none());
    assert!(g.get(sv).is_some());
}

#[test]
fn composite_matmul_cross_entropy_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Tensor::randn([4, 6], 1.0, &mut rng);
    let w = Tensor::randn([6, 5], 0.5, &mut rng);
    let targets = [1, 4, 0, 3];
    let report = finite_diff_check(&[x, w], 1e-5, None, 0, |p, want| {
        let mut tape = Tape::new();
        let xv = tape.param(p[0].clone());
        let wv = tape.param(p[1].clone());
        let z = tape.matmul(xv, wv)?;
        let loss = tape.softmax_cross_entropy(z, &targets)?;
        let value = tape.value(loss).item();
        if !want {
            return Ok((value, None));
        }
        let mut g = tape.backward(loss)?;
        Ok((value, Some(vec![g.take(xv).unwrap(), g.take(wv).unwrap()])))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn finite_diff_exact_for_quadratics() {
    let a = t(&[3], &[0.5, -1.5, 2.0]);
    let report = finite_diff_check(&[a], 1e-4, None, 0, |p, _| {
        let x = p[0].data();
        let value = x[0] * x[0] + 3.0 * x[1] * x[1] - x[0] * x[2];
        let grad = t(&[3], &[2.0 * x[0] - x[2], 6.0 * x[1], -x[0]]);
        Ok((value, Some(vec![grad])))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-8, "{report:?}");
}

#[test]
fn finite_diff_detects_corrupted_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::randn([3, 4], 1.0, &mut rng);
    let report = finite_diff_check(&[x], 1e-5, None, 0, |p, want| {
        let mut tape = Tape::new();
        let xv = tape.param(p[0].clone());
        let sm = tape.softmax(xv);
        let sq = tape.mul(sm, xv)?;
        let loss = tape.sum(sq);
        let value = tape.value(loss).item();
        if !want {
            return Ok((value, None));
        }
        let mut g = tape.backward(loss)?;
        let mut gx = g.take(xv).unwrap();
        gx.data_mut().iter_mut().for_each(|v| *v *= 1.01);
        Ok((value, Some(vec![gx])))
    })
    .unwrap();
    assert!(report.max_rel_error > 5e-3, "{report:?}");
}

#[test]
fn layer_norm_gelu_resample_gradients() {
    use std::sync::Arc;
    use vartune::tensor::{Extent, ResamplePlan};
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::randn([4, 3], 1.0, &mut rng);
    let gamma = Tensor::randn([3], 1.0, &mut rng);
    let beta = Tensor::randn([3], 1.0, &mut rng);
    let up = Arc::new(ResamplePlan::new(Extent::new(2, 2), Extent::new(3, 5)).unwrap());
    let down = Arc::new(ResamplePlan::new(Extent::new(3, 5), Extent::new(2, 2)).unwrap());
    let w = Tensor::randn([15, 3], 1.0, &mut rng);
    let report = finite_diff_check(&[x, gamma, beta], 1e-5, None, 0, |p, want| {
        let mut tape = Tape::new();
        let vars: Vec<_> = p.iter().map(|t| tape.param(t.clone())).collect();
        let ln = tape.layer_norm(vars[0], vars[1], vars[2])?;
        let g = tape.gelu(ln);
        let u = tape.resample(g, &up)?;
        let wv = tape.constant(w.clone());
        let m = tape.mul(u, wv)?;
        let d = tape.resample(m, &down)?;
        let e = tape.exp(d)?;
        let loss = tape.mean(e);
        let value = tape.value(loss).item();
        if !want {
            return Ok((value, None));
        }
        let mut gr = tape.backward(loss)?;
        Ok((
            value,
            Some(vars.iter().map(|v| gr.take(*v).unwrap()).collect()),
        ))
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

/// Random graph over the supported primitives, built from a list of opcodes.
fn random_graph(tape: &mut Tape, x: vartune::Var, ops: &[u8]) -> vartune::Var {
    let mut cur = x;
    let mut pool = vec![x];
    for &op in ops {
        let other = pool[op as usize % pool.len()];
        cur = match op % 9 {
            0 => tape.add(cur, other).unwrap(),
            1 => tape.mul(cur, other).unwrap(),
            2 => {
                let tr = tape.transpose(other).unwrap();
                let mm = tape.matmul(cur, tr).unwrap(); // [4x4]
                let back = tape.matmul(mm, cur).unwrap(); // [4x4]*[4x3]
                tape.scale(back, 0.3)
            }
            3 => tape.gelu(cur),
            4 => tape.softmax(cur),
            5 => {
                let tr = tape.transpose(cur).unwrap();
                tape.transpose(tr).unwrap()
            }
            6 => tape.sub(cur, other).unwrap(),
            7 => {
                let r = tape.reshape(cur, &[3, 4]).unwrap();
                let r = tape.scale(r, 0.5);
                tape.reshape(r, &[4, 3]).unwrap()
            }
            _ => {
                let g = tape.gather_rows(cur, &[3, 0, 1, 1]).unwrap();
                tape.add(g, other).unwrap()
            }
        };
        pool.push(cur);
    }
    // Random linear readout keeps gradients first-order in every input.
    let mut rng = ChaCha8Rng::seed_from_u64(ops.len() as u64);
    let readout = tape.constant(Tensor::randn([4, 3], 1.0, &mut rng));
    let weighted = tape.mul(cur, readout).unwrap();
    tape.sum(weighted)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_graphs_match_central_differences(
        seed in 0u64..1000,
        ops in proptest::collection::vec(0u8..=255, 1..7),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::randn([4, 3], 0.7, &mut rng);
        let report = finite_diff_check(&[x], 1e-5, None, 0, |p, want| {
            let mut tape = Tape::new();
            let xv = tape.param(p[0].clone());
            let loss = random_graph(&mut tape, xv, &ops);
            let value = tape.value(loss).item();
            if !want {
                return Ok((value, None));
            }
            let mut g = tape.backward(loss)?;
            Ok((value, Some(vec![g.take(xv).unwrap()])))
        }).unwrap();
        prop_assert!(report.max_rel_error < 1e-4, "{:?}", report);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_losses_nonnegative(
        seed in 0u64..1000,
        scale in 0.1f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Tensor::randn([5, 7], scale, &mut rng);
        let b = Tensor::randn([5, 7], scale, &mut rng);
        let targets: Vec<usize> = (0..5).map(|_| rng.random_range(0..7)).collect();
        let mut tape = Tape::new();
        let av = tape.param(a);
        let bv = tape.param(b);
        let sm = tape.softmax(av);
        for r in 0..5 {
            let s: f64 = tape.value(sm).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
        let ce = tape.softmax_cross_entropy(av, &targets).unwrap();
        prop_assert!(tape.value(ce).item() >= 0.0);
        let kl = tape.kl_divergence(av, bv).unwrap();
        prop_assert!(tape.value(kl).item() >= 0.0);
    }

    #[test]
    fn identical_inputs_give_bit_identical_outputs(seed in 0u64..1000) {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::randn([4, 3], 1.0, &mut rng);
            let mut tape = Tape::new();
            let xv = tape.param(x);
            let loss = random_graph(&mut tape, xv, &[2, 3, 4, 1]);
            let v = tape.value(loss).item();
            let g = tape.backward(loss).unwrap();
            (v, g.get(xv).unwrap().clone())
        };
        let (a, ga) = run();
        let (b, gb) = run();
        prop_assert_eq!(a.to_bits(), b.to_bits());
        prop_assert!(ga.bit_eq(&gb));
    }
}
