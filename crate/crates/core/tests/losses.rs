use ndarray::{arr2, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spkanon::losses::*;
use spkanon::Error;
use spkanon_autograd::{Tape, Var};

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|r| r.to_vec()).collect()
}

// Plain-loop reference formulas used as oracles below.
fn ref_angular(z: &Array2<f64>, zt: &Array2<f64>) -> f64 {
    let (a, b) = (rows(z), rows(zt));
    a.iter().zip(&b).map(|(x, y)| cos(x, y)).sum::<f64>() / a.len() as f64
}

fn ref_perceptual(pairs: &[(Array2<f64>, Array2<f64>)]) -> f64 {
    let mut sum = 0.0;
    let mut frames = 0;
    for (f, ft) in pairs {
        for (x, y) in rows(f).iter().zip(&rows(ft)) {
            sum += cos(x, y);
            frames += 1;
        }
    }
    -sum / frames as f64
}

fn ref_batch_mean(zt: &Array2<f64>) -> f64 {
    let r = rows(zt);
    let d = r[0].len();
    let mu: Vec<f64> = (0..d).map(|j| r.iter().map(|v| v[j]).sum::<f64>() / r.len() as f64).collect();
    -r.iter().map(|v| cos(v, &mu)).sum::<f64>() / r.len() as f64
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// Central differences of `f` around `x`.
fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let h = 1e-6;
    let mut g = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp.as_slice_mut().unwrap()[idx] += h;
        xm.as_slice_mut().unwrap()[idx] -= h;
        g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
    }
    g
}

fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let diff = (a - b).mapv(|v| v * v).sum().sqrt();
    let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt()).max(1e-12);
    diff / scale
}

#[test]
fn angular_hand_examples() {
    let tape = Tape::<f64>::new();
    let z = tape.constant(arr2(&[[1.0, 0.0], [1.0, 0.0]]));
    let zt = tape.constant(arr2(&[[0.0, 1.0], [1.0, 0.0]]));
    assert!((angular_loss(z, zt).unwrap().item() - 0.5).abs() < 1e-12);
    let r = tape.constant(arr2(&[[0.3, -2.0, 1.0]]));
    assert!((angular_loss(r, r).unwrap().item() - 1.0).abs() < 1e-12);
    assert!((angular_loss(r, r.neg()).unwrap().item() + 1.0).abs() < 1e-12);
}

#[test]
fn perceptual_pools_frames_across_utterances() {
    let tape = Tape::<f64>::new();
    let one = tape.constant(arr2(&[[1.0, 0.0]]));
    // cos 60° = 0.5 for all three frames.
    let s = 3f64.sqrt() / 2.0;
    let a = tape.constant(arr2(&[[1.0, 0.0], [0.0, 1.0], [2.0, 0.0]]));
    let b = tape.constant(arr2(&[[0.5, s], [s, 0.5], [0.5, -s]]));
    let loss = perceptual_loss(&[(one, one), (a, b)]).unwrap().item();
    assert!((loss + 0.625).abs() < 1e-12, "{loss}");

    let x = tape.constant(arr2(&[[1.0, 0.0], [0.0, 2.0]]));
    let y = tape.constant(arr2(&[[0.0, 3.0], [1.0, 0.0]]));
    assert!(perceptual_loss(&[(x, y)]).unwrap().item().abs() < 1e-12);
    assert!((perceptual_loss(&[(x, x)]).unwrap().item() + 1.0).abs() < 1e-12);
}

#[test]
fn batch_mean_hand_examples() {
    let tape = Tape::<f64>::new();
    let ortho = tape.constant(arr2(&[[2.0, 0.0], [0.0, 2.0]]));
    let (loss, mu) = batch_mean_loss(ortho).unwrap();
    assert!((loss.item() + std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-4);
    assert_eq!(mu, vec![1.0, 1.0]);

    let same = tape.constant(arr2(&[[0.2, 0.5, -1.0], [0.2, 0.5, -1.0], [0.2, 0.5, -1.0]]));
    assert!((batch_mean_loss(same).unwrap().0.item() + 1.0).abs() < 1e-12);

    let single = tape.constant(arr2(&[[0.7, -0.1]]));
    assert!((batch_mean_loss(single).unwrap().0.item() + 1.0).abs() < 1e-12);

    let antipodal = tape.constant(arr2(&[[1.0, 2.0], [-1.0, -2.0]]));
    assert!(matches!(batch_mean_loss(antipodal), Err(Error::DegeneratePseudoSpeaker(_))));
}

#[test]
fn zero_norm_inputs_are_rejected() {
    let tape = Tape::<f64>::new();
    let z = tape.constant(arr2(&[[1.0, 0.0], [0.0, 0.0]]));
    let ok = tape.constant(arr2(&[[1.0, 0.0], [1.0, 0.0]]));
    assert!(matches!(angular_loss(ok, z), Err(Error::ZeroNorm(_))));
    assert!(matches!(perceptual_loss(&[(ok, z)]), Err(Error::ZeroNorm(_))));
    let short = tape.constant(arr2(&[[1.0, 0.0]]));
    assert!(matches!(perceptual_loss(&[(ok, short)]), Err(Error::Shape(_))));
}

#[test]
fn total_is_weighted_sum_of_components() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::<f64>::new();
    let f = random(&mut rng, 5, 6);
    let ft = random(&mut rng, 5, 6);
    let z = random(&mut rng, 4, 8);
    let zt = random(&mut rng, 4, 8);
    let inputs = LossInputs {
        features: vec![(tape.constant(f.clone()), tape.constant(ft.clone()))],
        original_embeddings: tape.constant(z.clone()),
        adversarial_embeddings: tape.constant(zt.clone()),
    };
    for w in [LossWeights::default(), LossWeights::without_batch_mean(), LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0 }] {
        let (total, b) = total_loss(&inputs, &w).unwrap();
        let p = ref_perceptual(&[(f.clone(), ft.clone())]);
        let a = ref_angular(&z, &zt);
        let m = ref_batch_mean(&zt);
        assert!((b.perceptual - p).abs() < 1e-12);
        assert!((b.angular - a).abs() < 1e-12);
        assert!((b.batch_mean - m).abs() < 1e-12);
        assert!((b.total - (w.alpha * p + w.beta * a + w.gamma * m)).abs() < 1e-12);
        assert_eq!(total.item(), b.total);
        assert_eq!(b.k, 4);
        for v in [b.perceptual, b.angular, b.batch_mean, b.total] {
            assert!((-1.0..=1.0).contains(&v));
        }
    }
    let (_, b) = total_loss(&inputs, &LossWeights { alpha: 1.0, beta: 0.0, gamma: 0.0 }).unwrap();
    assert_eq!(b.total, b.perceptual);
    assert!(total_loss(&inputs, &LossWeights { alpha: 0.5, beta: 0.5, gamma: 0.5 }).is_err());
}

#[test]
fn components_are_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = random(&mut rng, 3, 5);
    let ft = random(&mut rng, 3, 5);
    let z = random(&mut rng, 4, 7);
    let zt = random(&mut rng, 4, 7);
    let eval = |f: &Array2<f64>, ft: &Array2<f64>, z: &Array2<f64>, zt: &Array2<f64>| {
        let tape = Tape::<f64>::new();
        let inputs = LossInputs {
            features: vec![(tape.constant(f.clone()), tape.constant(ft.clone()))],
            original_embeddings: tape.constant(z.clone()),
            adversarial_embeddings: tape.constant(zt.clone()),
        };
        total_loss(&inputs, &LossWeights::default()).unwrap().1
    };
    let base = eval(&f, &ft, &z, &zt);
    let mut scaled_zt = zt.clone();
    scaled_zt.row_mut(2).mapv_inplace(|v| v * 37.5);
    let mut scaled_ft = ft.clone();
    scaled_ft.row_mut(0).mapv_inplace(|v| v * 0.003);
    let scaled = eval(&(&f * 4.0), &scaled_ft, &(&z * 1e3), &scaled_zt);
    // Scaling one adversarial row moves the mean, so only the per-pair terms stay put.
    assert!((base.perceptual - scaled.perceptual).abs() < 1e-9);
    assert!((base.angular - scaled.angular).abs() < 1e-9);
    let uniform = eval(&f, &ft, &z, &(&zt * 0.25));
    assert!((base.batch_mean - uniform.batch_mean).abs() < 1e-9);
}

#[test]
fn batch_mean_is_permutation_invariant_and_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let zt = random(&mut rng, 6, 10);
        let mut perm: Vec<usize> = (0..6).collect();
        perm.reverse();
        perm.swap(0, 3);
        let shuffled = Array2::from_shape_fn((6, 10), |(i, j)| zt[[perm[i], j]]);
        let tape = Tape::<f64>::new();
        let a = batch_mean_loss(tape.constant(zt)).unwrap().0.item();
        let b = batch_mean_loss(tape.constant(shuffled)).unwrap().0.item();
        assert!((a - b).abs() < 1e-12);
        assert!(a >= -1.0 && a < -1.0 + 1.0);
    }
    let tape = Tape::<f64>::new();
    let collinear = tape.constant(arr2(&[[1.0, 2.0, 3.0], [2.0, 4.0, 6.0], [0.1, 0.2, 0.3]]));
    assert!((batch_mean_loss(collinear).unwrap().0.item() + 1.0).abs() < 1e-12);
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..5 {
        let k = 2 + trial % 3;
        let d = 4 + 3 * trial;
        assert!(d <= 16);
        let z = random(&mut rng, k, d);
        let zt = random(&mut rng, k, d);
        let f1 = random(&mut rng, 3, d);
        let f2 = random(&mut rng, 2, d);
        let ft1 = random(&mut rng, 3, d);
        let ft2 = random(&mut rng, 2, d);

        let tape = Tape::<f64>::new();
        let zv = tape.constant(z.clone());
        let ztv = tape.leaf(zt.clone());
        let (f1v, f2v) = (tape.constant(f1.clone()), tape.constant(f2.clone()));
        let (ft1v, ft2v) = (tape.leaf(ft1.clone()), tape.leaf(ft2.clone()));

        let check = |root: Var<'_, f64>, leaf: Var<'_, f64>, x: &Array2<f64>, f: &dyn Fn(&Array2<f64>) -> f64, what: &str| {
            let grads = tape.backward(root);
            let analytic = grads.get_or_zeros(leaf);
            let numeric = numeric_grad(x, f);
            let err = rel_err(&analytic, &numeric);
            assert!(err < 1e-4, "{what}: relative error {err:e}");
        };

        check(angular_loss(zv, ztv).unwrap(), ztv, &zt, &|x| ref_angular(&z, x), "angular");
        check(batch_mean_loss(ztv).unwrap().0, ztv, &zt, &ref_batch_mean, "batch mean");
        let perceptual = perceptual_loss(&[(f1v, ft1v), (f2v, ft2v)]).unwrap();
        check(perceptual, ft1v, &ft1, &|x| ref_perceptual(&[(f1.clone(), x.clone()), (f2.clone(), ft2.clone())]), "perceptual");
        check(perceptual, ft2v, &ft2, &|x| ref_perceptual(&[(f1.clone(), ft1.clone()), (f2.clone(), x.clone())]), "perceptual");

        let inputs = LossInputs {
            features: vec![(f1v, ft1v), (f2v, ft2v)],
            original_embeddings: zv,
            adversarial_embeddings: ztv,
        };
        let w = LossWeights::default();
        let (total, _) = total_loss(&inputs, &w).unwrap();
        let total_ref = |x: &Array2<f64>| {
            w.alpha * ref_perceptual(&[(f1.clone(), ft1.clone()), (f2.clone(), ft2.clone())])
                + w.beta * ref_angular(&z, x)
                + w.gamma * ref_batch_mean(x)
        };
        check(total, ztv, &zt, &total_ref, "total");
        // The originals are constants, so no gradient reaches them.
        assert!(tape.backward(total).get(zv).is_none());
    }
}
