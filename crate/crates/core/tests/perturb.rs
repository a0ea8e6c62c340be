mod common;

use livesketch::joint::{FcDims, FcStack};
use livesketch::perturb::{
    interpolation_sequence, linear_code, objective, perturb, slerp, BackpropConfig, Method, PerturbationRequest, Target,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fc() -> FcStack {
    FcStack::new(
        FcDims {
            vector_dim: 6,
            raster_dim: 5,
            hidden: 10,
            out_dim: 4,
        },
        3,
    )
    .unwrap()
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn request(fc: &FcStack, weights: &[f64], method: Method, seed: u64) -> PerturbationRequest {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let query_v = random(&mut rng, 6);
    let targets = weights
        .iter()
        .map(|_| {
            let v = random(&mut rng, 6);
            Target { s: fc.f_v(&v).unwrap(), v }
        })
        .collect();
    PerturbationRequest {
        query_v,
        targets,
        weights: weights.to_vec(),
        method,
        config: BackpropConfig::default(),
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn linear_matches_the_weighted_offset_sum() {
    let fc = fc();
    let r = request(&fc, &[0.3, 0.9], Method::Linear, 1);
    let got = linear_code(&r).unwrap();
    for i in 0..6 {
        let want = r.query_v[i] + 0.3 * (r.targets[0].v[i] - r.query_v[i]) + 0.9 * (r.targets[1].v[i] - r.query_v[i]);
        assert!((got[i] - want).abs() < 1e-12);
    }
    let full = request(&fc, &[1.0], Method::Linear, 2);
    assert!(dist(&linear_code(&full).unwrap(), &full.targets[0].v) < 1e-12);
}

#[test]
fn slerp_rotates_along_the_great_circle() {
    let h = slerp(&[2.0, 0.0], &[0.0, 2.0], 0.5).unwrap();
    let c = 2.0 * std::f64::consts::FRAC_1_SQRT_2;
    assert!((h[0] - c).abs() < 1e-12 && (h[1] - c).abs() < 1e-12);
    let third = slerp(&[1.0, 0.0], &[0.0, 1.0], 1.0 / 3.0).unwrap();
    let angle = std::f64::consts::FRAC_PI_6;
    assert!((third[0] - angle.cos()).abs() < 1e-12 && (third[1] - angle.sin()).abs() < 1e-12);
    let anti = slerp(&[1.0, 0.0], &[-1.0, 0.0], 0.25).unwrap();
    assert!((anti[0] - 0.5).abs() < 1e-12);
    assert!(slerp(&[0.0, 0.0], &[1.0, 0.0], 0.5).is_err());
}

#[test]
fn objective_matches_a_direct_evaluation() {
    let fc = fc();
    let r = request(&fc, &[0.4, 1.0, 0.0], Method::Backprop, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = random(&mut rng, 6);
    let s = fc.f_v(&v).unwrap();
    let data: f64 = r
        .targets
        .iter()
        .zip(&r.weights)
        .map(|(t, w)| w * dist(&s, &t.s).powi(2))
        .sum::<f64>()
        / 3.0;
    let want = data + 0.1 * dist(&v, &r.query_v);
    assert!((objective(&fc, &r, &v).unwrap() - want).abs() < 1e-12);
}

#[test]
fn backprop_lowers_the_objective_and_the_weighted_distance() {
    let fc = fc();
    let mut moved = 0;
    for seed in 0..10 {
        let r = request(&fc, &[1.0, 0.5], Method::Backprop, seed);
        let out = perturb(&fc, &r).unwrap();
        assert_eq!(out.loss_trace.len(), r.config.steps + 1);
        let best = objective(&fc, &r, &out.new_v).unwrap();
        assert!(out.loss_trace.iter().all(|&l| l >= best - 1e-12));
        // the regulariser has a kink at the query, so the query is already
        // optimal unless the data term's slope there exceeds alpha
        let slope = data_gradient(&fc, &r, &r.query_v).iter().map(|g| g * g).sum::<f64>().sqrt();
        if slope <= r.config.alpha {
            assert_eq!(out.new_v, r.query_v, "seed {seed}");
            continue;
        }
        moved += 1;
        assert!(best < out.loss_trace[0], "seed {seed}");
        let weighted = |f: fn(&livesketch::perturb::TargetDistance) -> f64| -> f64 {
            out.distances.iter().zip(&r.weights).map(|(d, w)| w * f(d).powi(2)).sum()
        };
        assert!(weighted(|d| d.after) < weighted(|d| d.before), "seed {seed}");
        assert!(!out.aborted);
    }
    assert!(moved >= 5, "{moved}");
}

/// Central differences of the weighted data term.
fn data_gradient(fc: &FcStack, r: &PerturbationRequest, v: &[f64]) -> Vec<f64> {
    let data = |v: &[f64]| -> f64 {
        let s = fc.f_v(v).unwrap();
        r.targets.iter().zip(&r.weights).map(|(t, w)| w * dist(&s, &t.s).powi(2)).sum::<f64>() / r.targets.len() as f64
    };
    let h = 1e-6;
    (0..v.len())
        .map(|i| {
            let (mut a, mut b) = (v.to_vec(), v.to_vec());
            a[i] += h;
            b[i] -= h;
            (data(&a) - data(&b)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn zero_weights_leave_the_query_in_place() {
    let fc = fc();
    for method in [Method::Linear, Method::Slerp, Method::Backprop] {
        let r = request(&fc, &[0.0, 0.0, 0.0], method, 5);
        let out = perturb(&fc, &r).unwrap();
        assert!(dist(&out.new_v, &r.query_v) < 1e-3, "{method:?}");
    }
}

#[test]
fn weights_are_clamped_not_renormalised() {
    let fc = fc();
    let mut a = request(&fc, &[1.0, 0.2], Method::Linear, 6);
    let b = linear_code(&a).unwrap();
    a.weights = vec![3.0, 0.2];
    assert_eq!(linear_code(&a).unwrap(), b);
    a.weights = vec![-1.0, 0.2];
    let c = linear_code(&a).unwrap();
    a.weights = vec![0.0, 0.2];
    assert_eq!(linear_code(&a).unwrap(), c);
}

#[test]
fn malformed_requests_are_rejected() {
    let fc = fc();
    let mut r = request(&fc, &[1.0], Method::Backprop, 7);
    r.weights.push(0.5);
    assert!(perturb(&fc, &r).is_err());
    let mut r = request(&fc, &[1.0], Method::Backprop, 7);
    r.weights[0] = f64::NAN;
    assert!(perturb(&fc, &r).is_err());
    let mut r = request(&fc, &[1.0], Method::Backprop, 7);
    r.query_v.push(0.0);
    assert!(perturb(&fc, &r).is_err());
    assert!("warp".parse::<Method>().is_err());
    assert_eq!("slerp".parse::<Method>().unwrap(), Method::Slerp);
}

#[test]
fn morph_starts_at_the_query_and_ends_at_the_suggestion() {
    let config = common::tiny_config(2);
    let (corpus, models) = common::tiny_models(&config);
    let (q, t) = (&corpus.test[0], corpus.test.last().unwrap());
    let request = PerturbationRequest {
        query_v: models.v_e(q).unwrap(),
        targets: vec![Target {
            v: models.v_e(t).unwrap(),
            s: models.s_q(t).unwrap(),
        }],
        weights: vec![1.0],
        method: Method::Linear,
        config: BackpropConfig::default(),
    };
    let frames = interpolation_sequence(&models.vae, &models.fc, &request, 10).unwrap();
    assert_eq!(frames.len(), 10);
    assert_eq!(frames[0].fraction, 0.0);
    assert_eq!(frames[9].fraction, 1.0);
    assert!(dist(&frames[0].v, &request.query_v) < 1e-12);
    assert!(dist(&frames[9].v, &request.targets[0].v) < 1e-12);
    assert!(frames.iter().all(|f| !f.sketch.is_empty()));
}
