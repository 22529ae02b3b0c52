use nalgebra::{Rotation3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use umesh::body::humanoid::default_body;
use umesh::body::{
    forward, pose_offset, prior_losses, scale_offset, skin, skin_jacobian, translation_offset, BodyConfig, BodyParams,
};

fn random_params(rng: &mut ChaCha8Rng) -> BodyParams {
    let mut p = default_body().1.mean_params();
    for v in p.pose.iter_mut() {
        *v += Vector3::from_fn(|_, _| rng.gen_range(-0.4..0.4));
    }
    for s in p.scale.iter_mut() {
        *s = Vector3::from_fn(|_, _| rng.gen_range(0.8..1.25));
    }
    p.translation = Vector3::from_fn(|_, _| rng.gen_range(-0.5..0.5));
    p
}

#[test]
fn jacobian_matches_finite_differences() {
    let (model, _) = default_body();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_params(&mut rng);
    let jac = skin_jacobian(model, &p);
    let x = p.to_vec();
    let np = x.len();
    let nv = model.template.vertex_count();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for q in 0..np {
        let mut xp = x.clone();
        xp[q] += h;
        let mut xm = x.clone();
        xm[q] -= h;
        let yp = forward(model, &BodyParams::from_slice(16, &xp).unwrap()).vertices;
        let ym = forward(model, &BodyParams::from_slice(16, &xm).unwrap()).vertices;
        // Relative error of the whole column.
        let mut num = 0.0;
        let mut den = 0.0;
        for v in 0..nv {
            let fd = (yp[v] - ym[v]) / (2.0 * h);
            for i in 0..3 {
                num += (jac[(v * 3 + i) * np + q] - fd[i]).powi(2);
                den += fd[i].powi(2);
            }
        }
        if den > 0.0 {
            worst = worst.max((num / den).sqrt());
        } else {
            assert_eq!(num, 0.0);
        }
    }
    assert!(worst < 1e-4, "worst relative column error {worst}");
}

#[test]
fn translation_block_is_identity_and_locality_holds() {
    let (model, _) = default_body();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = random_params(&mut rng);
    let jac = skin_jacobian(model, &p);
    let np = 99;
    let tree = &model.tree;
    for v in (0..model.template.vertex_count()).step_by(7) {
        for i in 0..3 {
            for a in 0..3 {
                let want = if i == a { 1.0 } else { 0.0 };
                assert_eq!(jac[(v * 3 + i) * np + translation_offset(16) + a], want);
            }
        }
        for j in 0..16 {
            // No weight on j or any descendant: the joint cannot move v.
            let influenced = tree.weights[v].iter().any(|&(k, w)| w > 0.0 && tree.in_subtree(j, k));
            if !influenced {
                for i in 0..3 {
                    for a in 0..3 {
                        assert_eq!(jac[(v * 3 + i) * np + pose_offset(j) + a], 0.0);
                        assert_eq!(jac[(v * 3 + i) * np + scale_offset(16, j) + a], 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn rest_params_reproduce_template_and_area() {
    let (model, _) = default_body();
    let out = skin(model, &BodyParams::rest(16)).unwrap();
    assert_eq!(out.vertices(), model.template.vertices());
    assert_eq!(out.total_area(), model.template.total_area());
}

#[test]
fn config_round_trip_rebuilds_the_model() {
    let (model, prior) = default_body();
    let cfg = BodyConfig::from_model(model, prior);
    let text = cfg.to_toml();
    let (again, prior2) = BodyConfig::parse(&text).unwrap().build(model.template.clone()).unwrap();
    assert_eq!(again.tree, model.tree);
    assert_eq!(&prior2, prior);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn root_motion_is_equivariant(seed in any::<u64>()) {
        let (model, _) = default_body();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng);
        let r = Rotation3::new(Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)));
        let t = Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
        let base = forward(model, &p).vertices;
        // Compose the rigid motion into the root rotation and translation.
        let root = model.tree.joints[0].rest;
        let r0 = Rotation3::new(p.pose[0]);
        let mut q = p.clone();
        q.pose[0] = (r * r0).scaled_axis();
        q.translation = r * (root.coords + p.translation) + t - root.coords;
        let moved = forward(model, &q).vertices;
        for (a, b) in moved.iter().zip(&base) {
            prop_assert!((a - (r * b + t)).norm() < 1e-12);
        }
    }

    #[test]
    fn prior_losses_match_direct_formula(seed in any::<u64>()) {
        let prior = &default_body().1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_params(&mut rng);
        let l = prior_losses(&p, prior);
        let mut lb = 0.0;
        let mut lt = 0.0;
        for k in 0..16 {
            for a in 0..3 {
                lb += (p.scale[k][a] - prior.beta_star[k][a]).powi(2);
                lt += (p.pose[k][a] - prior.theta_star[k][a]).powi(2);
            }
        }
        prop_assert!((l.beta - lb).abs() < 1e-12 && (l.theta - lt).abs() < 1e-12);
        for a in 0..3 {
            prop_assert_eq!(l.grad_theta[translation_offset(16) + a], 0.0);
        }
    }
}

#[test]
fn shape_prior_unit_offset() {
    let prior = &default_body().1;
    let mut p = prior.mean_params();
    p.scale[5].y += 1.0;
    assert_eq!(prior_losses(&p, prior).beta, 1.0);
}
