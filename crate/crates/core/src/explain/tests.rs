use super::*;
use crate::bnn::{build_fcbnn, FrameworkMode};
use crate::nncore::{Activation, Mlp};
use crate::rng;

fn random_net(m: usize, k: usize, seed: u64) -> Mlp<f64> {
    Mlp::init(&[m, 6, 5, k], Activation::Tanh, Activation::Identity, &mut rng::seeded(seed))
}

/// Average marginal contribution over every ordering of the players.
fn permutation_shapley(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], b: &[f64]) -> Vec<Vec<f64>> {
    let m = x.len();
    let k = f(x).len();
    let mut phi = vec![vec![0.0; k]; m];
    let mut perm: Vec<usize> = (0..m).collect();
    let mut count = 0usize;
    fn next_permutation(p: &mut [usize]) -> bool {
        let Some(i) = (1..p.len()).rev().find(|&i| p[i - 1] < p[i]) else { return false };
        let j = (i..p.len()).rev().find(|&j| p[j] > p[i - 1]).unwrap();
        p.swap(i - 1, j);
        p[i..].reverse();
        true
    }
    loop {
        let mut z = b.to_vec();
        let mut prev = f(&z);
        for &i in &perm {
            z[i] = x[i];
            let cur = f(&z);
            for c in 0..k {
                phi[i][c] += cur[c] - prev[c];
            }
            prev = cur;
        }
        count += 1;
        if !next_permutation(&mut perm) {
            break;
        }
    }
    phi.iter_mut().flatten().for_each(|v| *v /= count as f64);
    phi
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn kernel_weight_examples() {
    assert!((shapley_kernel_weight(3, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    assert!((shapley_kernel_weight(3, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    for m in 2..=12 {
        for s in 1..m {
            let (a, b) = (shapley_kernel_weight(m, s).unwrap(), shapley_kernel_weight(m, m - s).unwrap());
            assert!(a > 0.0 && (a - b).abs() <= 1e-15 * a);
        }
    }
    assert!(shapley_kernel_weight(4, 0).is_err());
    assert!(shapley_kernel_weight(4, 4).is_err());
}

#[test]
fn linear_model_attributions_are_closed_form() {
    let w = [0.5, -1.2, 2.0, 0.0, 0.7];
    let f = |x: &[f64]| -> Result<Vec<f64>> { Ok(vec![x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + 0.3]) };
    let x = [1.0, 2.0, -1.0, 4.0, 0.5];
    let b = vec![vec![0.2, -0.4, 0.1, 1.0, 3.0]];
    let e = kernel_shap(&f, &x, &b, &FeatureGroups::singletons(5), 64, &mut rng::seeded(0)).unwrap();
    for i in 0..5 {
        assert!((e.phi[i][0] - w[i] * (x[i] - b[0][i])).abs() < 1e-12, "feature {i}");
    }
    assert!(e.efficiency_gap() < 1e-12);
}

#[test]
fn sampled_coalitions_recover_additive_models() {
    let m = 14;
    let mut r = rng::seeded(3);
    let w: Vec<f64> = rng::normal_vec(&mut r, m);
    let x: Vec<f64> = rng::normal_vec(&mut r, m);
    let b = vec![rng::normal_vec::<f64>(&mut r, m)];
    let f = |z: &[f64]| -> Result<Vec<f64>> {
        Ok(vec![z.iter().zip(&w).map(|(a, c)| a * c).sum(), z.iter().map(|v| v.sin()).sum()])
    };
    let e = kernel_shap(&f, &x, &b, &FeatureGroups::singletons(m), 400, &mut r).unwrap();
    for i in 0..m {
        assert!((e.phi[i][0] - w[i] * (x[i] - b[0][i])).abs() < 1e-9);
        assert!((e.phi[i][1] - (x[i].sin() - b[0][i].sin())).abs() < 1e-9);
    }
    assert!(e.efficiency_gap() < 1e-9);
}

#[test]
fn exact_shapley_matches_permutation_oracle() {
    for (m, seed) in [(3, 1u64), (4, 2), (5, 3), (6, 4)] {
        let net = random_net(m, 3, seed);
        let mut r = rng::seeded(seed + 50);
        let x = rng::normal_vec::<f64>(&mut r, m);
        let b = rng::normal_vec::<f64>(&mut r, m);
        let f = |z: &[f64]| net.forward(z);
        let exact = exact_shapley(&f, &x, std::slice::from_ref(&b), &FeatureGroups::singletons(m)).unwrap();
        let oracle = permutation_shapley(&|z| net.forward(z).unwrap(), &x, &b);
        assert!(max_abs_diff(&exact, &oracle) < 1e-12, "M={m}");
    }
}

#[test]
fn exhaustive_kernel_shap_equals_exact_shapley() {
    for (m, seed) in [(4, 10u64), (6, 11), (8, 12)] {
        let net = random_net(m, 4, seed);
        let mut r = rng::seeded(seed);
        let x = rng::normal_vec::<f64>(&mut r, m);
        let bg: Vec<Vec<f64>> = (0..5).map(|_| rng::normal_vec(&mut r, m)).collect();
        let f = |z: &[f64]| net.forward(z);
        let groups = FeatureGroups::singletons(m);
        let e = kernel_shap(&f, &x, &bg, &groups, 0, &mut r).unwrap();
        let exact = exact_shapley(&f, &x, &bg, &groups).unwrap();
        assert!(max_abs_diff(&e.phi, &exact) < 1e-6, "M={m}");
        assert!(e.efficiency_gap() < 1e-6);
    }
}

#[test]
fn dummy_and_symmetry_axioms() {
    let f = |z: &[f64]| -> Result<Vec<f64>> { Ok(vec![(z[0] * z[1]).tanh() + z[3].powi(2)]) };
    let x = [1.5, 1.5, -3.0, 0.8];
    let b = vec![vec![0.1, 0.1, 2.0, -0.2]];
    let e = kernel_shap(&f, &x, &b, &FeatureGroups::singletons(4), 0, &mut rng::seeded(0)).unwrap();
    assert!(e.phi[2][0].abs() < 1e-6);
    assert!((e.phi[0][0] - e.phi[1][0]).abs() < 1e-9);
    assert!(e.efficiency_gap() < 1e-9);
}

#[test]
fn grouped_players_move_together() {
    let net = random_net(6, 2, 21);
    let f = |z: &[f64]| net.forward(z);
    let mut r = rng::seeded(22);
    let x = rng::normal_vec::<f64>(&mut r, 6);
    let b = vec![rng::normal_vec::<f64>(&mut r, 6)];
    let groups = FeatureGroups::paired(vec!["a".into(), "b".into(), "c".into()]);
    let e = kernel_shap(&f, &x, &b, &groups, 0, &mut r).unwrap();
    let exact = exact_shapley(&f, &x, &b, &groups).unwrap();
    assert_eq!(e.num_features(), 3);
    assert!(max_abs_diff(&e.phi, &exact) < 1e-9);
    assert!(e.efficiency_gap() < 1e-9);
    assert_eq!(e.feature_values, vec![x[0], x[1], x[2]]);
}

#[test]
fn single_player_takes_the_whole_difference() {
    let f = |z: &[f64]| -> Result<Vec<f64>> { Ok(vec![z[0].exp(), -z[0]]) };
    let e = kernel_shap(&f, &[1.0], &[vec![0.0]], &FeatureGroups::singletons(1), 0, &mut rng::seeded(0)).unwrap();
    assert!((e.phi[0][0] - (1f64.exp() - 1.0)).abs() < 1e-15);
    assert!((e.phi[0][1] + 1.0).abs() < 1e-15);
}

#[test]
fn rejects_bad_inputs() {
    let f = |z: &[f64]| -> Result<Vec<f64>> { Ok(vec![z[0]]) };
    let mut r = rng::seeded(0);
    assert!(kernel_shap(&f, &[1.0, 2.0], &[], &FeatureGroups::singletons(2), 0, &mut r).is_err());
    assert!(kernel_shap(&f, &[1.0, 2.0], &[vec![0.0]], &FeatureGroups::singletons(2), 0, &mut r).is_err());
    assert!(kernel_shap(&f, &[1.0], &[vec![0.0]], &FeatureGroups::singletons(2), 0, &mut r).is_err());
    let nan = |_: &[f64]| -> Result<Vec<f64>> { Ok(vec![f64::NAN]) };
    assert!(kernel_shap(&nan, &[1.0], &[vec![0.0]], &FeatureGroups::singletons(1), 0, &mut r).is_err());
    assert!(exact_shapley(&f, &[0.0; 11], &[vec![0.0; 11]], &FeatureGroups::singletons(11)).is_err());
}

#[test]
fn sampled_coalitions_are_proper_and_paired() {
    let c = sampled_coalitions(20, 101, &mut rng::seeded(4)).unwrap();
    assert_eq!(c.len(), 101);
    for pair in c.chunks(2).filter(|p| p.len() == 2) {
        assert!(pair[0].mask.iter().zip(&pair[1].mask).all(|(a, b)| a != b));
    }
    assert!(c.iter().all(|s| s.mask.iter().any(|&b| b) && !s.mask.iter().all(|&b| b)));
    assert_eq!(exhaustive_coalitions(4).unwrap().len(), 14);
    assert!(exhaustive_coalitions(13).is_err());
}

#[test]
fn pearson_examples() {
    assert!((pearson::<f64>(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - 0.98198).abs() < 1e-5);
    let u = [0.3f64, -1.0, 2.0, 0.0];
    assert!((pearson(&u, &u).unwrap() - 1.0).abs() < 1e-15);
    let neg: Vec<f64> = u.iter().map(|v| -v).collect();
    assert!((pearson(&u, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert!(pearson(&u, &[1.0; 4]).is_err());
    assert!(pearson(&[1.0], &[2.0]).is_err());
    assert!(pearson(&[1.0, 2.0], &[2.0]).is_err());
}

#[test]
fn similarity_to_a_cloned_class_is_one() {
    let means = vec![vec![0.1, 0.5, -0.2], vec![1.0, -1.0, 0.3], vec![0.0, 0.2, 0.9]];
    let s = class_similarity(&means, &means[1], FrameworkMode::Tracked).unwrap();
    assert!((s.r[1] - 1.0).abs() < 1e-12);
    assert_eq!(s.argmax(), 1);
    assert!(s.r.iter().all(|r| (-1.0..=1.0).contains(r)));
}

#[test]
fn class_means_average_per_label() {
    let v = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
    let m = class_means(&v, &[0, 1, 0], 2).unwrap();
    assert_eq!(m, vec![vec![3.0, 4.0], vec![3.0, 4.0]]);
    assert!(class_means(&v, &[0, 0, 0], 2).is_err());
}

fn explain_all(f: &dyn Fn(&[f64]) -> Result<Vec<f64>>, xs: &[Vec<f64>], m: usize) -> Vec<ShapExplanation<f64>> {
    let bg = vec![vec![0.0; m]];
    xs.iter().map(|x| kernel_shap(&f, x, &bg, &FeatureGroups::singletons(m), 0, &mut rng::seeded(0)).unwrap()).collect()
}

#[test]
fn summary_ranks_signal_before_null_features() {
    let f = |z: &[f64]| -> Result<Vec<f64>> { Ok(vec![2.0 * z[1], -z[1] + 0.1 * z[3]]) };
    let mut r = rng::seeded(8);
    let xs: Vec<Vec<f64>> = (0..10).map(|_| rng::normal_vec(&mut r, 4)).collect();
    let s = global_shap_summary(&explain_all(&f, &xs, 4)).unwrap();
    assert_eq!(s.ranking[0].feature, 1);
    assert_eq!(s.ranking[1].feature, 3);
    let imp = s.mean_abs_by_feature();
    assert!(imp[0] < 1e-6 && imp[2] < 1e-6);
    assert_eq!(s.beeswarm.len(), 10 * 4 * 2);
    assert_eq!(s.force.len(), 10);
    for row in &s.force {
        let total: f64 = row.contributions.iter().sum();
        assert!((row.base_value + total - row.output).abs() < 1e-9);
    }
}

#[test]
fn ranking_follows_feature_permutation() {
    let f = |z: &[f64]| -> Result<Vec<f64>> { Ok(vec![z[0] + 3.0 * z[1] - 0.5 * z[2]]) };
    let g = |z: &[f64]| -> Result<Vec<f64>> { Ok(vec![z[2] + 3.0 * z[0] - 0.5 * z[1]]) };
    let mut r = rng::seeded(9);
    let xs: Vec<Vec<f64>> = (0..6).map(|_| rng::normal_vec(&mut r, 3)).collect();
    let xs_perm: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[1], x[2], x[0]]).collect();
    let a = global_shap_summary(&explain_all(&f, &xs, 3)).unwrap();
    let b = global_shap_summary(&explain_all(&g, &xs_perm, 3)).unwrap();
    let perm = [2, 0, 1];
    for (ra, rb) in a.ranking.iter().zip(&b.ranking) {
        assert_eq!(perm[ra.feature], rb.feature);
        assert!((ra.mean_abs_phi - rb.mean_abs_phi).abs() < 1e-12);
    }
}

#[test]
fn shrink_hidden_is_proportional_with_a_floor() {
    assert_eq!(shrink_hidden([32, 32, 16], 16, 3, 4), [6, 6, 4]);
    assert_eq!(shrink_hidden([32, 32, 16], 16, 16, 4), [32, 32, 16]);
    assert_eq!(shrink_hidden([8, 8, 8], 16, 1, 4), [4, 4, 4]);
}

#[test]
fn compression_stops_when_nothing_falls_below_threshold() {
    let mut r = rng::seeded(31);
    let make = |n: usize, r: &mut crate::rng::HarRng| {
        let mut emb = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let l = i % 2;
            let m = if l == 0 { -1.5 } else { 1.5 };
            emb.push(
                crate::encoder::EmbeddingDistribution::new(vec![m + 0.3 * rng::normal::<f64>(r)], vec![0.1]).unwrap(),
            );
            labels.push(l);
        }
        EmbeddedSet::new(emb, labels).unwrap()
    };
    let train = make(60, &mut r);
    let val = make(30, &mut r);
    let model = build_fcbnn::<f64>(1, &[0], 2, [4, 4, 4], 1.0, -5.0, &mut r).unwrap();
    let policy = CompressionPolicy { explain_inputs: 5, eval_samples: 10, shap_samples: 5, ..Default::default() };
    let cfg = crate::bnn::FcBnnConfig { epochs: 1, ..Default::default() };
    let (report, out) = compress_loop(&train, &val, &model, &cfg, &policy, 3).unwrap();
    assert_eq!(report.stop_reason, StopReason::AllFeaturesRetained);
    assert_eq!(report.iterations.len(), 1);
    assert_eq!(report.final_iteration, 0);
    assert_eq!(out, model);
    assert_eq!(report.param_reduction(), 0.0);
}
