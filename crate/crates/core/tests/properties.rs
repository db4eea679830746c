mod common;

use fedsem::encoding::{disagreement, encode, AttackPrototype, EncoderProfile, PrototypeSet, SemanticEmbedding};
use fedsem::federation::{normalize_weights, smooth_trust, trust_score, FederationConfig};
use fedsem::harness::{run_scripted, ScriptedClient};
use fedsem::inference::{assess, attribute, zero_day_score, DisagreementMode};
use fedsem::metrics::{alignment_score, auroc, entropy_series_from_values, ols_fit};
use fedsem::projection::{
    local_loss, loss_gradient, project_values, train_local_closed_form, train_local_gd, FeatureVector, LocalDataset,
    ProjectionMatrix,
};
use fedsem::rng::{gaussian_vec, keyed_rng};
use proptest::prelude::*;

use common::{random_dataset, random_prototypes};

fn members(seed: u64, m: usize, k: usize) -> Vec<SemanticEmbedding> {
    let mut rng = keyed_rng(&[&seed.to_string(), "members"]);
    (0..m)
        .map(|i| SemanticEmbedding::new(format!("e{i}"), gaussian_vec(&mut rng, k)).unwrap())
        .collect()
}

fn matrix(seed: u64, k: usize, d: usize) -> ProjectionMatrix {
    ProjectionMatrix::from_row_slice(k, d, &gaussian_vec(&mut keyed_rng(&[&seed.to_string(), "w"]), k * d)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fused_is_member_mean(seed in any::<u64>(), k in 1usize..32) {
        let ms = members(seed, 3, k);
        let p = AttackPrototype::from_members("a", ms.clone()).unwrap();
        for i in 0..k {
            let mean = ms.iter().map(|m| m.values[i]).sum::<f64>() / 3.0;
            prop_assert!((p.fused.values[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn disagreement_ignores_member_order(seed in any::<u64>(), m in 2usize..6, k in 1usize..16, rot in 0usize..6) {
        let ms = members(seed, m, k);
        let mut shuffled = ms.clone();
        shuffled.rotate_left(rot % m);
        shuffled.reverse();
        let (a, b) = (disagreement(&ms).unwrap(), disagreement(&shuffled).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn disagreement_is_homogeneous(seed in any::<u64>(), s in 1e-3f64..1e3, k in 1usize..16) {
        let ms = members(seed, 3, k);
        let scaled: Vec<SemanticEmbedding> = ms
            .iter()
            .map(|m| SemanticEmbedding::new(m.encoder_id.clone(), m.values.iter().map(|v| v * s).collect()).unwrap())
            .collect();
        let (d, ds) = (disagreement(&ms).unwrap(), disagreement(&scaled).unwrap());
        prop_assert!((ds - s * d).abs() <= 1e-9 * (s * d).max(1.0));
    }

    #[test]
    fn encode_is_deterministic(text in "[a-z]{1,8}( [a-z]{1,8}){0,12}", k in 1usize..64, seed in any::<u64>()) {
        for p in EncoderProfile::defaults() {
            prop_assert_eq!(encode(&p, &text, k, seed).unwrap(), encode(&p, &text, k, seed).unwrap());
        }
    }

    #[test]
    fn projection_is_linear(seed in any::<u64>(), k in 1usize..8, d in 1usize..8, a in -10.0f64..10.0, b in -10.0f64..10.0) {
        let w = matrix(seed, k, d);
        let mut rng = keyed_rng(&[&seed.to_string(), "xy"]);
        let (x, y) = (gaussian_vec(&mut rng, d), gaussian_vec(&mut rng, d));
        let combo: Vec<f64> = x.iter().zip(&y).map(|(x, y)| a * x + b * y).collect();
        let lhs = project_values(&w, &combo).unwrap();
        let (px, py) = (project_values(&w, &x).unwrap(), project_values(&w, &y).unwrap());
        for i in 0..k {
            prop_assert!((lhs[i] - (a * px[i] + b * py[i])).abs() <= 1e-9);
        }
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_at_zero_residual(seed in any::<u64>(), k in 1usize..6, d in 1usize..6) {
        let protos = random_prototypes(3, k, &seed.to_string());
        let ds = random_dataset(&protos, d, 3, 0.5, &seed.to_string());
        let w = matrix(seed, k, d);
        prop_assert!(local_loss(&w, &ds, &protos).unwrap() > 0.0);

        // Samples mapped exactly onto their prototypes.
        let exact: Vec<FeatureVector> = protos
            .iter()
            .map(|p| FeatureVector::labeled(p.fused.values.clone(), p.concept_id.clone()).unwrap())
            .collect();
        let identity = ProjectionMatrix::new(nalgebra::DMatrix::identity(k, k)).unwrap();
        prop_assert_eq!(local_loss(&identity, &LocalDataset::new(0, exact), &protos).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>(), k in 1usize..5, d in 1usize..5) {
        let protos = random_prototypes(2, k, &seed.to_string());
        let ds = random_dataset(&protos, d, 3, 0.8, &seed.to_string());
        let w = matrix(seed, k, d);
        let g = loss_gradient(&w, &ds, &protos).unwrap().row_major();
        let base = w.row_major();
        let h = 1e-5;
        let mut num = Vec::new();
        for j in 0..k * d {
            let (mut p, mut m) = (base.clone(), base.clone());
            p[j] += h;
            m[j] -= h;
            let lp = local_loss(&ProjectionMatrix::from_row_slice(k, d, &p).unwrap(), &ds, &protos).unwrap();
            let lm = local_loss(&ProjectionMatrix::from_row_slice(k, d, &m).unwrap(), &ds, &protos).unwrap();
            num.push((lp - lm) / (2.0 * h));
        }
        let err: f64 = g.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-4 * scale.max(1e-12));
    }

    #[test]
    fn trust_weights_are_normalized(u in prop::collection::vec(1e-6f64..1e6, 1..20)) {
        let a = normalize_weights(&u).unwrap();
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(a.iter().all(|&x| x > 0.0 && x <= 1.0));
    }

    #[test]
    fn lower_loss_gets_more_weight(li in 1e-4f64..1e3, lj in 1e-4f64..1e3, u in 1e-3f64..1e3, gamma in 0.0f64..0.99) {
        prop_assume!(li < lj);
        let ui = smooth_trust(u, trust_score(li, 1e-8).unwrap(), gamma).unwrap();
        let uj = smooth_trust(u, trust_score(lj, 1e-8).unwrap(), gamma).unwrap();
        let a = normalize_weights(&[ui, uj]).unwrap();
        prop_assert!(a[0] > a[1]);
    }

    #[test]
    fn weights_ignore_common_scale(u in prop::collection::vec(1e-3f64..1e3, 1..12), c in 1e-3f64..1e3) {
        let scaled: Vec<f64> = u.iter().map(|x| x * c).collect();
        let (a, b) = (normalize_weights(&u).unwrap(), normalize_weights(&scaled).unwrap());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn attribution_ignores_positive_scaling(seed in any::<u64>(), s in 1e-3f64..1e3, k in 2usize..12) {
        let protos = random_prototypes(5, k, &seed.to_string());
        let z = gaussian_vec(&mut keyed_rng(&[&seed.to_string(), "z"]), k);
        let (id, c) = attribute(&z, &protos).unwrap();
        let zs: Vec<f64> = z.iter().map(|v| v * s).collect();
        let rescaled: Vec<AttackPrototype> = protos
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let f = (j as f64 + 1.0) * 0.37;
                let mut q = p.clone();
                q.fused = SemanticEmbedding::new("fused", p.fused.values.iter().map(|v| v * f).collect()).unwrap();
                q
            })
            .collect();
        let (id2, c2) = attribute(&zs, &PrototypeSet::new(rescaled).unwrap()).unwrap();
        prop_assert_eq!(id, id2);
        prop_assert!((c - c2).abs() <= 1e-12);
    }

    #[test]
    fn zds_stays_in_range(seed in any::<u64>(), lambda in 0.0f64..=1.0, k in 2usize..8, d in 2usize..8) {
        let protos = random_prototypes(4, k, &seed.to_string());
        let w = matrix(seed, k, d);
        let x = FeatureVector::new(gaussian_vec(&mut keyed_rng(&[&seed.to_string(), "x"]), d), None).unwrap();
        let d_max = protos.iter().map(|p| p.disagreement).fold(0.0, f64::max);
        let raw = assess(&x, &w, &protos, lambda, DisagreementMode::Raw).unwrap();
        prop_assert!(raw.zds >= 0.0 && raw.zds <= lambda * d_max + (1.0 - lambda) * 2.0 + 1e-12);
        let mm = assess(&x, &w, &protos, lambda, DisagreementMode::MinMax).unwrap();
        prop_assert!(mm.zds >= 0.0 && mm.zds <= 1.0 + (1.0 - lambda) + 1e-12);
        prop_assert!((0.0..=1.0).contains(&mm.disagreement_used));
    }

    #[test]
    fn zds_monotone_in_risk_inputs(d in 0.0f64..5.0, c in -1.0f64..1.0, lambda in 0.0f64..=1.0) {
        let h = 1e-6;
        let base = zero_day_score(d, c, lambda).unwrap();
        prop_assert!((zero_day_score(d + h, c, lambda).unwrap() - base) / h >= -1e-9);
        prop_assert!((zero_day_score(d, c + h, lambda).unwrap() - base) / h <= 1e-9);
    }

    #[test]
    fn auroc_ignores_monotone_transforms(
        scores in prop::collection::vec(-5.0f64..5.0, 2..40),
        flags in prop::collection::vec(any::<bool>(), 2..40),
    ) {
        let n = scores.len().min(flags.len());
        let (s, f) = (&scores[..n], &flags[..n]);
        prop_assume!(f.iter().any(|x| *x) && f.iter().any(|x| !*x));
        let t: Vec<f64> = s.iter().map(|x| (3.0 * x + 1.0).exp()).collect();
        prop_assert!((auroc(s, f).unwrap() - auroc(&t, f).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn ols_recovers_noiseless_lines(a in -100.0f64..100.0, b in -100.0f64..100.0, n in 2usize..200) {
        let xs: Vec<f64> = (0..n).map(|i| i as f64 * 0.5 - 7.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
        let fit = ols_fit(&xs, &ys).unwrap();
        prop_assert!((fit.slope - a).abs() <= 1e-9);
        prop_assert!((fit.intercept - b).abs() <= 1e-9);
    }

    #[test]
    fn alignment_ignores_client_order(seed in any::<u64>(), n in 2usize..10, k in 1usize..10, rot in 0usize..10) {
        let mut rng = keyed_rng(&[&seed.to_string(), "align"]);
        let embs: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(&mut rng, k)).collect();
        let centroid = gaussian_vec(&mut rng, k);
        let mut permuted = embs.clone();
        permuted.rotate_left(rot % n);
        permuted.reverse();
        let (a, b) = (alignment_score(&embs, &centroid).unwrap(), alignment_score(&permuted, &centroid).unwrap());
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn entropy_shift_starts_at_zero(hs in prop::collection::vec(0.0f64..3.0, 2..30)) {
        prop_assert_eq!(entropy_series_from_values(&hs).unwrap().shift.points[0].1, 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn gradient_descent_reaches_least_squares(seed in any::<u64>(), k in 2usize..6, d in 2usize..6) {
        let protos = random_prototypes(3, k, &seed.to_string());
        let ds = random_dataset(&protos, d, 20, 1.0, &seed.to_string());
        let (_, cf) = train_local_closed_form(&ds, &protos, 0.0).unwrap();
        let (_, gd) = train_local_gd(&ProjectionMatrix::zeros(k, d), &ds, &protos, 1e-2, 20_000).unwrap();
        prop_assert!((gd - cf).abs() <= 1e-6, "gd {} cf {}", gd, cf);
    }

    #[test]
    fn rounds_keep_weights_on_the_simplex(seed in any::<u64>(), n in 1usize..8, rounds in 1usize..15) {
        let clients: Vec<ScriptedClient> = (0..n)
            .map(|id| {
                let s = seed.to_string();
                ScriptedClient {
                    id,
                    loss: Box::new(move |t| {
                        let v = gaussian_vec(&mut keyed_rng(&[&s, &id.to_string(), &t.to_string()]), 1)[0];
                        v.abs() * 10.0
                    }),
                }
            })
            .collect();
        let cfg = FederationConfig { clients: n, rounds, ..FederationConfig::default() };
        for r in run_scripted(cfg, &clients).unwrap() {
            let a: Vec<f64> = r.alphas().iter().map(|x| x.1).collect();
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(a.iter().all(|&x| x > 0.0 && x <= 1.0));
            prop_assert!(r.entropy >= 0.0 && r.entropy <= (n as f64).ln() + 1e-12);
        }
    }

    #[test]
    fn uniform_losses_keep_weights_uniform(loss in 1e-3f64..1e3, n in 1usize..12) {
        let clients: Vec<ScriptedClient> = (0..n)
            .map(|id| ScriptedClient { id, loss: Box::new(move |_| loss) })
            .collect();
        let cfg = FederationConfig { clients: n, rounds: 10, ..FederationConfig::default() };
        for r in run_scripted(cfg, &clients).unwrap() {
            let a: Vec<f64> = r.alphas().iter().map(|x| x.1).collect();
            prop_assert!(a.iter().all(|&x| x == a[0]));
            prop_assert!((a[0] - 1.0 / n as f64).abs() <= 1e-15);
            prop_assert!((r.entropy - (n as f64).ln()).abs() <= 1e-12);
        }
    }
}
