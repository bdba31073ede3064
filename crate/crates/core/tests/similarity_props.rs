mod common;

use proptest::prelude::*;

use common::normal_f64;
use ddpm_ticket::pruning::{prune_module, MaskSet};
use ddpm_ticket::similarity::{cka, hsic, profile, rbf_gram, Bandwidth, CkaMode, GramMatrix};
use ddpm_ticket::unet::{UNet, UNetConfig};
use ddpm_ticket::Tensor;

fn matrix() -> impl Strategy<Value = Tensor<f64>> {
    (3usize..12, 1usize..8).prop_flat_map(|(n, d)| {
        prop::collection::vec(-3.0f64..3.0, n * d).prop_map(move |v| Tensor::new([n, d], v).unwrap())
    })
}

fn pair() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>)> {
    (3usize..12, 1usize..8, 1usize..8).prop_flat_map(|(n, d1, d2)| {
        (
            prop::collection::vec(-3.0f64..3.0, n * d1).prop_map(move |v| Tensor::new([n, d1], v).unwrap()),
            prop::collection::vec(-3.0f64..3.0, n * d2).prop_map(move |v| Tensor::new([n, d2], v).unwrap()),
        )
    })
}

fn distinct_rows(x: &Tensor<f64>) -> bool {
    let d = x.shape()[1];
    let rows: Vec<&[f64]> = x.data().chunks(d).collect();
    rows.iter().enumerate().any(|(i, a)| rows[i + 1..].iter().any(|b| a != b))
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let d = x.shape()[1];
    let data = perm.iter().flat_map(|&i| x.data()[i * d..(i + 1) * d].to_vec()).collect();
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

proptest! {
    #[test]
    fn self_similarity_is_one(x in matrix()) {
        prop_assume!(distinct_rows(&x));
        let k = rbf_gram(&x, Bandwidth::Median).unwrap();
        let v = cka(&k, &k, CkaMode::Root).unwrap();
        prop_assert!((v - 1.0).abs() < 1e-6, "{}", v);
    }

    #[test]
    fn hsic_is_symmetric((x, y) in pair()) {
        let k = rbf_gram(&x, Bandwidth::Median).unwrap();
        let l = rbf_gram(&y, Bandwidth::Median).unwrap();
        prop_assert!((hsic(&k, &l).unwrap() - hsic(&l, &k).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn joint_row_permutation_leaves_cka_unchanged((x, y) in pair(), seed in any::<u64>()) {
        prop_assume!(distinct_rows(&x) && distinct_rows(&y));
        let n = x.shape()[0];
        let mut perm: Vec<usize> = (0..n).collect();
        // Fisher-Yates on a splitmix sequence
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = s;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            perm.swap(i, ((z ^ (z >> 31)) % (i as u64 + 1)) as usize);
        }
        let base = cka(&rbf_gram(&x, Bandwidth::Median).unwrap(), &rbf_gram(&y, Bandwidth::Median).unwrap(), CkaMode::Root).unwrap();
        let kp = rbf_gram(&permute_rows(&x, &perm), Bandwidth::Median).unwrap();
        let lp = rbf_gram(&permute_rows(&y, &perm), Bandwidth::Median).unwrap();
        let moved = cka(&kp, &lp, CkaMode::Root).unwrap();
        prop_assert!((base - moved).abs() < 1e-9, "{} vs {}", base, moved);
    }

    #[test]
    fn isotropic_scaling_is_absorbed_by_the_median_bandwidth(x in matrix(), scale in 1e-3f64..1e3) {
        prop_assume!(distinct_rows(&x));
        let k = rbf_gram(&x, Bandwidth::Median).unwrap();
        let ks = rbf_gram(&x.map(|v| v * scale), Bandwidth::Median).unwrap();
        prop_assert!((cka(&k, &ks, CkaMode::Root).unwrap() - 1.0).abs() < 1e-6);
        for (a, b) in k.data().iter().zip(ks.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn constant_gram_has_zero_hsic(n in 2usize..20, c in prop_oneof![Just(1.0f64), Just(0.0), 0.0f64..1.0], y in matrix()) {
        let k = GramMatrix::from_values(n, vec![c; n * n]).unwrap();
        let other = GramMatrix::from_values(n, (0..n * n).map(|i| ((i * 7) % 5) as f64).collect()).unwrap();
        prop_assert_eq!(hsic(&k, &other).unwrap(), 0.0);
        prop_assert_eq!(hsic(&k, &k).unwrap(), 0.0);
        prop_assert!(cka(&k, &other, CkaMode::Root).is_err());
        let _ = y;
    }
}

#[test]
fn identical_rows_give_a_degenerate_gram() {
    let x = Tensor::new([4, 2], vec![1.0; 8]).unwrap();
    let k = rbf_gram(&x, Bandwidth::Median).unwrap();
    assert!(k.is_degenerate());
    assert_eq!(hsic(&k, &k).unwrap(), 0.0);
}

/// Null distribution of root CKA for two independent 50x10 standard-normal
/// row sets under median-bandwidth RBF kernels. A 2000-draw pre-study gives
/// mean 0.264 and 99th percentile 0.317, so 0.35 is the bound that holds
/// with probability >= 0.99.
const NULL_BOUND: f64 = 0.35;

#[test]
fn independent_gaussian_rows_score_low() {
    let trials = 100;
    let mut values = Vec::new();
    for s in 0..trials {
        let k = rbf_gram(&normal_f64(&[50, 10], 2 * s), Bandwidth::Median).unwrap();
        let l = rbf_gram(&normal_f64(&[50, 10], 2 * s + 1), Bandwidth::Median).unwrap();
        values.push(cka(&k, &l, CkaMode::Root).unwrap());
    }
    let below = values.iter().filter(|&&v| v < NULL_BOUND).count();
    assert!(below >= 99, "{below}/100 below {NULL_BOUND}");
    let mean = values.iter().sum::<f64>() / trials as f64;
    // pre-study mean 0.264 with per-draw sd about 0.02
    assert!((mean - 0.264).abs() < 0.01, "null mean {mean}");
}

#[test]
fn unrooted_mode_differs_only_in_the_denominator() {
    let k = rbf_gram(&normal_f64(&[12, 4], 1), Bandwidth::Median).unwrap();
    let l = rbf_gram(&normal_f64(&[12, 4], 2), Bandwidth::Median).unwrap();
    let (kl, kk, ll) = (hsic(&k, &l).unwrap(), hsic(&k, &k).unwrap(), hsic(&l, &l).unwrap());
    assert!((cka(&k, &l, CkaMode::Paper).unwrap() - kl / (kk * ll)).abs() < 1e-12);
    assert!((cka(&k, &l, CkaMode::Root).unwrap() - kl / (kk * ll).sqrt()).abs() < 1e-12);
}

#[test]
fn ticket_profile_against_itself() {
    let net = UNet::new(UNetConfig::default()).unwrap();
    let params = net.init(3);
    let mut mask = MaskSet::full(&params);
    for j in 0..8 {
        prune_module(&params, &mut mask, j, 50.0).unwrap();
    }
    let p = profile(&net, (&params, &mask), (&params, &mask), Bandwidth::Median).unwrap();
    assert_eq!(p.entries.len(), net.module_count());
    for e in &p.entries[..7] {
        assert!((e.cka_root.unwrap() - 1.0).abs() < 1e-6, "module {}", e.module);
    }
    // conv_out has one output channel and no pairwise structure
    assert_eq!(p.entries[7].cka_root, None);
    assert!(p.to_csv().lines().nth(8).unwrap().starts_with("7,NaN,NaN"));
}

#[test]
fn upstream_and_downstream_similarity_between_two_seeds() {
    // logged only: how similar are early vs late modules of two unrelated inits
    let net = UNet::new(UNetConfig::default()).unwrap();
    let (a, b) = (net.init(1), net.init(2));
    let (ma, mb) = (MaskSet::full(&a), MaskSet::full(&b));
    let p = profile(&net, (&a, &ma), (&b, &mb), Bandwidth::Median).unwrap();
    let v = p.values(CkaMode::Root);
    let up: Vec<f64> = v[..4].iter().flatten().cloned().collect();
    let down: Vec<f64> = v[4..].iter().flatten().cloned().collect();
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    eprintln!("init-vs-init CKA: upstream {:.3}, downstream {:.3}", mean(&up), mean(&down));
    assert!(v.iter().flatten().all(|c| (0.0..=1.0 + 1e-9).contains(c)));
}
