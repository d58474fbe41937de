mod common;

use common::{random_lora, tiny_net, SIZE};
use probekit::diffusion::sample;
use probekit::lora::{a_name, attach_lora, attach_lora_scaled, b_name};
use probekit::tensor::{Graph, Tensor};
use proptest::prelude::*;

/// Rank by Gaussian elimination with partial pivoting.
fn elimination_rank(rows: usize, cols: usize, data: &[f64], tol: f64) -> usize {
    let mut m = data.to_vec();
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let (piv, best) = (rank..rows)
            .map(|r| (r, m[r * cols + c].abs()))
            .fold((rank, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best <= tol {
            continue;
        }
        for j in 0..cols {
            m.swap(rank * cols + j, piv * cols + j);
        }
        for r in rank + 1..rows {
            let f = m[r * cols + c] / m[rank * cols + c];
            for j in c..cols {
                m[r * cols + j] -= f * m[rank * cols + j];
            }
        }
        rank += 1;
    }
    rank
}

#[test]
fn attach_creates_zero_b_and_freezes_the_base() {
    let (mut net, _) = tiny_net::<f64>(3, 16, 0);
    let lora = attach_lora(&mut net, 4, &["hidden1", "hidden2"], 7).unwrap();
    assert!(net.params.names().all(|n| net.params.is_frozen(n)));
    assert_eq!(lora.params.len(), 4);
    for t in ["hidden1", "hidden2"] {
        assert_eq!(lora.params.get(&a_name(t)).unwrap().dims(), [4, 16]);
        assert_eq!(lora.params.get(&b_name(t)).unwrap().dims(), [16, 4]);
        assert_eq!(lora.params.get(&b_name(t)).unwrap().max_abs(), 0.0);
        assert!(lora.delta(t).unwrap().data().iter().all(|&v| v == 0.0));
    }
    assert_eq!(lora.scale(), 1.0);
}

#[test]
fn invalid_targets_and_ranks_are_rejected() {
    let (mut net, _) = tiny_net::<f64>(3, 8, 0);
    assert!(attach_lora(&mut net.clone(), 2, &["nope"], 0).is_err());
    assert!(attach_lora(&mut net.clone(), 0, &["hidden1"], 0).is_err());
    assert!(attach_lora(&mut net.clone(), 9, &["hidden1"], 0).is_err());
    assert!(attach_lora(&mut net, 2, &[], 0).is_err());
}

#[test]
fn effective_weight_is_base_plus_scaled_product() {
    let (mut net, _) = tiny_net::<f64>(3, 8, 1);
    let mut lora = attach_lora_scaled(&mut net, 2, 6.0, &["hidden1"], 3).unwrap();
    lora.params
        .set(
            &b_name("hidden1"),
            Tensor::from_f64(
                &[8, 2],
                &(0..16).map(|i| i as f64 * 0.1).collect::<Vec<_>>(),
            )
            .unwrap(),
        )
        .unwrap();
    let a = lora.params.get(&a_name("hidden1")).unwrap().clone();
    let b = lora.params.get(&b_name("hidden1")).unwrap().clone();
    let base = net.params.get("hidden1.w").unwrap().clone();
    let mut g = Graph::no_grad();
    let bv = g.constant((*base).clone()).unwrap();
    let w = lora.weight(&mut g, "hidden1", bv).unwrap();
    let got = g.value(w).clone();
    for i in 0..8 {
        for j in 0..8 {
            let prod: f64 = (0..2)
                .map(|k| b.data()[i * 2 + k] * a.data()[k * 8 + j])
                .sum();
            let want = base.data()[i * 8 + j] + 3.0 * prod;
            assert!((got.data()[i * 8 + j] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn save_load_roundtrip_reproduces_samples() {
    let (mut net, sched) = tiny_net::<f32>(4, 16, 2);
    let lora = random_lora(&mut net, 3, 5);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("lora.ptar");
    lora.save(&path).unwrap();
    let back = probekit::lora::LoraParams::<f32>::load(&path).unwrap();
    assert!(back.params.bit_identical(&lora.params));
    assert_eq!(
        (back.rank, back.alpha, &back.targets),
        (lora.rank, lora.alpha, &lora.targets)
    );
    let reqs = common::requests(5, 1, 2.0);
    assert_eq!(
        sample(&net, Some(&lora), &sched, &reqs, false).unwrap().x0,
        sample(&net, Some(&back), &sched, &reqs, false).unwrap().x0
    );
    // A non-zero adapter does change the output.
    assert_ne!(
        sample(&net, None, &sched, &reqs, false).unwrap().x0,
        sample(&net, Some(&lora), &sched, &reqs, false).unwrap().x0
    );
    assert_eq!(
        sample(&net, None, &sched, &reqs, false).unwrap().x0.dims(),
        [5, SIZE * SIZE]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adapter_delta_rank_is_bounded_by_r(rank in 1usize..=6, seed in any::<u64>()) {
        let (mut net, _) = tiny_net::<f64>(2, 12, seed);
        let lora = random_lora(&mut net, rank, seed);
        for t in ["hidden1", "hidden2"] {
            let d = lora.delta(t).unwrap();
            let found = elimination_rank(12, 12, d.data(), 1e-9);
            prop_assert!(found <= rank);
            // Random factors reach the bound almost surely.
            prop_assert_eq!(found, rank);
            prop_assert_eq!(probekit::lora::numerical_rank(&d, 1e-9), rank);
        }
    }
}
