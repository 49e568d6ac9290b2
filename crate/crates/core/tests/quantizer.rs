use cvq::nested::{apply_mask, TruncationMask};
use cvq::parallel::Execution;
use cvq::quantizer::{
    lookup, lookup_frobenius, quantize, separability_stats, Axis, Codebook, Window,
};
use cvq::tensor::Tensor;
use cvq::tokenizer::LatentGrid;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// First index of the minimum squared distance, computed the obvious way.
fn brute_force(v: &Tensor, e: &Tensor) -> Vec<(usize, f64)> {
    (0..v.shape()[0])
        .map(|r| {
            let d: Vec<f64> = (0..e.shape()[0])
                .map(|i| {
                    v.row(r)
                        .iter()
                        .zip(e.row(i))
                        .map(|(a, b)| (a - b).powi(2))
                        .sum()
                })
                .collect();
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let i = d.iter().position(|&x| x == min).unwrap();
            (i, min)
        })
        .collect()
}

#[test]
fn lookup_matches_brute_force_in_both_modes() {
    for seed in 0..10 {
        let v = random(&[200, 16], seed);
        let e = random(&[64, 16], seed + 1000);
        let expect = brute_force(&v, &e);
        for exec in [Execution::Sequential, Execution::Parallel] {
            let (idx, dist) = lookup(&v, &e, exec).unwrap();
            for (k, &(i, d)) in expect.iter().enumerate() {
                assert_eq!(idx[k], i);
                assert!((dist[k] - d).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn ties_go_to_the_lowest_index() {
    let e = Tensor::new(vec![3, 2], vec![1.0, 0.0, -1.0, 0.0, 1.0, 0.0]).unwrap();
    let v = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
    assert_eq!(lookup(&v, &e, Execution::Sequential).unwrap().0, vec![0]);
}

#[test]
fn frobenius_lookup_agrees_with_flat_lookup() {
    for seed in 0..5 {
        let v = random(&[50, 16], seed);
        let e = random(&[32, 16], seed + 7);
        let flat = lookup(&v, &e, Execution::Sequential).unwrap().0;
        assert_eq!(lookup_frobenius(&v, &e, 4, 4).unwrap(), flat);
    }
}

#[test]
fn quantized_latent_holds_codewords_in_the_right_layout() {
    let z = LatentGrid::new(random(&[2, 4, 4, 16], 3)).unwrap();
    for axis in [Axis::Patch, Axis::Channel] {
        let cb = Codebook::new(axis, random(&[20, 16], 9)).unwrap();
        let q = quantize(&z, &cb).unwrap();
        let per = axis.tokens_per_image(4, 4, 16);
        assert_eq!(q.tokens_per_image(), per);
        for b in 0..2 {
            for (t, &i) in q.image_indices(b).iter().enumerate() {
                let got: Vec<f64> = match axis {
                    Axis::Channel => q.zq.channel_map(b, t),
                    Axis::Patch => {
                        q.zq.values().data()[(b * 16 + t) * 16..(b * 16 + t + 1) * 16].to_vec()
                    }
                };
                assert_eq!(got, cb.codeword(i));
            }
        }
        let dists = brute_force(&z.tokens(axis), cb.entries());
        let mean = dists.iter().map(|d| d.1).sum::<f64>() / z.values().numel() as f64;
        assert!((q.commitment_loss - mean).abs() < 1e-12);
        assert_eq!(q.codebook_loss, q.commitment_loss);
    }
}

#[test]
fn utilization_windows() {
    let mut cb = Codebook::new(Axis::Channel, random(&[8, 4], 1)).unwrap();
    assert!(cb.usage_stats(Window::Lifetime).is_err());
    let batches = [vec![0, 0, 1], vec![2], vec![1, 3, 3]];
    let mut last = 0.0;
    for b in &batches {
        cb.record(b);
        let u = cb.usage_stats(Window::Lifetime).unwrap();
        assert!(u.utilization >= last);
        last = u.utilization;
    }
    let life = cb.usage_stats(Window::Lifetime).unwrap();
    assert_eq!(life.utilization, 4.0 / 8.0);
    assert_eq!(life.dead_code_count, 4);
    assert_eq!(life.per_batch_distinct, 2);
    let recent = cb.usage_stats(Window::LastBatches(2)).unwrap();
    assert_eq!(recent.utilization, 3.0 / 8.0);
    assert!(cb.usage_stats(Window::LastBatches(0)).is_err());
    cb.reset_usage();
    assert!(cb.usage_stats(Window::Lifetime).is_err());
}

#[test]
fn separability_on_two_far_clusters() {
    let a = Tensor::new(vec![2, 1], vec![0.0, 1.0]).unwrap();
    let b = Tensor::new(vec![2, 1], vec![10.0, 11.0]).unwrap();
    let s = separability_stats(&[a, b]).unwrap();
    // Intra: ordered pairs incl. self-pairs, (0 + 1 + 1 + 0) / 4 per image.
    assert!((s.mean_intra - 0.5).abs() < 1e-12);
    assert!((s.mean_inter - 10.0).abs() < 1e-12);
    assert_eq!(s.overlap_ratio, 0.0);
}

proptest! {
    #[test]
    fn lookup_is_scale_covariant(seed in 0u64..1000, p in -2i32..3) {
        let s = 2f64.powi(p);
        let v = random(&[30, 6], seed);
        let e = random(&[12, 6], seed ^ 77);
        let (i0, d0) = lookup(&v, &e, Execution::Sequential).unwrap();
        let scale = |t: &Tensor| Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * s).collect()).unwrap();
        let (i1, d1) = lookup(&scale(&v), &scale(&e), Execution::Sequential).unwrap();
        prop_assert_eq!(i0, i1);
        for (a, b) in d0.iter().zip(&d1) {
            prop_assert_eq!(a * s * s, *b);
        }
    }

    #[test]
    fn lifetime_utilization_is_monotone(batches in prop::collection::vec(prop::collection::vec(0usize..16, 1..10), 1..20)) {
        let mut cb = Codebook::new(Axis::Patch, Tensor::zeros(&[16, 2])).unwrap();
        let mut last = 0.0;
        for b in &batches {
            cb.record(b);
            let life = cb.usage_stats(Window::Lifetime).unwrap();
            let recent = cb.usage_stats(Window::LastBatches(3)).unwrap();
            prop_assert!(life.utilization >= last);
            prop_assert!(recent.utilization <= life.utilization);
            prop_assert_eq!(life.dead_code_count, 16 - (life.utilization * 16.0).round() as usize);
            last = life.utilization;
        }
    }

    #[test]
    fn apply_mask_is_idempotent_and_nests(seed in 0u64..1000, k1 in 1usize..=8, k2 in 1usize..=8) {
        let z = LatentGrid::new(random(&[2, 2, 3, 8], seed)).unwrap();
        let m1 = TruncationMask::new(8, k1).unwrap();
        let m2 = TruncationMask::new(8, k2).unwrap();
        let once = apply_mask(&z, &m1).unwrap();
        prop_assert_eq!(&apply_mask(&once, &m1).unwrap(), &once);
        let both = apply_mask(&once, &m2).unwrap();
        let min = TruncationMask::new(8, k1.min(k2)).unwrap();
        prop_assert_eq!(both, apply_mask(&z, &min).unwrap());
        for k in 0..8 {
            let map = once.channel_map(0, k);
            if k < k1 {
                prop_assert_eq!(map, z.channel_map(0, k));
            } else {
                prop_assert!(map.iter().all(|&v| v == 0.0));
            }
        }
    }
}
