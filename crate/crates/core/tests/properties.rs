use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use plumeseg::backbone::{pyramid_dims, Encoder, EncoderConfig, EXPORTED_SCALES};
use plumeseg::ctc::{correlation_volume, normalize_correlation, CorrelationVolume};
use plumeseg::decoder::{Decoder, DecoderConfig, PredictionSet};
use plumeseg::fsp::partition;
use plumeseg::loss::{hybrid_loss, pixel_weights, BOUNDARY_GAIN};
use plumeseg::metrics::{miou_mdice, score_frame};
use plumeseg::{ParamStore, Tensor};

fn tensor(shape: &[usize], values: &[f64]) -> Tensor {
    Tensor::new(shape, values.to_vec())
}

fn feature_pair() -> impl Strategy<Value = (Tensor, Tensor)> {
    (1usize..=4, 1usize..=6, 1usize..=6).prop_flat_map(|(c, h, w)| {
        let n = c * h * w;
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(-3.0f64..3.0, n),
        )
            .prop_map(move |(a, b)| (tensor(&[c, h, w], &a), tensor(&[c, h, w], &b)))
    })
}

fn binary_mask(h: usize, w: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(prop::bool::ANY, h * w).prop_map(move |v| Tensor::from_fn(&[1, h, w], |i| f64::from(v[i])))
}

fn pred_gt(max: usize) -> impl Strategy<Value = (Tensor, Tensor)> {
    (2usize..=max, 2usize..=max).prop_flat_map(|(h, w)| {
        (prop::collection::vec(0.0f64..=1.0, h * w), binary_mask(h, w))
            .prop_map(move |(p, g)| (tensor(&[1, h, w], &p), g))
    })
}

/// Every entry, query-major, through the public accessor.
fn entries(vol: &CorrelationVolume) -> Vec<f64> {
    let (h, w) = (vol.height(), vol.width());
    let mut out = Vec::with_capacity(h * w * h * w);
    for x in 0..h {
        for y in 0..w {
            for u in 0..h {
                for v in 0..w {
                    out.push(vol.get(x, y, u, v));
                }
            }
        }
    }
    out
}

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        widths: [4, 8, 8, 8],
        depths: [1, 1, 1, 1],
        heads: [1, 1, 1, 1],
        sr_ratios: [8, 4, 2, 1],
        mlp_ratio: 2,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalized_slices_sum_to_one((a, b) in feature_pair(), shift in -50.0f64..50.0) {
        let vol = normalize_correlation(&correlation_volume(&a, &b).unwrap());
        for s in vol.slice_sums() {
            prop_assert!((s - 1.0).abs() <= 1e-5);
        }
        prop_assert!(entries(&vol).iter().all(|v| (0.0..=1.0).contains(v)));
        // with f_t's first channel set to 1, shifting that channel of f_prev
        // adds the same constant to every score of a slice
        let mut shifted_b = b.clone();
        let mut a_unit = a.clone();
        for i in 0..a.shape()[1] * a.shape()[2] {
            a_unit.data_mut()[i] = 1.0;
            shifted_b.data_mut()[i] = b.data()[i] + shift;
        }
        let base = normalize_correlation(&correlation_volume(&a_unit, &b).unwrap());
        let moved = normalize_correlation(&correlation_volume(&a_unit, &shifted_b).unwrap());
        for (x, y) in entries(&base).iter().zip(&entries(&moved)) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn stabilized_softmax_matches_naive((a, b) in feature_pair()) {
        let raw = correlation_volume(&a, &b).unwrap();
        let vol = normalize_correlation(&raw);
        let naive = entries(&raw);
        let norm = entries(&vol);
        let n = raw.height() * raw.width();
        for q in 0..n {
            let z: f64 = naive[q * n..(q + 1) * n].iter().sum();
            for k in 0..n {
                prop_assert!((naive[q * n + k] / z - norm[q * n + k]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn partition_reassembles(groups in 1usize..=4, cp in 1usize..=3, h in 1usize..=4, w in 1usize..=4, seed in 0u64..1000) {
        let c3 = 3 * groups * cp;
        let mut s = seed;
        let x = Tensor::from_fn(&[c3, h, w], |_| { s = s.wrapping_mul(6364136223846793005).wrapping_add(1); (s >> 40) as f64 });
        let parts = partition(&x, groups).unwrap();
        prop_assert_eq!(parts.group_count(), groups);
        prop_assert_eq!(parts.set_channels(), cp);
        prop_assert_eq!(parts.reassemble(), x);
    }

    #[test]
    fn loss_is_finite_and_non_negative(gt in binary_mask(12, 12), scale in 0.0f64..1e4, seed in 0u64..1000) {
        let mut s = seed;
        let mut logits = |h: usize, w: usize| Tensor::from_fn(&[1, h, w], |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) * scale
        });
        let pred = PredictionSet {
            coarse_logits: logits(3, 3),
            stage_logits: vec![logits(3, 3), logits(6, 6), logits(12, 12)],
            final_prob: Tensor::zeros(&[1, 12, 12]),
        };
        let l = hybrid_loss(&pred, &gt).unwrap();
        prop_assert!(l.total.is_finite() && l.total >= 0.0);
        let mut sum = 0.0;
        for m in &l.per_map {
            prop_assert!(m.ce_w.is_finite() && m.ce_w >= 0.0);
            prop_assert!(m.iou_w.is_finite() && m.iou_w >= 0.0);
            sum += m.ce_w + m.iou_w;
        }
        prop_assert_eq!(sum, l.total);
    }

    #[test]
    fn boundary_weights_stay_in_range(gt in binary_mask(9, 13)) {
        let w = pixel_weights(&gt).unwrap();
        prop_assert!(w.data().iter().all(|&v| (1.0..=1.0 + BOUNDARY_GAIN).contains(&v)));
    }

    #[test]
    fn metric_ranges((p, g) in pred_gt(10)) {
        let s = score_frame(&p, &g).unwrap();
        for v in [s.s_alpha, s.f_beta_w, s.mae, s.e_phi, s.iou, s.dice] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v), "{:?}", s);
        }
        prop_assert!(s.dice >= s.iou);
    }

    #[test]
    fn pixelwise_metrics_ignore_relabeling((p, g) in pred_gt(8), seed in 0u64..1000) {
        let (_, h, w) = g.dims3();
        let a = score_frame(&p, &g).unwrap();
        let mut order: Vec<usize> = (0..h * w).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let perm = |t: &Tensor| Tensor::from_fn(&[1, h, w], |i| t.data()[order[i]]);
        let c = score_frame(&perm(&p), &perm(&g)).unwrap();
        prop_assert!((a.mae - c.mae).abs() < 1e-12);
        prop_assert!((a.e_phi - c.e_phi).abs() < 1e-12);
        prop_assert_eq!((a.iou, a.dice), (c.iou, c.dice));
    }

    #[test]
    fn flipping_pixels_never_helps(g in binary_mask(8, 8), start in prop::collection::vec(prop::bool::ANY, 64), order in Just((0..64).collect::<Vec<usize>>()).prop_shuffle()) {
        let mut pred = Tensor::from_fn(&[1, 8, 8], |i| f64::from(start[i]));
        let (mut iou, mut dice) = miou_mdice(&pred, &g, 0.5).unwrap();
        for &i in &order {
            let wrong = 1.0 - g.data()[i];
            if pred.data()[i] == wrong {
                continue;
            }
            pred.data_mut()[i] = wrong;
            let (ni, nd) = miou_mdice(&pred, &g, 0.5).unwrap();
            prop_assert!(ni <= iou && nd <= dice);
            iou = ni;
            dice = nd;
        }
        prop_assert_eq!(iou, 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pyramid_scale_contract(hk in 1usize..=4, wk in 1usize..=4, seed in 0u64..100) {
        let (h, w) = (32 * hk, 32 * wk);
        let cfg = tiny_encoder();
        let mut ps = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = Encoder::new(&cfg, &mut ps, &mut rng, "e").unwrap();
        let dec = Decoder::new(
            &DecoderConfig { width: 8, groups: 4, units: 2 },
            [cfg.scale_width(2), cfg.scale_width(3), cfg.scale_width(4)],
            &mut ps,
            &mut rng,
            "d",
        )
        .unwrap();
        let frame = Tensor::from_fn(&[1, h, w], |i| ((i * 31) % 101) as f64 / 100.0);
        let pyr = enc.encode(&ps, &frame).unwrap();
        for (t, &s) in pyr.levels().iter().zip(&EXPORTED_SCALES) {
            let (_, fh, fw) = t.dims3();
            prop_assert_eq!((fh, fw), (h >> (s + 1), w >> (s + 1)));
            prop_assert_eq!((fh, fw), pyramid_dims(h, w, s));
        }
        let again = enc.encode(&ps, &frame).unwrap();
        prop_assert_eq!(&again, &pyr);
        let l = pyr.levels();
        let out = dec.decode(&ps, [&l[0], &l[1], &l[2]], h, w).unwrap();
        prop_assert_eq!(out.final_prob.shape(), &[1, h, w]);
        prop_assert!(out.final_prob.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
