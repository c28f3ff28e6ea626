use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use scat_core::eval::{fid, mean_l1, psnr, ssim, GaussianStats};
use scat_core::imageio::PlanarImage;
use scat_core::losses;
use scat_core::mask::{compose, corrupt, stack_masks, Mask, RatioBucket};

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(48)
}

fn t(v: &[f64], shape: &[usize]) -> Tensor {
    Tensor::from_slice(v, shape, &Device::Cpu).unwrap()
}

fn s(x: &Tensor) -> f64 {
    x.to_scalar::<f64>().unwrap()
}

fn bits(x: &Tensor) -> Vec<u64> {
    x.flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap()
        .into_iter()
        .map(f64::to_bits)
        .collect()
}

/// Images `[b, 3, h, w]` in `[-1, 1]` with masks `[b, 1, h, w]`.
fn image_and_mask() -> impl Strategy<Value = (usize, usize, usize, Vec<f64>, Vec<u8>)> {
    (1usize..3, 1usize..6, 1usize..6).prop_flat_map(|(b, h, w)| {
        (
            Just(b),
            Just(h),
            Just(w),
            prop::collection::vec(-1.0f64..1.0, b * 3 * h * w),
            prop::collection::vec(0u8..2, b * h * w),
        )
    })
}

fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..0.99, n)
}

/// Reorders the leading dimension.
fn permute(x: &Tensor, order: &[usize]) -> Tensor {
    let idx = Tensor::from_vec(order.iter().map(|&i| i as u32).collect::<Vec<_>>(), order.len(), &Device::Cpu).unwrap();
    x.index_select(&idx, 0).unwrap()
}

fn planar(h: usize, w: usize, v: Vec<f64>) -> PlanarImage {
    PlanarImage::new(h, w, v).unwrap()
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn compose_and_corrupt_match_scalar_selection((b, h, w, x, m) in image_and_mask(), seed in 0u64..1000) {
        let xt = t(&x, &[b, 3, h, w]);
        let mt = Tensor::from_slice(&m, (b, 1, h, w), &Device::Cpu).unwrap();
        let x_hat: Vec<f64> = x.iter().enumerate().map(|(i, v)| (v * 0.37 + seed as f64 * 1e-3 + i as f64 * 1e-4).sin()).collect();
        let x_hat_t = t(&x_hat, &[b, 3, h, w]);
        let x_tilde = corrupt(&xt, &mt).unwrap();
        let x_bar = compose(&x_hat_t, &x_tilde, &mt).unwrap();
        let (tilde, bar) = (x_tilde.flatten_all().unwrap().to_vec1::<f64>().unwrap(), x_bar.flatten_all().unwrap().to_vec1::<f64>().unwrap());
        for bi in 0..b {
            for c in 0..3 {
                for p in 0..h * w {
                    let i = (bi * 3 + c) * h * w + p;
                    let valid = m[bi * h * w + p] == 1;
                    let want_tilde = if valid { x[i] } else { 0.0 };
                    prop_assert_eq!(tilde[i].to_bits(), want_tilde.to_bits());
                    let want_bar = if valid { x[i] } else { x_hat[i] };
                    prop_assert_eq!(bar[i].to_bits(), want_bar.to_bits());
                }
            }
        }
        // feeding x itself as the prediction rebuilds x exactly
        prop_assert_eq!(bits(&compose(&xt, &x_tilde, &mt).unwrap()), bits(&xt));
    }

    #[test]
    fn mask_ratio_counts_holes_and_ignores_order(values in prop::collection::vec(0u8..2, 1..200), shift in 0usize..200) {
        let n = values.len();
        let m = Mask::from_values(1, n, values.clone()).unwrap();
        let holes = values.iter().filter(|&&v| v == 0).count();
        prop_assert_eq!(m.ratio(), holes as f64 / n as f64);
        let mut rotated = values.clone();
        rotated.rotate_left(shift % n);
        prop_assert_eq!(Mask::from_values(1, n, rotated).unwrap().ratio(), m.ratio());
        prop_assert!((m.inverted().ratio() - (1.0 - m.ratio())).abs() < 1e-12);
    }

    #[test]
    fn mask_png_round_trip(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let values: Vec<u8> = (0..h * w).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
        let m = Mask::from_values(h, w, values).unwrap();
        prop_assert_eq!(Mask::decode_png(&m.encode_png()).unwrap(), m);
    }

    #[test]
    fn buckets_are_monotone(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(RatioBucket::classify(lo).unwrap() <= RatioBucket::classify(hi).unwrap());
    }

    #[test]
    fn scat_losses_are_nonnegative_and_batch_symmetric(p in probs(2 * 16), q in probs(2 * 16), m in prop::collection::vec(0u8..2, 2 * 16)) {
        let (pt, qt) = (t(&p, &[2, 1, 4, 4]), t(&q, &[2, 1, 4, 4]));
        let mt = Tensor::from_slice(&m, (2, 1, 4, 4), &Device::Cpu).unwrap();
        let ls = s(&losses::scat_loss_s(&pt, &qt, &mt).unwrap());
        let lg = s(&losses::scat_loss_g(&pt).unwrap());
        prop_assert!(ls >= 0.0 && lg >= 0.0);
        let swap = [1, 0];
        let ls2 = s(&losses::scat_loss_s(&permute(&pt, &swap), &permute(&qt, &swap), &permute(&mt, &swap)).unwrap());
        prop_assert!((ls - ls2).abs() < 1e-12);
        let logits: Vec<f64> = p.iter().map(|v| (v / (1.0 - v)).ln()).collect();
        let lt = t(&logits, &[2, 1, 4, 4]);
        prop_assert!(s(&losses::scat_hinge_s(&lt, &qt, &mt).unwrap()) >= 0.0);
    }

    #[test]
    fn textural_loss_properties(
        fb in prop::collection::vec(-1.0f64..1.0, 2 * 8),
        fx in prop::collection::vec(-1.0f64..1.0, 2 * 8),
        ft in prop::collection::vec(-1.0f64..1.0, 2 * 8),
    ) {
        let shape = [2, 2, 2, 2];
        let (b, x, tl) = (t(&fb, &shape), t(&fx, &shape), t(&ft, &shape));
        let base = s(&losses::textural_contrastive(&[b.clone()], &[x.clone()], &[tl.clone()]).unwrap());
        prop_assert!(base >= 0.0);
        // doubling every numerator distance doubles the loss
        let far = ((&x - &b).unwrap() * 2.0).unwrap().add(&b).unwrap();
        let doubled = s(&losses::textural_contrastive(&[b.clone()], &[far], &[tl.clone()]).unwrap());
        prop_assert!((doubled - 2.0 * base).abs() <= 1e-9 * (1.0 + base));
        let swap = [1, 0];
        let swapped = s(&losses::textural_contrastive(&[permute(&b, &swap)], &[permute(&x, &swap)], &[permute(&tl, &swap)]).unwrap());
        prop_assert!((swapped - base).abs() < 1e-12);
        prop_assert_eq!(s(&losses::textural_contrastive(&[b.clone()], &[b.clone()], &[tl]).unwrap()), 0.0);
    }

    #[test]
    fn semantic_loss_properties(
        a in prop::collection::vec(-1.0f64..1.0, 2 * 4),
        p in prop::collection::vec(-1.0f64..1.0, 2 * 4),
        n in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 4),
        step in 0.05f64..1.0,
    ) {
        let (at, pt, nt) = (t(&a, &[2, 4]), t(&p, &[2, 4]), t(&n, &[2, 3, 4]));
        let base = s(&losses::semantic_contrastive(&at, &pt, &nt, 0.07).unwrap());
        prop_assert!(base >= 0.0);
        // moving the positive toward the anchor raises the cosine and lowers the loss
        let unit = |v: &Tensor| v.broadcast_div(&v.sqr().unwrap().sum_keepdim(1).unwrap().sqrt().unwrap()).unwrap();
        let (ua, up) = (unit(&at), unit(&pt));
        let cos = (&ua * &up).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        prop_assume!(cos.iter().all(|c| *c < 0.999));
        let closer = ((&up * (1.0 - step)).unwrap() + (&ua * step).unwrap()).unwrap();
        let moved = s(&losses::semantic_contrastive(&at, &closer, &nt, 0.07).unwrap());
        prop_assert!(moved < base, "{moved} !< {base}");
        let swap = [1, 0];
        let swapped = s(&losses::semantic_contrastive(&permute(&at, &swap), &permute(&pt, &swap), &permute(&nt, &swap), 0.07).unwrap());
        prop_assert!((swapped - base).abs() < 1e-12);
    }

    #[test]
    fn hinge_and_reconstruction_are_nonnegative(r in prop::collection::vec(-3.0f64..3.0, 8), f in prop::collection::vec(-3.0f64..3.0, 8)) {
        let (rt, ft) = (t(&r, &[2, 1, 2, 2]), t(&f, &[2, 1, 2, 2]));
        prop_assert!(s(&losses::adv_hinge_d(&rt, &ft).unwrap()) >= 0.0);
        prop_assert!(s(&losses::reconstruction(&rt, &ft).unwrap()) >= 0.0);
        let swap = [1, 0];
        let a = s(&losses::adv_hinge_d(&rt, &ft).unwrap());
        let b = s(&losses::adv_hinge_d(&permute(&rt, &swap), &permute(&ft, &swap)).unwrap());
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn total_generator_is_linear(c in prop::collection::vec(-5.0f64..5.0, 4), k in -3.0f64..3.0, which in 0usize..4) {
        let w = losses::LossWeights::default();
        let eval = |v: &[f64]| {
            let ts: Vec<Tensor> = v.iter().map(|x| Tensor::new(*x, &Device::Cpu).unwrap()).collect();
            s(&losses::total_generator(&ts[0], &ts[1], &ts[2], &ts[3], &w).unwrap())
        };
        let base = eval(&c);
        let mut bumped = c.clone();
        bumped[which] += k;
        let mut unit = vec![0.0; 4];
        unit[which] = 1.0;
        let slope = eval(&unit);
        prop_assert!((eval(&bumped) - base - k * slope).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_symmetric(a in prop::collection::vec(0.0f64..1.0, 3 * 12 * 12), b in prop::collection::vec(0.0f64..1.0, 3 * 12 * 12)) {
        let (x, y) = (planar(12, 12, a), planar(12, 12, b));
        prop_assert_eq!(mean_l1(&x, &y).unwrap(), mean_l1(&y, &x).unwrap());
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        prop_assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn fid_is_symmetric_and_zero_on_itself(
        rows_a in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 4..8),
        rows_b in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 4..8),
    ) {
        let a = GaussianStats::from_embeddings(&rows_a).unwrap();
        let b = GaussianStats::from_embeddings(&rows_b).unwrap();
        let ab = fid(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - fid(&b, &a).unwrap()).abs() < 1e-8);
        prop_assert!(fid(&a, &a).unwrap().abs() < 1e-8);
        let mut reversed = rows_a.clone();
        reversed.reverse();
        let r = GaussianStats::from_embeddings(&reversed).unwrap();
        prop_assert!((&r.mean - &a.mean).norm() < 1e-12);
        prop_assert!((&r.cov - &a.cov).norm() < 1e-12);
    }
}

#[test]
fn set_mean_l1_is_the_mean_of_image_values() {
    let images: Vec<(PlanarImage, PlanarImage)> = (0..5)
        .map(|k| {
            let a: Vec<f64> = (0..3 * 16 * 16).map(|i| ((i * 7 + k * 3) % 13) as f64 / 13.0).collect();
            let b: Vec<f64> = (0..3 * 16 * 16).map(|i| ((i * 5 + k) % 11) as f64 / 11.0).collect();
            (planar(16, 16, a), planar(16, 16, b))
        })
        .collect();
    let per_image: Vec<f64> = images.iter().map(|(a, b)| mean_l1(a, b).unwrap()).collect();
    let pooled: f64 = images
        .iter()
        .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()))
        .sum::<f64>()
        / (5 * 3 * 16 * 16) as f64;
    let mean = per_image.iter().sum::<f64>() / 5.0;
    assert!((pooled - mean).abs() < 1e-12);
}

#[test]
fn stacked_masks_match_their_sources() {
    let masks: Vec<Mask> = (0..3)
        .map(|k| Mask::from_values(2, 3, (0..6).map(|i| ((i + k) % 2) as u8).collect()).unwrap())
        .collect();
    let stacked = stack_masks(&masks, &Device::Cpu).unwrap();
    assert_eq!(stacked.dims(), &[3, 1, 2, 3]);
    assert_eq!(stacked.dtype(), DType::U8);
    for (k, m) in masks.iter().enumerate() {
        assert_eq!(&Mask::from_tensor(&stacked.get(k).unwrap()).unwrap(), m);
    }
}
