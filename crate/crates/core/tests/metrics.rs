mod common;

use drct::data::{axis_taps, resize_bicubic, Dihedral};
use drct::eval::{crop_border, crop_pixels_for_scale, psnr, self_ensemble, ssim, BicubicUpscaler, Upscaler};
use drct::image::{ImageTensor, ValueRange};
use proptest::prelude::*;
use rand::Rng;

fn noisy_copy(img: &ImageTensor, seed: u64, amp: f32) -> ImageTensor {
    let mut r = common::rng(seed);
    img.map(|v| (v + r.random_range(-amp..amp)).clamp(0.0, 1.0)).unwrap()
}

#[test]
fn psnr_and_ssim_match_direct_formulas() {
    for k in 0..20u64 {
        let a = common::random_image(1, 16, 16, k);
        let b = noisy_copy(&a, 100 + k, 0.1);
        let p = psnr(&a, &b, 0).unwrap();
        let s = ssim(&a, &b, 0).unwrap();
        assert!((p - common::psnr_direct(&a, &b, 0)).abs() < 1e-6);
        assert!((s - common::ssim_direct(&a, &b, 0)).abs() < 1e-6);
    }
}

#[test]
fn identical_images_hit_the_caps() {
    let a = common::random_image(1, 16, 16, 3);
    assert_eq!(psnr(&a, &a, 0).unwrap(), 100.0);
    assert!((ssim(&a, &a, 0).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn border_corruption_inside_crop_is_ignored() {
    for scale in [2, 3, 4] {
        let crop = crop_pixels_for_scale(scale);
        assert_eq!(crop, 2 * scale);
        let size = 2 * crop + 12;
        let hr = common::random_image(1, size, size, scale as u64);
        let sr = noisy_copy(&hr, 7, 0.05);
        let corrupted = ImageTensor::from_fn([1, 3, size, size], ValueRange::Unit, |b, c, y, x| {
            let border = y < crop || x < crop || y >= size - crop || x >= size - crop;
            if border {
                1.0 - sr.get(b, c, y, x)
            } else {
                sr.get(b, c, y, x)
            }
        })
        .unwrap();
        assert_eq!(psnr(&sr, &hr, crop).unwrap(), psnr(&corrupted, &hr, crop).unwrap());
        assert_eq!(ssim(&sr, &hr, crop).unwrap(), ssim(&corrupted, &hr, crop).unwrap());
        assert!(psnr(&sr, &hr, 0).unwrap() != psnr(&corrupted, &hr, 0).unwrap());
    }
}

#[test]
fn metrics_reject_bad_inputs() {
    let a = common::random_image(1, 16, 16, 0);
    let b = common::random_image(1, 16, 15, 0);
    assert!(psnr(&a, &b, 0).is_err());
    assert!(crop_border(&a, 8).is_err());
    assert!(ssim(&a, &a, 3).is_err());
}

#[test]
fn eight_bit_and_unit_inputs_agree() {
    let a = common::random_image(1, 16, 16, 1);
    let b = noisy_copy(&a, 2, 0.1);
    let p1 = psnr(&a, &b, 0).unwrap();
    let p2 = psnr(&a.quantize_u8(), &b.quantize_u8(), 0).unwrap();
    assert!((p1 - p2).abs() < 1e-12);
}

#[test]
fn bicubic_matches_direct_oracle() {
    for (h, w, oh, ow) in [(8, 8, 4, 4), (8, 8, 16, 16), (12, 9, 4, 3), (5, 7, 15, 21)] {
        let img = common::random_image(1, h, w, (h * w) as u64);
        let out = resize_bicubic(&img, oh, ow, true).unwrap();
        for c in 0..3 {
            let plane: Vec<f64> = img.plane(0, c).iter().map(|&v| v as f64).collect();
            let want = common::resize_plane_direct(&plane, h, w, oh, ow);
            for (g, w) in out.plane(0, c).iter().zip(&want) {
                assert!((*g as f64 - w).abs() < 1e-6, "{h}x{w}->{oh}x{ow}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn bicubic_weights_sum_to_one() {
    for (n, m) in [(8, 4), (8, 16), (17, 5), (3, 12), (1, 4)] {
        for t in axis_taps(n, m, true) {
            assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(t.indices.iter().all(|&i| i < n));
        }
    }
}

#[test]
fn self_ensemble_of_equivariant_operator_is_single_pass() {
    let up = BicubicUpscaler { scale: 2 };
    for (h, w) in [(6, 6), (5, 9), (8, 3)] {
        let lr = common::random_image(1, h, w, (h + w) as u64);
        let single = up.upscale(&lr).unwrap();
        let ens = self_ensemble(&up, &lr).unwrap();
        assert_eq!(ens.shape(), single.shape());
        assert!(ens.max_abs_diff(&single) < 1e-6);
    }
}

#[test]
fn dihedral_transforms_invert() {
    let img = common::random_image(1, 4, 7, 9);
    for d in Dihedral::all() {
        let t = d.apply(&img);
        if d.swaps_axes() {
            assert_eq!((t.height(), t.width()), (7, 4));
        }
        assert_eq!(d.invert(&t), img);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn bicubic_preserves_constants(v in 0.0f32..1.0, h in 1usize..12, w in 1usize..12, oh in 1usize..20, ow in 1usize..20) {
        let img = ImageTensor::filled([1, 3, h, w], v, ValueRange::Unit).unwrap();
        let out = resize_bicubic(&img, oh, ow, true).unwrap();
        prop_assert!(out.data().iter().all(|x| (x - v).abs() < 1e-6));
    }

    #[test]
    fn psnr_is_symmetric(seed in 0u64..1000) {
        let a = common::random_image(1, 12, 12, seed);
        let b = noisy_copy(&a, seed + 1, 0.2);
        prop_assert_eq!(psnr(&a, &b, 0).unwrap(), psnr(&b, &a, 0).unwrap());
    }
}
