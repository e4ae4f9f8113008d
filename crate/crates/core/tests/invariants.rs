use approx::assert_abs_diff_eq;
use candle_core::{Device, Tensor, Var};
use dragvideo::codec::VideoFrames;
use dragvideo::dove::{disc_offsets, drag_direction, l1_norm};
use dragvideo::instruction::{dilate_along_drag, downsample_mask, extend_mask, Mask, Point};
use dragvideo::msa::softmax_last;
use dragvideo::pipeline::preprocess::{resample, resize_divisible};
use proptest::prelude::*;

fn mask_strategy() -> impl Strategy<Value = Mask> {
    (2usize..12, 2usize..12, proptest::collection::vec(any::<bool>(), 144))
        .prop_map(|(h, w, bits)| Mask::from_fn(h, w, |y, x| bits[y * 12 + x]))
}

proptest! {
    #[test]
    fn disc_offsets_match_brute_force(r in 0usize..8) {
        let offsets = disc_offsets(r);
        let ri = r as i64;
        let mut expected = 0;
        for dy in -ri..=ri {
            for dx in -ri..=ri {
                if dx * dx + dy * dy <= ri * ri {
                    expected += 1;
                    prop_assert!(offsets.contains(&(dx, dy)));
                    prop_assert!(offsets.contains(&(-dx, -dy)));
                }
            }
        }
        prop_assert_eq!(offsets.len(), expected);
        prop_assert!(offsets.contains(&(0, 0)));
    }

    #[test]
    fn drag_direction_is_unit_or_zero(px in -50.0..50.0f64, py in -50.0..50.0f64, tx in -50.0..50.0f64, ty in -50.0..50.0f64) {
        let d = drag_direction(Point::new(px, py), Point::new(tx, ty));
        let n = d.x.hypot(d.y);
        if px == tx && py == ty {
            prop_assert_eq!(n, 0.0);
        } else {
            assert_abs_diff_eq!(n, 1.0, epsilon = 1e-12);
            prop_assert!(d.x * (tx - px) + d.y * (ty - py) > 0.0);
        }
    }

    #[test]
    fn l1_norm_and_its_gradient(xs in proptest::collection::vec(-3i32..=3, 1..20)) {
        let values: Vec<f64> = xs.iter().map(|&v| v as f64 * 0.5).collect();
        let var = Var::from_tensor(&Tensor::new(values.as_slice(), &Device::Cpu).unwrap()).unwrap();
        let loss = l1_norm(var.as_tensor()).unwrap();
        assert_abs_diff_eq!(loss.to_scalar::<f64>().unwrap(), values.iter().map(|v| v.abs()).sum::<f64>(), epsilon = 1e-12);
        let grad = loss.backward().unwrap().get(var.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        for (g, v) in grad.iter().zip(&values) {
            let sign = if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 };
            prop_assert_eq!(*g, sign);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(xs in proptest::collection::vec(-20.0..20.0f64, 12)) {
        let x = Tensor::from_vec(xs.clone(), (3, 4), &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for (row, input) in s.iter().zip(xs.chunks(4)) {
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            let denom: f64 = input.iter().map(|v| v.exp()).sum();
            for (p, v) in row.iter().zip(input) {
                assert_abs_diff_eq!(*p, v.exp() / denom, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn extend_mask_is_monotone(mask in mask_strategy(), r in 0usize..4) {
        let grown = extend_mask(&mask, r);
        prop_assert!(mask.is_subset_of(&grown));
        prop_assert!(grown.is_subset_of(&extend_mask(&mask, r + 1)));
        prop_assert_eq!(extend_mask(&mask, 0), mask);
    }

    #[test]
    fn dilated_mask_covers_target(mask in mask_strategy(), hx in 0.0..1.0f64, hy in 0.0..1.0f64, tx in 0.0..1.0f64, ty in 0.0..1.0f64) {
        let (w, h) = ((mask.width() - 1) as f64, (mask.height() - 1) as f64);
        let handle = Point::new(hx * w, hy * h);
        let target = Point::new(tx * w, ty * h);
        let out = dilate_along_drag(&mask, handle, target);
        prop_assert!(mask.is_subset_of(&out));
        prop_assert!(out.contains(target));
        if mask.contains(target) {
            prop_assert_eq!(out, mask);
        } else {
            prop_assert!(out.contains(handle));
        }
    }

    #[test]
    fn downsample_is_max_pool(mask in mask_strategy(), factor in 1usize..4) {
        let (h, w) = (mask.height() / factor * factor, mask.width() / factor * factor);
        prop_assume!(h > 0 && w > 0);
        let cropped = Mask::from_fn(h, w, |y, x| mask.get(y, x));
        let pooled = downsample_mask(&cropped, factor).unwrap();
        for y in 0..h / factor {
            for x in 0..w / factor {
                let any = (0..factor).any(|dy| (0..factor).any(|dx| cropped.get(y * factor + dy, x * factor + dx)));
                prop_assert_eq!(pooled.get(y, x), any);
            }
        }
    }

    #[test]
    fn resample_keeps_floor_count(n in 1usize..60, fps in 1u32..30, ratio in 0.05..1.0f64) {
        let fps = fps as f64;
        let kps = fps * ratio;
        let video = VideoFrames::from_fn(n, 2, 2, fps, |f, _, _| [f as u8, 0, 0]).unwrap();
        let expected = (n as f64 * kps / fps + 1e-9).floor() as usize;
        match resample(&video, kps) {
            Ok(out) => {
                prop_assert_eq!(out.frames(), expected);
                let picked: Vec<u8> = (0..out.frames()).map(|k| out.pixel(k, 0, 0)[0]).collect();
                prop_assert!(picked.windows(2).all(|p| p[0] < p[1]));
            }
            Err(_) => prop_assert_eq!(expected, 0),
        }
    }

    #[test]
    fn resize_sides_are_multiples(h in 16usize..70, w in 16usize..70, max_side in proptest::option::of(16usize..64)) {
        let video = VideoFrames::from_fn(1, h, w, 8.0, |_, y, x| [(x + y) as u8, 0, 0]).unwrap();
        let Ok(out) = resize_divisible(&video, 16, max_side) else {
            let scale = max_side.map_or(1.0, |m| (m as f64 / h.max(w) as f64).min(1.0));
            prop_assert!(((h.min(w) as f64) * scale) < 16.0);
            return Ok(());
        };
        prop_assert_eq!(out.height() % 16, 0);
        prop_assert_eq!(out.width() % 16, 0);
        prop_assert!(out.height() <= h && out.width() <= w);
        if let Some(m) = max_side {
            prop_assert!(out.height().max(out.width()) <= m.max(16));
        }
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let xs = [0.3, -1.2, 2.0, 0.7, -0.4, 1.1];
    let weights = Tensor::new(&[[0.5, -1.0, 2.0], [1.5, 0.25, -0.75]], &Device::Cpu).unwrap();
    let f = |v: &Tensor| (softmax_last(v).unwrap() * &weights).unwrap().sum_all().unwrap();
    let var = Var::from_tensor(&Tensor::from_slice(&xs, (2, 3), &Device::Cpu).unwrap()).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let grad = grads
        .get(var.as_tensor())
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1::<f64>()
        .unwrap();
    let h = 1e-6;
    for i in 0..xs.len() {
        let eval = |delta: f64| {
            let mut p = xs;
            p[i] += delta;
            f(&Tensor::from_slice(&p, (2, 3), &Device::Cpu).unwrap())
                .to_scalar::<f64>()
                .unwrap()
        };
        assert_abs_diff_eq!(grad[i], (eval(h) - eval(-h)) / (2.0 * h), epsilon = 1e-8);
    }
}
