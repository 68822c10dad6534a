use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seascn::dataio::{rle_decode, rle_encode, tile, tile_origins, Category, RgbImage, MIN_CLIPPED_AREA};
use seascn::detector::postprocess::{nms, Candidate};
use seascn::eval::{evaluate_images, iou_mask, EvalConfig, GroundTruth, ImageEval, Prediction};
use seascn::sea::rescale_pyramid_tensor;
use seascn::supervision::{instances_to_semantic_map, roi_mask_targets};
use seascn::config::TileConfig;
use seascn::{iou_box, BBox, BinaryMask, FeaturePyramid, Graph, InstanceAnnotation, Tensor};

mod common;
use common::eval_oracle;

fn mask_from_bits(h: usize, w: usize, bits: &[bool]) -> BinaryMask {
    BinaryMask::from_fn(h, w, |y, x| bits[(y * w + x) % bits.len()])
}

fn blob<R: Rng>(rng: &mut R, h: usize, w: usize) -> BinaryMask {
    let cx = rng.random_range(0.0..w as f64);
    let cy = rng.random_range(0.0..h as f64);
    let rx = rng.random_range(1.0..w as f64 / 2.0);
    let ry = rng.random_range(1.0..h as f64 / 2.0);
    BinaryMask::from_fn(h, w, |y, x| {
        let dx = (x as f64 + 0.5 - cx) / rx;
        let dy = (y as f64 + 0.5 - cy) / ry;
        dx * dx + dy * dy <= 1.0
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rle_round_trips(h in 1usize..24, w in 1usize..24, bits in prop::collection::vec(any::<bool>(), 1..64)) {
        let m = mask_from_bits(h, w, &bits);
        let r = rle_encode(&m);
        prop_assert_eq!(r.counts.iter().sum::<u64>(), (h * w) as u64);
        prop_assert_eq!(r.area(), m.area() as u64);
        prop_assert_eq!(rle_decode(&r).unwrap(), m);
    }

    #[test]
    fn tile_origins_cover_every_pixel(dim in 1usize..3000, patch in 1usize..1200, frac in 0.0f64..1.0) {
        // strides beyond the patch leave gaps by construction
        let stride = 1 + (frac * patch as f64) as usize;
        let stride = stride.min(patch);
        let o = tile_origins(dim, patch, stride).unwrap();
        prop_assert_eq!(o[0], 0);
        prop_assert!(o.windows(2).all(|p| p[0] < p[1] && p[1] - p[0] <= stride));
        if dim <= patch {
            prop_assert_eq!(o.len(), 1);
        } else {
            prop_assert_eq!(*o.last().unwrap(), dim - patch);
            // every position lies in some patch
            let mut covered = vec![false; dim];
            for &s in &o {
                for c in &mut covered[s..s + patch] {
                    *c = true;
                }
            }
            prop_assert!(covered.iter().all(|&c| c));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tiles_carry_clipped_instances(seed in any::<u64>(), h in 40usize..120, w in 40usize..120, patch in 16usize..40, stride in 8usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let anns: Vec<InstanceAnnotation> = (0..rng.random_range(1..5))
            .filter_map(|i| InstanceAnnotation::from_mask(1 + i % 2, blob(&mut rng, h, w)))
            .collect();
        let cfg = TileConfig { patch, stride, keep_empty: true, pad: false };
        let tiles = tile(&RgbImage::new(h, w), &anns, &cfg).unwrap();
        let ys = tile_origins(h, patch, stride).unwrap();
        let xs = tile_origins(w, patch, stride).unwrap();
        prop_assert_eq!(tiles.len(), ys.len() * xs.len());
        for t in &tiles {
            let (x0, y0) = t.origin;
            let expected: Vec<(usize, BinaryMask)> = anns
                .iter()
                .map(|a| (a.class_id, a.mask.crop(x0 as isize, y0 as isize, patch, patch)))
                .filter(|(_, m)| m.area() >= MIN_CLIPPED_AREA)
                .collect();
            prop_assert_eq!(t.annotations.len(), expected.len());
            for (a, (c, m)) in t.annotations.iter().zip(&expected) {
                prop_assert_eq!(a.class_id, *c);
                prop_assert_eq!(&a.mask, m);
                prop_assert_eq!(a.area, m.area());
                prop_assert_eq!(Some(a.bbox), m.bbox());
            }
        }
    }

    #[test]
    fn semantic_map_ignores_annotation_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.random_range(4..30), rng.random_range(4..30));
        let mut anns: Vec<InstanceAnnotation> = (0..rng.random_range(0..7))
            .filter_map(|_| {
                let c = rng.random_range(1..4);
                InstanceAnnotation::from_mask(c, blob(&mut rng, h, w))
            })
            .collect();
        let reference = instances_to_semantic_map(&anns, h, w).unwrap();
        for _ in 0..4 {
            for i in (1..anns.len()).rev() {
                anns.swap(i, rng.random_range(0..=i));
            }
            prop_assert_eq!(&instances_to_semantic_map(&anns, h, w).unwrap(), &reference);
        }
    }

    #[test]
    fn nms_output_is_consistent(seed in any::<u64>(), thr in 0.1f64..0.9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cands: Vec<Candidate> = (0..rng.random_range(0..40))
            .map(|_| Candidate {
                bbox: BBox::new(rng.random_range(0.0..50.0), rng.random_range(0.0..50.0), rng.random_range(1.0..30.0), rng.random_range(1.0..30.0)),
                score: f64::from(rng.random_range(0..20u32)) / 20.0,
                class_id: rng.random_range(1..4),
            })
            .collect();
        let kept = nms(&cands, thr);
        prop_assert!(kept.windows(2).all(|k| cands[k[0]].score >= cands[k[1]].score));
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                let (p, q) = (&cands[a], &cands[b]);
                prop_assert!(p.class_id != q.class_id || iou_box(&p.bbox, &q.bbox) <= thr);
            }
        }
        for (i, c) in cands.iter().enumerate() {
            if !kept.contains(&i) {
                let suppressor = kept.iter().any(|&k| {
                    let o = &cands[k];
                    o.class_id == c.class_id && o.score >= c.score && iou_box(&o.bbox, &c.bbox) > thr
                });
                prop_assert!(suppressor);
            }
        }
    }
}

/// Pyramid whose P2 is `h2 x w2`, filled by `f(level_index, element)`.
fn pyramid(c: usize, h2: usize, w2: usize, mut f: impl FnMut(usize, usize) -> f64) -> FeaturePyramid<f64> {
    FeaturePyramid::new(
        (0..5)
            .map(|i| {
                let shape = [1, c, h2 >> i, w2 >> i];
                let n = shape.iter().product();
                Tensor::from_vec(&shape, (0..n).map(|e| f(i, e)).collect()).unwrap()
            })
            .collect(),
    )
    .unwrap()
}

fn combine(a: &FeaturePyramid<f64>, b: &FeaturePyramid<f64>, alpha: f64, beta: f64) -> FeaturePyramid<f64> {
    FeaturePyramid::new(
        a.levels()
            .iter()
            .zip(b.levels())
            .map(|(x, y)| {
                let d = x.data().iter().zip(y.data()).map(|(&p, &q)| alpha * p + beta * q).collect();
                Tensor::from_vec(x.shape(), d).unwrap()
            })
            .collect(),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Entries are multiples of 5 and the coefficients are integers, so every
    // resize, sum and the 1/5 weighting is exact in binary floating point and
    // linearity can be demanded bit for bit.
    #[test]
    fn rescale_is_exactly_linear(seed in any::<u64>(), alpha in -4i32..=4, beta in -4i32..=4, level in 3usize..=6, hs in 1usize..=2, ws in 1usize..=3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h2, w2) = (16 * hs, 16 * ws);
        let a = pyramid(2, h2, w2, |_, _| 5.0 * f64::from(rng.random_range(-8i32..=8)));
        let b = pyramid(2, h2, w2, |_, _| 5.0 * f64::from(rng.random_range(-8i32..=8)));
        let (alpha, beta) = (f64::from(alpha), f64::from(beta));
        let lhs = rescale_pyramid_tensor(&combine(&a, &b, alpha, beta), level);
        let ra = rescale_pyramid_tensor(&a, level);
        let rb = rescale_pyramid_tensor(&b, level);
        for ((&l, &p), &q) in lhs.data().iter().zip(ra.data()).zip(rb.data()) {
            prop_assert_eq!(l, alpha * p + beta * q);
        }
    }

    #[test]
    fn rescale_is_linear_for_real_inputs(seed in any::<u64>(), alpha in -3.0f64..3.0, beta in -3.0f64..3.0, level in 3usize..=6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = pyramid(3, 32, 32, |_, _| rng.random_range(-1.0..1.0));
        let b = pyramid(3, 32, 32, |_, _| rng.random_range(-1.0..1.0));
        let lhs = rescale_pyramid_tensor(&combine(&a, &b, alpha, beta), level);
        let ra = rescale_pyramid_tensor(&a, level);
        let rb = rescale_pyramid_tensor(&b, level);
        for ((&l, &p), &q) in lhs.data().iter().zip(ra.data()).zip(rb.data()) {
            prop_assert!((l - (alpha * p + beta * q)).abs() <= 1e-14 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn constant_pyramid_maps_to_its_constant(k in -(1i64 << 40)..(1i64 << 40), level in 3usize..=6) {
        let c = k as f64 / 1024.0;
        let out = rescale_pyramid_tensor(&pyramid(2, 32, 48, |_, _| c), level);
        prop_assert!(out.data().iter().all(|&v| v == c));
    }

    #[test]
    fn per_level_constants_average(vals in prop::array::uniform5(-1000i32..1000), level in 3usize..=6) {
        let v = vals.map(|x| f64::from(x) / 64.0);
        let out = rescale_pyramid_tensor(&pyramid(2, 32, 32, |i, _| v[i]), level);
        let mean = (v[0] + v[1] + v[2] + v[3] + v[4]) * (1.0 / 5.0);
        prop_assert!(out.data().iter().all(|&x| x == mean));
    }
}

/// Bilinear sample with half-pixel centers and edge clamping, written as a
/// sum of tent weights over all source pixels.
fn bilinear_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n: usize, on: usize| ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, n as f64 - 1.0);
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let sy = coord(oy, h, oh);
        for ox in 0..ow {
            let sx = coord(ox, w, ow);
            let mut v = 0.0;
            for y in 0..h {
                for x in 0..w {
                    let wy = (1.0 - (sy - y as f64).abs()).max(0.0);
                    let wx = (1.0 - (sx - x as f64).abs()).max(0.0);
                    v += wy * wx * src[y * w + x];
                }
            }
            out.push(v);
        }
    }
    out
}

fn avg_pool_oracle(src: &[f64], h: usize, w: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::new();
    for oy in 0..h / k {
        for ox in 0..w / k {
            let cells: Vec<f64> = (0..k * k).map(|i| src[(oy * k + i / k) * w + ox * k + i % k]).collect();
            out.push(cells.iter().sum::<f64>() / cells.len() as f64);
        }
    }
    out
}

#[test]
fn two_by_two_ramp_upsamples_to_known_values() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::from_vec(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    let y = g.resize_bilinear(x, 4, 4);
    #[rustfmt::skip]
    let expected = [
        0.0, 0.25, 0.75, 1.0,
        0.5, 0.75, 1.25, 1.5,
        1.5, 1.75, 2.25, 2.5,
        2.0, 2.25, 2.75, 3.0,
    ];
    for (got, want) in g.value(y).data().iter().zip(expected) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn bilinear_matches_tent_oracle(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, oh in 1usize..20, ow in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src: Vec<f64> = (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_vec(&[1, 1, h, w], src.clone()).unwrap());
        let y = g.resize_bilinear(x, oh, ow);
        for (got, want) in g.value(y).data().iter().zip(bilinear_oracle(&src, h, w, oh, ow)) {
            prop_assert!((got - want).abs() < 1e-6, "{} vs {}", got, want);
        }
    }

    #[test]
    fn avg_pool_matches_block_mean(seed in any::<u64>(), k in 1usize..5, bh in 1usize..6, bw in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (k * bh, k * bw);
        let src: Vec<f64> = (0..h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut g = Graph::<f64>::inference();
        let x = g.constant(Tensor::from_vec(&[1, 1, h, w], src.clone()).unwrap());
        let y = g.avg_pool(x, k);
        for (got, want) in g.value(y).data().iter().zip(avg_pool_oracle(&src, h, w, k)) {
            prop_assert!((got - want).abs() < 1e-6);
        }
    }
}

/// A superset of `a`: `a` with extra random blobs OR-ed in.
fn superset<R: Rng>(rng: &mut R, a: &BinaryMask) -> BinaryMask {
    let mut b = a.clone();
    for _ in 0..rng.random_range(0..3) {
        b.union_with(&blob(rng, a.height(), a.width()));
    }
    b
}

#[test]
fn mask_targets_are_monotone_in_the_mask() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..200 {
        let (h, w) = (rng.random_range(20..80), rng.random_range(20..80));
        let small = blob(&mut rng, h, w);
        if small.area() == 0 {
            continue;
        }
        let big = superset(&mut rng, &small);
        let a = InstanceAnnotation::from_mask(1, small).unwrap();
        let b = InstanceAnnotation::from_mask(1, big).unwrap();
        let x = rng.random_range(-5.0..w as f64 - 2.0);
        let y = rng.random_range(-5.0..h as f64 - 2.0);
        let p = BBox::new(x, y, rng.random_range(1.0..w as f64), rng.random_range(1.0..h as f64));
        let ta = roi_mask_targets(&a, &p).unwrap();
        let tb = roi_mask_targets(&b, &p).unwrap();
        for i in 0..3 {
            let (ma, mb) = (ta.path(i), tb.path(i));
            assert!(
                ma.data().iter().zip(mb.data()).all(|(&u, &v)| u <= v),
                "case {case} path {i}"
            );
        }
    }
}

fn categories() -> Vec<Category> {
    vec![
        Category { id: 1, name: "a".into() },
        Category { id: 2, name: "b".into() },
    ]
}

#[test]
fn evaluator_matches_brute_force_on_micro_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..500 {
        let (images, cats, cfg) = eval_oracle::micro_case(&mut rng);
        let report = evaluate_images(&images, &cats, &cfg).unwrap();
        let oracle = eval_oracle::brute_force(&images, &cats, &cfg);
        assert!(
            eval_oracle::same_summaries(&report, &oracle),
            "case {case}: {:?} / {:?} vs {:?}",
            report.bbox,
            report.segm,
            oracle
        );
    }
}

fn rect_gt(class_id: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> GroundTruth {
    let mask = BinaryMask::rect(12, 16, x0, y0, x1, y1);
    GroundTruth { class_id, bbox: mask.bbox().unwrap(), mask }
}

fn exact_det(g: &GroundTruth, score: f64) -> Prediction {
    Prediction { class_id: g.class_id, score, bbox: g.bbox, mask: g.mask.clone() }
}

fn overall(r: &seascn::eval::EvalReport) -> [Option<f64>; 2] {
    [r.bbox.ap, r.segm.ap]
}

fn at_most(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a <= b + 1e-12,
        (None, None) => true,
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    // gts live in columns 0..11 of a 12x16 frame; the extra FP sits in 12..16
    #[test]
    fn ap_monotonicity(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gts = Vec::new();
        for _ in 0..rng.random_range(1..4) {
            let x0 = rng.random_range(0..9);
            let y0 = rng.random_range(0..10);
            gts.push(rect_gt(rng.random_range(1..3), x0, y0, rng.random_range(x0 + 1..=11), rng.random_range(y0 + 1..=12)));
        }
        let lonely = rect_gt(rng.random_range(1..3), 0, 0, 11, 12);
        let mut dets = Vec::new();
        for g in &gts {
            if rng.random_bool(0.7) {
                let mut d = exact_det(g, rng.random_range(0.1..1.0));
                d.bbox.w += f64::from(rng.random_range(0..3u8));
                dets.push(d);
            }
        }
        for _ in 0..rng.random_range(0..3) {
            let x0 = rng.random_range(0..10);
            let m = BinaryMask::rect(12, 16, x0, 0, x0 + 1, 1);
            dets.push(Prediction { class_id: rng.random_range(1..3), score: rng.random_range(0.1..1.0), bbox: m.bbox().unwrap(), mask: m });
        }
        let cfg = EvalConfig::default();
        let base = ImageEval { gts: gts.clone(), dets: dets.clone() };
        let before = overall(&evaluate_images(&[base.clone()], &categories(), &cfg).unwrap());

        // the unmatched gt covers the whole left block; nothing reaches IoU 0.5 with it
        let mut with_gt = base.clone();
        with_gt.gts.push(lonely.clone());
        let no_tp = overall(&evaluate_images(&[with_gt.clone()], &categories(), &cfg).unwrap());
        let unmatched_everywhere = with_gt
            .dets
            .iter()
            .all(|d| iou_box(&d.bbox, &lonely.bbox) < 0.5 && iou_mask(&d.mask, &lonely.mask).unwrap() < 0.5);
        if unmatched_everywhere {
            let mut with_tp = with_gt.clone();
            with_tp.dets.push(exact_det(&lonely, rng.random_range(0.05..1.0)));
            let after = overall(&evaluate_images(&[with_tp], &categories(), &cfg).unwrap());
            for (b, a) in no_tp.iter().zip(after) {
                prop_assert!(at_most(*b, a), "adding a TP lowered AP: {:?} -> {:?}", b, a);
            }
        }

        let floor = dets.iter().map(|d| d.score).fold(1.0, f64::min);
        let mut with_fp = base.clone();
        let m = BinaryMask::rect(12, 16, 12, 4, 16, 9);
        with_fp.dets.push(Prediction { class_id: rng.random_range(1..3), score: floor * 0.5, bbox: m.bbox().unwrap(), mask: m });
        let after = overall(&evaluate_images(&[with_fp], &categories(), &cfg).unwrap());
        for (b, a) in before.iter().zip(after) {
            prop_assert!(at_most(a, *b), "adding a low FP raised AP: {:?} -> {:?}", b, a);
        }
    }
}

#[test]
fn relabeling_classes_leaves_the_report_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let (images, cats, cfg) = eval_oracle::micro_case(&mut rng);
        let base = evaluate_images(&images, &cats, &cfg).unwrap();
        let relabel = |c: usize| if c == 1 { 17 } else { 4 };
        let cats2: Vec<Category> = cats.iter().map(|c| Category { id: relabel(c.id), name: c.name.clone() }).collect();
        let images2: Vec<ImageEval> = images
            .iter()
            .map(|im| ImageEval {
                gts: im.gts.iter().map(|g| GroundTruth { class_id: relabel(g.class_id), ..g.clone() }).collect(),
                dets: im.dets.iter().map(|d| Prediction { class_id: relabel(d.class_id), ..d.clone() }).collect(),
            })
            .collect();
        let moved = evaluate_images(&images2, &cats2, &cfg).unwrap();
        assert_eq!(moved.bbox, base.bbox);
        assert_eq!(moved.segm, base.segm);
        for (a, b) in moved.per_class.iter().zip(&base.per_class) {
            assert_eq!(a.class_id, relabel(b.class_id));
            assert_eq!((a.ap_box, a.ap_mask), (b.ap_box, b.ap_mask));
        }
        // listing the categories in the other order only reorders the class mean
        let swapped: Vec<Category> = cats2.iter().rev().cloned().collect();
        let rev = evaluate_images(&images2, &swapped, &cfg).unwrap();
        for (x, y) in [(rev.bbox, base.bbox), (rev.segm, base.segm)] {
            for (p, q) in [(x.ap, y.ap), (x.ap50, y.ap50), (x.ap75, y.ap75), (x.ap_s, y.ap_s), (x.ap_m, y.ap_m), (x.ap_l, y.ap_l)] {
                assert!(match (p, q) {
                    (Some(p), Some(q)) => (p - q).abs() < 1e-12,
                    (None, None) => true,
                    _ => false,
                });
            }
        }
    }
}
