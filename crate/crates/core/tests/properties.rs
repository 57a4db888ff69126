use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hsseg::densecrf::{mean_field, pairwise_weight, CrfMethod, CrfModel, CrfParams};
use hsseg::evalkit::{mean_iou, nms, pixel_accuracy, BBox, ConfusionMatrix, Detection};
use hsseg::hideseek::{
    apply_hiding, argmax_channels, assemble_map_set, foreground_map, merge_cams, HidePolicy, PatchCount, PseudoMask,
};
use hsseg::losses::{select_loss, smx_loss_value, weak_loss_value, LabelSets, SwitchMode, SwitchPolicy};
use hsseg::pipeline::TrainConfig;
use hsseg::synthdata::{generate_sample, SceneSpec};
use hsseg::tensor::{read_checkpoint, write_checkpoint, Checkpoint, ParamStore, Tensor};

fn tensor(shape: &'static [usize], lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape, d).unwrap())
}

fn distributions(labels: usize, pixels: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, labels * pixels).prop_map(move |mut v| {
        for i in 0..pixels {
            let s: f64 = (0..labels).map(|k| v[k * pixels + i]).sum();
            for k in 0..labels {
                v[k * pixels + i] /= s;
            }
        }
        v
    })
}

fn crf_instance() -> impl Strategy<Value = (CrfModel, Vec<f64>, Vec<f64>, usize)> {
    (2usize..=3, 1usize..=3, 1usize..=4).prop_flat_map(|(l, h, w)| {
        (
            distributions(l, h * w),
            prop::collection::vec(0.0f64..1.0, 3 * h * w),
            Just((l, h, w)),
        )
            .prop_map(|(p, img, (l, h, w))| {
                let probs = Tensor::new(&[l, h, w], p.clone()).unwrap();
                let image = Tensor::new(&[3, h, w], img.clone()).unwrap();
                (CrfModel::from_probabilities(&probs, &image).unwrap(), p, img, l)
            })
    })
}

fn crf_params() -> impl Strategy<Value = CrfParams> {
    (0.0f64..6.0, 0.0f64..4.0, 1.0f64..60.0, 2.0f64..20.0, 0.5f64..4.0, 1usize..12).prop_map(
        |(w1, w2, sa, sb, sg, it)| CrfParams {
            w_appearance: w1,
            w_smoothness: w2,
            sigma_alpha: sa,
            sigma_beta: sb,
            sigma_gamma: sg,
            iterations: it,
            method: CrfMethod::Naive,
        },
    )
}

fn mask_strategy(channels: u8) -> impl Strategy<Value = PseudoMask> {
    prop::collection::vec(0..channels, 16).prop_map(|l| PseudoMask::new(4, 4, l).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mean_field_rows_are_distributions((model, ..) in crf_instance(), params in crf_params()) {
        let q = mean_field(&model, &params).unwrap();
        let n = model.pixels();
        for i in 0..n {
            let s: f64 = (0..model.labels()).map(|k| q.data()[k * n + i]).sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_coupling_is_a_fixed_point((model, p, ..) in crf_instance(), it in 1usize..20) {
        let params = CrfParams { w_appearance: 0.0, w_smoothness: 0.0, iterations: it, ..Default::default() };
        let q = mean_field(&model, &params).unwrap();
        let more = mean_field(&model, &CrfParams { iterations: it + 5, ..params }).unwrap();
        prop_assert_eq!(q.data(), more.data());
        for (a, b) in q.data().iter().zip(&p) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_field_is_label_permutation_equivariant((model, p, img, l) in crf_instance(), params in crf_params()) {
        let n = model.pixels();
        let (h, w) = (model.height(), model.width());
        let perm: Vec<usize> = (0..l).rev().collect();
        let mut pp = vec![0.0; p.len()];
        for k in 0..l {
            pp[perm[k] * n..(perm[k] + 1) * n].copy_from_slice(&p[k * n..(k + 1) * n]);
        }
        let image = Tensor::new(&[3, h, w], img).unwrap();
        let permuted = CrfModel::from_probabilities(&Tensor::new(&[l, h, w], pp).unwrap(), &image).unwrap();
        let q = mean_field(&model, &params).unwrap();
        let qp = mean_field(&permuted, &params).unwrap();
        for k in 0..l {
            for i in 0..n {
                prop_assert!((q.data()[k * n + i] - qp.data()[perm[k] * n + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pairwise_weight_is_symmetric((model, ..) in crf_instance(), params in crf_params()) {
        for i in 0..model.pixels() {
            for j in 0..model.pixels() {
                if i != j {
                    prop_assert_eq!(pairwise_weight(&model, &params, i, j).unwrap(), pairwise_weight(&model, &params, j, i).unwrap());
                }
            }
        }
    }

    #[test]
    fn hiding_leaves_unselected_cells_untouched(img in tensor(&[1, 3, 16, 16], 0.0, 1.0), sel in prop::collection::vec(any::<bool>(), 16)) {
        let policy = HidePolicy { grid: 4, patch_count: PatchCount::Random, mean_pixel: [0.1, 0.2, 0.3], ..Default::default() };
        let out = apply_hiding(&img, &policy, &sel).unwrap();
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    let idx = (c * 16 + y) * 16 + x;
                    let cell = (y / 4) * 4 + x / 4;
                    if sel[cell] {
                        prop_assert_eq!(out.data()[idx], policy.mean_pixel[c]);
                    } else {
                        prop_assert_eq!(out.data()[idx].to_bits(), img.data()[idx].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn map_set_is_complementary_and_bounded(
        m1 in tensor(&[3, 4, 4], -4.0, 4.0),
        m2 in tensor(&[3, 4, 4], -4.0, 4.0),
        t1 in tensor(&[5, 4, 4], 0.0, 2.0),
        t2 in tensor(&[5, 4, 4], 0.0, 2.0),
    ) {
        let merged = merge_cams(&m1, &m2).unwrap();
        for c in 0..3 {
            let ch = merged.slab(c);
            let max = ch.iter().copied().fold(f64::MIN, f64::max);
            let min = ch.iter().copied().fold(f64::MAX, f64::min);
            prop_assert!(max == 1.0 || max == 0.0);
            prop_assert_eq!(min, 0.0);
        }
        let pf = foreground_map(&t1, Some(&t2)).unwrap();
        let set = assemble_map_set(&merged, &pf).unwrap();
        for (b, p) in set.background().iter().zip(pf.data()) {
            prop_assert_eq!(b + p, 1.0);
        }
        prop_assert!(set.maps().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_branches_keep_the_argmax(m in tensor(&[4, 4, 4], 0.0, 3.0)) {
        let merged = merge_cams(&m, &m).unwrap();
        let mut single = m.clone();
        for c in 0..4 {
            hsseg::hideseek::minmax_normalize(single.slab_mut(c));
        }
        prop_assert_eq!(argmax_channels(&merged), argmax_channels(&single));
    }

    #[test]
    fn weak_loss_is_non_negative(logits in tensor(&[1, 4, 3, 3], -5.0, 5.0), labels in prop::collection::vec(any::<bool>(), 3)) {
        let s = hsseg::losses::softmax_scores(&logits).unwrap();
        let v = weak_loss_value(&s, &LabelSets::from_image_labels(&labels)).unwrap();
        prop_assert!(v >= 0.0);
    }

    #[test]
    fn weak_loss_with_all_present_is_present_term(logits in tensor(&[1, 3, 2, 2], -5.0, 5.0)) {
        let s = hsseg::losses::softmax_scores(&logits).unwrap();
        let v = weak_loss_value(&s, &LabelSets::from_image_labels(&[true, true])).unwrap();
        let present: f64 = (0..3).map(|k| s.data()[k * 4..(k + 1) * 4].iter().copied().fold(f64::MIN, f64::max).ln()).sum();
        prop_assert!((v + present / 3.0).abs() < 1e-12);
    }

    #[test]
    fn select_loss_depends_only_on_foreground_count(
        a in mask_strategy(3),
        b in mask_strategy(3),
        it in 0usize..2000,
        mode in prop::sample::select(vec![SwitchMode::None, SwitchMode::Fixed, SwitchMode::Adaptive]),
        tau in 0usize..4,
    ) {
        let policy = SwitchPolicy { mode, warmup: 500, tau };
        if a.foreground_count() == b.foreground_count() {
            prop_assert_eq!(select_loss(&policy, it, &a), select_loss(&policy, it, &b));
        }
        prop_assert_eq!(select_loss(&policy, it, &a), policy.choose(it, a.foreground_count()));
    }

    #[test]
    fn smx_loss_drops_when_target_probability_rises(
        logits in tensor(&[1, 3, 4, 4], -3.0, 3.0),
        mask in mask_strategy(3),
        pixel in 0usize..16,
        bump in 0.01f64..1.0,
    ) {
        let mut raised = logits.clone();
        let l = mask.labels()[pixel] as usize;
        raised.data_mut()[l * 16 + pixel] += bump;
        let before = smx_loss_value(&hsseg::losses::softmax_scores(&logits).unwrap(), &mask).unwrap();
        let after = smx_loss_value(&hsseg::losses::softmax_scores(&raised).unwrap(), &mask).unwrap();
        prop_assert!(after < before);
    }

    #[test]
    fn metrics_are_bounded_and_order_free(images in prop::collection::vec(prop::collection::vec((0u8..3, 0u8..3), 1..20), 1..6)) {
        let mut fwd = ConfusionMatrix::new(3);
        let mut rev = ConfusionMatrix::new(3);
        for img in &images {
            let (gt, pred): (Vec<u8>, Vec<u8>) = img.iter().copied().unzip();
            fwd.accumulate(&gt, &pred).unwrap();
        }
        for img in images.iter().rev() {
            let (gt, pred): (Vec<u8>, Vec<u8>) = img.iter().copied().unzip();
            rev.accumulate(&gt, &pred).unwrap();
        }
        prop_assert_eq!(&fwd, &rev);
        let pca = pixel_accuracy(&fwd).unwrap();
        let miou = mean_iou(&fwd).unwrap();
        prop_assert!((0.0..=1.0).contains(&pca));
        prop_assert!((0.0..=1.0).contains(&miou));
    }

    #[test]
    fn nms_returns_a_subset_with_exact_scores(
        raw in prop::collection::vec((0usize..20, 0usize..20, 1usize..10, 1usize..10, 0.0f64..1.0, 1usize..3), 0..15),
        thr in 0.0f64..1.0,
    ) {
        let dets: Vec<Detection> = raw
            .iter()
            .map(|&(x, y, w, h, score, class)| Detection { bbox: BBox { x0: x, y0: y, x1: x + w, y1: y + h }, score, class })
            .collect();
        let kept = nms(&dets, thr);
        prop_assert!(kept.len() <= dets.len());
        for k in &kept {
            prop_assert!(dets.iter().any(|d| d.bbox == k.bbox && d.class == k.class && d.score.to_bits() == k.score.to_bits()));
        }
    }

    #[test]
    fn generated_boxes_are_tight_and_cover_the_mask(seed in any::<u64>(), index in 0u64..1000) {
        let spec = SceneSpec { num_classes: 4, seed, ..Default::default() };
        let s = generate_sample(&spec, index);
        prop_assert_eq!(s.image.width() % HidePolicy::default().grid, 0);
        let w = s.mask.width();
        let class_at = |x: usize, y: usize| s.mask.data()[y * w + x];
        for b in &s.boxes {
            prop_assert!(b.x0 < b.x1 && b.y0 < b.y1);
            prop_assert!((b.x0..b.x1).any(|x| class_at(x, b.y0) == b.class));
            prop_assert!((b.x0..b.x1).any(|x| class_at(x, b.y1 - 1) == b.class));
            prop_assert!((b.y0..b.y1).any(|y| class_at(b.x0, y) == b.class));
            prop_assert!((b.y0..b.y1).any(|y| class_at(b.x1 - 1, y) == b.class));
        }
        for (i, &v) in s.mask.data().iter().enumerate() {
            if v != 0 {
                let (x, y) = (i % w, i / w);
                prop_assert!(s.boxes.iter().any(|b| b.class == v && (b.x0..b.x1).contains(&x) && (b.y0..b.y1).contains(&y)));
            }
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(values in prop::collection::vec(any::<f64>(), 1..40), meta in "[a-z =\\n]{0,40}") {
        let mut store = ParamStore::new();
        store.register("a", Tensor::new(&[values.len()], values.clone()).unwrap()).unwrap();
        let ck = Checkpoint::from_store(&store, meta.clone());
        let mut bytes = Vec::new();
        write_checkpoint(&mut bytes, &ck).unwrap();
        let back = read_checkpoint(&mut bytes.as_slice()).unwrap();
        prop_assert_eq!(back.metadata, meta);
        let got: Vec<u64> = back.tensors[0].1.data().iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = values.iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), iters in 1usize..20000, lr in 1e-5f64..1.0, warm in 0usize..3000, tau in 0usize..10, hide in 0.0f64..=1.0) {
        let mut cfg = TrainConfig { seed, iterations: iters, lr, ..Default::default() };
        cfg.switch.warmup = warm;
        cfg.switch.tau = tau;
        cfg.hide.hide_prob = hide;
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), cfg.to_text());
        prop_assert_eq!(back.lr.to_bits(), lr.to_bits());
        prop_assert_eq!(back.hide.hide_prob.to_bits(), hide.to_bits());
    }
}

#[test]
fn hidden_selection_is_reproducible_per_stream() {
    let policy = HidePolicy::default();
    let a = policy.select_patches(&mut ChaCha8Rng::seed_from_u64(5));
    let b = policy.select_patches(&mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, b);
}
