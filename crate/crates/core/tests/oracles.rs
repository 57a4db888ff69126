//! Independent reference computations checked against the library.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hsseg::backbone::{Backbone, BackboneConfig, GapTap};
use hsseg::densecrf::{energy, exact_map, exact_marginals, map_labels, mean_field, CrfMethod, CrfModel, CrfParams};
use hsseg::evalkit::{extract_boxes, pixel_accuracy, ConfusionMatrix};
use hsseg::hideseek::argmax_channels;
use hsseg::synthdata::{dataset_mean_pixel, generate, SceneSpec};
use hsseg::tensor::{Conv2dGeometry, Graph, ParamStore, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Six nested loops, bias first, taps summed in (channel, row, column) order.
fn naive_conv(x: &Tensor, w: &Tensor, b: &[f64], g: Conv2dGeometry) -> Vec<f64> {
    let [_, cin, h, wd] = *x.shape() else { unreachable!() };
    let [cout, _, kh, kw] = *w.shape() else { unreachable!() };
    let oh = g.output_extent(h, kh).unwrap();
    let ow = g.output_extent(wd, kw).unwrap();
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[o];
                for c in 0..cin {
                    for i in 0..kh {
                        for j in 0..kw {
                            let iy = (oy * g.stride + i * g.dilation) as isize - g.padding as isize;
                            let ix = (ox * g.stride + j * g.dilation) as isize - g.padding as isize;
                            let v = if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                0.0
                            } else {
                                x.data()[(c * h + iy as usize) * wd + ix as usize]
                            };
                            acc += w.data()[((o * cin + c) * kh + i) * kw + j] * v;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_matches_nested_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, padding, dilation) in [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2), (2, 0, 1), (1, 1, 2)] {
        let geom = Conv2dGeometry { stride, padding, dilation };
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let (xv, wv, bv) = (
            g.constant(x.clone()),
            g.constant(w.clone()),
            g.constant(Tensor::new(&[3], b.clone()).unwrap()),
        );
        let y = g.conv2d(xv, wv, Some(bv), geom).unwrap();
        let reference = naive_conv(&x, &w, &b, geom);
        assert_eq!(g.value(y).data(), &reference[..], "{geom:?}");
    }
}

#[test]
fn shared_parameter_gradient_scales_with_uses() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
    let w0 = rand_tensor(&mut rng, &[2, 2, 3, 3]);
    let grad_with = |uses: usize| {
        let mut store = ParamStore::new();
        let id = store.register("w", w0.clone()).unwrap();
        let mut g = Graph::new();
        let mut terms = Vec::new();
        for _ in 0..uses {
            let wv = g.param(&store, id);
            let xv = g.constant(x.clone());
            let y = g.conv2d(xv, wv, None, Conv2dGeometry::same3(1)).unwrap();
            let y = g.relu(y);
            terms.push((g.sum(y), 1.0));
        }
        let loss = g.weighted_sum(&terms).unwrap();
        g.backward(loss, &mut store).unwrap();
        store.grad(id).unwrap().to_vec()
    };
    let one = grad_with(1);
    for k in [2, 3] {
        let many = grad_with(k);
        for (a, b) in many.iter().zip(&one) {
            assert!((a - k as f64 * b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

#[test]
fn mid_tap_is_at_least_as_large_as_last_tap() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for size in [32, 64] {
        for dilation in [1, 2] {
            let config = BackboneConfig {
                input_size: size,
                widths: [2, 3, 4, 4, 4],
                gap_tap: GapTap::Last,
                final_dilation: dilation,
                num_classes: 3,
            };
            let mut store = ParamStore::new();
            let bb = Backbone::init(config, &mut store, &mut rng).unwrap();
            let mut g = Graph::new();
            let x = g.constant(rand_tensor(&mut rng, &[1, 3, size, size]));
            let taps = bb.forward_features(&mut g, &store, x).unwrap();
            let mid = g.value(taps.mid).shape()[2..].to_vec();
            let last = g.value(taps.last).shape()[2..].to_vec();
            assert!(mid[0] >= last[0] && mid[1] >= last[1]);
        }
    }
}

fn brute_force_map(model: &CrfModel, params: &CrfParams) -> (Vec<usize>, f64) {
    let (l, n) = (model.labels(), model.pixels());
    let mut best = (Vec::new(), f64::INFINITY);
    for code in 0..l.pow(n as u32) {
        let labels: Vec<usize> = (0..n).map(|i| code / l.pow(i as u32) % l).collect();
        let e = energy(model, params, &labels).unwrap();
        if e < best.1 {
            best = (labels, e);
        }
    }
    best
}

fn probs_model(rng: &mut ChaCha8Rng, labels: usize, h: usize, w: usize) -> CrfModel {
    let n = h * w;
    let mut p = vec![0.0; labels * n];
    for i in 0..n {
        let v: Vec<f64> = (0..labels).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        for k in 0..labels {
            p[k * n + i] = v[k] / s;
        }
    }
    let image = Tensor::new(&[3, h, w], (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    CrfModel::from_probabilities(&Tensor::new(&[labels, h, w], p).unwrap(), &image).unwrap()
}

#[test]
fn exact_map_matches_enumeration_of_all_labelings() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..20 {
        let model = probs_model(&mut rng, 2, 2, 2);
        let params = CrfParams {
            w_appearance: rng.random_range(0.0..5.0),
            w_smoothness: rng.random_range(0.0..3.0),
            sigma_alpha: rng.random_range(0.5..3.0),
            sigma_gamma: rng.random_range(0.5..3.0),
            ..Default::default()
        };
        let (labels, e) = exact_map(&model, &params).unwrap();
        let (want, want_e) = brute_force_map(&model, &params);
        assert_eq!(labels, want);
        assert!((e - want_e).abs() < 1e-12);
    }
}

#[test]
fn weak_coupling_mean_field_map_matches_exact_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..20 {
        // Unary margins exceed the largest possible pairwise pull, so the
        // marginal argmax and the MAP labeling cannot tie.
        let fg: Vec<f64> = (0..4)
            .map(|_| {
                let v = rng.random_range(0.8..0.95);
                if rng.random::<bool>() {
                    v
                } else {
                    1.0 - v
                }
            })
            .collect();
        let p: Vec<f64> = fg.iter().map(|v| 1.0 - v).chain(fg.iter().copied()).collect();
        let image = Tensor::new(&[3, 2, 2], (0..12).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let model = CrfModel::from_probabilities(&Tensor::new(&[2, 2, 2], p).unwrap(), &image).unwrap();
        let params = CrfParams {
            w_appearance: 0.1,
            w_smoothness: 0.1,
            iterations: 50,
            method: CrfMethod::Naive,
            ..Default::default()
        };
        let q = mean_field(&model, &params).unwrap();
        assert_eq!(map_labels(&q), brute_force_map(&model, &params).0);
    }
}

#[test]
fn moderate_coupling_three_by_three_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for _ in 0..5 {
        let model = probs_model(&mut rng, 3, 3, 3);
        let params = CrfParams {
            w_appearance: 0.3,
            w_smoothness: 0.3,
            sigma_alpha: 2.0,
            sigma_gamma: 1.0,
            iterations: 100,
            method: CrfMethod::Naive,
            ..Default::default()
        };
        let q = mean_field(&model, &params).unwrap();
        let e = exact_marginals(&model, &params).unwrap();
        let linf = q.data().iter().zip(e.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(linf <= 0.05, "L-inf {linf}");
    }
}

#[test]
fn smoothness_removes_isolated_flips() {
    let (h, w) = (3, 3);
    let mut fg = [0.8; 9];
    fg[4] = 0.3;
    let mut p = vec![0.0; 18];
    for i in 0..9 {
        p[i] = 1.0 - fg[i];
        p[9 + i] = fg[i];
    }
    let probs = Tensor::new(&[2, h, w], p).unwrap();
    let image = Tensor::full(&[3, h, w], 0.5);
    let model = CrfModel::from_probabilities(&probs, &image).unwrap();
    let plain = argmax_channels(&probs);
    assert_eq!(plain[4], 0);
    let params = CrfParams {
        w_appearance: 0.0,
        w_smoothness: 3.0,
        sigma_gamma: 1.0,
        method: CrfMethod::Naive,
        ..Default::default()
    };
    let (exact, _) = exact_map(&model, &params).unwrap();
    assert_eq!(exact, vec![1; 9]);
    assert_eq!(map_labels(&mean_field(&model, &params).unwrap()), exact);
}

#[test]
fn dataset_accuracy_is_pooled_over_pixels() {
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&[1, 1], &[1, 1]).unwrap();
    let big_gt = vec![0u8; 8];
    let mut big_pred = vec![0u8; 8];
    big_pred[..6].fill(1);
    cm.accumulate(&big_gt, &big_pred).unwrap();
    let pooled = pixel_accuracy(&cm).unwrap();
    assert_eq!(pooled, 4.0 / 10.0);
    let per_image_mean = (1.0 + 2.0 / 8.0) / 2.0;
    assert_ne!(pooled, per_image_mean);
}

#[test]
fn two_blobs_give_two_boxes_ordered_by_mass() {
    let mut cam = Tensor::zeros(&[8, 8]);
    for y in 1..3 {
        for x in 1..3 {
            cam.data_mut()[y * 8 + x] = 1.0;
        }
    }
    for y in 4..8 {
        for x in 4..8 {
            cam.data_mut()[y * 8 + x] = 1.0;
        }
    }
    let dets = extract_boxes(&cam, 2, (8, 8), 0.5).unwrap();
    assert_eq!(dets.len(), 2);
    assert!(dets[0].score > dets[1].score);
    assert_eq!((dets[0].bbox.x0, dets[0].bbox.y0, dets[0].bbox.x1, dets[0].bbox.y1), (4, 4, 8, 8));
    assert_eq!((dets[1].bbox.x0, dets[1].bbox.y0, dets[1].bbox.x1, dets[1].bbox.y1), (1, 1, 3, 3));
    assert!(dets.iter().all(|d| d.class == 2));
}

#[test]
fn class_frequencies_are_near_uniform() {
    let spec = SceneSpec {
        num_classes: 5,
        seed: 3,
        ..Default::default()
    };
    let data = generate(&spec, 2000).unwrap();
    let mut counts = [0usize; 5];
    for s in &data.samples {
        for b in &s.boxes {
            counts[b.class as usize - 1] += 1;
        }
    }
    let mean = counts.iter().sum::<usize>() as f64 / 5.0;
    for c in counts {
        assert!((c as f64 - mean).abs() <= 0.1 * mean, "{counts:?}");
    }
}

#[test]
fn mean_pixel_matches_streaming_recomputation() {
    let spec = SceneSpec {
        num_classes: 3,
        seed: 8,
        ..Default::default()
    };
    let data = generate(&spec, 40).unwrap();
    let mut mean = [0.0f64; 3];
    let mut n = 0.0;
    for s in data.train() {
        for px in s.image.data().chunks_exact(3) {
            n += 1.0;
            for c in 0..3 {
                mean[c] += (px[c] as f64 / 255.0 - mean[c]) / n;
            }
        }
    }
    let got = dataset_mean_pixel(data.train()).unwrap();
    for c in 0..3 {
        assert!((got[c] - mean[c]).abs() < 1e-12);
    }
}

fn blocky_model(rng: &mut ChaCha8Rng, labels: usize, h: usize, w: usize) -> CrfModel {
    let n = h * w;
    let mut p = vec![0.0; labels * n];
    for i in 0..n {
        let v: Vec<f64> = (0..labels).map(|_| rng.random_range(0.05..1.0)).collect();
        let s: f64 = v.iter().sum();
        for k in 0..labels {
            p[k * n + i] = v[k] / s;
        }
    }
    let image: Vec<f64> = (0..3 * n)
        .map(|i| {
            let (c, px) = (i / n, i % n);
            let (x, y) = (px % w, px / w);
            ((x / 6 * 7 + y / 6 * 3 + c) % 5) as f64 / 5.0
        })
        .collect();
    CrfModel::from_probabilities(
        &Tensor::new(&[labels, h, w], p).unwrap(),
        &Tensor::new(&[3, h, w], image).unwrap(),
    )
    .unwrap()
}

#[test]
fn separable_smoothness_path_matches_naive() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..4 {
        let model = blocky_model(&mut rng, 3, 24, 20);
        let p = CrfParams {
            w_appearance: 0.0,
            w_smoothness: rng.random_range(0.5..3.0),
            sigma_gamma: 3.0,
            method: CrfMethod::Naive,
            ..Default::default()
        };
        let naive = mean_field(&model, &p).unwrap();
        let fast = mean_field(&model, &CrfParams { method: CrfMethod::Lattice, ..p }).unwrap();
        let linf = naive.data().iter().zip(fast.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(linf <= 1e-3, "L-inf {linf}");
    }
}

#[test]
fn lattice_approximates_gaussian_sums() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let n = 300;
    let features: Vec<f64> = (0..n * 5).map(|_| rng.random_range(0.0..4.0)).collect();
    let lattice = hsseg::densecrf::Permutohedral::new(&features, 5);
    let ones = vec![1.0; n];
    let approx = lattice.filter(&ones, 1);
    let mut rel = 0.0;
    for i in 0..n {
        let exact: f64 = (0..n)
            .map(|j| {
                let d2: f64 = (0..5).map(|k| (features[i * 5 + k] - features[j * 5 + k]).powi(2)).sum();
                (-d2 / 2.0).exp()
            })
            .sum();
        rel += (hsseg::densecrf::LATTICE_GAIN_5D * approx[i] - exact).abs() / exact;
    }
    let mean_rel = rel / n as f64;
    assert!(mean_rel < 0.25, "mean relative error {mean_rel}");
}
