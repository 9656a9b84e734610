//! Worked examples and independent reference implementations.

mod common;

use std::collections::BTreeSet;

use cft_core::autodiff::{Graph, ParamStore};
use cft_core::cft::{attention_block, detokenize, tokenize, CftConfig, CftModule};
use cft_core::data::{synthesize, to_model_input, Image8, PairSample, SynthParams, Visibility};
use cft_core::detector::{decode_boxes, nms, DecodeParams, CLS, OBJ, TH, TW, TX, TY};
use cft_core::geometry::{giou, iou, BBox, Detection, GroundTruth};
use cft_core::loss::{assign_targets, classification_loss, confidence_losses, giou_loss};
use cft_core::metrics::{average_precision, map_suite, match_detections, Interpolation};
use cft_core::rng::Rng;
use cft_core::tensor::kernels;
use cft_core::Tensor;
use common::mapcheck::{map_fixture, map_oracle, random_dets};
use common::random;

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

// ---- tensor operations ----

#[test]
fn matmul_example_against_triple_loop() {
    let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);

    let (m, k, n) = (4, 5, 3);
    let a = random(&[m, k], 1, -1.0, 1.0);
    let b = random(&[k, n], 2, -1.0, 1.0);
    let got = a.matmul(&b).unwrap();
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a.at(&[i, p]) * b.at(&[p, j]);
            }
            assert!(close(got.at(&[i, j]), s, 1e-12));
        }
    }
}

#[test]
fn softmax_examples() {
    let g = Graph::<f64>::new();
    let s = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0])).softmax(1).unwrap();
    for (got, want) in s.value().data().iter().zip([0.09003057, 0.24472847, 0.66524096]) {
        assert!(close(*got, want, 1e-8));
    }
    let u = g.constant(t(&[1, 3], &[0.0; 3])).softmax(1).unwrap();
    assert!(u.value().data().iter().all(|&v| close(v, 1.0 / 3.0, 1e-15)));
}

#[test]
fn gelu_examples() {
    assert_eq!(kernels::gelu(0.0f64), 0.0);
    assert!(close(kernels::gelu(10.0f64), 10.0, 1e-6));
    let x = 1.0f64;
    let direct = 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
    assert!(close(kernels::gelu(x), direct, 1e-15));
    assert!(close(kernels::gelu(x), 0.841192, 1e-6));
}

#[test]
fn conv_and_pool_examples() {
    let g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_fn(&[1, 4, 4], |i| i as f64));
    let ones = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
    let y = x.conv2d(ones, 2, 0).unwrap();
    assert_eq!(y.value().data(), &[10.0, 18.0, 42.0, 50.0]);
    let p = x.adaptive_avg_pool(2).unwrap();
    assert_eq!(p.value().data(), &[2.5, 4.5, 10.5, 12.5]);

    let img = random(&[2, 5, 5], 3, -1.0, 1.0);
    let id = g.constant(img.clone()).conv2d(g.constant(t(&[2, 2, 1, 1], &[1.0, 0.0, 0.0, 1.0])), 1, 0).unwrap();
    assert_eq!(id.value().data(), img.data());
    let z = g.constant(img.clone()).conv2d(g.constant(Tensor::zeros(&[3, 2, 3, 3])), 1, 1).unwrap();
    assert!(z.value().data().iter().all(|&v| v == 0.0));
    let same = g.constant(random(&[2, 8, 8], 4, -1.0, 1.0));
    assert_eq!(same.adaptive_avg_pool(8).unwrap().value().data(), same.value().data());
}

#[test]
fn conv_matches_sliding_window() {
    let (ci, co, h, w, k) = (2, 3, 7, 6, 3);
    let x = random(&[ci, h, w], 5, -1.0, 1.0);
    let wt = random(&[co, ci, k, k], 6, -1.0, 1.0);
    for (stride, pad) in [(1, 1), (2, 1), (2, 0), (1, 0)] {
        let g = Graph::<f64>::new();
        let y = g.constant(x.clone()).conv2d(g.constant(wt.clone()), stride, pad).unwrap();
        let y = y.value();
        let (oh, ow) = ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1);
        assert_eq!(y.shape(), &[co, oh, ow]);
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for c in 0..ci {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    s += x.at(&[c, iy as usize, ix as usize]) * wt.at(&[o, c, ky, kx]);
                                }
                            }
                        }
                    }
                    assert!(close(y.at(&[o, oy, ox]), s, 1e-12));
                }
            }
        }
    }
}

#[test]
fn bilinear_matches_coordinate_formula() {
    let src = t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]);
    let g = Graph::<f64>::new();
    let up = g.constant(src.clone()).bilinear_upsample(4, 4).unwrap();
    let up = up.value();
    let coord = |d: usize| ((d as f64 + 0.5) * 2.0 / 4.0 - 0.5).clamp(0.0, 1.0);
    for y in 0..4 {
        for x in 0..4 {
            let (sy, sx) = (coord(y), coord(x));
            // bilinear surface through the four corners
            let v = (1.0 - sy) * ((1.0 - sx) * 0.0 + sx * 1.0) + sy * ((1.0 - sx) * 2.0 + sx * 3.0);
            assert!(close(up.at(&[0, y, x]), v, 1e-12), "({y},{x})");
        }
    }
    let same = g.constant(random(&[2, 3, 3], 7, -1.0, 1.0));
    assert_eq!(same.bilinear_upsample(3, 3).unwrap().value().data(), same.value().data());
    let flat = g.constant(Tensor::full(&[1, 3, 2], 0.25));
    assert!(flat.bilinear_upsample(7, 5).unwrap().value().data().iter().all(|&v| v == 0.25));
}

#[test]
fn sgd_worked_examples() {
    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", Tensor::scalar(0.0)).unwrap();
    for want in [-0.1, -0.29] {
        let g = Graph::new();
        let grads = g.backward(g.param(&store, w).sum().unwrap()).unwrap();
        store.zero_grad();
        store.accumulate(&grads);
        store.sgd_step(0.1, 0.9, 0.0).unwrap();
        assert!(close(store.value(w).item(), want, 1e-12));
    }

    let mut store = ParamStore::<f64>::new();
    let w = store.register("w", Tensor::scalar(1.0)).unwrap();
    let g = Graph::new();
    let grads = g.backward(g.param(&store, w).scale(2.0).unwrap()).unwrap();
    store.accumulate(&grads);
    store.sgd_step(0.0, 0.0, 0.0).unwrap();
    assert_eq!(store.value(w).item(), 1.0);
    store.sgd_step(0.1, 0.0, 0.0).unwrap();
    assert!(close(store.value(w).item(), 0.8, 1e-15));
}

#[test]
fn backward_trivial_cases() {
    let mut store = ParamStore::<f64>::new();
    let a = store.register("a", random(&[2, 3], 8, -1.0, 1.0)).unwrap();
    let b = store.register("b", random(&[2], 9, -1.0, 1.0)).unwrap();
    let g = Graph::new();
    let _unused = g.param(&store, b);
    let grads = g.backward(g.param(&store, a).sum().unwrap()).unwrap();
    assert!(grads.param(a).unwrap().iter().all(|&v| v == 1.0));
    assert!(grads.param(b).is_none_or(|gb| gb.iter().all(|&v| v == 0.0)));
}

// ---- fusion transformer ----

#[test]
fn tokenize_index_formula_and_inverse() {
    let f = Tensor::from_fn(&[2, 2, 2], |i| (i * 7 + 1) as f64);
    let g = Graph::<f64>::new();
    let tok = tokenize(g.constant(f.clone())).unwrap();
    let tv = tok.value();
    assert_eq!(tv.shape(), &[4, 2]);
    for y in 0..2 {
        for x in 0..2 {
            for c in 0..2 {
                assert_eq!(tv.at(&[y * 2 + x, c]), f.at(&[c, y, x]));
            }
        }
    }
    let back = detokenize(tok, 2, 2).unwrap();
    assert_eq!(back.value().data(), f.data());
}

/// Single head, two tokens of width two, every step in scalar arithmetic.
#[test]
fn attention_block_hand_evaluation() {
    let cfg = CftConfig {
        channels: 2,
        heads: 1,
        blocks: 1,
        pooled_size: 1,
        mlp_ratio: 2,
        paper_literal_heads: false,
        use_layernorm: false,
    };
    let mut store = ParamStore::<f64>::new();
    let m = CftModule::new(cfg.clone(), &mut store, "m", &mut Rng::new(0)).unwrap();
    let wq = [[0.5, -0.3], [0.2, 0.8]];
    let wk = [[-0.4, 0.1], [0.7, 0.3]];
    let wv = [[0.9, 0.2], [-0.5, 0.6]];
    let wo = [[0.3, -0.7], [0.4, 0.2]];
    let fc1 = [[0.1, -0.2, 0.3, 0.4], [0.5, 0.6, -0.7, 0.8]];
    let b1 = [0.05, -0.1, 0.0, 0.2];
    let fc2 = [[0.2, -0.1], [0.3, 0.4], [-0.5, 0.1], [0.6, -0.2]];
    let b2 = [0.01, -0.02];
    let set = |store: &mut ParamStore<f64>, name: &str, shape: &[usize], v: Vec<f64>| {
        let pid = store.find(&format!("m.block0.{name}")).unwrap();
        store.set_value(pid, t(shape, &v)).unwrap();
    };
    set(&mut store, "w_q", &[2, 2], wq.concat());
    set(&mut store, "w_k", &[2, 2], wk.concat());
    set(&mut store, "w_v", &[2, 2], wv.concat());
    set(&mut store, "w_o", &[2, 2], wo.concat());
    set(&mut store, "fc1.w", &[2, 4], fc1.concat());
    set(&mut store, "fc1.b", &[4], b1.to_vec());
    set(&mut store, "fc2.w", &[4, 2], fc2.concat());
    set(&mut store, "fc2.b", &[2], b2.to_vec());
    let input = [[1.0, -0.5], [0.25, 2.0]];

    let g = Graph::new();
    let (out, alphas) =
        attention_block(&g, &store, &cfg, &m.blocks[0], g.constant(t(&[2, 2], &input.concat())), true).unwrap();

    let mul = |x: [f64; 2], w: &[[f64; 2]; 2]| [x[0] * w[0][0] + x[1] * w[1][0], x[0] * w[0][1] + x[1] * w[1][1]];
    let q = input.map(|r| mul(r, &wq));
    let k = input.map(|r| mul(r, &wk));
    let v = input.map(|r| mul(r, &wv));
    let scale = 1.0 / 2f64.sqrt();
    let mut alpha = [[0.0; 2]; 2];
    for i in 0..2 {
        let s = [0, 1].map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) * scale);
        let e = s.map(f64::exp);
        alpha[i] = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
    }
    let gelu = |x: f64| 0.5 * x * (1.0 + (0.7978845608028654 * (x + 0.044715 * x * x * x)).tanh());
    for i in 0..2 {
        let z = [0, 1].map(|c| alpha[i][0] * v[0][c] + alpha[i][1] * v[1][c]);
        let zo = mul(z, &wo);
        let z2 = [zo[0] + input[i][0], zo[1] + input[i][1]];
        let hdn: Vec<f64> = (0..4).map(|j| gelu(z2[0] * fc1[0][j] + z2[1] * fc1[1][j] + b1[j])).collect();
        for c in 0..2 {
            let mlp: f64 = (0..4).map(|j| hdn[j] * fc2[j][c]).sum::<f64>() + b2[c];
            assert!(close(out.value().at(&[i, c]), mlp + z2[c], 1e-12));
        }
        for j in 0..2 {
            assert!(close(alphas[0].at(&[i, j]), alpha[i][j], 1e-12));
        }
    }
}

#[test]
fn identical_keys_give_uniform_attention() {
    let cfg = CftConfig {
        channels: 4,
        heads: 1,
        blocks: 1,
        pooled_size: 2,
        mlp_ratio: 2,
        paper_literal_heads: false,
        use_layernorm: false,
    };
    let mut store = ParamStore::<f64>::new();
    let m = CftModule::new(cfg.clone(), &mut store, "m", &mut Rng::new(1)).unwrap();
    // W_K = 0 makes every key row identical
    let wk = store.find("m.block0.w_k").unwrap();
    store.set_value(wk, Tensor::zeros(&[4, 4])).unwrap();
    let wo = store.find("m.block0.w_o").unwrap();
    store.set_value(wo, t(&[4, 4], &[1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1., 0., 0., 0., 0., 1.])).unwrap();
    let x = random(&[8, 4], 10, -1.0, 1.0);
    let g = Graph::new();
    let (out, alphas) = attention_block(&g, &store, &cfg, &m.blocks[0], g.constant(x.clone()), true).unwrap();
    assert!(alphas[0].data().iter().all(|&a| close(a, 1.0 / 8.0, 1e-15)));
    // MLP output weights are zero, so out = mean_rows(V) + x
    let wv = store.value(store.find("m.block0.w_v").unwrap()).clone();
    let v = x.matmul(&wv).unwrap();
    for c in 0..4 {
        let mean: f64 = (0..8).map(|r| v.at(&[r, c])).sum::<f64>() / 8.0;
        for r in 0..8 {
            assert!(close(out.value().at(&[r, c]), mean + x.at(&[r, c]), 1e-12));
        }
    }
}

// ---- decode / nms ----

#[test]
fn decode_confidence_example() {
    let (nc, grid) = (3, 4);
    let mut map = Tensor::<f64>::full(&[CLS + nc, grid, grid], -30.0);
    let cell = 5;
    let plane = grid * grid;
    map.data_mut()[OBJ * plane + cell] = 3.0;
    map.data_mut()[(CLS + 1) * plane + cell] = 30.0;
    for ch in [TX, TY, TW, TH] {
        map.data_mut()[ch * plane + cell] = 0.0;
    }
    let dets = decode_boxes(&map, 16, &DecodeParams::new(64)).unwrap();
    assert_eq!(dets.len(), 1);
    let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
    assert!(close(dets[0].confidence, sigmoid(3.0), 1e-9));
    assert!(close(dets[0].confidence, 0.9526, 1e-4));
    assert_eq!(dets[0].class_id, 1);
    // cell (1, 1): center (1.5 * 16, 1.5 * 16), size 16
    assert_eq!(dets[0].bbox, BBox::new(16.0, 16.0, 32.0, 32.0));
}

/// The kept set is the unique subset K with: a box is in K iff no box of K
/// ranked above it (same class) overlaps it at IoU >= threshold.
fn nms_oracle(dets: &[Detection], thr: f64) -> Vec<usize> {
    let n = dets.len();
    let mut rank: Vec<usize> = (0..n).collect();
    rank.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let pos: Vec<usize> = {
        let mut p = vec![0; n];
        for (r, &i) in rank.iter().enumerate() {
            p[i] = r;
        }
        p
    };
    let mut found = Vec::new();
    for mask in 0u32..(1 << n) {
        let inside = |i: usize| mask & (1 << i) != 0;
        let consistent = (0..n).all(|i| {
            let blocked = (0..n).any(|j| {
                inside(j)
                    && pos[j] < pos[i]
                    && dets[j].class_id == dets[i].class_id
                    && iou(&dets[j].bbox, &dets[i].bbox).unwrap() >= thr
            });
            inside(i) == !blocked
        });
        if consistent {
            found.push(mask);
        }
    }
    assert_eq!(found.len(), 1, "fixed point must be unique");
    let mut kept: Vec<usize> = (0..n).filter(|&i| found[0] & (1 << i) != 0).collect();
    kept.sort_by_key(|&i| pos[i]);
    kept
}

#[test]
fn nms_matches_exhaustive_oracle() {
    // three boxes whose pairwise IoUs straddle 0.45
    let b = |x1, x2| BBox::new(x1, 0.0, x2, 10.0);
    let dets = vec![
        Detection { bbox: b(0.0, 10.0), class_id: 0, confidence: 0.9 },
        Detection { bbox: b(5.0, 15.0), class_id: 0, confidence: 0.8 },
        Detection { bbox: b(3.5, 13.5), class_id: 0, confidence: 0.7 },
    ];
    // IoU(0,1)=1/3, IoU(0,2)=6.5/13.5, IoU(1,2)=8.5/11.5
    let kept = nms(&dets, 0.45);
    let want: Vec<Detection> = nms_oracle(&dets, 0.45).into_iter().map(|i| dets[i]).collect();
    assert_eq!(kept, want);
    assert_eq!(kept, vec![dets[0], dets[1]]);

    let mut rng = Rng::new(11);
    for _ in 0..200 {
        let n = 1 + rng.below(8);
        let dets = random_dets(&mut rng, n, 2);
        for thr in [0.25, 0.45] {
            let want: Vec<Detection> = nms_oracle(&dets, thr).into_iter().map(|i| dets[i]).collect();
            assert_eq!(nms(&dets, thr), want);
        }
    }
}

// ---- geometry and losses ----

#[test]
fn giou_fixtures() {
    let a = BBox::new(0.0, 0.0, 1.0, 1.0);
    let b = BBox::new(2.0, 2.0, 3.0, 3.0);
    assert!(close(giou(&a, &b).unwrap(), -7.0 / 9.0, 1e-9));
    let a = BBox::new(0.0, 0.0, 2.0, 2.0);
    let b = BBox::new(1.0, 1.0, 3.0, 3.0);
    assert!(close(giou(&a, &b).unwrap(), -5.0 / 63.0, 1e-9));
    assert!(close(giou_loss(&a, &b).unwrap(), 1.0 + 5.0 / 63.0, 1e-9));
    assert!(close(iou(&a, &b).unwrap(), 1.0 / 7.0, 1e-12));
    assert_eq!(iou(&BBox::new(0.0, 0.0, 1.0, 1.0), &BBox::new(2.0, 2.0, 3.0, 3.0)).unwrap(), 0.0);
}

#[test]
fn classification_and_confidence_examples() {
    let g = Graph::<f64>::new();
    let ce = classification_loss(g.constant(t(&[1, 3], &[0.7, 0.2, 0.1])), &[0]).unwrap();
    assert!(close(ce.value().item(), -(0.7f64.ln()), 1e-12));
    assert!(close(ce.value().item(), 0.35667, 1e-5));
    let perfect = classification_loss(g.constant(t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0])), &[0, 2]).unwrap();
    assert!(perfect.value().item().abs() < 1e-6);

    let (obj, noobj) = confidence_losses(g.constant(t(&[2], &[1.0, 0.5])), &[true, false]).unwrap();
    assert_eq!(obj.value().item(), 0.0);
    assert_eq!(noobj.value().item(), 0.25);
    let (obj, noobj) = confidence_losses(g.constant(t(&[3], &[0.0, 0.0, 0.0])), &[false; 3]).unwrap();
    assert_eq!((obj.value().item(), noobj.value().item()), (0.0, 0.0));
}

#[test]
fn assignment_matches_direct_loop() {
    let centered = GroundTruth { bbox: BBox::from_center(32.0, 32.0, 10.0, 10.0), class_id: 0 };
    let a = assign_targets(&[centered], &[16, 8, 4], 64.0, 64.0).unwrap();
    assert_eq!(a.scales[0].positives, vec![(8 * 16 + 8, 0)]);

    let mut rng = Rng::new(12);
    for _ in 0..300 {
        let n = rng.below(6);
        let gts: Vec<GroundTruth> = (0..n)
            .map(|_| {
                let x1 = rng.uniform_range(0.0, 50.0);
                let y1 = rng.uniform_range(0.0, 50.0);
                GroundTruth {
                    bbox: BBox::new(x1, y1, x1 + rng.uniform_range(1.0, 14.0), y1 + rng.uniform_range(1.0, 14.0)),
                    class_id: rng.below(3),
                }
            })
            .collect();
        let a = assign_targets(&gts, &[16, 8, 4], 64.0, 64.0).unwrap();
        for st in &a.scales {
            let stride = 64.0 / st.grid as f64;
            let mut cells = BTreeSet::new();
            let mut owner = Vec::new();
            for (gi, gt) in gts.iter().enumerate() {
                let (cx, cy) = gt.bbox.center();
                let cell = (cy / stride) as usize * st.grid + (cx / stride) as usize;
                if cells.insert(cell) {
                    owner.push((cell, gi));
                }
            }
            assert_eq!(st.obj_mask.iter().filter(|&&m| m).count(), cells.len());
            assert_eq!(st.positives, owner);
        }
    }
}

// ---- matching and AP ----

/// Enumerate every det -> gt assignment and keep the one consistent with the
/// greedy rule.
fn matching_oracle(dets: &[Detection], gts: &[GroundTruth], thr: f64) -> Vec<Option<usize>> {
    let n = dets.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    let choices = gts.len() + 1;
    let mut found = Vec::new();
    for code in 0..choices.pow(n as u32) {
        let assign: Vec<Option<usize>> = (0..n)
            .map(|i| {
                let c = code / choices.pow(i as u32) % choices;
                (c < gts.len()).then_some(c)
            })
            .collect();
        let mut taken = vec![false; gts.len()];
        let mut ok = true;
        for &d in &order {
            let avail: Vec<(usize, f64)> = (0..gts.len())
                .filter(|&gi| !taken[gi] && gts[gi].class_id == dets[d].class_id)
                .map(|gi| (gi, iou(&dets[d].bbox, &gts[gi].bbox).unwrap()))
                .filter(|&(_, v)| v >= thr)
                .collect();
            let best = avail.iter().map(|&(_, v)| v).fold(f64::NEG_INFINITY, f64::max);
            let legal = match assign[d] {
                None => avail.is_empty(),
                Some(gi) => avail.iter().any(|&(g, v)| g == gi && v == best && avail.iter().all(|&(g2, v2)| v2 < best || g2 >= gi)),
            };
            if !legal {
                ok = false;
                break;
            }
            if let Some(gi) = assign[d] {
                taken[gi] = true;
            }
        }
        if ok {
            found.push(assign);
        }
    }
    assert_eq!(found.len(), 1);
    found.pop().unwrap()
}

#[test]
fn matching_matches_exhaustive_oracle() {
    // three detections competing for two ground truths: the most confident
    // detection takes the GT that the second one overlaps best
    let gts = vec![
        GroundTruth { bbox: BBox::new(0.0, 0.0, 10.0, 10.0), class_id: 0 },
        GroundTruth { bbox: BBox::new(6.0, 0.0, 16.0, 10.0), class_id: 0 },
    ];
    let dets = vec![
        Detection { bbox: BBox::new(1.0, 0.0, 11.0, 10.0), class_id: 0, confidence: 0.9 },
        Detection { bbox: BBox::new(0.0, 0.0, 9.0, 10.0), class_id: 0, confidence: 0.8 },
        Detection { bbox: BBox::new(5.0, 0.0, 15.0, 10.0), class_id: 0, confidence: 0.7 },
    ];
    let m = match_detections(&dets, &gts, 0.5);
    assert_eq!(m.matched_gt, matching_oracle(&dets, &gts, 0.5));
    assert_eq!(m.matched_gt, vec![Some(0), None, Some(1)]);

    let exact = match_detections(&[dets[0]], &[GroundTruth { bbox: dets[0].bbox, class_id: 0 }], 0.5);
    assert_eq!((exact.true_positive, exact.false_negatives), (vec![true], 0));
    assert_eq!(match_detections(&[], &gts, 0.5).false_negatives, 2);

    let mut rng = Rng::new(13);
    for _ in 0..300 {
        let (nd, ng) = (1 + rng.below(5), rng.below(4));
        let dets = random_dets(&mut rng, nd, 2);
        let gts: Vec<GroundTruth> = random_dets(&mut rng, ng, 2)
            .into_iter()
            .map(|d| GroundTruth { bbox: d.bbox, class_id: d.class_id })
            .collect();
        for thr in [0.1, 0.3, 0.5] {
            let m = match_detections(&dets, &gts, thr);
            assert_eq!(m.matched_gt, matching_oracle(&dets, &gts, thr));
        }
    }
}

#[test]
fn ap_fixtures() {
    let ap = average_precision(&[true, false, true], 2, Interpolation::AllPoints);
    assert!(close(ap, 5.0 / 6.0, 1e-9));
    assert_eq!(average_precision(&[true], 1, Interpolation::AllPoints), 1.0);
    assert_eq!(average_precision(&[], 3, Interpolation::AllPoints), 0.0);
}

fn assert_map_equal(dets: &[Vec<Detection>], gts: &[Vec<GroundTruth>], classes: usize, interp: Interpolation) {
    let report = map_suite(dets, gts, classes, interp);
    let (per_class, m50, m75, m) = map_oracle(dets, gts, classes, interp == Interpolation::Coco101);
    assert_eq!(report.per_class.len(), per_class.len());
    for (a, b) in report.per_class.iter().zip(&per_class) {
        match (a, b) {
            (None, None) => {}
            (Some(a), Some(b)) => {
                for ti in 0..10 {
                    assert!(close(a[ti], b[ti], 1e-9), "threshold {ti}: {} vs {}", a[ti], b[ti]);
                }
            }
            _ => panic!("class exclusion differs"),
        }
    }
    assert!(close(report.map50, m50, 1e-9));
    assert!(close(report.map75, m75, 1e-9));
    assert!(close(report.map, m, 1e-9));
}

#[test]
fn map_suite_matches_brute_force() {
    for seed in 0..20 {
        let (d, g) = map_fixture(seed, 10, 3);
        assert_map_equal(&d, &g, 3, Interpolation::AllPoints);
        assert_map_equal(&d, &g, 3, Interpolation::Coco101);
    }
}

#[test]
fn map_suite_trivial_detectors() {
    let (_, gts) = map_fixture(3, 10, 3);
    let echo: Vec<Vec<Detection>> = gts
        .iter()
        .map(|g| g.iter().map(|x| Detection { bbox: x.bbox, class_id: x.class_id, confidence: 0.9 }).collect())
        .collect();
    let r = map_suite(&echo, &gts, 3, Interpolation::AllPoints);
    assert_eq!((r.map50, r.map75, r.map), (100.0, 100.0, 100.0));
    let empty = vec![Vec::new(); gts.len()];
    let r = map_suite(&empty, &gts, 3, Interpolation::AllPoints);
    assert_eq!((r.map50, r.map75, r.map), (0.0, 0.0, 0.0));
}

// ---- data ----

#[test]
fn visibility_frequencies_within_binomial_bounds() {
    let params = SynthParams { visibility_probs: [0.4, 0.4, 0.2], ..SynthParams::default() };
    let mut counts = [0usize; 3];
    let mut total = 0;
    let mut index = 0;
    while total < 1000 {
        for o in synthesize(21, index, &params).unwrap().objects {
            if total < 1000 {
                counts[Visibility::ALL.iter().position(|&v| v == o.visibility).unwrap()] += 1;
                total += 1;
            }
        }
        index += 1;
    }
    for (k, p) in [0.4, 0.4, 0.2].into_iter().enumerate() {
        let mean = p * total as f64;
        let sigma = (total as f64 * p * (1.0 - p)).sqrt();
        assert!(
            (counts[k] as f64 - mean).abs() <= 3.0 * sigma,
            "{:?}: {} vs {mean} +- {sigma}",
            Visibility::ALL[k],
            counts[k]
        );
    }
}

/// Bounding boxes of 4-connected regions where `image` differs from
/// `background` by more than `threshold` in any channel.
fn connected_components(image: &Image8, background: &Image8, threshold: u8) -> Vec<BBox> {
    let (w, h, ch) = (image.width, image.height, image.channels);
    let fg = |x: usize, y: usize| (0..ch).any(|c| image.get(x, y, c).abs_diff(background.get(x, y, c)) > threshold);
    let mut seen = vec![false; w * h];
    let mut boxes = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if seen[sy * w + sx] || !fg(sx, sy) {
                continue;
            }
            let (mut x1, mut y1, mut x2, mut y2) = (sx, sy, sx, sy);
            let mut stack = vec![(sx, sy)];
            seen[sy * w + sx] = true;
            while let Some((x, y)) = stack.pop() {
                (x1, y1, x2, y2) = (x1.min(x), y1.min(y), x2.max(x), y2.max(y));
                let mut push = |nx: usize, ny: usize| {
                    if !seen[ny * w + nx] && fg(nx, ny) {
                        seen[ny * w + nx] = true;
                        stack.push((nx, ny));
                    }
                };
                if x > 0 {
                    push(x - 1, y);
                }
                if y > 0 {
                    push(x, y - 1);
                }
                if x + 1 < w {
                    push(x + 1, y);
                }
                if y + 1 < h {
                    push(x, y + 1);
                }
            }
            boxes.push(BBox::new(x1 as f64, y1 as f64, (x2 + 1) as f64, (y2 + 1) as f64));
        }
    }
    boxes
}

#[test]
fn mono_oracle_detector_sees_only_its_modality() {
    let params = SynthParams::default();
    let (mut visible, mut recovered) = (0usize, 0usize);
    for index in 0..50 {
        let scene = synthesize(5, index, &params).unwrap();
        for (image, background, in_modality) in [
            (&scene.sample.rgb, &scene.rgb_background, Visibility::in_rgb as fn(Visibility) -> bool),
            (&scene.sample.thermal, &scene.thermal_background, Visibility::in_thermal),
        ] {
            let comps = connected_components(image, background, 10);
            for o in &scene.objects {
                let found = comps.iter().any(|c| iou(c, &o.bbox).unwrap() >= 0.5);
                if in_modality(o.visibility) {
                    visible += 1;
                    recovered += found as usize;
                } else {
                    assert!(!found, "sample {index}: hidden {:?} object recovered", o.visibility);
                }
            }
            assert!(comps.len() <= scene.objects.iter().filter(|o| in_modality(o.visibility)).count());
        }
    }
    assert!(recovered as f64 >= 0.9 * visible as f64, "{recovered} of {visible}");
}

#[test]
fn model_input_scaling() {
    let mut rng = Rng::new(30);
    let (w, h) = (9, 7);
    let rgb: Vec<u8> = (0..w * h * 3).map(|_| rng.below(256) as u8).collect();
    let mut thermal: Vec<u8> = (0..w * h).map(|_| rng.below(256) as u8).collect();
    thermal[0] = 255;
    thermal[1] = 0;
    thermal[2] = 128;
    let sample = PairSample {
        rgb: Image8::from_pixels(w, h, 3, rgb.clone()).unwrap(),
        thermal: Image8::from_pixels(w, h, 1, thermal.clone()).unwrap(),
        annotations: Vec::new(),
    };
    let (r, t) = to_model_input::<f32>(&sample);
    assert_eq!(&t.data()[..3], &[1.0, 0.0, 128.0 / 255.0]);
    let mut worst = 0.0f64;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = r.at(&[c, y, x]) as f64;
                let back = (v * 255.0).round();
                assert_eq!(back as u8, rgb[(y * w + x) * 3 + c]);
                worst = worst.max((v - back / 255.0).abs());
            }
        }
    }
    assert!(worst < 1.0 / 510.0);
}
