//! Finite-difference checks of every differentiable operation, the fusion
//! module and the full detection loss, in double precision.

mod common;

use cft_core::autodiff::gradcheck::{check_inputs, check_params, GradCheckReport};
use cft_core::autodiff::{concat_cols, concat_rows, ParamStore, Var};
use cft_core::cft::{CftConfig, CftModule};
use cft_core::detector::{Detector, DetectorConfig, ForwardOptions, Mode};
use cft_core::geometry::{BBox, GroundTruth};
use cft_core::loss::{assign_targets, total_loss, LossWeights};
use cft_core::rng::Rng;
use cft_core::{Result, Tensor};
use common::{probe, random, randomize};

const STEP: f64 = 1e-4;
const TOL: f64 = 1e-4;

fn assert_ok(name: &str, r: GradCheckReport) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(
        r.max_rel_err < TOL,
        "{name}: rel err {:.3e} at {:?} (analytic {}, numeric {})",
        r.max_rel_err,
        r.worst,
        r.worst_analytic,
        r.worst_numeric
    );
}

fn unary(name: &str, shape: &[usize], lo: f64, hi: f64, f: impl for<'g> Fn(Var<'g, f64>) -> Result<Var<'g, f64>>) {
    let x = random(shape, name.len() as u64 * 31, lo, hi);
    let r = check_inputs(&[x], STEP, |g, v| probe(g, f(v[0])?, 1)).unwrap();
    assert_ok(name, r);
}

fn binary(
    name: &str,
    a: Tensor<f64>,
    b: Tensor<f64>,
    f: impl for<'g> Fn(Var<'g, f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
) {
    let r = check_inputs(&[a, b], STEP, |g, v| probe(g, f(v[0], v[1])?, 2)).unwrap();
    assert_ok(name, r);
}

#[test]
fn elementwise_binary_ops() {
    let a = random(&[3, 4], 1, -2.0, 2.0);
    let b = random(&[3, 4], 2, -2.0, 2.0);
    binary("add", a.clone(), b.clone(), |x, y| x.add(y));
    binary("sub", a.clone(), b.clone(), |x, y| x.sub(y));
    binary("mul", a.clone(), b.clone(), |x, y| x.mul(y));
    binary("div", a.clone(), random(&[3, 4], 3, 0.5, 2.0), |x, y| x.div(y));
    binary("minimum", a.clone(), b.clone(), |x, y| x.minimum(y));
    binary("maximum", a, b, |x, y| x.maximum(y));
}

#[test]
fn elementwise_unary_ops() {
    unary("scale", &[5], -1.0, 1.0, |x| x.scale(-2.5));
    unary("neg", &[5], -1.0, 1.0, |x| x.neg());
    unary("add_scalar", &[5], -1.0, 1.0, |x| x.add_scalar(0.7));
    unary("square", &[5], -1.0, 1.0, |x| x.square());
    unary("gelu", &[2, 6], -3.0, 3.0, |x| x.gelu());
    unary("silu", &[2, 6], -3.0, 3.0, |x| x.silu());
    unary("sigmoid", &[2, 6], -4.0, 4.0, |x| x.sigmoid());
    unary("exp", &[6], -2.0, 2.0, |x| x.exp());
    unary("ln", &[6], 0.2, 3.0, |x| x.ln());
    // values at least 0.05 away from the bounds
    unary("clamp", &[12], -2.0, 2.0, |x| {
        let shifted = x.value().map(|v| if (v - 1.0).abs() < 0.05 || (v + 1.0).abs() < 0.05 { 0.3 } else { 0.0 });
        x.add(x.graph().constant(shifted))?.clamp(-1.0, 1.0)
    });
    unary("sum", &[3, 3], -1.0, 1.0, |x| x.sum());
    unary("mean", &[3, 3], -1.0, 1.0, |x| x.mean());
}

#[test]
fn matrix_ops() {
    binary("matmul", random(&[3, 4], 4, -1.0, 1.0), random(&[4, 5], 5, -1.0, 1.0), |a, b| a.matmul(b));
    binary("matmul_nt", random(&[3, 4], 6, -1.0, 1.0), random(&[5, 4], 7, -1.0, 1.0), |a, b| a.matmul_nt(b));
    binary("add_row_bias", random(&[3, 4], 8, -1.0, 1.0), random(&[4], 9, -1.0, 1.0), |a, b| a.add_row_bias(b));
    binary(
        "add_channel_bias",
        random(&[2, 3, 3], 10, -1.0, 1.0),
        random(&[2], 11, -1.0, 1.0),
        |a, b| a.add_channel_bias(b),
    );
    unary("transpose", &[3, 5], -1.0, 1.0, |x| x.transpose());
    unary("reshape", &[3, 4], -1.0, 1.0, |x| x.reshape(&[2, 6]));
    unary("slice_cols", &[3, 5], -1.0, 1.0, |x| x.slice_cols(1, 4));
    unary("slice_rows", &[5, 3], -1.0, 1.0, |x| x.slice_rows(2, 4));
    unary("gather", &[4, 3], -1.0, 1.0, |x| x.gather(vec![0, 5, 5, 11, 3, 7], &[2, 3]));
    unary("softmax_rows", &[3, 5], -2.0, 2.0, |x| x.softmax(1));
    unary("softmax_cols", &[3, 5], -2.0, 2.0, |x| x.softmax(0));
    binary("concat_cols", random(&[3, 2], 12, -1.0, 1.0), random(&[3, 4], 13, -1.0, 1.0), |a, b| {
        concat_cols(&[a, b])
    });
    binary("concat_rows", random(&[2, 3, 3], 14, -1.0, 1.0), random(&[1, 3, 3], 15, -1.0, 1.0), |a, b| {
        concat_rows(&[a, b])
    });
}

#[test]
fn spatial_ops() {
    for (stride, pad) in [(1, 1), (2, 1), (2, 0)] {
        binary(
            &format!("conv2d s{stride} p{pad}"),
            random(&[2, 7, 6], 20, -1.0, 1.0),
            random(&[3, 2, 3, 3], 21, -1.0, 1.0),
            move |x, w| x.conv2d(w, stride, pad),
        );
    }
    binary("conv2d 1x1", random(&[3, 4, 4], 22, -1.0, 1.0), random(&[2, 3, 1, 1], 23, -1.0, 1.0), |x, w| {
        x.conv2d(w, 1, 0)
    });
    unary("adaptive_avg_pool even", &[2, 8, 8], -1.0, 1.0, |x| x.adaptive_avg_pool(4));
    unary("adaptive_avg_pool uneven", &[2, 7, 5], -1.0, 1.0, |x| x.adaptive_avg_pool(3));
    unary("bilinear_upsample", &[2, 3, 3], -1.0, 1.0, |x| x.bilinear_upsample(8, 7));
    let r = check_inputs(
        &[random(&[4, 6], 30, -2.0, 2.0), random(&[6], 31, 0.5, 1.5), random(&[6], 32, -0.5, 0.5)],
        STEP,
        |g, v| probe(g, v[0].layer_norm(v[1], v[2], 1e-5)?, 3),
    )
    .unwrap();
    assert_ok("layer_norm", r);
}

fn fusion_check(cfg: CftConfig, seed: u64) {
    let mut store = ParamStore::<f64>::new();
    let module = CftModule::new(cfg.clone(), &mut store, "cft", &mut Rng::new(seed)).unwrap();
    randomize(&mut store, seed, 0.3);
    let (c, h, w) = (cfg.channels, 6, 6);
    let fr = random(&[c, h, w], seed + 100, -1.0, 1.0);
    let ft = random(&[c, h, w], seed + 101, -1.0, 1.0);
    let pids: Vec<_> = store.iter().map(|(pid, _)| pid).collect();
    let r = check_params(&mut store, &pids, STEP, |g, s| {
        let out = module.fuse(g, s, g.constant(fr.clone()), g.constant(ft.clone()), false)?;
        probe(g, out.delta_r, 5)?.add(probe(g, out.delta_t, 6)?)
    })
    .unwrap();
    assert_ok("fusion parameters", r);

    let r = check_inputs(&[fr.clone(), ft.clone()], STEP, |g, v| {
        let out = module.fuse(g, &store, v[0], v[1], false)?;
        probe(g, out.delta_r, 5)?.add(probe(g, out.delta_t, 6)?)
    })
    .unwrap();
    assert_ok("fusion inputs", r);
}

#[test]
fn fusion_module_split_heads() {
    fusion_check(
        CftConfig {
            channels: 4,
            heads: 2,
            blocks: 2,
            pooled_size: 2,
            mlp_ratio: 2,
            paper_literal_heads: false,
            use_layernorm: false,
        },
        1,
    );
}

#[test]
fn fusion_module_literal_heads_with_layernorm() {
    fusion_check(
        CftConfig {
            channels: 3,
            heads: 2,
            blocks: 1,
            pooled_size: 2,
            mlp_ratio: 2,
            paper_literal_heads: true,
            use_layernorm: true,
        },
        2,
    );
}

/// Query, key, value and output projections plus the positional embedding,
/// checked by name.
#[test]
fn fusion_named_parameters() {
    let cfg = CftConfig {
        channels: 4,
        heads: 2,
        blocks: 1,
        pooled_size: 2,
        mlp_ratio: 2,
        paper_literal_heads: false,
        use_layernorm: false,
    };
    let mut store = ParamStore::<f64>::new();
    let module = CftModule::new(cfg, &mut store, "m", &mut Rng::new(3)).unwrap();
    randomize(&mut store, 3, 0.4);
    let fr = random(&[4, 4, 4], 40, -1.0, 1.0);
    let ft = random(&[4, 4, 4], 41, -1.0, 1.0);
    for name in ["m.block0.w_q", "m.block0.w_k", "m.block0.w_v", "m.block0.w_o", "m.pos_embed"] {
        let pid = store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
        let r = check_params(&mut store, &[pid], STEP, |g, s| {
            let out = module.fuse(g, s, g.constant(fr.clone()), g.constant(ft.clone()), false)?;
            probe(g, out.delta_r, 7)?.add(probe(g, out.delta_t, 8)?)
        })
        .unwrap();
        assert_ok(name, r);
    }
}

fn tiny_detector(mode: Mode) -> DetectorConfig {
    let mut cfg = DetectorConfig {
        mode,
        image_size: 16,
        stem_channels: 3,
        stage_channels: [4, 4, 4],
        pyramid_channels: 4,
        head_hidden: 4,
        ..DetectorConfig::default()
    };
    cfg.cft.channels = 4;
    cfg.cft.pooled_size = 2;
    cfg
}

#[test]
fn total_loss_all_parameters() {
    for mode in [Mode::Cft, Mode::TwoStream] {
        let cfg = tiny_detector(mode);
        let mut store = ParamStore::<f64>::new();
        let det = Detector::new(cfg, &mut store, 9).unwrap();
        randomize(&mut store, 9, 0.3);
        let rgb = random(&[3, 16, 16], 50, 0.0, 1.0);
        let thermal = random(&[1, 16, 16], 51, 0.0, 1.0);
        let gts = vec![
            GroundTruth { bbox: BBox::new(1.3, 2.1, 7.7, 12.4), class_id: 0 },
            GroundTruth { bbox: BBox::new(9.0, 8.2, 15.1, 11.9), class_id: 2 },
        ];
        let assignment = assign_targets(&gts, &det.grid_sizes(), 16.0, 16.0).unwrap();
        let pids: Vec<_> = store.iter().map(|(pid, _)| pid).collect();
        let r = check_params(&mut store, &pids, STEP, |g, s| {
            let out = det.forward(
                g,
                s,
                g.constant(rgb.clone()),
                g.constant(thermal.clone()),
                ForwardOptions::default(),
            )?;
            Ok(total_loss(&out.heads, &assignment, &LossWeights::default())?.total)
        })
        .unwrap();
        assert_ok(&format!("total loss ({mode})"), r);
    }
}

#[test]
fn total_loss_weighted_terms_wrt_heads() {
    let gts = vec![
        GroundTruth { bbox: BBox::new(0.5, 0.5, 6.0, 9.0), class_id: 1 },
        GroundTruth { bbox: BBox::new(8.0, 3.0, 15.5, 7.0), class_id: 0 },
    ];
    let assignment = assign_targets(&gts, &[4, 2, 1], 16.0, 16.0).unwrap();
    let weights = LossWeights { box_loss: 0.5, cls: 2.0, obj: 1.5, noobj: 0.25 };
    let heads = [
        random(&[8, 4, 4], 60, -2.0, 2.0),
        random(&[8, 2, 2], 61, -2.0, 2.0),
        random(&[8, 1, 1], 62, -2.0, 2.0),
    ];
    let r = check_inputs(&heads, STEP, |_, v| Ok(total_loss(v, &assignment, &weights)?.total)).unwrap();
    assert_ok("weighted total loss", r);
}
