use super::*;
use crate::model::ModelConfig;
use ndarray::{array, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn set(net: &mut Network<f64>, name: &str, values: &[f64]) {
    let p = net.params_mut().by_name_mut(name).unwrap_or_else(|| panic!("{name}"));
    assert_eq!(p.len(), values.len(), "{name}");
    for (d, &v) in p.iter_mut().zip(values) {
        *d = v;
    }
}

fn zero(net: &mut Network<f64>, name: &str) {
    net.params_mut().by_name_mut(name).unwrap().fill(0.0);
}

/// Stem channels respond with ReLU(+laplacian) and ReLU(-laplacian); the
/// residual branch is silenced so the features are the stem output, and
/// class 1's logit is the mean absolute laplacian response.
pub(crate) fn planted_model(size: usize) -> Network<f64> {
    let cfg = ModelConfig {
        input_size: size,
        stem_kernel: 3,
        stem_stride: 1,
        widths: vec![2],
        blocks_per_stage: 1,
        embedding_dim: 2,
        num_classes: 4,
    };
    let mut net = Network::<f64>::new(cfg, 0).unwrap();
    let lap = [0.0, -1.0, 0.0, -1.0, 4.0, -1.0, 0.0, -1.0, 0.0];
    let neg: Vec<f64> = lap.iter().map(|v| -v).collect();
    set(&mut net, "stem.conv.weight", &[&lap[..], &neg[..]].concat());
    zero(&mut net, "stage1.block0.a.conv.weight");
    zero(&mut net, "stage1.block0.b.conv.weight");
    set(&mut net, "embed.weight", &[1.0, 0.0, 0.0, 1.0]);
    zero(&mut net, "embed.bias");
    set(&mut net, "head.weight", &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    zero(&mut net, "head.bias");
    net
}

pub(crate) fn planted_input(size: usize, region: (usize, usize, usize, usize), seed: u64) -> (Array4<f64>, Array2<bool>) {
    let (y0, x0, h, w) = region;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Array4::zeros((1, 1, size, size));
    let mut mask = Array2::from_elem((size, size), false);
    for y in y0..y0 + h {
        for xx in x0..x0 + w {
            x[[0, 0, y, xx]] = if rng.random::<bool>() { 1.0 } else { -1.0 };
            mask[[y, xx]] = true;
        }
    }
    (x, mask)
}

#[test]
fn normalize_constant_and_range() {
    let c = Array2::from_elem((3, 4), 2.5);
    assert!(normalize_map(&c).iter().all(|&v| v == 0.0));
    let m = array![[1.0, 3.0], [2.0, 5.0]];
    let n = normalize_map(&m);
    assert_eq!(n, array![[0.0, 0.5], [0.25, 1.0]]);
}

#[test]
fn single_channel_unit_gradient_gives_relu_of_activation() {
    let a = Array3::from_shape_vec((1, 2, 2), vec![-1.0, 2.0, 0.5, 4.0]).unwrap();
    let g = Array3::from_elem((1, 2, 2), 1.0);
    let w = grad_cam_weights(g.view());
    assert_eq!(w, vec![1.0]);
    assert_eq!(weighted_relu_sum(a.view(), &w), array![[0.0, 2.0], [0.5, 4.0]]);
    assert_eq!(score_cam_weights(&[3.7]), vec![1.0]);
}

#[test]
fn two_channel_hand_computed() {
    let a = Array3::from_shape_vec((2, 2, 2), vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 2.0, -3.0]).unwrap();
    let g = Array3::from_shape_vec((2, 2, 2), vec![0.0, 1.0, 0.5, 0.5, -1.0, -1.0, -2.0, 0.0]).unwrap();
    let w = grad_cam_weights(g.view());
    assert_eq!(w, vec![0.5, -1.0]);
    assert_eq!(weighted_relu_sum(a.view(), &w), array![[1.5, 1.0], [0.0, 5.0]]);
    assert_eq!(score_cam_weights(&[0.3, 0.3]), vec![0.5, 0.5]);
}

#[test]
fn network_single_channel_identity() {
    let cfg = ModelConfig {
        input_size: 8,
        stem_kernel: 3,
        stem_stride: 1,
        widths: vec![1],
        blocks_per_stage: 1,
        embedding_dim: 1,
        num_classes: 4,
    };
    let mut net = Network::<f64>::new(cfg, 3).unwrap();
    let uv = (net.config().final_spatial().pow(2)) as f64;
    set(&mut net, "embed.weight", &[uv]);
    set(&mut net, "head.weight", &[0.0, 1.0, 0.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.random_range(-1.0..1.0));
    let features = net.forward(&x, Mode::Eval).unwrap().feature_maps().unwrap();
    let expect = features.index_axis(Axis(0), 0).index_axis(Axis(0), 0).mapv(|v| v.max(0.0));

    let gc = grad_cam(&net, &x, 1).unwrap();
    assert_eq!(gc.channel_weights.len(), 1);
    assert!((gc.channel_weights[0] - 1.0).abs() < 1e-12);
    for (a, b) in gc.raw.iter().zip(expect.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(gc.native, normalize_map(&gc.raw));

    let sc = score_cam(&net, &x, 1, None).unwrap();
    assert_eq!(sc.channel_weights, vec![1.0]);
    assert_eq!(sc.raw, expect);

    // A zero head row for class 2 gives a zero gradient and an all-zero map.
    let zc = grad_cam(&net, &x, 2).unwrap();
    assert!(zc.raw.iter().chain(zc.upsampled.iter()).all(|&v| v == 0.0));
}

#[test]
fn class_out_of_range_is_argument_error() {
    let net = planted_model(8);
    let x = Array4::zeros((1, 1, 8, 8));
    assert!(matches!(grad_cam(&net, &x, 4), Err(Error::InvalidArgument(_))));
    assert!(matches!(score_cam(&net, &x, 9, None), Err(Error::InvalidArgument(_))));
}

#[test]
fn grad_cam_weights_match_finite_differences() {
    let cfg = ModelConfig {
        input_size: 10,
        stem_kernel: 3,
        stem_stride: 1,
        widths: vec![3, 4],
        blocks_per_stage: 1,
        embedding_dim: 5,
        num_classes: 4,
    };
    let net = Network::<f64>::new(cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Array4::from_shape_fn((1, 1, 10, 10), |_| rng.random_range(-1.0..1.0));
    let features = net.forward(&x, Mode::Eval).unwrap().feature_maps().unwrap();
    let (_, k, u, v) = features.dim();
    for class in 0..4 {
        let gc = grad_cam(&net, &x, class).unwrap();
        for ch in 0..k {
            let h = 1e-5;
            let shifted = |t: f64| {
                let mut f = features.clone();
                f.slice_mut(s![0, ch, .., ..]).mapv_inplace(|a| a + t);
                net.logits_from_features(&f)[[0, class]]
            };
            let fd = (shifted(h) - shifted(-h)) / (2.0 * h) / (u * v) as f64;
            let rel = (fd - gc.channel_weights[ch]).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-3, "class {class} channel {ch}: {fd} vs {}", gc.channel_weights[ch]);
        }
    }
}

#[test]
fn planted_region_is_localised_by_both_methods() {
    let net = planted_model(32);
    let (x, region) = planted_input(32, (8, 12, 10, 10), 4);
    for map in [grad_cam(&net, &x, 1).unwrap(), score_cam(&net, &x, 1, None).unwrap()] {
        let top = top_fraction_mask(&map.upsampled, 0.1);
        let score = iou(&top, &region);
        assert!(score > 0.5, "{:?} IoU {score}", map.method);
        let stats = MapStats::of(&map);
        assert!(region[[stats.max_row, stats.max_col]], "{:?}", map.method);
    }
}

#[test]
fn overlay_extremes_blend_colormap_ends() {
    let base = GrayImage::from_fn(4, 4, |y, x| (y * 4 + x) as f32 / 15.0);
    let mut map = SaliencyMap {
        method: CamMethod::GradCam,
        class_id: 0,
        raw: Array2::zeros((4, 4)),
        native: Array2::zeros((4, 4)),
        upsampled: Array2::zeros((4, 4)),
        channel_weights: vec![],
        source_id: "x".into(),
    };
    for (fill, color) in [(0.0, VIRIDIS[0]), (1.0, VIRIDIS[255])] {
        map.upsampled.fill(fill);
        let rgb = render_overlay(&base, &map).unwrap();
        for (x, y, px) in rgb.enumerate_pixels() {
            let g = base.get(y as usize, x as usize) as f64 * 255.0;
            let want = color.map(|c| (0.6 * g + 0.4 * c as f64).round() as u8);
            assert_eq!(px.0, want);
        }
    }
}

#[test]
fn top_fraction_counts() {
    let m = Array2::from_shape_fn((10, 10), |(y, x)| (y * 10 + x) as f64);
    let t = top_fraction_mask(&m, 0.1);
    assert_eq!(t.iter().filter(|&&b| b).count(), 10);
    assert!(t.row(9).iter().all(|&b| b));
    assert_eq!(iou(&t, &t), 1.0);
}
