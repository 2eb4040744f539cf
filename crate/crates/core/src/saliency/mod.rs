//! Grad-CAM and Score-CAM over the final convolutional feature maps, and
//! heat-map overlays.

mod viridis;

pub use viridis::VIRIDIS;

use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array4, ArrayView3, Axis};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::model::{batch_from_inputs, prepare_input, Mode, Network, Scalar};
use crate::tiling::{resize_bilinear, sample_axis};

pub const OVERLAY_ALPHA: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CamMethod {
    GradCam,
    ScoreCam,
}

impl CamMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::ScoreCam => "scorecam",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub method: CamMethod,
    pub class_id: usize,
    /// `ReLU(sum_k w_k A_k)` before normalisation, `U x V`.
    pub raw: Array2<f64>,
    /// `raw` min-max normalised.
    pub native: Array2<f64>,
    /// `raw` bilinearly upsampled to the model input, then normalised.
    pub upsampled: Array2<f64>,
    pub channel_weights: Vec<f64>,
    pub source_id: String,
}

/// Min-max normalisation to `[0, 1]`; constant maps become all zeros.
pub fn normalize_map(map: &Array2<f64>) -> Array2<f64> {
    let (lo, hi) = map
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if map.is_empty() || hi <= lo {
        return Array2::zeros(map.raw_dim());
    }
    map.mapv(|v| (v - lo) / (hi - lo))
}

/// Corner-aligned bilinear resampling, matching image resizing.
pub fn upsample_map(map: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    let ys = sample_axis(h, out_h);
    let xs = sample_axis(w, out_w);
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, fy) = ys[i];
        let (x0, x1, fx) = xs[j];
        let (fy, fx) = (fy as f64, fx as f64);
        let top = map[[y0, x0]] + (map[[y0, x1]] - map[[y0, x0]]) * fx;
        let bottom = map[[y1, x0]] + (map[[y1, x1]] - map[[y1, x0]]) * fx;
        top + (bottom - top) * fy
    })
}

/// `ReLU(sum_k weights[k] * features[k])` for features shaped `[K, U, V]`.
pub fn weighted_relu_sum(features: ArrayView3<f64>, weights: &[f64]) -> Array2<f64> {
    let (_, u, v) = features.dim();
    let mut out = Array2::zeros((u, v));
    for (a, &w) in features.outer_iter().zip(weights) {
        out.scaled_add(w, &a);
    }
    out.mapv_inplace(|x: f64| x.max(0.0));
    out
}

/// Grad-CAM channel weights: spatial mean of each gradient channel.
pub fn grad_cam_weights(grads: ArrayView3<f64>) -> Vec<f64> {
    grads.outer_iter().map(|g| g.mean().unwrap_or(0.0)).collect()
}

/// Score-CAM channel weights: softmax over channels of the score increase.
pub fn score_cam_weights(deltas: &[f64]) -> Vec<f64> {
    let m = deltas.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = deltas.iter().map(|d| (d - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

fn check_single<F: Scalar>(net: &Network<F>, input: &Array4<F>, class_id: usize) -> Result<()> {
    if class_id >= net.config().num_classes {
        return Err(Error::InvalidArgument(format!(
            "class {class_id} out of range for {} classes",
            net.config().num_classes
        )));
    }
    if input.dim().0 != 1 {
        return Err(Error::Shape(format!("saliency expects a single input, got a batch of {}", input.dim().0)));
    }
    Ok(())
}

fn to_f64_3<F: Scalar>(a: &Array4<F>) -> ndarray::Array3<f64> {
    a.index_axis(Axis(0), 0).mapv(|v| v.f64())
}

fn finish(method: CamMethod, class_id: usize, raw: Array2<f64>, weights: Vec<f64>, size: usize) -> SaliencyMap {
    let upsampled = normalize_map(&upsample_map(&raw, size, size));
    SaliencyMap {
        method,
        class_id,
        native: normalize_map(&raw),
        raw,
        upsampled,
        channel_weights: weights,
        source_id: String::new(),
    }
}

/// Grad-CAM for one standardised input of shape `[1, 1, S, S]`.
pub fn grad_cam<F: Scalar>(net: &Network<F>, input: &Array4<F>, class_id: usize) -> Result<SaliencyMap> {
    check_single(net, input, class_id)?;
    let tape = net.forward(input, Mode::Eval)?;
    let features = to_f64_3(&tape.feature_maps()?);
    let grads = to_f64_3(&net.grad_wrt_activation(&tape, class_id)?);
    let weights = grad_cam_weights(grads.view());
    let raw = weighted_relu_sum(features.view(), &weights);
    Ok(finish(CamMethod::GradCam, class_id, raw, weights, net.config().input_size))
}

/// Score-CAM for one standardised input. `baseline` defaults to the all-zero
/// input.
pub fn score_cam<F: Scalar>(
    net: &Network<F>,
    input: &Array4<F>,
    class_id: usize,
    baseline: Option<&Array4<F>>,
) -> Result<SaliencyMap> {
    check_single(net, input, class_id)?;
    let size = net.config().input_size;
    let tape = net.forward(input, Mode::Eval)?;
    let features = to_f64_3(&tape.feature_maps()?);
    let k = features.dim().0;

    let zero = Array4::<F>::zeros(input.raw_dim());
    let base = baseline.unwrap_or(&zero);
    if base.dim() != input.dim() {
        return Err(Error::Shape("baseline must match the input shape".into()));
    }
    let base_score = net.infer(base)?.logits[[0, class_id]].f64();

    let mut masked = Array4::<F>::zeros((k, 1, size, size));
    for (c, a) in features.outer_iter().enumerate() {
        let mask = normalize_map(&upsample_map(&a.to_owned(), size, size));
        let x = input.slice(s![0, 0, .., ..]);
        masked
            .slice_mut(s![c, 0, .., ..])
            .assign(&ndarray::Zip::from(&x).and(&mask).map_collect(|&v, &m| v * F::of(m)));
    }
    let logits = net.infer(&masked)?.logits;
    let deltas: Vec<f64> = (0..k).map(|c| logits[[c, class_id]].f64() - base_score).collect();
    let weights = score_cam_weights(&deltas);
    let raw = weighted_relu_sum(features.view(), &weights);
    Ok(finish(CamMethod::ScoreCam, class_id, raw, weights, size))
}

/// Standardises a tile with the network's input normalisation and runs the
/// chosen CAM method on it.
pub fn cam_for_tile<F: Scalar>(
    net: &Network<F>,
    tile: &GrayImage,
    source_id: &str,
    class_id: usize,
    method: CamMethod,
) -> Result<SaliencyMap> {
    let size = net.config().input_size;
    let prepared = prepare_input(tile, size, net.norm)?;
    let input = batch_from_inputs::<F>(&[&prepared], size)?;
    let mut map = match method {
        CamMethod::GradCam => grad_cam(net, &input, class_id)?,
        CamMethod::ScoreCam => score_cam(net, &input, class_id, None)?,
    };
    map.source_id = source_id.to_string();
    Ok(map)
}

/// Mask of the `fraction` highest-valued pixels (ties resolved in row-major
/// order).
pub fn top_fraction_mask(map: &Array2<f64>, fraction: f64) -> Array2<bool> {
    let n = map.len();
    let keep = ((fraction * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let flat: Vec<f64> = map.iter().cloned().collect();
    order.sort_by(|&a, &b| flat[b].total_cmp(&flat[a]).then(a.cmp(&b)));
    let mut mask = vec![false; n];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    Array2::from_shape_vec(map.raw_dim(), mask).expect("same element count")
}

pub fn iou(a: &Array2<bool>, b: &Array2<bool>) -> f64 {
    let inter = ndarray::Zip::from(a).and(b).fold(0usize, |n, &x, &y| n + (x && y) as usize);
    let union = ndarray::Zip::from(a).and(b).fold(0usize, |n, &x, &y| n + (x || y) as usize);
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Blends the base image, resized to the map, with the viridis colour of each
/// saliency value at [`OVERLAY_ALPHA`].
pub fn render_overlay(base: &GrayImage, map: &SaliencyMap) -> Result<image::RgbImage> {
    let (h, w) = map.upsampled.dim();
    let base = resize_bilinear(base, h, w)?;
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for ((y, x), &v) in map.upsampled.indexed_iter() {
        let g = base.get(y, x).clamp(0.0, 1.0) as f64 * 255.0;
        let idx = (v.clamp(0.0, 1.0) * 255.0).round() as usize;
        let c = VIRIDIS[idx];
        let px = c.map(|ch| ((1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * ch as f64).round() as u8);
        out.put_pixel(x as u32, y as u32, image::Rgb(px));
    }
    Ok(out)
}

/// `{root}/cam/{method}/{tile_id}_c{class}.png`
pub fn cam_png_path(root: &Path, map: &SaliencyMap) -> PathBuf {
    root.join("cam")
        .join(map.method.as_str())
        .join(format!("{}_c{}.png", map.source_id, map.class_id))
}

pub fn save_overlay(root: &Path, base: &GrayImage, map: &SaliencyMap) -> Result<PathBuf> {
    let path = cam_png_path(root, map);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    render_overlay(base, map)?
        .save(&path)
        .map_err(|e| Error::Image { path: path.clone(), source: e })?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapStats {
    pub tile_id: String,
    pub method: &'static str,
    pub class_id: usize,
    pub max_row: usize,
    pub max_col: usize,
    /// Fraction of upsampled pixels with normalised saliency of at least 0.9.
    pub top_decile_area: f64,
}

impl MapStats {
    pub fn of(map: &SaliencyMap) -> Self {
        let mut best = (0, 0, f64::NEG_INFINITY);
        for ((y, x), &v) in map.upsampled.indexed_iter() {
            if v > best.2 {
                best = (y, x, v);
            }
        }
        let hot = map.upsampled.iter().filter(|&&v| v >= 0.9).count();
        MapStats {
            tile_id: map.source_id.clone(),
            method: map.method.as_str(),
            class_id: map.class_id,
            max_row: best.0,
            max_col: best.1,
            top_decile_area: hot as f64 / map.upsampled.len().max(1) as f64,
        }
    }
}

pub fn write_stats_csv(path: &Path, stats: &[MapStats]) -> Result<()> {
    let mut w = crate::datasets::csv_writer(path)?;
    for s in stats {
        w.serialize(s).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests;
