//! Compact residual network: single-channel stem, residual stages, global
//! average pooling, an affine 128-d embedding layer and an affine class head.
//!
//! The forward pass records an [`ActivationTape`] from which the backward pass
//! recovers parameter gradients, input gradients, and the gradient of any
//! class logit with respect to the final convolutional feature maps.

mod checkpoint;
mod layers;
mod params;
mod scalar;

pub use checkpoint::{CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{col2im, im2col, Act, BatchNorm, Conv2d, Linear, Mode};
pub use params::{Grads, Param, ParamId, ParamKind, ParamStore};
pub use scalar::Scalar;

use ndarray::{s, Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tiling::resize_bilinear;
use layers::{relu_backward, relu_inplace, BnCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input side in pixels.
    pub input_size: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Channel width of each residual stage; stages after the first halve the
    /// spatial resolution.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub embedding_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            stem_kernel: 7,
            stem_stride: 4,
            widths: vec![16, 32, 64],
            blocks_per_stage: 2,
            embedding_dim: 128,
            num_classes: crate::NUM_CLASSES,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model config: {m}")));
        if self.input_size == 0 || self.stem_kernel == 0 || self.stem_stride == 0 {
            return bad("input size, stem kernel and stem stride must be positive");
        }
        if self.widths.is_empty() || self.widths.contains(&0) || self.blocks_per_stage == 0 {
            return bad("need at least one non-empty stage");
        }
        if self.embedding_dim == 0 || self.num_classes < 2 {
            return bad("embedding dim must be positive and classes at least 2");
        }
        if self.final_spatial() == 0 {
            return bad("input too small for the configured downsampling");
        }
        Ok(())
    }

    /// Side length of the final feature maps.
    pub fn final_spatial(&self) -> usize {
        let pad = self.stem_kernel / 2;
        if self.input_size + 2 * pad < self.stem_kernel {
            return 0;
        }
        let mut s = (self.input_size + 2 * pad - self.stem_kernel) / self.stem_stride + 1;
        for _ in 1..self.widths.len() {
            s = (s + 2 - 3) / 2 + 1;
        }
        s
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

/// Pixel standardisation applied before the network: `(v - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
        }
    }
}

impl InputNorm {
    /// Mean and standard deviation over every pixel of `images`.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a [f32]>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        for px in images {
            for &v in px {
                n += 1;
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        if n == 0 {
            return Self::default();
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        Self {
            mean,
            std: if var > 1e-12 { var.sqrt() } else { 1.0 },
        }
    }
}

/// Resizes a tile to the model input and standardises it.
pub fn prepare_input(tile: &GrayImage, input_size: usize, norm: InputNorm) -> Result<Vec<f32>> {
    let resized = resize_bilinear(tile, input_size, input_size)?;
    let (m, s) = (norm.mean as f32, norm.std as f32);
    Ok(resized.pixels().iter().map(|&v| (v - m) / s).collect())
}

/// Stacks prepared inputs into an `[N, 1, S, S]` batch.
pub fn batch_from_inputs<F: Scalar>(inputs: &[&[f32]], input_size: usize) -> Result<Array4<F>> {
    let plane = input_size * input_size;
    let mut data = Vec::with_capacity(inputs.len() * plane);
    for x in inputs {
        if x.len() != plane {
            return Err(Error::Shape(format!(
                "input has {} values, expected {input_size}x{input_size}",
                x.len()
            )));
        }
        data.extend(x.iter().map(|&v| F::of(v as f64)));
    }
    Array4::from_shape_vec((inputs.len(), 1, input_size, input_size), data)
        .map_err(|e| Error::Shape(e.to_string()))
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, kernel, stride, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), out_ch),
        }
    }

    fn forward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        x: &Act<F>,
        mode: Mode,
        stats: &mut Vec<BnStats<F>>,
    ) -> (Act<F>, BnCache<F>) {
        let z = self.conv.forward(store, x);
        let (y, cache, batch) = self.bn.forward(store, z, mode);
        if let Some((mean, var)) = batch {
            stats.push(BnStats {
                running_mean: self.bn.running_mean,
                running_var: self.bn.running_var,
                mean,
                var,
            });
        }
        (y, cache)
    }

    fn backward<F: Scalar>(
        &self,
        store: &ParamStore<F>,
        input: &Act<F>,
        cache: &BnCache<F>,
        dy: &Act<F>,
        grads: &mut Grads<F>,
    ) -> Act<F> {
        let dz = self.bn.backward(store, cache, dy, grads);
        self.conv.backward(store, input, &dz, grads)
    }
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    first: ConvBn,
    second: ConvBn,
    shortcut: Option<ConvBn>,
}

/// Batch statistics from one normalisation layer in a training forward pass.
#[derive(Debug, Clone)]
pub struct BnStats<F> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Array1<F>,
    pub var: Array1<F>,
}

#[derive(Debug, Clone)]
struct StemCache<F> {
    input: Act<F>,
    bn: BnCache<F>,
    out: Act<F>,
}

#[derive(Debug, Clone)]
struct BlockCache<F> {
    input: Act<F>,
    bn1: BnCache<F>,
    hidden: Act<F>,
    bn2: BnCache<F>,
    shortcut_bn: Option<BnCache<F>>,
    out: Act<F>,
}

/// Everything a forward pass recorded.
#[derive(Debug, Clone)]
pub struct ActivationTape<F> {
    pub mode: Mode,
    stem: Option<StemCache<F>>,
    blocks: Vec<BlockCache<F>>,
    /// Final convolutional feature maps, channel-major `[K, N, U, V]`.
    features: Option<Act<F>>,
    pooled: Array2<F>,
    /// `[N, embedding_dim]`
    pub embedding: Array2<F>,
    /// `[N, num_classes]`
    pub logits: Array2<F>,
    pub bn_stats: Vec<BnStats<F>>,
}

impl<F: Scalar> ActivationTape<F> {
    pub fn retained(&self) -> bool {
        self.features.is_some()
    }

    /// Final feature maps as `[N, K, U, V]`.
    pub fn feature_maps(&self) -> Result<Array4<F>> {
        let a = self
            .features
            .as_ref()
            .ok_or_else(|| Error::State("feature maps were not retained".into()))?;
        Ok(a.view().permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned())
    }

    pub fn probabilities(&self) -> Array2<F> {
        softmax_rows(&self.logits)
    }
}

#[derive(Debug, Clone)]
pub struct Network<F> {
    config: ModelConfig,
    pub norm: InputNorm,
    store: ParamStore<F>,
    stem: ConvBn,
    blocks: Vec<ResidualBlock>,
    embed: Linear,
    head: Linear,
}

impl<F: Scalar> Network<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stem = ConvBn::new(
            &mut store,
            "stem",
            1,
            config.widths[0],
            config.stem_kernel,
            config.stem_stride,
            &mut rng,
        );
        let mut blocks = Vec::new();
        let mut in_ch = config.widths[0];
        for (si, &width) in config.widths.iter().enumerate() {
            for bi in 0..config.blocks_per_stage {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("stage{}.block{bi}", si + 1);
                let first = ConvBn::new(&mut store, &format!("{name}.a"), in_ch, width, 3, stride, &mut rng);
                let second = ConvBn::new(&mut store, &format!("{name}.b"), width, width, 3, 1, &mut rng);
                let shortcut = (stride != 1 || in_ch != width).then(|| {
                    ConvBn::new(&mut store, &format!("{name}.shortcut"), in_ch, width, 1, stride, &mut rng)
                });
                blocks.push(ResidualBlock {
                    first,
                    second,
                    shortcut,
                });
                in_ch = width;
            }
        }
        let embed = Linear::new(&mut store, "embed", in_ch, config.embedding_dim, &mut rng);
        let head = Linear::new(&mut store, "head", config.embedding_dim, config.num_classes, &mut rng);
        Ok(Self {
            config,
            norm: InputNorm::default(),
            store,
            stem,
            blocks,
            embed,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    /// Runs the network on an `[N, 1, S, S]` batch, retaining activations.
    pub fn forward(&self, input: &Array4<F>, mode: Mode) -> Result<ActivationTape<F>> {
        self.forward_with(input, mode, true)
    }

    /// Eval-mode forward without retained activations.
    pub fn infer(&self, input: &Array4<F>) -> Result<ActivationTape<F>> {
        self.forward_with(input, Mode::Eval, false)
    }

    pub fn forward_with(&self, input: &Array4<F>, mode: Mode, retain: bool) -> Result<ActivationTape<F>> {
        let (n, c, h, w) = input.dim();
        let s = self.config.input_size;
        if n == 0 || c != 1 || h != s || w != s {
            return Err(Error::Shape(format!(
                "expected input [N>0, 1, {s}, {s}], got [{n}, {c}, {h}, {w}]"
            )));
        }
        let x: Act<F> = input
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        let mut stats = Vec::new();
        let (mut out, bn) = self.stem.forward(&self.store, &x, mode, &mut stats);
        relu_inplace(&mut out);
        let stem = retain.then(|| StemCache {
            input: x,
            bn,
            out: out.clone(),
        });
        let mut caches = Vec::with_capacity(if retain { self.blocks.len() } else { 0 });
        for block in &self.blocks {
            let (mut hidden, bn1) = block.first.forward(&self.store, &out, mode, &mut stats);
            relu_inplace(&mut hidden);
            let (mut y, bn2) = block.second.forward(&self.store, &hidden, mode, &mut stats);
            let shortcut_bn = match &block.shortcut {
                Some(sc) => {
                    let (skip, cache) = sc.forward(&self.store, &out, mode, &mut stats);
                    y += &skip;
                    Some(cache)
                }
                None => {
                    y += &out;
                    None
                }
            };
            relu_inplace(&mut y);
            if retain {
                caches.push(BlockCache {
                    input: out,
                    bn1,
                    hidden,
                    bn2,
                    shortcut_bn,
                    out: y.clone(),
                });
            }
            out = y;
        }
        let pooled = global_average_pool(&out);
        let embedding = self.embed.forward(&self.store, &pooled);
        let logits = self.head.forward(&self.store, &embedding);
        Ok(ActivationTape {
            mode,
            stem,
            blocks: caches,
            features: retain.then_some(out),
            pooled,
            embedding,
            logits,
            bn_stats: stats,
        })
    }

    /// Logits computed from externally supplied final feature maps `[N, K, U, V]`.
    pub fn logits_from_features(&self, features: &Array4<F>) -> Array2<F> {
        let a: Act<F> = features
            .view()
            .permuted_axes([1, 0, 2, 3])
            .as_standard_layout()
            .into_owned();
        let pooled = global_average_pool(&a);
        let emb = self.embed.forward(&self.store, &pooled);
        self.head.forward(&self.store, &emb)
    }

    fn head_backward(
        &self,
        tape: &ActivationTape<F>,
        dlogits: &Array2<F>,
        grads: &mut Grads<F>,
    ) -> Result<Act<F>> {
        let a = tape
            .features
            .as_ref()
            .ok_or_else(|| Error::State("feature maps were not retained".into()))?;
        let demb = self.head.backward(&self.store, &tape.embedding, dlogits, grads);
        let dpooled = self.embed.backward(&self.store, &tape.pooled, &demb, grads);
        let (k, n, u, v) = a.dim();
        let scale = F::one() / F::of((u * v) as f64);
        let mut da = Array4::<F>::zeros((k, n, u, v));
        for ki in 0..k {
            for ni in 0..n {
                let g = dpooled[[ni, ki]] * scale;
                da.slice_mut(s![ki, ni, .., ..]).fill(g);
            }
        }
        Ok(da)
    }

    /// Gradient of `logit[class_id]` with respect to the final feature maps,
    /// per sample, as `[N, K, U, V]`.
    pub fn grad_wrt_activation(&self, tape: &ActivationTape<F>, class_id: usize) -> Result<Array4<F>> {
        if class_id >= self.config.num_classes {
            return Err(Error::InvalidArgument(format!("class {class_id} out of range")));
        }
        let n = tape.logits.nrows();
        let mut dlogits = Array2::<F>::zeros((n, self.config.num_classes));
        dlogits.column_mut(class_id).fill(F::one());
        let mut scratch = self.store.zeros_like();
        let da = self.head_backward(tape, &dlogits, &mut scratch)?;
        Ok(da.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned())
    }

    /// Back-propagates `dlogits` through the whole network. Returns parameter
    /// gradients and the gradient with respect to the `[N, 1, S, S]` input.
    pub fn backward(&self, tape: &ActivationTape<F>, dlogits: &Array2<F>) -> Result<(Grads<F>, Array4<F>)> {
        let stem = tape
            .stem
            .as_ref()
            .ok_or_else(|| Error::State("activations were not retained".into()))?;
        let mut grads = self.store.zeros_like();
        let mut d = self.head_backward(tape, dlogits, &mut grads)?;
        for (block, cache) in self.blocks.iter().zip(&tape.blocks).rev() {
            let dy = relu_backward(&cache.out, &d);
            let dh = block.second.backward(&self.store, &cache.hidden, &cache.bn2, &dy, &mut grads);
            let dh = relu_backward(&cache.hidden, &dh);
            let mut dx = block.first.backward(&self.store, &cache.input, &cache.bn1, &dh, &mut grads);
            match (&block.shortcut, &cache.shortcut_bn) {
                (Some(sc), Some(bn)) => {
                    dx += &sc.backward(&self.store, &cache.input, bn, &dy, &mut grads);
                }
                _ => dx += &dy,
            }
            d = dx;
        }
        let d = relu_backward(&stem.out, &d);
        let dx = self.stem.backward(&self.store, &stem.input, &stem.bn, &d, &mut grads);
        let dinput = dx.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned();
        Ok((grads, dinput))
    }

    /// Mean cross-entropy of a batch and its gradients.
    pub fn loss_and_grads(
        &self,
        input: &Array4<F>,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(F, ActivationTape<F>, Grads<F>)> {
        let tape = self.forward(input, mode)?;
        let (loss, dlogits) = cross_entropy(&tape.logits, labels)?;
        let (grads, _) = self.backward(&tape, &dlogits)?;
        Ok((loss, tape, grads))
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BnStats<F>]) {
        let mom = F::of(layers::BN_MOMENTUM);
        let keep = F::one() - mom;
        for st in stats {
            for (r, &m) in self.store.value_mut(st.running_mean).iter_mut().zip(&st.mean) {
                *r = keep * *r + mom * m;
            }
            for (r, &v) in self.store.value_mut(st.running_var).iter_mut().zip(&st.var) {
                *r = keep * *r + mom * v;
            }
        }
    }
}

/// `[K, N, U, V]` → `[N, K]` spatial means.
fn global_average_pool<F: Scalar>(a: &Act<F>) -> Array2<F> {
    let (k, n, u, v) = a.dim();
    let scale = F::one() / F::of((u * v) as f64);
    let mut out = Array2::<F>::zeros((n, k));
    for ki in 0..k {
        for ni in 0..n {
            out[[ni, ki]] = a.slice(s![ki, ni, .., ..]).iter().copied().sum::<F>() * scale;
        }
    }
    out
}

pub fn softmax_rows<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    let mut p = logits.clone();
    for mut row in p.axis_iter_mut(Axis(0)) {
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z: F = row.iter().copied().sum();
        row.mapv_inplace(|v| v / z);
    }
    p
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy<F: Scalar>(logits: &Array2<F>, labels: &[usize]) -> Result<(F, Array2<F>)> {
    let (n, c) = logits.dim();
    if labels.len() != n || n == 0 {
        return Err(Error::Data(format!("{} labels for {n} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Data(format!("label {bad} outside 0..{c}")));
    }
    let mut grad = softmax_rows(logits);
    let mut loss = F::zero();
    let inv_n = F::one() / F::of(n as f64);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().copied().fold(F::neg_infinity(), F::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
        loss += lse - logits[[i, y]];
        grad[[i, y]] -= F::one();
    }
    grad.mapv_inplace(|g| g * inv_n);
    Ok((loss * inv_n, grad))
}

#[cfg(test)]
mod tests;
