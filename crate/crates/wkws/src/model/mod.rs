//! TC-ResNet-style temporal convolution classifier (~66k parameters):
//! frequency-as-channels input, a kernel-3 stem, three stride-2 residual
//! blocks with kernel-9 convolutions, global average pooling, and an
//! 11-way linear head. Forward and exact analytic backward are hand
//! written; both are generic over f32/f64 so gradient oracles can run the
//! same code in double precision.

pub mod checkpoint;
pub mod ops;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView3};

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use ops::{
    bn_backward, bn_forward_eval, bn_forward_train, conv1d, conv1d_backward, linear,
    linear_backward, mean_pool, mean_pool_backward, relu, relu_backward, softmax_cross_entropy,
    softmax_rows, BnCache, BnStats, Scalar,
};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelArch {
    pub n_mels: usize,
    pub stem_channels: usize,
    pub block_channels: Vec<usize>,
    pub stem_kernel: usize,
    pub block_kernel: usize,
    pub n_classes: usize,
}

impl ModelArch {
    /// The full-size network: 64 input bins, stem 16, blocks 24/32/48.
    pub fn full() -> Self {
        ModelArch {
            n_mels: 64,
            stem_channels: 16,
            block_channels: vec![24, 32, 48],
            stem_kernel: 3,
            block_kernel: 9,
            n_classes: 11,
        }
    }

    /// Shrunken variant used by the gradient oracle and smoke runs:
    /// 8 input bins, one residual block.
    pub fn tiny() -> Self {
        ModelArch {
            n_mels: 8,
            stem_channels: 4,
            block_channels: vec![8],
            stem_kernel: 3,
            block_kernel: 9,
            n_classes: 11,
        }
    }

    /// Reduced-width network for smoke runs: full 64-bin input, two
    /// narrow blocks.
    pub fn small() -> Self {
        ModelArch {
            n_mels: 64,
            stem_channels: 8,
            block_channels: vec![12, 16],
            stem_kernel: 3,
            block_kernel: 9,
            n_classes: 11,
        }
    }

    /// Minimum T the stride-2 stages can digest.
    pub fn min_frames(&self) -> usize {
        1 << self.block_channels.len()
    }
}

/// One convolution plus its batch norm.
#[derive(Debug, Clone)]
pub struct ConvBn<F> {
    pub w: Array3<F>, // [Cout, Cin, K]
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub run_mean: Array1<F>,
    pub run_var: Array1<F>,
}

impl<F: Scalar> ConvBn<F> {
    fn init(cout: usize, cin: usize, k: usize, rng: &mut SplitMix64) -> Self {
        let fan_in = cin * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = Array3::from_shape_fn((cout, cin, k), |_| {
            F::from_f64((rng.next_f64() * 2.0 - 1.0) * bound)
        });
        ConvBn {
            w,
            gamma: Array1::from_elem(cout, F::one()),
            beta: Array1::zeros(cout),
            run_mean: Array1::zeros(cout),
            run_var: Array1::from_elem(cout, F::one()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock<F> {
    pub conv1: ConvBn<F>, // kernel 9, stride 2
    pub conv2: ConvBn<F>, // kernel 9, stride 1
    pub shortcut: ConvBn<F>, // kernel 1, stride 2
}

#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub arch: ModelArch,
    pub stem: ConvBn<F>,
    pub blocks: Vec<ResBlock<F>>,
    pub fc_w: Array2<F>,
    pub fc_b: Array1<F>,
}

/// Trainable gradients (or any co-shaped tensor set), in the canonical
/// tensor order of [`ModelParams::tensor_names`].
#[derive(Debug, Clone)]
pub struct GradientSet<F> {
    pub tensors: Vec<ArrayD<F>>,
}

pub fn init_model<F: Scalar>(arch: &ModelArch, seed: u64) -> ModelParams<F> {
    let mut rng = SplitMix64::new(seed);
    let stem = ConvBn::init(arch.stem_channels, arch.n_mels, arch.stem_kernel, &mut rng);
    let mut blocks = Vec::new();
    let mut cin = arch.stem_channels;
    for &cout in &arch.block_channels {
        blocks.push(ResBlock {
            conv1: ConvBn::init(cout, cin, arch.block_kernel, &mut rng),
            conv2: ConvBn::init(cout, cout, arch.block_kernel, &mut rng),
            shortcut: ConvBn::init(cout, cin, 1, &mut rng),
        });
        cin = cout;
    }
    let c_last = *arch.block_channels.last().unwrap_or(&arch.stem_channels);
    // Linear head with gain-1 uniform init; the ReLU-gain bound would make
    // the initial logits hot enough to push the epoch-0 loss past ln(K)+0.3.
    let bound = (1.0 / c_last as f64).sqrt();
    let fc_w = Array2::from_shape_fn((arch.n_classes, c_last), |_| {
        F::from_f64((rng.next_f64() * 2.0 - 1.0) * bound)
    });
    let fc_b = Array1::zeros(arch.n_classes);
    ModelParams {
        arch: arch.clone(),
        stem,
        blocks,
        fc_w,
        fc_b,
    }
}

impl<F: Scalar> ModelParams<F> {
    /// Canonical names of the trainable tensors, matching
    /// [`trainable_views`] / [`GradientSet`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec![
            "stem.w".into(),
            "stem.bn.gamma".into(),
            "stem.bn.beta".into(),
        ];
        for i in 0..self.blocks.len() {
            for part in ["conv1", "conv2", "shortcut"] {
                names.push(format!("block{i}.{part}.w"));
                names.push(format!("block{i}.{part}.bn.gamma"));
                names.push(format!("block{i}.{part}.bn.beta"));
            }
        }
        names.push("fc.w".into());
        names.push("fc.b".into());
        names
    }

    pub fn trainable_views(&self) -> Vec<ndarray::ArrayViewD<'_, F>> {
        let mut v: Vec<ndarray::ArrayViewD<'_, F>> = vec![
            self.stem.w.view().into_dyn(),
            self.stem.gamma.view().into_dyn(),
            self.stem.beta.view().into_dyn(),
        ];
        for b in &self.blocks {
            for cb in [&b.conv1, &b.conv2, &b.shortcut] {
                v.push(cb.w.view().into_dyn());
                v.push(cb.gamma.view().into_dyn());
                v.push(cb.beta.view().into_dyn());
            }
        }
        v.push(self.fc_w.view().into_dyn());
        v.push(self.fc_b.view().into_dyn());
        v
    }

    pub fn trainable_views_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, F>> {
        let mut v: Vec<ndarray::ArrayViewMutD<'_, F>> = vec![
            self.stem.w.view_mut().into_dyn(),
            self.stem.gamma.view_mut().into_dyn(),
            self.stem.beta.view_mut().into_dyn(),
        ];
        for b in &mut self.blocks {
            v.push(b.conv1.w.view_mut().into_dyn());
            v.push(b.conv1.gamma.view_mut().into_dyn());
            v.push(b.conv1.beta.view_mut().into_dyn());
            v.push(b.conv2.w.view_mut().into_dyn());
            v.push(b.conv2.gamma.view_mut().into_dyn());
            v.push(b.conv2.beta.view_mut().into_dyn());
            v.push(b.shortcut.w.view_mut().into_dyn());
            v.push(b.shortcut.gamma.view_mut().into_dyn());
            v.push(b.shortcut.beta.view_mut().into_dyn());
        }
        v.push(self.fc_w.view_mut().into_dyn());
        v.push(self.fc_b.view_mut().into_dyn());
        v
    }

    /// Running batch-norm statistics, in a fixed order (mean, var per BN).
    pub fn running_views_mut(&mut self) -> Vec<&mut Array1<F>> {
        let mut v = vec![&mut self.stem.run_mean, &mut self.stem.run_var];
        for b in &mut self.blocks {
            v.push(&mut b.conv1.run_mean);
            v.push(&mut b.conv1.run_var);
            v.push(&mut b.conv2.run_mean);
            v.push(&mut b.conv2.run_var);
            v.push(&mut b.shortcut.run_mean);
            v.push(&mut b.shortcut.run_var);
        }
        v
    }

    /// Every tensor (trainable + running stats) as mutable slices, in a
    /// fixed order; used by checkpoint averaging.
    pub fn all_slices_mut(&mut self) -> Vec<&mut [F]> {
        fn push_cb<'a, F: Scalar>(c: &'a mut ConvBn<F>, v: &mut Vec<&'a mut [F]>) {
            v.push(c.w.as_slice_mut().unwrap());
            v.push(c.gamma.as_slice_mut().unwrap());
            v.push(c.beta.as_slice_mut().unwrap());
            v.push(c.run_mean.as_slice_mut().unwrap());
            v.push(c.run_var.as_slice_mut().unwrap());
        }
        let mut v: Vec<&mut [F]> = Vec::new();
        push_cb(&mut self.stem, &mut v);
        for b in &mut self.blocks {
            push_cb(&mut b.conv1, &mut v);
            push_cb(&mut b.conv2, &mut v);
            push_cb(&mut b.shortcut, &mut v);
        }
        v.push(self.fc_w.as_slice_mut().unwrap());
        v.push(self.fc_b.as_slice_mut().unwrap());
        v
    }

    pub fn param_count(&self) -> usize {
        self.trainable_views().iter().map(|t| t.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        let cb = |c: &ConvBn<F>| ConvBn {
            w: c.w.mapv(|v| G::from_f64(v.to_f64_())),
            gamma: c.gamma.mapv(|v| G::from_f64(v.to_f64_())),
            beta: c.beta.mapv(|v| G::from_f64(v.to_f64_())),
            run_mean: c.run_mean.mapv(|v| G::from_f64(v.to_f64_())),
            run_var: c.run_var.mapv(|v| G::from_f64(v.to_f64_())),
        };
        ModelParams {
            arch: self.arch.clone(),
            stem: cb(&self.stem),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlock {
                    conv1: cb(&b.conv1),
                    conv2: cb(&b.conv2),
                    shortcut: cb(&b.shortcut),
                })
                .collect(),
            fc_w: self.fc_w.mapv(|v| G::from_f64(v.to_f64_())),
            fc_b: self.fc_b.mapv(|v| G::from_f64(v.to_f64_())),
        }
    }
}

pub fn param_count<F: Scalar>(params: &ModelParams<F>) -> usize {
    params.param_count()
}

// ---------------------------------------------------------------------------
// Forward / backward.

struct ConvBnCache<F> {
    x: Array3<F>,

    bn_cache: Option<BnCache<F>>,
    bn_stats: Option<BnStats<F>>,
}

fn conv_bn_forward<F: Scalar>(
    cb: &ConvBn<F>,
    x: &Array3<F>,
    stride: usize,
    mode: Mode,
) -> (Array3<F>, ConvBnCache<F>) {
    let conv_out = conv1d(x, &cb.w, stride);
    match mode {
        Mode::Train => {
            let (y, stats, cache) = bn_forward_train(&conv_out, &cb.gamma, &cb.beta, BN_EPS);
            (
                y,
                ConvBnCache {
                    x: x.clone(),

                    bn_cache: Some(cache),
                    bn_stats: Some(stats),
                },
            )
        }
        Mode::Eval => {
            let y = bn_forward_eval(
                &conv_out,
                &cb.gamma,
                &cb.beta,
                &cb.run_mean,
                &cb.run_var,
                BN_EPS,
            );
            (
                y,
                ConvBnCache {
                    x: x.clone(),

                    bn_cache: None,
                    bn_stats: None,
                },
            )
        }
    }
}

fn conv_bn_backward<F: Scalar>(
    cb: &ConvBn<F>,
    cache: &ConvBnCache<F>,
    stride: usize,
    grad_out: &Array3<F>,
) -> (Array3<F>, Array3<F>, Array1<F>, Array1<F>) {
    let bn_cache = cache.bn_cache.as_ref().expect("train-mode cache");
    let (g_conv, dgamma, dbeta) = bn_backward(grad_out, &cb.gamma, bn_cache);
    let (gx, gw) = conv1d_backward(&cache.x, &cb.w, stride, &g_conv);
    (gx, gw, dgamma, dbeta)
}

struct ForwardCache<F> {
    stem: ConvBnCache<F>,
    stem_relu: Array3<F>,
    blocks: Vec<BlockCache<F>>,
    pooled: Array2<F>,
    last_t: usize,
}

struct BlockCache<F> {
    conv1: ConvBnCache<F>,
    relu1: Array3<F>,
    conv2: ConvBnCache<F>,
    shortcut: ConvBnCache<F>,
    out_relu: Array3<F>,
}

/// Batch features arrive as [B, T, n_mels]; the network treats frequency
/// bins as channels over time.
fn to_channels_first<F: Scalar>(features: &ArrayView3<F>) -> Array3<F> {
    features.permuted_axes([0, 2, 1]).to_owned()
}

fn forward_cached<F: Scalar>(
    params: &ModelParams<F>,
    features: &ArrayView3<F>,
    mode: Mode,
) -> Result<(Array2<F>, ForwardCache<F>)> {
    let (_, t, n_mels) = features.dim();
    if n_mels != params.arch.n_mels {
        return Err(Error::domain(format!(
            "expected {} feature channels, got {n_mels}",
            params.arch.n_mels
        )));
    }
    if t < params.arch.min_frames() {
        return Err(Error::domain(format!(
            "batch has {t} frames; need at least {}",
            params.arch.min_frames()
        )));
    }
    let x = to_channels_first(features);
    let (stem_out, stem_cache) = conv_bn_forward(&params.stem, &x, 1, mode);
    let mut act = relu(&stem_out);
    let stem_relu = act.clone();

    let mut block_caches = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let (h1, c1) = conv_bn_forward(&block.conv1, &act, 2, mode);
        let r1 = relu(&h1);
        let (h2, c2) = conv_bn_forward(&block.conv2, &r1, 1, mode);
        let (sc, csc) = conv_bn_forward(&block.shortcut, &act, 2, mode);
        let sum = &h2 + &sc;
        act = relu(&sum);
        block_caches.push(BlockCache {
            conv1: c1,
            relu1: r1,
            conv2: c2,
            shortcut: csc,
            out_relu: act.clone(),
        });
    }

    let last_t = act.dim().2;
    let pooled = mean_pool(&act);
    let logits = linear(&pooled, &params.fc_w, &params.fc_b);
    Ok((
        logits,
        ForwardCache {
            stem: stem_cache,
            stem_relu,
            blocks: block_caches,
            pooled,
            last_t,
        },
    ))
}

/// Pure forward pass. Train mode normalizes with batch statistics but does
/// not touch the running statistics; see [`update_running_stats`].
pub fn forward<F: Scalar>(
    params: &ModelParams<F>,
    features: &ArrayView3<F>,
    mode: Mode,
) -> Result<Array2<F>> {
    forward_cached(params, features, mode).map(|(logits, _)| logits)
}

pub fn softmax_scores<F: Scalar>(logits: &Array2<F>) -> Array2<F> {
    softmax_rows(logits)
}

/// Train-mode loss without any side effects; this is the function the
/// finite-difference oracle probes.
pub fn train_loss<F: Scalar>(
    params: &ModelParams<F>,
    features: &ArrayView3<F>,
    labels: &[usize],
) -> Result<F> {
    validate_labels(labels, params.arch.n_classes)?;
    let (logits, _) = forward_cached(params, features, Mode::Train)?;
    let (loss, _) = softmax_cross_entropy(&logits, labels);
    Ok(loss)
}

fn validate_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::domain(format!(
            "label {bad} out of range 0..{n_classes}"
        )));
    }
    Ok(())
}

/// Train-mode loss and exact analytic gradients for every trainable
/// parameter. Pure: running statistics are returned, not applied.
pub fn backward<F: Scalar>(
    params: &ModelParams<F>,
    features: &ArrayView3<F>,
    labels: &[usize],
) -> Result<(F, GradientSet<F>, Vec<BnStats<F>>)> {
    validate_labels(labels, params.arch.n_classes)?;
    let (logits, cache) = forward_cached(params, features, Mode::Train)?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, labels);

    let (g_pooled, g_fc_w, g_fc_b) = linear_backward(&cache.pooled, &params.fc_w, &dlogits);
    let mut g_act = mean_pool_backward(&g_pooled, cache.last_t);

    // Blocks, last to first.
    let mut block_grads: Vec<[ArrayD<F>; 9]> = Vec::with_capacity(params.blocks.len());
    for (block, bc) in params.blocks.iter().zip(&cache.blocks).rev() {
        let g_sum = relu_backward(&g_act, &bc.out_relu);
        // main path: conv2 <- relu1 <- conv1
        let (g_r1, g_w2, g_gamma2, g_beta2) = conv_bn_backward(&block.conv2, &bc.conv2, 1, &g_sum);
        let g_h1 = relu_backward(&g_r1, &bc.relu1);
        let (g_in_main, g_w1, g_gamma1, g_beta1) =
            conv_bn_backward(&block.conv1, &bc.conv1, 2, &g_h1);
        // shortcut path
        let (g_in_sc, g_ws, g_gammas, g_betas) =
            conv_bn_backward(&block.shortcut, &bc.shortcut, 2, &g_sum);
        g_act = &g_in_main + &g_in_sc;
        block_grads.push([
            g_w1.into_dyn(),
            g_gamma1.into_dyn(),
            g_beta1.into_dyn(),
            g_w2.into_dyn(),
            g_gamma2.into_dyn(),
            g_beta2.into_dyn(),
            g_ws.into_dyn(),
            g_gammas.into_dyn(),
            g_betas.into_dyn(),
        ]);
    }
    block_grads.reverse();

    let g_stem_out = relu_backward(&g_act, &cache.stem_relu);
    let (_, g_stem_w, g_stem_gamma, g_stem_beta) =
        conv_bn_backward(&params.stem, &cache.stem, 1, &g_stem_out);

    let mut tensors: Vec<ArrayD<F>> = vec![
        g_stem_w.into_dyn(),
        g_stem_gamma.into_dyn(),
        g_stem_beta.into_dyn(),
    ];
    for g in block_grads {
        tensors.extend(g);
    }
    tensors.push(g_fc_w.into_dyn());
    tensors.push(g_fc_b.into_dyn());

    // Batch statistics in running_views_mut order.
    let mut stats = Vec::new();
    stats.push(cache.stem.bn_stats.expect("train mode"));
    for bc in cache.blocks {
        stats.push(bc.conv1.bn_stats.expect("train mode"));
        stats.push(bc.conv2.bn_stats.expect("train mode"));
        stats.push(bc.shortcut.bn_stats.expect("train mode"));
    }

    Ok((loss, GradientSet { tensors }, stats))
}

/// Fold freshly computed batch statistics into the running estimates
/// (momentum 0.1), in the order returned by [`backward`].
pub fn update_running_stats<F: Scalar>(params: &mut ModelParams<F>, stats: &[BnStats<F>]) {
    let momentum = F::from_f64(BN_MOMENTUM);
    let keep = F::one() - momentum;
    let mut views = params.running_views_mut();
    assert_eq!(views.len(), stats.len() * 2);
    // views alternate [run_mean, run_var] per batch-norm layer
    for (j, v) in views.iter_mut().enumerate() {
        let stat = &stats[j / 2];
        let src = if j % 2 == 0 { &stat.mean } else { &stat.var };
        for (r, &s) in v.iter_mut().zip(src.iter()) {
            *r = keep * *r + momentum * s;
        }
    }
}
