//! FAG-Net: six convolutional blocks with spatial attention in blocks 1, 2
//! and 6, a convolution+maxpool (CMP) shortcut that re-injects block-1
//! features alongside block-2 output, a wide tail convolution at the 8x8
//! bottleneck, and an age-regression or gender-classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::conv::{Conv2d, ConvCache};
use crate::nn::layers::{
    concat_channels, relu, relu_backward, softmax_rows, split_channels, BatchNorm2d,
    BatchNormCache, Dense, DenseCache, Dropout, DropoutCache, MaxPool2d, MaxPoolCache,
    SpatialAttention, SpatialAttentionCache,
};
use crate::nn::store::ParamStore;
use crate::tensor::Tensor;

/// Which output head the network carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    Age,
    Gender,
}

impl std::str::FromStr for Head {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "age" => Ok(Head::Age),
            "gender" => Ok(Head::Gender),
            other => Err(Error::InvalidConfig(format!(
                "unknown head `{other}` (expected `age` or `gender`)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FagNetConfig {
    pub input_size: usize,
    pub base_filters: usize,
    pub attention_kernel: usize,
    pub head: Head,
    pub dropout_rates: [f64; 3],
    pub fc_sizes: [usize; 3],
}

impl Default for FagNetConfig {
    fn default() -> Self {
        FagNetConfig {
            input_size: 512,
            base_filters: 32,
            attention_kernel: 5,
            head: Head::Age,
            dropout_rates: [0.9, 0.8, 0.5],
            fc_sizes: [512, 256, 128],
        }
    }
}

impl FagNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 64 != 0 {
            return Err(Error::InvalidConfig(format!(
                "fagnet.input_size must be a positive multiple of 64, got {}",
                self.input_size
            )));
        }
        if self.attention_kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "fagnet.attention_kernel must be odd, got {}",
                self.attention_kernel
            )));
        }
        if self.base_filters == 0 {
            return Err(Error::InvalidConfig("fagnet.base_filters must be >= 1".into()));
        }
        for r in self.dropout_rates {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidConfig(format!(
                    "fagnet dropout rates must be in [0,1), got {r}"
                )));
            }
        }
        if self.fc_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidConfig("fagnet.fc_sizes must be >= 1".into()));
        }
        Ok(())
    }

    /// Output channels of block `k` (1-based): doubling from `base_filters`.
    pub fn block_channels(&self, k: usize) -> usize {
        self.base_filters << (k - 1)
    }

    /// Channels of the tail convolution (1024 at the default width).
    pub fn tail_channels(&self) -> usize {
        self.base_filters * 32
    }

    /// Spatial size at the bottleneck after six halvings.
    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> 6
    }

    pub fn head_units(&self) -> usize {
        match self.head {
            Head::Age => 1,
            Head::Gender => 2,
        }
    }
}

struct FagBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    attention: Option<SpatialAttention>,
    norm: BatchNorm2d,
    pool: MaxPool2d,
}

struct BlockCache {
    conv1: ConvCache,
    conv2: ConvCache,
    attention: Option<SpatialAttentionCache>,
    norm: BatchNormCache,
    relu_out: Tensor,
    pool: MaxPoolCache,
}

impl FagBlock {
    fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut t = self.conv2.forward(store, &self.conv1.forward(store, x));
        if let Some(sab) = &self.attention {
            t = sab.forward(store, &t);
        }
        let t = relu(&self.norm.forward(store, &t));
        self.pool.forward(&t)
    }

    fn forward_train(
        &self,
        store: &mut ParamStore,
        x: Tensor,
        update_bn: bool,
    ) -> (Tensor, BlockCache) {
        let (t, conv1) = self.conv1.forward_train(store, x);
        let (t, conv2) = self.conv2.forward_train(store, t);
        let (t, attention) = match &self.attention {
            Some(sab) => {
                let (t, cache) = sab.forward_train(store, t);
                (t, Some(cache))
            }
            None => (t, None),
        };
        let (t, norm) = self.norm.forward_train(store, &t, update_bn);
        let relu_out = relu(&t);
        let (y, pool) = self.pool.forward_cached(&relu_out);
        (
            y,
            BlockCache {
                conv1,
                conv2,
                attention,
                norm,
                relu_out,
                pool,
            },
        )
    }

    fn backward(&self, store: &mut ParamStore, cache: &BlockCache, dy: &Tensor) -> Tensor {
        let d = self.pool.backward(&cache.pool, dy);
        let d = relu_backward(&cache.relu_out, &d);
        let d = self.norm.backward(store, &cache.norm, &d);
        let d = match (&self.attention, &cache.attention) {
            (Some(sab), Some(sab_cache)) => sab.backward(store, sab_cache, &d),
            _ => d,
        };
        let d = self.conv2.backward(store, &cache.conv2, &d);
        self.conv1.backward(store, &cache.conv1, &d)
    }
}

pub struct FagNet {
    pub config: FagNetConfig,
    blocks: Vec<FagBlock>,
    cmp_conv: Conv2d,
    cmp_pool: MaxPool2d,
    tail: Conv2d,
    fcs: Vec<Dense>,
    dropouts: Vec<Dropout>,
    head_layer: Dense,
}

/// Raw head outputs plus everything needed to backpropagate.
pub struct FagForward {
    pub outputs: Tensor,
    blocks: Vec<BlockCache>,
    cmp_conv: ConvCache,
    cmp_pool: MaxPoolCache,
    tail: ConvCache,
    tail_relu: Tensor,
    fcs: Vec<DenseCache>,
    fc_relu: Vec<Tensor>,
    drops: Vec<DropoutCache>,
    head: DenseCache,
    flat_shape: Vec<usize>,
}

/// Eval-mode model outputs.
#[derive(Clone, Debug)]
pub enum Predictions {
    /// Predicted ages in years, one per sample.
    Ages(Vec<f64>),
    /// Per-sample `[male, female]` probabilities, each summing to 1.
    GenderProbs(Vec<[f64; 2]>),
}

impl Predictions {
    pub fn len(&self) -> usize {
        match self {
            Predictions::Ages(v) => v.len(),
            Predictions::GenderProbs(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ages(&self) -> Result<&[f64]> {
        match self {
            Predictions::Ages(v) => Ok(v),
            _ => Err(Error::InvalidState("model has a gender head, not age".into())),
        }
    }
}

impl FagNet {
    pub fn build(config: FagNetConfig, store: &mut ParamStore, seed: u64) -> Result<FagNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(6);
        for k in 1..=6 {
            let out_c = config.block_channels(k);
            let in_c = match k {
                1 => 3,
                // block 3 consumes block2 output concatenated with the CMP branch
                3 => config.block_channels(2) * 2,
                _ => config.block_channels(k - 1),
            };
            let name = format!("block{k}");
            let conv1 = Conv2d::same(store, &mut rng, &format!("{name}.conv1"), in_c, out_c, 3);
            // blocks without attention feed conv2 straight into batch norm
            let conv2 = if matches!(k, 1 | 2 | 6) {
                Conv2d::same(store, &mut rng, &format!("{name}.conv2"), out_c, out_c, 3)
            } else {
                Conv2d::same_no_bias(store, &mut rng, &format!("{name}.conv2"), out_c, out_c, 3)
            };
            let attention = if matches!(k, 1 | 2 | 6) {
                Some(SpatialAttention::new(
                    store,
                    &mut rng,
                    &format!("{name}.sab"),
                    config.attention_kernel,
                ))
            } else {
                None
            };
            let norm = BatchNorm2d::new(store, &format!("{name}.bn"), out_c);
            blocks.push(FagBlock {
                conv1,
                conv2,
                attention,
                norm,
                pool: MaxPool2d,
            });
        }
        let cmp_conv = Conv2d::new(
            store,
            &mut rng,
            "cmp.conv",
            config.block_channels(1),
            config.block_channels(2),
            1,
            1,
            0,
            true,
        );
        let tail = Conv2d::same(
            store,
            &mut rng,
            "tail",
            config.block_channels(6),
            config.tail_channels(),
            3,
        );
        let bneck = config.bottleneck_size();
        let flat = config.tail_channels() * bneck * bneck;
        let mut fcs = Vec::new();
        let mut dropouts = Vec::new();
        let mut in_f = flat;
        for (i, (&width, &rate)) in config.fc_sizes.iter().zip(&config.dropout_rates).enumerate() {
            fcs.push(Dense::new(store, &mut rng, &format!("fc{}", i + 1), in_f, width));
            dropouts.push(Dropout::new(rate));
            in_f = width;
        }
        let head_layer = Dense::new(store, &mut rng, "head", in_f, config.head_units());
        Ok(FagNet {
            config,
            blocks,
            cmp_conv,
            cmp_pool: MaxPool2d,
            tail,
            fcs,
            dropouts,
            head_layer,
        })
    }

    fn check_batch(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 4 {
            return Err(Error::InvalidInput(format!(
                "expected an NCHW batch, got shape {:?}",
                x.shape()
            )));
        }
        let (n, c, h, w) = x.dims4();
        let s = self.config.input_size;
        if n == 0 {
            return Err(Error::InvalidInput("batch is empty".into()));
        }
        if c != 3 || h != s || w != s {
            return Err(Error::InvalidInput(format!(
                "expected shape [n, 3, {s}, {s}], got {:?}",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Deterministic inference pass; batch-norm runs on running statistics
    /// and dropout is inactive.
    pub fn forward_eval(&self, store: &ParamStore, batch: &Tensor) -> Result<Predictions> {
        Ok(self.forward_eval_traced(store, batch)?.0)
    }

    /// Inference plus the spatial size after each stage, for shape audits.
    pub fn forward_eval_traced(
        &self,
        store: &ParamStore,
        batch: &Tensor,
    ) -> Result<(Predictions, Vec<(String, Vec<usize>)>)> {
        self.check_batch(batch)?;
        let mut shapes = Vec::new();
        shapes.push(("input".to_string(), batch.shape().to_vec()));
        let b1 = self.blocks[0].forward_eval(store, batch);
        shapes.push(("block1".to_string(), b1.shape().to_vec()));
        let b2 = self.blocks[1].forward_eval(store, &b1);
        shapes.push(("block2".to_string(), b2.shape().to_vec()));
        let cmp = self.cmp_pool.forward(&self.cmp_conv.forward(store, &b1));
        shapes.push(("cmp".to_string(), cmp.shape().to_vec()));
        let mut t = concat_channels(&b2, &cmp);
        shapes.push(("concat".to_string(), t.shape().to_vec()));
        for k in 2..6 {
            t = self.blocks[k].forward_eval(store, &t);
            shapes.push((format!("block{}", k + 1), t.shape().to_vec()));
        }
        let tail = relu(&self.tail.forward(store, &t));
        shapes.push(("tail".to_string(), tail.shape().to_vec()));

        let (n, c, h, w) = tail.dims4();
        let mut t = tail.reshape(&[n, c * h * w])?;
        for (fc, _) in self.fcs.iter().zip(&self.dropouts) {
            t = relu(&fc.forward(store, &t));
        }
        let out = self.head_layer.forward(store, &t);
        shapes.push(("head".to_string(), out.shape().to_vec()));
        Ok((self.raw_to_predictions(&out), shapes))
    }

    fn raw_to_predictions(&self, raw: &Tensor) -> Predictions {
        match self.config.head {
            Head::Age => Predictions::Ages(raw.data().to_vec()),
            Head::Gender => {
                let probs = softmax_rows(raw);
                let (n, _) = probs.dims2();
                Predictions::GenderProbs(
                    (0..n)
                        .map(|r| {
                            let row = probs.row(r);
                            [row[0], row[1]]
                        })
                        .collect(),
                )
            }
        }
    }

    /// Training pass that retains every intermediate needed for backward.
    ///
    /// `dropout_rng = None` disables dropout (used by gradient checks);
    /// `update_bn` controls whether batch moments are folded into the
    /// running statistics.
    pub fn forward_train(
        &self,
        store: &mut ParamStore,
        batch: &Tensor,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        update_bn: bool,
    ) -> Result<FagForward> {
        self.check_batch(batch)?;
        let mut blocks = Vec::with_capacity(6);
        let (b1, c1) = self.blocks[0].forward_train(store, batch.clone(), update_bn);
        blocks.push(c1);
        let (b2, c2) = self.blocks[1].forward_train(store, b1.clone(), update_bn);
        blocks.push(c2);
        let (cmp_raw, cmp_conv) = self.cmp_conv.forward_train(store, b1);
        let (cmp, cmp_pool) = self.cmp_pool.forward_cached(&cmp_raw);
        let mut t = concat_channels(&b2, &cmp);
        drop(b2);
        for k in 2..6 {
            let (next, cache) = self.blocks[k].forward_train(store, t, update_bn);
            blocks.push(cache);
            t = next;
        }
        let (tail_out, tail) = self.tail.forward_train(store, t);
        let tail_relu = relu(&tail_out);
        drop(tail_out);

        let (n, c, h, w) = tail_relu.dims4();
        let flat_shape = vec![n, c, h, w];
        let mut t = tail_relu.clone().reshape(&[n, c * h * w])?;
        let mut fcs = Vec::new();
        let mut fc_relu = Vec::new();
        let mut drops = Vec::new();
        for (fc, dropout) in self.fcs.iter().zip(&self.dropouts) {
            let (lin, cache) = fc.forward_train(store, t);
            fcs.push(cache);
            let activated = relu(&lin);
            fc_relu.push(activated.clone());
            let (dropped, drop_cache) = dropout.forward_train(activated, dropout_rng.as_deref_mut());
            drops.push(drop_cache);
            t = dropped;
        }
        let (outputs, head) = self.head_layer.forward_train(store, t);
        Ok(FagForward {
            outputs,
            blocks,
            cmp_conv,
            cmp_pool,
            tail,
            tail_relu,
            fcs,
            fc_relu,
            drops,
            head,
            flat_shape,
        })
    }

    /// Backpropagates `d_outputs` (gradient of the loss w.r.t. the raw head
    /// outputs) through the whole graph, accumulating parameter gradients.
    pub fn backward(&self, store: &mut ParamStore, fwd: &FagForward, d_outputs: &Tensor) {
        let mut d = self.head_layer.backward(store, &fwd.head, d_outputs);
        for i in (0..self.fcs.len()).rev() {
            d = self.dropouts[i].backward(&fwd.drops[i], &d);
            d = relu_backward(
                &fwd.fc_relu[i]
                    .clone()
                    .reshape(d.shape())
                    .expect("relu cache matches fc output shape"),
                &d,
            );
            d = self.fcs[i].backward(store, &fwd.fcs[i], &d);
        }
        let d = d
            .reshape(&fwd.flat_shape)
            .expect("flatten shape recorded in forward");
        let d = relu_backward(&fwd.tail_relu, &d);
        let mut d = self.tail.backward(store, &fwd.tail, &d);
        for k in (2..6).rev() {
            d = self.blocks[k].backward(store, &fwd.blocks[k], &d);
        }
        let cmp_channels = self.config.block_channels(2);
        let (d_b2, d_cmp) = split_channels(&d, d.shape()[1] - cmp_channels);
        let d_cmp = self.cmp_pool.backward(&fwd.cmp_pool, &d_cmp);
        let d_b1_cmp = self.cmp_conv.backward(store, &fwd.cmp_conv, &d_cmp);
        let mut d_b1 = self.blocks[1].backward(store, &fwd.blocks[1], &d_b2);
        d_b1.add_assign(&d_b1_cmp);
        self.blocks[0].backward(store, &fwd.blocks[0], &d_b1);
    }

    /// Raw head outputs for the current parameters in the requested mode.
    pub fn predict(
        &self,
        store: &mut ParamStore,
        batch: &Tensor,
        mode: ForwardMode,
    ) -> Result<Predictions> {
        match mode {
            ForwardMode::Eval => self.forward_eval(store, batch),
            ForwardMode::Train { dropout_seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let fwd = self.forward_train(store, batch, Some(&mut rng), false)?;
                Ok(self.raw_to_predictions(&fwd.outputs))
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum ForwardMode {
    Train { dropout_seed: u64 },
    Eval,
}

/// Standalone spatial-attention op with the module contract of the SAB.
pub fn spatial_attention(
    store: &ParamStore,
    layer: &SpatialAttention,
    features: &Tensor,
) -> Result<Tensor> {
    if !features.is_finite() {
        return Err(Error::InvalidInput("attention input must be finite".into()));
    }
    Ok(layer.forward(store, features))
}

/// Cross-entropy over gender logits; returns (loss, d_logits).
///
/// `labels[i]` is 0 for male, 1 for female.
pub fn gender_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let (n, c) = logits.dims2();
    assert_eq!(c, 2);
    assert_eq!(labels.len(), n);
    let probs = softmax_rows(logits);
    let mut loss = 0.0;
    let mut grad = probs.clone();
    for (r, &label) in labels.iter().enumerate() {
        let p = probs.row(r)[label].max(1e-12);
        loss -= p.ln();
        grad.row_mut(r)[label] -= 1.0;
    }
    let inv_n = 1.0 / n as f64;
    grad.data_mut().iter_mut().for_each(|v| *v *= inv_n);
    (loss * inv_n, grad)
}
