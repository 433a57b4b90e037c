//! FGC-Net: an age-conditioned fundus generator. A multi-kernel input
//! block feeds six strided encoding blocks; the variational bottleneck
//! fuses image moments with an age-condition head (sum of means, product
//! of standard deviations); a skip-connected transpose-convolution decoder
//! reconstructs the image; an age-regressing discriminator scores both
//! real and generated images.
//!
//! Training is cooperative rather than min-max: one total objective
//! (reconstruction L1 + discriminator L2 + KL, averaged) is minimized
//! jointly. The discriminator's parameters only ever receive gradient from
//! its own L2 term; the generator receives gradient from all three terms,
//! including through the discriminator's score of the generated image.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::losses::{kl_divergence_grad_raw, kl_divergence_raw, KlVariant};
use crate::nn::conv::{Conv2d, ConvCache, ConvTranspose2d, ConvTransposeCache};
use crate::nn::init::standard_normal;
use crate::nn::layers::{
    relu, relu_backward, sigmoid, sigmoid_backward, BatchNorm2d, BatchNormCache, Dense,
    DenseCache, Dropout, DropoutCache,
};
use crate::nn::store::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// How the reparameterization noise is drawn.
///
/// `Standard` uses signed unit-normal noise with `z = mu + sigma * eps`.
/// `Paper` draws the noise from the label head's distribution, takes its
/// absolute value, and uses `z = mu + sigma^2 * eps`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EpsVariant {
    #[default]
    Standard,
    Paper,
}

impl std::str::FromStr for EpsVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "standard" => Ok(EpsVariant::Standard),
            "paper" => Ok(EpsVariant::Paper),
            other => Err(Error::InvalidConfig(format!(
                "unknown eps variant `{other}` (expected `paper` or `standard`)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OutputActivation {
    #[default]
    Sigmoid,
}

#[derive(Clone, Debug)]
pub struct FgcNetConfig {
    pub input_size: usize,
    pub stem_filters: usize,
    pub latent_dim: usize,
    pub eps_variant: EpsVariant,
    pub kl_variant: KlVariant,
    pub skips_enabled: bool,
    pub output_activation: OutputActivation,
}

impl Default for FgcNetConfig {
    fn default() -> Self {
        FgcNetConfig {
            input_size: 512,
            stem_filters: 24,
            latent_dim: 64,
            eps_variant: EpsVariant::Standard,
            kl_variant: KlVariant::Standard,
            skips_enabled: true,
            output_activation: OutputActivation::Sigmoid,
        }
    }
}

impl FgcNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % 64 != 0 {
            return Err(Error::InvalidConfig(format!(
                "fgcnet.input_size must be a positive multiple of 64, got {}",
                self.input_size
            )));
        }
        if self.latent_dim == 0 {
            return Err(Error::InvalidConfig("fgcnet.latent_dim must be >= 1".into()));
        }
        if self.stem_filters == 0 {
            return Err(Error::InvalidConfig("fgcnet.stem_filters must be >= 1".into()));
        }
        Ok(())
    }

    /// Output channels of encoder block `k` (1-based): doubling per block.
    pub fn encoder_channels(&self, k: usize) -> usize {
        self.stem_filters << k
    }

    pub fn bottleneck_size(&self) -> usize {
        self.input_size >> 6
    }

    pub fn valid_age(age: f64) -> Result<()> {
        if !(1.0..=120.0).contains(&age) {
            return Err(Error::InvalidInput(format!(
                "age {age} outside the supported range [1, 120]"
            )));
        }
        Ok(())
    }
}

/// Feature maps captured at the input block and each encoder block output,
/// in resolution order: `[IB, EB1, .., EB6]`.
pub struct SkipSet {
    entries: Vec<Tensor>,
}

impl SkipSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, i: usize) -> &Tensor {
        &self.entries[i]
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.entries.iter().map(|t| t.shape().to_vec()).collect()
    }
}

/// Bottleneck variables for one batch: per-head moments, fusion, noise and
/// the drawn latent code.
#[derive(Clone, Debug)]
pub struct LatentState {
    pub image_mu: Tensor,
    pub image_sigma: Tensor,
    pub label_mu: Tensor,
    pub label_sigma: Tensor,
    pub fused_mu: Tensor,
    pub fused_sigma: Tensor,
    pub epsilon: Tensor,
    pub z: Tensor,
    pub ages: Vec<f64>,
}

/// Fuses the image and label heads: means add, standard deviations multiply.
pub fn fuse_condition(
    image_mu: &Tensor,
    image_sigma: &Tensor,
    label_mu: &Tensor,
    label_sigma: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let shape = image_mu.shape();
    for t in [image_sigma, label_mu, label_sigma] {
        if t.shape() != shape {
            return Err(Error::InvalidInput(format!(
                "latent head shape mismatch: {:?} vs {:?}",
                shape,
                t.shape()
            )));
        }
    }
    let mut mu = image_mu.clone();
    mu.add_assign(label_mu);
    let mut sigma = image_sigma.clone();
    for (s, ls) in sigma.data_mut().iter_mut().zip(label_sigma.data()) {
        *s *= ls;
    }
    Ok((mu, sigma))
}

/// Applies the reparameterization with externally supplied noise.
///
/// Standard: `z = mu + sigma * eps`; paper: `z = mu + sigma^2 * eps`.
/// Sigma is floored at a tiny positive value so a degenerate spread
/// collapses z onto mu.
pub fn sample_with_noise(mu: &Tensor, sigma: &Tensor, eps: &Tensor, variant: EpsVariant) -> Tensor {
    const SIGMA_FLOOR: f64 = 1e-12;
    let mut z = mu.clone();
    for ((zv, sv), ev) in z.data_mut().iter_mut().zip(sigma.data()).zip(eps.data()) {
        let s = sv.max(SIGMA_FLOOR);
        let scale = match variant {
            EpsVariant::Standard => s,
            EpsVariant::Paper => s * s,
        };
        *zv += scale * ev;
    }
    z
}

/// Deterministic per-age noise stream: the same (seed, age) pair always
/// yields the same draws, so a repeated age in a progression list
/// reproduces the same image.
pub fn derive_age_seed(seed: u64, age: f64) -> u64 {
    seed ^ age.to_bits().rotate_left(17).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Log-sigma clamp: keeps `exp` finite when an untrained eval-mode pass
/// produces extreme activations. The gradient is exactly zero beyond the
/// clamp.
const LOG_SIGMA_CLAMP: f64 = 30.0;

fn exp_clamped(raw: f64) -> f64 {
    raw.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP).exp()
}

/// d sigma / d raw for `exp_clamped`, given the forward output.
fn exp_clamped_grad(sigma: f64) -> f64 {
    let max = LOG_SIGMA_CLAMP.exp();
    let min = (-LOG_SIGMA_CLAMP).exp();
    if sigma >= max || sigma <= min {
        0.0
    } else {
        sigma
    }
}

fn unit_normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| standard_normal(rng)).collect();
    Tensor::from_vec(shape, data).expect("length matches shape")
}

struct EncBlock {
    stride_conv: Conv2d,
    conv: Conv2d,
    norm: BatchNorm2d,
}

struct EncBlockCache {
    stride_conv: ConvCache,
    conv: ConvCache,
    norm: BatchNormCache,
    relu_out: Tensor,
}

impl EncBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_c: usize, out_c: usize) -> Self {
        EncBlock {
            stride_conv: Conv2d::new(store, rng, &format!("{name}.stride"), in_c, out_c, 3, 2, 1, true),
            conv: Conv2d::same_no_bias(store, rng, &format!("{name}.conv"), out_c, out_c, 3),
            norm: BatchNorm2d::new(store, &format!("{name}.bn"), out_c),
        }
    }

    fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let t = self.conv.forward(store, &self.stride_conv.forward(store, x));
        relu(&self.norm.forward(store, &t))
    }

    fn forward_train(&self, store: &mut ParamStore, x: Tensor, update_bn: bool) -> (Tensor, EncBlockCache) {
        let (t, stride_cache) = self.stride_conv.forward_train(store, x);
        let (t, conv_cache) = self.conv.forward_train(store, t);
        let (t, norm_cache) = self.norm.forward_train(store, &t, update_bn);
        let out = relu(&t);
        (
            out.clone(),
            EncBlockCache {
                stride_conv: stride_cache,
                conv: conv_cache,
                norm: norm_cache,
                relu_out: out,
            },
        )
    }

    fn backward(&self, store: &mut ParamStore, cache: &EncBlockCache, dy: &Tensor) -> Tensor {
        let d = relu_backward(&cache.relu_out, dy);
        let d = self.norm.backward(store, &cache.norm, &d);
        let d = self.conv.backward(store, &cache.conv, &d);
        self.stride_conv.backward(store, &cache.stride_conv, &d)
    }
}

struct DecBlock {
    tconv: ConvTranspose2d,
    norm: BatchNorm2d,
}

struct DecBlockCache {
    tconv: ConvTransposeCache,
    norm: BatchNormCache,
    relu_out: Tensor,
}

impl DecBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        upsample: bool,
    ) -> Self {
        let tconv = if upsample {
            ConvTranspose2d::new(store, rng, &format!("{name}.tconv"), in_c, out_c, 4, 2, 1, false)
        } else {
            ConvTranspose2d::new(store, rng, &format!("{name}.tconv"), in_c, out_c, 3, 1, 1, false)
        };
        DecBlock {
            tconv,
            norm: BatchNorm2d::new(store, &format!("{name}.bn"), out_c),
        }
    }

    fn forward_eval(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        relu(&self.norm.forward(store, &self.tconv.forward(store, x)))
    }

    fn forward_train(&self, store: &mut ParamStore, x: Tensor, update_bn: bool) -> (Tensor, DecBlockCache) {
        let (t, tconv_cache) = self.tconv.forward_train(store, x);
        let (t, norm_cache) = self.norm.forward_train(store, &t, update_bn);
        let out = relu(&t);
        (
            out.clone(),
            DecBlockCache {
                tconv: tconv_cache,
                norm: norm_cache,
                relu_out: out,
            },
        )
    }

    fn backward(&self, store: &mut ParamStore, cache: &DecBlockCache, dy: &Tensor) -> Tensor {
        let d = relu_backward(&cache.relu_out, dy);
        let d = self.norm.backward(store, &cache.norm, &d);
        self.tconv.backward(store, &cache.tconv, &d)
    }
}

struct DiscBlock {
    conv: Conv2d,
    norm: BatchNorm2d,
}

struct DiscBlockCache {
    conv: ConvCache,
    norm: BatchNormCache,
    relu_out: Tensor,
}

pub struct FgcNet {
    pub config: FgcNetConfig,
    stem: Conv2d,
    multi_kernel: Vec<Conv2d>,
    encoder: Vec<EncBlock>,
    flat_dense: Dense,
    mu_head: Dense,
    log_sigma_head: Dense,
    label_fc1: Dense,
    label_fc2: Dense,
    latent_scale: ParamId,
    z_proj: Dense,
    decoder: Vec<DecBlock>,
    out_conv: Conv2d,
    disc_blocks: Vec<DiscBlock>,
    disc_fcs: Vec<Dense>,
    disc_dropouts: Vec<Dropout>,
    disc_out: Dense,
}

/// Loss breakdown of one total-objective evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct TlfBreakdown {
    pub recon_l1: f64,
    pub disc_l2: f64,
    pub kl: f64,
    pub total: f64,
}

/// Noise source for the reparameterization draw.
pub enum NoiseSource<'a> {
    /// Unit-normal draws from a seeded stream.
    Seeded(u64),
    /// Externally injected unit draws `[n, latent_dim]` (gradient checks).
    Injected(&'a Tensor),
}

const LABEL_HIDDEN: usize = 32;
const DISC_FCS: [usize; 3] = [512, 256, 128];
const DISC_DROPOUTS: [f64; 3] = [0.8, 0.7, 0.6];

impl FgcNet {
    pub fn build(config: FgcNetConfig, store: &mut ParamStore, seed: u64) -> Result<FgcNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_c = config.stem_filters;
        let latent = config.latent_dim;

        let stem = Conv2d::same(store, &mut rng, "gen.stem", 3, stem_c, 3);
        let multi_kernel = [1usize, 3, 5, 7]
            .iter()
            .map(|&k| Conv2d::same(store, &mut rng, &format!("gen.multi{k}"), stem_c, stem_c, k))
            .collect();

        let mut encoder = Vec::with_capacity(6);
        for k in 1..=6 {
            let in_c = if k == 1 { stem_c } else { config.encoder_channels(k - 1) };
            let out_c = config.encoder_channels(k);
            encoder.push(EncBlock::new(store, &mut rng, &format!("gen.eb{k}"), in_c, out_c));
        }

        let bneck = config.bottleneck_size();
        let flat = config.encoder_channels(6) * bneck * bneck;
        let flat_dense = Dense::new(store, &mut rng, "gen.flatten", flat, latent);
        let mu_head = Dense::new(store, &mut rng, "gen.mu", latent, latent);
        let log_sigma_head = Dense::new(store, &mut rng, "gen.log_sigma", latent, latent);
        let label_fc1 = Dense::new(store, &mut rng, "gen.label.fc1", 1, LABEL_HIDDEN);
        let label_fc2 = Dense::new(store, &mut rng, "gen.label.fc2", LABEL_HIDDEN, 2 * latent);
        let latent_scale = store.register("gen.latent_scale", Tensor::full(&[latent], 1.0), true)?;
        let z_proj = Dense::new(store, &mut rng, "gen.z_proj", latent, flat);

        // DB7..DB2 upsample toward full resolution; DB1 refines at stride 1.
        let mut decoder = Vec::with_capacity(7);
        for k in (2..=7).rev() {
            let in_c = if k == 7 { config.encoder_channels(6) } else { config.encoder_channels(k - 1) };
            let out_c = if k == 2 { stem_c } else { config.encoder_channels(k - 2) };
            decoder.push(DecBlock::new(store, &mut rng, &format!("gen.db{k}"), in_c, out_c, true));
        }
        decoder.push(DecBlock::new(store, &mut rng, "gen.db1", stem_c, stem_c, false));
        let out_conv = Conv2d::same(store, &mut rng, "gen.out", stem_c, 3, 3);

        let mut disc_blocks = Vec::with_capacity(6);
        for k in 1..=6 {
            let in_c = if k == 1 { 3 } else { config.encoder_channels(k - 1) };
            let out_c = config.encoder_channels(k);
            disc_blocks.push(DiscBlock {
                conv: Conv2d::new(store, &mut rng, &format!("disc.b{k}.conv"), in_c, out_c, 3, 2, 1, false),
                norm: BatchNorm2d::new(store, &format!("disc.b{k}.bn"), out_c),
            });
        }
        let disc_flat = config.encoder_channels(6) * bneck * bneck;
        let mut disc_fcs = Vec::new();
        let mut in_f = disc_flat;
        for (i, &width) in DISC_FCS.iter().enumerate() {
            disc_fcs.push(Dense::new(store, &mut rng, &format!("disc.fc{}", i + 1), in_f, width));
            in_f = width;
        }
        let disc_dropouts = DISC_DROPOUTS.iter().map(|&r| Dropout::new(r)).collect();
        let disc_out = Dense::new(store, &mut rng, "disc.out", in_f, 1);

        Ok(FgcNet {
            config,
            stem,
            multi_kernel,
            encoder,
            flat_dense,
            mu_head,
            log_sigma_head,
            label_fc1,
            label_fc2,
            latent_scale,
            z_proj,
            decoder,
            out_conv,
            disc_blocks,
            disc_fcs,
            disc_dropouts,
            disc_out,
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

    // -- eval-mode building blocks ------------------------------------------

    /// Stem convolution plus the four parallel 1/3/5/7 convolutions merged
    /// by elementwise sum; spatial size is preserved.
    pub fn input_block(&self, store: &ParamStore, images: &Tensor) -> Result<Tensor> {
        self.check_batch(images)?;
        let stem_out = self.stem.forward(store, images);
        let mut merged = Tensor::zeros(stem_out.shape());
        for conv in &self.multi_kernel {
            merged.add_assign(&conv.forward(store, &stem_out));
        }
        Ok(merged)
    }

    /// Runs the six encoding blocks and captures the skip set
    /// (input block + every encoder block output).
    pub fn encode_image(&self, store: &ParamStore, stem_features: &Tensor) -> (Tensor, SkipSet) {
        let mut entries = Vec::with_capacity(7);
        entries.push(stem_features.clone());
        let mut t = stem_features.clone();
        for block in &self.encoder {
            t = block.forward_eval(store, &t);
            entries.push(t.clone());
        }
        (t, SkipSet { entries })
    }

    /// Image-head latent moments from bottleneck features.
    pub fn latent_from_features(&self, store: &ParamStore, bottleneck: &Tensor) -> Result<(Tensor, Tensor)> {
        let (n, c, h, w) = bottleneck.dims4();
        let flat = bottleneck.clone().reshape(&[n, c * h * w])?;
        let hidden = relu(&self.flat_dense.forward(store, &flat));
        let mu = self.mu_head.forward(store, &hidden);
        let mut sigma = self.log_sigma_head.forward(store, &hidden);
        sigma.data_mut().iter_mut().for_each(|v| *v = exp_clamped(*v));
        Ok((mu, sigma))
    }

    /// Age-condition head: maps each age (years) to latent-dim mean and
    /// positive standard-deviation vectors.
    pub fn encode_label(&self, store: &ParamStore, ages: &[f64]) -> Result<(Tensor, Tensor)> {
        for &age in ages {
            FgcNetConfig::valid_age(age)?;
        }
        let n = ages.len();
        let input = Tensor::from_vec(&[n, 1], ages.iter().map(|a| a / 100.0).collect())?;
        let hidden = relu(&self.label_fc1.forward(store, &input));
        let packed = self.label_fc2.forward(store, &hidden);
        Ok(self.split_label_heads(&packed))
    }

    fn split_label_heads(&self, packed: &Tensor) -> (Tensor, Tensor) {
        let (n, two_l) = packed.dims2();
        let latent = two_l / 2;
        let mut mu = Tensor::zeros(&[n, latent]);
        let mut sigma = Tensor::zeros(&[n, latent]);
        for r in 0..n {
            let row = packed.row(r);
            mu.row_mut(r).copy_from_slice(&row[..latent]);
            for (s, &raw) in sigma.row_mut(r).iter_mut().zip(&row[latent..]) {
                *s = exp_clamped(raw);
            }
        }
        (mu, sigma)
    }

    /// Draws the latent code for the fused moments.
    ///
    /// The standard variant uses signed unit-normal noise. The paper
    /// variant draws noise from the label head's distribution for `ages`
    /// and takes its absolute value, so the noise itself carries the age
    /// condition.
    pub fn sample_latent(
        &self,
        store: &ParamStore,
        fused_mu: &Tensor,
        fused_sigma: &Tensor,
        ages: &[f64],
        seed: u64,
        variant: EpsVariant,
    ) -> Result<(Tensor, Tensor)> {
        if fused_mu.shape() != fused_sigma.shape() {
            return Err(Error::InvalidInput("fused moment shape mismatch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = unit_normal_tensor(fused_mu.shape(), &mut rng);
        let eps = match variant {
            EpsVariant::Standard => u,
            EpsVariant::Paper => {
                let (label_mu, label_sigma) = self.encode_label(store, ages)?;
                let mut eps = label_mu;
                for ((e, s), uv) in eps.data_mut().iter_mut().zip(label_sigma.data()).zip(u.data()) {
                    *e = (*e + s * uv).abs();
                }
                eps
            }
        };
        let z = sample_with_noise(fused_mu, fused_sigma, &eps, variant);
        Ok((z, eps))
    }

    fn merge_skip(&self, t: &mut Tensor, skips: &SkipSet, index: usize) {
        if self.config.skips_enabled {
            t.add_assign(skips.entry(index));
        }
    }

    /// Decodes a latent batch into images, merging skip features on the way
    /// up; output values are in [0, 1].
    pub fn decode_generate(&self, store: &ParamStore, z: &Tensor, skips: &SkipSet) -> Result<Tensor> {
        let (n, l) = z.dims2();
        if l != self.config.latent_dim {
            return Err(Error::InvalidInput(format!(
                "latent length {l} does not match configured {}",
                self.config.latent_dim
            )));
        }
        if skips.len() != 7 {
            return Err(Error::InvalidState(format!(
                "skip set has {} entries, expected 7",
                skips.len()
            )));
        }
        let scale = store.value(self.latent_scale).data();
        let mut scaled = z.clone();
        for row in 0..n {
            for (v, s) in scaled.row_mut(row).iter_mut().zip(scale) {
                *v *= s;
            }
        }
        let bneck = self.config.bottleneck_size();
        let c6 = self.config.encoder_channels(6);
        let mut t = self
            .z_proj
            .forward(store, &scaled)
            .reshape(&[n, c6, bneck, bneck])?;
        self.merge_skip(&mut t, skips, 6);
        for (i, block) in self.decoder.iter().enumerate() {
            t = block.forward_eval(store, &t);
            // decoder[0..6] are DB7..DB2 (merge EB5..EB1), decoder[6] is DB1 (merge IB)
            match i {
                0..=4 => self.merge_skip(&mut t, skips, 5 - i),
                6 => self.merge_skip(&mut t, skips, 0),
                _ => {}
            }
        }
        let OutputActivation::Sigmoid = self.config.output_activation;
        Ok(sigmoid(&self.out_conv.forward(store, &t)))
    }

    /// Deterministic age prediction for each image (inference mode).
    pub fn discriminate(&self, store: &ParamStore, images: &Tensor) -> Result<Vec<f64>> {
        self.check_batch(images)?;
        let mut t = images.clone();
        for block in &self.disc_blocks {
            t = relu(&block.norm.forward(store, &block.conv.forward(store, &t)));
        }
        let (n, c, h, w) = t.dims4();
        let mut t = t.reshape(&[n, c * h * w])?;
        for fc in &self.disc_fcs {
            t = relu(&fc.forward(store, &t));
        }
        Ok(self.disc_out.forward(store, &t).into_data())
    }

    /// Full inference pipeline for a batch with one age per sample.
    pub fn generate(
        &self,
        store: &ParamStore,
        images: &Tensor,
        ages: &[f64],
        seed: u64,
    ) -> Result<(Tensor, LatentState, SkipSet)> {
        self.check_batch(images)?;
        if ages.len() != images.dims4().0 {
            return Err(Error::InvalidInput(format!(
                "{} ages for a batch of {}",
                ages.len(),
                images.dims4().0
            )));
        }
        let stem = self.input_block(store, images)?;
        let (bottleneck, skips) = self.encode_image(store, &stem);
        let (image_mu, image_sigma) = self.latent_from_features(store, &bottleneck)?;
        let (label_mu, label_sigma) = self.encode_label(store, ages)?;
        let (fused_mu, fused_sigma) = fuse_condition(&image_mu, &image_sigma, &label_mu, &label_sigma)?;
        let (z, epsilon) =
            self.sample_latent(store, &fused_mu, &fused_sigma, ages, seed, self.config.eps_variant)?;
        let output = self.decode_generate(store, &z, &skips)?;
        Ok((
            output,
            LatentState {
                image_mu,
                image_sigma,
                label_mu,
                label_sigma,
                fused_mu,
                fused_sigma,
                epsilon,
                z,
                ages: ages.to_vec(),
            },
            skips,
        ))
    }

    /// One encode, then one decode per requested age; each age gets its own
    /// deterministic noise stream derived from (seed, age).
    pub fn generate_progression(
        &self,
        store: &ParamStore,
        image: &Tensor,
        ages: &[f64],
        seed: u64,
    ) -> Result<Vec<Tensor>> {
        if ages.is_empty() {
            return Err(Error::InvalidInput("age list is empty".into()));
        }
        for &age in ages {
            FgcNetConfig::valid_age(age)?;
        }
        let batch = if image.shape().len() == 3 {
            image.clone().reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?
        } else {
            image.clone()
        };
        self.check_batch(&batch)?;
        let stem = self.input_block(store, &batch)?;
        let (bottleneck, skips) = self.encode_image(store, &stem);
        let (image_mu, image_sigma) = self.latent_from_features(store, &bottleneck)?;

        let mut outputs = Vec::with_capacity(ages.len());
        for &age in ages {
            let (label_mu, label_sigma) = self.encode_label(store, &[age])?;
            let (fused_mu, fused_sigma) =
                fuse_condition(&image_mu, &image_sigma, &label_mu, &label_sigma)?;
            let (z, _) = self.sample_latent(
                store,
                &fused_mu,
                &fused_sigma,
                &[age],
                derive_age_seed(seed, age),
                self.config.eps_variant,
            )?;
            outputs.push(self.decode_generate(store, &z, &skips)?);
        }
        Ok(outputs)
    }

    // -- training path -------------------------------------------------------

    /// Forward evaluation of the total objective; `update_bn` folds batch
    /// moments into running statistics, gradient checks leave it off.
    pub fn tlf_objective(
        &self,
        store: &mut ParamStore,
        images: &Tensor,
        ages: &[f64],
        noise: NoiseSource,
    ) -> Result<TlfBreakdown> {
        let trace = self.forward_tlf(store, images, ages, noise, None, false)?;
        Ok(trace.breakdown)
    }

    /// Forward + backward of the total objective, accumulating parameter
    /// gradients. Returns the loss breakdown.
    pub fn train_step_gradients(
        &self,
        store: &mut ParamStore,
        images: &Tensor,
        ages: &[f64],
        noise: NoiseSource,
        dropout_rng: Option<&mut ChaCha8Rng>,
        update_bn: bool,
    ) -> Result<TlfBreakdown> {
        let trace = self.forward_tlf(store, images, ages, noise, dropout_rng, update_bn)?;
        let breakdown = trace.breakdown;
        self.backward_tlf(store, trace);
        Ok(breakdown)
    }

    fn disc_forward_train(
        &self,
        store: &mut ParamStore,
        images: &Tensor,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        update_bn: bool,
    ) -> Result<(Tensor, DiscTrace)> {
        let mut t = images.clone();
        let mut blocks = Vec::with_capacity(6);
        for block in &self.disc_blocks {
            let (c, conv_cache) = block.conv.forward_train(store, t);
            let (b, norm_cache) = block.norm.forward_train(store, &c, update_bn);
            drop(c);
            let out = relu(&b);
            blocks.push(DiscBlockCache {
                conv: conv_cache,
                norm: norm_cache,
                relu_out: out.clone(),
            });
            t = out;
        }
        let (n, c, h, w) = t.dims4();
        let flat_shape = vec![n, c, h, w];
        let mut t = t.reshape(&[n, c * h * w])?;
        let mut fcs = Vec::new();
        let mut fc_relu = Vec::new();
        let mut drops = Vec::new();
        for (fc, dropout) in self.disc_fcs.iter().zip(&self.disc_dropouts) {
            let (lin, cache) = fc.forward_train(store, t);
            fcs.push(cache);
            let activated = relu(&lin);
            fc_relu.push(activated.clone());
            let (dropped, drop_cache) = dropout.forward_train(activated, dropout_rng.as_deref_mut());
            drops.push(drop_cache);
            t = dropped;
        }
        let (pred, out_cache) = self.disc_out.forward_train(store, t);
        Ok((
            pred,
            DiscTrace {
                blocks,
                flat_shape,
                fcs,
                fc_relu,
                drops,
                out: out_cache,
            },
        ))
    }

    /// Backward through the discriminator; accumulates its parameter
    /// gradients and returns the gradient w.r.t. its input images.
    fn disc_backward(&self, store: &mut ParamStore, trace: &DiscTrace, d_pred: &Tensor) -> Tensor {
        let mut d = self.disc_out.backward(store, &trace.out, d_pred);
        for i in (0..self.disc_fcs.len()).rev() {
            d = self.disc_dropouts[i].backward(&trace.drops[i], &d);
            d = relu_backward(&trace.fc_relu[i], &d);
            d = self.disc_fcs[i].backward(store, &trace.fcs[i], &d);
        }
        let mut d = d.reshape(&trace.flat_shape).expect("flat shape recorded");
        for i in (0..self.disc_blocks.len()).rev() {
            let cache = &trace.blocks[i];
            let block = &self.disc_blocks[i];
            d = relu_backward(&cache.relu_out, &d);
            d = block.norm.backward(store, &cache.norm, &d);
            d = block.conv.backward(store, &cache.conv, &d);
        }
        d
    }

    fn forward_tlf(
        &self,
        store: &mut ParamStore,
        images: &Tensor,
        ages: &[f64],
        noise: NoiseSource,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
        update_bn: bool,
    ) -> Result<TlfTrace> {
        self.check_batch(images)?;
        let n = images.dims4().0;
        if ages.len() != n {
            return Err(Error::InvalidInput(format!("{} ages for a batch of {n}", ages.len())));
        }
        for &age in ages {
            FgcNetConfig::valid_age(age)?;
        }
        let latent = self.config.latent_dim;

        // input block
        let (stem_out, stem_cache) = self.stem.forward_train(store, images.clone());
        let mut ib = Tensor::zeros(stem_out.shape());
        let mut multi_caches = Vec::with_capacity(4);
        for conv in &self.multi_kernel {
            let (branch, cache) = conv.forward_train(store, stem_out.clone());
            ib.add_assign(&branch);
            multi_caches.push(cache);
        }

        // encoder + skips
        let mut skips = vec![ib.clone()];
        let mut enc_caches = Vec::with_capacity(6);
        let mut t = ib;
        for block in &self.encoder {
            let (next, cache) = block.forward_train(store, t, update_bn);
            skips.push(next.clone());
            enc_caches.push(cache);
            t = next;
        }
        let bottleneck_shape = t.shape().to_vec();

        // image latent head
        let flat = t.reshape(&[n, bottleneck_shape[1] * bottleneck_shape[2] * bottleneck_shape[3]])?;
        let (hidden_lin, flat_cache) = self.flat_dense.forward_train(store, flat);
        let hidden = relu(&hidden_lin);
        drop(hidden_lin);
        let (image_mu, mu_cache) = self.mu_head.forward_train(store, hidden.clone());
        let (image_log_sigma, log_sigma_cache) = self.log_sigma_head.forward_train(store, hidden.clone());
        let mut image_sigma = image_log_sigma;
        image_sigma.data_mut().iter_mut().for_each(|v| *v = exp_clamped(*v));

        // label head
        let label_input = Tensor::from_vec(&[n, 1], ages.iter().map(|a| a / 100.0).collect())?;
        let (label_h_lin, label_fc1_cache) = self.label_fc1.forward_train(store, label_input);
        let label_h = relu(&label_h_lin);
        drop(label_h_lin);
        let (packed, label_fc2_cache) = self.label_fc2.forward_train(store, label_h.clone());
        let (label_mu, label_sigma) = self.split_label_heads(&packed);

        // fusion and sampling
        let (fused_mu, fused_sigma) = fuse_condition(&image_mu, &image_sigma, &label_mu, &label_sigma)?;
        let u = match noise {
            NoiseSource::Seeded(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                unit_normal_tensor(&[n, latent], &mut rng)
            }
            NoiseSource::Injected(t) => {
                if t.shape() != [n, latent] {
                    return Err(Error::InvalidInput(format!(
                        "injected noise shape {:?}, expected [{n}, {latent}]",
                        t.shape()
                    )));
                }
                t.clone()
            }
        };
        let (eps, e_raw) = match self.config.eps_variant {
            EpsVariant::Standard => (u.clone(), None),
            EpsVariant::Paper => {
                let mut raw = label_mu.clone();
                for ((e, s), uv) in raw.data_mut().iter_mut().zip(label_sigma.data()).zip(u.data()) {
                    *e += s * uv;
                }
                let mut eps = raw.clone();
                eps.data_mut().iter_mut().for_each(|v| *v = v.abs());
                (eps, Some(raw))
            }
        };
        let z = sample_with_noise(&fused_mu, &fused_sigma, &eps, self.config.eps_variant);

        // latent scaling + projection to the bottleneck grid
        let scale = store.value(self.latent_scale).data().to_vec();
        let mut z_scaled = z.clone();
        for row in 0..n {
            for (v, s) in z_scaled.row_mut(row).iter_mut().zip(&scale) {
                *v *= s;
            }
        }
        let (proj, z_proj_cache) = self.z_proj.forward_train(store, z_scaled);
        let mut t = proj.reshape(&[
            n,
            bottleneck_shape[1],
            bottleneck_shape[2],
            bottleneck_shape[3],
        ])?;
        if self.config.skips_enabled {
            t.add_assign(&skips[6]);
        }

        // decoder
        let mut dec_caches = Vec::with_capacity(7);
        for (i, block) in self.decoder.iter().enumerate() {
            let (mut next, cache) = block.forward_train(store, t, update_bn);
            match i {
                0..=4 => {
                    if self.config.skips_enabled {
                        next.add_assign(&skips[5 - i]);
                    }
                }
                6 => {
                    if self.config.skips_enabled {
                        next.add_assign(&skips[0]);
                    }
                }
                _ => {}
            }
            dec_caches.push(cache);
            t = next;
        }
        let (out_lin, out_conv_cache) = self.out_conv.forward_train(store, t);
        let generated = sigmoid(&out_lin);
        drop(out_lin);

        // losses
        let numel = generated.numel() as f64;
        let mut recon_l1 = 0.0;
        for (yv, xv) in generated.data().iter().zip(images.data()) {
            recon_l1 += (yv - xv).abs();
        }
        recon_l1 /= numel;

        let (pred_real, disc_real) =
            self.disc_forward_train(store, images, dropout_rng.as_deref_mut(), update_bn)?;
        let (pred_fake, disc_fake) =
            self.disc_forward_train(store, &generated, dropout_rng.as_deref_mut(), update_bn)?;
        let mut mse_real = 0.0;
        let mut mse_fake = 0.0;
        for i in 0..n {
            let dr = pred_real.data()[i] - ages[i];
            let df = pred_fake.data()[i] - ages[i];
            mse_real += dr * dr;
            mse_fake += df * df;
        }
        let disc_l2 = 0.5 * (mse_real + mse_fake) / n as f64;

        let mut kl = 0.0;
        for row in 0..n {
            kl += kl_divergence_raw(fused_mu.row(row), fused_sigma.row(row), self.config.kl_variant);
        }
        kl /= n as f64;

        let total = (recon_l1 + disc_l2 + kl) / 3.0;
        Ok(TlfTrace {
            breakdown: TlfBreakdown {
                recon_l1,
                disc_l2,
                kl,
                total,
            },
            images: images.clone(),
            ages: ages.to_vec(),
            stem_cache,
            multi_caches,
            enc_caches,
            bottleneck_shape,
            flat_cache,
            hidden,
            mu_cache,
            log_sigma_cache,
            image_sigma,
            label_fc1_cache,
            label_h,
            label_fc2_cache,
            label_sigma,
            fused_mu,
            fused_sigma,
            u,
            eps,
            e_raw,
            z,
            scale,
            z_proj_cache,
            dec_caches,
            out_conv_cache,
            generated,
            pred_real,
            disc_real,
            pred_fake,
            disc_fake,
        })
    }

    fn backward_tlf(&self, store: &mut ParamStore, trace: TlfTrace) {
        let n = trace.ages.len();
        let n_f = n as f64;
        let latent = self.config.latent_dim;

        // -- discriminator L2 term -------------------------------------------
        let mut d_pred_real = Tensor::zeros(&[n, 1]);
        let mut d_pred_fake = Tensor::zeros(&[n, 1]);
        for i in 0..n {
            // d/d pred of 0.5*(mse_real + mse_fake)/n, scaled by the 1/3 of TLF
            d_pred_real.data_mut()[i] =
                (trace.pred_real.data()[i] - trace.ages[i]) / n_f / 3.0;
            d_pred_fake.data_mut()[i] =
                (trace.pred_fake.data()[i] - trace.ages[i]) / n_f / 3.0;
        }
        let _ = self.disc_backward(store, &trace.disc_real, &d_pred_real);
        let d_generated_from_disc = self.disc_backward(store, &trace.disc_fake, &d_pred_fake);

        // -- reconstruction L1 term ------------------------------------------
        let numel = trace.generated.numel() as f64;
        let mut d_generated = d_generated_from_disc;
        for ((dg, yv), xv) in d_generated
            .data_mut()
            .iter_mut()
            .zip(trace.generated.data())
            .zip(trace.images.data())
        {
            let sign = if yv > xv {
                1.0
            } else if yv < xv {
                -1.0
            } else {
                0.0
            };
            *dg += sign / numel / 3.0;
        }

        // -- decoder ----------------------------------------------------------
        let d = sigmoid_backward(&trace.generated, &d_generated);
        let mut d = self.out_conv.backward(store, &trace.out_conv_cache, &d);
        let mut d_skips: Vec<Option<Tensor>> = vec![None; 7];
        for i in (0..self.decoder.len()).rev() {
            match i {
                0..=4 => {
                    if self.config.skips_enabled {
                        add_skip_grad(&mut d_skips[5 - i], &d);
                    }
                }
                6 => {
                    if self.config.skips_enabled {
                        add_skip_grad(&mut d_skips[0], &d);
                    }
                }
                _ => {}
            }
            d = self.decoder[i].backward(store, &trace.dec_caches[i], &d);
        }
        if self.config.skips_enabled {
            add_skip_grad(&mut d_skips[6], &d);
        }

        // -- z projection and latent scaling -----------------------------------
        let d_proj = d
            .reshape(&[n, trace.bottleneck_shape[1] * trace.bottleneck_shape[2] * trace.bottleneck_shape[3]])
            .expect("projection shape");
        let d_z_scaled = self.z_proj.backward(store, &trace.z_proj_cache, &d_proj);
        let mut d_z = d_z_scaled.clone();
        {
            let mut d_scale = vec![0.0; latent];
            for row in 0..n {
                let z_row = trace.z.row(row).to_vec();
                let d_row = d_z.row_mut(row);
                for l in 0..latent {
                    d_scale[l] += d_row[l] * z_row[l];
                    d_row[l] *= trace.scale[l];
                }
            }
            let g = store.grad_mut(self.latent_scale);
            for (gv, dv) in g.data_mut().iter_mut().zip(&d_scale) {
                *gv += dv;
            }
        }

        // -- sampling: z = fused_mu + scale(fused_sigma) * eps ------------------
        let mut d_fused_mu = d_z.clone();
        let mut d_fused_sigma = Tensor::zeros(&[n, latent]);
        let mut d_eps = Tensor::zeros(&[n, latent]);
        {
            let fs = trace.fused_sigma.data();
            let ep = trace.eps.data();
            let dz = d_z.data();
            let dsig = d_fused_sigma.data_mut();
            let deps = d_eps.data_mut();
            for i in 0..n * latent {
                match self.config.eps_variant {
                    EpsVariant::Standard => {
                        dsig[i] = dz[i] * ep[i];
                        deps[i] = dz[i] * fs[i];
                    }
                    EpsVariant::Paper => {
                        dsig[i] = dz[i] * 2.0 * fs[i] * ep[i];
                        deps[i] = dz[i] * fs[i] * fs[i];
                    }
                }
            }
        }

        // -- KL term on the fused moments --------------------------------------
        for row in 0..n {
            let (gm, gs) = kl_divergence_grad_raw(
                trace.fused_mu.row(row),
                trace.fused_sigma.row(row),
                self.config.kl_variant,
            );
            let scale = 1.0 / n_f / 3.0;
            for (l, (m, s)) in gm.iter().zip(&gs).enumerate() {
                d_fused_mu.row_mut(row)[l] += m * scale;
                d_fused_sigma.row_mut(row)[l] += s * scale;
            }
        }

        // -- fusion: mu = mu0 + mu1, sigma = sigma0 * sigma1 --------------------
        let d_image_mu = d_fused_mu.clone();
        let mut d_label_mu = d_fused_mu;
        let mut d_image_sigma = d_fused_sigma.clone();
        let mut d_label_sigma = d_fused_sigma;
        for i in 0..n * latent {
            let s0 = trace.image_sigma.data()[i];
            let s1 = trace.label_sigma.data()[i];
            let df = d_image_sigma.data()[i];
            d_image_sigma.data_mut()[i] = df * s1;
            d_label_sigma.data_mut()[i] = df * s0;
        }

        // -- paper-variant noise path into the label head -----------------------
        if let (EpsVariant::Paper, Some(e_raw)) = (self.config.eps_variant, &trace.e_raw) {
            for i in 0..n * latent {
                let sign = if e_raw.data()[i] >= 0.0 { 1.0 } else { -1.0 };
                let de_raw = d_eps.data()[i] * sign;
                d_label_mu.data_mut()[i] += de_raw;
                d_label_sigma.data_mut()[i] += de_raw * trace.u.data()[i];
            }
        }

        // -- label head ----------------------------------------------------------
        let mut d_packed = Tensor::zeros(&[n, 2 * latent]);
        for row in 0..n {
            let dm = d_label_mu.row(row).to_vec();
            let ds = d_label_sigma.row(row).to_vec();
            let sig = trace.label_sigma.row(row).to_vec();
            let out = d_packed.row_mut(row);
            out[..latent].copy_from_slice(&dm);
            for l in 0..latent {
                // sigma = exp(raw): d raw = d sigma * sigma (zero when clamped)
                out[latent + l] = ds[l] * exp_clamped_grad(sig[l]);
            }
        }
        let d_label_h = self.label_fc2.backward(store, &trace.label_fc2_cache, &d_packed);
        let d_label_h = relu_backward(&trace.label_h, &d_label_h);
        let _ = self.label_fc1.backward(store, &trace.label_fc1_cache, &d_label_h);

        // -- image head ------------------------------------------------------------
        let mut d_image_log_sigma = d_image_sigma;
        for (dv, s) in d_image_log_sigma
            .data_mut()
            .iter_mut()
            .zip(trace.image_sigma.data())
        {
            *dv *= exp_clamped_grad(*s);
        }
        let mut d_hidden = self.mu_head.backward(store, &trace.mu_cache, &d_image_mu);
        d_hidden.add_assign(&self.log_sigma_head.backward(
            store,
            &trace.log_sigma_cache,
            &d_image_log_sigma,
        ));
        let d_hidden = relu_backward(&trace.hidden, &d_hidden);
        let d_flat = self.flat_dense.backward(store, &trace.flat_cache, &d_hidden);
        let d_bottleneck = d_flat
            .reshape(&trace.bottleneck_shape)
            .expect("bottleneck shape");

        // -- encoder (skip gradients fold in at each level) --------------------------
        let mut d = d_bottleneck;
        if let Some(ds) = &d_skips[6] {
            d.add_assign(ds);
        }
        for k in (0..6).rev() {
            d = self.encoder[k].backward(store, &trace.enc_caches[k], &d);
            if k > 0 {
                if let Some(ds) = &d_skips[k] {
                    d.add_assign(ds);
                }
            }
        }
        if let Some(ds) = &d_skips[0] {
            d.add_assign(ds);
        }

        // -- input block ---------------------------------------------------------------
        let stem_shape = trace.multi_caches[0].input.shape().to_vec();
        let mut d_stem = Tensor::zeros(&stem_shape);
        for (conv, cache) in self.multi_kernel.iter().zip(&trace.multi_caches) {
            d_stem.add_assign(&conv.backward_data(store, &d, &stem_shape));
            conv.accumulate_param_grads(store, &cache.input, &d);
        }
        let _ = self.stem.backward(store, &trace.stem_cache, &d_stem);
    }
}

fn add_skip_grad(slot: &mut Option<Tensor>, d: &Tensor) {
    match slot {
        Some(existing) => existing.add_assign(d),
        None => *slot = Some(d.clone()),
    }
}

struct DiscTrace {
    blocks: Vec<DiscBlockCache>,
    flat_shape: Vec<usize>,
    fcs: Vec<DenseCache>,
    fc_relu: Vec<Tensor>,
    drops: Vec<DropoutCache>,
    out: DenseCache,
}

struct TlfTrace {
    breakdown: TlfBreakdown,
    images: Tensor,
    ages: Vec<f64>,
    stem_cache: ConvCache,
    multi_caches: Vec<ConvCache>,
    enc_caches: Vec<EncBlockCache>,
    bottleneck_shape: Vec<usize>,
    flat_cache: DenseCache,
    hidden: Tensor,
    mu_cache: DenseCache,
    log_sigma_cache: DenseCache,
    image_sigma: Tensor,
    label_fc1_cache: DenseCache,
    label_h: Tensor,
    label_fc2_cache: DenseCache,
    label_sigma: Tensor,
    fused_mu: Tensor,
    fused_sigma: Tensor,
    u: Tensor,
    eps: Tensor,
    e_raw: Option<Tensor>,
    z: Tensor,
    scale: Vec<f64>,
    z_proj_cache: DenseCache,
    dec_caches: Vec<DecBlockCache>,
    out_conv_cache: ConvCache,
    generated: Tensor,
    pred_real: Tensor,
    disc_real: DiscTrace,
    pred_fake: Tensor,
    disc_fake: DiscTrace,
}
