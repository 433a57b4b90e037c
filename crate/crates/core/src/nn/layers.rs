//! Dense, batch-norm, pooling, dropout and activation layers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::nn::init::he_normal;
use crate::nn::store::{ParamId, ParamStore};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Dense {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug)]
pub struct DenseCache {
    pub input: Tensor,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
    ) -> Self {
        let weight = store
            .register(
                &format!("{name}.weight"),
                he_normal(rng, &[out_features, in_features], in_features),
                true,
            )
            .expect("unique layer name");
        let bias = store
            .register(&format!("{name}.bias"), Tensor::zeros(&[out_features]), true)
            .expect("unique layer name");
        Dense {
            in_features,
            out_features,
            weight,
            bias,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let (n, f) = x.dims2();
        assert_eq!(f, self.in_features, "dense input feature mismatch");
        let w = store.value(self.weight).data();
        let b = store.value(self.bias).data();
        let out = self.out_features;
        let x_data = x.data();
        let mut y = Tensor::zeros(&[n, out]);
        y.data_mut()
            .par_chunks_mut(out)
            .enumerate()
            .for_each(|(ni, y_row)| {
                let x_row = &x_data[ni * f..][..f];
                for (o, yv) in y_row.iter_mut().enumerate() {
                    let w_row = &w[o * f..][..f];
                    let mut acc = b[o];
                    for (wv, xv) in w_row.iter().zip(x_row) {
                        acc += wv * xv;
                    }
                    *yv = acc;
                }
            });
        y
    }

    pub fn forward_train(&self, store: &ParamStore, x: Tensor) -> (Tensor, DenseCache) {
        let y = self.forward(store, &x);
        (y, DenseCache { input: x })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &DenseCache, dy: &Tensor) -> Tensor {
        let dx = self.backward_data(store, dy);
        self.accumulate_param_grads(store, &cache.input, dy);
        dx
    }

    pub fn backward_data(&self, store: &ParamStore, dy: &Tensor) -> Tensor {
        let (n, out) = dy.dims2();
        assert_eq!(out, self.out_features);
        let w = store.value(self.weight).data();
        let f = self.in_features;
        let dy_data = dy.data();
        let mut dx = Tensor::zeros(&[n, f]);
        dx.data_mut()
            .par_chunks_mut(f)
            .enumerate()
            .for_each(|(ni, dx_row)| {
                let dy_row = &dy_data[ni * out..][..out];
                for (o, dyv) in dy_row.iter().enumerate() {
                    let w_row = &w[o * f..][..f];
                    for (dxv, wv) in dx_row.iter_mut().zip(w_row) {
                        *dxv += dyv * wv;
                    }
                }
            });
        dx
    }

    pub fn accumulate_param_grads(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) {
        let (n, out) = dy.dims2();
        let f = self.in_features;
        let x_data = x.data();
        let dy_data = dy.data();
        {
            let dw = store.grad_mut(self.weight);
            dw.data_mut()
                .par_chunks_mut(f)
                .enumerate()
                .for_each(|(o, dw_row)| {
                    for ni in 0..n {
                        let g = dy_data[ni * out + o];
                        if g == 0.0 {
                            continue;
                        }
                        let x_row = &x_data[ni * f..][..f];
                        for (dwv, xv) in dw_row.iter_mut().zip(x_row) {
                            *dwv += g * xv;
                        }
                    }
                });
        }
        let db = store.grad_mut(self.bias);
        for o in 0..out {
            let mut acc = 0.0;
            for ni in 0..n {
                acc += dy_data[ni * out + o];
            }
            db.data_mut()[o] += acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Batch normalization over NCHW channels
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug)]
pub struct BatchNormCache {
    /// Normalized activations.
    pub x_hat: Tensor,
    /// Per-channel `1 / sqrt(var + eps)`.
    pub inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store
            .register(&format!("{name}.gamma"), Tensor::full(&[channels], 1.0), true)
            .expect("unique layer name");
        let beta = store
            .register(&format!("{name}.beta"), Tensor::zeros(&[channels]), true)
            .expect("unique layer name");
        let running_mean = store
            .register(&format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)
            .expect("unique layer name");
        let running_var = store
            .register(&format!("{name}.running_var"), Tensor::full(&[channels], 1.0), false)
            .expect("unique layer name");
        BatchNorm2d {
            channels,
            eps: 1e-5,
            momentum: 0.1,
            gamma,
            beta,
            running_mean,
            running_var,
        }
    }

    /// Inference-mode normalization with running statistics.
    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels);
        let gamma = store.value(self.gamma).data();
        let beta = store.value(self.beta).data();
        let mean = store.value(self.running_mean).data();
        let var = store.value(self.running_var).data();
        let mut y = x.clone();
        let plane = h * w;
        for ni in 0..n {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + self.eps).sqrt();
                let (g, b, m) = (gamma[ci], beta[ci], mean[ci]);
                for v in y.data_mut()[(ni * c + ci) * plane..][..plane].iter_mut() {
                    *v = g * (*v - m) * inv + b;
                }
            }
        }
        y
    }

    /// Batch-statistics normalization; optionally folds the batch moments
    /// into the running statistics.
    pub fn forward_train(
        &self,
        store: &mut ParamStore,
        x: &Tensor,
        update_running: bool,
    ) -> (Tensor, BatchNormCache) {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels);
        let plane = h * w;
        let m = (n * plane) as f64;
        let mut means = vec![0.0; c];
        let mut vars = vec![0.0; c];
        for ci in 0..c {
            let mut sum = 0.0;
            for ni in 0..n {
                sum += x.plane(ni, ci).iter().sum::<f64>();
            }
            let mean = sum / m;
            let mut sq = 0.0;
            for ni in 0..n {
                for v in x.plane(ni, ci) {
                    let d = v - mean;
                    sq += d * d;
                }
            }
            means[ci] = mean;
            vars[ci] = sq / m;
        }
        let gamma = store.value(self.gamma).data().to_vec();
        let beta = store.value(self.beta).data().to_vec();
        let inv_std: Vec<f64> = vars.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();

        let mut x_hat = x.clone();
        let mut y = Tensor::zeros(x.shape());
        for ni in 0..n {
            for ci in 0..c {
                let inv = inv_std[ci];
                let mean = means[ci];
                let (g, b) = (gamma[ci], beta[ci]);
                let src = &mut x_hat.data_mut()[(ni * c + ci) * plane..][..plane];
                let dst = &mut y.data_mut()[(ni * c + ci) * plane..][..plane];
                for (xh, yv) in src.iter_mut().zip(dst.iter_mut()) {
                    *xh = (*xh - mean) * inv;
                    *yv = g * *xh + b;
                }
            }
        }
        if update_running {
            let mom = self.momentum;
            let rm = store.value_mut(self.running_mean);
            for (r, mv) in rm.data_mut().iter_mut().zip(&means) {
                *r = (1.0 - mom) * *r + mom * mv;
            }
            let rv = store.value_mut(self.running_var);
            for (r, vv) in rv.data_mut().iter_mut().zip(&vars) {
                *r = (1.0 - mom) * *r + mom * vv;
            }
        }
        (y, BatchNormCache { x_hat, inv_std })
    }

    pub fn backward(&self, store: &mut ParamStore, cache: &BatchNormCache, dy: &Tensor) -> Tensor {
        let (n, c, h, w) = dy.dims4();
        let plane = h * w;
        let m = (n * plane) as f64;
        let gamma = store.value(self.gamma).data().to_vec();

        let mut d_gamma = vec![0.0; c];
        let mut d_beta = vec![0.0; c];
        let mut sum_dxhat = vec![0.0; c];
        let mut sum_dxhat_xhat = vec![0.0; c];
        for ci in 0..c {
            let mut dg = 0.0;
            let mut db = 0.0;
            for ni in 0..n {
                let dy_p = dy.plane(ni, ci);
                let xh_p = cache.x_hat.plane(ni, ci);
                for (dyv, xhv) in dy_p.iter().zip(xh_p) {
                    dg += dyv * xhv;
                    db += dyv;
                }
            }
            d_gamma[ci] = dg;
            d_beta[ci] = db;
            // dx_hat = dy * gamma, so these sums reuse the same reductions
            sum_dxhat[ci] = gamma[ci] * db;
            sum_dxhat_xhat[ci] = gamma[ci] * dg;
        }

        let mut dx = Tensor::zeros(dy.shape());
        for ni in 0..n {
            for ci in 0..c {
                let g = gamma[ci];
                let inv = cache.inv_std[ci];
                let s1 = sum_dxhat[ci];
                let s2 = sum_dxhat_xhat[ci];
                let dy_p = dy.plane(ni, ci).to_vec();
                let xh_p = cache.x_hat.plane(ni, ci).to_vec();
                let dx_p = dx.plane_mut(ni, ci);
                for ((dxv, dyv), xhv) in dx_p.iter_mut().zip(&dy_p).zip(&xh_p) {
                    let dxhat = dyv * g;
                    *dxv = inv / m * (m * dxhat - s1 - xhv * s2);
                }
            }
        }
        store.grad_mut(self.gamma).data_mut()
            .iter_mut()
            .zip(&d_gamma)
            .for_each(|(g, d)| *g += d);
        store.grad_mut(self.beta).data_mut()
            .iter_mut()
            .zip(&d_beta)
            .for_each(|(g, d)| *g += d);
        dx
    }
}

// ---------------------------------------------------------------------------
// Max pooling (2x2, stride 2)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Default)]
pub struct MaxPool2d;

#[derive(Debug)]
pub struct MaxPoolCache {
    pub in_shape: Vec<usize>,
    /// Flat input index (within each plane) of the winning element.
    pub argmax: Vec<usize>,
}

impl MaxPool2d {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &Tensor) -> (Tensor, MaxPoolCache) {
        let (n, c, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "max pool expects even spatial size, got {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let mut y = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0usize; n * c * oh * ow];
        let x_data = x.data();
        let in_plane = h * w;
        let out_plane = oh * ow;
        let y_data = y.data_mut();
        for idx in 0..n * c {
            let x_plane = &x_data[idx * in_plane..][..in_plane];
            let y_plane = &mut y_data[idx * out_plane..][..out_plane];
            let am_plane = &mut argmax[idx * out_plane..][..out_plane];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * w + 2 * ox;
                    let candidates = [base, base + 1, base + w, base + w + 1];
                    let mut best = candidates[0];
                    let mut best_v = x_plane[best];
                    for &cand in &candidates[1..] {
                        if x_plane[cand] > best_v {
                            best_v = x_plane[cand];
                            best = cand;
                        }
                    }
                    y_plane[oy * ow + ox] = best_v;
                    am_plane[oy * ow + ox] = best;
                }
            }
        }
        (
            y,
            MaxPoolCache {
                in_shape: x.shape().to_vec(),
                argmax,
            },
        )
    }

    pub fn backward(&self, cache: &MaxPoolCache, dy: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(&cache.in_shape);
        let (n, c, h, w) = (cache.in_shape[0], cache.in_shape[1], cache.in_shape[2], cache.in_shape[3]);
        let (_, _, oh, ow) = dy.dims4();
        let in_plane = h * w;
        let out_plane = oh * ow;
        let dy_data = dy.data();
        let dx_data = dx.data_mut();
        for idx in 0..n * c {
            let dy_plane = &dy_data[idx * out_plane..][..out_plane];
            let am_plane = &cache.argmax[idx * out_plane..][..out_plane];
            let dx_plane = &mut dx_data[idx * in_plane..][..in_plane];
            for (dyv, &am) in dy_plane.iter().zip(am_plane) {
                dx_plane[am] += dyv;
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0;
        }
    });
    y
}

/// Backward through relu given the forward *output*.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, o) in dx.data_mut().iter_mut().zip(y.data()) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp()));
    y
}

/// Backward through sigmoid given the forward *output*.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, o) in dx.data_mut().iter_mut().zip(y.data()) {
        *d *= o * (1.0 - o);
    }
    dx
}

/// Row-wise softmax of a `[n, classes]` tensor.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (n, c) = x.dims2();
    let mut y = x.clone();
    for r in 0..n {
        let row = &mut y.data_mut()[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    y
}

// ---------------------------------------------------------------------------
// Dropout (inverted scaling)
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    pub rate: f64,
}

#[derive(Debug)]
pub struct DropoutCache {
    /// Per-element keep multiplier (0 or 1/keep); empty when disabled.
    pub mask: Vec<f64>,
}

impl Dropout {
    pub fn new(rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        Dropout { rate }
    }

    /// `rng = None` runs the layer as identity (inference / gradient checks).
    pub fn forward_train(&self, x: Tensor, rng: Option<&mut ChaCha8Rng>) -> (Tensor, DropoutCache) {
        match rng {
            None => (x, DropoutCache { mask: Vec::new() }),
            Some(rng) if self.rate == 0.0 => {
                let _ = rng;
                (x, DropoutCache { mask: Vec::new() })
            }
            Some(rng) => {
                let keep = 1.0 - self.rate;
                let scale = 1.0 / keep;
                let mut y = x;
                let mask: Vec<f64> = y
                    .data_mut()
                    .iter_mut()
                    .map(|v| {
                        let m = if rng.gen::<f64>() < keep { scale } else { 0.0 };
                        *v *= m;
                        m
                    })
                    .collect();
                (y, DropoutCache { mask })
            }
        }
    }

    pub fn backward(&self, cache: &DropoutCache, dy: &Tensor) -> Tensor {
        if cache.mask.is_empty() {
            return dy.clone();
        }
        let mut dx = dy.clone();
        for (d, m) in dx.data_mut().iter_mut().zip(&cache.mask) {
            *d *= m;
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Spatial attention
// ---------------------------------------------------------------------------

/// Gates each spatial location with a sigmoid map computed from channel-wise
/// mean and max pooling followed by one `k x k` convolution.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: super::conv::Conv2d,
}

#[derive(Debug)]
pub struct SpatialAttentionCache {
    pub input: Tensor,
    pub pooled: Tensor,
    pub gate: Tensor,
    /// Channel index that won the max pooling, per (n, h*w).
    pub argmax_channel: Vec<usize>,
}

impl SpatialAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "attention kernel must be odd");
        let conv = super::conv::Conv2d::same(store, rng, &format!("{name}.conv"), 2, 1, kernel);
        SpatialAttention { conv }
    }

    fn pool(&self, x: &Tensor) -> (Tensor, Vec<usize>) {
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let mut pooled = Tensor::zeros(&[n, 2, h, w]);
        let mut argmax = vec![0usize; n * plane];
        for ni in 0..n {
            {
                let mean_plane = pooled.plane_mut(ni, 0);
                for ci in 0..c {
                    let x_plane = x.plane(ni, ci);
                    for (mv, xv) in mean_plane.iter_mut().zip(x_plane) {
                        *mv += xv;
                    }
                }
                mean_plane.iter_mut().for_each(|v| *v /= c as f64);
            }
            {
                let am = &mut argmax[ni * plane..][..plane];
                let x0 = x.plane(ni, 0).to_vec();
                let max_plane = pooled.plane_mut(ni, 1);
                max_plane.copy_from_slice(&x0);
                for ci in 1..c {
                    let x_plane = x.plane(ni, ci);
                    for (i, (mv, xv)) in max_plane.iter_mut().zip(x_plane).enumerate() {
                        if *xv > *mv {
                            *mv = *xv;
                            am[i] = ci;
                        }
                    }
                }
            }
        }
        (pooled, argmax)
    }

    fn apply_gate(x: &Tensor, gate: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        let plane = h * w;
        let mut y = x.clone();
        for ni in 0..n {
            let g_plane = gate.plane(ni, 0).to_vec();
            for ci in 0..c {
                let y_plane = y.plane_mut(ni, ci);
                for (yv, gv) in y_plane.iter_mut().zip(&g_plane) {
                    *yv *= gv;
                }
            }
        }
        let _ = plane;
        y
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let (pooled, _) = self.pool(x);
        let gate = sigmoid(&self.conv.forward(store, &pooled));
        Self::apply_gate(x, &gate)
    }

    /// The sigmoid gate itself, for tests that inspect the attention map.
    pub fn gate(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let (pooled, _) = self.pool(x);
        sigmoid(&self.conv.forward(store, &pooled))
    }

    pub fn forward_train(&self, store: &ParamStore, x: Tensor) -> (Tensor, SpatialAttentionCache) {
        let (pooled, argmax_channel) = self.pool(&x);
        let gate = sigmoid(&self.conv.forward(store, &pooled));
        let y = Self::apply_gate(&x, &gate);
        (
            y,
            SpatialAttentionCache {
                input: x,
                pooled,
                gate,
                argmax_channel,
            },
        )
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &SpatialAttentionCache,
        dy: &Tensor,
    ) -> Tensor {
        let (n, c, h, w) = cache.input.dims4();
        let plane = h * w;

        // d(gate): sum over channels of dy * x; dx direct term: dy * gate.
        let mut d_gate = Tensor::zeros(&[n, 1, h, w]);
        let mut dx = Tensor::zeros(cache.input.shape());
        for ni in 0..n {
            let g_plane = cache.gate.plane(ni, 0).to_vec();
            let mut dg = vec![0.0; plane];
            for ci in 0..c {
                let dy_p = dy.plane(ni, ci);
                let x_p = cache.input.plane(ni, ci);
                let dx_p = dx.plane_mut(ni, ci);
                for i in 0..plane {
                    dg[i] += dy_p[i] * x_p[i];
                    dx_p[i] = dy_p[i] * g_plane[i];
                }
            }
            d_gate.plane_mut(ni, 0).copy_from_slice(&dg);
        }
        // Through the sigmoid into the attention convolution.
        let d_raw = sigmoid_backward(&cache.gate, &d_gate);
        let conv_cache = super::conv::ConvCache {
            input: cache.pooled.clone(),
        };
        let d_pooled = self.conv.backward(store, &conv_cache, &d_raw);

        // Mean branch spreads evenly over channels; max branch routes to the
        // winning channel.
        for ni in 0..n {
            let d_mean = d_pooled.plane(ni, 0).to_vec();
            let d_max = d_pooled.plane(ni, 1).to_vec();
            let am = &cache.argmax_channel[ni * plane..][..plane];
            for ci in 0..c {
                let dx_p = dx.plane_mut(ni, ci);
                for i in 0..plane {
                    dx_p[i] += d_mean[i] / c as f64;
                    if am[i] == ci {
                        dx_p[i] += d_max[i];
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Channel concat / split helpers (CMP shortcut merge)
// ---------------------------------------------------------------------------

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert!(n == nb && h == hb && w == wb, "concat spatial/batch mismatch");
    let mut y = Tensor::zeros(&[n, ca + cb, h, w]);
    for ni in 0..n {
        for ci in 0..ca {
            y.plane_mut(ni, ci).copy_from_slice(a.plane(ni, ci));
        }
        for ci in 0..cb {
            y.plane_mut(ni, ca + ci).copy_from_slice(b.plane(ni, ci));
        }
    }
    y
}

pub fn split_channels(dy: &Tensor, ca: usize) -> (Tensor, Tensor) {
    let (n, c, h, w) = dy.dims4();
    assert!(ca < c);
    let cb = c - ca;
    let mut da = Tensor::zeros(&[n, ca, h, w]);
    let mut db = Tensor::zeros(&[n, cb, h, w]);
    for ni in 0..n {
        for ci in 0..ca {
            da.plane_mut(ni, ci).copy_from_slice(dy.plane(ni, ci));
        }
        for ci in 0..cb {
            db.plane_mut(ni, ci).copy_from_slice(dy.plane(ni, ca + ci));
        }
    }
    (da, db)
}
