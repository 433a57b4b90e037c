//! 2-D convolution and transposed convolution with explicit backward passes.
//!
//! Work is parallelized over independent output planes; every plane is
//! filled by a sequential loop, so results are bit-identical regardless of
//! thread count.

use rayon::prelude::*;

use crate::nn::init::he_normal;
use crate::nn::store::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: ParamId,
    /// Absent on convolutions that feed straight into batch norm, where a
    /// bias would be cancelled by the mean subtraction.
    pub bias: Option<ParamId>,
}

#[derive(Debug)]
pub struct ConvCache {
    pub input: Tensor,
}

impl Conv2d {
    /// Registers weights `[out_c, in_c, k, k]` and, when `with_bias`, a
    /// zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store
            .register(
                &format!("{name}.weight"),
                he_normal(rng, &[out_channels, in_channels, kernel, kernel], fan_in),
                true,
            )
            .expect("unique layer name");
        let bias = with_bias.then(|| {
            store
                .register(&format!("{name}.bias"), Tensor::zeros(&[out_channels]), true)
                .expect("unique layer name")
        });
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        }
    }

    /// Convolution with odd kernel and stride 1 that preserves spatial size.
    pub fn same(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "same-padding convolution needs an odd kernel");
        Self::new(store, rng, name, in_channels, out_channels, kernel, 1, (kernel - 1) / 2, true)
    }

    /// Same-padding convolution without bias, for use in front of batch norm.
    pub fn same_no_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "same-padding convolution needs an odd kernel");
        Self::new(store, rng, name, in_channels, out_channels, kernel, 1, (kernel - 1) / 2, false)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "conv input channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let mut y = Tensor::zeros(&[n, self.out_channels, oh, ow]);
        let weights = store.value(self.weight).data();
        let bias = self.bias.map(|id| store.value(id).data());
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let in_c = self.in_channels;
        let out_c = self.out_channels;
        let x_data = x.data();
        let in_plane = h * w;
        let out_plane = oh * ow;

        y.data_mut()
            .par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(idx, plane)| {
                let ni = idx / out_c;
                let oc = idx % out_c;
                plane.fill(bias.map_or(0.0, |b| b[oc]));
                for ic in 0..in_c {
                    let x_plane = &x_data[(ni * in_c + ic) * in_plane..][..in_plane];
                    let w_base = &weights[(oc * in_c + ic) * k * k..][..k * k];
                    accumulate_conv_plane(plane, x_plane, w_base, h, w, oh, ow, k, s, p);
                }
            });
        y
    }

    pub fn forward_train(&self, store: &ParamStore, x: Tensor) -> (Tensor, ConvCache) {
        let y = self.forward(store, &x);
        (y, ConvCache { input: x })
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, store: &mut ParamStore, cache: &ConvCache, dy: &Tensor) -> Tensor {
        let dx = self.backward_data(store, dy, cache.input.shape());
        self.accumulate_param_grads(store, &cache.input, dy);
        dx
    }

    /// Input gradient only; used when this layer's own weights are frozen
    /// for the current term (e.g. discriminator applied to generated images).
    pub fn backward_data(&self, store: &ParamStore, dy: &Tensor, x_shape: &[usize]) -> Tensor {
        let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (_, _, oh, ow) = dy.dims4();
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let weights = store.value(self.weight).data();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let in_c = self.in_channels;
        let out_c = self.out_channels;
        let dy_data = dy.data();
        let in_plane = h * w;
        let out_plane = oh * ow;

        dx.data_mut()
            .par_chunks_mut(in_plane)
            .enumerate()
            .for_each(|(idx, dx_plane)| {
                let ni = idx / in_c;
                let ic = idx % in_c;
                for oc in 0..out_c {
                    let dy_plane = &dy_data[(ni * out_c + oc) * out_plane..][..out_plane];
                    let w_base = &weights[(oc * in_c + ic) * k * k..][..k * k];
                    scatter_conv_plane(dx_plane, dy_plane, w_base, h, w, oh, ow, k, s, p);
                }
            });
        dx
    }

    pub fn accumulate_param_grads(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) {
        let (n, _, h, w) = x.dims4();
        let (_, _, oh, ow) = dy.dims4();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let in_c = self.in_channels;
        let out_c = self.out_channels;
        let x_data = x.data();
        let dy_data = dy.data();
        let in_plane = h * w;
        let out_plane = oh * ow;

        {
            let dw = store.grad_mut(self.weight);
            dw.data_mut()
                .par_chunks_mut(in_c * k * k)
                .enumerate()
                .for_each(|(oc, dw_slice)| {
                    for ni in 0..n {
                        let dy_plane = &dy_data[(ni * out_c + oc) * out_plane..][..out_plane];
                        for ic in 0..in_c {
                            let x_plane = &x_data[(ni * in_c + ic) * in_plane..][..in_plane];
                            correlate_weight_grad(
                                &mut dw_slice[ic * k * k..(ic + 1) * k * k],
                                x_plane,
                                dy_plane,
                                h,
                                w,
                                oh,
                                ow,
                                k,
                                s,
                                p,
                            );
                        }
                    }
                });
        }
        if let Some(bias_id) = self.bias {
            let db = store.grad_mut(bias_id);
            for oc in 0..out_c {
                let mut acc = 0.0;
                for ni in 0..n {
                    let dy_plane = &dy_data[(ni * out_c + oc) * out_plane..][..out_plane];
                    acc += dy_plane.iter().sum::<f64>();
                }
                db.data_mut()[oc] += acc;
            }
        }
    }
}

/// `plane[oh,ow] += w[kh,kw] * x[oh*s+kh-p, ow*s+kw-p]` over all kernel taps.
#[allow(clippy::too_many_arguments)]
fn accumulate_conv_plane(
    plane: &mut [f64],
    x_plane: &[f64],
    w_base: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
    p: usize,
) {
    for kh in 0..k {
        for kw in 0..k {
            let wv = w_base[kh * k + kw];
            for oy in 0..oh {
                let iy = (oy * s + kh) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let x_row = &x_plane[iy as usize * w..][..w];
                let y_row = &mut plane[oy * ow..][..ow];
                if s == 1 {
                    // ix = ox + kw - p must stay in [0, w)
                    let lo = p.saturating_sub(kw);
                    let hi = (w + p).saturating_sub(kw).min(ow);
                    if lo >= hi {
                        continue;
                    }
                    let x_off = lo + kw - p;
                    for (yv, xv) in y_row[lo..hi].iter_mut().zip(&x_row[x_off..x_off + hi - lo]) {
                        *yv += wv * xv;
                    }
                } else {
                    for (ox, yv) in y_row.iter_mut().enumerate() {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        *yv += wv * x_row[ix as usize];
                    }
                }
            }
        }
    }
}

/// `dx[oy*s+kh-p, ox*s+kw-p] += w[kh,kw] * dy[oy,ox]`.
#[allow(clippy::too_many_arguments)]
fn scatter_conv_plane(
    dx_plane: &mut [f64],
    dy_plane: &[f64],
    w_base: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
    p: usize,
) {
    for kh in 0..k {
        for kw in 0..k {
            let wv = w_base[kh * k + kw];
            for oy in 0..oh {
                let iy = (oy * s + kh) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let dx_row = &mut dx_plane[iy as usize * w..][..w];
                let dy_row = &dy_plane[oy * ow..][..ow];
                if s == 1 {
                    let lo = p.saturating_sub(kw);
                    let hi = (w + p).saturating_sub(kw).min(ow);
                    if lo >= hi {
                        continue;
                    }
                    let x_off = lo + kw - p;
                    for (dxv, dyv) in dx_row[x_off..x_off + hi - lo].iter_mut().zip(&dy_row[lo..hi])
                    {
                        *dxv += wv * dyv;
                    }
                } else {
                    for (ox, dyv) in dy_row.iter().enumerate() {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx_row[ix as usize] += wv * dyv;
                    }
                }
            }
        }
    }
}

/// `dw[kh,kw] += sum_{oy,ox} dy[oy,ox] * x[oy*s+kh-p, ox*s+kw-p]`.
#[allow(clippy::too_many_arguments)]
fn correlate_weight_grad(
    dw: &mut [f64],
    x_plane: &[f64],
    dy_plane: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    s: usize,
    p: usize,
) {
    for kh in 0..k {
        for kw in 0..k {
            let mut acc = 0.0;
            for oy in 0..oh {
                let iy = (oy * s + kh) as isize - p as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let x_row = &x_plane[iy as usize * w..][..w];
                let dy_row = &dy_plane[oy * ow..][..ow];
                if s == 1 {
                    let lo = p.saturating_sub(kw);
                    let hi = (w + p).saturating_sub(kw).min(ow);
                    if lo >= hi {
                        continue;
                    }
                    let x_off = lo + kw - p;
                    for (dyv, xv) in dy_row[lo..hi].iter().zip(&x_row[x_off..x_off + hi - lo]) {
                        acc += dyv * xv;
                    }
                } else {
                    for (ox, dyv) in dy_row.iter().enumerate() {
                        let ix = (ox * s + kw) as isize - p as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += dyv * x_row[ix as usize];
                    }
                }
            }
            dw[kh * k + kw] += acc;
        }
    }
}

/// Transposed convolution; weights are `[in_c, out_c, k, k]`.
///
/// With `kernel = 4, stride = 2, padding = 1` the spatial size doubles
/// exactly; with `kernel = 3, stride = 1, padding = 1` it is preserved.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub weight: ParamId,
    /// Absent on transposed convolutions that feed straight into batch norm.
    pub bias: Option<ParamId>,
}

#[derive(Debug)]
pub struct ConvTransposeCache {
    pub input: Tensor,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        with_bias: bool,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let weight = store
            .register(
                &format!("{name}.weight"),
                he_normal(rng, &[in_channels, out_channels, kernel, kernel], fan_in),
                true,
            )
            .expect("unique layer name");
        let bias = with_bias.then(|| {
            store
                .register(&format!("{name}.bias"), Tensor::zeros(&[out_channels]), true)
                .expect("unique layer name")
        });
        ConvTranspose2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight,
            bias,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h - 1) * self.stride + self.kernel - 2 * self.padding;
        let ow = (w - 1) * self.stride + self.kernel - 2 * self.padding;
        (oh, ow)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "transpose conv input channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let mut y = Tensor::zeros(&[n, self.out_channels, oh, ow]);
        let weights = store.value(self.weight).data();
        let bias = self.bias.map(|id| store.value(id).data());
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let in_c = self.in_channels;
        let out_c = self.out_channels;
        let x_data = x.data();
        let in_plane = h * w;
        let out_plane = oh * ow;

        y.data_mut()
            .par_chunks_mut(out_plane)
            .enumerate()
            .for_each(|(idx, plane)| {
                let ni = idx / out_c;
                let oc = idx % out_c;
                plane.fill(bias.map_or(0.0, |b| b[oc]));
                for ic in 0..in_c {
                    let x_plane = &x_data[(ni * in_c + ic) * in_plane..][..in_plane];
                    let w_base = &weights[(ic * out_c + oc) * k * k..][..k * k];
                    // Output position oy = iy*s + kh - p: the scatter dual of
                    // the convolution gather above.
                    scatter_conv_plane(plane, x_plane, w_base, oh, ow, h, w, k, s, p);
                }
            });
        y
    }

    pub fn forward_train(&self, store: &ParamStore, x: Tensor) -> (Tensor, ConvTransposeCache) {
        let y = self.forward(store, &x);
        (y, ConvTransposeCache { input: x })
    }

    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &ConvTransposeCache,
        dy: &Tensor,
    ) -> Tensor {
        let dx = self.backward_data(store, dy, cache.input.shape());
        self.accumulate_param_grads(store, &cache.input, dy);
        dx
    }

    pub fn backward_data(&self, store: &ParamStore, dy: &Tensor, x_shape: &[usize]) -> Tensor {
        let (n, c, h, w) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
        let (_, _, oh, ow) = dy.dims4();
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let weights = store.value(self.weight).data();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let in_c = self.in_channels;
        let out_c = self.out_channels;
        let dy_data = dy.data();
        let in_plane = h * w;
        let out_plane = oh * ow;

        dx.data_mut()
            .par_chunks_mut(in_plane)
            .enumerate()
            .for_each(|(idx, dx_plane)| {
                let ni = idx / in_c;
                let ic = idx % in_c;
                for oc in 0..out_c {
                    let dy_plane = &dy_data[(ni * out_c + oc) * out_plane..][..out_plane];
                    let w_base = &weights[(ic * out_c + oc) * k * k..][..k * k];
                    // dx[iy,ix] += dy[iy*s+kh-p, ix*s+kw-p] * w: a plain gather.
                    accumulate_conv_plane(dx_plane, dy_plane, w_base, oh, ow, h, w, k, s, p);
                }
            });
        dx
    }

    pub fn accumulate_param_grads(&self, store: &mut ParamStore, x: &Tensor, dy: &Tensor) {
        let (n, _, h, w) = x.dims4();
        let (_, _, oh, ow) = dy.dims4();
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let in_c = self.in_channels;
        let out_c = self.out_channels;
        let x_data = x.data();
        let dy_data = dy.data();
        let in_plane = h * w;
        let out_plane = oh * ow;

        {
            let dw = store.grad_mut(self.weight);
            dw.data_mut()
                .par_chunks_mut(out_c * k * k)
                .enumerate()
                .for_each(|(ic, dw_slice)| {
                    for ni in 0..n {
                        let x_plane = &x_data[(ni * in_c + ic) * in_plane..][..in_plane];
                        for oc in 0..out_c {
                            let dy_plane = &dy_data[(ni * out_c + oc) * out_plane..][..out_plane];
                            // dw[kh,kw] += sum_{iy,ix} x[iy,ix] * dy[iy*s+kh-p,...]:
                            // the weight correlation with roles of x/dy swapped.
                            correlate_weight_grad(
                                &mut dw_slice[oc * k * k..(oc + 1) * k * k],
                                dy_plane,
                                x_plane,
                                oh,
                                ow,
                                h,
                                w,
                                k,
                                s,
                                p,
                            );
                        }
                    }
                });
        }
        if let Some(bias_id) = self.bias {
            let db = store.grad_mut(bias_id);
            for oc in 0..out_c {
                let mut acc = 0.0;
                for ni in 0..n {
                    let dy_plane = &dy_data[(ni * out_c + oc) * out_plane..][..out_plane];
                    acc += dy_plane.iter().sum::<f64>();
                }
                db.data_mut()[oc] += acc;
            }
        }
    }
}
