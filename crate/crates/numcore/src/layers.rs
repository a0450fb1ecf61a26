//! Parameterized layers. Each layer registers its tensors in a [`ParamStore`] on
//! construction and evaluates against any [`Compute`] context.

use rand_chacha::ChaCha8Rng;

use crate::compute::Compute;
use crate::error::Result;
use crate::kernels::{ConvOpts, NormKind};
use crate::params::{uniform_fan_in, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: ConvOpts,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: ConvOpts,
        bias: bool,
    ) -> Self {
        let cin_g = in_channels / opts.groups;
        let fan_in = cin_g * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(rng, &[out_channels, cin_g, kernel], fan_in),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                uniform_fan_in(rng, &[out_channels], fan_in),
            )
        });
        Self {
            weight,
            bias,
            opts,
            in_channels,
            out_channels,
            kernel,
        }
    }

    pub fn forward<C: Compute>(
        &self,
        ctx: &mut C,
        store: &ParamStore,
        x: &C::Value,
    ) -> Result<C::Value> {
        let w = ctx.param(store, self.weight);
        let b = self.bias.map(|b| ctx.param(store, b));
        ctx.conv1d(x, &w, b.as_ref(), self.opts)
    }
}

/// Transposed convolution, weight layout `[in, out, kernel]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose1d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Self {
        // Fan-in of the equivalent forward convolution.
        let fan_in = out_channels * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(rng, &[in_channels, out_channels, kernel], fan_in),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                uniform_fan_in(rng, &[out_channels], fan_in),
            )
        });
        Self {
            weight,
            bias,
            stride,
            padding: 0,
        }
    }

    pub fn forward<C: Compute>(
        &self,
        ctx: &mut C,
        store: &ParamStore,
        x: &C::Value,
    ) -> Result<C::Value> {
        let w = ctx.param(store, self.weight);
        let b = self.bias.map(|b| ctx.param(store, b));
        ctx.conv_transpose1d(x, &w, b.as_ref(), self.stride, self.padding)
    }
}

/// Dense layer applied independently at every time step of `[batch, in, time]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_fan_in(rng, &[out_features, in_features], in_features),
        );
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                uniform_fan_in(rng, &[out_features], in_features),
            )
        });
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<C: Compute>(
        &self,
        ctx: &mut C,
        store: &ParamStore,
        x: &C::Value,
    ) -> Result<C::Value> {
        let w = ctx.param(store, self.weight);
        let w = ctx.reshape(&w, &[self.out_features, self.in_features, 1])?;
        let b = self.bias.map(|b| ctx.param(store, b));
        ctx.conv1d(x, &w, b.as_ref(), ConvOpts::default())
    }
}

#[derive(Clone, Debug)]
pub struct Prelu {
    pub slope: ParamId,
}

impl Prelu {
    /// Single shared slope, initialised to 0.25.
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        Self {
            slope: store.add(format!("{name}.slope"), Tensor::full(&[1], 0.25)),
        }
    }

    pub fn forward<C: Compute>(
        &self,
        ctx: &mut C,
        store: &ParamStore,
        x: &C::Value,
    ) -> Result<C::Value> {
        let s = ctx.param(store, self.slope);
        ctx.prelu(x, &s)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub kind: NormKind,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kind: NormKind) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[channels], 1.0)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[channels])),
            kind,
        }
    }

    pub fn forward<C: Compute>(
        &self,
        ctx: &mut C,
        store: &ParamStore,
        x: &C::Value,
    ) -> Result<C::Value> {
        let g = ctx.param(store, self.gain);
        let b = ctx.param(store, self.bias);
        ctx.layer_norm(x, &g, &b, self.kind)
    }
}

/// One LSTM direction. Gate order `i, f, g, o`; forget-gate bias starts at +1.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub reverse: bool,
}

impl LstmCell {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
        reverse: bool,
    ) -> Self {
        let h4 = 4 * hidden;
        let w_ih = store.add(
            format!("{name}.w_ih"),
            uniform_fan_in(rng, &[h4, input], hidden),
        );
        let w_hh = store.add(
            format!("{name}.w_hh"),
            uniform_fan_in(rng, &[h4, hidden], hidden),
        );
        let mut b = uniform_fan_in(rng, &[h4], hidden);
        for v in &mut b.data_mut()[hidden..2 * hidden] {
            *v += 1.0;
        }
        let b_ih = store.add(format!("{name}.b_ih"), b);
        let b_hh = store.add(format!("{name}.b_hh"), uniform_fan_in(rng, &[h4], hidden));
        Self {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            reverse,
        }
    }

    pub fn forward<C: Compute>(
        &self,
        ctx: &mut C,
        store: &ParamStore,
        x: &C::Value,
    ) -> Result<C::Value> {
        let w_ih = ctx.param(store, self.w_ih);
        let w_hh = ctx.param(store, self.w_hh);
        let b_ih = ctx.param(store, self.b_ih);
        let b_hh = ctx.param(store, self.b_hh);
        ctx.lstm(x, &w_ih, &w_hh, &b_ih, &b_hh, self.reverse)
    }
}

/// Stacked bidirectional LSTM: `[batch, input, T] -> [batch, 2 * hidden, T]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub hidden: usize,
}

impl BiLstm {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
        layers: usize,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| {
                let inp = if l == 0 { input } else { 2 * hidden };
                (
                    LstmCell::new(store, rng, &format!("{name}.l{l}.fwd"), inp, hidden, false),
                    LstmCell::new(store, rng, &format!("{name}.l{l}.bwd"), inp, hidden, true),
                )
            })
            .collect();
        Self { layers, hidden }
    }

    pub fn forward<C: Compute>(
        &self,
        ctx: &mut C,
        store: &ParamStore,
        x: &C::Value,
    ) -> Result<C::Value> {
        let mut cur = x.clone();
        for (fwd, bwd) in &self.layers {
            let f = fwd.forward(ctx, store, &cur)?;
            let b = bwd.forward(ctx, store, &cur)?;
            cur = ctx.concat(&[f, b], 1)?;
        }
        Ok(cur)
    }
}
