//! Waveform U-net separator: strided convolution encoder with channel doubling,
//! bidirectional LSTM bottleneck and mirrored transposed-convolution decoder.

use finsep_numcore::layers::{BiLstm, Conv1d, ConvTranspose1d, Linear};
use finsep_numcore::{init_rng, Checkpoint, Compute, ConvOpts, ParamStore, Tensor};

use crate::model::{ModelError, Result, Separator, N_SOURCES};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DemucsConfig {
    /// Number of encoder/decoder layers `B`.
    pub depth: usize,
    /// Output channels of the first encoder layer `C1`.
    pub channels: usize,
    pub growth: usize,
    pub kernel: usize,
    pub stride: usize,
    pub audio_channels: usize,
    pub n_sources: usize,
    pub lstm_layers: usize,
}

impl Default for DemucsConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            channels: 8,
            growth: 2,
            kernel: 8,
            stride: 4,
            audio_channels: 1,
            n_sources: N_SOURCES,
            lstm_layers: 2,
        }
    }
}

impl DemucsConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::InvalidConfig(format!("demucs: {m}")));
        if [
            self.depth,
            self.channels,
            self.growth,
            self.kernel,
            self.stride,
            self.lstm_layers,
        ]
        .contains(&0)
        {
            return fail("all sizes must be positive");
        }
        if self.stride > self.kernel {
            return fail("stride must not exceed kernel");
        }
        if self.audio_channels != 1 {
            return fail("only mono input is supported");
        }
        if self.n_sources != N_SOURCES {
            return fail("exactly two sources are supported");
        }
        if self
            .channels
            .checked_mul(
                self.growth
                    .checked_pow(self.depth as u32 - 1)
                    .unwrap_or(usize::MAX),
            )
            .is_none()
        {
            return fail("channel schedule overflows");
        }
        Ok(())
    }

    /// Output channels of encoder layer `i` (0-based).
    pub fn layer_channels(&self, i: usize) -> usize {
        self.channels * self.growth.pow(i as u32)
    }

    pub fn schedule(&self) -> Vec<usize> {
        (0..self.depth).map(|i| self.layer_channels(i)).collect()
    }

    pub fn lstm_hidden(&self) -> usize {
        self.layer_channels(self.depth - 1)
    }

    /// Length after one strided encoder layer; inputs shorter than the kernel yield one frame.
    fn down(&self, len: usize) -> usize {
        if len <= self.kernel {
            1
        } else {
            (len - self.kernel).div_ceil(self.stride) + 1
        }
    }

    /// Smallest length `>= len` that survives encoding and decoding unchanged.
    pub fn valid_length(&self, len: usize) -> usize {
        let mut l = len.max(1);
        for _ in 0..self.depth {
            l = self.down(l);
        }
        for _ in 0..self.depth {
            l = (l - 1) * self.stride + self.kernel;
        }
        l
    }

    pub fn write_meta(&self, ck: &mut Checkpoint) {
        ck.set_meta("depth", self.depth);
        ck.set_meta("channels", self.channels);
        ck.set_meta("growth", self.growth);
        ck.set_meta("kernel", self.kernel);
        ck.set_meta("stride", self.stride);
        ck.set_meta("audio_channels", self.audio_channels);
        ck.set_meta("n_sources", self.n_sources);
        ck.set_meta("lstm_layers", self.lstm_layers);
    }

    pub fn from_meta(ck: &Checkpoint) -> Result<Self> {
        let c = Self {
            depth: ck.meta_parsed("depth")?,
            channels: ck.meta_parsed("channels")?,
            growth: ck.meta_parsed("growth")?,
            kernel: ck.meta_parsed("kernel")?,
            stride: ck.meta_parsed("stride")?,
            audio_channels: ck.meta_parsed("audio_channels")?,
            n_sources: ck.meta_parsed("n_sources")?,
            lstm_layers: ck.meta_parsed("lstm_layers")?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    conv: Conv1d,
    gate: Conv1d,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    gate: Conv1d,
    up: ConvTranspose1d,
    relu: bool,
}

#[derive(Clone, Debug)]
pub struct Demucs {
    config: DemucsConfig,
    seed: u64,
    store: ParamStore,
    encoder: Vec<EncoderLayer>,
    lstm: BiLstm,
    linear: Linear,
    /// Deepest layer first.
    decoder: Vec<DecoderLayer>,
}

impl Demucs {
    pub fn new(config: DemucsConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = init_rng(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let mut encoder = Vec::with_capacity(c.depth);
        let mut cin = c.audio_channels;
        for i in 0..c.depth {
            let ch = c.layer_channels(i);
            encoder.push(EncoderLayer {
                conv: Conv1d::new(
                    s,
                    &mut rng,
                    &format!("enc{i}.conv"),
                    cin,
                    ch,
                    c.kernel,
                    ConvOpts::stride(c.stride),
                    true,
                ),
                gate: Conv1d::new(
                    s,
                    &mut rng,
                    &format!("enc{i}.gate"),
                    ch,
                    2 * ch,
                    1,
                    ConvOpts::default(),
                    true,
                ),
            });
            cin = ch;
        }
        let hidden = c.lstm_hidden();
        let lstm = BiLstm::new(s, &mut rng, "lstm", hidden, hidden, c.lstm_layers);
        let linear = Linear::new(s, &mut rng, "lstm.linear", 2 * hidden, hidden, true);
        let mut decoder = Vec::with_capacity(c.depth);
        for i in (0..c.depth).rev() {
            let ch = c.layer_channels(i);
            let out = if i == 0 {
                c.n_sources * c.audio_channels
            } else {
                c.layer_channels(i - 1)
            };
            decoder.push(DecoderLayer {
                gate: Conv1d::new(
                    s,
                    &mut rng,
                    &format!("dec{i}.gate"),
                    ch,
                    2 * ch,
                    3,
                    ConvOpts {
                        padding: 1,
                        ..ConvOpts::default()
                    },
                    true,
                ),
                up: ConvTranspose1d::new(
                    s,
                    &mut rng,
                    &format!("dec{i}.up"),
                    ch,
                    out,
                    c.kernel,
                    c.stride,
                    true,
                ),
                relu: i != 0,
            });
        }
        Ok(Self {
            config,
            seed,
            store,
            encoder,
            lstm,
            linear,
            decoder,
        })
    }

    pub fn config(&self) -> &DemucsConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `[B, A, L_pad] -> (latent, skips)`; `skips[i]` is the output of encoder layer `i`.
    pub fn encode<C: Compute>(
        &self,
        ctx: &mut C,
        x: &C::Value,
    ) -> Result<(C::Value, Vec<C::Value>)> {
        let len = ctx.tensor(x).shape().get(2).copied().unwrap_or(0);
        if len < self.config.kernel {
            return Err(ModelError::InvalidConfig(format!(
                "input length {len} shorter than kernel {}",
                self.config.kernel
            )));
        }
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = x.clone();
        for layer in &self.encoder {
            let y = layer.conv.forward(ctx, &self.store, &h)?;
            let y = ctx.relu(&y);
            let y = layer.gate.forward(ctx, &self.store, &y)?;
            h = ctx.glu(&y)?;
            skips.push(h.clone());
        }
        Ok((h, skips))
    }

    /// BiLSTM followed by the channel-reducing linear layer; shape preserved.
    pub fn bottleneck<C: Compute>(&self, ctx: &mut C, latent: &C::Value) -> Result<C::Value> {
        let y = self.lstm.forward(ctx, &self.store, latent)?;
        Ok(self.linear.forward(ctx, &self.store, &y)?)
    }

    /// `[B, C_B, T] + skips -> [B, n * A, L_pad]`.
    pub fn decode<C: Compute>(
        &self,
        ctx: &mut C,
        latent: &C::Value,
        skips: &[C::Value],
    ) -> Result<C::Value> {
        if skips.len() != self.decoder.len() {
            return Err(ModelError::InvalidConfig(format!(
                "{} skips for {} decoder layers",
                skips.len(),
                self.decoder.len()
            )));
        }
        let mut h = latent.clone();
        for (layer, skip) in self.decoder.iter().zip(skips.iter().rev()) {
            let y = ctx.add(&h, skip)?;
            let y = layer.gate.forward(ctx, &self.store, &y)?;
            let y = ctx.glu(&y)?;
            let y = layer.up.forward(ctx, &self.store, &y)?;
            h = if layer.relu { ctx.relu(&y) } else { y };
        }
        Ok(h)
    }
}

impl Separator for Demucs {
    const ARCH: &'static str = "demucs";

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn separate_batch<C: Compute>(&self, ctx: &mut C, x: &C::Value) -> Result<C::Value> {
        let (batch, chans, len) = ctx.tensor(x).dims3("demucs")?;
        let padded_len = self.config.valid_length(len);
        let padded = if padded_len > len {
            let zeros = ctx.input(Tensor::zeros(&[batch, chans, padded_len - len]));
            ctx.concat(&[x.clone(), zeros], 2)?
        } else {
            x.clone()
        };
        let (latent, skips) = self.encode(ctx, &padded)?;
        let latent = self.bottleneck(ctx, &latent)?;
        let y = self.decode(ctx, &latent, &skips)?;
        Ok(ctx.narrow(&y, 2, 0, len)?)
    }

    fn write_meta(&self, ck: &mut Checkpoint) {
        self.config.write_meta(ck);
        ck.set_meta("init_seed", self.seed);
    }
}
