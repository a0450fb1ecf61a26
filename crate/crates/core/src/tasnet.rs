//! Mask-based time-domain separator: learned basis encoder, dilated temporal
//! convolution mask estimator and transposed-convolution decoder.

use finsep_numcore::layers::{Conv1d, ConvTranspose1d, LayerNorm, Prelu};
use finsep_numcore::{
    init_rng, Checkpoint, Compute, ConvOpts, Eager, NormKind, ParamStore, Tensor,
};

use crate::model::{ModelError, Result, Separator, N_SOURCES};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TasNetConfig {
    /// Encoder frame length `L` in samples; frames advance by `L / 2`.
    pub frame_len: usize,
    /// Basis size `M`.
    pub basis: usize,
    pub bottleneck: usize,
    pub hidden: usize,
    /// Depthwise kernel `P`.
    pub kernel: usize,
    /// Blocks per repeat `X`.
    pub blocks: usize,
    /// Repeats `R`.
    pub repeats: usize,
    pub n_sources: usize,
    pub norm: NormKind,
}

impl Default for TasNetConfig {
    fn default() -> Self {
        Self {
            frame_len: 40,
            basis: 128,
            bottleneck: 64,
            hidden: 128,
            kernel: 3,
            blocks: 6,
            repeats: 2,
            n_sources: N_SOURCES,
            norm: NormKind::Global,
        }
    }
}

pub fn norm_name(kind: NormKind) -> &'static str {
    match kind {
        NormKind::Global => "global",
        NormKind::Channel => "channel",
    }
}

pub fn parse_norm(s: &str) -> Result<NormKind> {
    match s {
        "global" => Ok(NormKind::Global),
        "channel" => Ok(NormKind::Channel),
        other => Err(ModelError::InvalidConfig(format!("unknown norm `{other}`"))),
    }
}

impl TasNetConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.frame_len,
            self.basis,
            self.bottleneck,
            self.hidden,
            self.kernel,
            self.blocks,
            self.repeats,
        ]
        .iter()
        .all(|&v| v > 0);
        let fail = |m: &str| Err(ModelError::InvalidConfig(format!("tasnet: {m}")));
        if !positive {
            return fail("all sizes must be positive");
        }
        if self.frame_len < 2 || !self.frame_len.is_multiple_of(2) {
            return fail("frame length must be even and at least 2");
        }
        if self.kernel.is_multiple_of(2) {
            return fail("depthwise kernel must be odd");
        }
        if self.n_sources != N_SOURCES {
            return fail("exactly two sources are supported");
        }
        if self.blocks > 30 {
            return fail("too many blocks per repeat");
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        self.frame_len / 2
    }

    /// Receptive field of the mask estimator in encoder frames.
    pub fn receptive_field(&self) -> usize {
        1 + self.repeats
            * (0..self.blocks)
                .map(|x| (self.kernel - 1) << x)
                .sum::<usize>()
    }

    /// Smallest length `>= len` that the encoder tiles exactly.
    pub fn valid_length(&self, len: usize) -> usize {
        let (l, s) = (self.frame_len, self.hop());
        let frames = if len <= l {
            1
        } else {
            (len - l).div_ceil(s) + 1
        };
        (frames - 1) * s + l
    }

    pub fn write_meta(&self, ck: &mut Checkpoint) {
        ck.set_meta("frame_len", self.frame_len);
        ck.set_meta("basis", self.basis);
        ck.set_meta("bottleneck", self.bottleneck);
        ck.set_meta("hidden", self.hidden);
        ck.set_meta("kernel", self.kernel);
        ck.set_meta("blocks", self.blocks);
        ck.set_meta("repeats", self.repeats);
        ck.set_meta("n_sources", self.n_sources);
        ck.set_meta("norm", norm_name(self.norm));
        ck.set_meta("mask", "sigmoid");
    }

    pub fn from_meta(ck: &Checkpoint) -> Result<Self> {
        let c = Self {
            frame_len: ck.meta_parsed("frame_len")?,
            basis: ck.meta_parsed("basis")?,
            bottleneck: ck.meta_parsed("bottleneck")?,
            hidden: ck.meta_parsed("hidden")?,
            kernel: ck.meta_parsed("kernel")?,
            blocks: ck.meta_parsed("blocks")?,
            repeats: ck.meta_parsed("repeats")?,
            n_sources: ck.meta_parsed("n_sources")?,
            norm: parse_norm(ck.meta("norm").unwrap_or("global"))?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
struct Block {
    input: Conv1d,
    prelu1: Prelu,
    norm1: LayerNorm,
    depthwise: Conv1d,
    prelu2: Prelu,
    norm2: LayerNorm,
    residual: Option<Conv1d>,
    skip: Conv1d,
}

#[derive(Clone, Debug)]
pub struct TasNet {
    config: TasNetConfig,
    seed: u64,
    store: ParamStore,
    encoder: Conv1d,
    in_norm: LayerNorm,
    bottleneck: Conv1d,
    blocks: Vec<Block>,
    out_prelu: Prelu,
    mask_conv: Conv1d,
    decoder: ConvTranspose1d,
}

impl TasNet {
    pub fn new(config: TasNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = config;
        let mut rng = init_rng(seed);
        let mut store = ParamStore::new();
        let s = &mut store;
        let pointwise = ConvOpts::default();
        let encoder = Conv1d::new(
            s,
            &mut rng,
            "encoder",
            1,
            c.basis,
            c.frame_len,
            ConvOpts::stride(c.hop()),
            false,
        );
        let in_norm = LayerNorm::new(s, "mask.norm", c.basis, c.norm);
        let bottleneck = Conv1d::new(
            s,
            &mut rng,
            "mask.bottleneck",
            c.basis,
            c.bottleneck,
            1,
            pointwise,
            true,
        );
        let total = c.repeats * c.blocks;
        let mut blocks = Vec::with_capacity(total);
        for r in 0..c.repeats {
            for x in 0..c.blocks {
                let name = format!("mask.r{r}.b{x}");
                let dilation = 1 << x;
                let last = blocks.len() + 1 == total;
                blocks.push(Block {
                    input: Conv1d::new(
                        s,
                        &mut rng,
                        &format!("{name}.in"),
                        c.bottleneck,
                        c.hidden,
                        1,
                        pointwise,
                        true,
                    ),
                    prelu1: Prelu::new(s, &format!("{name}.prelu1")),
                    norm1: LayerNorm::new(s, &format!("{name}.norm1"), c.hidden, c.norm),
                    depthwise: Conv1d::new(
                        s,
                        &mut rng,
                        &format!("{name}.dconv"),
                        c.hidden,
                        c.hidden,
                        c.kernel,
                        ConvOpts {
                            stride: 1,
                            dilation,
                            groups: c.hidden,
                            padding: (c.kernel - 1) * dilation / 2,
                        },
                        true,
                    ),
                    prelu2: Prelu::new(s, &format!("{name}.prelu2")),
                    norm2: LayerNorm::new(s, &format!("{name}.norm2"), c.hidden, c.norm),
                    residual: (!last).then(|| {
                        Conv1d::new(
                            s,
                            &mut rng,
                            &format!("{name}.res"),
                            c.hidden,
                            c.bottleneck,
                            1,
                            pointwise,
                            true,
                        )
                    }),
                    skip: Conv1d::new(
                        s,
                        &mut rng,
                        &format!("{name}.skip"),
                        c.hidden,
                        c.bottleneck,
                        1,
                        pointwise,
                        true,
                    ),
                });
            }
        }
        let out_prelu = Prelu::new(s, "mask.prelu");
        let mask_conv = Conv1d::new(
            s,
            &mut rng,
            "mask.out",
            c.bottleneck,
            c.n_sources * c.basis,
            1,
            pointwise,
            true,
        );
        let decoder = ConvTranspose1d::new(
            s,
            &mut rng,
            "decoder",
            c.basis,
            1,
            c.frame_len,
            c.hop(),
            false,
        );
        Ok(Self {
            config,
            seed,
            store,
            encoder,
            in_norm,
            bottleneck,
            blocks,
            out_prelu,
            mask_conv,
            decoder,
        })
    }

    pub fn config(&self) -> &TasNetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `ReLU(conv(x))`: `[B, 1, T] -> [B, M, N]`.
    pub fn encode<C: Compute>(&self, ctx: &mut C, x: &C::Value) -> Result<C::Value> {
        let z = self.encoder.forward(ctx, &self.store, x)?;
        Ok(ctx.relu(&z))
    }

    /// Pre-sigmoid mask logits: `[B, M, N] -> [B, n * M, N]`.
    pub fn mask_logits<C: Compute>(&self, ctx: &mut C, z: &C::Value) -> Result<C::Value> {
        let st = &self.store;
        let normed = self.in_norm.forward(ctx, st, z)?;
        let mut h = self.bottleneck.forward(ctx, st, &normed)?;
        let mut skips: Option<C::Value> = None;
        for b in &self.blocks {
            let mut y = b.input.forward(ctx, st, &h)?;
            y = b.prelu1.forward(ctx, st, &y)?;
            y = b.norm1.forward(ctx, st, &y)?;
            y = b.depthwise.forward(ctx, st, &y)?;
            y = b.prelu2.forward(ctx, st, &y)?;
            y = b.norm2.forward(ctx, st, &y)?;
            let sk = b.skip.forward(ctx, st, &y)?;
            skips = Some(match skips {
                Some(acc) => ctx.add(&acc, &sk)?,
                None => sk,
            });
            if let Some(res) = &b.residual {
                let r = res.forward(ctx, st, &y)?;
                h = ctx.add(&h, &r)?;
            }
        }
        let skips = skips.expect("at least one block");
        let y = self.out_prelu.forward(ctx, st, &skips)?;
        Ok(self.mask_conv.forward(ctx, st, &y)?)
    }

    /// Sigmoid masks `[B, n * M, N]`; source `s` occupies channels `s*M..(s+1)*M`.
    pub fn masks<C: Compute>(&self, ctx: &mut C, z: &C::Value) -> Result<C::Value> {
        let logits = self.mask_logits(ctx, z)?;
        Ok(ctx.sigmoid(&logits))
    }

    /// Transposed-convolution synthesis: `[B, M, N] -> [B, 1, (N-1)*L/2 + L]`.
    pub fn decode<C: Compute>(&self, ctx: &mut C, b: &C::Value) -> Result<C::Value> {
        Ok(self.decoder.forward(ctx, &self.store, b)?)
    }

    /// Encoder basis as an `L x M` matrix (row-major).
    pub fn encoder_basis(&self) -> Vec<f64> {
        let w = self.store.get(self.encoder.weight).data();
        let (l, m) = (self.config.frame_len, self.config.basis);
        (0..l * m).map(|i| w[(i % m) * l + i / m]).collect()
    }

    pub fn set_encoder_basis(&mut self, s: &[f64]) -> Result<()> {
        let (l, m) = (self.config.frame_len, self.config.basis);
        check_len("encoder basis", s.len(), l * m)?;
        let w = self.store.get_mut(self.encoder.weight).data_mut();
        for (i, v) in s.iter().enumerate() {
            w[(i % m) * l + i / m] = *v;
        }
        Ok(())
    }

    /// Decoder basis as an `M x L` matrix (row-major).
    pub fn decoder_basis(&self) -> Vec<f64> {
        self.store.get(self.decoder.weight).data().to_vec()
    }

    pub fn set_decoder_basis(&mut self, t: &[f64]) -> Result<()> {
        let (l, m) = (self.config.frame_len, self.config.basis);
        check_len("decoder basis", t.len(), m * l)?;
        self.store
            .get_mut(self.decoder.weight)
            .data_mut()
            .copy_from_slice(t);
        Ok(())
    }

    /// `z = ReLU(x S)` for one frame of `L` samples.
    pub fn encode_frame(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("frame", x.len(), self.config.frame_len)?;
        let z = self.encode(&mut Eager, &Tensor::from_signal(x))?;
        Ok(z.into_data())
    }

    /// Masks for a feature sequence `[N][M]`, returned as `[n][N][M]`.
    pub fn estimate_masks(&self, z: &[Vec<f64>]) -> Result<Vec<Vec<Vec<f64>>>> {
        let m = self.config.basis;
        if z.is_empty() {
            return Err(ModelError::InvalidConfig("empty feature sequence".into()));
        }
        if let Some(row) = z.iter().find(|r| r.len() != m) {
            check_len("feature row", row.len(), m)?;
        }
        let n = z.len();
        let data = (0..m * n).map(|i| z[i % n][i / n]).collect();
        let input = Tensor::new(vec![1, m, n], data)?;
        let masks = self.masks(&mut Eager, &input)?;
        let d = masks.data();
        Ok((0..self.config.n_sources)
            .map(|s| {
                (0..n)
                    .map(|t| (0..m).map(|k| d[(s * m + k) * n + t]).collect())
                    .collect()
            })
            .collect())
    }

    /// `x_hat = b T` for one feature vector of length `M`.
    pub fn decode_frame(&self, b: &[f64]) -> Result<Vec<f64>> {
        check_len("feature vector", b.len(), self.config.basis)?;
        let input = Tensor::new(vec![1, self.config.basis, 1], b.to_vec())?;
        Ok(self.decode(&mut Eager, &input)?.into_data())
    }
}

/// `b = z * m`, element-wise.
pub fn apply_mask(z: &[f64], m: &[f64]) -> Result<Vec<f64>> {
    check_len("mask", m.len(), z.len())?;
    Ok(z.iter().zip(m).map(|(a, b)| a * b).collect())
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(ModelError::InvalidConfig(format!(
            "{what}: length {got}, expected {want}"
        )))
    }
}

impl Separator for TasNet {
    const ARCH: &'static str = "tasnet";

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn separate_batch<C: Compute>(&self, ctx: &mut C, x: &C::Value) -> Result<C::Value> {
        let (batch, _, len) = ctx.tensor(x).dims3("tasnet")?;
        let padded_len = self.config.valid_length(len);
        let padded = if padded_len > len {
            let zeros = ctx.input(Tensor::zeros(&[batch, 1, padded_len - len]));
            ctx.concat(&[x.clone(), zeros], 2)?
        } else {
            x.clone()
        };
        let z = self.encode(ctx, &padded)?;
        let masks = self.masks(ctx, &z)?;
        let m = self.config.basis;
        let mut outs = Vec::with_capacity(self.config.n_sources);
        for s in 0..self.config.n_sources {
            let mask = ctx.narrow(&masks, 1, s * m, m)?;
            let b = ctx.mul(&z, &mask)?;
            outs.push(self.decode(ctx, &b)?);
        }
        let y = ctx.concat(&outs, 1)?;
        Ok(ctx.narrow(&y, 2, 0, len)?)
    }

    fn write_meta(&self, ck: &mut Checkpoint) {
        self.config.write_meta(ck);
        ck.set_meta("init_seed", self.seed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(frame_len: usize, basis: usize) -> TasNetConfig {
        TasNetConfig {
            frame_len,
            basis,
            bottleneck: 4,
            hidden: 6,
            kernel: 3,
            blocks: 2,
            repeats: 1,
            ..TasNetConfig::default()
        }
    }

    fn noise(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn desk_defaults() {
        let c = TasNetConfig::default();
        assert_eq!(
            (
                c.frame_len,
                c.basis,
                c.bottleneck,
                c.hidden,
                c.kernel,
                c.blocks,
                c.repeats
            ),
            (40, 128, 64, 128, 3, 6, 2)
        );
        assert_eq!(c.receptive_field(), 1 + 2 * 2 * 63);
    }

    #[test]
    fn config_validation() {
        assert!(TasNet::new(
            TasNetConfig {
                frame_len: 3,
                ..small(4, 4)
            },
            0
        )
        .is_err());
        assert!(TasNet::new(
            TasNetConfig {
                kernel: 4,
                ..small(4, 4)
            },
            0
        )
        .is_err());
        assert!(TasNet::new(
            TasNetConfig {
                n_sources: 3,
                ..small(4, 4)
            },
            0
        )
        .is_err());
        assert!(TasNet::new(
            TasNetConfig {
                hidden: 0,
                ..small(4, 4)
            },
            0
        )
        .is_err());
    }

    #[test]
    fn valid_length_tiles_frames() {
        let c = small(40, 8);
        assert_eq!(c.valid_length(1), 40);
        assert_eq!(c.valid_length(40), 40);
        assert_eq!(c.valid_length(41), 60);
        assert_eq!(c.valid_length(44_160), 44_160);
    }

    #[test]
    fn encode_worked_example() {
        let mut m = TasNet::new(small(2, 2), 0).unwrap();
        m.set_encoder_basis(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!(m.encoder_basis(), vec![1.0, -1.0, 1.0, -1.0]);
        assert_eq!(m.encode_frame(&[1.0, 1.0]).unwrap(), vec![2.0, 0.0]);
        assert_eq!(m.encode_frame(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        assert!(m.encode_frame(&[1.0]).is_err());
    }

    #[test]
    fn decode_worked_examples() {
        let mut m = TasNet::new(small(2, 2), 0).unwrap();
        m.set_decoder_basis(&[1.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(m.decode_frame(&[1.0, 2.0]).unwrap(), vec![1.0, 4.0]);
        assert_eq!(m.decode_frame(&[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
        let mut sq = TasNet::new(small(4, 4), 0).unwrap();
        let eye: Vec<f64> = (0..16)
            .map(|i| if i % 5 == 0 { 1.0 } else { 0.0 })
            .collect();
        sq.set_decoder_basis(&eye).unwrap();
        assert_eq!(
            sq.decode_frame(&[0.5, -1.0, 2.0, 3.0]).unwrap(),
            vec![0.5, -1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn encoder_output_is_non_negative() {
        let m = TasNet::new(small(8, 16), 3).unwrap();
        for seed in 0..20 {
            assert!(m
                .encode_frame(&noise(8, seed))
                .unwrap()
                .iter()
                .all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn apply_mask_examples() {
        assert_eq!(
            apply_mask(&[2.0, 4.0], &[0.5, 0.25]).unwrap(),
            vec![1.0, 1.0]
        );
        assert_eq!(
            apply_mask(&[2.0, 4.0], &[1.0, 1.0]).unwrap(),
            vec![2.0, 4.0]
        );
        assert_eq!(
            apply_mask(&[2.0, 4.0], &[0.0, 0.0]).unwrap(),
            vec![0.0, 0.0]
        );
        assert!(apply_mask(&[2.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn zeroed_mask_network_gives_half() {
        let mut m = TasNet::new(small(4, 16), 0).unwrap();
        let ids: Vec<_> = m
            .store
            .ids()
            .zip(m.store.iter())
            .filter(|(_, (n, _))| n.starts_with("mask."))
            .map(|(id, _)| id)
            .collect();
        for id in ids {
            m.store.get_mut(id).data_mut().fill(0.0);
        }
        let z: Vec<Vec<f64>> = (0..3)
            .map(|t| noise(16, t).iter().map(|v| v.abs()).collect())
            .collect();
        let masks = m.estimate_masks(&z).unwrap();
        assert_eq!((masks.len(), masks[0].len(), masks[0][0].len()), (2, 3, 16));
        assert!(masks.iter().flatten().flatten().all(|&v| v == 0.5));
    }

    #[test]
    fn estimate_masks_rejects_bad_shapes() {
        let m = TasNet::new(small(4, 16), 0).unwrap();
        assert!(m.estimate_masks(&[]).is_err());
        assert!(m.estimate_masks(&[vec![0.0; 15]]).is_err());
    }

    #[test]
    fn receptive_field_matches_measured_influence() {
        let config = TasNetConfig {
            frame_len: 4,
            basis: 8,
            bottleneck: 4,
            hidden: 8,
            kernel: 3,
            blocks: 3,
            repeats: 2,
            norm: NormKind::Channel,
            ..TasNetConfig::default()
        };
        let m = TasNet::new(config, 5).unwrap();
        let rf = config.receptive_field();
        assert_eq!(rf, 29);
        let half = (rf - 1) / 2;
        let x = noise(400, 1);
        let logits = |x: &[f64]| {
            let z = m.encode(&mut Eager, &Tensor::from_signal(x)).unwrap();
            m.mask_logits(&mut Eager, &z).unwrap()
        };
        let base = logits(&x);
        let (_, ch, frames) = base.dims3("test").unwrap();
        for p in [201usize, 150, 246] {
            let mut y = x.clone();
            y[p] += 0.5;
            let pert = logits(&y);
            // Encoder frames j with 2j <= p < 2j + 4.
            let (lo_frame, hi_frame) = ((p / 2).saturating_sub(1), p / 2);
            let (lo, hi) = (lo_frame - half, hi_frame + half);
            let delta = |t: usize| {
                (0..ch)
                    .map(|c| (pert.row(0, c)[t] - base.row(0, c)[t]).abs())
                    .fold(0.0, f64::max)
            };
            for t in 0..frames {
                if t < lo || t > hi {
                    assert_eq!(delta(t), 0.0, "frame {t} outside [{lo}, {hi}] changed");
                }
            }
            assert!(delta(lo) > 0.0 || delta(hi) > 0.0, "span edges untouched");
        }
    }

    proptest! {
        #[test]
        fn masks_lie_strictly_inside_unit_interval(seed in any::<u64>(), n in 1usize..12) {
            let m = TasNet::new(small(4, 8), seed).unwrap();
            let z: Vec<Vec<f64>> = (0..n).map(|t| noise(8, seed ^ t as u64).iter().map(|v| 3.0 * v.abs()).collect()).collect();
            for v in m.estimate_masks(&z).unwrap().iter().flatten().flatten() {
                prop_assert!(*v > 0.0 && *v < 1.0);
            }
        }

        #[test]
        fn decode_is_linear(seed in any::<u64>(), a in -3.0f64..3.0) {
            let m = TasNet::new(small(6, 5), seed).unwrap();
            let (b1, b2) = (noise(5, seed), noise(5, seed.wrapping_add(1)));
            let combo: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| a * x + y).collect();
            let (d1, d2, dc) = (m.decode_frame(&b1).unwrap(), m.decode_frame(&b2).unwrap(), m.decode_frame(&combo).unwrap());
            for i in 0..6 {
                prop_assert!((dc[i] - (a * d1[i] + d2[i])).abs() < 1e-9);
            }
        }
    }
}
