use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    read_checkpoint_bytes, write_checkpoint_bytes, Activation, Bound, ParamId, ParamKind, ParamStore, Tape, Tensor, Var,
};
use crate::data::MotionSequence;
use crate::error::{Error, Result};
use crate::rvq::grid::TokenGrid;
use crate::rvq::quantize::RvqStack;
use crate::scalar::Scalar;

/// Architecture of the convolutional motion tokenizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TokenizerConfig {
    pub frame_dim: usize,
    pub levels: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    /// Stride-2 stages; the temporal ratio is `2^downsample_layers`.
    pub downsample_layers: usize,
    /// Kernel of the first and last convolution of each side.
    pub edge_kernel: usize,
    pub activation: Activation,
    /// Commitment weight.
    pub beta: f64,
    pub ema_decay: f64,
    /// Codes whose usage average falls below this are re-seeded.
    pub dead_code_threshold: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TokenizerConfig {
    pub fn desk() -> Self {
        Self {
            frame_dim: crate::data::FRAME_DIM,
            levels: 4,
            codebook_size: 32,
            latent_dim: 16,
            hidden: 32,
            downsample_layers: 2,
            edge_kernel: 3,
            activation: Activation::Relu,
            beta: 0.02,
            ema_decay: 0.99,
            dead_code_threshold: 1.0,
        }
    }

    /// Six levels of 512 codes over 263-wide frames.
    pub fn paper() -> Self {
        Self {
            frame_dim: 263,
            levels: 6,
            codebook_size: 512,
            latent_dim: 512,
            hidden: 512,
            ..Self::desk()
        }
    }

    pub fn ratio(&self) -> usize {
        1 << self.downsample_layers
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_dim == 0 || self.latent_dim == 0 || self.hidden == 0 {
            return Err(Error::Config("tokenizer widths must be positive".into()));
        }
        if self.levels == 0 || self.codebook_size == 0 {
            return Err(Error::Config("need at least one level and one code".into()));
        }
        if self.codebook_size >= u16::MAX as usize {
            return Err(Error::Config(format!("codebook size {} leaves no room for the pad id", self.codebook_size)));
        }
        if self.edge_kernel % 2 == 0 {
            return Err(Error::Config("edge kernel must be odd to preserve length".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) || self.beta < 0.0 {
            return Err(Error::Config("ema decay must lie in [0, 1) and beta be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    enc_in: Conv,
    enc_down: Vec<Conv>,
    enc_out: Conv,
    dec_in: Conv,
    dec_up: Vec<Conv>,
    dec_out: Conv,
}

/// Encoder, decoder and residual quantizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizerModel<S: Scalar> {
    config: TokenizerConfig,
    params: ParamStore<S>,
    layers: Layers,
    pub rvq: RvqStack<S>,
    frozen: bool,
}

/// Differentiable pieces of the tokenizer objective for one sequence.
pub struct LossTerms<S> {
    pub total: Var,
    pub reconstruction: Var,
    pub commitment: Var,
    /// Encoder output `Z`, `[T × d]`.
    pub latents: Tensor<S>,
    pub grid: TokenGrid,
}

fn add_conv<S: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<S>,
    name: &str,
    shape: [usize; 3],
    out_ch: usize,
    fan_in: usize,
    rng: &mut R,
) -> Conv {
    let std = (2.0 / fan_in as f64).sqrt();
    Conv {
        w: store.add(format!("{name}.w"), ParamKind::Weight, Tensor::randn(&shape, std, rng)),
        b: store.add(format!("{name}.b"), ParamKind::Bias, Tensor::zeros(&[out_ch])),
    }
}

impl<S: Scalar> TokenizerModel<S> {
    pub fn new<R: Rng + ?Sized>(config: TokenizerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (f, h, d, ek) = (config.frame_dim, config.hidden, config.latent_dim, config.edge_kernel);
        let mut p = ParamStore::new();
        let enc_in = add_conv(&mut p, "enc.in", [h, f, ek], h, f * ek, rng);
        let enc_down = (0..config.downsample_layers)
            .map(|i| add_conv(&mut p, &format!("enc.down{i}"), [h, h, 4], h, h * 4, rng))
            .collect();
        let enc_out = add_conv(&mut p, "enc.out", [d, h, ek], d, h * ek, rng);
        let dec_in = add_conv(&mut p, "dec.in", [h, d, ek], h, d * ek, rng);
        let dec_up = (0..config.downsample_layers)
            .map(|i| add_conv(&mut p, &format!("dec.up{i}"), [h, h, 4], h, h * 2, rng))
            .collect();
        let dec_out = add_conv(&mut p, "dec.out", [f, h, ek], f, h * ek, rng);
        let tables = (0..config.levels)
            .map(|_| Tensor::randn(&[config.codebook_size, d], 0.1, rng))
            .collect();
        Ok(Self {
            rvq: RvqStack::new(tables)?,
            config,
            params: p,
            layers: Layers {
                enc_in,
                enc_down,
                enc_out,
                dec_in,
                dec_up,
                dec_out,
            },
            frozen: false,
        })
    }

    pub fn config(&self) -> &TokenizerConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Latent steps produced for `frames` input frames.
    pub fn latent_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.config.ratio())
    }

    fn conv(&self, tape: &mut Tape<S>, b: &Bound, c: &Conv, x: Var, stride: usize, pad: usize) -> Result<Var> {
        tape.conv1d(x, b[c.w], b[c.b], stride, pad)
    }

    pub fn encoder_forward(&self, tape: &mut Tape<S>, b: &Bound, x: Var) -> Result<Var> {
        let (act, pad) = (self.config.activation, self.config.edge_kernel / 2);
        let mut h = self.conv(tape, b, &self.layers.enc_in, x, 1, pad)?;
        h = tape.activation(h, act)?;
        for c in &self.layers.enc_down {
            h = self.conv(tape, b, c, h, 2, 1)?;
            h = tape.activation(h, act)?;
        }
        self.conv(tape, b, &self.layers.enc_out, h, 1, pad)
    }

    pub fn decoder_forward(&self, tape: &mut Tape<S>, b: &Bound, z: Var) -> Result<Var> {
        let (act, pad) = (self.config.activation, self.config.edge_kernel / 2);
        let mut h = self.conv(tape, b, &self.layers.dec_in, z, 1, pad)?;
        h = tape.activation(h, act)?;
        for c in &self.layers.dec_up {
            h = tape.conv_transpose1d(h, b[c.w], b[c.b], 2, 1)?;
            h = tape.activation(h, act)?;
        }
        self.conv(tape, b, &self.layers.dec_out, h, 1, pad)
    }

    /// Frames as a tensor, right-padded with copies of the last frame up to a
    /// multiple of the temporal ratio.
    pub fn padded_frames(&self, seq: &MotionSequence) -> Result<Tensor<S>> {
        if seq.dim() != self.config.frame_dim {
            return Err(Error::shape(
                "tokenizer",
                format!("frames of width {} for a tokenizer of width {}", seq.dim(), self.config.frame_dim),
            ));
        }
        let padded = self.latent_len(seq.len()) * self.config.ratio();
        let mut v: Vec<f64> = seq.values().to_vec();
        let last = seq.frame(seq.len() - 1).to_vec();
        for _ in seq.len()..padded {
            v.extend_from_slice(&last);
        }
        Tensor::from_f64(&[padded, seq.dim()], &v)
    }

    /// `Z = E(X)`, `[⌈T_o / ratio⌉ × d]`.
    pub fn encode(&self, seq: &MotionSequence) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false)?;
        let x = tape.constant(self.padded_frames(seq)?)?;
        let z = self.encoder_forward(&mut tape, &b, x)?;
        Ok(tape.value(z).clone())
    }

    /// `X̂ = D(Ẑ)` trimmed to `frames`.
    pub fn decode(&self, latents: &Tensor<S>, frames: usize, frame_rate: f64) -> Result<MotionSequence> {
        if latents.shape().len() != 2 || latents.cols() != self.config.latent_dim {
            return Err(Error::shape("decode", format!("latents {:?}", latents.shape())));
        }
        if frames > latents.rows() * self.config.ratio() {
            return Err(Error::Range(format!("{frames} frames from {} latent steps", latents.rows())));
        }
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false)?;
        let z = tape.constant(latents.clone())?;
        let y = self.decoder_forward(&mut tape, &b, z)?;
        let f = self.config.frame_dim;
        let v = tape.value(y).to_f64()[..frames * f].to_vec();
        MotionSequence::new(frames, f, v, frame_rate)
    }

    pub fn tokenize(&self, seq: &MotionSequence) -> Result<TokenGrid> {
        Ok(self.rvq.quantize_sequence(&self.encode(seq)?)?.0)
    }

    pub fn detokenize(&self, grid: &TokenGrid, frames: usize, frame_rate: f64) -> Result<MotionSequence> {
        let z = self.rvq.dequantize(grid)?;
        self.decode(&z, frames, frame_rate)
    }

    /// Quantized round trip through the first `levels` streams.
    pub fn reconstruct(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        let grid = self.tokenize(seq)?;
        self.detokenize(&grid, seq.len(), seq.frame_rate())
    }

    /// Builds `mean|X − X̂| + β Σ_l mean((R^l − sg(R̂^l))²)` on `tape`.
    ///
    /// `codebooks` holds one tape variable per level with the current
    /// embeddings. Selected embeddings pass through a stop-gradient, so no
    /// gradient ever reaches them; the decoder sees `Z + sg(Ẑ − Z)`.
    pub fn loss_on_tape(
        &self,
        tape: &mut Tape<S>,
        b: &Bound,
        codebooks: &[Var],
        seq: &MotionSequence,
    ) -> Result<LossTerms<S>> {
        if codebooks.len() != self.config.levels {
            return Err(Error::shape("tokenizer loss", "one codebook variable per level"));
        }
        let frames = self.padded_frames(seq)?;
        let x = tape.constant(frames)?;
        let z = self.encoder_forward(tape, b, x)?;
        let latents = tape.value(z).clone();
        let (grid, _) = self.rvq.quantize_sequence(&latents)?;
        let mut commitment: Option<Var> = None;
        let mut explained: Option<Var> = None;
        for (l, &cb) in codebooks.iter().enumerate() {
            let codes: Vec<usize> = grid.stream(l).iter().map(|&c| c as usize).collect();
            let picked = tape.embedding(cb, &codes)?;
            let picked = tape.stop_gradient(picked);
            explained = Some(match explained {
                None => picked,
                Some(e) => tape.add(e, picked)?,
            });
            // R^l − sg(R̂^l) = Z − sg(R̂^1 + … + R̂^l)
            let gap = tape.sub(z, explained.expect("set above"))?;
            let sq = tape.square(gap)?;
            let term = tape.mean(sq)?;
            commitment = Some(match commitment {
                None => term,
                Some(c) => tape.add(c, term)?,
            });
        }
        let quantized = explained.expect("at least one level");
        let shift = tape.sub(quantized, z)?;
        let shift = tape.stop_gradient(shift);
        let zq = tape.add(z, shift)?;
        let y = self.decoder_forward(tape, b, zq)?;
        let target = tape.constant(self.padded_frames(seq)?)?;
        let diff = tape.sub(y, target)?;
        let abs = tape.abs(diff)?;
        let reconstruction = tape.mean(abs)?;
        let commitment = commitment.expect("at least one level");
        let weighted = tape.scale(commitment, S::lit(self.config.beta))?;
        let total = tape.add(reconstruction, weighted)?;
        Ok(LossTerms {
            total,
            reconstruction,
            commitment,
            latents,
            grid,
        })
    }

    /// Places each codebook on `tape`, trainable or not.
    pub fn bind_codebooks(&self, tape: &mut Tape<S>, trainable: bool) -> Result<Vec<Var>> {
        self.rvq
            .codebooks()
            .iter()
            .map(|cb| {
                if trainable {
                    tape.param(cb.embeddings.clone())
                } else {
                    tape.constant(cb.embeddings.clone())
                }
            })
            .collect()
    }

    /// Scalar objective value for one sequence.
    pub fn loss(&self, seq: &MotionSequence) -> Result<f64> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false)?;
        let cbs = self.bind_codebooks(&mut tape, false)?;
        let t = self.loss_on_tape(&mut tape, &b, &cbs, seq)?;
        Ok(tape.value(t.total).data()[0].as_f64())
    }

    /// Everything needed to rebuild the model: convolution weights, then
    /// codebooks and their usage averages.
    pub fn to_store(&self) -> ParamStore<S> {
        let mut store = self.params.clone();
        for cb in self.rvq.codebooks() {
            store.add(format!("rvq.level{}", cb.level), ParamKind::Embedding, cb.embeddings.clone());
            let usage = cb.usage.iter().map(|&u| S::lit(u)).collect();
            store.add(
                format!("rvq.level{}.usage", cb.level),
                ParamKind::Norm,
                Tensor::from_vec(&[cb.usage.len()], usage).expect("non-empty usage"),
            );
        }
        store
    }

    pub fn content_hash(&self) -> String {
        self.to_store().content_hash()
    }

    /// Writes the checkpoint to `path` and the configuration to `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, write_checkpoint_bytes(&self.to_store()))?;
        let meta = SavedMeta {
            config: self.config.clone(),
            frozen: self.frozen,
        };
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: SavedMeta = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
        let store: ParamStore<S> = read_checkpoint_bytes(&std::fs::read(path)?)?;
        let mut model = Self::new(meta.config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.entry(id).name.clone();
            let src = store.find(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if store.get(src).shape() != model.params.get(id).shape() {
                return Err(Error::Format(format!("{name} has shape {:?}", store.get(src).shape())));
            }
            *model.params.get_mut(id) = store.get(src).clone();
        }
        for cb in model.rvq.codebooks_mut() {
            let name = format!("rvq.level{}", cb.level);
            let src = store.find(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks {name}")))?;
            if store.get(src).shape() != cb.embeddings.shape() {
                return Err(Error::Format(format!("{name} has shape {:?}", store.get(src).shape())));
            }
            cb.embeddings = store.get(src).clone();
            if let Some(u) = store.find(&format!("{name}.usage")) {
                cb.usage = store.get(u).to_f64();
            }
        }
        model.frozen = meta.frozen;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct SavedMeta {
    config: TokenizerConfig,
    frozen: bool,
}

fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}
