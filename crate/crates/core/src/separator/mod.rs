//! Encoder, dual-path masking network and decoder.
//!
//! Internally every activation keeps channels on the last axis: the encoder
//! output `[F, T']` is transposed to `[T', F]`, chunked to `[Nc, C, F]`, and
//! the intra and inter stacks see it as a batch of sequences along `C` and
//! `Nc` respectively.

mod checkpoint;

use rand::SeedableRng;

use crate::config::parse_value;
use crate::error::{Error, Result};
use crate::init::{filled, linear_weight, xavier, InitRng, LN_EPS};
use crate::params::{push_params, Parameterized};
use crate::tensor::{no_grad, Tensor};
use crate::transformer::TransformerStack;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub filters: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub chunk_size: usize,
    pub num_blocks: usize,
    pub intra_layers: usize,
    pub inter_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub num_speakers: usize,
    pub sample_rate: u32,
    pub positional_encoding: bool,
}

impl ModelConfig {
    /// Full-size two-speaker model.
    pub fn full_size() -> ModelConfig {
        ModelConfig {
            filters: 256,
            kernel_size: 16,
            stride: 8,
            chunk_size: 250,
            num_blocks: 2,
            intra_layers: 8,
            inter_layers: 8,
            heads: 8,
            d_ff: 1024,
            num_speakers: 2,
            sample_rate: 8000,
            positional_encoding: true,
        }
    }

    /// Smallest useful shape; used for gradient checks.
    pub fn tiny() -> ModelConfig {
        ModelConfig {
            filters: 8,
            chunk_size: 4,
            num_blocks: 1,
            intra_layers: 1,
            inter_layers: 1,
            heads: 2,
            d_ff: 16,
            ..ModelConfig::full_size()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("filters", self.filters),
            ("kernel_size", self.kernel_size),
            ("stride", self.stride),
            ("chunk_size", self.chunk_size),
            ("num_blocks", self.num_blocks),
            ("intra_layers", self.intra_layers),
            ("inter_layers", self.inter_layers),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("sample_rate", self.sample_rate as usize),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if !self.filters.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "filters ({}) must be divisible by heads ({})",
                self.filters, self.heads
            )));
        }
        if !self.chunk_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "chunk_size must be even, got {}",
                self.chunk_size
            )));
        }
        if self.num_speakers < 2 {
            return Err(Error::config(format!(
                "num_speakers must be at least 2, got {}",
                self.num_speakers
            )));
        }
        if self.positional_encoding && !self.filters.is_multiple_of(2) {
            return Err(Error::config(
                "positional encoding needs an even number of filters",
            ));
        }
        Ok(())
    }

    pub fn hop(&self) -> usize {
        self.chunk_size / 2
    }

    /// Encoder frames for `samples` input samples.
    pub fn encoded_len(&self, samples: usize) -> Result<usize> {
        if samples < self.kernel_size {
            return Err(Error::InputTooShort {
                len: samples,
                min: self.kernel_size,
            });
        }
        Ok((samples - self.kernel_size) / self.stride + 1)
    }

    /// Sets one field by name. Returns `false` for keys this type does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "filters" => self.filters = parse_value(key, value)?,
            "kernel_size" => self.kernel_size = parse_value(key, value)?,
            "stride" => self.stride = parse_value(key, value)?,
            "chunk_size" => self.chunk_size = parse_value(key, value)?,
            "num_blocks" => self.num_blocks = parse_value(key, value)?,
            "intra_layers" => self.intra_layers = parse_value(key, value)?,
            "inter_layers" => self.inter_layers = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "num_speakers" => self.num_speakers = parse_value(key, value)?,
            "sample_rate" => self.sample_rate = parse_value(key, value)?,
            "positional_encoding" => self.positional_encoding = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// `key = value` lines accepted back by [`ModelConfig::set`].
    pub fn to_text(&self) -> String {
        format!(
            "filters = {}\nkernel_size = {}\nstride = {}\nchunk_size = {}\nnum_blocks = {}\n\
             intra_layers = {}\ninter_layers = {}\nheads = {}\nd_ff = {}\nnum_speakers = {}\n\
             sample_rate = {}\npositional_encoding = {}\n",
            self.filters,
            self.kernel_size,
            self.stride,
            self.chunk_size,
            self.num_blocks,
            self.intra_layers,
            self.inter_layers,
            self.heads,
            self.d_ff,
            self.num_speakers,
            self.sample_rate,
            self.positional_encoding,
        )
    }

    /// Multiply-adds (counted as two operations each) of one forward pass
    /// over `samples` input samples. Elementwise work is counted once per value.
    pub fn forward_flops(&self, samples: usize) -> Result<u64> {
        let (f, k, ns) = (
            self.filters as u64,
            self.kernel_size as u64,
            self.num_speakers as u64,
        );
        let t = self.encoded_len(samples)? as u64;
        let c = self.chunk_size as u64;
        let nc = chunk_count(t as usize, self.chunk_size) as u64;
        let layer = |batch: u64, len: u64| {
            let d = f;
            let rows = batch * len;
            2 * rows * 4 * d * d
                + 2 * 2 * batch * len * len * d
                + 2 * 2 * rows * d * self.d_ff as u64
                + 12 * rows * d
        };
        let per_block = self.intra_layers as u64 * layer(nc, c)
            + self.inter_layers as u64 * layer(c, nc)
            + 2 * nc * c * f;
        Ok(2 * f * k * t
            + 6 * f * t
            + 2 * f * f * t
            + self.num_blocks as u64 * per_block
            + 2 * nc * c * f * f * ns
            + nc * c * f * ns
            + 2 * 2 * ns * t * f * f
            + ns * t * f
            + 2 * ns * f * k * t)
    }
}

/// Number of half-overlapping chunks for `len` frames:
/// the padded length is `hop·ceil(len/hop) + hop`.
pub fn chunk_count(len: usize, chunk: usize) -> usize {
    let hop = chunk / 2;
    len.div_ceil(hop)
}

/// Chunked view `[F, C, Nc]` with what is needed to undo it.
#[derive(Debug, Clone)]
pub struct ChunkedRepresentation {
    pub data: Tensor,
    /// Frames before padding.
    pub len: usize,
    /// Zero frames appended on the right.
    pub pad: usize,
}

/// Splits `h: [F, T']` into chunks of `c` frames with 50% overlap.
pub fn chunk(h: &Tensor, c: usize) -> Result<ChunkedRepresentation> {
    if h.shape().len() != 2 || c < 2 || !c.is_multiple_of(2) {
        return Err(Error::config(format!(
            "cannot chunk {:?} with chunk size {c}",
            h.shape()
        )));
    }
    let len = h.shape()[1];
    let hop = c / 2;
    let count = chunk_count(len, c);
    let data = h.transpose()?.frames(c, hop, count)?.permute(&[2, 1, 0])?;
    Ok(ChunkedRepresentation {
        data,
        len,
        pad: hop * (count + 1) - len,
    })
}

/// Inverse of [`chunk`]: coverage-normalized overlap-add back to `[F, T']`.
pub fn overlap_add(chunked: &ChunkedRepresentation) -> Result<Tensor> {
    let &[_, c, count] = chunked.data.shape() else {
        return Err(Error::Internal(format!(
            "chunked tensor has shape {:?}",
            chunked.data.shape()
        )));
    };
    let hop = c / 2;
    if c % 2 != 0
        || hop * (count + 1) != chunked.len + chunked.pad
        || chunk_count(chunked.len, c) != count
    {
        return Err(Error::Internal(format!(
            "chunk metadata (len {}, pad {}) does not match shape {:?}",
            chunked.len,
            chunked.pad,
            chunked.data.shape()
        )));
    }
    chunked
        .data
        .permute(&[2, 1, 0])?
        .overlap_add(hop, chunked.len)?
        .transpose()
}

/// One repeat of the dual-path block: intra-chunk then inter-chunk stack.
#[derive(Debug, Clone)]
pub struct DualPathBlock {
    pub intra: TransformerStack,
    pub inter: TransformerStack,
}

impl DualPathBlock {
    /// `[Nc, C, F]` to `[Nc, C, F]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let intra = self.intra.forward(x)?;
        let inter = self.inter.forward(&intra.permute(&[1, 0, 2])?)?;
        inter.permute(&[1, 0, 2])
    }
}

impl Parameterized for DualPathBlock {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.intra.parameters() {
            out.push((format!("intra.{n}"), t));
        }
        for (n, t) in self.inter.parameters() {
            out.push((format!("inter.{n}"), t));
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (n, t) in self.intra.parameters_mut() {
            out.push((format!("intra.{n}"), t));
        }
        for (n, t) in self.inter.parameters_mut() {
            out.push((format!("inter.{n}"), t));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SepFormer {
    config: ModelConfig,
    pub encoder_weight: Tensor,
    pub encoder_bias: Tensor,
    pub norm_gain: Tensor,
    pub norm_bias: Tensor,
    pub input_weight: Tensor,
    pub input_bias: Tensor,
    pub blocks: Vec<DualPathBlock>,
    pub prelu_alpha: Tensor,
    pub split_weight: Tensor,
    pub split_bias: Tensor,
    pub mask1_weight: Tensor,
    pub mask1_bias: Tensor,
    pub mask2_weight: Tensor,
    pub mask2_bias: Tensor,
    pub decoder_weight: Tensor,
}

impl SepFormer {
    /// Fresh model; weights are Glorot-uniform from a generator seeded with `seed`,
    /// biases zero, norm gains one, PReLU slopes 0.25.
    pub fn new(config: ModelConfig, seed: u64) -> Result<SepFormer> {
        config.validate()?;
        let mut rng = InitRng::seed_from_u64(seed);
        let (f, k, ns) = (config.filters, config.kernel_size, config.num_speakers);
        let encoder_weight = xavier(&mut rng, &[f, 1, k], k, f * k)?;
        let input_weight = linear_weight(&mut rng, f, f)?;
        let blocks = (0..config.num_blocks)
            .map(|_| {
                let stack = |layers, rng: &mut InitRng| {
                    TransformerStack::new(
                        layers,
                        f,
                        config.heads,
                        config.d_ff,
                        config.positional_encoding,
                        rng,
                    )
                };
                Ok(DualPathBlock {
                    intra: stack(config.intra_layers, &mut rng)?,
                    inter: stack(config.inter_layers, &mut rng)?,
                })
            })
            .collect::<Result<_>>()?;
        let split_weight = linear_weight(&mut rng, f, f * ns)?;
        let mask1_weight = linear_weight(&mut rng, f, f)?;
        let mask2_weight = linear_weight(&mut rng, f, f)?;
        let decoder_weight = xavier(&mut rng, &[f, 1, k], f * k, k)?;
        Ok(SepFormer {
            encoder_weight,
            encoder_bias: filled(&[f], 0.0)?,
            norm_gain: filled(&[f], 1.0)?,
            norm_bias: filled(&[f], 0.0)?,
            input_weight,
            input_bias: filled(&[f], 0.0)?,
            blocks,
            prelu_alpha: filled(&[f], 0.25)?,
            split_weight,
            split_bias: filled(&[f * ns], 0.0)?,
            mask1_weight,
            mask1_bias: filled(&[f], 0.0)?,
            mask2_weight,
            mask2_bias: filled(&[f], 0.0)?,
            decoder_weight,
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// `x: [T]` to `h = ReLU(conv1d(x)): [F, T']`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let &[t] = x.shape() else {
            return Err(Error::config(format!(
                "expected a mono signal [T], got {:?}",
                x.shape()
            )));
        };
        Ok(x.reshape(&[1, t])?
            .conv1d(&self.encoder_weight, &self.encoder_bias, self.config.stride)?
            .relu())
    }

    /// `[T', F]` to `[Nc, C, F]`, through every dual-path block.
    fn dual_path(&self, z: &Tensor) -> Result<Tensor> {
        let c = self.config.chunk_size;
        let mut x = z.frames(c, c / 2, chunk_count(z.shape()[0], c))?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        Ok(x)
    }

    /// Masks `[Ns, F, T']` for the encoded mixture `h: [F, T']`.
    pub fn masking_forward(&self, h: &Tensor) -> Result<Tensor> {
        let &[f, t] = h.shape() else {
            return Err(Error::config(format!(
                "expected [F, T'], got {:?}",
                h.shape()
            )));
        };
        if f != self.config.filters {
            return Err(Error::config(format!(
                "expected {} filters, got {f}",
                self.config.filters
            )));
        }
        let ns = self.config.num_speakers;
        let z = h
            .transpose()?
            .layer_norm(&self.norm_gain, &self.norm_bias, LN_EPS)?
            .linear(&self.input_weight, Some(&self.input_bias))?;
        let chunks = self
            .dual_path(&z)?
            .prelu(&self.prelu_alpha)?
            .linear(&self.split_weight, Some(&self.split_bias))?;
        let maps = chunks
            .overlap_add(self.config.hop(), t)?
            .reshape(&[t, ns, f])?
            .permute(&[1, 0, 2])?;
        maps.linear(&self.mask1_weight, Some(&self.mask1_bias))?
            .linear(&self.mask2_weight, Some(&self.mask2_bias))?
            .relu()
            .permute(&[0, 2, 1])
    }

    /// Transposed convolution of `mask ⊙ h`, trimmed or zero-padded to `len` samples.
    pub fn decode(&self, mask: &Tensor, h: &Tensor, len: usize) -> Result<Tensor> {
        if mask.shape() != h.shape() {
            return Err(Error::config(format!(
                "mask shape {:?} does not match encoding {:?}",
                mask.shape(),
                h.shape()
            )));
        }
        let raw = mask
            .mul(h)?
            .conv_transpose1d(&self.decoder_weight, self.config.stride)?;
        let raw_len = raw.shape()[1];
        let raw = raw.reshape(&[raw_len])?;
        if raw_len >= len {
            raw.slice(0, 0, len)
        } else {
            Tensor::concat(&[raw, Tensor::zeros(&[len - raw_len])?], 0)
        }
    }

    /// `x: [T]` to estimated sources `[Ns, T]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.encode(x)?;
        let masks = self.masking_forward(&h)?;
        let (f, t) = (h.shape()[0], h.shape()[1]);
        let len = x.numel();
        let sources = (0..self.config.num_speakers)
            .map(|k| {
                let mask = masks.slice(0, k, 1)?.reshape(&[f, t])?;
                self.decode(&mask, &h, len)?.reshape(&[1, len])
            })
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&sources, 0)
    }

    /// Separates a mixture without recording gradients.
    pub fn separate(&self, mixture: &[f64]) -> Result<Vec<Vec<f64>>> {
        let x = Tensor::new(mixture.to_vec(), &[mixture.len()])?;
        let out = no_grad(|| self.forward(&x))?;
        Ok(out
            .data()
            .chunks_exact(mixture.len())
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Parameter counts grouped by component, in parameter order.
    pub fn parameter_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (name, t) in self.parameters() {
            let group = match name.split('.').collect::<Vec<_>>().as_slice() {
                ["blocks", i, stack, ..] => format!("blocks.{i}.{stack}"),
                _ => match name.split('_').next().unwrap_or_default() {
                    "norm" | "input" => "input",
                    "prelu" | "split" => "output",
                    "mask1" | "mask2" => "mask",
                    other => other,
                }
                .to_string(),
            };
            match groups.last_mut() {
                Some((g, n)) if *g == group => *n += t.numel(),
                _ => groups.push((group, t.numel())),
            }
        }
        groups
    }
}

impl Parameterized for SepFormer {
    fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        push_params!(out, "", ref self.{encoder_weight, encoder_bias});
        push_params!(out, "", ref self.{norm_gain, norm_bias, input_weight, input_bias});
        for (i, block) in self.blocks.iter().enumerate() {
            for (n, t) in block.parameters() {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        push_params!(out, "", ref self.{prelu_alpha, split_weight, split_bias});
        push_params!(out, "", ref self.{mask1_weight, mask1_bias, mask2_weight, mask2_bias});
        push_params!(out, "", ref self.{decoder_weight});
        out
    }

    fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        push_params!(out, "", mut self.{encoder_weight, encoder_bias});
        push_params!(out, "", mut self.{norm_gain, norm_bias, input_weight, input_bias});
        for (i, block) in self.blocks.iter_mut().enumerate() {
            for (n, t) in block.parameters_mut() {
                out.push((format!("blocks.{i}.{n}"), t));
            }
        }
        push_params!(out, "", mut self.{prelu_alpha, split_weight, split_bias});
        push_params!(out, "", mut self.{mask1_weight, mask1_bias, mask2_weight, mask2_bias});
        push_params!(out, "", mut self.{decoder_weight});
        out
    }
}

/// Trainable scalars of a model built from `config`.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    config.validate()?;
    let (f, k, ns, dff) = (
        config.filters,
        config.kernel_size,
        config.num_speakers,
        config.d_ff,
    );
    let layer = 4 * (f * f + f) + 4 * f + (f * dff + dff) + (dff * f + f);
    let blocks = config.num_blocks * (config.intra_layers + config.inter_layers) * layer;
    Ok((f * k + f)
        + (2 * f + f * f + f)
        + blocks
        + (f + f * f * ns + f * ns)
        + 2 * (f * f + f)
        + f * k)
}
