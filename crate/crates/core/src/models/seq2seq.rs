use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{checkpoint, argmax, Block, LayerNormParams, Linear};
use crate::embedding::{EmbeddingTables, TokenSequence, BOS_TOKEN, EOS_TOKEN};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::trainer::PassCounter;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Seq2SeqConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            width: 32,
            ffn_width: 64,
            max_len: 32,
            src_vocab: 32,
            tgt_vocab: 32,
        }
    }
}

impl Seq2SeqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width == 0 || self.ffn_width == 0 || self.max_len == 0 {
            return Err(Error::Config("model extents must be positive".into()));
        }
        if self.tgt_vocab <= EOS_TOKEN || self.src_vocab <= EOS_TOKEN {
            return Err(Error::Config("vocabularies must include BOS and EOS".into()));
        }
        Ok(())
    }
}

/// Encoder-decoder with causal decoder self-attention and cross-attention
/// onto the encoder output.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    pub config: Seq2SeqConfig,
    pub params: ParamStore,
    pub src_embedding: EmbeddingTables,
    pub tgt_embedding: EmbeddingTables,
    encoder: Vec<Block>,
    encoder_norm: LayerNormParams,
    decoder: Vec<Block>,
    decoder_norm: LayerNormParams,
    output: Linear,
}

impl Seq2Seq {
    pub fn new<R: Rng + ?Sized>(config: Seq2SeqConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut params = ParamStore::new();
        let src_embedding = EmbeddingTables::init(&mut params, "src_embed", c.src_vocab, c.max_len, c.width, None, rng);
        let tgt_embedding = EmbeddingTables::init(&mut params, "tgt_embed", c.tgt_vocab, c.max_len, c.width, None, rng);
        let encoder = (0..c.encoder_layers)
            .map(|i| {
                Block::init(
                    &mut params,
                    &format!("encoder.{i}"),
                    c.width,
                    c.heads,
                    c.ffn_width,
                    false,
                    false,
                    rng,
                )
            })
            .collect();
        let encoder_norm = LayerNormParams::init(&mut params, "encoder.final_norm", c.width);
        let decoder = (0..c.decoder_layers)
            .map(|i| {
                Block::init(
                    &mut params,
                    &format!("decoder.{i}"),
                    c.width,
                    c.heads,
                    c.ffn_width,
                    true,
                    true,
                    rng,
                )
            })
            .collect();
        let decoder_norm = LayerNormParams::init(&mut params, "decoder.final_norm", c.width);
        let output = Linear::init(&mut params, "output", c.width, c.tgt_vocab, rng);
        Ok(Seq2Seq {
            config,
            params,
            src_embedding,
            tgt_embedding,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            output,
        })
    }

    pub fn embed_source(&self, g: &mut Graph, store: &ParamStore, src: &[usize]) -> Result<Var> {
        self.src_embedding.compose(g, store, &TokenSequence::new(src.to_vec()))
    }

    pub fn embed_target(&self, g: &mut Graph, store: &ParamStore, tgt_in: &[usize]) -> Result<Var> {
        self.tgt_embedding.compose(g, store, &TokenSequence::new(tgt_in.to_vec()))
    }

    fn check_input(&self, g: &Graph, w: Var) -> Result<()> {
        let shape = g.shape(w);
        if shape.len() != 2 || shape[1] != self.config.width {
            return Err(Error::WidthMismatch {
                expected: self.config.width,
                got: *shape.last().unwrap(),
            });
        }
        if shape[0] > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: shape[0],
                max: self.config.max_len,
            });
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, w_src: Var) -> Result<Var> {
        self.check_input(g, w_src)?;
        let mut x = w_src;
        for block in &self.encoder {
            x = block.apply(g, store, x, None)?;
        }
        self.encoder_norm.apply(g, store, x)
    }

    pub fn decode(&self, g: &mut Graph, store: &ParamStore, memory: Var, w_tgt_in: Var) -> Result<Var> {
        self.check_input(g, w_tgt_in)?;
        let mut x = w_tgt_in;
        for block in &self.decoder {
            x = block.apply(g, store, x, Some(memory))?;
        }
        let x = self.decoder_norm.apply(g, store, x)?;
        self.output.apply(g, store, x)
    }

    /// Teacher-forced logits `[L_t, V_tgt]`.
    pub fn logits_with(&self, g: &mut Graph, store: &ParamStore, w_src: Var, w_tgt_in: Var) -> Result<Var> {
        let memory = self.encode(g, store, w_src)?;
        self.decode(g, store, memory, w_tgt_in)
    }

    /// Per-position cross-entropy `[L_t]` against the (unmasked) gold
    /// `targets`; one counted forward pass.
    pub fn seq2seq_forward(
        &self,
        g: &mut Graph,
        w_src: Var,
        w_tgt_in: Var,
        targets: &[usize],
        counter: &mut PassCounter,
    ) -> Result<Var> {
        let logits = self.logits_with(g, &self.params, w_src, w_tgt_in)?;
        counter.record_forward();
        self.position_losses(g, logits, targets)
    }

    pub fn position_losses(&self, g: &mut Graph, logits: Var, targets: &[usize]) -> Result<Var> {
        if let Some(&t) = targets.iter().find(|&&t| t >= self.config.tgt_vocab) {
            return Err(Error::LabelOutOfRange {
                label: t,
                classes: self.config.tgt_vocab,
            });
        }
        Ok(g.cross_entropy_rows(logits, targets)?)
    }

    /// Argmax decoding from BOS until EOS or `max_len` tokens. The returned
    /// tokens exclude EOS.
    pub fn greedy_decode(&self, src: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let w_src = self.embed_source(&mut g, &self.params, src)?;
        let memory = self.encode(&mut g, &self.params, w_src)?;
        let mut tgt_in = vec![BOS_TOKEN];
        let mut out = Vec::new();
        let limit = max_len.min(self.config.max_len);
        while out.len() < limit {
            let w = self.embed_target(&mut g, &self.params, &tgt_in)?;
            let logits = self.decode(&mut g, &self.params, memory, w)?;
            let v = self.config.tgt_vocab;
            let vals = g.value(logits);
            let last = &vals[vals.len() - v..];
            let next = argmax(last);
            if next == EOS_TOKEN {
                break;
            }
            out.push(next);
            tgt_in.push(next);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_model(path, "seq2seq", &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, store): (Seq2SeqConfig, _) = checkpoint::load_model(path, "seq2seq")?;
        // layout comes from the config; values are replaced wholesale
        let mut model = Self::new(config, &mut ChaCha8Rng::seed_from_u64(0))?;
        checkpoint::restore_into(&mut model.params, store)?;
        Ok(model)
    }

    pub fn randomize<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        for (_, p) in self.params.iter_mut() {
            p.value = Tensor::normal(p.value.shape(), std, rng);
        }
    }
}
