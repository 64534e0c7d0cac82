use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{checkpoint, Block, EmbeddingClassifier, LayerNormParams, Linear};
use crate::embedding::{EmbeddingTables, TokenSequence};
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Tensor, Var};
use crate::trainer::PassCounter;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub ffn_width: usize,
    pub max_len: usize,
    pub vocab: usize,
    pub classes: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 2,
            width: 32,
            ffn_width: 64,
            max_len: 64,
            vocab: 32,
            classes: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.width == 0 || self.ffn_width == 0 || self.max_len == 0 || self.vocab == 0 {
            return Err(Error::Config("model extents must be positive".into()));
        }
        if self.classes < 1 {
            return Err(Error::Config("need at least one class".into()));
        }
        Ok(())
    }
}

/// Encoder stack pooled at the classification token (row 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub config: EncoderConfig,
    pub params: ParamStore,
    pub embedding: EmbeddingTables,
    blocks: Vec<Block>,
    final_norm: LayerNormParams,
    head: Linear,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let c = &config;
        let embedding = EmbeddingTables::init(&mut params, "embed", c.vocab, c.max_len, c.width, None, rng);
        let blocks = (0..c.layers)
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
        let final_norm = LayerNormParams::init(&mut params, "encoder.final_norm", c.width);
        let head = Linear::init(&mut params, "head", c.width, c.classes, rng);
        Ok(Classifier {
            config,
            params,
            embedding,
            blocks,
            final_norm,
            head,
        })
    }

    /// Input embedding matrix for `seq` (which should already carry the CLS token).
    pub fn embed(&self, g: &mut Graph, seq: &TokenSequence) -> Result<Var> {
        self.embedding.compose(g, &self.params, seq)
    }

    pub fn embed_with(&self, g: &mut Graph, store: &ParamStore, seq: &TokenSequence) -> Result<Var> {
        self.embedding.compose(g, store, seq)
    }

    /// One counted forward pass.
    pub fn classify(&self, g: &mut Graph, w: Var, counter: &mut PassCounter) -> Result<Var> {
        let out = self.logits_with(g, &self.params, w)?;
        counter.record_forward();
        Ok(out)
    }

    /// Forward over a whole batch; counted as a single pass.
    pub fn classify_batch(&self, g: &mut Graph, ws: &[Var], counter: &mut PassCounter) -> Result<Vec<Var>> {
        let out = ws
            .iter()
            .map(|&w| self.logits_with(g, &self.params, w))
            .collect::<Result<Vec<_>>>()?;
        counter.record_forward();
        Ok(out)
    }

    /// Class probabilities for a token sequence, without augmentation.
    pub fn predict_proba(&self, seq: &TokenSequence) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let w = self.embed(&mut g, seq)?;
        let logits = self.logits_with(&mut g, &self.params, w)?;
        let p = g.softmax(logits)?;
        Ok(g.value(p).to_vec())
    }

    pub fn predict(&self, seq: &TokenSequence) -> Result<usize> {
        Ok(super::argmax(&self.predict_proba(seq)?))
    }

    /// Overwrites every parameter with `N(0, std^2)` draws (test helper for
    /// well-conditioned finite differences).
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save_model(path, "classifier", &self.config, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (config, store): (EncoderConfig, _) = checkpoint::load_model(path, "classifier")?;
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

impl EmbeddingClassifier for Classifier {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn classes(&self) -> usize {
        self.config.classes
    }

    fn logits_with(&self, g: &mut Graph, store: &ParamStore, w: Var) -> Result<Var> {
        let shape = g.shape(w).to_vec();
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
        let mut x = w;
        for block in &self.blocks {
            x = block.apply(g, store, x, None)?;
        }
        let x = self.final_norm.apply(g, store, x)?;
        let pooled = g.select_rows(x, &[0])?;
        let logits = self.head.apply(g, store, pooled)?;
        Ok(g.reshape(logits, &[self.config.classes])?)
    }
}
