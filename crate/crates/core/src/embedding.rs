//! Input embedding composition: `W[i] = token[ids[i]] + position[i] (+ segment[seg[i]])`.
//!
//! The composed `L x d` matrix is the surface every cutoff mask acts on.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

/// Reserved id prepended to classification inputs; its final hidden state is
/// the pooled representation.
pub const CLS_TOKEN: usize = 0;

/// Decoder start symbol for sequence pairs.
pub const BOS_TOKEN: usize = 0;

/// End-of-sequence symbol for sequence pairs.
pub const EOS_TOKEN: usize = 1;

/// Standard deviation of the normal initializer for every weight table.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub segments: Option<Vec<usize>>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSequence {
            ids,
            segments: None,
        }
    }

    pub fn with_segments(ids: Vec<usize>, segments: Vec<usize>) -> Self {
        TokenSequence {
            ids,
            segments: Some(segments),
        }
    }

    /// Same sequence with [`CLS_TOKEN`] in front (segment 0 for it).
    pub fn with_cls(&self) -> Self {
        let mut ids = Vec::with_capacity(self.ids.len() + 1);
        ids.push(CLS_TOKEN);
        ids.extend_from_slice(&self.ids);
        let segments = self.segments.as_ref().map(|s| {
            let mut out = Vec::with_capacity(s.len() + 1);
            out.push(0);
            out.extend_from_slice(s);
            out
        });
        TokenSequence { ids, segments }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Handles to the token, position and optional segment tables in a
/// [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub token: ParamId,
    pub position: ParamId,
    pub segment: Option<ParamId>,
    pub vocab: usize,
    pub max_len: usize,
    pub segments: usize,
    pub width: usize,
}

impl EmbeddingTables {
    /// Registers freshly initialized tables under `prefix`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        vocab: usize,
        max_len: usize,
        width: usize,
        segments: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let token = store.add(
            format!("{prefix}.token"),
            Tensor::normal(&[vocab, width], INIT_STD, rng),
            true,
        );
        let position = store.add(
            format!("{prefix}.position"),
            Tensor::normal(&[max_len, width], INIT_STD, rng),
            true,
        );
        let segment = segments.map(|s| {
            store.add(
                format!("{prefix}.segment"),
                Tensor::normal(&[s, width], INIT_STD, rng),
                true,
            )
        });
        EmbeddingTables {
            token,
            position,
            segment,
            vocab,
            max_len,
            segments: segments.unwrap_or(1),
            width,
        }
    }

    pub fn validate(&self, seq: &TokenSequence) -> Result<()> {
        let len = seq.len();
        if len == 0 {
            return Err(Error::EmptySequence);
        }
        if len > self.max_len {
            return Err(Error::SequenceTooLong {
                len,
                max: self.max_len,
            });
        }
        if let Some((position, &id)) = seq.ids.iter().enumerate().find(|(_, &id)| id >= self.vocab) {
            return Err(Error::TokenOutOfRange {
                position,
                id,
                vocab: self.vocab,
            });
        }
        if let Some(segs) = &seq.segments {
            if segs.len() != len {
                return Err(Error::Format(format!(
                    "{} segment ids for {len} tokens",
                    segs.len()
                )));
            }
            if let Some((position, &id)) = segs.iter().enumerate().find(|(_, &s)| s >= self.segments) {
                return Err(Error::SegmentOutOfRange {
                    position,
                    id,
                    segments: self.segments,
                });
            }
        }
        Ok(())
    }

    /// Builds the `L x d` input embedding matrix inside `g`, differentiable
    /// w.r.t. all tables. Segment ids are ignored when the model has no
    /// segment table.
    pub fn compose(&self, g: &mut Graph, store: &ParamStore, seq: &TokenSequence) -> Result<Var> {
        self.validate(seq)?;
        let token = g.param(store, self.token)?;
        let position = g.param(store, self.position)?;
        let positions: Vec<usize> = (0..seq.len()).collect();
        let tok = g.gather_rows(token, &seq.ids)?;
        let pos = g.gather_rows(position, &positions)?;
        let mut w = g.add(tok, pos)?;
        if let Some(seg_table) = self.segment {
            let table = g.param(store, seg_table)?;
            let ids = seq
                .segments
                .clone()
                .unwrap_or_else(|| vec![0; seq.len()]);
            let seg = g.gather_rows(table, &ids)?;
            w = g.add(w, seg)?;
        }
        Ok(w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tables(segments: Option<usize>) -> (ParamStore, EmbeddingTables) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let t = EmbeddingTables::init(&mut store, "emb", 10, 6, 8, segments, &mut rng);
        // larger scale than INIT_STD keeps finite-difference ratios well conditioned
        for (_, p) in store.iter_mut() {
            p.value = Tensor::normal(p.value.shape(), 1.0, &mut rng);
        }
        (store, t)
    }

    #[test]
    fn zero_tables_give_zero_matrix() {
        let (mut store, t) = tables(Some(2));
        for (_, p) in store.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut g = Graph::new();
        let w = t
            .compose(&mut g, &store, &TokenSequence::with_segments(vec![1, 2, 3], vec![0, 1, 1]))
            .unwrap();
        assert_eq!(g.shape(w), &[3, 8]);
        assert!(g.value(w).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_equal_token_rows_when_other_tables_are_zero() {
        let (mut store, t) = tables(None);
        *store.get_mut(t.position) = Tensor::zeros(&[6, 8]);
        let mut token = Tensor::zeros(&[10, 8]);
        for v in 0..10 {
            token.data_mut()[v * 8 + v % 8] = (v + 1) as f64;
        }
        *store.get_mut(t.token) = token.clone();
        let mut g = Graph::new();
        let ids = vec![4, 9, 0, 4];
        let w = g_compose(&t, &mut g, &store, &ids);
        for (r, &id) in ids.iter().enumerate() {
            assert_eq!(&g.value(w)[r * 8..(r + 1) * 8], token.row(id));
        }
    }

    fn g_compose(t: &EmbeddingTables, g: &mut Graph, store: &ParamStore, ids: &[usize]) -> Var {
        t.compose(g, store, &TokenSequence::new(ids.to_vec())).unwrap()
    }

    #[test]
    fn rejects_bad_sequences() {
        let (store, t) = tables(Some(2));
        let mut g = Graph::new();
        assert!(matches!(
            t.compose(&mut g, &store, &TokenSequence::new(vec![1, 10])),
            Err(Error::TokenOutOfRange { id: 10, .. })
        ));
        assert!(matches!(
            t.compose(&mut g, &store, &TokenSequence::new(vec![1; 7])),
            Err(Error::SequenceTooLong { len: 7, max: 6 })
        ));
        assert!(matches!(
            t.compose(&mut g, &store, &TokenSequence::with_segments(vec![1, 2], vec![0, 2])),
            Err(Error::SegmentOutOfRange { .. })
        ));
        assert!(t.compose(&mut g, &store, &TokenSequence::new(vec![])).is_err());
    }

    #[test]
    fn composition_is_additive() {
        let (store, t) = tables(Some(2));
        let seq = TokenSequence::with_segments(vec![3, 1, 7, 3], vec![0, 0, 1, 1]);
        let mut g = Graph::new();
        let full = t.compose(&mut g, &store, &seq).unwrap();
        let full = g.value(full).to_vec();

        let mut parts = vec![0.0; full.len()];
        for keep in [t.token, t.position, t.segment.unwrap()] {
            let mut s = store.clone();
            for id in [t.token, t.position, t.segment.unwrap()] {
                if id != keep {
                    let shape = s.get(id).shape().to_vec();
                    *s.get_mut(id) = Tensor::zeros(&shape);
                }
            }
            let mut g = Graph::new();
            let w = t.compose(&mut g, &s, &seq).unwrap();
            for (p, v) in parts.iter_mut().zip(g.value(w)) {
                *p += v;
            }
        }
        for (a, b) in full.iter().zip(&parts) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_reaches_only_used_token_rows() {
        let (store, t) = tables(None);
        let mut g = Graph::new();
        let w = g_compose(&t, &mut g, &store, &[2, 5, 2, 7]);
        let s = g.sum(w).unwrap();
        let grads = g.backward(s).unwrap();
        let dt = grads.param(t.token).unwrap();
        for v in 0..10 {
            let row = &dt[v * 8..(v + 1) * 8];
            let expect = match v {
                2 => 2.0,
                5 | 7 => 1.0,
                _ => 0.0,
            };
            assert!(row.iter().all(|&x| x == expect), "row {v}: {row:?}");
        }
        let dp = grads.param(t.position).unwrap();
        assert!(dp[..4 * 8].iter().all(|&x| x == 1.0));
        assert!(dp[4 * 8..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sum_gradients_match_finite_differences() {
        let (store, t) = tables(Some(2));
        let seq = TokenSequence::with_segments(vec![1, 4, 4, 9], vec![0, 1, 0, 1]);
        let report = gradcheck::<Error, _>(&store, |g, s| {
            let w = t.compose(g, s, &seq)?;
            // squared sum so gradients depend on the table values
            let sq = g.mul(w, w)?;
            Ok(g.sum(sq)?)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");

        let report = gradcheck::<Error, _>(&store, |g, s| {
            let w = t.compose(g, s, &seq)?;
            Ok(g.sum(w)?)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
