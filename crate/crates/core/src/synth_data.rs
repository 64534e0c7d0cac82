//! Seeded synthetic tasks whose labels survive moderate cutoff, plus the
//! line-oriented dataset text format.
//!
//! Classification lines are `label<TAB>ids` and pair lines are `src<TAB>tgt`,
//! with ids space separated. Classification ids include the leading
//! classification token; pair sides include their trailing EOS.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{TokenSequence, CLS_TOKEN, EOS_TOKEN};
use crate::error::{Error, Result};

/// Token marking a positive example in the keyword task.
pub const KEYWORD_TOKEN: usize = 1;
/// First filler id in the keyword task.
pub const FIRST_FILLER: usize = 2;
/// Majority-task markers; label 0 means `MARKER_A` wins.
pub const MARKER_A: usize = 1;
pub const MARKER_B: usize = 2;
pub const MAJORITY_VOCAB: usize = 3;
/// Smallest majority margin as a fraction of `L`.
pub const MAJORITY_MARGIN: f64 = 0.3;
/// First content id on both sides of the lexicon task (0 and 1 are BOS/EOS).
pub const FIRST_WORD: usize = 2;
pub const LEXICON_WORDS: usize = 16;
pub const LEXICON_VOCAB: usize = FIRST_WORD + LEXICON_WORDS;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub tokens: TokenSequence,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
}

impl PairExample {
    /// Teacher-forcing decoder input: BOS followed by the target minus its
    /// last token.
    pub fn decoder_input(&self) -> Vec<usize> {
        let mut v = Vec::with_capacity(self.target.len());
        v.push(crate::embedding::BOS_TOKEN);
        v.extend_from_slice(&self.target[..self.target.len() - 1]);
        v
    }

    /// Target without the trailing EOS.
    pub fn content(&self) -> &[usize] {
        &self.target[..self.target.len() - 1]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

/// Sequences of length `len` (classification token at 0). Label-1 examples
/// carry [`KEYWORD_TOKEN`] at `redundancy` distinct positions, label-0 ones
/// never; fillers are uniform over `FIRST_FILLER..vocab`. Classes are
/// balanced, the extra example of odd `n` going to label 0.
pub fn gen_keyword_task(n: usize, len: usize, vocab: usize, redundancy: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    if len < 2 || redundancy > len - 1 {
        return Err(Error::Infeasible(format!(
            "{redundancy} keyword copies do not fit in {} content positions",
            len.saturating_sub(1)
        )));
    }
    if redundancy < 3 || len < 2 * redundancy {
        return Err(Error::Config(format!(
            "keyword task needs r >= 3 and L >= 2r (r = {redundancy}, L = {len})"
        )));
    }
    if vocab <= FIRST_FILLER {
        return Err(Error::Config(format!("vocab {vocab} leaves no filler tokens")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i < n / 2)).collect();
    labels.shuffle(&mut rng);
    let positions: Vec<usize> = (1..len).collect();
    let out = labels
        .into_iter()
        .map(|label| {
            let mut ids = vec![CLS_TOKEN];
            ids.extend((1..len).map(|_| rng.gen_range(FIRST_FILLER..vocab)));
            if label == 1 {
                for &p in positions.choose_multiple(&mut rng, redundancy) {
                    ids[p] = KEYWORD_TOKEN;
                }
            }
            let copies = ids.iter().filter(|&&t| t == KEYWORD_TOKEN).count();
            assert_eq!(copies, label * redundancy, "keyword count breaks the generative rule");
            LabeledExample {
                tokens: TokenSequence::new(ids),
                label,
            }
        })
        .collect();
    Ok(out)
}

/// `len` marker tokens after the classification token; the label names the
/// more frequent marker, and the margin is at least `ceil(0.3 * len)`.
pub fn gen_majority_task(n: usize, len: usize, seed: u64) -> Result<Vec<LabeledExample>> {
    if len.is_multiple_of(2) {
        return Err(Error::Config(format!("majority task needs odd L, got {len}")));
    }
    let margin = (MAJORITY_MARGIN * len as f64 - 1e-9).ceil() as usize;
    // counts of the winning marker that keep the margin
    let winning: Vec<usize> = (len.div_ceil(2)..=len).filter(|&w| 2 * w - len >= margin).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| usize::from(i < n / 2)).collect();
    labels.shuffle(&mut rng);
    let out = labels
        .into_iter()
        .map(|label| {
            let win = *winning.choose(&mut rng).expect("len >= 1 admits a full sweep");
            let (major, minor) = if label == 0 { (MARKER_A, MARKER_B) } else { (MARKER_B, MARKER_A) };
            let mut body: Vec<usize> = (0..len).map(|i| if i < win { major } else { minor }).collect();
            body.shuffle(&mut rng);
            let a = body.iter().filter(|&&t| t == MARKER_A).count();
            assert!(a.abs_diff(len - a) >= margin, "majority margin violated");
            let mut ids = vec![CLS_TOKEN];
            ids.extend(body);
            LabeledExample {
                tokens: TokenSequence::new(ids),
                label,
            }
        })
        .collect();
    Ok(out)
}

/// Bijection on content ids drawn from `seed`; index `i` maps source word
/// `FIRST_WORD + i` to target word `FIRST_WORD + lexicon[i]`.
pub fn lexicon(seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm: Vec<usize> = (0..LEXICON_WORDS).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Applies `lexicon` to every content token and reverses the result.
pub fn translate(lexicon: &[usize], source: &[usize]) -> Vec<usize> {
    source
        .iter()
        .rev()
        .map(|&s| FIRST_WORD + lexicon[s - FIRST_WORD])
        .collect()
}

/// Inverse of [`translate`].
pub fn untranslate(lexicon: &[usize], target: &[usize]) -> Vec<usize> {
    let mut inverse = vec![0; lexicon.len()];
    for (s, &t) in lexicon.iter().enumerate() {
        inverse[t] = s;
    }
    target
        .iter()
        .rev()
        .map(|&t| FIRST_WORD + inverse[t - FIRST_WORD])
        .collect()
}

/// Source sentences of `ceil(L/2)..=L` content words; the target is the
/// per-word lexicon image in reverse order. Both sides end with EOS.
pub fn gen_lexicon_pairs(n: usize, len: usize, seed: u64) -> Result<Vec<PairExample>> {
    if len == 0 {
        return Err(Error::Config("lexicon pairs need L >= 1".into()));
    }
    let lex = lexicon(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let out = (0..n)
        .map(|_| {
            let l = rng.gen_range(len.div_ceil(2)..=len);
            let words: Vec<usize> = (0..l)
                .map(|_| rng.gen_range(FIRST_WORD..LEXICON_VOCAB))
                .collect();
            let mut target = translate(&lex, &words);
            target.push(EOS_TOKEN);
            let mut source = words;
            source.push(EOS_TOKEN);
            PairExample { source, target }
        })
        .collect();
    Ok(out)
}

/// Seeded shuffle, then 70/15/15 (train and dev sizes floored).
pub fn split<T: Clone>(data: &[T], seed: u64) -> Split<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let n_train = data.len() * 70 / 100;
    let n_dev = data.len() * 15 / 100;
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    Split {
        train: pick(&order[..n_train]),
        dev: pick(&order[n_train..n_train + n_dev]),
        test: pick(&order[n_train + n_dev..]),
    }
}

/// Reassigns exactly `floor(fraction * n)` labels, chosen by `seed`, to a
/// uniformly drawn different class. Returns the corrupted indices, sorted.
pub fn apply_label_noise(data: &mut [LabeledExample], fraction: f64, classes: usize, seed: u64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!("noise fraction {fraction} outside [0, 1]")));
    }
    if classes < 2 {
        return Err(Error::Config("label noise needs at least two classes".into()));
    }
    let count = (fraction * data.len() as f64 + 1e-9).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = (0..data.len()).collect::<Vec<_>>().choose_multiple(&mut rng, count).copied().collect();
    chosen.sort_unstable();
    for &i in &chosen {
        let shift = rng.gen_range(1..classes);
        data[i].label = (data[i].label + shift) % classes;
    }
    Ok(chosen)
}

fn join(ids: &[usize]) -> String {
    let mut s = String::with_capacity(ids.len() * 3);
    for (i, id) in ids.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{id}");
    }
    s
}

fn parse_ids(field: &str, line: usize) -> Result<Vec<usize>> {
    field
        .split_whitespace()
        .map(|t| {
            t.parse()
                .map_err(|_| Error::Format(format!("line {line}: bad token id `{t}`")))
        })
        .collect()
}

pub fn dump_labeled(data: &[LabeledExample]) -> String {
    data.iter()
        .map(|e| format!("{}\t{}\n", e.label, join(&e.tokens.ids)))
        .collect()
}

pub fn parse_labeled(text: &str) -> Result<Vec<LabeledExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (label, ids) = l
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("line {}: missing tab", i + 1)))?;
            let label = label
                .trim()
                .parse()
                .map_err(|_| Error::Format(format!("line {}: bad label `{label}`", i + 1)))?;
            Ok(LabeledExample {
                tokens: TokenSequence::new(parse_ids(ids, i + 1)?),
                label,
            })
        })
        .collect()
}

pub fn dump_pairs(data: &[PairExample]) -> String {
    data.iter()
        .map(|e| format!("{}\t{}\n", join(&e.source), join(&e.target)))
        .collect()
}

pub fn parse_pairs(text: &str) -> Result<Vec<PairExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let (src, tgt) = l
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("line {}: missing tab", i + 1)))?;
            let target = parse_ids(tgt, i + 1)?;
            if target.is_empty() {
                return Err(Error::Format(format!("line {}: empty target", i + 1)));
            }
            Ok(PairExample {
                source: parse_ids(src, i + 1)?,
                target,
            })
        })
        .collect()
}

pub fn save_labeled(path: &Path, data: &[LabeledExample]) -> Result<()> {
    Ok(fs::write(path, dump_labeled(data))?)
}

pub fn load_labeled(path: &Path) -> Result<Vec<LabeledExample>> {
    parse_labeled(&fs::read_to_string(path)?)
}

pub fn save_pairs(path: &Path, data: &[PairExample]) -> Result<()> {
    Ok(fs::write(path, dump_pairs(data))?)
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairExample>> {
    parse_pairs(&fs::read_to_string(path)?)
}
