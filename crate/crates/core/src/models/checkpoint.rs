//! Plain-text checkpoint format (version 1).
//!
//! ```text
//! cutoff-checkpoint 1
//! meta <single-line JSON describing the model>
//! params <count>
//! param <name> <decay 0|1> <rank> <dim_0> ... <dim_{rank-1}>
//! <values, space separated>
//! ...
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a load
//! reproduces the saved parameters bit for bit.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const FORMAT_HEADER: &str = "cutoff-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(store: &ParamStore, meta: &str, mut out: W) -> Result<()> {
    if meta.contains('\n') {
        return Err(Error::Checkpoint("meta must be a single line".into()));
    }
    writeln!(out, "{FORMAT_HEADER} {FORMAT_VERSION}")?;
    writeln!(out, "meta {meta}")?;
    writeln!(out, "params {}", store.len())?;
    for (_, p) in store.iter() {
        if p.name.contains(char::is_whitespace) {
            return Err(Error::Checkpoint(format!("parameter name `{}` has whitespace", p.name)));
        }
        let shape = p.value.shape();
        write!(out, "param {} {} {}", p.name, u8::from(p.decay), shape.len())?;
        for d in shape {
            write!(out, " {d}")?;
        }
        writeln!(out)?;
        let mut first = true;
        for v in p.value.data() {
            if !first {
                out.write_all(b" ")?;
            }
            write!(out, "{v:?}")?;
            first = false;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn read_checkpoint<R: BufRead>(input: R) -> Result<(String, ParamStore)> {
    let mut lines = input.lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .ok_or_else(|| bad(format!("unexpected end of file, expected {what}")))?
            .map_err(Error::from)
    };
    let header = next("header")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(FORMAT_HEADER) {
        return Err(bad("not a checkpoint file"));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing version"))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let meta = next("meta")?
        .strip_prefix("meta ")
        .ok_or_else(|| bad("missing meta line"))?
        .to_string();
    let count: usize = next("params")?
        .strip_prefix("params ")
        .and_then(|c| c.trim().parse().ok())
        .ok_or_else(|| bad("missing parameter count"))?;

    let mut store = ParamStore::new();
    for _ in 0..count {
        let line = next("param header")?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 || fields[0] != "param" {
            return Err(bad(format!("malformed parameter header `{line}`")));
        }
        let name = fields[1].to_string();
        let decay = match fields[2] {
            "0" => false,
            "1" => true,
            other => return Err(bad(format!("bad decay flag `{other}`"))),
        };
        let rank: usize = fields[3].parse().map_err(|_| bad("bad rank"))?;
        if fields.len() != 4 + rank {
            return Err(bad(format!("shape of `{name}` does not match rank {rank}")));
        }
        let shape = fields[4..]
            .iter()
            .map(|d| d.parse::<usize>().map_err(|_| bad(format!("bad extent `{d}`"))))
            .collect::<Result<Vec<_>>>()?;
        let values = next("values")?
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| bad(format!("bad value `{v}` in `{name}`"))))
            .collect::<Result<Vec<_>>>()?;
        let tensor = Tensor::new(shape, values).map_err(|e| bad(format!("{name}: {e}")))?;
        store.add(name, tensor, decay);
    }
    Ok((meta, store))
}

pub fn save(path: &Path, store: &ParamStore, meta: &str) -> Result<()> {
    write_checkpoint(store, meta, BufWriter::new(File::create(path)?))
}

pub fn load(path: &Path) -> Result<(String, ParamStore)> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Replaces the values of `target` with those of `loaded`, requiring the same
/// names, order and shapes.
pub fn restore_into(target: &mut ParamStore, loaded: ParamStore) -> Result<()> {
    if target.len() != loaded.len() {
        return Err(bad(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            target.len()
        )));
    }
    for ((_, want), (_, got)) in target.iter().zip(loaded.iter()) {
        if want.name != got.name || want.value.shape() != got.value.shape() {
            return Err(bad(format!(
                "parameter `{}` {:?} does not match `{}` {:?}",
                got.name,
                got.value.shape(),
                want.name,
                want.value.shape()
            )));
        }
    }
    *target = loaded;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ModelMeta<C> {
    model: String,
    config: C,
}

/// Saves a model's parameters with its kind and config in the meta line.
pub fn save_model<C: Serialize>(path: &Path, kind: &str, config: &C, store: &ParamStore) -> Result<()> {
    let meta = serde_json::to_string(&ModelMeta {
        model: kind.to_string(),
        config,
    })?;
    save(path, store, &meta)
}

/// Reads a checkpoint written by [`save_model`] for a model of `kind`.
pub fn load_model<C: DeserializeOwned>(path: &Path, kind: &str) -> Result<(C, ParamStore)> {
    let (meta, store) = load(path)?;
    let meta: ModelMeta<C> = serde_json::from_str(&meta)?;
    if meta.model != kind {
        return Err(bad(format!("checkpoint holds a {} model, expected {kind}", meta.model)));
    }
    Ok((meta.config, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_bit_exactly() {
        let mut store = ParamStore::new();
        let tricky = vec![0.1, -0.0, 1e-300, f64::MAX, f64::MIN_POSITIVE, 1.0 / 3.0];
        store.add("a.weight", Tensor::new(vec![2, 3], tricky).unwrap(), true);
        store.add("a.bias", Tensor::new(vec![1], vec![-2.5e-17]).unwrap(), false);
        let mut buf = Vec::new();
        write_checkpoint(&store, r#"{"kind":"test"}"#, &mut buf).unwrap();
        let (meta, loaded) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(meta, r#"{"kind":"test"}"#);
        for ((_, a), (_, b)) in store.iter().zip(loaded.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.decay, b.decay);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(read_checkpoint("nonsense 1\n".as_bytes()).is_err());
        assert!(read_checkpoint("cutoff-checkpoint 2\nmeta {}\nparams 0\n".as_bytes()).is_err());
        let truncated = "cutoff-checkpoint 1\nmeta {}\nparams 1\nparam w 1 1 2\n1.0\n";
        assert!(read_checkpoint(truncated.as_bytes()).is_err());
        let ok = "cutoff-checkpoint 1\nmeta {}\nparams 1\nparam w 1 1 2\n1.0 2.0\n";
        assert!(read_checkpoint(ok.as_bytes()).is_ok());
    }

    #[test]
    fn restore_checks_layout() {
        let mut a = ParamStore::new();
        a.add("w", Tensor::zeros(&[2]), true);
        let mut b = ParamStore::new();
        b.add("w", Tensor::zeros(&[3]), true);
        assert!(restore_into(&mut a, b).is_err());
        let mut c = ParamStore::new();
        c.add("w", Tensor::ones(&[2]), true);
        restore_into(&mut a, c).unwrap();
        assert_eq!(a.get(crate::ParamId(0)).data(), &[1.0, 1.0]);
    }
}
