//! Versioned text checkpoints.
//!
//! ```text
//! LYRA-CKPT 1
//! {"kind":"lyra", ...header json...}
//! tensor <name> <dim>x<dim>...
//! <space-separated values>
//! ...
//! ```

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::global::{GruDims, GruParams};
use super::lyra::{LyraDims, LyraParams};
use crate::data::{NormStats, YearIndex};
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};

const MAGIC: &str = "LYRA-CKPT 1";

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
enum Header {
    Gru {
        dims: GruDims,
        norm: NormStats,
    },
    Lyra {
        dims: LyraDims,
        first_year: YearIndex,
        last_year: YearIndex,
        norm: NormStats,
        #[serde(default)]
        trained_years: Vec<YearIndex>,
    },
}

fn write_container(path: &Path, header: &Header, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{MAGIC}")?;
    writeln!(w, "{}", serde_json::to_string(header)?)?;
    for (name, t) in store.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(w, "tensor {name} {}", dims.join("x"))?;
        let vals: Vec<String> = t.data().iter().map(f64::to_string).collect();
        writeln!(w, "{}", vals.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Header, Vec<(String, Tensor)>)> {
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));
    let mut lines = BufReader::new(std::fs::File::open(path)?).lines();
    let mut next = |what: &str| -> Result<String> {
        lines
            .next()
            .transpose()?
            .ok_or_else(|| bad(format!("truncated before {what}")))
    };
    let magic = next("magic")?;
    if magic.trim() != MAGIC {
        return Err(bad(format!("unrecognised magic '{magic}'")));
    }
    let header: Header = serde_json::from_str(&next("header")?).map_err(|e| bad(format!("header: {e}")))?;
    let mut tensors = Vec::new();
    loop {
        let line = match lines.next().transpose()? {
            None => break,
            Some(l) if l.trim().is_empty() => continue,
            Some(l) => l,
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 || parts[0] != "tensor" {
            return Err(bad(format!("expected a tensor line, got '{line}'")));
        }
        let shape = parts[2]
            .split('x')
            .map(|s| s.parse::<usize>().map_err(|_| bad(format!("bad shape '{}'", parts[2]))))
            .collect::<Result<Vec<_>>>()?;
        let vals = lines
            .next()
            .transpose()?
            .ok_or_else(|| bad(format!("missing values for {}", parts[1])))?;
        let data = vals
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad value '{s}' in {}", parts[1]))))
            .collect::<Result<Vec<_>>>()?;
        let t = Tensor::new(shape, data).map_err(|e| bad(format!("{}: {e}", parts[1])))?;
        tensors.push((parts[1].to_string(), t));
    }
    Ok((header, tensors))
}

fn restore(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} tensors, model has {}",
            tensors.len(),
            store.len()
        )));
    }
    for (name, t) in tensors {
        let id = store
            .id(&name)
            .map_err(|_| Error::Checkpoint(format!("unexpected tensor '{name}'")))?;
        store
            .set_value(id, t)
            .map_err(|e| Error::Checkpoint(format!("tensor '{name}': {e}")))?;
    }
    Ok(())
}

pub fn save_gru(model: &GruParams, path: impl AsRef<Path>) -> Result<()> {
    let header = Header::Gru {
        dims: model.dims.clone(),
        norm: model.norm.clone(),
    };
    write_container(path.as_ref(), &header, &model.store)
}

pub fn load_gru(path: impl AsRef<Path>) -> Result<GruParams> {
    match read_container(path.as_ref())? {
        (Header::Gru { dims, norm }, tensors) => {
            let mut model = GruParams::new(dims, norm, &mut ChaCha8Rng::seed_from_u64(0))?;
            restore(&mut model.store, tensors)?;
            Ok(model)
        }
        _ => Err(Error::Checkpoint("not a global GRU checkpoint".into())),
    }
}

pub fn save_lyra(model: &LyraParams, path: impl AsRef<Path>) -> Result<()> {
    let header = Header::Lyra {
        dims: model.dims.clone(),
        first_year: model.first_year(),
        last_year: model.last_year(),
        norm: model.norm.clone(),
        trained_years: model.trained_years.clone(),
    };
    write_container(path.as_ref(), &header, &model.store)
}

pub fn load_lyra(path: impl AsRef<Path>) -> Result<LyraParams> {
    match read_container(path.as_ref())? {
        (
            Header::Lyra {
                dims,
                first_year,
                last_year,
                norm,
                trained_years,
            },
            tensors,
        ) => {
            let mut model = LyraParams::new(dims, first_year, last_year, norm, &mut ChaCha8Rng::seed_from_u64(0))?;
            restore(&mut model.store, tensors)?;
            model.trained_years = trained_years;
            Ok(model)
        }
        _ => Err(Error::Checkpoint("not a LYRA checkpoint".into())),
    }
}
