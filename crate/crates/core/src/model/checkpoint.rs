//! Plain-text checkpoints.
//!
//! ```text
//! gata2floor-checkpoint 1
//! config {"d_model":64,...}
//! tensor embed.in.w 6 64
//! 0.0123 -0.2 ...
//! buffer global.mean 1 3
//! 0.1 0.2 0.3
//! end
//! ```
//!
//! Values use the shortest decimal form that parses back to the same `f64`,
//! so a save/load round trip is bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Array;

const MAGIC: &str = "gata2floor-checkpoint";
pub const CHECKPOINT_VERSION: &str = "1";

pub fn write_checkpoint(mut w: impl Write, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    let io = |e| Error::Checkpoint(format!("write failed: {e}"));
    writeln!(w, "{MAGIC} {CHECKPOINT_VERSION}").map_err(io)?;
    writeln!(w, "config {}", serde_json::to_string(cfg)?).map_err(io)?;
    let sections = params
        .tensors()
        .map(|t| ("tensor", t))
        .chain(params.buffers().map(|b| ("buffer", b)));
    for (kind, (name, a)) in sections {
        let (r, c) = a.dims();
        writeln!(w, "{kind} {name} {r} {c}").map_err(io)?;
        let mut line = String::with_capacity(a.len() * 12);
        for (i, v) in a.data().iter().enumerate() {
            if i > 0 {
                line.push(' ');
            }
            line.push_str(&format!("{v:?}"));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    writeln!(w, "end").map_err(io)?;
    w.flush().map_err(io)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams, cfg: &ModelConfig) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), params, cfg)
}

pub fn read_checkpoint(r: impl BufRead) -> Result<(ModelConfig, ModelParams)> {
    let mut lines = r.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((i, Ok(l))) => Ok((i + 1, l)),
            Some((i, Err(e))) => Err(Error::Checkpoint(format!("line {}: {e}", i + 1))),
            None => Err(Error::Checkpoint(format!("file ends early: expected {what}"))),
        }
    };

    let (_, header) = next("header")?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::Checkpoint("not a checkpoint file (bad header)".into()));
    }
    let found = parts.next().unwrap_or("");
    if found != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: found.to_string(),
            expected: CHECKPOINT_VERSION,
        });
    }

    let (ln, cfg_line) = next("config line")?;
    let cfg_json = cfg_line
        .strip_prefix("config ")
        .ok_or_else(|| Error::Checkpoint(format!("line {ln}: expected `config {{...}}`")))?;
    let cfg: ModelConfig =
        serde_json::from_str(cfg_json).map_err(|e| Error::Checkpoint(format!("line {ln}: bad config: {e}")))?;
    cfg.validate()?;

    let mut tensors = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    loop {
        let (ln, head) = next("tensor header or `end`")?;
        if head.trim() == "end" {
            break;
        }
        let fields: Vec<&str> = head.split_whitespace().collect();
        let [kind, name, r, c] = fields[..] else {
            return Err(Error::Checkpoint(format!("line {ln}: malformed tensor header `{head}`")));
        };
        let dim = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("line {ln}: bad dimension `{s}`")))
        };
        let (r, c) = (dim(r)?, dim(c)?);
        let (vln, values) = next(&format!("values of `{name}`"))?;
        let data = values
            .split_whitespace()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Checkpoint(format!("line {vln}: bad number `{v}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if data.len() != r * c {
            return Err(Error::Checkpoint(format!(
                "line {vln}: `{name}` declares {r}x{c} but has {} values",
                data.len()
            )));
        }
        let target = match kind {
            "tensor" => &mut tensors,
            "buffer" => &mut buffers,
            other => return Err(Error::Checkpoint(format!("line {ln}: unknown section `{other}`"))),
        };
        if target.insert(name.to_string(), Array::matrix(r, c, data)).is_some() {
            return Err(Error::Checkpoint(format!("line {ln}: duplicate `{name}`")));
        }
    }
    let params = ModelParams::from_parts(tensors, buffers);
    params.check_against(&cfg)?;
    if !params.is_finite() {
        return Err(Error::Checkpoint("non-finite values".into()));
    }
    Ok((cfg, params))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, ModelParams)> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}
