//! Binary weights files and the line-oriented graph description.
//!
//! Weights: `DRNW`, version byte, `u32` record count, then per record a
//! `u16` name length, the UTF-8 name, a `u8` rank, `rank` × `u32` extents and
//! the `f32` payload, all little-endian. Records are written in name order.
//! Per-channel vectors are stored with rank 1.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use super::{build, expected_records, ArchFamily, ModelGraph, WidthMultiplier, Weights};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"DRNW";
const VERSION: u8 = 1;

fn stored_dims(s: Shape) -> Vec<usize> {
    if s.n == 1 && s.h == 1 && s.w == 1 {
        vec![s.c]
    } else {
        s.dims().to_vec()
    }
}

fn shape_from_dims(name: &str, dims: &[usize]) -> Result<Shape> {
    let bad = |reason: String| Error::WeightRecord {
        name: name.to_string(),
        reason,
    };
    let shape = match *dims {
        [c] => Shape::new(1, c, 1, 1),
        [n, c] => Shape::new(n, c, 1, 1),
        [c, h, w] => Shape::new(1, c, h, w),
        [n, c, h, w] => Shape::new(n, c, h, w),
        _ => return Err(bad(format!("unsupported rank {}", dims.len()))),
    };
    shape.map_err(|e| bad(e.to_string()))
}

pub fn write_weights(weights: &Weights, mut out: impl Write) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.extend_from_slice(&(weights.len() as u32).to_le_bytes());
    for (name, t) in weights {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::InvalidArgument(format!("record name too long: {name}")))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let dims = stored_dims(t.shape());
        buf.push(dims.len() as u8);
        for d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

fn take<'a>(data: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if data.len() < n {
        return Err(Error::format("weights", format!("truncated {what}")));
    }
    let (head, tail) = data.split_at(n);
    *data = tail;
    Ok(head)
}

fn read_u32(data: &mut &[u8], what: &str) -> Result<u32> {
    Ok(u32::from_le_bytes(take(data, 4, what)?.try_into().unwrap()))
}

pub fn read_weights(mut input: impl Read) -> Result<Weights> {
    let mut raw = Vec::new();
    input.read_to_end(&mut raw)?;
    let mut data = raw.as_slice();
    if take(&mut data, 4, "magic")? != MAGIC {
        return Err(Error::format("weights", "bad magic"));
    }
    let version = take(&mut data, 1, "version")?[0];
    if version != VERSION {
        return Err(Error::format("weights", format!("unsupported version {version}")));
    }
    let count = read_u32(&mut data, "record count")?;
    let mut weights = Weights::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(take(&mut data, 2, "name length")?.try_into().unwrap());
        let name = std::str::from_utf8(take(&mut data, len as usize, "name")?)
            .map_err(|_| Error::format("weights", "record name is not UTF-8"))?
            .to_string();
        let rank = take(&mut data, 1, "rank")?[0] as usize;
        let dims = (0..rank)
            .map(|_| read_u32(&mut data, "extent").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let shape = shape_from_dims(&name, &dims)?;
        let payload = take(&mut data, shape.numel() * 4, &format!("payload of `{name}`"))?;
        let values = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if weights.insert(name.clone(), Tensor::from_vec(shape, values)?).is_some() {
            return Err(Error::WeightRecord {
                name,
                reason: "duplicate record".into(),
            });
        }
    }
    if !data.is_empty() {
        return Err(Error::format("weights", format!("{} trailing bytes", data.len())));
    }
    Ok(weights)
}

pub fn save_weights(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_weights(&model.weights, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Replaces `model`'s weights with the file's, after checking every record
/// name and shape against the graph.
pub fn load_weights(model: &mut ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let loaded = read_weights(BufReader::new(file))?;
    bind_weights(model, loaded)
}

fn bind_weights(model: &mut ModelGraph, loaded: Weights) -> Result<()> {
    let expected = expected_records(model);
    for (name, shape) in &expected {
        match loaded.get(name) {
            None => {
                return Err(Error::WeightRecord {
                    name: name.clone(),
                    reason: "missing from file".into(),
                })
            }
            Some(t) if t.shape() != *shape => {
                return Err(Error::WeightRecord {
                    name: name.clone(),
                    reason: format!("shape {} does not match graph shape {shape}", t.shape()),
                })
            }
            _ => {}
        }
    }
    if let Some(extra) = loaded.keys().find(|k| !expected.iter().any(|(n, _)| n == *k)) {
        return Err(Error::WeightRecord {
            name: extra.clone(),
            reason: "not part of the graph".into(),
        });
    }
    model.weights = loaded;
    Ok(())
}

/// Graph description text.
pub fn graph_text(model: &ModelGraph) -> String {
    let mut s = format!(
        "model arch={} depth={} classes={} width={} in_channels={}\n",
        model.family, model.depth, model.n_classes, model.width, model.in_channels
    );
    for l in &model.levels {
        s.push_str(&format!(
            "level {} kind={} blocks={} channels={} stride={} dilation={} residual={}\n",
            l.index,
            l.kind().as_str(),
            l.blocks.len(),
            l.out_channels(),
            l.stride(),
            l.dilation,
            u8::from(l.has_residual()),
        ));
    }
    s
}

fn graph_err(line: usize, reason: impl Into<String>) -> Error {
    Error::format("graph", format!("line {line}: {}", reason.into()))
}

fn fields(line_no: usize, rest: &str) -> Result<Vec<(String, String)>> {
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| graph_err(line_no, format!("expected key=value, got `{kv}`")))
        })
        .collect()
}

fn field<'a>(fs: &'a [(String, String)], key: &str, line: usize) -> Result<&'a str> {
    fs.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| graph_err(line, format!("missing `{key}`")))
}

fn num(fs: &[(String, String)], key: &str, line: usize) -> Result<usize> {
    field(fs, key, line)?
        .parse()
        .map_err(|_| graph_err(line, format!("`{key}` is not an integer")))
}

/// Parses a graph description and rebuilds the matching architecture with
/// freshly initialized weights. Every level line must agree with the rebuild.
pub fn parse_graph(text: &str) -> Result<ModelGraph> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (ln, header) = lines.next().ok_or_else(|| graph_err(1, "empty graph"))?;
    let rest = header
        .strip_prefix("model ")
        .ok_or_else(|| graph_err(ln, "expected `model` header"))?;
    let fs = fields(ln, rest)?;
    let family: ArchFamily = field(&fs, "arch", ln)?.parse()?;
    let width: WidthMultiplier = field(&fs, "width", ln)?.parse()?;
    let model = build(family, num(&fs, "depth", ln)?, num(&fs, "classes", ln)?, width, 0)?;
    if num(&fs, "in_channels", ln)? != model.in_channels {
        return Err(graph_err(ln, "only 3-channel inputs are supported"));
    }
    let mut seen = 0;
    for (ln, line) in lines {
        let rest = line
            .strip_prefix("level ")
            .ok_or_else(|| graph_err(ln, "expected `level` line"))?;
        let (idx, rest) = rest.split_once(' ').unwrap_or((rest, ""));
        let idx: usize = idx.parse().map_err(|_| graph_err(ln, "bad level index"))?;
        let fs = fields(ln, rest)?;
        let level = model.level(idx).map_err(|e| graph_err(ln, e.to_string()))?;
        let checks = [
            ("kind", level.kind().as_str().to_string(), field(&fs, "kind", ln)?.to_string()),
            ("blocks", level.blocks.len().to_string(), num(&fs, "blocks", ln)?.to_string()),
            ("channels", level.out_channels().to_string(), num(&fs, "channels", ln)?.to_string()),
            ("stride", level.stride().to_string(), num(&fs, "stride", ln)?.to_string()),
            ("dilation", level.dilation.to_string(), num(&fs, "dilation", ln)?.to_string()),
            (
                "residual",
                u8::from(level.has_residual()).to_string(),
                num(&fs, "residual", ln)?.to_string(),
            ),
        ];
        for (key, want, got) in checks {
            if want != got {
                return Err(graph_err(
                    ln,
                    format!("level {idx} {key}={got} disagrees with {} ({want})", model.name()),
                ));
            }
        }
        seen += 1;
    }
    if seen != model.levels.len() {
        return Err(graph_err(
            ln,
            format!("{} describes {seen} levels, expected {}", model.name(), model.levels.len()),
        ));
    }
    Ok(model)
}

pub fn save_graph(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    if model.family == ArchFamily::Custom {
        return Err(Error::Unsupported("custom graphs cannot be serialized".into()));
    }
    let path = path.as_ref();
    std::fs::write(path, graph_text(model)).map_err(|e| Error::io(path, e))
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_graph(&text)
}

/// Sidecar graph path for a weights file (`m.drnw` → `m.graph`).
pub fn graph_path(weights: impl AsRef<Path>) -> PathBuf {
    weights.as_ref().with_extension("graph")
}

/// Writes the weights file and its graph sidecar.
pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    save_graph(model, graph_path(&path))?;
    save_weights(model, path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    let mut model = load_graph(graph_path(&path))?;
    load_weights(&mut model, path)?;
    Ok(model)
}
