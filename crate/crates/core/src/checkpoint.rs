//! Plain-text model checkpoints.
//!
//! ```text
//! gatemem-checkpoint 1
//! config {"vocab_size":32,...}
//! param embedding 32 32
//! 0.0123 -0.0456 ...
//! memory 16 32
//! ...
//! end
//! ```
//!
//! Every block is a header line naming the block and its shape, followed by
//! one line of space-separated values. Values are written with the shortest
//! representation that parses back to the same `f64`, so loading a
//! checkpoint and saving it again reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &str = "gatemem-checkpoint 1";

fn write_block(out: &mut String, header: &str, t: &Tensor) {
    out.push_str(header);
    for d in t.shape() {
        let _ = write!(out, " {d}");
    }
    out.push('\n');
    for (i, x) in t.data().iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{x:?}");
    }
    out.push('\n');
}

pub fn to_text(model: &Model) -> Result<String> {
    let mut out = String::new();
    out.push_str(MAGIC);
    out.push('\n');
    out.push_str("config ");
    out.push_str(&serde_json::to_string(&model.config)?);
    out.push('\n');
    for (name, t) in model.params.iter() {
        write_block(&mut out, &format!("param {name}"), t);
    }
    write_block(&mut out, "memory", &model.params.memory_init);
    out.push_str("end\n");
    Ok(out)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| Error::Checkpoint(format!("unexpected end of file, expected {what}")))
    }
}

fn parse_block(header: &str, line_no: usize, lines: &mut Lines<'_>) -> Result<(String, Tensor)> {
    let mut fields = header.split(' ');
    let kind = fields.next().unwrap_or_default();
    let name = if kind == "param" {
        fields
            .next()
            .ok_or_else(|| {
                Error::Checkpoint(format!("line {line_no}: parameter block without a name"))
            })?
            .to_string()
    } else {
        kind.to_string()
    };
    let shape = fields
        .map(|f| {
            f.parse::<usize>().map_err(|_| {
                Error::Checkpoint(format!("line {line_no}: bad extent `{f}` in `{header}`"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (data_no, data_line) = lines.next("values")?;
    let data = data_line
        .split(' ')
        .map(|v| {
            v.parse::<f64>()
                .map_err(|_| Error::Checkpoint(format!("line {data_no}: bad value `{v}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::Checkpoint(format!(
            "line {data_no}: non-finite value in `{name}`"
        )));
    }
    let t = Tensor::new(shape.clone(), data)
        .map_err(|e| Error::Checkpoint(format!("line {line_no}: {e}")))?;
    Ok((name, t))
}

pub fn from_text(text: &str) -> Result<Model> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (_, magic) = lines.next("header")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "line 1: expected `{MAGIC}`, found `{magic}`"
        )));
    }
    let (no, config_line) = lines.next("config")?;
    let json = config_line
        .strip_prefix("config ")
        .ok_or_else(|| Error::Checkpoint(format!("line {no}: expected a config line")))?;
    let config: ModelConfig =
        serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("line {no}: {e}")))?;

    let mut blocks = Vec::new();
    let mut memory = None;
    loop {
        let (no, header) = lines.next("a block or `end`")?;
        if header == "end" {
            break;
        }
        if header.starts_with("param ") {
            blocks.push(parse_block(header, no, &mut lines)?);
        } else if header.starts_with("memory ") {
            if memory.is_some() {
                return Err(Error::Checkpoint(format!("line {no}: second memory block")));
            }
            memory = Some(parse_block(header, no, &mut lines)?.1);
        } else {
            return Err(Error::Checkpoint(format!(
                "line {no}: unexpected `{header}`"
            )));
        }
    }
    if let Some((no, extra)) = lines.inner.next() {
        return Err(Error::Checkpoint(format!(
            "line {}: trailing content `{extra}`",
            no + 1
        )));
    }
    let memory = memory.ok_or_else(|| Error::Checkpoint("no memory block".into()))?;
    let params = ModelParams::from_blocks(blocks, memory);
    Model::from_parts(config, params).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, to_text(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text)
}
