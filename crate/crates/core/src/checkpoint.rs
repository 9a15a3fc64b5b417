//! Plain-text policy checkpoints.
//!
//! ```text
//! iqlab-policy v1 kind=tabular V=8 k=1 eos=0
//! <V logits of row 0>
//! <V logits of row 1>
//! ...
//! ```
//!
//! Neural checkpoints add `h=<hidden>` to the header and hold one parameter
//! block per line (W1 rows, b1, W2 rows, b2). Every number is written with 17
//! significant digits, so a reload is bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::format_float;
use crate::policy::{AnyPolicy, NeuralPolicy, ParametricPolicy, TabularPolicy, Vocab};

pub const MAGIC: &str = "iqlab-policy";
pub const VERSION: u32 = 1;

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format_float(*v)).collect::<Vec<_>>().join(" ")
}

pub fn to_text(policy: &AnyPolicy) -> String {
    let vocab = crate::policy::ConditionalPolicy::vocab(policy);
    let (v, k, eos) = (vocab.size(), policy.window(), vocab.eos().0);
    let params = policy.params();
    let mut out = String::new();
    match policy {
        AnyPolicy::Tabular(_) => {
            out.push_str(&format!("{MAGIC} v{VERSION} kind=tabular V={v} k={k} eos={eos}\n"));
            for row in params.chunks(v) {
                out.push_str(&join(row));
                out.push('\n');
            }
        }
        AnyPolicy::Neural(p) => {
            let h = p.hidden();
            out.push_str(&format!("{MAGIC} v{VERSION} kind=neural V={v} k={k} h={h} eos={eos}\n"));
            let input = k * (v + 1);
            let mut blocks: Vec<usize> = vec![input; h];
            blocks.push(h);
            blocks.extend(std::iter::repeat_n(h, v));
            blocks.push(v);
            let mut rest = params;
            for len in blocks {
                let (block, tail) = rest.split_at(len);
                out.push_str(&join(block));
                out.push('\n');
                rest = tail;
            }
        }
    }
    out
}

fn header_field<'a>(fields: &'a [(&'a str, &'a str)], key: &str) -> Option<&'a str> {
    fields.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
}

fn parse_usize(fields: &[(&str, &str)], key: &str) -> Result<usize> {
    let raw = header_field(fields, key).ok_or_else(|| Error::Checkpoint(format!("header lacks `{key}`")))?;
    raw.parse()
        .map_err(|_| Error::Checkpoint(format!("header field `{key}={raw}` is not an integer")))
}

pub fn from_text(text: &str) -> Result<AnyPolicy> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Checkpoint("empty checkpoint".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some(MAGIC) {
        return Err(Error::Checkpoint(format!(
            "not a policy checkpoint (expected `{MAGIC}` header)"
        )));
    }
    let version = parts.next().unwrap_or("");
    if version != format!("v{VERSION}") {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version `{version}` (this reader handles v{VERSION})"
        )));
    }
    let fields: Vec<(&str, &str)> = parts
        .map(|p| {
            p.split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("malformed header field `{p}`")))
        })
        .collect::<Result<_>>()?;
    let v = parse_usize(&fields, "V")?;
    let k = parse_usize(&fields, "k")?;
    let eos = match header_field(&fields, "eos") {
        Some(_) => parse_usize(&fields, "eos")?,
        None => 0,
    };
    let vocab = Vocab::new(v, eos as u32).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let params: Vec<f64> = lines
        .flat_map(str::split_whitespace)
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Checkpoint(format!("bad number `{s}`")))
        })
        .collect::<Result<_>>()?;
    let policy = match header_field(&fields, "kind") {
        Some("tabular") => TabularPolicy::from_logits(vocab, k, params).map(AnyPolicy::from),
        Some("neural") => {
            let h = parse_usize(&fields, "h")?;
            NeuralPolicy::from_params(vocab, k, h, params).map(AnyPolicy::from)
        }
        Some(other) => return Err(Error::Checkpoint(format!("unknown policy kind `{other}`"))),
        None => return Err(Error::Checkpoint("header lacks `kind`".into())),
    };
    policy.map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn save(policy: &AnyPolicy, path: &Path) -> Result<()> {
    fs::write(path, to_text(policy))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<AnyPolicy> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_text(&text)
}
