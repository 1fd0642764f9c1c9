//! Bit-exact parameter files.
//!
//! ```text
//! CORGI-CKPT v1
//! layer1.P<TAB>64<TAB>128
//! 0x1.5bf0a8b145769p-3 -0x1.8p+1 ...
//! ```
//!
//! Values are C99-style hexadecimal float literals, so a save/load round trip
//! reproduces every bit.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_HEADER: &str = "CORGI-CKPT v1";

/// Formats `v` as a hexadecimal float literal (`-0x1.8p+1`).
pub fn format_hex_float(v: f64) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    let sign = if v.is_sign_negative() { "-" } else { "" };
    if v.is_infinite() {
        return format!("{sign}inf");
    }
    let bits = v.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    if exp == 0 && mant == 0 {
        return format!("{sign}0x0p+0");
    }
    let (lead, e) = if exp == 0 { (0, -1022) } else { (1, exp - 1023) };
    if mant == 0 {
        return format!("{sign}0x{lead}p{e:+}");
    }
    let frac = format!("{mant:013x}");
    format!("{sign}0x{lead}.{}p{e:+}", frac.trim_end_matches('0'))
}

/// Parses a literal produced by [`format_hex_float`]. Plain decimal floats are
/// accepted as well.
pub fn parse_hex_float(s: &str) -> Option<f64> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(rest) => (true, rest),
        None => (false, s.strip_prefix('+').unwrap_or(s)),
    };
    let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) else {
        return s.parse().ok();
    };
    let (mantissa, exp) = hex.split_once(['p', 'P'])?;
    let exp: i64 = exp.parse().ok()?;
    let (lead, frac) = mantissa.split_once('.').unwrap_or((mantissa, ""));
    if frac.len() > 13 || !frac.chars().all(|c| c.is_ascii_hexdigit()) {
        return None;
    }
    let frac_bits = if frac.is_empty() {
        0
    } else {
        u64::from_str_radix(frac, 16).ok()? << (4 * (13 - frac.len()))
    };
    let bits = match lead {
        "1" if (-1022..=1023).contains(&exp) => (((exp + 1023) as u64) << 52) | frac_bits,
        "0" if frac_bits == 0 => 0,
        "0" if exp == -1022 => frac_bits,
        _ => return None,
    };
    let v = f64::from_bits(bits);
    Some(if neg { -v } else { v })
}

pub fn write_records<'a, I>(path: &Path, records: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{CHECKPOINT_HEADER}").map_err(io)?;
    for (name, t) in records {
        writeln!(w, "{name}\t{}\t{}", t.rows(), t.cols()).map_err(io)?;
        let line: Vec<String> = t.data().iter().map(|&v| format_hex_float(v)).collect();
        writeln!(w, "{}", line.join(" ")).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = path.display().to_string();
    let parse_err = |line: usize, message: String| Error::Parse {
        file: file.clone(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CHECKPOINT_HEADER => {}
        Some((_, h)) => return Err(Error::FormatVersionMismatch(format!("{file}: header `{h}`"))),
        None => return Err(Error::FormatVersionMismatch(format!("{file}: empty file"))),
    }
    let mut out = Vec::new();
    while let Some((ln, head)) = lines.next() {
        if head.is_empty() {
            continue;
        }
        let fields: Vec<&str> = head.split('\t').collect();
        let [name, rows, cols] = fields[..] else {
            return Err(parse_err(ln + 1, format!("bad record header `{head}`")));
        };
        let rows: usize = rows
            .parse()
            .map_err(|_| parse_err(ln + 1, format!("bad row count `{rows}`")))?;
        let cols: usize = cols
            .parse()
            .map_err(|_| parse_err(ln + 1, format!("bad column count `{cols}`")))?;
        let Some((vln, values)) = lines.next() else {
            return Err(parse_err(ln + 2, format!("missing values for `{name}`")));
        };
        let data = values
            .split_whitespace()
            .map(|tok| {
                parse_hex_float(tok).ok_or_else(|| parse_err(vln + 1, format!("bad float `{tok}`")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if data.len() != rows * cols {
            return Err(parse_err(
                vln + 1,
                format!("`{name}` has {} values, expected {}", data.len(), rows * cols),
            ));
        }
        out.push((name.to_owned(), Tensor::from_vec(rows, cols, data)?));
    }
    Ok(out)
}

pub fn save_checkpoint(path: &Path, params: &ParamStore) -> Result<()> {
    write_records(path, params.iter().map(|p| (p.name.as_str(), &p.value)))
}

/// Loads values into a copy of `template`, which fixes the expected names,
/// shapes and trainability.
pub fn load_checkpoint(path: &Path, template: &ParamStore) -> Result<ParamStore> {
    let records = read_records(path)?;
    let mut out = template.clone();
    let mut seen = vec![false; template.len()];
    for (name, value) in records {
        let Some(idx) = template.index_of(&name) else {
            return Err(Error::shape(
                format!("parameter `{name}` (not part of this configuration)"),
                (0, 0),
                value.shape(),
            ));
        };
        let slot = out.get_mut(&name).expect("index_of agreed");
        if slot.shape() != value.shape() {
            return Err(Error::shape(format!("parameter `{name}`"), slot.shape(), value.shape()));
        }
        *slot = value;
        seen[idx] = true;
    }
    if let Some(missing) = template.names().zip(&seen).find(|(_, s)| !**s) {
        return Err(Error::Parse {
            file: path.display().to_string(),
            line: 0,
            message: format!("checkpoint ends before parameter `{}`", missing.0),
        });
    }
    Ok(out)
}
