//! Parameter checkpoints: a text header listing every key with its dtype
//! and shape, a `---` line, then each tensor as little-endian `f32` in
//! header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &str = "fedskel-checkpoint v1";

pub fn encode<T: Scalar>(params: &ParamSet<T>) -> Vec<u8> {
    let mut out = Vec::new();
    writeln!(out, "{MAGIC}").unwrap();
    writeln!(out, "keys {}", params.len()).unwrap();
    for (k, t) in params.iter() {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        writeln!(out, "{k}\tf32\t{}", shape.join("x")).unwrap();
    }
    writeln!(out, "---").unwrap();
    for (_, t) in params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<ParamSet<T>> {
    let mut pos = 0;
    let mut line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("truncated header"))?;
        pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))
    };
    if line()? != MAGIC {
        return Err(bad("not a checkpoint (bad magic line)"));
    }
    let count: usize = line()?
        .strip_prefix("keys ")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| bad("missing key count"))?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let l = line()?;
        let mut parts = l.split('\t');
        let (Some(name), Some(dtype), Some(shape), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
            return Err(bad(format!("malformed manifest line `{l}`")));
        };
        if dtype != "f32" {
            return Err(bad(format!("unsupported dtype `{dtype}` for `{name}`")));
        }
        let shape: Vec<usize> = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape `{shape}` for `{name}`"))))
                .collect::<Result<_>>()?
        };
        manifest.push((name.to_owned(), shape));
    }
    if line()? != "---" {
        return Err(bad("missing header terminator"));
    }
    let mut params = ParamSet::new();
    let mut body = &bytes[pos..];
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        if body.len() < 4 * n {
            return Err(bad(format!("data for `{name}` is truncated")));
        }
        let data = body[..4 * n]
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        body = &body[4 * n..];
        params.insert(name, Tensor::new(shape, data)?);
    }
    if !body.is_empty() {
        return Err(bad(format!("{} trailing bytes", body.len())));
    }
    Ok(params)
}

pub fn save<T: Scalar>(path: &Path, params: &ParamSet<T>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(params))?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<ParamSet<T>> {
    let bytes = fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

/// Key names listed in a checkpoint header, without decoding the data.
pub fn manifest_keys(bytes: &[u8]) -> Result<Vec<String>> {
    let text = match bytes.windows(5).position(|w| w == b"\n---\n") {
        Some(end) => &bytes[..end],
        None => return Err(bad("missing header terminator")),
    };
    let text = std::str::from_utf8(text).map_err(|_| bad("header is not UTF-8"))?;
    Ok(text
        .lines()
        .skip(2)
        .filter_map(|l| l.split('\t').next().map(str::to_owned))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_f32_values() {
        let mut p = ParamSet::<f32>::new();
        p.insert("backbone.w", Tensor::from_vec(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-7, -1e9]).unwrap());
        p.insert("coef.block0.alpha", Tensor::scalar(0.5));
        let bytes = encode(&p);
        assert_eq!(decode::<f32>(&bytes).unwrap(), p);
        assert_eq!(manifest_keys(&bytes).unwrap(), vec!["backbone.w", "coef.block0.alpha"]);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.insert("a", Tensor::ones(&[4]));
        let bytes = encode(&p);
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode::<f32>(b"hello\n").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode::<f32>(&extra).is_err());
    }
}
