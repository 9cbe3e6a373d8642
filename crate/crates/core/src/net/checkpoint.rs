//! Checkpoint = text manifest + little-endian f64 payload at `<manifest>.bin`.
//!
//! ```text
//! dualshot-checkpoint 1
//! config input_size = 160
//! tensor backbone.1.0.kernel 8 3 3 3 0
//! tensor backbone.1.0.bias 1 8 1 1 216
//! ```
//! The last field of a tensor line is its offset in values, not bytes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::Shape;

use super::{NetConfig, Network};

const MAGIC: &str = "dualshot-checkpoint 1";

fn payload_path(manifest: &Path) -> PathBuf {
    let mut s = manifest.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

/// Writes the manifest to `path` and the payload beside it; returns the payload path.
pub fn save_checkpoint(net: &Network, path: &Path) -> Result<PathBuf> {
    let mut manifest = format!("{MAGIC}\n");
    for line in net.config().to_config().render().lines() {
        let _ = writeln!(manifest, "config {line}");
    }
    let mut payload = Vec::new();
    let mut offset = 0usize;
    for (name, p) in net.params() {
        for (suffix, shape, data) in [
            ("kernel", p.kernel.shape(), p.kernel.data()),
            ("bias", Shape::new(1, p.bias.len(), 1, 1), p.bias.as_slice()),
        ] {
            let _ = writeln!(
                manifest,
                "tensor {name}.{suffix} {} {} {} {} {offset}",
                shape.batch, shape.channels, shape.height, shape.width
            );
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            offset += data.len();
        }
    }
    let bin = payload_path(path);
    fs::write(path, manifest)?;
    fs::write(&bin, payload)?;
    Ok(bin)
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let text = fs::read_to_string(path)?;
    let bytes = fs::read(payload_path(path))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::parse(0, "payload length is not a multiple of 8 bytes"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();

    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(Error::parse(1, "missing checkpoint header")),
    }
    let mut cfg_text = String::new();
    let mut tensors: HashMap<String, (usize, Shape, usize)> = HashMap::new();
    for (i, line) in lines {
        let ln = i + 1;
        if let Some(rest) = line.strip_prefix("config ") {
            cfg_text.push_str(rest);
            cfg_text.push('\n');
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            if f.len() != 6 {
                return Err(Error::parse(ln, "tensor line needs name, 4 dims and an offset"));
            }
            let n: Vec<usize> = f[1..]
                .iter()
                .map(|s| s.parse().map_err(|_| Error::parse(ln, format!("bad number `{s}`"))))
                .collect::<Result<_>>()?;
            tensors.insert(f[0].to_string(), (ln, Shape::new(n[0], n[1], n[2], n[3]), n[4]));
        } else if !line.trim().is_empty() {
            return Err(Error::parse(ln, format!("unrecognized line `{line}`")));
        }
    }
    let cfg = NetConfig::from_config(&Config::parse(&cfg_text)?)?;
    let mut net = Network::build(&cfg)?;
    let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(net.params_mut()) {
        let mut fetch = |suffix: &str, want: Shape| -> Result<Vec<f64>> {
            let key = format!("{name}.{suffix}");
            let (ln, shape, off) = tensors
                .remove(&key)
                .ok_or_else(|| Error::parse(0, format!("checkpoint lacks `{key}`")))?;
            if shape != want {
                return Err(Error::parse(ln, format!("`{key}` is {shape}, network expects {want}")));
            }
            values
                .get(off..off + shape.numel())
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::parse(ln, format!("`{key}` runs past the payload")))
        };
        let k = fetch("kernel", p.kernel.shape())?;
        let b = fetch("bias", Shape::new(1, p.bias.len(), 1, 1))?;
        p.kernel.data_mut().copy_from_slice(&k);
        p.bias.copy_from_slice(&b);
    }
    if let Some((name, (ln, _, _))) = tensors.iter().next() {
        return Err(Error::parse(*ln, format!("unexpected tensor `{name}`")));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn roundtrip_is_bit_exact() {
        let cfg = NetConfig {
            input_size: 64,
            backbone_channels: [3, 4, 5, 3, 3, 3],
            fem_channels: 6,
            seed: 17,
            ..NetConfig::default()
        };
        let net = Network::build(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.ckpt");
        let bin = save_checkpoint(&net, &path).unwrap();
        assert!(bin.exists());
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, net);
        let img = Tensor::full(Shape::new(1, 3, 64, 64), 0.7);
        assert_eq!(back.forward_dual(&img).unwrap(), net.forward_dual(&img).unwrap());
    }

    #[test]
    fn detects_corruption() {
        let net = Network::build(&NetConfig {
            input_size: 64,
            backbone_channels: [3; 6],
            fem_channels: 3,
            ..NetConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let bin = save_checkpoint(&net, &path).unwrap();
        let full = fs::read(&bin).unwrap();
        fs::write(&bin, &full[..full.len() - 8]).unwrap();
        assert!(load_checkpoint(&path).is_err());
        fs::write(&bin, &full).unwrap();
        let text = fs::read_to_string(&path).unwrap().replace("head.second.6.loc.bias", "head.second.6.loc.b");
        fs::write(&path, text).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
