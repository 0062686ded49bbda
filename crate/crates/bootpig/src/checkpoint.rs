//! Checkpoint serialization for named f32 parameter sets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "BPIG"                       magic, 4 bytes
//! version        u32           currently 1
//! config_len     u64           followed by config blob (canonical UTF-8 text)
//! param_count    u64
//! per parameter (in ParamSet name order):
//!   name_len     u64           followed by UTF-8 name bytes
//!   ndim         u32
//!   dims         ndim x u32
//!   values       prod(dims) x f32 (IEEE-754, little-endian)
//! checksum                     SHA-256 of everything above, 32 bytes
//! ```
//!
//! The format is byte-stable across platforms, so round-trips are bitwise and
//! checkpoint files can be compared with a plain byte diff.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::unet::ParamSet;

pub const MAGIC: &[u8; 4] = b"BPIG";
pub const VERSION: u32 = 1;

/// Serialize `params` plus an opaque config blob into checkpoint bytes.
pub fn to_bytes(config_blob: &str, params: &ParamSet<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(64 + config_blob.len() + 4 * params.num_scalars());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(config_blob.len() as u64).to_le_bytes());
    buf.extend_from_slice(config_blob.as_bytes());
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, p) in params.iter() {
        buf.extend_from_slice(&(name.len() as u64).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            let d = u32::try_from(d)
                .map_err(|_| Error::Config(format!("{name}: dim {d} exceeds u32")))?;
            buf.extend_from_slice(&d.to_le_bytes());
        }
        for &v in p.data.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

/// Parse checkpoint bytes back into (config blob, parameters).
pub fn from_bytes(bytes: &[u8]) -> Result<(String, ParamSet<f32>)> {
    let bad = |msg: &str| Error::Config(format!("checkpoint: {msg}"));
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(bad("file too short"));
    }
    let (body, checksum) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != checksum {
        return Err(bad("checksum mismatch (corrupt or truncated file)"));
    }

    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos.checked_add(n).filter(|&e| e <= body.len());
        let end = end.ok_or_else(|| bad("unexpected end of data"))?;
        let s = &body[pos..end];
        pos = end;
        Ok(s)
    };

    if take(4)? != MAGIC {
        return Err(bad("bad magic (not a checkpoint file)"));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unknown version {version}, expected {VERSION}")));
    }
    let config_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let config_blob = String::from_utf8(take(config_len)?.to_vec())
        .map_err(|_| bad("config blob is not UTF-8"))?;
    let param_count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;

    let mut params = ParamSet::new();
    for _ in 0..param_count {
        let name_len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| bad("parameter name is not UTF-8"))?;
        let ndim = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = take(4 * numel)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, shape, data)?;
    }
    if pos != body.len() {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok((config_blob, params))
}

pub fn save(path: &Path, config_blob: &str, params: &ParamSet<f32>) -> Result<()> {
    let bytes = to_bytes(config_blob, params)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(String, ParamSet<f32>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// SHA-256 hex digest of a serialized parameter set; handy for bitwise
/// equality assertions without keeping both byte buffers around.
pub fn params_digest(params: &ParamSet<f32>) -> Result<String> {
    let bytes = to_bytes("", params)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::unet::{MiniUNetConfig, UNet};
    use rand::Rng;

    fn sample_params() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        let mut r = rng::seeded(5);
        p.insert("b.conv.w", vec![2, 3, 3, 3], (0..54).map(|_| r.gen::<f32>()).collect())
            .unwrap();
        p.insert("a.scalar", vec![1], vec![-0.25]).unwrap();
        p.insert("c.mat", vec![4, 2], (0..8).map(|_| r.gen::<f32>() * 1e-7).collect())
            .unwrap();
        p
    }

    #[test]
    fn round_trip_is_bitwise() {
        let params = sample_params();
        let blob = "seed=7\nsteps=3000\n";
        let bytes = to_bytes(blob, &params).unwrap();
        let (blob2, params2) = from_bytes(&bytes).unwrap();
        assert_eq!(blob2, blob);
        assert_eq!(params2.len(), params.len());
        for (name, p) in params.iter() {
            let q = params2.get(name).unwrap();
            assert_eq!(q.shape, p.shape);
            // bitwise, not approximate
            let pa: Vec<u32> = p.data.iter().map(|v| v.to_bits()).collect();
            let qa: Vec<u32> = q.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(pa, qa);
        }
        // serialization is canonical: re-serializing gives identical bytes
        assert_eq!(to_bytes(blob, &params2).unwrap(), bytes);
    }

    #[test]
    fn round_trips_a_full_model() {
        let model = UNet::<f32>::init(MiniUNetConfig::desk(), 3).unwrap();
        let bytes = to_bytes("", &model.params).unwrap();
        let (_, loaded) = from_bytes(&bytes).unwrap();
        assert_eq!(params_digest(&loaded).unwrap(), params_digest(&model.params).unwrap());
    }

    #[test]
    fn rejects_bad_magic_version_and_checksum() {
        let params = sample_params();
        let good = to_bytes("", &params).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        // flipping a body byte also breaks the checksum; patch it to isolate
        // the magic check
        let err = from_bytes(&resign(&bad_magic)).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");

        let mut bad_version = good.clone();
        bad_version[4..8].copy_from_slice(&99u32.to_le_bytes());
        let err = from_bytes(&resign(&bad_version)).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");

        let mut corrupt = good.clone();
        let mid = corrupt.len() / 2;
        corrupt[mid] ^= 0xFF;
        let err = from_bytes(&corrupt).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");

        let truncated = &good[..good.len() - 7];
        assert!(from_bytes(truncated).is_err());
        assert!(from_bytes(b"BP").is_err());
    }

    fn resign(bytes: &[u8]) -> Vec<u8> {
        let body = &bytes[..bytes.len() - 32];
        let mut out = body.to_vec();
        out.extend_from_slice(&Sha256::digest(body));
        out
    }

    #[test]
    fn save_and_load_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bpig");
        let params = sample_params();
        save(&path, "k=v", &params).unwrap();
        let (blob, loaded) = load(&path).unwrap();
        assert_eq!(blob, "k=v");
        assert_eq!(params_digest(&loaded).unwrap(), params_digest(&params).unwrap());
        assert!(load(&dir.path().join("missing.bpig")).is_err());
    }
}
