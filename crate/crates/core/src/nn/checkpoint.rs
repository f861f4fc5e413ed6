//! Checkpoint files: a text manifest followed by a little-endian `f32` payload.
//!
//! ```text
//! ACTSCHED-CHECKPOINT 1
//! meta <key> <value to end of line>
//! param <name> <rows> <cols> f32le
//! end
//! <payload: every parameter in manifest order, row-major>
//! ```

use std::fs;
use std::path::Path;

use super::params::{Mat, ParameterStore};
use crate::error::{Error, Result};

const MAGIC: &str = "ACTSCHED-CHECKPOINT 1";

pub fn encode_checkpoint(meta: &[(String, String)], store: &ParameterStore) -> Vec<u8> {
    let mut header = format!("{MAGIC}\n");
    for (k, v) in meta {
        assert!(!k.contains(char::is_whitespace) && !v.contains('\n'), "bad meta entry `{k}`");
        header.push_str(&format!("meta {k} {v}\n"));
    }
    for id in store.ids() {
        let (r, c) = store.value(id).dim();
        header.push_str(&format!("param {} {r} {c} f32le\n", store.name(id)));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    for id in store.ids() {
        for &v in store.value(id).iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Vec<(String, String)>, ParameterStore)> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated manifest".into()))?;
        pos += nl + 1;
        std::str::from_utf8(&rest[..nl]).map_err(|_| bad("manifest is not utf-8".into()))
    };
    if next_line()? != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let mut meta = Vec::new();
    let mut shapes = Vec::new();
    loop {
        let line = next_line()?;
        if line == "end" {
            break;
        }
        if let Some(rest) = line.strip_prefix("meta ") {
            let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
            meta.push((k.to_string(), v.to_string()));
        } else if let Some(rest) = line.strip_prefix("param ") {
            let f: Vec<&str> = rest.split(' ').collect();
            if f.len() != 4 || f[3] != "f32le" {
                return Err(bad(format!("bad param line `{line}`")));
            }
            let dim = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad dimension in `{line}`")));
            shapes.push((f[0].to_string(), dim(f[1])?, dim(f[2])?));
        } else {
            return Err(bad(format!("unexpected manifest line `{line}`")));
        }
    }
    let payload = &bytes[pos..];
    let expected: usize = shapes.iter().map(|(_, r, c)| r * c * 4).sum();
    if payload.len() != expected {
        return Err(bad(format!("payload has {} bytes, manifest needs {expected}", payload.len())));
    }
    let mut store = ParameterStore::new();
    let mut floats = payload
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])));
    for (name, r, c) in shapes {
        let values: Vec<f64> = floats.by_ref().take(r * c).collect();
        store.add(name, Mat::from_shape_vec((r, c), values).expect("shape checked"));
    }
    Ok((meta, store))
}

pub fn save_checkpoint(path: &Path, meta: &[(String, String)], store: &ParameterStore) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, encode_checkpoint(meta, store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Vec<(String, String)>, ParameterStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParameterStore::new();
        s.add_uniform("enc.w", 4, 7, 4, &mut rng);
        s.add_uniform("enc.b", 1, 7, 4, &mut rng);
        let meta = vec![("kind".to_string(), "ActVae".to_string()), ("hash".into(), "00ff".into())];
        let bytes = encode_checkpoint(&meta, &s);
        let (m2, s2) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(m2, meta);
        for id in s.ids() {
            assert_eq!(s.name(id), s2.name(id));
            let a: Vec<u64> = s.value(id).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = s2.value(id).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        assert_eq!(encode_checkpoint(&m2, &s2), bytes);
    }

    #[test]
    fn rejects_truncated_payload() {
        let mut s = ParameterStore::new();
        s.add("w", Mat::ones((2, 2)));
        let mut bytes = encode_checkpoint(&[], &s);
        bytes.pop();
        assert!(decode_checkpoint(&bytes).is_err());
        assert!(decode_checkpoint(b"garbage\n").is_err());
    }

    proptest! {
        #[test]
        fn any_f32_values_survive(vals in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let mut s = ParameterStore::new();
            let n = vals.len();
            s.add("p", Mat::from_shape_vec((1, n), vals.iter().map(|&v| f64::from(v)).collect()).unwrap());
            let (_, back) = decode_checkpoint(&encode_checkpoint(&[], &s)).unwrap();
            let id = back.id("p").unwrap();
            for (a, &b) in back.value(id).iter().zip(&vals) {
                prop_assert_eq!(a.to_bits(), f64::from(b).to_bits());
            }
        }
    }
}
