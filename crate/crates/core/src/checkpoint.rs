//! Checkpoints: a flat little-endian binary of parameter arrays next to a
//! JSON manifest describing the network and its gate modes.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic "DSHRCKPT" | u32 version | u32 count
//! per parameter: u32 name_len | name | u8 frozen | u32 ndim | u64 dims… | f64 values…
//! ```

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Network, Param, ParamStore};
use crate::sharing::LayerShape;
use crate::tensor::Tensor;
use crate::training::SubstitutionState;

pub const MAGIC: &[u8; 8] = b"DSHRCKPT";
pub const VERSION: u32 = 1;

/// A trained network with its parameters and current gate modes.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub params: ParamStore,
    pub state: SubstitutionState,
    /// Sharpness used by any GELU-mode channel.
    pub gamma: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    /// File name of the parameter binary, relative to the manifest.
    params_file: String,
    shapes: Vec<LayerShape>,
    network: Network,
    state: SubstitutionState,
    gamma: f64,
}

pub fn encode_params(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.params.len() as u32).to_le_bytes());
    for p in &params.params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.frozen));
        out.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::data(
                self.path,
                format!("checkpoint truncated reading {what} at byte offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_params(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::data(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::data(path, format!("checkpoint version {version}, expected {VERSION}")));
    }
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count);
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::data(path, format!("parameter {i} has a non-UTF-8 name")))?
            .to_string();
        let frozen = match r.take(1, "frozen flag")?[0] {
            0 => false,
            1 => true,
            b => return Err(Error::data(path, format!("parameter {name}: frozen flag {b}"))),
        };
        let ndim = r.u32("rank")? as usize;
        let dims = (0..ndim)
            .map(|_| r.u64("dimension").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::data(path, "dimension overflow"))?, "values")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Param {
            name,
            value: Tensor::new(dims, data)?,
            grad: vec![0.0; n],
            velocity: vec![0.0; n],
            frozen,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::data(
            path,
            format!("{} trailing bytes after the last parameter", bytes.len() - r.pos),
        ));
    }
    Ok(ParamStore { params })
}

/// Manifest path for a parameter binary: `run.ckpt` pairs with `run.ckpt.json`.
pub fn manifest_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    /// Writes the binary and its manifest; returns both paths.
    pub fn save(&self, ckpt: &Path) -> Result<[PathBuf; 2]> {
        let manifest = Manifest {
            version: VERSION,
            params_file: ckpt
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            shapes: self.network.shapes().to_vec(),
            network: self.network.clone(),
            state: self.state.clone(),
            gamma: self.gamma,
        };
        std::fs::write(ckpt, encode_params(&self.params)).map_err(|e| Error::io(ckpt, e))?;
        let mpath = manifest_path(ckpt);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        Ok([ckpt.to_path_buf(), mpath])
    }

    pub fn load(ckpt: &Path) -> Result<Checkpoint> {
        let mpath = manifest_path(ckpt);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let m: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::data(&mpath, format!("bad manifest: {e}")))?;
        if m.version != VERSION {
            return Err(Error::data(&mpath, format!("manifest version {}, expected {VERSION}", m.version)));
        }
        let network = m.network.rebuild().map_err(|e| Error::data(&mpath, e.to_string()))?;
        if network.shapes() != m.shapes.as_slice() {
            return Err(Error::data(&mpath, "recorded shapes disagree with the architecture"));
        }
        let bytes = std::fs::read(ckpt).map_err(|e| Error::io(ckpt, e))?;
        let params = decode_params(&bytes, ckpt)?;
        let expected = network.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let layout = |s: &ParamStore| -> Vec<(String, Vec<usize>)> {
            s.params.iter().map(|p| (p.name.clone(), p.value.shape().to_vec())).collect()
        };
        if layout(&params) != layout(&expected) {
            return Err(Error::data(ckpt, "parameter names or shapes do not match the manifest network"));
        }
        if m.state.modes.len() != network.layers()
            || m.state.modes.iter().zip(network.shapes()).any(|(v, s)| v.len() != s.channels)
        {
            return Err(Error::data(&mpath, "gate modes do not match the network"));
        }
        Ok(Checkpoint {
            network,
            params,
            state: m.state,
            gamma: m.gamma,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gates::GateMode;
    use crate::model::Architecture;
    use crate::sharing::{build_groups, build_specs};

    fn sample() -> Checkpoint {
        let arch = Architecture {
            input: [1, 6, 6],
            layers: vec![
                crate::model::LayerDef::conv(4, 1),
                crate::model::LayerDef::conv(4, 1),
                crate::model::LayerDef::dense(5),
            ],
            classes: 3,
        };
        let shapes = arch.shapes().unwrap();
        let phi = build_groups(&shapes, true);
        let specs = build_specs(&shapes, &[2, 2, 3], &phi, true, true).unwrap();
        let network = Network::new(arch, specs).unwrap();
        let params = network.init_params(&mut ChaCha8Rng::seed_from_u64(5));
        let mut state = SubstitutionState::uniform(&network, GateMode::GeluGate { gamma: 1.0 });
        state.modes[2][4] = GateMode::Drelu;
        Checkpoint {
            network,
            params,
            state,
            gamma: 1.0,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let ck = sample();
        ck.save(&a).unwrap();
        let back = Checkpoint::load(&a).unwrap();
        assert_eq!(back.network, ck.network);
        assert_eq!(back.state, ck.state);
        for (x, y) in back.params.params.iter().zip(&ck.params.params) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.frozen, y.frozen);
            assert!(x.value.data().iter().zip(y.value.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
        }
        back.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let strip = |p: &Path| std::fs::read_to_string(manifest_path(p)).unwrap().replace("b.ckpt", "a.ckpt");
        assert_eq!(strip(&a), strip(&b));
    }

    #[test]
    fn truncation_and_magic_are_caught() {
        let bytes = encode_params(&sample().params);
        let e = decode_params(&bytes[..bytes.len() - 3], Path::new("t")).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_params(&bad, Path::new("t")).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode_params(&long, Path::new("t")).unwrap_err().to_string().contains("trailing"));
    }

    #[test]
    fn special_floats_survive() {
        let mut ck = sample();
        let v = ck.params.params[0].value.data().to_vec();
        let mut v2 = v.clone();
        v2[0] = -0.0;
        v2[1] = f64::MIN_POSITIVE / 2.0;
        ck.params.params[0].value = Tensor::new(ck.params.params[0].value.shape().to_vec(), v2.clone()).unwrap();
        let back = decode_params(&encode_params(&ck.params), Path::new("t")).unwrap();
        assert_eq!(back.params[0].value.data()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back.params[0].value.data()[1], v2[1]);
    }
}
