//! The "LFSD" binary container used for model checkpoints and context banks.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic    b"LFSD"
//! version  u32
//! record   u32 length + UTF-8 JSON (object with a "kind" field)
//! count    u32
//! arrays   count × { u32 name length, name, u8 dtype (0 = f32, 1 = f64),
//!                    u32 ndim, ndim × u64 dims, data }
//! ```
//!
//! Parameters and contexts are written as f64 so a save/load round trip is
//! bit-exact; readers accept f32 arrays too.

use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::icgen::ContextBank;
use crate::latent::Latent;
use crate::nn::{Denoiser, DenoiserConfig};

pub const MAGIC: &[u8; 4] = b"LFSD";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl ArrayData {
    fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(v) => v.iter().map(|&x| f64::from(x)).collect(),
            ArrayData::F64(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub record: Value,
    pub arrays: Vec<Array>,
}

impl Container {
    pub fn kind(&self) -> Option<&str> {
        self.record.get("kind").and_then(Value::as_str)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let record = serde_json::to_vec(&self.record).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_len(&mut out, record.len())?;
        out.extend_from_slice(&record);
        put_len(&mut out, self.arrays.len())?;
        for a in &self.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Format(format!("array {} does not match its shape", a.name)));
            }
            put_len(&mut out, a.name.len())?;
            out.extend_from_slice(a.name.as_bytes());
            out.push(match a.data {
                ArrayData::F32(_) => DTYPE_F32,
                ArrayData::F64(_) => DTYPE_F64,
            });
            put_len(&mut out, a.shape.len())?;
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &a.data {
                ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not an LFSD container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}; expected version {VERSION}"
            )));
        }
        let len = r.u32()? as usize;
        let record: Value = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Format(format!("bad record: {e}")))?;
        let count = r.u32()? as usize;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(usize::try_from(r.u64()?).map_err(|_| Error::Format("dimension overflow".into()))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("array {name} is too large")))?;
            let data = match dtype {
                DTYPE_F32 => ArrayData::F32(
                    r.take_elems(n, 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DTYPE_F64 => ArrayData::F64(
                    r.take_elems(n, 8)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(Error::Format(format!("unknown dtype {other} for array {name}"))),
            };
            arrays.push(Array { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { record, arrays })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Format("length exceeds u32".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take_elems(&mut self, n: usize, width: usize) -> Result<&'a [u8]> {
        let bytes = n.checked_mul(width).ok_or_else(|| Error::Format("array too large".into()))?;
        self.take(bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn denoiser_container(model: &Denoiser) -> Container {
    let arrays = model
        .layout()
        .into_iter()
        .map(|e| Array {
            data: ArrayData::F64(model.params()[e.range()].to_vec()),
            name: e.name,
            shape: e.shape,
        })
        .collect();
    Container {
        record: json!({ "kind": "denoiser", "config": model.config() }),
        arrays,
    }
}

pub fn denoiser_from_container(c: &Container) -> Result<Denoiser> {
    if c.kind() != Some("denoiser") {
        return Err(Error::Format(format!("expected a denoiser, found {:?}", c.kind())));
    }
    let config: DenoiserConfig = serde_json::from_value(c.record["config"].clone())
        .map_err(|e| Error::Format(format!("bad denoiser config: {e}")))?;
    let errs = config.validate();
    if !errs.is_empty() {
        return Err(Error::Format(format!("invalid denoiser config: {}", Error::Config(errs))));
    }
    let mut model = Denoiser::from_params(config.clone(), vec![0.0; config.param_count()])?;
    let layout = model.layout();
    if layout.len() != c.arrays.len() {
        return Err(Error::Format(format!("expected {} arrays, found {}", layout.len(), c.arrays.len())));
    }
    for (entry, array) in layout.iter().zip(&c.arrays) {
        if entry.name != array.name || entry.shape != array.shape {
            return Err(Error::Format(format!(
                "array {} {:?} does not match expected {} {:?}",
                array.name, array.shape, entry.name, entry.shape
            )));
        }
        model.params_mut()[entry.range()].copy_from_slice(&array.data.to_f64());
    }
    Ok(model)
}

pub fn save_denoiser(model: &Denoiser, path: &Path) -> Result<()> {
    denoiser_container(model).save(path)
}

pub fn load_denoiser(path: &Path) -> Result<Denoiser> {
    denoiser_from_container(&Container::load(path)?)
}

pub fn bank_container(bank: &ContextBank) -> Container {
    let arrays = bank
        .entries()
        .map(|(session, entry)| {
            let dim = entry.latents[0].dim();
            Array {
                name: format!("ctx/{session}/{}", entry.token),
                shape: vec![entry.latents.len(), dim],
                data: ArrayData::F64(entry.latents.iter().flat_map(|l| l.iter().copied()).collect()),
            }
        })
        .collect();
    Container {
        record: json!({ "kind": "context_bank" }),
        arrays,
    }
}

pub fn bank_from_container(c: &Container) -> Result<ContextBank> {
    if c.kind() != Some("context_bank") {
        return Err(Error::Format(format!("expected a context bank, found {:?}", c.kind())));
    }
    let mut bank = ContextBank::new();
    for a in &c.arrays {
        let parsed = a
            .name
            .strip_prefix("ctx/")
            .and_then(|rest| rest.split_once('/'))
            .and_then(|(s, t)| Some((s.parse::<usize>().ok()?, t.parse::<usize>().ok()?)));
        let (session, token) = parsed.ok_or_else(|| Error::Format(format!("bad context array name {}", a.name)))?;
        let [m, dim] = a.shape[..] else {
            return Err(Error::Format(format!("context array {} must be 2-D", a.name)));
        };
        if m == 0 || dim == 0 {
            return Err(Error::Format(format!("context array {} is empty", a.name)));
        }
        let latents = a.data.to_f64().chunks(dim).map(|c| Latent(c.to_vec())).collect();
        bank.insert(session, token, latents)
            .map_err(|e| Error::Format(format!("inconsistent bank: {e}")))?;
    }
    Ok(bank)
}

pub fn save_bank(bank: &ContextBank, path: &Path) -> Result<()> {
    bank_container(bank).save(path)
}

pub fn load_bank(path: &Path) -> Result<ContextBank> {
    bank_from_container(&Container::load(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng::stream;

    fn model() -> Denoiser {
        let c = DenoiserConfig {
            data_dim: 2,
            hidden_dims: vec![5, 3],
            time_embed_dim: 4,
            vocab_size: 3,
            cond_embed_dim: 2,
            activation: Activation::Tanh,
        };
        Denoiser::init(c, &mut stream(4, "init")).unwrap()
    }

    #[test]
    fn denoiser_round_trip_is_bit_exact() {
        let m = model();
        let back = denoiser_from_container(&Container::decode(&denoiser_container(&m).encode().unwrap()).unwrap()).unwrap();
        assert_eq!(m.config(), back.config());
        let bits = |d: &Denoiser| d.params().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&m), bits(&back));
    }

    #[test]
    fn bank_round_trip() {
        let mut bank = ContextBank::new();
        bank.insert(1, 6, vec![Latent(vec![0.1, -2.0]), Latent(vec![1.0 / 3.0, 7.0])]).unwrap();
        bank.insert(2, 7, vec![Latent(vec![5.0, 5.0])]).unwrap();
        let c = bank_container(&bank);
        assert_eq!(c.arrays[0].name, "ctx/1/6");
        assert_eq!(bank_from_container(&Container::decode(&c.encode().unwrap()).unwrap()).unwrap(), bank);
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = denoiser_container(&model()).encode().unwrap();
        for cut in 0..bytes.len() {
            assert!(matches!(Container::decode(&bytes[..cut]), Err(Error::Format(_))), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(Container::decode(&long), Err(Error::Format(_))));
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = denoiser_container(&model()).encode().unwrap();
        bytes[4] = 2;
        match Container::decode(&bytes) {
            Err(Error::Format(msg)) => assert!(msg.contains("expected version 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
        bytes[0] = b'X';
        assert!(matches!(Container::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn f32_arrays_are_readable() {
        let c = Container {
            record: json!({"kind": "other"}),
            arrays: vec![Array {
                name: "x".into(),
                shape: vec![2],
                data: ArrayData::F32(vec![0.5, -1.25]),
            }],
        };
        let back = Container::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back.arrays[0].data.to_f64(), vec![0.5, -1.25]);
        assert!(denoiser_from_container(&back).is_err());
    }
}
