use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::{quantize_linear, QuantizedLinear};
use crate::error::{Error, Result};
use crate::kernels::Tensor;
use crate::model::params::{Cursor, MAGIC};
use crate::model::ModelParams;

const SENTINEL: u32 = u32::MAX;
const DTYPE_FP32: u8 = 0;
const DTYPE_INT8: u8 = 1;

/// Linear-layer weights are the 2-D parameters that are not embedding tables.
pub fn is_linear_weight(name: &str, t: &Tensor) -> bool {
    t.rank() == 2 && !name.contains(".embed.")
}

#[derive(Clone, Debug, PartialEq)]
pub enum QuantEntry {
    Fp32(Tensor),
    /// Stored transposed, one row per output unit, without bias.
    Int8(QuantizedLinear),
}

/// Parameter store with linear weights in INT8.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QuantizedParams {
    entries: BTreeMap<String, QuantEntry>,
}

impl QuantizedParams {
    pub fn quantize(params: &ModelParams) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (name, t) in params.iter() {
            let e = if is_linear_weight(name, t) {
                QuantEntry::Int8(quantize_linear(&t.transpose(), None)?)
            } else {
                QuantEntry::Fp32(t.clone())
            };
            entries.insert(name.to_string(), e);
        }
        Ok(Self { entries })
    }

    pub fn get(&self, name: &str) -> Result<&QuantEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &QuantEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// FP32 view with every INT8 weight dequantized back to `[in x out]`.
    pub fn dequantize(&self) -> Result<ModelParams> {
        let mut p = ModelParams::new();
        for (name, e) in &self.entries {
            let t = match e {
                QuantEntry::Fp32(t) => t.clone(),
                QuantEntry::Int8(q) => q.dequantize().transpose(),
            };
            p.insert(name, t)?;
        }
        Ok(p)
    }

    /// True if `bytes` start like a quantized parameter file.
    pub fn sniff(bytes: &[u8]) -> bool {
        bytes.len() >= 8 && &bytes[..4] == MAGIC && bytes[4..8] == SENTINEL.to_le_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&SENTINEL.to_le_bytes());
        for (name, e) in &self.entries {
            w.extend_from_slice(&(name.len() as u32).to_le_bytes());
            w.extend_from_slice(name.as_bytes());
            match e {
                QuantEntry::Fp32(t) => {
                    w.push(DTYPE_FP32);
                    write_shape_only(&mut w, t.shape());
                    for v in t.data() {
                        w.extend_from_slice(&v.to_le_bytes());
                    }
                }
                QuantEntry::Int8(q) => {
                    w.push(DTYPE_INT8);
                    write_shape_only(&mut w, &[q.out_dim(), q.in_dim()]);
                    w.extend(q.q_weight().iter().map(|&v| v as u8));
                    for s in q.scales() {
                        w.extend_from_slice(&s.to_le_bytes());
                    }
                }
            }
        }
        w
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if !Self::sniff(bytes) {
            return Err(Error::Checkpoint("not a quantized parameter file".into()));
        }
        let mut cur = Cursor::new(&bytes[8..]);
        let mut entries = BTreeMap::new();
        while !cur.at_end() {
            let len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let dtype = cur.u8()?;
            let shape = crate::model::params::read_shape(&mut cur)?;
            let n: usize = shape.iter().product();
            let e = match dtype {
                DTYPE_FP32 => {
                    let data = cur
                        .take(n * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    QuantEntry::Fp32(Tensor::new(shape, data)?)
                }
                DTYPE_INT8 if shape.len() == 2 => {
                    let q = cur.take(n)?.iter().map(|&b| b as i8).collect();
                    let scales = cur
                        .take(shape[0] * 4)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    QuantEntry::Int8(QuantizedLinear::from_parts(shape[0], shape[1], q, scales, None)?)
                }
                other => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: unknown dtype {other} for rank {}",
                        shape.len()
                    )))
                }
            };
            if !crate::model::params::valid_param_name(&name) {
                return Err(Error::Checkpoint(format!("invalid parameter name {name:?}")));
            }
            entries.insert(name, e);
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_shape_only(w: &mut Vec<u8>, shape: &[usize]) {
    crate::model::params::write_shape(w, shape).expect("writing to a Vec cannot fail");
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn quantized_file_round_trips_and_is_distinguishable() {
        let cfg = ModelConfig {
            d_model: 8,
            heads: 2,
            ff_dim: 8,
            encoder_layers: 1,
            decoder_layers: 1,
            nvs_enabled: true,
            target_factor_specs: vec![6],
            source_vocab_size: 9,
            target_vocab_size: 9,
            ..Default::default()
        };
        let p = ModelParams::init(&cfg, 3).unwrap();
        let q = QuantizedParams::quantize(&p).unwrap();
        assert!(matches!(q.get("encoder.layer0.ffn.w1").unwrap(), QuantEntry::Int8(_)));
        assert!(matches!(q.get("target.embed.surface").unwrap(), QuantEntry::Fp32(_)));
        assert!(matches!(q.get("encoder.layer0.ffn.b1").unwrap(), QuantEntry::Fp32(_)));
        let bytes = q.to_bytes();
        assert!(QuantizedParams::sniff(&bytes));
        let mut plain = Vec::new();
        p.write_to(&mut plain).unwrap();
        assert!(!QuantizedParams::sniff(&plain));
        assert_eq!(QuantizedParams::from_bytes(&bytes).unwrap(), q);
        let dq = q.dequantize().unwrap();
        dq.check_schema(&cfg).unwrap();
        assert!(QuantizedParams::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
