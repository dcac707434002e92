//! Versioned binary container: magic bytes, format version, then a count
//! of length-prefixed named entries. Each entry is either UTF-8 text or an
//! `f64` array with its shape; all integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::autodiff::OptimizerState;
use crate::data::TargetStats;
use crate::error::{ensure, CcnError, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::DenseTensor;

use super::config::RunConfig;

pub const MAGIC: &[u8; 8] = b"CCNCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    Text(String),
    Array(DenseTensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub epoch: usize,
    pub best_metric: f64,
    pub target_stats: Option<TargetStats>,
}

fn put_u32(out: &mut Vec<u8>, x: u32) {
    out.extend_from_slice(&x.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, x: u64) {
    out.extend_from_slice(&x.to_le_bytes());
}

/// Serializes named entries into the container format.
pub fn encode(entries: &[(String, Entry)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_u32(&mut out, entries.len() as u32);
    for (name, entry) in entries {
        put_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        match entry {
            Entry::Text(s) => {
                out.push(0);
                put_u64(&mut out, s.len() as u64);
                out.extend_from_slice(s.as_bytes());
            }
            Entry::Array(t) => {
                out.push(1);
                put_u32(&mut out, t.order() as u32);
                for &d in t.shape() {
                    put_u64(&mut out, d as u64);
                }
                for &x in t.data() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.pos + n <= self.bytes.len(),
            Checkpoint,
            "truncated checkpoint at byte {}",
            self.pos
        );
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Entry)>> {
    let mut r = Reader { bytes, pos: 0 };
    ensure!(r.take(8)? == MAGIC, Checkpoint, "not a checkpoint (bad magic bytes)");
    let version = r.u32()?;
    ensure!(
        version == FORMAT_VERSION,
        Checkpoint,
        "checkpoint format version {version}, this build reads version {FORMAT_VERSION}"
    );
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| CcnError::Checkpoint("entry name is not UTF-8".into()))?;
        let kind = r.take(1)?[0];
        let entry = match kind {
            0 => {
                let len = r.u64()? as usize;
                Entry::Text(
                    String::from_utf8(r.take(len)?.to_vec())
                        .map_err(|_| CcnError::Checkpoint(format!("entry {name} is not UTF-8")))?,
                )
            }
            1 => {
                let order = r.u32()? as usize;
                let shape = (0..order)
                    .map(|_| r.u64().map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                let raw = r.take(n * 8)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Entry::Array(DenseTensor::new(shape, data)?)
            }
            k => return Err(CcnError::Checkpoint(format!("unknown entry kind {k}"))),
        };
        entries.push((name, entry));
    }
    ensure!(r.pos == bytes.len(), Checkpoint, "trailing bytes after the last entry");
    Ok(entries)
}

fn array(entries: &[(String, Entry)], name: &str) -> Result<DenseTensor> {
    match entries.iter().find(|(n, _)| n == name) {
        Some((_, Entry::Array(t))) => Ok(t.clone()),
        Some(_) => Err(CcnError::Checkpoint(format!("entry {name} is not an array"))),
        None => Err(CcnError::Checkpoint(format!("missing entry {name}"))),
    }
}

fn text(entries: &[(String, Entry)], name: &str) -> Result<String> {
    match entries.iter().find(|(n, _)| n == name) {
        Some((_, Entry::Text(s))) => Ok(s.clone()),
        Some(_) => Err(CcnError::Checkpoint(format!("entry {name} is not text"))),
        None => Err(CcnError::Checkpoint(format!("missing entry {name}"))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mc = &self.model.config;
        let mut dims = vec![
            mc.order as f64,
            f64::from(u8::from(mc.use_adjacency)),
            mc.contraction_count as f64,
            mc.input_dim as f64,
            mc.output_dim as f64,
        ];
        dims.extend(mc.widths.iter().map(|&w| w as f64));
        let mut entries = vec![
            ("config".to_string(), Entry::Text(self.config.to_toml())),
            ("model".to_string(), Entry::Array(DenseTensor::vector(dims))),
            (
                "state".to_string(),
                Entry::Array(DenseTensor::vector(vec![
                    self.epoch as f64,
                    self.best_metric,
                    self.optimizer.lr,
                    self.optimizer.steps as f64,
                    self.optimizer.config.lr,
                    self.optimizer.config.momentum,
                    self.optimizer.config.lr_min,
                    self.optimizer.config.decay,
                    self.optimizer.config.clip_norm,
                ])),
            ),
        ];
        let names = self.model.parameter_names();
        for (name, p) in names.iter().zip(self.model.parameters()) {
            entries.push((name.clone(), Entry::Array(p)));
        }
        for (name, v) in names.iter().zip(&self.optimizer.velocity) {
            entries.push((format!("velocity.{name}"), Entry::Array(v.clone())));
        }
        if let Some(stats) = &self.target_stats {
            entries.push((
                "target.mean".into(),
                Entry::Array(DenseTensor::vector(stats.mean.clone())),
            ));
            entries.push((
                "target.std".into(),
                Entry::Array(DenseTensor::vector(stats.std.clone())),
            ));
        }
        encode(&entries)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let entries = decode(bytes)?;
        let config = RunConfig::from_toml(&text(&entries, "config")?)?;
        let dims = array(&entries, "model")?.into_data();
        ensure!(dims.len() >= 6, Checkpoint, "model entry too short");
        let model_config = ModelConfig {
            order: dims[0] as usize,
            use_adjacency: dims[1] != 0.0,
            contraction_count: dims[2] as usize,
            input_dim: dims[3] as usize,
            output_dim: dims[4] as usize,
            widths: dims[5..].iter().map(|&w| w as usize).collect(),
        };
        let mut model = Model::init(model_config, 0)?;
        let names = model.parameter_names();
        let params = names
            .iter()
            .map(|n| array(&entries, n))
            .collect::<Result<Vec<_>>>()?;
        model.set_parameters(params)?;
        let state = array(&entries, "state")?.into_data();
        ensure!(state.len() == 9, Checkpoint, "state entry has {} values", state.len());
        let opt_config = crate::autodiff::OptimizerConfig {
            lr: state[4],
            momentum: state[5],
            lr_min: state[6],
            decay: state[7],
            clip_norm: state[8],
        };
        let mut optimizer = OptimizerState::new(opt_config, &model.parameters());
        optimizer.lr = state[2];
        optimizer.steps = state[3] as usize;
        optimizer.velocity = names
            .iter()
            .map(|n| array(&entries, &format!("velocity.{n}")))
            .collect::<Result<Vec<_>>>()?;
        let target_stats = match (array(&entries, "target.mean"), array(&entries, "target.std")) {
            (Ok(m), Ok(s)) => Some(TargetStats {
                mean: m.into_data(),
                std: s.into_data(),
            }),
            _ => None,
        };
        Ok(Self {
            config,
            model,
            optimizer,
            epoch: state[0] as usize,
            best_metric: state[1],
            target_stats,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)
            .map_err(|e| CcnError::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::OptimizerConfig;

    fn sample() -> Checkpoint {
        let config = RunConfig {
            dataset: "somewhere".into(),
            ..RunConfig::default()
        };
        let model = Model::init(config.model_config(70, 2), 11).unwrap();
        let mut optimizer = OptimizerState::new(
            OptimizerConfig::default().with_linear_schedule(100),
            &model.parameters(),
        );
        optimizer.velocity[0].data_mut()[3] = -1.0 / 3.0;
        optimizer.lr = 7.77e-4;
        optimizer.steps = 12;
        Checkpoint {
            config,
            model,
            optimizer,
            epoch: 4,
            best_metric: 0.8421052631578947,
            target_stats: Some(TargetStats {
                mean: vec![0.1],
                std: vec![2.0],
            }),
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        for (a, b) in ck.model.parameters().iter().zip(back.model.parameters()) {
            let bits_a: Vec<u64> = a.data().iter().map(|x| x.to_bits()).collect();
            let bits_b: Vec<u64> = b.data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
        assert_eq!(back, ck);
    }

    #[test]
    fn version_and_magic_are_checked() {
        let mut bytes = sample().to_bytes();
        bytes[8] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let bytes = sample().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
