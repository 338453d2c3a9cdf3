//! Binary checkpoint codec.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u8   version (= 1)
//! u64  header length, then that many bytes of UTF-8 TOML
//! u64  record count
//! per record:
//!   u32 name length, name bytes
//!   u32 rank, then rank × u64 dimensions
//!   product(dims) × f64 values
//! ```
//!
//! The header carries the stage, update counter, model configuration,
//! optimizer hyper-parameters and the run configuration that produced the
//! checkpoint. Records are named `param:<name>`, `adam.m:<name>`,
//! `adam.v:<name>` and `adam.t:<name>` (the step count, shape `[1]`).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, StptModel};
use crate::numerics::{Adam, AdamConfig, AdamState, Tensor};

pub const CHECKPOINT_VERSION: u8 = 1;

/// Model, optimizer state and provenance of a training run at one update.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: StptModel,
    pub optimizer: Option<Adam>,
    /// Stage that produced the checkpoint; 0 for a fresh initialization.
    pub stage: u8,
    /// Updates completed within `stage`.
    pub update: u64,
    /// Normalized run configuration, if known.
    pub run: Option<toml::Table>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    stage: u8,
    update: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    adam: Option<AdamConfig>,
    model: ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    run: Option<toml::Table>,
}

impl Checkpoint {
    /// Freshly initialized model without optimizer state.
    pub fn init(model: StptModel) -> Self {
        Self {
            model,
            optimizer: None,
            stage: 0,
            update: 0,
            run: None,
        }
    }

    pub fn with_run(mut self, run: Option<toml::Table>) -> Self {
        self.run = run;
        self
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            stage: self.stage,
            update: self.update,
            adam: self.optimizer.as_ref().map(|a| a.config),
            model: self.model.config().clone(),
            run: self.run.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut out = vec![CHECKPOINT_VERSION];
        out.extend((text.len() as u64).to_le_bytes());
        out.extend(text.as_bytes());
        let params = self.model.params();
        let mut records: Vec<(String, &Tensor)> = params.iter().map(|(_, n, t)| (format!("param:{n}"), t)).collect();
        let steps: Vec<Tensor>;
        if let Some(adam) = &self.optimizer {
            steps = adam.states().iter().map(|s| Tensor::scalar(s.t as f64)).collect();
            for (((_, n, _), s), t) in params.iter().zip(adam.states()).zip(&steps) {
                records.push((format!("adam.m:{n}"), &s.m));
                records.push((format!("adam.v:{n}"), &s.v));
                records.push((format!("adam.t:{n}"), t));
            }
        }
        out.extend((records.len() as u64).to_le_bytes());
        for (name, t) in records {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let mut records = HashMap::new();
        for _ in 0..r.u64()? {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Format(format!("record name: {e}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = shape.iter().product();
            let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Format("record too large".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if records.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(Error::Format(format!("duplicate record `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }

        let mut model = StptModel::new(header.model, 0)?;
        let names: Vec<String> = model.params().iter().map(|(_, n, _)| n.to_string()).collect();
        let mut take = |key: String, shape: &[usize]| -> Result<Tensor> {
            let t = records.remove(&key).ok_or_else(|| Error::Format(format!("missing record `{key}`")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!("record `{key}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        for (i, name) in names.iter().enumerate() {
            let id = model.params().ids().nth(i).unwrap();
            let shape = model.params().get(id).shape().to_vec();
            let t = take(format!("param:{name}"), &shape)?;
            model.params_mut().get_mut(id).data_mut().copy_from_slice(t.data());
        }
        let optimizer = match header.adam {
            None => None,
            Some(cfg) => {
                let mut states = Vec::with_capacity(names.len());
                for (id, name) in model.params().ids().zip(&names) {
                    let shape = model.params().get(id).shape().to_vec();
                    let m = take(format!("adam.m:{name}"), &shape)?;
                    let v = take(format!("adam.v:{name}"), &shape)?;
                    let t = take(format!("adam.t:{name}"), &[1])?.data()[0];
                    if t < 0.0 || t.fract() != 0.0 {
                        return Err(Error::Format(format!("invalid step count {t} for `{name}`")));
                    }
                    states.push(AdamState { m, v, t: t as u64 });
                }
                Some(Adam::from_states(cfg, states))
            }
        };
        if let Some(extra) = records.keys().min() {
            return Err(Error::Format(format!("unexpected record `{extra}`")));
        }
        Ok(Self {
            model,
            optimizer,
            stage: header.stage,
            update: header.update,
            run: header.run,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Element-wise mean of the parameters of `inputs`. The optimizer state is
/// dropped; stage, update counter and run configuration come from the last
/// input.
pub fn average_checkpoints(inputs: &[Checkpoint]) -> Result<Checkpoint> {
    let last = inputs
        .last()
        .ok_or_else(|| Error::Contract("average_checkpoints needs at least one checkpoint".into()))?;
    for c in inputs {
        if c.model.config() != last.model.config() || c.run != last.run {
            return Err(Error::Contract("cannot average checkpoints with different configurations".into()));
        }
    }
    // Running mean, so identical inputs come back unchanged.
    let mut model = inputs[0].model.clone();
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let dst = model.params_mut().get_mut(id).data_mut();
        for (k, c) in inputs.iter().enumerate().skip(1) {
            let n = (k + 1) as f64;
            dst.iter_mut()
                .zip(c.model.params().get(id).data())
                .for_each(|(m, x)| *m += (x - *m) / n);
        }
    }
    Ok(Checkpoint {
        model,
        optimizer: None,
        stage: last.stage,
        update: last.update,
        run: last.run.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(seed: u64) -> Checkpoint {
        Checkpoint::init(StptModel::new(ModelConfig::micro(), seed).unwrap())
    }

    #[test]
    fn version_byte_first_and_checked() {
        let mut bytes = micro(1).to_bytes().unwrap();
        assert_eq!(bytes[0], CHECKPOINT_VERSION);
        bytes[0] = 9;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn truncation_is_format_error() {
        let bytes = micro(1).to_bytes().unwrap();
        for cut in [1, 9, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Format(_))));
        }
    }

    #[test]
    fn midpoint_average() {
        let mut a = micro(1);
        let mut b = micro(1);
        let id = a.model.params().ids().next().unwrap();
        a.model.params_mut().get_mut(id).data_mut().fill(0.0);
        b.model.params_mut().get_mut(id).data_mut().fill(2.0);
        let avg = average_checkpoints(&[a, b]).unwrap();
        assert!(avg.model.params().get(id).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn average_rejects_mismatched_configs() {
        let a = micro(1);
        let mut cfg = ModelConfig::micro();
        cfg.variant = crate::model::ArchitectureVariant::Pse;
        let b = Checkpoint::init(StptModel::new(cfg, 1).unwrap());
        assert!(matches!(average_checkpoints(&[a, b]), Err(Error::Contract(_))));
        assert!(average_checkpoints(&[]).is_err());
    }
}
