//! Binary checkpoints of a training run.
//!
//! Layout (little endian):
//!
//! ```text
//! "SYNF"  u32 version  u64 meta_len  meta_json[meta_len]
//! u32 n_arrays
//! n_arrays × { u32 name_len  name  u32 ndim  u64 dims[ndim]  f32 data[prod(dims)] }
//! ```
//!
//! The JSON block holds the training config, the iteration counter, the
//! grid resolution, Adam step counts and the metrics log. Arrays hold the
//! model parameter groups followed by `adam.m.*` and `adam.v.*` moments.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldModel;
use crate::grid::PlaneSet;
use crate::net::MlpParams;
use crate::optim::{AdamMoments, AdamState, LogRecord, TrainConfig, TrainState};
use crate::real::Real;

pub const MAGIC: &[u8; 4] = b"SYNF";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    config: TrainConfig,
    iteration: usize,
    spatial_res: usize,
    time_res: usize,
    adam_steps: Vec<u64>,
    log: Vec<LogRecord>,
}

struct Array {
    name: String,
    dims: Vec<usize>,
    data: Vec<f32>,
}

fn push_array(out: &mut Vec<u8>, name: &str, dims: &[usize], data: impl Iterator<Item = f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a training state.
pub fn encode<T: Real>(state: &TrainState<T>, config: &TrainConfig) -> Result<Vec<u8>> {
    let meta = Meta {
        config: config.clone(),
        iteration: state.iteration,
        spatial_res: state.model.planes.spatial_res(),
        time_res: state.model.planes.time_res(),
        adam_steps: state.adam.groups.iter().map(|g| g.step).collect(),
        log: state.log.clone(),
    };
    let json = serde_json::to_vec(&meta).map_err(|e| Error::Validation(e.to_string()))?;
    let groups = state.model.param_groups();
    if groups.len() != state.adam.groups.len() {
        return Err(Error::shape("adam groups", groups.len(), state.adam.groups.len()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(3 * groups.len() as u32).to_le_bytes());
    for (name, dims, data) in &groups {
        push_array(&mut out, name, dims, data.iter().map(|v| v.to_f64_lossy() as f32));
    }
    for (prefix, pick) in [("adam.m", 0), ("adam.v", 1)] {
        for ((name, dims, _), g) in groups.iter().zip(&state.adam.groups) {
            let src = if pick == 0 { &g.m } else { &g.v };
            push_array(&mut out, &format!("{prefix}.{name}"), dims, src.iter().map(|v| v.to_f64_lossy() as f32));
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(format!("truncated while reading {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, v: u64, what: &str) -> Result<usize> {
        usize::try_from(v)
            .ok()
            .filter(|&n| n <= self.bytes.len())
            .ok_or_else(|| self.fail(format!("{what} {v} exceeds file size")))
    }

    fn array(&mut self) -> Result<Array> {
        let n = self.u32("name length")? as usize;
        let name = String::from_utf8(self.take(n, "array name")?.to_vec())
            .map_err(|_| self.fail("array name is not UTF-8"))?;
        let ndim = self.u32("ndim")? as usize;
        if ndim > 8 {
            return Err(self.fail(format!("array {name} has {ndim} dimensions")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut count = 1usize;
        for _ in 0..ndim {
            let raw = self.u64("dimension")?;
            let d = self.len(raw, "dimension")?;
            count = count
                .checked_mul(d)
                .filter(|&c| c <= self.bytes.len())
                .ok_or_else(|| self.fail(format!("array {name} is larger than the file")))?;
            dims.push(d);
        }
        let raw = self.take(4 * count, &format!("array {name}"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        Ok(Array { name, dims, data })
    }
}

/// Parses a checkpoint, returning the restored state and its config.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<(TrainState<T>, TrainConfig)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "not a checkpoint (bad magic)".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let raw = r.u64("metadata length")?;
    let meta_len = r.len(raw, "metadata length")?;
    let meta_start = r.pos;
    let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| Error::Format {
        offset: meta_start as u64,
        message: format!("bad metadata: {e}"),
    })?;
    let n = r.u32("array count")? as usize;
    let mut arrays = HashMap::new();
    for _ in 0..n {
        let at = r.pos;
        let a = r.array()?;
        if arrays.contains_key(&a.name) {
            return Err(Error::Format {
                offset: at as u64,
                message: format!("duplicate array {}", a.name),
            });
        }
        arrays.insert(a.name.clone(), a);
    }
    if r.pos != bytes.len() {
        return Err(r.fail("trailing bytes after last array"));
    }

    let cfg = meta.config;
    let mc = &cfg.model;
    let planes = PlaneSet::zeros(mc.mode, mc.channels, meta.spatial_res, meta.time_res)?;
    let mlp = MlpParams::zeros(mc.net_config())?;
    let mut model = FieldModel::from_parts(mc.clone(), planes, mlp)?;
    let shapes: Vec<(String, Vec<usize>)> = model
        .param_groups()
        .into_iter()
        .map(|(name, dims, _)| (name, dims))
        .collect();
    if meta.adam_steps.len() != shapes.len() {
        return Err(Error::Validation(format!(
            "checkpoint has {} adam step counters for {} parameter groups",
            meta.adam_steps.len(),
            shapes.len()
        )));
    }
    let mut fetch = |name: &str, dims: &[usize]| -> Result<Vec<T>> {
        let a = arrays
            .remove(name)
            .ok_or_else(|| Error::Validation(format!("checkpoint is missing array {name}")))?;
        if a.dims != dims {
            return Err(Error::Validation(format!(
                "array {name} has shape {:?}, expected {dims:?}",
                a.dims
            )));
        }
        Ok(a.data.into_iter().map(|v| T::of(v as f64)).collect())
    };
    for ((name, dims), (_, dst)) in shapes.iter().zip(model.param_groups_mut()) {
        dst.copy_from_slice(&fetch(name, dims)?);
    }
    let mut groups = Vec::with_capacity(shapes.len());
    for ((name, dims), step) in shapes.iter().zip(&meta.adam_steps) {
        groups.push(AdamMoments {
            name: name.clone(),
            m: fetch(&format!("adam.m.{name}"), dims)?,
            v: fetch(&format!("adam.v.{name}"), dims)?,
            step: *step,
        });
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::Validation(format!("unexpected array {extra}")));
    }
    let state = TrainState {
        model,
        adam: AdamState {
            config: cfg.adam,
            groups,
        },
        iteration: meta.iteration,
        log: meta.log,
    };
    Ok((state, cfg))
}

pub fn save<T: Real>(path: &Path, state: &TrainState<T>, config: &TrainConfig) -> Result<()> {
    fs::write(path, encode(state, config)?)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<(TrainState<T>, TrainConfig)> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ModelConfig;
    use crate::grid::SceneMode;
    use crate::schedule::CurriculumConfig;

    fn small_state(mode: SceneMode) -> (TrainState<f32>, TrainConfig) {
        let model = ModelConfig {
            mode,
            channels: 2,
            initial_res: 4,
            time_res: 3,
            hidden: 8,
            color_hidden: 8,
            ..Default::default()
        };
        let cfg = TrainConfig {
            curriculum: CurriculumConfig::disabled(2),
            model,
            ..Default::default()
        };
        let mut st = TrainState::new(&cfg).unwrap();
        st.iteration = 17;
        for (k, g) in st.adam.groups.iter_mut().enumerate() {
            g.step = k as u64 + 1;
            g.m.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.5);
            g.v.fill(0.25);
        }
        (st, cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in [SceneMode::Static3D, SceneMode::Dynamic4D] {
            let (mut st, cfg) = small_state(mode);
            st.model.upsample(6).unwrap();
            st.adam = AdamState::for_model(cfg.adam, &st.model);
            let bytes = encode(&st, &cfg).unwrap();
            let (back, cfg2) = decode::<f32>(&bytes).unwrap();
            assert_eq!(back, st);
            assert_eq!(cfg2, cfg);
        }
    }

    #[test]
    fn bad_magic_and_version() {
        let (st, cfg) = small_state(SceneMode::Static3D);
        let mut bytes = encode(&st, &cfg).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format { offset: 0, .. })));
        bytes[0] = b'S';
        bytes[4] = 9;
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format { offset: 4, .. })));
    }

    #[test]
    fn every_truncation_is_a_format_error() {
        let (st, cfg) = small_state(SceneMode::Static3D);
        let bytes = encode(&st, &cfg).unwrap();
        for cut in (0..bytes.len()).step_by(37).chain([bytes.len() - 1]) {
            match decode::<f32>(&bytes[..cut]) {
                Err(Error::Format { offset, .. }) => assert!(offset as usize <= cut),
                other => panic!("cut {cut}: {:?}", other.map(|_| ())),
            }
        }
    }

    #[test]
    fn trailing_garbage_rejected() {
        let (st, cfg) = small_state(SceneMode::Static3D);
        let mut bytes = encode(&st, &cfg).unwrap();
        bytes.push(0);
        assert!(matches!(decode::<f32>(&bytes), Err(Error::Format { .. })));
    }
}
