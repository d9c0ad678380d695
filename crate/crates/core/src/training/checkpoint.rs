//! Versioned binary checkpoint container.
//!
//! Layout (little-endian):
//! `magic, u32 version, u64 step, tensor table, optimizer table, rng state,
//! loss history, config text`. A tensor entry is
//! `u32 name_len, name, u8 dtype, u32 rank, u64 extents[rank], payload`.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{LossRecord, TrainState};
use crate::adam::{Adam, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::rng::RngState;
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 8] = b"GAUNETCK";
pub const FORMAT_VERSION: u32 = 1;
const MAX_RANK: usize = 8;

const GEN_PARAM: &str = "generator.param.";
const GEN_BUFFER: &str = "generator.buffer.";
const CRITIC_PARAM: &str = "critic.param.";
const CRITIC_BUFFER: &str = "critic.buffer.";

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.buf.extend_from_slice(b);
    }
    fn tensor<T: Float>(&mut self, name: &str, t: &Tensor<T>) {
        self.bytes(name.as_bytes());
        self.u8(T::DTYPE_TAG);
        self.u32(t.shape().len() as u32);
        for &d in t.shape() {
            self.u64(d as u64);
        }
        for &v in t.data() {
            v.write_le(&mut self.buf);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            return Err(Error::Checkpoint(format!(
                "truncated: {what} needs {n} bytes at offset {}, {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn bytes(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }
    fn string(&mut self, what: &str) -> Result<String> {
        String::from_utf8(self.bytes(what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
    fn tensor<T: Float>(&mut self) -> Result<(String, Tensor<T>)> {
        let name = self.string("entry name")?;
        let tag = self.u8("dtype")?;
        let rank = self.u32("rank")? as usize;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("{name}: rank {rank} is corrupt")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.u64("extent")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: extents overflow")))?;
        let data: Vec<T> = match tag {
            t if t == f32::DTYPE_TAG => self
                .payload::<f32>(&name, count)?
                .iter()
                .map(|v| T::of(v.f64()))
                .collect(),
            t if t == f64::DTYPE_TAG => self.payload::<f64>(&name, count)?.iter().map(|&v| T::of(v)).collect(),
            other => return Err(Error::Checkpoint(format!("{name}: unknown dtype tag {other}"))),
        };
        Ok((name, Tensor::new(&shape, data)?))
    }
    fn payload<U: Float>(&mut self, name: &str, count: usize) -> Result<Vec<U>> {
        let bytes = count
            .checked_mul(U::BYTES)
            .ok_or_else(|| Error::Checkpoint(format!("{name}: payload overflow")))?;
        let raw = self.take(bytes, name)?;
        Ok(raw.chunks_exact(U::BYTES).map(U::read_le).collect())
    }
}

fn write_optimizer<T: Float>(w: &mut Writer, name: &str, opt: &Adam<T>) {
    w.bytes(name.as_bytes());
    let c = &opt.config;
    for v in [c.alpha, c.beta1, c.beta2, c.epsilon_hat] {
        w.f64(v);
    }
    w.u32(opt.states.len() as u32);
    for (k, s) in &opt.states {
        w.u64(s.step_count);
        w.tensor(&format!("{k}.m"), &s.first_moment);
        w.tensor(&format!("{k}.v"), &s.second_moment);
    }
}

fn read_optimizer<T: Float>(r: &mut Reader, expected: &str) -> Result<Adam<T>> {
    let name = r.string("optimizer name")?;
    if name != expected {
        return Err(Error::Checkpoint(format!(
            "expected optimizer {expected}, found {name}"
        )));
    }
    let config = AdamConfig {
        alpha: r.f64("alpha")?,
        beta1: r.f64("beta1")?,
        beta2: r.f64("beta2")?,
        epsilon_hat: r.f64("epsilon_hat")?,
    };
    let n = r.u32("optimizer entries")? as usize;
    let mut states = IndexMap::new();
    for _ in 0..n {
        let step_count = r.u64("optimizer step")?;
        let (m_name, first_moment) = r.tensor()?;
        let (_, second_moment) = r.tensor()?;
        let key = m_name
            .strip_suffix(".m")
            .ok_or_else(|| Error::Checkpoint(format!("bad moment entry {m_name}")))?
            .to_string();
        states.insert(
            key,
            AdamState {
                step_count,
                first_moment,
                second_moment,
            },
        );
    }
    Ok(Adam { config, states })
}

/// Serializes a training state with an audit copy of the configuration.
pub fn encode_checkpoint<T: Float>(state: &TrainState<T>, config_text: &str) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u64(state.step);
    let tables = [
        (GEN_PARAM, state.generator.params().collect::<Vec<_>>()),
        (GEN_BUFFER, state.generator.buffers().collect()),
        (CRITIC_PARAM, state.critic.params().collect()),
        (CRITIC_BUFFER, state.critic.buffers().collect()),
    ];
    w.u32(tables.iter().map(|(_, t)| t.len() as u32).sum());
    for (prefix, entries) in &tables {
        for (k, t) in entries {
            w.tensor(&format!("{prefix}{k}"), t);
        }
    }
    write_optimizer(&mut w, "generator", &state.gen_opt);
    write_optimizer(&mut w, "critic", &state.critic_opt);
    let mut rng = Vec::new();
    RngState::capture(&state.rng).encode(&mut rng);
    w.bytes(&rng);
    w.u32(state.history.len() as u32);
    for rec in &state.history {
        w.u64(rec.step);
        w.f64(rec.critic_loss);
        w.f64(rec.gp);
        w.f64(rec.gen_loss);
    }
    w.bytes(config_text.as_bytes());
    w.buf
}

/// Inverse of [`encode_checkpoint`]; returns the state and the config text.
pub fn decode_checkpoint<T: Float>(bytes: &[u8]) -> Result<(TrainState<T>, String)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let step = r.u64("step")?;
    let mut generator = ParameterStore::new();
    let mut critic = ParameterStore::new();
    let n = r.u32("entry count")?;
    for _ in 0..n {
        let (name, t) = r.tensor()?;
        if let Some(k) = name.strip_prefix(GEN_PARAM) {
            generator.insert_param(k, t);
        } else if let Some(k) = name.strip_prefix(GEN_BUFFER) {
            generator.insert_buffer(k, t);
        } else if let Some(k) = name.strip_prefix(CRITIC_PARAM) {
            critic.insert_param(k, t);
        } else if let Some(k) = name.strip_prefix(CRITIC_BUFFER) {
            critic.insert_buffer(k, t);
        } else {
            return Err(Error::Checkpoint(format!("unknown entry {name}")));
        }
    }
    let gen_opt = read_optimizer(&mut r, "generator")?;
    let critic_opt = read_optimizer(&mut r, "critic")?;
    let rng = RngState::decode(r.bytes("rng state")?)
        .ok_or_else(|| Error::Checkpoint("corrupt rng state".into()))?
        .restore();
    let h = r.u32("history length")? as usize;
    let mut history = Vec::with_capacity(h.min(1 << 20));
    for _ in 0..h {
        history.push(LossRecord {
            step: r.u64("history")?,
            critic_loss: r.f64("history")?,
            gp: r.f64("history")?,
            gen_loss: r.f64("history")?,
        });
    }
    let config_text = r.string("config text")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((
        TrainState {
            generator,
            gen_opt,
            critic,
            critic_opt,
            step,
            rng,
            history,
        },
        config_text,
    ))
}

/// Writes through a temporary file and renames, so an interrupted save never
/// replaces the previous checkpoint with a partial one.
pub fn save_checkpoint<T: Float>(path: &Path, state: &TrainState<T>, config_text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(state, config_text)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Float>(path: &Path) -> Result<(TrainState<T>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::critic::{Critic, CriticConfig};
    use crate::dataset::make_synthetic_dataset;
    use crate::generator::{Generator, GeneratorConfig};
    use crate::training::{TrainConfig, Trainer};

    fn stepped_state() -> TrainState<f64> {
        let gen = Generator::new(GeneratorConfig {
            input_size: 16,
            base_filters: 2,
            num_blocks: 2,
            latent_dim: 3,
            latent_channels: 2,
            ..Default::default()
        })
        .unwrap();
        let critic = Critic::new(CriticConfig {
            input_size: 16,
            growth_rate: 2,
            num_dense_blocks: 1,
            layers_per_block: 1,
            ..Default::default()
        })
        .unwrap();
        let ds = make_synthetic_dataset(2, 4, 16, 0.05, 0).unwrap();
        let all: Vec<usize> = (0..ds.len()).collect();
        let cfg = TrainConfig {
            batch_size: 2,
            n_critic: 1,
            total_steps: 4,
            ..Default::default()
        };
        let trainer = Trainer::new(&gen, &critic, cfg, &ds, &all).unwrap();
        let mut state = trainer.init_state();
        trainer.step(&mut state).unwrap();
        state
    }

    #[test]
    fn round_trip_is_exact() {
        let state = stepped_state();
        let bytes = encode_checkpoint(&state, "seed = 0\n");
        let (back, text) = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(back, state);
        assert_eq!(text, "seed = 0\n");
        assert_eq!(encode_checkpoint(&back, &text), bytes);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let bytes = encode_checkpoint(&stepped_state(), "x");
        for len in 0..bytes.len() {
            assert!(decode_checkpoint::<f64>(&bytes[..len]).is_err(), "prefix {len}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode_checkpoint::<f64>(&long).is_err());
    }

    #[test]
    fn future_version_and_bad_magic_rejected() {
        let mut bytes = encode_checkpoint(&stepped_state(), "");
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        assert!(matches!(
            decode_checkpoint::<f64>(&bytes),
            Err(Error::CheckpointVersion { found, expected: FORMAT_VERSION }) if found == FORMAT_VERSION + 1
        ));
        bytes[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn save_and_load_through_file() {
        let state = stepped_state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&path, &state, "a").unwrap();
        let (back, text) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!((back, text.as_str()), (state, "a"));
        assert!(!path.with_extension("tmp").exists());
    }
}
