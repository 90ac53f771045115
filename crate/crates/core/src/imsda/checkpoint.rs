//! Binary checkpoints (little-endian): magic `IMCK`, version `u32`, the
//! model config as length-prefixed JSON, a flow-kind byte, the epoch, step
//! and optimizer step counters (`u64`), then named parameter blocks and the
//! optimizer moments of the trainable parameters.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use super::{FlowKind, ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_u32::<LittleEndian>(t.ndim() as u32)?;
    for &d in t.shape() {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in t.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn save_checkpoint(state: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    let cfg = serde_json::to_vec(&state.config)?;
    w.write_u32::<LittleEndian>(cfg.len() as u32)?;
    w.write_all(&cfg)?;
    w.write_u8(match state.config.flow {
        FlowKind::Spline => 0,
        FlowKind::Affine => 1,
    })?;
    w.write_u64::<LittleEndian>(state.epoch)?;
    w.write_u64::<LittleEndian>(state.step)?;
    w.write_u64::<LittleEndian>(state.optimizer.t)?;

    let params = state.params();
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, t) in state.param_names().iter().zip(params) {
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        write_tensor(&mut w, t)?;
    }
    w.write_u32::<LittleEndian>(state.optimizer.m.len() as u32)?;
    for (m, v) in state.optimizer.m.iter().zip(&state.optimizer.v) {
        write_tensor(&mut w, m)?;
        write_tensor(&mut w, v)?;
    }
    w.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.buf.len()) {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}",
                self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(LittleEndian::read_u16(self.take(2, what)?))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }

    /// Reads a tensor block and checks it against the expected shape.
    fn tensor(&mut self, what: &str, expected: &[usize]) -> Result<Tensor> {
        let ndim = self.u32(what)? as usize;
        if ndim > 8 {
            return Err(Error::Format(format!("{what}: implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64(what)? as usize);
        }
        if shape != expected {
            return Err(Error::Extent(format!(
                "{what}: checkpoint has shape {shape:?}, model expects {expected:?}"
            )));
        }
        let count: usize = expected.iter().product();
        let raw = self.take(count * 8, what)?;
        let mut data = vec![0.0; count];
        LittleEndian::read_f64_into(raw, &mut data);
        Tensor::new(shape, data)
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelState> {
    parse_checkpoint(&fs::read(path)?)
}

fn parse_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)?;
    let kind = match r.u8("flow kind")? {
        0 => FlowKind::Spline,
        1 => FlowKind::Affine,
        k => return Err(Error::Format(format!("unknown flow kind tag {k}"))),
    };
    if kind != config.flow {
        return Err(Error::Format("flow kind tag disagrees with the config".into()));
    }
    let mut state = ModelState::new(config)?;
    state.epoch = r.u64("epoch")?;
    state.step = r.u64("step")?;
    let t = r.u64("optimizer step")?;

    let names = state.param_names();
    let count = r.u32("parameter count")? as usize;
    if count != names.len() {
        return Err(Error::Extent(format!(
            "checkpoint has {count} parameter blocks, model expects {}",
            names.len()
        )));
    }
    let shapes: Vec<Vec<usize>> = state.params().iter().map(|p| p.shape().to_vec()).collect();
    let mut loaded = Vec::with_capacity(count);
    for (name, shape) in names.iter().zip(&shapes) {
        let nl = r.u16("parameter name")? as usize;
        let found = r.take(nl, "parameter name")?;
        if found != name.as_bytes() {
            return Err(Error::Format(format!(
                "expected parameter `{name}`, found `{}`",
                String::from_utf8_lossy(found)
            )));
        }
        loaded.push(r.tensor(name, shape)?);
    }
    for (p, t) in state.params_mut().into_iter().zip(loaded) {
        *p = t;
    }

    let slots = r.u32("moment count")? as usize;
    if slots != state.optimizer.m.len() {
        return Err(Error::Extent(format!(
            "checkpoint has {slots} optimizer slots, model expects {}",
            state.optimizer.m.len()
        )));
    }
    let trainable = state.trainable();
    for (k, &i) in trainable.iter().enumerate() {
        let shape = &shapes[i];
        state.optimizer.m[k] = r.tensor(&format!("first moment of {}", names[i]), shape)?;
        state.optimizer.v[k] = r.tensor(&format!("second moment of {}", names[i]), shape)?;
    }
    state.optimizer.t = t;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelState {
        let mut s = ModelState::new(ModelConfig {
            hidden: 6,
            depth: 2,
            domains: 3,
            ..Default::default()
        })
        .unwrap();
        s.epoch = 3;
        s.step = 17;
        s.optimizer.t = 17;
        s.optimizer.m[0].data_mut()[0] = 0.25;
        s.flows.params_mut()[1].data_mut()[2] = -0.5;
        s
    }

    #[test]
    fn roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let s = small();
        save_checkpoint(&s, &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), s);
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&small(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert!(matches!(
            parse_checkpoint(&bytes[..bytes.len() - 1]),
            Err(Error::Format(_))
        ));
        let mut v = bytes.clone();
        v[4] = 2;
        assert!(matches!(parse_checkpoint(&v), Err(Error::Version { found: 2, .. })));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(parse_checkpoint(&extra).is_err());
    }

    #[test]
    fn mismatched_extent_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&small(), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        // rewrite the config echo with a different style width
        let len = LittleEndian::read_u32(&bytes[8..12]) as usize;
        let mut cfg: ModelConfig = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        cfg.n_style = 3;
        cfg.n_obs = 5;
        let json = serde_json::to_vec(&cfg).unwrap();
        let mut forged = bytes[..8].to_vec();
        forged.extend((json.len() as u32).to_le_bytes());
        forged.extend(&json);
        forged.extend(&bytes[12 + len..]);
        let err = parse_checkpoint(&forged).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Extent(_)), "{msg}");
        assert!(msg.contains("[6, 5]") && msg.contains("[6, 4]"), "{msg}");
    }
}
