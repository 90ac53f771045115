//! Binary dataset files and CSV export.
//!
//! Layout (little-endian): magic `IDNT`, version `u32`, then `u32` extents
//! `n_c, n_s, d, m, n_obs`, `u32` flags (bit 0 labeled, bit 1 identity
//! mixing); a config block (`n_classes u32, mixing_depth u32, domain_seed
//! u64, mixing_seed u64, sampling_seed u64`); one `(mu[n_s], var[n_s])`
//! `f64` block per domain; then row-major `x` and `z` as `f64`, `u` as `u32`
//! and, when labeled, `y` as `u32`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};

use super::{Dataset, DomainSpec, GenConfig};
use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"IDNT";
pub const DATASET_VERSION: u32 = 1;

const FLAG_LABELED: u32 = 1;
const FLAG_IDENTITY_MIXING: u32 = 2;

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} = {v} does not fit in u32")))
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let c = &ds.config;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(DATASET_VERSION)?;
    for (v, name) in [
        (c.n_content, "n_c"),
        (c.n_style, "n_s"),
        (c.domains, "d"),
        (c.samples_per_domain, "m"),
        (ds.x.cols(), "n_obs"),
    ] {
        w.write_u32::<LittleEndian>(u32_of(v, name)?)?;
    }
    let mut flags = 0;
    if ds.y.is_some() {
        flags |= FLAG_LABELED;
    }
    if c.identity_mixing {
        flags |= FLAG_IDENTITY_MIXING;
    }
    w.write_u32::<LittleEndian>(flags)?;
    w.write_u32::<LittleEndian>(u32_of(c.n_classes, "n_classes")?)?;
    w.write_u32::<LittleEndian>(u32_of(c.mixing_depth, "mixing_depth")?)?;
    w.write_u64::<LittleEndian>(c.domain_seed)?;
    w.write_u64::<LittleEndian>(c.mixing_seed)?;
    w.write_u64::<LittleEndian>(c.sampling_seed)?;
    for s in &ds.specs {
        for &v in s.mean.iter().chain(&s.variance) {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    for &v in ds.x.data().iter().chain(ds.z.data()) {
        w.write_f64::<LittleEndian>(v)?;
    }
    for &u in &ds.u {
        w.write_u32::<LittleEndian>(u32_of(u, "domain id")?)?;
    }
    if let Some(y) = &ds.y {
        for &l in y {
            w.write_u32::<LittleEndian>(u32_of(l, "label")?)?;
        }
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
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Format(format!(
                "truncated file: {what} needs {n} bytes at offset {}, {} remain",
                self.pos,
                self.buf.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(LittleEndian::read_u32(self.take(4, what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(LittleEndian::read_u64(self.take(8, what)?))
    }

    fn f64s(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = count
            .checked_mul(8)
            .ok_or_else(|| Error::Format(format!("{what}: size overflow")))?;
        let raw = self.take(bytes, what)?;
        let mut out = vec![0.0; count];
        LittleEndian::read_f64_into(raw, &mut out);
        Ok(out)
    }

    fn u32s(&mut self, count: usize, what: &str) -> Result<Vec<usize>> {
        let bytes = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("{what}: size overflow")))?;
        let raw = self.take(bytes, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| LittleEndian::read_u32(c) as usize)
            .collect())
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_dataset(&bytes)
}

pub(crate) fn parse_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let nc = r.u32("n_c")? as usize;
    let ns = r.u32("n_s")? as usize;
    let d = r.u32("d")? as usize;
    let m = r.u32("m")? as usize;
    let n_obs = r.u32("n_obs")? as usize;
    let flags = r.u32("flags")?;
    if flags & !(FLAG_LABELED | FLAG_IDENTITY_MIXING) != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
    }
    let config = GenConfig {
        n_content: nc,
        n_style: ns,
        domains: d,
        samples_per_domain: m,
        n_classes: r.u32("n_classes")? as usize,
        mixing_depth: r.u32("mixing_depth")? as usize,
        domain_seed: r.u64("domain_seed")?,
        mixing_seed: r.u64("mixing_seed")?,
        sampling_seed: r.u64("sampling_seed")?,
        labeled: flags & FLAG_LABELED != 0,
        identity_mixing: flags & FLAG_IDENTITY_MIXING != 0,
    };
    config.validate()?;
    let n = nc + ns;
    let rows = d
        .checked_mul(m)
        .ok_or_else(|| Error::Format("row count overflow".into()))?;

    let mut specs = Vec::with_capacity(d.min(1 << 16));
    for id in 0..d {
        let mean = r.f64s(ns, "domain means")?;
        let variance = r.f64s(ns, "domain variances")?;
        let s = DomainSpec { id, mean, variance };
        s.validate().map_err(|e| Error::Format(e.to_string()))?;
        specs.push(s);
    }
    let x = r.f64s(rows.saturating_mul(n_obs), "x")?;
    let z = r.f64s(rows.saturating_mul(n), "z")?;
    let u = r.u32s(rows, "u")?;
    if let Some(&bad) = u.iter().find(|&&v| v >= d) {
        return Err(Error::Format(format!("domain id {bad} >= {d}")));
    }
    let y = if config.labeled {
        let y = r.u32s(rows, "y")?;
        if let Some(&bad) = y.iter().find(|&&v| v >= config.n_classes) {
            return Err(Error::Format(format!("label {bad} >= {}", config.n_classes)));
        }
        Some(y)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after dataset",
            bytes.len() - r.pos
        )));
    }
    Ok(Dataset {
        config,
        specs,
        x: Tensor::matrix(rows, n_obs, x)?,
        z: Tensor::matrix(rows, n, z)?,
        u,
        y,
    })
}

/// One row per sample: `x_0.., u, z_0.., y` (the `y` column only when
/// labeled).
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let mut header: Vec<String> = (0..ds.x.cols()).map(|i| format!("x_{i}")).collect();
    header.push("u".into());
    header.extend((0..ds.z.cols()).map(|i| format!("z_{i}")));
    if ds.y.is_some() {
        header.push("y".into());
    }
    writeln!(w, "{}", header.join(","))?;
    for r in 0..ds.len() {
        let mut fields: Vec<String> = ds.x.row(r).iter().map(|v| format!("{v:e}")).collect();
        fields.push(ds.u[r].to_string());
        fields.extend(ds.z.row(r).iter().map(|v| format!("{v:e}")));
        if let Some(y) = &ds.y {
            fields.push(y[r].to_string());
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}
