//! Training snapshots. Layout (little endian): `EBMC`, u32 version, u64
//! step, the config as TOML, parameters, buffers, Adam moments and counter,
//! an optional embedded reservoir snapshot, the entropy bank and the
//! metrics log as JSONL.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::diffcore::{NamedTensor, ParamSet, Tensor};
use crate::objectives::SampleBank;
use crate::replay::Reservoir;

use super::config::ExperimentConfig;
use super::metrics::{emit_metrics, parse_metrics, MetricsFormat, MetricsRecord};
use super::optim::AdamState;
use super::LabError;

const MAGIC: &[u8; 4] = b"EBMC";
const VERSION: u32 = 1;
const MAX_SECTION: u64 = 1 << 34;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config: ExperimentConfig,
    pub params: ParamSet,
    pub buffers: ParamSet,
    pub adam: AdamState,
    pub reservoir: Option<Reservoir>,
    pub bank: SampleBank,
    pub metrics: Vec<MetricsRecord>,
}

fn bad(msg: impl Into<String>) -> LabError {
    LabError::Checkpoint(msg.into())
}

fn write_bytes<W: Write>(w: &mut W, b: &[u8]) -> Result<(), LabError> {
    w.write_u64::<LittleEndian>(b.len() as u64)?;
    w.write_all(b)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, LabError> {
    let n = r.read_u64::<LittleEndian>()?;
    if n > MAX_SECTION {
        return Err(bad(format!("section of {} bytes", n)));
    }
    let mut buf = Vec::new();
    r.take(n).read_to_end(&mut buf)?;
    if buf.len() as u64 != n {
        return Err(bad("truncated section"));
    }
    Ok(buf)
}

fn write_set<W: Write>(w: &mut W, p: &ParamSet) -> Result<(), LabError> {
    let items = p.to_named();
    w.write_u32::<LittleEndian>(items.len() as u32)?;
    for t in items {
        write_bytes(w, t.name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape.len() as u32)?;
        for &s in &t.shape {
            w.write_u64::<LittleEndian>(s as u64)?;
        }
        for v in t.values {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_set<R: Read>(r: &mut R) -> Result<ParamSet, LabError> {
    let n = r.read_u32::<LittleEndian>()?;
    let mut items = Vec::new();
    for _ in 0..n {
        let name = String::from_utf8(read_bytes(r)?).map_err(|_| bad("parameter name is not UTF-8"))?;
        let nd = r.read_u32::<LittleEndian>()?;
        if nd > 8 {
            return Err(bad(format!("tensor '{}' with {} axes", name, nd)));
        }
        let shape = (0..nd)
            .map(|_| r.read_u64::<LittleEndian>().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        if len as u64 * 8 > MAX_SECTION {
            return Err(bad(format!("tensor '{}' too large", name)));
        }
        let mut values = vec![0.0; len];
        r.read_f64_into::<LittleEndian>(&mut values)?;
        items.push(NamedTensor { name, shape, values });
    }
    Ok(ParamSet::from_named(items)?)
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), LabError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u64::<LittleEndian>(self.step)?;
        write_bytes(&mut w, self.config.to_toml()?.as_bytes())?;
        write_set(&mut w, &self.params)?;
        write_set(&mut w, &self.buffers)?;
        write_set(&mut w, &self.adam.m)?;
        write_set(&mut w, &self.adam.v)?;
        w.write_u64::<LittleEndian>(self.adam.t)?;
        match &self.reservoir {
            Some(res) => {
                w.write_u8(1)?;
                let mut buf = Vec::new();
                res.write_to(&mut buf)?;
                write_bytes(&mut w, &buf)?;
            }
            None => w.write_u8(0)?,
        }
        w.write_u64::<LittleEndian>(self.bank.capacity() as u64)?;
        w.write_u64::<LittleEndian>(self.bank.dim() as u64)?;
        let bank = self.bank.to_tensor();
        w.write_u64::<LittleEndian>(self.bank.len() as u64)?;
        for &v in bank.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
        let mut log = Vec::new();
        if !self.metrics.is_empty() {
            emit_metrics(&self.metrics, MetricsFormat::Jsonl, &mut log)?;
        }
        write_bytes(&mut w, &log)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, LabError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("file too short"))?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {:?}", magic)));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {}", version)));
        }
        let step = r.read_u64::<LittleEndian>()?;
        let text = String::from_utf8(read_bytes(&mut r)?).map_err(|_| bad("config is not UTF-8"))?;
        let config = ExperimentConfig::from_toml(&text)?;
        let params = read_set(&mut r)?;
        let buffers = read_set(&mut r)?;
        let m = read_set(&mut r)?;
        let v = read_set(&mut r)?;
        let t = r.read_u64::<LittleEndian>()?;
        let reservoir = match r.read_u8()? {
            0 => None,
            1 => {
                let bytes = read_bytes(&mut r)?;
                Some(Reservoir::read_from(bytes.as_slice(), config.init.clone())?)
            }
            other => return Err(bad(format!("reservoir flag {}", other))),
        };
        let cap = r.read_u64::<LittleEndian>()? as usize;
        let dim = r.read_u64::<LittleEndian>()? as usize;
        let rows = r.read_u64::<LittleEndian>()? as usize;
        if rows > cap || (rows * dim) as u64 * 8 > MAX_SECTION {
            return Err(bad("inconsistent sample bank"));
        }
        let mut vals = vec![0.0; rows * dim];
        r.read_f64_into::<LittleEndian>(&mut vals)?;
        let mut bank = SampleBank::new(cap, dim);
        if rows > 0 {
            bank.push(&Tensor::matrix(rows, dim, vals)?)?;
        }
        let log = read_bytes(&mut r)?;
        let metrics = parse_metrics(log.as_slice(), MetricsFormat::Jsonl)?;
        Ok(Self {
            step,
            config,
            params,
            buffers,
            adam: AdamState { m, v, t },
            reservoir,
            bank,
            metrics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), LabError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self, LabError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}
