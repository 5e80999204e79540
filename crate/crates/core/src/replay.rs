//! Chain initialization: one bounded FIFO reservoir that covers true CD
//! (data starts), persistent chains and the noise-initialized reservoir.

use std::collections::VecDeque;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;

const MAGIC: &[u8; 4] = b"EBMR";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ReplayError {
    #[error("policy {0} needs a non-empty dataset")]
    EmptyDataset(&'static str),
    #[error("dimension mismatch: reservoir holds {expected}-dimensional states, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid reservoir setting: {0}")]
    Invalid(String),
    #[error("bad reservoir snapshot: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Base distribution for fresh noise states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseDist {
    /// Independent U[lo, hi] per coordinate.
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
}

impl NoiseDist {
    pub fn draw<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Vec<f64> {
        match *self {
            NoiseDist::Uniform { lo, hi } => (0..dim).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect(),
            NoiseDist::Gaussian { mean, std } => (0..dim)
                .map(|_| mean + std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        }
    }

    fn validate(&self) -> Result<(), ReplayError> {
        let ok = match *self {
            NoiseDist::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo <= hi,
            NoiseDist::Gaussian { mean, std } => mean.is_finite() && std.is_finite() && std >= 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ReplayError::Invalid(format!("noise distribution {:?}", self)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitPolicy {
    /// True CD: filled from data, each draw replaced by a fresh data point
    /// with `reset_prob`. `reset_prob = 1` is classic CD-t.
    DataCd {
        #[serde(default = "default_reset")]
        reset_prob: f64,
    },
    /// Persistent chains seeded from data, rarely reset to data.
    Persistent {
        #[serde(default)]
        reset_to_data_prob: f64,
    },
    /// Filled with noise; each draw replaced by fresh noise with `reinit_prob`.
    NoiseReservoir {
        noise: NoiseDist,
        #[serde(default = "default_reinit")]
        reinit_prob: f64,
    },
}

fn default_reset() -> f64 {
    0.1
}

fn default_reinit() -> f64 {
    0.01
}

impl InitPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            InitPolicy::DataCd { .. } => "data_cd",
            InitPolicy::Persistent { .. } => "persistent",
            InitPolicy::NoiseReservoir { .. } => "noise_reservoir",
        }
    }

    pub fn fresh_prob(&self) -> f64 {
        match self {
            InitPolicy::DataCd { reset_prob } => *reset_prob,
            InitPolicy::Persistent { reset_to_data_prob } => *reset_to_data_prob,
            InitPolicy::NoiseReservoir { reinit_prob, .. } => *reinit_prob,
        }
    }

    pub fn uses_data(&self) -> bool {
        !matches!(self, InitPolicy::NoiseReservoir { .. })
    }

    pub fn validate(&self) -> Result<(), ReplayError> {
        let p = self.fresh_prob();
        if !(0.0..=1.0).contains(&p) {
            return Err(ReplayError::Invalid(format!("probability {} outside [0, 1]", p)));
        }
        if let InitPolicy::NoiseReservoir { noise, .. } = self {
            noise.validate()?;
        }
        Ok(())
    }
}

/// Result of [`Reservoir::sample_inits`].
#[derive(Clone, Debug)]
pub struct InitDraw {
    /// `[batch, dim]`
    pub states: Tensor,
    /// Which rows are fresh draws from the base distribution.
    pub fresh: Vec<bool>,
}

impl InitDraw {
    pub fn fresh_count(&self) -> usize {
        self.fresh.iter().filter(|&&f| f).count()
    }
}

#[derive(Clone, Debug)]
pub struct Reservoir {
    capacity: usize,
    dim: usize,
    policy: InitPolicy,
    storage: VecDeque<Vec<f64>>,
}

impl Reservoir {
    /// Fills a reservoir to capacity from the policy's base distribution.
    /// `data` (`[m, dim]`) is required for data-based policies.
    pub fn init<R: Rng + ?Sized>(
        policy: InitPolicy,
        capacity: usize,
        dim: usize,
        data: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<Self, ReplayError> {
        if capacity == 0 || dim == 0 {
            return Err(ReplayError::Invalid("capacity and dimension must be positive".into()));
        }
        policy.validate()?;
        let mut r = Self {
            capacity,
            dim,
            policy,
            storage: VecDeque::with_capacity(capacity),
        };
        r.refill(data, rng)?;
        Ok(r)
    }

    /// Replaces the whole storage with fresh base draws.
    pub fn refill<R: Rng + ?Sized>(&mut self, data: Option<&Tensor>, rng: &mut R) -> Result<(), ReplayError> {
        self.check_data(data)?;
        self.storage.clear();
        for _ in 0..self.capacity {
            let s = self.fresh(data, rng);
            self.storage.push_back(s);
        }
        Ok(())
    }

    fn check_data(&self, data: Option<&Tensor>) -> Result<(), ReplayError> {
        if self.policy.uses_data() {
            let d = data.ok_or(ReplayError::EmptyDataset(self.policy.name()))?;
            if d.ndim() != 2 || d.shape()[0] == 0 {
                return Err(ReplayError::EmptyDataset(self.policy.name()));
            }
            if d.shape()[1] != self.dim {
                return Err(ReplayError::Dimension {
                    expected: self.dim,
                    got: d.shape()[1],
                });
            }
        }
        Ok(())
    }

    fn fresh<R: Rng + ?Sized>(&self, data: Option<&Tensor>, rng: &mut R) -> Vec<f64> {
        match &self.policy {
            InitPolicy::NoiseReservoir { noise, .. } => noise.draw(self.dim, rng),
            _ => {
                let d = data.expect("checked by caller");
                let i = rng.random_range(0..d.shape()[0]);
                d.row(i).to_vec()
            }
        }
    }

    /// Uniform draws with replacement; each draw is independently replaced
    /// by a fresh base draw with the policy's probability.
    pub fn sample_inits<R: Rng + ?Sized>(
        &self,
        batch: usize,
        data: Option<&Tensor>,
        rng: &mut R,
    ) -> Result<InitDraw, ReplayError> {
        if batch == 0 {
            return Err(ReplayError::Invalid("batch size must be positive".into()));
        }
        self.check_data(data)?;
        let p = self.policy.fresh_prob();
        let mut out = Vec::with_capacity(batch * self.dim);
        let mut fresh = Vec::with_capacity(batch);
        for _ in 0..batch {
            let reset = self.storage.is_empty() || rng.random::<f64>() < p;
            if reset {
                out.extend(self.fresh(data, rng));
            } else {
                let i = rng.random_range(0..self.storage.len());
                out.extend_from_slice(&self.storage[i]);
            }
            fresh.push(reset);
        }
        Ok(InitDraw {
            states: Tensor::matrix(batch, self.dim, out).map_err(|e| ReplayError::Invalid(e.to_string()))?,
            fresh,
        })
    }

    /// Appends chain finals (`[b, dim]`), evicting the oldest entries.
    pub fn push_finals(&mut self, finals: &Tensor) -> Result<(), ReplayError> {
        if finals.is_empty() {
            return Ok(());
        }
        let cols = match finals.shape() {
            [_, c] => *c,
            [c] => *c,
            _ => 0,
        };
        if cols != self.dim {
            return Err(ReplayError::Dimension {
                expected: self.dim,
                got: cols,
            });
        }
        for row in finals.data().chunks(self.dim) {
            if self.storage.len() == self.capacity {
                self.storage.pop_front();
            }
            self.storage.push_back(row.to_vec());
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.storage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.storage.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn policy(&self) -> &InitPolicy {
        &self.policy
    }

    /// Oldest first.
    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.storage.iter().map(|v| v.as_slice())
    }

    /// Header `EBMR`, version, capacity, dim (u32 LE), then the stored states
    /// oldest first as f64 LE.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ReplayError> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        w.write_u32::<LittleEndian>(to_u32(self.capacity)?)?;
        w.write_u32::<LittleEndian>(to_u32(self.dim)?)?;
        for s in &self.storage {
            for &v in s {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    /// Restores a snapshot under `policy` (the policy is configuration, not state).
    pub fn read_from<R: Read>(mut r: R, policy: InitPolicy) -> Result<Self, ReplayError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(ReplayError::Format(format!("magic {:?}", magic)));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(ReplayError::Format(format!("unsupported version {}", version)));
        }
        let capacity = r.read_u32::<LittleEndian>()? as usize;
        let dim = r.read_u32::<LittleEndian>()? as usize;
        if capacity == 0 || dim == 0 {
            return Err(ReplayError::Format("zero capacity or dimension".into()));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() % (8 * dim) != 0 {
            return Err(ReplayError::Format(format!("payload of {} bytes is not whole states", bytes.len())));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let storage: VecDeque<Vec<f64>> = values.chunks(dim).map(|c| c.to_vec()).collect();
        if storage.len() > capacity {
            return Err(ReplayError::Format(format!("{} states exceed capacity {}", storage.len(), capacity)));
        }
        policy.validate()?;
        Ok(Self {
            capacity,
            dim,
            policy,
            storage,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ReplayError> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path, policy: InitPolicy) -> Result<Self, ReplayError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f), policy)
    }
}

fn to_u32(v: usize) -> Result<u32, ReplayError> {
    u32::try_from(v).map_err(|_| ReplayError::Invalid(format!("{} does not fit the snapshot header", v)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn noise() -> InitPolicy {
        InitPolicy::NoiseReservoir {
            noise: NoiseDist::Uniform { lo: 0.0, hi: 1.0 },
            reinit_prob: 0.01,
        }
    }

    #[test]
    fn noise_reservoir_fills_in_unit_cube() {
        let r = Reservoir::init(noise(), 10, 3, None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.len(), 10);
        assert!(r.states().all(|s| s.iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn data_policy_stores_dataset_members() {
        let data = Tensor::matrix(5, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let r = Reservoir::init(
            InitPolicy::DataCd { reset_prob: 0.1 },
            10,
            1,
            Some(&data),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!(r.states().all(|s| data.data().contains(&s[0])));
        let err = Reservoir::init(InitPolicy::DataCd { reset_prob: 0.1 }, 10, 1, None, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(err, Err(ReplayError::EmptyDataset(_))));
    }

    #[test]
    fn fifo_evicts_oldest() {
        let data = Tensor::matrix(1, 1, vec![0.0]).unwrap();
        let mut r = Reservoir::init(
            InitPolicy::Persistent { reset_to_data_prob: 0.0 },
            3,
            1,
            Some(&data),
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        for v in [1.0, 2.0, 3.0, 4.0] {
            r.push_finals(&Tensor::matrix(1, 1, vec![v]).unwrap()).unwrap();
        }
        let kept: Vec<f64> = r.states().map(|s| s[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
        r.push_finals(&Tensor::zeros(&[0, 1])).unwrap();
        assert_eq!(r.len(), 3);
        assert!(r.push_finals(&Tensor::zeros(&[1, 2])).is_err());
    }

    #[test]
    fn reinit_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = Reservoir::init(noise(), 4, 1, None, &mut rng).unwrap();
        r.push_finals(&Tensor::matrix(4, 1, vec![7.0; 4]).unwrap()).unwrap();
        r.policy = InitPolicy::NoiseReservoir {
            noise: NoiseDist::Uniform { lo: 0.0, hi: 1.0 },
            reinit_prob: 1.0,
        };
        let d = r.sample_inits(50, None, &mut rng).unwrap();
        assert!(d.fresh.iter().all(|&f| f) && d.states.data().iter().all(|&v| v != 7.0));
        r.policy = InitPolicy::NoiseReservoir {
            noise: NoiseDist::Uniform { lo: 0.0, hi: 1.0 },
            reinit_prob: 0.0,
        };
        let d = r.sample_inits(50, None, &mut rng).unwrap();
        assert!(d.states.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn snapshot_round_trip() {
        let r = Reservoir::init(noise(), 6, 2, None, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut buf = Vec::new();
        r.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"EBMR");
        assert_eq!(buf.len(), 16 + 6 * 2 * 8);
        let back = Reservoir::read_from(buf.as_slice(), noise()).unwrap();
        assert_eq!(back.capacity(), 6);
        assert!(back.states().eq(r.states()));
        buf[0] = b'X';
        assert!(matches!(Reservoir::read_from(buf.as_slice(), noise()), Err(ReplayError::Format(_))));
    }

    #[test]
    fn probabilities_are_validated() {
        let bad = InitPolicy::DataCd { reset_prob: 1.5 };
        assert!(bad.validate().is_err());
    }
}
