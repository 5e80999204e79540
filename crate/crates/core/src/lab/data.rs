//! Datasets: synthetic 2-D mixtures and rings, procedural 8×8 digits, and
//! IDX image files.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::energies::BoxBounds;
use crate::rng::stream;

use super::LabError;

const IDX_IMAGES: u32 = 0x0000_0803;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModeLayout {
    /// Evenly spaced on a circle.
    Ring { radius: f64 },
    /// Row-major on a square lattice centred at the origin.
    Grid { spacing: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Isotropic Gaussian in any dimension.
    Gaussian { mean: Vec<f64>, std: f64, count: usize },
    /// Equal-weight isotropic Gaussian modes in the plane.
    Mixture2d {
        modes: usize,
        layout: ModeLayout,
        std: f64,
        count: usize,
    },
    /// Concentric rings with radial noise.
    Rings2d { radii: Vec<f64>, std: f64, count: usize },
    /// Seven-segment digits on an 8×8 raster, randomly shifted by up to one
    /// pixel, with clipped pixel noise.
    SyntheticDigits {
        count: usize,
        #[serde(default)]
        pixel_noise: f64,
    },
    IdxFile {
        path: PathBuf,
        /// Average-pool 2×2 (28×28 becomes 14×14).
        #[serde(default)]
        downsample: bool,
        #[serde(default)]
        limit: Option<usize>,
    },
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, d]`
    pub points: Tensor,
    /// Generating modes, when known.
    pub modes: Option<Vec<Vec<f64>>>,
    pub mode_std: Option<f64>,
    /// `(height, width)` for image data.
    pub raster: Option<(usize, usize)>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.shape()[1]
    }

    /// Bounding box of the data, widened by `pad` on every side.
    pub fn bounds(&self, pad: f64) -> BoxBounds {
        let d = self.dim();
        let mut lo = vec![f64::INFINITY; d];
        let mut hi = vec![f64::NEG_INFINITY; d];
        for i in 0..self.len() {
            for (k, &v) in self.points.row(i).iter().enumerate() {
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        BoxBounds {
            lo: lo.iter().map(|v| v - pad).collect(),
            hi: hi.iter().map(|v| v + pad).collect(),
        }
    }

    /// Rows drawn uniformly with replacement.
    pub fn batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Tensor {
        let d = self.dim();
        let mut out = Vec::with_capacity(size * d);
        for _ in 0..size {
            let i = rng.random_range(0..self.len());
            out.extend_from_slice(self.points.row(i));
        }
        Tensor::matrix(size, d, out).expect("consistent batch")
    }
}

pub fn mode_centers(count: usize, layout: &ModeLayout) -> Vec<Vec<f64>> {
    match *layout {
        ModeLayout::Ring { radius } => crate::energies::ring_modes(count, radius),
        ModeLayout::Grid { spacing } => {
            let side = (count as f64).sqrt().ceil() as usize;
            let offset = 0.5 * (side as f64 - 1.0) * spacing;
            (0..count)
                .map(|k| vec![(k % side) as f64 * spacing - offset, (k / side) as f64 * spacing - offset])
                .collect()
        }
    }
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

// a b c d e f g
const SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

/// Clean 8×8 template of digit `k`, row-major.
pub fn digit_template(k: usize) -> Vec<f64> {
    let mut img = vec![0.0; 64];
    let mut set = |r: usize, c: usize| img[r * 8 + c] = 1.0;
    let s = SEGMENTS[k % 10];
    for c in 2..=5 {
        if s[0] {
            set(1, c);
        }
        if s[6] {
            set(4, c);
        }
        if s[3] {
            set(6, c);
        }
    }
    for r in 1..=4 {
        if s[5] {
            set(r, 2);
        }
        if s[1] {
            set(r, 5);
        }
    }
    for r in 4..=6 {
        if s[4] {
            set(r, 2);
        }
        if s[2] {
            set(r, 5);
        }
    }
    img
}

fn shifted(img: &[f64], dr: i64, dc: i64) -> Vec<f64> {
    let mut out = vec![0.0; 64];
    for r in 0..8i64 {
        for c in 0..8i64 {
            let (sr, sc) = (r - dr, c - dc);
            if (0..8).contains(&sr) && (0..8).contains(&sc) {
                out[(r * 8 + c) as usize] = img[(sr * 8 + sc) as usize];
            }
        }
    }
    out
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), LabError> {
        let bad = |m: &str| Err(LabError::Config(format!("dataset: {}", m)));
        match self {
            DatasetSpec::Gaussian { mean, std, count } => {
                if mean.is_empty() || *count == 0 || !(*std > 0.0) {
                    return bad("gaussian needs a mean, a positive std and count");
                }
            }
            DatasetSpec::Mixture2d { modes, std, count, .. } => {
                if *modes == 0 || *count == 0 || !(*std > 0.0) {
                    return bad("mixture needs modes, a positive std and count");
                }
            }
            DatasetSpec::Rings2d { radii, std, count } => {
                if radii.is_empty() || *count == 0 || !(*std >= 0.0) {
                    return bad("rings need radii, a non-negative std and count");
                }
            }
            DatasetSpec::SyntheticDigits { count, pixel_noise } => {
                if *count == 0 || !(*pixel_noise >= 0.0) {
                    return bad("digits need a count and non-negative noise");
                }
            }
            DatasetSpec::IdxFile { limit, .. } => {
                if *limit == Some(0) {
                    return bad("idx limit must be positive");
                }
            }
        }
        Ok(())
    }

    /// Materializes the dataset; synthetic variants draw from a stream
    /// derived from `seed`.
    pub fn build(&self, seed: u64) -> Result<Dataset, LabError> {
        self.validate()?;
        let mut rng: ChaCha8Rng = stream(seed, "dataset", &[]);
        let ds = match self {
            DatasetSpec::Gaussian { mean, std, count } => {
                let d = mean.len();
                let pts = (0..count * d).map(|i| mean[i % d] + std * normal(&mut rng)).collect();
                Dataset {
                    points: Tensor::matrix(*count, d, pts)?,
                    modes: Some(vec![mean.clone()]),
                    mode_std: Some(*std),
                    raster: None,
                }
            }
            DatasetSpec::Mixture2d {
                modes,
                layout,
                std,
                count,
            } => {
                let centers = mode_centers(*modes, layout);
                let mut pts = Vec::with_capacity(count * 2);
                for _ in 0..*count {
                    let c = &centers[rng.random_range(0..centers.len())];
                    pts.push(c[0] + std * normal(&mut rng));
                    pts.push(c[1] + std * normal(&mut rng));
                }
                Dataset {
                    points: Tensor::matrix(*count, 2, pts)?,
                    modes: Some(centers),
                    mode_std: Some(*std),
                    raster: None,
                }
            }
            DatasetSpec::Rings2d { radii, std, count } => {
                let mut pts = Vec::with_capacity(count * 2);
                for _ in 0..*count {
                    let r = radii[rng.random_range(0..radii.len())] + std * normal(&mut rng);
                    let a = rng.random::<f64>() * std::f64::consts::TAU;
                    pts.push(r * a.cos());
                    pts.push(r * a.sin());
                }
                Dataset {
                    points: Tensor::matrix(*count, 2, pts)?,
                    modes: None,
                    mode_std: None,
                    raster: None,
                }
            }
            DatasetSpec::SyntheticDigits { count, pixel_noise } => {
                let mut pts = Vec::with_capacity(count * 64);
                for _ in 0..*count {
                    let k = rng.random_range(0..10);
                    let dr = rng.random_range(-1..=1);
                    let dc = rng.random_range(-1..=1);
                    for v in shifted(&digit_template(k), dr, dc) {
                        let noisy = if *pixel_noise > 0.0 {
                            v + pixel_noise * normal(&mut rng)
                        } else {
                            v
                        };
                        pts.push(noisy.clamp(0.0, 1.0));
                    }
                }
                Dataset {
                    points: Tensor::matrix(*count, 64, pts)?,
                    modes: Some((0..10).map(digit_template).collect()),
                    mode_std: None,
                    raster: Some((8, 8)),
                }
            }
            DatasetSpec::IdxFile { path, downsample, limit } => {
                let mut img = load_idx(path, *downsample)?;
                if let Some(l) = limit {
                    img = img.truncated(*l);
                }
                Dataset {
                    raster: Some((img.height, img.width)),
                    points: img.pixels,
                    modes: None,
                    mode_std: None,
                }
            }
        };
        if !ds.points.all_finite() {
            return Err(LabError::Config("dataset contains non-finite points".into()));
        }
        Ok(ds)
    }
}

/// Images from an IDX file, scaled to [0, 1].
#[derive(Clone, Debug)]
pub struct IdxImages {
    pub height: usize,
    pub width: usize,
    /// `[count, height * width]`
    pub pixels: Tensor,
}

impl IdxImages {
    pub fn count(&self) -> usize {
        self.pixels.shape()[0]
    }

    fn truncated(self, n: usize) -> Self {
        let n = n.min(self.count());
        let d = self.height * self.width;
        let data = self.pixels.data()[..n * d].to_vec();
        Self {
            pixels: Tensor::matrix(n, d, data).expect("prefix"),
            ..self
        }
    }
}

/// Parses an IDX image file (big-endian magic 0x00000803, three u32 dims,
/// u8 pixels).
pub fn read_idx<R: Read>(mut r: R, downsample: bool) -> Result<IdxImages, LabError> {
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| LabError::Idx("file too short for a header".into()))?;
    if magic != IDX_IMAGES {
        return Err(LabError::Idx(format!(
            "magic {:#010x} is not an image file ({:#010x})",
            magic, IDX_IMAGES
        )));
    }
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = r
            .read_u32::<BigEndian>()
            .map_err(|_| LabError::Idx("truncated header".into()))? as usize;
    }
    let [n, h, w] = dims;
    let total = n
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| LabError::Idx("dimensions overflow".into()))?;
    let mut bytes = Vec::with_capacity(total);
    r.take(total as u64).read_to_end(&mut bytes)?;
    if bytes.len() != total {
        return Err(LabError::Idx(format!(
            "truncated payload: expected {} bytes, found {}",
            total,
            bytes.len()
        )));
    }
    let mut pixels: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    let (mut h, mut w) = (h, w);
    if downsample {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(LabError::Idx(format!("cannot halve a {}x{} image", h, w)));
        }
        let (h2, w2) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * h2 * w2);
        for img in pixels.chunks(h * w) {
            for r in 0..h2 {
                for c in 0..w2 {
                    let s = img[2 * r * w + 2 * c]
                        + img[2 * r * w + 2 * c + 1]
                        + img[(2 * r + 1) * w + 2 * c]
                        + img[(2 * r + 1) * w + 2 * c + 1];
                    out.push(0.25 * s);
                }
            }
        }
        pixels = out;
        h = h2;
        w = w2;
    }
    Ok(IdxImages {
        height: h,
        width: w,
        pixels: Tensor::matrix(n, h * w, pixels)?,
    })
}

pub fn load_idx(path: &Path, downsample: bool) -> Result<IdxImages, LabError> {
    let f = std::fs::File::open(path).map_err(|e| LabError::Idx(format!("{}: {}", path.display(), e)))?;
    read_idx(std::io::BufReader::new(f), downsample)
}

/// Writes u8 images in the IDX image layout.
pub fn write_idx<W: Write>(mut w: W, height: usize, width: usize, images: &[Vec<u8>]) -> Result<(), LabError> {
    w.write_u32::<BigEndian>(IDX_IMAGES)?;
    for d in [images.len(), height, width] {
        w.write_u32::<BigEndian>(u32::try_from(d).map_err(|_| LabError::Idx("dimension exceeds u32".into()))?)?;
    }
    for img in images {
        if img.len() != height * width {
            return Err(LabError::Idx("image size does not match dimensions".into()));
        }
        w.write_all(img)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_parses_to_exact_values() {
        let mut buf = Vec::new();
        write_idx(&mut buf, 2, 2, &[vec![0, 255, 51, 102], vec![255, 255, 0, 0]]).unwrap();
        let img = read_idx(buf.as_slice(), false).unwrap();
        assert_eq!(img.pixels.shape(), &[2, 4]);
        assert_eq!(img.pixels.data(), &[0.0, 1.0, 0.2, 0.4, 1.0, 1.0, 0.0, 0.0]);
        let half = read_idx(buf.as_slice(), true).unwrap();
        assert_eq!((half.height, half.width), (1, 1));
        assert!((half.pixels.data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(half.pixels.data()[1], 0.5);
    }

    #[test]
    fn label_magic_is_rejected() {
        let mut buf = vec![0, 0, 8, 1];
        buf.extend_from_slice(&[0, 0, 0, 1]);
        assert!(matches!(read_idx(buf.as_slice(), false), Err(LabError::Idx(_))));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut buf = Vec::new();
        write_idx(&mut buf, 2, 2, &[vec![1, 2, 3, 4]]).unwrap();
        buf.pop();
        let err = read_idx(buf.as_slice(), false).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn digits_are_in_unit_range() {
        let ds = DatasetSpec::SyntheticDigits {
            count: 50,
            pixel_noise: 0.3,
        }
        .build(4)
        .unwrap();
        assert_eq!(ds.points.shape(), &[50, 64]);
        assert!(ds.points.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(digit_template(8).iter().filter(|&&v| v == 1.0).count(), 18);
    }

    #[test]
    fn grid_layout_is_centred() {
        let c = mode_centers(4, &ModeLayout::Grid { spacing: 2.0 });
        assert_eq!(c, vec![vec![-1.0, -1.0], vec![1.0, -1.0], vec![-1.0, 1.0], vec![1.0, 1.0]]);
    }

    #[test]
    fn synthetic_data_is_reproducible() {
        let spec = DatasetSpec::Mixture2d {
            modes: 8,
            layout: ModeLayout::Ring { radius: 4.0 },
            std: 0.3,
            count: 100,
        };
        assert_eq!(spec.build(1).unwrap().points, spec.build(1).unwrap().points);
        assert_ne!(spec.build(1).unwrap().points, spec.build(2).unwrap().points);
    }
}
