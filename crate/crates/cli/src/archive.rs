//! Self-describing binary model archives.
//!
//! ```text
//! magic    8 bytes  "TTBNNARC"
//! version  u32
//! length   u64      payload bytes
//! payload
//! sha256   32 bytes over the payload
//! ```
//!
//! All integers and floats are little-endian. The payload holds the training
//! metadata, the prior, the architecture (factorizations, ranks, activation
//! per layer) and then, per particle, every parameter as f64 in the flat
//! order of [`Particle::flatten`]: each core row-major over
//! `(r_{k-1}, m_k, j_k, r_k)`, then the scale vectors, then the bias.

use sha2::{Digest, Sha256};
use thiserror::Error;
use ttbnn_core::{
    Activation, FactorizedShape, GammaHyper, LayerSpec, Network, Particle, Prior, RankVector,
    ThresholdPolicy, LAMBDA_FLOOR,
};

pub const MAGIC: [u8; 8] = *b"TTBNNARC";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ArchiveError {
    #[error("not a model archive (bad magic)")]
    BadMagic,
    #[error("unsupported archive version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("archive truncated: needed {needed} bytes, found {available}")]
    Truncated { needed: usize, available: usize },
    #[error("archive checksum mismatch")]
    Checksum,
    #[error("malformed archive: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metadata {
    pub seed: u64,
    /// Optimizer steps taken, MAP and SVGD combined.
    pub iterations: u64,
    /// `"map"`, `"svgd"`, or `"init"` for untrained models.
    pub trainer: String,
    /// Data source name, see `DataSource::name`.
    pub dataset: String,
    /// Size of generated toy splits; 0 for MNIST.
    pub toy_count: u64,
    /// Threshold used to prune this model, if it was pruned.
    pub threshold: Option<ThresholdPolicy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelArchive {
    pub meta: Metadata,
    pub prior: Prior,
    pub net: Network,
    pub particles: Vec<Particle>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("dimension fits in u32"));
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ArchiveError> {
        if self.data.len() - self.at < n {
            return Err(ArchiveError::Malformed(format!(
                "payload ends at byte {} while reading {} more",
                self.data.len(),
                n
            )));
        }
        let out = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }
    fn u8(&mut self) -> Result<u8, ArchiveError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ArchiveError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64, ArchiveError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64, ArchiveError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn usize(&mut self) -> Result<usize, ArchiveError> {
        Ok(self.u32()? as usize)
    }
    fn dims(&mut self, n: usize) -> Result<Vec<usize>, ArchiveError> {
        (0..n).map(|_| self.usize()).collect()
    }
    fn str(&mut self) -> Result<String, ArchiveError> {
        let n = self.usize()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| ArchiveError::Malformed("invalid UTF-8 string".into()))
    }
}

fn malformed(e: impl std::fmt::Display) -> ArchiveError {
    ArchiveError::Malformed(e.to_string())
}

pub fn save_archive(model: &ModelArchive) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    let m = &model.meta;
    w.u64(m.seed);
    w.u64(m.iterations);
    w.str(&m.trainer);
    w.str(&m.dataset);
    w.u64(m.toy_count);
    match m.threshold {
        Some(t) => {
            w.u8(1);
            w.f64(t.rel);
            w.f64(t.abs);
        }
        None => w.u8(0),
    }
    w.f64(model.prior.hyper.a);
    w.f64(model.prior.hyper.b);
    w.f64(model.prior.weak_variance);
    w.usize(model.net.layers().len());
    for spec in model.net.layers() {
        w.usize(spec.shape.order());
        spec.shape.row_factors().iter().for_each(|&v| w.usize(v));
        spec.shape.col_factors().iter().for_each(|&v| w.usize(v));
        spec.ranks.as_slice().iter().for_each(|&v| w.usize(v));
        w.str(spec.activation.name());
    }
    w.usize(model.particles.len());
    for p in &model.particles {
        for v in p.flatten() {
            w.f64(v);
        }
    }
    let payload = w.0;

    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + DIGEST_LEN);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&Sha256::digest(&payload));
    out
}

/// Payload size in bytes of an encoded archive.
pub fn payload_len(bytes: &[u8]) -> Result<usize, ArchiveError> {
    Ok(split(bytes)?.len())
}

fn split(bytes: &[u8]) -> Result<&[u8], ArchiveError> {
    if bytes.len() < HEADER_LEN {
        if bytes.len() >= 8 && bytes[..8] != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        return Err(ArchiveError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    if bytes[..8] != MAGIC {
        return Err(ArchiveError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ArchiveError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let needed = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(HEADER_LEN + DIGEST_LEN))
        .ok_or_else(|| malformed("payload length overflows"))?;
    if bytes.len() < needed {
        return Err(ArchiveError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(malformed(format!(
            "{} trailing bytes",
            bytes.len() - needed
        )));
    }
    let payload = &bytes[HEADER_LEN..needed - DIGEST_LEN];
    if Sha256::digest(payload).as_slice() != &bytes[needed - DIGEST_LEN..] {
        return Err(ArchiveError::Checksum);
    }
    Ok(payload)
}

pub fn load_archive(bytes: &[u8]) -> Result<ModelArchive, ArchiveError> {
    let mut r = Reader {
        data: split(bytes)?,
        at: 0,
    };
    let seed = r.u64()?;
    let iterations = r.u64()?;
    let trainer = r.str()?;
    let dataset = r.str()?;
    let toy_count = r.u64()?;
    let threshold = match r.u8()? {
        0 => None,
        1 => Some(ThresholdPolicy::new(r.f64()?, r.f64()?).map_err(malformed)?),
        t => return Err(malformed(format!("bad threshold tag {}", t))),
    };
    let (a, b, weak_variance) = (r.f64()?, r.f64()?, r.f64()?);
    let hyper = GammaHyper::new(a, b).map_err(malformed)?;
    if !(weak_variance > 0.0 && weak_variance.is_finite()) {
        return Err(malformed("weak variance must be positive"));
    }
    let n_layers = r.usize()?;
    let mut specs = Vec::with_capacity(n_layers.min(64));
    for _ in 0..n_layers {
        let d = r.usize()?;
        if d > 64 {
            return Err(malformed(format!("implausible TT order {}", d)));
        }
        let rows = r.dims(d)?;
        let cols = r.dims(d)?;
        let ranks = r.dims(d + 1)?;
        let act = r.str()?;
        specs.push(LayerSpec {
            shape: FactorizedShape::new(rows, cols).map_err(malformed)?,
            ranks: RankVector::new(ranks).map_err(malformed)?,
            activation: Activation::from_name(&act)
                .ok_or_else(|| malformed(format!("unknown activation {:?}", act)))?,
        });
    }
    let net = Network::new(specs).map_err(malformed)?;
    let n_particles = r.usize()?;
    let template = Particle::zeros(&net);
    let count = template.param_count();
    if n_particles == 0 || (r.data.len() - r.at) != n_particles * count * 8 {
        return Err(malformed(format!(
            "{} particles of {} parameters do not fill the remaining {} bytes",
            n_particles,
            count,
            r.data.len() - r.at
        )));
    }
    let mut particles = Vec::with_capacity(n_particles);
    for _ in 0..n_particles {
        let flat = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let mut p = template.clone();
        p.assign_flat(&flat).map_err(malformed)?;
        if !p.is_finite() {
            return Err(malformed("non-finite parameter"));
        }
        if p.layers
            .iter()
            .flat_map(|l| &l.lambdas)
            .flat_map(|v| v.values())
            .any(|&v| v < LAMBDA_FLOOR)
        {
            return Err(malformed("rank scale below the floor"));
        }
        particles.push(p);
    }
    Ok(ModelArchive {
        meta: Metadata {
            seed,
            iterations,
            trainer,
            dataset,
            toy_count,
            threshold,
        },
        prior: Prior {
            hyper,
            weak_variance,
        },
        net,
        particles,
    })
}
