//! Binary persistence of the training log: per-step records (minibatch ids,
//! learning rate) plus parameter checkpoints under a cache policy.
//!
//! The `ICCH` container is the bit-exact contract between the training and
//! inference phases. Little-endian throughout. Layout:
//!
//! ```text
//! header   (56 bytes)  magic "ICCH", version u16, width u8, policy u8,
//!                      p u64, N u64, d u32, C u32, k u32, T u32,
//!                      batch_size u32, reserved u32, total_steps u64
//! manifest (56 bytes)  records_off, records_len, ckpt_off,
//!                      n_step_checkpoints, first_checkpoint_step,
//!                      final_off, file_len   (all u64)
//! records              per step: lr f64, len u32, ids len × u32
//! step checkpoints     n_step_checkpoints vectors of p × width bytes
//! final params         one vector of p × width bytes
//! ```
//!
//! Every policy stores the final parameters; the per-step section holds the
//! state *entering* each step for the covered window (`All`: every step,
//! `LastEpoch`: the final epoch, `FinalOnly`: none). Checkpoints default to
//! f32 storage; influence math upcasts to f64 on load.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::trainer::SgdStepRecord;

pub const CACHE_MAGIC: [u8; 4] = *b"ICCH";
pub const CACHE_VERSION: u16 = 1;
const HEADER_LEN: u64 = 56;
const MANIFEST_LEN: u64 = 56;
const DATA_START: u64 = HEADER_LEN + MANIFEST_LEN;

/// Which parameter checkpoints the training phase persists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointPolicy {
    /// Every step of every epoch.
    All,
    /// Every step of the final epoch.
    LastEpoch,
    /// Only the final parameters.
    FinalOnly,
}

impl CheckpointPolicy {
    fn code(self) -> u8 {
        match self {
            CheckpointPolicy::All => 0,
            CheckpointPolicy::LastEpoch => 1,
            CheckpointPolicy::FinalOnly => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(CheckpointPolicy::All),
            1 => Ok(CheckpointPolicy::LastEpoch),
            2 => Ok(CheckpointPolicy::FinalOnly),
            other => Err(Error::CacheFormat(format!("unknown policy code {other}"))),
        }
    }
}

impl std::str::FromStr for CheckpointPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(CheckpointPolicy::All),
            "last_epoch" => Ok(CheckpointPolicy::LastEpoch),
            "final_only" => Ok(CheckpointPolicy::FinalOnly),
            other => Err(Error::invalid(format!(
                "unknown policy {other:?} (expected all|last_epoch|final_only)"
            ))),
        }
    }
}

impl std::fmt::Display for CheckpointPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CheckpointPolicy::All => "all",
            CheckpointPolicy::LastEpoch => "last_epoch",
            CheckpointPolicy::FinalOnly => "final_only",
        };
        f.write_str(s)
    }
}

/// Storage width of checkpoint floats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloatWidth {
    F32,
    F64,
}

impl FloatWidth {
    pub fn bytes(self) -> u64 {
        match self {
            FloatWidth::F32 => 4,
            FloatWidth::F64 => 8,
        }
    }

    pub fn from_bytes(bytes: u64) -> Result<Self> {
        match bytes {
            4 => Ok(FloatWidth::F32),
            8 => Ok(FloatWidth::F64),
            other => Err(Error::invalid(format!("unsupported float width {other} (expected 4 or 8)"))),
        }
    }

    /// Rounds a vector through the storage width. With `F32` the values come
    /// back as the f64 the reader will reconstruct, so the in-memory cache
    /// and a file round trip agree bit-exactly.
    fn quantize(self, values: &[f64]) -> Vec<f64> {
        match self {
            FloatWidth::F32 => values.iter().map(|&x| x as f32 as f64).collect(),
            FloatWidth::F64 => values.to_vec(),
        }
    }
}

/// Fixed-size cache file header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheHeader {
    pub p: u64,
    pub n: u64,
    pub d: u32,
    pub c: u32,
    pub epochs: u32,
    pub steps_per_epoch: u32,
    pub batch_size: u32,
    pub total_steps: u64,
    pub width: FloatWidth,
    pub policy: CheckpointPolicy,
}

impl CacheHeader {
    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(HEADER_LEN as usize);
        buf.extend_from_slice(&CACHE_MAGIC);
        buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
        buf.push(self.width.bytes() as u8);
        buf.push(self.policy.code());
        buf.extend_from_slice(&self.p.to_le_bytes());
        buf.extend_from_slice(&self.n.to_le_bytes());
        buf.extend_from_slice(&self.d.to_le_bytes());
        buf.extend_from_slice(&self.c.to_le_bytes());
        buf.extend_from_slice(&self.epochs.to_le_bytes());
        buf.extend_from_slice(&self.steps_per_epoch.to_le_bytes());
        buf.extend_from_slice(&self.batch_size.to_le_bytes());
        buf.extend_from_slice(&0u32.to_le_bytes());
        buf.extend_from_slice(&self.total_steps.to_le_bytes());
        debug_assert_eq!(buf.len() as u64, HEADER_LEN);
        buf
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN as usize {
            return Err(Error::CacheFormat("file shorter than header".into()));
        }
        if bytes[0..4] != CACHE_MAGIC {
            return Err(Error::CacheFormat("bad cache magic".into()));
        }
        let version = u16::from_le_bytes(bytes[4..6].try_into().unwrap());
        if version != CACHE_VERSION {
            return Err(Error::CacheFormat(format!("unsupported cache version {version}")));
        }
        Ok(CacheHeader {
            width: FloatWidth::from_bytes(bytes[6] as u64)
                .map_err(|_| Error::CacheFormat(format!("bad width byte {}", bytes[6])))?,
            policy: CheckpointPolicy::from_code(bytes[7])?,
            p: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
            n: u64::from_le_bytes(bytes[16..24].try_into().unwrap()),
            d: u32::from_le_bytes(bytes[24..28].try_into().unwrap()),
            c: u32::from_le_bytes(bytes[28..32].try_into().unwrap()),
            epochs: u32::from_le_bytes(bytes[32..36].try_into().unwrap()),
            steps_per_epoch: u32::from_le_bytes(bytes[36..40].try_into().unwrap()),
            batch_size: u32::from_le_bytes(bytes[40..44].try_into().unwrap()),
            total_steps: u64::from_le_bytes(bytes[48..56].try_into().unwrap()),
        })
    }

    /// Global step index of the first step of the last epoch.
    pub fn last_epoch_start(&self) -> u64 {
        (self.epochs as u64 - 1) * self.steps_per_epoch as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Manifest {
    records_off: u64,
    records_len: u64,
    ckpt_off: u64,
    n_step_checkpoints: u64,
    first_checkpoint_step: u64,
    final_off: u64,
    file_len: u64,
}

impl Manifest {
    fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(MANIFEST_LEN as usize);
        for v in [
            self.records_off,
            self.records_len,
            self.ckpt_off,
            self.n_step_checkpoints,
            self.first_checkpoint_step,
            self.final_off,
            self.file_len,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MANIFEST_LEN as usize {
            return Err(Error::CacheFormat("file shorter than manifest".into()));
        }
        let word = |i: usize| u64::from_le_bytes(bytes[i * 8..(i + 1) * 8].try_into().unwrap());
        Ok(Manifest {
            records_off: word(0),
            records_len: word(1),
            ckpt_off: word(2),
            n_step_checkpoints: word(3),
            first_checkpoint_step: word(4),
            final_off: word(5),
            file_len: word(6),
        })
    }
}

/// Read access to a training cache, independent of whether it lives in
/// memory or on disk.
pub trait CacheView {
    fn header(&self) -> &CacheHeader;
    fn records(&self) -> &[SgdStepRecord];
    /// Parameters entering global step `t`, upcast to f64.
    fn step_params(&self, t: u64) -> Result<ParamVector>;
    /// Final parameters after the last step.
    fn final_params(&self) -> Result<ParamVector>;
    fn n_step_checkpoints(&self) -> u64;
    fn first_checkpoint_step(&self) -> u64;

    /// Byte accounting of this cache as stored (checkpoint payload counts
    /// the per-step section plus the always-present final vector).
    fn measured_stats(&self) -> CacheStats {
        let h = self.header();
        let w = h.width.bytes();
        let checkpoint_payload_bytes = (self.n_step_checkpoints() + 1) * h.p * w;
        let step_record_bytes: u64 = self
            .records()
            .iter()
            .map(|r| 12 + 4 * r.indices.len() as u64)
            .sum();
        let last_epoch_payload = (h.steps_per_epoch as u64 + 1) * h.p * w;
        CacheStats {
            step_record_bytes,
            checkpoint_payload_bytes,
            total_bytes: DATA_START + step_record_bytes + checkpoint_payload_bytes,
            reduction_ratio_vs_last_epoch: checkpoint_payload_bytes as f64 / last_epoch_payload as f64,
        }
    }
}

/// In-memory training cache; what [`crate::trainer::train`] produces and
/// [`InfluenceCache::write`] persists.
#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceCache {
    header: CacheHeader,
    records: Vec<SgdStepRecord>,
    step_checkpoints: Vec<Vec<f64>>,
    first_step: u64,
    final_values: Vec<f64>,
}

impl InfluenceCache {
    /// Assembles a cache, quantizing checkpoints through the header's float
    /// width. Validates counts against the policy.
    pub fn new(
        header: CacheHeader,
        records: Vec<SgdStepRecord>,
        step_checkpoints: Vec<ParamVector>,
        first_step: u64,
        final_params: &ParamVector,
    ) -> Result<Self> {
        if records.len() as u64 != header.total_steps {
            return Err(Error::invalid(format!(
                "{} step records, header says {}",
                records.len(),
                header.total_steps
            )));
        }
        let expected = match header.policy {
            CheckpointPolicy::All => header.total_steps,
            CheckpointPolicy::LastEpoch => header.steps_per_epoch as u64,
            CheckpointPolicy::FinalOnly => 0,
        };
        if step_checkpoints.len() as u64 != expected {
            return Err(Error::invalid(format!(
                "{} step checkpoints, policy {} expects {}",
                step_checkpoints.len(),
                header.policy,
                expected
            )));
        }
        for ckpt in &step_checkpoints {
            if ckpt.len() as u64 != header.p {
                return Err(Error::dim(format!(
                    "checkpoint of length {}, header p = {}",
                    ckpt.len(),
                    header.p
                )));
            }
        }
        if final_params.len() as u64 != header.p {
            return Err(Error::dim(format!(
                "final parameters of length {}, header p = {}",
                final_params.len(),
                header.p
            )));
        }
        let width = header.width;
        Ok(InfluenceCache {
            step_checkpoints: step_checkpoints
                .iter()
                .map(|c| width.quantize(c.values()))
                .collect(),
            final_values: width.quantize(final_params.values()),
            header,
            records,
            first_step,
        })
    }

    fn encode_records(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for r in &self.records {
            buf.extend_from_slice(&r.lr.to_le_bytes());
            buf.extend_from_slice(&(r.indices.len() as u32).to_le_bytes());
            for &id in &r.indices {
                buf.extend_from_slice(&(id as u32).to_le_bytes());
            }
        }
        buf
    }

    fn encode_vector(&self, values: &[f64], buf: &mut Vec<u8>) {
        match self.header.width {
            FloatWidth::F32 => {
                for &x in values {
                    buf.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
            FloatWidth::F64 => {
                for &x in values {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }

    /// Serializes the whole container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let records = self.encode_records();
        let vec_bytes = self.header.p * self.header.width.bytes();
        let records_off = DATA_START;
        let ckpt_off = records_off + records.len() as u64;
        let final_off = ckpt_off + self.step_checkpoints.len() as u64 * vec_bytes;
        let file_len = final_off + vec_bytes;
        let manifest = Manifest {
            records_off,
            records_len: records.len() as u64,
            ckpt_off,
            n_step_checkpoints: self.step_checkpoints.len() as u64,
            first_checkpoint_step: self.first_step,
            final_off,
            file_len,
        };
        let mut buf = Vec::with_capacity(file_len as usize);
        buf.extend_from_slice(&self.header.encode());
        buf.extend_from_slice(&manifest.encode());
        buf.extend_from_slice(&records);
        for ckpt in &self.step_checkpoints {
            self.encode_vector(ckpt, &mut buf);
        }
        self.encode_vector(&self.final_values, &mut buf);
        debug_assert_eq!(buf.len() as u64, file_len);
        buf
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl CacheView for InfluenceCache {
    fn header(&self) -> &CacheHeader {
        &self.header
    }

    fn records(&self) -> &[SgdStepRecord] {
        &self.records
    }

    fn step_params(&self, t: u64) -> Result<ParamVector> {
        let count = self.step_checkpoints.len() as u64;
        if t < self.first_step || t >= self.first_step + count {
            return Err(Error::CheckpointUnavailable(t));
        }
        Ok(ParamVector::from(
            self.step_checkpoints[(t - self.first_step) as usize].clone(),
        ))
    }

    fn final_params(&self) -> Result<ParamVector> {
        Ok(ParamVector::from(self.final_values.clone()))
    }

    fn n_step_checkpoints(&self) -> u64 {
        self.step_checkpoints.len() as u64
    }

    fn first_checkpoint_step(&self) -> u64 {
        self.first_step
    }
}

/// Lazy file-backed cache: header and step records are parsed eagerly,
/// checkpoints are fetched by offset on demand. The file is immutable after
/// finalization, so concurrent readers are safe.
#[derive(Debug)]
pub struct CacheReader {
    path: PathBuf,
    file: Mutex<File>,
    header: CacheHeader,
    manifest: Manifest,
    records: Vec<SgdStepRecord>,
}

/// Opens a cache file, validating magic, version, and manifest offsets.
pub fn read_cache(path: impl AsRef<Path>) -> Result<CacheReader> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let actual_len = file.metadata().map_err(|e| Error::io(path, e))?.len();

    let mut head = vec![0u8; DATA_START as usize];
    if actual_len < DATA_START {
        return Err(Error::CacheFormat("file shorter than header".into()));
    }
    file.read_exact(&mut head).map_err(|e| Error::io(path, e))?;
    let header = CacheHeader::decode(&head[..HEADER_LEN as usize])?;
    let manifest = Manifest::decode(&head[HEADER_LEN as usize..])?;

    if manifest.file_len > actual_len
        || manifest.records_off + manifest.records_len > manifest.file_len
        || manifest.final_off + header.p * header.width.bytes() > manifest.file_len
        || manifest.ckpt_off + manifest.n_step_checkpoints * header.p * header.width.bytes()
            > manifest.file_len
    {
        return Err(Error::CacheFormat("manifest overruns file".into()));
    }

    file.seek(SeekFrom::Start(manifest.records_off))
        .map_err(|e| Error::io(path, e))?;
    let mut record_bytes = vec![0u8; manifest.records_len as usize];
    file.read_exact(&mut record_bytes).map_err(|e| Error::io(path, e))?;
    let records = decode_records(&record_bytes, header.total_steps)?;

    Ok(CacheReader {
        path: path.to_path_buf(),
        file: Mutex::new(file),
        header,
        manifest,
        records,
    })
}

fn decode_records(bytes: &[u8], total_steps: u64) -> Result<Vec<SgdStepRecord>> {
    let mut records = Vec::with_capacity(total_steps as usize);
    let mut pos = 0usize;
    for step in 0..total_steps {
        if pos + 12 > bytes.len() {
            return Err(Error::CacheFormat(format!("records section truncated at step {step}")));
        }
        let lr = f64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap());
        let len = u32::from_le_bytes(bytes[pos + 8..pos + 12].try_into().unwrap()) as usize;
        pos += 12;
        if pos + 4 * len > bytes.len() {
            return Err(Error::CacheFormat(format!("records section truncated at step {step}")));
        }
        let mut indices = Vec::with_capacity(len);
        for i in 0..len {
            indices.push(u32::from_le_bytes(bytes[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap()) as usize);
        }
        pos += 4 * len;
        records.push(SgdStepRecord { step, indices, lr });
    }
    if pos != bytes.len() {
        return Err(Error::CacheFormat("trailing bytes in records section".into()));
    }
    Ok(records)
}

impl CacheReader {
    fn read_vector_at(&self, off: u64) -> Result<ParamVector> {
        let w = self.header.width;
        let len = (self.header.p * w.bytes()) as usize;
        let mut buf = vec![0u8; len];
        {
            let mut file = self.file.lock().expect("cache file lock");
            file.seek(SeekFrom::Start(off))
                .and_then(|_| file.read_exact(&mut buf))
                .map_err(|e| Error::io(&self.path, e))?;
        }
        let values: Vec<f64> = match w {
            FloatWidth::F32 => buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            FloatWidth::F64 => buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(ParamVector::from(values))
    }
}

impl CacheView for CacheReader {
    fn header(&self) -> &CacheHeader {
        &self.header
    }

    fn records(&self) -> &[SgdStepRecord] {
        &self.records
    }

    fn step_params(&self, t: u64) -> Result<ParamVector> {
        let m = &self.manifest;
        if t < m.first_checkpoint_step || t >= m.first_checkpoint_step + m.n_step_checkpoints {
            return Err(Error::CheckpointUnavailable(t));
        }
        let off = m.ckpt_off + (t - m.first_checkpoint_step) * self.header.p * self.header.width.bytes();
        self.read_vector_at(off)
    }

    fn final_params(&self) -> Result<ParamVector> {
        self.read_vector_at(self.manifest.final_off)
    }

    fn n_step_checkpoints(&self) -> u64 {
        self.manifest.n_step_checkpoints
    }

    fn first_checkpoint_step(&self) -> u64 {
        self.manifest.first_checkpoint_step
    }
}

/// Byte accounting for a cache, measured or idealized.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheStats {
    pub step_record_bytes: u64,
    pub checkpoint_payload_bytes: u64,
    pub total_bytes: u64,
    /// Checkpoint payload relative to the last-epoch policy's payload.
    pub reduction_ratio_vs_last_epoch: f64,
}

/// Idealized checkpoint payload accounting: `All` stores one parameter
/// vector per step per epoch, `LastEpoch` one per step, `FinalOnly` a single
/// vector — so `FinalOnly / LastEpoch = 1/T` exactly. Step records are not
/// part of this accounting (a measured cache reports them separately).
pub fn cache_stats(
    p: u64,
    steps_per_epoch: u64,
    epochs: u64,
    width_bytes: u64,
    policy: CheckpointPolicy,
) -> Result<CacheStats> {
    if p == 0 || steps_per_epoch == 0 || epochs == 0 {
        return Err(Error::invalid("cache stats need positive p, T, and k"));
    }
    FloatWidth::from_bytes(width_bytes)?;
    let per_vector = p * width_bytes;
    let payload = match policy {
        CheckpointPolicy::All => per_vector * steps_per_epoch * epochs,
        CheckpointPolicy::LastEpoch => per_vector * steps_per_epoch,
        CheckpointPolicy::FinalOnly => per_vector,
    };
    Ok(CacheStats {
        step_record_bytes: 0,
        checkpoint_payload_bytes: payload,
        total_bytes: payload,
        reduction_ratio_vs_last_epoch: payload as f64 / (per_vector * steps_per_epoch) as f64,
    })
}

/// Formats a byte count in decimal units (kB, MB, GB), three significant
/// decimals past the point.
pub fn human_bytes(bytes: u64) -> String {
    let b = bytes as f64;
    if b >= 1e9 {
        format!("{:.3} GB", b / 1e9)
    } else if b >= 1e6 {
        format!("{:.3} MB", b / 1e6)
    } else if b >= 1e3 {
        format!("{:.3} kB", b / 1e3)
    } else {
        format!("{bytes} B")
    }
}
