//! Task-imbalanced continual streams.
//!
//! Classes get an exponentially decaying long-tail train count, are split
//! into contiguous equal-width blocks (one block per task), and each task is
//! balanced up to its largest class. Tasks are then ordered by size
//! (descending, ascending), shuffled, or replaced by the one-shot and
//! balanced controls.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fingerprint::Fingerprinter;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ordering {
    Descending,
    Ascending,
    Shuffled,
    OneShot,
    Balanced,
}

impl Ordering {
    pub const ALL: [Ordering; 5] = [
        Ordering::Descending,
        Ordering::Ascending,
        Ordering::Shuffled,
        Ordering::OneShot,
        Ordering::Balanced,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ordering::Descending => "descending",
            Ordering::Ascending => "ascending",
            Ordering::Shuffled => "shuffled",
            Ordering::OneShot => "one_shot",
            Ordering::Balanced => "balanced",
        }
    }
}

impl fmt::Display for Ordering {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ordering {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ordering::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown ordering `{s}` (expected descending, ascending, shuffled, one_shot or balanced)"
                ))
            })
    }
}

/// Declarative description of a stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamSpec {
    pub num_classes: usize,
    pub num_tasks: usize,
    /// Train count of the head class.
    pub n_max: usize,
    /// Tail-to-head count ratio, in `(0, 1]`.
    pub rho: f64,
    pub ordering: Ordering,
    pub order_seed: u64,
    pub data_seed: u64,
    pub test_per_class: usize,
}

impl Default for StreamSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            num_tasks: 10,
            n_max: 200,
            rho: 0.05,
            ordering: Ordering::Shuffled,
            order_seed: 0,
            data_seed: 0,
            test_per_class: 50,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.num_tasks == 0 {
            return Err(Error::config("stream.num_classes and stream.num_tasks must be positive"));
        }
        if self.num_classes % self.num_tasks != 0 {
            return Err(Error::config(format!(
                "stream.num_classes ({}) must be divisible by stream.num_tasks ({})",
                self.num_classes, self.num_tasks
            )));
        }
        check_rho(self.rho)?;
        if self.n_max == 0 {
            return Err(Error::config("stream.n_max must be at least 1"));
        }
        if self.test_per_class == 0 {
            return Err(Error::config("stream.test_per_class must be at least 1"));
        }
        Ok(())
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::config(format!("stream.rho must lie in (0, 1], got {rho}")));
    }
    Ok(())
}

/// Parameters of the synthetic Gaussian class generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub input_dim: usize,
    /// Radius of the sphere the class means are drawn on.
    pub class_sep: f64,
    pub noise_std: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            input_dim: 32,
            class_sep: 10.0,
            noise_std: 1.0,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(Error::config("data.input_dim must be at least 2"));
        }
        if !(self.class_sep.is_finite() && self.class_sep >= 0.0) {
            return Err(Error::config("data.class_sep must be finite and non-negative"));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::config("data.noise_std must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    /// Index of the class block this task owns (canonical position).
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub size_per_class: usize,
    pub total_size: usize,
}

impl TaskRecord {
    fn with_size_per_class(mut self, n: usize) -> Self {
        self.size_per_class = n;
        self.total_size = n * self.class_ids.len();
        self
    }
}

/// Per-class train counts `max(1, round(n_max · rho^(c/(C−1))))`.
pub fn longtail_counts(num_classes: usize, n_max: usize, rho: f64) -> Result<Vec<usize>> {
    check_rho(rho)?;
    if num_classes == 0 {
        return Err(Error::config("longtail_counts needs at least one class"));
    }
    if num_classes == 1 {
        return Ok(vec![n_max]);
    }
    let span = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|c| {
            let count = (n_max as f64 * rho.powf(c as f64 / span)).round() as usize;
            count.max(1)
        })
        .collect())
}

/// Splits classes into `num_tasks` contiguous blocks and raises every class in
/// a block to the block's largest count. Returned in canonical block order.
pub fn partition_and_balance(counts: &[usize], num_classes: usize, num_tasks: usize) -> Result<Vec<TaskRecord>> {
    if num_tasks == 0 || num_classes % num_tasks != 0 || counts.len() != num_classes {
        return Err(Error::config(format!(
            "cannot split {num_classes} classes ({} counts) into {num_tasks} equal tasks",
            counts.len()
        )));
    }
    let width = num_classes / num_tasks;
    Ok((0..num_tasks)
        .map(|k| {
            let class_ids: Vec<usize> = (k * width..(k + 1) * width).collect();
            let n = class_ids.iter().map(|&c| counts[c]).max().unwrap_or(0);
            TaskRecord {
                task_id: k,
                total_size: n * class_ids.len(),
                class_ids,
                size_per_class: n,
            }
        })
        .collect())
}

/// Arranges canonical-order tasks into the requested stream order.
pub fn order_tasks(tasks: &[TaskRecord], ordering: Ordering, order_seed: u64) -> Vec<TaskRecord> {
    let mut out = tasks.to_vec();
    match ordering {
        Ordering::Ascending => out.sort_by_key(|t| (t.total_size, t.task_id)),
        Ordering::Descending => {
            out.sort_by_key(|t| (t.total_size, t.task_id));
            out.reverse();
        }
        Ordering::Shuffled => {
            let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
            out.shuffle(&mut rng);
        }
        Ordering::OneShot => {
            out = out.into_iter().map(|t| t.with_size_per_class(1)).collect();
        }
        Ordering::Balanced => {
            let n = out.iter().map(|t| t.size_per_class).max().unwrap_or(0);
            out = out.into_iter().map(|t| t.with_size_per_class(n)).collect();
        }
    }
    out
}

/// Task list for a spec, in stream order.
pub fn build_tasks(spec: &StreamSpec) -> Result<Vec<TaskRecord>> {
    spec.validate()?;
    let rho = if spec.ordering == Ordering::Balanced { 1.0 } else { spec.rho };
    let counts = longtail_counts(spec.num_classes, spec.n_max, rho)?;
    let canonical = partition_and_balance(&counts, spec.num_classes, spec.num_tasks)?;
    Ok(order_tasks(&canonical, spec.ordering, spec.order_seed))
}

/// Labelled samples stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    input_dim: usize,
    labels: Vec<usize>,
    features: Vec<f64>,
}

impl Split {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            labels: Vec::new(),
            features: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f64], label: usize) {
        assert_eq!(x.len(), self.input_dim, "sample dimension");
        self.features.extend_from_slice(x);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i * self.input_dim..(i + 1) * self.input_dim], self.labels[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], usize)> + '_ {
        self.features
            .chunks_exact(self.input_dim.max(1))
            .zip(self.labels.iter().copied())
    }

    /// Samples whose label is in `classes`, in original order.
    pub fn filter_classes(&self, classes: &[usize]) -> Split {
        let mut out = Split::new(self.input_dim);
        for (x, y) in self.iter() {
            if classes.contains(&y) {
                out.push(x, y);
            }
        }
        out
    }

    /// First `per_class` samples of every class present (classes with fewer
    /// samples contribute all they have).
    pub fn take_per_class(&self, per_class: usize, num_classes: usize) -> Split {
        let mut seen = vec![0usize; num_classes];
        let mut out = Split::new(self.input_dim);
        for (x, y) in self.iter() {
            if seen[y] < per_class {
                seen[y] += 1;
                out.push(x, y);
            }
        }
        out
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    pub fn extend(&mut self, other: &Split) {
        assert_eq!(self.input_dim, other.input_dim);
        self.labels.extend_from_slice(&other.labels);
        self.features.extend_from_slice(&other.features);
    }
}

/// A materialized stream: ordered tasks with their train data, plus a test
/// set holding exactly `test_per_class` samples of every class.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub spec: StreamSpec,
    pub params: SyntheticParams,
    pub tasks: Vec<TaskRecord>,
    pub train: Vec<Split>,
    pub test: Split,
    fingerprint: String,
}

impl TaskStream {
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Test samples for the classes of the task at stream position `position`.
    pub fn test_split(&self, position: usize) -> Split {
        self.test.filter_classes(&self.tasks[position].class_ids)
    }

    /// Union of all train splits.
    pub fn all_train(&self) -> Split {
        let mut out = Split::new(self.params.input_dim);
        for s in &self.train {
            out.extend(s);
        }
        out
    }

    /// Task sizes `N_t` in stream order.
    pub fn task_sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.total_size).collect()
    }

    fn compute_fingerprint(spec: &StreamSpec, params: &SyntheticParams, train: &[Split], test: &Split) -> String {
        let mut fp = Fingerprinter::new();
        fp.bytes(canonical_json(&(spec, params)).as_bytes());
        for split in train.iter().chain(std::iter::once(test)) {
            fp.u64(split.len() as u64);
            for &y in split.labels() {
                fp.u64(y as u64);
            }
            fp.f64s(split.features());
        }
        fp.finish()
    }
}

const MEANS_STREAM: u64 = 0;
const TRAIN_STREAM_BASE: u64 = 1;
const TEST_STREAM_BASE: u64 = 1 << 32;

fn substream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Class means on the radius-`class_sep` sphere in `R^m`, one per class.
pub fn class_means(spec: &StreamSpec, params: &SyntheticParams) -> Vec<Vec<f64>> {
    let mut rng = substream(spec.data_seed, MEANS_STREAM);
    (0..spec.num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..params.input_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / norm * params.class_sep).collect()
        })
        .collect()
}

/// Draws the train and test data for `spec`.
///
/// Each class draws from its own RNG substream, so the first `n` samples of a
/// class are the same regardless of ordering or of how many are requested.
pub fn generate_synthetic(spec: &StreamSpec, params: &SyntheticParams) -> Result<TaskStream> {
    spec.validate()?;
    params.validate()?;
    let tasks = build_tasks(spec)?;
    let means = class_means(spec, params);
    let draw = |rng: &mut ChaCha8Rng, c: usize, split: &mut Split| {
        let x: Vec<f64> = means[c]
            .iter()
            .map(|&mu| {
                let z: f64 = StandardNormal.sample(rng);
                mu + params.noise_std * z
            })
            .collect();
        split.push(&x, c);
    };

    let mut train = Vec::with_capacity(tasks.len());
    for task in &tasks {
        let mut split = Split::new(params.input_dim);
        for &c in &task.class_ids {
            let mut rng = substream(spec.data_seed, TRAIN_STREAM_BASE + c as u64);
            for _ in 0..task.size_per_class {
                draw(&mut rng, c, &mut split);
            }
        }
        train.push(split);
    }

    let mut test = Split::new(params.input_dim);
    for c in 0..spec.num_classes {
        let mut rng = substream(spec.data_seed, TEST_STREAM_BASE + c as u64);
        for _ in 0..spec.test_per_class {
            draw(&mut rng, c, &mut test);
        }
    }

    let fingerprint = TaskStream::compute_fingerprint(spec, params, &train, &test);
    Ok(TaskStream {
        spec: spec.clone(),
        params: params.clone(),
        tasks,
        train,
        test,
        fingerprint,
    })
}

/// Uniform-count train data drawn from the same class substreams as `spec`,
/// so the long-tail samples are a prefix of it. Used for linear probing.
pub fn balanced_train_set(spec: &StreamSpec, params: &SyntheticParams) -> Result<Split> {
    let balanced = StreamSpec {
        ordering: Ordering::Balanced,
        ..spec.clone()
    };
    Ok(generate_synthetic(&balanced, params)?.all_train())
}

/// Key-sorted compact JSON.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json::Map is a BTreeMap here, so converting through Value sorts keys
    let v = serde_json::to_value(value).expect("serializable");
    serde_json::to_string(&v).expect("serializable")
}

pub const STREAM_MAGIC: &[u8; 4] = b"TICL";
pub const STREAM_FORMAT_VERSION: u16 = 1;

/// Self-describing header of a stream file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub spec: StreamSpec,
    pub params: SyntheticParams,
    pub tasks: Vec<TaskRecord>,
    pub train_samples: Vec<usize>,
    pub test_samples: usize,
    pub fingerprint: String,
}

impl StreamHeader {
    fn of(stream: &TaskStream) -> Self {
        Self {
            spec: stream.spec.clone(),
            params: stream.params.clone(),
            tasks: stream.tasks.clone(),
            train_samples: stream.train.iter().map(Split::len).collect(),
            test_samples: stream.test.len(),
            fingerprint: stream.fingerprint.clone(),
        }
    }
}

/// Serializes a stream:
///
/// ```text
/// "TICL" | version: u16 | header_len: u32 | header (canonical JSON)
/// | per task: (label: u32, x: f64 × m) × N_t | test: (label: u32, x: f64 × m) × n
/// | crc32: u32
/// ```
///
/// All integers and floats little-endian. The CRC covers every preceding byte.
pub fn encode_stream(stream: &TaskStream) -> Vec<u8> {
    let header = canonical_json(&StreamHeader::of(stream));
    let mut buf = Vec::new();
    buf.extend_from_slice(STREAM_MAGIC);
    buf.extend_from_slice(&STREAM_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    for split in stream.train.iter().chain(std::iter::once(&stream.test)) {
        for (x, y) in split.iter() {
            buf.extend_from_slice(&(y as u32).to_le_bytes());
            for v in x {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save_stream(stream: &TaskStream, path: &Path) -> Result<()> {
    write_atomic(path, &encode_stream(stream))
}

pub fn load_stream(path: &Path) -> Result<TaskStream> {
    decode_stream(&fs::read(path)?)
}

/// Reads only the header; sample payload is not touched.
pub fn read_stream_header(path: &Path) -> Result<StreamHeader> {
    let mut file = fs::File::open(path)?;
    let mut prefix = [0u8; 10];
    file.read_exact(&mut prefix).map_err(|_| format_err(0, "file shorter than the fixed prefix"))?;
    let header_len = check_prefix(&prefix)?;
    let mut header = vec![0u8; header_len];
    file.read_exact(&mut header).map_err(|_| format_err(10, "truncated header"))?;
    parse_header(&header)
}

fn format_err(offset: u64, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

fn check_prefix(prefix: &[u8]) -> Result<usize> {
    if &prefix[0..4] != STREAM_MAGIC {
        return Err(format_err(0, "bad magic bytes, expected `TICL`"));
    }
    let version = u16::from_le_bytes([prefix[4], prefix[5]]);
    if version != STREAM_FORMAT_VERSION {
        return Err(format_err(
            4,
            format!("unsupported format version {version} (this build reads {STREAM_FORMAT_VERSION})"),
        ));
    }
    Ok(u32::from_le_bytes([prefix[6], prefix[7], prefix[8], prefix[9]]) as usize)
}

fn parse_header(bytes: &[u8]) -> Result<StreamHeader> {
    serde_json::from_slice(bytes).map_err(|e| format_err(10 + e.column().saturating_sub(1) as u64, format!("header: {e}")))
}

pub fn decode_stream(bytes: &[u8]) -> Result<TaskStream> {
    if bytes.len() < 14 {
        return Err(format_err(0, "file shorter than prefix and trailer"));
    }
    let header_len = check_prefix(&bytes[..10])?;
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(format_err(body_end as u64, "CRC-32 mismatch"));
    }
    if 10 + header_len > body_end {
        return Err(format_err(6, "header length exceeds file size"));
    }
    let header = parse_header(&bytes[10..10 + header_len])?;
    header.spec.validate()?;
    header.params.validate()?;
    let m = header.params.input_dim;
    let record = 4 + 8 * m;

    let mut offset = 10 + header_len;
    let mut read_split = |count: usize| -> Result<Split> {
        let mut split = Split::new(m);
        let mut x = vec![0.0; m];
        for _ in 0..count {
            if offset + record > body_end {
                return Err(format_err(offset as u64, "payload truncated"));
            }
            let label = u32::from_le_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes")) as usize;
            if label >= header.spec.num_classes {
                return Err(format_err(offset as u64, format!("label {label} out of range")));
            }
            for (i, v) in x.iter_mut().enumerate() {
                let at = offset + 4 + 8 * i;
                *v = f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
            }
            split.push(&x, label);
            offset += record;
        }
        Ok(split)
    };
    let mut train = Vec::with_capacity(header.train_samples.len());
    for &n in &header.train_samples {
        train.push(read_split(n)?);
    }
    let test = read_split(header.test_samples)?;
    if offset != body_end {
        return Err(format_err(offset as u64, "trailing bytes after payload"));
    }

    let fingerprint = TaskStream::compute_fingerprint(&header.spec, &header.params, &train, &test);
    if fingerprint != header.fingerprint {
        return Err(format_err(10, "header fingerprint does not match payload"));
    }
    Ok(TaskStream {
        spec: header.spec,
        params: header.params,
        tasks: header.tasks,
        train,
        test,
        fingerprint,
    })
}

/// Writes `bytes` to `path` via a temporary sibling and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(ordering: Ordering) -> StreamSpec {
        StreamSpec {
            num_classes: 6,
            num_tasks: 3,
            n_max: 40,
            rho: 0.1,
            ordering,
            order_seed: 3,
            data_seed: 11,
            test_per_class: 5,
        }
    }

    fn small_params() -> SyntheticParams {
        SyntheticParams {
            input_dim: 4,
            class_sep: 2.0,
            noise_std: 0.5,
        }
    }

    #[test]
    fn longtail_reference_profiles() {
        assert_eq!(longtail_counts(7, 123, 1.0).unwrap(), vec![123; 7]);
        assert_eq!(longtail_counts(2, 500, 0.01).unwrap(), vec![500, 5]);
        assert_eq!(longtail_counts(3, 100, 0.01).unwrap(), vec![100, 10, 1]);
        assert_eq!(longtail_counts(3, 10, 0.001).unwrap(), vec![10, 1, 1]);
        assert!(matches!(longtail_counts(3, 10, 1.5), Err(Error::Config(_))));
        assert!(matches!(longtail_counts(3, 10, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn partition_uses_block_maximum() {
        let tasks = partition_and_balance(&[100, 50, 20, 10], 4, 2).unwrap();
        assert_eq!(tasks[0].class_ids, vec![0, 1]);
        assert_eq!((tasks[0].size_per_class, tasks[0].total_size), (100, 200));
        assert_eq!(tasks[1].class_ids, vec![2, 3]);
        assert_eq!((tasks[1].size_per_class, tasks[1].total_size), (20, 40));

        let singles = partition_and_balance(&[9, 7, 5], 3, 3).unwrap();
        assert_eq!(singles.iter().map(|t| t.total_size).collect::<Vec<_>>(), vec![9, 7, 5]);

        assert!(partition_and_balance(&[1, 1, 1], 3, 2).is_err());
    }

    #[test]
    fn orderings() {
        let canonical = partition_and_balance(&longtail_counts(8, 50, 0.1).unwrap(), 8, 4).unwrap();
        let desc = order_tasks(&canonical, Ordering::Descending, 0);
        let mut asc = order_tasks(&canonical, Ordering::Ascending, 0);
        asc.reverse();
        assert_eq!(desc, asc);

        assert_eq!(
            order_tasks(&canonical, Ordering::Shuffled, 42),
            order_tasks(&canonical, Ordering::Shuffled, 42)
        );
        let one_shot = order_tasks(&canonical, Ordering::OneShot, 0);
        assert!(one_shot.iter().all(|t| t.total_size == t.class_ids.len()));
        let balanced = order_tasks(&canonical, Ordering::Balanced, 0);
        assert!(balanced.iter().all(|t| t.total_size == balanced[0].total_size));
        assert_eq!(
            balanced.iter().map(|t| t.task_id).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn unknown_ordering_token() {
        assert!("sideways".parse::<Ordering>().is_err());
        assert_eq!("one_shot".parse::<Ordering>().unwrap(), Ordering::OneShot);
    }

    #[test]
    fn noiseless_samples_sit_on_their_means() {
        let params = SyntheticParams {
            noise_std: 0.0,
            ..small_params()
        };
        let spec = small_spec(Ordering::Descending);
        let stream = generate_synthetic(&spec, &params).unwrap();
        let means = class_means(&spec, &params);
        for split in stream.train.iter().chain([&stream.test]) {
            for (x, y) in split.iter() {
                assert_eq!(x, means[y].as_slice());
            }
        }
        for m in &means {
            let r = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((r - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generated_counts_match_partition() {
        for ordering in Ordering::ALL {
            let spec = small_spec(ordering);
            let stream = generate_synthetic(&spec, &small_params()).unwrap();
            for (task, split) in stream.tasks.iter().zip(&stream.train) {
                let counts = split.class_counts(6);
                for c in 0..6 {
                    let expected = if task.class_ids.contains(&c) { task.size_per_class } else { 0 };
                    assert_eq!(counts[c], expected);
                }
            }
            assert_eq!(stream.test.class_counts(6), vec![5; 6]);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec(Ordering::Shuffled);
        let a = generate_synthetic(&spec, &small_params()).unwrap();
        let b = generate_synthetic(&spec, &small_params()).unwrap();
        assert_eq!(a, b);
        assert_eq!(encode_stream(&a), encode_stream(&b));
    }

    #[test]
    fn one_shot_samples_prefix_the_long_tail_samples() {
        let full = generate_synthetic(&small_spec(Ordering::Descending), &small_params()).unwrap();
        let shot = generate_synthetic(&small_spec(Ordering::OneShot), &small_params()).unwrap();
        let first_of = |s: &TaskStream, c: usize| -> Vec<f64> {
            s.all_train().iter().find(|(_, y)| *y == c).unwrap().0.to_vec()
        };
        for c in 0..6 {
            assert_eq!(first_of(&full, c), first_of(&shot, c));
        }
    }

    #[test]
    fn file_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ticl");
        let stream = generate_synthetic(&small_spec(Ordering::Ascending), &small_params()).unwrap();
        save_stream(&stream, &path).unwrap();
        assert_eq!(load_stream(&path).unwrap(), stream);
        let header = read_stream_header(&path).unwrap();
        assert_eq!(header.spec, stream.spec);
        assert_eq!(header.fingerprint, stream.fingerprint());
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let stream = generate_synthetic(&small_spec(Ordering::Ascending), &small_params()).unwrap();
        let good = encode_stream(&stream);

        let mut bad_crc = good.clone();
        let n = bad_crc.len();
        bad_crc[n - 1] ^= 0xff;
        assert!(matches!(decode_stream(&bad_crc), Err(Error::Format { .. })));

        let mut bad_payload = good.clone();
        bad_payload[n - 20] ^= 0x01;
        assert!(matches!(decode_stream(&bad_payload), Err(Error::Format { .. })));

        let mut bad_version = good.clone();
        bad_version[4] = 9;
        match decode_stream(&bad_version) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut bad_magic = good;
        bad_magic[0] = b'X';
        assert!(matches!(decode_stream(&bad_magic), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn header_json_is_key_sorted() {
        let json = canonical_json(&small_spec(Ordering::Descending));
        let keys: Vec<&str> = json
            .trim_matches(|c| c == '{' || c == '}')
            .split(',')
            .map(|kv| kv.split(':').next().unwrap().trim_matches('"'))
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}
