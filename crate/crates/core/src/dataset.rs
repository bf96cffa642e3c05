//! Labeled datasets: CSV loading, synthetic blob generation, label-noise
//! injection, train/validation splitting, and the `ICDS` binary container.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Magic prefix of the binary dataset container.
pub const DATASET_MAGIC: [u8; 4] = *b"ICDS";
/// Current container version.
pub const DATASET_VERSION: u16 = 1;

/// One labeled training/validation/test instance.
///
/// `id` is the unit of influence attribution: it is assigned at load or
/// generation time and preserved by splits, noise injection, and removal.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: usize,
    pub features: Vec<f64>,
    /// Class index in `[0, C)`.
    pub label: usize,
}

/// An ordered, immutable collection of instances with a fixed feature
/// dimension and class count.
#[derive(Debug, Clone)]
pub struct Dataset {
    instances: Vec<Instance>,
    dim: usize,
    classes: usize,
    provenance: String,
    by_id: HashMap<usize, usize>,
}

/// Equality covers the data content (instances, dimension, class count).
/// `provenance` is an origin tag, not data, and is excluded: a dataset
/// re-read from disk compares equal to the one that was written.
impl PartialEq for Dataset {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.classes == other.classes && self.instances == other.instances
    }
}

impl Dataset {
    /// Builds a dataset, validating the invariants: non-empty, unique ids,
    /// uniform feature dimension, labels within `[0, classes)`.
    pub fn new(instances: Vec<Instance>, classes: usize, provenance: impl Into<String>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let dim = instances[0].features.len();
        let mut by_id = HashMap::with_capacity(instances.len());
        for (pos, inst) in instances.iter().enumerate() {
            if inst.features.len() != dim {
                return Err(Error::dim(format!(
                    "instance id {} has {} features, expected {}",
                    inst.id,
                    inst.features.len(),
                    dim
                )));
            }
            if inst.label >= classes {
                return Err(Error::invalid(format!(
                    "instance id {} has label {} outside [0, {})",
                    inst.id, inst.label, classes
                )));
            }
            if by_id.insert(inst.id, pos).is_some() {
                return Err(Error::invalid(format!("duplicate instance id {}", inst.id)));
            }
        }
        Ok(Dataset {
            instances,
            dim,
            classes,
            provenance: provenance.into(),
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Class count `C`.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    /// Instance at position `pos` (list order, not id).
    pub fn get(&self, pos: usize) -> &Instance {
        &self.instances[pos]
    }

    pub fn by_id(&self, id: usize) -> Option<&Instance> {
        self.by_id.get(&id).map(|&pos| &self.instances[pos])
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.instances.iter().map(|i| i.id)
    }

    /// Gathers instance references for a list of ids, in the given order.
    pub fn gather(&self, ids: &[usize]) -> Result<Vec<&Instance>> {
        ids.iter()
            .map(|&id| self.by_id(id).ok_or(Error::UnknownId(id)))
            .collect()
    }

    /// Copy with ids renumbered to row order `0..N`. Serialization stores
    /// rows, not ids, so canonical ids are what a round trip preserves.
    pub fn reindexed(&self) -> Dataset {
        let instances = self
            .instances
            .iter()
            .enumerate()
            .map(|(i, inst)| Instance {
                id: i,
                features: inst.features.clone(),
                label: inst.label,
            })
            .collect();
        Dataset::new(instances, self.classes, self.provenance.clone())
            .expect("reindexing preserves invariants")
    }

    /// Copy without the given ids; remaining instances keep their ids.
    pub fn remove_ids(&self, remove: &HashSet<usize>) -> Result<Dataset> {
        let instances: Vec<Instance> = self
            .instances
            .iter()
            .filter(|inst| !remove.contains(&inst.id))
            .cloned()
            .collect();
        Dataset::new(instances, self.classes, format!("{}#removed{}", self.provenance, remove.len()))
    }

    /// Serializes to the `ICDS` container. Little-endian; layout:
    /// magic, version u16, N u64, d u32, C u32, then per row d×f64 features
    /// followed by one u32 label. Ids and provenance are not stored; the
    /// reader assigns row-order ids.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(22 + self.len() * (self.dim * 8 + 4));
        buf.extend_from_slice(&DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dim as u32).to_le_bytes());
        buf.extend_from_slice(&(self.classes as u32).to_le_bytes());
        for inst in &self.instances {
            for &x in &inst.features {
                buf.extend_from_slice(&x.to_le_bytes());
            }
            buf.extend_from_slice(&(inst.label as u32).to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], provenance: impl Into<String>) -> Result<Dataset> {
        let mut cur = Cursor { bytes, pos: 0 };
        let magic = cur.take(4)?;
        if magic != DATASET_MAGIC {
            return Err(Error::CacheFormat("bad dataset magic".into()));
        }
        let version = u16::from_le_bytes(cur.take(2)?.try_into().unwrap());
        if version != DATASET_VERSION {
            return Err(Error::CacheFormat(format!("unsupported dataset version {version}")));
        }
        let n = u64::from_le_bytes(cur.take(8)?.try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        let c = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut instances = Vec::with_capacity(n);
        for id in 0..n {
            let mut features = Vec::with_capacity(d);
            for _ in 0..d {
                features.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
            }
            let label = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            instances.push(Instance { id, features, label });
        }
        if cur.pos != bytes.len() {
            return Err(Error::CacheFormat("trailing bytes after dataset payload".into()));
        }
        Dataset::new(instances, c, provenance)
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Dataset::from_bytes(&bytes, path.display().to_string())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::CacheFormat("truncated dataset file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Which labels were flipped by [`inject_label_noise`]; the ground truth a
/// cleansing run is judged against.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseReport {
    pub flipped_ids: BTreeSet<usize>,
    pub rate: f64,
    pub seed: u64,
}

/// How to locate the label column in a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub enum LabelColumn {
    /// Last column of each row.
    Last,
    /// Zero-based column index.
    Index(usize),
    /// Header name; requires `has_header`.
    Name(String),
}

/// Loads a CSV of numeric features plus one integer label column.
///
/// Row order becomes instance id order. `C` is inferred as max label + 1.
pub fn load_csv(path: impl AsRef<Path>, label: &LabelColumn, has_header: bool) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let mut label_idx: Option<usize> = match label {
        LabelColumn::Index(i) => Some(*i),
        LabelColumn::Last => None,
        LabelColumn::Name(name) => {
            if !has_header {
                return Err(Error::invalid("label column by name requires a header row"));
            }
            let headers = reader.headers()?;
            let idx = headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse(format!("label column {name:?} absent from header")))?;
            Some(idx)
        }
    };

    let mut arity: Option<usize> = None;
    let mut instances = Vec::new();
    let mut max_label = 0usize;
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let width = record.len();
        match arity {
            None => {
                if width < 2 {
                    return Err(Error::Parse(format!("row {row_idx}: need at least one feature and a label")));
                }
                arity = Some(width);
                if label_idx.is_none() {
                    label_idx = Some(width - 1);
                }
                if label_idx.unwrap() >= width {
                    return Err(Error::Parse(format!(
                        "label column index {} out of range for {width}-column rows",
                        label_idx.unwrap()
                    )));
                }
            }
            Some(a) if a != width => {
                return Err(Error::Parse(format!("ragged row {row_idx}: {width} fields, expected {a}")));
            }
            _ => {}
        }
        let lcol = label_idx.unwrap();
        let mut features = Vec::with_capacity(width - 1);
        let mut label = None;
        for (col, field) in record.iter().enumerate() {
            if col == lcol {
                let parsed: i64 = field
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {row_idx}: label {field:?} is not an integer")))?;
                if parsed < 0 {
                    return Err(Error::Parse(format!("row {row_idx}: negative label {parsed}")));
                }
                label = Some(parsed as usize);
            } else {
                let x: f64 = field
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {row_idx}, column {col}: non-numeric feature {field:?}")))?;
                features.push(x);
            }
        }
        let label = label.expect("label column verified in range");
        max_label = max_label.max(label);
        instances.push(Instance {
            id: row_idx,
            features,
            label,
        });
    }

    if instances.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Dataset::new(instances, max_label + 1, path.display().to_string())
}

/// Generates isotropic unit-variance Gaussian clusters, one per class, with
/// all pairwise center distances equal to `separation`.
///
/// Centers: for two classes, `±separation/2` along the first axis; for more,
/// `separation/√2 · e_class`, which needs `d ≥ C`.
pub fn gen_blobs(n_per_class: usize, classes: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if n_per_class < 1 {
        return Err(Error::invalid("n_per_class must be at least 1"));
    }
    if classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if dim < 1 {
        return Err(Error::invalid("dimension must be at least 1"));
    }
    if separation <= 0.0 || !separation.is_finite() {
        return Err(Error::invalid("separation must be positive"));
    }
    if classes > 2 && dim < classes {
        return Err(Error::invalid(format!(
            "equidistant centers for {classes} classes need dimension >= {classes}, got {dim}"
        )));
    }

    let mut centers = vec![vec![0.0; dim]; classes];
    if classes == 2 {
        centers[0][0] = -separation / 2.0;
        centers[1][0] = separation / 2.0;
    } else {
        // Scaled standard-basis simplex: |e_i - e_j| = √2.
        for (c, center) in centers.iter_mut().enumerate() {
            center[c] = separation / std::f64::consts::SQRT_2;
        }
    }

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let mut instances = Vec::with_capacity(n_per_class * classes);
    for (class, center) in centers.iter().enumerate() {
        for _ in 0..n_per_class {
            let features: Vec<f64> = center
                .iter()
                .map(|&c| c + <StandardNormal as Distribution<f64>>::sample(&normal, &mut rng))
                .collect();
            instances.push(Instance {
                id: instances.len(),
                features,
                label: class,
            });
        }
    }
    Dataset::new(
        instances,
        classes,
        format!("blobs(n_per_class={n_per_class},C={classes},d={dim},sep={separation},seed={seed})"),
    )
}

/// Flips the labels of `round(rate · N)` instances, chosen uniformly without
/// replacement; each replacement label is uniform over the other `C-1`
/// classes. Everything else is untouched.
pub fn inject_label_noise(ds: &Dataset, rate: f64, seed: u64) -> Result<(Dataset, NoiseReport)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(format!("noise rate {rate} outside [0, 1)")));
    }
    if ds.classes() < 2 {
        return Err(Error::invalid("label noise needs at least 2 classes"));
    }
    let n_flip = (rate * ds.len() as f64).round() as usize;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = (0..ds.len()).collect();
    positions.shuffle(&mut rng);
    positions.truncate(n_flip);
    positions.sort_unstable();

    let flip_set: HashSet<usize> = positions.iter().copied().collect();
    let mut flipped_ids = BTreeSet::new();
    let mut instances = Vec::with_capacity(ds.len());
    for (pos, inst) in ds.instances().iter().enumerate() {
        let mut inst = inst.clone();
        if flip_set.contains(&pos) {
            let offset = rng.random_range(1..ds.classes());
            inst.label = (inst.label + offset) % ds.classes();
            flipped_ids.insert(inst.id);
        }
        instances.push(inst);
    }
    let noisy = Dataset::new(
        instances,
        ds.classes(),
        format!("{}#noise(rate={rate},seed={seed})", ds.provenance()),
    )?;
    Ok((
        noisy,
        NoiseReport {
            flipped_ids,
            rate,
            seed,
        },
    ))
}

/// Splits into disjoint, exhaustive `(rest, held_out)` parts with
/// `held_out.len() == val_count`. Ids are preserved from the parent; each
/// part keeps the parent's relative ordering.
pub fn split(ds: &Dataset, val_count: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if val_count == 0 || val_count >= ds.len() {
        return Err(Error::invalid(format!(
            "val_count {val_count} outside (0, {})",
            ds.len()
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut positions: Vec<usize> = (0..ds.len()).collect();
    positions.shuffle(&mut rng);
    let val_set: HashSet<usize> = positions[..val_count].iter().copied().collect();

    let mut train = Vec::with_capacity(ds.len() - val_count);
    let mut val = Vec::with_capacity(val_count);
    for (pos, inst) in ds.instances().iter().enumerate() {
        if val_set.contains(&pos) {
            val.push(inst.clone());
        } else {
            train.push(inst.clone());
        }
    }
    Ok((
        Dataset::new(train, ds.classes(), format!("{}#train(seed={seed})", ds.provenance()))?,
        Dataset::new(val, ds.classes(), format!("{}#val(seed={seed})", ds.provenance()))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    #[test]
    fn load_csv_basic() {
        let f = write_temp("x0,x1,y\n0,0,0\n1,1,1\n2,2,1\n");
        let ds = load_csv(f.path(), &LabelColumn::Last, true).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.classes(), 2);
        assert_eq!(ds.get(1).features, vec![1.0, 1.0]);
        assert_eq!(ds.get(2).label, 1);
        assert_eq!(ds.get(0).id, 0);
    }

    #[test]
    fn load_csv_label_by_name() {
        let f = write_temp("y,a,b\n1,0.5,0.25\n0,1.5,2.5\n");
        let ds = load_csv(f.path(), &LabelColumn::Name("y".into()), true).unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.get(0).label, 1);
        assert_eq!(ds.get(1).features, vec![1.5, 2.5]);
    }

    #[test]
    fn load_csv_empty_is_error() {
        let f = write_temp("");
        let err = load_csv(f.path(), &LabelColumn::Last, false).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset), "{err}");
        // Header only, no data rows.
        let f = write_temp("a,b,y\n");
        let err = load_csv(f.path(), &LabelColumn::Last, true).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset), "{err}");
    }

    #[test]
    fn load_csv_sparse_labels_widen_class_count() {
        // Round-trip check: C = max label + 1 survives serialization.
        let f = write_temp("0,0,0\n1,1,1\n2,2,5\n");
        let ds = load_csv(f.path(), &LabelColumn::Last, false).unwrap();
        assert_eq!(ds.classes(), 6);
        let back = Dataset::from_bytes(&ds.to_bytes(), "mem").unwrap();
        assert_eq!(back.classes(), 6);
        assert_eq!(back, ds);
    }

    #[test]
    fn load_csv_ragged_row_is_error() {
        let f = write_temp("0,0,0\n1,1\n");
        let err = load_csv(f.path(), &LabelColumn::Last, false).unwrap_err();
        assert!(err.to_string().contains("ragged"), "{err}");
    }

    #[test]
    fn load_csv_non_numeric_feature_is_error() {
        let f = write_temp("0,ok,0\n");
        let err = load_csv(f.path(), &LabelColumn::Last, false).unwrap_err();
        assert!(err.to_string().contains("non-numeric"), "{err}");
    }

    #[test]
    fn load_csv_missing_file_is_error() {
        let err = load_csv("/nonexistent/nope.csv", &LabelColumn::Last, false).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn load_csv_missing_named_label_is_error() {
        let f = write_temp("a,b\n1,2\n");
        let err = load_csv(f.path(), &LabelColumn::Name("y".into()), true).unwrap_err();
        assert!(err.to_string().contains("absent"), "{err}");
    }

    #[test]
    fn gen_blobs_shape_and_determinism() {
        let a = gen_blobs(2, 2, 2, 10.0, 0).unwrap();
        assert_eq!(a.len(), 4);
        assert_eq!(a.dim(), 2);
        assert_eq!(a.classes(), 2);
        let b = gen_blobs(2, 2, 2, 10.0, 0).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = gen_blobs(2, 2, 2, 10.0, 1).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn gen_blobs_separable_with_margin() {
        // Independent separator: the perpendicular bisector of the two
        // centers. With separation 10 and unit variance, every point should
        // clear it by more than 1.
        let sep = 10.0;
        let ds = gen_blobs(50, 2, 2, sep, 0).unwrap();
        let mut min_margin = f64::INFINITY;
        for inst in ds.instances() {
            // Center axis is x0; boundary at x0 = 0.
            let signed = match inst.label {
                0 => -inst.features[0],
                _ => inst.features[0],
            };
            min_margin = min_margin.min(signed);
        }
        assert!(min_margin > 1.0, "min margin {min_margin}");
    }

    #[test]
    fn gen_blobs_equidistant_centers_multiclass() {
        let ds = gen_blobs(200, 3, 4, 8.0, 7).unwrap();
        assert_eq!(ds.len(), 600);
        // Class means should sit near the centers: pairwise distances ≈ 8.
        let mut means = vec![vec![0.0; 4]; 3];
        for inst in ds.instances() {
            for (m, &x) in means[inst.label].iter_mut().zip(&inst.features) {
                *m += x / 200.0;
            }
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                let d2: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                assert!((d2.sqrt() - 8.0).abs() < 0.5, "centers {a},{b}: {}", d2.sqrt());
            }
        }
    }

    #[test]
    fn gen_blobs_rejects_bad_arguments() {
        assert!(gen_blobs(0, 2, 2, 1.0, 0).is_err());
        assert!(gen_blobs(1, 1, 2, 1.0, 0).is_err());
        assert!(gen_blobs(1, 2, 0, 1.0, 0).is_err());
        assert!(gen_blobs(1, 2, 2, 0.0, 0).is_err());
        assert!(gen_blobs(1, 3, 2, 1.0, 0).is_err());
    }

    #[test]
    fn noise_zero_rate_is_identity() {
        let ds = gen_blobs(10, 2, 3, 5.0, 3).unwrap();
        let (noisy, report) = inject_label_noise(&ds, 0.0, 9).unwrap();
        assert_eq!(noisy, ds);
        assert!(report.flipped_ids.is_empty());
    }

    #[test]
    fn noise_flips_exact_count_and_only_reported_ids() {
        let ds = gen_blobs(50, 2, 3, 5.0, 3).unwrap();
        let (noisy, report) = inject_label_noise(&ds, 0.1, 9).unwrap();
        assert_eq!(report.flipped_ids.len(), 10);
        for (orig, new) in ds.instances().iter().zip(noisy.instances()) {
            assert_eq!(orig.id, new.id);
            assert_eq!(orig.features, new.features);
            if report.flipped_ids.contains(&orig.id) {
                assert_ne!(orig.label, new.label);
            } else {
                assert_eq!(orig.label, new.label);
            }
        }
    }

    #[test]
    fn noise_is_deterministic() {
        let ds = gen_blobs(50, 2, 3, 5.0, 3).unwrap();
        let (a, ra) = inject_label_noise(&ds, 0.2, 4).unwrap();
        let (b, rb) = inject_label_noise(&ds, 0.2, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn noise_rejects_rate_out_of_range() {
        let ds = gen_blobs(5, 2, 2, 5.0, 0).unwrap();
        assert!(inject_label_noise(&ds, 1.0, 0).is_err());
        assert!(inject_label_noise(&ds, -0.1, 0).is_err());
    }

    #[test]
    fn split_is_disjoint_exhaustive_deterministic() {
        let ds = gen_blobs(5, 2, 2, 5.0, 1).unwrap();
        let (train, val) = split(&ds, 3, 11).unwrap();
        assert_eq!(train.len(), 7);
        assert_eq!(val.len(), 3);
        let mut all: Vec<usize> = train.ids().chain(val.ids()).collect();
        all.sort_unstable();
        let mut parent: Vec<usize> = ds.ids().collect();
        parent.sort_unstable();
        assert_eq!(all, parent);

        let (train2, val2) = split(&ds, 3, 11).unwrap();
        assert_eq!(train, train2);
        assert_eq!(val, val2);
        let (_, val3) = split(&ds, 3, 12).unwrap();
        assert_ne!(
            val.ids().collect::<Vec<_>>(),
            val3.ids().collect::<Vec<_>>()
        );
    }

    #[test]
    fn split_rejects_bad_counts() {
        let ds = gen_blobs(5, 2, 2, 5.0, 1).unwrap();
        assert!(split(&ds, 0, 0).is_err());
        assert!(split(&ds, 10, 0).is_err());
    }

    #[test]
    fn binary_round_trip_and_truncation() {
        let ds = gen_blobs(13, 3, 5, 4.0, 2).unwrap();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, ds);

        let err = Dataset::from_bytes(&bytes[..bytes.len() - 3], "mem").unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Dataset::from_bytes(&bad, "mem").is_err());
    }

    #[test]
    fn remove_ids_keeps_remaining_ids() {
        let ds = gen_blobs(5, 2, 2, 5.0, 1).unwrap();
        let removed: HashSet<usize> = [0, 3, 7].into_iter().collect();
        let rest = ds.remove_ids(&removed).unwrap();
        assert_eq!(rest.len(), 7);
        assert!(rest.ids().all(|id| !removed.contains(&id)));
        assert!(rest.by_id(9).is_some());
    }
}
