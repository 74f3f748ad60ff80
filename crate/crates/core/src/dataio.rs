//! Synthetic datasets, the binary dataset format, experiment configs and
//! CSV/parameter output.
//!
//! Dataset file layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"PFCBLOB\0"
//! 8       1     version (1)
//! 9       8     n_samples   u64
//! 17      4     input_dim   u32
//! 21      4     n_classes   u32
//! 25      ...   n_samples × (input_dim × f32, label u32)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::collectives::Backend;
use crate::engine::{MetricsRecord, TrainConfig, TrainOutcome};
use crate::error::{Error, Result};
use crate::margin_loss::{MarginConfig, MarginKind};
use crate::numerics::RngStream;

pub const DATASET_MAGIC: &[u8; 8] = b"PFCBLOB\0";
pub const DATASET_VERSION: u8 = 1;
const HEADER_LEN: u64 = 25;

pub const PARAMS_MAGIC: &[u8; 8] = b"PFCPARM\0";

const BLOB_STREAM: u64 = 11;
const SPLIT_STREAM: u64 = 12;

/// In-memory labelled dataset, row-major `f32` features.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub n_classes: usize,
    pub features: Vec<f32>,
    pub labels: Vec<u32>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    fn check(&self) -> Result<()> {
        if self.features.len() != self.labels.len() * self.input_dim {
            return Err(Error::Data(
                "feature length does not match sample count".into(),
            ));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y as usize >= self.n_classes) {
            return Err(Error::Data(format!(
                "label {y} outside 0..{}",
                self.n_classes
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let dim =
            u32::try_from(self.input_dim).map_err(|_| Error::Data("input_dim too large".into()))?;
        let classes =
            u32::try_from(self.n_classes).map_err(|_| Error::Data("too many classes".into()))?;
        let mut out = Vec::with_capacity(
            HEADER_LEN as usize + self.features.len() * 4 + self.labels.len() * 4,
        );
        out.extend_from_slice(DATASET_MAGIC);
        out.push(DATASET_VERSION);
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&classes.to_le_bytes());
        for i in 0..self.len() {
            for v in self.row(i) {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&self.labels[i].to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let format = |offset: u64, message: String| Error::Format { offset, message };
        if bytes.len() < HEADER_LEN as usize {
            return Err(format(
                bytes.len() as u64,
                format!("header needs {HEADER_LEN} bytes, file has {}", bytes.len()),
            ));
        }
        if &bytes[..8] != DATASET_MAGIC {
            return Err(format(0, "bad magic, not a dataset file".into()));
        }
        if bytes[8] != DATASET_VERSION {
            return Err(format(
                8,
                format!(
                    "unsupported version {} (this build reads {DATASET_VERSION})",
                    bytes[8]
                ),
            ));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let n = u64::from_le_bytes(bytes[9..17].try_into().unwrap());
        let dim = u32_at(17) as usize;
        let n_classes = u32_at(21) as usize;
        let record = (dim as u64 + 1) * 4;
        let expected = n
            .checked_mul(record)
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or_else(|| format(9, "sample count overflows".into()))?;
        if bytes.len() as u64 != expected {
            return Err(format(
                (bytes.len() as u64).min(expected),
                format!(
                    "expected {expected} bytes for {n} samples of dimension {dim}, found {}",
                    bytes.len()
                ),
            ));
        }
        let n = n as usize;
        let mut features = Vec::with_capacity(n * dim);
        let mut labels = Vec::with_capacity(n);
        let mut o = HEADER_LEN as usize;
        for _ in 0..n {
            for _ in 0..dim {
                features.push(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()));
                o += 4;
            }
            let y = u32_at(o);
            if y as usize >= n_classes {
                return Err(format(
                    o as u64,
                    format!("label {y} outside 0..{n_classes}"),
                ));
            }
            labels.push(y);
            o += 4;
        }
        Ok(Dataset {
            input_dim: dim,
            n_classes,
            features,
            labels,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

/// Gaussian blobs around class centers drawn uniformly on the unit sphere.
/// Each coordinate of a sample is its center plus `N(0, spread²)` noise.
/// Samples are stored class by class.
pub fn generate_blobs(
    n_classes: usize,
    per_class: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 || per_class == 0 || input_dim == 0 {
        return Err(Error::config(
            "classes, per-class count and dimension must be positive",
        ));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::config(format!(
            "spread must be non-negative, got {spread}"
        )));
    }
    let mut rng = RngStream::with_stream(seed, BLOB_STREAM);
    let mut centers = Vec::with_capacity(n_classes * input_dim);
    for _ in 0..n_classes {
        let v: Vec<f64> = loop {
            let v: Vec<f64> = (0..input_dim).map(|_| rng.next_gaussian()).collect();
            if v.iter().any(|x| *x != 0.0) {
                break v;
            }
        };
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        centers.extend(v.into_iter().map(|x| x / norm));
    }
    let mut features = Vec::with_capacity(n_classes * per_class * input_dim);
    let mut labels = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        let center = &centers[c * input_dim..(c + 1) * input_dim];
        for _ in 0..per_class {
            features.extend(center.iter().map(|&m| {
                let noise = if spread > 0.0 {
                    spread * rng.next_gaussian()
                } else {
                    0.0
                };
                (m + noise) as f32
            }));
            labels.push(c as u32);
        }
    }
    Ok(Dataset {
        input_dim,
        n_classes,
        features,
        labels,
    })
}

/// Sample indices of the training and held-out parts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub eval: Vec<usize>,
}

impl Split {
    /// Everything in training, nothing held out.
    pub fn all_train(n: usize) -> Self {
        Split {
            train: (0..n).collect(),
            eval: Vec::new(),
        }
    }
}

/// Stratified split: from each class, `round(count · fraction)` randomly
/// chosen samples are held out. Both lists are ascending.
pub fn split_dataset(data: &Dataset, eval_fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::config(format!(
            "eval_fraction must lie in [0, 1), got {eval_fraction}"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.n_classes];
    for (i, &y) in data.labels.iter().enumerate() {
        by_class[y as usize].push(i);
    }
    let mut rng = RngStream::with_stream(seed, SPLIT_STREAM);
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for mut members in by_class {
        let held = (members.len() as f64 * eval_fraction).round() as usize;
        rng.shuffle(&mut members);
        eval.extend_from_slice(&members[..held]);
        train.extend_from_slice(&members[held..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    Ok(Split { train, eval })
}

/// A training run as described by a config file.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub output: PathBuf,
    pub eval_fraction: f64,
    pub backend: Backend,
    /// `n_classes` is 0 until the dataset is loaded, unless the file sets
    /// `classes` explicitly.
    pub train: TrainConfig,
}

pub const CONFIG_KEYS: &[&str] = &[
    "dataset",
    "output",
    "eval_fraction",
    "backend",
    "workers",
    "batch_size",
    "embedding_dim",
    "hidden_dim",
    "classes",
    "mode",
    "sample_rate",
    "loss",
    "margin",
    "scale",
    "lr",
    "lr_milestones",
    "momentum",
    "weight_decay",
    "iterations",
    "seed",
    "log_every",
];

pub const DEFAULT_GLOBAL_BATCH: usize = 512;

struct Entry {
    line: usize,
    value: String,
}

fn parse_lines(text: &str) -> Result<BTreeMap<String, Entry>> {
    let mut map: BTreeMap<String, Entry> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {line}: expected `key = value`, got `{content}`"
            ))
        })?;
        let key = key.trim().to_string();
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("line {line}: unknown key `{key}`")));
        }
        if let Some(prev) = map.get(&key) {
            return Err(Error::Config(format!(
                "line {line}: duplicate key `{key}` (first set on line {})",
                prev.line
            )));
        }
        map.insert(
            key,
            Entry {
                line,
                value: value.trim().to_string(),
            },
        );
    }
    Ok(map)
}

fn typed<T: std::str::FromStr>(map: &BTreeMap<String, Entry>, key: &str) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(e) => e.value.parse::<T>().map(Some).map_err(|_| {
            Error::Config(format!(
                "line {}: `{key}` has invalid value `{}`",
                e.line, e.value
            ))
        }),
    }
}

fn line_of(map: &BTreeMap<String, Entry>, key: &str) -> String {
    map.get(key)
        .map_or_else(|| "default".to_string(), |e| format!("line {}", e.line))
}

/// Parses `key = value` config text. `overrides` are applied on top (an
/// override replaces the file's value instead of counting as a duplicate).
/// Relative paths resolve against `base_dir`.
pub fn parse_config_str(
    text: &str,
    base_dir: &Path,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig> {
    let mut map = parse_lines(text)?;
    for (key, value) in overrides {
        if !CONFIG_KEYS.contains(&key.as_str()) {
            return Err(Error::Config(format!("override: unknown key `{key}`")));
        }
        map.insert(
            key.clone(),
            Entry {
                line: 0,
                value: value.clone(),
            },
        );
    }

    let path = |key: &str| -> Result<PathBuf> {
        let e = map
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing required key `{key}`")))?;
        let p = PathBuf::from(&e.value);
        Ok(if p.is_absolute() { p } else { base_dir.join(p) })
    };
    let dataset = path("dataset")?;
    let output = path("output")?;
    if !dataset.is_file() {
        return Err(Error::Config(format!(
            "{}: dataset `{}` does not exist",
            line_of(&map, "dataset"),
            dataset.display()
        )));
    }

    let mut train = TrainConfig::new(typed(&map, "classes")?.unwrap_or(0));
    if let Some(k) = typed(&map, "workers")? {
        train.workers = k;
    }
    if train.workers == 0 {
        return Err(Error::Config(format!(
            "{}: workers must be positive",
            line_of(&map, "workers")
        )));
    }
    let global: usize = typed(&map, "batch_size")?.unwrap_or(DEFAULT_GLOBAL_BATCH);
    if global == 0 || !global.is_multiple_of(train.workers) {
        return Err(Error::Config(format!(
            "{}: batch_size {global} must be a positive multiple of workers ({})",
            line_of(&map, "batch_size"),
            train.workers
        )));
    }
    train.batch_per_worker = global / train.workers;
    if let Some(v) = typed(&map, "embedding_dim")? {
        train.embedding_dim = v;
    }
    if let Some(v) = typed(&map, "hidden_dim")? {
        train.hidden_dim = v;
    }
    if let Some(v) = typed(&map, "mode")? {
        train.mode = v;
    }
    if let Some(r) = typed::<f64>(&map, "sample_rate")? {
        if !(r > 0.0 && r <= 1.0) {
            return Err(Error::Config(format!(
                "{}: sample_rate must lie in (0, 1], got {r}",
                line_of(&map, "sample_rate")
            )));
        }
        train.rate = r;
    }
    let kind: MarginKind = typed(&map, "loss")?.unwrap_or(MarginKind::CosFace);
    let m = typed(&map, "margin")?.unwrap_or_else(|| MarginConfig::default_margin(kind));
    let s = typed(&map, "scale")?.unwrap_or(MarginConfig::DEFAULT_SCALE);
    train.margin = MarginConfig::new(kind, m, s)
        .map_err(|e| Error::Config(format!("{}: {e}", line_of(&map, "margin"))))?;
    if let Some(v) = typed(&map, "lr")? {
        train.lr0 = v;
    }
    if let Some(e) = map.get("lr_milestones") {
        train.lr_milestones = e
            .value
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<usize>()
                    .map_err(|_| Error::Config(format!("line {}: bad milestone `{s}`", e.line)))
            })
            .collect::<Result<_>>()?;
    }
    if let Some(v) = typed(&map, "momentum")? {
        train.momentum = v;
    }
    if let Some(v) = typed(&map, "weight_decay")? {
        train.weight_decay = v;
    }
    if let Some(v) = typed(&map, "iterations")? {
        train.iterations = v;
    }
    if let Some(v) = typed(&map, "seed")? {
        train.seed = v;
    }
    if let Some(v) = typed(&map, "log_every")? {
        train.log_every = v;
    }
    let eval_fraction = typed(&map, "eval_fraction")?.unwrap_or(0.2);
    if !(0.0..1.0).contains(&eval_fraction) {
        return Err(Error::Config(format!(
            "{}: eval_fraction must lie in [0, 1)",
            line_of(&map, "eval_fraction")
        )));
    }
    let backend = typed(&map, "backend")?.unwrap_or(Backend::Threaded);

    // validate everything that does not depend on the dataset
    let mut probe = train.clone();
    probe.n_classes = probe.n_classes.max(probe.workers);
    probe.validate()?;

    Ok(ExperimentConfig {
        dataset,
        output,
        eval_fraction,
        backend,
        train,
    })
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    parse_config_with(path, &[])
}

pub fn parse_config_with(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config_str(&text, base, overrides)
}

/// Header of the training metrics CSV.
pub const METRICS_HEADER: [&str; 8] = [
    "iter",
    "loss",
    "ca_pcc",
    "train_acc",
    "eval_acc",
    "lr",
    "sampled_cols",
    "elapsed_s",
];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv<W: Write>(out: W, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for r in records {
        w.write_record([
            r.iteration.to_string(),
            r.loss.to_string(),
            r.ca_pcc.to_string(),
            r.train_acc.to_string(),
            opt(r.eval_acc),
            r.lr.to_string(),
            r.sampled_cols.to_string(),
            opt(r.elapsed_s),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Final parameters: magic, then for each backbone layer and finally the
/// class-center matrix a `(rows u64, cols u64, rows·cols f64)` record, all
/// little-endian, preceded by the record count as u32.
pub fn params_to_bytes(outcome: &TrainOutcome) -> Vec<u8> {
    let mut mats = outcome.backbone.layers.clone();
    mats.push(outcome.class_centers());
    let mut out = Vec::new();
    out.extend_from_slice(PARAMS_MAGIC);
    out.extend_from_slice(&(mats.len() as u32).to_le_bytes());
    for m in &mats {
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_dataset() -> Dataset {
        generate_blobs(5, 4, 3, 0.1, 9).unwrap()
    }

    #[test]
    fn zero_spread_samples_equal_centers() {
        let d = generate_blobs(3, 4, 5, 0.0, 1).unwrap();
        for c in 0..3 {
            let first = d.row(c * 4).to_vec();
            let norm: f64 = first
                .iter()
                .map(|&v| f64::from(v) * f64::from(v))
                .sum::<f64>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-6);
            for i in 1..4 {
                assert_eq!(d.row(c * 4 + i), first.as_slice());
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(sample_dataset(), sample_dataset());
        assert_ne!(sample_dataset(), generate_blobs(5, 4, 3, 0.1, 10).unwrap());
    }

    #[test]
    fn round_trip_bytes() {
        let d = sample_dataset();
        assert_eq!(Dataset::from_bytes(&d.to_bytes().unwrap()).unwrap(), d);
    }

    #[test]
    fn format_errors() {
        let bytes = sample_dataset().to_bytes().unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Dataset::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));

        let mut newer = bytes.clone();
        newer[8] = DATASET_VERSION + 1;
        let err = Dataset::from_bytes(&newer).unwrap_err();
        assert!(err.to_string().contains("unsupported version"), "{err}");

        let cut = &bytes[..bytes.len() - 3];
        let err = Dataset::from_bytes(cut).unwrap_err().to_string();
        assert!(err.contains(&format!("expected {}", bytes.len())), "{err}");
        assert!(err.contains(&format!("found {}", bytes.len() - 3)), "{err}");

        let mut bad_label = bytes.clone();
        let n = bad_label.len();
        bad_label[n - 4..].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            Dataset::from_bytes(&bad_label),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn split_is_stratified() {
        let d = generate_blobs(10, 20, 2, 0.1, 3).unwrap();
        let s = split_dataset(&d, 0.2, 5).unwrap();
        assert_eq!(s.eval.len(), 40);
        assert_eq!(s.train.len(), 160);
        for c in 0..10u32 {
            assert_eq!(s.eval.iter().filter(|&&i| d.labels[i] == c).count(), 4);
        }
        assert_eq!(s, split_dataset(&d, 0.2, 5).unwrap());
    }

    fn with_dataset(f: impl FnOnce(&Path)) {
        let dir = tempfile::tempdir().unwrap();
        sample_dataset().write(&dir.path().join("d.bin")).unwrap();
        f(dir.path());
    }

    #[test]
    fn minimal_config_gets_defaults() {
        with_dataset(|dir| {
            let cfg = parse_config_str("dataset = d.bin\noutput = out\n", dir, &[]).unwrap();
            let t = &cfg.train;
            assert_eq!(t.margin, MarginConfig::cosface());
            assert_eq!(t.margin.scale(), 64.0);
            assert_eq!(t.lr0, 0.1);
            assert_eq!(t.momentum, 0.9);
            assert_eq!(t.global_batch(), 512);
            assert_eq!(cfg.output, dir.join("out"));

            let arc = parse_config_str("dataset = d.bin\noutput = o\nloss = arcface\n", dir, &[])
                .unwrap();
            assert_eq!(arc.train.margin, MarginConfig::arcface());
        });
    }

    #[test]
    fn config_rejections() {
        with_dataset(|dir| {
            let base = "dataset = d.bin\noutput = o\n";
            let err = parse_config_str(&format!("{base}sample_rate = 0\n"), dir, &[]).unwrap_err();
            assert!(err.to_string().contains("line 3"), "{err}");

            let err =
                parse_config_str(&format!("{base}seed = 1\nseed = 2\n"), dir, &[]).unwrap_err();
            let msg = err.to_string();
            assert!(msg.contains("line 4") && msg.contains("line 3"), "{msg}");

            let err = parse_config_str(&format!("{base}colour = blue\n"), dir, &[]).unwrap_err();
            assert!(err.to_string().contains("colour"));

            let err =
                parse_config_str(&format!("{base}iterations = many\n"), dir, &[]).unwrap_err();
            assert!(err.to_string().contains("iterations"));

            let err = parse_config_str("output = o\n", dir, &[]).unwrap_err();
            assert!(err.to_string().contains("dataset"));

            let err = parse_config_str("dataset = nope.bin\noutput = o\n", dir, &[]).unwrap_err();
            assert!(matches!(err, Error::Config(_)));

            let err = parse_config_str(&format!("{base}workers = 3\n"), dir, &[]).unwrap_err();
            assert!(err.to_string().contains("multiple"));
        });
    }

    #[test]
    fn overrides_replace_values() {
        with_dataset(|dir| {
            let cfg = parse_config_str(
                "dataset = d.bin\noutput = o\nseed = 4 # comment\n",
                dir,
                &[("seed".into(), "9".into())],
            )
            .unwrap();
            assert_eq!(cfg.train.seed, 9);
        });
    }

    #[test]
    fn metrics_csv_layout() {
        let rec = MetricsRecord {
            iteration: 10,
            loss: 1.5,
            ca_pcc: 0.25,
            train_acc: 0.5,
            eval_acc: None,
            lr: 0.1,
            sampled_cols: 7,
            elapsed_s: None,
            clamped_rows: 0,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[rec]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iter,loss,ca_pcc,train_acc,eval_acc,lr,sampled_cols,elapsed_s\n10,1.5,0.25,0.5,,0.1,7,\n"
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(100))]

            #[test]
            fn serialization_round_trip(classes in 1usize..6, per in 1usize..5, dim in 1usize..6, seed in any::<u64>(), spread in 0.0f64..2.0) {
                let d = generate_blobs(classes, per, dim, spread, seed).unwrap();
                prop_assert_eq!(Dataset::from_bytes(&d.to_bytes().unwrap()).unwrap(), d);
            }

            #[test]
            fn config_order_insensitive(perm in Just(vec![0usize, 1, 2, 3, 4]).prop_shuffle()) {
                let dir = tempfile::tempdir().unwrap();
                sample_dataset().write(&dir.path().join("d.bin")).unwrap();
                let lines = ["dataset = d.bin", "output = o", "seed = 3", "mode = full", "lr = 0.05"];
                let text: String = perm.iter().map(|&i| format!("{}\n", lines[i])).collect();
                let sorted: String = lines.iter().map(|l| format!("{l}\n")).collect();
                prop_assert_eq!(
                    parse_config_str(&text, dir.path(), &[]).unwrap(),
                    parse_config_str(&sorted, dir.path(), &[]).unwrap()
                );
            }
        }
    }
}
