//! Long-tailed synthetic ordinal data, stratified splits, and CSV ingestion.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::AggdParams;
use crate::error::{contract, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split `{other}` (expected train, val or test)"
            ))),
        }
    }
}

/// Generator settings. Class `c` sits at `c · severity_gap` on a 1-D severity
/// axis with two-piece Gaussian noise (left scale `noise_sigma`, right scale
/// `(1 + skew) · noise_sigma`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub samples_per_class: Vec<usize>,
    pub input_dim: usize,
    pub severity_gap: f64,
    pub noise_sigma: f64,
    pub skew: f64,
    /// Standard-normal nuisance factors mixed into the observations alongside
    /// severity.
    pub nuisance_dims: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 7,
            samples_per_class: vec![300, 180, 110, 65, 40, 25, 15],
            input_dim: 64,
            severity_gap: 1.0,
            noise_sigma: 0.25,
            skew: 0.8,
            nuisance_dims: 0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return contract(format!("input_dim must be >= 2, got {}", self.input_dim));
        }
        if self.num_classes < 2 || self.samples_per_class.len() != self.num_classes {
            return contract(format!(
                "need {} per-class counts for {} classes (at least 2), got {}",
                self.num_classes,
                self.num_classes,
                self.samples_per_class.len()
            ));
        }
        if self.samples_per_class.contains(&0) {
            return contract("samples_per_class entries must be positive");
        }
        if !(self.severity_gap > 0.0) || !self.severity_gap.is_finite() {
            return contract(format!(
                "severity_gap must be positive, got {}",
                self.severity_gap
            ));
        }
        if !(self.noise_sigma > 0.0) || !self.noise_sigma.is_finite() {
            return contract(format!(
                "noise_sigma must be positive, got {}",
                self.noise_sigma
            ));
        }
        if !(self.skew > -1.0) || !self.skew.is_finite() {
            return contract(format!("skew must exceed -1, got {}", self.skew));
        }
        Ok(())
    }
}

/// `⌈r^c · n₀⌉` for `c = 0..classes`.
pub fn geometric_counts(n0: usize, ratio: f64, classes: usize) -> Result<Vec<usize>> {
    if !(ratio > 0.0 && ratio < 1.0) || n0 == 0 {
        return contract(format!(
            "geometric counts need 0 < r < 1 and n0 > 0, got r={ratio}, n0={n0}"
        ));
    }
    Ok((0..classes)
        .map(|c| (ratio.powi(c as i32) * n0 as f64).ceil() as usize)
        .collect())
}

/// Observations with grades and split membership.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    pub num_classes: usize,
    /// Ground-truth severity per sample, when generated synthetically.
    pub severity: Option<Vec<f64>>,
}

/// Features and labels of a single split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Rows at the given indices, in order.
    pub fn select(&self, idx: &[usize]) -> (Array2<f64>, Vec<usize>) {
        let x = self.features.select(ndarray::Axis(0), idx);
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        splits: Vec<Split>,
        num_classes: usize,
    ) -> Result<Self> {
        if features.nrows() != labels.len() || labels.len() != splits.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: vec![features.nrows(), features.ncols()],
                rhs: vec![labels.len(), splits.len()],
            });
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return contract(format!(
                "label {bad} out of range for {num_classes} classes"
            ));
        }
        Ok(Self {
            features,
            labels,
            splits,
            num_classes,
            severity: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.splits[i] == split)
            .collect()
    }

    pub fn split(&self, split: Split) -> SplitData {
        let idx = self.indices(split);
        SplitData {
            features: self.features.select(ndarray::Axis(0), &idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn histogram(&self, split: Split) -> Vec<usize> {
        self.split(split).histogram()
    }

    /// Writes `train.csv`, `val.csv`, `test.csv` and `meta.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for split in Split::ALL {
            write_split_csv(
                &dir.join(format!("{}.csv", split.name())),
                &self.split(split),
            )?;
        }
        let meta = DatasetMeta {
            num_classes: self.num_classes,
            input_dim: self.input_dim(),
            histograms: Split::ALL
                .map(|s| (s.name().to_string(), self.histogram(s)))
                .to_vec(),
        };
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    /// Reads a directory written by [`write_dir`](Self::write_dir). Values are
    /// taken as already scaled.
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let meta: DatasetMeta =
            serde_json::from_str(&fs::read_to_string(&meta_path).map_err(|e| {
                Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("{}: {e}", meta_path.display()),
                ))
            })?)?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut splits = Vec::new();
        for split in Split::ALL {
            let path = dir.join(format!("{}.csv", split.name()));
            let table = read_table(&path, &CsvSchema::with_classes(meta.num_classes))?;
            if table.columns != meta.input_dim {
                return Err(Error::Ingest {
                    path: path.display().to_string(),
                    problems: vec![(
                        1,
                        format!(
                            "expected {} feature columns, found {}",
                            meta.input_dim, table.columns
                        ),
                    )],
                });
            }
            splits.extend(std::iter::repeat_n(split, table.labels.len()));
            rows.extend(table.values);
            labels.extend(table.labels);
        }
        let features = Array2::from_shape_vec((labels.len(), meta.input_dim), rows)
            .map_err(|e| Error::Contract(e.to_string()))?;
        Dataset::new(features, labels, splits, meta.num_classes)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    num_classes: usize,
    input_dim: usize,
    histograms: Vec<(String, Vec<usize>)>,
}

/// Stratified assignment: per class, `⌊0.15 n⌋` to validation, `⌊0.15 n⌋` to
/// test, the rest to training.
pub fn stratified_split(labels: &[usize], num_classes: usize, seed: u64) -> Vec<Split> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = vec![Split::Train; labels.len()];
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        let held = idx.len() * 15 / 100;
        for &i in &idx[..held] {
            splits[i] = Split::Val;
        }
        for &i in &idx[held..2 * held] {
            splits[i] = Split::Test;
        }
    }
    splits
}

/// Draws a synthetic dataset. Deterministic in `cfg.seed`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let factors = 1 + cfg.nuisance_dims;
    let span = 0.5 * (cfg.num_classes - 1) as f64 * cfg.severity_gap;
    let centre = span;
    // Fixed random embedding; the severity direction is scaled to dominate.
    let mut weights = Array2::<f64>::zeros((factors, cfg.input_dim));
    for k in 0..factors {
        let scale = if k == 0 { 2.0 } else { 0.5 };
        for j in 0..cfg.input_dim {
            weights[[k, j]] = scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let bias: Vec<f64> = (0..cfg.input_dim)
        .map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal))
        .collect();

    let noise = AggdParams::new(
        0.0,
        2.0,
        cfg.noise_sigma * std::f64::consts::SQRT_2,
        (1.0 + cfg.skew) * cfg.noise_sigma * std::f64::consts::SQRT_2,
    )?;
    let total: usize = cfg.samples_per_class.iter().sum();
    let mut labels = Vec::with_capacity(total);
    let mut severity = Vec::with_capacity(total);
    for (c, &n) in cfg.samples_per_class.iter().enumerate() {
        for e in noise.sample(n, &mut rng)? {
            labels.push(c);
            severity.push(c as f64 * cfg.severity_gap + e);
        }
    }
    let mut features = Array2::<f64>::zeros((total, cfg.input_dim));
    let mut u = vec![0.0; factors];
    for (i, &s) in severity.iter().enumerate() {
        u[0] = (s - centre) / span;
        for v in u.iter_mut().skip(1) {
            *v = rng.sample(StandardNormal);
        }
        for j in 0..cfg.input_dim {
            let mut a = bias[j];
            for k in 0..factors {
                a += u[k] * weights[[k, j]];
            }
            features[[i, j]] = 1.0 / (1.0 + (-a).exp());
        }
    }
    let splits = stratified_split(&labels, cfg.num_classes, cfg.seed ^ 0x5eed_5917);
    let mut ds = Dataset::new(features, labels, splits, cfg.num_classes)?;
    ds.severity = Some(severity);
    Ok(ds)
}

/// Column layout for [`load_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    /// Feature column names; `None` takes every column except the label.
    pub feature_columns: Option<Vec<String>>,
    pub label_column: String,
    /// Labels must lie in `0..num_classes`; `None` infers `max + 1`.
    pub num_classes: Option<usize>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            feature_columns: None,
            label_column: "label".into(),
            num_classes: None,
        }
    }
}

impl CsvSchema {
    pub fn with_classes(num_classes: usize) -> Self {
        Self {
            num_classes: Some(num_classes),
            ..Self::default()
        }
    }
}

struct Table {
    values: Vec<f64>,
    columns: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

fn read_table(path: &Path, schema: &CsvSchema) -> Result<Table> {
    let ingest = |problems: Vec<(usize, String)>| Error::Ingest {
        path: path.display().to_string(),
        problems,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(std::io::Error::new(
                io.kind(),
                format!("{}: {io}", path.display()),
            )),
            other => ingest(vec![(1, format!("{other:?}"))]),
        })?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| ingest(vec![(1, e.to_string())]))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let label_at = find(&schema.label_column).ok_or_else(|| {
        ingest(vec![(
            1,
            format!("missing label column `{}`", schema.label_column),
        )])
    })?;
    let feature_at: Vec<usize> = match &schema.feature_columns {
        Some(names) => {
            let mut at = Vec::new();
            let mut missing = Vec::new();
            for n in names {
                match find(n) {
                    Some(i) => at.push(i),
                    None => missing.push((1, format!("missing feature column `{n}`"))),
                }
            }
            if !missing.is_empty() {
                return Err(ingest(missing));
            }
            at
        }
        None => (0..header.len()).filter(|&i| i != label_at).collect(),
    };

    let mut problems = Vec::new();
    let mut values = Vec::new();
    let mut raw_labels: Vec<(usize, i64)> = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let line = k + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                problems.push((line, e.to_string()));
                continue;
            }
        };
        if record.len() != header.len() {
            problems.push((
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
            continue;
        }
        let mut row = Vec::with_capacity(feature_at.len());
        let mut ok = true;
        for &i in &feature_at {
            match record[i].trim().parse::<f64>() {
                Ok(v) if v.is_finite() => row.push(v),
                _ => {
                    problems.push((
                        line,
                        format!(
                            "non-numeric feature `{}` in column `{}`",
                            &record[i], header[i]
                        ),
                    ));
                    ok = false;
                }
            }
        }
        match record[label_at].trim().parse::<i64>() {
            Ok(y) if y >= 0 && schema.num_classes.is_none_or(|c| (y as usize) < c) => {
                if ok {
                    raw_labels.push((line, y));
                    values.extend(row);
                }
            }
            _ => problems.push((line, format!("unknown label value `{}`", &record[label_at]))),
        }
    }
    if !problems.is_empty() {
        return Err(ingest(problems));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&(_, y)| y as usize).collect();
    let num_classes = schema
        .num_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Ok(Table {
        values,
        columns: feature_at.len(),
        labels,
        num_classes,
    })
}

/// Reads a labelled table, splits it 70/15/15 per class, and min-max scales
/// every feature with training-split statistics. Values outside the training
/// range map outside `[0, 1]`; constant training columns map to `x − min`.
pub fn load_csv(path: &Path, schema: &CsvSchema, split_seed: u64) -> Result<Dataset> {
    let table = read_table(path, schema)?;
    let n = table.labels.len();
    if n == 0 {
        return Err(Error::Ingest {
            path: path.display().to_string(),
            problems: vec![(1, "no data rows".into())],
        });
    }
    if table.num_classes < 2 {
        return contract(format!(
            "need at least 2 classes, found {}",
            table.num_classes
        ));
    }
    let mut features = Array2::from_shape_vec((n, table.columns), table.values)
        .map_err(|e| Error::Contract(e.to_string()))?;
    let splits = stratified_split(&table.labels, table.num_classes, split_seed);
    let train: Vec<usize> = (0..n).filter(|&i| splits[i] == Split::Train).collect();
    for mut col in features.columns_mut() {
        let lo = train.iter().map(|&i| col[i]).fold(f64::INFINITY, f64::min);
        let hi = train
            .iter()
            .map(|&i| col[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let range = if hi > lo { hi - lo } else { 1.0 };
        col.mapv_inplace(|v| (v - lo) / range);
    }
    Dataset::new(features, table.labels, splits, table.num_classes)
}

/// Writes one split in the `f0..f{D−1},label` layout.
pub fn write_split_csv(path: &Path, data: &SplitData) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Contract(format!("{other:?}")),
    })?;
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e.to_string()));
    let mut header: Vec<String> = (0..data.input_dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for (row, &y) in data.features.rows().into_iter().zip(&data.labels) {
        let mut rec: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        rec.push(y.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads either a dataset directory or a single labelled CSV file.
pub fn load_path(path: &Path, split_seed: u64) -> Result<Dataset> {
    if path.is_dir() {
        Dataset::read_dir(path)
    } else {
        load_csv(path, &CsvSchema::default(), split_seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::fit_aggd_per_coordinate;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        fs::File::create(&p)
            .unwrap()
            .write_all(text.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn class_counts_match() {
        let cfg = SynthConfig::default();
        let ds = generate(&cfg).unwrap();
        let mut h = vec![0; 7];
        for &y in &ds.labels {
            h[y] += 1;
        }
        assert_eq!(h, cfg.samples_per_class);
        assert!(ds.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SynthConfig {
            seed: 9,
            ..SynthConfig::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert!(a
            .features
            .iter()
            .zip(b.features.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.splits, b.splits);
        let c = generate(&SynthConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn split_is_stratified() {
        let ds = generate(&SynthConfig::default()).unwrap();
        assert_eq!(ds.histogram(Split::Val), vec![45, 27, 16, 9, 6, 3, 2]);
        assert_eq!(ds.histogram(Split::Test), vec![45, 27, 16, 9, 6, 3, 2]);
        assert_eq!(
            ds.histogram(Split::Train),
            vec![210, 126, 78, 47, 28, 19, 11]
        );
    }

    #[test]
    fn rejects_bad_config() {
        let bad = SynthConfig {
            input_dim: 1,
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
        let bad = SynthConfig {
            samples_per_class: vec![1, 0, 1, 1, 1, 1, 1],
            ..SynthConfig::default()
        };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn bayes_threshold_classifier_is_accurate() {
        let cfg = SynthConfig {
            noise_sigma: 0.2,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let (sl, sr) = (cfg.noise_sigma, (1.0 + cfg.skew) * cfg.noise_sigma);
        // Equal-density point between neighbouring two-piece Gaussians.
        let offset = cfg.severity_gap * sr / (sl + sr);
        let sev = ds.severity.as_ref().unwrap();
        let hits = sev
            .iter()
            .zip(&ds.labels)
            .filter(|(&s, &y)| {
                let grade = ((s - offset) / cfg.severity_gap + 1.0)
                    .floor()
                    .clamp(0.0, 6.0) as usize;
                grade == y
            })
            .count();
        let acc = hits as f64 / ds.len() as f64;
        assert!(acc > 0.9, "accuracy {acc}");
    }

    #[test]
    fn skewed_noise_fits_wider_right_side() {
        let cfg = SynthConfig::default();
        let ds = generate(&cfg).unwrap();
        let sev = ds.severity.as_ref().unwrap();
        let noise: Vec<f64> = sev
            .iter()
            .zip(&ds.labels)
            .map(|(&s, &y)| s - y as f64 * cfg.severity_gap)
            .collect();
        let m = Array2::from_shape_vec((noise.len(), 1), noise).unwrap();
        let fit = fit_aggd_per_coordinate(m.view(), 2.0).unwrap();
        let p = &fit.prior.coords[0];
        assert!(p.alpha_r > p.alpha_l, "{} vs {}", p.alpha_r, p.alpha_l);
    }

    #[test]
    fn geometric_tail_count() {
        let counts = geometric_counts(300, 0.6, 7).unwrap();
        assert_eq!(counts[6], (0.6f64.powi(6) * 300.0).ceil() as usize);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn dir_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let ds = generate(&SynthConfig {
            samples_per_class: vec![20, 10, 7],
            num_classes: 3,
            input_dim: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        ds.write_dir(tmp.path()).unwrap();
        let back = Dataset::read_dir(tmp.path()).unwrap();
        for split in Split::ALL {
            let (a, b) = (ds.split(split), back.split(split));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn small_csv_loads() {
        let tmp = tempfile::tempdir().unwrap();
        let p = write_file(
            tmp.path(),
            "d.csv",
            "f0,f1,label\n0.1,2,0\n0.5,3,1\n0.9,4,1\n",
        );
        let ds = load_csv(&p, &CsvSchema::default(), 0).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.num_classes, 2);
    }

    #[test]
    fn out_of_range_label_names_line() {
        let tmp = tempfile::tempdir().unwrap();
        let p = write_file(tmp.path(), "d.csv", "f0,label\n0.1,3\n0.5,1\n");
        let err = load_csv(&p, &CsvSchema::with_classes(3), 0).unwrap_err();
        match &err {
            Error::Ingest { problems, .. } => assert_eq!(problems[0].0, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("line 2"));
    }

    #[test]
    fn every_bad_row_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let p = write_file(tmp.path(), "d.csv", "f0,label\nabc,0\n0.5,1\n0.2,x\n");
        match load_csv(&p, &CsvSchema::default(), 0).unwrap_err() {
            Error::Ingest { problems, .. } => {
                let lines: Vec<usize> = problems.iter().map(|p| p.0).collect();
                assert_eq!(lines, vec![2, 4]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn scaling_uses_train_statistics_only() {
        let tmp = tempfile::tempdir().unwrap();
        let mut text = String::from("f0,label\n");
        for i in 0..20 {
            text.push_str(&format!("{},{}\n", i, i % 2));
        }
        let p = write_file(tmp.path(), "d.csv", &text);
        let ds = load_csv(&p, &CsvSchema::default(), 3).unwrap();
        let train: Vec<f64> = ds
            .indices(Split::Train)
            .iter()
            .map(|&i| ds.features[[i, 0]])
            .collect();
        let max = train.iter().cloned().fold(f64::MIN, f64::max);
        let min = train.iter().cloned().fold(f64::MAX, f64::min);
        assert_eq!(max, 1.0);
        assert_eq!(min, 0.0);
        // Raw values are 0..19; held-out rows beyond the training range leave [0, 1].
        let raw_train_max = ds
            .indices(Split::Train)
            .iter()
            .map(|&i| i as f64)
            .fold(f64::MIN, f64::max);
        for i in ds
            .indices(Split::Test)
            .into_iter()
            .chain(ds.indices(Split::Val))
        {
            if i as f64 > raw_train_max {
                assert!(ds.features[[i, 0]] > 1.0);
            }
        }
    }

    #[test]
    fn scaler_formula() {
        let tmp = tempfile::tempdir().unwrap();
        let mut text = String::from("f0,label\n");
        let values = [2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0];
        for v in values {
            text.push_str(&format!("{v},0\n"));
        }
        text.push_str("3.0,1\n");
        let p = write_file(tmp.path(), "d.csv", &text);
        let ds = load_csv(&p, &CsvSchema::default(), 0).unwrap();
        let train = ds.indices(Split::Train);
        let lo = train
            .iter()
            .map(|&i| if i < 7 { values[i] } else { 3.0 })
            .fold(f64::MAX, f64::min);
        let hi = train
            .iter()
            .map(|&i| if i < 7 { values[i] } else { 3.0 })
            .fold(f64::MIN, f64::max);
        for i in 0..ds.len() {
            let raw = if i < 7 { values[i] } else { 3.0 };
            assert!((ds.features[[i, 0]] - (raw - lo) / (hi - lo)).abs() < 1e-15);
        }
    }
}
