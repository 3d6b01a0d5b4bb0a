//! CSV ingestion, feature standardization, and the six synthetic
//! feature-selection benchmarks.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

/// Name of the sampling scheme used by [`gen_synth`]; recorded in dataset
/// manifests so emitted data stays reproducible across releases.
pub const SYNTH_GENERATOR_VERSION: &str = "chacha8-ziggurat-normal-v1";

/// An unstandardized dataset in memory: row-major features plus class ids.
#[derive(Clone, Debug)]
pub struct RawDataset<S> {
    pub features: Vec<S>,
    pub n: usize,
    pub d: usize,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub feature_names: Vec<String>,
}

impl<S: Scalar> RawDataset<S> {
    pub fn row(&self, i: usize) -> &[S] {
        &self.features[i * self.d..(i + 1) * self.d]
    }
}

/// A standardized split. Val/test splits carry the statistics that were
/// fitted on the training split (no leakage).
#[derive(Clone, Debug)]
pub struct DatasetSplit<S> {
    pub features: Vec<S>,
    pub n: usize,
    pub d: usize,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub feature_means: Vec<S>,
    pub feature_stds: Vec<S>,
}

impl<S: Scalar> DatasetSplit<S> {
    pub fn row(&self, i: usize) -> &[S] {
        &self.features[i * self.d..(i + 1) * self.d]
    }
}

/// Parses a rectangular numeric CSV with a header row. Missing or
/// non-numeric cells are data errors naming the (row, column); the label
/// column is selected by name.
pub fn load_csv<S: Scalar>(path: &Path, label_column: &str) -> Result<RawDataset<S>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| Error::Dataset(format!("label column `{label_column}` not found")))?;
    let d = headers.len() - 1;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label_idx)
        .map(|(_, h)| h.clone())
        .collect();

    let mut features = Vec::new();
    let mut raw_labels: Vec<i64> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        if record.len() != headers.len() {
            return Err(Error::Data {
                row: row_idx,
                col: record.len(),
                msg: format!("expected {} fields, found {}", headers.len(), record.len()),
            });
        }
        for (col_idx, field) in record.iter().enumerate() {
            if field.trim().is_empty() {
                return Err(Error::Data {
                    row: row_idx,
                    col: col_idx,
                    msg: "missing value".into(),
                });
            }
            if col_idx == label_idx {
                let v = f64::from_str(field.trim()).map_err(|_| Error::Data {
                    row: row_idx,
                    col: col_idx,
                    msg: format!("non-numeric label `{field}`"),
                })?;
                if v.fract() != 0.0 || v < 0.0 {
                    return Err(Error::Data {
                        row: row_idx,
                        col: col_idx,
                        msg: format!("label `{field}` is not a nonnegative integer"),
                    });
                }
                raw_labels.push(v as i64);
            } else {
                let v = f64::from_str(field.trim()).map_err(|_| Error::Data {
                    row: row_idx,
                    col: col_idx,
                    msg: format!("non-numeric feature `{field}`"),
                })?;
                features.push(S::of(v));
            }
        }
    }
    let n = raw_labels.len();
    if n == 0 {
        return Err(Error::Dataset("empty dataset".into()));
    }
    // map distinct label values to contiguous class ids, ordered by value
    let mut distinct: Vec<i64> = raw_labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let labels: Vec<usize> = raw_labels
        .iter()
        .map(|v| distinct.binary_search(v).unwrap())
        .collect();
    Ok(RawDataset {
        features,
        n,
        d,
        labels,
        class_count: distinct.len(),
        feature_names,
    })
}

/// Writes a dataset as comma-delimited UTF-8 with a header row; the label
/// column is named `label`.
pub fn write_csv<S: Scalar>(dataset: &RawDataset<S>, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = dataset.feature_names.clone();
    header.push("label".into());
    writer.write_record(&header)?;
    for i in 0..dataset.n {
        let mut record: Vec<String> = dataset
            .row(i)
            .iter()
            .map(|v| format!("{}", v.as_f64()))
            .collect();
        record.push(dataset.labels[i].to_string());
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

/// Standardizes every split with statistics fitted on `train` rows only
/// (population std, ddof = 0). Zero-variance features pass through with the
/// std treated as 1.
pub fn standardize<S: Scalar>(
    dataset: &RawDataset<S>,
    splits: &[&[usize]],
) -> Result<Vec<DatasetSplit<S>>> {
    let train_rows = splits
        .first()
        .ok_or_else(|| Error::Dataset("standardize needs at least the training split".into()))?;
    if train_rows.is_empty() {
        return Err(Error::Dataset("empty training split".into()));
    }
    let d = dataset.d;
    let n_train = train_rows.len() as f64;
    let mut means = vec![0.0f64; d];
    for &i in train_rows.iter() {
        for (j, &v) in dataset.row(i).iter().enumerate() {
            means[j] += v.as_f64();
        }
    }
    for m in means.iter_mut() {
        *m /= n_train;
    }
    let mut vars = vec![0.0f64; d];
    for &i in train_rows.iter() {
        for (j, &v) in dataset.row(i).iter().enumerate() {
            let diff = v.as_f64() - means[j];
            vars[j] += diff * diff;
        }
    }
    let stds: Vec<f64> = vars
        .iter()
        .map(|&v| {
            let s = (v / n_train).sqrt();
            if s == 0.0 {
                1.0
            } else {
                s
            }
        })
        .collect();
    // zero-variance features pass through unchanged, including their offset
    let eff_means: Vec<f64> = means
        .iter()
        .zip(vars.iter())
        .map(|(&m, &v)| if v == 0.0 { 0.0 } else { m })
        .collect();

    let mut out = Vec::with_capacity(splits.len());
    for rows in splits {
        let mut features = Vec::with_capacity(rows.len() * d);
        let mut labels = Vec::with_capacity(rows.len());
        for &i in rows.iter() {
            for (j, &v) in dataset.row(i).iter().enumerate() {
                features.push(S::of((v.as_f64() - eff_means[j]) / stds[j]));
            }
            labels.push(dataset.labels[i]);
        }
        out.push(DatasetSplit {
            features,
            n: rows.len(),
            d,
            labels,
            class_count: dataset.class_count,
            feature_means: eff_means.iter().map(|&m| S::of(m)).collect(),
            feature_stds: stds.iter().map(|&s| S::of(s)).collect(),
        });
    }
    Ok(out)
}

/// The six synthetic label laws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    Syn1,
    Syn2,
    Syn3,
    Syn4,
    Syn5,
    Syn6,
}

impl fmt::Display for SynthTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SynthTask::Syn1 => "syn1",
            SynthTask::Syn2 => "syn2",
            SynthTask::Syn3 => "syn3",
            SynthTask::Syn4 => "syn4",
            SynthTask::Syn5 => "syn5",
            SynthTask::Syn6 => "syn6",
        };
        f.write_str(s)
    }
}

impl FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "syn1" => Ok(SynthTask::Syn1),
            "syn2" => Ok(SynthTask::Syn2),
            "syn3" => Ok(SynthTask::Syn3),
            "syn4" => Ok(SynthTask::Syn4),
            "syn5" => Ok(SynthTask::Syn5),
            "syn6" => Ok(SynthTask::Syn6),
            other => Err(Error::contract(format!("unknown synthetic task `{other}`"))),
        }
    }
}

/// Generation request for one synthetic instance.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: SynthTask,
    pub d: usize,
    pub n_samples: usize,
    pub seed: u64,
}

/// The canonical input dimensions of the synthetic sweep.
pub const SYNTH_DIMENSIONS: [usize; 7] = [11, 50, 100, 150, 200, 250, 300];

/// The label logit; `x` uses 0-based storage, the formulas are 1-based.
pub fn synth_logit(task: SynthTask, x: &[f64]) -> f64 {
    let f = |i: usize| x[i - 1]; // 1-based access
    match task {
        SynthTask::Syn1 => (f(1) * f(2)).exp(),
        SynthTask::Syn2 => ((3..=6).map(|i| f(i) * f(i)).sum::<f64>() - 4.0).exp(),
        SynthTask::Syn3 => {
            -10.0 * (2.0 * f(7)).sin() + 2.0 * f(8).abs() + f(9) + (-f(10)).exp() - 2.4
        }
        SynthTask::Syn4 => {
            if f(11) < 0.0 {
                synth_logit(SynthTask::Syn1, x)
            } else {
                synth_logit(SynthTask::Syn2, x)
            }
        }
        SynthTask::Syn5 => {
            if f(11) < 0.0 {
                synth_logit(SynthTask::Syn1, x)
            } else {
                synth_logit(SynthTask::Syn3, x)
            }
        }
        SynthTask::Syn6 => {
            if f(11) < 0.0 {
                synth_logit(SynthTask::Syn2, x)
            } else {
                synth_logit(SynthTask::Syn3, x)
            }
        }
    }
}

/// 1-based indices of the relevant features per task.
pub fn relevant_features(task: SynthTask) -> Vec<usize> {
    match task {
        SynthTask::Syn1 => vec![1, 2],
        SynthTask::Syn2 => (3..=6).collect(),
        SynthTask::Syn3 => (7..=10).collect(),
        SynthTask::Syn4 => vec![1, 2, 3, 4, 5, 6, 11],
        SynthTask::Syn5 => vec![1, 2, 7, 8, 9, 10, 11],
        SynthTask::Syn6 => (3..=11).collect(),
    }
}

/// Samples a synthetic instance: features i.i.d. standard normal, labels
/// Bernoulli with `P(y=1|x) = 1/(1 + logit(x))`.
pub fn gen_synth<S: Scalar>(spec: &SynthSpec) -> Result<RawDataset<S>> {
    if spec.d < 11 {
        return Err(Error::contract(format!(
            "synthetic tasks reference feature 11; d = {} is too small",
            spec.d
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut features = Vec::with_capacity(spec.n_samples * spec.d);
    let mut labels = Vec::with_capacity(spec.n_samples);
    let mut x = vec![0.0f64; spec.d];
    for _ in 0..spec.n_samples {
        for slot in x.iter_mut() {
            *slot = StandardNormal.sample(&mut rng);
        }
        let p_one = 1.0 / (1.0 + synth_logit(spec.task, &x));
        let y = usize::from(rng.gen::<f64>() < p_one);
        features.extend(x.iter().map(|&v| S::of(v)));
        labels.push(y);
    }
    let feature_names = (1..=spec.d).map(|i| format!("f{i}")).collect();
    Ok(RawDataset {
        features,
        n: spec.n_samples,
        d: spec.d,
        labels,
        class_count: 2,
        feature_names,
    })
}

/// Manifest record emitted next to every generated dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthManifest {
    pub schema: String,
    pub spec: SynthSpec,
    pub generator: String,
    pub sha256: String,
}

impl SynthManifest {
    pub fn new(spec: SynthSpec, csv_bytes: &[u8]) -> Self {
        SynthManifest {
            schema: "synth-manifest-v1".into(),
            spec,
            generator: SYNTH_GENERATOR_VERSION.into(),
            sha256: sha256_hex(csv_bytes),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
