//! Training harness: Adam, reduce-on-plateau scheduling, early stopping,
//! stratified five-fold partitioning, and the grid-search selection protocol.

use crate::data::{standardize, DatasetSplit, RawDataset};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, Metrics};
use crate::model::TrainModel;
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Which validation/test score drives selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMetric {
    LogLoss,
    RocAuc,
    Accuracy,
}

impl ScoreMetric {
    pub fn higher_is_better(&self) -> bool {
        !matches!(self, ScoreMetric::LogLoss)
    }

    pub fn extract(&self, m: &Metrics) -> Result<f64> {
        match self {
            ScoreMetric::LogLoss => Ok(m.log_loss),
            ScoreMetric::Accuracy => Ok(m.accuracy),
            ScoreMetric::RocAuc => m
                .roc_auc
                .ok_or_else(|| Error::contract("ROC AUC requested for a non-binary task")),
        }
    }

    /// True when `a` is a strictly better score than `b`.
    pub fn better(&self, a: f64, b: f64) -> bool {
        if self.higher_is_better() {
            a > b
        } else {
            a < b
        }
    }

    pub fn worst(&self) -> f64 {
        if self.higher_is_better() {
            f64::NEG_INFINITY
        } else {
            f64::INFINITY
        }
    }
}

impl std::fmt::Display for ScoreMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ScoreMetric::LogLoss => "log-loss",
            ScoreMetric::RocAuc => "roc-auc",
            ScoreMetric::Accuracy => "accuracy",
        };
        f.write_str(s)
    }
}

/// Optimization protocol knobs. `batch_size` defaults to the paper-scale
/// 2048; [`TrainConfig::desk`] is the small-scale profile.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Early stopping window on the validation score.
    pub early_stop_patience: usize,
    pub initial_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub lr_floor: f64,
    pub seed: u64,
    pub metric: ScoreMetric,
}

impl TrainConfig {
    pub fn paper(initial_lr: f64, seed: u64, metric: ScoreMetric) -> TrainConfig {
        TrainConfig {
            batch_size: 2048,
            max_epochs: 1000,
            early_stop_patience: 30,
            initial_lr,
            plateau_factor: 0.5,
            plateau_patience: 10,
            plateau_min_delta: 1e-4,
            lr_floor: 1e-6,
            seed,
            metric,
        }
    }

    /// Small-scale profile: batch 256, otherwise the paper protocol.
    pub fn desk(initial_lr: f64, seed: u64, metric: ScoreMetric) -> TrainConfig {
        TrainConfig {
            batch_size: 256,
            ..TrainConfig::paper(initial_lr, seed, metric)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be ≥ 1"));
        }
        if self.early_stop_patience >= self.max_epochs {
            return Err(Error::contract("patience must be < max_epochs"));
        }
        if !(self.initial_lr > 0.0) {
            return Err(Error::contract("learning rate must be > 0"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::contract("plateau factor must lie in (0,1)"));
        }
        Ok(())
    }
}

/// Per-tensor first/second moment buffers with a shared step counter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(sizes: &[usize]) -> AdamState {
        AdamState {
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    pub fn for_model<S: Scalar, M: TrainModel<S> + ?Sized>(model: &M) -> AdamState {
        let sizes: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
        AdamState::new(&sizes)
    }
}

/// One Adam update (β₁ = 0.9, β₂ = 0.999, ε = 1e-8, bias-corrected).
/// A non-finite gradient aborts with the offending parameter's name.
pub fn adam_step<S: Scalar>(
    params: &mut [&mut crate::autodiff::ParamTensor<S>],
    grads: &[Vec<S>],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::contract("adam_step: parameter/gradient/state count mismatch"));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if g.len() != p.data.len() {
            return Err(Error::contract(format!(
                "adam_step: gradient length {} does not match parameter `{}` ({})",
                g.len(),
                p.name,
                p.data.len()
            )));
        }
        for (i, &gi) in g.iter().enumerate() {
            let gi = gi.as_f64();
            if !gi.is_finite() {
                return Err(Error::NonFiniteGradient(p.name.clone()));
            }
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let step = lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            p.data[i] = S::of(p.data[i].as_f64() - step);
        }
    }
    Ok(())
}

/// Reduce-on-plateau monitor over the training loss: when the loss fails to
/// improve by `min_delta` for `patience` consecutive epochs, the lr is
/// multiplied by `factor`, followed by a cooldown of `patience` epochs.
#[derive(Clone, Debug)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub floor: f64,
    best: f64,
    wait: usize,
    cooldown: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize, min_delta: f64, floor: f64) -> Result<ReduceOnPlateau> {
        if !(factor > 0.0 && factor < 1.0) {
            return Err(Error::contract("plateau factor must lie in (0,1)"));
        }
        Ok(ReduceOnPlateau {
            factor,
            patience,
            min_delta,
            floor,
            best: f64::INFINITY,
            wait: 0,
            cooldown: 0,
        })
    }

    /// Feeds one epoch's training loss; returns the updated learning rate
    /// (reduced when a plateau triggers, never below the floor).
    pub fn observe(&mut self, train_loss: f64, lr: f64) -> f64 {
        if train_loss < self.best - self.min_delta {
            self.best = train_loss;
            self.wait = 0;
            if self.cooldown > 0 {
                self.cooldown -= 1;
            }
            return lr;
        }
        if self.cooldown > 0 {
            self.cooldown -= 1;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            self.cooldown = self.patience;
            return (lr * self.factor).max(self.floor);
        }
        lr
    }
}

/// Per-epoch record of the training trace.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_score: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_score: f64,
    pub stopped_early: bool,
}

/// Class probabilities over a whole split, evaluated in bounded batches.
pub fn predict_split<S: Scalar, M: TrainModel<S> + ?Sized>(
    model: &M,
    split: &DatasetSplit<S>,
) -> Result<Vec<f64>> {
    let mut probs = Vec::with_capacity(split.n * split.class_count);
    let chunk = 1024;
    let mut start = 0;
    while start < split.n {
        let end = (start + chunk).min(split.n);
        let x = &split.features[start * split.d..end * split.d];
        probs.extend(model.predict_probs(x, end - start)?);
        start = end;
    }
    Ok(probs)
}

pub fn evaluate_split<S: Scalar, M: TrainModel<S> + ?Sized>(
    model: &M,
    split: &DatasetSplit<S>,
) -> Result<Metrics> {
    let probs = predict_split(model, split)?;
    evaluate(&probs, split.class_count, &split.labels)
}

fn snapshot<S: Scalar, M: TrainModel<S> + ?Sized>(model: &M) -> Vec<Vec<S>> {
    model.params().iter().map(|p| p.data.clone()).collect()
}

fn restore<S: Scalar, M: TrainModel<S> + ?Sized>(model: &mut M, snap: &[Vec<S>]) {
    for (p, s) in model.params_mut().into_iter().zip(snap) {
        p.data.clone_from(s);
    }
}

/// Runs the full protocol: shuffled mini-batches, Adam, plateau scheduling,
/// early stopping on the validation score, best-epoch snapshot restore.
pub fn train_model<S: Scalar, M: TrainModel<S> + ?Sized>(
    model: &mut M,
    train: &DatasetSplit<S>,
    val: &DatasetSplit<S>,
    config: &TrainConfig,
) -> Result<History> {
    config.validate()?;
    if train.n == 0 || val.n == 0 {
        return Err(Error::Dataset("empty training or validation split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = AdamState::for_model(model);
    let mut scheduler = ReduceOnPlateau::new(
        config.plateau_factor,
        config.plateau_patience,
        config.plateau_min_delta,
        config.lr_floor,
    )?;
    let mut lr = config.initial_lr;
    let metric = config.metric;

    let mut history = History {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_score: metric.worst(),
        stopped_early: false,
    };
    let mut best_snapshot = snapshot(model);
    let mut epochs_since_best = 0usize;
    let mut order: Vec<usize> = (0..train.n).collect();
    let mut xbuf: Vec<S> = Vec::with_capacity(config.batch_size * train.d);
    let mut ybuf: Vec<usize> = Vec::with_capacity(config.batch_size);

    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            xbuf.clear();
            ybuf.clear();
            for &i in batch {
                xbuf.extend_from_slice(train.row(i));
                ybuf.push(train.labels[i]);
            }
            let mut tape = crate::autodiff::Tape::new();
            let (loss, pv) = model.batch_loss(&mut tape, &xbuf, batch.len(), &ybuf, true, &mut rng)?;
            tape.backward(loss)?;
            loss_sum += tape.value(loss)[0].as_f64() * batch.len() as f64;
            let grads: Vec<Vec<S>> = pv
                .iter()
                .zip(model.params())
                .map(|(&var, p)| {
                    tape.grad(var)
                        .map(<[S]>::to_vec)
                        .unwrap_or_else(|| vec![S::zero(); p.data.len()])
                })
                .collect();
            adam_step(&mut model.params_mut(), &grads, &mut state, lr)?;
        }
        let train_loss = loss_sum / train.n as f64;
        let val_score = metric.extract(&evaluate_split(model, val)?)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_score,
            lr,
        });

        if metric.better(val_score, history.best_val_score) {
            history.best_val_score = val_score;
            history.best_epoch = epoch;
            best_snapshot = snapshot(model);
            epochs_since_best = 0;
        } else {
            epochs_since_best += 1;
            if epochs_since_best > config.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
        lr = scheduler.observe(train_loss, lr);
    }
    restore(model, &best_snapshot);
    Ok(history)
}

/// Row indices of one train/val/test partition.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Partition {
    /// Standardized splits with statistics fitted on the train rows.
    pub fn materialize<S: Scalar>(
        &self,
        data: &RawDataset<S>,
    ) -> Result<(DatasetSplit<S>, DatasetSplit<S>, DatasetSplit<S>)> {
        let mut splits = standardize(data, &[&self.train, &self.val, &self.test])?;
        let test = splits.pop().unwrap();
        let val = splits.pop().unwrap();
        let train = splits.pop().unwrap();
        Ok((train, val, test))
    }
}

/// Five stratified partitions of 70% train / 10% val / 20% test. Each of the
/// five stratified folds serves as the test set exactly once; validation is a
/// stratified 1/8 carve of the non-test folds. Rows are canonically sorted
/// (label, then feature values) before folding, so the result is invariant to
/// input row order.
pub fn make_partitions<S: Scalar>(data: &RawDataset<S>, seed: u64) -> Result<Vec<Partition>> {
    const FOLDS: usize = 5;
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count];
    for (i, &y) in data.labels.iter().enumerate() {
        per_class[y].push(i);
    }
    for (c, rows) in per_class.iter().enumerate() {
        if rows.len() < FOLDS {
            return Err(Error::Dataset(format!(
                "class {c} has {} samples; stratified 5-fold needs ≥ 5",
                rows.len()
            )));
        }
    }
    // canonical order: label, then the feature row lexicographically
    let key_cmp = |&a: &usize, &b: &usize| {
        data.row(a)
            .iter()
            .zip(data.row(b))
            .map(|(x, y)| x.partial_cmp(y).expect("finite features"))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); FOLDS];
    for rows in per_class.iter_mut() {
        rows.sort_by(key_cmp);
        rows.shuffle(&mut rng);
        for (j, &row) in rows.iter().enumerate() {
            folds[j % FOLDS].push(row);
        }
    }

    let mut partitions = Vec::with_capacity(FOLDS);
    for t in 0..FOLDS {
        let test = folds[t].clone();
        // stratified 1/8 validation carve of the non-test rows
        let mut rest_per_class: Vec<Vec<usize>> = vec![Vec::new(); data.class_count];
        for (f, fold) in folds.iter().enumerate() {
            if f == t {
                continue;
            }
            for &row in fold {
                rest_per_class[data.labels[row]].push(row);
            }
        }
        let mut train = Vec::new();
        let mut val = Vec::new();
        for rows in rest_per_class.iter_mut() {
            rows.sort_by(key_cmp);
            rows.shuffle(&mut rng);
            let n_val = ((rows.len() as f64) / 8.0).round() as usize;
            val.extend_from_slice(&rows[..n_val]);
            train.extend_from_slice(&rows[n_val..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        let mut test = test;
        test.sort_unstable();
        partitions.push(Partition { train, val, test });
    }
    Ok(partitions)
}

/// Sample standard error of the mean (ddof = 1); 0 for fewer than two values.
pub fn sem(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// A test score that selection code cannot read: it only opens after the
/// validation-based choice is made.
#[derive(Clone, Copy, Debug)]
pub struct SealedScore(f64);

impl SealedScore {
    pub fn seal(score: f64) -> SealedScore {
        SealedScore(score)
    }

    fn unseal(self) -> f64 {
        self.0
    }
}

/// Outcome of training one grid cell (config × partition × seed).
#[derive(Clone, Copy, Debug)]
pub struct CellOutcome {
    pub val_score: f64,
    pub test_score: SealedScore,
}

/// The per-partition selection record of one seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PartitionChoice {
    pub partition: usize,
    pub config: usize,
    pub val_score: f64,
    pub test_score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub choices: Vec<PartitionChoice>,
    pub mean_test: f64,
    pub sem_test: f64,
}

/// Raw validation scores of every completed cell, for the results file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellRecord {
    pub seed: u64,
    pub partition: usize,
    pub config: usize,
    pub val_score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridResult {
    pub metric: ScoreMetric,
    pub per_seed: Vec<SeedSummary>,
    pub cells: Vec<CellRecord>,
    /// Seed-average of the per-seed mean test scores.
    pub mean_test: f64,
    /// Seed-average of the per-seed SEMs.
    pub sem_test: f64,
    /// Human-readable descriptions of failed cells (excluded from selection).
    pub failures: Vec<String>,
}

/// The grid-search selection protocol: per seed and partition, train every
/// config, pick the best validation score, and record that config's test
/// score. Failed cells are excluded from selection and reported in
/// `failures`, never silently dropped. `jobs > 1` runs cells on that many
/// threads; results are merged deterministically by cell index.
pub fn grid_search<F>(
    n_configs: usize,
    n_partitions: usize,
    seeds: &[u64],
    metric: ScoreMetric,
    jobs: usize,
    run: F,
) -> Result<GridResult>
where
    F: Fn(u64, usize, usize) -> Result<CellOutcome> + Sync,
{
    if n_configs == 0 {
        return Err(Error::contract("grid search needs at least one config"));
    }
    let cells: Vec<(u64, usize, usize)> = seeds
        .iter()
        .flat_map(|&s| {
            (0..n_partitions).flat_map(move |p| (0..n_configs).map(move |c| (s, p, c)))
        })
        .collect();

    let outcomes: Vec<std::result::Result<CellOutcome, String>> = if jobs <= 1 {
        cells
            .iter()
            .map(|&(s, p, c)| run(s, p, c).map_err(|e| e.to_string()))
            .collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<std::result::Result<CellOutcome, String>>>> =
            (0..cells.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(cells.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= cells.len() {
                        break;
                    }
                    let (s, p, c) = cells[i];
                    let outcome = run(s, p, c).map_err(|e| e.to_string());
                    *slots[i].lock().unwrap() = Some(outcome);
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().unwrap().expect("cell executed"))
            .collect()
    };

    let mut failures = Vec::new();
    let mut records = Vec::new();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut choices = Vec::with_capacity(n_partitions);
        for p in 0..n_partitions {
            let mut best: Option<(usize, f64, SealedScore)> = None;
            for c in 0..n_configs {
                let idx = cells
                    .iter()
                    .position(|&cell| cell == (seed, p, c))
                    .expect("cell enumerated");
                match &outcomes[idx] {
                    Ok(outcome) => {
                        records.push(CellRecord {
                            seed,
                            partition: p,
                            config: c,
                            val_score: outcome.val_score,
                        });
                        let is_better = best
                            .as_ref()
                            .map(|(_, v, _)| metric.better(outcome.val_score, *v))
                            .unwrap_or(true);
                        if is_better {
                            best = Some((c, outcome.val_score, outcome.test_score));
                        }
                    }
                    Err(msg) => {
                        let warning = format!(
                            "cell (seed {seed}, partition {p}, config {c}) failed: {msg}"
                        );
                        eprintln!("warning: {warning}");
                        failures.push(warning);
                    }
                }
            }
            let (config, val_score, sealed) = best.ok_or_else(|| {
                Error::Dataset(format!(
                    "every config failed on seed {seed}, partition {p}"
                ))
            })?;
            choices.push(PartitionChoice {
                partition: p,
                config,
                val_score,
                test_score: sealed.unseal(),
            });
        }
        let tests: Vec<f64> = choices.iter().map(|c| c.test_score).collect();
        per_seed.push(SeedSummary {
            seed,
            mean_test: mean(&tests),
            sem_test: sem(&tests),
            choices,
        });
    }
    let mean_test = mean(&per_seed.iter().map(|s| s.mean_test).collect::<Vec<_>>());
    let sem_test = mean(&per_seed.iter().map(|s| s.sem_test).collect::<Vec<_>>());
    Ok(GridResult {
        metric,
        per_seed,
        cells: records,
        mean_test,
        sem_test,
        failures,
    })
}
