//! Model assembly: the full DNF-Net (blocks + feature selection +
//! localization + output layer), the FCN baseline, the masked FCN used by
//! the synthetic feature-selection analysis, losses, and checkpoints.

use crate::autodiff::{ParamTensor, Tape, Var};
use crate::dnnf::{conjunctions_to_or, literals, DnnfParams, DnnfSpec};
use crate::error::{Error, Result};
use crate::feature_selection::{effective_mask, regularizer, MaskPair};
use crate::localization::{gated_embedding, sm_loc, LocalizationParams};
use crate::scalar::Scalar;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

/// Classification task shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    Binary,
    Multiclass(usize),
}

impl Task {
    pub fn class_count(&self) -> usize {
        match self {
            Task::Binary => 2,
            Task::Multiclass(c) => *c,
        }
    }

    /// Output width of the logit head.
    pub fn out_dim(&self) -> usize {
        match self {
            Task::Binary => 1,
            Task::Multiclass(c) => *c,
        }
    }

    pub fn for_class_count(c: usize) -> Task {
        if c == 2 {
            Task::Binary
        } else {
            Task::Multiclass(c)
        }
    }
}

/// Which of the three architecture components are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub dnf_structure: bool,
    pub feature_selection: bool,
    pub localization: bool,
}

impl AblationFlags {
    pub const ALL_ON: AblationFlags = AblationFlags {
        dnf_structure: true,
        feature_selection: true,
        localization: true,
    };

    pub const ALL_OFF: AblationFlags = AblationFlags {
        dnf_structure: false,
        feature_selection: false,
        localization: false,
    };

    /// The ablation presets of the gradual and leave-one-out studies.
    /// `exp6` is identical to `exp3` by construction.
    pub fn preset(name: &str) -> Result<AblationFlags> {
        let f = |s, fs, loc| AblationFlags {
            dnf_structure: s,
            feature_selection: fs,
            localization: loc,
        };
        match name {
            "exp1" => Ok(f(false, false, false)),
            "exp2" => Ok(f(true, false, false)),
            "exp3" | "exp6" => Ok(f(true, true, false)),
            "exp4" => Ok(AblationFlags::ALL_ON),
            "exp5" => Ok(f(true, false, true)),
            "exp7" => Ok(f(false, true, true)),
            other => Err(Error::contract(format!("unknown ablation preset `{other}`"))),
        }
    }
}

/// Static architecture of a DNF-Net.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DnfNetSpec {
    /// Number of DNNF blocks.
    pub n: usize,
    /// Input dimension.
    pub d: usize,
    pub task: Task,
    /// Feature-selection cardinality hyperparameter.
    pub beta: f64,
    pub ablation: AblationFlags,
}

/// Conjunction counts per DNNF: the group splits into four equal subgroups
/// with k ∈ {6, 9, 12, 15}; remainder blocks round-robin from k = 6.
pub fn formula_counts(n: usize) -> Vec<usize> {
    subgroup_values(n, &[6, 9, 12, 15])
}

/// Stochastic-mask keep-probabilities per DNNF: five equal subgroups with
/// p ∈ {0.1, 0.3, 0.5, 0.7, 0.9}; remainder round-robin from 0.1.
pub fn mask_probabilities(n: usize) -> Vec<f64> {
    subgroup_values(n, &[0.1, 0.3, 0.5, 0.7, 0.9])
}

fn subgroup_values<T: Copy>(n: usize, values: &[T]) -> Vec<T> {
    let g = values.len();
    let q = n / g;
    let r = n % g;
    let mut out = Vec::with_capacity(n);
    for (i, &v) in values.iter().enumerate() {
        let count = q + usize::from(i < r);
        out.extend(std::iter::repeat_n(v, count));
    }
    out
}

/// One DNNF block with its feature-selection state.
#[derive(Clone, Debug)]
pub struct Block<S> {
    pub spec: DnnfSpec,
    pub params: DnnfParams<S>,
    pub mask: MaskPair<S>,
}

/// Trainable dense replacements for the fixed gate layers, used when the
/// DNF structure is ablated; widths mirror the structured network
/// (`[sum m_i, sum k_i, n]`).
#[derive(Clone, Debug)]
struct DenseGateLayers<S> {
    w2: ParamTensor<S>,
    b2: ParamTensor<S>,
    w3: ParamTensor<S>,
    b3: ParamTensor<S>,
}

/// The full DNF-Net model.
#[derive(Clone, Debug)]
pub struct DnfNet<S> {
    pub spec: DnfNetSpec,
    pub blocks: Vec<Block<S>>,
    dense_gates: Option<DenseGateLayers<S>>,
    pub loc: Option<LocalizationParams<S>>,
    pub head_w: ParamTensor<S>,
    pub head_b: ParamTensor<S>,
}

fn uniform_init<S: Scalar>(rng: &mut ChaCha8Rng, len: usize, fan_in: usize, fan_out: usize) -> Vec<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| S::of(rng.gen_range(-bound..bound))).collect()
}

impl<S: Scalar> DnfNet<S> {
    pub fn init(spec: DnfNetSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        let ks = formula_counts(spec.n);
        let ps = mask_probabilities(spec.n);
        let mut blocks = Vec::with_capacity(spec.n);
        for (i, (&k, &p)) in ks.iter().zip(&ps).enumerate() {
            let dspec = DnnfSpec::new(k, p);
            let params = DnnfParams::init(&dspec, spec.d, &format!("dnnf{i}"), rng);
            let mask = if spec.ablation.feature_selection {
                MaskPair::init(spec.d, p, spec.beta, &format!("dnnf{i}"), rng)?
            } else {
                // placeholder kept for shape symmetry; not trainable, not applied
                MaskPair::init_full(spec.d, spec.beta, &format!("dnnf{i}"), rng)
            };
            blocks.push(Block {
                spec: dspec,
                params,
                mask,
            });
        }
        let total_m: usize = blocks.iter().map(|b| b.spec.m).sum();
        let total_k: usize = blocks.iter().map(|b| b.spec.k).sum();
        let dense_gates = if spec.ablation.dnf_structure {
            None
        } else {
            Some(DenseGateLayers {
                w2: ParamTensor::new(
                    "dense.w2",
                    vec![total_m, total_k],
                    uniform_init(rng, total_m * total_k, total_m, total_k),
                ),
                b2: ParamTensor::new("dense.b2", vec![total_k], vec![S::zero(); total_k]),
                w3: ParamTensor::new(
                    "dense.w3",
                    vec![total_k, spec.n],
                    uniform_init(rng, total_k * spec.n, total_k, spec.n),
                ),
                b3: ParamTensor::new("dense.b3", vec![spec.n], vec![S::zero(); spec.n]),
            })
        };
        let loc = if spec.ablation.localization {
            Some(LocalizationParams::init(spec.n, spec.d, "loc", rng))
        } else {
            None
        };
        let out = spec.task.out_dim();
        let head_w = ParamTensor::new(
            "head.w",
            vec![spec.n, out],
            uniform_init(rng, spec.n * out, spec.n, out),
        );
        let head_b = ParamTensor::new("head.b", vec![out], vec![S::zero(); out]);
        Ok(DnfNet {
            spec,
            blocks,
            dense_gates,
            loc,
            head_w,
            head_b,
        })
    }

    /// Builds the forward graph; `param_vars` aligns with [`TrainModel::params`].
    fn build(&self, tape: &mut Tape<S>, x_var: Var) -> Result<(Var, Option<Var>, Vec<Var>)> {
        let fs = self.spec.ablation.feature_selection;
        let mut pv = Vec::new();

        let mut literal_blocks = Vec::with_capacity(self.blocks.len());
        let mut regs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let w = tape.param(&block.params.w);
            let b = tape.param(&block.params.b);
            pv.push(w);
            pv.push(b);
            let mask_var = if fs {
                let mt = tape.param(&block.mask.m_t);
                let alpha = tape.param(&block.mask.alpha);
                pv.push(mt);
                pv.push(alpha);
                regs.push(regularizer(tape, &block.mask, mt, alpha)?);
                effective_mask(tape, &block.mask, mt)?
            } else {
                tape.constant(vec![self.spec.d], vec![S::one(); self.spec.d])
            };
            literal_blocks.push(literals(tape, x_var, &block.params, w, b, mask_var)?);
        }

        let outputs = if self.spec.ablation.dnf_structure {
            let mut outs = Vec::with_capacity(self.blocks.len());
            for (block, &lits) in self.blocks.iter().zip(&literal_blocks) {
                outs.push(conjunctions_to_or(
                    tape,
                    lits,
                    &block.spec,
                    &block.params.conj_masks,
                )?);
            }
            tape.concat_cols(&outs)?
        } else {
            let dense = self.dense_gates.as_ref().expect("dense layers exist");
            let w2 = tape.param(&dense.w2);
            let b2 = tape.param(&dense.b2);
            let w3 = tape.param(&dense.w3);
            let b3 = tape.param(&dense.b3);
            pv.extend([w2, b2, w3, b3]);
            let lits = tape.concat_cols(&literal_blocks)?;
            let h2 = tape.matmul(lits, w2)?;
            let h2 = tape.row_add(h2, b2)?;
            let h2 = tape.tanh(h2);
            let h3 = tape.matmul(h2, w3)?;
            let h3 = tape.row_add(h3, b3)?;
            tape.tanh(h3)
        };

        let embedding = if let Some(loc) = &self.loc {
            let mu = tape.param(&loc.mu);
            let sigma = tape.param(&loc.sigma_diag);
            let tau = tape.param(&loc.tau);
            pv.extend([mu, sigma, tau]);
            let gates = sm_loc(tape, x_var, loc, mu, sigma, tau)?;
            gated_embedding(tape, outputs, gates)?
        } else {
            outputs
        };

        let hw = tape.param(&self.head_w);
        let hb = tape.param(&self.head_b);
        pv.extend([hw, hb]);
        let logits = tape.matmul(embedding, hw)?;
        let logits = tape.row_add(logits, hb)?;

        let reg = if fs {
            let mut acc = regs[0];
            for &r in &regs[1..] {
                acc = tape.add(acc, r)?;
            }
            Some(tape.mul_const(acc, S::one() / S::of(regs.len() as f64)))
        } else {
            None
        };
        Ok((logits, reg, pv))
    }
}

/// Cross-entropy (sigmoid or softmax, per task) plus any model regularizer.
fn classification_loss<S: Scalar>(
    tape: &mut Tape<S>,
    task: Task,
    logits: Var,
    labels: &[usize],
    extra: Option<Var>,
) -> Result<Var> {
    let ce = match task {
        Task::Binary => {
            let targets: Vec<S> = labels.iter().map(|&y| S::of(y as f64)).collect();
            tape.sigmoid_ce(logits, &targets)?
        }
        Task::Multiclass(_) => tape.softmax_ce(logits, labels)?,
    };
    match extra {
        Some(r) => tape.add(ce, r),
        None => Ok(ce),
    }
}

fn logits_to_probs<S: Scalar>(task: Task, logits: &[S], batch: usize) -> Vec<f64> {
    match task {
        Task::Binary => {
            let mut probs = Vec::with_capacity(batch * 2);
            for &z in logits {
                let p = 1.0 / (1.0 + (-z.as_f64()).exp());
                probs.push(1.0 - p);
                probs.push(p);
            }
            probs
        }
        Task::Multiclass(c) => {
            let mut probs = Vec::with_capacity(batch * c);
            for row in logits.chunks(c) {
                let max = row
                    .iter()
                    .map(|v| v.as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
                let s: f64 = exps.iter().sum();
                probs.extend(exps.into_iter().map(|e| e / s));
            }
            probs
        }
    }
}

/// The surface the training harness drives. Parameter order is fixed and
/// identical between [`TrainModel::params`] and the graph's parameter vars.
pub trait TrainModel<S: Scalar> {
    fn task(&self) -> Task;
    fn params(&self) -> Vec<&ParamTensor<S>>;
    fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>>;

    /// Records one batch's loss graph; returns the scalar loss and parameter
    /// vars aligned with `params()`.
    fn batch_loss(
        &self,
        tape: &mut Tape<S>,
        x: &[S],
        batch: usize,
        labels: &[usize],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)>;

    /// Class-probability rows (`batch × class_count`), inference mode.
    fn predict_probs(&self, x: &[S], batch: usize) -> Result<Vec<f64>>;
}

impl<S: Scalar> TrainModel<S> for DnfNet<S> {
    fn task(&self) -> Task {
        self.spec.task
    }

    fn params(&self) -> Vec<&ParamTensor<S>> {
        let fs = self.spec.ablation.feature_selection;
        let mut out = Vec::new();
        for block in &self.blocks {
            out.push(&block.params.w);
            out.push(&block.params.b);
            if fs {
                out.push(&block.mask.m_t);
                out.push(&block.mask.alpha);
            }
        }
        if let Some(d) = &self.dense_gates {
            out.extend([&d.w2, &d.b2, &d.w3, &d.b3]);
        }
        if let Some(l) = &self.loc {
            out.extend([&l.mu, &l.sigma_diag, &l.tau]);
        }
        out.extend([&self.head_w, &self.head_b]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        let fs = self.spec.ablation.feature_selection;
        let mut out: Vec<&mut ParamTensor<S>> = Vec::new();
        for block in &mut self.blocks {
            out.push(&mut block.params.w);
            out.push(&mut block.params.b);
            if fs {
                out.push(&mut block.mask.m_t);
                out.push(&mut block.mask.alpha);
            }
        }
        if let Some(d) = &mut self.dense_gates {
            out.push(&mut d.w2);
            out.push(&mut d.b2);
            out.push(&mut d.w3);
            out.push(&mut d.b3);
        }
        if let Some(l) = &mut self.loc {
            out.push(&mut l.mu);
            out.push(&mut l.sigma_diag);
            out.push(&mut l.tau);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<S>,
        x: &[S],
        batch: usize,
        labels: &[usize],
        _training: bool,
        _rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let x_var = tape.constant(vec![batch, self.spec.d], x.to_vec());
        let (logits, reg, pv) = self.build(tape, x_var)?;
        let loss = classification_loss(tape, self.spec.task, logits, labels, reg)?;
        Ok((loss, pv))
    }

    fn predict_probs(&self, x: &[S], batch: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let x_var = tape.constant(vec![batch, self.spec.d], x.to_vec());
        let (logits, _, _) = self.build(&mut tape, x_var)?;
        Ok(logits_to_probs(self.spec.task, tape.value(logits), batch))
    }
}

/// Width layout of the FCN blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WidthScheme {
    Constant,
    Halving,
}

/// The FCN baseline: Dense-ReLU-Dropout blocks with L2 regularization and a
/// linear output layer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FcnSpec {
    pub depth: usize,
    pub width: usize,
    pub width_scheme: WidthScheme,
    pub dropout: f64,
    pub l2: f64,
    pub initial_lr: f64,
}

impl FcnSpec {
    /// Widths of the hidden blocks under the configured scheme.
    pub fn block_widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| match self.width_scheme {
                WidthScheme::Constant => self.width,
                WidthScheme::Halving => (self.width as f64 / 2f64.powi(i as i32)).ceil() as usize,
            })
            .map(|w| w.max(1))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Fcn<S> {
    pub spec: FcnSpec,
    pub d: usize,
    pub task: Task,
    blocks: Vec<(ParamTensor<S>, ParamTensor<S>)>,
    head_w: ParamTensor<S>,
    head_b: ParamTensor<S>,
}

impl<S: Scalar> Fcn<S> {
    pub fn init(spec: FcnSpec, d: usize, task: Task, rng: &mut ChaCha8Rng) -> Self {
        let widths = spec.block_widths();
        let mut blocks = Vec::with_capacity(widths.len());
        let mut prev = d;
        for (i, &w) in widths.iter().enumerate() {
            blocks.push((
                ParamTensor::new(
                    format!("fcn{i}.w"),
                    vec![prev, w],
                    uniform_init(rng, prev * w, prev, w),
                ),
                ParamTensor::new(format!("fcn{i}.b"), vec![w], vec![S::zero(); w]),
            ));
            prev = w;
        }
        let out = task.out_dim();
        Fcn {
            spec,
            d,
            task,
            head_w: ParamTensor::new(
                "fcn.head.w",
                vec![prev, out],
                uniform_init(rng, prev * out, prev, out),
            ),
            head_b: ParamTensor::new("fcn.head.b", vec![out], vec![S::zero(); out]),
            blocks,
        }
    }

    /// Builds the stacked blocks on top of an already-recorded input var.
    fn build_from(
        &self,
        tape: &mut Tape<S>,
        mut h: Var,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Option<Var>, Vec<Var>)> {
        let mut pv = Vec::new();
        let mut l2_terms = Vec::new();
        for (w, b) in &self.blocks {
            let wv = tape.param(w);
            let bv = tape.param(b);
            pv.push(wv);
            pv.push(bv);
            let a = tape.matmul(h, wv)?;
            let a = tape.row_add(a, bv)?;
            let a = tape.relu(a);
            h = if training && self.spec.dropout > 0.0 {
                tape.dropout(a, self.spec.dropout, rng)
            } else {
                a
            };
            if self.spec.l2 > 0.0 {
                let sq = tape.mul(wv, wv)?;
                l2_terms.push(tape.sum_all(sq));
            }
        }
        let hw = tape.param(&self.head_w);
        let hb = tape.param(&self.head_b);
        pv.extend([hw, hb]);
        let logits = tape.matmul(h, hw)?;
        let logits = tape.row_add(logits, hb)?;
        let penalty = if l2_terms.is_empty() {
            None
        } else {
            let mut acc = l2_terms[0];
            for &t in &l2_terms[1..] {
                acc = tape.add(acc, t)?;
            }
            Some(tape.mul_const(acc, S::of(self.spec.l2)))
        };
        Ok((logits, penalty, pv))
    }
}

impl<S: Scalar> TrainModel<S> for Fcn<S> {
    fn task(&self) -> Task {
        self.task
    }

    fn params(&self) -> Vec<&ParamTensor<S>> {
        let mut out = Vec::new();
        for (w, b) in &self.blocks {
            out.push(w);
            out.push(b);
        }
        out.extend([&self.head_w, &self.head_b]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        let mut out: Vec<&mut ParamTensor<S>> = Vec::new();
        for (w, b) in &mut self.blocks {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<S>,
        x: &[S],
        batch: usize,
        labels: &[usize],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let x_var = tape.constant(vec![batch, self.d], x.to_vec());
        let (logits, penalty, pv) = self.build_from(tape, x_var, training, rng)?;
        let loss = classification_loss(tape, self.task, logits, labels, penalty)?;
        Ok((loss, pv))
    }

    fn predict_probs(&self, x: &[S], batch: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0); // unused in inference mode
        let x_var = tape.constant(vec![batch, self.d], x.to_vec());
        let (logits, _, _) = self.build_from(&mut tape, x_var, false, &mut rng)?;
        Ok(logits_to_probs(self.task, tape.value(logits), batch))
    }
}

/// Input-mask regime of the synthetic feature-selection comparison.
#[derive(Clone, Debug)]
pub enum MaskMode<S> {
    /// No selection; the input passes through unchanged.
    None,
    /// Fixed 0/1 oracle mask built from the known relevant features.
    Oracle(Vec<u8>),
    /// The learned straight-through mask with `m_s` fixed to all-ones.
    Learned(MaskPair<S>),
}

impl<S> MaskMode<S> {
    pub fn name(&self) -> &'static str {
        match self {
            MaskMode::None => "no-selection",
            MaskMode::Oracle(_) => "oracle",
            MaskMode::Learned(_) => "learned",
        }
    }
}

/// An FCN whose input is multiplied elementwise by a feature mask.
#[derive(Clone, Debug)]
pub struct MaskedFcn<S> {
    pub fcn: Fcn<S>,
    pub mode: MaskMode<S>,
}

impl<S: Scalar> MaskedFcn<S> {
    pub fn new(fcn: Fcn<S>, mode: MaskMode<S>) -> Self {
        MaskedFcn { fcn, mode }
    }

    pub fn learned_mask(&self) -> Option<&MaskPair<S>> {
        match &self.mode {
            MaskMode::Learned(m) => Some(m),
            _ => None,
        }
    }
}

impl<S: Scalar> TrainModel<S> for MaskedFcn<S> {
    fn task(&self) -> Task {
        self.fcn.task
    }

    fn params(&self) -> Vec<&ParamTensor<S>> {
        let mut out = Vec::new();
        if let MaskMode::Learned(m) = &self.mode {
            out.push(&m.m_t);
            out.push(&m.alpha);
        }
        out.extend(self.fcn.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<S>> {
        let mut out: Vec<&mut ParamTensor<S>> = Vec::new();
        if let MaskMode::Learned(m) = &mut self.mode {
            out.push(&mut m.m_t);
            out.push(&mut m.alpha);
        }
        out.extend(self.fcn.params_mut());
        out
    }

    fn batch_loss(
        &self,
        tape: &mut Tape<S>,
        x: &[S],
        batch: usize,
        labels: &[usize],
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let x_var = tape.constant(vec![batch, self.fcn.d], x.to_vec());
        let mut pv = Vec::new();
        let (masked, reg) = match &self.mode {
            MaskMode::None => (x_var, None),
            MaskMode::Oracle(mask) => {
                let mv = tape.constant(
                    vec![mask.len()],
                    mask.iter().map(|&b| S::of(f64::from(b))).collect(),
                );
                (tape.row_mul(x_var, mv)?, None)
            }
            MaskMode::Learned(m) => {
                let mt = tape.param(&m.m_t);
                let alpha = tape.param(&m.alpha);
                pv.push(mt);
                pv.push(alpha);
                let eff = effective_mask(tape, m, mt)?;
                let reg = regularizer(tape, m, mt, alpha)?;
                (tape.row_mul(x_var, eff)?, Some(reg))
            }
        };
        let (logits, penalty, fcn_pv) = self.fcn.build_from(tape, masked, training, rng)?;
        pv.extend(fcn_pv);
        let extra = match (reg, penalty) {
            (Some(r), Some(p)) => Some(tape.add(r, p)?),
            (Some(r), None) => Some(r),
            (None, p) => p,
        };
        let loss = classification_loss(tape, self.fcn.task, logits, labels, extra)?;
        Ok((loss, pv))
    }

    fn predict_probs(&self, x: &[S], batch: usize) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x_var = tape.constant(vec![batch, self.fcn.d], x.to_vec());
        let masked = match &self.mode {
            MaskMode::None => x_var,
            MaskMode::Oracle(mask) => {
                let mv = tape.constant(
                    vec![mask.len()],
                    mask.iter().map(|&b| S::of(f64::from(b))).collect(),
                );
                tape.row_mul(x_var, mv)?
            }
            MaskMode::Learned(m) => {
                let mt = tape.param(&m.m_t);
                let eff = effective_mask(&mut tape, m, mt)?;
                tape.row_mul(x_var, eff)?
            }
        };
        let (logits, _, _) = self.fcn.build_from(&mut tape, masked, false, &mut rng)?;
        Ok(logits_to_probs(self.fcn.task, tape.value(logits), batch))
    }
}

// ---- checkpoints -----------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"DNFCKPT\x01";

/// RNG snapshot stored inside checkpoints so a restored run continues the
/// exact stream.
#[derive(Clone, Debug, PartialEq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

fn write_params<W: Write>(out: &mut W, params: &[&ParamTensor<f64>]) -> Result<()> {
    out.write_u32::<LittleEndian>(params.len() as u32)?;
    for p in params {
        let name = p.name.as_bytes();
        out.write_u32::<LittleEndian>(name.len() as u32)?;
        out.write_all(name)?;
        out.write_u32::<LittleEndian>(p.shape.len() as u32)?;
        for &s in &p.shape {
            out.write_u64::<LittleEndian>(s as u64)?;
        }
        for &v in &p.data {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_params<R: Read>(inp: &mut R) -> Result<Vec<ParamTensor<f64>>> {
    let count = inp.read_u32::<LittleEndian>()?;
    let mut params = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = inp.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        inp.read_exact(&mut name)?;
        let rank = inp.read_u32::<LittleEndian>()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(inp.read_u64::<LittleEndian>()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(inp.read_f64::<LittleEndian>()?);
        }
        params.push(ParamTensor::new(
            String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?,
            shape,
            data,
        ));
    }
    Ok(params)
}

/// Serializable model container: spec, parameters, mask states, RNG state.
/// Restoring yields bit-identical forward behavior. Checkpoints are always
/// 64-bit.
pub enum Checkpoint {
    DnfNet(Box<DnfNet<f64>>),
    Fcn(Box<Fcn<f64>>),
}

impl Checkpoint {
    pub fn save(&self, path: &Path, rng_state: &RngState) -> Result<()> {
        let mut out = Vec::new();
        out.write_all(CKPT_MAGIC)?;
        out.write_all(&rng_state.seed)?;
        out.write_u128::<LittleEndian>(rng_state.word_pos)?;
        match self {
            Checkpoint::DnfNet(model) => {
                out.write_u8(1)?;
                let spec = serde_json::to_vec(&model.spec)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                out.write_u32::<LittleEndian>(spec.len() as u32)?;
                out.write_all(&spec)?;
                // stochastic masks are model state, not parameters
                out.write_u32::<LittleEndian>(model.blocks.len() as u32)?;
                for block in &model.blocks {
                    out.write_u32::<LittleEndian>(block.mask.m_s.len() as u32)?;
                    out.write_all(&block.mask.m_s)?;
                }
                write_params(&mut out, &model.params())?;
            }
            Checkpoint::Fcn(model) => {
                out.write_u8(2)?;
                let header = serde_json::to_vec(&(model.spec.clone(), model.d, model.task))
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                out.write_u32::<LittleEndian>(header.len() as u32)?;
                out.write_all(&header)?;
                write_params(&mut out, &model.params())?;
            }
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Checkpoint, RngState)> {
        let bytes = std::fs::read(path)?;
        let mut inp = &bytes[..];
        let mut magic = [0u8; 8];
        inp.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic/version".into()));
        }
        let mut seed = [0u8; 32];
        inp.read_exact(&mut seed)?;
        let word_pos = inp.read_u128::<LittleEndian>()?;
        let rng_state = RngState { seed, word_pos };
        let kind = inp.read_u8()?;
        let model = match kind {
            1 => {
                let spec_len = inp.read_u32::<LittleEndian>()? as usize;
                let spec: DnfNetSpec = serde_json::from_slice(&inp[..spec_len])
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                inp = &inp[spec_len..];
                let block_count = inp.read_u32::<LittleEndian>()? as usize;
                let mut ms = Vec::with_capacity(block_count);
                for _ in 0..block_count {
                    let len = inp.read_u32::<LittleEndian>()? as usize;
                    let mut mask = vec![0u8; len];
                    inp.read_exact(&mut mask)?;
                    ms.push(mask);
                }
                let params = read_params(&mut inp)?;
                let mut rng = ChaCha8Rng::from_seed(seed);
                let mut model = DnfNet::init(spec, &mut rng)?;
                for (block, mask) in model.blocks.iter_mut().zip(ms) {
                    block.mask.m_s = mask;
                }
                restore_params(&mut model, params)?;
                Checkpoint::DnfNet(Box::new(model))
            }
            2 => {
                let header_len = inp.read_u32::<LittleEndian>()? as usize;
                let (spec, d, task): (FcnSpec, usize, Task) =
                    serde_json::from_slice(&inp[..header_len])
                        .map_err(|e| Error::Checkpoint(e.to_string()))?;
                inp = &inp[header_len..];
                let params = read_params(&mut inp)?;
                let mut rng = ChaCha8Rng::from_seed(seed);
                let mut model = Fcn::init(spec, d, task, &mut rng);
                restore_params(&mut model, params)?;
                Checkpoint::Fcn(Box::new(model))
            }
            other => return Err(Error::Checkpoint(format!("unknown model kind {other}"))),
        };
        Ok((model, rng_state))
    }
}

fn restore_params<M: TrainModel<f64>>(model: &mut M, saved: Vec<ParamTensor<f64>>) -> Result<()> {
    let mut slots = model.params_mut();
    if slots.len() != saved.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: {} saved vs {} expected",
            saved.len(),
            slots.len()
        )));
    }
    for (slot, p) in slots.iter_mut().zip(saved) {
        if slot.name != p.name || slot.shape != p.shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` does not match saved `{}`",
                slot.name, p.name
            )));
        }
        slot.data = p.data;
    }
    Ok(())
}
