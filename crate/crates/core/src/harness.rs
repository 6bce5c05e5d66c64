//! Training, evaluation and analysis exports.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::data::DataError;
use crate::gmim::{self, GlobalDiscriminator};
use crate::kv::{KvError, KvMap};
use crate::lmim::{self, LocalDiscriminator};
use crate::mi;
use crate::model::checkpoint::CheckpointError;
use crate::model::{batch_frames, one_hot, ForwardOutputs, Heads, Mode, SequenceModel, VideoSequence, FRONTEND_PREFIX};
use crate::par::{map_chunks, Exec};
use crate::tensor::{Graph, ParamStore, Real, RngStream, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("config: {0}")]
    Config(#[from] KvError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: first non-finite tensor is {tensor}")]
    NonFinite { epoch: usize, batch: usize, tensor: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Baseline,
    Lmim,
    Glmim,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::Lmim, Variant::Glmim];

    pub fn heads(self) -> Heads {
        match self {
            Variant::Baseline => Heads::default(),
            Variant::Lmim => Heads { lmim: true, gmim: false },
            Variant::Glmim => Heads { lmim: true, gmim: true },
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::Lmim => "lmim",
            Variant::Glmim => "glmim",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "lmim" => Ok(Variant::Lmim),
            "glmim" => Ok(Variant::Glmim),
            o => Err(format!("unknown variant `{o}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PhaseSchedule {
    Joint,
    /// Front-end frozen for the first `phase1_epochs`, then joint training.
    BackendThenJoint,
}

impl FromStr for PhaseSchedule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(PhaseSchedule::Joint),
            "backend-then-joint" => Ok(PhaseSchedule::BackendThenJoint),
            o => Err(format!("unknown phase schedule `{o}`")),
        }
    }
}

impl fmt::Display for PhaseSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PhaseSchedule::Joint => "joint",
            PhaseSchedule::BackendThenJoint => "backend-then-joint",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub schedule: PhaseSchedule,
    pub phase1_epochs: usize,
    /// Joint-phase epochs.
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_floor: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub eval_batch: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Return the parameters of the epoch with the best validation accuracy.
    pub select_best: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Baseline,
            schedule: PhaseSchedule::Joint,
            phase1_epochs: 0,
            epochs: 20,
            lr_start: 1e-4,
            lr_floor: 1e-5,
            patience: 3,
            batch_size: 32,
            eval_batch: 64,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            select_best: true,
            exec: Exec::Parallel,
        }
    }
}

impl TrainConfig {
    pub const KEYS: &'static [&'static str] = &[
        "variant",
        "schedule",
        "phase1_epochs",
        "epochs",
        "lr_start",
        "lr_floor",
        "patience",
        "batch_size",
        "eval_batch",
        "seed",
        "beta1",
        "beta2",
        "eps",
        "select_best",
        "exec",
    ];

    pub fn validate(&self) -> Result<(), KvError> {
        let bad = |m: &str| Err(KvError::Invalid(m.into()));
        if !(self.lr_floor > 0.0 && self.lr_floor <= self.lr_start) {
            return bad("need 0 < lr_floor <= lr_start");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if self.batch_size < 2 || self.eval_batch == 0 {
            return bad("batch_size must be >= 2 and eval_batch >= 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("moment coefficients must lie in [0, 1) and eps > 0");
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("variant", self.variant);
        m.set("schedule", self.schedule);
        m.set("phase1_epochs", self.phase1_epochs);
        m.set("epochs", self.epochs);
        m.set("lr_start", self.lr_start);
        m.set("lr_floor", self.lr_floor);
        m.set("patience", self.patience);
        m.set("batch_size", self.batch_size);
        m.set("eval_batch", self.eval_batch);
        m.set("seed", self.seed);
        m.set("beta1", self.beta1);
        m.set("beta2", self.beta2);
        m.set("eps", self.eps);
        m.set("select_best", self.select_best);
        m.set(
            "exec",
            match self.exec {
                Exec::Sequential => "sequential",
                Exec::Parallel => "parallel",
            },
        );
        m
    }

    pub fn from_kv(m: &KvMap, base: &TrainConfig) -> Result<Self, KvError> {
        m.check_keys(Self::KEYS)?;
        let mut c = base.clone();
        m.apply("variant", &mut c.variant)?;
        m.apply("schedule", &mut c.schedule)?;
        m.apply("phase1_epochs", &mut c.phase1_epochs)?;
        m.apply("epochs", &mut c.epochs)?;
        m.apply("lr_start", &mut c.lr_start)?;
        m.apply("lr_floor", &mut c.lr_floor)?;
        m.apply("patience", &mut c.patience)?;
        m.apply("batch_size", &mut c.batch_size)?;
        m.apply("eval_batch", &mut c.eval_batch)?;
        m.apply("seed", &mut c.seed)?;
        m.apply("beta1", &mut c.beta1)?;
        m.apply("beta2", &mut c.beta2)?;
        m.apply("eps", &mut c.eps)?;
        m.apply("select_best", &mut c.select_best)?;
        m.apply("exec", &mut c.exec)?;
        c.validate()?;
        Ok(c)
    }
}

/// Scalar loss terms of one step (or an average over steps).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    pub l_lmim: f64,
    pub l_gmim: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(cross_entropy: f64, l_lmim: f64, l_gmim: f64) -> Self {
        Self {
            cross_entropy,
            l_lmim,
            l_gmim,
            total: cross_entropy - l_lmim - l_gmim,
        }
    }

    fn add(&mut self, o: &LossBreakdown) {
        self.cross_entropy += o.cross_entropy;
        self.l_lmim += o.l_lmim;
        self.l_gmim += o.l_gmim;
        self.total += o.total;
    }

    fn scaled(&self, k: f64) -> Self {
        Self {
            cross_entropy: self.cross_entropy * k,
            l_lmim: self.l_lmim * k,
            l_gmim: self.l_gmim * k,
            total: self.total * k,
        }
    }
}

/// Which mutual-information terms enter the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Terms {
    pub lmim: bool,
    pub gmim: bool,
}

impl Terms {
    pub fn for_variant(v: Variant) -> Self {
        Terms {
            lmim: v != Variant::Baseline,
            gmim: v == Variant::Glmim,
        }
    }
}

pub struct LossVars {
    pub cross_entropy: Var,
    pub l_lmim: Option<Var>,
    pub l_gmim: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<F: Real>(&self, g: &Graph<F>) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item().to_f64_lossy());
        LossBreakdown::new(v(Some(self.cross_entropy)), v(self.l_lmim), v(self.l_gmim))
    }
}

/// `-mean_i Σ_c Y_ic log softmax(logits)_ic`.
pub fn cross_entropy<F: Real>(g: &mut Graph<F>, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
    let classes = g.shape(logits)[1];
    let ls = g.log_softmax(logits);
    let y = g.input(one_hot(labels, classes));
    let picked = g.mul(ls, y)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / labels.len() as f64))
}

fn shuffled_labels(labels: &[usize], rng: &mut RngStream) -> Result<Vec<usize>, TensorError> {
    let k = mi::draw_offset(labels.len(), rng).map_err(|e| TensorError::Domain {
        op: "unpaired_sampling",
        detail: e.to_string(),
    })?;
    Ok(mi::cyclic_permutation(labels.len(), k).into_iter().map(|j| labels[j]).collect())
}

/// `L_LMIM` over every frame and cell of the final feature maps; one label
/// permutation per batch, shared by all time steps.
pub fn lmim_term<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    maps: Var,
    labels: &[usize],
    classes: usize,
    rng: &mut RngStream,
) -> Result<Var, TensorError> {
    let s = g.shape(maps).to_vec();
    let frames = s[0] / labels.len();
    let rows = |l: &[usize]| l.iter().flat_map(|&y| std::iter::repeat(y).take(frames)).collect::<Vec<_>>();
    let unpaired = shuffled_labels(labels, rng)?;
    let yp = g.input(lmim::broadcast_labels_nhwc(&rows(labels), classes, s[1], s[2]));
    let yu = g.input(lmim::broadcast_labels_nhwc(&rows(&unpaired), classes, s[1], s[2]));
    let d = LocalDiscriminator::default();
    let sp = lmim::lmim_scores(g, store, maps, yp, &d)?;
    let su = lmim::lmim_scores(g, store, maps, yu, &d)?;
    lmim::lmim_objective(g, sp, su)
}

/// `L_GMIM` between the pooled representation `O` and the labels.
pub fn gmim_term<F: Real>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    repr: Var,
    labels: &[usize],
    classes: usize,
    rng: &mut RngStream,
) -> Result<Var, TensorError> {
    let unpaired = shuffled_labels(labels, rng)?;
    let yp = g.input(one_hot(labels, classes));
    let yu = g.input(one_hot(&unpaired, classes));
    let d = GlobalDiscriminator::default();
    let sp = gmim::gmim_scores(g, store, repr, yp, &d)?;
    let su = gmim::gmim_scores(g, store, repr, yu, &d)?;
    gmim::gmim_objective(g, sp, su)
}

/// `total = CE - L_LMIM - L_GMIM` with absent terms contributing zero.
pub fn total_loss<F: Real>(
    g: &mut Graph<F>,
    model: &SequenceModel<F>,
    out: &ForwardOutputs,
    labels: &[usize],
    terms: Terms,
    rng: &mut RngStream,
) -> Result<LossVars, TensorError> {
    let classes = model.config.classes;
    let ce = cross_entropy(g, out.logits, labels)?;
    let mut total = ce;
    let l_lmim = if terms.lmim {
        let l = lmim_term(g, &model.params, out.feature_maps, labels, classes, rng)?;
        total = g.sub(total, l)?;
        Some(l)
    } else {
        None
    };
    let l_gmim = if terms.gmim {
        let l = gmim_term(g, &model.params, out.repr, labels, classes, rng)?;
        total = g.sub(total, l)?;
        Some(l)
    } else {
        None
    };
    g.set_label(total, "total_loss");
    Ok(LossVars {
        cross_entropy: ce,
        l_lmim,
        l_gmim,
        total,
    })
}

/// Builds the graph of one training step: forward in training mode and the total loss.
pub fn batch_loss<F: Real>(
    model: &SequenceModel<F>,
    batch: &[&VideoSequence],
    terms: Terms,
    rng: &RngStream,
) -> Result<(Graph<F>, LossVars, ForwardOutputs), TensorError> {
    let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
    let mut g = Graph::new();
    let x = g.input(batch_frames(batch)?);
    let mut mode = Mode::Train(rng.derive(1));
    let out = model.forward(&mut g, x, &mut mode)?;
    let loss = total_loss(&mut g, model, &out, &labels, terms, &mut rng.derive(2))?;
    Ok((g, loss, out))
}

/// Adam with bias correction; frozen parameters are skipped entirely.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    steps: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.steps
    }

    pub fn step<F: Real>(&mut self, store: &mut ParamStore<F>, lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (i, p) in store.iter_mut().enumerate() {
            if self.m.len() <= i {
                self.m.push(vec![0.0; p.value.len()]);
                self.v.push(vec![0.0; p.value.len()]);
            }
            if p.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                let g = g.to_f64_lossy();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let update = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w = F::from_f64_lossy(w.to_f64_lossy() - update);
            }
        }
    }
}

/// Plateau decay: ×0.1 (floored) once the best accuracy of the last
/// `patience` epochs fails to beat the best before them.
pub fn lr_schedule(history: &[f64], lr: f64, cfg: &TrainConfig) -> f64 {
    let p = cfg.patience;
    if history.len() <= p {
        return lr;
    }
    let (before, recent) = history.split_at(history.len() - p);
    let best_before = before.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let best_recent = recent.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if best_recent > best_before {
        lr
    } else {
        (lr * 0.1).max(cfg.lr_floor)
    }
}

/// Per-class accuracy; `None` for classes absent from the evaluated set.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAccuracy {
    pub overall: f64,
    pub per_class: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl ClassAccuracy {
    pub fn from_predictions(predictions: &[usize], labels: &[usize], classes: usize) -> Self {
        let mut counts = vec![0usize; classes];
        let mut correct = vec![0usize; classes];
        for (&p, &y) in predictions.iter().zip(labels) {
            counts[y] += 1;
            correct[y] += usize::from(p == y);
        }
        let total: usize = counts.iter().sum();
        let hits: usize = correct.iter().sum();
        Self {
            overall: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
            per_class: counts
                .iter()
                .zip(&correct)
                .map(|(&n, &c)| (n > 0).then(|| c as f64 / n as f64))
                .collect(),
            counts,
        }
    }

    /// Mean accuracy over `classes`, skipping absent ones.
    pub fn mean_over(&self, classes: &[usize]) -> Option<f64> {
        let v: Vec<f64> = classes.iter().filter_map(|&c| self.per_class.get(c).copied().flatten()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub phase: usize,
    pub split: String,
    pub accuracy: ClassAccuracy,
    /// Training-split loss averages; `None` for evaluation splits.
    pub loss: Option<LossBreakdown>,
    pub lr: f64,
    pub seconds: f64,
}

pub fn metrics_header(classes: usize) -> String {
    let mut h = String::from("epoch,phase,split,accuracy,cross_entropy,l_lmim,l_gmim,total,lr");
    for c in 0..classes {
        h.push_str(&format!(",class_{c}"));
    }
    h
}

impl MetricsRecord {
    /// CSV row matching [`metrics_header`]. Wall-clock time is deliberately omitted.
    pub fn csv_row(&self) -> String {
        let na = || "NA".to_string();
        let loss = self.loss.map_or_else(
            || vec![na(), na(), na(), na()],
            |l| vec![l.cross_entropy, l.l_lmim, l.l_gmim, l.total].iter().map(|v| format!("{v:.9}")).collect(),
        );
        let mut row = format!(
            "{},{},{},{:.9},{},{:e}",
            self.epoch,
            self.phase,
            self.split,
            self.accuracy.overall,
            loss.join(","),
            self.lr
        );
        for a in &self.accuracy.per_class {
            row.push(',');
            row.push_str(&a.map_or_else(na, |v| format!("{v:.9}")));
        }
        row
    }
}

/// Serialized writer flushing after every record.
pub struct MetricsWriter<W: Write> {
    out: W,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(mut out: W, classes: usize) -> std::io::Result<Self> {
        writeln!(out, "{}", metrics_header(classes))?;
        out.flush()?;
        Ok(Self { out })
    }

    pub fn write(&mut self, r: &MetricsRecord) -> std::io::Result<()> {
        writeln!(self.out, "{}", r.csv_row())?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Evaluation-mode outputs per sequence, in input order.
#[derive(Clone, Debug, Default)]
pub struct EvalOutput {
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    pub probabilities: Vec<Vec<f32>>,
    pub cross_entropy: f64,
    /// Final representations `O`.
    pub repr: Vec<Vec<f32>>,
    /// Frame weights `β`, when the weight head is present.
    pub beta: Vec<Vec<f32>>,
}

impl EvalOutput {
    pub fn accuracy(&self, classes: usize) -> ClassAccuracy {
        ClassAccuracy::from_predictions(&self.predictions, &self.labels, classes)
    }
}

fn rows(t: &Tensor<f32>) -> Vec<Vec<f32>> {
    let w = t.len() / t.shape()[0];
    t.data().chunks(w).map(<[f32]>::to_vec).collect()
}

/// Forward passes in evaluation mode over read-only parameters; batches may
/// run concurrently. Training-only discriminators are ignored.
pub fn evaluate(model: &SequenceModel<f32>, seqs: &[VideoSequence], batch: usize, exec: Exec) -> Result<EvalOutput, TensorError> {
    let inference = model.for_inference();
    let classes = model.config.classes;
    let chunks = map_chunks(exec, seqs.len(), batch, |range| -> Result<EvalOutput, TensorError> {
        let refs: Vec<&VideoSequence> = seqs[range].iter().collect();
        let labels: Vec<usize> = refs.iter().map(|s| s.label).collect();
        let mut g = Graph::new();
        let x = g.input(batch_frames(&refs)?);
        let out = inference.forward(&mut g, x, &mut Mode::Eval)?;
        let ce = cross_entropy(&mut g, out.logits, &labels)?;
        let probs = crate::model::classify(&mut g, out.logits);
        let probabilities = rows(g.value(probs));
        let predictions = probabilities
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect();
        debug_assert!(probabilities.iter().all(|p| p.len() == classes));
        Ok(EvalOutput {
            predictions,
            cross_entropy: g.value(ce).item() as f64 * labels.len() as f64,
            labels,
            probabilities,
            repr: rows(g.value(out.repr)),
            beta: out.beta.map(|b| rows(g.value(b))).unwrap_or_default(),
        })
    });
    let mut all = EvalOutput::default();
    for c in chunks {
        let c = c?;
        all.predictions.extend(c.predictions);
        all.labels.extend(c.labels);
        all.probabilities.extend(c.probabilities);
        all.cross_entropy += c.cross_entropy;
        all.repr.extend(c.repr);
        all.beta.extend(c.beta);
    }
    all.cross_entropy /= seqs.len().max(1) as f64;
    Ok(all)
}

pub struct TrainOutcome {
    pub model: SequenceModel<f32>,
    /// Epoch whose parameters `model` holds.
    pub epoch: usize,
    pub metrics: Vec<MetricsRecord>,
    pub final_lr: f64,
}

/// Splits used while training: `val` drives the schedule, `test` is only reported.
pub struct TrainData<'a> {
    pub train: &'a [VideoSequence],
    pub val: &'a [VideoSequence],
    pub test: Option<&'a [VideoSequence]>,
}

/// Runs the configured phases on `model`, adding the variant's heads if missing.
pub fn train(
    cfg: &TrainConfig,
    mut model: SequenceModel<f32>,
    data: &TrainData<'_>,
    mut on_record: impl FnMut(&MetricsRecord) -> std::io::Result<()>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let classes = model.config.classes;
    if let Some(s) = data.train.iter().chain(data.val).find(|s| s.label >= classes) {
        return Err(TrainError::Invalid(format!("label {} outside [0, {classes})", s.label)));
    }
    if data.train.len() < 2 {
        return Err(TrainError::Invalid("training split needs at least 2 sequences".into()));
    }
    let root = RngStream::new(cfg.seed, 0x7472_6169);
    model.add_heads(cfg.variant.heads(), &mut root.derive(0))?;
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.eps);
    let mut lr = cfg.lr_start;
    let mut history = Vec::new();
    let mut metrics = Vec::new();
    let phases: Vec<(usize, usize)> = match cfg.schedule {
        PhaseSchedule::Joint => vec![(2, cfg.epochs)],
        PhaseSchedule::BackendThenJoint => vec![(1, cfg.phase1_epochs), (2, cfg.epochs)],
    };
    let mut epoch = 0;
    let mut best: Option<(f64, usize, ParamStore<f32>)> = None;
    for (phase, epochs) in phases {
        let frozen = phase == 1;
        model.params.set_frozen(FRONTEND_PREFIX, frozen);
        let terms = Terms {
            lmim: cfg.variant != Variant::Baseline && !frozen,
            gmim: cfg.variant == Variant::Glmim,
        };
        for _ in 0..epochs {
            epoch += 1;
            let clock = Instant::now();
            let erng = root.derive(1000 + epoch as u64);
            let mut order: Vec<usize> = (0..data.train.len()).collect();
            erng.derive(0).shuffle(&mut order);
            let mut sum = LossBreakdown::default();
            let mut steps = 0usize;
            let mut predictions = Vec::with_capacity(order.len());
            let mut labels = Vec::with_capacity(order.len());
            for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                if idx.len() < 2 {
                    continue;
                }
                let batch: Vec<&VideoSequence> = idx.iter().map(|&i| &data.train[i]).collect();
                let (g, loss, out) = batch_loss(&model, &batch, terms, &erng.derive(1 + b as u64))?;
                let breakdown = loss.breakdown(&g);
                if !breakdown.total.is_finite() {
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch: b,
                        tensor: g.first_non_finite().unwrap_or_else(|| "total_loss".into()),
                    });
                }
                let grads = g.backward(loss.total)?;
                model.params.zero_grad();
                model.params.accumulate(&grads);
                adam.step(&mut model.params, lr);
                sum.add(&breakdown);
                steps += 1;
                let logits = g.value(out.logits);
                for (row, s) in logits.data().chunks(classes).zip(&batch) {
                    let arg = row.iter().enumerate().fold(0, |a, (i, &v)| if v > row[a] { i } else { a });
                    predictions.push(arg);
                    labels.push(s.label);
                }
            }
            let train_rec = MetricsRecord {
                epoch,
                phase,
                split: "train".into(),
                accuracy: ClassAccuracy::from_predictions(&predictions, &labels, classes),
                loss: Some(sum.scaled(1.0 / steps.max(1) as f64)),
                lr,
                seconds: clock.elapsed().as_secs_f64(),
            };
            let val = evaluate(&model, data.val, cfg.eval_batch, cfg.exec)?.accuracy(classes);
            history.push(val.overall);
            if cfg.select_best && best.as_ref().map_or(true, |b| val.overall > b.0) {
                best = Some((val.overall, epoch, model.params.clone()));
            }
            let mut records = vec![
                train_rec,
                MetricsRecord {
                    epoch,
                    phase,
                    split: "val".into(),
                    accuracy: val,
                    loss: None,
                    lr,
                    seconds: clock.elapsed().as_secs_f64(),
                },
            ];
            if let Some(test) = data.test {
                records.push(MetricsRecord {
                    epoch,
                    phase,
                    split: "test".into(),
                    accuracy: evaluate(&model, test, cfg.eval_batch, cfg.exec)?.accuracy(classes),
                    loss: None,
                    lr,
                    seconds: clock.elapsed().as_secs_f64(),
                });
            }
            for r in records {
                on_record(&r)?;
                metrics.push(r);
            }
            lr = lr_schedule(&history, lr, cfg);
        }
    }
    if let Some((_, e, params)) = best {
        model.params = params;
        epoch = e;
    }
    model.params.set_frozen(FRONTEND_PREFIX, false);
    Ok(TrainOutcome {
        model,
        epoch,
        metrics,
        final_lr: lr,
    })
}

/// Accuracy difference `to - from` averaged over each confusable pair's two classes.
pub fn pair_deltas(from: &ClassAccuracy, to: &ClassAccuracy, pairs: &[(usize, usize)]) -> Vec<((usize, usize), Option<f64>)> {
    pairs
        .iter()
        .map(|&(a, b)| {
            let d = match (from.mean_over(&[a, b]), to.mean_over(&[a, b])) {
                (Some(x), Some(y)) => Some(y - x),
                _ => None,
            };
            ((a, b), d)
        })
        .collect()
}

/// Per-class table as CSV (`class,count,accuracy`), `NA` for absent classes.
pub fn per_class_csv(acc: &ClassAccuracy) -> String {
    let mut s = String::from("class,count,accuracy\n");
    for (c, (a, n)) in acc.per_class.iter().zip(&acc.counts).enumerate() {
        let a = a.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"));
        s.push_str(&format!("{c},{n},{a}\n"));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct BetaRow {
    pub label: usize,
    pub window: Option<(usize, usize)>,
    pub beta: Vec<f32>,
}

impl BetaRow {
    /// Whether mean β inside the window is at least `factor` times the mean outside.
    pub fn localized(&self, factor: f64) -> bool {
        let Some((a, b)) = self.window else { return false };
        let inside: f64 = self.beta[a..b].iter().map(|&v| v as f64).sum::<f64>() / (b - a) as f64;
        let out: Vec<f64> = self
            .beta
            .iter()
            .enumerate()
            .filter(|(i, _)| *i < a || *i >= b)
            .map(|(_, &v)| v as f64)
            .collect();
        if out.is_empty() {
            return inside > 0.0;
        }
        let outside = out.iter().sum::<f64>() / out.len() as f64;
        inside > 0.0 && inside >= factor * outside
    }
}

pub fn export_beta(model: &SequenceModel<f32>, seqs: &[VideoSequence], batch: usize, exec: Exec) -> Result<Vec<BetaRow>, TrainError> {
    if !model.has_weight_head() {
        return Err(TrainError::Invalid("checkpoint has no frame-weight head (not a glmim model)".into()));
    }
    let out = evaluate(model, seqs, batch, exec)?;
    Ok(seqs
        .iter()
        .zip(out.beta)
        .map(|(s, beta)| BetaRow {
            label: s.label,
            window: s.window,
            beta,
        })
        .collect())
}

/// Columns `label,start,end,beta_0..beta_{T-1}`; a missing window is written as `0,0`.
pub fn beta_csv(rows: &[BetaRow]) -> String {
    let t = rows.first().map_or(0, |r| r.beta.len());
    let mut s = String::from("label,start,end");
    for i in 0..t {
        s.push_str(&format!(",beta_{i}"));
    }
    s.push('\n');
    for r in rows {
        let (a, b) = r.window.unwrap_or((0, 0));
        s.push_str(&format!("{},{a},{b}", r.label));
        for v in &r.beta {
            s.push_str(&format!(",{v:.6}"));
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// `(x, y, class)` per input vector.
    pub points: Vec<(f64, f64, usize)>,
    /// Variance captured by the first two components, descending.
    pub component_variance: [f64; 2],
}

/// Centers the vectors and projects them onto the two leading eigenvectors of their covariance.
pub fn pca_2d(vectors: &[Vec<f32>], labels: &[usize]) -> Result<PcaResult, TrainError> {
    let n = vectors.len();
    if n < 3 {
        return Err(TrainError::Invalid(format!("PCA needs at least 3 samples, got {n}")));
    }
    let d = vectors[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| vectors[i][j] as f64);
    let mean = x.row_mean();
    let xc = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = (xc.transpose() * &xc) / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let comp = |k: usize| order.get(k).map(|&i| eig.eigenvectors.column(i).clone_owned());
    let (c1, c2) = (comp(0).unwrap(), comp(1));
    let p1 = &xc * c1;
    let p2 = c2.map_or_else(|| nalgebra::DVector::zeros(n), |c| &xc * c);
    let var = |p: &nalgebra::DVector<f64>| p.iter().map(|v| v * v).sum::<f64>() / (n - 1) as f64;
    Ok(PcaResult {
        points: (0..n).map(|i| (p1[i], p2[i], labels[i])).collect(),
        component_variance: [var(&p1), var(&p2)],
    })
}

pub fn pca_csv(p: &PcaResult) -> String {
    let mut s = String::from("x,y,class\n");
    for (x, y, c) in &p.points {
        s.push_str(&format!("{x:.6},{y:.6},{c}\n"));
    }
    s
}

/// Between-class over within-class variance, each normalized by its degrees of freedom.
pub fn variance_ratio(vectors: &[Vec<f32>], labels: &[usize]) -> Result<f64, TrainError> {
    let n = vectors.len();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let k = classes.len();
    if k < 2 || n <= k {
        return Err(TrainError::Invalid("variance ratio needs >= 2 classes and more samples than classes".into()));
    }
    let d = vectors[0].len();
    let centroid = |sel: &dyn Fn(usize) -> bool| {
        let mut c = vec![0.0f64; d];
        let mut m = 0usize;
        for (v, &y) in vectors.iter().zip(labels) {
            if sel(y) {
                m += 1;
                c.iter_mut().zip(v).for_each(|(a, &b)| *a += b as f64);
            }
        }
        c.iter_mut().for_each(|a| *a /= m as f64);
        (c, m)
    };
    let (mu, _) = centroid(&|_| true);
    let dist2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut between = 0.0;
    let mut within = 0.0;
    for &c in &classes {
        let (mc, m) = centroid(&|y| y == c);
        between += m as f64 * dist2(&mc, &mu);
        for (v, _) in vectors.iter().zip(labels).filter(|(_, &y)| y == c) {
            let v: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            within += dist2(&v, &mc);
        }
    }
    Ok((between / (k - 1) as f64) / (within / (n - k) as f64))
}

/// Picks `classes` distinct classes and the first `per_class` sequences of each.
pub fn select_subset(seqs: &[VideoSequence], total_classes: usize, classes: usize, per_class: usize, seed: u64) -> Vec<VideoSequence> {
    let mut pool: Vec<usize> = (0..total_classes).collect();
    RngStream::new(seed, 0x7063_6173).shuffle(&mut pool);
    let chosen = &pool[..classes.min(total_classes)];
    let mut out = Vec::new();
    for &c in chosen {
        out.extend(seqs.iter().filter(|s| s.label == c).take(per_class).cloned());
    }
    out
}

/// Protocol for the baseline / +LMIM / +GLMIM comparison.
#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub model: crate::model::ModelConfig,
    /// Baseline and lmim protocol (variant and schedule are overridden).
    pub train: TrainConfig,
    /// Frozen-front-end epochs of the glmim stage.
    pub glmim_phase1_epochs: usize,
    /// Joint epochs of the glmim stage.
    pub glmim_epochs: usize,
    pub seeds: Vec<u64>,
}

impl AblationConfig {
    /// Keys of the `ablate.` section.
    pub const KEYS: &'static [&'static str] = &["glmim_phase1_epochs", "glmim_epochs"];

    /// Builds the protocol from a layered map with `model.`, `train.` and `ablate.` sections.
    pub fn from_kv(m: &KvMap, seeds: Vec<u64>) -> Result<Self, KvError> {
        let model = crate::model::ModelConfig::from_kv(&m.section("model."), &crate::model::ModelConfig::desk())?;
        let train = TrainConfig::from_kv(&m.section("train."), &TrainConfig::default())?;
        let ab = m.section("ablate.");
        ab.check_keys(Self::KEYS)?;
        Ok(Self {
            model,
            glmim_phase1_epochs: ab.get("glmim_phase1_epochs")?.unwrap_or(3),
            glmim_epochs: ab.get("glmim_epochs")?.unwrap_or(train.epochs / 2),
            train,
            seeds,
        })
    }
}

pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub test: ClassAccuracy,
    pub model: SequenceModel<f32>,
    pub metrics: Vec<MetricsRecord>,
}

pub struct AblationReport {
    pub runs: Vec<AblationRun>,
}

impl AblationReport {
    pub fn runs_of(&self, v: Variant) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.variant == v)
    }

    pub fn mean_accuracy(&self, v: Variant) -> f64 {
        let a: Vec<f64> = self.runs_of(v).map(|r| r.test.overall).collect();
        a.iter().sum::<f64>() / a.len().max(1) as f64
    }

    /// Mean over seeds and `classes` of the per-class accuracy change `from -> to`.
    pub fn mean_delta(&self, from: Variant, to: Variant, classes: &[usize]) -> Option<f64> {
        let mut v = Vec::new();
        for a in self.runs_of(from) {
            if let Some(b) = self.runs_of(to).find(|r| r.seed == a.seed) {
                if let (Some(x), Some(y)) = (a.test.mean_over(classes), b.test.mean_over(classes)) {
                    v.push(y - x);
                }
            }
        }
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("variant,seed,test_accuracy\n");
        for r in &self.runs {
            s.push_str(&format!("{},{},{:.6}\n", r.variant, r.seed, r.test.overall));
        }
        s
    }
}

/// For every seed: baseline and lmim from scratch under the same protocol,
/// then glmim initialized from that seed's lmim model with the phased schedule.
pub fn run_ablation(
    cfg: &AblationConfig,
    data: &TrainData<'_>,
    test: &[VideoSequence],
    mut log: impl FnMut(&str),
) -> Result<AblationReport, TrainError> {
    let mut runs = Vec::new();
    let classes = cfg.model.classes;
    for &seed in &cfg.seeds {
        let mut lmim_model = None;
        for variant in Variant::ALL {
            let clock = Instant::now();
            let (tc, init) = match variant {
                Variant::Glmim => {
                    let tc = TrainConfig {
                        variant,
                        schedule: PhaseSchedule::BackendThenJoint,
                        phase1_epochs: cfg.glmim_phase1_epochs,
                        epochs: cfg.glmim_epochs,
                        seed: seed.wrapping_add(0x676c),
                        ..cfg.train.clone()
                    };
                    let init: SequenceModel<f32> = lmim_model.take().expect("lmim runs before glmim");
                    (tc, init)
                }
                _ => {
                    let tc = TrainConfig {
                        variant,
                        schedule: PhaseSchedule::Joint,
                        seed,
                        ..cfg.train.clone()
                    };
                    (tc, SequenceModel::new(cfg.model.clone(), Heads::default(), seed)?)
                }
            };
            let outcome = train(&tc, init, data, |_| Ok(()))?;
            let acc = evaluate(&outcome.model, test, cfg.train.eval_batch, cfg.train.exec)?.accuracy(classes);
            log(&format!(
                "seed {seed} {variant}: test accuracy {:.4} ({:.1}s)",
                acc.overall,
                clock.elapsed().as_secs_f64()
            ));
            if variant == Variant::Lmim {
                lmim_model = Some(outcome.model.clone());
            }
            runs.push(AblationRun {
                variant,
                seed,
                test: acc,
                model: outcome.model,
                metrics: outcome.metrics,
            });
        }
    }
    Ok(AblationReport { runs })
}
