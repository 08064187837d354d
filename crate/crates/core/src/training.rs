//! Losses, metrics, the finite-difference gradient oracle, full-graph training
//! and checkpoints.

use std::collections::BTreeMap;
use std::io::Write;
use std::rc::Rc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{MetricKind, NeighborsMatch, NodeDataset};
use crate::error::{Error, Result};
use crate::model::{
    Activation, ForwardOptions, GraphContext, MapPredictor, Mode, Model, ModelConfig, ModelKind, Normalization,
};
pub use crate::autodiff::{Gradients, Tape};
pub use crate::params::{AdamConfig, ParamId, ParameterStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "csnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Mean negative log-softmax over the masked rows.
pub fn loss_cross_entropy(logits: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let loss = tape.cross_entropy(l, Rc::new(labels.to_vec()), Rc::new(mask.to_vec()))?;
    Ok(tape.value(loss).data[0])
}

/// Central differences of `f` with respect to every parameter coordinate.
pub fn finite_diff_grad(
    mut f: impl FnMut(&ParameterStore) -> Result<f64>,
    store: &ParameterStore,
    step: f64,
) -> Result<Vec<Tensor>> {
    if step <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for id in store.ids() {
        let (r, c) = store.value(id).shape();
        let mut g = Tensor::zeros(r, c);
        for k in 0..r * c {
            let orig = probe.value(id).data[k];
            probe.value_mut(id).data[k] = orig + step;
            let plus = f(&probe)?;
            probe.value_mut(id).data[k] = orig - step;
            let minus = f(&probe)?;
            probe.value_mut(id).data[k] = orig;
            g.data[k] = (plus - minus) / (2.0 * step);
        }
        out.push(g);
    }
    Ok(out)
}

/// Accuracy of the row-wise argmax, or ROC AUC of `score[1] − score[0]`
/// (ties count one half).
pub fn metric(kind: MetricKind, scores: &Tensor, labels: &[usize], mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if labels.len() != mask.len() {
        return Err(Error::Shape(format!("{} labels for {} masked rows", labels.len(), mask.len())));
    }
    if let Some(&bad) = mask.iter().find(|&&r| r >= scores.rows) {
        return Err(Error::NodeOutOfRange { index: bad, num_nodes: scores.rows });
    }
    match kind {
        MetricKind::Accuracy => {
            let correct = mask
                .iter()
                .zip(labels)
                .filter(|&(&r, &y)| argmax(scores.row(r)) == y)
                .count();
            Ok(correct as f64 / mask.len() as f64)
        }
        MetricKind::RocAuc => {
            if scores.cols != 2 {
                return Err(Error::Shape(format!("ROC AUC needs two score columns, got {}", scores.cols)));
            }
            let s: Vec<f64> = mask.iter().map(|&r| scores.get(r, 1) - scores.get(r, 0)).collect();
            roc_auc(&s, labels)
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Probability that a random positive outranks a random negative.
pub fn roc_auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::Config("ROC AUC needs binary labels".into()));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && scores[order[end]] == scores[order[k]] {
            end += 1;
        }
        let avg_rank = (k + end + 1) as f64 / 2.0;
        rank_sum_pos += avg_rank * order[k..end].iter().filter(|&&i| labels[i] == 1).count() as f64;
        k = end;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Stop at the first evaluation whose train metric reaches this value.
    #[serde(default)]
    pub stop_at_train_metric: Option<f64>,
    /// Wall-clock cap in seconds, checked at evaluations. Runs that hit it
    /// are no longer reproducible.
    #[serde(default)]
    pub max_seconds: Option<f64>,
}

fn default_lr() -> f64 {
    0.01
}

fn default_eval_every() -> usize {
    1
}

impl Schedule {
    pub fn new(epochs: usize) -> Self {
        Self {
            epochs,
            lr: default_lr(),
            weight_decay: 0.0,
            seed: 0,
            eval_every: default_eval_every(),
            stop_at_train_metric: None,
            max_seconds: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        if self.max_seconds.is_some_and(|t| !(t > 0.0)) {
            return Err(Error::Config("max_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One line of the metric history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_metric: f64,
    pub val_metric: Option<f64>,
    pub test_metric: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    pub epoch: usize,
    pub params: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, epoch: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: model.config.clone(),
            epoch,
            params: model.params.to_named(),
        }
    }

    /// Rebuilds the model, checking format, version and every tensor shape.
    pub fn to_model(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Schema {
                field: "format".into(),
                message: format!("expected {CHECKPOINT_FORMAT:?}, got {:?}", self.format),
            });
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Schema {
                field: "version".into(),
                message: format!("unsupported version {}", self.version),
            });
        }
        let mut model = Model::init(self.config.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
        model.params.load_named(&self.params)?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub struct TrainOutcome {
    pub history: Vec<EvalRecord>,
    /// Parameters at the best evaluation: highest validation metric when the
    /// split has validation nodes, else highest train metric. Ties keep the
    /// earlier epoch.
    pub best: Checkpoint,
    pub best_record: EvalRecord,
    pub last: EvalRecord,
}

/// Loss and gradient of the training objective at the current parameters.
pub fn loss_and_backward(
    model: &mut Model,
    ctx: &GraphContext,
    dataset: &NodeDataset,
    train: &[usize],
    train_labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    model.params.zero_grad();
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, ctx, &dataset.features, Mode::Train(rng), &ForwardOptions::default())?;
    let loss = tape.cross_entropy(out.logits, Rc::new(train_labels.to_vec()), Rc::new(train.to_vec()))?;
    let grads = tape.backward(loss)?;
    tape.accumulate_param_grads(&grads, &mut model.params);
    Ok(tape.value(loss).data[0])
}

fn evaluate(
    model: &Model,
    ctx: &GraphContext,
    dataset: &NodeDataset,
    parts: &[(Vec<usize>, Vec<usize>); 3],
    epoch: usize,
) -> Result<EvalRecord> {
    let logits = model.predict_logits(ctx, &dataset.features)?;
    if !logits.is_finite() {
        return Err(Error::Tape(format!("non-finite logits at epoch {epoch}")));
    }
    let (train, train_labels) = &parts[0];
    let score = |(nodes, labels): &(Vec<usize>, Vec<usize>)| -> Result<Option<f64>> {
        if nodes.is_empty() {
            Ok(None)
        } else {
            metric(dataset.metric, &logits, labels, nodes).map(Some)
        }
    };
    Ok(EvalRecord {
        epoch,
        train_loss: loss_cross_entropy(&logits, train_labels, train)?,
        train_metric: metric(dataset.metric, &logits, train_labels, train)?,
        val_metric: score(&parts[1])?,
        test_metric: score(&parts[2])?,
    })
}

/// Full-graph training on split `split`. Each evaluation is handed to
/// `on_eval` as it happens.
pub fn train(
    config: &ModelConfig,
    dataset: &NodeDataset,
    split: usize,
    schedule: &Schedule,
    mut on_eval: impl FnMut(&EvalRecord) -> Result<()>,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    let config = config.clone();
    if config.input_dim != dataset.num_features() {
        return Err(Error::Config(format!(
            "input_dim {} but the dataset has {} features",
            config.input_dim,
            dataset.num_features()
        )));
    }
    if dataset.num_classes() > config.num_classes {
        return Err(Error::Config(format!(
            "num_classes {} but the dataset has {} classes",
            config.num_classes,
            dataset.num_classes()
        )));
    }
    config.validate()?;
    let s = dataset.split(split)?;
    if s.train.is_empty() {
        return Err(Error::EmptyMask);
    }
    let parts = [
        (s.train.clone(), dataset.labels_of(&s.train)?),
        (s.val.clone(), dataset.labels_of(&s.val)?),
        (s.test.clone(), dataset.labels_of(&s.test)?),
    ];
    let ctx = GraphContext::new(&dataset.graph);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut model = Model::init(config, &mut rng)?;
    let adam = schedule.adam();

    let selection = |r: &EvalRecord| r.val_metric.unwrap_or(r.train_metric);
    let first = evaluate(&model, &ctx, dataset, &parts, 0)?;
    on_eval(&first)?;
    let mut history = vec![first.clone()];
    let mut best = (Checkpoint::from_model(&model, 0), first.clone());
    let reached = |r: &EvalRecord| schedule.stop_at_train_metric.is_some_and(|t| r.train_metric >= t);
    let start = Instant::now();
    let out_of_time = || schedule.max_seconds.is_some_and(|t| start.elapsed().as_secs_f64() >= t);
    let mut stop = reached(&first);

    for epoch in 1..=schedule.epochs {
        if stop {
            break;
        }
        loss_and_backward(&mut model, &ctx, dataset, &parts[0].0, &parts[0].1, &mut rng)?;
        if !model.params.grads_finite() {
            return Err(Error::Tape(format!("non-finite gradient at epoch {epoch}")));
        }
        model.params.adam_step(&adam);
        if epoch % schedule.eval_every == 0 || epoch == schedule.epochs {
            let rec = evaluate(&model, &ctx, dataset, &parts, epoch)?;
            on_eval(&rec)?;
            if selection(&rec) > selection(&best.1) {
                best = (Checkpoint::from_model(&model, epoch), rec.clone());
            }
            stop = reached(&rec) || out_of_time();
            history.push(rec);
        }
    }
    Ok(TrainOutcome {
        last: history.last().expect("initial evaluation").clone(),
        history,
        best: best.0,
        best_record: best.1,
    })
}

/// Writes one JSON object per line.
pub fn write_jsonl(out: &mut impl Write, rec: &EvalRecord) -> Result<()> {
    serde_json::to_writer(&mut *out, rec)?;
    out.write_all(b"\n")?;
    Ok(())
}

/// Trees per depth in the NeighborsMatch sweep.
pub const NEIGHBORSMATCH_EXAMPLES: usize = 600;
/// Epoch budget of one NeighborsMatch run.
pub const NEIGHBORSMATCH_EPOCHS: usize = 2000;

/// Model and schedule of one NeighborsMatch run: `d = 2`, `depth + 1`
/// layers, 32 hidden channels, identity activation and no dropout. CSNN maps
/// come from a `(depth + 1)`-round mean-aggregation predictor on augmented
/// Laplacians. Training stops once the train accuracy reaches `stop_at`.
pub fn neighborsmatch_setup(
    nm: &NeighborsMatch,
    model: ModelKind,
    seed: u64,
    stop_at: f64,
) -> (ModelConfig, Schedule) {
    let mut c = ModelConfig::new(nm.dataset.num_features(), nm.dataset.num_classes());
    c.model = model;
    c.stalk_dim = 2;
    c.hidden_channels = 32;
    c.num_layers = nm.depth + 1;
    c.activation = Activation::Identity;
    c.map_predictor = MapPredictor::MeanAgg(nm.depth + 1);
    c.predictor_hidden = 32;
    c.layer_norm = true;
    c.normalization = Normalization::Augmented;
    let mut s = Schedule::new(NEIGHBORSMATCH_EPOCHS);
    s.lr = 0.003;
    s.seed = seed;
    s.eval_every = 10;
    s.stop_at_train_metric = Some(stop_at);
    (c, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_examples() {
        let uniform = Tensor::zeros(2, 4);
        assert!((loss_cross_entropy(&uniform, &[0, 3], &[0, 1]).unwrap() - 4f64.ln()).abs() < 1e-15);
        let sharp = Tensor::from_vec(1, 2, vec![20.0, 0.0]).unwrap();
        assert!(loss_cross_entropy(&sharp, &[0], &[0]).unwrap() < 1e-3);
        let mut partial = Tensor::zeros(2, 2);
        let base = loss_cross_entropy(&partial, &[1], &[0]).unwrap();
        partial.set(1, 0, 50.0);
        assert_eq!(loss_cross_entropy(&partial, &[1], &[0]).unwrap(), base);
        assert!(matches!(loss_cross_entropy(&partial, &[], &[]), Err(Error::EmptyMask)));
    }

    #[test]
    fn finite_difference_examples() {
        let mut s = ParameterStore::new();
        s.insert("t", Tensor::scalar(3.0), false).unwrap();
        let sq = finite_diff_grad(|p| Ok(p.get("t")?.data[0].powi(2)), &s, 1e-5).unwrap();
        assert!((sq[0].data[0] - 6.0).abs() < 1e-8);
        let lin = finite_diff_grad(|p| Ok(2.5 * p.get("t")?.data[0] - 1.0), &s, 0.5).unwrap();
        assert!((lin[0].data[0] - 2.5).abs() < 1e-12);
        assert!(finite_diff_grad(|_| Ok(0.0), &s, 0.0).is_err());
    }

    #[test]
    fn adam_examples() {
        let mut s = ParameterStore::new();
        let id = s.insert("w", Tensor::filled(1, 3, 2.0), true).unwrap();
        s.adam_step(&AdamConfig::default());
        assert_eq!(s.value(id).data, vec![2.0; 3]);
        let mut fresh = ParameterStore::new();
        let f = fresh.insert("w", Tensor::filled(1, 3, 2.0), true).unwrap();
        fresh.grad_mut(f).data.iter_mut().for_each(|g| *g = 1.0);
        let lr = 0.05;
        fresh.adam_step(&AdamConfig { lr, ..Default::default() });
        assert!((fresh.value(f).data[0] - (2.0 - lr)).abs() < 1e-6);
        s.zero_grad();
        let before = s.value(id).data[0];
        s.adam_step(&AdamConfig { lr, weight_decay: 0.1, beta1: 0.0, ..Default::default() });
        assert!(s.value(id).data[0].abs() < before.abs());
    }

    #[test]
    fn metric_examples() {
        let labels = [0, 0, 1, 1];
        let mask = [0, 1, 2, 3];
        let scores = |v: [f64; 4]| {
            let mut t = Tensor::zeros(4, 2);
            for (r, x) in v.iter().enumerate() {
                t.set(r, 1, *x);
            }
            t
        };
        let m = |v| metric(MetricKind::RocAuc, &scores(v), &labels, &mask).unwrap();
        assert_eq!(m([0.1, 0.2, 0.8, 0.9]), 1.0);
        assert_eq!(m([0.5; 4]), 0.5);
        assert_eq!(m([0.9, 0.8, 0.2, 0.1]), 0.0);
        assert!(matches!(
            metric(MetricKind::RocAuc, &scores([0.0; 4]), &[1, 1], &[0, 1]),
            Err(Error::SingleClass)
        ));
        let acc = metric(MetricKind::Accuracy, &scores([-1.0, 1.0, 1.0, 1.0]), &labels, &mask).unwrap();
        assert_eq!(acc, 0.75);
    }
}
