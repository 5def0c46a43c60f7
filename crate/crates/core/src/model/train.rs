use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use super::network::{attack_probability, build_model, GatModel, GraphBatch, Mode};
use super::{ArchConfig, ModelError, Result, Selection, SplitMode, TrainConfig};
use crate::eval::{confusion, metrics, verdict, DEFAULT_THRESHOLD};
use crate::graph::WindowGraph;
use crate::nn::{hard_loss, kd_loss};
use crate::tensor::{no_grad, Tensor};

const SPLIT_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const DROPOUT_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Teacher,
    /// Student on hard labels only.
    Warmup,
    /// Student on the mixed distillation loss.
    Distill,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Teacher => "teacher",
            Stage::Warmup => "warmup",
            Stage::Distill => "distill",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.records.iter().find(|r| r.epoch == e))
    }

    /// CSV body `epoch,stage,train_loss,val_loss,val_acc,val_f1`; every line
    /// of `preamble` is emitted first as a `# ` comment.
    pub fn to_csv(&self, preamble: &str) -> String {
        let mut s = String::new();
        for line in preamble.lines() {
            let _ = writeln!(s, "# {line}");
        }
        s.push_str("epoch,stage,train_loss,val_loss,val_acc,val_f1\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{},{:.10},{:.10},{:.6},{:.6}",
                r.epoch,
                r.stage.as_str(),
                r.train_loss,
                r.val_loss,
                r.val_acc,
                r.val_f1
            );
        }
        s
    }
}

/// Indices of the training and validation graphs, each ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

pub fn split_indices(labels: &[u8], val_fraction: f64, mode: SplitMode, seed: u64) -> Split {
    let n = labels.len();
    let mut val = Vec::new();
    match mode {
        SplitMode::Chronological => {
            let k = ((n as f64 * val_fraction).round() as usize).min(n);
            val.extend(n - k..n);
        }
        SplitMode::Stratified => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(SPLIT_STREAM);
            for class in [0u8, 1] {
                let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
                idx.shuffle(&mut rng);
                let mut k = (idx.len() as f64 * val_fraction).round() as usize;
                if idx.len() >= 2 {
                    k = k.clamp(1, idx.len() - 1);
                }
                val.extend_from_slice(&idx[..k.min(idx.len())]);
            }
            val.sort_unstable();
        }
    }
    let mut is_val = vec![false; n];
    val.iter().for_each(|&i| is_val[i] = true);
    Split { train: (0..n).filter(|&i| !is_val[i]).collect(), val }
}

/// Supervised training of a fresh `arch` model on hard labels. Returns the
/// parameters of the best validation epoch.
pub fn train_teacher(arch: ArchConfig, graphs: &[WindowGraph], cfg: &TrainConfig) -> Result<(GatModel, History)> {
    let mut model = build_model(arch, cfg.seed)?;
    let history = fit(&mut model, graphs, cfg, None)?;
    Ok((model, history))
}

/// Two-stage student training: hard labels for `warmup_epochs`, then the
/// mixed distillation loss against the frozen teacher's logits.
pub fn distill_student(
    teacher: &GatModel,
    arch: ArchConfig,
    graphs: &[WindowGraph],
    cfg: &TrainConfig,
) -> Result<(GatModel, History)> {
    let mut model = build_model(arch, cfg.seed)?;
    let history = fit(&mut model, graphs, cfg, Some(teacher))?;
    Ok((model, history))
}

struct ValResult {
    loss: f64,
    acc: f64,
    f1: f64,
}

fn validate(model: &GatModel, graphs: &[&WindowGraph], cfg: &TrainConfig) -> Result<ValResult> {
    let logits = model.predict_logits(graphs, cfg.batch_size)?;
    let labels: Vec<u8> = graphs.iter().map(|g| g.label).collect();
    let mut loss_sum = 0.0;
    for (chunk, ys) in logits.chunks(cfg.batch_size).zip(labels.chunks(cfg.batch_size)) {
        let t = Tensor::constant(chunk.len(), 2, chunk.iter().flatten().copied().collect())?;
        loss_sum += hard_loss(&t, ys, cfg.focal_gamma())?.item() * chunk.len() as f64;
    }
    let preds: Vec<u8> = logits.iter().map(|&l| verdict(attack_probability(l), DEFAULT_THRESHOLD) as u8).collect();
    let m = confusion(&preds, &labels)
        .and_then(|c| metrics(&c))
        .map_err(|e| ModelError::EmptyDataset(e.to_string()))?;
    Ok(ValResult { loss: loss_sum / graphs.len() as f64, acc: m.accuracy, f1: m.f1 })
}

fn fit(model: &mut GatModel, graphs: &[WindowGraph], cfg: &TrainConfig, teacher: Option<&GatModel>) -> Result<History> {
    cfg.validate()?;
    if graphs.is_empty() {
        return Err(ModelError::EmptyDataset("no graphs to train on".into()));
    }
    let labels: Vec<u8> = graphs.iter().map(|g| g.label).collect();
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(crate::nn::NnError::InvalidLabel(bad).into());
    }
    let split = split_indices(&labels, cfg.val_fraction, cfg.split, cfg.seed);
    for class in [0u8, 1] {
        if !split.train.iter().any(|&i| labels[i] == class) {
            return Err(ModelError::SingleClassDataset(1 - class));
        }
    }
    if split.val.is_empty() {
        return Err(ModelError::EmptyDataset("validation split is empty".into()));
    }
    let mut history = History::default();
    model.set_mode(Mode::Eval);
    if cfg.epochs == 0 {
        return Ok(history);
    }
    let val_graphs: Vec<&WindowGraph> = split.val.iter().map(|&i| &graphs[i]).collect();

    // The teacher is frozen and deterministic in eval mode, so its logits are
    // computed once per graph rather than once per batch.
    let teacher_logits = match teacher {
        Some(t) => {
            let before = validate(t, &val_graphs, cfg)?;
            let majority = labels.iter().filter(|&&y| y == 0).count().max(labels.iter().filter(|&&y| y == 1).count());
            if before.acc <= majority as f64 / labels.len() as f64 {
                log::warn!("teacher validation accuracy {:.4} is no better than the majority class", before.acc);
            }
            let refs: Vec<&WindowGraph> = graphs.iter().collect();
            Some(t.predict_logits(&refs, cfg.batch_size)?)
        }
        None => None,
    };

    let params = model.parameters();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(SHUFFLE_STREAM);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(DROPOUT_STREAM);
    let loss_cfg = cfg.loss();

    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    let mut order = split.train.clone();
    for epoch in 1..=cfg.epochs {
        let stage = match teacher {
            None => Stage::Teacher,
            Some(_) if epoch <= cfg.warmup_epochs => Stage::Warmup,
            Some(_) => Stage::Distill,
        };
        order.shuffle(&mut shuffle_rng);
        model.set_mode(Mode::Train);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let members: Vec<&WindowGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
            let batch = GraphBatch::new(&members)?;
            let logits = model.forward_batch(&batch, &mut dropout_rng)?;
            let loss = match (stage, &teacher_logits) {
                (Stage::Distill, Some(all)) => {
                    let t = chunk.iter().flat_map(|&i| all[i]).collect();
                    let t = Tensor::constant(chunk.len(), 2, t)?;
                    kd_loss(&logits, &t, &batch.labels, &loss_cfg)?.total
                }
                _ => hard_loss(&logits, &batch.labels, cfg.focal_gamma())?,
            };
            params.iter().for_each(Tensor::zero_grad);
            loss.backward()?;
            let mut grads: Vec<Vec<f64>> =
                params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()])).collect();
            if let Some(max) = cfg.clip_norm {
                clip_grad_norm(&mut grads, max);
            }
            adam_step(&params, &grads, &mut state, &adam)?;
            loss_sum += loss.item() * chunk.len() as f64;
        }
        params.iter().for_each(Tensor::zero_grad);
        model.set_mode(Mode::Eval);
        let val = no_grad(|| validate(model, &val_graphs, cfg))?;
        history.records.push(EpochRecord {
            epoch,
            stage,
            train_loss: loss_sum / order.len() as f64,
            val_loss: val.loss,
            val_acc: val.acc,
            val_f1: val.f1,
        });
        let score = match cfg.select_by {
            Selection::Accuracy => val.acc,
            Selection::F1 => val.f1,
        };
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, model.snapshot()));
            history.best_epoch = Some(epoch);
        }
        log::info!(
            "epoch {epoch:>3} {:<7} train_loss {:.5} val_loss {:.5} val_acc {:.4} val_f1 {:.4}",
            stage.as_str(),
            loss_sum / order.len() as f64,
            val.loss,
            val.acc,
            val.f1
        );
    }
    if let Some((_, values)) = best {
        model.restore(&values);
    }
    Ok(history)
}
