//! Mini-batch training with Adam, embedding dropout, dev-set model selection
//! and early stopping, plus binary checkpoints.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evalmetrics::{evaluate, CandidateScope, Group, Metric};
use crate::model::{KamgModel, LabelContext, ModelConfig};
use crate::numerics::{AdamConfig, AdamState, Matrix, ParamStore, Rng, Tape};
use crate::pipeline::{EncodedDoc, PreparedData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability of zeroing an embedding entry during training.
    pub dropout: f64,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// K of the dev-set R@K used for model selection.
    pub dev_k: usize,
    /// Rescale gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.001,
            dropout: 0.2,
            patience: 5,
            seed: 0,
            dev_k: 10,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.dev_k == 0 {
            return Err(Error::Config("dev_k must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("bad gradient clip {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub dev_metric: f64,
    /// Wall time; not serialized.
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the selected model.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn best_dev_metric(&self) -> Option<f64> {
        self.best_epoch.map(|i| self.epochs[i].dev_metric)
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.epochs {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }
}

/// Shuffles `0..n` with `rng` and chunks it; the last batch may be short.
pub fn make_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Scores every label for each document in inference mode.
pub fn score_documents(
    model: &KamgModel,
    ctx: &LabelContext,
    data: &PreparedData,
    docs: &[EncodedDoc],
) -> Result<Vec<Vec<f64>>> {
    model.predict_many(ctx, &data.embeddings, docs.iter().map(|d| d.tokens.as_slice()))
}

/// Overall R@K on `docs`; documents without gold labels are skipped.
pub fn overall_recall(
    model: &KamgModel,
    ctx: &LabelContext,
    data: &PreparedData,
    docs: &[EncodedDoc],
    k: usize,
) -> Result<f64> {
    let scores = score_documents(model, ctx, data, docs)?;
    let gold: Vec<Vec<usize>> = docs.iter().map(|d| d.labels.clone()).collect();
    let report = evaluate(&scores, &gold, &data.buckets, &[k], CandidateScope::WithinBucket)?;
    Ok(report.get(Group::Overall, Metric::Recall, k).unwrap_or(0.0))
}

pub struct TrainOutcome {
    pub model: KamgModel,
    pub context: LabelContext,
    pub history: TrainHistory,
}

/// Trains a fresh model and returns the parameters of the best dev epoch.
pub fn train(data: &PreparedData, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with(data, model_config, config, |_| {})
}

/// [`train`] with a callback invoked after each epoch.
pub fn train_with<F>(
    data: &PreparedData,
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord),
{
    config.validate()?;
    for d in &data.train {
        if let Some(&l) = d.labels.iter().find(|&&l| data.catalog.is_unseen(l)) {
            return Err(Error::Contract(format!(
                "training document {:?} carries unseen label {}",
                d.id,
                data.catalog.label(l).code
            )));
        }
    }
    if data.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    if config.epochs > 0 && data.dev.is_empty() {
        return Err(Error::Input("dev split is empty".into()));
    }

    let root = Rng::new(config.seed);
    let mut model = KamgModel::new(model_config.clone(), &mut root.fork(0))?;
    let ctx = LabelContext::new(model_config, data.label_embeddings.clone(), &data.graphs)?;
    let mut shuffle_rng = root.fork(1);
    let mut dropout_rng = root.fork(2);
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: config.learning_rate,
            ..AdamConfig::default()
        },
        model.params(),
    );
    let keep = 1.0 - config.dropout;

    let mut history = TrainHistory::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut stale = 0;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, batch) in make_batches(data.train.len(), config.batch_size, &mut shuffle_rng)
            .into_iter()
            .enumerate()
        {
            let mut tape = Tape::new();
            let docs = batch
                .iter()
                .map(|&i| (data.train[i].tokens.as_slice(), data.train[i].labels.as_slice()));
            let loss = model.batch_loss(
                &mut tape,
                &ctx,
                &data.embeddings,
                docs,
                Some((keep, &mut dropout_rng)),
            )?;
            let value = tape.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss became {value} at epoch {epoch}, batch {b}"
                )));
            }
            let mut grads = tape.backward(loss, model.params())?;
            if !grads.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at epoch {epoch}, batch {b}"
                )));
            }
            if let Some(clip) = config.grad_clip {
                let norm = grads.global_norm();
                if norm > clip {
                    grads.scale(clip / norm);
                }
            }
            adam.step(model.params_mut(), &grads)?;
            loss_sum += value;
            batches += 1;
        }

        let dev_metric = overall_recall(&model, &ctx, data, &data.dev, config.dev_k)?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / batches as f64,
            dev_metric,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.epochs.push(record);

        if best.as_ref().map_or(true, |(b, _)| dev_metric > *b) {
            best = Some((dev_metric, model.params().clone()));
            history.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }

    if let Some((_, params)) = best {
        model.set_params(params)?;
    }
    Ok(TrainOutcome {
        model,
        context: ctx,
        history,
    })
}

const MAGIC: &[u8; 8] = b"KAMGCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    vocab_hash: String,
    graph_hashes: BTreeMap<String, String>,
    params: Vec<ParamShape>,
}

/// A saved model: configuration, parameters, and fingerprints of the
/// vocabulary and label graphs it was trained against.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub vocab_hash: String,
    pub graph_hashes: BTreeMap<String, String>,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Captures `model` with fingerprints of the inputs in `data` it depends on.
    pub fn capture(model: &KamgModel, data: &PreparedData) -> Self {
        Checkpoint {
            model: model.config().clone(),
            vocab_hash: data.vocab.fingerprint(),
            graph_hashes: graph_hashes(model.config(), data),
            params: model.params().clone(),
        }
    }

    /// Layout: magic, version (u32 LE), header length (u64 LE), JSON header,
    /// parameters as f64 LE in registration order, SHA-256 of all of the above.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            model: self.model.clone(),
            vocab_hash: self.vocab_hash.clone(),
            graph_hashes: self.graph_hashes.clone(),
            params: self
                .params
                .iter()
                .map(|(_, n, m)| ParamShape {
                    name: n.to_string(),
                    rows: m.rows(),
                    cols: m.cols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, m) in self.params.iter() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let integrity = |m: &str| Error::Integrity(m.to_string());
        if bytes.len() < MAGIC.len() + 4 + 8 + 32 {
            return Err(integrity("checkpoint truncated"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if &bytes[..8] != MAGIC {
            return Err(integrity("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Integrity(format!(
                "checkpoint version {version}, expected {VERSION}"
            )));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(integrity("checkpoint checksum mismatch (truncated or corrupted)"));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| integrity("header length out of range"))?;
        let header: CheckpointHeader = serde_json::from_slice(&body[20..header_end])
            .map_err(|e| Error::Integrity(format!("bad checkpoint header: {e}")))?;
        let mut params = ParamStore::new();
        let mut at = header_end;
        for shape in &header.params {
            let n = shape.rows * shape.cols;
            let end = at + n * 8;
            if end > body.len() {
                return Err(integrity("parameter data truncated"));
            }
            let data = body[at..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.add(shape.name.clone(), Matrix::from_vec(shape.rows, shape.cols, data)?)?;
            at = end;
        }
        if at != body.len() {
            return Err(integrity("trailing bytes after parameters"));
        }
        Ok(Checkpoint {
            model: header.model,
            vocab_hash: header.vocab_hash,
            graph_hashes: header.graph_hashes,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::corpus::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Checks this checkpoint against the run it is being loaded into.
    pub fn validate(&self, expected: &ModelConfig, data: &PreparedData) -> Result<()> {
        if &self.model != expected {
            return Err(Error::Config(format!(
                "checkpoint model {} does not match requested {}",
                self.model.tag(),
                expected.tag()
            )));
        }
        if self.vocab_hash != data.vocab.fingerprint() {
            return Err(Error::Integrity("vocabulary hash mismatch".into()));
        }
        if self.graph_hashes != graph_hashes(&self.model, data) {
            return Err(Error::Integrity("label graph hash mismatch".into()));
        }
        Ok(())
    }

    pub fn into_model(self) -> Result<KamgModel> {
        KamgModel::from_params(self.model, self.params)
    }
}

fn graph_hashes(config: &ModelConfig, data: &PreparedData) -> BTreeMap<String, String> {
    config
        .graphs
        .iter()
        .filter_map(|&k| data.graph(k))
        .map(|g| (g.kind().to_string(), g.fingerprint()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_sizes() {
        let b = make_batches(10, 4, &mut Rng::new(0));
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn singleton_batches_are_seeded() {
        let a = make_batches(6, 1, &mut Rng::new(5));
        let b = make_batches(6, 1, &mut Rng::new(5));
        assert_eq!(a, b);
        assert!(a.iter().all(|x| x.len() == 1));
        assert_ne!(a, make_batches(6, 1, &mut Rng::new(6)));
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { dropout: 1.0, ..Default::default() },
            TrainConfig { patience: 0, ..Default::default() },
            TrainConfig { grad_clip: Some(0.0), ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
