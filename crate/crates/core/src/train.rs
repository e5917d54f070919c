//! Run configuration, the training loop, checkpointing with optimizer state,
//! and dataset evaluation.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::{self, SegSample};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown, LossInputs, LossWeights};
use crate::metrics::ConfusionMatrix;
use crate::model::{self, peek_dtype, Checkpoint, ModelConfig, ModelParams};
use crate::optim::{adam_step, cosine_lr, AdamConfig, AdamState};
use crate::tensor::{Graph, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

/// Flat training configuration. Every key is optional; unknown keys are
/// rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_categories: usize,
    pub c_feat: usize,
    pub c_class: usize,
    pub hbis_layers: usize,
    pub encoder_widths: Vec<usize>,
    pub downsample: usize,
    pub topk_ratio: f64,
    pub topk_eps: f64,
    pub image_size: usize,
    pub lambda_hm: f64,
    pub lambda_fd: f64,
    pub fisher_eps: f64,
    pub ignore_index: Option<usize>,
    pub lr: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub precision: Precision,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        Self {
            num_categories: m.num_categories,
            c_feat: m.c_feat,
            c_class: m.c_class,
            hbis_layers: m.hbis_layers,
            encoder_widths: m.encoder_widths,
            downsample: m.downsample,
            topk_ratio: m.topk_ratio,
            topk_eps: m.topk_eps,
            image_size: m.image_size,
            lambda_hm: w.heatmap,
            lambda_fd: w.fisher,
            fisher_eps: w.fisher_eps,
            ignore_index: w.ignore_index,
            lr: 0.8e-4,
            total_steps: 300,
            batch_size: 8,
            precision: Precision::F32,
            train_data: None,
            eval_data: None,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            num_categories: self.num_categories,
            c_feat: self.c_feat,
            c_class: self.c_class,
            hbis_layers: self.hbis_layers,
            encoder_widths: self.encoder_widths.clone(),
            downsample: self.downsample,
            topk_ratio: self.topk_ratio,
            topk_eps: self.topk_eps,
            image_size: self.image_size,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            heatmap: self.lambda_hm,
            fisher: self.lambda_fd,
            fisher_eps: self.fisher_eps,
            ignore_index: self.ignore_index,
        }
    }

    /// Parses a JSON document, reporting every unknown key and every
    /// violated constraint together.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config(vec!["config must be a JSON object".into()]))?;
        let known: BTreeSet<String> = match serde_json::to_value(Self::default())? {
            Value::Object(m) => m.keys().cloned().collect(),
            _ => unreachable!("struct serializes to an object"),
        };
        let mut errs = Vec::new();
        let mut accepted = serde_json::Map::new();
        for (k, v) in obj {
            if !known.contains(k) {
                errs.push(format!("{k}: unknown key"));
                continue;
            }
            let mut probe = serde_json::Map::new();
            probe.insert(k.clone(), v.clone());
            match serde_json::from_value::<Self>(Value::Object(probe)) {
                Ok(_) => {
                    accepted.insert(k.clone(), v.clone());
                }
                Err(e) => errs.push(format!("{k}: {e}")),
            }
        }
        let cfg: Self = serde_json::from_value(Value::Object(accepted))?;
        errs.extend(cfg.violations());
        if errs.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut errs = self.model().violations();
        errs.extend(self.weights().violations());
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("lr: {} must be finite and > 0", self.lr));
        }
        if self.total_steps == 0 {
            errs.push("total_steps: must be ≥ 1".into());
        }
        if self.batch_size == 0 {
            errs.push("batch_size: must be ≥ 1".into());
        }
        if let Some(i) = self.ignore_index {
            if i > u8::MAX as usize {
                errs.push(format!("ignore_index: {i} exceeds 255"));
            }
        }
        for (key, p) in [("train_data", &self.train_data), ("eval_data", &self.eval_data)] {
            if let Some(p) = p {
                if !p.join(data::MANIFEST).is_file() {
                    errs.push(format!("{key}: no {} in {}", data::MANIFEST, p.display()));
                }
            }
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.violations();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Training log path for a checkpoint path: `<ckpt>.log.jsonl`.
pub fn log_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".log.jsonl");
    PathBuf::from(s)
}

pub struct Trainer<T> {
    pub cfg: RunConfig,
    pub params: ModelParams<Tensor<T>>,
    pub adam: AdamState<T>,
    /// Completed optimizer steps.
    pub step: usize,
    /// Differentiate only the main loss; the other terms are still reported.
    pub main_only: bool,
    samples: Vec<SegSample>,
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: RunConfig, samples: Vec<SegSample>) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::invalid("train", "empty training set"));
        }
        for s in &samples {
            s.validate(cfg.num_categories.max(cfg.ignore_index.map_or(0, |i| i + 1)))?;
        }
        let params = ModelParams::init(&cfg.model(), cfg.seed)?;
        let adam = AdamState::new(&params.named().into_iter().map(|(_, t)| t).collect::<Vec<_>>());
        Ok(Self {
            cfg,
            params,
            adam,
            step: 0,
            main_only: false,
            samples,
        })
    }

    /// Sample indices of the batch used at 0-based step `step`.
    pub fn batch_indices(&self, step: usize) -> Result<Vec<usize>> {
        let n = self.samples.len();
        let per_epoch = n.div_ceil(self.cfg.batch_size);
        let epoch = (step / per_epoch) as u64;
        let mut all = data::batches(n, self.cfg.batch_size, self.cfg.seed, epoch, true)?;
        Ok(std::mem::take(&mut all[step % per_epoch]))
    }

    pub fn train_step(&mut self) -> Result<StepRecord> {
        let indices = self.batch_indices(self.step)?;
        let batch: Vec<&SegSample> = indices.iter().map(|&i| &self.samples[i]).collect();
        let (images, labels) = data::collate::<T>(&batch)?;
        let model_cfg = self.cfg.model();

        let mut g = Graph::new();
        let bound = self.params.bind(&mut g);
        let x = g.constant(images);
        let out = model::forward(&mut g, &bound, &model_cfg, x)?;
        let scores: Vec<_> = out.layers.iter().map(|l| l.scores).collect();
        let embeddings: Vec<_> = out.layers.iter().map(|l| l.embeddings).collect();
        let terms = total_loss(
            &mut g,
            LossInputs {
                logits: out.logits_full,
                probs: out.probs,
                labels: &labels,
                score_maps: &scores,
                embeddings: &embeddings,
            },
            &self.cfg.weights(),
        )?;
        let values = terms.values(&g);
        if !values.l_total.is_finite() {
            return Err(Error::invalid(
                "train",
                format!("non-finite loss at step {}", self.step + 1),
            ));
        }
        g.backward(if self.main_only { terms.main } else { terms.total })?;

        let names = bound.named();
        let grads: Vec<Tensor<T>> = names
            .iter()
            .map(|(_, &v)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        let lr = cosine_lr(self.step, self.cfg.total_steps, self.cfg.lr);
        let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
        let mut leaves = self.params.leaves_mut();
        adam_step(&mut leaves, &grad_refs, &mut self.adam, lr, AdamConfig::default())?;
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            lr,
            loss: values,
        })
    }

    /// Runs until `total_steps` (or `stop_after`, if smaller), appending one
    /// JSON line per step to `log`.
    pub fn run(
        &mut self,
        stop_after: Option<usize>,
        mut log: Option<&mut dyn std::io::Write>,
    ) -> Result<Vec<StepRecord>> {
        let end = stop_after.map_or(self.cfg.total_steps, |s| s.min(self.cfg.total_steps));
        let mut records = Vec::new();
        while self.step < end {
            let rec = self.train_step()?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&rec)?;
                writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            records.push(rec);
        }
        Ok(records)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint<T>> {
        let mut arrays: Vec<(String, Tensor<T>)> =
            self.params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let names: Vec<String> = arrays.iter().map(|(n, _)| n.clone()).collect();
        for (prefix, moments) in [(ADAM_M, &self.adam.m), (ADAM_V, &self.adam.v)] {
            for (n, t) in names.iter().zip(moments) {
                arrays.push((format!("{prefix}{n}"), t.clone()));
            }
        }
        Ok(Checkpoint {
            meta: json!({
                "model": self.cfg.model(),
                "run": self.cfg,
                "step": self.step,
                "adam_step": self.adam.step,
            }),
            arrays,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    /// Restores parameters, optimizer state and step count. The checkpoint's
    /// model configuration must equal this run's.
    pub fn resume_from(&mut self, ckpt: &Checkpoint<T>) -> Result<()> {
        let stored: ModelConfig = serde_json::from_value(ckpt.meta["model"].clone())?;
        if stored != self.cfg.model() {
            return Err(Error::Checkpoint(
                "model configuration differs from the run config".into(),
            ));
        }
        let (params, rest) = split_adam(&ckpt.arrays);
        self.params = ModelParams::from_named(&stored, &params)?;
        let names: Vec<String> = self.params.named().into_iter().map(|(n, _)| n).collect();
        let fetch = |prefix: &str| -> Result<Vec<Tensor<T>>> {
            names
                .iter()
                .map(|n| {
                    let key = format!("{prefix}{n}");
                    rest.iter()
                        .find(|(k, _)| *k == key)
                        .map(|(_, t)| t.clone())
                        .ok_or_else(|| Error::Checkpoint(format!("array '{key}' missing")))
                })
                .collect()
        };
        self.adam = AdamState {
            step: meta_u64(&ckpt.meta, "adam_step")?,
            m: fetch(ADAM_M)?,
            v: fetch(ADAM_V)?,
        };
        self.step = meta_u64(&ckpt.meta, "step")? as usize;
        Ok(())
    }
}

fn meta_u64(meta: &Value, key: &str) -> Result<u64> {
    meta[key]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint(format!("meta field '{key}' missing")))
}

type NamedArrays<T> = Vec<(String, Tensor<T>)>;

fn split_adam<T: Clone>(arrays: &[(String, Tensor<T>)]) -> (NamedArrays<T>, NamedArrays<T>) {
    arrays
        .iter()
        .cloned()
        .partition(|(n, _)| !n.starts_with(ADAM_M) && !n.starts_with(ADAM_V))
}

/// Trained parameters and the configuration they were built for.
pub struct LoadedModel<T> {
    pub config: ModelConfig,
    pub params: ModelParams<Tensor<T>>,
}

impl<T: Scalar> LoadedModel<T> {
    /// Loads a checkpoint; `config` overrides the one stored in it.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>, config: Option<ModelConfig>) -> Result<Self> {
        let config = match config {
            Some(c) => c,
            None => serde_json::from_value(ckpt.meta["model"].clone())?,
        };
        config.validate()?;
        let (params, _) = split_adam(&ckpt.arrays);
        let params = ModelParams::from_named(&config, &params)?;
        Ok(Self { config, params })
    }

    /// Probabilities `[B, N, H, W]` and per-layer sigmoid heatmaps
    /// `[B, N, H', W']`.
    pub fn infer(&self, images: Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let bound = self.params.map(&mut |t| g.constant(t.clone()));
        let x = g.constant(images);
        let out = model::forward(&mut g, &bound, &self.config, x)?;
        let heatmaps = out.layers.iter().map(|l| g.value(l.heatmap).clone()).collect();
        Ok((g.value(out.probs).clone(), heatmaps))
    }

    /// Confusion matrix of argmax predictions over a dataset.
    pub fn evaluate(&self, samples: &[SegSample], batch_size: usize, ignore: Option<usize>) -> Result<ConfusionMatrix> {
        let mut cm = ConfusionMatrix::new(self.config.num_categories);
        for idx in data::batches(samples.len(), batch_size, 0, 0, false)? {
            let batch: Vec<&SegSample> = idx.iter().map(|&i| &samples[i]).collect();
            let (images, labels) = data::collate::<T>(&batch)?;
            let (probs, _) = self.infer(images)?;
            cm.accumulate(&model::predict(&probs), &labels, ignore)?;
        }
        Ok(cm)
    }
}

/// Element type stored in a checkpoint file.
pub fn checkpoint_precision(path: impl AsRef<Path>) -> Result<Precision> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    match peek_dtype(&bytes)?.as_str() {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::Checkpoint(format!("unknown dtype {other}"))),
    }
}
