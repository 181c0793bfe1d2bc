use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::chart::ChartError;
use crate::encoders::EncoderError;
use crate::eval::EvalReport;
use crate::grounding::{GroundingError, LossBundle};
use crate::pcfg::PcfgError;
use crate::synth::PairedInstance;
use crate::tensor::{Graph, Tensor, TensorError};

use super::{
    derived_rng, evaluate, Adam, Checkpoint, Counters, EvalOptions, JointModel, Noise, Result,
    Stream, TrainConfig, TrainError, WarmStart,
};

const EPOCH_SUMS: &str = "trainer.epoch_sums";

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub epoch: u64,
    pub step: u64,
    pub loss: LossBundle,
}

/// Mean loss terms over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub steps: u64,
    pub lang: f64,
    pub vis: f64,
    pub contrastive: f64,
    pub total: f64,
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step(&'a StepRecord),
    Epoch(&'a EpochRecord),
    Eval { epoch: u64, step: u64, report: &'a EvalReport },
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: JointModel,
    pub adam: Adam,
    pub counters: Counters,
    pub warm: Option<WarmStart>,
    /// Running sums `[lang, vis, contrastive, total, steps]` of the open epoch.
    epoch_sums: [f64; 5],
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub evals: Vec<EvalReport>,
}

fn new_adam(model: &JointModel, cfg: &TrainConfig) -> Adam {
    let mut adam = Adam::new(&model.store, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
    adam.lr_scale = model
        .store
        .iter()
        .map(|(name, _)| if name.starts_with("vis.") { cfg.vis_lr_scale } else { 1.0 })
        .collect();
    adam
}

impl Trainer {
    /// Fresh model sized to `train`, with the warm start applied if configured.
    pub fn new(config: TrainConfig, vocab_size: usize, train: &[PairedInstance]) -> Result<Self> {
        let raw_dim = train
            .first()
            .and_then(|x| x.parts.first())
            .map(Vec::len)
            .ok_or_else(|| TrainError::Data("empty training set".into()))?;
        let mut model = JointModel::new(&config, vocab_size, raw_dim)?;
        let warm = if config.warm_start {
            Some(WarmStart::apply(&mut model, train, config.seed)?)
        } else {
            None
        };
        let adam = new_adam(&model, &config);
        Ok(Trainer {
            counters: Counters {
                vocab_size: vocab_size as u64,
                raw_dim: raw_dim as u64,
                ..Counters::default()
            },
            config,
            model,
            adam,
            warm,
            epoch_sums: [0.0; 5],
            steps: Vec::new(),
            epochs: Vec::new(),
            evals: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut counters = self.counters;
        counters.adam_t = self.adam.t;
        let mut arrays = Vec::new();
        for (name, t) in self.model.store.iter() {
            arrays.push((format!("param/{name}"), t.clone()));
        }
        for (k, (name, _)) in self.model.store.iter().enumerate() {
            arrays.push((format!("adam.m/{name}"), self.adam.m[k].clone()));
            arrays.push((format!("adam.v/{name}"), self.adam.v[k].clone()));
        }
        arrays.push((EPOCH_SUMS.into(), Tensor::vector(self.epoch_sums.to_vec())));
        Checkpoint {
            config: self.config.clone(),
            counters,
            arrays,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = ck.config.clone();
        let c = ck.counters;
        let mut model = JointModel::new(&config, c.vocab_size as usize, c.raw_dim as usize)?;
        let mut adam = new_adam(&model, &config);
        let fetch = |key: String, like: &Tensor| -> Result<Tensor> {
            let t = ck
                .array(&key)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing array {key}")))?;
            if t.shape() != like.shape() {
                return Err(TrainError::Checkpoint(format!(
                    "array {key} has shape {:?}, model expects {:?}",
                    t.shape(),
                    like.shape()
                )));
            }
            Ok(t.clone())
        };
        let ids: Vec<_> = model.store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let name = model.store.name(id).to_string();
            let like = model.store.get(id).clone();
            *model.store.get_mut(id) = fetch(format!("param/{name}"), &like)?;
            adam.m[k] = fetch(format!("adam.m/{name}"), &like)?;
            adam.v[k] = fetch(format!("adam.v/{name}"), &like)?;
        }
        adam.t = c.adam_t;
        let sums = fetch(EPOCH_SUMS.into(), &Tensor::zeros(&[5]))?;
        let mut epoch_sums = [0.0; 5];
        epoch_sums.copy_from_slice(sums.data());
        Ok(Trainer {
            config,
            model,
            adam,
            counters: c,
            warm: None,
            epoch_sums,
            steps: Vec::new(),
            epochs: Vec::new(),
            evals: Vec::new(),
        })
    }

    /// Batches of dataset indices for `epoch`: a seeded shuffle, the length
    /// curriculum, and a trailing single item folded into the previous batch.
    pub fn epoch_batches(&self, epoch: u64, data: &[PairedInstance]) -> Vec<Vec<usize>> {
        let cfg = &self.config;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut derived_rng(cfg.seed, Stream::Shuffle, epoch, 0));
        if cfg.length_cap > 0 && (epoch as usize) < cfg.curriculum_epochs {
            order.retain(|&i| data[i].tokens.len().max(data[i].parts.len()) <= cfg.length_cap);
        }
        let mut batches: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            let last = batches.pop().unwrap();
            batches.last_mut().unwrap().extend(last);
        }
        batches
    }

    /// One optimiser update on the given instances.
    pub fn step(&mut self, data: &[PairedInstance], idx: &[usize], out_dir: Option<&Path>) -> Result<LossBundle> {
        let cfg = &self.config;
        let batch: Vec<&PairedInstance> = idx.iter().map(|&i| &data[i]).collect();
        let noise = Noise::Sample {
            seed: cfg.seed,
            step: self.counters.step,
        };
        let g = Graph::new();
        let p = self.model.store.bind(&g);
        let result = self
            .model
            .forward(&g, &p, cfg, &batch, noise, false)
            .and_then(|out| {
                let bundle = self.model.bundle(&g, cfg, &out);
                if !bundle.total.is_finite() {
                    return Err(TrainError::Tensor(TensorError::NonFinite { op: "loss" }));
                }
                let grads = g.backward(out.total)?;
                let grads: Vec<Tensor> = p.vars().iter().map(|&v| grads.get(v)).collect();
                if grads.iter().any(|t| !t.is_finite()) {
                    return Err(TrainError::Tensor(TensorError::NonFinite { op: "gradient" }));
                }
                Ok((bundle, grads))
            });
        let (bundle, grads) = match result {
            Ok(x) => x,
            Err(e) if is_non_finite(&e) => {
                if let Some(dir) = out_dir {
                    self.checkpoint().save(&dir.join("nan_snapshot.ckpt"))?;
                }
                return Err(TrainError::NonFinite {
                    epoch: self.counters.epoch as usize,
                    step: self.counters.step,
                    ids: batch.iter().map(|x| x.id.clone()).collect(),
                });
            }
            Err(e) => return Err(e),
        };
        self.adam.step(&mut self.model.store, &grads);
        Ok(bundle)
    }

    /// Trains until `config.epochs` are done, or until `max_steps` global
    /// steps have been taken. Appends records to `out_dir/metrics.jsonl` and
    /// saves `out_dir/checkpoint.ckpt` after every epoch and on early stop.
    pub fn run(
        &mut self,
        train: &[PairedInstance],
        eval: Option<(&[PairedInstance], &EvalOptions)>,
        out_dir: Option<&Path>,
        max_steps: Option<u64>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(TrainError::Data("empty training set".into()));
        }
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
        }
        while (self.counters.epoch as usize) < self.config.epochs {
            let epoch = self.counters.epoch;
            let batches = self.epoch_batches(epoch, train);
            while (self.counters.batch as usize) < batches.len() {
                if max_steps.is_some_and(|m| self.counters.step >= m) {
                    if let Some(dir) = out_dir {
                        self.checkpoint().save(&dir.join("checkpoint.ckpt"))?;
                    }
                    return Ok(());
                }
                let idx = &batches[self.counters.batch as usize];
                let loss = self.step(train, idx, out_dir)?;
                let rec = StepRecord {
                    epoch,
                    step: self.counters.step,
                    loss,
                };
                for (s, v) in self.epoch_sums.iter_mut().zip([loss.lang, loss.vis, loss.contrastive, loss.total, 1.0]) {
                    *s += v;
                }
                self.counters.step += 1;
                self.counters.batch += 1;
                log(out_dir, &LogLine::Step(&rec))?;
                self.steps.push(rec);
            }
            let n = self.epoch_sums[4].max(1.0);
            let rec = EpochRecord {
                epoch,
                steps: self.epoch_sums[4] as u64,
                lang: self.epoch_sums[0] / n,
                vis: self.epoch_sums[1] / n,
                contrastive: self.epoch_sums[2] / n,
                total: self.epoch_sums[3] / n,
            };
            log(out_dir, &LogLine::Epoch(&rec))?;
            self.epochs.push(rec);
            self.epoch_sums = [0.0; 5];
            self.counters.epoch += 1;
            self.counters.batch = 0;
            let done = self.counters.epoch as usize;
            let cadence = self.config.eval_every;
            let due = done == self.config.epochs || (cadence > 0 && done.is_multiple_of(cadence));
            if let (Some((data, opts)), true) = (eval, due) {
                let report = evaluate(&self.model, &self.config, data, opts)?;
                log(
                    out_dir,
                    &LogLine::Eval {
                        epoch,
                        step: self.counters.step,
                        report: &report,
                    },
                )?;
                self.evals.push(report);
            }
            if let Some(dir) = out_dir {
                self.checkpoint().save(&dir.join("checkpoint.ckpt"))?;
            }
        }
        Ok(())
    }
}

/// Errors that mean the numbers blew up, wherever they surfaced.
fn is_non_finite(e: &TrainError) -> bool {
    let t = match e {
        TrainError::Tensor(t)
        | TrainError::Chart(ChartError::Tensor(t))
        | TrainError::Pcfg(PcfgError::Tensor(t))
        | TrainError::Encoder(EncoderError::Tensor(t))
        | TrainError::Grounding(GroundingError::Tensor(t)) => t,
        TrainError::Chart(ChartError::ZeroProbability) => return true,
        _ => return false,
    };
    matches!(t, TensorError::NonFinite { .. })
}

fn log(out_dir: Option<&Path>, line: &LogLine) -> Result<()> {
    if let Some(dir) = out_dir {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(dir.join("metrics.jsonl"))?;
        let text = serde_json::to_string(line).map_err(|e| TrainError::Data(e.to_string()))?;
        writeln!(f, "{text}")?;
    }
    Ok(())
}
