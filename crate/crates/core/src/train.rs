//! Run configuration, the training loop, evaluation and the ablation matrix.

use std::io::Write;
use std::path::Path;

use rand::RngCore;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::Checkpoint;
use crate::data::{build_batch, sample_snippets, DataError, Dataset, SampleMode};
use crate::eval::{map_report, thumos_grid, EvalError, GroundTruthSegment, MapReport};
use crate::inference::{localize, InferenceConfig, Proposal};
use crate::losses::{total_loss, LossBreakdown, LossInput, LossSwitches, LossWeights, VideoLabel};
use crate::model::{forward, infer, Mode, ModelConfig, Params};
use crate::{adam_step, seeded_rng, AdamConfig, AdamState, Graph, SeededRng, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("numerical failure: {0}")]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

impl TrainError {
    /// Validation problems are detected before any work is done; everything else is a
    /// runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            TrainError::Config(_)
                | TrainError::Data(DataError::Config(_))
                | TrainError::Data(DataError::Manifest(_))
                | TrainError::Data(DataError::Format { .. })
                | TrainError::Data(DataError::NonFinite { .. })
                | TrainError::Eval(_)
        )
    }
}

/// Which model parts and loss terms are active. Each Table-3 style experiment is one
/// assignment of these flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_cad: bool,
    /// `false` trains the class-aware branch without any MIL signal on its coarse T-CAS.
    pub cad_supervised: bool,
    pub use_tea: bool,
    pub use_l_supp_mil: bool,
    pub use_l_supp_coarse: bool,
    pub use_l_norm: bool,
    pub use_l_guide: bool,
    pub use_l_cas: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        experiment(10).expect("preset exists")
    }
}

/// Flag sets for experiments 1 to 10.
pub fn experiment(id: usize) -> Option<AblationFlags> {
    let none = AblationFlags {
        use_cad: false,
        cad_supervised: false,
        use_tea: false,
        use_l_supp_mil: false,
        use_l_supp_coarse: false,
        use_l_norm: false,
        use_l_guide: false,
        use_l_cas: false,
    };
    let cad = AblationFlags {
        use_cad: true,
        cad_supervised: true,
        ..none
    };
    let both = AblationFlags {
        use_tea: true,
        use_l_supp_mil: true,
        use_l_supp_coarse: true,
        ..cad
    };
    Some(match id {
        1 => none,
        2 => cad,
        3 => AblationFlags {
            cad_supervised: false,
            ..cad
        },
        4 => AblationFlags {
            use_tea: true,
            use_l_supp_mil: true,
            ..none
        },
        5 => AblationFlags {
            use_l_supp_coarse: false,
            ..both
        },
        6 => AblationFlags {
            use_l_supp_mil: false,
            ..both
        },
        7 => both,
        8 => AblationFlags {
            use_l_norm: true,
            ..both
        },
        9 => AblationFlags {
            use_l_norm: true,
            use_l_guide: true,
            ..both
        },
        10 => AblationFlags {
            use_l_norm: true,
            use_l_guide: true,
            use_l_cas: true,
            ..both
        },
        _ => return None,
    })
}

impl AblationFlags {
    pub fn validate(&self) -> Result<(), String> {
        let needs = |on: bool, what: &str, dep: bool, dep_name: &str| {
            if on && !dep {
                Err(format!("{what} requires {dep_name}"))
            } else {
                Ok(())
            }
        };
        needs(
            self.use_l_supp_mil,
            "use_l_supp_mil",
            self.use_tea,
            "use_tea",
        )?;
        needs(
            self.use_l_supp_coarse,
            "use_l_supp_coarse",
            self.use_tea,
            "use_tea",
        )?;
        needs(
            self.use_l_supp_coarse,
            "use_l_supp_coarse",
            self.use_cad,
            "use_cad",
        )?;
        needs(
            self.use_l_supp_coarse,
            "use_l_supp_coarse",
            self.cad_supervised,
            "cad_supervised",
        )?;
        needs(self.use_l_norm, "use_l_norm", self.use_tea, "use_tea")?;
        needs(self.use_l_guide, "use_l_guide", self.use_tea, "use_tea")?;
        needs(self.use_l_cas, "use_l_cas", self.use_cad, "use_cad")?;
        Ok(())
    }

    pub fn loss_switches(&self) -> LossSwitches {
        LossSwitches {
            coarse_mil: self.use_cad && self.cad_supervised && !self.use_l_supp_coarse,
            temporal_mil: self.use_tea,
            supp_final: self.use_l_supp_mil,
            supp_coarse: self.use_l_supp_coarse,
            norm: self.use_l_norm,
            guide: self.use_l_guide,
            cas: self.use_l_cas,
        }
    }
}

/// Everything a training or evaluation run needs. The branch switches in `model` are
/// overwritten by `ablation`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub inference: InferenceConfig,
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub num_pairs: usize,
    pub seed: u64,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            inference: InferenceConfig::default(),
            optimizer: AdamConfig::default(),
            epochs: 100,
            batch_size: 20,
            num_pairs: 3,
            seed: 0,
            ablation: AblationFlags::default(),
        }
    }
}

impl RunConfig {
    /// Settings for the synthetic benchmark: 50 epochs and a model sized for 64-wide
    /// features.
    pub fn synthetic() -> Self {
        RunConfig {
            model: ModelConfig {
                feature_dim: 64,
                hidden_dim: 32,
                num_classes: 4,
                snippets_per_video: 60,
                ..ModelConfig::default()
            },
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            epochs: 50,
            ..RunConfig::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    /// Applies `key=value` overrides; see [`apply_overrides`].
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self, TrainError> {
        apply_overrides(self, overrides).map_err(TrainError::Config)
    }

    /// The model config with branch switches taken from the ablation flags.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            use_cad: self.ablation.use_cad,
            use_tea: self.ablation.use_tea,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let cfg = |e: String| TrainError::Config(e);
        self.model_config()
            .validate()
            .map_err(|e| cfg(e.to_string()))?;
        self.loss.validate().map_err(|e| cfg(e.to_string()))?;
        self.inference.validate().map_err(cfg)?;
        self.ablation.validate().map_err(cfg)?;
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) || !(o.weight_decay >= 0.0) {
            return Err(cfg("optimizer lr must be > 0 and weight_decay >= 0".into()));
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(cfg("optimizer betas must lie in [0, 1) and eps > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(cfg("batch_size must be positive".into()));
        }
        if 2 * self.num_pairs > self.batch_size {
            return Err(cfg(format!(
                "{} pairs do not fit in a batch of {}",
                self.num_pairs, self.batch_size
            )));
        }
        Ok(())
    }

    /// Checks the dataset against the config and that batches can be formed.
    pub fn validate_dataset(&self, data: &Dataset) -> Result<(), TrainError> {
        if data.videos.is_empty() {
            return Err(TrainError::Config("dataset has no videos".into()));
        }
        if data.num_classes() != self.model.num_classes {
            return Err(TrainError::Config(format!(
                "dataset has {} classes, model.num_classes is {}",
                data.num_classes(),
                self.model.num_classes
            )));
        }
        let width = data.feature_dim().unwrap_or(0);
        if width != self.model.feature_dim {
            return Err(TrainError::Config(format!(
                "features are {} wide, model.feature_dim is {}",
                width, self.model.feature_dim
            )));
        }
        let labels: Vec<Vec<usize>> = data.videos.iter().map(|v| v.labels.clone()).collect();
        build_batch(&labels, self.batch_size, self.num_pairs, &mut seeded_rng(0))?;
        Ok(())
    }
}

/// Applies `key=value` overrides to any serializable config. `key` is a dotted path into
/// the JSON form; `value` is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(
    cfg: &T,
    overrides: &[String],
) -> Result<T, String> {
    let mut doc = serde_json::to_value(cfg).map_err(|e| e.to_string())?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| format!("override {:?} is not key=value", o))?;
        let value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| format!("unknown config key {:?}", key))?;
        }
        *slot = value;
    }
    serde_json::from_value(doc).map_err(|e| e.to_string())
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
}

/// Holds parameters, optimizer state and the run's random stream.
pub struct Trainer {
    pub cfg: RunConfig,
    model: ModelConfig,
    switches: LossSwitches,
    pub params: Params<f32>,
    state: AdamState<f32>,
    rng: SeededRng,
    labels: Vec<Vec<usize>>,
    targets: Vec<VideoLabel>,
    step: usize,
    epoch: usize,
}

impl Trainer {
    /// Validates everything up front. Initialization and the data stream use separate
    /// generators derived from `cfg.seed`.
    pub fn new(cfg: &RunConfig, data: &Dataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        cfg.validate_dataset(data)?;
        let model = cfg.model_config();
        let mut root = seeded_rng(cfg.seed);
        let mut init_rng = seeded_rng(root.next_u64());
        let rng = seeded_rng(root.next_u64());
        let params = Params::init(&model, &mut init_rng);
        let state = AdamState::new(cfg.optimizer, &params.tensors());
        let labels: Vec<Vec<usize>> = data.videos.iter().map(|v| v.labels.clone()).collect();
        let targets = labels
            .iter()
            .map(|l| VideoLabel::from_classes(l, model.num_classes))
            .collect::<Result<_, _>>()?;
        Ok(Trainer {
            cfg: cfg.clone(),
            switches: cfg.ablation.loss_switches(),
            model,
            params,
            state,
            rng,
            labels,
            targets,
            step: 0,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn model_config(&self) -> &ModelConfig {
        &self.model
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.model.clone(),
            epoch: Some(self.epoch),
            params: self.params.clone(),
        }
    }

    /// One optimizer step on a freshly drawn batch.
    pub fn step(&mut self, data: &Dataset) -> Result<LossRecord, TrainError> {
        let batch = build_batch(
            &self.labels,
            self.cfg.batch_size,
            self.cfg.num_pairs,
            &mut self.rng,
        )?;
        let mut g: Graph<f32> = Graph::new();
        let bound = self.params.bind(&mut g, true);
        let mut outs = Vec::with_capacity(batch.videos.len());
        for &vi in &batch.videos {
            let (x, _) = sample_snippets(
                &data.videos[vi].features,
                self.model.snippets_per_video,
                SampleMode::Train,
                &mut self.rng,
            );
            let xv = g.constant(x);
            outs.push(forward(
                &mut g,
                xv,
                &self.model,
                &bound,
                Mode::Train(&mut self.rng),
            )?);
        }
        let inputs: Vec<LossInput<'_>> = outs
            .iter()
            .zip(&batch.videos)
            .map(|(vars, &vi)| LossInput {
                vars,
                label: &self.targets[vi],
            })
            .collect();
        let (loss, breakdown) = total_loss(
            &mut g,
            &inputs,
            &batch.pairs,
            &self.cfg.loss,
            &self.switches,
        )?;
        let vars: Vec<_> = bound.vars().collect();
        let mut grads = g.backward(loss)?;
        let grads: Vec<Tensor<f32>> = vars
            .iter()
            .zip(self.params.entries())
            .map(|(&v, (_, p))| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect();
        let mut tensors = self.params.tensors();
        adam_step(&mut tensors, &grads, &mut self.state)?;
        self.params.set_tensors(tensors);
        let rec = LossRecord {
            epoch: self.epoch,
            step: self.step,
            losses: breakdown,
        };
        self.step += 1;
        Ok(rec)
    }

    /// `ceil(N / batch_size)` steps.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<Vec<LossRecord>, TrainError> {
        let steps = data.videos.len().div_ceil(self.cfg.batch_size);
        let recs = (0..steps)
            .map(|_| self.step(data))
            .collect::<Result<Vec<_>, _>>()?;
        self.epoch += 1;
        Ok(recs)
    }
}

/// Trains for `cfg.epochs` epochs in memory.
pub fn train(
    cfg: &RunConfig,
    data: &Dataset,
) -> Result<(Params<f32>, Vec<LossRecord>), TrainError> {
    let mut t = Trainer::new(cfg, data)?;
    let mut log = Vec::new();
    for _ in 0..cfg.epochs {
        log.extend(t.run_epoch(data)?);
    }
    Ok((t.params, log))
}

pub const CHECKPOINT_FILE: &str = "checkpoint.jcdc";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Trains and writes `checkpoint.jcdc` after every epoch plus `train_log.jsonl`, one JSON
/// object per step. `on_epoch` sees each finished epoch's records. On failure both files
/// are removed.
pub fn train_to_dir(
    cfg: &RunConfig,
    data: &Dataset,
    out: &Path,
    mut on_epoch: impl FnMut(usize, &[LossRecord]),
) -> Result<Checkpoint, TrainError> {
    let mut t = Trainer::new(cfg, data)?;
    std::fs::create_dir_all(out)?;
    let ck_path = out.join(CHECKPOINT_FILE);
    let log_path = out.join(LOG_FILE);
    let res = (|| -> Result<Checkpoint, TrainError> {
        let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
        for _ in 0..cfg.epochs {
            let recs = t.run_epoch(data)?;
            for r in &recs {
                serde_json::to_writer(&mut log, r).map_err(std::io::Error::from)?;
                log.write_all(b"\n")?;
            }
            on_epoch(t.epoch(), &recs);
            log.flush()?;
            t.checkpoint().save(&ck_path)?;
        }
        let ck = t.checkpoint();
        ck.save(&ck_path)?;
        Ok(ck)
    })();
    if res.is_err() {
        let _ = std::fs::remove_file(&ck_path);
        let _ = std::fs::remove_file(&log_path);
    }
    res
}

/// Proposals for every video in `data`, in manifest order.
pub fn predict(
    params: &Params<f32>,
    model: &ModelConfig,
    loss: &LossWeights,
    inference: &InferenceConfig,
    data: &Dataset,
) -> Result<Vec<Proposal>, TrainError> {
    let mut out = Vec::new();
    for v in &data.videos {
        let o = infer(&v.features, model, params)?;
        let k = loss.topk(v.features.shape()[0]);
        out.extend(localize(&v.id, &o, k, v.fps, inference));
    }
    Ok(out)
}

/// Predicts on `data` and scores the proposals against its annotated segments over
/// `iou_grid`.
pub fn evaluate(
    params: &Params<f32>,
    cfg: &RunConfig,
    data: &Dataset,
    iou_grid: &[f64],
) -> Result<(Vec<Proposal>, MapReport), TrainError> {
    let props = predict(params, &cfg.model_config(), &cfg.loss, &cfg.inference, data)?;
    let gts: Vec<GroundTruthSegment> = data.manifest.ground_truth();
    let report = map_report(&props, &gts, iou_grid)?;
    Ok((props, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub experiment: usize,
    pub seeds: Vec<u64>,
    /// AVG mAP over IoU 0.3:0.9, per seed.
    pub avg_03_09: Vec<f64>,
    /// AVG mAP over IoU 0.3:0.7, per seed.
    pub avg_03_07: Vec<f64>,
}

impl AblationRow {
    pub fn mean_03_09(&self) -> f64 {
        self.avg_03_09.iter().sum::<f64>() / self.avg_03_09.len() as f64
    }

    pub fn mean_03_07(&self) -> f64 {
        self.avg_03_07.iter().sum::<f64>() / self.avg_03_07.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, experiment: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.experiment == experiment)
    }

    /// Table sorted by experiment id, values in percent.
    pub fn to_table(&self) -> String {
        let mut s = String::from("Exp  AVG(0.3:0.9)  AVG(0.3:0.7)  per-seed AVG(0.3:0.7)\n");
        for r in &self.rows {
            let per: Vec<String> = r
                .avg_03_07
                .iter()
                .map(|v| format!("{:.1}", 100.0 * v))
                .collect();
            s.push_str(&format!(
                "{:<4} {:>12.1}  {:>12.1}  {}\n",
                r.experiment,
                100.0 * r.mean_03_09(),
                100.0 * r.mean_03_07(),
                per.join(" ")
            ));
        }
        s
    }
}

/// Trains each experiment with each seed on `train_data` and evaluates on `eval_data`.
/// `progress` is called after every run.
pub fn run_ablation(
    base: &RunConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    experiments: &[usize],
    seeds: &[u64],
    mut progress: impl FnMut(usize, u64, f64),
) -> Result<AblationReport, TrainError> {
    let mut ids = experiments.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let mut configs = Vec::with_capacity(ids.len());
    for &id in &ids {
        let flags = experiment(id)
            .ok_or_else(|| TrainError::Config(format!("unknown experiment {}", id)))?;
        let cfg = RunConfig {
            ablation: flags,
            ..base.clone()
        };
        cfg.validate()?;
        cfg.validate_dataset(train_data)?;
        configs.push(cfg);
    }
    if seeds.is_empty() {
        return Err(TrainError::Config("no seeds given".into()));
    }
    let mut rows = Vec::with_capacity(ids.len());
    for (&id, cfg) in ids.iter().zip(&configs) {
        let mut row = AblationRow {
            experiment: id,
            seeds: seeds.to_vec(),
            avg_03_09: Vec::new(),
            avg_03_07: Vec::new(),
        };
        for &seed in seeds {
            let cfg = RunConfig {
                seed,
                ..cfg.clone()
            };
            let (params, _) = train(&cfg, train_data)?;
            let (_, report) = evaluate(&params, &cfg, eval_data, &thumos_grid())?;
            let a = report.average(0.3, 0.7).unwrap_or(0.0);
            row.avg_03_09.push(report.average(0.3, 0.9).unwrap_or(0.0));
            row.avg_03_07.push(a);
            progress(id, seed, a);
        }
        rows.push(row);
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_distinct() {
        let mut seen = Vec::new();
        for id in 1..=10 {
            let f = experiment(id).unwrap();
            f.validate().unwrap();
            assert!(!seen.contains(&f));
            seen.push(f);
        }
        assert!(experiment(0).is_none() && experiment(11).is_none());
    }

    #[test]
    fn n_cad_only_drops_coarse_supervision() {
        let (a, b) = (experiment(2).unwrap(), experiment(3).unwrap());
        assert_eq!(
            AblationFlags {
                cad_supervised: true,
                ..b
            },
            a
        );
        assert!(a.loss_switches().coarse_mil);
        assert!(!b.loss_switches().coarse_mil);
    }

    #[test]
    fn overrides_apply_by_path() {
        let c = RunConfig::default()
            .with_overrides(&[
                "epochs=3".into(),
                "model.hidden_dim=8".into(),
                "ablation.use_l_cas=false".into(),
            ])
            .unwrap();
        assert_eq!(
            (c.epochs, c.model.hidden_dim, c.ablation.use_l_cas),
            (3, 8, false)
        );
        assert!(RunConfig::default()
            .with_overrides(&["nope=1".into()])
            .is_err());
        assert!(RunConfig::default()
            .with_overrides(&["epochs".into()])
            .is_err());
    }

    #[test]
    fn inconsistent_flags_rejected() {
        let f = AblationFlags {
            use_tea: false,
            ..experiment(10).unwrap()
        };
        assert!(f.validate().is_err());
    }
}
