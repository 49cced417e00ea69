//! Training steps, evaluation and the dataset-scheduled training run.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, StagePlan};
use crate::data::{self, load_dataset, random_crop, Dataset, DatasetId, StereoSample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{supervised_total, unsupervised_total, UnsupLossConfig, NUM_SCALES};
use crate::metrics::{EvalReport, ImageMetrics};
use crate::network::{Network, Prediction, SIZE_MULTIPLE};
use crate::optim::{Adam, AdamConfig};
use crate::params::{BoundParams, ParamStore};
use crate::schedule::StageMode;
use crate::tensor::Tensor;

/// Network, parameters and optimizer state.
pub struct Trainer {
    pub net: Network,
    pub params: ParamStore<f32>,
    adam: Adam<f32>,
    /// Experimental: supervised steps add `weight * unsupervised loss`.
    mixed: Option<(f64, UnsupLossConfig)>,
}

impl Trainer {
    pub fn new(net: Network, params: ParamStore<f32>) -> Result<Self> {
        net.check_params(&params)?;
        let adam = Adam::new(AdamConfig::default(), &params);
        Ok(Trainer {
            net,
            params,
            adam,
            mixed: None,
        })
    }

    pub fn reset_optimizer(&mut self) {
        self.adam.reset();
    }

    /// Mixes the photometric objective into supervised steps with the given
    /// weight; `None` trains on ground truth alone.
    pub fn set_mixed_unsupervised(&mut self, weight: Option<f64>, cfg: UnsupLossConfig) {
        self.mixed = weight.map(|w| (w, cfg));
    }

    fn supervised_graph(
        &self,
        g: &mut Graph<f32>,
        batch: &[&StereoSample],
        omega: &[f64; NUM_SCALES],
        trainable: bool,
    ) -> Result<(Var, Option<BoundParams>)> {
        let (l, r) = data::batch_inputs(batch)?;
        let (gt, valid) = data::batch_ground_truth(batch)?;
        let p = if trainable { self.params.bind(g)? } else { self.params.bind_frozen(g)? };
        let (l, r) = (g.constant(l)?, g.constant(r)?);
        let out = self.net.forward(g, &p, l, r)?;
        let mut loss = supervised_total(g, &out.pyramid.maps, &gt, &valid, omega)?;
        if let Some((w, cfg)) = &self.mixed {
            let raw_l: Vec<_> = batch.iter().map(|s| s.left.clone()).collect();
            let raw_r: Vec<_> = batch.iter().map(|s| s.right.clone()).collect();
            let il = g.constant(Tensor::stack_batch(&raw_l)?)?;
            let ir = g.constant(Tensor::stack_batch(&raw_r)?)?;
            let unsup = unsupervised_total(g, &out.pyramid.maps, il, ir, cfg)?.total;
            let unsup = g.mul_scalar(unsup, *w as f32)?;
            loss = g.add(loss, unsup)?;
        }
        Ok((loss, trainable.then_some(p)))
    }

    fn unsupervised_graph(
        &self,
        g: &mut Graph<f32>,
        batch: &[&StereoSample],
        cfg: &UnsupLossConfig,
        trainable: bool,
    ) -> Result<(Var, Option<BoundParams>)> {
        let (l, r) = data::batch_inputs(batch)?;
        let raw_l: Vec<_> = batch.iter().map(|s| s.left.clone()).collect();
        let raw_r: Vec<_> = batch.iter().map(|s| s.right.clone()).collect();
        let p = if trainable { self.params.bind(g)? } else { self.params.bind_frozen(g)? };
        let (l, r) = (g.constant(l)?, g.constant(r)?);
        let out = self.net.forward(g, &p, l, r)?;
        let il = g.constant(Tensor::stack_batch(&raw_l)?)?;
        let ir = g.constant(Tensor::stack_batch(&raw_r)?)?;
        let loss = unsupervised_total(g, &out.pyramid.maps, il, ir, cfg)?.total;
        Ok((loss, trainable.then_some(p)))
    }

    fn apply(&mut self, mut g: Graph<f32>, loss: Var, p: BoundParams, lr: f64) -> Result<f64> {
        let value = g.value(loss).item() as f64;
        g.backward(loss)?;
        let grads = self.params.gradients(&g, &p);
        self.adam.step(&mut self.params, &grads, lr)?;
        Ok(value)
    }

    /// One Adam step on the multi-scale smooth-L1 loss; returns the loss
    /// before the update.
    pub fn supervised_step(&mut self, batch: &[&StereoSample], omega: &[f64; NUM_SCALES], lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, p) = self.supervised_graph(&mut g, batch, omega, true)?;
        self.apply(g, loss, p.expect("trainable"), lr)
    }

    /// One Adam step on the photometric + smoothness loss. Reads only the
    /// images of `batch`.
    pub fn unsupervised_step(&mut self, batch: &[&StereoSample], cfg: &UnsupLossConfig, lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, p) = self.unsupervised_graph(&mut g, batch, cfg, true)?;
        self.apply(g, loss, p.expect("trainable"), lr)
    }

    pub fn supervised_loss(&self, batch: &[&StereoSample], omega: &[f64; NUM_SCALES]) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.supervised_graph(&mut g, batch, omega, false)?;
        Ok(g.value(loss).item() as f64)
    }

    pub fn unsupervised_loss(&self, batch: &[&StereoSample], cfg: &UnsupLossConfig) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.unsupervised_graph(&mut g, batch, cfg, false)?;
        Ok(g.value(loss).item() as f64)
    }

    pub fn predict(&self, sample: &StereoSample) -> Result<Prediction<f32>> {
        predict(&self.net, &self.params, sample)
    }

    pub fn evaluate(&self, samples: &[StereoSample]) -> Result<EvalReport> {
        evaluate(&self.net, &self.params, samples)
    }
}

/// Centre crop to the largest size the network accepts.
pub fn fit_to_network(sample: &StereoSample) -> Result<StereoSample> {
    let (h, w) = (sample.height(), sample.width());
    let (ch, cw) = (h / SIZE_MULTIPLE * SIZE_MULTIPLE, w / SIZE_MULTIPLE * SIZE_MULTIPLE);
    if ch == 0 || cw == 0 {
        return Err(Error::Data(format!(
            "{}: image {h}x{w} is smaller than {SIZE_MULTIPLE}x{SIZE_MULTIPLE}",
            sample.source_tag
        )));
    }
    if (ch, cw) == (h, w) {
        return Ok(sample.clone());
    }
    sample.crop_window((h - ch) / 2, (w - cw) / 2, ch, cw)
}

/// Full-resolution prediction for one sample (centre-cropped if needed).
pub fn predict(net: &Network, params: &ParamStore<f32>, sample: &StereoSample) -> Result<Prediction<f32>> {
    let s = fit_to_network(sample)?;
    let (l, r) = data::batch_inputs(&[&s])?;
    net.predict(params, &l, &r)
}

pub fn evaluate(net: &Network, params: &ParamStore<f32>, samples: &[StereoSample]) -> Result<EvalReport> {
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let fitted = fit_to_network(s)?;
        let (Some(gt), Some(valid)) = (&fitted.gt_disparity, &fitted.valid_mask) else {
            return Err(Error::Data(format!("{}: evaluation needs ground truth", s.source_tag)));
        };
        let pred = predict(net, params, &fitted)?;
        per_image.push(ImageMetrics::compute(&s.source_tag, &pred.pyramid[0], gt, valid)?);
    }
    EvalReport::from_images(per_image)
}

/// Crop size for a dataset: the requested crop clamped to the smallest
/// image and rounded down to the network's size multiple.
pub fn effective_crop(crop: [usize; 2], samples: &[StereoSample]) -> Result<(usize, usize)> {
    let min_h = samples.iter().map(|s| s.height()).min().unwrap_or(0);
    let min_w = samples.iter().map(|s| s.width()).min().unwrap_or(0);
    let h = crop[0].min(min_h) / SIZE_MULTIPLE * SIZE_MULTIPLE;
    let w = crop[1].min(min_w) / SIZE_MULTIPLE * SIZE_MULTIPLE;
    if h == 0 || w == 0 {
        return Err(Error::Data(format!(
            "crop {}x{} on images of at least {min_h}x{min_w} leaves nothing divisible by {SIZE_MULTIPLE}",
            crop[0], crop[1]
        )));
    }
    Ok((h, w))
}

/// One metrics-log row (one per epoch).
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub stage: String,
    pub round: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_epe: Option<f64>,
    pub val_d1: Option<f64>,
}

impl LogRow {
    pub const CSV_HEADER: &'static str = "stage,round,epoch,lr,loss,val_epe,val_d1";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{},{:e},{:.6},{},{}",
            self.stage,
            self.round,
            self.epoch,
            self.lr,
            self.loss,
            opt(self.val_epe),
            opt(self.val_d1)
        )
    }
}

/// Passed to the observer before every optimization step.
pub struct StepEvent<'a> {
    pub stage_index: usize,
    pub stage: &'a str,
    pub mode: StageMode,
    pub round: usize,
    pub epoch: usize,
    pub batch: &'a [&'a StereoSample],
}

#[derive(Debug)]
pub struct ScheduleOutcome {
    pub params: ParamStore<f32>,
    pub log: Vec<LogRow>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Loads every dataset the plans mention, stripping ground truth from
/// datasets used only by unsupervised stages.
fn load_stage_data(plans: &[StagePlan]) -> Result<BTreeMap<String, Dataset>> {
    let mut out = BTreeMap::new();
    for p in plans {
        if out.contains_key(&p.dataset_id) {
            continue;
        }
        let id: DatasetId = p.dataset_id.parse()?;
        let ds = load_dataset(&id)?;
        if ds.is_empty() {
            return Err(Error::Data(format!("dataset {} is empty", p.dataset_id)));
        }
        out.insert(p.dataset_id.clone(), ds);
    }
    for p in plans {
        let ds = &out[&p.dataset_id];
        if p.stage.mode == StageMode::Supervised && !ds.has_ground_truth() {
            return Err(Error::Data(format!(
                "supervised stage {} needs ground truth, dataset {} has none",
                p.stage, p.dataset_id
            )));
        }
        effective_crop(p.crop, &ds.samples)?;
    }
    Ok(out)
}

/// Runs every stage of the configured schedule in order, writing
/// `metrics.csv`, round-end checkpoints and `final.ckpt` under `out_dir`.
/// All datasets are resolved before the first step.
pub fn run_schedule(
    cfg: &ExperimentConfig,
    out_dir: &Path,
    init: Option<ParamStore<f32>>,
    observer: &mut dyn FnMut(&StepEvent<'_>),
) -> Result<ScheduleOutcome> {
    cfg.validate()?;
    let plans = cfg.stage_plans()?;
    let net = Network::new(cfg.model.network_config()?)?;
    let datasets = load_stage_data(&plans)?;
    let params = match init {
        Some(p) => p,
        None => net.init_params(cfg.schedule.seed),
    };
    let mut trainer = Trainer::new(net, params)?;
    trainer.set_mixed_unsupervised(cfg.loss.mixed_unsupervised_weight, cfg.loss.unsupervised);

    fs::create_dir_all(out_dir.join("checkpoints"))?;
    fs::write(out_dir.join("config.toml"), cfg.to_toml())?;
    let mut log_file = File::create(out_dir.join(METRICS_FILE))?;
    writeln!(log_file, "{}", LogRow::CSV_HEADER)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.schedule.seed ^ 0x5eed_da7a);
    let omega_cfg = cfg.loss.supervised();
    let unsup_cfg = cfg.loss.unsupervised;
    let batch_size = cfg.schedule.batch_size;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();

    for (si, plan) in plans.iter().enumerate() {
        let ds = &datasets[&plan.dataset_id];
        let (train_set, val_set) = ds.split(cfg.schedule.val_ratio);
        let train_set: Vec<StereoSample> = match plan.stage.mode {
            StageMode::UnsupervisedPretrain => train_set.iter().map(StereoSample::without_ground_truth).collect(),
            StageMode::Supervised => train_set,
        };
        let (ch, cw) = effective_crop(plan.crop, &train_set)?;
        let stage_name = plan.stage.to_string();
        info!(
            "stage {} {stage_name} on {} ({} train / {} val, crop {ch}x{cw})",
            si + 1,
            plan.dataset_id,
            train_set.len(),
            val_set.len()
        );
        for (round, &epochs) in plan.rounds.iter().enumerate() {
            trainer.reset_optimizer();
            let omega = omega_cfg.omega(round);
            for epoch in 0..epochs {
                let lr = plan.lr.lr(epoch);
                let mut order: Vec<usize> = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
                let mut total = 0.0;
                let mut steps = 0usize;
                for chunk in order.chunks(batch_size) {
                    let crops: Vec<StereoSample> = chunk
                        .iter()
                        .map(|&i| random_crop(&train_set[i], ch, cw, &mut rng))
                        .collect::<Result<_>>()?;
                    let batch: Vec<&StereoSample> = crops.iter().collect();
                    observer(&StepEvent {
                        stage_index: si,
                        stage: &stage_name,
                        mode: plan.stage.mode,
                        round,
                        epoch,
                        batch: &batch,
                    });
                    total += match plan.stage.mode {
                        StageMode::Supervised => trainer.supervised_step(&batch, &omega, lr)?,
                        StageMode::UnsupervisedPretrain => trainer.unsupervised_step(&batch, &unsup_cfg, lr)?,
                    };
                    steps += 1;
                }
                let (val_epe, val_d1) = if plan.stage.mode == StageMode::Supervised && !val_set.is_empty() {
                    let r = trainer.evaluate(&val_set)?;
                    (Some(r.epe), Some(r.d1_all))
                } else {
                    (None, None)
                };
                let row = LogRow {
                    stage: stage_name.clone(),
                    round: round + 1,
                    epoch: epoch + 1,
                    lr,
                    loss: total / steps.max(1) as f64,
                    val_epe,
                    val_d1,
                };
                info!("{}", row.to_csv());
                writeln!(log_file, "{}", row.to_csv())?;
                log_file.flush()?;
                log.push(row);
            }
            let ckpt = out_dir.join("checkpoints").join(format!(
                "s{}_{}_{}_r{}.ckpt",
                si + 1,
                plan.stage.dataset,
                plan.stage.mode.name(),
                round + 1
            ));
            trainer.params.save(&ckpt)?;
            checkpoints.push(ckpt);
        }
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    trainer.params.save(&final_checkpoint)?;
    Ok(ScheduleOutcome {
        params: trainer.params,
        log,
        checkpoints,
        final_checkpoint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effective_crop_clamps_and_rounds() {
        let ds = load_dataset(&"synthetic:uniform-shift:2:1:128x192".parse().unwrap()).unwrap();
        assert_eq!(effective_crop([384, 768], &ds.samples).unwrap(), (128, 192));
        assert_eq!(effective_crop([100, 150], &ds.samples).unwrap(), (64, 128));
        assert!(effective_crop([32, 768], &ds.samples).is_err());
    }

    #[test]
    fn fit_to_network_centre_crops() {
        let ds = load_dataset(&"synthetic:uniform-shift:1:1:128x192".parse().unwrap()).unwrap();
        let s = ds.samples[0].crop_window(0, 0, 100, 150).unwrap();
        let f = fit_to_network(&s).unwrap();
        assert_eq!((f.height(), f.width()), (64, 128));
        assert_eq!(f.left.at(0, 0, 0, 0), s.left.at(0, 0, 18, 11));
    }

    #[test]
    fn mixed_loss_adds_weighted_photometric_term() {
        let ds = load_dataset(&"synthetic:smooth-ramp:1:2:64x64".parse().unwrap()).unwrap();
        let net = Network::new(crate::network::NetworkConfig::default()).unwrap();
        let params = net.init_params(4);
        let mut t = Trainer::new(net, params).unwrap();
        let batch = [&ds.samples[0]];
        let omega = crate::losses::SupervisedLossConfig::default().omega(0);
        let cfg = UnsupLossConfig::default();
        let sup = t.supervised_loss(&batch, &omega).unwrap();
        let unsup = t.unsupervised_loss(&batch, &cfg).unwrap();
        t.set_mixed_unsupervised(Some(0.5), cfg);
        let mixed = t.supervised_loss(&batch, &omega).unwrap();
        assert!((mixed - (sup + 0.5 * unsup)).abs() <= 1e-4 * mixed.abs(), "{mixed} vs {sup} + {unsup}/2");
    }

    #[test]
    fn log_row_csv() {
        let row = LogRow {
            stage: "SF:supervised".into(),
            round: 1,
            epoch: 2,
            lr: 5e-5,
            loss: 0.25,
            val_epe: None,
            val_d1: Some(0.5),
        };
        assert_eq!(row.to_csv(), "SF:supervised,1,2,5e-5,0.250000,,0.500000");
    }
}
