//! Optimization loop, Adam, and evaluation metrics.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::EchoSample;
use crate::error::{Error, Result};
use crate::labels::{measurements_from_landmarks, rescale_landmarks, LandmarkSet, MeasurementTriple};
use crate::model::{Model, ModelConfig};
use crate::nn::FeatureMap;
use crate::objective::{LossConfig, LossReport};
use crate::par::Exec;
use crate::params::{accumulate, scale, Grads, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    /// Coupled L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            betas: [0.9, 0.999],
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

impl OptimizerConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            v.push(format!("optimizer.lr must be > 0, got {}", self.lr));
        }
        for (i, b) in self.betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                v.push(format!("optimizer.betas[{i}] must be in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            v.push(format!("optimizer.eps must be > 0, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            v.push(format!("optimizer.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    /// Zero is allowed and leaves the initialization untouched.
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Global step budget across resumes.
    pub max_steps: Option<u64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            seed: 0,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub train: Schedule,
}

impl TrainConfig {
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::default(),
            train: Schedule::default(),
        }
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = self.model.violations();
        v.extend(self.loss.violations(self.model.levels));
        v.extend(self.optimizer.violations());
        if self.train.batch_size == 0 {
            v.push("train.batch_size must be > 0".into());
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// First and second moments, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Grads<f32>,
    pub v: Grads<f32>,
}

impl AdamState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        Self {
            step: 0,
            m: params.zero_grads(),
            v: params.zero_grads(),
        }
    }

    pub fn update(&mut self, cfg: &OptimizerConfig, params: &mut ParamStore<f32>, grads: &Grads<f32>) {
        self.step += 1;
        let [b1, b2] = cfg.betas;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((tensor, g), m), v) in params.tensors.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in tensor.data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64 + cfg.weight_decay * *p as f64;
                let mt = b1 * *m as f64 + (1.0 - b1) * g;
                let vt = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mt as f32;
                *v = vt as f32;
                let upd = cfg.lr * (mt / c1) / ((vt / c2).sqrt() + cfg.eps);
                *p = (*p as f64 - upd) as f32;
            }
        }
    }
}

/// A sample resized to the model frame, ready for the forward pass.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub id: String,
    pub image: FeatureMap<f32>,
    /// Landmarks in the model frame.
    pub landmarks: LandmarkSet,
    /// Landmarks in the original frame.
    pub original: LandmarkSet,
}

pub fn prepare(sample: &EchoSample, size: usize) -> Result<Prepared> {
    let resized = crate::data::resize_sample(sample, (size, size)).map_err(|e| Error::Record {
        id: sample.id.clone(),
        msg: e.to_string(),
    })?;
    Ok(Prepared {
        id: sample.id.clone(),
        image: FeatureMap {
            channels: 1,
            height: size,
            width: size,
            data: resized.image.data,
        },
        landmarks: resized.landmarks,
        original: sample.landmarks.clone(),
    })
}

pub fn prepare_all(exec: Exec, samples: &[EchoSample], size: usize) -> Result<Vec<Prepared>> {
    exec.map(samples, |s| prepare(s, size)).into_iter().collect()
}

/// Mean losses over an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train: LossReport,
    pub val: Option<MetricsReport>,
    pub best: bool,
    pub platform: String,
}

pub fn platform_tag(exec: Exec) -> String {
    format!(
        "{}-{} {} threads={}",
        std::env::consts::ARCH,
        std::env::consts::OS,
        exec,
        exec.threads()
    )
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model<f32>,
    pub adam: AdamState,
    pub epoch: usize,
    pub exec: Exec,
    pub best_mpe: Option<f64>,
    pub best_params: ParamStore<f32>,
}

impl Trainer {
    pub fn new(config: TrainConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.train.seed)?;
        let adam = AdamState::new(&model.params);
        let best_params = model.params.clone();
        Ok(Self {
            config,
            model,
            adam,
            epoch: 0,
            exec,
            best_mpe: None,
            best_params,
        })
    }

    /// Continues from saved parameters and optimizer state.
    pub fn resume(ckpt: crate::checkpoint::Checkpoint, exec: Exec) -> Result<Self> {
        let mut t = Self::new(ckpt.config, exec)?;
        t.model.load_params(ckpt.params)?;
        t.adam = match ckpt.adam {
            Some(a) => a,
            None => {
                let mut a = AdamState::new(&t.model.params);
                a.step = ckpt.step;
                a
            }
        };
        t.epoch = ckpt.epoch;
        t.best_mpe = ckpt.best_mpe;
        t.best_params = t.model.params.clone();
        Ok(t)
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    fn budget_left(&self) -> bool {
        self.config.train.max_steps.is_none_or(|m| self.adam.step < m)
    }

    /// One optimizer step on the mean gradient of `batch`.
    pub fn step(&mut self, batch: &[&Prepared]) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let inner = if batch.len() > 1 { Exec::Sequential } else { self.exec };
        let loss_cfg = &self.config.loss;
        let model = &self.model;
        let results = self
            .exec
            .map(batch, |s| model.loss_and_grad(inner, &s.image, &s.landmarks, loss_cfg));
        let mut grads = self.model.params.zero_grads();
        let mut reports = Vec::with_capacity(batch.len());
        let params_finite = || self.model.params.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()));
        for (r, s) in results.into_iter().zip(batch) {
            let r = match r {
                Ok(r) => r,
                Err(e) if params_finite() => return Err(e),
                Err(e) => {
                    return Err(Error::Diverged {
                        step: self.adam.step,
                        detail: format!("sample {}: non-finite parameters ({e})", s.id),
                    })
                }
            };
            if !r.report.total.is_finite() {
                return Err(Error::Diverged {
                    step: self.adam.step,
                    detail: format!("sample {}: loss {:?}", s.id, r.report),
                });
            }
            accumulate(&mut grads, &r.grads);
            reports.push(r.report);
        }
        scale(&mut grads, 1.0 / batch.len() as f32);
        if let Some((t, _)) = grads
            .iter()
            .enumerate()
            .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Diverged {
                step: self.adam.step,
                detail: format!("non-finite gradient in {}", self.model.params.tensors[t].name),
            });
        }
        self.adam.update(&self.config.optimizer, &mut self.model.params, &grads);
        Ok(mean_report(&reports))
    }

    /// One pass over `train` in a seeded shuffled order. Returns `None` when
    /// the step budget was already exhausted.
    pub fn run_epoch(&mut self, train: &[Prepared]) -> Result<Option<LossReport>> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.config.train.seed ^ (self.epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        order.shuffle(&mut rng);
        let mut reports = Vec::new();
        for chunk in order.chunks(self.config.train.batch_size) {
            if !self.budget_left() {
                break;
            }
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &train[i]).collect();
            let r = self.step(&batch)?;
            log::debug!("step {} loss {:.4}", self.adam.step, r.total);
            reports.push(r);
        }
        if reports.is_empty() {
            return Ok(None);
        }
        self.epoch += 1;
        Ok(Some(mean_report(&reports)))
    }

    /// Trains for the configured epochs, evaluating on `val` after each one
    /// and keeping the parameters with the lowest mean MPE.
    pub fn fit(
        &mut self,
        train: &[Prepared],
        val: &[Prepared],
        mut on_epoch: impl FnMut(&EpochRecord, &Trainer) -> Result<()>,
    ) -> Result<()> {
        if train.is_empty() {
            return Err(Error::Domain("training split is empty".into()));
        }
        while self.epoch < self.config.train.epochs {
            let Some(report) = self.run_epoch(train)? else {
                break;
            };
            let metrics = if val.is_empty() {
                None
            } else {
                Some(evaluate(&self.model, self.exec, val, false)?.0)
            };
            let score = metrics.as_ref().and_then(|m| m.mean_mpe_percent);
            let best = match (score, self.best_mpe) {
                (Some(s), Some(b)) => s < b,
                (Some(_), None) => true,
                (None, _) => val.is_empty(),
            };
            if best {
                self.best_mpe = score;
                self.best_params = self.model.params.clone();
            }
            let rec = EpochRecord {
                epoch: self.epoch,
                step: self.adam.step,
                train: report,
                val: metrics,
                best,
                platform: platform_tag(self.exec),
            };
            log::info!(
                "epoch {} step {} loss {:.4} val mpe {:?}",
                rec.epoch,
                rec.step,
                rec.train.total,
                score
            );
            on_epoch(&rec, self)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> crate::checkpoint::Checkpoint {
        crate::checkpoint::Checkpoint {
            config: self.config.clone(),
            step: self.adam.step,
            epoch: self.epoch,
            seed: self.config.train.seed,
            best_mpe: self.best_mpe,
            params: self.model.params.clone(),
            adam: Some(self.adam.clone()),
        }
    }

    /// Checkpoint holding the best-validation parameters.
    pub fn best_checkpoint(&self) -> crate::checkpoint::Checkpoint {
        let mut c = self.checkpoint();
        c.params = self.best_params.clone();
        c.adam = None;
        c
    }
}

fn mean_report(reports: &[LossReport]) -> LossReport {
    let n = reports.len() as f64;
    let levels = reports[0].bce_per_level.len();
    LossReport {
        bce_per_level: (0..levels)
            .map(|i| reports.iter().map(|r| r.bce_per_level[i]).sum::<f64>() / n)
            .collect(),
        l2: reports.iter().map(|r| r.l2).sum::<f64>() / n,
        total: reports.iter().map(|r| r.total).sum::<f64>() / n,
    }
}

/// Error statistics for one measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementMetrics {
    pub mae_mm: f64,
    /// `None` when every sample had a zero true length.
    pub mpe_percent: Option<f64>,
    /// Samples left out of the MPE because the true length is zero.
    pub mpe_excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub samples: usize,
    pub ivs: MeasurementMetrics,
    pub lvid: MeasurementMetrics,
    pub lvpw: MeasurementMetrics,
    /// Mean of the three MPEs that are defined.
    pub mean_mpe_percent: Option<f64>,
    /// Fraction of samples with LVID absolute error below 2 mm.
    pub sdr_2mm: f64,
    pub sdr_6mm: f64,
    /// Mean Euclidean landmark error in original-frame pixels.
    pub mean_point_error_px: f64,
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mpe = |m: Option<f64>| m.map_or("n/a".to_string(), |v| format!("{v}"));
        writeln!(f, "samples: {}", self.samples)?;
        for (name, m) in [("IVS", &self.ivs), ("LVID", &self.lvid), ("LVPW", &self.lvpw)] {
            writeln!(
                f,
                "{name}: mae_mm={} mpe_percent={} mpe_excluded={}",
                m.mae_mm,
                mpe(m.mpe_percent),
                m.mpe_excluded
            )?;
        }
        writeln!(f, "mean_mpe_percent: {}", mpe(self.mean_mpe_percent))?;
        writeln!(f, "sdr_2mm: {}", self.sdr_2mm)?;
        writeln!(f, "sdr_6mm: {}", self.sdr_6mm)?;
        write!(f, "mean_point_error_px: {}", self.mean_point_error_px)
    }
}

pub const SDR_THRESHOLDS_MM: [f64; 2] = [2.0, 6.0];

/// `100 * |pred - truth| / truth`, undefined for a zero true length.
pub fn percent_error(pred: f64, truth: f64) -> Option<f64> {
    (truth != 0.0).then(|| 100.0 * (pred - truth).abs() / truth)
}

/// Aggregates `(predicted, true)` landmark pairs given in the same frame.
pub fn metrics_from_pairs(pairs: &[(LandmarkSet, LandmarkSet)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty split".into()));
    }
    let n = pairs.len() as f64;
    let triples: Vec<([f64; 3], [f64; 3])> = pairs
        .iter()
        .map(|(p, t)| {
            (
                measurements_from_landmarks(p).as_array(),
                measurements_from_landmarks(t).as_array(),
            )
        })
        .collect();
    let per = |j: usize| {
        let mae = sorted_sum(triples.iter().map(|(p, t)| (p[j] - t[j]).abs()).collect()) / n;
        let pe: Vec<f64> = triples.iter().filter_map(|(p, t)| percent_error(p[j], t[j])).collect();
        let kept = pe.len();
        MeasurementMetrics {
            mae_mm: mae,
            mpe_percent: (kept > 0).then(|| sorted_sum(pe) / kept as f64),
            mpe_excluded: pairs.len() - kept,
        }
    };
    let (ivs, lvid, lvpw) = (per(0), per(1), per(2));
    let defined: Vec<f64> = [&ivs, &lvid, &lvpw].iter().filter_map(|m| m.mpe_percent).collect();
    let sdr = |thr: f64| triples.iter().filter(|(p, t)| (p[1] - t[1]).abs() < thr).count() as f64 / n;
    let point_err = sorted_sum(pairs.iter().flat_map(|(p, t)| point_errors(p, t)).collect()) / (n * 4.0);
    Ok(MetricsReport {
        samples: pairs.len(),
        ivs,
        lvid,
        lvpw,
        mean_mpe_percent: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        sdr_2mm: sdr(SDR_THRESHOLDS_MM[0]),
        sdr_6mm: sdr(SDR_THRESHOLDS_MM[1]),
        mean_point_error_px: point_err,
    })
}

/// Sum in ascending order, so aggregates do not depend on sample order.
fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// Euclidean distance per landmark, in pixels.
pub fn point_errors(pred: &LandmarkSet, truth: &LandmarkSet) -> [f64; 4] {
    let mut e = [0.0; 4];
    for (i, (a, b)) in pred.points.iter().zip(&truth.points).enumerate() {
        e[i] = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    }
    e
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: String,
    /// Predicted `(h, w)` in the original frame.
    pub points: [[f64; 2]; 4],
    pub predicted: MeasurementTriple,
    pub truth: MeasurementTriple,
    pub point_error_px: [f64; 4],
}

/// Predicts landmarks in the model frame and maps them back to the
/// sample's original frame.
pub fn predict_original(model: &Model<f32>, exec: Exec, sample: &Prepared) -> Result<LandmarkSet> {
    let s = model.config.image_size;
    let xy = model.predict_landmarks(exec, &sample.image)?.points;
    let in_model = LandmarkSet::from_xy(&xy, sample.landmarks.spacing_mm, s, s);
    let o = &sample.original;
    rescale_landmarks(&in_model, (s, s), (o.height, o.width))
}

/// Runs the model over `samples`. With `oracle`, ground truth stands in for
/// the predictions, which must give zero error.
pub fn evaluate(
    model: &Model<f32>,
    exec: Exec,
    samples: &[Prepared],
    oracle: bool,
) -> Result<(MetricsReport, Vec<SamplePrediction>)> {
    if samples.is_empty() {
        return Err(Error::Domain("cannot evaluate an empty split".into()));
    }
    let preds: Vec<LandmarkSet> = exec
        .map(samples, |s| {
            if oracle {
                Ok(s.original.clone())
            } else {
                predict_original(model, Exec::Sequential, s)
            }
        })
        .into_iter()
        .collect::<Result<_>>()?;
    let pairs: Vec<(LandmarkSet, LandmarkSet)> = preds
        .iter()
        .cloned()
        .zip(samples.iter().map(|s| s.original.clone()))
        .collect();
    let report = metrics_from_pairs(&pairs)?;
    let rows = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| SamplePrediction {
            id: s.id.clone(),
            points: p.points,
            predicted: measurements_from_landmarks(p),
            truth: measurements_from_landmarks(&s.original),
            point_error_px: point_errors(p, &s.original),
        })
        .collect();
    Ok((report, rows))
}
