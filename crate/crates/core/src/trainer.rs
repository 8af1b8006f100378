//! The training recipe: momentum SGD with a stepped learning rate, classic
//! weight decay, global-norm gradient clipping and best-checkpoint selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ResumeState, OPTIMIZER_PREFIX};
use crate::error::{Error, Result};
use crate::ingest::ManifestEntry;
use crate::net::{cross_entropy, Model};
use crate::nn::{ParamKind, Visit};
use crate::rng;
use crate::sampler::{load_clip, CropSpec, SampleMode, SampleSpec};
use crate::scorer::{self, FailurePolicy};
use crate::tensor::ClipTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Rescale all gradients together when their joint l2 norm exceeds the threshold.
    GlobalNorm,
    /// Clamp each gradient component to `[-threshold, threshold]`.
    Value,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_mode: ClipMode,
    pub grad_clip_norm: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loader_workers: usize,
    pub dropout_rate: f64,
    /// Root seed; every random stream in a run is derived from it.
    pub seed: u64,
    pub val_fraction: f64,
    /// Load clips on the calling thread only.
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            learning_rate: 0.001,
            lr_decay_epochs: vec![20, 40],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_mode: ClipMode::GlobalNorm,
            grad_clip_norm: 20.0,
            epochs: 100,
            batch_size: 4,
            loader_workers: 32,
            dropout_rate: 0.5,
            seed: 0,
            val_fraction: 0.1,
            deterministic: false,
        }
    }

    /// Problems with the config, all at once.
    pub fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            p.push(format!("train.learning_rate must be non-negative, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            p.push(format!("train.momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.grad_clip_norm > 0.0) {
            p.push(format!("train.grad_clip_norm must be positive, got {}", self.grad_clip_norm));
        }
        if !(self.weight_decay >= 0.0) {
            p.push(format!("train.weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(self.lr_decay_factor > 0.0) {
            p.push(format!("train.lr_decay_factor must be positive, got {}", self.lr_decay_factor));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            p.push(format!(
                "train.lr_decay_epochs must be strictly increasing, got {:?}",
                self.lr_decay_epochs
            ));
        }
        if self.batch_size == 0 {
            p.push("train.batch_size must be at least 1".into());
        }
        if self.loader_workers == 0 {
            p.push("train.loader_workers must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            p.push(format!("train.dropout_rate must lie in [0, 1], got {}", self.dropout_rate));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            p.push(format!("train.val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        p
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }
}

/// Step schedule: `learning_rate * factor^(number of decay epochs <= epoch)`.
///
/// Decay epochs at or beyond `epochs` are simply never reached, so a shortened
/// run uses a truncated schedule.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::Input(format!(
            "epoch {epoch} is outside a {}-epoch schedule",
            config.epochs
        )));
    }
    let decays = config.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
    Ok(config.learning_rate * config.lr_decay_factor.powi(decays as i32))
}

fn l2_norm(grads: &[Vec<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescale `grads` in place so their joint l2 norm is at most `max_norm`.
/// Returns the norms before and after.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> (f64, f64) {
    let before = l2_norm(grads);
    if before > max_norm {
        let scale = max_norm / before;
        grads.iter_mut().flatten().for_each(|v| *v *= scale);
    }
    (before, l2_norm(grads))
}

pub fn clip_value(grads: &mut [Vec<f64>], limit: f64) -> (f64, f64) {
    let before = l2_norm(grads);
    grads
        .iter_mut()
        .flatten()
        .for_each(|v| *v = v.clamp(-limit, limit));
    (before, l2_norm(grads))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

/// Momentum SGD, PyTorch form: `v = mu * v + g; w -= lr * v`, where `g` is the
/// clipped sum of the data gradient and `weight_decay * w` for decayed weights.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    momentum: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn momentum_buffers(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.momentum
    }

    pub fn step(&mut self, model: &mut Model, lr: f64, config: &TrainConfig) -> StepStats {
        let mut names = Vec::new();
        let mut grads = Vec::new();
        model.visit("", &mut |name, p| {
            if !p.trainable() {
                return;
            }
            let mut g = if p.grad().is_empty() {
                vec![0.0; p.len()]
            } else {
                p.grad().to_vec()
            };
            if p.kind == ParamKind::Weight && config.weight_decay != 0.0 {
                for (gi, wi) in g.iter_mut().zip(&p.value) {
                    *gi += config.weight_decay * wi;
                }
            }
            names.push(name.to_string());
            grads.push(g);
        });
        let (grad_norm, clipped_norm) = match config.clip_mode {
            ClipMode::GlobalNorm => clip_global_norm(&mut grads, config.grad_clip_norm),
            ClipMode::Value => clip_value(&mut grads, config.grad_clip_norm),
            ClipMode::None => {
                let n = l2_norm(&grads);
                (n, n)
            }
        };
        let mu = config.momentum;
        let mut i = 0;
        let buffers = &mut self.momentum;
        model.visit_mut("", &mut |name, p| {
            if !p.trainable() {
                return;
            }
            debug_assert_eq!(names[i], name);
            let g = &grads[i];
            i += 1;
            let v = buffers
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; g.len()]);
            for ((vi, gi), wi) in v.iter_mut().zip(g).zip(p.value.iter_mut()) {
                *vi = mu * *vi + gi;
                *wi -= lr * *vi;
            }
        });
        StepStats {
            lr,
            grad_norm,
            clipped_norm,
        }
    }
}

/// Where training clips come from.
#[derive(Debug, Clone)]
pub struct ClipSource {
    pub segments: usize,
    pub train_mode: SampleMode,
    pub crop: CropSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
    pub stats: StepStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub accuracy: f64,
    pub steps: Vec<StepRecord>,
}

fn targets(entries: &[&ManifestEntry]) -> Result<Vec<usize>> {
    entries
        .iter()
        .map(|e| {
            e.ear_label.map(|l| l.index()).ok_or_else(|| {
                Error::Input(format!("training video {} has no EAR label", e.video_id))
            })
        })
        .collect()
}

/// Runs the recipe over a model it exclusively owns for the duration.
pub struct Trainer {
    pub config: TrainConfig,
    pub source: ClipSource,
    optimizer: Sgd,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(config: TrainConfig, source: ClipSource) -> Result<Self> {
        config.validate()?;
        source.crop.validate()?;
        let pool = if config.deterministic || config.loader_workers <= 1 {
            None
        } else {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.loader_workers)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start loader pool: {e}")))?,
            )
        };
        Ok(Self {
            config,
            source,
            optimizer: Sgd::new(),
            pool,
        })
    }

    pub fn optimizer(&self) -> &Sgd {
        &self.optimizer
    }

    fn load_batch(&self, entries: &[&ManifestEntry], epoch: usize) -> Result<ClipTensor> {
        let seed = rng::stable_hash(self.config.seed, "sampling", &[epoch.into()]);
        let spec = SampleSpec {
            segments: self.source.segments,
            mode: self.source.train_mode,
            seed: Some(seed),
        };
        let load = |e: &&ManifestEntry| load_clip(e, &spec, &self.source.crop);
        // ordered collection keeps batch composition independent of worker timing
        let clips: Vec<ClipTensor> = match &self.pool {
            Some(pool) => pool.install(|| entries.par_iter().map(load).collect::<Result<_>>())?,
            None => entries.iter().map(load).collect::<Result<_>>()?,
        };
        ClipTensor::stack(&clips)
    }

    /// One pass over `manifest` in seeded shuffled order.
    pub fn train_epoch(
        &mut self,
        model: &mut Model,
        manifest: &[ManifestEntry],
        epoch: usize,
    ) -> Result<EpochMetrics> {
        if manifest.is_empty() {
            return Err(Error::Input("training manifest is empty".into()));
        }
        let lr = lr_at_epoch(&self.config, epoch)?;
        let mut order: Vec<&ManifestEntry> = manifest.iter().collect();
        order.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        order.shuffle(&mut rng::substream(self.config.seed, "shuffle", &[epoch.into()]));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut steps = Vec::new();
        for (batch, entries) in order.chunks(self.config.batch_size).enumerate() {
            let y = targets(entries)?;
            let clip = self.load_batch(entries, epoch)?;
            let dropout_seed =
                rng::stable_hash(self.config.seed, "dropout", &[epoch.into(), batch.into()]);
            let pass = model.forward_train(&clip, dropout_seed)?;
            let (loss, dlogits) = cross_entropy(&pass.logits, &y)?;
            if !loss.is_finite() || !pass.logits.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch, lr });
            }
            correct += pass
                .logits
                .argmax()
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            loss_sum += loss * entries.len() as f64;
            model.zero_grad();
            model.backward(pass, &dlogits)?;
            let stats = self.optimizer.step(model, lr, &self.config);
            steps.push(StepRecord {
                epoch,
                batch,
                loss,
                stats,
            });
        }
        Ok(EpochMetrics {
            epoch,
            lr,
            mean_loss: loss_sum / manifest.len() as f64,
            accuracy: correct as f64 / manifest.len() as f64,
            steps,
        })
    }

    /// Train for `config.epochs`, checkpointing whenever validation accuracy
    /// strictly improves. With `resume`, continues from `last.ckpt` in `out_dir`.
    pub fn fit(
        &mut self,
        model: &mut Model,
        train: &[ManifestEntry],
        validation: &[ManifestEntry],
        out_dir: &Path,
        resume: bool,
    ) -> Result<TrainState> {
        let train_ids: std::collections::HashSet<&str> =
            train.iter().map(|e| e.video_id.as_str()).collect();
        if let Some(shared) = validation.iter().find(|e| train_ids.contains(e.video_id.as_str())) {
            return Err(Error::Input(format!(
                "video {} is in both the training and validation manifests",
                shared.video_id
            )));
        }
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let files = RunFiles::new(out_dir);
        let mut state = TrainState::initial(&self.config);

        if resume && files.last.is_file() {
            let ck = Checkpoint::load(&files.last)?;
            let rs = ck.meta.resume.clone().ok_or_else(|| {
                Error::Checkpoint(format!("{} has no resume state", files.last.display()))
            })?;
            model.load_state(&ck.model_state())?;
            self.optimizer.momentum = ck
                .tensors
                .iter()
                .filter_map(|(k, (_, v))| {
                    k.strip_prefix(OPTIMIZER_PREFIX)
                        .and_then(|k| k.strip_prefix("momentum."))
                        .map(|name| (name.to_string(), v.clone()))
                })
                .collect();
            state.epoch = rs.next_epoch;
            state.best_val_accuracy = rs.best_val_accuracy;
            state.best_epoch = rs.best_epoch;
            state.best_checkpoint_path = rs.best_checkpoint;
            state.rng_state.next_epoch = rs.next_epoch;
            files.truncate_metrics(rs.next_epoch)?;
        } else {
            files.reset_metrics()?;
        }

        if self.config.epochs > state.epoch && validation.is_empty() {
            return Err(Error::Input("validation manifest is empty".into()));
        }
        let mut best = BestTracker {
            best: state.best_epoch.map(|e| (e, state.best_val_accuracy)),
        };
        for epoch in state.epoch..self.config.epochs {
            let metrics = self.train_epoch(model, train, epoch)?;
            let val = evaluate(model, validation, &self.source.crop)?;
            log::info!(
                "epoch {epoch}: lr {} loss {:.4} train {:.3} val {val:.3}",
                metrics.lr,
                metrics.mean_loss,
                metrics.accuracy
            );
            files.append_metrics(&metrics, val)?;
            files.append_steps(&metrics.steps)?;
            if best.observe(epoch, val) {
                let mut ck = Checkpoint::from_model(model, &self.source.crop);
                ck.meta.epoch = Some(epoch);
                ck.meta.val_accuracy = Some(val);
                ck.save(&files.best)?;
                state.best_checkpoint_path = Some(files.best.clone());
            }
            let (best_epoch, best_acc) = best.best.expect("observed");
            state.epoch = epoch + 1;
            state.current_lr = metrics.lr;
            state.best_val_accuracy = best_acc;
            state.best_epoch = Some(best_epoch);
            state.rng_state.next_epoch = epoch + 1;
            state.history.push(metrics_row(&metrics, val));

            let mut last = Checkpoint::from_model(model, &self.source.crop);
            last.meta.epoch = Some(epoch);
            last.meta.val_accuracy = Some(val);
            last.meta.resume = Some(ResumeState {
                next_epoch: epoch + 1,
                best_val_accuracy: best_acc,
                best_epoch: Some(best_epoch),
                best_checkpoint: state.best_checkpoint_path.clone(),
            });
            for (name, v) in &self.optimizer.momentum {
                last.tensors.insert(
                    format!("{OPTIMIZER_PREFIX}momentum.{name}"),
                    (vec![v.len()], v.clone()),
                );
            }
            last.save(&files.last)?;
        }
        Ok(state)
    }
}

/// Average accuracy of eval-centre predictions against manifest labels.
pub fn evaluate(model: &Model, manifest: &[ManifestEntry], crop: &CropSpec) -> Result<f64> {
    let truth = scorer::ground_truth_from_manifest(manifest);
    if truth.len() != manifest.len() {
        return Err(Error::Input("every evaluation video needs an EAR label".into()));
    }
    let preds = scorer::predict_all(model, manifest, crop, FailurePolicy::Strict)?;
    Ok(scorer::score(&preds.rows, &truth)?.value())
}

/// Running maximum with strict improvement.
#[derive(Debug, Clone, Default)]
pub struct BestTracker {
    pub best: Option<(usize, f64)>,
}

impl BestTracker {
    /// Returns `true` when `accuracy` strictly beats everything seen so far.
    pub fn observe(&mut self, epoch: usize, accuracy: f64) -> bool {
        match self.best {
            Some((_, b)) if accuracy <= b => false,
            _ => {
                self.best = Some((epoch, accuracy));
                true
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub current_lr: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub best_checkpoint_path: Option<PathBuf>,
    pub rng_state: RngState,
    /// `(epoch, lr, train_loss, train_acc, val_acc)` for epochs run in this call.
    pub history: Vec<(usize, f64, f64, f64, f64)>,
}

impl TrainState {
    fn initial(config: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            current_lr: config.learning_rate,
            best_val_accuracy: 0.0,
            best_epoch: None,
            best_checkpoint_path: None,
            rng_state: RngState {
                seed: config.seed,
                next_epoch: 0,
            },
            history: Vec::new(),
        }
    }
}

fn metrics_row(m: &EpochMetrics, val: f64) -> (usize, f64, f64, f64, f64) {
    (m.epoch, m.lr, m.mean_loss, m.accuracy, val)
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,train_acc,val_acc";
const STEPS_HEADER: &str = "epoch,batch,lr,loss,grad_norm,clipped_norm";

struct RunFiles {
    metrics: PathBuf,
    steps: PathBuf,
    best: PathBuf,
    last: PathBuf,
}

impl RunFiles {
    fn new(dir: &Path) -> Self {
        Self {
            metrics: dir.join("metrics.csv"),
            steps: dir.join("steps.csv"),
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
        }
    }

    fn reset_metrics(&self) -> Result<()> {
        fs::write(&self.metrics, format!("{METRICS_HEADER}\n")).map_err(|e| Error::io(&self.metrics, e))?;
        fs::write(&self.steps, format!("{STEPS_HEADER}\n")).map_err(|e| Error::io(&self.steps, e))
    }

    fn truncate_metrics(&self, next_epoch: usize) -> Result<()> {
        for path in [&self.metrics, &self.steps] {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let kept: String = text
                .lines()
                .enumerate()
                .filter(|(i, line)| {
                    *i == 0
                        || line
                            .split(',')
                            .next()
                            .and_then(|e| e.parse::<usize>().ok())
                            .is_some_and(|e| e < next_epoch)
                })
                .map(|(_, l)| format!("{l}\n"))
                .collect();
            fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    fn append(path: &Path, text: &str) -> Result<()> {
        use std::io::Write;
        let mut f = fs::OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    fn append_metrics(&self, m: &EpochMetrics, val: f64) -> Result<()> {
        Self::append(
            &self.metrics,
            &format!("{},{},{},{},{}\n", m.epoch, m.lr, m.mean_loss, m.accuracy, val),
        )
    }

    fn append_steps(&self, steps: &[StepRecord]) -> Result<()> {
        let mut text = String::new();
        for s in steps {
            let _ = writeln!(
                text,
                "{},{},{},{},{},{}",
                s.epoch, s.batch, s.stats.lr, s.loss, s.stats.grad_norm, s.stats.clipped_norm
            );
        }
        Self::append(&self.steps, &text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_staircase() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_at_epoch(&cfg, 0).unwrap(), 0.001);
        assert_eq!(lr_at_epoch(&cfg, 19).unwrap(), 0.001);
        assert!((lr_at_epoch(&cfg, 20).unwrap() - 1e-4).abs() < 1e-18);
        assert!((lr_at_epoch(&cfg, 39).unwrap() - 1e-4).abs() < 1e-18);
        assert!((lr_at_epoch(&cfg, 40).unwrap() - 1e-5).abs() < 1e-18);
        assert!(matches!(lr_at_epoch(&cfg, 100), Err(Error::Input(_))));
        let unit = TrainConfig {
            lr_decay_factor: 1.0,
            ..TrainConfig::paper()
        };
        assert_eq!(lr_at_epoch(&unit, 40).unwrap(), 0.001);
    }

    #[test]
    fn truncated_schedule_never_decays() {
        let cfg = TrainConfig {
            epochs: 10,
            ..TrainConfig::paper()
        };
        assert!(cfg.validate().is_ok());
        assert_eq!(lr_at_epoch(&cfg, 9).unwrap(), 0.001);
    }

    #[test]
    fn clip_scales_by_half() {
        // two components (24, 32) have norm 40
        let mut g = vec![vec![24.0], vec![32.0]];
        let (before, after) = clip_global_norm(&mut g, 20.0);
        assert_eq!(before, 40.0);
        assert!((after - 20.0).abs() < 1e-12);
        assert_eq!(g, vec![vec![12.0], vec![16.0]]);
        let mut small = vec![vec![3.0, 4.0]];
        clip_global_norm(&mut small, 20.0);
        assert_eq!(small, vec![vec![3.0, 4.0]]);
    }

    #[test]
    fn config_problems_listed_together() {
        let cfg = TrainConfig {
            momentum: 1.0,
            grad_clip_norm: 0.0,
            lr_decay_epochs: vec![40, 20],
            ..TrainConfig::paper()
        };
        assert_eq!(cfg.problems().len(), 3);
    }

    #[test]
    fn best_tracker_is_running_max() {
        let mut t = BestTracker::default();
        let saves: Vec<bool> = [0.5, 0.7, 0.6, 0.7, 0.8]
            .iter()
            .enumerate()
            .map(|(e, a)| t.observe(e, *a))
            .collect();
        assert_eq!(saves, vec![true, true, false, false, true]);
        assert_eq!(t.best, Some((4, 0.8)));
    }
}
