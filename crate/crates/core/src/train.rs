//! Training loop: SGD with momentum and a stepped learning-rate schedule,
//! deterministic batch sampling, JSONL event logging, periodic checkpoints
//! and evaluations, divergence handling, and the lambda sweep driver.

use crate::data::{
    apply_relabel, load_dataset, split_dataset, AnnotatedImage, NormalizationStats, Preprocessor,
};
use crate::eval::{map_at_50, class_level_scores, run_inference};
use crate::model::checkpoint::Checkpoint;
use crate::model::loss::LossWeights;
use crate::model::{Detector, ModelConfig};
use crate::nn::Sgd;
use crate::taxonomy::{merge_rare_genera, GenusCensus, Taxonomy};
use crate::util::derive_seed;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Genera rarer than this many instances are folded into the catch-all.
pub const MERGE_THRESHOLD: u64 = 10;

/// Optimization schedule and bookkeeping cadences.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Steps at which the learning rate is multiplied by `decay_factor`.
    pub decay_steps: Vec<u64>,
    pub decay_factor: f64,
    pub total_steps: u64,
    /// Weight of the taxonomy-class loss term; 0 recovers the plain
    /// two-branch baseline.
    pub lambda: f64,
    pub seed: u64,
    /// Checkpoint cadence in steps; 0 = final checkpoint only.
    pub checkpoint_every: u64,
    /// Held-out evaluation cadence in steps; 0 = final evaluation only.
    pub eval_every: u64,
    pub clip_norm: f64,
    pub merge_threshold: u64,
}

impl TrainConfig {
    /// The published schedule: lr 0.02, momentum 0.9, one decade of decay
    /// at steps 6000 and 7000.
    pub fn reference(total_steps: u64) -> Self {
        TrainConfig {
            base_lr: 0.02,
            momentum: 0.9,
            batch_size: 2,
            decay_steps: vec![6000, 7000],
            decay_factor: 0.1,
            total_steps,
            lambda: 0.2,
            seed: 0,
            checkpoint_every: 0,
            eval_every: 0,
            clip_norm: 10.0,
            merge_threshold: MERGE_THRESHOLD,
        }
    }

    /// Same schedule shape compressed onto a short run: decays fire at 75%
    /// and 87.5% of `total_steps`, mirroring 6000/7000 out of 8000.
    pub fn desk(total_steps: u64) -> Self {
        let mut cfg = TrainConfig::reference(total_steps);
        cfg.decay_steps = vec![total_steps * 3 / 4, total_steps * 7 / 8];
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be at least 1".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor must be in (0,1], got {}", self.decay_factor)));
        }
        LossWeights::new(self.lambda)?;
        Ok(())
    }

    /// Piecewise-constant learning rate; the decay applies from the decay
    /// step itself onward (1-based steps).
    pub fn lr_at(&self, step: u64) -> f64 {
        let hits = self.decay_steps.iter().filter(|&&d| step >= d).count() as i32;
        self.base_lr * self.decay_factor.powi(hits)
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    Step {
        step: u64,
        lr: f64,
        l_box: f64,
        l_genus: f64,
        l_cls: f64,
        l_total: f64,
        wall_ms: u64,
    },
    Eval {
        step: u64,
        map_genus: f64,
        map_class: f64,
    },
    Abort {
        step: u64,
        message: String,
    },
}

/// Read a JSONL training log back into events.
pub fn read_log(path: &Path) -> Result<Vec<LogEvent>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Ingestion(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub steps_completed: u64,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    /// Diagnostic when the run stopped early on non-finite loss.
    pub aborted: Option<String>,
    pub final_map_genus: Option<f64>,
    pub final_map_class: Option<f64>,
}

/// A dataset bound to a model and schedule, ready to train.
pub struct TrainSession {
    pub config: TrainConfig,
    pub taxonomy: Taxonomy,
    pub source_fingerprint: String,
    pub relabel: BTreeMap<String, String>,
    pub train_images: Vec<AnnotatedImage>,
    pub test_images: Vec<AnnotatedImage>,
    pub preprocessor: Preprocessor,
    pub detector: Detector,
}

impl TrainSession {
    /// Load and split the dataset, fold rare genera into the catch-all,
    /// compute normalization statistics on the training split, and
    /// initialize the detector.
    pub fn prepare(data_dir: &Path, mut model_config: ModelConfig, config: TrainConfig) -> Result<TrainSession> {
        config.validate()?;
        let (mut images, taxonomy) = load_dataset(data_dir)?;
        let source_fingerprint = taxonomy.fingerprint();
        let ids: Vec<String> = images.iter().map(|i| i.image_id.clone()).collect();
        let split = split_dataset(&ids, config.seed)?;
        if split.train.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        let census =
            GenusCensus::from_labels(images.iter().flat_map(|i| i.instances.iter().map(|x| x.genus.as_str())));
        let (merged, relabel) = merge_rare_genera(&census, &taxonomy, config.merge_threshold)?;
        apply_relabel(&mut images, &relabel);
        let mut by_id: BTreeMap<String, AnnotatedImage> =
            images.into_iter().map(|i| (i.image_id.clone(), i)).collect();
        let take = |ids: &[String], by_id: &mut BTreeMap<String, AnnotatedImage>| -> Vec<AnnotatedImage> {
            ids.iter().map(|id| by_id.remove(id).expect("split id from dataset")).collect()
        };
        let train_images = take(&split.train, &mut by_id);
        let test_images = take(&split.test, &mut by_id);
        let stats = NormalizationStats::compute(&train_images.iter().collect::<Vec<_>>())?;
        let preprocessor = Preprocessor::new(stats).with_target(model_config.image_size);
        model_config.num_genera = merged.genera().len();
        let detector = Detector::new(model_config, config.seed)?;
        Ok(TrainSession {
            config,
            taxonomy: merged,
            source_fingerprint,
            relabel,
            train_images,
            test_images,
            preprocessor,
            detector,
        })
    }

    fn checkpoint(&mut self, step: u64) -> Checkpoint {
        Checkpoint::capture(
            &mut self.detector,
            step,
            self.source_fingerprint.clone(),
            &self.taxonomy,
            self.relabel.clone(),
            self.preprocessor.stats.clone(),
            self.config.seed,
        )
    }

    /// Score a split with the current weights (mAP@50 at both levels).
    pub fn evaluate_split(&self, images: &[AnnotatedImage]) -> Result<(f64, f64)> {
        let refs: Vec<&AnnotatedImage> = images.iter().collect();
        let (dets, gts) =
            run_inference(&self.detector, &self.preprocessor, &self.taxonomy, &refs, 0.05, 0.5)?;
        let genus = map_at_50(&dets, &gts, &self.taxonomy.genera().to_vec())?;
        let class = class_level_scores(&dets, &gts, &self.taxonomy)?;
        Ok((genus.mean, class.mean))
    }

    /// Run the loop, writing `train_log.jsonl` and `checkpoint.json` under
    /// `out_dir`. On divergence the run stops, keeps the last healthy
    /// checkpoint, and reports the diagnostic in the outcome.
    pub fn run(&mut self, out_dir: &Path) -> Result<TrainOutcome> {
        std::fs::create_dir_all(out_dir)?;
        let log_path = out_dir.join("train_log.jsonl");
        let ckpt_path = out_dir.join("checkpoint.json");
        let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
        let emit = |log: &mut std::io::BufWriter<std::fs::File>, ev: &LogEvent| -> Result<()> {
            writeln!(log, "{}", serde_json::to_string(ev).expect("log event serializes"))?;
            log.flush()?;
            Ok(())
        };
        // a checkpoint exists from step zero so an abort always leaves one
        self.checkpoint(0).save(&ckpt_path)?;
        let weights = LossWeights::new(self.config.lambda)?;
        let sgd = Sgd {
            momentum: self.config.momentum as f32,
            clip_norm: if self.config.clip_norm > 0.0 { Some(self.config.clip_norm as f32) } else { None },
        };
        let n = self.train_images.len();
        let mut order: Vec<usize> = Vec::new();
        let mut cursor = 0usize;
        let mut epoch = 0u64;
        let mut aborted = None;
        let mut steps_completed = 0u64;
        for step in 1..=self.config.total_steps {
            if cursor + self.config.batch_size.min(n) > order.len() {
                order = (0..n).collect();
                let mut rng: ChaCha8Rng = crate::util::rng_from(self.config.seed, &[0x7a, epoch]);
                order.shuffle(&mut rng);
                cursor = 0;
                epoch += 1;
            }
            let step_seed = derive_seed(self.config.seed, &[0x5a, step]);
            let t0 = Instant::now();
            let mut batch = Vec::with_capacity(self.config.batch_size.min(n));
            for (slot, &idx) in order[cursor..cursor + self.config.batch_size.min(n)].iter().enumerate() {
                let aug_seed = derive_seed(step_seed, &[0x11, slot as u64]);
                batch.push(self.preprocessor.train_sample(&self.train_images[idx], aug_seed)?);
            }
            cursor += batch.len();
            let lr = self.config.lr_at(step);
            Sgd::zero_grad(&mut self.detector);
            let loss = match self.detector.train_step(&batch, &self.taxonomy, &weights, step_seed) {
                Ok(l) if l.l_total.is_finite() => l,
                Ok(l) => {
                    let message = format!("non-finite total loss {} at step {step}", l.l_total);
                    emit(&mut log, &LogEvent::Abort { step, message: message.clone() })?;
                    aborted = Some(message);
                    break;
                }
                Err(Error::Numeric(m)) => {
                    let message = format!("numeric failure at step {step}: {m}");
                    emit(&mut log, &LogEvent::Abort { step, message: message.clone() })?;
                    aborted = Some(message);
                    break;
                }
                Err(e) => return Err(e),
            };
            sgd.step(&mut self.detector, lr as f32);
            steps_completed = step;
            emit(
                &mut log,
                &LogEvent::Step {
                    step,
                    lr,
                    l_box: loss.l_box,
                    l_genus: loss.l_genus,
                    l_cls: loss.l_cls,
                    l_total: loss.l_total,
                    wall_ms: t0.elapsed().as_millis() as u64,
                },
            )?;
            if self.config.checkpoint_every > 0 && step % self.config.checkpoint_every == 0 {
                self.checkpoint(step).save(&ckpt_path)?;
            }
            if self.config.eval_every > 0 && step % self.config.eval_every == 0 && !self.test_images.is_empty() {
                let (map_genus, map_class) = self.evaluate_split(&self.test_images)?;
                emit(&mut log, &LogEvent::Eval { step, map_genus, map_class })?;
            }
        }
        let mut final_map_genus = None;
        let mut final_map_class = None;
        if aborted.is_none() {
            self.checkpoint(steps_completed).save(&ckpt_path)?;
            if !self.test_images.is_empty() {
                let (map_genus, map_class) = self.evaluate_split(&self.test_images)?;
                emit(&mut log, &LogEvent::Eval { step: steps_completed, map_genus, map_class })?;
                final_map_genus = Some(map_genus);
                final_map_class = Some(map_class);
            }
        }
        Ok(TrainOutcome {
            steps_completed,
            checkpoint_path: ckpt_path,
            log_path,
            aborted,
            final_map_genus,
            final_map_class,
        })
    }
}

/// One successful sweep member.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub final_map_genus: f64,
    pub final_map_class: f64,
}

/// Sweep result; `failures` carries members that aborted or errored.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub failures: Vec<(f64, String)>,
    pub csv_path: PathBuf,
}

/// Train one run per lambda (same data, seed, and schedule otherwise) and
/// tabulate the final held-out scores. `jobs` bounds worker threads.
pub fn sweep_lambda(
    data_dir: &Path,
    model_config: &ModelConfig,
    base: &TrainConfig,
    lambdas: &[f64],
    out_dir: &Path,
    jobs: usize,
) -> Result<SweepOutcome> {
    if lambdas.is_empty() {
        return Err(Error::Config("sweep needs at least one lambda".into()));
    }
    for &l in lambdas {
        LossWeights::new(l)?;
    }
    std::fs::create_dir_all(out_dir)?;
    let jobs = jobs.max(1).min(lambdas.len());
    type MemberResult = std::result::Result<SweepRow, (f64, String)>;
    let results: Vec<Option<MemberResult>> = {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<MemberResult>>> =
            lambdas.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= lambdas.len() {
                        break;
                    }
                    let lambda = lambdas[i];
                    let run = || -> Result<SweepRow> {
                        let mut config = base.clone();
                        config.lambda = lambda;
                        let member_dir = out_dir.join(format!("lambda-{lambda}"));
                        let mut session = TrainSession::prepare(data_dir, model_config.clone(), config)?;
                        let outcome = session.run(&member_dir)?;
                        if let Some(msg) = outcome.aborted {
                            return Err(Error::Numeric(msg));
                        }
                        Ok(SweepRow {
                            lambda,
                            final_map_genus: outcome.final_map_genus.unwrap_or(f64::NAN),
                            final_map_class: outcome.final_map_class.unwrap_or(f64::NAN),
                        })
                    };
                    *slots[i].lock().unwrap() = Some(run().map_err(|e| (lambda, e.to_string())));
                });
            }
        });
        slots.into_iter().map(|s| s.into_inner().unwrap()).collect()
    };
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut csv = String::from("lambda,final_map_genus,final_map_class,status\n");
    for r in results.into_iter().flatten() {
        match r {
            Ok(row) => {
                csv.push_str(&format!("{},{},{},ok\n", row.lambda, row.final_map_genus, row.final_map_class));
                rows.push(row);
            }
            Err((lambda, msg)) => {
                csv.push_str(&format!("{lambda},,,failed: {}\n", msg.replace(',', ";")));
                failures.push((lambda, msg));
            }
        }
    }
    let csv_path = out_dir.join("sweep.csv");
    std::fs::write(&csv_path, csv)?;
    Ok(SweepOutcome { rows, failures, csv_path })
}
