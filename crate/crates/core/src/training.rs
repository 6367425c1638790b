//! Prompt optimisation, evaluation and gradient checking.
//!
//! Only the prompt context is ever updated; every model weight is bound to
//! the tape as a constant.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{generate_task, SyntheticTaskSpec};
use crate::error::{ensure, Error, Result};
use crate::fmt::sig17;
use crate::losses::{build_objective, LossBreakdown, Objective, PlppConfig};
use crate::model::{init_model, ClassSpec, ImageFeatureBank, ModelConfig, PromptContext, TextModel, PROMPT_PARAM};
use crate::numerics::{argmax, central_difference, matmul, max_relative_error, Matrix, Tape};
use crate::par::Execution;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    CosineDecay,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    pub seed: u64,
    pub objective: Objective,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            lr: 0.002,
            momentum: 0.9,
            schedule: Schedule::CosineDecay,
            seed: 0,
            objective: Objective::Plpp,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, Parameter, "batch size must be at least 1");
        ensure!(
            self.lr >= 0.0 && self.lr.is_finite(),
            Parameter,
            "learning rate must be finite and non-negative, got {}",
            self.lr
        );
        ensure!(
            (0.0..1.0).contains(&self.momentum),
            Parameter,
            "momentum must lie in [0, 1), got {}",
            self.momentum
        );
        Ok(())
    }

    /// Learning rate for zero-based `step` out of `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::CosineDecay => {
                let progress = step as f64 / total_steps.max(1) as f64;
                0.5 * self.lr * (1.0 + (PI * progress).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

/// Accuracies after `epoch` epochs; epoch 0 is the untrained prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub gap: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: [&'static str; 4] = ["epoch", "train_accuracy", "test_accuracy", "gap"];

    pub fn csv_record(&self) -> [String; 4] {
        [
            self.epoch.to_string(),
            sig17(self.train_accuracy),
            sig17(self.test_accuracy),
            sig17(self.gap),
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainRecord {
    pub fn final_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    pub fn steps_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(LossBreakdown::CSV_HEADER).expect("in-memory write");
        for s in &self.steps {
            w.write_record(s.loss.csv_record(s.step)).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    pub fn epochs_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(EpochRecord::CSV_HEADER).expect("in-memory write");
        for e in &self.epochs {
            w.write_record(e.csv_record()).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Classes plus labelled train and test images, labels indexing `classes`.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub classes: &'a [ClassSpec],
    pub train: &'a ImageFeatureBank,
    pub test: &'a ImageFeatureBank,
}

fn check_dims(model: &TextModel, data: &TrainData<'_>) -> Result<()> {
    let joint = model.config.joint_dim;
    ensure!(!data.classes.is_empty(), Parameter, "no classes");
    ensure!(!data.train.is_empty(), Parameter, "no training images");
    for bank in [data.train, data.test] {
        ensure!(
            bank.is_empty() || bank.joint_dim() == joint,
            Parameter,
            "image features have width {}, model joint_dim is {joint}",
            bank.joint_dim()
        );
        ensure!(
            bank.labels.iter().all(|&l| l < data.classes.len()),
            Parameter,
            "image label outside the {} classes",
            data.classes.len()
        );
    }
    for c in data.classes {
        ensure!(
            c.class_token < model.config.eot_token(),
            Parameter,
            "class token {} does not fit vocabulary {}",
            c.class_token,
            model.config.vocab_size
        );
    }
    Ok(())
}

/// Fraction of images whose most similar class text feature carries their label.
pub fn evaluate(
    prompt: &PromptContext,
    model: &TextModel,
    classes: &[ClassSpec],
    images: &ImageFeatureBank,
    exec: Execution,
) -> Result<f64> {
    ensure!(!images.is_empty(), Parameter, "cannot evaluate on an empty image set");
    let text = model.class_text_features(prompt, classes)?;
    ensure!(
        text.cols() == images.joint_dim(),
        Dimension,
        "text width {} vs image width {}",
        text.cols(),
        images.joint_dim()
    );
    let text_t = text.transpose();
    let hits = exec.map_range(images.len(), |i| {
        let feature = Matrix::row_vector(images.features.row(i));
        let sims = matmul(&feature, &text_t).expect("widths checked");
        // argmax of similarity equals argmax of the softmax for any tau > 0
        argmax(sims.values()) == Some(images.labels[i])
    });
    Ok(hits.iter().filter(|&&h| h).count() as f64 / images.len() as f64)
}

/// Value and prompt gradient of the objective on one batch.
pub fn objective_and_gradient(
    prompt: &PromptContext,
    model: &TextModel,
    classes: &[ClassSpec],
    images: &ImageFeatureBank,
    plpp: &PlppConfig,
    objective: Objective,
) -> Result<(LossBreakdown, Matrix)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let v = tape.param(PROMPT_PARAM, prompt.vectors.clone())?;
    let vars = build_objective(&mut tape, &bound, v, classes, images, plpp, objective)?;
    let breakdown = vars.breakdown(&tape, plpp)?;
    let mut grads = tape.backward(vars.total)?;
    ensure!(grads.len() == 1, Contract, "expected a single trainable parameter");
    let grad = grads.remove(&PROMPT_PARAM).expect("prompt registered");
    ensure!(grad.is_finite(), Contract, "non-finite prompt gradient");
    Ok((breakdown, grad))
}

/// Scalar value of the objective, no gradient.
pub fn objective_value(
    prompt: &Matrix,
    model: &TextModel,
    classes: &[ClassSpec],
    images: &ImageFeatureBank,
    plpp: &PlppConfig,
    objective: Objective,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let v = tape.constant(prompt.clone());
    let vars = build_objective(&mut tape, &bound, v, classes, images, plpp, objective)?;
    tape.scalar(vars.total)
}

pub fn train_prompts(
    data: TrainData<'_>,
    model: &TextModel,
    plpp: &PlppConfig,
    config: &TrainConfig,
) -> Result<(PromptContext, TrainRecord)> {
    train_prompts_with(data, model, plpp, config, |_, _, _| {})
}

/// [`train_prompts`] calling `on_step(step, prompt_after_update, loss)` after every update.
pub fn train_prompts_with(
    data: TrainData<'_>,
    model: &TextModel,
    plpp: &PlppConfig,
    config: &TrainConfig,
    mut on_step: impl FnMut(usize, &PromptContext, &LossBreakdown),
) -> Result<(PromptContext, TrainRecord)> {
    config.validate()?;
    plpp.validate(model.config.vocab_size)?;
    check_dims(model, &data)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut prompt = PromptContext::random(&model.config, &mut rng);
    let mut velocity = Matrix::zeros(prompt.vectors.rows(), prompt.vectors.cols());
    let n = data.train.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;

    let mut record = TrainRecord::default();
    let accuracies = |p: &PromptContext, epoch: usize| -> Result<EpochRecord> {
        let train_accuracy = evaluate(p, model, data.classes, data.train, Execution::Serial)?;
        let test_accuracy = if data.test.is_empty() {
            0.0
        } else {
            evaluate(p, model, data.classes, data.test, Execution::Serial)?
        };
        Ok(EpochRecord {
            epoch,
            train_accuracy,
            test_accuracy,
            gap: train_accuracy - test_accuracy,
        })
    };
    record.epochs.push(accuracies(&prompt, 0)?);

    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let images = ImageFeatureBank {
                features: data.train.features.select_rows(batch)?,
                labels: batch.iter().map(|&i| data.train.labels[i]).collect(),
            };
            let (loss, grad) =
                objective_and_gradient(&prompt, model, data.classes, &images, plpp, config.objective)?;
            let lr = config.lr_at(step, total_steps);
            for ((v, m), g) in prompt
                .vectors
                .values_mut()
                .iter_mut()
                .zip(velocity.values_mut())
                .zip(grad.values())
            {
                *m = config.momentum * *m + g;
                *v -= lr * *m;
            }
            ensure!(prompt.vectors.is_finite(), Contract, "prompt diverged at step {step}");
            on_step(step, &prompt, &loss);
            record.steps.push(StepRecord { step, epoch, loss });
            step += 1;
        }
        record.epochs.push(accuracies(&prompt, epoch)?);
    }
    Ok((prompt, record))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Prompt position of the worst coordinate.
    pub position: usize,
    /// Embedding dimension of the worst coordinate.
    pub dim: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Analytic prompt gradient against central differences over every coordinate.
pub fn grad_check(
    prompt: &PromptContext,
    model: &TextModel,
    classes: &[ClassSpec],
    images: &ImageFeatureBank,
    plpp: &PlppConfig,
    objective: Objective,
    exec: Execution,
) -> Result<GradCheckReport> {
    let (_, analytic) = objective_and_gradient(prompt, model, classes, images, plpp, objective)?;
    // validated above, so the value closure cannot fail on shape
    let numeric = central_difference(
        |v| {
            objective_value(v, model, classes, images, plpp, objective)
                .unwrap_or(f64::NAN)
        },
        &prompt.vectors,
        GRAD_CHECK_STEP,
        exec,
    );
    if !numeric.is_finite() {
        return Err(Error::Contract("finite-difference evaluation failed".into()));
    }
    let worst = max_relative_error(&analytic, &numeric);
    Ok(GradCheckReport {
        max_rel_err: worst.max_rel_err,
        position: worst.row,
        dim: worst.col,
        analytic: worst.analytic,
        numeric: worst.numeric,
        coordinates: analytic.values().len(),
    })
}

/// Small model, task and prompt sized for exhaustive gradient checks.
#[derive(Clone, Debug)]
pub struct GradCheckSetup {
    pub model: TextModel,
    pub classes: Vec<ClassSpec>,
    pub images: ImageFeatureBank,
    pub prompt: PromptContext,
}

impl GradCheckSetup {
    /// vocab 64, width 16, 4 prompt vectors, 5 classes.
    pub fn toy(seed: u64) -> Result<Self> {
        let model = init_model(&ModelConfig {
            vocab_size: 64,
            embed_dim: 16,
            encoder_layers: 2,
            attention_heads: 2,
            joint_dim: 8,
            prompt_len: 4,
            seed,
        })?;
        let task = generate_task(&SyntheticTaskSpec {
            num_classes: 5,
            shots_per_class: 2,
            test_per_class: 1,
            joint_dim: 8,
            noise_sigma: 0.5,
            seed,
            vocab_size: 64,
        })?;
        let prompt = PromptContext::random(&model.config, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37));
        Ok(Self {
            model,
            classes: task.classes,
            images: task.train,
            prompt,
        })
    }

    pub fn run(&self, plpp: &PlppConfig, objective: Objective, exec: Execution) -> Result<GradCheckReport> {
        grad_check(&self.prompt, &self.model, &self.classes, &self.images, plpp, objective, exec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FewShotTask;

    fn toy_task(seed: u64, noise: f64) -> (TextModel, FewShotTask) {
        let model = init_model(&ModelConfig {
            vocab_size: 64,
            embed_dim: 16,
            joint_dim: 8,
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        let task = generate_task(&SyntheticTaskSpec {
            num_classes: 10,
            shots_per_class: 4,
            test_per_class: 5,
            joint_dim: 8,
            noise_sigma: noise,
            seed,
            vocab_size: 64,
        })
        .unwrap();
        (model, task)
    }

    fn data(task: &FewShotTask) -> TrainData<'_> {
        TrainData {
            classes: &task.classes,
            train: &task.train,
            test: &task.test,
        }
    }

    #[test]
    fn schedule_shapes() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_at(0, 100), 0.002);
        assert!((c.lr_at(50, 100) - 0.001).abs() < 1e-15);
        assert!(c.lr_at(99, 100) < 1e-5);
        let flat = TrainConfig {
            schedule: Schedule::Constant,
            ..c
        };
        assert_eq!(flat.lr_at(73, 100), 0.002);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_keeps_prompt() {
        let (model, task) = toy_task(3, 0.3);
        let config = TrainConfig {
            epochs: 2,
            lr: 0.0,
            seed: 9,
            ..TrainConfig::default()
        };
        let init = PromptContext::random(&model.config, &mut ChaCha8Rng::seed_from_u64(9));
        let (trained, record) = train_prompts(data(&task), &model, &PlppConfig::default(), &config).unwrap();
        assert!(trained.vectors.bits_eq(&init.vectors));
        assert_eq!(record.steps.len(), 10);
        assert_eq!(record.epochs.len(), 3);
        assert!(record.steps.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn zero_lambda_matches_ce_only_exactly() {
        let (model, task) = toy_task(4, 0.3);
        let plpp = PlppConfig {
            lambda: 0.0,
            ..PlppConfig::default()
        };
        let base = TrainConfig {
            epochs: 3,
            seed: 5,
            ..TrainConfig::default()
        };
        let mut ce_trace = Vec::new();
        let (ce_prompt, ce_record) = train_prompts_with(
            data(&task),
            &model,
            &plpp,
            &TrainConfig {
                objective: Objective::CeOnly,
                ..base.clone()
            },
            |_, p, _| ce_trace.push(p.vectors.clone()),
        )
        .unwrap();
        let mut plpp_trace = Vec::new();
        let (plpp_prompt, plpp_record) = train_prompts_with(
            data(&task),
            &model,
            &plpp,
            &TrainConfig {
                objective: Objective::Plpp,
                ..base
            },
            |_, p, _| plpp_trace.push(p.vectors.clone()),
        )
        .unwrap();
        assert!(ce_prompt.vectors.bits_eq(&plpp_prompt.vectors));
        assert!(ce_trace.iter().zip(&plpp_trace).all(|(a, b)| a.bits_eq(b)));
        assert_eq!(ce_record.steps_csv(), plpp_record.steps_csv());
        assert_eq!(ce_record, plpp_record);
    }

    #[test]
    fn frozen_weights_untouched_and_runs_reproducible() {
        let (model, task) = toy_task(6, 0.3);
        let before = model.clone();
        let config = TrainConfig {
            epochs: 2,
            seed: 1,
            ..TrainConfig::default()
        };
        let a = train_prompts(data(&task), &model, &PlppConfig::default(), &config).unwrap();
        let b = train_prompts(data(&task), &model, &PlppConfig::default(), &config).unwrap();
        assert_eq!(model, before);
        assert!(model.embedding.table().bits_eq(before.embedding.table()));
        assert!(a.0.vectors.bits_eq(&b.0.vectors));
        assert_eq!(a.1.steps_csv(), b.1.steps_csv());
        assert_eq!(a.1.epochs_csv(), b.1.epochs_csv());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let (model, _) = toy_task(7, 0.3);
        let wide = generate_task(&SyntheticTaskSpec {
            joint_dim: 5,
            vocab_size: 64,
            ..SyntheticTaskSpec::default()
        })
        .unwrap();
        let r = train_prompts(data(&wide), &model, &PlppConfig::default(), &TrainConfig::default());
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn evaluate_cases() {
        let (model, task) = toy_task(8, 0.3);
        let prompt = PromptContext::random(&model.config, &mut ChaCha8Rng::seed_from_u64(2));
        let text = model.class_text_features(&prompt, &task.classes).unwrap();
        // images pointing exactly along one class's text feature
        let c = 3;
        let aligned = ImageFeatureBank::new(
            Matrix::from_fn(4, text.cols(), |_, j| text.get(c, j)),
            vec![c; 4],
        )
        .unwrap();
        // an image can be nearer another class only if two text features coincide
        assert_eq!(evaluate(&prompt, &model, &task.classes, &aligned, Execution::Serial).unwrap(), 1.0);

        let single = aligned.restrict(&[c]).unwrap();
        let one = ImageFeatureBank::new(single.features.slice_rows(0, 1).unwrap(), vec![0]).unwrap();
        let acc = evaluate(&prompt, &model, &task.classes, &one, Execution::Serial).unwrap();
        assert!(acc == 0.0 || acc == 1.0);

        let empty = ImageFeatureBank::new(Matrix::zeros(0, 8), vec![]).unwrap();
        assert!(evaluate(&prompt, &model, &task.classes, &empty, Execution::Serial).is_err());

        let par = evaluate(&prompt, &model, &task.classes, &task.test, Execution::Parallel).unwrap();
        let ser = evaluate(&prompt, &model, &task.classes, &task.test, Execution::Serial).unwrap();
        assert_eq!(par, ser);
    }

    #[test]
    fn chance_level_with_permuted_labels() {
        use rand::Rng;
        use rand_distr::StandardNormal;
        let (model, task) = toy_task(9, 0.3);
        let prompt = PromptContext::random(&model.config, &mut ChaCha8Rng::seed_from_u64(4));
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let n = 2000;
        let k = task.classes.len();
        let raw = Matrix::from_fn(n, 8, |_, _| rng.sample::<f64, _>(StandardNormal));
        let features = crate::numerics::l2_normalize_rows(&raw).unwrap();
        let labels = (0..n).map(|_| rng.random_range(0..k)).collect();
        let bank = ImageFeatureBank::new(features, labels).unwrap();
        let acc = evaluate(&prompt, &model, &task.classes, &bank, Execution::Serial).unwrap();
        let p = 1.0 / k as f64;
        // two-sided 99% normal bound on a binomial proportion
        let bound = 2.576 * (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() <= bound, "accuracy {acc}, chance {p} +- {bound}");
    }

    #[test]
    fn training_does_not_lose_train_accuracy() {
        let model = init_model(&ModelConfig::default()).unwrap();
        for seed in 0..5 {
            let task = generate_task(&SyntheticTaskSpec {
                seed,
                ..SyntheticTaskSpec::default()
            })
            .unwrap();
            let config = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let (_, record) = train_prompts(data(&task), &model, &PlppConfig::default(), &config).unwrap();
            let (first, last) = (&record.epochs[0], record.final_epoch().unwrap());
            assert!(last.train_accuracy >= first.train_accuracy, "seed {seed}: {first:?} -> {last:?}");
            assert!(record
                .epochs
                .iter()
                .all(|e| (0.0..=1.0).contains(&e.train_accuracy) && (0.0..=1.0).contains(&e.test_accuracy)));
        }
    }

    #[test]
    fn grad_check_small() {
        let setup = GradCheckSetup::toy(2).unwrap();
        for objective in [Objective::CeOnly, Objective::Plpp] {
            let r = setup.run(&PlppConfig::default(), objective, Execution::default()).unwrap();
            assert_eq!(r.coordinates, 64);
            assert!(r.max_rel_err < 1e-4, "{objective:?}: {r:?}");
        }
    }
}
