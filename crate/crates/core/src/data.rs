//! Synthetic few-shot tasks, base/novel splits and their on-disk formats.
//!
//! Task file layout, one record per line, fields separated by single spaces:
//!
//! ```text
//! plpp-task 1
//! spec num_classes=<K> shots_per_class=<n> test_per_class=<n> joint_dim=<j> noise_sigma=<x> seed=<s> vocab_size=<v>
//! class <class_id> <class_token> <name> <prototype j values>
//! partition base <class ids...>          (optional)
//! partition novel <class ids...>         (optional)
//! image <train|test> <class_id> <j values>
//! ```
//!
//! Every float is written with 17 significant digits.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::fmt::sig17;
use crate::model::{ClassSpec, ImageFeatureBank};
use crate::numerics::{l2_normalize_rows, Matrix};

const TASK_MAGIC: &str = "plpp-task";
const TASK_VERSION: u32 = 1;
/// Mixed into the task seed for the base/novel shuffle.
const SPLIT_STREAM: u64 = 0x5eed_ba5e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub num_classes: usize,
    pub shots_per_class: usize,
    pub test_per_class: usize,
    pub joint_dim: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Class tokens are drawn from `0..vocab_size - 1`; the last id is reserved.
    pub vocab_size: usize,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            shots_per_class: 4,
            test_per_class: 20,
            joint_dim: 16,
            noise_sigma: 0.5,
            seed: 0,
            vocab_size: 256,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 2, Parameter, "need at least 2 classes, got {}", self.num_classes);
        ensure!(self.shots_per_class >= 1, Parameter, "need at least 1 shot per class");
        ensure!(self.test_per_class >= 1, Parameter, "need at least 1 test image per class");
        ensure!(self.joint_dim >= 1, Parameter, "joint_dim must be at least 1");
        ensure!(
            self.noise_sigma >= 0.0 && self.noise_sigma.is_finite(),
            Parameter,
            "noise_sigma must be finite and non-negative, got {}",
            self.noise_sigma
        );
        ensure!(
            self.vocab_size > self.num_classes,
            Parameter,
            "vocabulary of {} cannot hold {} distinct class tokens plus end-of-text",
            self.vocab_size,
            self.num_classes
        );
        Ok(())
    }
}

/// Base and novel class ids; disjoint, covering every class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub base: Vec<usize>,
    pub novel: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FewShotTask {
    pub spec: SyntheticTaskSpec,
    pub classes: Vec<ClassSpec>,
    /// Unit-norm class directions, `K x joint_dim`.
    pub prototypes: Matrix,
    pub train: ImageFeatureBank,
    pub test: ImageFeatureBank,
    pub partition: Option<ClassPartition>,
}

/// Draws prototypes, class tokens and noisy unit-norm image features from `spec.seed`.
pub fn generate_task(spec: &SyntheticTaskSpec) -> Result<FewShotTask> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.num_classes;
    let j = spec.joint_dim;

    let tokens = sample(&mut rng, spec.vocab_size - 1, k).into_vec();
    let raw = Matrix::from_fn(k, j, |_, _| StandardNormal.sample(&mut rng));
    let prototypes = l2_normalize_rows(&raw)?;
    let classes = tokens
        .into_iter()
        .enumerate()
        .map(|(class_id, class_token)| ClassSpec {
            class_id,
            class_token,
            name: format!("class_{class_id:02}"),
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut bank = |per_class: usize| -> Result<ImageFeatureBank> {
        let mut values = Vec::with_capacity(k * per_class * j);
        let mut labels = Vec::with_capacity(k * per_class);
        for c in 0..k {
            for _ in 0..per_class {
                values.extend(prototypes.row(c).iter().map(|p| p + noise.sample(&mut rng)));
                labels.push(c);
            }
        }
        let features = l2_normalize_rows(&Matrix::from_vec(labels.len(), j, values)?)?;
        ImageFeatureBank::new(features, labels)
    };
    let train = bank(spec.shots_per_class)?;
    let test = bank(spec.test_per_class)?;

    Ok(FewShotTask {
        spec: spec.clone(),
        classes,
        prototypes,
        train,
        test,
        partition: None,
    })
}

/// Shuffles the classes with the task seed and puts the first `ceil(K * base_fraction)` in the base group.
pub fn base_novel_split(task: &FewShotTask, base_fraction: f64) -> Result<FewShotTask> {
    ensure!(
        base_fraction > 0.0 && base_fraction < 1.0,
        Parameter,
        "base fraction must lie strictly between 0 and 1, got {base_fraction}"
    );
    let k = task.classes.len();
    // tolerance keeps e.g. 10 * 0.3 from rounding up to 4
    let n_base = ((k as f64) * base_fraction - 1e-9).ceil() as usize;
    ensure!(
        n_base >= 1 && n_base < k,
        Parameter,
        "fraction {base_fraction} of {k} classes leaves an empty group"
    );
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(task.spec.seed ^ SPLIT_STREAM));
    let mut base = order[..n_base].to_vec();
    let mut novel = order[n_base..].to_vec();
    base.sort_unstable();
    novel.sort_unstable();
    Ok(FewShotTask {
        partition: Some(ClassPartition { base, novel }),
        ..task.clone()
    })
}

/// `2 * base * novel / (base + novel)`.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    ensure!(
        base >= 0.0 && novel >= 0.0 && base.is_finite() && novel.is_finite(),
        Parameter,
        "accuracies must be finite and non-negative, got {base} and {novel}"
    );
    if base == 0.0 && novel == 0.0 {
        return Err(Error::Undefined("harmonic mean of two zeros".into()));
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Classes, training images and test images restricted to `class_ids`, relabelled to positions in it.
pub fn restrict_task(task: &FewShotTask, class_ids: &[usize]) -> Result<(Vec<ClassSpec>, ImageFeatureBank, ImageFeatureBank)> {
    let classes = class_ids
        .iter()
        .map(|&c| {
            task.classes
                .get(c)
                .cloned()
                .ok_or_else(|| Error::Parameter(format!("unknown class {c}")))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((classes, task.train.restrict(class_ids)?, task.test.restrict(class_ids)?))
}

impl FewShotTask {
    pub fn validate(&self) -> Result<()> {
        let k = self.classes.len();
        ensure!(
            self.classes.iter().enumerate().all(|(i, c)| c.class_id == i),
            Contract,
            "class ids must be 0..K in order"
        );
        let mut tokens: Vec<usize> = self.classes.iter().map(|c| c.class_token).collect();
        tokens.sort_unstable();
        tokens.dedup();
        ensure!(tokens.len() == k, Contract, "class tokens must be unique");
        for bank in [&self.train, &self.test] {
            ensure!(
                bank.labels.iter().all(|&l| l < k),
                Contract,
                "image label references a missing class"
            );
        }
        if let Some(p) = &self.partition {
            let mut all: Vec<usize> = p.base.iter().chain(&p.novel).copied().collect();
            all.sort_unstable();
            ensure!(
                all == (0..k).collect::<Vec<_>>() && !p.base.is_empty() && !p.novel.is_empty(),
                Contract,
                "partition must split the classes into two non-empty disjoint groups"
            );
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        let _ = writeln!(out, "{TASK_MAGIC} {TASK_VERSION}");
        let _ = writeln!(
            out,
            "spec num_classes={} shots_per_class={} test_per_class={} joint_dim={} noise_sigma={} seed={} vocab_size={}",
            s.num_classes,
            s.shots_per_class,
            s.test_per_class,
            s.joint_dim,
            sig17(s.noise_sigma),
            s.seed,
            s.vocab_size
        );
        for c in &self.classes {
            let _ = write!(out, "class {} {} {}", c.class_id, c.class_token, c.name);
            push_values(&mut out, self.prototypes.row(c.class_id));
        }
        if let Some(p) = &self.partition {
            for (name, ids) in [("base", &p.base), ("novel", &p.novel)] {
                let _ = write!(out, "partition {name}");
                for id in ids {
                    let _ = write!(out, " {id}");
                }
                out.push('\n');
            }
        }
        for (split, bank) in [("train", &self.train), ("test", &self.test)] {
            for (i, label) in bank.labels.iter().enumerate() {
                let _ = write!(out, "image {split} {label}");
                push_values(&mut out, bank.features.row(i));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path, message),
            other => Error::format(path, other.to_string()),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::format("<task>", format!("line {}: {msg}", line + 1));
        let mut lines = text.lines().enumerate();

        let (n, header) = lines.next().ok_or_else(|| bad(0, "empty file"))?;
        ensure_format(header == format!("{TASK_MAGIC} {TASK_VERSION}"), || bad(n, "not a task file"))?;

        let (n, spec_line) = lines.next().ok_or_else(|| bad(1, "missing spec record"))?;
        let spec = parse_spec(spec_line).ok_or_else(|| bad(n, "malformed spec record"))?;
        spec.validate().map_err(|e| bad(n, &e.to_string()))?;
        let j = spec.joint_dim;

        let mut classes = Vec::new();
        let mut prototypes = Vec::new();
        let mut base = None;
        let mut novel = None;
        let mut banks: [(Vec<f64>, Vec<usize>); 2] = Default::default();
        for (n, line) in lines {
            let mut fields = line.split(' ');
            match fields.next() {
                Some("class") => {
                    let id = parse_usize(fields.next()).ok_or_else(|| bad(n, "class id"))?;
                    let token = parse_usize(fields.next()).ok_or_else(|| bad(n, "class token"))?;
                    let name = fields.next().ok_or_else(|| bad(n, "class name"))?.to_string();
                    let values = parse_values(fields, j).ok_or_else(|| bad(n, "prototype values"))?;
                    prototypes.extend(values);
                    classes.push(ClassSpec {
                        class_id: id,
                        class_token: token,
                        name,
                    });
                }
                Some("partition") => {
                    let group = fields.next();
                    let ids = fields
                        .map(|f| f.parse::<usize>().ok())
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(|| bad(n, "partition ids"))?;
                    match group {
                        Some("base") => base = Some(ids),
                        Some("novel") => novel = Some(ids),
                        _ => return Err(bad(n, "unknown partition group")),
                    }
                }
                Some("image") => {
                    let slot = match fields.next() {
                        Some("train") => 0,
                        Some("test") => 1,
                        _ => return Err(bad(n, "image split")),
                    };
                    let label = parse_usize(fields.next()).ok_or_else(|| bad(n, "image label"))?;
                    let values = parse_values(fields, j).ok_or_else(|| bad(n, "feature values"))?;
                    banks[slot].0.extend(values);
                    banks[slot].1.push(label);
                }
                _ => return Err(bad(n, "unknown record")),
            }
        }

        let partition = match (base, novel) {
            (Some(base), Some(novel)) => Some(ClassPartition { base, novel }),
            (None, None) => None,
            _ => return Err(bad(0, "partition needs both base and novel records")),
        };
        let [(train_v, train_l), (test_v, test_l)] = banks;
        let task = FewShotTask {
            prototypes: Matrix::from_vec(classes.len(), j, prototypes)?,
            classes,
            train: ImageFeatureBank::new(Matrix::from_vec(train_l.len(), j, train_v)?, train_l)?,
            test: ImageFeatureBank::new(Matrix::from_vec(test_l.len(), j, test_v)?, test_l)?,
            partition,
            spec,
        };
        ensure!(
            task.classes.len() == task.spec.num_classes,
            Contract,
            "{} class records for {} classes",
            task.classes.len(),
            task.spec.num_classes
        );
        task.validate()?;
        Ok(task)
    }
}

fn ensure_format(cond: bool, err: impl FnOnce() -> Error) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(err())
    }
}

fn push_values(out: &mut String, values: &[f64]) {
    for v in values {
        out.push(' ');
        out.push_str(&sig17(*v));
    }
    out.push('\n');
}

fn parse_usize(field: Option<&str>) -> Option<usize> {
    field?.parse().ok()
}

fn parse_values<'a>(fields: impl Iterator<Item = &'a str>, expected: usize) -> Option<Vec<f64>> {
    let values: Vec<f64> = fields.map(|f| f.parse().ok()).collect::<Option<_>>()?;
    (values.len() == expected && values.iter().all(|v| v.is_finite())).then_some(values)
}

fn parse_spec(line: &str) -> Option<SyntheticTaskSpec> {
    let mut fields = line.split(' ');
    if fields.next()? != "spec" {
        return None;
    }
    let mut get = |key: &str| -> Option<String> {
        let (k, v) = fields.next()?.split_once('=')?;
        (k == key).then(|| v.to_string())
    };
    let spec = SyntheticTaskSpec {
        num_classes: get("num_classes")?.parse().ok()?,
        shots_per_class: get("shots_per_class")?.parse().ok()?,
        test_per_class: get("test_per_class")?.parse().ok()?,
        joint_dim: get("joint_dim")?.parse().ok()?,
        noise_sigma: get("noise_sigma")?.parse().ok()?,
        seed: get("seed")?.parse().ok()?,
        vocab_size: get("vocab_size")?.parse().ok()?,
    };
    fields.next().is_none().then_some(spec)
}

/// One line of an accuracy table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub task: String,
    pub seed: u64,
    pub objective: String,
    pub lambda: f64,
    pub alpha: f64,
    pub k: usize,
    pub split: String,
    pub accuracy: f64,
}

impl AccuracyRow {
    pub const CSV_HEADER: [&'static str; 8] =
        ["task", "seed", "objective", "lambda", "alpha", "k", "split", "accuracy"];

    pub fn csv_record(&self) -> [String; 8] {
        [
            self.task.clone(),
            self.seed.to_string(),
            self.objective.clone(),
            sig17(self.lambda),
            sig17(self.alpha),
            self.k.to_string(),
            self.split.clone(),
            sig17(self.accuracy),
        ]
    }
}
