//! Scripted runs of the debias loop: generate a biased dataset, train,
//! cluster latents into style groups, translate sources across groups,
//! register the results and retrain.
//!
//! Scripts are JSON. Image sources are picked by declarative filters rather
//! than ids, so a script keeps working when the dataset is regenerated.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{batch_translate, compute_style_stats, kmeans, majority_labels, ClusterResult, StyleStats};
use crate::dataset::{generate_biased_dataset, BiasedDatasetSpec, Dataset, HistoryLog, HistoryRecord, ImageSample, Provenance, Split};
use crate::engine::{extract_latents, init_model, predict, train, Checkpoint, ConvNetConfig, TrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayScript {
    pub dataset: BiasedDatasetSpec,
    pub model: ConvNetConfig,
    pub steps: Vec<Step>,
}

fn yes() -> bool {
    true
}

fn default_cluster_splits() -> Vec<Split> {
    vec![Split::Train, Split::Val]
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Step {
    /// Trains a child of the active checkpoint, or of a fresh
    /// initialization when `warm_start` is false, and activates it.
    Train {
        config: TrainConfig,
        #[serde(default = "yes")]
        warm_start: bool,
    },
    /// k-means over the active checkpoint's latents.
    Cluster {
        k: usize,
        seed: u64,
        #[serde(default = "default_cluster_splits")]
        splits: Vec<Split>,
    },
    /// Translates the selected sources toward the chosen clusters' styles;
    /// the results wait for an `augment` step.
    Translate {
        selector: Selector,
        clusters: ClusterTargets,
        #[serde(default = "one")]
        count: usize,
    },
    /// Registers pending translations as training images.
    Augment {
        #[serde(default)]
        label: TargetLabel,
    },
    /// Runs `steps` up to `times` times, stopping early once the active
    /// checkpoint's test accuracy reaches `until_test_accuracy`.
    Repeat {
        times: usize,
        #[serde(default)]
        until_test_accuracy: Option<f64>,
        steps: Vec<Step>,
    },
}

fn train_split() -> Split {
    Split::Train
}

/// Which images a translate step starts from. Candidates are filtered,
/// ordered by id, shuffled with `seed`, then capped per class and overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selector {
    #[serde(default = "train_split")]
    pub split: Split,
    #[serde(default)]
    pub classes: Option<Vec<usize>>,
    /// Only images the active checkpoint gets wrong.
    #[serde(default)]
    pub misclassified: bool,
    /// Skip images already used as a source by an earlier translate step.
    #[serde(default)]
    pub exclude_previous_sources: bool,
    #[serde(default)]
    pub include_augmented: bool,
    #[serde(default)]
    pub per_class: Option<usize>,
    #[serde(default)]
    pub limit: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterTargets {
    /// Every cluster whose majority label differs from the source's label.
    OffClass,
    All,
    Only(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetLabel {
    /// Keep each source's own label.
    #[default]
    Source,
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub checkpoint_id: String,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum StepRecord {
    Train {
        parent_id: String,
        warm_start: bool,
        epochs: usize,
        final_train_loss: Option<f64>,
        final_val_loss: Option<f64>,
        evaluation: Evaluation,
    },
    Cluster {
        k: usize,
        seed: u64,
        inertia: f64,
        sizes: Vec<usize>,
        majority_labels: Vec<Option<usize>>,
    },
    Translate {
        sources: usize,
        generated: usize,
    },
    Augment {
        added: usize,
        dataset_version: String,
    },
    Stop {
        reason: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub initial: Evaluation,
    #[serde(rename = "final")]
    pub final_: Evaluation,
    /// Final minus initial test accuracy.
    pub test_accuracy_lift: f64,
    /// Train steps after the first one.
    pub retrains: usize,
    pub augmented_images: usize,
    pub dataset_version: String,
    pub steps: Vec<StepRecord>,
}

/// Everything a replay produced, for callers that want to persist it.
pub struct ReplayOutcome {
    pub report: ReplayReport,
    pub dataset: Dataset,
    /// In creation order, starting with the untrained root.
    pub checkpoints: Vec<Checkpoint>,
    pub history: Vec<HistoryRecord>,
}

impl ReplayScript {
    pub fn validate(&self) -> Result<()> {
        fn count_trains(steps: &[Step]) -> usize {
            steps
                .iter()
                .map(|s| match s {
                    Step::Train { .. } => 1,
                    Step::Repeat { steps, .. } => count_trains(steps),
                    _ => 0,
                })
                .sum()
        }
        if !matches!(self.steps.first(), Some(Step::Train { .. })) {
            return Err(Error::invalid("steps", "a replay script must start with a train step"));
        }
        if count_trains(&self.steps) == 0 {
            return Err(Error::invalid("steps", "a replay script needs at least one train step"));
        }
        self.dataset.validate()?;
        if self.model.num_classes != self.dataset.num_classes {
            return Err(Error::invalid(
                "model.num_classes",
                format!("model has {} classes, dataset {}", self.model.num_classes, self.dataset.num_classes),
            ));
        }
        Ok(())
    }
}

struct State {
    dataset: Dataset,
    root: Checkpoint,
    active: Checkpoint,
    checkpoints: Vec<Checkpoint>,
    history: HistoryLog,
    clusters: Option<(ClusterResult, Vec<Option<usize>>, Vec<StyleStats>)>,
    pending: Vec<ImageSample>,
    used_sources: HashSet<String>,
    records: Vec<StepRecord>,
    evaluations: Vec<Evaluation>,
    augmented: usize,
}

fn accuracy(checkpoint: &Checkpoint, dataset: &Dataset, split: Split) -> Result<f64> {
    Ok(predict(checkpoint, dataset, split)?.accuracy())
}

fn evaluate(checkpoint: &Checkpoint, dataset: &Dataset) -> Result<Evaluation> {
    Ok(Evaluation {
        checkpoint_id: checkpoint.id.clone(),
        train_accuracy: accuracy(checkpoint, dataset, Split::Train)?,
        val_accuracy: accuracy(checkpoint, dataset, Split::Val)?,
        test_accuracy: accuracy(checkpoint, dataset, Split::Test)?,
    })
}

impl State {
    fn push(&mut self, record: StepRecord, observer: &mut dyn FnMut(&StepRecord)) {
        observer(&record);
        self.records.push(record);
    }

    fn select(&self, selector: &Selector) -> Result<Vec<&ImageSample>> {
        let wrong: Option<HashSet<String>> = if selector.misclassified {
            let preds = predict(&self.active, &self.dataset, selector.split)?;
            Some(preds.records.into_iter().filter(|r| !r.correct).map(|r| r.image_id).collect())
        } else {
            None
        };
        let mut candidates: Vec<&ImageSample> = self
            .dataset
            .split(selector.split)
            .filter(|s| selector.include_augmented || s.provenance == Provenance::Original)
            .filter(|s| selector.classes.as_ref().is_none_or(|c| c.contains(&s.label)))
            .filter(|s| wrong.as_ref().is_none_or(|w| w.contains(&s.id)))
            .filter(|s| !selector.exclude_previous_sources || !self.used_sources.contains(&s.id))
            .collect();
        candidates.sort_by(|a, b| a.id.cmp(&b.id));
        candidates.shuffle(&mut ChaCha8Rng::seed_from_u64(selector.seed));
        if let Some(per_class) = selector.per_class {
            let mut taken = BTreeMap::<usize, usize>::new();
            candidates.retain(|s| {
                let n = taken.entry(s.label).or_default();
                *n += 1;
                *n <= per_class
            });
        }
        if let Some(limit) = selector.limit {
            candidates.truncate(limit);
        }
        Ok(candidates)
    }

    fn run(&mut self, step: &Step, observer: &mut dyn FnMut(&StepRecord)) -> Result<()> {
        match step {
            Step::Train { config, warm_start } => {
                let parent = if *warm_start { self.active.clone() } else { self.root.clone() };
                let child = train(&parent, &self.dataset, config, |_| {})?;
                let evaluation = evaluate(&child, &self.dataset)?;
                let last = child.epoch_losses.last().copied();
                self.evaluations.push(evaluation.clone());
                self.checkpoints.push(child.clone());
                self.active = child;
                self.push(
                    StepRecord::Train {
                        parent_id: parent.id,
                        warm_start: *warm_start,
                        epochs: config.epochs,
                        final_train_loss: last.map(|l| l.train_loss),
                        final_val_loss: last.map(|l| l.val_loss),
                        evaluation,
                    },
                    observer,
                );
            }
            Step::Cluster { k, seed, splits } => {
                let latents = extract_latents(&self.active, &self.dataset, splits)?;
                let result = kmeans(&latents, *k, *seed)?;
                let majority = majority_labels(&result, &self.dataset);
                let styles = (0..result.k)
                    .map(|c| compute_style_stats(&self.dataset, &result, c))
                    .collect::<Result<Vec<_>>>()?;
                let record = StepRecord::Cluster {
                    k: result.k,
                    seed: result.seed,
                    inertia: result.inertia,
                    sizes: result.sizes(),
                    majority_labels: majority.clone(),
                };
                self.clusters = Some((result, majority, styles));
                self.push(record, observer);
            }
            Step::Translate { selector, clusters, count } => {
                let Some((result, majority, styles)) = &self.clusters else {
                    return Err(Error::invalid("steps", "translate needs an earlier cluster step"));
                };
                let sources = self.select(selector)?;
                let mut generated = Vec::new();
                for source in &sources {
                    let targets: Vec<usize> = match clusters {
                        ClusterTargets::OffClass => (0..result.k).filter(|&c| majority[c] != Some(source.label)).collect(),
                        ClusterTargets::All => (0..result.k).collect(),
                        ClusterTargets::Only(list) => {
                            if let Some(&bad) = list.iter().find(|&&c| c >= result.k) {
                                return Err(Error::invalid("clusters", format!("{bad} is not below K = {}", result.k)));
                            }
                            list.clone()
                        }
                    };
                    for c in targets {
                        generated.extend(batch_translate(&[source], &styles[c], *count)?);
                    }
                }
                let source_ids: Vec<String> = sources.iter().map(|s| s.id.clone()).collect();
                let record = StepRecord::Translate {
                    sources: sources.len(),
                    generated: generated.len(),
                };
                self.used_sources.extend(source_ids);
                self.pending.extend(generated);
                self.push(record, observer);
            }
            Step::Augment { label } => {
                if self.pending.is_empty() {
                    return Err(Error::invalid("steps", "augment has no translated images to register"));
                }
                let pending = std::mem::take(&mut self.pending);
                let mut by_label: BTreeMap<usize, Vec<ImageSample>> = BTreeMap::new();
                for s in pending {
                    let target = match label {
                        TargetLabel::Source => s.label,
                        TargetLabel::Class(c) => *c,
                    };
                    by_label.entry(target).or_default().push(s);
                }
                let mut added = 0;
                for (target, samples) in by_label {
                    added += samples.len();
                    self.dataset = self.dataset.register_augmented(samples, target, &mut self.history, Some(&self.active.id))?;
                }
                self.augmented += added;
                let record = StepRecord::Augment {
                    added,
                    dataset_version: self.dataset.version(),
                };
                self.push(record, observer);
            }
            Step::Repeat { times, until_test_accuracy, steps } => {
                for _ in 0..*times {
                    if let Some(target) = until_test_accuracy {
                        let current = self.evaluations.last().map_or(0.0, |e| e.test_accuracy);
                        if current >= *target {
                            let reason = format!("test accuracy {current:.4} reached {target}");
                            self.push(StepRecord::Stop { reason }, observer);
                            break;
                        }
                    }
                    for step in steps {
                        self.run(step, observer)?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Runs `script` from scratch. `observer` sees every step record as it is
/// produced.
pub fn run_replay(script: &ReplayScript, mut observer: impl FnMut(&StepRecord)) -> Result<ReplayOutcome> {
    script.validate()?;
    let dataset = generate_biased_dataset(&script.dataset)?;
    let root = init_model(&script.model)?;
    let mut state = State {
        dataset,
        active: root.clone(),
        checkpoints: vec![root.clone()],
        root,
        history: HistoryLog::in_memory(),
        clusters: None,
        pending: Vec::new(),
        used_sources: HashSet::new(),
        records: Vec::new(),
        evaluations: Vec::new(),
        augmented: 0,
    };
    for step in &script.steps {
        state.run(step, &mut observer)?;
    }
    let initial = state.evaluations.first().cloned().expect("validated: first step trains");
    let final_ = state.evaluations.last().cloned().expect("at least one evaluation");
    let report = ReplayReport {
        test_accuracy_lift: final_.test_accuracy - initial.test_accuracy,
        retrains: state.evaluations.len() - 1,
        augmented_images: state.augmented,
        dataset_version: state.dataset.version(),
        initial,
        final_,
        steps: state.records,
    };
    Ok(ReplayOutcome {
        report,
        dataset: state.dataset,
        checkpoints: state.checkpoints,
        history: state.history.records().to_vec(),
    })
}
