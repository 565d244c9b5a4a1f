//! Recursive weakly supervised relabeling.
//!
//! After a few warm-up rounds on the original labels, every round rewrites
//! the training labels from the skin attention map and trains on the
//! result; the threshold rises each round. The first drop of the validation
//! metric ends the search and the labels from the round before the drop are
//! kept for the remaining training budget.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec;
use crate::error::{Error, Result};
use crate::metrics::MonitorMetric;
use crate::parallel::par_map;
use crate::types::{BinaryMask, SkinProbMap};

/// Thresholds are never scheduled above this value.
pub const T_MAX: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelSchedule {
    pub warmup_rounds: usize,
    pub t0: f64,
    pub t_step: f64,
    pub epochs_per_round: usize,
    pub monitor_metric: MonitorMetric,
}

impl Default for RelabelSchedule {
    fn default() -> Self {
        Self {
            warmup_rounds: 2,
            t0: 0.2,
            t_step: 0.05,
            epochs_per_round: 1,
            monitor_metric: MonitorMetric::F1,
        }
    }
}

impl RelabelSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = self.t0 > 0.0
            && self.t0 < 1.0
            && self.t_step > 0.0
            && self.t_step.is_finite()
            && self.warmup_rounds >= 1
            && self.epochs_per_round >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("relabel schedule out of range: {self:?}")))
        }
    }

    /// Threshold after `completed` modification rounds.
    pub fn threshold(&self, completed: usize) -> f64 {
        self.t0 + self.t_step * completed as f64
    }
}

/// One relabeling step: inside the body a pixel stays skin iff
/// `prev * p > t`; outside the body the previous label is kept.
pub fn relabel_mask(prev: &BinaryMask, p: &SkinProbMap, body: &BinaryMask, t: f64) -> Result<BinaryMask> {
    if !prev.same_dims(body) || (p.height(), p.width()) != (prev.height(), prev.width()) {
        return Err(Error::shape(format!(
            "labels {}x{}, map {}x{}, body {}x{}",
            prev.height(),
            prev.width(),
            p.height(),
            p.width(),
            body.height(),
            body.width()
        )));
    }
    let values = prev
        .values()
        .iter()
        .zip(p.values())
        .zip(body.values())
        .map(|((&l, &a), &b)| if b == 1 { u8::from(l as f64 * a > t) } else { l })
        .collect();
    BinaryMask::new(prev.height(), prev.width(), values)
}

/// Stop once the latest validation value falls below the one before it.
pub fn stop_decision(history: &[f64]) -> bool {
    matches!(history, [.., prev, last] if last < prev)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelabelState {
    pub round_index: usize,
    pub current_t: f64,
    /// Identifier of every persisted generation; index = generation number.
    pub label_generations: Vec<String>,
    pub validation_history: Vec<(usize, f64)>,
    pub stopped: bool,
    pub final_generation: Option<usize>,
}

/// Training hooks the recursive loop drives.
pub trait RoundTrainer {
    type Snapshot;

    /// One epoch over the training set with `labels` (training order).
    /// Returns the mean training loss.
    fn train_epoch(&mut self, labels: &[BinaryMask]) -> Result<f64>;
    /// Skin attention map per training image before the ω gate, at image
    /// resolution.
    fn attention_maps(&self) -> Result<Vec<SkinProbMap>>;
    /// Monitored validation metric.
    fn validate(&self) -> Result<f64>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
}

/// Where label generations and journal entries go.
pub trait GenerationStore {
    /// Persist generation `k`; returns its identifier.
    fn persist(&mut self, k: usize, stems: &[String], labels: &[BinaryMask]) -> Result<String>;
    fn load(&self, k: usize, stems: &[String]) -> Result<Vec<BinaryMask>>;
    fn journal(&mut self, entry: &JournalEntry) -> Result<()>;
}

/// Keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct MemoryStore {
    pub generations: Vec<Vec<BinaryMask>>,
    pub entries: Vec<JournalEntry>,
}

impl GenerationStore for MemoryStore {
    fn persist(&mut self, k: usize, _stems: &[String], labels: &[BinaryMask]) -> Result<String> {
        self.generations.truncate(k);
        self.generations.push(labels.to_vec());
        Ok(generation_dir_name(k))
    }

    fn load(&self, k: usize, _stems: &[String]) -> Result<Vec<BinaryMask>> {
        self.generations
            .get(k)
            .cloned()
            .ok_or_else(|| Error::InvalidValue(format!("no label generation {k}")))
    }

    fn journal(&mut self, entry: &JournalEntry) -> Result<()> {
        self.entries.push(entry.clone());
        Ok(())
    }
}

pub fn generation_dir_name(k: usize) -> String {
    format!("labels_gen{k}")
}

pub const JOURNAL_FILE: &str = "relabel_state.log";

/// `<run_dir>/labels_gen<k>/<stem>.png` plus `<run_dir>/relabel_state.log`.
#[derive(Clone, Debug)]
pub struct DirStore {
    run_dir: PathBuf,
}

impl DirStore {
    /// Starts a fresh journal in `run_dir`.
    pub fn create(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let journal = run_dir.join(JOURNAL_FILE);
        fs::write(&journal, b"").map_err(|e| Error::io(&journal, e))?;
        Ok(Self {
            run_dir: run_dir.to_path_buf(),
        })
    }

    pub fn generation_dir(&self, k: usize) -> PathBuf {
        self.run_dir.join(generation_dir_name(k))
    }
}

impl GenerationStore for DirStore {
    /// Written to a temporary directory first, then renamed into place.
    fn persist(&mut self, k: usize, stems: &[String], labels: &[BinaryMask]) -> Result<String> {
        let dir = self.generation_dir(k);
        let tmp = self.run_dir.join(format!(".{}.tmp", generation_dir_name(k)));
        for d in [&tmp, &dir] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
            }
        }
        fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
        for (stem, m) in stems.iter().zip(labels) {
            codec::save_binary_mask(&tmp.join(format!("{stem}.png")), m)?;
        }
        fs::rename(&tmp, &dir).map_err(|e| Error::io(&dir, e))?;
        Ok(generation_dir_name(k))
    }

    fn load(&self, k: usize, stems: &[String]) -> Result<Vec<BinaryMask>> {
        let dir = self.generation_dir(k);
        stems
            .iter()
            .map(|s| codec::load_binary_mask(&dir.join(format!("{s}.png"))))
            .collect()
    }

    fn journal(&mut self, entry: &JournalEntry) -> Result<()> {
        let path = self.run_dir.join(JOURNAL_FILE);
        let mut f = OpenOptions::new()
            .append(true)
            .create(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{entry}").map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    Modify,
}

/// One line of the relabel journal.
#[derive(Clone, Debug, PartialEq)]
pub enum JournalEntry {
    Round {
        round: usize,
        phase: Phase,
        generation: usize,
        t: Option<f64>,
        metric: f64,
    },
    Stop {
        round: usize,
        final_generation: usize,
    },
    CurrentT(f64),
    Final {
        epochs: usize,
        metric: f64,
    },
}

impl fmt::Display for JournalEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JournalEntry::Round {
                round,
                phase,
                generation,
                t,
                metric,
            } => {
                let phase = match phase {
                    Phase::Warmup => "warmup",
                    Phase::Modify => "modify",
                };
                let t = t.map_or("none".to_string(), |t| format!("{t:.2}"));
                write!(
                    f,
                    "round={round} phase={phase} generation={generation} t={t} metric={metric:.6}"
                )
            }
            JournalEntry::Stop {
                round,
                final_generation,
            } => {
                write!(f, "stop round={round} final_generation={final_generation}")
            }
            JournalEntry::CurrentT(t) => write!(f, "current_t={t:.2}"),
            JournalEntry::Final { epochs, metric } => write!(f, "final epochs={epochs} metric={metric:.6}"),
        }
    }
}

fn fields<'a>(words: impl Iterator<Item = &'a str>, n: usize) -> std::result::Result<Vec<(&'a str, &'a str)>, String> {
    let out: Vec<(&str, &str)> = words
        .map(|w| w.split_once('=').ok_or_else(|| format!("`{w}` is not key=value")))
        .collect::<std::result::Result<_, _>>()?;
    if out.len() != n {
        return Err(format!("expected {n} fields, found {}", out.len()));
    }
    Ok(out)
}

fn value<'a>(f: &[(&str, &'a str)], i: usize, key: &str) -> std::result::Result<&'a str, String> {
    match f.get(i) {
        Some(&(k, v)) if k == key => Ok(v),
        _ => Err(format!("expected `{key}=` as field {}", i + 1)),
    }
}

fn num<T: std::str::FromStr>(s: &str, key: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("bad {key} `{s}`"))
}

fn real(s: &str, key: &str) -> std::result::Result<f64, String> {
    let v: f64 = num(s, key)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("non-finite {key}"))
    }
}

fn parse_line(line: &str) -> std::result::Result<JournalEntry, String> {
    let mut words = line.split_ascii_whitespace().peekable();
    match words.peek().copied() {
        Some("stop") => {
            words.next();
            let f = fields(words, 2)?;
            Ok(JournalEntry::Stop {
                round: num(value(&f, 0, "round")?, "round")?,
                final_generation: num(value(&f, 1, "final_generation")?, "generation")?,
            })
        }
        Some("final") => {
            words.next();
            let f = fields(words, 2)?;
            Ok(JournalEntry::Final {
                epochs: num(value(&f, 0, "epochs")?, "epochs")?,
                metric: real(value(&f, 1, "metric")?, "metric")?,
            })
        }
        Some(w) if w.starts_with("current_t=") => {
            let f = fields(words, 1)?;
            Ok(JournalEntry::CurrentT(real(value(&f, 0, "current_t")?, "t")?))
        }
        Some(w) if w.starts_with("round=") => {
            let f = fields(words, 5)?;
            let phase = match value(&f, 1, "phase")? {
                "warmup" => Phase::Warmup,
                "modify" => Phase::Modify,
                p => return Err(format!("unknown phase `{p}`")),
            };
            let t = match value(&f, 3, "t")? {
                "none" => None,
                s => Some(real(s, "t")?),
            };
            Ok(JournalEntry::Round {
                round: num(value(&f, 0, "round")?, "round")?,
                phase,
                generation: num(value(&f, 2, "generation")?, "generation")?,
                t,
                metric: real(value(&f, 4, "metric")?, "metric")?,
            })
        }
        _ => Err("unrecognized entry".into()),
    }
}

/// Parse a journal written by [`DirStore`]. Blank lines are skipped.
pub fn parse_journal(text: &str) -> Result<Vec<JournalEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_line(l).map_err(|m| Error::Journal(format!("line {}: {m}", i + 1))))
        .collect()
}

/// Training set as seen by the relabeler.
#[derive(Clone, Copy, Debug)]
pub struct RelabelInputs<'a> {
    pub stems: &'a [String],
    /// Generation 0.
    pub labels: &'a [BinaryMask],
    /// Body mask per image; relabeling is confined to it.
    pub bodies: &'a [BinaryMask],
}

#[derive(Clone, Debug)]
pub struct RelabelOutcome {
    pub state: RelabelState,
    pub final_labels: Vec<BinaryMask>,
    /// Monitored metric after the remaining budget is spent.
    pub final_metric: f64,
    pub epochs_spent: usize,
    pub modification_rounds: usize,
}

struct Budget {
    total: usize,
    spent: usize,
}

impl Budget {
    fn train<T: RoundTrainer>(&mut self, trainer: &mut T, labels: &[BinaryMask], epochs: usize) -> Result<usize> {
        let n = epochs.min(self.total - self.spent);
        for _ in 0..n {
            trainer.train_epoch(labels)?;
            self.spent += 1;
        }
        Ok(n)
    }
}

/// Run the full protocol with a budget of `total_epochs` training epochs
/// (including the round rolled back after the drop).
pub fn run_recursive_training<T: RoundTrainer>(
    trainer: &mut T,
    inputs: RelabelInputs,
    schedule: &RelabelSchedule,
    total_epochs: usize,
    store: &mut dyn GenerationStore,
    workers: usize,
) -> Result<RelabelOutcome> {
    schedule.validate()?;
    let n = inputs.labels.len();
    if n == 0 {
        return Err(Error::DatasetEmpty("no training images to relabel".into()));
    }
    if inputs.stems.len() != n || inputs.bodies.len() != n {
        return Err(Error::shape(format!(
            "{} stems, {n} labels, {} body masks",
            inputs.stems.len(),
            inputs.bodies.len()
        )));
    }
    let mut budget = Budget {
        total: total_epochs,
        spent: 0,
    };
    let mut state = RelabelState {
        round_index: 0,
        current_t: schedule.t0,
        label_generations: vec![store.persist(0, inputs.stems, inputs.labels)?],
        validation_history: Vec::new(),
        stopped: false,
        final_generation: None,
    };
    let e = schedule.epochs_per_round;

    for _ in 0..schedule.warmup_rounds {
        if budget.train(trainer, inputs.labels, e)? == 0 {
            break;
        }
        state.round_index += 1;
        let metric = trainer.validate()?;
        state.validation_history.push((state.round_index, metric));
        store.journal(&JournalEntry::Round {
            round: state.round_index,
            phase: Phase::Warmup,
            generation: 0,
            t: None,
            metric,
        })?;
    }

    let mut kept_labels = inputs.labels.to_vec();
    let mut kept_gen = 0;
    let mut kept_snapshot = trainer.snapshot();
    let mut completed = 0;
    loop {
        let t = schedule.threshold(completed);
        if t > T_MAX + 1e-12 || budget.spent + e > budget.total || state.validation_history.is_empty() {
            break;
        }
        let maps = trainer.attention_maps()?;
        if maps.len() != n {
            return Err(Error::shape(format!("{} attention maps for {n} images", maps.len())));
        }
        let idx: Vec<usize> = (0..n).collect();
        let next: Vec<BinaryMask> = par_map(&idx, workers, |&i| {
            relabel_mask(&kept_labels[i], &maps[i], &inputs.bodies[i], t)
        })
        .into_iter()
        .collect::<Result<_>>()?;
        let k = completed + 1;
        state.label_generations.truncate(k);
        state.label_generations.push(store.persist(k, inputs.stems, &next)?);

        budget.train(trainer, &next, e)?;
        completed += 1;
        state.round_index += 1;
        let metric = trainer.validate()?;
        state.validation_history.push((state.round_index, metric));
        store.journal(&JournalEntry::Round {
            round: state.round_index,
            phase: Phase::Modify,
            generation: k,
            t: Some(t),
            metric,
        })?;
        let history: Vec<f64> = state.validation_history.iter().map(|&(_, m)| m).collect();
        if stop_decision(&history) {
            trainer.restore(kept_snapshot);
            break;
        }
        kept_labels = next;
        kept_gen = k;
        kept_snapshot = trainer.snapshot();
    }

    state.current_t = schedule.threshold(completed);
    state.stopped = true;
    state.final_generation = Some(kept_gen);
    store.journal(&JournalEntry::Stop {
        round: state.round_index,
        final_generation: kept_gen,
    })?;
    store.journal(&JournalEntry::CurrentT(state.current_t))?;

    let remaining = budget.total - budget.spent;
    budget.train(trainer, &kept_labels, remaining)?;
    let final_metric = trainer.validate()?;
    store.journal(&JournalEntry::Final {
        epochs: budget.spent,
        metric: final_metric,
    })?;
    Ok(RelabelOutcome {
        state,
        final_labels: kept_labels,
        final_metric,
        epochs_spent: budget.spent,
        modification_rounds: completed,
    })
}
