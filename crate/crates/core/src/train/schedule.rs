use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::seeds;

/// Relative mini-batch counts per subtask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRatios {
    pub t2t: f64,
    pub ssl: f64,
    pub s2p: f64,
    pub s2t: f64,
}

impl TaskRatios {
    /// Joint pre-training mix (T2T, SSL, S2P, S2T) = (1, 7, 0.5, 0.5).
    pub const JOINT: Self = Self::new(1.0, 7.0, 0.5, 0.5);
    pub const T2T_ONLY: Self = Self::new(1.0, 0.0, 0.0, 0.0);
    pub const FINETUNE: Self = Self::new(1.0, 0.0, 0.0, 1.0);

    pub const fn new(t2t: f64, ssl: f64, s2p: f64, s2t: f64) -> Self {
        Self { t2t, ssl, s2p, s2t }
    }

    pub fn get(&self, task: Task) -> f64 {
        match task {
            Task::T2t => self.t2t,
            Task::Ssl => self.ssl,
            Task::S2p => self.s2p,
            Task::S2t => self.s2t,
        }
    }

    pub fn set(&mut self, task: Task, value: f64) {
        match task {
            Task::T2t => self.t2t = value,
            Task::Ssl => self.ssl = value,
            Task::S2p => self.s2p = value,
            Task::S2t => self.s2t = value,
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        Task::ALL.map(|t| self.get(t))
    }

    /// Tasks with a positive ratio.
    pub fn active(&self) -> Vec<Task> {
        Task::ALL.into_iter().filter(|&t| self.get(t) > 0.0).collect()
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Smallest integer vector proportional to `ratios`, e.g.
/// `(1, 7, 0.5, 0.5) → (2, 14, 1, 1)`.
pub fn integer_expansion(ratios: [f64; 4]) -> Result<[usize; 4]> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(Error::config("ratios", "must be finite and non-negative"));
    }
    if ratios.iter().all(|&r| r == 0.0) {
        return Err(Error::config("ratios", "at least one task needs a positive ratio"));
    }
    const MAX_MULTIPLIER: u64 = 10_000;
    for m in 1..=MAX_MULTIPLIER {
        let scaled = ratios.map(|r| r * m as f64);
        if scaled.iter().all(|s| (s - s.round()).abs() <= 1e-9 * s.max(1.0)) {
            let ints = scaled.map(|s| s.round() as u64);
            let g = ints.iter().fold(0, |acc, &v| gcd(acc, v));
            return Ok(ints.map(|v| (v / g) as usize));
        }
    }
    Err(Error::config(
        "ratios",
        format!("{ratios:?} has no integer expansion with a multiplier up to {MAX_MULTIPLIER}"),
    ))
}

/// Interleaving of subtasks over updates. Updates are grouped into cycles
/// holding exactly [`cycle_counts`](Self::cycle_counts) batches of each task,
/// shuffled per cycle from the schedule seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSchedule {
    ratios: TaskRatios,
    counts: [usize; 4],
    seed: u64,
}

impl TaskSchedule {
    pub fn new(ratios: TaskRatios, seed: u64) -> Result<Self> {
        let counts = integer_expansion(ratios.as_array())?;
        Ok(Self { ratios, counts, seed })
    }

    pub fn ratios(&self) -> TaskRatios {
        self.ratios
    }

    pub fn cycle_counts(&self) -> [usize; 4] {
        self.counts
    }

    pub fn cycle_len(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Task order of cycle `index`.
    pub fn cycle(&self, index: u64) -> Vec<Task> {
        let mut tasks: Vec<Task> = Task::ALL
            .into_iter()
            .flat_map(|t| std::iter::repeat_n(t, self.counts[t.index()]))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.seed, "cycle", &[index]));
        tasks.shuffle(&mut rng);
        tasks
    }

    /// Task of zero-based update `u`.
    pub fn task_at(&self, u: u64) -> Task {
        let len = self.cycle_len() as u64;
        self.cycle(u / len)[(u % len) as usize]
    }

    /// The first `n` scheduled tasks.
    pub fn take(&self, n: u64) -> Vec<Task> {
        let len = self.cycle_len() as u64;
        (0..n.div_ceil(len)).flat_map(|c| self.cycle(c)).take(n as usize).collect()
    }
}

/// Linear warmup to `peak` over `warmup` updates, then inverse-square-root
/// decay: `lr(u) = peak · min(u/w, √(w/u))` for one-based `u`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup: u64) -> Self {
        Self { peak, warmup }
    }

    /// Rate of the `u`-th update (one-based). A warmup of zero behaves as
    /// one.
    pub fn at(&self, u: u64) -> f64 {
        let u = u.max(1) as f64;
        let w = self.warmup.max(1) as f64;
        self.peak * (u / w).min((w / u).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expansion_of_joint_ratios() {
        assert_eq!(integer_expansion(TaskRatios::JOINT.as_array()).unwrap(), [2, 14, 1, 1]);
        assert_eq!(integer_expansion([1.0, 7.0, 0.5, 0.0]).unwrap(), [2, 14, 1, 0]);
        assert_eq!(integer_expansion([2.0, 0.0, 0.0, 2.0]).unwrap(), [1, 0, 0, 1]);
        assert_eq!(integer_expansion([0.25, 0.0, 0.0, 0.5]).unwrap(), [1, 0, 0, 2]);
    }

    #[test]
    fn expansion_rejects_bad_ratios() {
        assert!(integer_expansion([0.0; 4]).is_err());
        assert!(integer_expansion([-1.0, 1.0, 0.0, 0.0]).is_err());
        assert!(integer_expansion([f64::NAN, 1.0, 0.0, 0.0]).is_err());
        assert!(integer_expansion([std::f64::consts::PI, 1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn cycles_differ_but_replay() {
        let s = TaskSchedule::new(TaskRatios::JOINT, 3).unwrap();
        assert_eq!(s.cycle_len(), 18);
        assert_eq!(s.cycle(0), s.clone().cycle(0));
        assert_ne!(s.cycle(0), s.cycle(1));
        let trace = s.take(40);
        assert_eq!(trace.len(), 40);
        assert_eq!(&trace[18..36], s.cycle(1).as_slice());
        assert_eq!(s.task_at(37), trace[37]);
    }

    #[test]
    fn lr_closed_form() {
        let lr = LrSchedule::new(1e-3, 100);
        assert!((lr.at(1) - 1e-5).abs() < 1e-18);
        assert!((lr.at(50) - 5e-4).abs() < 1e-15);
        assert_eq!(lr.at(100), 1e-3);
        assert!((lr.at(400) - 5e-4).abs() < 1e-15);
        assert_eq!(LrSchedule::new(2.0, 0).at(4), 1.0);
    }
}
