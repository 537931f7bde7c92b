//! Loss-proportional task mixing.
//!
//! Each task keeps an exponential moving average of its training loss and is
//! sampled with weight `L_s / Σ L`, after which weights below a floor are
//! raised to the floor and the rest rescaled to fill the remaining mass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;

use crate::error::{Error, Result};
use crate::rng::seeded;

pub const DEFAULT_DECAY: f64 = 0.99;

/// Smoothed per-task losses and the sampling weights derived from them.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskMixState {
    ema: Vec<Option<f64>>,
    decay: f64,
    floor: f64,
    weights: Vec<f64>,
}

impl TaskMixState {
    /// `decay` is the EMA factor `γ` in `[0, 1)`; `floor` is the minimum weight.
    pub fn new(tasks: usize, decay: f64, floor: f64) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::Config("task mixture needs at least one task".into()));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::Config(format!("decay {decay} outside [0, 1)")));
        }
        check_floor(floor, tasks)?;
        Ok(Self {
            ema: vec![None; tasks],
            decay,
            floor,
            weights: vec![1.0 / tasks as f64; tasks],
        })
    }

    pub fn tasks(&self) -> usize {
        self.ema.len()
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    /// Smoothed loss of `task`, unset until its first observation.
    pub fn ema_loss(&self, task: usize) -> Option<f64> {
        self.ema.get(task).copied().flatten()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Folds `loss` into the task's average and refreshes the weights. The
    /// first observation initialises the average.
    pub fn update_loss(&mut self, task: usize, loss: f64) -> Result<()> {
        if !(loss >= 0.0 && loss.is_finite()) {
            return Err(Error::Input(format!("loss {loss} must be finite and non-negative")));
        }
        let slot = self
            .ema
            .get_mut(task)
            .ok_or_else(|| Error::Input(format!("task {task} out of range")))?;
        *slot = Some(match *slot {
            Some(prev) => self.decay * prev + (1.0 - self.decay) * loss,
            None => loss,
        });
        self.weights = compute_weights(self)?;
        Ok(())
    }

    /// Losses used for weighting; unobserved tasks take the mean of the
    /// observed ones (all equal when nothing has been observed).
    pub fn effective_losses(&self) -> Vec<f64> {
        let seen: Vec<f64> = self.ema.iter().flatten().copied().collect();
        let fill = if seen.is_empty() {
            1.0
        } else {
            seen.iter().sum::<f64>() / seen.len() as f64
        };
        self.ema.iter().map(|e| e.unwrap_or(fill)).collect()
    }
}

fn check_floor(floor: f64, tasks: usize) -> Result<()> {
    if !(floor >= 0.0 && floor * tasks as f64 <= 1.0 + 1e-12) {
        return Err(Error::Config(format!(
            "floor {floor} is infeasible for {tasks} tasks (needs 0 ≤ floor ≤ 1/tasks)"
        )));
    }
    Ok(())
}

/// `L_s / Σ L`; all-zero losses fall back to uniform weights.
pub fn proportional_weights(losses: &[f64]) -> Result<Vec<f64>> {
    if losses.is_empty() {
        return Err(Error::Config("no tasks".into()));
    }
    if losses.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return Err(Error::Input(format!("losses {losses:?} must be finite and non-negative")));
    }
    let total: f64 = losses.iter().sum();
    if total == 0.0 {
        return Ok(vec![1.0 / losses.len() as f64; losses.len()]);
    }
    Ok(losses.iter().map(|l| l / total).collect())
}

/// Raises weights below `floor` to `floor` and rescales the others
/// proportionally over the remaining mass, repeating until no weight is
/// below the floor.
pub fn project_floor(weights: &[f64], floor: f64) -> Result<Vec<f64>> {
    check_floor(floor, weights.len())?;
    let n = weights.len();
    let mut clamped = vec![false; n];
    loop {
        let free_mass = 1.0 - floor * clamped.iter().filter(|c| **c).count() as f64;
        let free_total: f64 = (0..n).filter(|&i| !clamped[i]).map(|i| weights[i]).sum();
        let free_count = clamped.iter().filter(|c| !**c).count();
        let out: Vec<f64> = (0..n)
            .map(|i| {
                if clamped[i] {
                    floor
                } else if free_total > 0.0 {
                    weights[i] / free_total * free_mass
                } else {
                    free_mass / free_count as f64
                }
            })
            .collect();
        let mut changed = false;
        for i in 0..n {
            if !clamped[i] && out[i] < floor {
                clamped[i] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok(out);
        }
    }
}

/// Current sampling weights: proportional to the smoothed losses, then
/// floor-projected.
pub fn compute_weights(state: &TaskMixState) -> Result<Vec<f64>> {
    let raw = proportional_weights(&state.effective_losses())?;
    if state.floor == 0.0 {
        return Ok(raw);
    }
    project_floor(&raw, state.floor)
}

/// Per-task sample counts for a batch of `batch` samples.
///
/// With a positive floor each task first gets `max(1, ⌊floor·B⌋)` samples;
/// the remainder is drawn multinomially with weights `max(B·w_s − r_s, 0)`,
/// so each task's expected count is `B·w_s` whenever that exceeds its
/// reservation.
pub fn sample_batch_composition(state: &TaskMixState, batch: usize, seed: u64) -> Result<Vec<usize>> {
    let w = state.weights();
    let reserve = if state.floor > 0.0 {
        ((state.floor * batch as f64).floor() as usize).max(1)
    } else {
        0
    };
    let reserved = reserve * w.len();
    if batch < reserved || batch == 0 {
        return Err(Error::Config(format!(
            "batch size {batch} cannot hold the {reserved} samples reserved by the floor"
        )));
    }
    let mut counts = vec![reserve; w.len()];
    let rest = batch - reserved;
    if rest > 0 {
        let excess: Vec<f64> = w.iter().map(|wi| (batch as f64 * wi - reserve as f64).max(0.0)).collect();
        let dist = if excess.iter().any(|e| *e > 0.0) {
            WeightedIndex::new(&excess)
        } else {
            WeightedIndex::new(w)
        }
        .map_err(|e| Error::Input(format!("invalid sampling weights: {e}")))?;
        let mut rng = seeded(seed);
        for _ in 0..rest {
            counts[dist.sample(&mut rng)] += 1;
        }
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state_with(losses: &[f64], floor: f64) -> TaskMixState {
        let mut s = TaskMixState::new(losses.len(), 0.0, floor).unwrap();
        for (i, l) in losses.iter().enumerate() {
            s.update_loss(i, *l).unwrap();
        }
        s
    }

    #[test]
    fn zero_decay_tracks_last_loss() {
        let mut s = TaskMixState::new(2, 0.0, 0.0).unwrap();
        s.update_loss(0, 5.0).unwrap();
        s.update_loss(0, 2.0).unwrap();
        assert_eq!(s.ema_loss(0), Some(2.0));
        assert_eq!(s.ema_loss(1), None);
    }

    #[test]
    fn ema_update() {
        let mut s = TaskMixState::new(1, 0.9, 0.0).unwrap();
        s.update_loss(0, 1.0).unwrap();
        s.update_loss(0, 2.0).unwrap();
        assert!((s.ema_loss(0).unwrap() - 1.1).abs() < 1e-15);
    }

    #[test]
    fn proportional_examples() {
        assert_eq!(state_with(&[2.0, 1.0], 0.0).weights(), &[2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(state_with(&[3.0, 1.0], 0.0).weights(), &[0.75, 0.25]);
        assert_eq!(state_with(&[0.4, 0.4, 0.4], 0.0).weights(), &[1.0 / 3.0; 3]);
        assert_eq!(state_with(&[0.7], 0.0).weights(), &[1.0]);
        assert_eq!(state_with(&[0.0, 0.0], 0.0).weights(), &[0.5, 0.5]);
    }

    #[test]
    fn floor_clamps_and_renormalises() {
        let w = state_with(&[0.99, 0.01], 0.1).weights().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-12 && (w[1] - 0.1).abs() < 1e-12, "{w:?}");
        // cascading clamp: the second pass catches the middle task
        let w = project_floor(&[0.9, 0.08, 0.02], 0.1).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-12 && (w[1] - 0.1).abs() < 1e-12 && (w[2] - 0.1).abs() < 1e-12, "{w:?}");
    }

    #[test]
    fn unobserved_tasks_take_the_mean() {
        let mut s = TaskMixState::new(3, 0.0, 0.0).unwrap();
        assert_eq!(s.weights(), &[1.0 / 3.0; 3]);
        s.update_loss(0, 2.0).unwrap();
        assert_eq!(s.weights(), &[1.0 / 3.0; 3]);
        s.update_loss(1, 4.0).unwrap();
        assert_eq!(s.effective_losses(), vec![2.0, 4.0, 3.0]);
    }

    #[test]
    fn invalid_inputs() {
        let mut s = TaskMixState::new(2, 0.5, 0.0).unwrap();
        assert!(matches!(s.update_loss(0, -1.0), Err(Error::Input(_))));
        assert!(matches!(s.update_loss(0, f64::NAN), Err(Error::Input(_))));
        assert!(matches!(s.update_loss(5, 1.0), Err(Error::Input(_))));
        assert!(TaskMixState::new(0, 0.5, 0.0).is_err());
        assert!(TaskMixState::new(3, 0.5, 0.5).is_err());
        assert!(TaskMixState::new(2, 1.0, 0.0).is_err());
    }

    #[test]
    fn floored_batch_reserves_and_fills() {
        let s = state_with(&[0.99, 0.01], 0.1);
        assert_eq!(sample_batch_composition(&s, 10, 3).unwrap(), vec![9, 1]);
        assert!(matches!(sample_batch_composition(&s, 1, 3), Err(Error::Config(_))));
    }

    #[test]
    fn batch_draws_are_seeded() {
        let s = state_with(&[1.0, 2.0, 3.0], 0.0);
        let a = sample_batch_composition(&s, 32, 11).unwrap();
        assert_eq!(a, sample_batch_composition(&s, 32, 11).unwrap());
        assert_eq!(a.iter().sum::<usize>(), 32);
    }
}
