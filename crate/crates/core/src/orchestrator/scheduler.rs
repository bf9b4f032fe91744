use serde::{Deserialize, Serialize};

use crate::config::Cadence;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DueTasks {
    pub rules: bool,
    pub predictor: bool,
    pub ai: bool,
    /// The AI run is due to a pending CRITICAL rather than the timer.
    pub preempted: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskCounts {
    pub rules: u64,
    pub predictor: u64,
    pub ai: u64,
}

/// Multi-cadence scheduler with CRITICAL preemption and a single queued
/// re-trigger while a loop is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scheduler {
    cadence: Cadence,
    next_ai_at: u64,
    critical_since: Option<u64>,
    loop_active: bool,
    busy: bool,
    queued: bool,
    counts: TaskCounts,
}

impl Scheduler {
    pub fn new(cadence: Cadence, start_s: u64) -> Self {
        Self {
            cadence,
            next_ai_at: start_s + cadence.ai_s,
            critical_since: None,
            loop_active: false,
            busy: false,
            queued: false,
            counts: TaskCounts::default(),
        }
    }

    pub fn counts(&self) -> TaskCounts {
        self.counts
    }

    pub fn next_ai_at(&self) -> u64 {
        self.next_ai_at
    }

    pub fn loop_active(&self) -> bool {
        self.loop_active
    }

    pub fn has_queued(&self) -> bool {
        self.queued
    }

    /// Holds AI runs back while a plan or upgrade owns the cluster.
    pub fn set_busy(&mut self, busy: bool) {
        self.busy = busy;
    }

    /// A CRITICAL alert observed at `at_s`.
    pub fn raise_critical(&mut self, at_s: u64) {
        if self.loop_active {
            self.queued = true;
        } else if self.critical_since.is_none() {
            self.critical_since = Some(at_s);
        }
    }

    /// Tasks due at `now_s`; counts what it returns.
    pub fn tick(&mut self, now_s: u64) -> DueTasks {
        let mut due = DueTasks {
            rules: now_s > 0 && now_s.is_multiple_of(self.cadence.rules_s),
            predictor: now_s > 0 && now_s.is_multiple_of(self.cadence.predictor_s),
            ..DueTasks::default()
        };
        if !self.loop_active && !self.busy {
            if self.critical_since.is_some_and(|t| now_s > t) {
                due.ai = true;
                due.preempted = true;
            } else if now_s >= self.next_ai_at {
                due.ai = true;
            }
        }
        self.counts.rules += due.rules as u64;
        self.counts.predictor += due.predictor as u64;
        self.counts.ai += due.ai as u64;
        due
    }

    pub fn loop_started(&mut self) {
        self.loop_active = true;
        self.critical_since = None;
    }

    /// Ends the active loop. Returns whether a queued re-trigger is pending;
    /// the caller confirms it with [`Scheduler::raise_critical`].
    pub fn loop_finished(&mut self, end_s: u64, preempted: bool) -> bool {
        self.loop_active = false;
        if preempted {
            self.next_ai_at = end_s + self.cadence.ai_s;
        } else {
            while self.next_ai_at <= end_s {
                self.next_ai_at += self.cadence.ai_s;
            }
        }
        std::mem::take(&mut self.queued)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(s: &mut Scheduler, from: u64, to: u64) -> Vec<(u64, DueTasks)> {
        (from..=to)
            .map(|t| {
                let d = s.tick(t);
                if d.ai {
                    s.loop_started();
                    s.loop_finished(t, d.preempted);
                }
                (t, d)
            })
            .collect()
    }

    #[test]
    fn cadence_counts_at_300() {
        let mut s = Scheduler::new(Cadence::default(), 0);
        run(&mut s, 1, 300);
        assert_eq!(s.counts(), TaskCounts { rules: 10, predictor: 5, ai: 1 });
    }

    #[test]
    fn critical_runs_next_tick() {
        let mut s = Scheduler::new(Cadence::default(), 0);
        run(&mut s, 1, 44);
        s.raise_critical(45);
        let d45 = s.tick(45);
        assert!(!d45.ai);
        let d46 = s.tick(46);
        assert!(d46.ai && d46.preempted);
        s.loop_started();
        s.loop_finished(50, true);
        assert_eq!(s.next_ai_at(), 350);
    }

    #[test]
    fn single_queued_retrigger() {
        let mut s = Scheduler::new(Cadence::default(), 0);
        s.raise_critical(10);
        assert!(s.tick(11).ai);
        s.loop_started();
        s.raise_critical(20);
        s.raise_critical(25);
        for t in 12..40 {
            assert!(!s.tick(t).ai, "no concurrent loop at {t}");
        }
        assert!(s.loop_finished(40, true));
        s.raise_critical(40);
        assert!(s.tick(41).ai);
        s.loop_started();
        assert!(!s.loop_finished(45, true));
        assert!(!s.tick(46).ai);
    }

    #[test]
    fn busy_defers_critical() {
        let mut s = Scheduler::new(Cadence::default(), 0);
        s.set_busy(true);
        s.raise_critical(10);
        assert!(!s.tick(11).ai);
        s.set_busy(false);
        let d = s.tick(12);
        assert!(d.ai && d.preempted);
    }
}
