//! Per-peer detectors for clock drift and abnormal communication.

use std::collections::VecDeque;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("insufficient observations: {have} of {need}")]
pub struct InsufficientObservations {
    pub have: usize,
    pub need: usize,
}

/// One drift sample: `expected` is the interval the receiver measured on
/// its own clock, `observed` the interval the peer's timestamps claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct IntervalSample {
    pub expected: u64,
    pub observed: u64,
}

/// Sliding window of the most recent `window` interval samples from one
/// peer, taken between messages at least `min_interval` receiver ticks apart.
#[derive(Debug, Clone)]
pub struct HeartbeatStats {
    window: usize,
    min_interval: u64,
    anchor: Option<(u64, u64)>,
    samples: VecDeque<IntervalSample>,
}

impl HeartbeatStats {
    pub fn new(window: usize, min_interval: u64) -> Self {
        Self { window, min_interval, anchor: None, samples: VecDeque::with_capacity(window) }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn samples(&self) -> impl Iterator<Item = &IntervalSample> {
        self.samples.iter()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Median observed/expected over whatever is in the window.
    pub fn median_ratio(&self) -> Option<f64> {
        (!self.samples.is_empty())
            .then(|| median(self.samples.iter().map(|s| s.observed as f64 / s.expected as f64).collect()))
    }

    pub fn push(&mut self, sample: IntervalSample) {
        if self.samples.len() == self.window {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
    }

    /// Records a message stamped `sender_local` that arrived at receiver
    /// local time `receiver_local`.
    pub fn observe(&mut self, sender_local: u64, receiver_local: u64) {
        match self.anchor {
            None => self.anchor = Some((sender_local, receiver_local)),
            Some((s0, r0)) => {
                if sender_local < s0 {
                    // Out-of-order delivery; keep the newer anchor.
                    return;
                }
                let expected = receiver_local.saturating_sub(r0);
                if expected >= self.min_interval {
                    self.push(IntervalSample { expected, observed: sender_local - s0 });
                    self.anchor = Some((sender_local, receiver_local));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "verdict", content = "ratio")]
pub enum DriftVerdict {
    Within(f64),
    Drifted(f64),
}

impl DriftVerdict {
    pub fn ratio(self) -> f64 {
        match self {
            DriftVerdict::Within(r) | DriftVerdict::Drifted(r) => r,
        }
    }

    pub fn is_drifted(self) -> bool {
        matches!(self, DriftVerdict::Drifted(_))
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Drifted iff the median of observed/expected deviates from 1 by more
/// than `threshold`.
pub fn detect_drift(stats: &HeartbeatStats, threshold: f64) -> Result<DriftVerdict, InsufficientObservations> {
    if stats.samples.len() < stats.window || stats.window == 0 {
        return Err(InsufficientObservations { have: stats.samples.len(), need: stats.window.max(1) });
    }
    let ratio = stats.median_ratio().expect("window is full");
    Ok(if (ratio - 1.0).abs() > threshold { DriftVerdict::Drifted(ratio) } else { DriftVerdict::Within(ratio) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MessageFault {
    Malformed,
    BadSignature,
    Contradictory,
}

/// Outcome of the last `window` messages received from one peer.
#[derive(Debug, Clone)]
pub struct CommMonitor {
    window: usize,
    outcomes: VecDeque<Option<MessageFault>>,
}

impl CommMonitor {
    pub fn new(window: usize) -> Self {
        Self { window, outcomes: VecDeque::with_capacity(window) }
    }

    pub fn record(&mut self, outcome: Option<MessageFault>) {
        if self.outcomes.len() == self.window {
            self.outcomes.pop_front();
        }
        self.outcomes.push_back(outcome);
    }

    pub fn observed(&self) -> usize {
        self.outcomes.len()
    }

    pub fn faults(&self) -> usize {
        self.outcomes.iter().filter(|o| o.is_some()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "verdict", content = "rate")]
pub enum CommVerdict {
    Within(f64),
    Anomalous(f64),
}

impl CommVerdict {
    pub fn rate(self) -> f64 {
        match self {
            CommVerdict::Within(r) | CommVerdict::Anomalous(r) => r,
        }
    }

    pub fn is_anomalous(self) -> bool {
        matches!(self, CommVerdict::Anomalous(_))
    }
}

/// Anomalous iff (malformed + bad-signature + contradictory) / total
/// exceeds `threshold` over the window.
pub fn detect_comm_anomaly(monitor: &CommMonitor, threshold: f64) -> Result<CommVerdict, InsufficientObservations> {
    if monitor.outcomes.len() < monitor.window || monitor.window == 0 {
        return Err(InsufficientObservations { have: monitor.outcomes.len(), need: monitor.window.max(1) });
    }
    let rate = monitor.faults() as f64 / monitor.outcomes.len() as f64;
    Ok(if rate > threshold { CommVerdict::Anomalous(rate) } else { CommVerdict::Within(rate) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats_with(rate_num: u64, rate_den: u64) -> HeartbeatStats {
        let mut s = HeartbeatStats::new(20, 50);
        for i in 0..=20u64 {
            let r = i * 50;
            s.observe(r * rate_num / rate_den, r);
        }
        s
    }

    #[test]
    fn nominal_clock_is_within() {
        assert_eq!(detect_drift(&stats_with(1, 1), 0.10), Ok(DriftVerdict::Within(1.0)));
    }

    #[test]
    fn fast_clock_is_drifted() {
        assert_eq!(detect_drift(&stats_with(3, 2), 0.10), Ok(DriftVerdict::Drifted(1.5)));
        assert_eq!(detect_drift(&stats_with(2, 3), 0.10).map(|v| v.is_drifted()), Ok(true));
    }

    #[test]
    fn small_drift_stays_within() {
        let v = detect_drift(&stats_with(21, 20), 0.10).unwrap();
        assert!(!v.is_drifted());
        assert!((v.ratio() - 1.05).abs() < 1e-9);
    }

    #[test]
    fn drift_needs_a_full_window() {
        let mut s = HeartbeatStats::new(20, 50);
        s.observe(0, 0);
        s.observe(50, 50);
        assert_eq!(detect_drift(&s, 0.1), Err(InsufficientObservations { have: 1, need: 20 }));
    }

    #[test]
    fn window_keeps_only_recent_samples() {
        let mut s = HeartbeatStats::new(3, 1);
        for i in 0..10 {
            s.push(IntervalSample { expected: 1, observed: i });
        }
        let kept: Vec<u64> = s.samples().map(|x| x.observed).collect();
        assert_eq!(kept, vec![7, 8, 9]);
    }

    #[test]
    fn short_gaps_are_not_sampled() {
        let mut s = HeartbeatStats::new(2, 50);
        s.observe(0, 0);
        s.observe(10, 10);
        s.observe(49, 49);
        assert_eq!(s.samples().count(), 0);
        s.observe(60, 60);
        assert_eq!(s.samples().next(), Some(&IntervalSample { expected: 60, observed: 60 }));
    }

    #[test]
    fn comm_thresholds() {
        let mut m = CommMonitor::new(50);
        for _ in 0..50 {
            m.record(None);
        }
        assert_eq!(detect_comm_anomaly(&m, 0.15), Ok(CommVerdict::Within(0.0)));
        m.record(Some(MessageFault::BadSignature));
        assert_eq!(detect_comm_anomaly(&m, 0.15), Ok(CommVerdict::Within(0.02)));

        let mut m = CommMonitor::new(20);
        for i in 0..20 {
            m.record((i % 10 < 3).then_some(MessageFault::Malformed));
        }
        assert_eq!(detect_comm_anomaly(&m, 0.15), Ok(CommVerdict::Anomalous(0.3)));
        assert_eq!(detect_comm_anomaly(&m, f64::INFINITY), Ok(CommVerdict::Within(0.3)));
        assert!(detect_comm_anomaly(&CommMonitor::new(20), 0.15).is_err());
    }
}
