use serde::{Deserialize, Serialize};

use super::config::Interval;

/// Re-encoding points `[1, 1 + o, 1 + 2o, ...]`, one-based decoding steps.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReEncodingSchedule {
    pub interval: Interval,
    pub points: Vec<usize>,
}

pub fn build_schedule(interval: Interval, max_len: usize) -> ReEncodingSchedule {
    let points = match interval {
        Interval::Infinite => vec![1],
        Interval::Every(o) => (1..=max_len.max(1)).step_by(o.max(1)).collect(),
    };
    ReEncodingSchedule { interval, points }
}

impl ReEncodingSchedule {
    pub fn is_point(&self, t: usize) -> bool {
        match self.interval {
            Interval::Infinite => t == 1,
            Interval::Every(o) => t >= 1 && (t - 1).is_multiple_of(o),
        }
    }

    /// Latest point `t_i <= t`.
    pub fn point_for(&self, t: usize) -> usize {
        match self.interval {
            Interval::Infinite => 1,
            Interval::Every(o) => 1 + (t.max(1) - 1) / o * o,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn every_step() {
        assert_eq!(build_schedule(Interval::Every(1), 5).points, vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn spaced_points() {
        assert_eq!(build_schedule(Interval::Every(3), 7).points, vec![1, 4, 7]);
        assert_eq!(build_schedule(Interval::Every(3), 6).points, vec![1, 4]);
    }

    #[test]
    fn infinite_interval() {
        let s = build_schedule(Interval::Infinite, 50);
        assert_eq!(s.points, vec![1]);
        assert_eq!(s.point_for(49), 1);
        assert!(!s.is_point(2));
    }

    proptest! {
        #[test]
        fn point_for_is_latest_point(o in 1usize..10, max_len in 1usize..60, t in 1usize..60) {
            let s = build_schedule(Interval::Every(o), max_len);
            prop_assert_eq!(s.points[0], 1);
            prop_assert!(s.points.windows(2).all(|w| w[1] - w[0] == o));
            if t <= max_len {
                let expected = *s.points.iter().filter(|&&p| p <= t).max().unwrap();
                prop_assert_eq!(s.point_for(t), expected);
                prop_assert_eq!(s.is_point(t), s.points.contains(&t));
            }
        }
    }
}
