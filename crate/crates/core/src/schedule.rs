//! Noise levels per timestep index and timestep subsets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Geometric,
    Linear,
}

/// Serialized form of a schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub t_max: usize,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { kind: ScheduleKind::Geometric, sigma_min: 0.02, sigma_max: 10.0, t_max: 1000 }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::build(self.kind, self.sigma_min, self.sigma_max, self.t_max)
    }
}

/// Strictly increasing noise levels, indexed from 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    spec: ScheduleSpec,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, sigma_min: f64, sigma_max: f64, t_max: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min.is_finite()) {
            return Err(Error::BadRange(format!("sigma_min must be positive, got {sigma_min}")));
        }
        if !(sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(Error::BadRange(format!(
                "sigma_max must exceed sigma_min, got {sigma_max} <= {sigma_min}"
            )));
        }
        if t_max < 2 {
            return Err(Error::BadRange(format!("t_max must be at least 2, got {t_max}")));
        }
        let span = (t_max - 1) as f64;
        let sigmas = (0..t_max)
            .map(|i| {
                let frac = i as f64 / span;
                match kind {
                    ScheduleKind::Geometric => sigma_min * (sigma_max / sigma_min).powf(frac),
                    ScheduleKind::Linear => sigma_min + frac * (sigma_max - sigma_min),
                }
            })
            .collect();
        Ok(NoiseSchedule { spec: ScheduleSpec { kind, sigma_min, sigma_max, t_max }, sigmas })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn t_max(&self) -> usize {
        self.sigmas.len()
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn sigma_at(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.sigmas.len() {
            return Err(Error::IndexOutOfRange { index: t, max: self.sigmas.len() });
        }
        Ok(self.sigmas[t - 1])
    }

    /// Index whose noise level is closest to `sigma` in log scale.
    pub fn nearest_index(&self, sigma: f64) -> usize {
        let target = sigma.ln();
        let mut best = (1, f64::INFINITY);
        for (i, s) in self.sigmas.iter().enumerate() {
            let gap = (s.ln() - target).abs();
            if gap < best.1 {
                best = (i + 1, gap);
            }
        }
        best.0
    }

    /// Timesteps whose noise levels are nearest to 0.5, 1, 1.5, 2 and 2.5.
    /// Indices that collide on a coarse schedule are merged.
    pub fn default_timesteps(&self) -> TimestepSet {
        let mut idx: Vec<usize> =
            [0.5, 1.0, 1.5, 2.0, 2.5].iter().map(|&s| self.nearest_index(s)).collect();
        idx.dedup();
        TimestepSet { indices: idx }
    }
}

/// Nonempty, strictly increasing set of 1-based timestep indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct TimestepSet {
    indices: Vec<usize>,
}

impl TimestepSet {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Config("timestep set is empty".into()));
        }
        if indices.contains(&0) {
            return Err(Error::IndexOutOfRange { index: 0, max: usize::MAX });
        }
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("timesteps must be strictly increasing: {indices:?}")));
        }
        Ok(TimestepSet { indices })
    }

    pub fn validate_for(&self, schedule: &NoiseSchedule) -> Result<()> {
        match self.indices.iter().find(|&&t| t > schedule.t_max()) {
            Some(&t) => Err(Error::IndexOutOfRange { index: t, max: schedule.t_max() }),
            None => Ok(()),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// All contiguous runs of this set, shortest first.
    pub fn contiguous_subsets(&self) -> Vec<TimestepSet> {
        let n = self.indices.len();
        let mut out = Vec::new();
        for len in 1..=n {
            for start in 0..=(n - len) {
                out.push(TimestepSet { indices: self.indices[start..start + len].to_vec() });
            }
        }
        out
    }
}

impl TryFrom<Vec<usize>> for TimestepSet {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        TimestepSet::new(v)
    }
}

impl From<TimestepSet> for Vec<usize> {
    fn from(t: TimestepSet) -> Self {
        t.indices
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn linear_endpoints_and_midpoint() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1.0, 3.0, 3).unwrap();
        assert_eq!(s.sigmas(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn geometric_decades() {
        let s = NoiseSchedule::build(ScheduleKind::Geometric, 0.01, 100.0, 5).unwrap();
        for (got, want) in s.sigmas().iter().zip([0.01, 0.1, 1.0, 10.0, 100.0]) {
            assert_relative_eq!(*got, want, max_relative = 1e-12);
        }
        assert_relative_eq!(s.sigma_at(3).unwrap(), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn two_point_schedule_is_the_endpoints() {
        let s = NoiseSchedule::build(ScheduleKind::Geometric, 0.3, 7.0, 2).unwrap();
        assert_eq!(s.sigma_at(1).unwrap(), 0.3);
        assert_relative_eq!(s.sigma_at(2).unwrap(), 7.0, max_relative = 1e-15);
    }

    #[test]
    fn bad_ranges_rejected() {
        use ScheduleKind::*;
        assert!(matches!(NoiseSchedule::build(Linear, 0.0, 1.0, 5), Err(Error::BadRange(_))));
        assert!(matches!(NoiseSchedule::build(Linear, 2.0, 1.0, 5), Err(Error::BadRange(_))));
        assert!(matches!(NoiseSchedule::build(Linear, 1.0, 2.0, 1), Err(Error::BadRange(_))));
    }

    #[test]
    fn sigma_at_bounds() {
        let s = ScheduleSpec::default().build().unwrap();
        assert_eq!(s.sigma_at(1).unwrap(), 0.02);
        assert_relative_eq!(s.sigma_at(1000).unwrap(), 10.0, max_relative = 1e-12);
        assert!(matches!(s.sigma_at(0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(s.sigma_at(1001), Err(Error::IndexOutOfRange { .. })));
    }

    #[test]
    fn default_timesteps_track_target_sigmas() {
        let s = ScheduleSpec::default().build().unwrap();
        let t = s.default_timesteps();
        assert_eq!(t.len(), 5);
        for (&idx, want) in t.indices().iter().zip([0.5, 1.0, 1.5, 2.0, 2.5]) {
            let got = s.sigma_at(idx).unwrap();
            assert!((got / want - 1.0).abs() < 0.01, "{got} vs {want}");
        }
    }

    #[test]
    fn timestep_set_validation() {
        assert!(TimestepSet::new(vec![]).is_err());
        assert!(TimestepSet::new(vec![3, 2]).is_err());
        assert!(TimestepSet::new(vec![2, 2]).is_err());
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1.0, 2.0, 4).unwrap();
        assert!(TimestepSet::new(vec![1, 5]).unwrap().validate_for(&s).is_err());
        let parsed: Result<TimestepSet, _> = serde_json::from_str::<TimestepSet>("[4, 1]");
        assert!(parsed.is_err());
    }

    #[test]
    fn contiguous_subsets_count() {
        let t = TimestepSet::new(vec![1, 2, 3]).unwrap();
        let subs = t.contiguous_subsets();
        assert_eq!(subs.len(), 6);
        assert_eq!(subs[0].indices(), &[1]);
        assert_eq!(subs[5].indices(), &[1, 2, 3]);
    }

    proptest! {
        #[test]
        fn schedules_are_monotone_and_match_formula(
            lo in 1e-3f64..1.0,
            ratio in 1.01f64..1e4,
            t_max in 2usize..300,
            geometric in any::<bool>(),
        ) {
            let hi = lo * ratio;
            let kind = if geometric { ScheduleKind::Geometric } else { ScheduleKind::Linear };
            let s = NoiseSchedule::build(kind, lo, hi, t_max).unwrap();
            for t in 1..t_max {
                prop_assert!(s.sigma_at(t + 1).unwrap() > s.sigma_at(t).unwrap());
            }
            for t in 1..=t_max {
                let frac = (t - 1) as f64 / (t_max - 1) as f64;
                let want = match kind {
                    ScheduleKind::Geometric => lo * (hi / lo).powf(frac),
                    ScheduleKind::Linear => lo + frac * (hi - lo),
                };
                let got = s.sigma_at(t).unwrap();
                prop_assert!(((got - want) / want).abs() <= 1e-12);
            }
        }
    }
}
