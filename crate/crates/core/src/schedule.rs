//! Discrete variance-preserving noise schedule, the sub-sampled timestep map
//! used for distillation, and the consistency-model boundary scalings.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy step and `t = T` the
//! noisiest. `t = 0` denotes clean data, with `alpha_bar(0) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas interpolated linearly from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got start {beta_start}, end {beta_end}"
            )));
        }
        if steps == 1 && beta_start != beta_end {
            return Err(Error::Config(
                "a single-step schedule needs equal start and end betas".into(),
            ));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Self { betas, alphas, alpha_bars }
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn index(&self, t: usize) -> usize {
        assert!(
            (1..=self.steps()).contains(&t),
            "timestep {t} outside 1..={}",
            self.steps()
        );
        t - 1
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[self.index(t)]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[self.index(t)]
    }

    /// Cumulative signal fraction; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[self.index(t)]
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if (1..=self.steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::Contract(format!("timestep {t} outside 1..={}", self.steps())))
        }
    }

    /// Normalized time `t / T` in `[0, 1]`.
    pub fn normalized_time(&self, t: usize) -> f64 {
        t as f64 / self.steps() as f64
    }
}

/// Strictly increasing timestep sub-sequence `t_1 < … < t_N = T`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepMap {
    boundaries: Vec<usize>,
}

impl TimestepMap {
    /// `N` timesteps evenly spaced over `[1, T]`, rounded half away from zero.
    pub fn even(schedule: &NoiseSchedule, count: usize) -> Result<Self> {
        let steps = schedule.steps();
        if count < 2 || count > steps {
            return Err(Error::Config(format!(
                "sub-sample count must lie in 2..={steps}, got {count}"
            )));
        }
        let span = (steps - 1) as f64;
        let boundaries: Vec<usize> = (0..count)
            .map(|i| (1.0 + span * i as f64 / (count - 1) as f64).round() as usize)
            .collect();
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "{count} sub-samples over {steps} steps collide after rounding; choose a smaller count"
            )));
        }
        Ok(Self { boundaries })
    }

    /// Wraps an explicit sub-sequence after validating it against `schedule`.
    pub fn from_boundaries(schedule: &NoiseSchedule, boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(Error::Config("timestep map is empty".into()));
        }
        if boundaries[0] < 1 {
            return Err(Error::Config("timestep map must start at 1 or later".into()));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "timestep map must be strictly increasing: {boundaries:?}"
            )));
        }
        if *boundaries.last().unwrap() != schedule.steps() {
            return Err(Error::Config(format!(
                "timestep map must end at T = {}, got {boundaries:?}",
                schedule.steps()
            )));
        }
        Ok(Self { boundaries })
    }

    /// Every `stride`-th timestep, ending at `T`: `T, T − stride, …`.
    pub fn strided(schedule: &NoiseSchedule, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        let steps = schedule.steps();
        let mut boundaries: Vec<usize> = (0..steps.div_ceil(stride))
            .map(|k| steps - k * stride)
            .filter(|&t| t >= 1)
            .collect();
        boundaries.reverse();
        Self::from_boundaries(schedule, boundaries)
    }

    pub fn len(&self) -> usize {
        self.boundaries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boundaries.is_empty()
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    /// `t_n` for 1-based `n`.
    pub fn at(&self, n: usize) -> usize {
        self.boundaries[n - 1]
    }
}

/// Boundary-condition scalings `c_skip`, `c_out` of a consistency function.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScalings {
    pub sigma_data: f64,
    pub timestep_scaling: f64,
}

impl Default for BoundaryScalings {
    fn default() -> Self {
        Self { sigma_data: 0.5, timestep_scaling: 10.0 }
    }
}

impl BoundaryScalings {
    /// `(c_skip, c_out)` at continuous time `time ≥ 0`.
    pub fn at(&self, time: f64) -> (f64, f64) {
        let scaled = time * self.timestep_scaling;
        let s2 = self.sigma_data * self.sigma_data;
        let denom = scaled * scaled + s2;
        (s2 / denom, self.sigma_data * scaled / denom.sqrt())
    }

    /// Scalings at a discrete timestep, using normalized time `t / T`.
    pub fn at_timestep(&self, t: usize, schedule: &NoiseSchedule) -> (f64, f64) {
        self.at(schedule.normalized_time(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn linear_endpoints() {
        let s = default_schedule();
        assert_eq!(s.betas()[0], 1e-4);
        assert_eq!(s.betas()[999], 0.02);
        assert_eq!(s.beta(1), 1e-4);
        assert_eq!(s.beta(1000), 0.02);
        assert_eq!(s.alpha_bars()[0], 1.0 - 1e-4);
    }

    #[test]
    fn single_step_schedule() {
        let s = NoiseSchedule::linear(1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bars(), &[0.5]);
    }

    #[test]
    fn final_alpha_bar_matches_direct_product() {
        let s = default_schedule();
        let mut direct = 1.0;
        for i in 0..1000 {
            let beta = 1e-4 + (0.02 - 1e-4) * (i as f64) / 999.0;
            direct *= 1.0 - beta;
        }
        let got = s.alpha_bars()[999];
        assert!(got < 1e-4);
        assert!(((got - direct) / direct).abs() < 1e-12, "{got} vs {direct}");
    }

    #[test]
    fn rejects_out_of_range_betas() {
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.01, 1.0).is_err());
        assert!(NoiseSchedule::linear(0, 0.01, 0.02).is_err());
    }

    #[test]
    fn alpha_bars_follow_recurrence() {
        let s = default_schedule();
        for t in 2..=1000 {
            let expect = s.alpha_bar(t - 1) * s.alpha(t);
            assert!((s.alpha_bar(t) - expect).abs() <= 1e-15 * expect.max(1e-300));
            assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
        assert_eq!(s.alpha_bar(0), 1.0);
    }

    #[test]
    fn cd_map_for_table_values() {
        let s = default_schedule();
        let map = TimestepMap::even(&s, 50).unwrap();
        assert_eq!(map.len(), 50);
        assert_eq!(map.at(50), 1000);
        assert_eq!(map.at(1), 1);
        // independent even spacing: 1 + i * 999 / 49, nearest integer
        for (i, &t) in map.boundaries().iter().enumerate() {
            let exact = 1.0 + 999.0 * i as f64 / 49.0;
            assert!((t as f64 - exact).abs() <= 0.5, "index {i}: {t} vs {exact}");
        }
        let gaps: Vec<usize> = map.boundaries().windows(2).map(|w| w[1] - w[0]).collect();
        assert!(gaps.iter().all(|&g| g == 20 || g == 21), "{gaps:?}");
    }

    #[test]
    fn cd_map_endpoint_case() {
        let s = NoiseSchedule::linear(4, 0.1, 0.2).unwrap();
        assert_eq!(TimestepMap::even(&s, 2).unwrap().boundaries(), &[1, 4]);
        assert_eq!(TimestepMap::even(&s, 4).unwrap().boundaries(), &[1, 2, 3, 4]);
        assert!(TimestepMap::even(&s, 1).is_err());
        assert!(TimestepMap::even(&s, 5).is_err());
    }

    #[test]
    fn strided_map_counts() {
        let s = default_schedule();
        let m = TimestepMap::strided(&s, 20).unwrap();
        assert_eq!(m.len(), 50);
        assert_eq!(m.boundaries()[0], 20);
        assert_eq!(*m.boundaries().last().unwrap(), 1000);
        assert_eq!(TimestepMap::strided(&s, 1).unwrap().len(), 1000);
        assert_eq!(TimestepMap::strided(&s, 3).unwrap().boundaries()[0], 1);
    }

    #[test]
    fn boundary_scalings_at_zero_are_exact() {
        let s = BoundaryScalings::default();
        assert_eq!(s.at(0.0), (1.0, 0.0));
    }

    #[test]
    fn boundary_scalings_reference_point() {
        let s = BoundaryScalings { sigma_data: 0.5, timestep_scaling: 10.0 };
        let (skip, out) = s.at(0.05);
        assert!((skip - 0.5).abs() < 1e-15);
        assert!((out - 0.5 / 2f64.sqrt()).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn scalings_satisfy_identity(time in 0.0f64..5.0, sigma in 0.05f64..2.0, scale in 0.1f64..50.0) {
            let s = BoundaryScalings { sigma_data: sigma, timestep_scaling: scale };
            let (skip, out) = s.at(time);
            prop_assert!((skip + (out / sigma).powi(2) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn even_map_is_increasing_and_ends_at_t(steps in 2usize..400, frac in 0.0f64..1.0) {
            let s = NoiseSchedule::linear(steps, 1e-4, 0.02).unwrap();
            let count = 2 + ((steps - 2) as f64 * frac) as usize;
            let map = TimestepMap::even(&s, count).unwrap();
            prop_assert_eq!(map.len(), count);
            prop_assert_eq!(*map.boundaries().last().unwrap(), steps);
            prop_assert!(map.boundaries()[0] >= 1);
            prop_assert!(map.boundaries().windows(2).all(|w| w[0] < w[1]));
        }
    }
}
