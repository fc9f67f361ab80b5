//! Adam with a piecewise-constant learning-rate schedule.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    /// (first iteration, rate) pairs; iteration j uses the last entry whose
    /// iteration is <= j. The first entry must start at iteration 0.
    pub schedule: Vec<(usize, f64)>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            schedule: vec![(0, 1e-2)],
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn with_schedule(schedule: Vec<(usize, f64)>) -> Self {
        OptimizerConfig {
            schedule,
            ..OptimizerConfig::default()
        }
    }

    pub fn learning_rate(&self, iteration: usize) -> f64 {
        let mut rate = self.schedule[0].1;
        for &(start, r) in &self.schedule {
            if start <= iteration {
                rate = r;
            }
        }
        rate
    }

    pub fn collect_problems(&self, problems: &mut Vec<String>) {
        if self.schedule.is_empty() {
            problems.push("optimizer: learning-rate schedule is empty".into());
            return;
        }
        if self.schedule[0].0 != 0 {
            problems.push("optimizer: schedule must start at iteration 0".into());
        }
        if !self.schedule.windows(2).all(|w| w[0].0 < w[1].0) {
            problems.push("optimizer: schedule iterations must be strictly increasing".into());
        }
        if self.schedule.iter().any(|&(_, r)| !(r > 0.0)) {
            problems.push("optimizer: learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problems.push("optimizer: moment decays must lie in [0, 1)".into());
        }
    }
}

/// First/second moment accumulators; `step` advances the internal timestep,
/// so one state must live across all updates of the parameters it serves.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn timestep(&self) -> u32 {
        self.t
    }

    pub fn step(
        &mut self,
        cfg: &OptimizerConfig,
        iteration: usize,
        params: &mut [f64],
        grad: &[f64],
    ) {
        debug_assert_eq!(params.len(), self.m.len());
        debug_assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let lr = cfg.learning_rate(iteration);
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * grad[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight transcription of the published update rule, kept separate
    /// from the implementation on purpose.
    struct NaiveAdam {
        m: Vec<f64>,
        v: Vec<f64>,
        b1t: f64,
        b2t: f64,
    }

    impl NaiveAdam {
        fn new(n: usize) -> Self {
            NaiveAdam {
                m: vec![0.0; n],
                v: vec![0.0; n],
                b1t: 1.0,
                b2t: 1.0,
            }
        }

        fn step(&mut self, lr: f64, b1: f64, b2: f64, eps: f64, p: &mut [f64], g: &[f64]) {
            self.b1t *= b1;
            self.b2t *= b2;
            for i in 0..p.len() {
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
                let mh = self.m[i] / (1.0 - self.b1t);
                let vh = self.v[i] / (1.0 - self.b2t);
                p[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    #[test]
    fn matches_published_recipe_on_a_quadratic() {
        let cfg = OptimizerConfig::with_schedule(vec![(0, 0.05), (30, 0.01)]);
        let mut state = AdamState::new(2);
        let mut naive = NaiveAdam::new(2);
        let mut p = vec![3.0, -1.5];
        let mut q = p.clone();
        for it in 0..60 {
            // Gradient of 0.5 (p0 - 1)^2 + 2 (p1 + 2)^2.
            let g = vec![p[0] - 1.0, 4.0 * (p[1] + 2.0)];
            let gq = vec![q[0] - 1.0, 4.0 * (q[1] + 2.0)];
            state.step(&cfg, it, &mut p, &g);
            naive.step(cfg.learning_rate(it), 0.9, 0.999, 1e-8, &mut q, &gq);
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12, "iterate {it}: {a} vs {b}");
            }
        }
        // And it actually descends toward the minimizer.
        assert!((p[0] - 1.0).abs() < 0.5);
        assert!((p[1] + 2.0).abs() < 0.5);
    }

    #[test]
    fn schedule_lookup_uses_latest_started_entry() {
        let cfg = OptimizerConfig::with_schedule(vec![(0, 5e-2), (100, 1e-2)]);
        assert_eq!(cfg.learning_rate(0), 5e-2);
        assert_eq!(cfg.learning_rate(99), 5e-2);
        assert_eq!(cfg.learning_rate(100), 1e-2);
        assert_eq!(cfg.learning_rate(10_000), 1e-2);
    }

    #[test]
    fn config_validation_collects_all_problems() {
        let cfg = OptimizerConfig {
            schedule: vec![(5, -1.0), (5, 0.1)],
            beta1: 1.5,
            ..OptimizerConfig::default()
        };
        let mut problems = Vec::new();
        cfg.collect_problems(&mut problems);
        assert!(problems.len() >= 3, "{problems:?}");
    }

    /// Bias correction makes the very first step roughly the learning rate
    /// in the gradient direction, regardless of gradient scale.
    #[test]
    fn first_step_has_learning_rate_magnitude()
    {
        for scale in [1e-4, 1.0, 1e4] {
            let cfg = OptimizerConfig::default();
            let mut state = AdamState::new(1);
            let mut p = vec![0.0];
            state.step(&cfg, 0, &mut p, &[scale]);
            assert!(
                (p[0] + 1e-2).abs() < 1e-5,
                "scale {scale}: step was {}",
                p[0]
            );
        }
    }
}
