//! Momentum SGD with the annealed learning-rate schedule
//! `eta_p = eta0 / (1 + alpha * p)^beta` and per-layer learning-rate
//! multipliers. Progress `p` is the fraction of completed steps over the
//! configured horizon.

use crate::error::{Error, Result};

/// One named parameter tensor exposed to the optimizer.
pub struct ParamSlot<'a> {
    pub name: String,
    pub lr_multiplier: f64,
    pub data: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Anything the optimizer can step. Slot order must be stable across calls.
pub trait Parameters {
    fn param_slots(&mut self) -> Vec<ParamSlot<'_>>;
    fn grads_ready(&self) -> bool;
    fn clear_grads(&mut self);
}

/// Annealed learning rate at progress `p` in [0, 1].
pub fn lr_at(p: f64, eta0: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "schedule progress must lie in [0, 1], got {p}"
        )));
    }
    if eta0 <= 0.0 || alpha < 0.0 || beta < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "schedule constants out of range: eta0 {eta0}, alpha {alpha}, beta {beta}"
        )));
    }
    Ok(eta0 / (1.0 + alpha * p).powf(beta))
}

/// Schedule constants plus momentum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub eta0: f64,
    pub alpha: f64,
    pub beta: f64,
    pub momentum: f64,
    pub total_steps: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            eta0: 0.01,
            alpha: 10.0,
            beta: 0.75,
            momentum: 0.9,
            total_steps: 2000,
        }
    }
}

/// Optimizer state: one velocity buffer per parameter slot plus the step
/// counter that defines progress.
#[derive(Debug, Clone)]
pub struct SgdState {
    cfg: SgdConfig,
    velocities: Vec<Vec<f64>>,
    step: usize,
}

impl SgdState {
    pub fn new<P: Parameters>(params: &mut P, cfg: SgdConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&cfg.momentum) {
            return Err(Error::InvalidParameter(format!(
                "momentum must lie in [0, 1), got {}",
                cfg.momentum
            )));
        }
        let velocities = params
            .param_slots()
            .iter()
            .map(|s| vec![0.0; s.data.len()])
            .collect();
        Ok(SgdState {
            cfg,
            velocities,
            step: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Progress in [0, 1]: completed steps over the horizon, so the first
    /// step runs at exactly `eta0`.
    pub fn progress(&self) -> f64 {
        if self.cfg.total_steps == 0 {
            0.0
        } else {
            (self.step as f64 / self.cfg.total_steps as f64).min(1.0)
        }
    }

    /// Learning rate the next `step` call will use (before per-layer
    /// multipliers).
    pub fn current_lr(&self) -> Result<f64> {
        lr_at(
            self.progress(),
            self.cfg.eta0,
            self.cfg.alpha,
            self.cfg.beta,
        )
    }

    /// Heavy-ball update for every parameter: `v <- mu v - m * eta_p * g`,
    /// `theta <- theta + v`. Gradients are cleared and the step counter
    /// advances.
    pub fn step<P: Parameters>(&mut self, params: &mut P) -> Result<()> {
        if !params.grads_ready() {
            return Err(Error::InvalidState(
                "optimizer step without freshly populated gradients",
            ));
        }
        let eta = self.current_lr()?;
        let mu = self.cfg.momentum;
        {
            let mut slots = params.param_slots();
            if slots.len() != self.velocities.len() {
                return Err(Error::InvalidState("parameter slot count changed"));
            }
            for (slot, vel) in slots.iter_mut().zip(self.velocities.iter_mut()) {
                if slot.data.len() != vel.len() {
                    return Err(Error::InvalidState("parameter shape changed"));
                }
                let scale = slot.lr_multiplier * eta;
                for ((theta, g), v) in slot
                    .data
                    .iter_mut()
                    .zip(slot.grad.iter())
                    .zip(vel.iter_mut())
                {
                    *v = mu * *v - scale * *g;
                    *theta += *v;
                }
            }
        }
        params.clear_grads();
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Single scalar parameter used to exercise the optimizer in isolation.
    struct Scalar {
        theta: Vec<f64>,
        grad: Vec<f64>,
        ready: bool,
    }

    impl Parameters for Scalar {
        fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
            vec![ParamSlot {
                name: "theta".into(),
                lr_multiplier: 1.0,
                data: &mut self.theta,
                grad: &mut self.grad,
            }]
        }
        fn grads_ready(&self) -> bool {
            self.ready
        }
        fn clear_grads(&mut self) {
            self.grad.fill(0.0);
            self.ready = false;
        }
    }

    #[test]
    fn lr_at_endpoints_and_flat_schedule() {
        assert_eq!(lr_at(0.0, 0.01, 10.0, 0.75).unwrap(), 0.01);
        let end = lr_at(1.0, 0.01, 10.0, 0.75).unwrap();
        assert!((end - 0.01 / 11f64.powf(0.75)).abs() <= 1e-18);
        for p in [0.0, 0.3, 1.0] {
            assert_eq!(lr_at(p, 0.01, 0.0, 0.75).unwrap(), 0.01);
        }
    }

    #[test]
    fn lr_at_rejects_out_of_range_progress() {
        assert!(lr_at(-0.1, 0.01, 10.0, 0.75).is_err());
        assert!(lr_at(1.1, 0.01, 10.0, 0.75).is_err());
    }

    #[test]
    fn lr_at_strictly_decreases() {
        let mut prev = f64::INFINITY;
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            let lr = lr_at(p, 0.01, 10.0, 0.75).unwrap();
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        let mut s = Scalar {
            theta: vec![1.5],
            grad: vec![0.0],
            ready: true,
        };
        let mut opt = SgdState::new(&mut s, SgdConfig::default()).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.theta[0], 1.5);
    }

    #[test]
    fn momentum_free_step_is_plain_sgd() {
        let mut s = Scalar {
            theta: vec![2.0],
            grad: vec![0.5],
            ready: true,
        };
        let cfg = SgdConfig {
            momentum: 0.0,
            total_steps: 10,
            ..SgdConfig::default()
        };
        let mut opt = SgdState::new(&mut s, cfg).unwrap();
        opt.step(&mut s).unwrap();
        // p = 0 on the first step, so eta = eta0 exactly.
        assert_eq!(s.theta[0], 2.0 - 0.01 * 0.5);
    }

    #[test]
    fn step_without_gradients_is_a_state_error() {
        let mut s = Scalar {
            theta: vec![0.0],
            grad: vec![0.0],
            ready: false,
        };
        let mut opt = SgdState::new(&mut s, SgdConfig::default()).unwrap();
        assert!(matches!(opt.step(&mut s), Err(Error::InvalidState(_))));
    }

    // Three steps on f(theta) = theta^2 against a hand-rolled recurrence.
    #[test]
    fn quadratic_descent_matches_recurrence_oracle() {
        let cfg = SgdConfig {
            eta0: 0.1,
            alpha: 10.0,
            beta: 0.75,
            momentum: 0.9,
            total_steps: 3,
        };
        let mut s = Scalar {
            theta: vec![1.0],
            grad: vec![0.0],
            ready: false,
        };
        let mut opt = SgdState::new(&mut s, cfg).unwrap();

        let mut oracle_theta = 1.0f64;
        let mut oracle_v = 0.0f64;
        for step in 0..3 {
            s.grad[0] = 2.0 * s.theta[0];
            s.ready = true;
            opt.step(&mut s).unwrap();

            let p = step as f64 / 3.0;
            let eta = 0.1 / (1.0 + 10.0 * p).powf(0.75);
            oracle_v = 0.9 * oracle_v - eta * 2.0 * oracle_theta;
            oracle_theta += oracle_v;
            assert_eq!(s.theta[0], oracle_theta, "step {step}");
        }
    }

    #[test]
    fn lr_multiplier_scales_the_gradient_term_exactly() {
        struct Pair {
            slow: Vec<f64>,
            fast: Vec<f64>,
            gs: Vec<f64>,
            gf: Vec<f64>,
            ready: bool,
        }
        impl Parameters for Pair {
            fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
                vec![
                    ParamSlot {
                        name: "slow".into(),
                        lr_multiplier: 1.0,
                        data: &mut self.slow,
                        grad: &mut self.gs,
                    },
                    ParamSlot {
                        name: "fast".into(),
                        lr_multiplier: 10.0,
                        data: &mut self.fast,
                        grad: &mut self.gf,
                    },
                ]
            }
            fn grads_ready(&self) -> bool {
                self.ready
            }
            fn clear_grads(&mut self) {
                self.gs.fill(0.0);
                self.gf.fill(0.0);
                self.ready = false;
            }
        }
        let mut p = Pair {
            slow: vec![0.0],
            fast: vec![0.0],
            gs: vec![1.0],
            gf: vec![1.0],
            ready: true,
        };
        let cfg = SgdConfig {
            momentum: 0.0,
            total_steps: 5,
            ..SgdConfig::default()
        };
        let mut opt = SgdState::new(&mut p, cfg).unwrap();
        for step in 0..5 {
            let ratio = p.fast[0] / p.slow[0];
            if step > 0 {
                assert!((ratio - 10.0).abs() <= 1e-12);
            }
            p.gs[0] = 1.0;
            p.gf[0] = 1.0;
            p.ready = true;
            opt.step(&mut p).unwrap();
        }
        assert!((p.fast[0] / p.slow[0] - 10.0).abs() <= 1e-12);
    }
}
