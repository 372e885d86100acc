//! First-order optimizers producing per-group update deltas, so projection
//! methods can constrain the actual step rather than the raw gradient.

use nalgebra::DMatrix;

use crate::config::{DecaySchedule, OptimizerConfig, OptimizerKind};
use crate::model::Grads;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimizerConfig,
    /// Steps taken in the current task; the decay schedule counts these.
    task_steps: u64,
    adam_t: u64,
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

/// Grows `state` to `shape`, keeping existing entries (head rows only append).
fn fit_shape(state: &mut DMatrix<f64>, shape: (usize, usize)) {
    if state.shape() != shape {
        let mut fresh = DMatrix::zeros(shape.0, shape.1);
        let r = state.nrows().min(shape.0);
        let c = state.ncols().min(shape.1);
        fresh.view_mut((0, 0), (r, c)).copy_from(&state.view((0, 0), (r, c)));
        *state = fresh;
    }
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        Self { cfg: cfg.clone(), task_steps: 0, adam_t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.cfg.name
    }

    /// Restarts the decay schedule; called at the start of every task.
    pub fn begin_task(&mut self) {
        self.task_steps = 0;
    }

    pub fn learning_rate(&self) -> f64 {
        match self.cfg.decay_schedule {
            DecaySchedule::Constant => self.cfg.learning_rate,
            DecaySchedule::Step { every, gamma } => {
                self.cfg.learning_rate * gamma.powi((self.task_steps / every as u64) as i32)
            }
        }
    }

    /// The parameter change for `grads` (already including every penalty).
    pub fn delta(&mut self, grads: &Grads) -> Grads {
        let lr = self.learning_rate();
        self.task_steps += 1;
        match self.cfg.name {
            OptimizerKind::Sgd => Grads { groups: grads.groups.iter().map(|g| g * -lr).collect() },
            OptimizerKind::Adam => {
                self.m.resize_with(grads.groups.len(), || DMatrix::zeros(0, 0));
                self.v.resize_with(grads.groups.len(), || DMatrix::zeros(0, 0));
                self.adam_t += 1;
                let c1 = 1.0 - BETA1.powi(self.adam_t as i32);
                let c2 = 1.0 - BETA2.powi(self.adam_t as i32);
                let mut out = Vec::with_capacity(grads.groups.len());
                for (k, g) in grads.groups.iter().enumerate() {
                    fit_shape(&mut self.m[k], g.shape());
                    fit_shape(&mut self.v[k], g.shape());
                    self.m[k] = &self.m[k] * BETA1 + g * (1.0 - BETA1);
                    self.v[k] = &self.v[k] * BETA2 + g.component_mul(g) * (1.0 - BETA2);
                    let (m, v) = (&self.m[k], &self.v[k]);
                    out.push(DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| {
                        -lr * (m[(i, j)] / c1) / ((v[(i, j)] / c2).sqrt() + EPS)
                    }));
                }
                Grads { groups: out }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(name: OptimizerKind, decay: DecaySchedule) -> OptimizerConfig {
        OptimizerConfig { name, learning_rate: 0.1, decay_schedule: decay }
    }

    #[test]
    fn sgd_step() {
        let mut o = Optimizer::new(&cfg(OptimizerKind::Sgd, DecaySchedule::Constant));
        let d = o.delta(&Grads { groups: vec![DMatrix::from_element(1, 2, 2.0)] });
        assert_eq!(d.groups[0], DMatrix::from_element(1, 2, -0.2));
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut o = Optimizer::new(&cfg(OptimizerKind::Adam, DecaySchedule::Constant));
        let d = o.delta(&Grads { groups: vec![DMatrix::from_row_slice(1, 2, &[3.0, -0.5])] });
        assert!((d.groups[0][(0, 0)] + 0.1).abs() < 1e-6);
        assert!((d.groups[0][(0, 1)] - 0.1).abs() < 1e-6);
        // growing head keeps moments of existing rows
        let d = o.delta(&Grads { groups: vec![DMatrix::from_element(2, 2, 1.0)] });
        assert_eq!(d.groups[0].shape(), (2, 2));
    }

    #[test]
    fn step_decay() {
        let mut o = Optimizer::new(&cfg(OptimizerKind::Sgd, DecaySchedule::Step { every: 2, gamma: 0.5 }));
        let g = Grads { groups: vec![DMatrix::from_element(1, 1, 1.0)] };
        let steps: Vec<f64> = (0..5).map(|_| o.delta(&g).groups[0][(0, 0)]).collect();
        assert_eq!(steps, vec![-0.1, -0.1, -0.05, -0.05, -0.025]);
        o.begin_task();
        assert_eq!(o.learning_rate(), 0.1);
    }
}
