//! Adam with bias correction, on explicit parameter lists.
//!
//! The moment buffers are part of a run's resumable state: they serialize
//! into checkpoints as ordinary named arrays so that an interrupted-and-
//! resumed run is bit-identical to an uninterrupted one.

use super::{NumericsError, Tensor};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of applied updates (t in the bias-correction terms).
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    /// Default hyperparameters everywhere in the lab: beta1 = 0.9,
    /// beta2 = 0.999, eps = 1e-8. Only the learning rate varies by phase.
    pub fn new(lr: f64, params: &[Tensor]) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn param_groups(&self) -> usize {
        self.m.len()
    }

    /// One update. `params[i]` is replaced by its updated value;
    /// `grads[i]` must have the same element count.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<(), NumericsError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NumericsError::InvalidShape {
                op: "adam_step",
                shape: vec![params.len(), grads.len(), self.m.len()],
                reason: "parameter/gradient group count mismatch",
            });
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((param, grad), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if param.numel() != grad.numel() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    left: param.shape().to_vec(),
                    right: grad.shape().to_vec(),
                });
            }
            let mut new_data = Vec::with_capacity(param.numel());
            for (((&p, &g), mi), vi) in param
                .data()
                .iter()
                .zip(grad.data().iter())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                new_data.push(p - self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
            *param = Tensor::from_vec(param.shape(), new_data)?;
        }
        Ok(())
    }

    /// Moment buffers as named arrays for checkpointing. `prefix`
    /// distinguishes the optimizers of one run (e.g. `opt.enc`).
    pub fn export_state(&self, prefix: &str, params: &[Tensor]) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(self.m.len() * 2 + 1);
        out.push((
            format!("{prefix}.t"),
            Tensor::from_vec(&[1], vec![self.t as f64]).expect("scalar"),
        ));
        for (i, ((m, v), p)) in self.m.iter().zip(self.v.iter()).zip(params.iter()).enumerate() {
            out.push((
                format!("{prefix}.m{i}"),
                Tensor::from_vec(p.shape(), m.clone()).expect("moment shape"),
            ));
            out.push((
                format!("{prefix}.v{i}"),
                Tensor::from_vec(p.shape(), v.clone()).expect("moment shape"),
            ));
        }
        out
    }

    /// Restore moment buffers exported by [`Adam::export_state`].
    pub fn import_state(
        &mut self,
        prefix: &str,
        arrays: &[(String, Tensor)],
    ) -> Result<(), NumericsError> {
        let find = |key: String| -> Option<&Tensor> {
            arrays.iter().find(|(n, _)| *n == key).map(|(_, t)| t)
        };
        let t = find(format!("{prefix}.t")).ok_or(NumericsError::InvalidShape {
            op: "adam_import",
            shape: vec![],
            reason: "missing step-count array",
        })?;
        self.t = t.data()[0] as u64;
        for i in 0..self.m.len() {
            for (kind, slot) in [("m", &mut self.m[i]), ("v", &mut self.v[i])] {
                let tensor = find(format!("{prefix}.{kind}{i}")).ok_or(NumericsError::InvalidShape {
                    op: "adam_import",
                    shape: vec![i],
                    reason: "missing moment array",
                })?;
                if tensor.numel() != slot.len() {
                    return Err(NumericsError::InvalidShape {
                        op: "adam_import",
                        shape: tensor.shape().to_vec(),
                        reason: "moment array has wrong size",
                    });
                }
                slot.copy_from_slice(tensor.data());
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};

    #[test]
    fn first_step_moves_param_by_lr_in_gradient_direction() {
        // With bias correction, the very first Adam step is ~lr * sign(g).
        let mut params = vec![Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap()];
        let grads = vec![Tensor::from_vec(&[2], vec![0.3, -0.7]).unwrap()];
        let mut opt = Adam::new(0.01, &params);
        opt.step(&mut params, &grads).unwrap();
        let p = params[0].data();
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-6, "{}", p[0]);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-6, "{}", p[1]);
    }

    #[test]
    fn converges_on_quadratic_bowl() {
        // f(p) = sum((p - c)^2) should reach the target under Adam quickly.
        let target = [3.0, -1.5, 0.25];
        let mut params = vec![Tensor::from_vec(&[3], vec![0.0; 3]).unwrap()];
        let mut opt = Adam::new(0.05, &params);
        for _ in 0..2000 {
            let mut tape = Tape::new();
            let p = tape.var(&params[0]);
            let c = tape.constant(&Tensor::from_vec(&[3], target.to_vec()).unwrap());
            let d = tape.sub(&p, &c).unwrap();
            let loss = tape.l2_norm_squared(&d).unwrap();
            let grads = tape.backward(&loss).unwrap();
            let g = grads.wrt(&p).unwrap().detach();
            opt.step(&mut params, &[g]).unwrap();
        }
        for (got, want) in params[0].data().iter().zip(target.iter()) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn state_roundtrip_resumes_identically() {
        let mk_grad = |step: u64| {
            Tensor::from_vec(&[2], vec![0.1 * (step as f64 + 1.0), -0.05]).unwrap()
        };
        // Straight run: 10 steps.
        let mut p_straight = vec![Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap()];
        let mut opt_straight = Adam::new(0.01, &p_straight);
        for s in 0..10 {
            let g = mk_grad(s);
            opt_straight.step(&mut p_straight, &[g]).unwrap();
        }
        // Interrupted run: 5 steps, export/import, 5 more.
        let mut p_resumed = vec![Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap()];
        let mut opt_a = Adam::new(0.01, &p_resumed);
        for s in 0..5 {
            let g = mk_grad(s);
            opt_a.step(&mut p_resumed, &[g]).unwrap();
        }
        let state = opt_a.export_state("opt.test", &p_resumed);
        let mut opt_b = Adam::new(0.01, &p_resumed);
        opt_b.import_state("opt.test", &state).unwrap();
        for s in 5..10 {
            let g = mk_grad(s);
            opt_b.step(&mut p_resumed, &[g]).unwrap();
        }
        // Bitwise identical, not just close.
        assert_eq!(p_straight[0].data(), p_resumed[0].data());
    }

    #[test]
    fn mismatched_group_count_is_rejected() {
        let mut params = vec![Tensor::zeros(&[2])];
        let grads: Vec<Tensor> = vec![];
        let mut opt = Adam::new(0.01, &params);
        assert!(opt.step(&mut params, &grads).is_err());
    }
}
