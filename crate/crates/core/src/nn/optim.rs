use crate::error::{dim, Result};
use crate::tensor::Tensor;

/// Heavy-ball SGD: `v <- mu * v + g`, `p <- p - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    /// Zero velocity for each parameter tensor.
    pub fn new(lr: f64, momentum: f64, params: &[&Tensor]) -> Self {
        OptimizerState {
            lr,
            momentum,
            velocity: params
                .iter()
                .map(|p| Tensor::zeros(p.dims().to_vec()).expect("parameter dims are valid"))
                .collect(),
        }
    }

    /// Mean |v| of one velocity tensor.
    pub fn mean_abs_velocity(&self, index: usize) -> f64 {
        let v = &self.velocity[index];
        v.data().iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
    }
}

pub fn sgd_momentum_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.velocity.len() {
        return Err(dim("parameter, gradient and velocity counts differ"));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(state.velocity.iter_mut()) {
        if p.dims() != g.dims() || p.dims() != v.dims() {
            return Err(dim(format!(
                "parameter {:?}, gradient {:?}, velocity {:?}",
                p.dims(),
                g.dims(),
                v.dims()
            )));
        }
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut().iter_mut()) {
            *vv = state.momentum * *vv + gv;
            *pv -= state.lr * *vv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn hand_recurrence() {
        let mut p = scalar(0.0);
        let g = scalar(1.0);
        let mut st = OptimizerState::new(1.0, 0.9, &[&p]);
        sgd_momentum_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert_eq!(st.velocity[0].data(), &[1.0]);
        sgd_momentum_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert!((st.velocity[0].data()[0] - 1.9).abs() < 1e-15);
        assert!((p.data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_is_plain_sgd() {
        let mut p = scalar(1.0);
        let mut st = OptimizerState::new(0.1, 0.0, &[&p]);
        for _ in 0..3 {
            sgd_momentum_step(&mut [&mut p], &[&scalar(2.0)], &mut st).unwrap();
        }
        assert!((p.data()[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn velocity_decays_without_gradient() {
        let mut p = scalar(0.0);
        let mut st = OptimizerState::new(0.5, 0.5, &[&p]);
        sgd_momentum_step(&mut [&mut p], &[&scalar(4.0)], &mut st).unwrap();
        for k in 1..5 {
            sgd_momentum_step(&mut [&mut p], &[&scalar(0.0)], &mut st).unwrap();
            assert_eq!(st.velocity[0].data()[0], 4.0 * 0.5f64.powi(k));
        }
        assert_eq!(st.mean_abs_velocity(0), 0.25);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar(0.0);
        let mut st = OptimizerState::new(0.1, 0.9, &[&p]);
        let g = Tensor::zeros(vec![2]).unwrap();
        assert!(sgd_momentum_step(&mut [&mut p], &[&g], &mut st).is_err());
    }
}
