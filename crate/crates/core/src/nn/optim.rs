use indexmap::IndexMap;

use super::params::ModelParams;
use super::scalar::Scalar;
use super::tensor::Tensor;

/// Adam with bias correction. One instance per network so each keeps its own
/// step counter. First and second moments live in the parameter dtype; the
/// arithmetic runs in f64.
pub struct Adam<S> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: IndexMap<String, Tensor<S>>,
    v: IndexMap<String, Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// Apply one update to every named gradient. The step counter advances
    /// once per call, before bias correction.
    pub fn step(&mut self, params: &mut ModelParams<S>, grads: &[(&str, &Tensor<S>)], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, grad) in grads {
            let p = params.get_mut(name);
            assert_eq!(p.shape(), grad.shape(), "gradient shape for '{name}'");
            let m = self
                .m
                .entry(name.to_string())
                .or_insert_with(|| p.zeros_like());
            let v = self
                .v
                .entry(name.to_string())
                .or_insert_with(|| p.zeros_like());
            for ((pv, &gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                let g = gv.as_f64();
                let m_new = self.beta1 * mv.as_f64() + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * vv.as_f64() + (1.0 - self.beta2) * g * g;
                *mv = S::from_f64(m_new);
                *vv = S::from_f64(v_new);
                let mhat = m_new / bc1;
                let vhat = v_new / bc2;
                *pv = S::from_f64(pv.as_f64() - lr * mhat / (vhat.sqrt() + self.eps));
            }
        }
    }

    /// Moment tensors and step count, for checkpointing.
    pub fn state(&self) -> (&IndexMap<String, Tensor<S>>, &IndexMap<String, Tensor<S>>, u64) {
        (&self.m, &self.v, self.t)
    }

    pub fn restore(
        &mut self,
        m: IndexMap<String, Tensor<S>>,
        v: IndexMap<String, Tensor<S>>,
        t: u64,
    ) {
        self.m = m;
        self.v = v;
        self.t = t;
    }
}

/// Constant learning rate for `flat` epochs, then a straight line down to
/// exactly zero at epoch `flat + decay`.
pub fn lr_schedule(base: f64, flat: usize, decay: usize, epoch: usize) -> f64 {
    if epoch <= flat {
        base
    } else if epoch >= flat + decay {
        0.0
    } else {
        base * (1.0 - (epoch - flat) as f64 / decay as f64)
    }
}
