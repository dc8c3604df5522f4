//! Adam optimizer over named parameter lists, with exportable moment state
//! so checkpoints capture the full training trajectory.

use crate::tensor::Tensor;

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSlot {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

#[derive(Debug)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    /// Indexed in step order of the parameter list; None until first update.
    slots: Vec<Option<MomentSlot>>,
}

impl Adam {
    pub fn new(lr: f32) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            slots: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over `params`, in list order. Parameters without a gradient
    /// this step are left untouched (their moments do not decay); gradients
    /// are consumed and reset to zero afterwards by the caller via
    /// [`zero_grads`].
    pub fn step(&mut self, params: &[(String, Tensor)]) {
        self.t += 1;
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), None);
        }
        let c1 = 1.0 - (self.beta1 as f64).powi(self.t as i32);
        let c2 = 1.0 - (self.beta2 as f64).powi(self.t as i32);
        for (idx, (_, p)) in params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let slot = self.slots[idx].get_or_insert_with(|| MomentSlot {
                m: vec![0.0; grad.len()],
                v: vec![0.0; grad.len()],
            });
            debug_assert_eq!(slot.m.len(), grad.len());
            p.with_data_grad_mut(|data, _| {
                for i in 0..data.len() {
                    let g = grad[i];
                    slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * g;
                    slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = slot.m[i] as f64 / c1;
                    let v_hat = slot.v[i] as f64 / c2;
                    data[i] -=
                        (self.lr as f64 * m_hat / (v_hat.sqrt() + self.eps as f64)) as f32;
                }
            });
        }
    }

    pub fn export_state(&self) -> (u64, &[Option<MomentSlot>]) {
        (self.t, &self.slots)
    }

    pub fn restore_state(&mut self, t: u64, slots: Vec<Option<MomentSlot>>) {
        self.t = t;
        self.slots = slots;
    }
}

/// Clears accumulated gradients on every parameter.
pub fn zero_grads(params: &[(String, Tensor)]) {
    for (_, p) in params {
        p.zero_grad();
    }
}
