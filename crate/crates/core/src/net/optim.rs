use super::unet::{Gradients, UNet};

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u32,
    /// Per-parameter first and second moments, in `UNet::params` order with
    /// weights followed by biases.
    moments: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn step(&mut self, net: &mut UNet, grads: &Gradients) {
        let mut params = net.params_mut();
        assert_eq!(params.len(), grads.len(), "gradient/parameter mismatch");
        if self.moments.is_empty() {
            self.moments = params
                .iter()
                .map(|p| {
                    let n = p.weight.len() + p.bias.len();
                    (vec![0.0; n], vec![0.0; n])
                })
                .collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((conv, grad), (m, v)) in params.iter_mut().zip(grads).zip(self.moments.iter_mut()) {
            let n_w = conv.weight.len();
            let values = conv.weight.iter_mut().chain(conv.bias.iter_mut());
            let g_all = grad.weight.iter().chain(grad.bias.iter());
            for (k, (w, &g)) in values.zip(g_all).enumerate() {
                let decay = if k < n_w { self.weight_decay } else { 0.0 };
                let g = g + decay * *w as f64;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let update = self.learning_rate * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
    }
}
