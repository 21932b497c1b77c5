use super::graph::Graph;
use crate::scalar::Scalar;

/// Adam with Keras default moments (`beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-7`).
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: 0.9, beta2: 0.999, eps: 1e-7, step: 0, moments: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter that holds a gradient.
    /// `grad_scale` multiplies the raw accumulated gradients first.
    pub fn step(&mut self, graph: &mut Graph<T>, grad_scale: f64) {
        self.step += 1;
        let t = self.step as i32;
        let lr_t = self.learning_rate * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t));
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one, lr_t, eps, scale) = (
            T::one(),
            T::from_f64_lossy(lr_t),
            T::from_f64_lossy(self.eps),
            T::from_f64_lossy(grad_scale),
        );
        let mut slot = 0;
        for node in graph.nodes_mut() {
            if !node.trainable {
                continue;
            }
            for p in node.optimizable_mut() {
                if self.moments.len() <= slot {
                    self.moments.push((vec![T::zero(); p.len()], vec![T::zero(); p.len()]));
                }
                if p.has_grad() {
                    let (m, v) = &mut self.moments[slot];
                    let grad = p.grad().to_vec();
                    for (((w, g), mi), vi) in p.value.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = *g * scale;
                        *mi = b1 * *mi + (one - b1) * g;
                        *vi = b2 * *vi + (one - b2) * g * g;
                        *w -= lr_t * *mi / (vi.sqrt() + eps);
                    }
                }
                slot += 1;
            }
        }
    }
}
