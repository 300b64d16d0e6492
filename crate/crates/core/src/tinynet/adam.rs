/// Adam with bias-corrected first and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn update(&mut self, params: Vec<&mut Vec<f64>>, grads: Vec<&Vec<f64>>) {
        assert_eq!(params.len(), grads.len(), "parameter/gradient tensor count");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if g.is_empty() {
                // tensor untouched by this batch
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}
