use super::params::{round_f32, ParamStore};

/// Hyperparameters of decoupled-weight-decay Adam.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Per-parameter moments and the shared step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl OptimState {
    pub fn for_params(store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self { m: zeros.clone(), v: zeros, t: 0 }
    }
}

impl AdamW {
    /// One update of every parameter from its accumulated gradient.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&self, store: &mut ParamStore, state: &mut OptimState) {
        if state.m.len() != store.len() {
            *state = OptimState::for_params(store);
        }
        state.t += 1;
        let t = state.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let k = id.index();
            let param = store.get_mut(id);
            let grad = param.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut state.m[k], &mut state.v[k]);
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                data[i] = data[i] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Rounds parameters and moments to `f32`, so in-memory training state is
/// exactly what a checkpoint stores.
pub fn round_state_f32(store: &mut ParamStore, state: &mut OptimState) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = round_f32(*x));
    }
    for buf in state.m.iter_mut().chain(state.v.iter_mut()) {
        buf.iter_mut().for_each(|x| *x = round_f32(*x));
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.ids().collect();
    let norm = ids
        .iter()
        .filter_map(|&id| store.get(id).grad())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for id in ids {
            let p = store.get_mut(id);
            if let Some(g) = p.take_grad() {
                let scaled: Vec<f64> = g.iter().map(|x| x * s).collect();
                p.accumulate_grad(&scaled);
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::DiffArray;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", DiffArray::new(&[values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_grad_without_decay_is_identity() {
        let mut s = store_with(&[0.5, -2.0]);
        let id = s.lookup("p").unwrap();
        s.get_mut(id).accumulate_grad(&[0.0, 0.0]);
        let mut st = OptimState::for_params(&s);
        AdamW { weight_decay: 0.0, ..AdamW::default() }.step(&mut s, &mut st);
        assert_eq!(s.get(id).data(), &[0.5, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_grad_with_decay_scales() {
        let mut s = store_with(&[0.5, -2.0]);
        let id = s.lookup("p").unwrap();
        s.get_mut(id).accumulate_grad(&[0.0, 0.0]);
        let mut st = OptimState::for_params(&s);
        let opt = AdamW { lr: 1e-2, weight_decay: 0.1, ..AdamW::default() };
        opt.step(&mut s, &mut st);
        let f = 1.0 - 1e-2 * 0.1;
        assert_eq!(s.get(id).data(), &[0.5 * f, -2.0 * f]);
    }

    #[test]
    fn first_step_matches_hand_formula() {
        let mut s = store_with(&[1.0]);
        let id = s.lookup("p").unwrap();
        s.get_mut(id).accumulate_grad(&[1.0]);
        let mut st = OptimState::for_params(&s);
        let opt = AdamW::default();
        opt.step(&mut s, &mut st);
        // m = 0.1, v = 0.001; mhat = 1, vhat = 1
        let m = 0.1;
        let v = 0.001;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let expected = 1.0 * (1.0 - 1e-4 * 1e-4) - 1e-4 * mhat / (f64::sqrt(vhat) + 1e-8);
        assert!((s.get(id).data()[0] - expected).abs() < 1e-15);
        assert!((st.m[0][0] - m).abs() < 1e-15);
        assert!((st.v[0][0] - v).abs() < 1e-15);
    }

    #[test]
    fn step_counter_increments() {
        let mut s = store_with(&[1.0]);
        let mut st = OptimState::for_params(&s);
        for t in 1..=3 {
            AdamW::default().step(&mut s, &mut st);
            assert_eq!(st.t, t);
        }
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut s = store_with(&[0.0, 0.0]);
        let id = s.lookup("p").unwrap();
        s.get_mut(id).accumulate_grad(&[3.0, 4.0]);
        let n = clip_grad_norm(&mut s, 1.0);
        assert_eq!(n, 5.0);
        let g = s.get(id).grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-9 && (g[1] - 0.8).abs() < 1e-9);
    }
}
