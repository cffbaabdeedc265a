//! Adam optimizer with serializable state.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use super::ParamsMut;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step counter; bias correction uses t+1 on the t-th call.
    pub t: u64,
    slots: BTreeMap<String, Slot>,
}

#[derive(Debug, Clone)]
struct Slot {
    m: ArrayD<f64>,
    v: ArrayD<f64>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, slots: BTreeMap::new() }
    }

    /// One update over the full parameter list. Slots are keyed by parameter
    /// name, so call order and parameter insertion order do not matter.
    pub fn step(&mut self, params: ParamsMut<'_>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params {
            let slot = self.slots.entry(name).or_insert_with(|| Slot {
                m: ArrayD::zeros(p.val.raw_dim()),
                v: ArrayD::zeros(p.val.raw_dim()),
            });
            assert_eq!(slot.m.shape(), p.val.shape(), "parameter shape changed under optimizer");
            let (b1, b2) = (self.beta1, self.beta2);
            ndarray::Zip::from(&mut slot.m).and(&p.grad).for_each(|m, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
            });
            ndarray::Zip::from(&mut slot.v).and(&p.grad).for_each(|v, &g| {
                *v = b2 * *v + (1.0 - b2) * g * g;
            });
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut p.val).and(&slot.m).and(&slot.v).for_each(|w, &m, &v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
    }

    /// Serializes optimizer state as named tensors plus a step counter.
    /// Keys: `<param>.m`, `<param>.v`, and a 1-element `adam.t`.
    pub fn state_tensors(&self) -> Vec<(String, ArrayD<f64>)> {
        let mut out = Vec::with_capacity(self.slots.len() * 2 + 1);
        out.push(("adam.t".to_string(), ArrayD::from_elem(vec![1], self.t as f64)));
        for (name, slot) in &self.slots {
            out.push((format!("{name}.m"), slot.m.clone()));
            out.push((format!("{name}.v"), slot.v.clone()));
        }
        out
    }

    /// Restores state written by [`state_tensors`]. Unknown keys are errors;
    /// the caller decides which parameters exist.
    pub fn load_state(&mut self, tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<(), String> {
        let t = tensors
            .get("adam.t")
            .ok_or_else(|| "optimizer state missing adam.t".to_string())?;
        self.t = t.iter().next().copied().unwrap_or(0.0) as u64;
        self.slots.clear();
        let mut halves: BTreeMap<String, (Option<ArrayD<f64>>, Option<ArrayD<f64>>)> =
            BTreeMap::new();
        for (key, val) in tensors {
            if key == "adam.t" {
                continue;
            }
            if let Some(base) = key.strip_suffix(".m") {
                halves.entry(base.to_string()).or_default().0 = Some(val.clone());
            } else if let Some(base) = key.strip_suffix(".v") {
                halves.entry(base.to_string()).or_default().1 = Some(val.clone());
            } else {
                return Err(format!("unrecognized optimizer state key: {key}"));
            }
        }
        for (base, (m, v)) in halves {
            match (m, v) {
                (Some(m), Some(v)) => {
                    self.slots.insert(base, Slot { m, v });
                }
                _ => return Err(format!("optimizer state for {base} missing .m or .v half")),
            }
        }
        Ok(())
    }
}
