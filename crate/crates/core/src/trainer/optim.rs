use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels::Tensor;
use crate::model::ModelParams;

pub const BETA1: f32 = 0.9;
pub const BETA2: f32 = 0.98;
pub const EPSILON: f32 = 1e-9;

/// Adam with an inverse square-root schedule and linear warmup.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f32,
    pub warmup: usize,
    step: u64,
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
}

impl Adam {
    pub fn new(learning_rate: f32, warmup: usize) -> Self {
        Self {
            learning_rate,
            warmup,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// `lr · min(t / warmup, sqrt(warmup / t))`.
    pub fn rate(&self, t: u64) -> f32 {
        if self.warmup == 0 || t == 0 {
            return self.learning_rate;
        }
        let (t, w) = (t as f64, self.warmup as f64);
        (self.learning_rate as f64 * (t / w).min((w / t).sqrt())) as f32
    }

    /// One update of every trainable parameter that has a gradient.
    pub fn update<'g>(&mut self, params: &mut ModelParams, grad: impl Fn(&str) -> Option<&'g Tensor>) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let lr = self.rate(t);
        let c1 = 1.0 - BETA1.powf(t as f32);
        let c2 = 1.0 - BETA2.powf(t as f32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            if params.is_frozen(&name) {
                continue;
            }
            let Some(g) = grad(&name) else { continue };
            let p = params.get_mut(&name)?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; n]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + EPSILON);
            }
        }
        Ok(())
    }

    fn moments(map: &BTreeMap<String, Vec<f32>>, like: &ModelParams) -> Result<ModelParams> {
        let mut out = ModelParams::new();
        for (name, data) in map {
            let shape = like.get(name)?.shape().to_vec();
            out.insert(name, Tensor::new(shape, data.clone())?)?;
        }
        Ok(out)
    }

    /// Writes the first and second moments next to each other.
    pub fn save(&self, dir: &Path, like: &ModelParams) -> Result<()> {
        Self::moments(&self.m, like)?.save(&dir.join("adam.m"))?;
        Self::moments(&self.v, like)?.save(&dir.join("adam.v"))
    }

    pub fn load(dir: &Path, learning_rate: f32, warmup: usize, step: u64) -> Result<Self> {
        let read = |f: &str| -> Result<BTreeMap<String, Vec<f32>>> {
            Ok(ModelParams::load(&dir.join(f))?
                .iter()
                .map(|(n, t)| (n.to_string(), t.data().to_vec()))
                .collect())
        };
        Ok(Self {
            learning_rate,
            warmup,
            step,
            m: read("adam.m")?,
            v: read("adam.v")?,
        })
    }
}
