use crate::error::{Error, Result};
use crate::kernels::{Scalar, Tape, Tensor, Var};
use crate::model::{Batch, ForwardOutput, PAD, SHIFT};

/// Weights of the loss terms.
#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub label_smoothing: f32,
    /// One weight per target factor stream; missing entries count as 1.
    pub factor_weights: Vec<f32>,
    pub nvs_weight: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            label_smoothing: 0.1,
            factor_weights: Vec::new(),
            nvs_weight: 1.0,
        }
    }
}

/// Hit counts of one stream.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn ratio(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    pub fn merge(&mut self, o: Accuracy) {
        self.correct += o.correct;
        self.total += o.total;
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossMetrics {
    pub loss: f64,
    pub surface_ce: f64,
    pub factor_ce: Vec<f64>,
    pub nvs_bce: Option<f64>,
    /// Non-pad target positions.
    pub tokens: usize,
    pub surface: Accuracy,
    /// SHIFT labels are not counted.
    pub factors: Vec<Accuracy>,
}

fn accuracy<T: Scalar>(logits: &Tensor<T>, labels: &[u32], skip: &[u32]) -> Accuracy {
    let mut acc = Accuracy::default();
    for (r, &l) in labels.iter().enumerate() {
        if skip.contains(&l) {
            continue;
        }
        let row = logits.row(r);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        acc.total += 1;
        acc.correct += usize::from(best as u32 == l);
    }
    acc
}

/// Multi-hot bag-of-words targets, `[batch, vocab]`.
pub fn nvs_target_matrix<T: Scalar>(batch: &Batch, vocab: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); batch.size * vocab];
    for (b, bag) in batch.nvs_targets.iter().enumerate() {
        for &t in bag {
            data[b * vocab + t as usize] = T::one();
        }
    }
    Tensor::from_parts(vec![batch.size, vocab], data)
}

/// Σ weight·smoothed-CE over surface and factor streams, each normalised by
/// non-pad target tokens, plus `nvs_weight` · BCE normalised by batch·V.
pub fn compute_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ForwardOutput,
    batch: &Batch,
    cfg: &LossConfig,
) -> Result<(Var, LossMetrics)> {
    if out.factor_logits.len() != batch.factor_labels.len() {
        return Err(Error::Input(format!(
            "{} factor outputs for {} factor label streams",
            out.factor_logits.len(),
            batch.factor_labels.len()
        )));
    }
    let tokens = batch.num_target_tokens();
    let norm = T::lit(tokens as f64);
    let smoothing = T::lit(cfg.label_smoothing as f64);
    let surface = tape.smoothed_cross_entropy(out.logits, &batch.labels, PAD, smoothing, norm)?;
    let mut metrics = LossMetrics {
        tokens,
        surface_ce: tape.value(surface).data()[0].as_f64(),
        surface: accuracy(tape.value(out.logits), &batch.labels, &[PAD]),
        ..LossMetrics::default()
    };
    let mut terms = vec![(surface, T::one())];
    for (i, (&logits, labels)) in out.factor_logits.iter().zip(&batch.factor_labels).enumerate() {
        let w = cfg.factor_weights.get(i).copied().unwrap_or(1.0);
        let ce = tape.smoothed_cross_entropy(logits, labels, PAD, smoothing, norm)?;
        metrics.factor_ce.push(tape.value(ce).data()[0].as_f64());
        metrics.factors.push(accuracy(tape.value(logits), labels, &[PAD, SHIFT]));
        terms.push((ce, T::lit(w as f64)));
    }
    if let Some(z) = out.nvs_logits {
        let v = tape.value(z).cols();
        let targets = nvs_target_matrix::<T>(batch, v);
        let bce = tape.bce_with_logits(z, targets, T::lit((batch.size * v) as f64))?;
        metrics.nvs_bce = Some(tape.value(bce).data()[0].as_f64());
        terms.push((bce, T::lit(cfg.nvs_weight as f64)));
    }
    let loss = tape.weighted_sum(&terms)?;
    metrics.loss = tape.value(loss).data()[0].as_f64();
    Ok((loss, metrics))
}
