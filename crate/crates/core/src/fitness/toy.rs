//! Desk-scale stand-in for a real training stack: a two-block MLP on a
//! 4-class Gaussian-blobs problem.
//!
//! Each hidden block is `relu(γ ⊙ (W x) + β)`; a hidden unit plays the role of
//! a filter, its incoming weight row being the filter weights. Pruning zeroes
//! a unit's row, γ, β and its outgoing column, and keeps them at zero through
//! finetuning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{EvalError, Evaluator, FitnessRequest, FitnessResponse};
use crate::error::{Error, Result};
use crate::snapshot::{ActivationStats, LayerRecord, Mask, NetworkSnapshot, Tensor, DEFAULT_HISTOGRAM_BINS};

pub const INPUT_DIM: usize = 16;
pub const HIDDEN_WIDTHS: [usize; 2] = [32, 32];
pub const CLASSES: usize = 4;
pub const TRAIN_POINTS: usize = 2000;
pub const VALIDATION_POINTS: usize = 500;
pub const CALIBRATION_POINTS: usize = 256;
pub const PRETRAIN_LR: f64 = 0.05;
pub const PRETRAIN_EPOCHS: usize = 30;
pub const FINETUNE_LR: f64 = 0.01;
pub const BATCH_SIZE: usize = 32;
/// Distance of each class centre from the origin, in units of the per-axis noise.
const BLOB_RADIUS: f64 = 3.5;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    pub seed: u64,
    pub train_x: Vec<f64>,
    pub train_y: Vec<usize>,
    pub val_x: Vec<f64>,
    pub val_y: Vec<usize>,
}

impl ToyDataset {
    /// Balanced Gaussian blobs around random class centres.
    pub fn generate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB10B_5EED);
        let centers: Vec<Vec<f64>> = (0..CLASSES)
            .map(|_| {
                let v: Vec<f64> = (0..INPUT_DIM).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| x / norm * BLOB_RADIUS).collect()
            })
            .collect();
        let sample = |n: usize, rng: &mut ChaCha8Rng| {
            let mut labels: Vec<usize> = (0..n).map(|i| i % CLASSES).collect();
            labels.shuffle(rng);
            let mut xs = Vec::with_capacity(n * INPUT_DIM);
            for &y in &labels {
                for c in &centers[y] {
                    let z: f64 = rng.sample(StandardNormal);
                    xs.push(c + z);
                }
            }
            (xs, labels)
        };
        let (train_x, train_y) = sample(TRAIN_POINTS, &mut rng);
        let (val_x, val_y) = sample(VALIDATION_POINTS, &mut rng);
        Self {
            seed,
            train_x,
            train_y,
            val_x,
            val_y,
        }
    }

    fn train_point(&self, i: usize) -> &[f64] {
        &self.train_x[i * INPUT_DIM..(i + 1) * INPUT_DIM]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Hidden {
    in_dim: usize,
    out_dim: usize,
    w: Vec<f64>,
    gamma: Vec<f64>,
    beta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    hidden: Vec<Hidden>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

/// Per-sample activations kept for backpropagation.
struct Trace {
    z: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

#[derive(Clone)]
struct Grads {
    w: Vec<Vec<f64>>,
    gamma: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    out_w: Vec<f64>,
    out_b: Vec<f64>,
}

impl Grads {
    fn zeros(model: &ToyModel) -> Self {
        Grads {
            w: model.hidden.iter().map(|h| vec![0.0; h.w.len()]).collect(),
            gamma: model.hidden.iter().map(|h| vec![0.0; h.out_dim]).collect(),
            beta: model.hidden.iter().map(|h| vec![0.0; h.out_dim]).collect(),
            out_w: vec![0.0; model.out_w.len()],
            out_b: vec![0.0; CLASSES],
        }
    }

    fn clear(&mut self) {
        for v in self.w.iter_mut().chain(&mut self.gamma).chain(&mut self.beta) {
            v.fill(0.0);
        }
        self.out_w.fill(0.0);
        self.out_b.fill(0.0);
    }
}

impl ToyModel {
    /// He-initialized weights, γ = 1, β = 0.
    pub fn build(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = |n: usize, std: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
        };
        let mut hidden = Vec::new();
        let mut in_dim = INPUT_DIM;
        for &out_dim in &HIDDEN_WIDTHS {
            hidden.push(Hidden {
                in_dim,
                out_dim,
                w: gauss(out_dim * in_dim, (2.0 / in_dim as f64).sqrt(), &mut rng),
                gamma: vec![1.0; out_dim],
                beta: vec![0.0; out_dim],
            });
            in_dim = out_dim;
        }
        let out_w = gauss(CLASSES * in_dim, (1.0 / in_dim as f64).sqrt(), &mut rng);
        ToyModel {
            hidden,
            out_w,
            out_b: vec![0.0; CLASSES],
        }
    }

    pub fn filter_counts(&self) -> Vec<usize> {
        self.hidden.iter().map(|h| h.out_dim).collect()
    }

    pub fn layer_names(&self) -> Vec<String> {
        (0..self.hidden.len()).map(|i| format!("fc{}", i + 1)).collect()
    }

    fn forward(&self, x: &[f64]) -> Trace {
        let mut z_all = Vec::with_capacity(self.hidden.len());
        let mut u_all = Vec::with_capacity(self.hidden.len());
        let mut h_all: Vec<Vec<f64>> = Vec::with_capacity(self.hidden.len());
        for (l, layer) in self.hidden.iter().enumerate() {
            let input: &[f64] = if l == 0 { x } else { &h_all[l - 1] };
            let mut z = vec![0.0; layer.out_dim];
            for (i, zi) in z.iter_mut().enumerate() {
                let row = &layer.w[i * layer.in_dim..(i + 1) * layer.in_dim];
                *zi = row.iter().zip(input).map(|(a, b)| a * b).sum();
            }
            let u: Vec<f64> = z.iter().zip(&layer.gamma).zip(&layer.beta).map(|((z, g), b)| g * z + b).collect();
            let h: Vec<f64> = u.iter().map(|&v| v.max(0.0)).collect();
            z_all.push(z);
            u_all.push(u);
            h_all.push(h);
        }
        let last = h_all.last().expect("at least one hidden block");
        let width = last.len();
        let logits = (0..CLASSES)
            .map(|c| {
                self.out_b[c] + self.out_w[c * width..(c + 1) * width].iter().zip(last).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Trace {
            z: z_all,
            u: u_all,
            h: h_all,
            logits,
        }
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let logits = self.forward(x).logits;
        let mut best = 0;
        for c in 1..CLASSES {
            if logits[c] > logits[best] {
                best = c;
            }
        }
        best
    }

    /// Accumulates the cross-entropy gradient of one sample; returns its loss.
    fn backward(&self, x: &[f64], y: usize, grads: &mut Grads) -> f64 {
        let t = self.forward(x);
        let max = t.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exp: Vec<f64> = t.logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exp.iter().sum();
        let loss = -(exp[y] / sum).ln();
        let dlogits: Vec<f64> = exp.iter().enumerate().map(|(c, e)| e / sum - f64::from(c == y)).collect();

        let nl = self.hidden.len();
        let width = self.hidden[nl - 1].out_dim;
        let mut dh = vec![0.0; width];
        for c in 0..CLASSES {
            grads.out_b[c] += dlogits[c];
            let row = &self.out_w[c * width..(c + 1) * width];
            let grow = &mut grads.out_w[c * width..(c + 1) * width];
            for j in 0..width {
                grow[j] += dlogits[c] * t.h[nl - 1][j];
                dh[j] += dlogits[c] * row[j];
            }
        }
        for l in (0..nl).rev() {
            let layer = &self.hidden[l];
            let input: &[f64] = if l == 0 { x } else { &t.h[l - 1] };
            let mut dinput = vec![0.0; layer.in_dim];
            for i in 0..layer.out_dim {
                if t.u[l][i] <= 0.0 {
                    continue;
                }
                let du = dh[i];
                grads.gamma[l][i] += du * t.z[l][i];
                grads.beta[l][i] += du;
                let dz = du * layer.gamma[i];
                let row = &layer.w[i * layer.in_dim..(i + 1) * layer.in_dim];
                let grow = &mut grads.w[l][i * layer.in_dim..(i + 1) * layer.in_dim];
                for k in 0..layer.in_dim {
                    grow[k] += dz * input[k];
                    dinput[k] += dz * row[k];
                }
            }
            dh = dinput;
        }
        loss
    }

    fn step(&mut self, grads: &Grads, lr: f64, batch: usize) {
        let scale = lr / batch as f64;
        for (l, layer) in self.hidden.iter_mut().enumerate() {
            for (w, g) in layer.w.iter_mut().zip(&grads.w[l]) {
                *w -= scale * g;
            }
            for (w, g) in layer.gamma.iter_mut().zip(&grads.gamma[l]) {
                *w -= scale * g;
            }
            for (w, g) in layer.beta.iter_mut().zip(&grads.beta[l]) {
                *w -= scale * g;
            }
        }
        for (w, g) in self.out_w.iter_mut().zip(&grads.out_w) {
            *w -= scale * g;
        }
        for (w, g) in self.out_b.iter_mut().zip(&grads.out_b) {
            *w -= scale * g;
        }
    }

    /// Zeroes pruned units: incoming row, γ, β and the outgoing column.
    fn apply_mask(&mut self, keep: &[Vec<bool>]) {
        let nl = self.hidden.len();
        for l in 0..nl {
            let in_dim = self.hidden[l].in_dim;
            for (i, &k) in keep[l].iter().enumerate() {
                if k {
                    continue;
                }
                let layer = &mut self.hidden[l];
                layer.w[i * in_dim..(i + 1) * in_dim].fill(0.0);
                layer.gamma[i] = 0.0;
                layer.beta[i] = 0.0;
                if l + 1 < nl {
                    let next = &mut self.hidden[l + 1];
                    for r in 0..next.out_dim {
                        next.w[r * next.in_dim + i] = 0.0;
                    }
                } else {
                    let width = layer.out_dim;
                    for c in 0..CLASSES {
                        self.out_w[c * width + i] = 0.0;
                    }
                }
            }
        }
    }

    /// Mini-batch SGD over the training split. Returns the mean loss of the
    /// last epoch; `keep`, when given, is re-applied after every step.
    fn train(
        &mut self,
        data: &ToyDataset,
        epochs: usize,
        lr: f64,
        seed: u64,
        keep: Option<&[Vec<bool>]>,
    ) -> std::result::Result<f64, usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..data.train_y.len()).collect();
        let mut grads = Grads::zeros(self);
        let mut last = 0.0;
        for epoch in 0..epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(BATCH_SIZE) {
                grads.clear();
                for &i in batch {
                    total += self.backward(data.train_point(i), data.train_y[i], &mut grads);
                }
                self.step(&grads, lr, batch.len());
                if let Some(keep) = keep {
                    self.apply_mask(keep);
                }
            }
            last = total / order.len() as f64;
            if !last.is_finite() {
                return Err(epoch);
            }
        }
        Ok(last)
    }

    pub fn accuracy(&self, xs: &[f64], ys: &[usize]) -> f64 {
        let correct = ys
            .iter()
            .enumerate()
            .filter(|&(i, &y)| self.predict(&xs[i * INPUT_DIM..(i + 1) * INPUT_DIM]) == y)
            .count();
        correct as f64 / ys.len() as f64
    }

    pub fn validation_accuracy(&self, data: &ToyDataset) -> f64 {
        self.accuracy(&data.val_x, &data.val_y)
    }

    /// Exports weights, BN-style γ/β, calibration-batch gradients and
    /// post-activation statistics over the first [`CALIBRATION_POINTS`]
    /// training points.
    pub fn snapshot(&self, data: &ToyDataset, name: &str) -> Result<NetworkSnapshot> {
        let calib = CALIBRATION_POINTS.min(data.train_y.len());
        let mut grads = Grads::zeros(self);
        let nl = self.hidden.len();
        let mut acts: Vec<Vec<Vec<f64>>> = self.hidden.iter().map(|h| vec![Vec::with_capacity(calib); h.out_dim]).collect();
        for i in 0..calib {
            let x = data.train_point(i);
            self.backward(x, data.train_y[i], &mut grads);
            let t = self.forward(x);
            for l in 0..nl {
                for (u, &h) in t.h[l].iter().enumerate() {
                    acts[l][u].push(h);
                }
            }
        }
        let inv = 1.0 / calib as f64;
        let to32 = |v: &[f64], scale: f64| -> Vec<f32> { v.iter().map(|x| (x * scale) as f32).collect() };
        let names = self.layer_names();
        let mut layers = Vec::with_capacity(nl);
        for (l, layer) in self.hidden.iter().enumerate() {
            let bins = DEFAULT_HISTOGRAM_BINS;
            let mut zero_fraction = Vec::with_capacity(layer.out_dim);
            let mut histograms = Vec::with_capacity(layer.out_dim * bins);
            let mut ranges = Vec::with_capacity(layer.out_dim);
            for values in &acts[l] {
                let zeros = values.iter().filter(|&&v| v <= 0.0).count();
                zero_fraction.push((zeros as f64 / calib as f64) as f32);
                let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut counts = vec![0u32; bins];
                for &v in values {
                    let b = if hi > lo {
                        (((v - lo) / (hi - lo)) * bins as f64).floor().min((bins - 1) as f64) as usize
                    } else {
                        0
                    };
                    counts[b] += 1;
                }
                histograms.extend(counts);
                ranges.push([lo as f32, hi as f32]);
            }
            layers.push(LayerRecord {
                name: names[l].clone(),
                num_filters: layer.out_dim,
                weights: Tensor::new(vec![layer.out_dim, layer.in_dim], to32(&layer.w, 1.0)),
                bn_gamma: Some(to32(&layer.gamma, 1.0)),
                bn_beta: Some(to32(&layer.beta, 1.0)),
                weight_grad: Some(Tensor::new(vec![layer.out_dim, layer.in_dim], to32(&grads.w[l], inv))),
                bn_gamma_grad: Some(to32(&grads.gamma[l], inv)),
                bn_beta_grad: Some(to32(&grads.beta[l], inv)),
                activation_stats: Some(ActivationStats {
                    zero_fraction,
                    bins,
                    histograms,
                    ranges,
                    sample_total: calib as u64,
                }),
            });
        }
        let mut meta = BTreeMap::new();
        meta.insert("source".into(), "toy-mlp".into());
        meta.insert("dataset_seed".into(), data.seed.to_string());
        meta.insert("calibration_samples".into(), calib.to_string());
        let snapshot = NetworkSnapshot {
            name: name.to_string(),
            layers,
            meta,
        };
        snapshot.validate()?;
        Ok(snapshot)
    }
}

/// Trains `model` from its current weights and exports a snapshot of the result.
pub fn toy_pretrain(model: &ToyModel, data: &ToyDataset, epochs: usize) -> Result<(ToyModel, NetworkSnapshot)> {
    if epochs == 0 {
        return Err(Error::InvalidArgument("pretraining needs at least one epoch".into()));
    }
    let mut trained = model.clone();
    trained
        .train(data, epochs, PRETRAIN_LR, data.seed.wrapping_add(1), None)
        .map_err(|epoch| Error::Divergence { epoch })?;
    let snapshot = trained.snapshot(data, "toy-mlp")?;
    Ok((trained, snapshot))
}

/// Prunes the pretrained model by mask, finetunes, and reports validation accuracy.
#[derive(Debug, Clone)]
pub struct ToyEvaluator {
    pretrained: ToyModel,
    data: ToyDataset,
    lr: f64,
    seed: u64,
}

impl ToyEvaluator {
    pub fn new(pretrained: ToyModel, data: ToyDataset) -> Self {
        let seed = data.seed.wrapping_add(2);
        Self {
            pretrained,
            data,
            lr: FINETUNE_LR,
            seed,
        }
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }

    pub fn pretrained(&self) -> &ToyModel {
        &self.pretrained
    }

    pub fn dataset(&self) -> &ToyDataset {
        &self.data
    }
}

impl Evaluator for ToyEvaluator {
    fn evaluate(&self, req: &FitnessRequest) -> std::result::Result<FitnessResponse, EvalError> {
        let keep = mask_bits(&self.pretrained, &req.masks).map_err(|detail| EvalError::MaskMismatch {
            request_id: req.request_id,
            detail,
        })?;
        let mut model = self.pretrained.clone();
        model.apply_mask(&keep);
        if req.finetune_epochs > 0 {
            model
                .train(&self.data, req.finetune_epochs, self.lr, self.seed, Some(&keep))
                .map_err(|epoch| EvalError::Divergence {
                    request_id: req.request_id,
                    epoch,
                })?;
        }
        Ok(FitnessResponse::new(req.request_id, model.validation_accuracy(&self.data)))
    }
}

fn mask_bits(model: &ToyModel, mask: &Mask) -> std::result::Result<Vec<Vec<bool>>, String> {
    let widths = model.filter_counts();
    if mask.layers.len() != widths.len() {
        return Err(format!("{} mask layers for a {}-layer toy model", mask.layers.len(), widths.len()));
    }
    mask.layers
        .iter()
        .zip(widths)
        .map(|(m, w)| {
            if m.keep.len() == w {
                Ok(m.keep.clone())
            } else {
                Err(format!("layer `{}` mask has {} entries, expected {w}", m.layer, m.keep.len()))
            }
        })
        .collect()
}
