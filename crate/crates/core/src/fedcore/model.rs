//! Toy classifiers over flattened grayscale inputs: multinomial logistic
//! regression, optionally with one ReLU hidden layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub inputs: usize,
    pub classes: usize,
    /// Zero means plain logistic regression.
    #[serde(default)]
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelSpec {
    pub fn logistic(inputs: usize, classes: usize) -> Self {
        Self {
            inputs,
            classes,
            hidden: 0,
        }
    }

    pub fn layout(&self) -> Vec<Segment> {
        let shapes: Vec<(&str, usize, usize)> = if self.hidden == 0 {
            vec![("weight", self.classes, self.inputs), ("bias", self.classes, 1)]
        } else {
            vec![
                ("hidden.weight", self.hidden, self.inputs),
                ("hidden.bias", self.hidden, 1),
                ("output.weight", self.classes, self.hidden),
                ("output.bias", self.classes, 1),
            ]
        };
        let mut offset = 0;
        shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let s = Segment {
                    name: name.to_string(),
                    offset,
                    rows,
                    cols,
                };
                offset += rows * cols;
                s
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(Segment::len).sum()
    }

    /// Zeros for logistic regression; small uniform weights for the hidden layer.
    pub fn init(&self, seed: u64) -> Vec<f64> {
        let mut theta = vec![0.0; self.param_count()];
        if self.hidden > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1417_5eed);
            let scale = (1.0 / self.inputs as f64).sqrt();
            for seg in self.layout().iter().filter(|s| s.name.ends_with("weight")) {
                for v in &mut theta[seg.offset..seg.offset + seg.len()] {
                    *v = rng.random_range(-scale..scale);
                }
            }
        }
        theta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Class probabilities for one input.
pub fn predict_proba(spec: &ModelSpec, theta: &[f64], x: &[f64]) -> Vec<f64> {
    let mut cache = Vec::new();
    forward(spec, theta, x, &mut cache)
}

fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, out: &mut Vec<f64>) {
    let cols = x.len();
    out.clear();
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out.push(b[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
    }
}

/// Returns probabilities; `hidden_out` receives the post-ReLU activations.
fn forward(spec: &ModelSpec, theta: &[f64], x: &[f64], hidden_out: &mut Vec<f64>) -> Vec<f64> {
    let lay = spec.layout();
    let mut z = Vec::with_capacity(spec.classes);
    if spec.hidden == 0 {
        let (w, b) = (&lay[0], &lay[1]);
        affine(
            &theta[w.offset..w.offset + w.len()],
            &theta[b.offset..b.offset + b.len()],
            x,
            spec.classes,
            &mut z,
        );
    } else {
        let (w1, b1, w2, b2) = (&lay[0], &lay[1], &lay[2], &lay[3]);
        affine(
            &theta[w1.offset..w1.offset + w1.len()],
            &theta[b1.offset..b1.offset + b1.len()],
            x,
            spec.hidden,
            hidden_out,
        );
        for h in hidden_out.iter_mut() {
            *h = h.max(0.0);
        }
        affine(
            &theta[w2.offset..w2.offset + w2.len()],
            &theta[b2.offset..b2.offset + b2.len()],
            hidden_out,
            spec.classes,
            &mut z,
        );
    }
    softmax_in_place(&mut z);
    z
}

/// Mean cross-entropy over `batch` and its gradient with respect to `theta`.
pub fn loss_and_grad(spec: &ModelSpec, theta: &[f64], batch: &[&Sample]) -> (f64, Vec<f64>) {
    let lay = spec.layout();
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    let n = batch.len().max(1) as f64;
    let mut hidden = Vec::new();
    for s in batch {
        let p = forward(spec, theta, &s.x, &mut hidden);
        loss -= p[s.y].max(1e-300).ln();
        let delta: Vec<f64> = p
            .iter()
            .enumerate()
            .map(|(c, &pc)| (pc - if c == s.y { 1.0 } else { 0.0 }) / n)
            .collect();
        if spec.hidden == 0 {
            let (w, b) = (&lay[0], &lay[1]);
            for (c, d) in delta.iter().enumerate() {
                let row = w.offset + c * spec.inputs;
                for (i, xi) in s.x.iter().enumerate() {
                    grad[row + i] += d * xi;
                }
                grad[b.offset + c] += d;
            }
        } else {
            let (w1, b1, w2, b2) = (&lay[0], &lay[1], &lay[2], &lay[3]);
            let mut dh = vec![0.0; spec.hidden];
            for (c, d) in delta.iter().enumerate() {
                let row = w2.offset + c * spec.hidden;
                for (j, hj) in hidden.iter().enumerate() {
                    grad[row + j] += d * hj;
                    dh[j] += d * theta[row + j];
                }
                grad[b2.offset + c] += d;
            }
            for (j, dj) in dh.iter().enumerate() {
                if hidden[j] <= 0.0 {
                    continue;
                }
                let row = w1.offset + j * spec.inputs;
                for (i, xi) in s.x.iter().enumerate() {
                    grad[row + i] += dj * xi;
                }
                grad[b1.offset + j] += dj;
            }
        }
    }
    (loss / n, grad)
}

/// Mean loss and accuracy over `samples`; `(0, 0)` when empty.
pub fn evaluate(spec: &ModelSpec, theta: &[f64], samples: &[Sample]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mut hidden = Vec::new();
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in samples {
        let p = forward(spec, theta, &s.x, &mut hidden);
        loss -= p[s.y].max(1e-300).ln();
        let argmax = p
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if argmax == s.y {
            correct += 1;
        }
    }
    let n = samples.len() as f64;
    (loss / n, correct as f64 / n)
}
