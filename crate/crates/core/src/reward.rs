//! Online reward model: a small dense network with leaky-rectifier hidden
//! layers and a logistic output, trained by full-batch gradient descent on
//! the summed binary cross-entropy.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::RewardFn;
use crate::error::{ensure_dim, Error, Result};
use crate::scalar::Scalar;
use crate::seed::{stream_rng, Stream};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// `[area -> 16 -> 8 -> 1]`.
    #[default]
    Compact,
    /// Dense widths of the larger reference stack: `[area -> 4 -> 32 -> 16 -> 8 -> 1]`.
    Wide,
}

impl Preset {
    pub fn hidden(self) -> Vec<usize> {
        match self {
            Preset::Compact => vec![16, 8],
            Preset::Wide => vec![4, 32, 16, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub preset: Preset,
    /// Overrides the preset's hidden widths when set.
    pub hidden: Option<Vec<usize>>,
    pub epochs: usize,
    pub lr: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Compact,
            hidden: None,
            epochs: 3,
            lr: 0.01,
        }
    }
}

impl RewardConfig {
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.hidden.clone().unwrap_or_else(|| self.preset.hidden())
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_widths().contains(&0) {
            return Err(Error::config("reward.hidden", "widths must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("reward.lr", "must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch<F> {
    pub patch: Vec<F>,
    pub label: F,
}

impl<F: Scalar> LabeledPatch<F> {
    pub fn new(patch: Vec<F>, label: F) -> Result<Self> {
        if !(label >= F::zero() && label <= F::one()) {
            return Err(Error::InvalidRange {
                name: "label",
                detail: format!("{label} not in [0, 1]"),
            });
        }
        Ok(Self { patch, label })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct Dense<F> {
    /// `out x in`.
    pub w: Vec<Vec<F>>,
    pub b: Vec<F>,
}

impl<F: Scalar> Dense<F> {
    fn inputs(&self) -> usize {
        self.w.first().map_or(0, Vec::len)
    }

    fn apply(&self, x: &[F]) -> Vec<F> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, &b)| row.iter().zip(x).map(|(&w, &xi)| w * xi).sum::<F>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct RewardNet<F> {
    pub config: RewardConfig,
    pub seed: u64,
    pub layers: Vec<Dense<F>>,
}

fn leaky<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        x
    } else {
        F::of(LEAKY_SLOPE) * x
    }
}

fn leaky_grad<F: Scalar>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else {
        F::of(LEAKY_SLOPE)
    }
}

pub fn sigmoid<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus<F: Scalar>(z: F) -> F {
    if z > F::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Binary cross-entropy of probability predictions, summed.
pub fn bce_from_probs<F: Scalar>(preds: &[F], labels: &[F]) -> F {
    preds
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let a = if y > F::zero() { y * p.ln() } else { F::zero() };
            let b = if y < F::one() {
                (F::one() - y) * (F::one() - p).ln()
            } else {
                F::zero()
            };
            -(a + b)
        })
        .sum()
}

/// Gradients with the same shape as the network's layers.
pub type Gradients<F> = Vec<Dense<F>>;

impl<F: Scalar> RewardNet<F> {
    /// Weights and biases uniform in `+-1/sqrt(fan_in)`, drawn from the seed's
    /// reward-init stream.
    pub fn new(input: usize, config: RewardConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if input == 0 {
            return Err(Error::config("reward.input", "patch area must be positive"));
        }
        let mut rng = stream_rng(seed, Stream::RewardInit);
        let mut widths = vec![input];
        widths.extend(config.hidden_widths());
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                let mut draw = || F::of(rng.gen_range(-bound..bound));
                let weights = (0..w[1])
                    .map(|_| (0..w[0]).map(|_| draw()).collect())
                    .collect();
                let bias = (0..w[1]).map(|_| draw()).collect();
                Dense {
                    w: weights,
                    b: bias,
                }
            })
            .collect();
        Ok(Self {
            config,
            seed,
            layers,
        })
    }

    /// A net from explicit layers (checkpoint restore, hand-built tests).
    pub fn from_layers(layers: Vec<Dense<F>>, config: RewardConfig) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("layer stack"));
        }
        for pair in layers.windows(2) {
            ensure_dim(pair[0].b.len(), pair[1].inputs())?;
        }
        for l in &layers {
            ensure_dim(l.w.len(), l.b.len())?;
            let n = l.inputs();
            for row in &l.w {
                ensure_dim(n, row.len())?;
            }
        }
        ensure_dim(1, layers.last().unwrap().b.len())?;
        Ok(Self {
            config,
            seed: 0,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.b.len() * (l.inputs() + 1))
            .sum()
    }

    /// Pre-activations of every layer.
    fn forward_pre(&self, patch: &[F]) -> Vec<Vec<F>> {
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut act = patch.to_vec();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&act);
            if k + 1 < self.layers.len() {
                act = z.iter().map(|&v| leaky(v)).collect();
            }
            pre.push(z);
        }
        pre
    }

    pub fn logit(&self, patch: &[F]) -> Result<F> {
        ensure_dim(self.input_dim(), patch.len())?;
        Ok(self.forward_pre(patch).last().unwrap()[0])
    }

    pub fn predict(&self, patch: &[F]) -> Result<F> {
        self.logit(patch).map(sigmoid)
    }

    /// Summed cross-entropy over the dataset (soft labels allowed).
    pub fn bce_loss(&self, data: &[LabeledPatch<F>]) -> Result<F> {
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        data.iter()
            .map(|s| self.logit(&s.patch).map(|z| softplus(z) - s.label * z))
            .sum()
    }

    /// Loss and its gradient by reverse-mode accumulation.
    pub fn loss_and_gradients(&self, data: &[LabeledPatch<F>]) -> Result<(F, Gradients<F>)> {
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let mut grads: Gradients<F> = self
            .layers
            .iter()
            .map(|l| Dense {
                w: vec![vec![F::zero(); l.inputs()]; l.b.len()],
                b: vec![F::zero(); l.b.len()],
            })
            .collect();
        let mut loss = F::zero();
        let last = self.layers.len() - 1;
        for sample in data {
            ensure_dim(self.input_dim(), sample.patch.len())?;
            let pre = self.forward_pre(&sample.patch);
            let z = pre[last][0];
            loss += softplus(z) - sample.label * z;
            let mut delta = vec![sigmoid(z) - sample.label];
            for k in (0..=last).rev() {
                let input: Vec<F> = if k == 0 {
                    sample.patch.clone()
                } else {
                    pre[k - 1].iter().map(|&v| leaky(v)).collect()
                };
                let g = &mut grads[k];
                for (o, &d) in delta.iter().enumerate() {
                    g.b[o] += d;
                    for (gw, &xi) in g.w[o].iter_mut().zip(&input) {
                        *gw += d * xi;
                    }
                }
                if k > 0 {
                    let layer = &self.layers[k];
                    delta = (0..layer.inputs())
                        .map(|i| {
                            let back: F =
                                delta.iter().zip(&layer.w).map(|(&d, row)| d * row[i]).sum();
                            back * leaky_grad(pre[k - 1][i])
                        })
                        .collect();
                }
            }
        }
        Ok((loss, grads))
    }

    /// Full-batch gradient descent for `epochs` steps at rate `lr`.
    pub fn train(&mut self, data: &[LabeledPatch<F>], epochs: usize, lr: f64) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty("dataset"));
        }
        let lr = F::of(lr);
        for _ in 0..epochs {
            let (_, grads) = self.loss_and_gradients(data)?;
            for (layer, g) in self.layers.iter_mut().zip(&grads) {
                for (row, grow) in layer.w.iter_mut().zip(&g.w) {
                    for (w, &gw) in row.iter_mut().zip(grow) {
                        *w -= lr * gw;
                    }
                }
                for (b, &gb) in layer.b.iter_mut().zip(&g.b) {
                    *b -= lr * gb;
                }
            }
        }
        Ok(())
    }

    /// Trains with the configured epochs and learning rate.
    pub fn train_configured(&mut self, data: &[LabeledPatch<F>]) -> Result<()> {
        let (epochs, lr) = (self.config.epochs, self.config.lr);
        self.train(data, epochs, lr)
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut F> {
        self.layers.iter_mut().flat_map(|l| {
            l.w.iter_mut()
                .flat_map(|r| r.iter_mut())
                .chain(l.b.iter_mut())
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let net: Self = serde_json::from_str(s)?;
        let seed = net.seed;
        let mut checked = Self::from_layers(net.layers, net.config)?;
        checked.seed = seed;
        Ok(checked)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

impl<F: Scalar> RewardFn<F> for RewardNet<F> {
    fn predict(&self, patch: &[F]) -> Result<F> {
        RewardNet::predict(self, patch)
    }
}

/// Largest relative discrepancy between backprop and central differences
/// (step 1e-5). The denominator is floored at 1e-5 so vanishing gradients
/// are compared absolutely.
pub fn grad_check(net: &RewardNet<f64>, data: &[LabeledPatch<f64>]) -> Result<f64> {
    let (_, analytic) = net.loss_and_gradients(data)?;
    let flat: Vec<f64> = analytic
        .iter()
        .flat_map(|l| {
            l.w.iter()
                .flatten()
                .chain(l.b.iter())
                .copied()
                .collect::<Vec<_>>()
        })
        .collect();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (idx, &a) in flat.iter().enumerate() {
        let mut plus = net.clone();
        *plus.params_mut().nth(idx).unwrap() += h;
        let mut minus = net.clone();
        *minus.params_mut().nth(idx).unwrap() -= h;
        let numeric = (plus.bce_loss(data)? - minus.bce_loss(data)?) / (2.0 * h);
        let denom = a.abs().max(numeric.abs()).max(1e-5);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_by_one(w: f64, b: f64) -> RewardNet<f64> {
        RewardNet::from_layers(
            vec![Dense {
                w: vec![vec![w]],
                b: vec![b],
            }],
            RewardConfig::default(),
        )
        .unwrap()
    }

    fn toy(seed: u64, n: usize, area: usize) -> Vec<LabeledPatch<f64>> {
        let mut rng = stream_rng(seed, Stream::Scene);
        (0..n)
            .map(|_| {
                let patch: Vec<f64> = (0..area).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let label = if patch[0] > 0.0 {
                    1.0
                } else {
                    rng.gen_range(0.0..0.3)
                };
                LabeledPatch::new(patch, label).unwrap()
            })
            .collect()
    }

    #[test]
    fn zero_net_predicts_half() {
        let mut net = RewardNet::<f64>::new(4, RewardConfig::default(), 1).unwrap();
        for p in net.params_mut() {
            *p = 0.0;
        }
        assert_eq!(net.predict(&[0.3, -1.0, 2.0, 0.0]).unwrap(), 0.5);
        assert_eq!(one_by_one(1.0, 0.0).predict(&[0.0]).unwrap(), 0.5);
        assert!(net.predict(&[0.0]).is_err());
    }

    #[test]
    fn forward_matches_straight_line_oracle() {
        let net = RewardNet::<f64>::new(3, RewardConfig::default(), 11).unwrap();
        let x = [0.2, -0.7, 0.9];
        // hand-unrolled evaluator
        let l = &net.layers;
        let lr = |v: f64| if v > 0.0 { v } else { 0.01 * v };
        let h1: Vec<f64> = (0..16)
            .map(|o| {
                lr(l[0].w[o][0] * x[0] + l[0].w[o][1] * x[1] + l[0].w[o][2] * x[2] + l[0].b[o])
            })
            .collect();
        let h2: Vec<f64> = (0..8)
            .map(|o| lr((0..16).fold(l[1].b[o], |acc, i| acc + l[1].w[o][i] * h1[i])))
            .collect();
        let z = (0..8).fold(l[2].b[0], |acc, i| acc + l[2].w[0][i] * h2[i]);
        let want = 1.0 / (1.0 + (-z).exp());
        assert!((net.predict(&x).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn bce_hand_values() {
        let net = one_by_one(1.0, 0.0);
        let ds = [LabeledPatch::new(vec![0.0], 1.0).unwrap()];
        assert!((net.bce_loss(&ds).unwrap() - 2f64.ln()).abs() < 1e-15);
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let ds: Vec<_> = [(0.9, 1.0), (0.1, 0.0), (0.5, 1.0)]
            .iter()
            .map(|&(p, y)| LabeledPatch::new(vec![logit(p)], y).unwrap())
            .collect();
        let want = -(0.9f64.ln() + 0.9f64.ln() + 0.5f64.ln());
        assert!((net.bce_loss(&ds).unwrap() - want).abs() < 1e-12);
        assert!((bce_from_probs(&[0.9, 0.1, 0.5], &[1.0, 0.0, 1.0]) - want).abs() < 1e-12);
        assert!(matches!(net.bce_loss(&[]), Err(Error::Empty(_))));
        // confident and correct drives the loss to zero
        let sure = [LabeledPatch::new(vec![40.0], 1.0).unwrap()];
        assert!(net.bce_loss(&sure).unwrap() < 1e-15);
    }

    #[test]
    fn labels_are_validated() {
        assert!(LabeledPatch::new(vec![0.0f64], 1.5).is_err());
        assert!(LabeledPatch::new(vec![0.0f64], 0.25).is_ok());
    }

    #[test]
    fn duplicated_dataset_doubles_loss_and_gradient() {
        let net = RewardNet::<f64>::new(2, RewardConfig::default(), 5).unwrap();
        let ds = toy(1, 5, 2);
        let doubled: Vec<_> = ds.iter().chain(&ds).cloned().collect();
        let (l1, g1) = net.loss_and_gradients(&ds).unwrap();
        let (l2, g2) = net.loss_and_gradients(&doubled).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
        for (a, b) in g1.iter().zip(&g2) {
            for (x, y) in a.b.iter().zip(&b.b) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut net = RewardNet::<f64>::new(2, RewardConfig::default(), 5).unwrap();
        let before = net.clone();
        net.train(&toy(2, 6, 2), 10, 0.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn separable_pair_converges() {
        let mut net = RewardNet::<f64>::new(1, RewardConfig::default(), 3).unwrap();
        let ds = vec![
            LabeledPatch::new(vec![-0.8], 0.0).unwrap(),
            LabeledPatch::new(vec![0.8], 1.0).unwrap(),
        ];
        let before = net.bce_loss(&ds).unwrap();
        net.train(&ds, 500, 0.1).unwrap();
        let after = net.bce_loss(&ds).unwrap();
        assert!(after < 0.1, "loss {before} -> {after}");
    }

    #[test]
    fn gradients_check_out() {
        for (preset, area) in [
            (Preset::Compact, 1),
            (Preset::Compact, 16),
            (Preset::Wide, 4),
        ] {
            let cfg = RewardConfig {
                preset,
                ..Default::default()
            };
            let net = RewardNet::<f64>::new(area, cfg, 9).unwrap();
            let err = grad_check(&net, &toy(4, 6, area)).unwrap();
            assert!(err < 1e-4, "{preset:?}/{area}: {err}");
        }
    }

    #[test]
    fn single_parameter_slope() {
        let net = one_by_one(0.3, 0.0);
        let ds = [LabeledPatch::new(vec![1.0], 1.0).unwrap()];
        let (_, g) = net.loss_and_gradients(&ds).unwrap();
        // d/dw [softplus(w) - w] = sigmoid(w) - 1
        assert!((g[0].w[0][0] - (sigmoid(0.3) - 1.0)).abs() < 1e-15);
        assert!(grad_check(&net, &ds).unwrap() < 1e-8);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = RewardNet::<f64>::new(4, RewardConfig::default(), 21).unwrap();
        let json = net.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["seed"], 21);
        assert!(v["layers"][0]["w"].is_array() && v["config"].is_object());
        assert_eq!(RewardNet::<f64>::from_json(&json).unwrap(), net);
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = RewardNet::<f32>::new(4, RewardConfig::default(), 8).unwrap();
        let b = RewardNet::<f32>::new(4, RewardConfig::default(), 8).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.parameter_count(), 4 * 16 + 16 + 16 * 8 + 8 + 8 + 1);
    }
}
