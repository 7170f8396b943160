use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::UNetConfig;
use crate::error::{Error, Result};
use crate::numerics::{ConvSpec, Mode, Real, Tape, Tensor, Var};

/// Name and shape of one parameter tensor, in model order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamSpec {
    fn new(name: String, shape: &[usize]) -> Self {
        ParamSpec {
            name,
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered parameter manifest of the architecture described by `config`.
///
/// Encoder steps, bottleneck, decoder steps (deepest first) and the head,
/// each as `weight` followed by `bias`.
pub fn layer_manifest(config: &UNetConfig) -> Result<Vec<ParamSpec>> {
    config.validate()?;
    let widths = config.widths()?;
    let mut out = Vec::new();
    let conv = |out: &mut Vec<ParamSpec>, name: String, ci: usize, co: usize, k: usize| {
        out.push(ParamSpec::new(format!("{name}.weight"), &[co, ci, k, k]));
        out.push(ParamSpec::new(format!("{name}.bias"), &[co]));
    };
    let mut ci = config.in_channels;
    for (level, &w) in widths.iter().enumerate().take(config.depth) {
        conv(&mut out, format!("enc{level}.conv1"), ci, w, 3);
        conv(&mut out, format!("enc{level}.conv2"), w, w, 3);
        ci = w;
    }
    let bottom = widths[config.depth];
    conv(&mut out, "bottleneck.conv1".into(), ci, bottom, 3);
    conv(&mut out, "bottleneck.conv2".into(), bottom, bottom, 3);
    let mut below = bottom;
    for level in (0..config.depth).rev() {
        let w = widths[level];
        out.push(ParamSpec::new(format!("dec{level}.up.weight"), &[below, w, 2, 2]));
        out.push(ParamSpec::new(format!("dec{level}.up.bias"), &[w]));
        conv(&mut out, format!("dec{level}.conv1"), 2 * w, w, 3);
        conv(&mut out, format!("dec{level}.conv2"), w, w, 3);
        below = w;
    }
    conv(&mut out, "head".into(), widths[0], config.num_classes, 1);
    Ok(out)
}

/// Total number of trainable scalars, from the layer manifest alone.
pub fn param_count(config: &UNetConfig) -> Result<usize> {
    Ok(layer_manifest(config)?.iter().map(ParamSpec::numel).sum())
}

/// A materialised U-Net: configuration plus parameters in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T = f32> {
    config: UNetConfig,
    manifest: Vec<ParamSpec>,
    params: Vec<Tensor<T>>,
}

/// Output of a training-mode forward pass on a tape.
pub struct TapeForward {
    pub logits: Var,
    pub params: Vec<Var>,
}

impl<T: Real> UNet<T> {
    /// Builds the network with He-normal weights and zero biases drawn from
    /// a ChaCha stream seeded by `seed`.
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self> {
        let manifest = layer_manifest(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(manifest.len());
        for spec in &manifest {
            let tensor = if spec.name.ends_with(".bias") {
                Tensor::zeros(spec.shape.clone())?
            } else {
                // Conv weights are [Co, Ci, k, k]; up-convolutions [Ci, Co, 2, 2]
                // where every output pixel sees exactly Ci inputs.
                let fan_in = if spec.name.contains(".up.") {
                    spec.shape[0]
                } else {
                    spec.shape[1..].iter().product()
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .map_err(|e| Error::config(e.to_string()))?;
                Tensor::from_fn(spec.shape.clone(), |_| T::from_f64(normal.sample(&mut rng)))?
            };
            params.push(tensor);
        }
        Ok(UNet {
            config,
            manifest,
            params,
        })
    }

    /// Assembles a model from explicit parameters, checking them against the
    /// manifest of `config`.
    pub fn from_params(config: UNetConfig, params: Vec<Tensor<T>>) -> Result<Self> {
        let manifest = layer_manifest(&config)?;
        if manifest.len() != params.len() {
            return Err(Error::config(format!(
                "expected {} parameter tensors, got {}",
                manifest.len(),
                params.len()
            )));
        }
        for (spec, p) in manifest.iter().zip(&params) {
            if spec.shape != p.shape() {
                return Err(Error::config(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    spec.name,
                    p.shape(),
                    spec.shape
                )));
            }
        }
        Ok(UNet {
            config,
            manifest,
            params,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn manifest(&self) -> &[ParamSpec] {
        &self.manifest
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Number of scalars actually held by this model.
    pub fn materialized_param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn check_input(&self, images: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::config(format!(
                "model expects {} input channel(s), got {c}",
                self.config.in_channels
            )));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::config(format!(
                "image extent {h} x {w} must be a multiple of {m} in both directions"
            )));
        }
        Ok(())
    }

    /// Records the forward pass up to the head logits on `tape`.
    pub fn forward_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        images: Var,
        mode: Mode,
        rng: &mut R,
        track_params: bool,
    ) -> Result<TapeForward> {
        self.check_input(tape.value(images))?;
        let cfg = &self.config;
        let widths = cfg.widths()?;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.clone(), track_params))
            .collect();
        let mut next = params.iter().copied();

        fn conv_relu<T: Real>(
            tape: &mut Tape<T>,
            next: &mut impl Iterator<Item = Var>,
            x: Var,
            ci: usize,
            co: usize,
        ) -> Result<Var> {
            let (w, b) = take_pair(next);
            let y = tape.conv2d(x, w, b, ConvSpec::same(ci, co, 3))?;
            tape.relu(y)
        }

        let mut x = images;
        let mut ci = cfg.in_channels;
        let mut skips = Vec::with_capacity(cfg.depth);
        for (level, &w) in widths.iter().enumerate().take(cfg.depth) {
            x = conv_relu(tape, &mut next, x, ci, w)?;
            x = conv_relu(tape, &mut next, x, w, w)?;
            x = tape.dropout(x, cfg.dropout_rate(level), mode, rng)?;
            skips.push(x);
            x = tape.maxpool2d(x)?;
            ci = w;
        }
        let bottom = widths[cfg.depth];
        x = conv_relu(tape, &mut next, x, ci, bottom)?;
        x = conv_relu(tape, &mut next, x, bottom, bottom)?;
        x = tape.dropout(x, cfg.dropout_rate(cfg.depth), mode, rng)?;
        for level in (0..cfg.depth).rev() {
            let w = widths[level];
            let (uw, ub) = take_pair(&mut next);
            let up = tape.transposed_conv2d(x, uw, ub)?;
            let skip = skips.pop().expect("one skip per level");
            x = tape.concat_channels(skip, up)?;
            x = conv_relu(tape, &mut next, x, 2 * w, w)?;
            x = conv_relu(tape, &mut next, x, w, w)?;
            x = tape.dropout(x, cfg.dropout_rate(level), mode, rng)?;
        }
        let (hw, hb) = take_pair(&mut next);
        let logits = tape.conv2d(x, hw, hb, ConvSpec::same(widths[0], cfg.num_classes, 1))?;
        Ok(TapeForward { logits, params })
    }

    /// Per-pixel class probabilities, `N x num_classes x H x W`.
    pub fn forward<R: Rng + ?Sized>(&self, images: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.leaf(images.clone(), false);
        let out = self.forward_tape(&mut tape, x, mode, rng, false)?;
        let probs = tape.softmax_channels(out.logits)?;
        Ok(tape.take_value(probs))
    }

    /// Evaluation-mode probabilities.
    pub fn predict_probs(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        // Eval mode never draws from the generator.
        self.forward(images, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Arg-max class per pixel, one `H*W` vector per batch item.
    pub fn predict_labels(&self, images: &Tensor<T>) -> Result<Vec<Vec<u8>>> {
        Ok(argmax_channels(&self.predict_probs(images)?))
    }
}

fn take_pair(next: &mut impl Iterator<Item = Var>) -> (Var, Var) {
    let w = next.next().expect("manifest and parameter list agree");
    let b = next.next().expect("manifest and parameter list agree");
    (w, b)
}

/// Arg-max over the channel axis; ties resolve to the lowest class index.
pub fn argmax_channels<T: Real>(probs: &Tensor<T>) -> Vec<Vec<u8>> {
    let s = probs.shape();
    let (n, k, p) = (s[0], s[1], s[2] * s[3]);
    (0..n)
        .map(|i| {
            let sample = probs.sample(i);
            (0..p)
                .map(|px| {
                    let mut best = 0;
                    for c in 1..k {
                        if sample[c * p + px] > sample[best * p + px] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}
