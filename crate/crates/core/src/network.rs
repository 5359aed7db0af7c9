//! Small fully-convolutional encoder-decoder used as the segmentation model.
//!
//! Layout for `encoder_channels = [c0, c1, ...]`:
//!
//! ```text
//! enc_k:      conv3x3 -> relu            (kept as skip_k)  -> maxpool2x2
//! bottleneck: conv3x3 -> relu
//! dec_k:      upsample2x2 -> conv3x3 -> relu -> + skip_k    (k = last..0)
//! head:       conv1x1 -> logits
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Structural role of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamStructure {
    Conv {
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
    },
    Bias {
        len: usize,
    },
}

impl ParamStructure {
    pub fn numel(&self) -> usize {
        match *self {
            ParamStructure::Conv {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
            } => out_channels * in_channels * kernel_h * kernel_w,
            ParamStructure::Bias { len } => len,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match *self {
            ParamStructure::Conv {
                out_channels,
                in_channels,
                kernel_h,
                kernel_w,
            } => vec![out_channels, in_channels, kernel_h, kernel_w],
            ParamStructure::Bias { len } => vec![len],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub id: String,
    /// Layer the parameter belongs to; a conv weight and its bias share it.
    pub layer: String,
    pub tensor: Tensor,
    pub structure: ParamStructure,
}

/// Ordered registry of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore {
    entries: Vec<ParamEntry>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(
        &mut self,
        id: impl Into<String>,
        layer: impl Into<String>,
        structure: ParamStructure,
        tensor: Tensor,
    ) -> Result<()> {
        let id = id.into();
        if self.entries.iter().any(|e| e.id == id) {
            return Err(Error::config("param_id", format!("duplicate id {id}")));
        }
        if structure.numel() != tensor.len() || structure.shape() != tensor.shape() {
            return Err(Error::shape(
                "parameter_store",
                format!(
                    "{id}: structure {:?} does not match tensor {:?}",
                    structure,
                    tensor.shape()
                ),
            ));
        }
        self.entries.push(ParamEntry {
            id,
            layer: layer.into(),
            tensor,
            structure,
        });
        Ok(())
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn get(&self, id: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.id.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Registers every parameter on `graph`, returning handles in store order.
    pub fn bind(&self, graph: &mut Graph, requires_grad: bool) -> Result<Vec<Var>> {
        self.entries
            .iter()
            .map(|e| {
                if requires_grad {
                    graph.param(e.tensor.clone())
                } else {
                    graph.constant(e.tensor.clone())
                }
            })
            .collect()
    }

    /// Checks that `other` has exactly the same ids, in the same order, with
    /// the same shapes.
    pub fn check_compatible(&self, other_ids: &[(String, Vec<usize>)]) -> Result<()> {
        let mine: Vec<&str> = self.ids().collect();
        let missing: Vec<String> = mine
            .iter()
            .filter(|id| !other_ids.iter().any(|(o, _)| o == *id))
            .map(|s| s.to_string())
            .collect();
        let extra: Vec<String> = other_ids
            .iter()
            .filter(|(o, _)| !mine.contains(&o.as_str()))
            .map(|(o, _)| o.clone())
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::ParamMismatch { missing, extra });
        }
        for (e, (id, shape)) in self.entries.iter().zip(other_ids) {
            if &e.id != id || e.tensor.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "parameter_store",
                    format!("{id}: expected {:?} at this position", e.tensor.shape()),
                ));
            }
        }
        Ok(())
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegNetConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub encoder_channels: Vec<usize>,
    pub bottleneck_channels: usize,
    pub dropout_rate: f64,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: 4,
            encoder_channels: vec![8, 16],
            bottleneck_channels: 32,
            dropout_rate: 0.0,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("network.num_classes", "must be >= 2"));
        }
        if self.in_channels == 0 || self.bottleneck_channels == 0 {
            return Err(Error::config("network", "channel counts must be >= 1"));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::config(
                "network.encoder_channels",
                "needs at least one stage, all >= 1",
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::config("network.dropout_rate", "must be in [0, 1)"));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn spatial_divisor(&self) -> usize {
        1 << self.encoder_channels.len()
    }
}

/// Encoder-decoder segmentation network.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet {
    config: SegNetConfig,
    params: ParameterStore,
}

fn conv_entry(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    layer: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<()> {
    let fan_in = (cin * k * k) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let n = cout * cin * k * k;
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    store.push(
        format!("{layer}.weight"),
        layer,
        ParamStructure::Conv {
            out_channels: cout,
            in_channels: cin,
            kernel_h: k,
            kernel_w: k,
        },
        Tensor::new(vec![cout, cin, k, k], w)?,
    )?;
    store.push(
        format!("{layer}.bias"),
        layer,
        ParamStructure::Bias { len: cout },
        Tensor::zeros(&[cout]),
    )
}

impl SegNet {
    /// Builds the network with He-uniform weights and zero biases drawn
    /// from a ChaCha stream seeded by `seed`.
    pub fn build(config: SegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let mut cin = config.in_channels;
        for (k, &c) in config.encoder_channels.iter().enumerate() {
            conv_entry(&mut params, &mut rng, &format!("enc{k}"), cin, c, 3)?;
            cin = c;
        }
        conv_entry(
            &mut params,
            &mut rng,
            "bottleneck",
            cin,
            config.bottleneck_channels,
            3,
        )?;
        cin = config.bottleneck_channels;
        for (k, &c) in config.encoder_channels.iter().enumerate().rev() {
            conv_entry(&mut params, &mut rng, &format!("dec{k}"), cin, c, 3)?;
            cin = c;
        }
        conv_entry(&mut params, &mut rng, "head", cin, config.num_classes, 1)?;
        Ok(Self { config, params })
    }

    pub fn from_parts(config: SegNetConfig, params: ParameterStore) -> Result<Self> {
        let reference = Self::build(config.clone(), 0)?;
        let ids: Vec<(String, Vec<usize>)> = params
            .entries()
            .iter()
            .map(|e| (e.id.clone(), e.tensor.shape().to_vec()))
            .collect();
        reference.params.check_compatible(&ids)?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }

    /// Copy of the network with a different dropout rate.
    pub fn with_dropout_rate(&self, rate: f64) -> Result<Self> {
        let config = SegNetConfig {
            dropout_rate: rate,
            ..self.config.clone()
        };
        config.validate()?;
        Ok(Self {
            config,
            params: self.params.clone(),
        })
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match *shape {
            [n, c, h, w] => [n, c, h, w],
            _ => {
                return Err(Error::shape(
                    "segnet",
                    format!("expected [N, C, H, W], got {shape:?}"),
                ))
            }
        };
        if c != self.config.in_channels {
            return Err(Error::shape(
                "segnet",
                format!(
                    "input has {c} channels, network expects {}",
                    self.config.in_channels
                ),
            ));
        }
        let d = self.config.spatial_divisor();
        if h % d != 0 || w % d != 0 {
            return Err(Error::shape(
                "segnet",
                format!("spatial extent {h}x{w} must be divisible by {d}"),
            ));
        }
        Ok(())
    }

    /// Records the forward pass on `graph` and returns the logits.
    ///
    /// `params` are the handles from [`ParameterStore::bind`]. Dropout is
    /// applied only when `dropout_rng` is given and the configured rate is
    /// positive.
    pub fn forward(
        &self,
        graph: &mut Graph,
        input: Var,
        params: &[Var],
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_input(graph.value(input).shape())?;
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "segnet",
                format!(
                    "{} parameter handles for {} entries",
                    params.len(),
                    self.params.len()
                ),
            ));
        }
        let rate = self.config.dropout_rate;
        let mut drop = |g: &mut Graph, x: Var| -> Result<Var> {
            match dropout_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let keep = 1.0 / (1.0 - rate);
                    let mask = (0..g.value(x).len())
                        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
                        .collect();
                    g.dropout(x, mask)
                }
                _ => Ok(x),
            }
        };

        let mut p = params.chunks_exact(2);
        let mut next = || {
            let c = p.next().expect("parameter layout checked above");
            (c[0], c[1])
        };
        let stages = self.config.encoder_channels.len();
        let mut skips = Vec::with_capacity(stages);
        let mut x = input;
        for _ in 0..stages {
            let (w, b) = next();
            let c = graph.conv2d(x, w, Some(b))?;
            let r = graph.relu(c)?;
            skips.push(r);
            x = graph.maxpool2x2(r)?;
        }
        let (w, b) = next();
        let c = graph.conv2d(x, w, Some(b))?;
        x = graph.relu(c)?;
        x = drop(graph, x)?;
        for skip in skips.into_iter().rev() {
            let (w, b) = next();
            let u = graph.upsample2x2(x)?;
            let c = graph.conv2d(u, w, Some(b))?;
            let r = graph.relu(c)?;
            x = graph.add(r, skip)?;
            x = drop(graph, x)?;
        }
        let (w, b) = next();
        graph.conv2d(x, w, Some(b))
    }

    /// Per-pixel class probabilities `[N, num_classes, H, W]`.
    pub fn predict(&self, batch: &Tensor, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false)?;
        let x = g.constant(batch.clone())?;
        let logits = self.forward(&mut g, x, &vars, dropout_rng)?;
        let probs = g.softmax_channel(logits)?;
        Ok(g.value(probs).clone())
    }

    /// Arg-max label per pixel, laid out `[N, H, W]`.
    pub fn predict_labels(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let probs = self.predict(batch, None)?;
        Ok(argmax_channels(&probs))
    }
}

/// Arg-max over the channel axis of a `[N, C, H, W]` tensor; ties go to the
/// lower class index.
pub fn argmax_channels(probs: &Tensor) -> Vec<usize> {
    let s = probs.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let d = probs.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for px in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if d[(b * c + ch) * hw + px] > d[(b * c + best) * hw + px] {
                    best = ch;
                }
            }
            out.push(best);
        }
    }
    out
}
