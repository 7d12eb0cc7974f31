//! Recurrent flow refinement backbone.
//!
//! The backbone downsamples the image pair once (stride-2 stem), builds an
//! all-pairs correlation volume between per-image feature maps, and then
//! refines a feature-grid flow field with a convolutional GRU. Flow is
//! estimated and supervised at feature resolution; multiply by
//! [`ModelConfig::scale`] to express it in image pixels.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::seeds;
use crate::tensor::{shape_str, Tensor};
use rand_chacha::ChaCha8Rng;

/// Architecture hyperparameters. `Default` is the desk-scale layout used
/// by the CLI; tests shrink the spatial extent, not the channel plan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// Image channels (grayscale = 1).
    pub ci: usize,
    /// Feature channels; also the GRU hidden width.
    pub cf: usize,
    /// Motion-encoder output channels.
    pub cm: usize,
    /// Gate-network hidden channels.
    pub ch: usize,
    /// Single spatial downscale factor of the stem.
    pub scale: usize,
    /// Correlation lookup radius, in feature-grid pixels.
    pub radius: usize,
    /// Gumbel-softmax temperature.
    pub tau: f64,
    /// Use the raw step index as the embedding phase instead of the
    /// step fraction `t / T`. Off by default; kept for comparison runs.
    pub literal_phase: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ci: 1,
            cf: 32,
            cm: 64,
            ch: 16,
            scale: 2,
            radius: 3,
            tau: 1.0,
            literal_phase: false,
        }
    }
}

impl ModelConfig {
    /// Stem hidden width.
    pub fn stem_mid(&self) -> usize {
        self.cf / 2
    }

    /// Correlation window side length.
    pub fn window_side(&self) -> usize {
        2 * self.radius + 1
    }

    /// Motion-encoder input channels: one per window tap plus the two
    /// flow channels.
    pub fn motion_in(&self) -> usize {
        self.window_side() * self.window_side() + 2
    }

    /// GRU input channels (hidden excluded): motion features plus the
    /// static context map.
    pub fn gru_x(&self) -> usize {
        self.cm + self.cf
    }

    /// Gate-network input channels: refined features, previous gate
    /// hidden state, and the 6-channel step embedding.
    pub fn policy_in(&self) -> usize {
        self.cf + self.ch + 6
    }

    pub fn validate(&self) -> Result<()> {
        if self.ci == 0 || self.cf == 0 || self.cm == 0 || self.ch == 0 {
            return Err(Error::contract("ModelConfig: channel counts must be positive"));
        }
        if self.cf % 2 != 0 {
            return Err(Error::contract("ModelConfig: cf must be even"));
        }
        if self.scale == 0 || self.radius == 0 {
            return Err(Error::contract("ModelConfig: scale and radius must be positive"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::contract("ModelConfig: tau must be positive"));
        }
        Ok(())
    }

    /// Feature-grid extent for an image extent.
    pub fn feature_len(&self, image_len: usize) -> usize {
        image_len / self.scale
    }
}

/// One convolution layer's parameters.
#[derive(Debug, Clone)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn init(cout: usize, cin: usize, k: usize, rng: &mut ChaCha8Rng) -> Result<ConvParams> {
        let fan_in = cin * k * k;
        Ok(ConvParams {
            weight: Tensor::init_uniform(&[cout, cin, k, k], fan_in, rng)?,
            bias: Tensor::init_uniform(&[cout], fan_in, rng)?,
        })
    }

    fn zeros(cout: usize, cin: usize, k: usize) -> ConvParams {
        ConvParams {
            weight: Tensor::zeros(&[cout, cin, k, k]),
            bias: Tensor::zeros(&[cout]),
        }
    }
}

/// Backbone parameters: stem, context stem, motion encoder, GRU, head.
#[derive(Debug, Clone)]
pub struct FlowNet {
    pub cfg: ModelConfig,
    pub feat1: ConvParams,
    pub feat2: ConvParams,
    pub ctx1: ConvParams,
    pub ctx2: ConvParams,
    pub motion1: ConvParams,
    pub motion2: ConvParams,
    pub gru_z: ConvParams,
    pub gru_r: ConvParams,
    pub gru_q: ConvParams,
    pub head1: ConvParams,
    pub head2: ConvParams,
}

impl FlowNet {
    /// Seeded uniform init of every layer.
    pub fn init(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<FlowNet> {
        cfg.validate()?;
        let mid = cfg.stem_mid();
        Ok(FlowNet {
            cfg,
            feat1: ConvParams::init(mid, cfg.ci, 3, rng)?,
            feat2: ConvParams::init(cfg.cf, mid, 3, rng)?,
            ctx1: ConvParams::init(mid, 2 * cfg.ci, 3, rng)?,
            ctx2: ConvParams::init(cfg.cf, mid, 3, rng)?,
            motion1: ConvParams::init(cfg.cm, cfg.motion_in(), 3, rng)?,
            motion2: ConvParams::init(cfg.cm, cfg.cm, 3, rng)?,
            gru_z: ConvParams::init(cfg.cf, cfg.cf + cfg.gru_x(), 3, rng)?,
            gru_r: ConvParams::init(cfg.cf, cfg.cf + cfg.gru_x(), 3, rng)?,
            gru_q: ConvParams::init(cfg.cf, cfg.cf + cfg.gru_x(), 3, rng)?,
            head1: ConvParams::init(cfg.cf, cfg.cf, 3, rng)?,
            head2: ConvParams::init(2, cfg.cf, 3, rng)?,
        })
    }

    /// All-zero parameters; used by tests exercising pass-through
    /// behavior.
    pub fn zeros(cfg: ModelConfig) -> Result<FlowNet> {
        cfg.validate()?;
        let mid = cfg.stem_mid();
        Ok(FlowNet {
            cfg,
            feat1: ConvParams::zeros(mid, cfg.ci, 3),
            feat2: ConvParams::zeros(cfg.cf, mid, 3),
            ctx1: ConvParams::zeros(mid, 2 * cfg.ci, 3),
            ctx2: ConvParams::zeros(cfg.cf, mid, 3),
            motion1: ConvParams::zeros(cfg.cm, cfg.motion_in(), 3),
            motion2: ConvParams::zeros(cfg.cm, cfg.cm, 3),
            gru_z: ConvParams::zeros(cfg.cf, cfg.cf + cfg.gru_x(), 3),
            gru_r: ConvParams::zeros(cfg.cf, cfg.cf + cfg.gru_x(), 3),
            gru_q: ConvParams::zeros(cfg.cf, cfg.cf + cfg.gru_x(), 3),
            head1: ConvParams::zeros(cfg.cf, cfg.cf, 3),
            head2: ConvParams::zeros(2, cfg.cf, 3),
        })
    }

    /// Stable names and references for every parameter, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.layers()
            .into_iter()
            .flat_map(|(name, p)| {
                [
                    (format!("{name}.weight"), &p.weight),
                    (format!("{name}.bias"), &p.bias),
                ]
            })
            .collect()
    }

    fn layers(&self) -> Vec<(&'static str, &ConvParams)> {
        vec![
            ("flownet.feat1", &self.feat1),
            ("flownet.feat2", &self.feat2),
            ("flownet.ctx1", &self.ctx1),
            ("flownet.ctx2", &self.ctx2),
            ("flownet.motion1", &self.motion1),
            ("flownet.motion2", &self.motion2),
            ("flownet.gru_z", &self.gru_z),
            ("flownet.gru_r", &self.gru_r),
            ("flownet.gru_q", &self.gru_q),
            ("flownet.head1", &self.head1),
            ("flownet.head2", &self.head2),
        ]
    }

    fn layers_mut(&mut self) -> Vec<(&'static str, &mut ConvParams)> {
        vec![
            ("flownet.feat1", &mut self.feat1),
            ("flownet.feat2", &mut self.feat2),
            ("flownet.ctx1", &mut self.ctx1),
            ("flownet.ctx2", &mut self.ctx2),
            ("flownet.motion1", &mut self.motion1),
            ("flownet.motion2", &mut self.motion2),
            ("flownet.gru_z", &mut self.gru_z),
            ("flownet.gru_r", &mut self.gru_r),
            ("flownet.gru_q", &mut self.gru_q),
            ("flownet.head1", &mut self.head1),
            ("flownet.head2", &mut self.head2),
        ]
    }

    /// Mutable view used by the optimizer and checkpoint loader.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers_mut()
            .into_iter()
            .flat_map(|(name, p)| {
                [
                    (format!("{name}.weight"), &mut p.weight),
                    (format!("{name}.bias"), &mut p.bias),
                ]
            })
            .collect()
    }

    /// Binds every parameter onto a graph once. All subsequent forward
    /// calls share the same leaves, so gradients accumulate across the
    /// recurrent steps.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundFlowNet {
        let mut ids = Vec::new();
        for (name, t) in self.named_params() {
            ids.push((name, g.param(t.clone(), trainable)));
        }
        BoundFlowNet {
            cfg: self.cfg,
            ids,
        }
    }
}

/// Graph-bound backbone: parameter leaves plus the forward wiring.
pub struct BoundFlowNet {
    cfg: ModelConfig,
    ids: Vec<(String, NodeId)>,
}

/// Encoder outputs: the combined feature/context map and the correlation
/// volume.
pub struct Encoded {
    /// `[N, cf, h, w]`; serves as both the initial GRU hidden state and
    /// the static context injected at every step.
    pub phi0: NodeId,
    /// `[N, h, w, h, w]` all-pairs correlation.
    pub corr: NodeId,
}

impl BoundFlowNet {
    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn named_ids(&self) -> &[(String, NodeId)] {
        &self.ids
    }

    fn layer(&self, name: &str) -> (NodeId, NodeId) {
        let w = self
            .ids
            .iter()
            .find(|(n, _)| n == &format!("{name}.weight"))
            .expect("known layer")
            .1;
        let b = self
            .ids
            .iter()
            .find(|(n, _)| n == &format!("{name}.bias"))
            .expect("known layer")
            .1;
        (w, b)
    }

    fn conv(&self, g: &mut Graph, x: NodeId, name: &str, stride: usize) -> Result<NodeId> {
        let (w, b) = self.layer(name);
        g.conv2d(x, w, b, stride, 1)
    }

    /// Encodes an image pair into matching features and context.
    ///
    /// Images are `[N, ci, H, W]` with `H`, `W` divisible by `2 * scale`.
    /// The stem is applied to each image separately (shared weights) for
    /// matching features, and to the channel-concatenated pair for the
    /// combined feature/context map.
    pub fn encode(&self, g: &mut Graph, image1: NodeId, image2: NodeId) -> Result<Encoded> {
        let s1 = g.value(image1).shape().to_vec();
        let s2 = g.value(image2).shape().to_vec();
        if s1 != s2 {
            return Err(Error::shape("encode", shape_str(&s1), shape_str(&s2)));
        }
        if s1.len() != 4 || s1[1] != self.cfg.ci {
            return Err(Error::shape(
                "encode",
                format!("[N, {}, H, W] images", self.cfg.ci),
                shape_str(&s1),
            ));
        }
        let div = 2 * self.cfg.scale;
        if s1[2] % div != 0 || s1[3] % div != 0 {
            return Err(Error::contract(format!(
                "encode: image extent {}x{} must be divisible by {div}",
                s1[2], s1[3]
            )));
        }
        let stem = |net: &Self, g: &mut Graph, img: NodeId| -> Result<NodeId> {
            let c1 = net.conv(g, img, "flownet.feat1", net.cfg.scale)?;
            let a1 = g.relu(c1);
            net.conv(g, a1, "flownet.feat2", 1)
        };
        let f1 = stem(self, g, image1)?;
        let f2 = stem(self, g, image2)?;
        let corr = g.corr_volume(f1, f2)?;
        let pair = g.concat_channels(&[image1, image2])?;
        let c1 = self.conv(g, pair, "flownet.ctx1", self.cfg.scale)?;
        let a1 = g.relu(c1);
        let c2 = self.conv(g, a1, "flownet.ctx2", 1)?;
        let phi0 = g.tanh(c2);
        Ok(Encoded { phi0, corr })
    }

    /// One refinement step.
    ///
    /// Looks up the correlation window at the current flow, encodes
    /// motion, advances the GRU hidden state, and emits a residual flow
    /// delta. Returns `(phi, flow)`; the flow path is residual, so a
    /// zeroed head passes `flow_hat` through unchanged.
    pub fn update(
        &self,
        g: &mut Graph,
        phi_hat: NodeId,
        flow_hat: NodeId,
        corr: NodeId,
        ctx: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let looked = g.corr_lookup(corr, flow_hat, self.cfg.radius)?;
        let min = g.concat_channels(&[looked, flow_hat])?;
        let m1 = self.conv(g, min, "flownet.motion1", 1)?;
        let m1a = g.relu(m1);
        let m2 = self.conv(g, m1a, "flownet.motion2", 1)?;
        let motion = g.relu(m2);
        let x = g.concat_channels(&[motion, ctx])?;
        let hx = g.concat_channels(&[phi_hat, x])?;
        let zc = self.conv(g, hx, "flownet.gru_z", 1)?;
        let z = g.sigmoid(zc);
        let rc = self.conv(g, hx, "flownet.gru_r", 1)?;
        let r = g.sigmoid(rc);
        let rh = g.mul(r, phi_hat)?;
        let rhx = g.concat_channels(&[rh, x])?;
        let qc = self.conv(g, rhx, "flownet.gru_q", 1)?;
        let q = g.tanh(qc);
        let zneg = g.scale(z, -1.0);
        let one_minus_z = g.add_scalar(zneg, 1.0);
        let keep = g.mul(one_minus_z, phi_hat)?;
        let take = g.mul(z, q)?;
        let phi = g.add(keep, take)?;
        let h1 = self.conv(g, phi, "flownet.head1", 1)?;
        let h1a = g.relu(h1);
        let delta = self.conv(g, h1a, "flownet.head2", 1)?;
        let flow = g.add(flow_hat, delta)?;
        Ok((phi, flow))
    }
}

/// Sequence flow loss: exponentially weighted per-step supervision.
///
/// Each step's error is the per-sample mean absolute difference over
/// valid pixels and both channels; step `t` (1-based) of `T` carries
/// weight `omega^(T-t)`. Per-sample weighted sums are averaged over the
/// batch. Also returns the per-step `[N]` error nodes for reuse.
pub fn flow_loss(
    g: &mut Graph,
    predictions: &[NodeId],
    flow_gt: NodeId,
    valid: &[bool],
    omega: f64,
) -> Result<(NodeId, Vec<NodeId>)> {
    if predictions.is_empty() {
        return Err(Error::contract("flow_loss: needs at least one prediction"));
    }
    if !(omega.is_finite() && omega > 0.0 && omega <= 1.0) {
        return Err(Error::contract("flow_loss: omega must lie in (0, 1]"));
    }
    let t_total = predictions.len();
    let mut errs = Vec::with_capacity(t_total);
    let mut acc: Option<NodeId> = None;
    for (ix, &pred) in predictions.iter().enumerate() {
        let err = g.masked_l1_mean(pred, flow_gt, valid)?;
        errs.push(err);
        let weight = omega.powi((t_total - 1 - ix) as i32);
        let weighted = g.scale(err, weight);
        acc = Some(match acc {
            Some(a) => g.add(a, weighted)?,
            None => weighted,
        });
    }
    let loss = g.mean_all(acc.expect("non-empty predictions"));
    Ok((loss, errs))
}

/// Seeded backbone constructor on the init substream.
pub fn init_flownet(cfg: ModelConfig, seed: u64) -> Result<FlowNet> {
    let mut rng = seeds::stream_rng(seed, seeds::Stream::Init, 0);
    FlowNet::init(cfg, &mut rng)
}
