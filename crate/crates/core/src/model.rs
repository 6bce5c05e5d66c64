//! Conv-recurrent word classifier.
//!
//! Front-end: 3D convolution with temporal stride 1 (time extent preserved),
//! spatial max-pool, a residual 2D stack applied to every frame
//! independently, then global average pooling to `G: [B, T, D]`. Back-end:
//! stacked bidirectional GRUs producing `Z: [B, T, 2N]`, temporal pooling
//! (plain mean, or frame-weighted when the weight head is present) and a
//! linear classifier.
//!
//! Feature maps are channels-last throughout.

use crate::gmim::{self, GlobalDiscriminator, WeightHead};
use crate::kv::{join, KvError, KvMap};
use crate::lmim::{self, LocalDiscriminator};
use crate::tensor::{conv_out_extent, Graph, ParamStore, Real, RngStream, Tensor, TensorError, Var};

pub const FRONTEND_PREFIX: &str = "frontend.";
pub const BACKEND_PREFIX: &str = "backend.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub channels: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frames: usize,
    pub input_size: usize,
    pub conv3d_channels: usize,
    pub conv3d_kernel: [usize; 3],
    pub conv3d_stride: [usize; 3],
    pub conv3d_pad: [usize; 3],
    pub pool_window: usize,
    pub pool_stride: usize,
    /// Extra 7x7 stride-2 convolution ahead of the residual stack.
    pub stem_conv: bool,
    pub blocks: Vec<BlockSpec>,
    /// Recurrent units per direction (N).
    pub hidden: usize,
    pub gru_layers: usize,
    pub head_hidden: usize,
    pub classes: usize,
    pub keep_prob: f64,
    pub lmim_hidden: usize,
    pub gmim_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

fn blocks(spec: &[(usize, usize)]) -> Vec<BlockSpec> {
    spec.iter()
        .map(|&(channels, stride)| BlockSpec { channels, stride })
        .collect()
}

impl ModelConfig {
    /// CPU-trainable scale: 32x32 inputs, 12 frames, 4x4x64 final maps.
    pub fn desk() -> Self {
        Self {
            frames: 12,
            input_size: 32,
            conv3d_channels: 16,
            conv3d_kernel: [5, 7, 7],
            conv3d_stride: [1, 2, 2],
            conv3d_pad: [2, 3, 3],
            pool_window: 2,
            pool_stride: 2,
            stem_conv: false,
            blocks: blocks(&[(16, 1), (32, 2), (64, 1), (64, 1)]),
            hidden: 64,
            gru_layers: 3,
            head_hidden: 64,
            classes: 10,
            keep_prob: 0.5,
            lmim_hidden: 128,
            gmim_hidden: 256,
        }
    }

    /// Full-size layout: 88x88 inputs, 29 frames, ResNet18 block layout, N = 1024.
    pub fn full_scale() -> Self {
        Self {
            frames: 29,
            input_size: 88,
            conv3d_channels: 64,
            conv3d_kernel: [5, 7, 7],
            conv3d_stride: [1, 2, 2],
            conv3d_pad: [2, 3, 3],
            pool_window: 2,
            pool_stride: 2,
            stem_conv: false,
            blocks: blocks(&[
                (64, 1),
                (64, 1),
                (128, 2),
                (128, 1),
                (256, 2),
                (256, 1),
                (512, 2),
                (512, 1),
            ]),
            hidden: 1024,
            gru_layers: 3,
            head_hidden: 1024,
            classes: 500,
            keep_prob: 0.5,
            lmim_hidden: 1024,
            gmim_hidden: 256,
        }
    }

    /// Backbone output channels D.
    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(self.conv3d_channels, |b| b.channels)
    }

    fn extent_err(&self, stage: &str) -> KvError {
        KvError::Invalid(format!("input size {} does not survive the {stage}", self.input_size))
    }

    /// Spatial extent after the 3D convolution.
    pub fn conv3d_extent(&self) -> Result<usize, KvError> {
        conv_out_extent(self.input_size, self.conv3d_kernel[1], self.conv3d_stride[1], self.conv3d_pad[1])
            .ok_or_else(|| self.extent_err("3D convolution"))
    }

    /// Spatial extent `(H, W)` of the final feature maps.
    pub fn feature_extent(&self) -> Result<usize, KvError> {
        let mut e = self.conv3d_extent()?;
        e = conv_out_extent(e, self.pool_window, self.pool_stride, 0).ok_or_else(|| self.extent_err("pool"))?;
        if self.stem_conv {
            e = conv_out_extent(e, 7, 2, 3).ok_or_else(|| self.extent_err("stem"))?;
        }
        for b in &self.blocks {
            e = conv_out_extent(e, 3, b.stride, 1).ok_or_else(|| self.extent_err("residual stack"))?;
        }
        Ok(e)
    }

    pub fn validate(&self) -> Result<(), KvError> {
        let bad = |m: &str| Err(KvError::Invalid(m.to_string()));
        if self.conv3d_stride[0] != 1 {
            return bad("temporal stride of the 3D convolution must be 1");
        }
        if 2 * self.conv3d_pad[0] + 1 != self.conv3d_kernel[0] {
            return bad("temporal padding must preserve the frame count (2 * pad + 1 = kernel)");
        }
        if self.frames == 0 || self.classes < 2 || self.hidden == 0 || self.gru_layers == 0 {
            return bad("frames, hidden and gru_layers must be positive and classes >= 2");
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return bad("keep_prob must lie in (0, 1]");
        }
        if self.blocks.iter().any(|b| b.channels == 0 || b.stride == 0) {
            return bad("block channels and strides must be positive");
        }
        self.feature_extent().map(|_| ())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::new();
        m.set("frames", self.frames);
        m.set("input_size", self.input_size);
        m.set("conv3d_channels", self.conv3d_channels);
        m.set("conv3d_kernel", join(&self.conv3d_kernel));
        m.set("conv3d_stride", join(&self.conv3d_stride));
        m.set("conv3d_pad", join(&self.conv3d_pad));
        m.set("pool_window", self.pool_window);
        m.set("pool_stride", self.pool_stride);
        m.set("stem_conv", self.stem_conv);
        let b: Vec<String> = self.blocks.iter().map(|b| format!("{}:{}", b.channels, b.stride)).collect();
        m.set("blocks", b.join(","));
        m.set("hidden", self.hidden);
        m.set("gru_layers", self.gru_layers);
        m.set("head_hidden", self.head_hidden);
        m.set("classes", self.classes);
        m.set("keep_prob", self.keep_prob);
        m.set("lmim_hidden", self.lmim_hidden);
        m.set("gmim_hidden", self.gmim_hidden);
        m
    }

    pub const KEYS: &'static [&'static str] = &[
        "frames",
        "input_size",
        "conv3d_channels",
        "conv3d_kernel",
        "conv3d_stride",
        "conv3d_pad",
        "pool_window",
        "pool_stride",
        "stem_conv",
        "blocks",
        "hidden",
        "gru_layers",
        "head_hidden",
        "classes",
        "keep_prob",
        "lmim_hidden",
        "gmim_hidden",
    ];

    /// Overlays the entries of `m` on `base`.
    pub fn from_kv(m: &KvMap, base: &ModelConfig) -> Result<Self, KvError> {
        m.check_keys(Self::KEYS)?;
        let mut c = base.clone();
        m.apply("frames", &mut c.frames)?;
        m.apply("input_size", &mut c.input_size)?;
        m.apply("conv3d_channels", &mut c.conv3d_channels)?;
        for (key, slot) in [
            ("conv3d_kernel", &mut c.conv3d_kernel),
            ("conv3d_stride", &mut c.conv3d_stride),
            ("conv3d_pad", &mut c.conv3d_pad),
        ] {
            if let Some(v) = m.get_list::<usize>(key)? {
                *slot = v.try_into().map_err(|_| KvError::Value {
                    key: key.to_string(),
                    value: m.get_str(key).unwrap_or_default().to_string(),
                })?;
            }
        }
        m.apply("pool_window", &mut c.pool_window)?;
        m.apply("pool_stride", &mut c.pool_stride)?;
        m.apply("stem_conv", &mut c.stem_conv)?;
        if let Some(list) = m.get_list::<String>("blocks")? {
            c.blocks = list
                .iter()
                .map(|s| {
                    let bad = || KvError::Value {
                        key: "blocks".into(),
                        value: s.clone(),
                    };
                    let (ch, st) = s.split_once(':').ok_or_else(bad)?;
                    Ok(BlockSpec {
                        channels: ch.parse().map_err(|_| bad())?,
                        stride: st.parse().map_err(|_| bad())?,
                    })
                })
                .collect::<Result<_, KvError>>()?;
        }
        m.apply("hidden", &mut c.hidden)?;
        m.apply("gru_layers", &mut c.gru_layers)?;
        m.apply("head_hidden", &mut c.head_hidden)?;
        m.apply("classes", &mut c.classes)?;
        m.apply("keep_prob", &mut c.keep_prob)?;
        m.apply("lmim_hidden", &mut c.lmim_hidden)?;
        m.apply("gmim_hidden", &mut c.gmim_hidden)?;
        c.validate()?;
        Ok(c)
    }
}

/// A `T x 1 x S x S` frame sequence with its label and optional target window.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub frames: Tensor<f32>,
    pub label: usize,
    /// Ground-truth `[start, end)` frame interval of the target pattern.
    pub window: Option<(usize, usize)>,
}

impl VideoSequence {
    pub fn new(frames: Tensor<f32>, label: usize, window: Option<(usize, usize)>) -> Result<Self, TensorError> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != s[3] {
            return Err(TensorError::Shape {
                op: "video_sequence",
                expected: vec![0, 1, 0, 0],
                found: s.to_vec(),
            });
        }
        if let Some((a, b)) = window {
            if !(a < b && b <= s[0]) {
                return Err(TensorError::Range {
                    op: "video_sequence window",
                    start: a,
                    len: b.saturating_sub(a),
                    extent: s[0],
                });
            }
        }
        if frames.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(TensorError::Domain {
                op: "video_sequence",
                detail: "pixel values must lie in [0, 1]".into(),
            });
        }
        Ok(Self { frames, label, window })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn side(&self) -> usize {
        self.frames.shape()[2]
    }
}

/// Stacks sequences into the model input layout `[B, T, S, S, 1]`.
pub fn batch_frames<F: Real>(seqs: &[&VideoSequence]) -> Result<Tensor<F>, TensorError> {
    let first = seqs.first().ok_or(TensorError::Domain {
        op: "batch_frames",
        detail: "empty batch".into(),
    })?;
    let (t, s) = (first.num_frames(), first.side());
    let mut data = Vec::with_capacity(seqs.len() * t * s * s);
    for q in seqs {
        if q.frames.shape() != first.frames.shape() {
            return Err(TensorError::Shape {
                op: "batch_frames",
                expected: first.frames.shape().to_vec(),
                found: q.frames.shape().to_vec(),
            });
        }
        data.extend(q.frames.data().iter().map(|&v| F::from_f32(v).unwrap()));
    }
    Tensor::new(&[seqs.len(), t, s, s, 1], data)
}

pub fn one_hot<F: Real>(labels: &[usize], classes: usize) -> Tensor<F> {
    Tensor::from_fn(&[labels.len(), classes], |i| {
        if labels[i / classes] == i % classes {
            F::one()
        } else {
            F::zero()
        }
    })
}

/// Optional trainable components beyond the classifier itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Heads {
    pub lmim: bool,
    pub gmim: bool,
}

pub enum Mode {
    Eval,
    /// Training forward pass; dropout masks are drawn from the stream.
    Train(RngStream),
}

pub struct ForwardOutputs {
    /// Final pre-pooling maps `[B*T, H, W, D]`.
    pub feature_maps: Var,
    /// `G: [B, T, D]`.
    pub pooled: Var,
    /// `Z: [B, T, 2N]`.
    pub states: Var,
    /// `β: [B, T]` when the weight head is present.
    pub beta: Option<Var>,
    /// `O: [B, 2N]`.
    pub repr: Var,
    /// `O′: [B, C]`.
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct SequenceModel<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

fn block_name(i: usize, part: &str) -> String {
    format!("{FRONTEND_PREFIX}block{i}.{part}")
}

fn gru_name(layer: usize, dir: &str, part: &str) -> String {
    format!("{BACKEND_PREFIX}gru{layer}.{dir}.{part}")
}

impl<F: Real> SequenceModel<F> {
    pub fn new(config: ModelConfig, heads: Heads, seed: u64) -> Result<Self, TensorError> {
        config
            .validate()
            .map_err(|e| TensorError::Domain {
                op: "model_config",
                detail: e.to_string(),
            })?;
        let mut rng = RngStream::new(seed, 0x6d6f_6465);
        let mut p = ParamStore::new();
        let c = &config;
        let [kt, kh, kw] = c.conv3d_kernel;
        p.insert(
            &format!("{FRONTEND_PREFIX}conv3d.weight"),
            init::relu_uniform(&[kt, kh, kw, 1, c.conv3d_channels], kt * kh * kw, &mut rng),
        )?;
        p.insert(&format!("{FRONTEND_PREFIX}conv3d.bias"), Tensor::zeros(&[c.conv3d_channels]))?;
        let mut cin = c.conv3d_channels;
        if c.stem_conv {
            p.insert(
                &format!("{FRONTEND_PREFIX}stem.weight"),
                init::relu_uniform(&[7, 7, cin, cin], 49 * cin, &mut rng),
            )?;
            p.insert(&format!("{FRONTEND_PREFIX}stem.bias"), Tensor::zeros(&[cin]))?;
        }
        for (i, b) in c.blocks.iter().enumerate() {
            let cout = b.channels;
            p.insert(&block_name(i, "conv1.weight"), init::relu_uniform(&[3, 3, cin, cout], 9 * cin, &mut rng))?;
            p.insert(&block_name(i, "conv1.bias"), Tensor::zeros(&[cout]))?;
            p.insert(&block_name(i, "conv2.weight"), init::fan_in_uniform(&[3, 3, cout, cout], 9 * cout, &mut rng))?;
            p.insert(&block_name(i, "conv2.bias"), Tensor::zeros(&[cout]))?;
            if cin != cout || b.stride != 1 {
                p.insert(&block_name(i, "proj.weight"), init::fan_in_uniform(&[1, 1, cin, cout], cin, &mut rng))?;
                p.insert(&block_name(i, "proj.bias"), Tensor::zeros(&[cout]))?;
            }
            cin = cout;
        }
        let n = c.hidden;
        let mut input = c.feature_dim();
        for layer in 0..c.gru_layers {
            for dir in ["fwd", "bwd"] {
                p.insert(&gru_name(layer, dir, "w_ih"), init::recurrent_input(input, n, 3, &mut rng))?;
                p.insert(&gru_name(layer, dir, "w_hh"), init::orthogonal_gates(n, 3, &mut rng))?;
                p.insert(&gru_name(layer, dir, "b_ih"), Tensor::zeros(&[3 * n]))?;
                p.insert(&gru_name(layer, dir, "b_hh"), Tensor::zeros(&[3 * n]))?;
            }
            input = 2 * n;
        }
        p.insert(
            &format!("{BACKEND_PREFIX}classifier.weight"),
            init::fan_in_uniform(&[2 * n, c.classes], 2 * n, &mut rng),
        )?;
        p.insert(&format!("{BACKEND_PREFIX}classifier.bias"), Tensor::zeros(&[c.classes]))?;
        let mut model = Self { config, params: p };
        model.add_heads(heads, &mut rng)?;
        Ok(model)
    }

    /// Adds any missing head (idempotent), e.g. when a weight head and global
    /// discriminator are attached to a model trained without them.
    pub fn add_heads(&mut self, heads: Heads, rng: &mut RngStream) -> Result<(), TensorError> {
        let c = self.config.clone();
        if heads.lmim && !self.has_lmim() {
            LocalDiscriminator::init(&mut self.params, c.classes + c.feature_dim(), c.lmim_hidden, rng)?;
        }
        if heads.gmim && !self.has_weight_head() {
            WeightHead::init(&mut self.params, c.feature_dim(), c.head_hidden, rng)?;
        }
        if heads.gmim && !self.has_gmim() {
            GlobalDiscriminator::init(&mut self.params, 2 * c.hidden + c.classes, c.gmim_hidden, rng)?;
        }
        Ok(())
    }

    pub fn has_lmim(&self) -> bool {
        self.params.has_prefix(lmim::PREFIX)
    }

    pub fn has_weight_head(&self) -> bool {
        self.params.has_prefix(gmim::HEAD_PREFIX)
    }

    pub fn has_gmim(&self) -> bool {
        self.params.has_prefix(gmim::PREFIX)
    }

    /// Copy without the training-only discriminators.
    pub fn for_inference(&self) -> SequenceModel<F> {
        SequenceModel {
            config: self.config.clone(),
            params: self.params.without_prefix(lmim::PREFIX).without_prefix(gmim::PREFIX),
        }
    }

    pub fn cast<G: Real>(&self) -> SequenceModel<G> {
        SequenceModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    fn p(&self, g: &mut Graph<F>, name: &str) -> Result<Var, TensorError> {
        g.param_named(&self.params, name)
    }

    fn p_opt(&self, g: &mut Graph<F>, name: &str) -> Option<Var> {
        self.params.id(name).map(|id| g.param(&self.params, id))
    }

    /// Returns `(feature_maps [B*T, H, W, D], pooled [B, T, D])`.
    pub fn frontend(&self, g: &mut Graph<F>, x: Var) -> Result<(Var, Var), TensorError> {
        let c = &self.config;
        let xs = g.shape(x).to_vec();
        if xs.len() != 5 || xs[2] != c.input_size || xs[3] != c.input_size || xs[4] != 1 {
            return Err(TensorError::Shape {
                op: "frontend",
                expected: vec![0, c.frames, c.input_size, c.input_size, 1],
                found: xs,
            });
        }
        let (b, t) = (xs[0], xs[1]);
        let w = self.p(g, &format!("{FRONTEND_PREFIX}conv3d.weight"))?;
        let bias = self.p(g, &format!("{FRONTEND_PREFIX}conv3d.bias"))?;
        let y = g.conv3d(x, w, Some(bias), c.conv3d_stride, c.conv3d_pad)?;
        let y = g.relu(y);
        debug_assert_eq!(g.shape(y)[1], t, "temporal extent preserved");
        let ys = g.shape(y).to_vec();
        let mut h = g.reshape(y, &[b * t, ys[2], ys[3], ys[4]])?;
        h = g.max_pool2d(h, [c.pool_window; 2], [c.pool_stride; 2])?;
        if c.stem_conv {
            let w = self.p(g, &format!("{FRONTEND_PREFIX}stem.weight"))?;
            let bias = self.p(g, &format!("{FRONTEND_PREFIX}stem.bias"))?;
            h = g.conv2d(h, w, Some(bias), [2, 2], [3, 3])?;
            h = g.relu(h);
        }
        for (i, blk) in c.blocks.iter().enumerate() {
            h = self.residual_block(g, h, i, blk.stride)?;
        }
        let maps = h;
        g.set_label(maps, "feature_maps");
        let gap = g.mean(maps, &[1, 2])?;
        let d = g.shape(gap)[1];
        let pooled = g.reshape(gap, &[b, t, d])?;
        Ok((maps, pooled))
    }

    fn residual_block(&self, g: &mut Graph<F>, x: Var, i: usize, stride: usize) -> Result<Var, TensorError> {
        let w1 = self.p(g, &block_name(i, "conv1.weight"))?;
        let b1 = self.p(g, &block_name(i, "conv1.bias"))?;
        let w2 = self.p(g, &block_name(i, "conv2.weight"))?;
        let b2 = self.p(g, &block_name(i, "conv2.bias"))?;
        let y = g.conv2d(x, w1, Some(b1), [stride; 2], [1, 1])?;
        let y = g.relu(y);
        let y = g.conv2d(y, w2, Some(b2), [1, 1], [1, 1])?;
        let shortcut = match self.p_opt(g, &block_name(i, "proj.weight")) {
            Some(wp) => {
                let bp = self.p(g, &block_name(i, "proj.bias"))?;
                g.conv2d(x, wp, Some(bp), [stride; 2], [0, 0])?
            }
            None => x,
        };
        let s = g.add(y, shortcut)?;
        Ok(g.relu(s))
    }

    fn gru_direction(&self, g: &mut Graph<F>, input: Var, layer: usize, dir: &str) -> Result<Var, TensorError> {
        let s = g.shape(input).to_vec();
        let (b, t, i) = (s[0], s[1], s[2]);
        let n = self.config.hidden;
        let w_ih = self.p(g, &gru_name(layer, dir, "w_ih"))?;
        let w_hh = self.p(g, &gru_name(layer, dir, "w_hh"))?;
        let b_ih = self.p(g, &gru_name(layer, dir, "b_ih"))?;
        let b_hh = self.p(g, &gru_name(layer, dir, "b_hh"))?;
        let flat = g.reshape(input, &[b * t, i])?;
        let gi = g.linear(flat, w_ih, b_ih)?;
        let gi = g.reshape(gi, &[b, t, 3 * n])?;
        let mut h = g.input(Tensor::zeros(&[b, n]));
        let mut outs = Vec::with_capacity(t);
        for step in 0..t {
            let x = g.slice(gi, 1, step, 1)?;
            let x = g.reshape(x, &[b, 3 * n])?;
            h = g.gru_cell(x, h, w_hh, b_hh)?;
            outs.push(g.reshape(h, &[b, 1, n])?);
        }
        g.concat(&outs, 1)
    }

    /// One bidirectional layer: `[B, T, I] -> [B, T, 2N]`, forward half first.
    pub fn bigru_layer(&self, g: &mut Graph<F>, input: Var, layer: usize) -> Result<Var, TensorError> {
        let fwd = self.gru_direction(g, input, layer, "fwd")?;
        let rev = g.reverse(input, 1)?;
        let bwd = self.gru_direction(g, rev, layer, "bwd")?;
        let bwd = g.reverse(bwd, 1)?;
        g.concat(&[fwd, bwd], 2)
    }

    /// Stacked bidirectional GRUs over `G: [B, T, D]`; dropout between layers in training.
    pub fn backend(&self, g: &mut Graph<F>, pooled: Var, mode: &mut Mode) -> Result<Var, TensorError> {
        let mut z = pooled;
        for layer in 0..self.config.gru_layers {
            if layer > 0 {
                if let Mode::Train(rng) = mode {
                    z = g.dropout(z, self.config.keep_prob, rng)?;
                }
            }
            z = self.bigru_layer(g, z, layer)?;
        }
        g.set_label(z, "backend_states");
        Ok(z)
    }

    pub fn classifier(&self, g: &mut Graph<F>, repr: Var) -> Result<Var, TensorError> {
        let w = self.p(g, &format!("{BACKEND_PREFIX}classifier.weight"))?;
        let b = self.p(g, &format!("{BACKEND_PREFIX}classifier.bias"))?;
        g.linear(repr, w, b)
    }

    pub fn forward(&self, g: &mut Graph<F>, x: Var, mode: &mut Mode) -> Result<ForwardOutputs, TensorError> {
        let (feature_maps, pooled) = self.frontend(g, x)?;
        let states = self.backend(g, pooled, mode)?;
        let (beta, repr) = if self.has_weight_head() {
            let beta = gmim::frame_weights(g, &self.params, pooled, &WeightHead::default())?;
            (Some(beta), gmim::weighted_pool(g, states, beta)?)
        } else {
            (None, g.mean(states, &[1])?)
        };
        g.set_label(repr, "representation");
        let logits = self.classifier(g, repr)?;
        g.set_label(logits, "logits");
        Ok(ForwardOutputs {
            feature_maps,
            pooled,
            states,
            beta,
            repr,
            logits,
        })
    }
}

/// Class probabilities from logits (softmax over the last axis).
pub fn classify<F: Real>(g: &mut Graph<F>, logits: Var) -> Var {
    g.softmax(logits)
}

/// Checkpoint container: magic, version, config text, named little-endian f32 tensors.
pub mod checkpoint {
    use std::io::{Read, Write};
    use std::path::Path;

    use thiserror::Error;

    use super::{ModelConfig, SequenceModel};
    use crate::kv::{KvError, KvMap};
    use crate::tensor::{ParamStore, Tensor, TensorError};

    pub const MAGIC: &[u8; 8] = b"MIMSEQCK";
    pub const VERSION: u32 = 1;

    #[derive(Debug, Error)]
    pub enum CheckpointError {
        #[error("io: {0}")]
        Io(#[from] std::io::Error),
        #[error("not a checkpoint (bad magic)")]
        BadMagic,
        #[error("unsupported checkpoint version {0}")]
        Version(u32),
        #[error("malformed checkpoint: {0}")]
        Malformed(String),
        #[error("config: {0}")]
        Config(#[from] KvError),
        #[error("tensor: {0}")]
        Tensor(#[from] TensorError),
    }

    fn put_u32(out: &mut Vec<u8>, v: usize) {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }

    pub fn to_bytes(model: &SequenceModel<f32>) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION as usize);
        let text = model.config.to_kv().to_text();
        put_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());
        put_u32(&mut out, model.params.len());
        for (_, p) in model.params.iter() {
            put_u32(&mut out, p.name.len());
            out.extend_from_slice(p.name.as_bytes());
            put_u32(&mut out, p.value.ndim());
            for &d in p.value.shape() {
                put_u32(&mut out, d);
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    struct Cursor<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
            let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
                CheckpointError::Malformed(format!("truncated at byte {} (needed {n})", self.pos))
            })?;
            let s = &self.buf[self.pos..end];
            self.pos = end;
            Ok(s)
        }

        fn u32(&mut self) -> Result<usize, CheckpointError> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
        }

        fn string(&mut self) -> Result<String, CheckpointError> {
            let n = self.u32()?;
            String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Malformed("non-UTF-8 text".into()))
        }
    }

    pub fn from_bytes(buf: &[u8]) -> Result<SequenceModel<f32>, CheckpointError> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(8).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = c.u32()? as u32;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config = ModelConfig::from_kv(&KvMap::parse(&c.string()?)?, &ModelConfig::desk())?;
        let count = c.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = c.string()?;
            let ndim = c.u32()?;
            let shape = (0..ndim).map(|_| c.u32()).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| {
                CheckpointError::Malformed(format!("extent overflow in `{name}`"))
            })?;
            let raw = c.take(n.checked_mul(4).ok_or_else(|| CheckpointError::Malformed("extent overflow".into()))?)?;
            let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
            params.insert(&name, Tensor::new(&shape, data)?)?;
        }
        if c.pos != buf.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", buf.len() - c.pos)));
        }
        Ok(SequenceModel { config, params })
    }

    pub fn save(model: &SequenceModel<f32>, path: &Path) -> Result<(), CheckpointError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&to_bytes(model))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<SequenceModel<f32>, CheckpointError> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        from_bytes(&buf)
    }
}

pub mod init {
    //! Parameter initializers: fan-in scaled uniform for conv/linear weights,
    //! orthogonal blocks for recurrent weights.

    use crate::tensor::{Real, RngStream, Tensor};

    fn uniform<F: Real>(shape: &[usize], bound: f64, rng: &mut RngStream) -> Tensor<F> {
        Tensor::from_fn(shape, |_| F::from_f64_lossy(rng.uniform_in(-bound, bound)))
    }

    /// `U(-sqrt(3 / fan_in), sqrt(3 / fan_in))`: unit-variance preserving for linear maps.
    pub fn fan_in_uniform<F: Real>(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor<F> {
        uniform(shape, (3.0 / fan_in as f64).sqrt(), rng)
    }

    /// `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))` for layers followed by a ReLU.
    pub fn relu_uniform<F: Real>(shape: &[usize], fan_in: usize, rng: &mut RngStream) -> Tensor<F> {
        uniform(shape, (6.0 / fan_in as f64).sqrt(), rng)
    }

    /// Input-to-hidden weights `[input, gates * hidden]`, `U(-1/sqrt(hidden), 1/sqrt(hidden))`.
    pub fn recurrent_input<F: Real>(input: usize, hidden: usize, gates: usize, rng: &mut RngStream) -> Tensor<F> {
        uniform(&[input, gates * hidden], 1.0 / (hidden as f64).sqrt(), rng)
    }

    /// Row-orthonormal `n x n` matrix by modified Gram-Schmidt on Gaussian rows.
    pub fn orthogonal(n: usize, rng: &mut RngStream) -> Vec<f64> {
        let mut m: Vec<f64> = (0..n * n).map(|_| rng.normal()).collect();
        for i in 0..n {
            let (done, rest) = m.split_at_mut(i * n);
            let row = &mut rest[..n];
            for j in 0..i {
                let prev = &done[j * n..(j + 1) * n];
                let dot: f64 = row.iter().zip(prev).map(|(a, b)| a * b).sum();
                row.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot * b);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= norm);
        }
        m
    }

    /// Hidden-to-hidden weights `[hidden, gates * hidden]`, each gate block orthogonal.
    pub fn orthogonal_gates<F: Real>(hidden: usize, gates: usize, rng: &mut RngStream) -> Tensor<F> {
        let width = gates * hidden;
        let mut out = vec![F::zero(); hidden * width];
        for gate in 0..gates {
            let q = orthogonal(hidden, rng);
            for r in 0..hidden {
                for c in 0..hidden {
                    out[r * width + gate * hidden + c] = F::from_f64_lossy(q[r * hidden + c]);
                }
            }
        }
        Tensor::from_parts(vec![hidden, width], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            frames: 4,
            input_size: 16,
            conv3d_channels: 4,
            conv3d_kernel: [3, 5, 5],
            conv3d_stride: [1, 2, 2],
            conv3d_pad: [1, 2, 2],
            blocks: vec![BlockSpec { channels: 4, stride: 1 }, BlockSpec { channels: 6, stride: 2 }],
            hidden: 5,
            gru_layers: 2,
            head_hidden: 3,
            classes: 3,
            lmim_hidden: 4,
            gmim_hidden: 4,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn orthogonal_rows_are_orthonormal() {
        let mut rng = RngStream::new(1, 1);
        let n = 12;
        let q = init::orthogonal(n, &mut rng);
        for i in 0..n {
            for j in 0..n {
                let dot: f64 = (0..n).map(|k| q[i * n + k] * q[j * n + k]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn desk_shapes() {
        let cfg = ModelConfig::desk();
        assert_eq!(cfg.conv3d_extent().unwrap(), 16);
        assert_eq!(cfg.feature_extent().unwrap(), 4);
        assert_eq!(cfg.feature_dim(), 64);
    }

    #[test]
    fn config_text_roundtrip() {
        let cfg = ModelConfig::full_scale();
        let back = ModelConfig::from_kv(&cfg.to_kv(), &ModelConfig::desk()).unwrap();
        assert_eq!(back, cfg);
        let mut bad = cfg.to_kv();
        bad.set("conv3d_stride", "2,2,2");
        assert!(ModelConfig::from_kv(&bad, &ModelConfig::desk()).is_err());
    }

    #[test]
    fn forward_shapes_and_heads() {
        let cfg = tiny();
        let m = SequenceModel::<f64>::new(cfg.clone(), Heads { lmim: true, gmim: true }, 3).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 4, 16, 16, 1], |i| ((i * 31) % 17) as f64 / 17.0));
        let out = m.forward(&mut g, x, &mut Mode::Eval).unwrap();
        assert_eq!(g.shape(out.feature_maps), &[8, 2, 2, 6]);
        assert_eq!(g.shape(out.pooled), &[2, 4, 6]);
        assert_eq!(g.shape(out.states), &[2, 4, 10]);
        assert_eq!(g.shape(out.beta.unwrap()), &[2, 4]);
        assert_eq!(g.shape(out.logits), &[2, 3]);
        let plain = SequenceModel::<f64>::new(cfg, Heads::default(), 3).unwrap();
        assert!(!plain.has_lmim() && !plain.has_gmim() && !plain.has_weight_head());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = SequenceModel::<f32>::new(tiny(), Heads { lmim: false, gmim: true }, 5).unwrap();
        let bytes = checkpoint::to_bytes(&m);
        let back = checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(checkpoint::to_bytes(&back), bytes);
        assert!(back.has_weight_head());
        assert!(matches!(checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(checkpoint::CheckpointError::Malformed(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint::from_bytes(&bad), Err(checkpoint::CheckpointError::BadMagic)));
    }

    #[test]
    fn wrong_input_extent_rejected() {
        let m = SequenceModel::<f32>::new(tiny(), Heads::default(), 0).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[1, 4, 15, 15, 1]));
        assert!(matches!(m.forward(&mut g, x, &mut Mode::Eval), Err(TensorError::Shape { op: "frontend", .. })));
    }

    #[test]
    fn time_reversal_swaps_directions_single_layer() {
        let cfg = ModelConfig { gru_layers: 1, ..tiny() };
        let m = SequenceModel::<f64>::new(cfg, Heads::default(), 8).unwrap();
        // Give both directions identical weights so reversal symmetry applies.
        let names: Vec<String> = m.params.iter().map(|(_, p)| p.name.clone()).filter(|n| n.contains(".fwd.")).collect();
        let mut m = m;
        for n in names {
            let src = m.params.value(m.params.id(&n).unwrap()).clone();
            let dst = m.params.id(&n.replace(".fwd.", ".bwd.")).unwrap();
            m.params.get_mut(dst).value = src;
        }
        let gseq = Tensor::from_fn(&[1, 4, 6], |i| (i as f64 * 0.37).sin());
        let mut g = Graph::new();
        let a = g.input(gseq.clone());
        let za = m.backend(&mut g, a, &mut Mode::Eval).unwrap();
        let ra = g.reverse(a, 1).unwrap();
        let zr = m.backend(&mut g, ra, &mut Mode::Eval).unwrap();
        let n = 5;
        for t in 0..4 {
            for k in 0..n {
                let fwd_a = g.value(za).get(&[0, t, k]);
                let bwd_r = g.value(zr).get(&[0, 3 - t, n + k]);
                assert!((fwd_a - bwd_r).abs() < 1e-12);
            }
        }
    }
}
