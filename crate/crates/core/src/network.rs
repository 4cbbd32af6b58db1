//! Few-shot segmentation network (shared encoder, prototype relation,
//! skip-connected decoder) and the mask discriminator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchStats, Bound, Graph, ParamKind, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    #[default]
    ToyConv,
    /// EfficientNet-B0-style inverted-residual encoder with frozen
    /// batch-norm statistics. Randomly initialised; no pretrained weights.
    LargeBackbone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeMode {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RelationMode {
    /// Concatenate the query bottleneck with the support prototype.
    #[default]
    Prototype,
    /// Concatenate the query bottleneck with a copy of itself; the support
    /// set is ignored.
    Ablated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub depth: usize,
    pub channels_per_level: Vec<usize>,
    pub bottleneck_channels: usize,
    pub input_size: [usize; 2],
    pub encoder_kind: EncoderKind,
    pub support_size: usize,
    pub prototype: PrototypeMode,
    pub relation: RelationMode,
    /// Decoder widths per level; defaults to `channels_per_level`.
    pub decoder_channels: Option<Vec<usize>>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            channels_per_level: vec![8, 16, 32, 64],
            bottleneck_channels: 64,
            input_size: [64, 64],
            encoder_kind: EncoderKind::ToyConv,
            support_size: 5,
            prototype: PrototypeMode::Sum,
            relation: RelationMode::Prototype,
            decoder_channels: None,
        }
    }
}

/// Channel layout of the large-backbone encoder levels after the first.
pub const LARGE_BACKBONE_CHANNELS: [usize; 4] = [16, 24, 40, 112];

impl NetworkConfig {
    /// The large-backbone layout at 224x224 with five levels.
    pub fn large_backbone() -> Self {
        Self {
            depth: 5,
            channels_per_level: vec![16, 16, 24, 40, 112],
            bottleneck_channels: 320,
            input_size: [224, 224],
            encoder_kind: EncoderKind::LargeBackbone,
            support_size: 5,
            prototype: PrototypeMode::Sum,
            relation: RelationMode::Prototype,
            decoder_channels: Some(vec![16, 32, 64, 128, 512]),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.depth < 2 {
            return bad(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.channels_per_level.len() != self.depth {
            return bad(format!(
                "channels_per_level has {} entries for depth {}",
                self.channels_per_level.len(),
                self.depth
            ));
        }
        if self.channels_per_level.contains(&0) || self.bottleneck_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        let step = 1usize << (self.depth - 1);
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % step != 0 || w % step != 0 {
            return bad(format!(
                "input size {h}x{w} must be a positive multiple of {step} for depth {}",
                self.depth
            ));
        }
        if let Some(d) = &self.decoder_channels {
            if d.len() != self.depth || d.contains(&0) {
                return bad("decoder_channels must hold one positive width per level".into());
            }
        }
        if self.encoder_kind == EncoderKind::LargeBackbone
            && (self.depth != 5 || self.channels_per_level[1..] != LARGE_BACKBONE_CHANNELS)
        {
            return bad(format!(
                "large_backbone needs depth 5 and channels [c1, {:?}]",
                LARGE_BACKBONE_CHANNELS
            ));
        }
        Ok(())
    }

    pub fn decoder_widths(&self) -> &[usize] {
        self.decoder_channels.as_deref().unwrap_or(&self.channels_per_level)
    }

    /// Spatial size of the bottleneck.
    pub fn bottleneck_size(&self) -> [usize; 2] {
        let step = 1 << (self.depth - 1);
        [self.input_size[0] / step, self.input_size[1] / step]
    }

    /// Shape of encoder level `l` (0-based) for one image.
    pub fn level_shape(&self, l: usize) -> [usize; 3] {
        [
            self.channels_per_level[l],
            self.input_size[0] >> l,
            self.input_size[1] >> l,
        ]
    }
}

/// Encoder outputs for a batch of images.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub bottleneck: Tensor,
}

/// Graph handles of an encoded batch.
#[derive(Debug, Clone)]
pub struct PyramidVars {
    pub levels: Vec<Var>,
    pub bottleneck: Var,
}

/// Element-wise sum (or mean) of `K` single-item bottleneck maps. The
/// result does not depend on the order of `features`, bit for bit.
pub fn support_prototype(features: &[Tensor], mode: PrototypeMode) -> Result<Tensor> {
    if features.is_empty() {
        return Err(Error::EmptySupport);
    }
    let stacked = Tensor::stack(features)?;
    let mut g = Graph::new();
    let x = g.constant(stacked);
    let p = g.sum_batch(x, mode == PrototypeMode::Mean)?;
    Ok(g.value(p).clone())
}

/// Channel-wise concatenation, query channels first.
pub fn relate(query_bottleneck: &Tensor, prototype: &Tensor) -> Result<Tensor> {
    if query_bottleneck.shape() != prototype.shape() {
        return Err(Error::shape(query_bottleneck.shape(), prototype.shape()));
    }
    let mut g = Graph::new();
    let q = g.constant(query_bottleneck.clone());
    let p = g.constant(prototype.clone());
    let r = g.concat_channels(q, p)?;
    Ok(g.value(r).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationNet {
    cfg: NetworkConfig,
    params: ParamStore,
}

struct MbConv {
    cin: usize,
    cout: usize,
    expand: usize,
    kernel: usize,
    stride: usize,
}

fn large_backbone_blocks() -> Vec<Vec<MbConv>> {
    let b = |cin, cout, expand, kernel, stride| MbConv {
        cin,
        cout,
        expand,
        kernel,
        stride,
    };
    vec![
        vec![b(32, 16, 1, 3, 1)],
        vec![b(16, 24, 6, 3, 2), b(24, 24, 6, 3, 1)],
        vec![b(24, 40, 6, 5, 2), b(40, 40, 6, 5, 1)],
        vec![
            b(40, 80, 6, 3, 2),
            b(80, 80, 6, 3, 1),
            b(80, 80, 6, 3, 1),
            b(80, 112, 6, 5, 1),
            b(112, 112, 6, 5, 1),
            b(112, 112, 6, 5, 1),
        ],
    ]
}

impl SegmentationNet {
    pub fn new(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let ch = &cfg.channels_per_level;
        match cfg.encoder_kind {
            EncoderKind::ToyConv => {
                for l in 0..cfg.depth {
                    let cin = if l == 0 { 3 } else { ch[l - 1] };
                    p.init_conv(&mut rng, &format!("enc{l}.conv0"), cin, ch[l], 3, true);
                    p.init_conv(&mut rng, &format!("enc{l}.conv1"), ch[l], ch[l], 3, true);
                }
            }
            EncoderKind::LargeBackbone => {
                p.init_conv(&mut rng, "enc0.conv0", 3, ch[0], 3, false);
                p.init_bn("enc0.bn0", ch[0], ParamKind::Learnable);
                p.init_conv(&mut rng, "enc1.stem", ch[0], 32, 3, false);
                p.init_bn("enc1.stem_bn", 32, ParamKind::Learnable);
                for (s, stage) in large_backbone_blocks().iter().enumerate() {
                    for (i, blk) in stage.iter().enumerate() {
                        init_mbconv(&mut p, &mut rng, &format!("enc{}.mb{i}", s + 1), blk);
                    }
                }
            }
        }
        let last = ch[cfg.depth - 1];
        if cfg.bottleneck_channels != last {
            p.init_conv(&mut rng, "bottleneck.proj", last, cfg.bottleneck_channels, 1, true);
        }
        let d = cfg.decoder_widths().to_vec();
        let top = cfg.depth - 1;
        p.init_conv(&mut rng, &format!("dec{top}.conv0"), 2 * cfg.bottleneck_channels, d[top], 3, true);
        p.init_conv(&mut rng, &format!("dec{top}.conv1"), d[top], d[top], 3, true);
        for l in (0..top).rev() {
            p.init_conv(&mut rng, &format!("dec{l}.up"), d[l + 1], d[l], 3, true);
            p.init_conv(&mut rng, &format!("dec{l}.conv0"), d[l] + ch[l], d[l], 3, true);
            p.init_conv(&mut rng, &format!("dec{l}.conv1"), d[l], d[l], 3, true);
        }
        p.init_conv(&mut rng, "head", d[0], 1, 1, true);
        Ok(Self { cfg, params: p })
    }

    /// Rebuilds a network around stored parameters, checking the layout.
    pub fn from_params(cfg: NetworkConfig, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(cfg, 0)?;
        net.params.load_from(&params)?;
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn check_images(&self, x: &Tensor) -> Result<()> {
        let [h, w] = self.cfg.input_size;
        if x.c() != 3 || x.h() != h || x.w() != w {
            return Err(Error::shape([x.n(), 3, h, w], x.shape()));
        }
        Ok(())
    }

    fn conv(&self, g: &mut Graph, b: &Bound, x: Var, name: &str, stride: usize, groups: usize) -> Result<Var> {
        let w = b.var(&self.params, &format!("{name}.w"));
        let k = self.params.get(&format!("{name}.w")).expect("exists").h();
        let bias = self
            .params
            .position(&format!("{name}.b"))
            .map(|_| b.var(&self.params, &format!("{name}.b")));
        g.conv2d(x, w, bias, stride, k / 2, groups)
    }

    fn conv_relu(&self, g: &mut Graph, b: &Bound, x: Var, name: &str, stride: usize) -> Result<Var> {
        let y = self.conv(g, b, x, name, stride, 1)?;
        Ok(g.relu(y))
    }

    /// Frozen batch norm (running statistics) followed by optional SiLU.
    fn bn(&self, g: &mut Graph, b: &Bound, x: Var, name: &str, act: bool) -> Result<Var> {
        let gamma = b.var(&self.params, &format!("{name}.gamma"));
        let beta = b.var(&self.params, &format!("{name}.beta"));
        let rm = self.params.get(&format!("{name}.running_mean")).expect("exists").data();
        let rv = self.params.get(&format!("{name}.running_var")).expect("exists").data();
        let (y, _) = g.batch_norm(x, gamma, beta, Some((rm, rv)))?;
        Ok(if act { g.silu(y) } else { y })
    }

    fn mbconv(&self, g: &mut Graph, b: &Bound, x: Var, name: &str, blk: &MbConv) -> Result<Var> {
        let mid = blk.cin * blk.expand;
        let mut h = x;
        if blk.expand != 1 {
            h = self.conv(g, b, h, &format!("{name}.expand"), 1, 1)?;
            h = self.bn(g, b, h, &format!("{name}.expand_bn"), true)?;
        }
        h = self.conv(g, b, h, &format!("{name}.dw"), blk.stride, mid)?;
        h = self.bn(g, b, h, &format!("{name}.dw_bn"), true)?;
        let s = g.global_avg_pool(h);
        let s = self.conv(g, b, s, &format!("{name}.se_reduce"), 1, 1)?;
        let s = g.silu(s);
        let s = self.conv(g, b, s, &format!("{name}.se_expand"), 1, 1)?;
        let s = g.sigmoid(s);
        h = g.scale_channels(h, s)?;
        h = self.conv(g, b, h, &format!("{name}.project"), 1, 1)?;
        h = self.bn(g, b, h, &format!("{name}.project_bn"), false)?;
        if blk.stride == 1 && blk.cin == blk.cout {
            h = g.add(h, x)?;
        }
        Ok(h)
    }

    /// Encodes a batch of images already on the graph.
    pub fn encode_vars(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<PyramidVars> {
        self.check_images(g.value(x))?;
        let mut levels = Vec::with_capacity(self.cfg.depth);
        match self.cfg.encoder_kind {
            EncoderKind::ToyConv => {
                let mut h = x;
                for l in 0..self.cfg.depth {
                    let stride = if l == 0 { 1 } else { 2 };
                    h = self.conv_relu(g, b, h, &format!("enc{l}.conv0"), stride)?;
                    h = self.conv_relu(g, b, h, &format!("enc{l}.conv1"), 1)?;
                    levels.push(h);
                }
            }
            EncoderKind::LargeBackbone => {
                let mut h = self.conv(g, b, x, "enc0.conv0", 1, 1)?;
                h = self.bn(g, b, h, "enc0.bn0", true)?;
                levels.push(h);
                h = self.conv(g, b, h, "enc1.stem", 2, 1)?;
                h = self.bn(g, b, h, "enc1.stem_bn", true)?;
                for (s, stage) in large_backbone_blocks().iter().enumerate() {
                    for (i, blk) in stage.iter().enumerate() {
                        h = self.mbconv(g, b, h, &format!("enc{}.mb{i}", s + 1), blk)?;
                    }
                    levels.push(h);
                }
            }
        }
        let last = *levels.last().expect("depth >= 2");
        let bottleneck = if self.params.position("bottleneck.proj.w").is_some() {
            self.conv(g, b, last, "bottleneck.proj", 1, 1)?
        } else {
            last
        };
        Ok(PyramidVars { levels, bottleneck })
    }

    /// Prototype of a support batch as a single-item map. An empty support
    /// set yields an all-zero prototype.
    pub fn prototype_vars(&self, g: &mut Graph, b: &Bound, support: Option<Var>) -> Result<Var> {
        match support {
            Some(s) if g.value(s).n() > 0 => {
                let pyr = self.encode_vars(g, b, s)?;
                g.sum_batch(pyr.bottleneck, self.cfg.prototype == PrototypeMode::Mean)
            }
            _ => {
                let [h, w] = self.cfg.bottleneck_size();
                Ok(g.constant(Tensor::zeros([1, self.cfg.bottleneck_channels, h, w])))
            }
        }
    }

    /// Decoder from a relation tensor and the query pyramid; returns
    /// probabilities of shape `N x 1 x H x W`.
    pub fn decode_vars(&self, g: &mut Graph, b: &Bound, rel: Var, pyr: &PyramidVars) -> Result<Var> {
        let top = self.cfg.depth - 1;
        let mut h = self.conv_relu(g, b, rel, &format!("dec{top}.conv0"), 1)?;
        h = self.conv_relu(g, b, h, &format!("dec{top}.conv1"), 1)?;
        for l in (0..top).rev() {
            h = g.upsample2x(h);
            h = self.conv_relu(g, b, h, &format!("dec{l}.up"), 1)?;
            h = g.concat_channels(h, pyr.levels[l])?;
            h = self.conv_relu(g, b, h, &format!("dec{l}.conv0"), 1)?;
            h = self.conv_relu(g, b, h, &format!("dec{l}.conv1"), 1)?;
        }
        let logits = self.conv(g, b, h, "head", 1, 1)?;
        Ok(g.sigmoid(logits))
    }

    /// Query predictions given a precomputed single-item prototype.
    pub fn predict_vars(&self, g: &mut Graph, b: &Bound, query: Var, prototype: Var) -> Result<Var> {
        let pyr = self.encode_vars(g, b, query)?;
        let n = g.value(query).n();
        let cond = match self.cfg.relation {
            RelationMode::Prototype => {
                if g.value(prototype).shape() != [1, self.cfg.bottleneck_channels, g.value(pyr.bottleneck).h(), g.value(pyr.bottleneck).w()] {
                    return Err(Error::shape(g.value(pyr.bottleneck).item(0).shape(), g.value(prototype).shape()));
                }
                g.repeat_batch(prototype, n)?
            }
            RelationMode::Ablated => pyr.bottleneck,
        };
        let rel = g.concat_channels(pyr.bottleneck, cond)?;
        self.decode_vars(g, b, rel, &pyr)
    }

    /// Full forward pass: encodes the support set only when the relation
    /// module is active.
    pub fn forward_vars(&self, g: &mut Graph, b: &Bound, query: Var, support: Option<Var>) -> Result<Var> {
        let proto = match self.cfg.relation {
            RelationMode::Prototype => self.prototype_vars(g, b, support)?,
            RelationMode::Ablated => self.prototype_vars(g, b, None)?,
        };
        self.predict_vars(g, b, query, proto)
    }

    pub fn encode(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let x = g.constant(images.clone());
        let pyr = self.encode_vars(&mut g, &b, x)?;
        Ok(FeaturePyramid {
            levels: pyr.levels.iter().map(|v| g.value(*v).clone()).collect(),
            bottleneck: g.value(pyr.bottleneck).clone(),
        })
    }

    /// Prototype from a `K x 3 x H x W` support batch.
    pub fn prototype(&self, support: &Tensor) -> Result<Tensor> {
        if support.n() == 0 {
            return Err(Error::EmptySupport);
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let s = g.constant(support.clone());
        let p = self.prototype_vars(&mut g, &b, Some(s))?;
        Ok(g.value(p).clone())
    }

    pub fn decode(&self, rel: &Tensor, pyramid: &FeaturePyramid) -> Result<Tensor> {
        let expected = [
            pyramid.bottleneck.n(),
            2 * self.cfg.bottleneck_channels,
            pyramid.bottleneck.h(),
            pyramid.bottleneck.w(),
        ];
        if rel.shape() != expected {
            return Err(Error::shape(expected, rel.shape()));
        }
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let r = g.constant(rel.clone());
        let pyr = PyramidVars {
            levels: pyramid.levels.iter().map(|t| g.constant(t.clone())).collect(),
            bottleneck: g.constant(pyramid.bottleneck.clone()),
        };
        let y = self.decode_vars(&mut g, &b, r, &pyr)?;
        Ok(g.value(y).clone())
    }

    pub fn predict_with_prototype(&self, query: &Tensor, prototype: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let q = g.constant(query.clone());
        let p = g.constant(prototype.clone());
        let y = self.predict_vars(&mut g, &b, q, p)?;
        Ok(g.into_value(y))
    }

    /// Probabilities for a query batch conditioned on a support batch
    /// (which may hold zero items).
    pub fn forward(&self, query: &Tensor, support: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let q = g.constant(query.clone());
        let s = g.constant(support.clone());
        let y = self.forward_vars(&mut g, &b, q, Some(s))?;
        Ok(g.into_value(y))
    }
}

fn init_mbconv(p: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, blk: &MbConv) {
    let mid = blk.cin * blk.expand;
    if blk.expand != 1 {
        p.init_conv(rng, &format!("{name}.expand"), blk.cin, mid, 1, false);
        p.init_bn(&format!("{name}.expand_bn"), mid, ParamKind::Learnable);
    }
    p.init_conv(rng, &format!("{name}.dw"), 1, mid, blk.kernel, false);
    p.init_bn(&format!("{name}.dw_bn"), mid, ParamKind::Learnable);
    let se = (blk.cin / 4).max(1);
    p.init_conv(rng, &format!("{name}.se_reduce"), mid, se, 1, true);
    p.init_conv(rng, &format!("{name}.se_expand"), se, mid, 1, true);
    p.init_conv(rng, &format!("{name}.project"), mid, blk.cout, 1, false);
    p.init_bn(&format!("{name}.project_bn"), blk.cout, ParamKind::Learnable);
}

/// Learnable scalar count and FLOPs (twice the multiply-accumulates) of one
/// query forward pass at the configured input size. Support encoding is
/// not included; the prototype is taken as given.
pub fn count_params_flops(cfg: &NetworkConfig) -> Result<(usize, u64)> {
    let net = SegmentationNet::new(cfg.clone(), 0)?;
    let [h, w] = cfg.input_size;
    let mut g = Graph::new();
    let b = net.params.bind(&mut g, false);
    let q = g.constant(Tensor::zeros([1, 3, h, w]));
    let p = net.prototype_vars(&mut g, &b, None)?;
    let before = g.macs();
    net.predict_vars(&mut g, &b, q, p)?;
    Ok((net.params.num_learnable(), 2 * (g.macs() - before)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub leaky_slope: f32,
    pub dropout_rate: f32,
    /// Momentum for the running batch-norm statistics.
    pub bn_momentum: f32,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 128],
            leaky_slope: 0.2,
            dropout_rate: 0.25,
            bn_momentum: 0.1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidConfig("discriminator needs positive channel counts".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::InvalidConfig("bn_momentum must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// How the discriminator runs on a graph.
pub enum DiscMode<'a> {
    /// Running statistics, no dropout.
    Eval,
    /// Batch statistics and dropout drawn from `rng`.
    Train { rng: &'a mut ChaCha8Rng },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    params: ParamStore,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut cin = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            p.init_conv(&mut rng, &format!("disc{i}.conv"), cin, c, 4, i == 0);
            if i > 0 {
                p.init_bn(&format!("disc{i}.bn"), c, ParamKind::Learnable);
            }
            cin = c;
        }
        p.init_conv(&mut rng, "disc.fc", cin, 1, 1, true);
        Ok(Self { cfg, params: p })
    }

    pub fn from_params(cfg: DiscriminatorConfig, params: ParamStore) -> Result<Self> {
        let mut d = Self::new(cfg, 0)?;
        d.params.load_from(&params)?;
        Ok(d)
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Scores (`N x 1 x 1 x 1`) for a batch of masks (`N x 1 x H x W`).
    /// In training mode the batch statistics of each normalised layer are
    /// returned so the caller can decide whether to fold them in.
    pub fn forward_vars(
        &self,
        g: &mut Graph,
        b: &Bound,
        masks: Var,
        mut mode: DiscMode<'_>,
    ) -> Result<(Var, Vec<(String, BatchStats)>)> {
        let [n, c, h, w] = g.value(masks).shape();
        let step = 1 << self.cfg.channels.len();
        if n == 0 || c != 1 || h % step != 0 || w % step != 0 {
            return Err(Error::shape(format!("[N>0, 1, multiple of {step}, multiple of {step}]"), [n, c, h, w]));
        }
        let p = &self.params;
        let mut stats = Vec::new();
        let mut x = masks;
        for i in 0..self.cfg.channels.len() {
            let wv = b.var(p, &format!("disc{i}.conv.w"));
            let bias = (i == 0).then(|| b.var(p, &format!("disc{i}.conv.b")));
            x = g.conv2d(x, wv, bias, 2, 1, 1)?;
            if i > 0 {
                let name = format!("disc{i}.bn");
                let gamma = b.var(p, &format!("{name}.gamma"));
                let beta = b.var(p, &format!("{name}.beta"));
                let (y, s) = match mode {
                    DiscMode::Eval => {
                        let rm = p.get(&format!("{name}.running_mean")).expect("exists").data();
                        let rv = p.get(&format!("{name}.running_var")).expect("exists").data();
                        g.batch_norm(x, gamma, beta, Some((rm, rv)))?
                    }
                    DiscMode::Train { .. } => g.batch_norm(x, gamma, beta, None)?,
                };
                if let Some(s) = s {
                    stats.push((name, s));
                }
                x = y;
            }
            x = g.leaky_relu(x, self.cfg.leaky_slope);
            if let DiscMode::Train { rng } = &mut mode {
                let keep = 1.0 - self.cfg.dropout_rate;
                let mask = (0..g.value(x).numel())
                    .map(|_| if rng.gen::<f32>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                x = g.dropout(x, mask)?;
            }
        }
        let pooled = g.global_avg_pool(x);
        let fc_w = b.var(p, "disc.fc.w");
        let fc_b = b.var(p, "disc.fc.b");
        let logits = g.linear(pooled, fc_w, fc_b)?;
        Ok((g.sigmoid(logits), stats))
    }

    /// Folds batch statistics into the running buffers. The running
    /// variance uses the unbiased estimate.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats)], count: usize) {
        let mom = self.cfg.bn_momentum;
        let unbias = if count > 1 { count as f32 / (count - 1) as f32 } else { 1.0 };
        for (name, s) in stats {
            if let Some(rm) = self.params.get_mut(&format!("{name}.running_mean")) {
                for (r, m) in rm.data_mut().iter_mut().zip(&s.mean) {
                    *r = (1.0 - mom) * *r + mom * m;
                }
            }
            if let Some(rv) = self.params.get_mut(&format!("{name}.running_var")) {
                for (r, v) in rv.data_mut().iter_mut().zip(&s.var) {
                    *r = (1.0 - mom) * *r + mom * v * unbias;
                }
            }
        }
    }

    /// Evaluation-mode scores in (0, 1), one per mask.
    pub fn discriminate(&self, masks: &Tensor) -> Result<Vec<f32>> {
        let mut g = Graph::new();
        let b = self.params.bind(&mut g, false);
        let m = g.constant(masks.clone());
        let (s, _) = self.forward_vars(&mut g, &b, m, DiscMode::Eval)?;
        Ok(g.value(s).data().to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(k: usize) -> NetworkConfig {
        NetworkConfig {
            depth: 3,
            channels_per_level: vec![4, 8, 8],
            bottleneck_channels: 8,
            input_size: [16, 16],
            support_size: k,
            ..NetworkConfig::default()
        }
    }

    fn images(n: usize, seed: u64, [h, w]: [usize; 2]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * h * w).map(|_| rng.gen::<f32>()).collect();
        Tensor::from_vec([n, 3, h, w], data).unwrap()
    }

    #[test]
    fn default_pyramid_shapes() {
        let cfg = NetworkConfig::default();
        let net = SegmentationNet::new(cfg.clone(), 1).unwrap();
        let pyr = net.encode(&images(1, 0, [64, 64])).unwrap();
        assert_eq!(pyr.bottleneck.shape(), [1, 64, 8, 8]);
        for (l, t) in pyr.levels.iter().enumerate() {
            let [c, h, w] = cfg.level_shape(l);
            assert_eq!(t.shape(), [1, c, h, w]);
        }
        let again = net.encode(&images(1, 0, [64, 64])).unwrap();
        assert_eq!(pyr, again);
    }

    #[test]
    fn depth_five_at_224_has_14x14_bottleneck() {
        let cfg = NetworkConfig {
            depth: 5,
            channels_per_level: vec![2, 2, 2, 2, 4],
            bottleneck_channels: 4,
            input_size: [224, 224],
            ..NetworkConfig::default()
        };
        assert_eq!(cfg.bottleneck_size(), [14, 14]);
        let net = SegmentationNet::new(cfg, 0).unwrap();
        let pyr = net.encode(&images(1, 0, [224, 224])).unwrap();
        assert_eq!(pyr.bottleneck.shape(), [1, 4, 14, 14]);
    }

    #[test]
    fn prototype_sums_constants() {
        let maps: Vec<Tensor> = [1.0, 2.0, 3.0].iter().map(|&v| Tensor::full([1, 2, 2, 2], v)).collect();
        let p = support_prototype(&maps, PrototypeMode::Sum).unwrap();
        assert!(p.data().iter().all(|&v| v == 6.0));
        let single = support_prototype(&maps[..1], PrototypeMode::Sum).unwrap();
        assert_eq!(single, maps[0]);
        assert!(matches!(support_prototype(&[], PrototypeMode::Sum), Err(Error::EmptySupport)));
    }

    #[test]
    fn relate_orders_query_first() {
        let q = Tensor::from_vec([1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let p = Tensor::from_vec([1, 2, 1, 1], vec![3.0, 4.0]).unwrap();
        assert_eq!(relate(&q, &p).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        let z = relate(&q, &Tensor::zeros([1, 2, 1, 1])).unwrap();
        assert_eq!(&z.data()[2..], &[0.0, 0.0]);
        let big = relate(&Tensor::zeros([1, 64, 8, 8]), &Tensor::zeros([1, 64, 8, 8])).unwrap();
        assert_eq!(big.shape(), [1, 128, 8, 8]);
        assert!(relate(&q, &Tensor::zeros([1, 3, 1, 1])).is_err());
    }

    #[test]
    fn forward_output_range_and_shape() {
        let cfg = toy(3);
        let net = SegmentationNet::new(cfg, 2).unwrap();
        let y = net.forward(&images(2, 1, [16, 16]), &images(3, 2, [16, 16])).unwrap();
        assert_eq!(y.shape(), [2, 1, 16, 16]);
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn encode_decode_composition_matches_forward() {
        let net = SegmentationNet::new(toy(2), 3).unwrap();
        let q = images(1, 4, [16, 16]);
        let s = images(2, 5, [16, 16]);
        let pyr = net.encode(&q).unwrap();
        let proto = net.prototype(&s).unwrap();
        let rel = relate(&pyr.bottleneck, &proto).unwrap();
        let a = net.decode(&rel, &pyr).unwrap();
        assert_eq!(a, net.forward(&q, &s).unwrap());
        assert_eq!(a, net.predict_with_prototype(&q, &proto).unwrap());
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let net = SegmentationNet::new(toy(1), 0).unwrap();
        assert!(matches!(
            net.encode(&images(1, 0, [8, 8])),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy(1);
        cfg.input_size = [18, 16];
        assert!(cfg.validate().is_err());
        let mut cfg = toy(1);
        cfg.channels_per_level.pop();
        assert!(cfg.validate().is_err());
        assert!(NetworkConfig::large_backbone().validate().is_ok());
    }

    #[test]
    fn bottleneck_projection_when_widths_differ() {
        let mut cfg = toy(1);
        cfg.bottleneck_channels = 6;
        let net = SegmentationNet::new(cfg, 0).unwrap();
        let pyr = net.encode(&images(1, 0, [16, 16])).unwrap();
        assert_eq!(pyr.bottleneck.shape(), [1, 6, 4, 4]);
    }

    #[test]
    fn discriminator_scores_in_open_interval() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let data = (0..3 * 32 * 32).map(|_| rng.gen::<f32>()).collect();
        let masks = Tensor::from_vec([3, 1, 32, 32], data).unwrap();
        let s = d.discriminate(&masks).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(s, d.discriminate(&masks).unwrap());
        assert!(d.discriminate(&Tensor::zeros([1, 1, 30, 30])).is_err());
    }

    #[test]
    fn discriminator_layout() {
        let d = Discriminator::new(DiscriminatorConfig::default(), 0).unwrap();
        assert!(d.params().get("disc0.bn.gamma").is_none());
        for i in 1..4 {
            assert!(d.params().get(&format!("disc{i}.bn.gamma")).is_some());
        }
    }

    #[test]
    fn closed_form_counts() {
        let cfg = toy(1);
        let (params, flops) = count_params_flops(&cfg).unwrap();
        let net = SegmentationNet::new(cfg, 0).unwrap();
        assert_eq!(params, net.params().num_learnable());
        // enc0.conv0 alone: 3*3*3*4 MACs per output pixel.
        assert!(flops > 2 * 108 * 256);
    }
}
