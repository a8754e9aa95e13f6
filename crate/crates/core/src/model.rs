//! The hybrid parsing network: a convolutional trunk with a top-down merge,
//! a component box head, one mask head per inner component (fed through
//! padded RoI align) and a full-frame head for skin, hair and background.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{load_checkpoint, save_checkpoint, Bound, Element, Graph, ParamId, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{estimate_similarity, Landmarks5, Point2};
use crate::labels::{self, BACKGROUND, HAIR, NUM_CLASSES, PALETTE, SKIN};
use crate::raster::{Image, LabelMap};
use crate::sampler::{bilinear_sample_into, pad_box, BBox, BorderPolicy, Focus, FocusMode};

/// Canvas labels of the outer head's channels, in channel order.
pub const OUTER_LABELS: [u8; 3] = [SKIN, HAIR, BACKGROUND];

/// An inner facial component with its own box and mask head.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub name: String,
    /// Palette labels predicted by the head, in channel order. The head
    /// has one extra trailing channel for local background.
    pub labels: Vec<u8>,
    pub pad_frac: f64,
}

impl Component {
    pub fn new(name: &str, labels: &[u8], pad_frac: f64) -> Self {
        Self {
            name: name.to_string(),
            labels: labels.to_vec(),
            pad_frac,
        }
    }

    pub fn channels(&self) -> usize {
        self.labels.len() + 1
    }

    pub fn background_channel(&self) -> usize {
        self.labels.len()
    }

    /// Head channel for a palette label; foreign labels map to background.
    pub fn channel_of(&self, label: u8) -> usize {
        self.labels
            .iter()
            .position(|&l| l == label)
            .unwrap_or(self.labels.len())
    }
}

/// Ordered inner components.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentSet {
    components: Vec<Component>,
}

impl ComponentSet {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let mut seen = [false; NUM_CLASSES];
        for c in &components {
            if c.name.is_empty() || c.name.contains(|ch: char| ch == ':' || ch == ';' || ch == ',' || ch.is_whitespace()) {
                return Err(Error::InvalidConfig(format!("bad component name `{}`", c.name)));
            }
            if c.labels.is_empty() {
                return Err(Error::InvalidConfig(format!("component `{}` has no labels", c.name)));
            }
            if c.pad_frac != 0.05 && c.pad_frac != 0.10 {
                return Err(Error::InvalidConfig(format!(
                    "component `{}`: padding fraction {} is not 0.05 or 0.10",
                    c.name, c.pad_frac
                )));
            }
            for &l in &c.labels {
                if !labels::is_inner(l) {
                    return Err(Error::InvalidConfig(format!("label {l} is not an inner component label")));
                }
                if std::mem::replace(&mut seen[l as usize], true) {
                    return Err(Error::InvalidConfig(format!("label {l} assigned to two components")));
                }
            }
        }
        let mut names: Vec<&str> = components.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate component names".into()));
        }
        Ok(Self { components })
    }

    /// Brows, eyes, nose and a three-part mouth.
    pub fn standard() -> Self {
        use crate::labels::*;
        Self::new(vec![
            Component::new("left_brow", &[LEFT_BROW], 0.05),
            Component::new("right_brow", &[RIGHT_BROW], 0.05),
            Component::new("left_eye", &[LEFT_EYE], 0.05),
            Component::new("right_eye", &[RIGHT_EYE], 0.05),
            Component::new("nose", &[NOSE], 0.05),
            Component::new("mouth", &[UPPER_LIP, INNER_MOUTH, LOWER_LIP], 0.10),
        ])
        .expect("standard components are valid")
    }

    pub fn empty() -> Self {
        Self { components: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Component> {
        self.components.iter()
    }

    pub fn as_slice(&self) -> &[Component] {
        &self.components
    }

    /// Whether every inner palette label belongs to some component.
    pub fn covers_all_inner(&self) -> bool {
        labels::INNER_LABELS
            .iter()
            .all(|l| self.components.iter().any(|c| c.labels.contains(l)))
    }

    fn to_value(&self) -> String {
        self.components
            .iter()
            .map(|c| {
                let ls: Vec<String> = c.labels.iter().map(u8::to_string).collect();
                format!("{}:{}:{:.2}", c.name, ls.join(","), c.pad_frac)
            })
            .collect::<Vec<_>>()
            .join(";")
    }

    fn parse_value(v: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("cannot parse components `{v}`"));
        let mut out = Vec::new();
        for item in v.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let mut parts = item.split(':');
            let (Some(name), Some(ls), Some(pad), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(bad());
            };
            let labels = ls
                .split(',')
                .map(|s| s.trim().parse::<u8>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            let pad_frac = pad.trim().parse::<f64>().map_err(|_| bad())?;
            out.push(Component {
                name: name.trim().to_string(),
                labels,
                pad_frac,
            });
        }
        Self::new(out)
    }
}

/// Network hyper-parameters. Serialized as `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub warped_size: usize,
    /// Stride of the box-head features.
    pub stride_r: usize,
    /// Stride of the mask features.
    pub stride_m: usize,
    /// Trunk width up to the mask-feature level.
    pub trunk_narrow: usize,
    /// Trunk width beyond it.
    pub trunk_wide: usize,
    /// Width of the lateral projections and of the mask features.
    pub fpn_channels: usize,
    pub box_channels: usize,
    /// Width of the 1×1 expansion in front of the box head's pooling.
    pub box_pool_channels: usize,
    pub head_channels: usize,
    /// Side of the RoI-aligned patch.
    pub roi_out: usize,
    /// Side of the inner mask logits, `4 × roi_out`.
    pub mask_size: usize,
    /// Grow predicted boxes by their component's fraction before RoI align.
    pub pad_boxes: bool,
    pub mode: FocusMode,
    pub init_seed: u64,
    pub components: ComponentSet,
    pub palette: [[u8; 3]; NUM_CLASSES],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            warped_size: 128,
            stride_r: 16,
            stride_m: 4,
            trunk_narrow: 32,
            trunk_wide: 64,
            fpn_channels: 32,
            box_channels: 64,
            box_pool_channels: 256,
            head_channels: 16,
            roi_out: 8,
            mask_size: 32,
            pad_boxes: true,
            mode: FocusMode::Warp,
            init_seed: 1,
            components: ComponentSet::standard(),
            palette: PALETTE,
        }
    }
}

fn log2_exact(v: usize, what: &str) -> Result<usize> {
    if v < 2 || !v.is_power_of_two() {
        return Err(Error::InvalidConfig(format!("{what} must be a power of two ≥ 2, got {v}")));
    }
    Ok(v.trailing_zeros() as usize)
}

impl ModelConfig {
    /// Full-size variant: 512 input, 32-pixel RoI patches, 128 masks.
    pub fn full_scale() -> Self {
        Self {
            warped_size: 512,
            roi_out: 32,
            mask_size: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = log2_exact(self.stride_r, "stride_r")?;
        let lm = log2_exact(self.stride_m, "stride_m")?;
        if lm >= lr {
            return Err(Error::InvalidConfig("stride_m must be smaller than stride_r".into()));
        }
        if self.warped_size % self.stride_r != 0 || self.warped_size % self.stride_m != 0 {
            return Err(Error::InvalidConfig(format!(
                "warped_size {} is not divisible by both strides",
                self.warped_size
            )));
        }
        if self.components.is_empty() {
            return Err(Error::InvalidConfig("the network needs at least one inner component".into()));
        }
        if self.roi_out == 0 || self.mask_size != 4 * self.roi_out {
            return Err(Error::InvalidConfig(format!(
                "mask_size {} must be four times roi_out {}",
                self.mask_size, self.roi_out
            )));
        }
        for (v, name) in [
            (self.trunk_narrow, "trunk_narrow"),
            (self.trunk_wide, "trunk_wide"),
            (self.fpn_channels, "fpn_channels"),
            (self.box_channels, "box_channels"),
            (self.box_pool_channels, "box_pool_channels"),
            (self.head_channels, "head_channels"),
        ] {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    /// Side of the box-head features.
    pub fn s_r_side(&self) -> usize {
        self.warped_size / self.stride_r
    }

    /// Side of the mask features.
    pub fn s_m_side(&self) -> usize {
        self.warped_size / self.stride_m
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let palette: Vec<String> = self
            .palette
            .iter()
            .map(|c| format!("{:02x}{:02x}{:02x}", c[0], c[1], c[2]))
            .collect();
        let _ = writeln!(s, "warped_size={}", self.warped_size);
        let _ = writeln!(s, "stride_r={}", self.stride_r);
        let _ = writeln!(s, "stride_m={}", self.stride_m);
        let _ = writeln!(s, "trunk_narrow={}", self.trunk_narrow);
        let _ = writeln!(s, "trunk_wide={}", self.trunk_wide);
        let _ = writeln!(s, "fpn_channels={}", self.fpn_channels);
        let _ = writeln!(s, "box_channels={}", self.box_channels);
        let _ = writeln!(s, "box_pool_channels={}", self.box_pool_channels);
        let _ = writeln!(s, "head_channels={}", self.head_channels);
        let _ = writeln!(s, "roi_out={}", self.roi_out);
        let _ = writeln!(s, "mask_size={}", self.mask_size);
        let _ = writeln!(s, "pad_boxes={}", self.pad_boxes);
        let _ = writeln!(s, "mode={}", self.mode);
        let _ = writeln!(s, "init_seed={}", self.init_seed);
        let _ = writeln!(s, "components={}", self.components.to_value());
        let _ = writeln!(s, "palette={}", palette.join(","));
        s
    }

    /// Parses `key=value` lines on top of the defaults. Blank lines and
    /// `#` comments are skipped; unknown keys are rejected.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (key, value) in kv_pairs(text)? {
            let num = || {
                value
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidConfig(format!("{key}: `{value}` is not a count")))
            };
            match key {
                "warped_size" => c.warped_size = num()?,
                "stride_r" => c.stride_r = num()?,
                "stride_m" => c.stride_m = num()?,
                "trunk_narrow" => c.trunk_narrow = num()?,
                "trunk_wide" => c.trunk_wide = num()?,
                "fpn_channels" => c.fpn_channels = num()?,
                "box_channels" => c.box_channels = num()?,
                "box_pool_channels" => c.box_pool_channels = num()?,
                "head_channels" => c.head_channels = num()?,
                "roi_out" => c.roi_out = num()?,
                "mask_size" => c.mask_size = num()?,
                "pad_boxes" => c.pad_boxes = parse_bool(key, value)?,
                "mode" => c.mode = value.parse()?,
                "init_seed" => {
                    c.init_seed = value
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("init_seed: `{value}`")))?
                }
                "components" => c.components = ComponentSet::parse_value(value)?,
                "palette" => c.palette = parse_palette(value)?,
                other => return Err(Error::InvalidConfig(format!("unknown model key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Splits `key=value` text into trimmed pairs.
pub(crate) fn kv_pairs(text: &str) -> Result<Vec<(&str, &str)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::InvalidConfig(format!("line {}: expected key=value", n + 1)));
        };
        out.push((k.trim(), v.trim()));
    }
    Ok(out)
}

pub(crate) fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("{key}: `{v}` is not a boolean"))),
    }
}

fn parse_palette(v: &str) -> Result<[[u8; 3]; NUM_CLASSES]> {
    let bad = || Error::InvalidConfig(format!("palette needs {NUM_CLASSES} rrggbb colors, got `{v}`"));
    let items: Vec<&str> = v.split(',').map(str::trim).collect();
    if items.len() != NUM_CLASSES {
        return Err(bad());
    }
    let mut out = [[0u8; 3]; NUM_CLASSES];
    for (slot, item) in out.iter_mut().zip(items) {
        if item.len() != 6 {
            return Err(bad());
        }
        for (k, byte) in slot.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&item[2 * k..2 * k + 2], 16).map_err(|_| bad())?;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Head {
    /// One 3×3 conv per upsampling stage.
    stages: Vec<Conv>,
    out: Conv,
}

#[derive(Debug, Clone)]
struct Layout {
    /// Convs per trunk level; each level starts with a stride-2 conv.
    trunk: Vec<Vec<Conv>>,
    /// Lateral 1×1 projections for levels `m_level..=r_level`.
    laterals: Vec<Conv>,
    smooth: Conv,
    box_convs: Vec<Conv>,
    box_fc_w: ParamId,
    box_fc_b: ParamId,
    inner: Vec<Head>,
    outer: Head,
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Trunk,
    TopDown,
    BoxHead,
    InnerHead(usize),
    OuterHead,
}

/// How much of the network a forward pass evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Trunk and box head only.
    Boxes,
    /// Everything.
    Full,
}

/// Graph nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub s_r: Var,
    pub s_m: Option<Var>,
    /// `[B, 4N]` ordered box coordinates in `(0, 1)`.
    pub boxes: Var,
    /// Boxes fed to RoI align, `[component][sample]`.
    pub rois: Vec<Vec<BBox>>,
    /// Mask logits per component, `[B, K, mask, mask]`.
    pub inner: Vec<Var>,
    /// `[B, 3, H, W]` logits of skin, hair and background.
    pub outer: Option<Var>,
}

/// Result of parsing one focused view.
#[derive(Debug, Clone)]
pub struct ParseOutput {
    /// Predicted boxes, one per component, before padding.
    pub boxes: Vec<BBox>,
    /// Boxes the mask heads were evaluated in.
    pub rois: Vec<BBox>,
    /// Per-component mask probabilities at `mask × mask`.
    pub inner: Vec<Image>,
    /// Skin/hair/background probabilities at view resolution.
    pub outer: Image,
    /// Assembled 11-channel scores at view resolution.
    pub global: Image,
}

/// A face parsed back in its source image.
#[derive(Debug, Clone)]
pub struct FaceParse {
    pub output: ParseOutput,
    pub focus: Focus,
    /// 11-channel scores on the source grid.
    pub source_scores: Image,
    pub labels: LabelMap,
}

/// The view a face is parsed in.
pub fn focus_for(image_size: (usize, usize), landmarks: &Landmarks5, mode: FocusMode, view_side: usize) -> Result<Focus> {
    let t = estimate_similarity(landmarks)?;
    Focus::new(mode, t, image_size, (view_side, view_side))
}

/// One-hot background, used for source pixels a view cannot see.
pub fn background_fill() -> Vec<f32> {
    let mut v = vec![0.0; NUM_CLASSES];
    v[BACKGROUND as usize] = 1.0;
    v
}

struct Ctx<'a, T> {
    g: &'a mut Graph<T>,
    bound: &'a mut Bound,
    params: &'a ParamSet<T>,
}

impl<T: Element> Ctx<'_, T> {
    fn p(&mut self, id: ParamId) -> Var {
        self.bound.var(self.g, self.params, id)
    }

    fn conv(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let w = self.p(c.w);
        let b = self.p(c.b);
        self.g.conv2d(x, w, Some(b), c.stride, c.pad)
    }

    fn conv_relu(&mut self, c: &Conv, x: Var) -> Result<Var> {
        let y = self.conv(c, x)?;
        Ok(self.g.relu(y))
    }

    fn head(&mut self, h: &Head, mut x: Var) -> Result<Var> {
        for c in &h.stages {
            x = self.conv_relu(c, x)?;
            x = self.g.upsample_bilinear_x2(x)?;
        }
        self.conv(&h.out, x)
    }
}

/// Network parameters together with their configuration.
#[derive(Debug, Clone)]
pub struct HybridNet<T> {
    config: ModelConfig,
    params: ParamSet<T>,
    layout: Layout,
}

struct Builder<T> {
    params: ParamSet<T>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<T> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let w: Vec<T> = (0..cout * cin * k * k)
            .map(|_| T::from_f64(normal.sample(&mut self.rng)))
            .collect();
        let w = self
            .params
            .insert(format!("{name}.w"), Tensor::new(&[cout, cin, k, k], w).expect("conv shape"))
            .expect("unique name");
        let b = self
            .params
            .insert(format!("{name}.b"), Tensor::zeros(&[cout]))
            .expect("unique name");
        Conv {
            w,
            b,
            stride,
            pad: k / 2,
        }
    }

    fn head(&mut self, name: &str, cin: usize, width: usize, stages: usize, cout: usize) -> Head {
        let mut c = cin;
        let mut convs = Vec::new();
        for s in 0..stages {
            convs.push(self.conv(&format!("{name}.c{s}"), c, width, 3, 1));
            c = width;
        }
        Head {
            stages: convs,
            out: self.conv(&format!("{name}.out"), c, cout, 1, 1),
        }
    }
}

impl<T: Element> HybridNet<T> {
    /// Freshly initialized network (He-normal weights, zero biases) seeded
    /// by `config.init_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            params: ParamSet::new(),
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let r_level = config.stride_r.trailing_zeros() as usize;
        let m_level = config.stride_m.trailing_zeros() as usize;
        let width = |level: usize| {
            if level <= m_level {
                config.trunk_narrow
            } else {
                config.trunk_wide
            }
        };

        let mut trunk = Vec::new();
        let mut cin = 3;
        for level in 1..=r_level {
            let cout = width(level);
            let mut convs = vec![b.conv(&format!("trunk.l{level}.c0"), cin, cout, 3, 2)];
            if level > m_level {
                convs.push(b.conv(&format!("trunk.l{level}.c1"), cout, cout, 3, 1));
            }
            trunk.push(convs);
            cin = cout;
        }
        let laterals = (m_level..=r_level)
            .map(|level| b.conv(&format!("fpn.lat{level}"), width(level), config.fpn_channels, 1, 1))
            .collect();
        let smooth = b.conv("fpn.smooth", config.fpn_channels, config.fpn_channels, 3, 1);

        let top = width(r_level);
        let box_convs = vec![
            b.conv("box.c0", top, config.box_channels, 3, 1),
            b.conv("box.c1", config.box_channels, config.box_channels, 3, 1),
            b.conv("box.expand", config.box_channels, config.box_pool_channels, 1, 1),
        ];
        let n_out = 4 * config.components.len();
        let fan_in = config.box_pool_channels as f64;
        let normal = Normal::new(0.0, (1.0 / fan_in).sqrt()).expect("finite std");
        let fc_w: Vec<T> = (0..n_out * config.box_pool_channels)
            .map(|_| T::from_f64(normal.sample(&mut b.rng)))
            .collect();
        let box_fc_w = b
            .params
            .insert("box.fc.w", Tensor::new(&[n_out, config.box_pool_channels], fc_w).expect("fc"))
            .expect("unique");
        let box_fc_b = b.params.insert("box.fc.b", Tensor::zeros(&[n_out])).expect("unique");

        let inner = config
            .components
            .iter()
            .map(|c| b.head(&format!("inner.{}", c.name), config.fpn_channels, config.head_channels, 2, c.channels()))
            .collect();
        let outer = b.head("outer", config.fpn_channels, config.head_channels, m_level, OUTER_LABELS.len());

        Ok(Self {
            config,
            params: b.params,
            layout: Layout {
                trunk,
                laterals,
                smooth,
                box_convs,
                box_fc_w,
                box_fc_b,
                inner,
                outer,
            },
        })
    }

    /// Network with the given configuration and parameter values; names
    /// and shapes must match what the configuration builds.
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self> {
        let mut net = Self::new(config)?;
        if params.len() != net.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint holds {} tensors, model expects {}",
                params.len(),
                net.params.len()
            )));
        }
        for id in net.params.ids().collect::<Vec<_>>() {
            let name = net.params.name(id).to_string();
            let src = params
                .by_name(&name)
                .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks `{name}`")))?;
            let dst = net.params.get_mut(id);
            if src.shape() != dst.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "`{name}`: checkpoint shape {:?}, model shape {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(net)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Switches box padding; parameters are unaffected.
    pub fn set_pad_boxes(&mut self, on: bool) {
        self.config.pad_boxes = on;
    }

    pub fn set_mode(&mut self, mode: FocusMode) {
        self.config.mode = mode;
    }

    /// Sets the box head bias so that, before the squashing, each output
    /// sits at the logit of the matching coordinate of `prior`.
    pub fn set_box_prior(&mut self, prior: &[BBox]) -> Result<()> {
        if prior.len() != self.config.components.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} prior boxes for {} components",
                prior.len(),
                self.config.components.len()
            )));
        }
        let logit = |v: f64| {
            let v = v.clamp(1e-3, 1.0 - 1e-3);
            T::from_f64((v / (1.0 - v)).ln())
        };
        let bias = self.params.get_mut(self.layout.box_fc_b).data_mut();
        for (b, chunk) in prior.iter().zip(bias.chunks_exact_mut(4)) {
            for (slot, v) in chunk.iter_mut().zip([b.x0, b.y0, b.x1, b.y1]) {
                *slot = logit(v);
            }
        }
        Ok(())
    }

    pub fn cast<U: Element>(&self) -> HybridNet<U> {
        HybridNet {
            config: self.config.clone(),
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    pub fn group_of(&self, id: ParamId) -> ParamGroup {
        let name = self.params.name(id);
        if name.starts_with("trunk.") {
            ParamGroup::Trunk
        } else if name.starts_with("fpn.") {
            ParamGroup::TopDown
        } else if name.starts_with("box.") {
            ParamGroup::BoxHead
        } else if name.starts_with("outer.") {
            ParamGroup::OuterHead
        } else {
            let rest = name.trim_start_matches("inner.");
            let comp = rest.split('.').next().unwrap_or_default();
            let idx = self
                .config
                .components
                .iter()
                .position(|c| c.name == comp)
                .expect("inner parameter names a component");
            ParamGroup::InnerHead(idx)
        }
    }

    fn ctx<'a>(&'a self, g: &'a mut Graph<T>, bound: &'a mut Bound) -> Ctx<'a, T> {
        Ctx {
            g,
            bound,
            params: &self.params,
        }
    }

    /// Fresh parameter binding for one graph.
    pub fn bind(&self) -> Bound {
        Bound::new(self.params.len())
    }

    /// Places a batch of `warped_size²` RGB views on the graph, centered
    /// around zero.
    pub fn input(&self, g: &mut Graph<T>, views: &[Image]) -> Result<Var> {
        let s = self.config.warped_size;
        let mut data = Vec::with_capacity(views.len() * 3 * s * s);
        for v in views {
            if v.height() != s || v.width() != s || v.channels() != 3 {
                return Err(Error::ShapeMismatch(format!(
                    "network input must be {s}x{s}x3, got {}x{}x{}",
                    v.height(),
                    v.width(),
                    v.channels()
                )));
            }
            data.extend(v.to_planar().into_iter().map(|x| T::from_f64(x as f64 - 0.5)));
        }
        g.constant(&[views.len(), 3, s, s], data)
    }

    /// `(s_R, s_M)`: trunk top and the top-down merged mask features.
    /// `s_M` is only built when `with_mask_features` is set.
    pub fn extract_features(&self, g: &mut Graph<T>, bound: &mut Bound, input: Var, with_mask_features: bool) -> Result<(Var, Option<Var>)> {
        let shape = g.shape(input).to_vec();
        let s = self.config.warped_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::ShapeMismatch(format!("network input {shape:?}, expected [B, 3, {s}, {s}]")));
        }
        let l = &self.layout;
        let mut cx = self.ctx(g, bound);
        let mut levels = Vec::with_capacity(l.trunk.len());
        let mut x = input;
        for convs in &l.trunk {
            for c in convs {
                x = cx.conv_relu(c, x)?;
            }
            levels.push(x);
        }
        let s_r = x;
        if !with_mask_features {
            return Ok((s_r, None));
        }
        let m_level = self.config.stride_m.trailing_zeros() as usize;
        let mut merged: Option<Var> = None;
        for (lat, &feat) in l.laterals.iter().zip(&levels[m_level - 1..]).rev() {
            let proj = cx.conv(lat, feat)?;
            merged = Some(match merged {
                None => proj,
                Some(m) => {
                    let up = cx.g.upsample_bilinear_x2(m)?;
                    cx.g.add(up, proj)?
                }
            });
        }
        let s_m = cx.conv_relu(&l.smooth, merged.expect("at least one lateral"))?;
        Ok((s_r, Some(s_m)))
    }

    /// `[B, 4N]` boxes: two convs, a 1×1 expansion, global pooling, a linear layer, logistic
    /// squashing and coordinate ordering.
    pub fn predict_components(&self, g: &mut Graph<T>, bound: &mut Bound, s_r: Var) -> Result<Var> {
        let l = &self.layout;
        let mut cx = self.ctx(g, bound);
        let mut x = s_r;
        for c in &l.box_convs {
            x = cx.conv_relu(c, x)?;
        }
        let pooled = cx.g.global_avg_pool(x)?;
        let w = cx.p(l.box_fc_w);
        let b = cx.p(l.box_fc_b);
        let raw = cx.g.fully_connected(pooled, w, Some(b))?;
        let sq = cx.g.sigmoid(raw);
        cx.g.order_boxes(sq)
    }

    /// Mask logits of component `index` for one RoI per sample.
    pub fn segment_inner(&self, g: &mut Graph<T>, bound: &mut Bound, index: usize, s_m: Var, rois: &[BBox]) -> Result<Var> {
        let patch = g.roi_align(s_m, rois, self.config.roi_out)?;
        self.ctx(g, bound).head(&self.layout.inner[index], patch)
    }

    /// Full-frame skin/hair/background logits.
    pub fn segment_outer(&self, g: &mut Graph<T>, bound: &mut Bound, s_m: Var) -> Result<Var> {
        self.ctx(g, bound).head(&self.layout.outer, s_m)
    }

    /// RoI boxes for a `[B, 4N]` box tensor, `[component][sample]`: padded
    /// when enabled and widened to at least two mask-feature cells.
    pub fn roi_boxes(&self, box_values: &[T]) -> Vec<Vec<BBox>> {
        let n = self.config.components.len();
        let batch = box_values.len() / (4 * n);
        let min_side = 2.0 / self.config.s_m_side() as f64;
        self.config
            .components
            .iter()
            .enumerate()
            .map(|(i, comp)| {
                (0..batch)
                    .map(|s| {
                        let v = &box_values[(s * n + i) * 4..(s * n + i) * 4 + 4];
                        let raw = BBox {
                            x0: v[0].as_f64(),
                            y0: v[1].as_f64(),
                            x1: v[2].as_f64(),
                            y1: v[3].as_f64(),
                        };
                        let b = if self.config.pad_boxes {
                            pad_box(raw, comp.pad_frac, self.config.warped_size)
                        } else {
                            raw.clamped()
                        };
                        widen(b, min_side)
                    })
                    .collect()
            })
            .collect()
    }

    /// Forward pass. `rois` replaces the boxes derived from the box head,
    /// which lets callers hold the RoIs fixed.
    pub fn forward(&self, g: &mut Graph<T>, bound: &mut Bound, input: Var, stage: Stage, rois: Option<&[Vec<BBox>]>) -> Result<Forward> {
        let full = stage == Stage::Full;
        let (s_r, s_m) = self.extract_features(g, bound, input, full)?;
        let boxes = self.predict_components(g, bound, s_r)?;
        let n = self.config.components.len();
        let mut fwd = Forward {
            s_r,
            s_m,
            boxes,
            rois: Vec::new(),
            inner: Vec::new(),
            outer: None,
        };
        let Some(s_m) = s_m else { return Ok(fwd) };
        fwd.rois = match rois {
            Some(r) => {
                let batch = g.shape(input)[0];
                if r.len() != n || r.iter().any(|v| v.len() != batch) {
                    return Err(Error::ShapeMismatch(format!("RoI override must be {n} x {batch}")));
                }
                r.to_vec()
            }
            None => self.roi_boxes(g.value(boxes)),
        };
        for i in 0..n {
            let logits = self.segment_inner(g, bound, i, s_m, &fwd.rois[i])?;
            fwd.inner.push(logits);
        }
        fwd.outer = Some(self.segment_outer(g, bound, s_m)?);
        Ok(fwd)
    }

    /// Runs the whole network on one focused view.
    pub fn infer_view(&self, view: &Image) -> Result<ParseOutput> {
        let mut g = Graph::new();
        let mut bound = self.bind();
        let input = self.input(&mut g, std::slice::from_ref(view))?;
        let fwd = self.forward(&mut g, &mut bound, input, Stage::Full, None)?;
        let n = self.config.components.len();
        let bv = g.value(fwd.boxes).to_vec();
        let boxes = (0..n)
            .map(|i| BBox {
                x0: bv[4 * i].as_f64(),
                y0: bv[4 * i + 1].as_f64(),
                x1: bv[4 * i + 2].as_f64(),
                y1: bv[4 * i + 3].as_f64(),
            })
            .collect();
        let mut inner = Vec::with_capacity(n);
        for &v in &fwd.inner {
            let p = g.softmax_channels(v)?;
            inner.push(planar_to_image(g.shape(p), g.value(p))?);
        }
        let outer_logits = fwd.outer.expect("full forward");
        let p = g.softmax_channels(outer_logits)?;
        let outer = planar_to_image(g.shape(p), g.value(p))?;
        let rois: Vec<BBox> = fwd.rois.iter().map(|r| r[0]).collect();
        let global = assemble_scores(&rois, &inner, &outer, &self.config.components)?;
        Ok(ParseOutput {
            boxes,
            rois,
            inner,
            outer,
            global,
        })
    }

    /// Aligns, focuses, parses and maps the scores back onto the source
    /// grid. `mode` defaults to the one the model was trained with.
    pub fn parse_face(&self, image: &Image, landmarks: &Landmarks5, mode: Option<FocusMode>) -> Result<FaceParse> {
        let mode = mode.unwrap_or(self.config.mode);
        let focus = focus_for((image.height(), image.width()), landmarks, mode, self.config.warped_size)?;
        let view = focus.warp_image(image, BorderPolicy::ZeroFill);
        let output = self.infer_view(&view)?;
        let source_scores = focus.dewarp_scores(&output.global, &background_fill())?;
        let labels = source_scores.argmax_labels();
        Ok(FaceParse {
            output,
            focus,
            source_scores,
            labels,
        })
    }
}

impl HybridNet<f32> {
    /// Writes `model.twck` and `model.cfg` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg = dir.join("model.cfg");
        std::fs::write(&cfg, self.config.to_kv()).map_err(|e| Error::io(&cfg, e))?;
        save_checkpoint(&self.params, &dir.join("model.twck"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = dir.join("model.cfg");
        let text = std::fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
        let config = ModelConfig::from_kv(&text).map_err(|e| Error::malformed(&cfg, None, e.to_string()))?;
        let ckpt = dir.join("model.twck");
        let params = load_checkpoint(&ckpt)?;
        Self::from_params(config, params).map_err(|e| Error::malformed(&ckpt, None, e.to_string()))
    }
}

/// Grows `b` about its center until both sides reach `min_side`, keeping
/// it inside the unit square.
fn widen(b: BBox, min_side: f64) -> BBox {
    let fix = |lo: f64, hi: f64| {
        if hi - lo >= min_side {
            return (lo, hi);
        }
        let c = (0.5 * (lo + hi)).clamp(0.5 * min_side, 1.0 - 0.5 * min_side);
        (c - 0.5 * min_side, c + 0.5 * min_side)
    };
    let (x0, x1) = fix(b.x0, b.x1);
    let (y0, y1) = fix(b.y0, b.y1);
    BBox { x0, y0, x1, y1 }
}

/// First sample of an NCHW node as an HWC image.
fn planar_to_image<T: Element>(shape: &[usize], data: &[T]) -> Result<Image> {
    let [_, c, h, w] = *shape else {
        return Err(Error::ShapeMismatch(format!("expected NCHW, got {shape:?}")));
    };
    let planar: Vec<f32> = data[..c * h * w].iter().map(|v| v.as_f64() as f32).collect();
    Image::from_planar(h, w, c, &planar)
}

/// Gathers head probabilities into one 11-channel canvas.
///
/// The canvas starts as the outer probabilities on the skin, hair and
/// background channels. Each component then visits the pixels whose
/// centers fall inside its RoI, samples its mask probabilities bilinearly
/// there, scales the three outer channels by its local background
/// probability and writes its foreground probabilities into its own
/// channels.
pub fn assemble_scores(rois: &[BBox], inner: &[Image], outer: &Image, components: &ComponentSet) -> Result<Image> {
    if rois.len() != components.len() || inner.len() != components.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} components, {} boxes, {} masks",
            components.len(),
            rois.len(),
            inner.len()
        )));
    }
    if outer.channels() != OUTER_LABELS.len() {
        return Err(Error::ShapeMismatch(format!("outer scores have {} channels, expected 3", outer.channels())));
    }
    let (h, w) = (outer.height(), outer.width());
    let mut canvas = Image::zeros(h, w, NUM_CLASSES);
    for i in 0..h {
        for j in 0..w {
            let src = outer.pixel(i, j);
            let dst = canvas.pixel_mut(i, j);
            for (k, &label) in OUTER_LABELS.iter().enumerate() {
                dst[label as usize] = src[k];
            }
        }
    }
    for ((comp, b), probs) in components.iter().zip(rois).zip(inner) {
        if probs.channels() != comp.channels() {
            return Err(Error::ShapeMismatch(format!(
                "component `{}` mask has {} channels, expected {}",
                comp.name,
                probs.channels(),
                comp.channels()
            )));
        }
        let (mh, mw) = (probs.height() as f64, probs.width() as f64);
        let mut local = vec![0.0; comp.channels()];
        let bg = comp.background_channel();
        for i in 0..h {
            let v = (i as f64 + 0.5) / h as f64;
            if v < b.y0 || v > b.y1 {
                continue;
            }
            for j in 0..w {
                let u = (j as f64 + 0.5) / w as f64;
                if u < b.x0 || u > b.x1 {
                    continue;
                }
                let p = Point2::new((u - b.x0) / b.width() * mw, (v - b.y0) / b.height() * mh);
                bilinear_sample_into(probs, p, BorderPolicy::ReplicateEdge, &mut local);
                let dst = canvas.pixel_mut(i, j);
                for &label in &OUTER_LABELS {
                    dst[label as usize] *= local[bg];
                }
                for (k, &label) in comp.labels.iter().enumerate() {
                    dst[label as usize] = local[k];
                }
            }
        }
    }
    Ok(canvas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::labels::*;
    use rand::Rng;

    #[test]
    fn config_round_trip_and_validation() {
        let c = ModelConfig::default();
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
        let mut bad = c.clone();
        bad.warped_size = 120;
        assert!(bad.validate().is_err());
        assert!(ModelConfig::from_kv("colour=blue").is_err());
        assert!(ModelConfig::from_kv("components=eye:4:0.2").is_err());
        let odd = ModelConfig::from_kv("pad_boxes=false\nmode=crop\n# note\n").unwrap();
        assert!(!odd.pad_boxes);
        assert_eq!(odd.mode, FocusMode::Crop);
    }

    #[test]
    fn standard_components_cover_palette() {
        let set = ComponentSet::standard();
        assert_eq!(set.len(), 6);
        assert!(set.covers_all_inner());
        let mouth = &set.as_slice()[5];
        assert_eq!(mouth.channels(), 4);
        assert_eq!(mouth.pad_frac, 0.10);
        assert_eq!(mouth.channel_of(INNER_MOUTH), 1);
        assert_eq!(mouth.channel_of(SKIN), 3);
        assert!(set.iter().take(5).all(|c| c.channels() == 2 && c.pad_frac == 0.05));
        // inner labels once each, plus skin, hair and background from the outer head
        let mut count = [0; NUM_CLASSES];
        for c in set.iter() {
            for &l in &c.labels {
                count[l as usize] += 1;
            }
        }
        for l in OUTER_LABELS {
            count[l as usize] += 1;
        }
        assert!(count.iter().all(|&c| c == 1));
        assert!(ComponentSet::new(vec![Component::new("a", &[4], 0.05), Component::new("b", &[4], 0.05)]).is_err());
    }

    fn random_view(seed: u64, side: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(side, side, 3, |_, _, _| rng.gen())
    }

    #[test]
    fn forward_shapes() {
        let net = HybridNet::<f32>::new(ModelConfig::default()).unwrap();
        let mut g = Graph::new();
        let mut bound = net.bind();
        let x = net.input(&mut g, &[random_view(1, 128), random_view(2, 128)]).unwrap();
        let f = net.forward(&mut g, &mut bound, x, Stage::Full, None).unwrap();
        assert_eq!(g.shape(f.s_r), &[2, 64, 8, 8]);
        assert_eq!(g.shape(f.s_m.unwrap()), &[2, 32, 32, 32]);
        assert_eq!(g.shape(f.boxes), &[2, 24]);
        assert!(g.value(f.boxes).iter().all(|&v| v > 0.0 && v < 1.0));
        for quad in g.value(f.boxes).chunks(4) {
            assert!(quad[0] <= quad[2] && quad[1] <= quad[3]);
        }
        assert_eq!(g.shape(f.inner[2]), &[2, 2, 32, 32]);
        assert_eq!(g.shape(f.inner[5]), &[2, 4, 32, 32]);
        assert_eq!(g.shape(f.outer.unwrap()), &[2, 3, 128, 128]);
        assert!(net.input(&mut g, &[random_view(1, 64)]).is_err());
    }

    #[test]
    fn trunk_and_head_counts() {
        let net = HybridNet::<f32>::new(ModelConfig::default()).unwrap();
        let trunk_convs = net.params().iter().filter(|(n, _)| n.starts_with("trunk.") && n.ends_with(".w")).count();
        assert_eq!(trunk_convs, 6);
        let groups: Vec<ParamGroup> = net.params().ids().map(|id| net.group_of(id)).collect();
        for i in 0..6 {
            assert!(groups.contains(&ParamGroup::InnerHead(i)));
        }
    }

    #[test]
    fn full_scale_shape_chain() {
        let c = ModelConfig::full_scale();
        c.validate().unwrap();
        assert_eq!((c.s_r_side(), c.s_m_side()), (32, 128));
        let net = HybridNet::<f32>::new(c).unwrap();
        let mut g = Graph::new();
        let mut bound = net.bind();
        let x = net.input(&mut g, &[random_view(3, 512)]).unwrap();
        let f = net.forward(&mut g, &mut bound, x, Stage::Full, None).unwrap();
        assert_eq!(g.shape(f.s_r), &[1, 64, 32, 32]);
        assert_eq!(g.shape(f.s_m.unwrap()), &[1, 32, 128, 128]);
        assert_eq!(g.shape(f.inner[0]), &[1, 2, 128, 128]);
        assert_eq!(g.shape(f.outer.unwrap()), &[1, 3, 512, 512]);
    }

    #[test]
    fn zero_input_gives_finite_outputs() {
        let net = HybridNet::<f32>::new(ModelConfig::default()).unwrap();
        let out = net.infer_view(&Image::filled(128, 128, &[0.5, 0.5, 0.5])).unwrap();
        assert!(out.global.data().iter().all(|v| v.is_finite()));
        assert_eq!(out.global.channels(), 11);
    }

    #[test]
    fn constant_features_give_constant_mask_logits() {
        let net = HybridNet::<f64>::new(ModelConfig::default()).unwrap();
        let mut g = Graph::new();
        let mut bound = net.bind();
        let s_m = g.constant(&[1, 32, 32, 32], vec![0.3; 32 * 32 * 32]).unwrap();
        let roi = [BBox::new(0.2, 0.3, 0.5, 0.45).unwrap()];
        let m = net.segment_inner(&mut g, &mut bound, 2, s_m, &roi).unwrap();
        assert_eq!(g.shape(m), &[1, 2, 32, 32]);
        // Zero padding of the head convs reaches 9 cells in from the border.
        let v = g.value(m);
        let centre = v[16 * 32 + 16];
        for i in 9..23 {
            for j in 9..23 {
                assert!((v[i * 32 + j] - centre).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn trunk_gradients_reach_every_parameter() {
        let net = HybridNet::<f32>::new(ModelConfig::default()).unwrap();
        let mut g = Graph::new();
        let mut bound = net.bind();
        let x = net.input(&mut g, &[random_view(5, 128)]).unwrap();
        let f = net.forward(&mut g, &mut bound, x, Stage::Full, None).unwrap();
        let outer = f.outer.unwrap();
        let target = vec![1u8; 128 * 128];
        let lo = g.cross_entropy_loss(outer, &target).unwrap();
        let n = g.value(f.boxes).len();
        let lb = g.l1_loss(f.boxes, &vec![0.0; n]).unwrap();
        let loss = g.add(lo, lb).unwrap();
        g.backward(loss).unwrap();
        let mut params = net.params().clone();
        bound.collect_grads(&g, &mut params);
        for id in params.ids() {
            if matches!(net.group_of(id), ParamGroup::Trunk) && params.name(id).ends_with(".w") {
                let grad = params.get(id).grad().expect("trunk gradient");
                assert!(grad.iter().any(|&v| v != 0.0), "{} has zero gradient", params.name(id));
            }
        }
    }

    #[test]
    fn independent_left_right_heads() {
        let net = HybridNet::<f32>::new(ModelConfig::default()).unwrap();
        let view = random_view(9, 128);
        let base = net.infer_view(&view).unwrap();
        let mut tweaked = net.clone();
        let id = tweaked.params().id("inner.left_eye.out.b").unwrap();
        tweaked.params_mut().get_mut(id).data_mut()[0] += 1.0;
        let out = tweaked.infer_view(&view).unwrap();
        for (i, (a, b)) in base.inner.iter().zip(&out.inner).enumerate() {
            if i == 2 {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn widen_keeps_boxes_inside() {
        let b = widen(BBox { x0: 0.99, y0: 0.2, x1: 0.99, y1: 0.4 }, 0.0625);
        assert!((b.width() - 0.0625).abs() < 1e-12 && b.x1 <= 1.0);
        assert_eq!(b.y0, 0.2);
    }

    /// Brute-force recomputation of one canvas pixel.
    pub(crate) fn oracle_pixel(rois: &[BBox], inner: &[Image], outer: &Image, comps: &ComponentSet, i: usize, j: usize) -> Vec<f64> {
        let (h, w) = (outer.height() as f64, outer.width() as f64);
        let mut px = vec![0.0f64; NUM_CLASSES];
        px[SKIN as usize] = outer.get(i, j, 0) as f64;
        px[HAIR as usize] = outer.get(i, j, 1) as f64;
        px[BACKGROUND as usize] = outer.get(i, j, 2) as f64;
        let (u, v) = ((j as f64 + 0.5) / w, (i as f64 + 0.5) / h);
        for ((c, b), m) in comps.iter().zip(rois).zip(inner) {
            if !(u >= b.x0 && u <= b.x1 && v >= b.y0 && v <= b.y1) {
                continue;
            }
            // bilinear read with clamped integer taps
            let x = (u - b.x0) / (b.x1 - b.x0) * m.width() as f64 - 0.5;
            let y = (v - b.y0) / (b.y1 - b.y0) * m.height() as f64 - 0.5;
            let (fx, fy) = (x - x.floor(), y - y.floor());
            let cl = |t: f64, n: usize| (t.max(0.0) as usize).min(n - 1);
            let read = |k: usize| {
                let (x0, x1) = (cl(x.floor(), m.width()), cl(x.floor() + 1.0, m.width()));
                let (y0, y1) = (cl(y.floor(), m.height()), cl(y.floor() + 1.0, m.height()));
                let g = |r, c| m.get(r, c, k) as f64;
                (1.0 - fy) * ((1.0 - fx) * g(y0, x0) + fx * g(y0, x1)) + fy * ((1.0 - fx) * g(y1, x0) + fx * g(y1, x1))
            };
            let bg = read(c.labels.len());
            for l in [SKIN, HAIR, BACKGROUND] {
                px[l as usize] *= bg;
            }
            for (k, &l) in c.labels.iter().enumerate() {
                px[l as usize] = read(k);
            }
        }
        px
    }

    fn random_probs(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image {
        let mut img = Image::from_fn(h, w, c, |_, _, _| rng.gen_range(0.01f32..1.0));
        for px in img.data_mut().chunks_mut(c) {
            let s: f32 = px.iter().sum();
            px.iter_mut().for_each(|v| *v /= s);
        }
        img
    }

    #[test]
    fn assembly_matches_brute_force() {
        let comps = ComponentSet::standard();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let outer = random_probs(&mut rng, 40, 40, 3);
            let mut rois = Vec::new();
            let mut inner = Vec::new();
            for c in comps.iter() {
                let x0 = rng.gen_range(0.0..0.6);
                let y0 = rng.gen_range(0.0..0.6);
                rois.push(BBox::new(x0, y0, x0 + rng.gen_range(0.1..0.4), y0 + rng.gen_range(0.1..0.4)).unwrap());
                inner.push(random_probs(&mut rng, 8, 8, c.channels()));
            }
            let canvas = assemble_scores(&rois, &inner, &outer, &comps).unwrap();
            for i in 0..40 {
                for j in 0..40 {
                    let want = oracle_pixel(&rois, &inner, &outer, &comps, i, j);
                    for (a, b) in canvas.pixel(i, j).iter().zip(&want) {
                        assert!((*a as f64 - b).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn assembly_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let outer = random_probs(&mut rng, 16, 16, 3);
        let none = assemble_scores(&[], &[], &outer, &ComponentSet::empty()).unwrap();
        let direct: Vec<u8> = outer
            .argmax_labels()
            .data()
            .iter()
            .map(|&k| OUTER_LABELS[k as usize])
            .collect();
        assert_eq!(none.argmax_labels().data(), &direct[..]);

        // A component that is certain about background leaves the canvas alone.
        let comps = ComponentSet::new(vec![Component::new("left_eye", &[LEFT_EYE], 0.05)]).unwrap();
        let all_bg = Image::filled(8, 8, &[0.0, 1.0]);
        let b = BBox::new(0.2, 0.2, 0.7, 0.6).unwrap();
        let with = assemble_scores(&[b], &[all_bg], &outer, &comps).unwrap();
        assert_eq!(with, none);
    }

    #[test]
    fn argmax_invariant_to_per_pixel_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut m = random_probs(&mut rng, 12, 12, NUM_CLASSES);
        let before = m.argmax_labels();
        for px in m.data_mut().chunks_mut(NUM_CLASSES) {
            let k: f32 = rng.gen_range(-3.0..3.0);
            px.iter_mut().for_each(|v| *v += k);
        }
        assert_eq!(m.argmax_labels(), before);
    }
}
