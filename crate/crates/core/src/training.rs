//! Losses, ground-truth extraction, augmentation, the synthetic face
//! generator and the two-stage optimization schedule.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, Element, Graph, Sgd, Var};
use crate::error::{Error, Result};
use crate::geometry::{Landmarks5, Point2};
use crate::labels::{self, BACKGROUND, HAIR, INNER_MOUTH, LEFT_BROW, LEFT_EYE, LOWER_LIP, NOSE, NUM_CLASSES, RIGHT_BROW, RIGHT_EYE, SKIN, UPPER_LIP};
use crate::model::{focus_for, kv_pairs, parse_bool, Component, ComponentSet, HybridNet, ModelConfig, ParamGroup, Stage, OUTER_LABELS};
use crate::raster::{Image, LabelMap};
use crate::sampler::{bilinear_sample_into, BBox, BorderPolicy, FocusMode};

/// One annotated face image.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub image: Image,
    pub labels: LabelMap,
    pub landmarks: Landmarks5,
}

impl TrainSample {
    pub fn new(image: Image, labels: LabelMap, landmarks: Landmarks5) -> Result<Self> {
        if (image.height(), image.width()) != (labels.height(), labels.width()) {
            return Err(Error::ShapeMismatch(format!(
                "image {}x{} vs labels {}x{}",
                image.height(),
                image.width(),
                labels.height(),
                labels.width()
            )));
        }
        if labels.max_label() as usize >= NUM_CLASSES {
            return Err(Error::ClassOutOfRange {
                class: labels.max_label() as usize,
                classes: NUM_CLASSES,
            });
        }
        Ok(Self { image, labels, landmarks })
    }
}

/// Tight normalized box around each component's labels, `None` when the
/// component has no pixels. Upper edges are exclusive.
pub fn gt_boxes_from_labels(labels: &LabelMap, components: &ComponentSet) -> Vec<Option<BBox>> {
    let (h, w) = (labels.height(), labels.width());
    components
        .iter()
        .map(|c| {
            let (mut r0, mut c0, mut r1, mut c1) = (usize::MAX, usize::MAX, 0, 0);
            for i in 0..h {
                for j in 0..w {
                    if c.labels.contains(&labels.get(i, j)) {
                        r0 = r0.min(i);
                        c0 = c0.min(j);
                        r1 = r1.max(i + 1);
                        c1 = c1.max(j + 1);
                    }
                }
            }
            (r0 != usize::MAX).then(|| BBox {
                x0: c0 as f64 / w as f64,
                y0: r0 as f64 / h as f64,
                x1: c1 as f64 / w as f64,
                y1: r1 as f64 / h as f64,
            })
        })
        .collect()
}

/// Box loss: per sample, the mean absolute coordinate error averaged over
/// the components present in that sample; then averaged over the batch.
pub fn loss_comp<T: Element>(g: &mut Graph<T>, pred: Var, gt: &[Vec<Option<BBox>>]) -> Result<Var> {
    let batch = gt.len();
    let n = gt.first().map_or(0, Vec::len);
    if g.shape(pred) != [batch, 4 * n] {
        return Err(Error::ShapeMismatch(format!(
            "box predictions {:?} for {batch} samples of {n} components",
            g.shape(pred)
        )));
    }
    let mut target = vec![T::zero(); batch * 4 * n];
    let mut weights = vec![T::zero(); batch * 4 * n];
    for (s, boxes) in gt.iter().enumerate() {
        let present = boxes.iter().flatten().count();
        if present == 0 {
            continue;
        }
        let wgt = T::from_f64(1.0 / (batch * 4 * present) as f64);
        for (i, b) in boxes.iter().enumerate() {
            let Some(b) = b else { continue };
            for (k, v) in [b.x0, b.y0, b.x1, b.y1].into_iter().enumerate() {
                target[(s * n + i) * 4 + k] = T::from_f64(v);
                weights[(s * n + i) * 4 + k] = wgt;
            }
        }
    }
    g.weighted_l1(pred, &target, &weights)
}

/// Local mask target of `component` inside `roi`, `side × side`, by
/// nearest-neighbour lookup of the view labels.
pub fn local_targets(labels: &LabelMap, roi: &BBox, component: &Component, side: usize) -> Vec<u8> {
    let (h, w) = (labels.height(), labels.width());
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        let v = roi.y0 + (r as f64 + 0.5) / side as f64 * roi.height();
        let i = ((v * h as f64).floor().max(0.0) as usize).min(h - 1);
        for c in 0..side {
            let u = roi.x0 + (c as f64 + 0.5) / side as f64 * roi.width();
            let j = ((u * w as f64).floor().max(0.0) as usize).min(w - 1);
            out.push(component.channel_of(labels.get(i, j)) as u8);
        }
    }
    out
}

/// Outer-head channel per pixel; inner components count as skin.
pub fn outer_targets(labels: &LabelMap) -> Vec<u8> {
    labels
        .data()
        .iter()
        .map(|&l| {
            let o = labels::outer_label(l);
            OUTER_LABELS.iter().position(|&x| x == o).unwrap_or(2) as u8
        })
        .collect()
}

/// Mask loss: cross-entropy of every component head, averaged over the
/// components present in each sample and then over the batch.
///
/// `targets[i]` holds the `B × mask × mask` local targets of component `i`;
/// `present[s][i]` says whether component `i` exists in sample `s`.
pub fn loss_inner<T: Element>(g: &mut Graph<T>, logits: &[Var], targets: &[Vec<u8>], present: &[Vec<bool>]) -> Result<Var> {
    if logits.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!("{} heads, {} targets", logits.len(), targets.len())));
    }
    let batch = present.len();
    let mut total: Option<Var> = None;
    for (i, (&x, t)) in logits.iter().zip(targets).enumerate() {
        let weights: Vec<f64> = present
            .iter()
            .map(|p| {
                let n = p.iter().filter(|&&b| b).count();
                if p.get(i).copied().unwrap_or(false) {
                    1.0 / (batch * n) as f64
                } else {
                    0.0
                }
            })
            .collect();
        let l = g.weighted_cross_entropy(x, t, &weights)?;
        total = Some(match total {
            None => l,
            Some(acc) => g.add(acc, l)?,
        });
    }
    match total {
        Some(v) => Ok(v),
        None => g.constant(&[1], vec![T::zero()]),
    }
}

/// Cross-entropy of the 3-way outer head against `outer_targets`.
pub fn loss_outer<T: Element>(g: &mut Graph<T>, logits: Var, targets: &[u8]) -> Result<Var> {
    g.cross_entropy_loss(logits, targets)
}

/// Which augmentations run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentConfig {
    pub background: bool,
    pub rotate_scale: bool,
    pub flip: bool,
    pub gamma: bool,
}

impl AugmentConfig {
    pub const ALL: AugmentConfig = AugmentConfig {
        background: true,
        rotate_scale: true,
        flip: true,
        gamma: true,
    };
    pub const NONE: AugmentConfig = AugmentConfig {
        background: false,
        rotate_scale: false,
        flip: false,
        gamma: false,
    };
}

/// Background pixels replaced by a flat color or a smooth noise texture.
pub fn replace_background(sample: &TrainSample, rng: &mut impl Rng) -> TrainSample {
    let (h, w) = (sample.image.height(), sample.image.width());
    let texture = if rng.gen_bool(0.5) {
        let c: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
        Image::filled(h, w, &c)
    } else {
        noise_texture(h, w, rng)
    };
    let mut out = sample.clone();
    for i in 0..h {
        for j in 0..w {
            if sample.labels.get(i, j) == BACKGROUND {
                let src = texture.pixel(i, j).to_vec();
                out.image.pixel_mut(i, j).copy_from_slice(&src);
            }
        }
    }
    out
}

fn noise_texture(h: usize, w: usize, rng: &mut impl Rng) -> Image {
    let grid = Image::from_fn(6, 6, 3, |_, _, _| rng.gen());
    let mut buf = [0.0f32; 3];
    let mut img = Image::zeros(h, w, 3);
    for i in 0..h {
        for j in 0..w {
            let p = Point2::new((j as f64 + 0.5) / w as f64 * 6.0, (i as f64 + 0.5) / h as f64 * 6.0);
            bilinear_sample_into(&grid, p, BorderPolicy::ReplicateEdge, &mut buf);
            let jitter: f32 = rng.gen_range(-0.05..0.05);
            for (o, v) in img.pixel_mut(i, j).iter_mut().zip(buf) {
                *o = (v + jitter).clamp(0.0, 1.0);
            }
        }
    }
    img
}

/// Rotation by `angle` radians and scaling by `scale` about `pivot`.
pub fn rotate_scale(sample: &TrainSample, angle: f64, scale: f64, pivot: Point2) -> Result<TrainSample> {
    let (h, w) = (sample.image.height(), sample.image.width());
    let (s, c) = angle.sin_cos();
    let fwd = |p: Point2| {
        let d = p - pivot;
        pivot + Point2::new(c * d.x - s * d.y, s * d.x + c * d.y) * scale
    };
    let back = |p: Point2| {
        let d = (p - pivot) * (1.0 / scale);
        pivot + Point2::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    };
    let mut image = Image::zeros(h, w, sample.image.channels());
    let mut labels = LabelMap::filled(h, w, BACKGROUND);
    let mut buf = vec![0.0; sample.image.channels()];
    for i in 0..h {
        for j in 0..w {
            let src = back(Point2::new(j as f64 + 0.5, i as f64 + 0.5));
            bilinear_sample_into(&sample.image, src, BorderPolicy::ReplicateEdge, &mut buf);
            image.pixel_mut(i, j).copy_from_slice(&buf);
            let (x, y) = (src.x.floor(), src.y.floor());
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                labels.set(i, j, sample.labels.get(y as usize, x as usize));
            }
        }
    }
    Ok(TrainSample {
        image,
        labels,
        landmarks: sample.landmarks.map(fwd)?,
    })
}

/// Horizontal mirror with left/right label and landmark swaps.
pub fn flip_horizontal(sample: &TrainSample) -> TrainSample {
    let (h, w) = (sample.image.height(), sample.image.width());
    let c = sample.image.channels();
    let mut image = Image::zeros(h, w, c);
    let mut labels = LabelMap::filled(h, w, BACKGROUND);
    for i in 0..h {
        for j in 0..w {
            let src = sample.image.pixel(i, w - 1 - j).to_vec();
            image.pixel_mut(i, j).copy_from_slice(&src);
            labels.set(i, j, labels::mirror_label(sample.labels.get(i, w - 1 - j)));
        }
    }
    TrainSample {
        image,
        labels,
        landmarks: sample.landmarks.mirrored(w as f64),
    }
}

/// `v ← v^γ` on every channel.
pub fn apply_gamma(image: &Image, gamma: f64) -> Image {
    let mut out = image.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = (v.max(0.0) as f64).powf(gamma) as f32);
    out
}

/// Background replacement, rotation/scale about the landmark mean,
/// horizontal flip and gamma, in that order.
pub fn augment(sample: &TrainSample, rng: &mut impl Rng, cfg: &AugmentConfig) -> Result<TrainSample> {
    let mut s = sample.clone();
    if cfg.background && rng.gen_bool(0.5) {
        s = replace_background(&s, rng);
    }
    if cfg.rotate_scale {
        let angle = rng.gen_range(-18.0f64..=18.0).to_radians();
        let scale = rng.gen_range(0.9..=1.1);
        let pivot = s.landmarks.center();
        s = rotate_scale(&s, angle, scale, pivot)?;
    }
    if cfg.flip && rng.gen_bool(0.5) {
        s = flip_horizontal(&s);
    }
    if cfg.gamma {
        // log-uniform so that γ and 1/γ are equally likely
        let gamma = rng.gen_range(0.5f64.ln()..=2.0f64.ln()).exp();
        s.image = apply_gamma(&s.image, gamma);
    }
    Ok(s)
}

/// Side of generated images.
pub const SYNTH_SIDE: usize = 192;

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn in_ellipse(q: Point2, c: Point2, rx: f64, ry: f64) -> bool {
    let d = q - c;
    (d.x / rx).powi(2) + (d.y / ry).powi(2) <= 1.0
}

/// Deterministic procedural face number `index` of the set `seed`.
pub fn synthetic_face(seed: u64, index: u64) -> TrainSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let side = SYNTH_SIDE;
    let centre = Point2::new(
        side as f64 / 2.0 + rng.gen_range(-8.0..8.0),
        side as f64 / 2.0 + rng.gen_range(-8.0..8.0),
    );
    let half = rng.gen_range(44.0..54.0);
    let roll = rng.gen_range(-10.0f64..10.0).to_radians();
    let (sr, cr) = roll.sin_cos();
    let to_img = |q: Point2| centre + Point2::new(cr * q.x - sr * q.y, sr * q.x + cr * q.y) * half;
    let to_face = |p: Point2| {
        let d = (p - centre) * (1.0 / half);
        Point2::new(cr * d.x + sr * d.y, -sr * d.x + cr * d.y)
    };

    let mut jit = |r: f64| rng.gen_range(-r..r);
    let skin_c = Point2::new(0.0, 0.05);
    let (skin_rx, skin_ry) = (0.87 + jit(0.05), 1.07 + jit(0.05));
    let hair_c = Point2::new(jit(0.05), -0.1 + jit(0.05));
    let (hair_rx, hair_ry) = (1.22 + jit(0.12), 1.38 + jit(0.12));
    let hair_cut = 0.45 + jit(0.15);
    let brow = [
        (Point2::new(-0.27 + jit(0.02), -0.34 + jit(0.03)), 0.18 + jit(0.02), 0.09 + jit(0.01)),
        (Point2::new(0.27 + jit(0.02), -0.34 + jit(0.03)), 0.18 + jit(0.02), 0.09 + jit(0.01)),
    ];
    let eye = [
        (Point2::new(-0.25 + jit(0.015), -0.1 + jit(0.015)), 0.155 + jit(0.015), 0.08 + jit(0.008)),
        (Point2::new(0.25 + jit(0.015), -0.1 + jit(0.015)), 0.155 + jit(0.015), 0.08 + jit(0.008)),
    ];
    let nose_c = Point2::new(jit(0.015), 0.03 + jit(0.015));
    let (nose_rx, nose_ry) = (0.12 + jit(0.01), 0.17 + jit(0.015));
    let mouth_c = Point2::new(jit(0.015), 0.42 + jit(0.015));
    let mouth_rx = 0.21 + jit(0.02);
    let (upper_h, lower_h) = (0.09 + jit(0.01), 0.1 + jit(0.01));
    // jaw drop: the lower lip moves down by the opening
    let open = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.03..0.16) };

    let tone: f32 = rng.gen();
    let skin = lerp3([0.96, 0.80, 0.69], [0.50, 0.34, 0.25], tone);
    let hair_v: f32 = rng.gen_range(0.05..0.45);
    let hair = [hair_v, hair_v * 0.8, hair_v * 0.6];
    let brow_col = [hair[0] * 0.7, hair[1] * 0.7, hair[2] * 0.7];
    let iris = [rng.gen_range(0.05..0.35), rng.gen_range(0.05..0.35), rng.gen_range(0.05..0.45)];
    let sclera = [0.93, 0.93, 0.9];
    let nose = [skin[0] * 0.8 + 0.08, skin[1] * 0.72, skin[2] * 0.72];
    let lip: [f32; 3] = [rng.gen_range(0.6..0.85), rng.gen_range(0.18..0.32), rng.gen_range(0.22..0.35)];
    let lower = [(lip[0] * 1.1).min(1.0), lip[1] * 1.15, lip[2] * 1.1];
    let inner = [0.25, 0.05, 0.08];
    let bg: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
    let shade = Point2::new(rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12));

    let mut labels = LabelMap::filled(side, side, BACKGROUND);
    let mut image = Image::zeros(side, side, 3);
    for i in 0..side {
        for j in 0..side {
            let q = to_face(Point2::new(j as f64 + 0.5, i as f64 + 0.5));
            let in_skin = in_ellipse(q, skin_c, skin_rx, skin_ry);
            let mut label = BACKGROUND;
            let mut color = bg;
            if in_skin {
                label = SKIN;
                color = skin;
            } else if in_ellipse(q, hair_c, hair_rx, hair_ry) && q.y < hair_cut {
                label = HAIR;
                color = hair;
            }
            for (k, (c, rx, ry)) in brow.iter().enumerate() {
                if in_ellipse(q, *c, *rx, *ry) {
                    label = [LEFT_BROW, RIGHT_BROW][k];
                    color = brow_col;
                }
            }
            for (k, (c, rx, ry)) in eye.iter().enumerate() {
                if in_ellipse(q, *c, *rx, *ry) {
                    label = [LEFT_EYE, RIGHT_EYE][k];
                    color = if in_ellipse(q, *c, 0.8 * ry, 0.8 * ry) { iris } else { sclera };
                }
            }
            if in_ellipse(q, nose_c, nose_rx, nose_ry) {
                label = NOSE;
                color = nose;
            }
            let (dx, dy) = ((q.x - mouth_c.x) / mouth_rx, q.y - mouth_c.y);
            if dx.abs() <= 1.0 {
                let e = (1.0 - dx * dx).sqrt();
                if dy >= -upper_h * e && dy < 0.0 {
                    (label, color) = (UPPER_LIP, lip);
                } else if dy >= 0.0 && dy < open * e {
                    (label, color) = (INNER_MOUTH, inner);
                } else if dy >= open * e && dy <= (open + lower_h) * e {
                    (label, color) = (LOWER_LIP, lower);
                }
            }
            labels.set(i, j, label);
            let gain = 1.0 + (shade.x * q.x + shade.y * q.y) as f32;
            let px = image.pixel_mut(i, j);
            for (o, v) in px.iter_mut().zip(color) {
                *o = (v * gain + rng.gen_range(-0.03f32..0.03)).clamp(0.0, 1.0);
            }
        }
    }

    // corners sit where the lips meet, 72% of the way out
    let corner = Point2::new(0.72 * mouth_rx, 0.5 * open * (1.0f64 - 0.72 * 0.72).sqrt());
    let landmarks = Landmarks5::new([
        to_img(eye[0].0),
        to_img(eye[1].0),
        to_img(nose_c + Point2::new(0.0, 0.07)),
        to_img(mouth_c + Point2::new(-corner.x, corner.y)),
        to_img(mouth_c + corner),
    ])
    .expect("finite landmarks");
    TrainSample {
        image,
        labels,
        landmarks,
    }
}

/// `count` procedural faces of the set `seed`.
pub fn generate_synthetic(seed: u64, count: usize) -> Result<Vec<TrainSample>> {
    if count == 0 {
        return Err(Error::InvalidConfig("count must be at least 1".into()));
    }
    Ok((0..count as u64).map(|i| synthetic_face(seed, i)).collect())
}

/// Optimization schedule. Serialized as `key=value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 300,
            stage2_iters: 700,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 8,
            seed: 7,
            augment: AugmentConfig::ALL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_iters == 0 || self.stage2_iters == 0 {
            return Err(Error::InvalidConfig("iteration counts must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "stage1_iters={}", self.stage1_iters);
        let _ = writeln!(s, "stage2_iters={}", self.stage2_iters);
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "momentum={}", self.momentum);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "augment_background={}", self.augment.background);
        let _ = writeln!(s, "augment_rotate_scale={}", self.augment.rotate_scale);
        let _ = writeln!(s, "augment_flip={}", self.augment.flip);
        let _ = writeln!(s, "augment_gamma={}", self.augment.gamma);
        s
    }

    /// Parses `key=value` lines on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (key, value) in kv_pairs(text)? {
            let bad = || Error::InvalidConfig(format!("{key}: cannot parse `{value}`"));
            match key {
                "stage1_iters" => c.stage1_iters = value.parse().map_err(|_| bad())?,
                "stage2_iters" => c.stage2_iters = value.parse().map_err(|_| bad())?,
                "learning_rate" => c.learning_rate = value.parse().map_err(|_| bad())?,
                "momentum" => c.momentum = value.parse().map_err(|_| bad())?,
                "batch_size" => c.batch_size = value.parse().map_err(|_| bad())?,
                "seed" => c.seed = value.parse().map_err(|_| bad())?,
                "augment_background" => c.augment.background = parse_bool(key, value)?,
                "augment_rotate_scale" => c.augment.rotate_scale = parse_bool(key, value)?,
                "augment_flip" => c.augment.flip = parse_bool(key, value)?,
                "augment_gamma" => c.augment.gamma = parse_bool(key, value)?,
                other => return Err(Error::InvalidConfig(format!("unknown training key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }
}

const TRAIN_KEYS: [&str; 10] = [
    "stage1_iters",
    "stage2_iters",
    "learning_rate",
    "momentum",
    "batch_size",
    "seed",
    "augment_background",
    "augment_rotate_scale",
    "augment_flip",
    "augment_gamma",
];

/// Splits one `key=value` file into the model and the schedule settings.
pub fn parse_run_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let (mut model, mut train) = (String::new(), String::new());
    for (k, v) in kv_pairs(text)? {
        let dst = if TRAIN_KEYS.contains(&k) { &mut train } else { &mut model };
        let _ = writeln!(dst, "{k}={v}");
    }
    Ok((ModelConfig::from_kv(&model)?, TrainConfig::from_kv(&train)?))
}

/// Losses of one optimization step. Stage-1 steps log zero mask losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub stage: u8,
    pub l_comp: f64,
    pub l_inner: f64,
    pub l_outer: f64,
    pub total: f64,
}

pub fn write_loss_csv<W: Write>(log: &[LossRecord], mut out: W) -> std::io::Result<()> {
    writeln!(out, "iter,stage,l_comp,l_inner,l_outer,total")?;
    for r in log {
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            r.iter, r.stage, r.l_comp, r.l_inner, r.l_outer, r.total
        )?;
    }
    Ok(())
}

pub fn save_loss_csv(log: &[LossRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_loss_csv(log, std::io::BufWriter::new(f)).map_err(|e| Error::io(path, e))
}

/// A sample brought into the network's view.
#[derive(Debug, Clone)]
pub struct FocusedSample {
    pub view: Image,
    pub labels: LabelMap,
}

/// Warps image and labels of `sample` into the view of `mode`.
pub fn focus_sample(sample: &TrainSample, mode: FocusMode, side: usize) -> Result<FocusedSample> {
    let focus = focus_for((sample.image.height(), sample.image.width()), &sample.landmarks, mode, side)?;
    Ok(FocusedSample {
        view: focus.warp_image(&sample.image, BorderPolicy::ZeroFill),
        labels: focus.warp_labels(&sample.labels),
    })
}

fn batch_rng(seed: u64, stage: Stage, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tag = match stage {
        Stage::Boxes => 1u64,
        Stage::Full => 2u64,
    };
    rng.set_stream((tag << 40) | iter as u64);
    rng
}

fn make_batch(net: &HybridNet<f32>, cfg: &TrainConfig, data: &[TrainSample], stage: Stage, iter: usize) -> Result<Vec<FocusedSample>> {
    let mut rng = batch_rng(cfg.seed, stage, iter);
    (0..cfg.batch_size)
        .map(|_| {
            let idx = rng.gen_range(0..data.len());
            let s = augment(&data[idx], &mut rng, &cfg.augment)?;
            focus_sample(&s, net.config().mode, net.config().warped_size)
        })
        .collect()
}

/// Runs one training stage in place, appending to `log`.
///
/// Stage 1 ([`Stage::Boxes`]) updates the trunk and box head with the box
/// loss only; stage 2 updates every parameter with the sum of the box,
/// mask and outer losses. Momentum starts from zero in each call.
pub fn train_stage(net: &mut HybridNet<f32>, stage: Stage, cfg: &TrainConfig, data: &[TrainSample], log: &mut Vec<LossRecord>) -> Result<()> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let iters = match stage {
        Stage::Boxes => cfg.stage1_iters,
        Stage::Full => cfg.stage2_iters,
    };
    let stage_no = if stage == Stage::Boxes { 1 } else { 2 };
    let mut opt = Sgd::new(cfg.learning_rate, cfg.momentum);
    for iter in 0..iters {
        let batch = make_batch(net, cfg, data, stage, iter)?;
        let views: Vec<Image> = batch.iter().map(|b| b.view.clone()).collect();

        let mut g = Graph::new();
        let mut bound = net.bind();
        let input = net.input(&mut g, &views)?;
        let labels: Vec<&LabelMap> = batch.iter().map(|b| &b.labels).collect();
        let losses = stage_loss(net, &mut g, &mut bound, input, &labels, stage, None)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v)[0].as_f64());
        let (l_comp, l_inner, l_outer) = (value(Some(losses.comp)), value(losses.inner), value(losses.outer));
        let total = losses.total;
        let total_v = g.value(total)[0] as f64;
        if !total_v.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: iter,
                stage: stage_no,
                detail: format!("l_comp={l_comp} l_inner={l_inner} l_outer={l_outer}"),
            });
        }
        log.push(LossRecord {
            iter,
            stage: stage_no,
            l_comp,
            l_inner,
            l_outer,
            total: total_v,
        });
        g.backward(total)?;
        let params = net.params_mut();
        bound.collect_grads(&g, params);
        if stage == Stage::Boxes {
            // Only the trunk and box head move in stage 1.
            let frozen: Vec<_> = net
                .params()
                .ids()
                .filter(|&id| !matches!(net.group_of(id), ParamGroup::Trunk | ParamGroup::BoxHead))
                .collect();
            for id in frozen {
                net.params_mut().get_mut(id).clear_grad();
            }
        }
        opt.step(net.params_mut());
        net.params_mut().clear_grads();
    }
    Ok(())
}

/// Loss terms of one forward pass; `inner` and `outer` only in stage 2.
#[derive(Debug, Clone, Copy)]
pub struct StageLoss {
    pub comp: Var,
    pub inner: Option<Var>,
    pub outer: Option<Var>,
    pub total: Var,
}

/// Forward pass plus the stage objective for a batch whose view labels are
/// `labels`. `rois` overrides the predicted RoIs, as in [`HybridNet::forward`].
pub fn stage_loss<T: Element>(
    net: &HybridNet<T>,
    g: &mut Graph<T>,
    bound: &mut Bound,
    input: Var,
    labels: &[&LabelMap],
    stage: Stage,
    rois: Option<&[Vec<BBox>]>,
) -> Result<StageLoss> {
    let comps = &net.config().components;
    let mask = net.config().mask_size;
    let gt: Vec<Vec<Option<BBox>>> = labels.iter().map(|l| gt_boxes_from_labels(l, comps)).collect();
    let fwd = net.forward(g, bound, input, stage, rois)?;
    let comp = loss_comp(g, fwd.boxes, &gt)?;
    if stage == Stage::Boxes {
        return Ok(StageLoss {
            comp,
            inner: None,
            outer: None,
            total: comp,
        });
    }
    let present: Vec<Vec<bool>> = gt.iter().map(|s| s.iter().map(Option::is_some).collect()).collect();
    let targets: Vec<Vec<u8>> = comps
        .iter()
        .enumerate()
        .map(|(i, c)| {
            labels
                .iter()
                .zip(&fwd.rois[i])
                .flat_map(|(l, roi)| local_targets(l, roi, c, mask))
                .collect()
        })
        .collect();
    let inner = loss_inner(g, &fwd.inner, &targets, &present)?;
    let outer_t: Vec<u8> = labels.iter().flat_map(|l| outer_targets(l)).collect();
    let outer = loss_outer(g, fwd.outer.expect("full forward"), &outer_t)?;
    let s = g.add(comp, inner)?;
    let total = g.add(s, outer)?;
    Ok(StageLoss {
        comp,
        inner: Some(inner),
        outer: Some(outer),
        total,
    })
}

/// Trained network and per-step losses.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: HybridNet<f32>,
    pub log: Vec<LossRecord>,
}

/// Mean ground-truth box of every component over the unaugmented views of
/// `data`; components never present fall back to the full frame.
pub fn mean_view_boxes(net: &HybridNet<f32>, data: &[TrainSample]) -> Result<Vec<BBox>> {
    let comps = &net.config().components;
    let mut sum = vec![[0.0f64; 4]; comps.len()];
    let mut count = vec![0usize; comps.len()];
    for s in data {
        let f = focus_sample(s, net.config().mode, net.config().warped_size)?;
        for (k, b) in gt_boxes_from_labels(&f.labels, comps).into_iter().enumerate() {
            let Some(b) = b else { continue };
            for (acc, v) in sum[k].iter_mut().zip([b.x0, b.y0, b.x1, b.y1]) {
                *acc += v;
            }
            count[k] += 1;
        }
    }
    Ok(sum
        .iter()
        .zip(&count)
        .map(|(s, &n)| match n {
            0 => BBox::FULL,
            n => {
                let n = n as f64;
                BBox {
                    x0: s[0] / n,
                    y0: s[1] / n,
                    x1: s[2] / n,
                    y1: s[3] / n,
                }
            }
        })
        .collect())
}

/// Both stages from a fresh initialization. The box head starts at the
/// mean training box so stage 1 only has to learn the residual.
pub fn train(model: ModelConfig, cfg: &TrainConfig, data: &[TrainSample]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut net = HybridNet::new(model)?;
    let prior = mean_view_boxes(&net, data)?;
    net.set_box_prior(&prior)?;
    let mut log = Vec::with_capacity(cfg.stage1_iters + cfg.stage2_iters);
    train_stage(&mut net, Stage::Boxes, cfg, data, &mut log)?;
    train_stage(&mut net, Stage::Full, cfg, data, &mut log)?;
    Ok(TrainOutcome { model: net, log })
}
