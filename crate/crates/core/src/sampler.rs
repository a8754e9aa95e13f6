//! Bilinear sampling, the RoI tanh-warp and its inverse, box padding and
//! RoI align.
//!
//! All samplers use backward mapping: every output pixel center is mapped
//! into the input and the input is bilinearly interpolated there.

use crate::error::{Error, Result};
use crate::geometry::{atanh_map, tanh_map, Point2, ScsPoint, SimilarityTransform, WcsPoint};
use crate::raster::{Image, LabelMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BorderPolicy {
    #[default]
    ZeroFill,
    ReplicateEdge,
}

/// Axis-aligned box in normalized image coordinates (origin top-left,
/// `1` = full side).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub const FULL: BBox = BBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    /// Clamps to `[0, 1]` and checks that the box keeps a positive extent.
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = BBox { x0, y0, x1, y1 }.clamped();
        if !(b.x0 < b.x1 && b.y0 < b.y1) {
            return Err(Error::DegenerateBox(format!(
                "({x0:.4}, {y0:.4}, {x1:.4}, {y1:.4}) has no extent"
            )));
        }
        Ok(b)
    }

    pub fn clamped(self) -> BBox {
        let c = |v: f64| v.clamp(0.0, 1.0);
        BBox {
            x0: c(self.x0),
            y0: c(self.y0),
            x1: c(self.x1),
            y1: c(self.y1),
        }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = BBox {
            x0: self.x0.max(other.x0),
            y0: self.y0.max(other.y0),
            x1: self.x1.min(other.x1),
            y1: self.y1.min(other.y1),
        };
        let i = if inter.x1 > inter.x0 && inter.y1 > inter.y0 {
            inter.area()
        } else {
            0.0
        };
        let union = self.area() + other.area() - i;
        if union > 0.0 {
            i / union
        } else {
            0.0
        }
    }

    /// Whether the continuous point `(x, y)` in pixel units of a
    /// `width × height` raster falls inside the box.
    pub fn contains_px(&self, x: f64, y: f64, width: usize, height: usize) -> bool {
        let (u, v) = (x / width as f64, y / height as f64);
        u >= self.x0 && u <= self.x1 && v >= self.y0 && v <= self.y1
    }
}

/// Grows every side of `b` by `frac * map_side` pixels of a map whose side is
/// `map_side`, then clamps to `[0, 1]`.
pub fn pad_box(b: BBox, frac: f64, map_side: usize) -> BBox {
    debug_assert!((0.0..0.5).contains(&frac), "padding fraction {frac}");
    let side = map_side as f64;
    let grow = frac * side / side;
    BBox {
        x0: b.x0 - grow,
        y0: b.y0 - grow,
        x1: b.x1 + grow,
        y1: b.y1 + grow,
    }
    .clamped()
}

/// The four bilinear taps `(flat pixel index, weight)` for the continuous
/// point `(x, y)` of an `height × width` grid.
///
/// Under [`BorderPolicy::ZeroFill`] taps that fall outside the grid get
/// weight zero; under [`BorderPolicy::ReplicateEdge`] they are clamped.
pub fn bilinear_taps(height: usize, width: usize, x: f64, y: f64, policy: BorderPolicy) -> [(usize, f64); 4] {
    let u = x - 0.5;
    let v = y - 0.5;
    let j0 = u.floor();
    let i0 = v.floor();
    let fx = u - j0;
    let fy = v - i0;
    let (j0, i0) = (j0 as i64, i0 as i64);
    let (h, w) = (height as i64, width as i64);
    let tap = |i: i64, j: i64, weight: f64| -> (usize, f64) {
        match policy {
            BorderPolicy::ZeroFill => {
                if i < 0 || j < 0 || i >= h || j >= w {
                    (0, 0.0)
                } else {
                    ((i * w + j) as usize, weight)
                }
            }
            BorderPolicy::ReplicateEdge => {
                let i = i.clamp(0, h - 1);
                let j = j.clamp(0, w - 1);
                ((i * w + j) as usize, weight)
            }
        }
    };
    [
        tap(i0, j0, (1.0 - fx) * (1.0 - fy)),
        tap(i0, j0 + 1, fx * (1.0 - fy)),
        tap(i0 + 1, j0, (1.0 - fx) * fy),
        tap(i0 + 1, j0 + 1, fx * fy),
    ]
}

pub fn bilinear_sample_into(img: &Image, p: Point2, policy: BorderPolicy, out: &mut [f32]) {
    let c = img.channels();
    out.iter_mut().for_each(|v| *v = 0.0);
    if !p.is_finite() {
        return;
    }
    // Points further than a pixel outside the grid have only zero taps.
    if policy == BorderPolicy::ZeroFill
        && (p.x < -1.0 || p.y < -1.0 || p.x > img.width() as f64 + 1.0 || p.y > img.height() as f64 + 1.0)
    {
        return;
    }
    let data = img.data();
    for (idx, w) in bilinear_taps(img.height(), img.width(), p.x, p.y, policy) {
        if w == 0.0 {
            continue;
        }
        let px = &data[idx * c..idx * c + c];
        for (o, &v) in out.iter_mut().zip(px) {
            *o += (w * v as f64) as f32;
        }
    }
}

pub fn bilinear_sample(img: &Image, p: Point2, policy: BorderPolicy) -> Vec<f32> {
    let mut out = vec![0.0; img.channels()];
    bilinear_sample_into(img, p, policy, &mut out);
    out
}

/// How the face rectangle is brought into the fixed-size network input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FocusMode {
    /// RoI tanh-warping of the whole image.
    #[default]
    Warp,
    /// Linear crop of the face rectangle; nothing outside it is visible.
    Crop,
    /// Aspect-preserving resize of the full image, ignoring the rectangle.
    Rescale,
}

impl std::str::FromStr for FocusMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warp" => Ok(FocusMode::Warp),
            "crop" => Ok(FocusMode::Crop),
            "rescale" => Ok(FocusMode::Rescale),
            other => Err(Error::InvalidConfig(format!("unknown focus mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for FocusMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FocusMode::Warp => "warp",
            FocusMode::Crop => "crop",
            FocusMode::Rescale => "rescale",
        })
    }
}

/// The pairing of a source image and its fixed-size focused view.
#[derive(Debug, Clone, Copy)]
pub struct Focus {
    pub mode: FocusMode,
    pub transform: SimilarityTransform,
    /// `(height, width)` of the source image.
    pub source_size: (usize, usize),
    /// `(height, width)` of the focused view.
    pub view_size: (usize, usize),
}

impl Focus {
    pub fn new(
        mode: FocusMode,
        transform: SimilarityTransform,
        source_size: (usize, usize),
        view_size: (usize, usize),
    ) -> Result<Self> {
        if view_size.0 < 2 || view_size.1 < 2 {
            return Err(Error::ShapeMismatch(format!(
                "view must be at least 2x2, got {}x{}",
                view_size.0, view_size.1
            )));
        }
        Ok(Self {
            mode,
            transform,
            source_size,
            view_size,
        })
    }

    fn rescale_params(&self) -> (f64, Point2) {
        let (sh, sw) = (self.source_size.0 as f64, self.source_size.1 as f64);
        let (vh, vw) = (self.view_size.0 as f64, self.view_size.1 as f64);
        let s = (vw / sw).min(vh / sh);
        (s, Point2::new(0.5 * (vw - s * sw), 0.5 * (vh - s * sh)))
    }

    fn view_px_to_unit(&self, p: Point2) -> Point2 {
        Point2::new(
            2.0 * p.x / self.view_size.1 as f64 - 1.0,
            2.0 * p.y / self.view_size.0 as f64 - 1.0,
        )
    }

    fn unit_to_view_px(&self, p: Point2) -> Point2 {
        Point2::new(
            0.5 * (p.x + 1.0) * self.view_size.1 as f64,
            0.5 * (p.y + 1.0) * self.view_size.0 as f64,
        )
    }

    /// Source-image point seen at the continuous view pixel `p`.
    ///
    /// Defined for every point strictly inside the view.
    pub fn view_to_source(&self, p: Point2) -> Point2 {
        match self.mode {
            FocusMode::Warp => {
                let w = self.view_px_to_unit(p);
                let scs = atanh_map(WcsPoint(w)).map(|s| s.0).unwrap_or_else(|_| {
                    // Only reachable for points on or beyond the view border.
                    let clamp = |v: f64| v.clamp(-1.0 + 1e-12, 1.0 - 1e-12).atanh();
                    Point2::new(clamp(w.x), clamp(w.y))
                });
                self.transform.invert().apply(scs)
            }
            FocusMode::Crop => self.transform.invert().apply(self.view_px_to_unit(p)),
            FocusMode::Rescale => {
                let (s, off) = self.rescale_params();
                (p - off) * (1.0 / s)
            }
        }
    }

    /// View pixel at which the source point `p` appears, or `None` when the
    /// mode cannot see it.
    pub fn source_to_view(&self, p: Point2) -> Option<Point2> {
        match self.mode {
            FocusMode::Warp => Some(self.unit_to_view_px(tanh_map(self.transform.to_scs(p)).0)),
            FocusMode::Crop => {
                let s = self.transform.apply(p);
                (s.x.abs() <= 1.0 && s.y.abs() <= 1.0).then(|| self.unit_to_view_px(s))
            }
            FocusMode::Rescale => {
                let (s, off) = self.rescale_params();
                let q = p * s + off;
                let (vh, vw) = (self.view_size.0 as f64, self.view_size.1 as f64);
                (q.x >= 0.0 && q.y >= 0.0 && q.x <= vw && q.y <= vh).then_some(q)
            }
        }
    }

    /// Forward warp of a source image into the view.
    pub fn warp_image(&self, img: &Image, policy: BorderPolicy) -> Image {
        let (vh, vw) = self.view_size;
        let c = img.channels();
        let mut out = Image::zeros(vh, vw, c);
        let inv = self.transform.invert();
        let mut buf = vec![0.0; c];
        for i in 0..vh {
            for j in 0..vw {
                let centre = Point2::new(j as f64 + 0.5, i as f64 + 0.5);
                let src = match self.mode {
                    // Pixel centers are strictly inside the view, so atanh is finite.
                    FocusMode::Warp => {
                        let w = self.view_px_to_unit(centre);
                        inv.apply(Point2::new(w.x.atanh(), w.y.atanh()))
                    }
                    _ => self.view_to_source(centre),
                };
                bilinear_sample_into(img, src, policy, &mut buf);
                out.pixel_mut(i, j).copy_from_slice(&buf);
            }
        }
        out
    }

    /// Nearest-neighbour warp of a label map into the view; pixels mapping
    /// outside the source become background.
    pub fn warp_labels(&self, labels: &LabelMap) -> LabelMap {
        let (vh, vw) = self.view_size;
        let mut out = LabelMap::filled(vh, vw, crate::labels::BACKGROUND);
        for i in 0..vh {
            for j in 0..vw {
                let src = self.view_to_source(Point2::new(j as f64 + 0.5, i as f64 + 0.5));
                let (x, y) = (src.x.floor(), src.y.floor());
                if x >= 0.0 && y >= 0.0 && (x as usize) < labels.width() && (y as usize) < labels.height() {
                    out.set(i, j, labels.get(y as usize, x as usize));
                }
            }
        }
        out
    }

    /// Maps view-domain scores back onto the source grid.
    ///
    /// Source pixels the mode cannot see receive `fill`; all others are
    /// sampled with edge replication.
    pub fn dewarp_scores(&self, scores: &Image, fill: &[f32]) -> Result<Image> {
        if (scores.height(), scores.width()) != self.view_size {
            return Err(Error::ShapeMismatch(format!(
                "score map {}x{} does not match the {}x{} view",
                scores.height(),
                scores.width(),
                self.view_size.0,
                self.view_size.1
            )));
        }
        if fill.len() != scores.channels() {
            return Err(Error::ShapeMismatch("fill vector length differs from channel count".into()));
        }
        let (h, w) = self.source_size;
        let mut out = Image::zeros(h, w, scores.channels());
        let mut buf = vec![0.0; scores.channels()];
        for i in 0..h {
            for j in 0..w {
                match self.source_to_view(Point2::new(j as f64 + 0.5, i as f64 + 0.5)) {
                    Some(q) => {
                        bilinear_sample_into(scores, q, BorderPolicy::ReplicateEdge, &mut buf);
                        out.pixel_mut(i, j).copy_from_slice(&buf);
                    }
                    None => out.pixel_mut(i, j).copy_from_slice(fill),
                }
            }
        }
        Ok(out)
    }
}

/// `W(I, r)`: the whole image tanh-warped into an `out_size` view centered
/// on the face rectangle of `t`.
pub fn roi_tanh_warp(img: &Image, t: &SimilarityTransform, out_size: (usize, usize), policy: BorderPolicy) -> Result<Image> {
    let focus = Focus::new(FocusMode::Warp, *t, (img.height(), img.width()), out_size)?;
    Ok(focus.warp_image(img, policy))
}

/// `W⁻¹(m, r)`: warped-domain scores resampled onto an `out_size` source grid.
pub fn roi_tanh_dewarp(scores: &Image, t: &SimilarityTransform, out_size: (usize, usize)) -> Result<Image> {
    let focus = Focus::new(FocusMode::Warp, *t, out_size, (scores.height(), scores.width()))?;
    focus.dewarp_scores(scores, &vec![0.0; scores.channels()])
}

/// Source SCS point to warped pixel coordinates for a view of `view_size`.
pub fn scs_to_warped_px(p: ScsPoint, view_size: (usize, usize)) -> Point2 {
    let w = tanh_map(p).0;
    Point2::new(
        0.5 * (w.x + 1.0) * view_size.1 as f64,
        0.5 * (w.y + 1.0) * view_size.0 as f64,
    )
}

/// Sample point of RoI-align bin `(row, col)` in feature pixel coordinates.
pub fn roi_bin_center(b: &BBox, height: usize, width: usize, bins: usize, row: usize, col: usize) -> Point2 {
    let x0 = b.x0 * width as f64;
    let y0 = b.y0 * height as f64;
    let bw = b.width() * width as f64 / bins as f64;
    let bh = b.height() * height as f64 / bins as f64;
    Point2::new(x0 + (col as f64 + 0.5) * bw, y0 + (row as f64 + 0.5) * bh)
}

/// Rejects boxes narrower than one feature pixel in either dimension.
pub fn check_roi(b: &BBox, height: usize, width: usize) -> Result<()> {
    let w = b.width() * width as f64;
    let h = b.height() * height as f64;
    if !(w >= 1.0 && h >= 1.0) {
        return Err(Error::DegenerateBox(format!(
            "box spans {w:.3}x{h:.3} feature pixels, need at least 1x1"
        )));
    }
    Ok(())
}

/// RoI align with one bilinear sample at the center of each of the
/// `bins × bins` cells; out-of-range taps replicate the edge.
pub fn roi_align(feat: &Image, b: &BBox, bins: usize) -> Result<Image> {
    if bins == 0 {
        return Err(Error::ShapeMismatch("RoI align needs at least one bin".into()));
    }
    check_roi(b, feat.height(), feat.width())?;
    let mut out = Image::zeros(bins, bins, feat.channels());
    let mut buf = vec![0.0; feat.channels()];
    for i in 0..bins {
        for j in 0..bins {
            let p = roi_bin_center(b, feat.height(), feat.width(), bins, i, j);
            bilinear_sample_into(feat, p, BorderPolicy::ReplicateEdge, &mut buf);
            out.pixel_mut(i, j).copy_from_slice(&buf);
        }
    }
    Ok(out)
}
