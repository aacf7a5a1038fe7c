//! Binary masks, union (pretext) labels, lesion bounding boxes, cropping and
//! nearest-neighbour resizing.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::TensorF;

/// Default probability threshold used to turn a network output into a mask.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// The five dermoscopic attributes, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Attribute {
    /// Globules.
    G,
    /// Milia-like cysts.
    M,
    /// Negative network.
    N,
    /// Pigment network.
    P,
    /// Streaks.
    S,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::G,
        Attribute::M,
        Attribute::N,
        Attribute::P,
        Attribute::S,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Attribute::G => "G",
            Attribute::M => "M",
            Attribute::N => "N",
            Attribute::P => "P",
            Attribute::S => "S",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::G => "globules",
            Attribute::M => "milia_like_cyst",
            Attribute::N => "negative_network",
            Attribute::P => "pigment_network",
            Attribute::S => "streaks",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.code().eq_ignore_ascii_case(s) || a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Data(format!("unknown attribute {s:?}")))
    }
}

/// A dense binary mask, one byte per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "mask extents must be >= 1");
        Self {
            height,
            width,
            bits: vec![0; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        let mut m = Self::zeros(height, width);
        m.bits.fill(1);
        m
    }

    /// Builds a mask from row-major bits; every value must be 0 or 1.
    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension(format!(
                "mask extents must be >= 1, got {height}x{width}"
            )));
        }
        if bits.len() != height * width {
            return Err(Error::Dimension(format!(
                "{height}x{width} mask needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Range(format!("mask value {bad} is not binary")));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(height, width);
        for r in 0..height {
            for c in 0..width {
                m.bits[r * width + c] = f(r, c) as u8;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] != 0
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.bits[row * self.width + col] = on as u8;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    /// The mask as a `(1, h, w)` tensor of zeros and ones.
    pub fn to_tensor(&self) -> TensorF {
        TensorF::from_vec(
            &[1, self.height, self.width],
            self.bits.iter().map(|&b| b as f64).collect(),
        )
        .expect("mask extents are valid tensor extents")
    }

    /// Elementwise OR, in place.
    pub fn or_assign(&mut self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "cannot OR a {:?} mask into a {:?} mask",
                other.dims(),
                self.dims()
            )));
        }
        for (a, &b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
        Ok(())
    }

    /// Reads a binary PGM (`P5`, maxval <= 255). Any nonzero byte is a 1.
    pub fn read_pgm(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        parse_pgm(&bytes).map_err(|reason| Error::format(path, reason))
    }

    /// Writes a binary PGM with maxval 255 and pixel values 0 or 255.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_pgm_bytes())
    }

    pub fn to_pgm_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.bits.len() + 20);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height).expect("write to Vec");
        out.extend(self.bits.iter().map(|&b| if b != 0 { 255u8 } else { 0 }));
        out
    }
}

fn parse_pgm(bytes: &[u8]) -> std::result::Result<BinaryMask, String> {
    let mut pos = 0;
    let mut fields = [0usize; 3];
    let magic = next_token(bytes, &mut pos).ok_or("missing magic")?;
    if magic != b"P5" {
        return Err(format!(
            "expected P5 magic, found {:?}",
            String::from_utf8_lossy(magic)
        ));
    }
    for (slot, what) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        let tok = next_token(bytes, &mut pos).ok_or(format!("missing {what}"))?;
        *slot = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or(format!("bad {what}"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let raster = bytes.get(pos..pos + width * height).ok_or("truncated raster")?;
    Ok(BinaryMask {
        height,
        width,
        bits: raster.iter().map(|&b| (b != 0) as u8).collect(),
    })
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

/// Attribute masks for one sample plus the optional lesion mask.
///
/// Absent attributes are treated as all-zero masks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttributeMaskSet {
    attributes: BTreeMap<Attribute, BinaryMask>,
    lesion: Option<BinaryMask>,
}

impl AttributeMaskSet {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_dims(&self, mask: &BinaryMask) -> Result<()> {
        if let Some((h, w)) = self.dims() {
            if mask.dims() != (h, w) {
                return Err(Error::Dimension(format!(
                    "mask is {:?} but the set holds {:?} masks",
                    mask.dims(),
                    (h, w)
                )));
            }
        }
        Ok(())
    }

    pub fn insert(&mut self, attribute: Attribute, mask: BinaryMask) -> Result<()> {
        self.check_dims(&mask)?;
        self.attributes.insert(attribute, mask);
        Ok(())
    }

    pub fn set_lesion(&mut self, mask: BinaryMask) -> Result<()> {
        self.check_dims(&mask)?;
        self.lesion = Some(mask);
        Ok(())
    }

    pub fn get(&self, attribute: Attribute) -> Option<&BinaryMask> {
        self.attributes.get(&attribute)
    }

    pub fn lesion(&self) -> Option<&BinaryMask> {
        self.lesion.as_ref()
    }

    pub fn present(&self) -> impl Iterator<Item = (Attribute, &BinaryMask)> {
        self.attributes.iter().map(|(&a, m)| (a, m))
    }

    /// Shared `(height, width)` of the stored masks, if any are stored.
    pub fn dims(&self) -> Option<(usize, usize)> {
        self.attributes
            .values()
            .chain(self.lesion.iter())
            .next()
            .map(BinaryMask::dims)
    }

    /// The mask for `attribute`, or an all-zero mask of the given size when absent.
    pub fn target(&self, attribute: Attribute, height: usize, width: usize) -> BinaryMask {
        self.attributes
            .get(&attribute)
            .cloned()
            .unwrap_or_else(|| BinaryMask::zeros(height, width))
    }

    /// Applies `f` to every stored mask, keeping keys.
    pub fn try_map(&self, f: impl Fn(&BinaryMask) -> Result<BinaryMask>) -> Result<Self> {
        let mut out = AttributeMaskSet::new();
        for (a, m) in &self.attributes {
            out.insert(*a, f(m)?)?;
        }
        if let Some(l) = &self.lesion {
            out.set_lesion(f(l)?)?;
        }
        Ok(out)
    }
}

/// Builds an `AttributeMaskSet` from raw parts, checking dimensions.
impl TryFrom<(Vec<(Attribute, BinaryMask)>, Option<BinaryMask>)> for AttributeMaskSet {
    type Error = Error;

    fn try_from(
        (attrs, lesion): (Vec<(Attribute, BinaryMask)>, Option<BinaryMask>),
    ) -> Result<Self> {
        let mut set = AttributeMaskSet::new();
        for (a, m) in attrs {
            set.insert(a, m)?;
        }
        if let Some(l) = lesion {
            set.set_lesion(l)?;
        }
        Ok(set)
    }
}

/// Pixelwise OR of every present attribute mask.
///
/// The lesion mask does not participate. `height`/`width` size the result when
/// no attribute is present.
pub fn union_mask(masks: &AttributeMaskSet, height: usize, width: usize) -> Result<BinaryMask> {
    let (h, w) = masks.dims().unwrap_or((height, width));
    let mut out = BinaryMask::zeros(h, w);
    for (_, m) in masks.present() {
        out.or_assign(m)?;
    }
    Ok(out)
}

/// Half-open pixel rectangle `[row_lo, row_hi) x [col_lo, col_hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CropBox {
    pub row_lo: usize,
    pub row_hi: usize,
    pub col_lo: usize,
    pub col_hi: usize,
}

impl CropBox {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            row_lo: 0,
            row_hi: height,
            col_lo: 0,
            col_hi: width,
        }
    }

    pub fn height(&self) -> usize {
        self.row_hi - self.row_lo
    }

    pub fn width(&self) -> usize {
        self.col_hi - self.col_lo
    }

    pub fn contains(&self, other: &CropBox) -> bool {
        self.row_lo <= other.row_lo
            && self.col_lo <= other.col_lo
            && other.row_hi <= self.row_hi
            && other.col_hi <= self.col_hi
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.row_lo < self.row_hi
            && self.col_lo < self.col_hi
            && self.row_hi <= height
            && self.col_hi <= width
        {
            Ok(())
        } else {
            Err(Error::Dimension(format!(
                "crop box {self:?} does not fit a {height}x{width} image"
            )))
        }
    }
}

/// Tightest box around the nonzero pixels, grown by `offset` on every side and
/// clamped to the image. An all-zero mask yields the full image.
pub fn lesion_bbox(mask: &BinaryMask, offset: usize) -> CropBox {
    let (h, w) = mask.dims();
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                let b = bounds.get_or_insert((r, r, c, c));
                b.0 = b.0.min(r);
                b.1 = b.1.max(r);
                b.2 = b.2.min(c);
                b.3 = b.3.max(c);
            }
        }
    }
    match bounds {
        None => CropBox::full(h, w),
        Some((r0, r1, c0, c1)) => CropBox {
            row_lo: r0.saturating_sub(offset),
            row_hi: (r1 + 1 + offset).min(h),
            col_lo: c0.saturating_sub(offset),
            col_hi: (c1 + 1 + offset).min(w),
        },
    }
}

/// Things that can be cut down to a [`CropBox`].
pub trait Crop: Sized {
    fn crop(&self, bbox: &CropBox) -> Result<Self>;
}

impl Crop for BinaryMask {
    fn crop(&self, bbox: &CropBox) -> Result<Self> {
        bbox.check(self.height, self.width)?;
        let mut bits = Vec::with_capacity(bbox.height() * bbox.width());
        for r in bbox.row_lo..bbox.row_hi {
            bits.extend_from_slice(&self.bits[r * self.width + bbox.col_lo..r * self.width + bbox.col_hi]);
        }
        Ok(BinaryMask {
            height: bbox.height(),
            width: bbox.width(),
            bits,
        })
    }
}

/// Crops the trailing two (spatial) axes of a rank-2 or rank-3 tensor.
impl Crop for TensorF {
    fn crop(&self, bbox: &CropBox) -> Result<Self> {
        let (c, h, w) = match self.shape() {
            &[h, w] => (1, h, w),
            &[c, h, w] => (c, h, w),
            s => {
                return Err(Error::Dimension(format!(
                    "cannot crop a tensor of shape {s:?}"
                )))
            }
        };
        bbox.check(h, w)?;
        let src = self.data();
        let mut data = Vec::with_capacity(c * bbox.height() * bbox.width());
        for ch in 0..c {
            for r in bbox.row_lo..bbox.row_hi {
                let base = ch * h * w + r * w;
                data.extend_from_slice(&src[base + bbox.col_lo..base + bbox.col_hi]);
            }
        }
        let shape: Vec<usize> = if self.rank() == 2 {
            vec![bbox.height(), bbox.width()]
        } else {
            vec![c, bbox.height(), bbox.width()]
        };
        TensorF::from_vec(&shape, data)
    }
}

pub fn crop<T: Crop>(item: &T, bbox: &CropBox) -> Result<T> {
    item.crop(bbox)
}

/// Nearest-neighbour resampling: output pixel `(r, c)` samples source
/// `(floor(r * h / new_h), floor(c * w / new_w))`.
pub fn resize_mask(mask: &BinaryMask, new_h: usize, new_w: usize) -> BinaryMask {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(new_h, new_w, |r, c| mask.get(r * h / new_h, c * w / new_w))
}

/// Writes `patch` into `canvas` at `bbox`. The patch must match the box size.
pub fn paste(canvas: &mut BinaryMask, patch: &BinaryMask, bbox: &CropBox) -> Result<()> {
    bbox.check(canvas.height, canvas.width)?;
    if patch.dims() != (bbox.height(), bbox.width()) {
        return Err(Error::Dimension(format!(
            "patch {:?} does not match box {:?}",
            patch.dims(),
            (bbox.height(), bbox.width())
        )));
    }
    for r in 0..patch.height {
        for c in 0..patch.width {
            canvas.set(bbox.row_lo + r, bbox.col_lo + c, patch.get(r, c));
        }
    }
    Ok(())
}

/// Thresholds a probability map (`p >= threshold` is foreground).
///
/// Accepts `(n)`, `(h, w)` or `(1, h, w)` tensors; a rank-1 input becomes a
/// single-row mask.
pub fn binarize(probabilities: &TensorF, threshold: f64) -> Result<BinaryMask> {
    let (h, w) = match probabilities.shape() {
        &[n] => (1, n),
        &[h, w] | &[1, h, w] => (h, w),
        s => {
            return Err(Error::Dimension(format!(
                "cannot binarize a tensor of shape {s:?}"
            )))
        }
    };
    let mut bits = Vec::with_capacity(h * w);
    for &p in probabilities.data() {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Range(format!("probability {p} outside [0, 1]")));
        }
        bits.push((p >= threshold) as u8);
    }
    BinaryMask::from_bits(h, w, bits)
}
