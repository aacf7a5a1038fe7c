//! Synthetic dermoscopy-like samples, dataset manifests and image I/O.
//!
//! Each generated image is a dark elliptical lesion on a noisy bright
//! background. Attributes appear as small textured discs inside the lesion,
//! one procedural texture per attribute, drawn independently with the preset
//! presence rate.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_atomic, write_tensor};
use crate::maskops::{Attribute, AttributeMaskSet, BinaryMask};
use crate::tensor::TensorF;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Isic2017,
    Isic2018,
    Uniform,
    Custom,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isic2017" => Ok(Preset::Isic2017),
            "isic2018" => Ok(Preset::Isic2018),
            "uniform" => Ok(Preset::Uniform),
            "custom" => Ok(Preset::Custom),
            other => Err(Error::Data(format!("unknown preset {other:?}"))),
        }
    }
}

/// Per-attribute generation parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttributeStyle {
    /// Probability that a sample shows this attribute.
    pub presence: f64,
    /// Inclusive range of disc count when present.
    pub blobs: (usize, usize),
    /// Disc radius range as a fraction of the image side.
    pub radius: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_samples: usize,
    pub image_size: usize,
    pub styles: BTreeMap<Attribute, AttributeStyle>,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    pub seed: u64,
    pub preset: Preset,
}

impl GenConfig {
    pub fn preset(preset: Preset, n_samples: usize, image_size: usize, seed: u64) -> Self {
        let rates: [(Attribute, f64); 5] = match preset {
            Preset::Isic2018 => [
                (Attribute::G, 0.2321),
                (Attribute::M, 0.2625),
                (Attribute::N, 0.0732),
                (Attribute::P, 0.5867),
                (Attribute::S, 0.0386),
            ],
            // no globules annotated in the 2017 release
            Preset::Isic2017 => [
                (Attribute::G, 0.0),
                (Attribute::M, 0.3355),
                (Attribute::N, 0.0862),
                (Attribute::P, 0.7903),
                (Attribute::S, 0.0798),
            ],
            Preset::Uniform | Preset::Custom => Attribute::ALL.map(|a| (a, 0.5)),
        };
        let styles = rates
            .into_iter()
            .map(|(a, presence)| {
                (
                    a,
                    AttributeStyle {
                        presence,
                        blobs: (1, 2),
                        radius: (0.14, 0.22),
                    },
                )
            })
            .collect();
        Self {
            n_samples,
            image_size,
            styles,
            noise: 0.03,
            seed,
            preset,
        }
    }

    pub fn with_presence(mut self, rates: &[(Attribute, f64)]) -> Self {
        for &(a, p) in rates {
            self.styles.entry(a).or_insert(AttributeStyle {
                presence: p,
                blobs: (1, 2),
                radius: (0.14, 0.22),
            })
            .presence = p;
        }
        self.preset = Preset::Custom;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(Error::Range(format!("image size {} is too small", self.image_size)));
        }
        for (a, s) in &self.styles {
            if !(0.0..=1.0).contains(&s.presence) {
                return Err(Error::Range(format!("presence of {a} must be in [0, 1]")));
            }
            if s.blobs.0 < 1 || s.blobs.0 > s.blobs.1 {
                return Err(Error::Range(format!("blob count range of {a} is invalid")));
            }
            if !(s.radius.0 > 0.0 && s.radius.0 <= s.radius.1) {
                return Err(Error::Range(format!("radius range of {a} is invalid")));
            }
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Range("noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// One image with its attribute masks and lesion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `(1, h, w)` grayscale intensities in `[0, 1]`.
    pub image: TensorF,
    pub masks: AttributeMaskSet,
}

impl Sample {
    pub fn dims(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    /// The attribute's mask, all-zero when absent.
    pub fn target(&self, attribute: Attribute) -> BinaryMask {
        let (h, w) = self.dims();
        self.masks.target(attribute, h, w)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn has_lesions(&self) -> bool {
        self.samples.iter().all(|s| s.masks.lesion().is_some())
    }

    /// Number of samples whose `attribute` mask has at least one pixel.
    pub fn presence_count(&self, attribute: Attribute) -> usize {
        self.samples
            .iter()
            .filter(|s| s.masks.get(attribute).is_some_and(|m| !m.is_empty()))
            .count()
    }

    /// The attribute with the fewest positive samples (ties go to the later
    /// canonical attribute), ignoring attributes that never occur.
    pub fn rarest_attribute(&self) -> Option<Attribute> {
        Attribute::ALL
            .into_iter()
            .map(|a| (self.presence_count(a), a))
            .filter(|&(n, _)| n > 0)
            .min_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(&x.1)))
            .map(|(_, a)| a)
    }
}

fn texture(attribute: Attribute, r: f64, c: f64, dr: f64, dc: f64, phase: f64, rng: &mut ChaCha8Rng) -> f64 {
    match attribute {
        // dark dots on a 3-pixel lattice
        Attribute::G => {
            if (r as usize) % 3 == 1 && (c as usize) % 3 == 1 {
                -1.0
            } else {
                0.2
            }
        }
        // bright concentric rings
        Attribute::M => {
            let d = (dr * dr + dc * dc).sqrt();
            if (d.round() as usize) % 2 == 0 {
                1.0
            } else {
                -0.3
            }
        }
        // light mesh
        Attribute::N => {
            if (r as usize) % 3 == 0 || (c as usize) % 3 == 0 {
                0.9
            } else {
                -0.6
            }
        }
        // random speckle
        Attribute::P => {
            if rng.gen_bool(0.5) {
                -0.9
            } else {
                0.5
            }
        }
        // oriented ridges
        Attribute::S => {
            let t = r * phase.cos() + c * phase.sin();
            if (t / 1.5).floor() as i64 % 2 == 0 {
                1.0
            } else {
                -1.0
            }
        }
    }
}

const TEXTURE_AMPLITUDE: f64 = 0.25;

/// Draws `cfg.n_samples` samples; identical configs give identical samples.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let size = cfg.image_size;
    let sz = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Range(e.to_string()))?;
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for idx in 0..cfg.n_samples {
        let background = rng.gen_range(0.65..0.8);
        let lesion_level = rng.gen_range(0.3..0.45);
        let (cy, cx) = (rng.gen_range(0.4..0.6) * sz, rng.gen_range(0.4..0.6) * sz);
        let (ay, ax) = (rng.gen_range(0.25..0.42) * sz, rng.gen_range(0.25..0.42) * sz);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let (st, ct) = theta.sin_cos();
        let lesion = BinaryMask::from_fn(size, size, |r, c| {
            let (y, x) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
            let u = x * ct + y * st;
            let v = -x * st + y * ct;
            (u / ax).powi(2) + (v / ay).powi(2) <= 1.0
        });
        let mut img: Vec<f64> = (0..size * size)
            .map(|i| if lesion.bits()[i] != 0 { lesion_level } else { background })
            .collect();
        let lesion_px: Vec<usize> = (0..size * size).filter(|&i| lesion.bits()[i] != 0).collect();

        let mut masks = AttributeMaskSet::new();
        let mut occupied = vec![false; size * size];
        for a in Attribute::ALL {
            let style = cfg.styles.get(&a).copied().unwrap_or(AttributeStyle {
                presence: 0.0,
                blobs: (1, 1),
                radius: (0.1, 0.1),
            });
            let mut mask = BinaryMask::zeros(size, size);
            if !lesion_px.is_empty() && rng.gen_bool(style.presence) {
                let count = rng.gen_range(style.blobs.0..=style.blobs.1);
                let phase = rng.gen_range(0.0..std::f64::consts::PI);
                for _ in 0..count {
                    let radius = rng.gen_range(style.radius.0..=style.radius.1) * sz;
                    // prefer an unoccupied lesion pixel as the centre
                    let mut centre = lesion_px[rng.gen_range(0..lesion_px.len())];
                    for _ in 0..8 {
                        if !occupied[centre] {
                            break;
                        }
                        centre = lesion_px[rng.gen_range(0..lesion_px.len())];
                    }
                    let (br, bc) = ((centre / size) as f64, (centre % size) as f64);
                    for &i in &lesion_px {
                        let (r, c) = ((i / size) as f64, (i % size) as f64);
                        let (dr, dc) = (r - br, c - bc);
                        if dr * dr + dc * dc <= radius * radius {
                            mask.set(i / size, i % size, true);
                            occupied[i] = true;
                            img[i] = lesion_level + TEXTURE_AMPLITUDE * texture(a, r, c, dr, dc, phase, &mut rng);
                        }
                    }
                }
            }
            masks.insert(a, mask)?;
        }
        masks.set_lesion(lesion)?;
        for v in img.iter_mut() {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        samples.push(Sample {
            id: format!("s{idx:05}"),
            image: TensorF::from_vec(&[1, size, size], img)?,
            masks,
        });
    }
    Ok(Dataset { samples })
}

/// One line of the JSON-lines manifest; paths are relative to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    #[serde(default)]
    pub masks: BTreeMap<Attribute, Option<String>>,
    #[serde(default)]
    pub lesion: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn to_jsonl(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for r in &self.records {
            serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(e.to_string()))?;
            out.write_all(b"\n").expect("write to Vec");
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        let mut ids = HashSet::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: ManifestRecord = serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
            if !ids.insert(rec.id.clone()) {
                return Err(Error::format(path, format!("duplicate id {:?}", rec.id)));
            }
            records.push(rec);
        }
        Ok(Self { records })
    }
}

/// Writes images, masks and `manifest.jsonl` under `dir`; returns the manifest path.
pub fn save(dataset: &Dataset, dir: &Path) -> Result<PathBuf> {
    let mut manifest = Manifest::default();
    for s in &dataset.samples {
        let image = format!("images/{}.tatlt", s.id);
        write_tensor(&dir.join(&image), &s.image)?;
        let mut masks = BTreeMap::new();
        for (a, m) in s.masks.present() {
            let rel = format!("masks/{}_{}.pgm", s.id, a.code());
            m.write_pgm(&dir.join(&rel))?;
            masks.insert(a, Some(rel));
        }
        let lesion = match s.masks.lesion() {
            Some(m) => {
                let rel = format!("masks/{}_lesion.pgm", s.id);
                m.write_pgm(&dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        manifest.records.push(ManifestRecord {
            id: s.id.clone(),
            image,
            masks,
            lesion,
        });
    }
    let path = dir.join("manifest.jsonl");
    write_atomic(&path, &manifest.to_jsonl()?)?;
    Ok(path)
}

/// Loads a dataset from a manifest. Missing attribute entries become all-zero masks.
pub fn load(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::read(manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut samples = Vec::with_capacity(manifest.records.len());
    for rec in manifest.records {
        let image = read_tensor(&root.join(&rec.image))?;
        let (_, h, w) = image
            .chw()
            .map_err(|e| Error::format(root.join(&rec.image), e.to_string()))?;
        let mut masks = AttributeMaskSet::new();
        for a in Attribute::ALL {
            let m = match rec.masks.get(&a).and_then(Option::as_ref) {
                Some(rel) => BinaryMask::read_pgm(&root.join(rel))?,
                None => BinaryMask::zeros(h, w),
            };
            if m.dims() != (h, w) {
                return Err(Error::Dimension(format!(
                    "sample {}: {a} mask is {:?}, image is {:?}",
                    rec.id,
                    m.dims(),
                    (h, w)
                )));
            }
            masks.insert(a, m)?;
        }
        if let Some(rel) = &rec.lesion {
            let m = BinaryMask::read_pgm(&root.join(rel))?;
            masks.set_lesion(m).map_err(|e| Error::Dimension(format!("sample {}: {e}", rec.id)))?;
        }
        samples.push(Sample {
            id: rec.id,
            image,
            masks,
        });
    }
    Ok(Dataset { samples })
}

/// Bilinear resampling of every channel with half-pixel centres and edge clamping.
pub fn resize_image(image: &TensorF, new_h: usize, new_w: usize) -> Result<TensorF> {
    let (c, h, w) = image.chw()?;
    if new_h == 0 || new_w == 0 {
        return Err(Error::Dimension("target extents must be >= 1".into()));
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|i| {
                let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = s.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, s - lo as f64)
            })
            .collect()
    };
    let rows = axis(new_h, h);
    let cols = axis(new_w, w);
    let src = image.data();
    let mut out = Vec::with_capacity(c * new_h * new_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(r0, r1, fr) in &rows {
            for &(c0, c1, fc) in &cols {
                let top = plane[r0 * w + c0] * (1.0 - fc) + plane[r0 * w + c1] * fc;
                let bot = plane[r1 * w + c0] * (1.0 - fc) + plane[r1 * w + c1] * fc;
                out.push(top * (1.0 - fr) + bot * fr);
            }
        }
    }
    TensorF::from_vec(&[c, new_h, new_w], out)
}
