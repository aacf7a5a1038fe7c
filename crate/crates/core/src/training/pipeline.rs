//! The three training stages and inference.
//!
//! Stage 1 trains a lesion segmenter and replaces every sample by its
//! offset bounding-box crop, rescaled to the original resolution. Stage 2
//! trains the attribute-agnostic segmenter on union masks. Stage 3 trains one
//! segmenter per attribute, starting from an exact copy of the stage-2
//! weights when stage 2 ran.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::fit::{fit, History, TrainItem};
use super::optim::OptConfig;
use crate::data::{resize_image, Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::maskops::{
    binarize, crop, lesion_bbox, paste, resize_mask, union_mask, Attribute, BinaryMask, CropBox,
    DEFAULT_THRESHOLD,
};
use crate::metrics::{summarize, MetricSummary, Score, ScoreTable};
use crate::nnet::{NetConfig, ParamSet, Segmenter};
use crate::tensor::TensorF;

/// Which of the three stages to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Stages {
    pub segment: bool,
    pub pretext: bool,
    pub downstream: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        segment: true,
        pretext: true,
        downstream: true,
    };

    pub fn list(&self) -> Vec<u8> {
        [(1, self.segment), (2, self.pretext), (3, self.downstream)]
            .into_iter()
            .filter_map(|(n, on)| on.then_some(n))
            .collect()
    }
}

impl FromStr for Stages {
    type Err = Error;

    /// Parses a comma-separated subset of `1,2,3`.
    fn from_str(s: &str) -> Result<Self> {
        let mut st = Stages::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "1" => st.segment = true,
                "2" => st.pretext = true,
                "3" => st.downstream = true,
                other => return Err(Error::Data(format!("unknown stage {other:?}"))),
            }
        }
        if st == Stages::default() {
            return Err(Error::Data("no stages selected".into()));
        }
        Ok(st)
    }
}

impl fmt::Display for Stages {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.list().iter().map(u8::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

impl Serialize for Stages {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.list().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Stages {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let list = Vec::<u8>::deserialize(d)?;
        let joined: Vec<String> = list.iter().map(u8::to_string).collect();
        joined.join(",").parse().map_err(serde::de::Error::custom)
    }
}

pub const DEFAULT_CROP_OFFSET: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub stages: Stages,
    pub freeze_encoder: bool,
    pub attributes: Vec<Attribute>,
    pub crop_offset: usize,
    pub opt: OptConfig,
    pub net: NetConfig,
    pub loss: LossConfig,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self {
            stages: Stages::ALL,
            freeze_encoder: false,
            attributes: Attribute::ALL.to_vec(),
            crop_offset: DEFAULT_CROP_OFFSET,
            opt: OptConfig::default(),
            net: NetConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

fn items(dataset: &Dataset, target: impl Fn(&Sample) -> Result<BinaryMask>) -> Result<Vec<TrainItem>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            Ok(TrainItem {
                image: s.image.clone(),
                target: target(s)?,
            })
        })
        .collect()
}

/// Trains the attribute-agnostic segmenter on union masks.
/// Image/target pairs for one attribute; absent masks become empty targets.
pub fn attribute_items(dataset: &Dataset, attribute: Attribute) -> Result<Vec<TrainItem>> {
    items(dataset, |s| Ok(s.target(attribute)))
}

pub fn train_pretext(dataset: &Dataset, init: &ParamSet, plan: &TrainPlan) -> Result<(ParamSet, History)> {
    let net = Segmenter::new(plan.net)?;
    let items = items(dataset, |s| {
        let (h, w) = s.dims();
        union_mask(&s.masks, h, w)
    })?;
    fit(&net, init, &items, &plan.opt, &plan.loss, false)
}

/// Starting weights of a downstream network: an exact copy of `pretext`,
/// encoder and decoder alike, with cleared gradients.
pub fn transfer_init(net: &Segmenter, pretext: &ParamSet) -> Result<ParamSet> {
    net.check_params(pretext)?;
    let mut init = pretext.clone();
    init.zero_grad();
    Ok(init)
}

/// Trains the segmenter for `attribute`, starting from a bit-exact copy of
/// `pretext`. Absent attribute masks are empty targets.
pub fn train_downstream(
    dataset: &Dataset,
    pretext: &ParamSet,
    attribute: Attribute,
    plan: &TrainPlan,
) -> Result<(ParamSet, History)> {
    let net = Segmenter::new(plan.net)?;
    let init = transfer_init(&net, pretext)?;
    let items = attribute_items(dataset, attribute)?;
    fit(&net, &init, &items, &plan.opt, &plan.loss, plan.freeze_encoder)
}

/// Trains the lesion segmenter used to place crop boxes.
pub fn train_segment_net(dataset: &Dataset, init: &ParamSet, plan: &TrainPlan) -> Result<(ParamSet, History)> {
    if !dataset.has_lesions() {
        return Err(Error::Data("stage 1 needs a lesion mask for every sample".into()));
    }
    let net = Segmenter::new(plan.net)?;
    let items = items(dataset, |s| Ok(s.masks.lesion().expect("checked above").clone()))?;
    fit(&net, init, &items, &plan.opt, &plan.loss, false)
}

/// Crop box from the lesion segmenter's prediction on `image`.
pub fn predict_box(net: &Segmenter, params: &ParamSet, image: &TensorF, offset: usize) -> Result<CropBox> {
    let lesion = binarize(&net.forward(params, image)?, DEFAULT_THRESHOLD)?;
    Ok(lesion_bbox(&lesion, offset))
}

/// Crops image and masks to `bbox`, then rescales them back to the sample's
/// resolution (bilinear for the image, nearest-neighbour for masks).
pub fn crop_sample(sample: &Sample, bbox: &CropBox) -> Result<Sample> {
    let (h, w) = sample.dims();
    let image = resize_image(&crop(&sample.image, bbox)?, h, w)?;
    let masks = sample.masks.try_map(|m| Ok(resize_mask(&crop(m, bbox)?, h, w)))?;
    Ok(Sample {
        id: sample.id.clone(),
        image,
        masks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropRecord {
    pub id: String,
    pub bbox: CropBox,
}

/// Everything a pipeline run produces.
#[derive(Debug, Clone, Default)]
pub struct PipelineOutput {
    pub segment_net: Option<ParamSet>,
    pub crops: Vec<CropRecord>,
    /// Dataset actually seen by stages 2 and 3.
    pub working: Dataset,
    pub pretext: Option<ParamSet>,
    pub downstream: BTreeMap<Attribute, ParamSet>,
    pub histories: BTreeMap<String, History>,
}

/// Runs the selected stages.
///
/// Stage 3 starts from the stage-2 weights when stage 2 ran, else from
/// `init`, else from freshly initialized weights of `plan.net`.
pub fn run_pipeline(dataset: &Dataset, plan: &TrainPlan, init: Option<&ParamSet>) -> Result<PipelineOutput> {
    if dataset.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let net = Segmenter::new(plan.net)?;
    let fresh = net.init_params();
    let mut out = PipelineOutput {
        working: dataset.clone(),
        ..PipelineOutput::default()
    };

    if plan.stages.segment {
        let (seg, hist) = train_segment_net(dataset, &fresh, plan)?;
        out.histories.insert("segment".into(), hist);
        let mut cropped = Vec::with_capacity(dataset.len());
        for s in &dataset.samples {
            let bbox = predict_box(&net, &seg, &s.image, plan.crop_offset)?;
            cropped.push(crop_sample(s, &bbox)?);
            out.crops.push(CropRecord { id: s.id.clone(), bbox });
        }
        out.working = Dataset { samples: cropped };
        out.segment_net = Some(seg);
    }

    if plan.stages.pretext {
        let (wu, hist) = train_pretext(&out.working, &fresh, plan)?;
        out.histories.insert("pretext".into(), hist);
        out.pretext = Some(wu);
    }

    if plan.stages.downstream {
        let start = out.pretext.as_ref().or(init).unwrap_or(&fresh);
        for &a in &plan.attributes {
            let (wi, hist) = train_downstream(&out.working, start, a, plan)?;
            out.histories.insert(format!("downstream_{a}"), hist);
            out.downstream.insert(a, wi);
        }
    }
    Ok(out)
}

/// Elementwise mean of two networks' probability maps.
pub fn ensemble_predict(
    x: &TensorF,
    first: (&Segmenter, &ParamSet),
    second: (&Segmenter, &ParamSet),
) -> Result<TensorF> {
    let a = first.0.forward(first.1, x)?;
    let b = second.0.forward(second.1, x)?;
    a.ensure_same_shape(&b)?;
    let data = a.data().iter().zip(b.data()).map(|(p, q)| 0.5 * (p + q)).collect();
    TensorF::from_vec(a.shape(), data)
}

/// Full-frame inference: optional lesion crop, per-attribute networks (one,
/// or two averaged), threshold, and paste back into the original frame.
#[derive(Debug, Clone, Default)]
pub struct Predictor {
    pub segment: Option<(Segmenter, ParamSet)>,
    pub crop_offset: usize,
    pub models: BTreeMap<Attribute, Vec<(Segmenter, ParamSet)>>,
}

impl Predictor {
    pub fn from_output(out: &PipelineOutput, plan: &TrainPlan) -> Result<Self> {
        let net = Segmenter::new(plan.net)?;
        Ok(Self {
            segment: out.segment_net.clone().map(|p| (net.clone(), p)),
            crop_offset: plan.crop_offset,
            models: out
                .downstream
                .iter()
                .map(|(&a, p)| (a, vec![(net.clone(), p.clone())]))
                .collect(),
        })
    }

    pub fn attributes(&self) -> Vec<Attribute> {
        self.models.keys().copied().collect()
    }

    fn probabilities(&self, attribute: Attribute, x: &TensorF) -> Result<TensorF> {
        let models = self
            .models
            .get(&attribute)
            .filter(|m| !m.is_empty())
            .ok_or_else(|| Error::Data(format!("no model for attribute {attribute}")))?;
        match &models[..] {
            [(net, p)] => net.forward(p, x),
            [a, b] => ensemble_predict(x, (&a.0, &a.1), (&b.0, &b.1)),
            many => {
                let mut acc = many[0].0.forward(&many[0].1, x)?;
                for (net, p) in &many[1..] {
                    let y = net.forward(p, x)?;
                    acc.data_mut().iter_mut().zip(y.data()).for_each(|(a, b)| *a += b);
                }
                let k = many.len() as f64;
                Ok(acc.map(|v| v / k))
            }
        }
    }

    /// Predicted mask for `attribute` in the frame of `image`.
    pub fn predict(&self, attribute: Attribute, image: &TensorF) -> Result<BinaryMask> {
        let (_, h, w) = image.chw()?;
        match &self.segment {
            None => binarize(&self.probabilities(attribute, image)?, DEFAULT_THRESHOLD),
            Some((net, params)) => {
                let bbox = predict_box(net, params, image, self.crop_offset)?;
                let input = resize_image(&crop(image, &bbox)?, h, w)?;
                let local = binarize(&self.probabilities(attribute, &input)?, DEFAULT_THRESHOLD)?;
                let mut full = BinaryMask::zeros(h, w);
                paste(&mut full, &resize_mask(&local, bbox.height(), bbox.width()), &bbox)?;
                Ok(full)
            }
        }
    }
}

/// Disjoint index sets covering `0..n`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub folds: Vec<Vec<usize>>,
}

impl FoldSplit {
    /// Indices outside fold `k`.
    pub fn complement(&self, k: usize) -> Vec<usize> {
        let mut rest: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .flat_map(|(_, f)| f.iter().copied())
            .collect();
        rest.sort_unstable();
        rest
    }
}

/// Seeded shuffle of `0..n` cut into `k` contiguous chunks; the first
/// `n % k` folds get one extra element.
pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldSplit> {
    if k == 0 || n < k {
        return Err(Error::Data(format!("cannot split {n} samples into {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        folds.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(FoldSplit { folds })
}

/// Scores `predictor` on every sample, grouped by fold.
pub fn evaluate(dataset: &Dataset, predictor: &Predictor, folds: &FoldSplit) -> Result<ScoreTable> {
    let mut table = ScoreTable::new();
    for a in predictor.attributes() {
        let per_fold = table.entry(a).or_default();
        for (f, idx) in folds.folds.iter().enumerate() {
            let mut scores = Vec::with_capacity(idx.len());
            for &i in idx {
                let s = &dataset.samples[i];
                scores.push(Score::of(&predictor.predict(a, &s.image)?, &s.target(a))?);
            }
            per_fold.insert(f, scores);
        }
    }
    Ok(table)
}

/// k-fold cross-validation: train on k-1 folds, score the held-out fold.
pub fn cross_validate(dataset: &Dataset, plan: &TrainPlan, k: usize, seed: u64) -> Result<(MetricSummary, ScoreTable)> {
    if !plan.stages.downstream {
        return Err(Error::Data("cross-validation needs stage 3".into()));
    }
    let split = make_folds(dataset.len(), k, seed)?;
    let mut table = ScoreTable::new();
    for f in 0..k {
        let train = dataset.subset(&split.complement(f));
        let out = run_pipeline(&train, plan, None)?;
        let predictor = Predictor::from_output(&out, plan)?;
        let held_out = FoldSplit {
            folds: vec![split.folds[f].clone()],
        };
        for (a, folds) in evaluate(dataset, &predictor, &held_out)? {
            table.entry(a).or_default().insert(f, folds.into_values().next().unwrap_or_default());
        }
    }
    Ok((summarize(&table)?, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_parsing() {
        let s: Stages = "2,3".parse().unwrap();
        assert_eq!(s.list(), vec![2, 3]);
        assert_eq!(s.to_string(), "2,3");
        assert!("4".parse::<Stages>().is_err());
        assert!("".parse::<Stages>().is_err());
        let json = serde_json::to_string(&Stages::ALL).unwrap();
        assert_eq!(json, "[1,2,3]");
        assert_eq!(serde_json::from_str::<Stages>(&json).unwrap(), Stages::ALL);
    }

    #[test]
    fn folds_partition() {
        let f = make_folds(10, 5, 1).unwrap();
        assert!(f.folds.iter().all(|x| x.len() == 2));
        let f = make_folds(11, 5, 1).unwrap();
        let mut sizes: Vec<_> = f.folds.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        let mut all: Vec<_> = f.folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
        assert_eq!(make_folds(11, 5, 1).unwrap(), f);
        assert_ne!(make_folds(11, 5, 2).unwrap(), f);
        assert!(matches!(make_folds(3, 5, 0), Err(Error::Data(_))));
        assert_eq!(f.complement(0).len(), 11 - f.folds[0].len());
    }
}
