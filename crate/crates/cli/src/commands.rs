use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use tatl_core::data::{self, GenConfig};
use tatl_core::io::write_atomic;
use tatl_core::maskops::Attribute;
use tatl_core::metrics::{summarize, MetricSummary};
use tatl_core::nnet::{ParamSet, Segmenter};
use tatl_core::stability::{compare_inits, BoundInputs};
use tatl_core::training::{
    attribute_items, cross_validate, evaluate, make_folds, run_pipeline, FoldSplit, Predictor, RunManifest, TrainPlan,
};
use tatl_core::{Error, Result};

use crate::args::{AblateArgs, BoundArgs, Cli, Command, CvArgs, EvalArgs, SynthArgs, TrainArgs};

pub const SEGMENT_WEIGHTS: &str = "segnet.tatlw";
pub const PRETEXT_WEIGHTS: &str = "W_U.tatlw";
pub const METRICS_CSV: &str = "metrics.csv";

pub fn attribute_weights(a: Attribute) -> String {
    format!("W_{}.tatlw", a.code())
}

pub fn run_record_name(command: &str) -> String {
    format!("run_{command}.json")
}

pub fn run(cli: &Cli) -> Result<()> {
    fs::create_dir_all(&cli.out_dir).map_err(|e| Error::Io {
        path: cli.out_dir.clone(),
        source: e,
    })?;
    let config = serde_json::to_value(cli).map_err(|e| Error::Data(e.to_string()))?;
    let mut record = RunManifest::new(cli.command.name(), cli.seed, config);
    match &cli.command {
        Command::Synth(a) => synth(cli, a)?,
        Command::Train(a) => train(cli, a, &mut record)?,
        Command::Eval(a) => eval(cli, a, &mut record)?,
        Command::Bound(a) => bound(cli, a)?,
        Command::Cv(a) => cv(cli, a, &mut record)?,
        Command::Ablate(a) => ablate(cli, a, &mut record)?,
    }
    record.write(&cli.out_dir.join(run_record_name(cli.command.name())))
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let dataset = data::generate(&GenConfig::preset(a.preset.into(), a.n, a.size, cli.seed))?;
    let manifest = data::save(&dataset, &cli.out_dir)?;
    println!("{} samples -> {}", dataset.len(), manifest.display());
    Ok(())
}

fn save_params(dir: &Path, name: &str, params: &ParamSet, record: &mut RunManifest, role: &str) -> Result<()> {
    params.save(&dir.join(name))?;
    record.checkpoints.insert(role.to_string(), name.to_string());
    Ok(())
}

fn train(cli: &Cli, a: &TrainArgs, record: &mut RunManifest) -> Result<()> {
    let dataset = data::load(&a.manifest)?;
    let plan = a.plan.plan(cli.seed);
    let out = run_pipeline(&dataset, &plan, None)?;
    let dir = &cli.out_dir;
    if let Some(p) = &out.segment_net {
        save_params(dir, SEGMENT_WEIGHTS, p, record, "segment")?;
    }
    if let Some(p) = &out.pretext {
        save_params(dir, PRETEXT_WEIGHTS, p, record, "pretext")?;
    }
    for (&attr, p) in &out.downstream {
        save_params(dir, &attribute_weights(attr), p, record, &format!("downstream_{attr}"))?;
    }
    if !out.downstream.is_empty() {
        // fit on the training samples themselves
        let predictor = Predictor::from_output(&out, &plan)?;
        let all = FoldSplit {
            folds: vec![(0..dataset.len()).collect()],
        };
        let summary = summarize(&evaluate(&dataset, &predictor, &all)?)?;
        summary.write_csv(&dir.join(METRICS_CSV))?;
        record.metrics = Some(summary);
    }
    record.histories = out.histories;
    record.crops = out.crops;
    record.plan = Some(plan);
    Ok(())
}

/// Rebuilds the predictor saved by `train` in `dir`.
fn load_predictor(dir: &Path) -> Result<(TrainPlan, Predictor)> {
    let run = RunManifest::read(&dir.join(run_record_name("train")))?;
    let plan = run
        .plan
        .ok_or_else(|| Error::Data(format!("{} has no training plan", dir.display())))?;
    let net = Segmenter::new(plan.net)?;
    let load = |name: &str| -> Result<ParamSet> {
        let p = ParamSet::load(&dir.join(name))?;
        net.check_params(&p)?;
        Ok(p)
    };
    let segment = if plan.stages.segment {
        Some((net.clone(), load(SEGMENT_WEIGHTS)?))
    } else {
        None
    };
    let mut models = BTreeMap::new();
    for &attr in &plan.attributes {
        models.insert(attr, vec![(net.clone(), load(&attribute_weights(attr))?)]);
    }
    let predictor = Predictor {
        segment,
        crop_offset: plan.crop_offset,
        models,
    };
    Ok((plan, predictor))
}

fn eval(cli: &Cli, a: &EvalArgs, record: &mut RunManifest) -> Result<()> {
    let dataset = data::load(&a.manifest)?;
    let (plan, mut predictor) = load_predictor(&a.weights_dir)?;
    if let Some(other) = &a.ensemble {
        let (_, second) = load_predictor(other)?;
        for (attr, models) in predictor.models.iter_mut() {
            let extra = second.models.get(attr).ok_or_else(|| {
                Error::Data(format!("{} has no weights for attribute {attr}", other.display()))
            })?;
            models.extend(extra.iter().cloned());
        }
    }
    let folds = make_folds(dataset.len(), a.folds, cli.seed)?;
    let summary = summarize(&evaluate(&dataset, &predictor, &folds)?)?;
    finish_metrics(cli, summary, record)?;
    record.plan = Some(plan);
    Ok(())
}

fn finish_metrics(cli: &Cli, summary: MetricSummary, record: &mut RunManifest) -> Result<()> {
    summary.write_csv(&cli.out_dir.join(METRICS_CSV))?;
    println!(
        "average jaccard {:.4} dice {:.4}",
        summary.average.jaccard.mean, summary.average.dice.mean
    );
    record.metrics = Some(summary);
    Ok(())
}

fn parse_init(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.to_string(), PathBuf::from(path))),
        _ => Err(Error::Data(format!("--init expects name=path, got `{spec}`"))),
    }
}

fn bound(cli: &Cli, a: &BoundArgs) -> Result<()> {
    let mut dataset = data::load(&a.manifest)?;
    if let Some(m) = a.max_samples {
        dataset = dataset.subset(&(0..m.min(dataset.len())).collect::<Vec<_>>());
    }
    let net = Segmenter::new(a.net.config(cli.seed))?;
    let mut candidates = Vec::with_capacity(a.inits.len());
    for spec in &a.inits {
        let (name, path) = parse_init(spec)?;
        let params = ParamSet::load(&path)?;
        net.check_params(&params)?;
        candidates.push((name, params));
    }
    let inputs = BoundInputs {
        c: a.c,
        k: candidates.len(),
        power_iters: a.power_iters,
        power_tol: a.power_tol,
        fd_step: a.fd_step,
        seed: cli.seed,
    };
    let items = attribute_items(&dataset, a.attribute)?;
    let report = compare_inits(&net, &candidates, &items, &Default::default(), &inputs)?;
    let mut json = serde_json::to_vec_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
    json.push(b'\n');
    write_atomic(&cli.out_dir.join("bound.json"), &json)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("argmin {}", report.argmin);
    Ok(())
}

fn cv(cli: &Cli, a: &CvArgs, record: &mut RunManifest) -> Result<()> {
    let dataset = data::load(&a.manifest)?;
    let plan = a.plan.plan(cli.seed);
    let (summary, _) = cross_validate(&dataset, &plan, a.folds, cli.seed)?;
    finish_metrics(cli, summary, record)?;
    record.plan = Some(plan);
    Ok(())
}

fn ablate(cli: &Cli, a: &AblateArgs, record: &mut RunManifest) -> Result<()> {
    let dataset = data::load(&a.manifest)?;
    let base = a.plan.plan(cli.seed);
    if !base.stages.segment {
        return Err(Error::Data("offset ablation needs stage 1".into()));
    }
    let mut csv = String::from("offset,jaccard_mean,jaccard_std,dice_mean,dice_std\n");
    for &offset in &a.offsets {
        let plan = TrainPlan {
            crop_offset: offset,
            ..base.clone()
        };
        let (summary, _) = cross_validate(&dataset, &plan, a.folds, cli.seed)?;
        let avg = summary.average;
        csv.push_str(&format!(
            "{offset},{:.6},{:.6},{:.6},{:.6}\n",
            avg.jaccard.mean, avg.jaccard.std, avg.dice.mean, avg.dice.std
        ));
        println!("offset {offset}: dice {:.4}", avg.dice.mean);
    }
    write_atomic(&cli.out_dir.join("offsets.csv"), csv.as_bytes())?;
    record.plan = Some(base);
    Ok(())
}
