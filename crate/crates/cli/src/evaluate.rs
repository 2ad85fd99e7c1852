//! eval category | instance | cl.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use egobench::eval::{
    cl_evaluate, federated_ap_category, instance_ap, ClReport, EvalConfig, EvalReport, ExperienceStream, StreamMode,
};
use egobench::schema::{load_predictions, Dataset, LabelSpace, Prediction, PredictionMode};
use egobench::splits::{load_splits, SplitSpec};

use crate::args::{ClArgs, EvalArgs, EvalOptions};
use crate::data::open;
use crate::{write_json, write_text, Ctx, Status};

fn config(o: &EvalOptions) -> EvalConfig {
    let mut cfg = EvalConfig {
        buckets: o.buckets,
        max_dets: o.max_dets,
        ..EvalConfig::default()
    };
    if let Some(t) = &o.iou_thresholds {
        cfg.iou_thresholds = t.clone();
    }
    cfg
}

fn splits(path: &Path) -> Result<SplitSpec> {
    load_splits(path).with_context(|| format!("loading splits {}", path.display()))
}

fn predictions(path: &Path, mode: PredictionMode, d: &Dataset, labels: LabelSpace<'_>) -> Result<Vec<Prediction>> {
    load_predictions(path, mode, d, labels).with_context(|| format!("loading predictions {}", path.display()))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", v * 100.0))
}

fn print_report(r: &EvalReport) {
    println!("mode        {}", r.mode);
    println!("units       {}", r.num_units);
    println!("AP          {}", pct(Some(r.ap)));
    println!("AP50        {}", pct(r.ap50));
    println!("AP75        {}", pct(r.ap75));
    if r.mode == PredictionMode::Instance {
        println!("AP50_seen   {}", pct(r.ap50_seen));
        println!("AP50_unseen {}", pct(r.ap50_unseen));
    }
    if let Some(b) = &r.buckets {
        for (k, v) in [
            ("AP50_l", b.ap50_l),
            ("AP50_m", b.ap50_m),
            ("AP50_s", b.ap50_s),
            ("AP50_bright", b.ap50_bright),
            ("AP50_dim", b.ap50_dim),
            ("AP50_simple", b.ap50_simple),
            ("AP50_busy", b.ap50_busy),
        ] {
            println!("{k:<11} {}", pct(v));
        }
    }
}

fn unit_csv(r: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "num_gt".to_string(), "ap".to_string()];
    header.extend(r.iou_thresholds.iter().map(|t| format!("ap@{t}")));
    if r.mode == PredictionMode::Instance {
        header.push("unseen".into());
    }
    w.write_record(&header)?;
    for u in &r.per_unit {
        let mut row = vec![u.id.to_string(), u.num_gt.to_string(), u.ap.to_string()];
        row.extend(u.ap_by_threshold.iter().map(f64::to_string));
        if let Some(unseen) = u.unseen {
            row.push(unseen.to_string());
        }
        w.write_record(&row)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn finish(r: &EvalReport, a: &EvalArgs) -> Result<Status> {
    print_report(r);
    if let Some(out) = &a.out {
        write_json(out, r)?;
    }
    if let Some(csv) = &a.csv {
        write_text(csv, &unit_csv(r)?)?;
    }
    Ok(Status::Ok)
}

pub fn category(a: &EvalArgs, ctx: &Ctx) -> Result<Status> {
    let d = open(&a.dataset)?;
    let preds = predictions(&a.preds, PredictionMode::Category, &d, LabelSpace::Dataset)?;
    let mut cfg = config(&a.common);
    if let Some(p) = &a.splits {
        cfg.image_subset = Some(splits(p)?.eval_images().into_iter().collect());
    }
    finish(&federated_ap_category(&d, &preds, &cfg, &ctx.exec)?, a)
}

pub fn instance(a: &EvalArgs, ctx: &Ctx) -> Result<Status> {
    let Some(split_path) = &a.splits else {
        bail!("instance evaluation needs --splits");
    };
    let d = open(&a.dataset)?;
    let spec = splits(split_path)?;
    let registry: BTreeSet<u64> = spec.eval_instances();
    let preds = predictions(&a.preds, PredictionMode::Instance, &d, LabelSpace::Registry(&registry))?;
    finish(&instance_ap(&d, &preds, &spec, &config(&a.common), &ctx.exec)?, a)
}

fn relative_to(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn print_cl(r: &ClReport) {
    println!("experience  mAP");
    for (i, m) in r.per_experience_map.iter().enumerate() {
        println!("{i:>10}  {m:.2}");
    }
    println!("EAP {:.2}", r.eap);
}

pub fn cl(a: &ClArgs, ctx: &Ctx) -> Result<Status> {
    let stream = ExperienceStream::load(&a.stream).with_context(|| format!("loading stream {}", a.stream.display()))?;
    let base = a.stream.parent().unwrap_or(Path::new("")).to_path_buf();
    let cfg = config(&a.common);

    let report = if stream.has_precomputed_maps() {
        cl_evaluate(&stream, &[], None, None, &cfg, &ctx.exec)?
    } else {
        let dataset_path = match (&a.dataset, &stream.dataset) {
            (Some(p), _) => p.clone(),
            (None, Some(p)) => relative_to(&base, p),
            (None, None) => bail!("stream has no precomputed mAPs; pass --dataset"),
        };
        let d = open(&dataset_path)?;
        let spec = match (&a.splits, &stream.splits) {
            (Some(p), _) => Some(splits(p)?),
            (None, Some(p)) => Some(splits(&relative_to(&base, p))?),
            (None, None) => None,
        };
        let (mode, registry) = match stream.mode {
            StreamMode::DataIncrementalCategory => (PredictionMode::Category, None),
            StreamMode::ClassIncrementalInstance => {
                let Some(s) = &spec else {
                    bail!("instance streams need --splits");
                };
                (PredictionMode::Instance, Some(s.eval_instances()))
            }
        };
        let labels = registry.as_ref().map_or(LabelSpace::Dataset, LabelSpace::Registry);
        let dir = a.preds_dir.clone().unwrap_or_else(|| base.clone());
        let mut per_exp = Vec::with_capacity(stream.experiences.len());
        for (i, e) in stream.experiences.iter().enumerate() {
            let path = match &e.predictions {
                Some(p) => relative_to(&dir, p),
                None => dir.join(format!("exp_{i}.json")),
            };
            per_exp.push(predictions(&path, mode, &d, labels)?);
        }
        cl_evaluate(&stream, &per_exp, Some(&d), spec.as_ref(), &cfg, &ctx.exec)?
    };
    print_cl(&report);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    if let Some(csv_path) = &a.csv {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["experience", "map"])?;
        for (i, m) in report.per_experience_map.iter().enumerate() {
            w.write_record([i.to_string(), m.to_string()])?;
        }
        w.write_record(["EAP".to_string(), report.eap.to_string()])?;
        write_text(csv_path, &String::from_utf8(w.into_inner()?)?)?;
    }
    Ok(Status::Ok)
}
