//! validate, coverage, consensus, split, stats.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use egobench::conditions::{check_video_coverage, main_instances};
use egobench::consensus::reconcile;
use egobench::schema::{load_dataset, validate as validate_dataset, Dataset};
use egobench::splits::{build_splits, load_splits, verify_splits, SplitMode, SplitOptions};
use egobench::stats::{compute_stats, Histogram1d, Histogram2d, StatsBins};

use crate::args::{ConsensusArgs, CoverageArgs, SplitArgs, SplitModeArg, StatsArgs, ValidateArgs};
use crate::{write_json, write_text, Ctx, Status};

pub fn open(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

pub fn validate(a: &ValidateArgs) -> Result<Status> {
    let d = open(&a.dataset)?;
    let violations = validate_dataset(&d);
    let (c, v, i, n) = d.counts();
    println!("{c} categories, {v} videos, {i} images, {n} annotations");
    for x in &violations {
        println!("{:<24} {}", x.code.as_str(), x.message);
    }
    if let Some(out) = &a.out {
        write_json(out, &violations)?;
    }
    if violations.is_empty() {
        println!("ok");
        Ok(Status::Ok)
    } else {
        println!("{} violation(s)", violations.len());
        Ok(Status::Violations)
    }
}

pub fn coverage(a: &CoverageArgs) -> Result<Status> {
    let d = open(&a.dataset)?;
    let ids = match a.instance {
        Some(i) => vec![i],
        None => main_instances(&d),
    };
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        reports.push(check_video_coverage(&d, id)?);
    }
    println!(
        "{:>10}  {:>7}  {:<16}  unmatched videos",
        "instance", "covered", "missing slots"
    );
    for r in &reports {
        let covered = r.slots.len() - r.missing_slots().len();
        let missing: Vec<String> = r.missing_slots().iter().map(u8::to_string).collect();
        let unmatched: Vec<String> = r.unmatched_video_ids.iter().map(u64::to_string).collect();
        println!(
            "{:>10}  {:>4}/{:<2}  {:<16}  {}",
            r.instance_id,
            covered,
            r.slots.len(),
            if missing.is_empty() {
                "-".to_string()
            } else {
                missing.join(",")
            },
            if unmatched.is_empty() {
                "-".to_string()
            } else {
                unmatched.join(",")
            },
        );
    }
    if let Some(out) = &a.out {
        write_json(out, &reports)?;
    }
    Ok(if reports.iter().all(|r| r.is_complete()) {
        Status::Ok
    } else {
        Status::Violations
    })
}

pub fn consensus(a: &ConsensusArgs, ctx: &Ctx) -> Result<Status> {
    let d = open(&a.dataset)?;
    let results = reconcile(&d, &ctx.exec)?;
    println!("{:>10}  {:>8}  scores", "image", "winner");
    for r in &results {
        let scores: Vec<String> = r.scores.iter().map(|(id, s)| format!("{id}:{s:.4}")).collect();
        println!("{:>10}  {:>8}  {}", r.image_id, r.winner, scores.join(" "));
    }
    if let Some(out) = &a.out {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["image_id", "annotator_id", "consensus_score", "is_winner"])?;
        for r in &results {
            for (id, s) in &r.scores {
                w.write_record([
                    r.image_id.to_string(),
                    id.to_string(),
                    s.to_string(),
                    (*id == r.winner).to_string(),
                ])?;
            }
        }
        write_text(out, &String::from_utf8(w.into_inner()?)?)?;
    }
    Ok(Status::Ok)
}

pub fn split(a: &SplitArgs, ctx: &Ctx) -> Result<Status> {
    let d = open(&a.dataset)?;
    if let Some(path) = &a.check {
        let spec = load_splits(path).with_context(|| format!("loading splits {}", path.display()))?;
        let violations = verify_splits(&d, &spec);
        for v in &violations {
            println!("{:<20} {}", v.code.as_str(), v.message);
        }
        return Ok(if violations.is_empty() {
            println!("ok");
            Status::Ok
        } else {
            println!("{} violation(s)", violations.len());
            Status::Violations
        });
    }
    let opts = SplitOptions {
        mode: match a.mode {
            SplitModeArg::Unified => SplitMode::Unified,
            SplitModeArg::Instdet => SplitMode::Instdet,
        },
        seed: ctx.seed,
        eval_fraction: a.eval_fraction,
        withheld_fraction: a.withheld_fraction,
        val_fraction: a.val_fraction,
    };
    let spec = build_splits(&d, &opts)?;
    println!("train images   {}", spec.train_images.len());
    println!("val images     {}", spec.val_images.len());
    println!("test images    {}", spec.test_images.len());
    println!("targets        {}", spec.targets.len());
    println!("unseen targets {}", spec.unseen_instance_ids.len());
    match &a.out {
        Some(out) => write_text(out, &format!("{}\n", spec.to_json()))?,
        None => println!("{}", spec.to_json()),
    }
    Ok(Status::Ok)
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn centers_rows(h: &Histogram2d) -> Vec<Vec<String>> {
    let w = 1.0 / h.bins as f64;
    let mut rows = Vec::new();
    for (r, row) in h.counts.iter().enumerate() {
        for (c, n) in row.iter().enumerate() {
            rows.push(vec![
                (c as f64 * w).to_string(),
                ((c + 1) as f64 * w).to_string(),
                (r as f64 * w).to_string(),
                ((r + 1) as f64 * w).to_string(),
                n.to_string(),
            ]);
        }
    }
    rows
}

fn size_rows(h: &Histogram1d) -> Vec<Vec<String>> {
    (0..h.counts.len())
        .map(|i| {
            let (lo, hi) = h.edges(i);
            vec![lo.to_string(), hi.to_string(), h.counts[i].to_string()]
        })
        .collect()
}

pub fn stats(a: &StatsArgs, ctx: &Ctx) -> Result<Status> {
    let d = open(&a.dataset)?;
    let bins = StatsBins {
        center: a.center_bins,
        size: a.size_bins,
        size_max: a.size_max,
    };
    let r = compute_stats(&d, &bins, &ctx.exec)?;
    let dir = &a.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    write_csv(
        &dir.join("categories.csv"),
        &["category_id", "name", "instances", "annotations", "images"],
        r.categories.iter().map(|c| {
            vec![
                c.category_id.to_string(),
                c.name.clone(),
                c.instance_count.to_string(),
                c.annotation_count.to_string(),
                c.image_count.to_string(),
            ]
        }),
    )?;
    let center_header = ["x_lo", "x_hi", "y_lo", "y_hi", "count"];
    write_csv(
        &dir.join("centers_main.csv"),
        &center_header,
        centers_rows(&r.centers_main),
    )?;
    write_csv(
        &dir.join("centers_all.csv"),
        &center_header,
        centers_rows(&r.centers_all),
    )?;
    let size_header = ["size_lo", "size_hi", "count"];
    write_csv(&dir.join("sizes_main.csv"), &size_header, size_rows(&r.sizes_main))?;
    write_csv(&dir.join("sizes_all.csv"), &size_header, size_rows(&r.sizes_all))?;
    write_csv(
        &dir.join("metadata.csv"),
        &["tag", "value", "videos"],
        r.metadata.iter().flat_map(|(tag, values)| {
            values
                .iter()
                .map(move |(v, n)| vec![tag.clone(), v.clone(), n.to_string()])
        }),
    )?;
    let s = &r.summary;
    let summary = [
        ("images", s.images.to_string()),
        ("annotations", s.annotations.to_string()),
        ("instances", s.instances.to_string()),
        ("main_instances", s.main_instances.to_string()),
        ("secondary_instances", s.secondary_instances.to_string()),
        ("incidences", s.incidences.to_string()),
        ("mean_instances_per_image", s.mean_instances_per_image.to_string()),
        ("mean_images_per_instance", s.mean_images_per_instance.to_string()),
    ];
    write_csv(
        &dir.join("summary.csv"),
        &["key", "value"],
        summary.iter().map(|(k, v)| vec![k.to_string(), v.clone()]),
    )?;
    for (k, v) in &summary {
        println!("{k:<26} {v}");
    }
    println!("wrote 7 tables to {}", dir.display());
    Ok(Status::Ok)
}
