//! kernels selftest, match.

use anyhow::{Context, Result};
use egobench::instindex::{build_index, load_embeddings, load_proposals, match_proposals as run_match};
use egobench::kernels::selftest::{run_selftest, SelfTestConfig};
use egobench::schema::{predictions_to_json, PredictionMode};

use crate::args::{MatchArgs, SelftestArgs};
use crate::{write_json, write_text, Ctx, Status};

pub fn selftest(a: &SelftestArgs, ctx: &Ctx) -> Result<Status> {
    let cfg = SelfTestConfig {
        seed: ctx.seed,
        probes: a.probes,
        ..SelfTestConfig::default()
    };
    let r = run_selftest(&cfg);
    println!(
        "{:<28} {:>6} {:>7} {:>8} {:>12}  result",
        "gradient", "probes", "skipped", "failures", "max rel err"
    );
    for g in &r.gradients {
        println!(
            "{:<28} {:>6} {:>7} {:>8} {:>12.3e}  {}",
            g.name,
            g.probes,
            g.skipped,
            g.failures,
            g.max_rel_error,
            if g.passed() { "pass" } else { "FAIL" }
        );
    }
    println!(
        "{:<28} {:>6} {:>12} {:>12}  result",
        "oracle", "cases", "max abs err", "tolerance"
    );
    for o in &r.oracles {
        println!(
            "{:<28} {:>6} {:>12.3e} {:>12.1e}  {}",
            o.name,
            o.cases,
            o.max_abs_error,
            o.tolerance,
            if o.passed() { "pass" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        write_json(out, &r)?;
    }
    Ok(if r.passed() { Status::Ok } else { Status::Violations })
}

pub fn match_proposals(a: &MatchArgs, ctx: &Ctx) -> Result<Status> {
    let refs = load_embeddings(&a.embeddings).with_context(|| format!("loading {}", a.embeddings.display()))?;
    let props = load_proposals(&a.proposals).with_context(|| format!("loading {}", a.proposals.display()))?;
    let index = build_index(&refs, a.threshold)?;
    let preds = run_match(&index, &props, &ctx.exec)?;
    println!(
        "{} instances registered, {} of {} proposals matched",
        index.len(),
        preds.len(),
        props.len()
    );
    write_text(
        &a.out,
        &format!("{}\n", predictions_to_json(&preds, PredictionMode::Instance)),
    )?;
    Ok(Status::Ok)
}
