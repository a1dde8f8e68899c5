use std::path::PathBuf;

use anyhow::{anyhow, Context};
use sk_unet::metrics::{aggregate, evaluate, render_table, write_csv};
use sk_unet::volume::{list_label_ids, read_labels};

use crate::config::Resolver;
use crate::{CliResult, EvalArgs};

pub fn run(a: EvalArgs) -> CliResult {
    let mut r = Resolver::new(a.config.as_deref())?;
    let pred = r.path("pred", a.pred)?;
    let gt = r.path("gt", a.gt)?;
    let report = r.path("report", a.report)?;
    let resolved = r.finish()?;

    let pred_ids = list_label_ids(&pred)?;
    let gt_ids = list_label_ids(&gt)?;
    if pred_ids != gt_ids {
        let only = |a: &[String], b: &[String]| -> Vec<String> { a.iter().filter(|x| !b.contains(x)).cloned().collect() };
        return Err(anyhow!(
            "patient sets differ: only in pred {:?}, only in gt {:?}",
            only(&pred_ids, &gt_ids),
            only(&gt_ids, &pred_ids)
        )
        .into());
    }
    if gt_ids.is_empty() {
        return Err(anyhow!("no label volumes in {}", gt.display()).into());
    }
    let mut reports = Vec::with_capacity(gt_ids.len());
    for id in &gt_ids {
        let p = read_labels(&pred, id)?;
        let g = read_labels(&gt, id)?;
        reports.push(evaluate(&p, &g).with_context(|| format!("evaluating {id}"))?);
    }
    let summary = aggregate(&reports);
    if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_csv(&report, &reports, &summary)?;
    let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    let cfg_path: PathBuf = report.with_file_name(format!("{stem}_run_config.txt"));
    resolved.write(&cfg_path)?;
    println!("{} patients", reports.len());
    print!("{}", render_table(&summary));
    Ok(())
}
