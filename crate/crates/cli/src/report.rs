//! Report serialization: `report.json`, the CSV side files, and the
//! plain-text rendering used by the `report` subcommand.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rtn_core::data::DomainDataset;
use rtn_core::layers::Network;
use rtn_core::Result;

use crate::ablate::AblationTable;
use crate::train::MetricsReport;

/// Serialize the report deterministically (struct field order, shortest
/// round-trip floats, trailing newline).
pub fn report_to_json(report: &MetricsReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<()> {
    fs::write(path, report_to_json(report)?)?;
    Ok(())
}

pub fn load_report_json(path: &Path) -> Result<MetricsReport> {
    let text = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Per-step loss components plus target accuracy at evaluation points.
pub fn write_curves_csv(report: &MetricsReport, path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "step,source_ce,mmd,entropy,target_accuracy")?;
    for rec in &report.curves {
        let acc = report
            .evals
            .iter()
            .find(|e| e.step == rec.step)
            .map(|e| e.target_accuracy.to_string())
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{acc}",
            rec.step, rec.source_ce, rec.mmd, rec.entropy
        )?;
    }
    // Evaluation points past the last loss record (the final one).
    for e in &report.evals {
        if e.step >= report.curves.len() {
            writeln!(out, "{},,,,{}", e.step, e.target_accuracy)?;
        }
    }
    Ok(())
}

/// Target predictions with a 2-D embedding: the first two bottleneck
/// coordinates, for plotting.
pub fn write_predictions_csv(net: &Network, ds: &DomainDataset, path: &Path) -> Result<()> {
    let out_heads = net.forward(ds.target_x())?;
    let preds = net.predict(ds.target_x())?;
    let mut out = fs::File::create(path)?;
    writeln!(out, "index,predicted,e0,e1")?;
    for (i, &p) in preds.iter().enumerate() {
        let row = out_heads.fcb_feats.row(i);
        let e0 = row.first().copied().unwrap_or(0.0);
        let e1 = row.get(1).copied().unwrap_or(0.0);
        writeln!(out, "{i},{p},{e0},{e1}")?;
    }
    Ok(())
}

pub fn write_ablation_csv(table: &AblationTable, path: &Path) -> Result<()> {
    let mut out = fs::File::create(path)?;
    writeln!(out, "variant,seed,accuracy")?;
    for row in &table.rows {
        for cell in &row.cells {
            writeln!(out, "{},{},{}", row.variant, cell.seed, cell.accuracy)?;
        }
    }
    Ok(())
}

pub fn render_ablation(table: &AblationTable) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "| variant | mean accuracy | std |");
    let _ = writeln!(s, "|---|---|---|");
    for row in &table.rows {
        let _ = writeln!(s, "| {} | {:.4} | {:.4} |", row.variant, row.mean, row.std);
    }
    s
}

/// Plain-text/markdown rendering of a stored report.
pub fn render_report(report: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# training report");
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "- dataset: {}\n- variant: {}\n- seed: {}\n- steps: {} (batch {})",
        report.dataset,
        report.config.variant,
        report.seed,
        report.config.total_steps,
        report.config.batch_size
    );
    let _ = writeln!(
        s,
        "- lambda: {} (effective {}), gamma: {} (effective {})",
        report.config.lambda,
        report.config.effective_lambda(),
        report.config.gamma,
        report.config.effective_gamma()
    );
    let _ = writeln!(
        s,
        "- final accuracy: source {:.4}, target {:.4}",
        report.final_source_accuracy, report.final_target_accuracy
    );
    if report.bandwidth_fallbacks > 0 {
        let _ = writeln!(
            s,
            "- degenerate-median bandwidth fallbacks: {}",
            report.bandwidth_fallbacks
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "## accuracy over steps");
    let _ = writeln!(s);
    let _ = writeln!(s, "| step | source acc | target acc |");
    let _ = writeln!(s, "|---|---|---|");
    for e in &report.evals {
        let _ = writeln!(
            s,
            "| {} | {:.4} | {:.4} |",
            e.step, e.source_accuracy, e.target_accuracy
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(s, "## head responses on target data (|value|)");
    let _ = writeln!(s);
    let _ = writeln!(s, "| head | mean | std |");
    let _ = writeln!(s, "|---|---|---|");
    let lr = &report.layer_response;
    let _ = writeln!(
        s,
        "| f_T | {:.6} | {:.6} |",
        lr.f_t_abs.mean, lr.f_t_abs.std
    );
    let _ = writeln!(
        s,
        "| delta_f | {:.6} | {:.6} |",
        lr.delta_f_abs.mean, lr.delta_f_abs.std
    );
    let _ = writeln!(
        s,
        "| f_S | {:.6} | {:.6} |",
        lr.f_s_abs.mean, lr.f_s_abs.std
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "## final target confusion (rows = true class)");
    let _ = writeln!(s);
    for row in &report.confusion {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "| {} |", cells.join(" | "));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::train::train;
    use rtn_core::data::{gen_conditional_shift, ShiftFamily, ShiftSpec};

    fn quick_run() -> (Network, MetricsReport, DomainDataset) {
        let mut spec = ShiftSpec::new(ShiftFamily::ConditionalBoundary, 0.5, 61);
        spec.n_source = 80;
        spec.n_target = 80;
        let ds = gen_conditional_shift(&spec).unwrap();
        let cfg = TrainConfig {
            total_steps: 20,
            batch_size: 16,
            eval_interval: 10,
            feature_widths: vec![8],
            bottleneck: 4,
            ..TrainConfig::default()
        };
        let (net, report) = train(&ds, &cfg).unwrap();
        (net, report, ds)
    }

    #[test]
    fn report_json_round_trips() {
        let (_, report, _) = quick_run();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_report_json(&report, &path).unwrap();
        let loaded = load_report_json(&path).unwrap();
        assert_eq!(loaded.final_target_accuracy, report.final_target_accuracy);
        assert_eq!(loaded.curves.len(), report.curves.len());
        // The wall clock is excluded from serialization.
        assert_eq!(loaded.wall_clock_secs, 0.0);
    }

    #[test]
    fn csv_outputs_have_expected_shape() {
        let (net, report, ds) = quick_run();
        let dir = tempfile::tempdir().unwrap();
        let curves = dir.path().join("curves.csv");
        write_curves_csv(&report, &curves).unwrap();
        let text = fs::read_to_string(&curves).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,source_ce,mmd,entropy,target_accuracy");
        // 20 loss rows + final eval row.
        assert_eq!(lines.len(), 1 + 20 + 1);

        let preds = dir.path().join("predictions.csv");
        write_predictions_csv(&net, &ds, &preds).unwrap();
        let text = fs::read_to_string(&preds).unwrap();
        assert_eq!(text.lines().count(), 1 + ds.n_target());
    }

    #[test]
    fn rendering_includes_key_fields() {
        let (_, report, _) = quick_run();
        let rendered = render_report(&report);
        assert!(rendered.contains("final accuracy"));
        assert!(rendered.contains("f_T"));
        assert!(rendered.contains("confusion"));
    }
}
