use lcvi::config::ExperimentConfig;
use lcvi::pipeline::{read_trace_file, run_pipeline, sweep, sweep_file, trace_file_name, SweepAxis};
use lcvi::Regime;

fn config(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(
        r#"
[model]
kind = "eight_schools"

[decision]
loss = { family = "tilted", q = 0.2 }
transform = "linearized"

[optimizer]
epochs = 80
batch_rows = 8
s_theta = 5
s_y = 3
trace_every = 20

[evaluation]
s_theta = 30
s_y = 3

[run]
seeds = [0, 1]
output_dir = "unused"
wall_clock = false
"#,
    )
    .unwrap();
    cfg.run.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn standard_vi_regime_reports_no_improvement() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.optimizer.regime = Regime::StandardVi;
    let result = run_pipeline(&cfg).unwrap();
    for o in &result.outcomes {
        assert_eq!(o.improvement, 0.0);
        assert_eq!(o.er_vi, o.er_lcvi);
        assert!(o.m.is_none());
    }
    assert_eq!(result.report.report.improvement, 0.0);
}

#[test]
fn pipeline_writes_traces_summary_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    let result = run_pipeline(&cfg).unwrap();
    for o in &result.outcomes {
        let trace = read_trace_file(dir.path().join(trace_file_name(o.seed))).unwrap();
        assert_eq!(trace.rows.len(), o.trace.rows.len());
        assert!(trace.rows.windows(2).all(|w| w[0].epoch < w[1].epoch));
        assert!(o.m.unwrap() > 0.0);
        assert!(o.er_vi > 0.0 && o.er_lcvi > 0.0);
        let expected = (o.er_vi - o.er_lcvi) / o.er_vi;
        assert!((o.improvement - expected).abs() < 1e-12);
    }
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("# lcvi "));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seeds"], serde_json::json!([0, 1]));
    assert_eq!(report["config"]["decision"]["loss"]["family"], "tilted");
}

#[test]
fn quantile_sweep_emits_one_row_per_value() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(dir.path());
    cfg.run.seeds = vec![3];
    let values: Vec<String> = ["0.5", "0.7", "0.9", "0.999*10"].iter().map(|s| s.to_string()).collect();
    let rows = sweep(&cfg, SweepAxis::Quantile, &values).unwrap();
    assert_eq!(rows.len(), 4);
    let table = std::fs::read_to_string(sweep_file(&cfg)).unwrap();
    let body: Vec<&str> = table.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body.len(), 5);
    assert!(body[4].starts_with("0.999*10,"));
}

#[test]
fn bad_sweep_values_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path());
    for (axis, value) in [
        (SweepAxis::Quantile, "1.5"),
        (SweepAxis::SampleBudget, "30by10"),
        (SweepAxis::Regime, "gradient_descent"),
    ] {
        assert!(sweep(&cfg, axis, &[value.to_string()]).is_err(), "{value}");
    }
    assert!(!sweep_file(&cfg).exists());
}
