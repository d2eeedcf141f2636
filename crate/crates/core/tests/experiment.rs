use ddgda_core::error::Error;
use ddgda_core::experiment::{run, sweep, with_param, ExperimentConfig};
use ddgda_core::metrics::Metric;

const BASE: &str = r#"
seeds = [0, 1]
metrics = ["mse", "nrmse"]

[scenario]
kind = "gradual"
feature_dim = 3
total_length = 300
rotation_rate = 0.03
noise_std = 0.1
seed = 11
period_length = 10

[tasks]
memory_k = 60
interval = 10
split_time = 150

[[methods]]
kind = "rr"

[[methods]]
kind = "gf_lin"

[[methods]]
kind = "ddgda_closed"
lags = 2
learning_rate = 0.001
epochs = 3
"#;

fn base() -> ExperimentConfig {
    ExperimentConfig::from_toml_str(BASE).unwrap()
}

#[test]
fn rr_is_exact_on_static_noiseless_stream() {
    let text = BASE
        .replace("rotation_rate = 0.03", "rotation_rate = 0.0")
        .replace("noise_std = 0.1", "noise_std = 0.0");
    // the default ridge shrinks the fit slightly; exactness needs it off
    let text = format!("{text}\n[linear]\nridge_lambda = 0.0\n");
    let manifest = run(&ExperimentConfig::from_toml_str(&text).unwrap()).unwrap();
    for seed in [0, 1] {
        let nrmse = manifest.cell("rr", seed).unwrap().metric(Metric::Nrmse).unwrap();
        assert!(nrmse < 1e-10, "nrmse {nrmse}");
    }
}

#[test]
fn zero_learning_rate_matches_rr_metrics() {
    let cfg = ExperimentConfig::from_toml_str(&BASE.replace("learning_rate = 0.001", "learning_rate = 0.0")).unwrap();
    let manifest = run(&cfg).unwrap();
    for seed in [0, 1] {
        let rr = manifest.cell("rr", seed).unwrap();
        let dd = manifest.cell("ddgda_closed", seed).unwrap();
        for m in [Metric::Mse, Metric::Nrmse] {
            let (a, b) = (rr.metric(m).unwrap(), dd.metric(m).unwrap());
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{m}: {a} vs {b}");
        }
    }
}

#[test]
fn one_report_per_method_and_seed() {
    let manifest = run(&base()).unwrap();
    assert_eq!(manifest.cells.len(), 6);
    assert_eq!(manifest.failed_cells(), 0);
    assert_eq!(manifest.metrics_csv().lines().count(), 7);
}

#[test]
fn single_value_sweep_equals_run() {
    let cfg = base();
    let direct = run(&cfg).unwrap();
    let swept = sweep(&cfg, "tasks.interval", &[toml::Value::Integer(10)]).unwrap();
    assert_eq!(swept.manifests.len(), 1);
    assert_eq!(swept.manifests[0].metrics_csv(), direct.metrics_csv());
}

#[test]
fn sweep_rows_cover_every_value_method_and_seed() {
    let values: Vec<toml::Value> = [5, 10, 15].iter().map(|&v| toml::Value::Integer(v)).collect();
    let result = sweep(&base(), "tasks.interval", &values).unwrap();
    assert_eq!(result.csv().lines().count() - 1, 3 * 3 * 2);
}

#[test]
fn bad_sweep_path_fails_before_any_run() {
    let values = [toml::Value::Integer(1), toml::Value::Integer(2)];
    assert!(matches!(
        sweep(&base(), "tasks.not_a_field", &values),
        Err(Error::InvalidParamPath(_))
    ));
    // a valid path with a value that breaks validation is also caught up front
    assert!(sweep(&base(), "tasks.interval", &[toml::Value::Integer(5), toml::Value::Integer(0)]).is_err());
    assert!(with_param(&base(), "methods", &toml::Value::Integer(1)).is_err());
}

#[test]
fn failing_cell_leaves_others_untouched() {
    let good = run(&base()).unwrap();
    let bad_cfg = ExperimentConfig::from_toml_str(&BASE.replace("lags = 2", "lags = 40")).unwrap();
    let bad = run(&bad_cfg).unwrap();
    assert_eq!(bad.failed_cells(), 2);
    for seed in [0, 1] {
        assert!(bad.cell("ddgda_closed", seed).unwrap().error.is_some());
        for method in ["rr", "gf_lin"] {
            assert_eq!(
                bad.cell(method, seed).unwrap().report,
                good.cell(method, seed).unwrap().report
            );
        }
    }
}

#[test]
fn reruns_are_identical() {
    let cfg = base();
    let a = run(&cfg).unwrap();
    let b = run(&cfg).unwrap();
    assert_eq!(a.metrics_csv(), b.metrics_csv());
    for (x, y) in a.cells.iter().zip(&b.cells) {
        assert_eq!(x.predictions, y.predictions);
        assert_eq!(x.train_loss_history, y.train_loss_history);
    }
}

#[test]
fn weight_dump_covers_every_train_sample() {
    let mut cfg = base();
    cfg.dump_weights = true;
    cfg.save_models = true;
    let mut manifest = run(&cfg).unwrap();
    let cell = manifest.cell("ddgda_closed", 0).unwrap();
    let mut by_task = std::collections::BTreeMap::<i64, (usize, f64)>::new();
    for r in &cell.weights {
        let e = by_task.entry(r.task_time).or_default();
        e.0 += 1;
        e.1 += r.q;
    }
    for (_, (n, total)) in by_task {
        assert_eq!(n, 60);
        assert!((total - 1.0).abs() < 1e-12);
    }
    let dir = tempfile::tempdir().unwrap();
    manifest.write_outputs(dir.path()).unwrap();
    assert!(dir.path().join("weights_gf_lin_seed1.csv").exists());
    assert!(dir.path().join("model_ddgda_closed_seed0.json").exists());
    assert!(!dir.path().join("model_rr_seed0.json").exists());
    assert_eq!(manifest.artifacts.len(), 6 + 2 + 2);
}
