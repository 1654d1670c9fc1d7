use std::fs;
use std::path::Path;

use ldp_aimd::experiment::{
    self, paper_suite, point_dir, ExperimentFile, RunOptions, TRACE_COLUMNS,
};

fn suite(name: &str, steps: u64) -> ExperimentFile {
    let mut f = paper_suite()
        .into_iter()
        .find(|(n, _)| *n == name)
        .unwrap()
        .1;
    f.system.steps = steps;
    f
}

fn opts(out: &Path) -> RunOptions {
    RunOptions {
        out: Some(out.to_path_buf()),
        ..RunOptions::default()
    }
}

#[test]
fn sigma_grid_writes_nine_summaries_and_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let file = suite("gaussian_sigma_grid.json", 2000);
    let report = experiment::run_experiment(&file, &opts(dir.path())).unwrap();
    assert_eq!(report.points.len(), 9);
    assert!(report.points.iter().all(|p| p.is_ok()));
    for i in 0..9 {
        let dir = point_dir(dir.path(), i);
        assert!(dir.join("summary.json").is_file());
        assert!(!dir.join("trace.csv").exists());
    }
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 10);
    assert!(lines[0].starts_with("point,/noise/0/scale,/noise/1/scale,/seed,seed,steps,cost_ratio"));
    assert!(lines[1..].iter().all(|l| l.ends_with(",ok")));
}

#[test]
fn trace_rows_and_nullable_columns() {
    let dir = tempfile::tempdir().unwrap();
    let file = suite("gaussian.json", 500);
    let o = RunOptions {
        emit_trace: true,
        ..opts(dir.path())
    };
    experiment::run_experiment(&file, &o).unwrap();
    let mut reader = csv::Reader::from_path(point_dir(dir.path(), 0).join("trace.csv")).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, TRACE_COLUMNS);
    let mut rows = 0;
    let mut events = 0;
    for record in reader.records() {
        let r = record.unwrap();
        rows += 1;
        let fired = &r[5] == "1";
        events += usize::from(fired);
        assert_eq!(r[6].is_empty(), !fired, "lambda_hat in {r:?}");
        assert_eq!(r[7].is_empty(), !fired, "noisy_derivative in {r:?}");
        let x: f64 = r[3].parse().unwrap();
        assert!(x >= 0.0);
    }
    assert_eq!(rows, 500 * 6 * 2);
    assert!(events > 0);
}

#[test]
fn summaries_are_byte_identical() {
    let file = suite("gaussian_sigma_grid.json", 1500);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    experiment::run_experiment(
        &file,
        &RunOptions {
            jobs: Some(1),
            ..opts(a.path())
        },
    )
    .unwrap();
    experiment::run_experiment(
        &file,
        &RunOptions {
            jobs: Some(4),
            ..opts(b.path())
        },
    )
    .unwrap();
    for i in 0..9 {
        let x = fs::read(point_dir(a.path(), i).join("summary.json")).unwrap();
        let y = fs::read(point_dir(b.path(), i).join("summary.json")).unwrap();
        assert_eq!(x, y, "point {i}");
    }
    assert_eq!(
        fs::read(a.path().join("sweep.csv")).unwrap(),
        fs::read(b.path().join("sweep.csv")).unwrap()
    );
}

#[test]
fn command_line_overrides_apply_to_base_system() {
    let mut file = suite("noiseless.json", 1000);
    let o = RunOptions {
        seed: Some(9),
        steps: Some(321),
        ..RunOptions::default()
    };
    experiment::apply_overrides(&mut file, &o).unwrap();
    assert_eq!(file.system.seed, 9);
    assert_eq!(file.system.steps, 321);
    let o = RunOptions {
        steps: Some(0),
        ..RunOptions::default()
    };
    assert_eq!(
        experiment::apply_overrides(&mut file, &o)
            .unwrap_err()
            .exit_code(),
        2
    );
}

#[test]
fn noiseless_summary_contents() {
    let dir = tempfile::tempdir().unwrap();
    let file = suite("noiseless.json", 20_000);
    let report = experiment::run_experiment(&file, &opts(dir.path())).unwrap();
    let p = report.points[0].as_ref().unwrap();
    let s = &p.summary;
    assert!(s.cost_ratio.unwrap() >= 1.0);
    assert_eq!(s.total_bits, s.event_counts.iter().sum::<u64>());
    assert!(s.max_bits_per_step <= 2);
    assert_eq!(s.comm_bits_cumulative.last().unwrap().value, s.total_bits);
    assert!(s.comm_bits_cumulative.len() <= experiment::SUMMARY_SERIES_POINTS);
    let json: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(point_dir(dir.path(), 0).join("summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(
        json["summary"]["noise_scales"][0],
        serde_json::json!([0.0, 0.0])
    );
    assert!(json["optimum"]["x_star"].as_array().unwrap().len() == 6);
}

#[test]
fn emitted_suite_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let files = experiment::emit_paper_suite(dir.path()).unwrap();
    assert_eq!(files.len(), 4);
    for f in files {
        ExperimentFile::load(&f).unwrap();
    }
}
