use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn corgi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_corgi")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = corgi(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A tiny benchmark with a small, short-running model.
fn small_benchmark(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&["gen-synthetic", "--users", "30", "--items", "20", "--edges", "240", "--seed", "2", "--out", p(&data)]);
    let cfg = data.join("config.txt");
    let mut text = fs::read_to_string(&cfg).unwrap();
    text.push_str(
        "model.layers = 2\nmodel.node_dim = 8\nmodel.edge_dim = 8\nmodel.readout_hidden = 16\n\
         train.max_epochs = 4\nreport.bucket_edges = 5,8\n",
    );
    fs::write(&cfg, text).unwrap();
    cfg
}

#[test]
fn train_then_evaluate_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_benchmark(dir.path());
    for (name, extra) in [("plain", vec![]), ("cached", vec!["--cache"]), ("grape", vec!["--model", "gcn-grape"])] {
        let run = dir.path().join(name);
        let mut args = vec!["train", "--config", p(&cfg), "--out", p(&run), "--seed", "1"];
        args.extend(extra);
        ok(&args);
        for f in ["config.txt", "model.ckpt", "history.tsv", "metrics.tsv", "attention.tsv", "edges.tsv"] {
            assert!(run.join(f).exists(), "{name}: missing {f}");
        }
        let written = fs::read_to_string(run.join("metrics.tsv")).unwrap();
        assert!(written.starts_with("metric\tsplit\tbucket\tvalue\tn\n"));
        for bucket in ["all", "D<=5", "5<D<=8", "D>8"] {
            let has = written.lines().any(|l| l.split('\t').nth(2) == Some(bucket));
            assert!(has || bucket != "all", "{name}: no `{bucket}` rows");
        }
        let again = dir.path().join(format!("{name}-eval"));
        let printed = ok(&["evaluate", "--run", p(&run), "--out", p(&again)]);
        assert_eq!(fs::read_to_string(again.join("metrics.tsv")).unwrap(), written, "{name}");
        assert_eq!(printed, written);

        ok(&["export-attention", "--run", p(&run), "--out", p(&again)]);
        assert_eq!(
            fs::read_to_string(again.join("attention.tsv")).unwrap(),
            fs::read_to_string(run.join("attention.tsv")).unwrap()
        );
    }
    let attention = fs::read_to_string(dir.path().join("plain/attention.tsv")).unwrap();
    let mut lines = attention.lines();
    assert_eq!(lines.next(), Some("user\titem\tlayer\talphas"));
    for l in lines {
        let alphas: f64 = l.split('\t').nth(3).unwrap().split(' ').map(|a| a.parse::<f64>().unwrap()).sum();
        assert!((alphas - 1.0).abs() < 1e-9);
    }
    assert_eq!(fs::read_to_string(dir.path().join("grape/attention.tsv")).unwrap().lines().count(), 1);
}

#[test]
fn identical_commands_write_identical_histories() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_benchmark(dir.path());
    let strip = |t: String| -> String { t.lines().map(|l| l.rsplit_once('\t').unwrap().0.to_owned() + "\n").collect() };
    let mut seen = Vec::new();
    for name in ["a", "b"] {
        let run = dir.path().join(name);
        ok(&["train", "--config", p(&cfg), "--out", p(&run)]);
        seen.push((
            strip(fs::read_to_string(run.join("history.tsv")).unwrap()),
            fs::read(run.join("model.ckpt")).unwrap(),
            fs::read_to_string(run.join("metrics.tsv")).unwrap(),
        ));
    }
    assert_eq!(seen[0], seen[1]);
}

#[test]
fn failures_print_one_machine_readable_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    fs::write(&cfg, "model.layers = 2\nmodel.colour = blue\n").unwrap();
    let out = corgi(&["train", "--config", p(&cfg), "--out", p(&dir.path().join("run"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error\t"), "{err}");
    assert!(err.contains("model.colour"));

    let out = corgi(&["evaluate", "--run", p(&dir.path().join("nowhere"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error\t"));
}

#[test]
fn bench_cache_writes_both_modes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_benchmark(dir.path());
    let out = dir.path().join("bench");
    ok(&["bench-cache", "--config", p(&cfg), "--out", p(&out), "--max-epochs", "2"]);
    let table = fs::read_to_string(out.join("bench.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows[0], "mode\tepochs\tseconds_per_epoch\ttest_metric");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("uncached\t") || rows[1].starts_with("cached\t"));
    assert!(out.join("cached/metrics.tsv").exists() && out.join("uncached/metrics.tsv").exists());
}
