use std::fs;
use std::path::Path;
use std::process::Command;

use reef_cli::*;
use reef_core::flops::count_adapter_flops;
use reef_core::io::{read_features, MetricsRow};
use reef_core::{ReefError, RunConfig, Strategy};

fn small() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.seed = 5;
    cfg.adapter.dim = 16;
    cfg.adapter.tokens = 16;
    cfg.adapter.queries = 4;
    cfg.adapter.bank_capacity = 4;
    cfg.adapter.k_spat = 4;
    cfg.adapter.n_samples = 64;
    cfg.train.initial_epochs = 1;
    cfg.train.main_epochs = 1;
    cfg.data.streams = 12;
    cfg.data.frames = 10;
    cfg
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn gen_is_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    cmd_gen(&cfg, &dir.path().join("a")).unwrap();
    cmd_gen(&cfg, &dir.path().join("b")).unwrap();
    assert_eq!(files(&dir.path().join("a")), files(&dir.path().join("b")));
    let mut other = cfg.clone();
    other.seed = 6;
    cmd_gen(&other, &dir.path().join("c")).unwrap();
    assert_ne!(files(&dir.path().join("a")), files(&dir.path().join("c")));
}

#[test]
fn gen_header_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = cmd_gen(&small(), dir.path()).unwrap();
    let back = load_corpus(dir.path()).unwrap();
    assert_eq!(back.streams, corpus.streams);
    assert_eq!(back.test, corpus.test);
    let bytes = fs::read(dir.path().join("stream_0000.reef")).unwrap();
    assert_eq!(&bytes[..4], b"REEF");
    let header: Vec<u32> = bytes[4..20]
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(header, vec![1, 10, 16, 16]);
    assert_eq!(read_features(&dir.path().join("stream_0000.reef")).unwrap(), corpus.streams[0].frames);
}

#[test]
fn probe_separates_generated_classes() {
    // Nearest class mean on the planted block, fit on training streams.
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.data.streams = 120;
    cfg.data.noise_scale = 0.1;
    cmd_gen(&cfg, dir.path()).unwrap();
    let corpus = load_corpus(dir.path()).unwrap();
    let block = [10usize, 11, 14, 15];
    let feature = |i: usize| -> Vec<f64> {
        let s = &corpus.streams[i];
        let mut acc = vec![0f64; 16];
        for &t in &s.planted {
            for &b in &block {
                acc.iter_mut().zip(s.frames[t].row(b)).for_each(|(a, &v)| *a += v as f64);
            }
        }
        acc
    };
    let mut means = vec![(vec![0f64; 16], 0usize); 4];
    for &i in &corpus.train {
        let (m, n) = &mut means[corpus.streams[i].class];
        m.iter_mut().zip(feature(i)).for_each(|(a, v)| *a += v);
        *n += 1;
    }
    let means: Vec<Vec<f64>> = means.into_iter().map(|(m, n)| m.into_iter().map(|v| v / n as f64).collect()).collect();
    let correct = corpus
        .test
        .iter()
        .filter(|&&i| {
            let f = feature(i);
            let dist = |m: &Vec<f64>| f.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let pred = (0..4).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
            pred == corpus.streams[i].class
        })
        .count();
    assert!(correct as f64 / corpus.test.len() as f64 > 0.95);
}

#[test]
fn train_writes_complete_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    cmd_gen(&cfg, &dir.path().join("corpus")).unwrap();
    let out = dir.path().join("run");
    let report = cmd_train(&cfg, &dir.path().join("corpus"), &out).unwrap();
    assert_eq!(report.seed, 5);
    assert!(report.temporal_frozen);
    let names: Vec<String> = files(&out).into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        ["config.toml", "epochs.csv", "initial.ckpt", "metrics.csv", "model.ckpt", "report.toml"]
    );
    let text = fs::read_to_string(out.join(REPORT_FILE)).unwrap();
    assert!(text.contains("seed = 5"));
}

#[test]
fn train_rejects_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small();
    cmd_gen(&cfg, dir.path()).unwrap();
    let mut other = cfg.clone();
    other.adapter.dim = 8;
    let err = cmd_train(&other, dir.path(), &dir.path().join("run")).unwrap_err();
    assert!(matches!(&err, ReefError::Config { field, .. } if field == "tokens"));
    assert_eq!(exit_code(&err), 2);
    assert!(!dir.path().join("run").join(CHECKPOINT_FILE).exists());
}

fn compare_rows(cfg: &RunConfig, dir: &Path) -> Vec<MetricsRow> {
    cmd_gen(cfg, &dir.join("corpus")).unwrap();
    cmd_compare(
        cfg,
        &dir.join("corpus"),
        &ModelSource::Fresh,
        &Strategy::ALL,
        &dir.join("cmp"),
    )
    .unwrap()
}

#[test]
fn compare_covers_each_strategy_once() {
    let dir = tempfile::tempdir().unwrap();
    let rows = compare_rows(&small(), dir.path());
    let names: Vec<&str> = rows.iter().map(|r| r.strategy.as_str()).collect();
    assert_eq!(names, ["fifo", "avgpool", "tts", "mbc", "rtc"]);
    let get = |s: &str| rows.iter().find(|r| r.strategy == s).unwrap();
    let (rtc, mbc) = (get("rtc").flops as f64, get("mbc").flops as f64);
    // At this width the only gap is the temporal scorer itself.
    let mut cfg = small();
    cfg.adapter.strategy = Strategy::Rtc;
    let scorer = count_adapter_flops(&cfg.adapter, cfg.data.frames).unwrap().component("temporal_scorer");
    assert_eq!(rtc - mbc, scorer as f64);
    assert!(rows.iter().all(|r| r.flops < r.flops_no_stf));
    let csv = fs::read_to_string(dir.path().join("cmp").join(COMPARE_FILE)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "strategy,loss,recall,chance,first_token_accuracy,flops,flops_no_stf");
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn early_signal_survives_merging_not_fifo() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small();
    cfg.data.frames = 20;
    cfg.data.signal_fraction = 0.15;
    cfg.data.signal_span = 0.25;
    let rows = compare_rows(&cfg, dir.path());
    let get = |s: &str| rows.iter().find(|r| r.strategy == s).unwrap().recall;
    assert_eq!(get("fifo"), 0.0);
    assert!(get("rtc") >= get("fifo"));
    assert!(get("rtc") > 0.0);
}

#[test]
fn compare_rejects_bad_strategy_lists() {
    assert!(matches!("lru".parse::<Strategy>(), Err(ReefError::Argument(_))));
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_compare(
        &small(),
        dir.path(),
        &ModelSource::Fresh,
        &[Strategy::Rtc, Strategy::Rtc],
        dir.path(),
    )
    .unwrap_err();
    assert_eq!(exit_code(&err), 2);
}

#[test]
fn flops_instrumented_counts_agree() {
    let dir = tempfile::tempdir().unwrap();
    let s = cmd_flops(&small(), 10, false, true, dir.path()).unwrap();
    let i = s.instrumented.unwrap();
    assert!(i.max_relative_gap < 0.05, "{i:?}");
    assert!(i.measured_cross_macs > 0);
    assert!(s.delta_percent < 0.0);
    let full = cmd_flops(&small(), 10, true, false, dir.path()).unwrap();
    assert!((-45.0..=-25.0).contains(&full.delta_percent));
}

#[test]
fn flops_zero_frames_is_an_argument_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = cmd_flops(&small(), 0, false, false, dir.path()).unwrap_err();
    assert_eq!(exit_code(&err), 2);
}

fn reef(args: &[&str], env: &[(&str, &str)]) -> (i32, String) {
    let mut c = Command::new(env!("CARGO_BIN_EXE_reef"));
    c.args(args).env_remove("REEF_SEED");
    for (k, v) in env {
        c.env(k, v);
    }
    let out = c.output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stdout).into_owned())
}

#[test]
fn binary_exit_codes_and_seed_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, small().to_toml_string()).unwrap();
    let c = cfg_path.to_str().unwrap();

    let (code, out) = reef(&["gen", "--config", c, "--out", &format!("{d}/a")], &[("REEF_SEED", "41")]);
    assert_eq!(code, 0);
    assert!(out.contains("seed 41"));
    let echoed = RunConfig::load(&dir.path().join("a").join(CONFIG_FILE)).unwrap();
    assert_eq!(echoed.seed, 41);

    let (code, out) = reef(&["gen", "--config", c, "--seed", "3", "--out", &format!("{d}/b")], &[("REEF_SEED", "41")]);
    assert_eq!(code, 0);
    assert!(out.contains("seed 3"));

    let (code, _) = reef(&["gen", "--config", c, "--alpha", "1.5", "--out", &format!("{d}/c")], &[]);
    assert_eq!(code, 2);
    fs::write(dir.path().join("bad.toml"), "[adapter]\nbogus = 1\n").unwrap();
    let (code, _) = reef(&["gen", "--config", &format!("{d}/bad.toml"), "--out", &format!("{d}/c")], &[]);
    assert_eq!(code, 2);
    let (code, _) = reef(&["train", "--config", c, "--corpus", &format!("{d}/missing"), "--out", &format!("{d}/r")], &[]);
    assert_eq!(code, 4);
    let (code, _) = reef(&["flops", "--config", c, "--out", &format!("{d}/f")], &[]);
    assert_eq!(code, 0);
}
