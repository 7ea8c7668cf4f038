use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fusenav::model::init_model;
use fusenav::numeric::{adam_step, AdamState};
use fusenav::sim::Scenario;
use fusenav::Error;
use fusenav_cli::checkpoint::Checkpoint;
use fusenav_cli::commands::{self, BEST_CHECKPOINT, EVAL_REPORT, GRADCHECK_REPORT, MANIFEST, TRAIN_LOG};
use fusenav_cli::config::RunConfig;
use fusenav_cli::{exit_code, EXIT_CHECK, EXIT_IO, EXIT_USAGE};
use proptest::prelude::*;
use serde_json::Value;
use tempfile::TempDir;

fn fusenav(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusenav"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 4\noutput_dir = \"run\"\n\n[data]\nroot = \"data\"\ntrain_split = [0]\n\n[sim]\nframes = 12\n\n[train]\ntotal_epochs = 2\nbatch_size = 4\n\n[eval]\nbench_frames = 20\nbench_warmup = 2\n{extra}"
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn records(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn record<'a>(rs: &'a [Value], kind: &str) -> Vec<&'a Value> {
    rs.iter().filter(|r| r["record"] == kind).collect()
}

#[test]
fn config_text_round_trips() {
    let d = RunConfig::default();
    let text = d.to_toml().unwrap();
    assert_eq!(RunConfig::parse(&text).unwrap(), d);
    assert_eq!(RunConfig::parse(&text).unwrap().to_toml().unwrap(), text);

    let custom = "seed = 9\n[model.fusion]\nbeta = 0.25\n[train]\nlr_init = 0.0003\n[data]\neval_split = [1, 3]\n";
    let c = RunConfig::parse(custom).unwrap();
    assert_eq!((c.seed, c.model.fusion.beta, c.train.lr_init), (9, 0.25, 0.0003));
    let once = c.to_toml().unwrap();
    assert_eq!(RunConfig::parse(&once).unwrap().to_toml().unwrap(), once);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialized_configs_are_fixed_points(seed in 0..=i64::MAX as u64, beta in 0.0f64..10.0, lr in 1e-6f64..1.0, frames in 2usize..500, thr in 0.01f64..5.0) {
        let mut c = RunConfig::default();
        c.set_seed(seed);
        c.model.fusion.beta = beta;
        c.train.lr_init = lr;
        c.train.lr_min = lr / 10.0;
        c.sim.frames = frames;
        c.eval.na_threshold = thr;
        let text = c.to_toml().unwrap();
        let back = RunConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &c);
        prop_assert_eq!(back.to_toml().unwrap(), text);
    }
}

#[test]
fn config_errors_name_the_key() {
    let err = RunConfig::parse("[model.fusion]\nbeta = -1.0\n").unwrap_err();
    assert!(matches!(err, Error::Config(_)) && err.to_string().contains("beta"), "{err}");
    let err = RunConfig::parse("[sim]\nframez = 3\n").unwrap_err();
    assert!(err.to_string().contains("framez"), "{err}");
    let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_IO);
    assert!(err.to_string().contains("/nonexistent/run.toml"));
}

fn trained_checkpoint() -> Checkpoint {
    let config = RunConfig::default();
    let mut model = init_model::<f64>(&config.model, 2).unwrap();
    let mut adam = AdamState::default();
    model.params.zero_grads();
    for (i, (_, t)) in model.params.iter_mut().enumerate() {
        let g: Vec<f64> = (0..t.len()).map(|k| ((k * 31 + i) % 17) as f64 / 17.0 - 0.5).collect();
        t.grad_mut().unwrap().copy_from_slice(&g);
    }
    adam_step(&mut model.params, &mut adam, 1e-3, 1e-4).unwrap();
    // gradients are scratch space and are not persisted
    for (_, t) in model.params.iter_mut() {
        t.clear_grad();
    }
    Checkpoint {
        config,
        model,
        adam,
        epoch: 7,
        best_val_loss: Some(0.125),
    }
}

#[test]
fn checkpoints_round_trip_bitwise() {
    let ck = trained_checkpoint();
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.to_bytes().unwrap(), bytes);

    let dir = TempDir::new().unwrap();
    let path = dir.path().join("nested/ck.bin");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    ck.check_shapes(&ck.config, &path).unwrap();
}

#[test]
fn damaged_checkpoints_are_reported() {
    let ck = trained_checkpoint();
    let bytes = ck.to_bytes().unwrap();
    let p = Path::new("ck.bin");
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::Format { .. })));
    let err = Checkpoint::from_bytes(&bytes[..bytes.len() - 8], p).unwrap_err();
    assert!(err.to_string().contains("ck.bin") && err.to_string().contains("payload"), "{err}");
    let mut newer = bytes.clone();
    newer[8] = 9;
    assert!(Checkpoint::from_bytes(&newer, p).unwrap_err().to_string().contains("version 9"));

    let mut wider = ck.config.clone();
    wider.model.fusion.fusion_dim = 32;
    let err = ck.check_shapes(&wider, p).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_IO);
    assert!(err.to_string().contains("fusion.map_rgb.w"), "{err}");
}

#[test]
fn synth_is_reproducible_and_evaluable() {
    let dir = TempDir::new().unwrap();
    let cfg = small_config(dir.path(), "");
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = fusenav(dir.path(), &["synth", "--config", cfg, "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = read_tree(&dir.path().join("a"));
    assert_eq!(a, read_tree(&dir.path().join("b")));
    let manifest: Value = serde_json::from_slice(&a[Path::new(MANIFEST)]).unwrap();
    let seqs = manifest["sequences"].as_object().unwrap();
    assert_eq!(seqs.len(), 4);
    for (i, s) in Scenario::ALL.iter().enumerate() {
        assert_eq!(seqs[&format!("{i:02}")], s.name());
        assert_eq!(a.keys().filter(|k| k.starts_with(format!("sequences/{i:02}/image_2"))).count(), 12);
    }

    let o = fusenav(dir.path(), &["synth", "--config", cfg, "--out", "c", "--seed", "5"]);
    assert_eq!(code(&o), 0);
    assert_ne!(a, read_tree(&dir.path().join("c")));

    assert_eq!(code(&fusenav(dir.path(), &["synth", "--config", cfg])), 0);
    // evaluation with an untrained model; no best.ckpt exists yet
    let eval = |out: &str| {
        let o = fusenav(dir.path(), &["eval", "--config", cfg, "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        records(&dir.path().join(out).join(EVAL_REPORT))
    };
    let (r1, r2) = (eval("e1"), eval("e2"));
    let m = record(&r1, "metrics")[0];
    for key in ["na", "lp", "fps", "ri"] {
        assert!(m.get(key).is_some(), "metrics record lacks {key}");
    }
    let strip = |rs: &[Value]| {
        rs.iter()
            .map(|r| {
                let mut r = r.clone();
                r.as_object_mut().unwrap().remove("fps");
                r
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&r1), strip(&r2));
    let w = |name: &str| record(&r1, "scenario").into_iter().find(|r| r["scenario"] == name).unwrap()["w_lidar"].as_f64().unwrap();
    assert!(w("lidar_degraded") < w("standard"));
}

#[test]
fn zero_epoch_training_writes_the_initialization() {
    let dir = TempDir::new().unwrap();
    let cfg_path = small_config(dir.path(), "");
    let cfg = cfg_path.to_str().unwrap();
    assert_eq!(code(&fusenav(dir.path(), &["synth", "--config", cfg])), 0);
    let zero = small_config(dir.path(), "").to_str().unwrap().to_string();
    let text = fs::read_to_string(&zero).unwrap().replace("total_epochs = 2", "total_epochs = 0");
    fs::write(&zero, text).unwrap();
    let o = fusenav(dir.path(), &["train", "--config", &zero]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ck = Checkpoint::load(&dir.path().join("run").join(BEST_CHECKPOINT)).unwrap();
    let init = init_model::<f64>(&ck.config.model, 4).unwrap();
    assert_eq!(ck.model, init);
    assert_eq!(ck.epoch, 0);
}

#[test]
fn early_stopping_is_logged_with_its_reason() {
    let dir = TempDir::new().unwrap();
    let cfg_path = small_config(dir.path(), "");
    let text = fs::read_to_string(&cfg_path)
        .unwrap()
        .replace("total_epochs = 2", "total_epochs = 30\nwarmup_steps = 0\npatience = 1\nlr_init = 1.0\nlr_min = 1.0");
    fs::write(&cfg_path, text).unwrap();
    let cfg = cfg_path.to_str().unwrap();
    assert_eq!(code(&fusenav(dir.path(), &["synth", "--config", cfg])), 0);
    let o = fusenav(dir.path(), &["train", "--config", cfg]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let log = records(&dir.path().join("run").join(TRAIN_LOG));
    let stop = record(&log, "stop")[0];
    assert_eq!(stop["reason"], "early_stop");
    let run = stop["epochs_run"].as_u64().unwrap();
    assert!(run < 30);
    assert_eq!(record(&log, "epoch").len() as u64, run);
    assert!(String::from_utf8_lossy(&o.stdout).contains("early_stop"));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();

    let o = fusenav(d, &["eval", "--config", "missing.toml"]);
    assert_eq!(code(&o), EXIT_IO as i32);
    assert!(stderr(&o).contains("missing.toml"));

    fs::write(d.join("bad.toml"), "[train]\nbatchsize = 3\n").unwrap();
    let o = fusenav(d, &["train", "--config", "bad.toml"]);
    assert_eq!(code(&o), EXIT_USAGE as i32);
    assert!(stderr(&o).contains("batchsize") && stderr(&o).contains("bad.toml"), "{}", stderr(&o));

    assert_eq!(code(&fusenav(d, &["fly"])), EXIT_USAGE as i32);
    assert_eq!(code(&fusenav(d, &["eval", "--beta", "-2"])), EXIT_USAGE as i32);
    let o = fusenav(d, &["synth", "--seed", &u64::MAX.to_string()]);
    assert_eq!(code(&o), EXIT_USAGE as i32);
    assert!(stderr(&o).contains("seed"));

    fs::write(d.join("nodata.toml"), "[data]\nroot = \"absent\"\n").unwrap();
    let o = fusenav(d, &["eval", "--config", "nodata.toml", "--out", "x"]);
    assert_eq!(code(&o), EXIT_IO as i32);
    assert!(stderr(&o).contains("absent"));

    fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    let o = fusenav(d, &["eval", "--checkpoint", "junk.ckpt"]);
    assert_eq!(code(&o), EXIT_IO as i32);
    assert!(stderr(&o).contains("junk.ckpt"));
}

#[test]
fn corrupted_backward_rule_is_named() {
    let dir = TempDir::new().unwrap();
    let o = fusenav(dir.path(), &["gradcheck", "--inject-fault", "matmul", "--out", "g"]);
    assert_eq!(code(&o), EXIT_CHECK as i32);
    assert!(stderr(&o).contains("gradient check failed: matmul"), "{}", stderr(&o));
    let rs = records(&dir.path().join("g").join(GRADCHECK_REPORT));
    let summary = record(&rs, "summary")[0];
    assert_eq!(summary["passed"], false);
    assert_eq!(summary["injected_fault"], "matmul");
    let checks = record(&rs, "check");
    assert!(checks.iter().any(|c| c["name"] == "matmul" && c["passed"] == false));
    assert!(checks.iter().all(|c| c["max_rel_err"].is_f64()));
    assert!(checks.iter().filter(|c| c["name"] == "relu").all(|c| c["passed"] == true));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("matmul ") && l.contains("max rel err")));
}

#[test]
fn bench_stage_times_and_image_area() {
    let dir = TempDir::new().unwrap();
    let run = |width: usize| {
        let mut cfg = RunConfig::default();
        cfg.sim.frames = 24;
        cfg.sim.camera.width = width;
        cfg.eval.bench_frames = 60;
        cfg.eval.bench_warmup = 5;
        let rep = commands::bench(&cfg, None, dir.path()).unwrap();
        rep.records[0].clone()
    };
    let small = run(64);
    let total = small["total_seconds"].as_f64().unwrap();
    let sum = small["stage_sum_seconds"].as_f64().unwrap();
    assert!(sum <= 1.05 * total, "stage sum {sum} vs total {total}");
    assert!(small["pass"].is_boolean());
    assert!(small["stage_seconds"]["rgb_branch"].as_f64().unwrap() <= small["stage_seconds"]["backbones"].as_f64().unwrap());
    let large = run(128);
    let rgb = |r: &Value| r["stage_seconds"]["rgb_branch"].as_f64().unwrap();
    assert!(rgb(&large) > rgb(&small), "{} !> {}", rgb(&large), rgb(&small));
}
