mod common;

use std::path::Path;
use std::process::Command;

use common::{run, tiny_config, write_config};
use vade_core::phantom::{DatasetManifest, PhantomClass};
use vade_core::run::read_records;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest(dir: &Path) -> DatasetManifest {
    DatasetManifest::read(&dir.join("manifest.json")).unwrap()
}

/// Generates train and test splits and trains a checkpoint.
fn pipeline(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let cfg = write_config(dir, &tiny_config());
    let (train, test, ckpt) = (dir.join("train"), dir.join("test"), dir.join("model.ckpt"));
    assert_eq!(
        run(&["gen-data", "--config", s(&cfg), "--out", s(&train)]),
        0
    );
    assert_eq!(
        run(&[
            "gen-data",
            "--split",
            "test",
            "--config",
            s(&cfg),
            "--out",
            s(&test)
        ]),
        0
    );
    assert_eq!(
        run(&[
            "train",
            "--data",
            s(&train),
            "--config",
            s(&cfg),
            "--out",
            s(&ckpt)
        ]),
        0
    );
    (test, ckpt)
}

fn test_entry(test: &Path, class: PhantomClass) -> (String, String) {
    let m = manifest(test);
    let e = m.entries.iter().find(|e| e.class == class).unwrap();
    (
        s(&test.join(&e.file)).to_string(),
        s(&test.join(&e.mask_file)).to_string(),
    )
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny_config());
    let out = |n: &str| dir.path().join(n);
    for (name, seed) in [("a", "4"), ("b", "4"), ("c", "5")] {
        assert_eq!(
            run(&[
                "gen-data",
                "--config",
                s(&cfg),
                "--seed",
                seed,
                "--out",
                s(&out(name))
            ]),
            0
        );
    }
    let (a, b, c) = (
        manifest(&out("a")),
        manifest(&out("b")),
        manifest(&out("c")),
    );
    assert_eq!(a.entries.len(), 6);
    assert_eq!(a.hash(), b.hash());
    assert_ne!(a.hash(), c.hash());
    for e in &a.entries {
        let x = std::fs::read(out("a").join(&e.file)).unwrap();
        assert_eq!(x, std::fs::read(out("b").join(&e.file)).unwrap());
    }
}

#[test]
fn counterfactual_sweep_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (test, ckpt) = pipeline(d);
    let cfg = d.join("config.json");
    let (img, mask) = test_entry(&test, PhantomClass::Opacity);
    let out = d.join("cf");
    let log = d.join("runs.jsonl");
    let code = run(&[
        "counterfactual",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--input",
        &img,
        "--mask",
        &mask,
        "--strength",
        "0.5",
        "--run-log",
        s(&log),
        "--out",
        s(&out),
    ]);
    assert_eq!(code, 0);
    for f in ["counterfactual.png", "vamap.png", "overlay.png"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let recs = read_records(&log).unwrap();
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].config.strength, 0.5);
    assert!(recs[0].scores.localization.is_some());

    assert_eq!(
        run(&[
            "replay",
            "--checkpoint",
            s(&ckpt),
            "--run-log",
            s(&log),
            "--id",
            "1"
        ]),
        0
    );
    assert_eq!(
        run(&[
            "replay",
            "--checkpoint",
            s(&ckpt),
            "--run-log",
            s(&log),
            "--id",
            "42"
        ]),
        2
    );

    let sweep = d.join("sweep");
    let code = run(&[
        "sweep",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--input",
        &img,
        "--out",
        s(&sweep),
    ]);
    assert_eq!(code, 0);
    let recs = read_records(&sweep.join("runs.jsonl")).unwrap();
    assert_eq!(recs.len(), 6);
    let ids: Vec<u64> = recs.iter().map(|r| r.run_id).collect();
    assert_eq!(ids, vec![1, 2, 3, 4, 5, 6]);
    let dirs = std::fs::read_dir(&sweep)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .count();
    assert_eq!(dirs, 6);

    let induce_out = d.join("ind");
    let (healthy, _) = test_entry(&test, PhantomClass::Healthy);
    let code = run(&[
        "induce",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--input",
        &healthy,
        "--prompt",
        "small lung opacity on the right",
        "--out",
        s(&induce_out),
    ]);
    assert_eq!(code, 0);
    let recs = read_records(&induce_out.join("runs.jsonl")).unwrap();
    assert_eq!(recs[0].config.prompt, "small lung opacity on the right");

    let report = d.join("report");
    let code = run(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&test),
        "--out",
        s(&report),
    ]);
    assert_eq!(code, 0);
    let v: serde_json::Value =
        serde_json::from_slice(&std::fs::read(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(v["classes"].as_array().unwrap().len(), 3);
    assert!(std::fs::read_to_string(report.join("report.csv"))
        .unwrap()
        .contains("class,metric,value,published_reference"));
}

#[test]
fn exit_codes() {
    let bin = env!("CARGO_BIN_EXE_vade");
    let code = |args: &[&str]| {
        Command::new(bin)
            .args(args)
            .output()
            .unwrap()
            .status
            .code()
            .unwrap()
    };
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["counterfactual", "--input", "x.png"]), 1);

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&["train", "--data", s(&d.join("absent"))]), 2);

    let (test, ckpt) = pipeline(d);
    let cfg = d.join("config.json");
    let (img, _) = test_entry(&test, PhantomClass::Haze);
    let gen = |extra: &[&str]| {
        let mut a = vec![
            "counterfactual",
            "--config",
            s(&cfg),
            "--checkpoint",
            s(&ckpt),
            "--out",
            s(d),
        ];
        a.extend_from_slice(extra);
        code(&a)
    };
    assert_eq!(gen(&["--input", &img, "--strength", "1.5"]), 1);
    assert_eq!(gen(&["--input", &img, "--guidance", "30"]), 1);
    assert_eq!(gen(&["--input", s(&d.join("missing.png"))]), 2);

    let mut bad = tiny_config();
    bad.train.lr = 1e9;
    bad.train.grad_clip = 1e9;
    let bad_dir = d.join("bad");
    std::fs::create_dir_all(&bad_dir).unwrap();
    let bad_cfg = write_config(&bad_dir, &bad);
    let train = d.join("train");
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&bad_cfg),
            "--data",
            s(&train),
            "--out",
            s(&bad_dir.join("m.ckpt"))
        ]),
        3
    );
}
