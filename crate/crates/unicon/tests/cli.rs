mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use unicon::report::report_from_json;
use unicon_core::backbone::BackboneKind;
use unicon_core::profiler::{measure_round, ProfileSpec, ProfileTarget};
use unicon_core::ComponentTag;

fn unicon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unicon")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = unicon(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = unicon(args);
    assert!(!out.status.success(), "{args:?} should fail");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn profile_emits_json_with_frozen_base() {
    let json = ok(&["profile", "--adapter", "unicon-full", "--batch", "2"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["per_component"]["base"]["gradient_bytes"], 0);
    assert_eq!(v["per_component"]["base"]["optimizer_bytes"], 0);

    let (_, parsed) = report_from_json(&json).unwrap();
    let spec = ProfileSpec {
        batch: 2,
        ..ProfileSpec::new(
            unicon::cli::parse_target("unicon-full", BackboneKind::Dit).unwrap(),
            BackboneKind::Dit,
        )
    };
    assert!(parsed.same_costs(&measure_round(&spec, None).unwrap()));
}

#[test]
fn profile_bare_and_encoder_baseline() {
    let v: serde_json::Value =
        serde_json::from_str(&ok(&["profile", "--adapter", "base", "--batch", "1", "--backbone", "unet"])).unwrap();
    assert_eq!(v["per_component"]["adapter"]["weight_bytes"], 0);
    assert_eq!(v["weight_bytes"], v["gradient_bytes"]);

    // The encoder baseline copies the first half of the DiT blocks.
    let enc = unicon::cli::parse_target("controlnet-encoder", BackboneKind::Dit).unwrap();
    let full = unicon::cli::parse_target("controlnet-full", BackboneKind::Dit).unwrap();
    let weights = |t: ProfileTarget| {
        let r = measure_round(&ProfileSpec { batch: 1, ..ProfileSpec::new(t, BackboneKind::Dit) }, None).unwrap();
        r.component(ComponentTag::Adapter).weight_bytes
    };
    let bare = measure_round(&ProfileSpec { batch: 1, ..ProfileSpec::new(ProfileTarget::Bare, BackboneKind::Dit) }, None).unwrap();
    let time_and_blocks = |w: u64| w as i64;
    // full copies 8 blocks and enc 4, plus the same time embedder: the gap is four blocks.
    let gap = time_and_blocks(weights(full)) - time_and_blocks(weights(enc));
    let block = |cfg: unicon_core::dit::DitConfig| {
        let d = cfg.hidden as u64;
        let r = cfg.mlp_ratio as u64;
        let lin = |i: u64, o: u64| i * o + o;
        4 * (lin(d, 2 * d) + 8 * lin(d, d) + lin(d, r * d) + lin(r * d, d))
    };
    assert_eq!(gap as u64, 4 * block(unicon_core::dit::DitConfig::default()));
    assert!(bare.totals.weight_bytes > 0);
}

#[test]
fn compare_keeps_order_and_ratios() {
    let csv = ok(&["compare", "unicon-full", "unicon-full", "--batch", "2", "--format", "csv"]);
    let mut rows = csv::Reader::from_reader(csv.as_bytes());
    for r in rows.records() {
        let r = r.unwrap();
        assert_eq!(&r[4], "1", "{r:?}");
    }

    let table = ok(&["compare", "controlnet-full", "base", "unicon-full", "--batch", "2"]);
    let first = table.lines().skip(2).take(3).map(|l| l.split_whitespace().next().unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(first, ["controlnet-full", "base", "unicon-full"]);

    let csv = ok(&["compare", "controlnet-full", "unicon-full", "--format", "csv"]);
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let ratio = rdr
        .records()
        .map(|r| r.unwrap())
        .find(|r| &r[0] == "unicon-full" && &r[1] == "total" && &r[2] == "bp_flops")
        .map(|r| r[4].parse::<f64>().unwrap())
        .unwrap();
    assert!((0.45..=0.60).contains(&ratio), "{ratio}");
}

#[test]
fn bad_input_exits_nonzero() {
    fails(&["compare", "unicon-full"]);
    fails(&["profile", "--adapter", "unicon-encoder"]);
    fails(&["profile", "--adapter", "controlnet-full:share-attn", "--backbone", "unet"]);
    fails(&["profile", "--adapter", "base", "--batch", "0"]);
    fails(&["train", "--config", "/nonexistent/run.cfg"]);
    fails(&["train", "--topology", "middle"]);
    fails(&["eval", "--checkpoint", "/nonexistent.uckp"]);
    fails(&["frobnicate"]);
}

fn write_config(dir: &Path) -> String {
    let mut cfg = common::tiny_config(&dir.join("run"));
    cfg.steps = 4;
    let path = dir.join("tiny.cfg");
    cfg.save(&path).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn train_sample_eval_round() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let run = tmp.path().join("run");
    let stdout = ok(&["train", "--config", &cfg, "--quiet"]);
    assert!(stdout.contains("checkpoint.uckp"));
    let ckpt = run.join("checkpoint.uckp");
    let ckpt = ckpt.to_str().unwrap();

    let sample = |out: &Path| {
        ok(&["sample", "--config", &cfg, "--checkpoint", ckpt, "--test-seed", "50002", "--count", "2", "--out", out.to_str().unwrap()]);
    };
    let (s1, s2) = (tmp.path().join("s1"), tmp.path().join("s2"));
    sample(&s1);
    sample(&s2);
    for f in ["sample_0000.pgm", "sample_0001.pgm", "manifest.json"] {
        assert_eq!(fs::read(s1.join(f)).unwrap(), fs::read(s2.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(s1.join("sample_0000.pgm")).unwrap(), fs::read(s1.join("sample_0001.pgm")).unwrap());

    // A condition file works the same way as a test seed.
    let cond = tmp.path().join("cond.pgm");
    unicon::pgm::write(&cond, &unicon_core::data::make_pair(50_002, unicon_core::data::ConditionKind::Sr4x).cond).unwrap();
    let s3 = tmp.path().join("s3");
    ok(&["sample", "--config", &cfg, "--checkpoint", ckpt, "--cond", cond.to_str().unwrap(), "--label", "0", "--out", s3.to_str().unwrap()]);
    assert!(s3.join("sample_0000.pgm").exists());
    fails(&["sample", "--config", &cfg, "--checkpoint", ckpt, "--out", s3.to_str().unwrap()]);

    let summary = tmp.path().join("summary.json");
    let printed = ok(&["eval", "--config", &cfg, "--checkpoint", ckpt, "--count", "2", "--out", summary.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&summary).unwrap()).unwrap();
    assert_eq!(v, serde_json::from_str::<serde_json::Value>(&printed).unwrap());
    assert_eq!(v["samples"], 2);
    assert!(v["condition_consistency"]["mean"].is_f64());
    fails(&["eval", "--config", &cfg, "--checkpoint", ckpt, "--count", "0"]);

    // A damaged checkpoint is refused with a CRC error.
    let mut bytes = fs::read(ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    let bad = tmp.path().join("bad.uckp");
    fs::write(&bad, bytes).unwrap();
    let err = fails(&["eval", "--config", &cfg, "--checkpoint", bad.to_str().unwrap(), "--count", "1"]);
    assert!(err.contains("CRC"), "{err}");

    // Pre-training refuses to overwrite the cached base.
    fails(&["pretrain-base", "--config", &cfg]);
}
