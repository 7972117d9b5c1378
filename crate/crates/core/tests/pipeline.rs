use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use loopfield::cloud_io::encode_ply;
use loopfield::pipeline::{cmd_pipeline, cmd_stage, PipelineConfig, Stage, StageStatus};
use loopfield::synthetic::{flag_cameras_json, flag_config_json, flag_scene};

fn assets() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("assets/flag")
}

fn small_config(out: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::load(assets().join("config.json")).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg.resolution = [64, 48];
    cfg.frames = 6;
    cfg.autoencoder_train.epochs = 10;
    cfg.field_train.epochs = 10;
    cfg
}

/// Relative path → bytes for every file under `dir` except the lock.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != ".lock" {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn bundled_assets_match_generator() {
    let scene = flag_scene();
    assert_eq!(fs::read(assets().join("scene.ply")).unwrap(), encode_ply(&scene.cloud).unwrap());
    assert_eq!(fs::read_to_string(assets().join("mask.txt")).unwrap(), scene.mask.to_text());
    assert_eq!(fs::read_to_string(assets().join("transforms.json")).unwrap(), flag_cameras_json());
    assert_eq!(fs::read_to_string(assets().join("config.json")).unwrap(), flag_config_json());
}

#[test]
fn rerun_is_cached_and_stage_by_stage_matches() {
    let a = tempfile::tempdir().unwrap();
    let cfg = small_config(a.path());
    let first = cmd_pipeline(&cfg).unwrap();
    assert!(first.iter().all(|(_, s)| matches!(s, StageStatus::Ran(_))));
    assert_eq!(fs::read_dir(a.path().join("frames")).unwrap().count(), 6);
    assert_eq!(fs::read_dir(a.path().join("renders")).unwrap().count(), 12);
    assert!(a.path().join("renders/view1_frame_0005.png").exists());

    let second = cmd_pipeline(&cfg).unwrap();
    assert!(second.iter().all(|(_, s)| *s == StageStatus::Cached), "{second:?}");

    let b = tempfile::tempdir().unwrap();
    let cfg_b = small_config(b.path());
    for stage in Stage::ALL {
        cmd_stage(stage, &cfg_b).unwrap();
    }
    assert_eq!(snapshot(a.path()), snapshot(b.path()));
}

#[test]
fn corrupt_cache_is_recomputed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    cmd_pipeline(&cfg).unwrap();
    let before = snapshot(dir.path());
    let features = dir.path().join("cache/features.bin");
    let mut bytes = fs::read(&features).unwrap();
    bytes.truncate(bytes.len() / 2);
    fs::write(&features, bytes).unwrap();

    let statuses = cmd_pipeline(&cfg).unwrap();
    assert!(matches!(statuses[0].1, StageStatus::Ran(_)));
    assert!(statuses[1..].iter().all(|(_, s)| *s == StageStatus::Cached));
    assert_eq!(snapshot(dir.path()), before);
}

#[test]
fn config_change_invalidates_only_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cmd_pipeline(&cfg).unwrap();
    cfg.omega = 2.4;
    let statuses = cmd_pipeline(&cfg).unwrap();
    let ran: Vec<&str> = statuses
        .iter()
        .filter(|(_, s)| matches!(s, StageStatus::Ran(_)))
        .map(|(st, _)| st.name())
        .collect();
    assert_eq!(ran, ["animate", "render"]);
    cfg.frames = 4;
    cmd_pipeline(&cfg).unwrap();
    assert_eq!(fs::read_dir(dir.path().join("frames")).unwrap().count(), 4);
    assert_eq!(fs::read_dir(dir.path().join("renders")).unwrap().count(), 8);
}

#[test]
fn stages_require_upstream_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let err = cmd_stage(Stage::Render, &cfg).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("`animate`"), "{err}");

    cmd_stage(Stage::Features, &cfg).unwrap();
    assert!(cmd_stage(Stage::Field, &cfg).unwrap_err().to_string().contains("`cluster`"));
    cmd_stage(Stage::Cluster, &cfg).unwrap();
    assert!(dir.path().join("cache/clustering.bin").exists());
    assert!(!dir.path().join("cache/field.bin").exists());
    assert_eq!(cmd_stage(Stage::Cluster, &cfg).unwrap(), StageStatus::Cached);
}

fn cli(args: &[&str], threads: Option<&str>) -> std::process::Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_loopfield"));
    cmd.args(args).env("RUST_LOG", "warn");
    if let Some(t) = threads {
        cmd.env("LOOPFIELD_THREADS", t);
    }
    cmd.output().unwrap()
}

#[test]
fn cli_check_and_exit_codes() {
    let config = assets().join("config.json");
    let config = config.to_str().unwrap();
    let ok = cli(&["check", "-c", config], Some("1"));
    assert_eq!(ok.status.code(), Some(0));
    let text = String::from_utf8(ok.stdout).unwrap();
    assert!(text.contains("points:            2000"), "{text}");
    assert!(text.contains("0.04 * max(h)"));

    let ply = assets().join("scene.ply");
    let no_mask = cli(&["check", "--input", ply.to_str().unwrap()], None);
    assert_eq!(no_mask.status.code(), Some(2));
    assert!(String::from_utf8(no_mask.stderr).unwrap().contains("mask required"));

    let bad = cli(&["pipeline", "-c", config, "--omega", "-1"], None);
    assert_eq!(bad.status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let missing = cli(&["render", "-c", config, "--output-dir", out], None);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8(missing.stderr).unwrap().contains("`animate`"));

    let printed = cli(&["config", "--frames", "12", "--resolution", "320x240"], None);
    let json: serde_json::Value = serde_json::from_slice(&printed.stdout).unwrap();
    assert_eq!(json["frames"], 12);
    assert_eq!(json["resolution"], serde_json::json!([320, 240]));
    assert_eq!(json["lambda"], 0.04);

    assert_eq!(cli(&["check", "-c", config], Some("zero")).status.code(), Some(2));
}

#[test]
fn cli_stage_runs_match_library_pipeline() {
    let a = tempfile::tempdir().unwrap();
    cmd_pipeline(&small_config(a.path())).unwrap();

    // training epochs have no CLI flag, so the CLI run reads a written config
    let b = tempfile::tempdir().unwrap();
    let out = b.path().join("out");
    let cfg_path = b.path().join("cfg.json");
    fs::write(&cfg_path, small_config(&out).to_json()).unwrap();
    for stage in ["features", "cluster", "field", "animate", "render"] {
        let run = cli(&[stage, "-c", cfg_path.to_str().unwrap()], Some("1"));
        assert_eq!(run.status.code(), Some(0), "{}", String::from_utf8_lossy(&run.stderr));
    }
    assert_eq!(snapshot(a.path()), snapshot(&out));
}
