use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use skinseg::checkpoint;
use skinseg::codec::{load_binary_mask, save_part_mask, save_rgb, tensor_to_rgb};
use skinseg::network::{build_model, ModelConfig};
use skinseg::synth::{scene_for, NoiseConfig};
use skinseg::types::{PartCode, PartMask};

fn skinseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skinseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited")
}

const SMALL_CONFIG: &str = r#"
data_dir = "data"
input_size = 32
base_filters = 8
interaction_filters = [16, 24, 32]
expansion_factor = 4
decoder_filters = [24, 16, 8]
reduction = 4
epochs = 1
"#;

#[test]
fn dry_run_exits_zero_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(
        code(&skinseg(&["synth", "--num", "4", "--size", "32", "--out", "data"], p)),
        0
    );
    std::fs::write(p.join("run.toml"), SMALL_CONFIG).unwrap();
    let out = skinseg(&["train", "--config", "run.toml", "--out", "run", "--dry-run"], p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("33094 parameters"));
    assert!(!p.join("run").exists());
}

#[test]
fn train_eval_infer_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(
        code(&skinseg(&["synth", "--num", "4", "--size", "32", "--out", "data"], p)),
        0
    );
    std::fs::write(p.join("run.toml"), SMALL_CONFIG).unwrap();
    assert_eq!(code(&skinseg(&["train", "--config", "run.toml", "--out", "run"], p)), 0);
    for f in ["model.ckpt", "report.csv", "report.txt", "train_log.csv"] {
        assert!(p.join("run").join(f).is_file(), "{f}");
    }
    let out = skinseg(
        &[
            "eval",
            "--config",
            "run.toml",
            "--checkpoint",
            "run/model.ckpt",
            "--split",
            "test",
            "--out",
            "ev",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("params: 33094"));
    let out = skinseg(
        &[
            "infer",
            "--checkpoint",
            "run/model.ckpt",
            "--image",
            "data/test/images/test_00000.png",
            "--parts-dir",
            "data/test/parts",
            "--out",
            "inf",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let mask = load_binary_mask(&p.join("inf/test_00000_mask.png")).unwrap();
    assert_eq!((mask.height(), mask.width()), (32, 32));

    let again = skinseg(
        &[
            "infer",
            "--checkpoint",
            "run/model.ckpt",
            "--image",
            "data/test/images/test_00000.png",
            "--parts",
            "data/test/parts/test_00000.png",
            "--out",
            "inf2",
        ],
        p,
    );
    assert_eq!(code(&again), 0);
    for f in ["test_00000_mask.png", "test_00000_attention.png"] {
        assert_eq!(
            fs::read(p.join("inf").join(f)).unwrap(),
            fs::read(p.join("inf2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn infer_without_face_or_hand_gives_neutral_attention() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let model = build_model(&ModelConfig::compact(32)).unwrap();
    checkpoint::save(&p.join("m.ckpt"), &model).unwrap();
    let scene = scene_for(1, "x", 32, &NoiseConfig::none()).unwrap();
    save_rgb(&p.join("img.png"), &tensor_to_rgb(&scene.image)).unwrap();
    save_part_mask(&p.join("parts.png"), &PartMask::filled(32, 32, PartCode::Body)).unwrap();
    let out = skinseg(
        &[
            "infer",
            "--checkpoint",
            "m.ckpt",
            "--image",
            "img.png",
            "--parts",
            "parts.png",
            "--out",
            "o",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let att = image::open(p.join("o/img_attention.png")).unwrap().to_luma8();
    assert_eq!(att.dimensions(), (32, 32));
    assert!(att.pixels().all(|px| px.0[0] == 128));
}

#[test]
fn bad_config_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("bad.toml"), "decay = 1.5\n").unwrap();
    assert_eq!(code(&skinseg(&["train", "--config", "bad.toml"], p)), 2);
    std::fs::write(p.join("typo.toml"), "learning_rate = 0.1\n").unwrap();
    assert_eq!(code(&skinseg(&["train", "--config", "typo.toml"], p)), 2);
    assert_eq!(code(&skinseg(&["train", "--config", "absent.toml"], p)), 2);
    assert_eq!(code(&skinseg(&["train", "--dry-run"], p)), 2);
}

#[test]
fn missing_data_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&skinseg(&["train", "--data", "nowhere", "--dry-run"], p)), 3);
    std::fs::create_dir_all(p.join("empty/train/images")).unwrap();
    std::fs::create_dir_all(p.join("empty/train/labels")).unwrap();
    std::fs::create_dir_all(p.join("empty/train/parts")).unwrap();
    assert_eq!(code(&skinseg(&["train", "--data", "empty", "--dry-run"], p)), 3);
}

#[test]
fn diverging_training_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(
        code(&skinseg(&["synth", "--num", "4", "--size", "32", "--out", "data"], p)),
        0
    );
    std::fs::write(
        p.join("run.toml"),
        format!("{SMALL_CONFIG}lr0 = 1e308\nepochs = 2\n").replace("epochs = 1\n", ""),
    )
    .unwrap();
    let out = skinseg(&["train", "--config", "run.toml", "--out", "run"], p);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}
