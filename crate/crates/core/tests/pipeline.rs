use std::fs;
use std::path::Path;

use dragvideo::codec::VideoFrames;
use dragvideo::instruction::Point;
use dragvideo::lora::LoraTrainConfig;
use dragvideo::pipeline::synthetic::{gaussian_blob_video, single_drag_instruction};
use dragvideo::pipeline::{Mode, Models, Project, RunConfig, RunControl, Status};
use dragvideo::Error;

fn quick_config() -> RunConfig {
    let mut cfg = RunConfig {
        lora: LoraTrainConfig {
            epochs: 2,
            rank: 4,
            ..LoraTrainConfig::default()
        },
        ..RunConfig::default()
    };
    cfg.optimization.max_steps = 4;
    cfg.optimization.t_opt = 10;
    cfg
}

fn blob(frames: usize) -> VideoFrames {
    gaussian_blob_video(frames, 32, 32, Point::new(14.0, 16.0), 5.0, (0.5, 0.0)).unwrap()
}

fn ready_project(root: &Path, frames: usize) -> Project {
    let mut p = Project::create(root, 7).unwrap();
    p.preprocess(&blob(frames), 8.0, "blob", None).unwrap();
    p.set_instruction(&single_drag_instruction(frames, Point::new(14.0, 16.0), (4.0, 0.0), 2))
        .unwrap();
    p.propagate(&Models::desk()).unwrap();
    p
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((
                    path.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&path).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn lifecycle_orders_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("walk");
    let mut p = Project::create(&root, 1).unwrap();
    assert_eq!(p.state.status, Status::Created);
    let cfg = quick_config();
    assert!(matches!(
        p.run(&cfg, &Models::desk(), &RunControl::default()),
        Err(Error::Ordering { .. })
    ));

    p.preprocess(&blob(3), 8.0, "blob", None).unwrap();
    assert_eq!(p.state.status, Status::Preprocessed);
    assert!(p.propagate(&Models::desk()).is_err());
    p.train_lora(&cfg, &RunControl::default()).unwrap();
    assert_eq!(p.state.status, Status::LoraTrained);
    p.set_instruction(&single_drag_instruction(3, Point::new(14.0, 16.0), (4.0, 0.0), 2))
        .unwrap();
    assert_eq!(p.state.status, Status::Instructed);
    let err = p.run(&cfg, &Models::desk(), &RunControl::default()).unwrap_err();
    assert_eq!(err.code(), "ordering");
    p.propagate(&Models::desk()).unwrap();
    assert_eq!(p.state.status, Status::Propagated);
    assert_eq!(fs::read_dir(root.join("propagated/overlay")).unwrap().count(), 3);

    let out = p.run(&cfg, &Models::desk(), &RunControl::default()).unwrap();
    assert_eq!(p.state.status, Status::Done);
    assert_eq!(out.edited.frames(), 3);
    assert!(out.report.dragvideo_score.is_some());
    assert!(out.report.baseline_score.is_none());
    let csv = fs::read_to_string(root.join("report.csv")).unwrap();
    assert!(csv.starts_with("sample,baseline_score,dragvideo_score\nwalk,,"));
    let audit = p.audit().unwrap();
    assert_eq!(audit.len(), out.paths[0].drag_iterations);
    for dir in [
        "frames",
        "latents",
        "lora",
        "trajectory",
        "result/edited",
        "result/original",
    ] {
        assert!(root.join(dir).is_dir(), "{dir}");
    }
    assert_eq!(Project::open(&root).unwrap().state, p.state);
}

#[test]
fn resumed_run_is_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let straight_root = tmp.path().join("a/clip");
    let mut straight = ready_project(&straight_root, 3);
    straight.run(&cfg, &Models::desk(), &RunControl::default()).unwrap();

    let root = tmp.path().join("b/clip");
    ready_project(&root, 3);
    for stage in ["lora", "invert", "drag"] {
        let control = RunControl {
            stop_after: Some(stage.into()),
            ..RunControl::default()
        };
        let err = Project::open(&root)
            .unwrap()
            .run(&cfg, &Models::desk(), &control)
            .unwrap_err();
        assert!(matches!(err, Error::Cancelled(_)), "{err}");
        assert_eq!(Project::open(&root).unwrap().state.status, Status::Dragging);
    }
    let other = RunConfig {
        optimization: lambda_note(),
        ..cfg.clone()
    };
    let err = Project::open(&root)
        .unwrap()
        .run(&other, &Models::desk(), &RunControl::default())
        .unwrap_err();
    assert_eq!(err.code(), "busy");
    let mut killed = Project::open(&root).unwrap();
    killed.run(&cfg, &Models::desk(), &RunControl::default()).unwrap();

    let a = tree_bytes(&straight_root);
    let b = tree_bytes(&root);
    assert_eq!(a.len(), b.len());
    for ((na, ba), (nb, bb)) in a.iter().zip(&b) {
        assert_eq!(na, nb);
        assert!(ba == bb, "{na} differs after resume");
    }
}

fn lambda_note() -> dragvideo::dove::OptimizationConfig {
    dragvideo::dove::OptimizationConfig {
        lambda: 3.0,
        ..quick_config().optimization
    }
}

#[test]
fn config_change_reruns_only_downstream_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("p");
    let mut p = ready_project(&root, 2);
    let cfg = quick_config();
    p.run(&cfg, &Models::desk(), &RunControl::default()).unwrap();
    let before = p.state.stages.clone();
    let lora_bytes = fs::read(root.join("lora/weights.bin")).unwrap();

    let changed = RunConfig {
        optimization: lambda_note(),
        ..cfg
    };
    p.run(&changed, &Models::desk(), &RunControl::default()).unwrap();
    assert_eq!(before["lora"], p.state.stages["lora"]);
    assert_eq!(before["invert"], p.state.stages["invert"]);
    assert_ne!(before["drag"], p.state.stages["drag"]);
    assert_ne!(before["denoise"], p.state.stages["denoise"]);
    assert_eq!(lora_bytes, fs::read(root.join("lora/weights.bin")).unwrap());
    assert_eq!(p.state.config.as_ref(), Some(&changed));
}

#[test]
fn per_frame_baseline_matches_video_mode_on_one_frame() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let mut video = ready_project(&tmp.path().join("v"), 1);
    let a = video.run(&cfg, &Models::desk(), &RunControl::default()).unwrap();
    let mut base = ready_project(&tmp.path().join("f"), 1);
    let per_frame = RunConfig {
        mode: Mode::PerFrameBaseline,
        ..cfg
    };
    let b = base.run(&per_frame, &Models::desk(), &RunControl::default()).unwrap();
    assert_eq!(a.edited.data(), b.edited.data());
    assert_eq!(a.paths[0].edited.max_abs_diff(&b.paths[0].edited).unwrap(), 0.0);
    assert!(tmp.path().join("f/baseline/result/edited/frame_00000.png").exists());
}

#[test]
fn ablations_change_the_output() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let full = ready_project(&tmp.path().join("full"), 2)
        .run(&cfg, &Models::desk(), &RunControl::default())
        .unwrap();
    for (name, ablated) in [
        (
            "nolora",
            RunConfig {
                lora_enabled: false,
                ..cfg.clone()
            },
        ),
        (
            "nomsa",
            RunConfig {
                msa_enabled: false,
                ..cfg.clone()
            },
        ),
    ] {
        let out = ready_project(&tmp.path().join(name), 2)
            .run(&ablated, &Models::desk(), &RunControl::default())
            .unwrap();
        assert!(
            out.paths[0].edited.max_abs_diff(&full.paths[0].edited).unwrap() > 0.0,
            "{name}"
        );
    }
}

#[test]
fn preprocess_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let clip = gaussian_blob_video(48, 40, 40, Point::new(20.0, 20.0), 6.0, (0.25, 0.0))
        .unwrap()
        .with_fps(24.0)
        .unwrap();
    let mut a = Project::create(&tmp.path().join("a"), 0).unwrap();
    a.preprocess(&clip, 6.0, "clip", None).unwrap();
    assert_eq!((a.state.frames, a.state.height, a.state.width), (12, 32, 32));
    let first = tree_bytes(&tmp.path().join("a/frames"));
    a.preprocess(&clip, 6.0, "clip", None).unwrap();
    assert_eq!(first, tree_bytes(&tmp.path().join("a/frames")));
    assert_eq!(a.preprocess(&clip, 30.0, "clip", None).unwrap_err().code(), "config");
}
