use std::fs;
use std::path::Path;

use plumeseg::config::{RunConfig, Switches};
use plumeseg::data::{
    load_dataset, load_dataset_with, load_frames, load_video, write_clip, write_manifest, ClipMeta, ClipSegment, Frame,
    ManifestEntry, Mask, Split,
};
use plumeseg::eval::evaluate_model;
use plumeseg::model::{infer_frame, infer_sequence, merge_passes, prepare_frame, Model};
use plumeseg::parallel::Execution;
use plumeseg::synth::{generate_clip, Category};
use plumeseg::train::{load_model, train, training_segments, TrainSet, Trainer};
use plumeseg::{Error, Tensor};

fn ramp_clip(id: &str, len: usize, h: usize, w: usize) -> ClipSegment {
    let frames = (0..len)
        .map(|t| Frame::new(h, w, (0..h * w).map(|i| ((i + t) % 250) as f32 / 255.0).collect()))
        .collect();
    let masks = (0..len)
        .map(|t| Mask::new(h, w, (0..h * w).map(|i| u8::from((i + t) % 3 == 0)).collect()))
        .collect();
    ClipSegment::new(
        frames,
        masks,
        ClipMeta {
            id: id.into(),
            category: None,
            start: 0,
        },
    )
    .unwrap()
}

fn tiny_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::small(32);
    cfg.model.encoder.widths = [4, 8, 8, 8];
    cfg.model.encoder.heads = [1, 1, 1, 1];
    cfg.model.decoder.width = 8;
    cfg.epochs = 1;
    cfg.learning_rate = 1e-3;
    cfg.batch_size = 2;
    cfg.checkpoint_dir = dir.join("ckpt");
    cfg
}

#[test]
fn generated_clip_survives_disk_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let clip = generate_clip(&Category::CloseComplex.preset(40, 48, 3), 6).unwrap();
    write_clip(dir.path(), &clip).unwrap();
    let back = load_video(&dir.path().join(&clip.meta.id), &clip.meta.id, None).unwrap();
    assert_eq!(back.len(), clip.len());
    assert_eq!(back.masks, clip.masks);
    for (a, b) in back.frames.iter().zip(&clip.frames) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
    let (frames, idx) = load_frames(&dir.path().join(&clip.meta.id)).unwrap();
    assert_eq!(frames.len(), 6);
    assert_eq!(idx, (0..6).collect::<Vec<_>>());
}

#[test]
fn segments_drop_the_remainder() {
    let dir = tempfile::tempdir().unwrap();
    write_clip(dir.path(), &ramp_clip("a", 300, 4, 4)).unwrap();
    write_clip(dir.path(), &ramp_clip("b", 449, 4, 4)).unwrap();
    let segs = load_dataset(dir.path()).unwrap();
    let per = |id: &str| segs.iter().filter(|s| s.meta.id == id).count();
    assert_eq!((per("a"), per("b")), (2, 2));
    assert!(segs.iter().all(|s| s.len() == 150));
    let b: Vec<_> = segs
        .iter()
        .filter(|s| s.meta.id == "b")
        .map(|s| s.frame_indices())
        .collect();
    assert_eq!(b, vec![0..150, 150..300]);
}

#[test]
fn missing_mask_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    write_clip(dir.path(), &ramp_clip("v", 3, 4, 4)).unwrap();
    let gone = dir.path().join("v/masks/000001.png");
    fs::remove_file(&gone).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    assert!(matches!(&err, Error::MissingMask(p) if p == &gone), "{err}");
    assert!(err.to_string().contains("000001.png"));
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn manifest_selects_splits() {
    let dir = tempfile::tempdir().unwrap();
    for id in ["x", "y", "z"] {
        write_clip(dir.path(), &ramp_clip(id, 4, 4, 4)).unwrap();
    }
    let entry = |id: &str, split| ManifestEntry {
        id: id.into(),
        category: Category::LongClear,
        split,
    };
    write_manifest(
        dir.path(),
        &[
            entry("x", Split::Train),
            entry("y", Split::Test),
            entry("z", Split::Train),
        ],
    )
    .unwrap();
    let train = load_dataset_with(dir.path(), Some(Split::Train), 2, Execution::Parallel).unwrap();
    let ids: Vec<_> = train.iter().map(|s| s.meta.id.as_str()).collect();
    assert_eq!(ids, ["x", "x", "z", "z"]);
    assert!(train.iter().all(|s| s.meta.category == Some(Category::LongClear)));
    let mut cfg = RunConfig::default();
    cfg.data.root = dir.path().to_path_buf();
    cfg.data.segment_len = 4;
    assert_eq!(training_segments(&cfg, Execution::Sequential).unwrap().len(), 2);
}

#[test]
fn same_seed_same_first_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let clips = [ramp_clip("a", 5, 32, 32), ramp_clip("b", 4, 32, 32)];
    let run = |exec| {
        let mut t = Trainer::new(cfg.clone(), exec).unwrap();
        let set = TrainSet::prepare(&clips, cfg.input_dims(), exec);
        (t.run_epoch(&set).unwrap().mean_loss, t.params().values().to_vec())
    };
    let (a, pa) = run(Execution::Sequential);
    let (b, pb) = run(Execution::Sequential);
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(pa, pb);
    let (c, pc) = run(Execution::Parallel);
    assert!((a - c).abs() <= 1e-6);
    for (x, y) in pa.iter().zip(&pc) {
        assert!(x.max_abs_diff(y) <= 1e-6);
    }
}

#[test]
fn trained_checkpoint_evaluates_and_predicts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let clips = [ramp_clip("a", 4, 32, 32)];
    let trainer = train(cfg.clone(), &clips, None, Execution::default(), |_| {}).unwrap();
    let (snap, model, ps) = load_model(&cfg.checkpoint_dir.join("epoch-0001.ckpt")).unwrap();
    assert_eq!(snap, cfg);
    assert_eq!(ps.values(), trainer.params().values());
    let e = evaluate_model(&model, &ps, cfg.input_dims(), &clips, Execution::default()).unwrap();
    assert_eq!(e.report.n_frames, 4);
    let probs = infer_sequence(&model, &ps, &clips[0].frames, cfg.input_dims(), Execution::default()).unwrap();
    assert!(probs.iter().all(|p| p.data().iter().all(|v| (0.0..=1.0).contains(v))));
}

#[test]
fn inference_is_symmetric_in_its_passes() {
    let cfg = RunConfig::small(64);
    let (model, ps) = Model::new(&cfg.model, Switches::default(), 9).unwrap();
    let clip = generate_clip(&Category::MediumClear.preset(64, 64, 4), 5).unwrap();
    let size = (64, 64);
    for t in 0..clip.len() {
        let p = infer_frame(&model, &ps, &clip.frames, t, size).unwrap();
        let (prev, _, next) = clip.triplet(t).unwrap();
        let x = prepare_frame(&clip.frames[t], size);
        let a = model
            .forward_pass(&ps, &x, &prepare_frame(prev, size))
            .unwrap()
            .final_prob;
        let b = model
            .forward_pass(&ps, &x, &prepare_frame(next, size))
            .unwrap()
            .final_prob;
        assert!(p.max_abs_diff(&merge_passes(&b, &a)) < 1e-15);
        assert!(p.max_abs_diff(&merge_passes(&a, &b)) < 1e-15);
    }
}

#[test]
fn switches_off_ignore_the_neighbour() {
    let cfg = RunConfig::small(64);
    let (model, ps) = Model::new(&cfg.model, Switches { ctc: false, fsp: true }, 2).unwrap();
    let x = Tensor::from_fn(&[1, 64, 64], |i| (i % 13) as f64 / 12.0);
    let y = Tensor::from_fn(&[1, 64, 64], |i| (i % 7) as f64 / 6.0);
    let a = model.forward_pass(&ps, &x, &x).unwrap();
    let b = model.forward_pass(&ps, &x, &y).unwrap();
    assert_eq!(a, b);
}
