use ha2g_core::config::RunConfig;
use ha2g_core::data::{load_clips, save_clips, synth_corpus, DataError, FlatArray, SynthSpec};
use ha2g_core::model::{Generator, ModelConfig};
use ha2g_core::pipeline::{
    generate_poses, holdout_count, level_skeleton, load_corpus, prepare, write_synth_corpus, Clip, Evaluator, PipelineError, CORPUS_FILE,
};
use ha2g_core::pose::{dirvecs_to_joints, PoseSequence, Skeleton};
use tempfile::TempDir;

fn synth(clips: usize, seed: u64) -> Vec<ha2g_core::data::SynthClip> {
    synth_corpus(&SynthSpec { clips, ..SynthSpec::default() }, &Skeleton::ted43(), seed).unwrap()
}

#[test]
fn written_corpus_loads_back() {
    let dir = TempDir::new().unwrap();
    let clips = synth(5, 1);
    let path = write_synth_corpus(dir.path(), &clips, 16_000).unwrap();
    assert_eq!(path, dir.path().join(CORPUS_FILE));
    let loaded = load_corpus(&path, &Skeleton::ted43()).unwrap();
    assert_eq!(loaded.len(), 5);
    for (l, c) in loaded.iter().zip(&clips) {
        assert_eq!(l.id, c.record.clip_id);
        assert_eq!(l.pose, c.pose);
        assert_eq!((l.speaker, &l.tokens), (c.record.speaker, &c.record.tokens));
        assert_eq!(l.audio.len(), c.audio.len());
        // 16-bit quantisation, written on a 32767 scale and read on 32768.
        let worst = l.audio.iter().zip(&c.audio).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.5 / 32767.0, "{worst}");
    }
}

#[test]
fn missing_output_directory_is_rejected() {
    let dir = TempDir::new().unwrap();
    let err = write_synth_corpus(dir.path().join("absent"), &synth(2, 1), 16_000).unwrap_err();
    assert!(matches!(err, PipelineError::Invalid(_)), "{err}");
}

#[test]
fn joint_payloads_become_direction_vectors() {
    let dir = TempDir::new().unwrap();
    let skel = Skeleton::ted43();
    let clips = synth(2, 2);
    let path = write_synth_corpus(dir.path(), &clips, 16_000).unwrap();
    let mut records = load_clips(&path).unwrap();
    let lengths: Vec<f64> = (0..skel.bone_count()).map(|b| 0.5 + 0.01 * b as f64).collect();
    for (r, c) in records.iter_mut().zip(&clips) {
        let joints = dirvecs_to_joints(&c.pose, &lengths, [0.1, -0.2, 0.3], &skel).unwrap();
        r.joints = Some(FlatArray { shape: vec![c.pose.frames(), skel.joint_count(), 3], data: joints });
        r.dirvecs = None;
    }
    save_clips(&records, &path).unwrap();
    let loaded = load_corpus(&path, &skel).unwrap();
    for (l, c) in loaded.iter().zip(&clips) {
        let worst = l.pose.data().iter().zip(c.pose.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-12, "{worst}");
    }

    records[1].joints = None;
    save_clips(&records, &path).unwrap();
    let err = load_corpus(&path, &skel).unwrap_err();
    assert!(matches!(err, PipelineError::Data(DataError::MissingField { line_no: 2, .. })), "{err}");

    records[1].joints = Some(FlatArray { shape: vec![34, 7, 3], data: vec![0.0; 34 * 21] });
    save_clips(&records, &path).unwrap();
    assert!(matches!(load_corpus(&path, &skel), Err(PipelineError::Pose(_))));
    records[1].joints = None;
    records[1].dirvecs = Some(FlatArray { shape: vec![34, 7, 3], data: vec![0.0; 34 * 21] });
    save_clips(&records, &path).unwrap();
    assert!(matches!(load_corpus(&path, &skel), Err(PipelineError::BadClip { .. })));
}

#[test]
fn level_choices() {
    let skel = Skeleton::ted43();
    assert_eq!(level_skeleton(&skel, 6).unwrap(), skel);
    assert_eq!(level_skeleton(&skel, 1).unwrap().hierarchy().depth(), 1);
    assert!(matches!(level_skeleton(&skel, 3), Err(PipelineError::Invalid(_))));
}

#[test]
fn holdout_is_a_tenth() {
    assert_eq!(holdout_count(500), 50);
    assert_eq!(holdout_count(12), 1);
    assert_eq!(holdout_count(3), 1);
    assert_eq!(holdout_count(2), 0);
}

#[test]
fn prepare_checks_clip_length() {
    let clips: Vec<Clip> = synth(2, 3).iter().map(Clip::from).collect();
    let model = ModelConfig { frames: 20, ..ModelConfig::desk() };
    assert!(matches!(prepare(&clips, &model), Err(PipelineError::BadClip { .. })));
}

#[test]
fn ground_truth_scores_against_itself() {
    let skel = Skeleton::ted43();
    let clips: Vec<Clip> = synth(30, 4).iter().map(Clip::from).collect();
    let cfg = RunConfig { ae_epochs: 2, ..RunConfig::desk() };
    let poses: Vec<PoseSequence> = clips.iter().map(|c| c.pose.clone()).collect();
    let maac = Evaluator::maac_of(&poses, &skel).unwrap();
    let ev = Evaluator::new(&cfg, &skel, &poses, &clips, maac).unwrap();
    let report = ev.evaluate(&poses).unwrap();
    assert!(report.fgd.abs() < 1e-8, "{}", report.fgd);
    // Beats coincide by construction.
    assert!(report.bc.mean > 0.95, "{}", report.bc.mean);
    assert_eq!(report.bc.per_clip.len(), 30);
    assert!(report.diversity > 0.0);
    assert!(matches!(ev.evaluate(&poses[..3]), Err(PipelineError::Invalid(_))));
}

#[test]
fn sampled_styles_are_seeded_and_chunk_independent() {
    let skel = Skeleton::ted43();
    let model = ModelConfig { hidden: 8, ..ModelConfig::desk() };
    let gen = Generator::new(&model, skel.hierarchy(), 5).unwrap();
    let clips: Vec<Clip> = synth(70, 5).iter().map(Clip::from).collect();
    let prepared = prepare(&clips, &model).unwrap();
    let a = generate_poses(&gen, &prepared, 15.0, Some(9)).unwrap();
    let b = generate_poses(&gen, &prepared, 15.0, Some(9)).unwrap();
    let c = generate_poses(&gen, &prepared, 15.0, Some(10)).unwrap();
    let mean = generate_poses(&gen, &prepared, 15.0, None).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_ne!(a, mean);
    // Clips past the first chunk of 64 get the same result alone.
    let tail = generate_poses(&gen, &prepared[64..], 15.0, None).unwrap();
    assert_eq!(tail[..], mean[64..]);
}
