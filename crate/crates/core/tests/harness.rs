use avatar_diffusion::audio::AudioTrack;
use avatar_diffusion::checkpoint::{file_sha256, Checkpoint};
use avatar_diffusion::data::{frame_file_name, synth_dataset, SynthDataset, SynthOptions};
use avatar_diffusion::infer::{infer, infer_with_model, InferRequest, MANIFEST_FILE};
use avatar_diffusion::model::is_stage2_param;
use avatar_diffusion::train::{
    checkpoint_with_step, extractor_for, resume, train_stage1, train_stage2, TrainOptions, TrainingData,
};
use avatar_diffusion::{AvatarModel, ModelConfig, Stage};
use candle_core::Device;

fn data(cfg: &ModelConfig, videos: usize, frames: usize) -> (SynthDataset, TrainingData) {
    let ds = synth_dataset(videos, frames, 3, &SynthOptions::for_config(cfg).unwrap()).unwrap();
    let td = TrainingData::from_dataset(&ds, cfg, &extractor_for(cfg), &Device::Cpu).unwrap();
    (ds, td)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn opts(steps: usize) -> TrainOptions {
    TrainOptions { steps, log_every: 0 }
}

#[test]
fn resumed_training_continues_the_loss_curve() {
    let cfg = ModelConfig::toy();
    let (_, td) = data(&cfg, 2, 24);
    let (_, straight) = train_stage1(&cfg, &td, &opts(60)).unwrap();

    let (half, first) = train_stage1(&cfg, &td, &opts(30)).unwrap();
    assert_eq!(first.losses[..], straight.losses[..30]);
    let bytes = checkpoint_with_step(&half, 30).to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(&bytes, &Device::Cpu).unwrap();
    let (_, resumed) = resume(&ck, &td, &opts(30)).unwrap();
    assert_eq!(resumed.start_step, 30);

    let initial = mean(&straight.losses[..10]);
    let reference = mean(&straight.losses[30..]);
    let continued = mean(&resumed.losses);
    assert!(continued < 0.75 * initial, "resumed {continued} vs initial {initial}");
    assert!(
        (continued - reference).abs() < 0.25 * reference,
        "resumed {continued} vs uninterrupted {reference}"
    );
}

#[test]
fn stage1_checkpoint_has_no_temporal_or_audio_params() {
    let cfg = ModelConfig::toy();
    let ck = Checkpoint::from_model(&AvatarModel::init(cfg.clone(), Stage::One).unwrap(), Default::default());
    assert!(ck.tensors.keys().all(|n| !is_stage2_param(n)));
    let two = ck.to_stage2_model(&cfg, &Device::Cpu).unwrap();
    let full = Checkpoint::from_model(&two, Default::default());
    assert!(full.tensors.keys().any(|n| is_stage2_param(n)));
    assert!(ck.tensors.keys().all(|n| full.tensors.contains_key(n)));
}

#[test]
fn trained_model_responds_to_audio() {
    let cfg = ModelConfig::toy();
    let (ds, td) = data(&cfg, 2, 24);
    let stage1 = Checkpoint::from_model(&AvatarModel::init(cfg.clone(), Stage::One).unwrap(), Default::default());
    let (model, _) = train_stage2(&cfg, &td, &stage1, &opts(15)).unwrap();

    let speech = &ds.videos[0].audio;
    let silence = AudioTrack::new(vec![0.0; speech.samples.len()], speech.sample_rate).unwrap();
    let reference = &ds.videos[0].frames[0];
    let seconds = cfg.clip_len as f64 / cfg.fps;
    let a = infer_with_model(&model, speech, reference, seconds, 1).unwrap();
    let b = infer_with_model(&model, &silence, reference, seconds, 1).unwrap();
    assert_eq!(a.len(), cfg.clip_len);
    let diff: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| {
            (x - y)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        })
        .fold(0.0, f64::max);
    assert!(
        diff > 1e-6,
        "silence and speech produced the same frames (max diff {diff})"
    );
}

#[test]
fn infer_writes_a_complete_manifest() {
    let cfg = ModelConfig::toy();
    let dir = tempfile::tempdir().unwrap();
    let ds = synth_dataset(1, 4, 5, &SynthOptions::for_config(&cfg).unwrap()).unwrap();
    let manifest = ds.save(dir.path().join("data")).unwrap();
    let entry = &manifest.videos[0];
    let ckpt = dir.path().join("model.ckpt");
    let model = Checkpoint::from_model(&AvatarModel::init(cfg.clone(), Stage::One).unwrap(), Default::default())
        .to_stage2_model(&cfg, &Device::Cpu)
        .unwrap();
    Checkpoint::from_model(&model, Default::default()).save(&ckpt).unwrap();

    let req = InferRequest {
        checkpoint: ckpt.clone(),
        audio: dir.path().join("data").join(&entry.audio),
        reference: dir.path().join("data").join(&entry.frames_dir).join(frame_file_name(0)),
        seconds: None,
        seed: 9,
        out_dir: dir.path().join("out"),
    };
    let m = infer(&req).unwrap();
    // 4 frames of audio at 25 fps is exactly one clip.
    assert_eq!(m.frame_count, 4);
    assert_eq!(m.clip_boundaries, vec![[0, 4]]);
    assert_eq!(m.seed, 9);
    assert_eq!(m.config_hash, cfg.hash());
    assert_eq!(m.checkpoint_sha256, file_sha256(&ckpt).unwrap());
    for f in &m.frames {
        assert!(req.out_dir.join(f).is_file());
    }
    let on_disk: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(req.out_dir.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk["frame_count"], 4);
}
