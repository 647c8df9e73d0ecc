mod common;

use robotic_clip::analyze::{
    ablation_compare, compute_features, list_images, load_image_frame, manifest_curves,
    read_features, write_features, AnalyzeError, FeatureKind, PromptPair,
};
use robotic_clip::dataprep::Manifest;
use robotic_clip::dataset::FrameLoader;
use robotic_clip::frame::RgbaFrame;
use robotic_clip::loss::correlation_matrix;
use robotic_clip::model::{stack_rows, ModelConfig, RoboticClip};
use robotic_clip::train::Trainer;

fn toy_model() -> RoboticClip {
    RoboticClip::new(&ModelConfig::from_profile("toy").unwrap(), 5).unwrap()
}

fn frames(dir: &std::path::Path, size: usize) -> Vec<(String, RgbaFrame)> {
    let manifest = Manifest::load(&common::synthetic_manifest(dir, "feat", 9, 1, 3)).unwrap();
    let frame_dir = manifest.entries[0].frame_path(0).parent().unwrap().to_path_buf();
    list_images(&frame_dir)
        .unwrap()
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, load_image_frame(&p, size).unwrap())
        })
        .collect()
}

#[test]
fn exported_features_match_in_process_encoding() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model();
    let images = frames(dir.path(), model.config().image_size);
    assert_eq!(images.len(), 3);
    let prompts = vec!["push the red block to the blue bowl".to_string()];

    let (index, batch) = compute_features(&model, &images, &prompts).unwrap();
    assert_eq!(batch.nrows(), 4);
    assert_eq!(index.rows[3].kind, FeatureKind::Prompt);
    for (i, (_, frame)) in images.iter().enumerate() {
        let direct = model.encoder.encode_image(frame).unwrap();
        let single = compute_features(&model, &images[i..=i], &[]).unwrap().1;
        for d in 0..direct.len() {
            assert!((single[[0, d]] - direct[d]).abs() <= 1e-6);
            assert_eq!(batch[[i, d]], single[[0, d]]);
        }
    }
    let prompt_only = compute_features(&model, &[], &prompts).unwrap().1;
    assert_eq!(batch.row(3), prompt_only.row(0));

    let path = dir.path().join("features.bin");
    write_features(&path, &index, &batch).unwrap();
    let (read_index, read) = read_features(&path).unwrap();
    assert_eq!(read_index, index);
    for (a, b) in read.iter().zip(batch.iter()) {
        assert_eq!(a.to_bits(), (*b as f32).to_bits());
    }
}

#[test]
fn truncated_feature_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = toy_model();
    let images = frames(dir.path(), model.config().image_size);
    let (index, m) = compute_features(&model, &images, &[]).unwrap();
    let path = dir.path().join("f.bin");
    write_features(&path, &index, &m).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(read_features(&path), Err(AnalyzeError::File { .. })));
}

#[test]
fn curve_values_are_correlation_entries() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::load(&common::synthetic_manifest(dir.path(), "curve", 4, 3, 5)).unwrap();
    let model = toy_model();
    let loader = FrameLoader::new(&manifest, model.config().image_size);
    let entries: Vec<_> = manifest.entries.iter().collect();
    let curves = manifest_curves(&model, &entries, &loader, PromptPair::FirstLast).unwrap();
    assert_eq!(curves.len(), 3);
    for (curve, e) in curves.iter().zip(&entries) {
        let video = loader.load_video(e).unwrap();
        let refs: Vec<&RgbaFrame> = video.iter().map(|f| f.as_ref()).collect();
        let p = model
            .encode_prompt_for_pair(&e.tokens, &e.action_token_mask, refs[0], refs[refs.len() - 1])
            .unwrap();
        let v = model.encoder.encode_images(&refs).unwrap();
        let f = correlation_matrix(&v, &stack_rows(&[p])).unwrap();
        assert_eq!(curve.similarities.len(), refs.len());
        for (t, s) in curve.similarities.iter().enumerate() {
            assert!((s - f[[t, 0]]).abs() <= 1e-6);
        }
    }
}

#[test]
fn ablation_needs_evaluation_videos() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = Manifest::load(&common::synthetic_manifest(dir.path(), "abl", 4, 4, 3)).unwrap();
    let ckpt = Trainer::new(common::quick_config(2, 2), manifest.clone())
        .unwrap()
        .checkpoint();
    assert!(matches!(
        ablation_compare(&ckpt, &ckpt, &manifest, &[]),
        Err(AnalyzeError::EmptyEvalSet)
    ));
    let entries: Vec<_> = manifest.entries.iter().collect();
    let report = ablation_compare(&ckpt, &ckpt, &manifest, &entries).unwrap();
    assert_eq!(report.videos.len(), 4);
    assert!(report.videos.iter().all(|v| v.tau_difference == 0.0 && v.final_similarity_difference == 0.0));
}
