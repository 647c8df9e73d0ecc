use std::path::Path;

use robotic_clip::dataprep::{
    build_manifest, CenteredBoxSegmenter, DataprepError, Manifest, PrepConfig, RuleTagger,
};
use robotic_clip::synthetic::{generate_corpus, SynthConfig};

fn corpus(root: &Path, videos: usize) {
    let synth = SynthConfig {
        videos,
        frames: 4,
        seed: 21,
        ..Default::default()
    };
    generate_corpus(root, &synth).unwrap();
}

fn prepare(corpus: &Path, manifest: &Path) -> Result<(), DataprepError> {
    build_manifest(
        corpus,
        manifest,
        &RuleTagger,
        &CenteredBoxSegmenter::default(),
        &PrepConfig::default(),
    )
    .map(drop)
}

#[test]
fn eight_video_manifest_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("corpus");
    corpus(&root, 8);
    let a = dir.path().join("a/manifest.jsonl");
    let b = dir.path().join("b/manifest.jsonl");
    prepare(&root, &a).unwrap();
    prepare(&root, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let manifest = Manifest::load(&a).unwrap();
    assert_eq!(manifest.entries.len(), 8);
    assert!(manifest.entries.windows(2).all(|w| w[0].video_id < w[1].video_id));
    for e in &manifest.entries {
        for t in 0..e.frame_files.len() {
            let (ma, mb) = (e.mask_path(&manifest.base_dir, t), e.mask_path(&dir.path().join("b"), t));
            assert_eq!(std::fs::read(ma).unwrap(), std::fs::read(mb).unwrap());
        }
    }
}

#[test]
fn empty_corpus_has_no_records() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("empty");
    std::fs::create_dir(&root).unwrap();
    let out = dir.path().join("m.jsonl");
    assert!(matches!(prepare(&root, &out), Err(DataprepError::NoRecords { .. })));
    assert!(!out.exists());
}
