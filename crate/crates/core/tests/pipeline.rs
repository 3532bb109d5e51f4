use std::fs;
use std::path::Path as FsPath;

use mpnet::geometry::WorkspaceKind;
use mpnet::pipeline::data::DATASET_MANIFEST;
use mpnet::pipeline::{self, imitation_dataset, DatasetManifest, Layout, PipelineConfig, PipelineError, Split};

const KIND: WorkspaceKind = WorkspaceKind::Simple2d;

fn tiny(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed,
        kinds: vec![KIND],
        ..PipelineConfig::default()
    };
    cfg.scale.n_train = 2;
    cfg.scale.n_unseen = 1;
    cfg.scale.aux_clouds = 2;
    cfg.scale.paths_per_workspace = 3;
    cfg.scale.seen_problems_per_workspace = 2;
    cfg.scale.unseen_problems_per_workspace = 2;
    cfg.scale.n_pc = 100;
    cfg.scale.expert_iters = 1500;
    cfg.train.cae_hidden = vec![32, 16];
    cfg.train.latent_dim = Some(4);
    cfg.train.cae.epochs = 2;
    cfg.train.pnet.hidden = vec![16; 3];
    cfg.train.pnet_train.epochs = 2;
    cfg
}

fn train(cfg: &PipelineConfig, out: &Layout) {
    pipeline::stage_gen_data(cfg, out, KIND).unwrap();
    pipeline::stage_train_cae(cfg, out, KIND).unwrap();
    pipeline::stage_train_pnet(cfg, out, KIND).unwrap();
}

fn bytes(path: &FsPath) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn same_seed_gives_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (la, lb) = (Layout::new(a.path()), Layout::new(b.path()));
    let cfg = tiny(3);
    train(&cfg, &la);
    train(&cfg, &lb);
    assert_eq!(
        bytes(&la.data(KIND).join(DATASET_MANIFEST)),
        bytes(&lb.data(KIND).join(DATASET_MANIFEST))
    );
    for file in ["encoder.json", "decoder.json", "cae_history.json"] {
        let (x, y) = (la.models(KIND).join(file), lb.models(KIND).join(file));
        assert_eq!(bytes(&x), bytes(&y), "{file}");
    }
    let (_, ma) = pipeline::load_models(&la, KIND).unwrap();
    let (_, mb) = pipeline::load_models(&lb, KIND).unwrap();
    assert_eq!(ma.planner, mb.planner);
    assert_eq!(ma.encoder, mb.encoder);
}

#[test]
fn different_seed_changes_dataset() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = pipeline::stage_gen_data(&tiny(3), &Layout::new(a.path()), KIND).unwrap();
    let mb = pipeline::stage_gen_data(&tiny(4), &Layout::new(b.path()), KIND).unwrap();
    assert_ne!(ma.fingerprint, mb.fingerprint);
}

#[test]
fn corrupted_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Layout::new(dir.path());
    let m = pipeline::stage_gen_data(&tiny(3), &out, KIND).unwrap();
    let target = out.data(KIND).join(&m.problems_unseen.path);
    let mut raw = bytes(&target);
    raw.push(b'\n');
    fs::write(&target, raw).unwrap();
    match DatasetManifest::load(&out.data(KIND)) {
        Err(PipelineError::HashMismatch(p)) => assert_eq!(p, m.problems_unseen.path),
        other => panic!("expected hash mismatch, got {other:?}"),
    }
}

#[test]
fn edited_manifest_fails_fingerprint() {
    let dir = tempfile::tempdir().unwrap();
    let out = Layout::new(dir.path());
    let mut m = pipeline::stage_gen_data(&tiny(3), &out, KIND).unwrap();
    m.workspaces[0].path_count += 1;
    fs::write(
        out.data(KIND).join(DATASET_MANIFEST),
        serde_json::to_vec(&m).unwrap(),
    )
    .unwrap();
    assert!(matches!(
        DatasetManifest::load(&out.data(KIND)),
        Err(PipelineError::Fingerprint { .. })
    ));
}

#[test]
fn models_from_another_dataset_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = Layout::new(dir.path());
    train(&tiny(3), &out);
    pipeline::stage_gen_data(&tiny(4), &out, KIND).unwrap();
    assert!(matches!(
        pipeline::load_models(&out, KIND),
        Err(PipelineError::Fingerprint { .. })
    ));
    assert!(matches!(
        pipeline::stage_bench(&tiny(4), &out, KIND),
        Err(PipelineError::Fingerprint { .. })
    ));
}

#[test]
fn unseen_workspaces_never_reach_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = Layout::new(dir.path());
    let m = pipeline::stage_gen_data(&tiny(3), &out, KIND).unwrap();
    let unseen = m.ids(Split::Unseen);
    assert!(!unseen.is_empty());
    for e in m.workspaces.iter().filter(|e| e.split == Split::Unseen) {
        assert!(e.paths.is_none(), "{} has expert paths", e.id);
    }
    let ds = imitation_dataset(&m, &out.data(KIND)).unwrap();
    assert!(!ds.records.is_empty());
    assert!(ds.records.iter().all(|r| !unseen.contains(r.workspace_id.as_str())));
    assert!(ds.clouds.keys().all(|id| !unseen.contains(id.as_str())));
    for p in m.problems(&out.data(KIND), Split::Unseen).unwrap() {
        assert!(unseen.contains(p.workspace_id.as_str()));
    }
}

#[test]
fn workspace_listed_in_both_splits_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = Layout::new(dir.path());
    let mut m = pipeline::stage_gen_data(&tiny(3), &out, KIND).unwrap();
    let mut dup = m.workspaces.iter().find(|e| e.split == Split::Seen).unwrap().clone();
    dup.split = Split::Unseen;
    m.workspaces.push(dup);
    assert!(matches!(m.verify(&out.data(KIND)), Err(PipelineError::Discipline(_))));
}
