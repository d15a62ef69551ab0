use cvmd::pipeline::{self, GuidanceScale, Run, RunConfig};
use cvmd::Error;

fn tiny(extra: &[&str]) -> RunConfig {
    let mut ov: Vec<String> = [
        "seed=11",
        "dataset.synth.samples_per_class=10",
        "vqvae.codebook_size=4",
        "vqvae.latent_dim=4",
        "vqvae.hidden_channels=8",
        "vqvae.epochs=3",
        "diffusion.steps=10",
        "diffusion.channels=8",
        "diffusion.emb_dim=8",
        "diffusion.epochs=2",
        "sampling.k=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    ov.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::resolve(None, &ov).unwrap()
}

fn trained(dir: &std::path::Path, extra: &[&str]) -> Run {
    let run = Run::create(dir, tiny(extra)).unwrap();
    pipeline::prepare(&run).unwrap();
    pipeline::train_vqvae_stage(&run).unwrap();
    pipeline::train_diffusion_stage(&run).unwrap();
    pipeline::fit_uq_stage(&run).unwrap();
    run
}

#[test]
fn stages_require_their_predecessors() {
    let tmp = tempfile::tempdir().unwrap();
    let run = Run::create(tmp.path(), tiny(&[])).unwrap();
    assert!(matches!(pipeline::train_vqvae_stage(&run), Err(Error::Config(_))));
    pipeline::prepare(&run).unwrap();
    assert!(matches!(pipeline::train_diffusion_stage(&run), Err(Error::Config(_))));
    assert!(matches!(pipeline::predict_stage(&run), Err(Error::Config(_))));
    assert!(matches!(pipeline::evaluate_stage(&run), Err(Error::Config(_))));
}

#[test]
fn full_run_records_every_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path(), &[]);
    let out = pipeline::predict_stage(&run).unwrap();
    assert!(out.failures.is_empty());
    assert_eq!(out.reports.len(), run.dataset().unwrap().0.test.len());
    for r in &out.reports {
        assert_eq!(r.trajectories.len(), 2);
        assert_eq!(r.w, cvmd::uncertainty::adaptive_guidance(r.delta, &run.config.uq.guidance()));
        assert!(r.drivable);
    }
    let summary = pipeline::evaluate_stage(&run).unwrap();
    assert_eq!(summary.metrics.samples, out.reports.len());
    let rows = pipeline::ablate_stage(&run, &[GuidanceScale::Fixed(0.0), GuidanceScale::Adaptive]).unwrap();
    assert_eq!(rows.iter().map(|r| r.w.as_str()).collect::<Vec<_>>(), ["0", "uc"]);
    assert_eq!(rows[1].summary.mean_ade, summary.metrics.mean_ade);

    let m = run.manifest().unwrap();
    let stages: Vec<&str> = m.stages.keys().map(String::as_str).collect();
    assert_eq!(stages, ["ablate", "evaluate", "fit-uq", "predict", "prepare", "train-diffusion", "train-vqvae"]);
    let text = std::fs::read_to_string(tmp.path().join("run.json")).unwrap();
    assert!(!text.contains(tmp.path().to_str().unwrap()));
}

#[test]
fn tampered_artifact_is_detected() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path(), &[]);
    let bin = tmp.path().join("diffusion/diffusion.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&bin, bytes).unwrap();
    assert!(matches!(pipeline::predict_stage(&run), Err(Error::Data(_))));
}

#[test]
fn predictions_do_not_depend_on_batching() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path(), &[]);
    let a = pipeline::predict_stage(&run).unwrap();
    let rebatched = Run::open(tmp.path(), &["sampling.batch=1".into()]).unwrap();
    let b = pipeline::predict_stage(&rebatched).unwrap();
    assert_eq!(a.reports, b.reports);
    let m = rebatched.manifest().unwrap();
    assert_ne!(m.stages["predict"].config_sha256, m.config_sha256);
}

#[test]
fn unknown_report_ids_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let run = trained(tmp.path(), &[]);
    let mut out = pipeline::predict_stage(&run).unwrap();
    out.reports[0].sample_id = 9_999;
    let test = run.dataset().unwrap().0.test;
    let err = pipeline::match_reports(&out.reports, &test).unwrap_err();
    assert!(err.to_string().contains("9999"), "{err}");
}
