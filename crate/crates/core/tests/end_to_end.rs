use agrifuse::eval::{evaluate_cv, make_folds, ModelSpec, RunInfo};
use agrifuse::fusion::{decode_cube, encode_cube, ModalitySelection};
use agrifuse::models::{GbdtParams, ModelKind};
use agrifuse::pipeline::{prepare_all, Dataset, PipelineConfig};
use agrifuse::synth::{generate_dataset, SynthConfig};

fn dataset(seed: u64) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_farms: 2,
        fields_per_farm: 4,
        field_cols: 8,
        field_rows: 8,
        seed,
        ..SynthConfig::default()
    };
    generate_dataset(dir.path(), &cfg).unwrap();
    let ds = Dataset::open(dir.path()).unwrap();
    (dir, ds)
}

fn info() -> RunInfo {
    RunInfo {
        model: ModelKind::Gbdt,
        modalities: "s2,weather,soil,dem".into(),
        crop: "wheat".into(),
        country: "synthetic".into(),
        seed: 3,
    }
}

#[test]
fn cubes_survive_encoding() {
    let (_dir, ds) = dataset(1);
    let (ok, _) = prepare_all(&ds, &PipelineConfig::default(), ModalitySelection::ALL).unwrap();
    for p in &ok {
        assert_eq!(decode_cube(&encode_cube(&p.cube).unwrap()).unwrap(), p.cube);
    }
}

#[test]
fn cv_is_reproducible_and_covers_every_field() {
    let (_dir, ds) = dataset(2);
    let (ok, skipped) = prepare_all(&ds, &PipelineConfig::default(), ModalitySelection::ALL).unwrap();
    assert!(skipped.is_empty());
    let fields: Vec<_> = ok.iter().map(|p| p.descriptor.clone()).collect();
    let folds = make_folds(&fields, 4, 3).unwrap();
    let cubes: Vec<_> = ok.into_iter().map(|p| p.cube).collect();
    let spec = ModelSpec::gbdt(GbdtParams {
        max_iterations: 15,
        min_samples_leaf: 5,
        ..GbdtParams::default()
    });
    let run = || evaluate_cv(&cubes, &folds, &spec, ModalitySelection::ALL, info()).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.table.to_csv(), b.table.to_csv());
    assert_eq!(a.predictions.len(), 8);
    for p in &a.predictions {
        assert_eq!(p.target.len(), p.prediction.len());
        assert!(p.prediction.iter().all(|v| v.is_finite()));
        assert_eq!(folds.fold_of(&p.field_id), Some(p.fold));
    }
}

#[test]
fn dropping_a_modality_matches_fusing_without_it() {
    let (_dir, ds) = dataset(4);
    let (all, _) = prepare_all(&ds, &PipelineConfig::default(), ModalitySelection::ALL).unwrap();
    let sel = ModalitySelection::parse("s2,soil").unwrap();
    let (direct, _) = prepare_all(&ds, &PipelineConfig::default(), sel).unwrap();
    for (a, d) in all.iter().zip(&direct) {
        assert_eq!(a.cube.select(sel).unwrap(), d.cube);
    }
}
