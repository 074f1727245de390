use smlmc::data::synth::{default_spec, synth_generate};
use smlmc::data::{load_dataset, load_fit, load_model, load_population, read_dataset, save_dataset, save_model, ModelFile};
use smlmc::online::{run_online, OnlineConfig};
use smlmc::population::{build_population_model, PopulationConfig};
use smlmc::trainer::fit_patient;
use smlmc::{Error, FitResult, ObservationSet, PopulationModel, TrainConfig};

fn quick_config() -> TrainConfig {
    TrainConfig { q: 2, r: 1, n_random_init: 20, max_outer_iters: 3, scg_max_iters: 20, ..Default::default() }
}

fn fixtures() -> (Vec<ObservationSet>, Vec<FitResult>, PopulationModel) {
    let cohort = synth_generate(&default_spec(1, 1, 4, 96.0, 3).unwrap()).unwrap();
    let cfg = quick_config();
    let fits: Vec<FitResult> = cohort.iter().enumerate().map(|(i, p)| fit_patient(p, &cfg, i as u64).unwrap()).collect();
    let pop = build_population_model(&fits, &PopulationConfig::default(), 1).unwrap();
    (cohort, fits, pop)
}

#[test]
fn models_survive_a_save_and_load() {
    let dir = tempfile::tempdir().unwrap();
    let (cohort, fits, pop) = fixtures();

    let path = dir.path().join("p0.json");
    save_model(&path, &ModelFile::Patient { fit: fits[0].clone(), config: quick_config() }).unwrap();
    let (fit, config) = load_fit(&path).unwrap();
    assert_eq!(config, quick_config());
    assert_eq!(fit.kernel, fits[0].kernel);
    assert_eq!(fit.shrinkage, fits[0].shrinkage);
    assert_eq!(fit.objective_trace, fits[0].objective_trace);
    assert_eq!(fit.standardization, fits[0].standardization);

    let path = dir.path().join("pop.json");
    save_model(&path, &ModelFile::Population(pop.clone())).unwrap();
    let back = load_population(&path).unwrap();
    assert_eq!(back, pop);
    let cfg = OnlineConfig::default();
    for p in &cohort {
        assert_eq!(run_online(p, &back, &cfg).unwrap(), run_online(p, &pop, &cfg).unwrap());
    }
}

#[test]
fn damaged_model_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (_, fits, pop) = fixtures();
    let path = dir.path().join("pop.json");
    save_model(&path, &ModelFile::Population(pop)).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();

    std::fs::write(&path, &text[..text.len() / 2]).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Serialization(_))));

    std::fs::write(&path, text.replacen("\"format_version\": \"1.", "\"format_version\": \"9.", 1)).unwrap();
    assert!(matches!(load_model(&path), Err(Error::Version { .. })));

    save_model(&path, &ModelFile::Patient { fit: fits[0].clone(), config: quick_config() }).unwrap();
    assert!(matches!(load_population(&path), Err(Error::Model(_))));
    assert!(matches!(load_model(dir.path().join("missing.json")), Err(Error::Io(_))));
}

#[test]
fn datasets_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = synth_generate(&default_spec(2, 2, 3, 72.0, 9).unwrap()).unwrap();
    let path = dir.path().join("cohort.csv");
    save_dataset(&path, &cohort).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), cohort);
}

#[test]
fn dataset_errors_name_the_line() {
    let header = "patient_id,covariate_name,time_hours,value\n";
    let cases = [
        ("a,hr,1,2\na,hr,1,3\n", 3),
        ("a,hr,1,2\na,hr,x,3\n", 3),
        ("a,hr,1,\n", 2),
        ("a,,1,2\n", 2),
    ];
    for (body, line) in cases {
        match read_dataset(format!("{header}{body}").as_bytes()) {
            Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{body:?}"),
            other => panic!("{body:?}: expected a parse error, got {other:?}"),
        }
    }
    assert!(matches!(read_dataset("id,cov,t,v\n".as_bytes()), Err(Error::Parse { line: 1, .. })));

    let ok = read_dataset(format!("{header}a,hr,1,2\na,lab,,\nb,lab,3,4\n").as_bytes()).unwrap();
    assert_eq!(ok.len(), 2);
    assert_eq!(ok[0].covariate_names, vec!["hr", "lab"]);
    assert!(ok[0].channels[1].is_empty() && ok[1].channels[0].is_empty());
}
