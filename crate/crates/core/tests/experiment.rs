use dmm_core::experiment::{self, gandk_features, quantile_sorted, ExperimentConfig, Space, TaskKind};
use dmm_core::Error;
use proptest::prelude::*;
use std::path::{Path, PathBuf};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn shipped(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name)).unwrap()
}

fn config_error(src: &str) -> String {
    match ExperimentConfig::from_toml(src) {
        Err(Error::Config(m)) => m,
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn shipped_configs_load_and_round_trip() {
    let mut n = 0;
    for entry in std::fs::read_dir(configs_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert_eq!(cfg.task.space(), cfg.space);
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again.to_toml().unwrap(), cfg.to_toml().unwrap());
        n += 1;
    }
    assert!(n >= 5);
}

#[test]
fn omitted_sections_take_defaults() {
    let cfg = ExperimentConfig::from_toml("space = \"so3\"\ntask = \"so3_mixture\"\n").unwrap();
    assert_eq!(cfg.seed, 0);
    assert_eq!(cfg.optim.metrics_every, 100);
    assert_eq!(cfg.so3_mixture_config().sigma, 0.15);
    assert_eq!(cfg.task, TaskKind::So3Mixture);
    assert_eq!(cfg.space, Space::So3);
}

#[test]
fn config_errors_point_at_lines() {
    let m = config_error("space = \"so3\"\ntask = \"bimodal\"\n");
    assert!(m.starts_with("line 1: space"), "{m}");
    let m = config_error("space = \"so3\"\ntask = \"so3_mixture\"\n\n[optim]\nlr = -1.0\n");
    assert!(m.starts_with("line 5: optim.lr"), "{m}");
    let m = config_error("space = \"so3\"\ntask = \"so3_mixture\"\nseeed = 1\n");
    assert!(m.starts_with("line 3:") && m.contains("seeed"), "{m}");
    let m = config_error("space = \"so3\"\ntask = \"so3_mixture\"\n[net]\nhidden = \"wide\"\n");
    assert!(m.starts_with("line 4:"), "{m}");
    let m = config_error("space = \"plane\"\ntask = \"bimodal\"\n");
    assert!(m.starts_with("line 1:"), "{m}");
}

#[test]
fn relative_quantiles_interpolate() {
    let xs = [0.0, 1.0, 2.0, 3.0, 4.0];
    assert_eq!(quantile_sorted(&xs, 0.5), 2.0);
    assert_eq!(quantile_sorted(&xs, 0.0), 0.0);
    assert_eq!(quantile_sorted(&xs, 1.0), 4.0);
    assert!((quantile_sorted(&xs, 0.3) - 1.2).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Shifting or rescaling a data set moves only the location and scale features.
    #[test]
    fn gandk_features_separate_location_and_scale(
        xs in proptest::collection::vec(-5.0f64..5.0, 20..60),
        shift in -3.0f64..3.0,
        scale in 0.2f64..5.0,
    ) {
        let a = gandk_features(&xs, 8).unwrap();
        let moved: Vec<f64> = xs.iter().map(|x| shift + scale * x).collect();
        let b = gandk_features(&moved, 8).unwrap();
        prop_assert_eq!(a.len(), 10);
        prop_assert!((b[1] - a[1] - scale.ln()).abs() < 1e-9);
        for (u, v) in a[2..].iter().zip(&b[2..]) {
            prop_assert!((u - v).abs() < 1e-9);
        }
    }
}

#[test]
fn gandk_features_reject_non_finite() {
    assert!(gandk_features(&[1.0, f64::NAN, 2.0], 2).is_err());
}

#[test]
fn trained_bimodal_finds_both_modes() {
    let cfg = shipped("bimodal.toml");
    let dir = tempfile::tempdir().unwrap();
    let s = experiment::train(&cfg, dir.path(), true).unwrap().summary.unwrap();
    let mu = cfg.bimodal_config().mu;
    let (pos, neg) = (s["mode_positive"].as_f64().unwrap(), s["mode_negative"].as_f64().unwrap());
    assert!((pos - mu).abs() <= 0.1 && (neg + mu).abs() <= 0.1, "{s}");
    assert!((s["fraction_positive"].as_f64().unwrap() - 0.5).abs() < 0.05, "{s}");
}

#[test]
fn single_observation_leaves_k_uncertain() {
    let cfg = shipped("gandk_n1.toml");
    assert_eq!(cfg.gandk_config().n_obs, 1);
    let dir = tempfile::tempdir().unwrap();
    let s = experiment::train(&cfg, dir.path(), true).unwrap().summary.unwrap();
    let width = s["interval_95"][3].as_f64().unwrap() - s["interval_05"][3].as_f64().unwrap();
    // Central 90% of the U[0, 10] prior.
    let prior = 9.0;
    assert!(width >= 0.5 * prior, "k interval width {width}");
}
