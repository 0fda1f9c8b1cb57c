use sadamp_core::ann::MlpModel;
use sadamp_core::plants::SadParams;
use sadamp_core::simtime::{Action, OracleVerdict, Scenario};
use sadamp_core::stability::SystemModel;
use sadamp_core::tuner::{adapt, AdaptConfig, TuningSource};

fn ramp(r_g: f64, l_g: f64, from: f64, to: f64) -> Scenario {
    let model = SystemModel::case_system(r_g, l_g, from)
        .unwrap()
        .with_sad(Some(SadParams::default()));
    Scenario::new(model, 2.5)
        .with_event(0.5, Action::RampIdRef { device: 0, target: 50.0 * to, duration: 1.0 })
        .with_event(0.5, Action::RampIdRef { device: 1, target: 60.0 * to, duration: 1.0 })
}

#[test]
fn untrained_surrogate_falls_back_and_stays_stable() {
    let sc = ramp(0.2, 4e-3, 0.5, 1.0);
    let junk = MlpModel::init(3, 6, 2, 9);
    let rep = adapt(&sc, &junk, &AdaptConfig::default(), 1).unwrap();
    assert!(rep.flagged());
    assert!(rep.steps.iter().any(|s| s.source == TuningSource::Direct));
    assert!(!rep.steps.is_empty());
    assert_eq!(rep.oracle.verdict, OracleVerdict::Stable);
    let last = rep.steps.last().unwrap();
    assert!(last.applied_margin >= 0.1, "{last:?}");
    assert!((rep.grid.l_g / 4e-3 - 1.0).abs() < 0.03);
}

#[test]
fn report_sections_are_present() {
    let sc = ramp(0.15, 3e-3, 1.0, 0.75);
    let rep = adapt(&sc, &MlpModel::init(3, 6, 2, 9), &AdaptConfig::default(), 1).unwrap();
    let text = rep.to_text();
    for h in ["[estimation]", "[grid_used]", "[tuning]", "[time_domain]"] {
        assert!(text.contains(h), "missing {h}");
    }
    assert_eq!(rep.steps_csv().lines().count(), rep.steps.len() + 1);
}

#[test]
fn surrogate_must_have_three_inputs() {
    let sc = ramp(0.2, 4e-3, 0.5, 1.0);
    assert!(adapt(&sc, &MlpModel::init(2, 4, 2, 1), &AdaptConfig::default(), 1).is_err());
}
