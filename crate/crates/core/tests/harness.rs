use luxloop_core::harness::{run_episodes, TrialConfig};
use luxloop_core::rl::TargetLabel;

fn mean_steps(records: &[luxloop_core::harness::EpisodeRecord]) -> f64 {
    let cap = records[0].config.max_steps as f64;
    records
        .iter()
        .map(|r| r.steps_to_converge.map_or(cap, |s| s as f64))
        .sum::<f64>()
        / records.len() as f64
}

/// Summed over every target, carried tables shorten later episodes.
#[test]
fn carried_tables_shorten_later_episodes() {
    let (mut first, mut last) = (0.0, 0.0);
    for target in TargetLabel::all() {
        let base = TrialConfig {
            target,
            ..TrialConfig::default()
        };
        let (records, _) = run_episodes(&base, 10, true).unwrap();
        first += mean_steps(&records[..3]);
        last += mean_steps(&records[7..]);
    }
    assert!(last <= first, "first three {first}, last three {last}");
    assert!(last < 0.5 * first, "first three {first}, last three {last}");
}

/// Without carrying, every episode starts from scratch and matches a lone trial.
#[test]
fn fresh_episodes_match_standalone_trials() {
    let base = TrialConfig {
        target: TargetLabel::new(4).unwrap(),
        ..TrialConfig::default()
    };
    let (records, _) = run_episodes(&base, 3, false).unwrap();
    for r in &records {
        let again = luxloop_core::harness::run_trial(&r.config).unwrap();
        assert_eq!(again.rows, r.rows);
    }
}
