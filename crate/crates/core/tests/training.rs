//! Full toy-preset federation: the task has to be learnable at this budget.

use fedadapt::bench::config::ExperimentConfig;
use fedadapt::bench::ledger::check_conservation;
use fedadapt::bench::runner::execute_run;

#[test]
fn toy_preset_federation_learns() {
    let cfg = ExperimentConfig::default();
    let run = execute_run(&cfg, "toy", 4, 1.0, 0, 1, false).unwrap();
    let s = &run.summary;
    assert_eq!(s.rounds, 30);
    assert!(
        s.final_accuracy - s.initial_accuracy >= 0.20,
        "{} -> {}",
        s.initial_accuracy,
        s.final_accuracy
    );
    // every client uploads one full adapter payload per round
    assert_eq!(s.total_bytes_up, 30 * 4 * s.update_payload_bytes);
    check_conservation(&run.ledger).unwrap();
}
