use neural_ppo::harness::sweep::reference_mdp;
use neural_ppo::ppo::{parse_csv, records_to_csv, run, IterationRecord, RunConfig};

#[test]
fn reference_run_improves_on_the_uniform_policy() {
    let mdp = reference_mdp();
    let out = run(&mdp, &RunConfig::default()).unwrap();
    assert_eq!(out.records.len(), 50);
    assert!(out.min_gap < out.records[0].gap);
    for r in &out.records {
        assert!(r.gap >= -1e-10);
        assert!(r.monotonicity <= 1e-12);
        assert!(r.perf_diff_residual.abs() <= 1e-10);
    }
}

#[test]
fn identical_configs_give_identical_records() {
    let mdp = reference_mdp();
    let cfg = RunConfig { k_iters: 4, t_f: 300, t_q: 300, m: 64, seed: 3, ..RunConfig::default() };
    let a = run(&mdp, &cfg).unwrap();
    let b = run(&mdp, &cfg).unwrap();
    assert_eq!(a.records, b.records);
    let c = run(&mdp, &RunConfig { seed: 4, ..cfg }).unwrap();
    assert_ne!(a.records, c.records);
}

#[test]
fn csv_has_fixed_columns_and_parses_back() {
    let mdp = reference_mdp();
    let cfg = RunConfig { k_iters: 2, t_f: 50, t_q: 50, m: 16, ..RunConfig::default() };
    let out = run(&mdp, &cfg).unwrap();
    let csv = records_to_csv(&out.records);
    assert!(csv.starts_with(IterationRecord::CSV_HEADER));
    let rows = parse_csv(&csv).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1][3], out.records[1].gap);
    assert_eq!(rows[0].len(), 15);
}
