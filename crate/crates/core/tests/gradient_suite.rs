use smalldet_core::gradsuite::{run, SuiteModule, TOLERANCE};

#[test]
fn every_case_passes_on_ten_seeds() {
    let rows = run(&SuiteModule::ALL, 10).unwrap();
    let mut failed = Vec::new();
    for r in &rows {
        println!(
            "{:5} {:24} seed {:2}  max rel err {:.3e}  ({} elements)",
            r.module.name(),
            r.name,
            r.seed,
            r.report.max_rel_error,
            r.report.checked
        );
        if !r.passed() {
            failed.push(format!("{} seed {}: {:?}", r.name, r.seed, r.report));
        }
    }
    assert!(failed.is_empty(), "above {TOLERANCE}:\n{}", failed.join("\n"));
}
