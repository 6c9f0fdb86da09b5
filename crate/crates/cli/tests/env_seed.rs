//! Alone in its own binary: it mutates the process environment.

use setpredict_cli::config::SEED_ENV;
use setpredict_cli::RunConfig;

#[test]
fn seed_variable_overrides_file_and_flags() {
    let dir = tempfile::TempDir::new().unwrap();
    let file = dir.path().join("run.cfg");
    std::fs::write(&file, "train.seed = 5\n").unwrap();
    std::env::remove_var(SEED_ENV);
    let c = RunConfig::load(Some(&file), &["train.seed=6".into()]).unwrap();
    assert_eq!(c.train().unwrap().seed, 6);
    std::env::set_var(SEED_ENV, "11");
    let c = RunConfig::load(Some(&file), &["train.seed=6".into()]).unwrap();
    assert_eq!(c.train().unwrap().seed, 11);
    std::env::set_var(SEED_ENV, "eleven");
    assert!(RunConfig::load(None, &[]).unwrap_err().to_string().contains("train.seed"));
    std::env::remove_var(SEED_ENV);
}
