mod common;

#[test]
fn same_config_and_seed_give_identical_csvs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = common::run_tiny(a.path(), 15);
    let second = common::run_tiny(b.path(), 15);
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        assert!(!x.is_empty(), "{name} is empty");
        assert!(x == y, "{name} differs between runs");
    }
}
