use cosavatar::config::RunConfig;
use proptest::prelude::*;

#[test]
fn document_and_overrides_layer_in_order() {
    let doc = "seed = 3\n[reconstruct]\ntotal_iters = 40\n";
    let cfg = RunConfig::resolve(Some(doc), &["reconstruct.total_iters=7".into(), "render.near=1".into()]).unwrap();
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.reconstruct.total_iters, 7);
    assert_eq!(cfg.render.near, 1.0);
    assert_eq!(cfg.edit_schedule().seed, 4);
    let again = RunConfig::resolve(Some(&cfg.to_toml().unwrap()), &[]).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.hash(), cfg.hash());
}

#[test]
fn bad_keys_and_values_are_rejected() {
    assert!(RunConfig::resolve(None, &["render.nope=1".into()]).is_err());
    assert!(RunConfig::resolve(None, &["render.near".into()]).is_err());
    assert!(RunConfig::resolve(Some("[scene]\nimage_size = 48\n"), &[]).is_err());
    assert!(RunConfig::resolve(Some("not toml ["), &[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn seed_override_changes_hash(a in 0u64..1000, b in 0u64..1000) {
        let x = RunConfig::resolve(None, &[format!("seed={a}")]).unwrap();
        let y = RunConfig::resolve(None, &[format!("seed={b}")]).unwrap();
        prop_assert_eq!(x.seed, a);
        prop_assert_eq!(x.hash() == y.hash(), a == b);
    }
}
