use dtgi_bench::Fixture;
use dtgi_core::bench::{build_data, Method, RunConfig};

#[test]
fn fresh_dtgi_matches_dt_before_training() {
    // up-projections start at zero, so a fresh DTGI is the plain backbone
    let cfg = RunConfig::test_scale();
    let data = build_data(&cfg).unwrap();
    let dt = Fixture::new(&data, &cfg, Method::Dt).unwrap();
    let dtgi = Fixture::new(&data, &cfg, Method::Dtgi).unwrap();
    assert_eq!(dt.batch.windows, cfg.train.batch_size);
    let (a, b) = (dt.step().unwrap(), dtgi.step().unwrap());
    assert!(a.is_finite());
    assert_eq!(a.to_bits(), b.to_bits());
}
