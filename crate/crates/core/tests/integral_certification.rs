use metalab::gaussian::{closed_form, quadrature_oracle, random_psd_cov, CovBlock, IntegralKind, IntegralSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_error(kind: IntegralKind, count: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = IntegralSpec::new(kind);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let c = CovBlock::new(random_psd_cov(kind.dim(), (0.1, 5.0), &mut rng)).unwrap();
        let exact = closed_form(kind, &c).unwrap();
        let quad = quadrature_oracle(&spec, &c).unwrap();
        worst = worst.max((exact - quad).abs());
    }
    worst
}

#[test]
fn closed_forms_match_quadrature() {
    for kind in IntegralKind::ALL {
        let t = std::time::Instant::now();
        let err = max_error(kind, 100, 7);
        eprintln!("{} max err {err:e} in {:?}", kind.name(), t.elapsed());
        assert!(err <= 1e-6, "{}: {err:e}", kind.name());
    }
}
