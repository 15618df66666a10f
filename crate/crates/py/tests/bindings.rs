use combts_py::{decompose, dft, idft, mann_whitney, mu_hat, synthetic, validate_config, PyModel};

#[test]
fn statistics_and_transforms() {
    assert_eq!(mu_hat(vec![0.25; 4]).unwrap(), 0.25);
    let (u, p, exact) = mann_whitney(vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]).unwrap();
    assert_eq!((u, exact), (0.0, true));
    assert!((p - 0.05).abs() < 1e-15);

    let x: Vec<f64> = (0..16).map(|t| (t as f64 * 0.7).sin()).collect();
    let back = idft(dft(x.clone()));
    assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
    let (trend, seasonal) = decompose(x.clone(), 5).unwrap();
    assert!((0..16).all(|i| (trend[i] + seasonal[i] - x[i]).abs() < 1e-12));
}

#[test]
fn model_round_trip() {
    let rows = synthetic(400, 2, 12, 1, 1.0, 0.0, 0.05, 3).unwrap();
    let mut model = PyModel::new(24, 6, 2, "cycle", "identity", "identity", 1, 1, 12, 0).unwrap();
    let window: Vec<Vec<f64>> = (0..2).map(|n| rows[..24].iter().map(|r| r[n]).collect()).collect();
    let y = model.predict(vec![window], Some(vec![0])).unwrap();
    assert_eq!((y.len(), y[0].len(), y[0][0].len()), (1, 2, 6));
    let (mse, _, best) = model.fit(rows, 1e-2, 3, 3, 32, 0).unwrap();
    assert!(mse.is_finite() && best >= 1);
    assert!(PyModel::new(24, 6, 2, "none", "lstm", "identity", 8, 1, 12, 0).is_err());
}

#[test]
fn bundled_config_validates() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/configs/exp3-mini.toml");
    let (config_hash, plan_hash, runs) = validate_config(path).unwrap();
    assert_eq!((config_hash.len(), plan_hash.len(), runs), (64, 64, 24));
}
