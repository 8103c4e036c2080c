use ndbench_wasm::{reference_params, Demo};

#[test]
fn train_then_decode() {
    let mut demo = Demo::new(8, 40.0, 3).unwrap();
    let summary: serde_json::Value = serde_json::from_str(&demo.train("gru", 8, 2, 0).unwrap()).unwrap();
    assert_eq!(summary["losses"].as_array().unwrap().len(), 2);
    assert!(summary["r2_avg"].as_f64().unwrap().is_finite());
    let decoded = demo.decode(300).unwrap();
    assert_eq!(decoded.len(), 256 * 4);
    assert!(decoded.iter().all(|v| v.is_finite()));
    assert!(demo.forward_window(64).unwrap().is_finite());
}

#[test]
fn every_kind_trains_in_the_demo() {
    let mut demo = Demo::new(4, 30.0, 1).unwrap();
    for kind in ["gru", "transformer", "rwkv", "mamba"] {
        demo.train(kind, 8, 1, 0).unwrap();
        assert!(demo.forward_window(1024).unwrap().is_finite(), "{kind}");
    }
}

#[test]
fn reference_counts() {
    assert_eq!(reference_params("gru", 96).unwrap(), 272_386);
}
