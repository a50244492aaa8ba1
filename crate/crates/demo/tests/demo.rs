use serde_json::Value;

use ddfm_demo::{ar_flow_json, cluster_json, route_json};

#[test]
fn ar_flow_reveals_one_position_per_step() {
    let v: Value = serde_json::from_str(&ar_flow_json(3, 3, 1, 7).unwrap()).unwrap();
    assert_eq!(v["horizon"], 2);
    assert!(v["max_residual"].as_f64().unwrap() <= 1e-12);
    let steps = v["steps"].as_array().unwrap();
    assert_eq!(steps.len(), 3);
    assert_eq!(steps[0]["active_position"], 2);
    assert_eq!(steps[1]["active_position"], 3);
    assert_eq!(steps[0]["states"].as_array().unwrap().len(), 2);
    assert_eq!(steps[2]["states"].as_array().unwrap().len(), 8);
    assert!(ar_flow_json(9, 6, 0, 1).is_err());
}

#[test]
fn router_reports_softmax_and_top_k() {
    let v: Value =
        serde_json::from_str(&route_json("[1, 0]", "[[1, 0], [0, 2]]", 1.0, 1).unwrap()).unwrap();
    let e = 1f64.exp();
    assert!((v["softmax"][0].as_f64().unwrap() - e / (e + 1.0)).abs() < 1e-12);
    assert_eq!(v["top_k"][0], 1.0);
    assert_eq!(v["argmax"], 0);
    assert!(route_json("[0, 0]", "[[1, 0]]", 1.0, 1).is_err());
    assert!(route_json("not json", "[[1, 0]]", 1.0, 1).is_err());
}

#[test]
fn clustering_returns_balanced_model() {
    let points = "[[1,0.1],[1,-0.1],[0.9,0],[-1,0.1],[-1,-0.1],[-0.9,0.05]]";
    let v: Value = serde_json::from_str(&cluster_json(points, 2, 3).unwrap()).unwrap();
    assert_eq!(v["size_spread"], 0);
    let a: Vec<usize> = serde_json::from_value(v["assignment"].clone()).unwrap();
    assert_eq!(a[0], a[1]);
    assert_eq!(a[3], a[4]);
    assert_ne!(a[0], a[3]);
}
