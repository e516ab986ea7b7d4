use kws_adapt_web::{detection_metrics_json, laf_profile_json, param_audit_json};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn equal_logits_give_a_flat_profile() {
    let v = parse(&laf_profile_json(&[0.0; 6], 121).unwrap());
    assert_eq!(v["h"].as_array().unwrap().len(), 121);
    assert!(v["profile"].as_array().unwrap().iter().all(|y| y.as_f64().unwrap().abs() < 1e-12));
    assert!(v["weights"].as_array().unwrap().iter().all(|w| (w.as_f64().unwrap() - 1.0 / 6.0).abs() < 1e-12));
}

#[test]
fn a_dominant_relu_logit_looks_like_relu() {
    let v = parse(&laf_profile_json(&[0.0, 0.0, 40.0, 0.0, 0.0, 0.0], 7).unwrap());
    assert_eq!(v["basis"][2], "Relu");
    let act: Vec<f64> = v["activation"].as_array().unwrap().iter().map(|y| y.as_f64().unwrap()).collect();
    for (h, y) in [-3.0f64, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0].into_iter().zip(act) {
        assert!((y - h.max(0.0)).abs() < 1e-9, "{h} {y}");
    }
}

#[test]
fn bad_profile_inputs_are_rejected() {
    assert!(laf_profile_json(&[0.0; 5], 10).is_err());
    assert!(laf_profile_json(&[f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0], 10).is_err());
    assert!(laf_profile_json(&[0.0; 6], 1).is_err());
}

#[test]
fn metrics_of_a_hand_checked_set() {
    // Ranking: 0.9+ 0.8- 0.7+ 0.1-; AP = (1 + 2/3) / 2.
    let v = parse(&detection_metrics_json(&[0.9, 0.8, 0.7, 0.1], &[1, 0, 1, 0]).unwrap());
    assert!((v["ap"].as_f64().unwrap() - 100.0 * (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-9);
    assert_eq!((v["n_pos"].as_u64(), v["n_neg"].as_u64()), (Some(2), Some(2)));
    let sep = parse(&detection_metrics_json(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap());
    assert_eq!(sep["eer"].as_f64(), Some(0.0));
}

#[test]
fn metrics_reject_mismatched_or_one_class_input() {
    assert!(detection_metrics_json(&[0.1, 0.2], &[1]).is_err());
    assert!(detection_metrics_json(&[0.1, 0.2], &[1, 2]).is_err());
    assert!(detection_metrics_json(&[0.1, 0.2], &[1, 1]).is_err());
}

#[test]
fn default_audit_matches_the_full_encoder() {
    let v = parse(&param_audit_json("", "").unwrap());
    assert_eq!(v["total_params"], 2_193_760);
    let rows = v["rows"].as_array().unwrap();
    let clf = rows.iter().find(|r| r["selector"] == "FT clf").unwrap();
    assert_eq!(clf["tunable_params"], 513);
}

#[test]
fn audit_accepts_custom_encoders_and_rejects_garbage() {
    let enc = r#"{"n_mels":20,"channels":16,"res2_scale":4,"n_blocks":3,"attn_channels":8,"embed_dim":16,"dilations":[2,3,4]}"#;
    let v = parse(&param_audit_json(enc, "[]").unwrap());
    assert!(v["rows"].as_array().unwrap().is_empty());
    assert!(v["total_params"].as_u64().unwrap() < 100_000);
    assert!(param_audit_json("{", "").is_err());
    assert!(param_audit_json("", r#"[{"label":"x"}]"#).is_err());
}
