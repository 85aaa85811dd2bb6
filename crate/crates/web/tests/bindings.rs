use serde_json::Value;
use triad_web::{fixture, fixture_json, regions_json, sweep_json, vote_json};

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn fixture_is_normalized_and_sized() {
    let f = fixture(48, 32, 7).unwrap();
    assert_eq!(f.scores.len(), 48 * 32);
    assert_eq!(f.gt.len(), 48 * 32);
    assert!(f.scores.iter().all(|v| (0.0..=1.0).contains(v)));
    assert_eq!(fixture_json(48, 32, 7).unwrap(), fixture_json(48, 32, 7).unwrap());
    assert!(fixture(0, 10, 1).is_err());
    assert!(fixture(10, 10_000, 1).is_err());
}

#[test]
fn sweep_rates_rise_as_threshold_falls() {
    let v = parse(&sweep_json(64, 64, 3, "0.9, 0.7,0.5,0.3,0.1").unwrap());
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    for key in ["tpr", "fpr"] {
        let col: Vec<f64> = rows.iter().map(|r| r[key].as_f64().unwrap()).collect();
        assert!(col.windows(2).all(|w| w[1] >= w[0]), "{key}: {col:?}");
    }
    assert!(sweep_json(64, 64, 3, "0.5,abc").unwrap_err().contains("abc"));
    assert!(sweep_json(64, 64, 3, " ").is_err());
    assert!(sweep_json(64, 64, 3, "0").is_err());
}

#[test]
fn regions_respect_cap_and_side() {
    let params = r#"{"threshold":0.5,"box_side":16,"iou_merge":0.5,"cap":2}"#;
    for seed in 0..20 {
        let v = parse(&regions_json(64, 48, seed, params).unwrap());
        let boxes = v["boxes"].as_array().unwrap();
        assert!(boxes.len() <= 2);
        for b in boxes {
            let w = b["x1"].as_u64().unwrap() - b["x0"].as_u64().unwrap();
            assert!(w >= 16 && b["x1"].as_u64().unwrap() <= 64);
        }
    }
    assert!(regions_json(64, 48, 0, r#"{"threshold":0.5,"box_side":16,"iou_merge":0.5}"#).is_err());
    assert!(regions_json(64, 48, 0, r#"{"threshold":0.5,"box_side":100,"iou_merge":0.5,"cap":2}"#).is_err());
}

#[test]
fn vote_cases() {
    let v = |zd: &str, zq: f64, zr: f64, od: &str, oq: f64, or: f64| {
        let input = format!(
            r#"{{"zero":{{"decision":"{zd}","normal_score_query":{zq},"normal_score_reference":{zr}}},
                "one":{{"decision":"{od}","normal_score_query":{oq},"normal_score_reference":{or}}}}}"#
        );
        parse(&vote_json(&input).unwrap())
    };
    let agree = v("defect", 0.1, 0.2, "defect", 0.3, 0.4);
    assert_eq!(agree["rationale"], "consensus");
    let trusted = v("normal", 0.7, 0.6, "defect", 0.0, 0.0);
    assert_eq!((trusted["decision"].as_str(), trusted["rationale"].as_str()), (Some("normal"), Some("trusted_query")));
    let flipped = v("defect", 0.0, 0.0, "normal", 0.2, 0.6);
    assert_eq!((flipped["decision"].as_str(), flipped["rationale"].as_str()), (Some("defect"), Some("adopted_opposite")));
    assert!(vote_json("{}").is_err());
}
