use ramit_web::{attribution_values, count_json, noisy_rgba, quality_json, test_card_rgba, PROBE_SIDE, PROBE_WINDOW};
use serde_json::Value;

#[test]
fn count_matches_core() {
    let v: Value = serde_json::from_str(&count_json("sr2", 1280, 720).unwrap()).unwrap();
    assert_eq!(v["params"], 929_768);
    assert_eq!(v["lq"], serde_json::json!([640, 384]));
    assert!(count_json("sr9", 1280, 720).is_err());
    assert!(count_json("sr2", 0, 720).is_err());
}

#[test]
fn noise_and_quality() {
    let side = 24;
    let card = test_card_rgba(side);
    assert_eq!(card.len(), side * side * 4);
    assert_eq!(noisy_rgba(&card, side, side, 0.0, 1).unwrap(), card);
    let a = noisy_rgba(&card, side, side, 25.0, 7).unwrap();
    assert_eq!(a, noisy_rgba(&card, side, side, 25.0, 7).unwrap());
    assert!(a.chunks(4).all(|p| p[3] == 255));

    let same: Value = serde_json::from_str(&quality_json(&card, &card, side, side).unwrap()).unwrap();
    assert_eq!(same["psnr"], "inf");
    assert_eq!(same["ssim"], 1.0);
    let q: Value = serde_json::from_str(&quality_json(&card, &a, side, side).unwrap()).unwrap();
    let p = q["psnr"].as_f64().unwrap();
    assert!((17.0..24.0).contains(&p), "{p}");
    assert!(quality_json(&card, &a[4..], side, side).is_err());
}

#[test]
fn attribution_local_versus_global() {
    let n = PROBE_SIDE;
    let local = attribution_values(0.0, 3, 9, 9).unwrap();
    assert_eq!(local.len(), n * n);
    let lo = PROBE_WINDOW - 1;
    let hi = 2 * PROBE_WINDOW;
    for (i, &v) in local.iter().enumerate() {
        let (y, x) = (i / n, i % n);
        if !((lo..=hi).contains(&y) && (lo..=hi).contains(&x)) {
            assert_eq!(v, 0.0, "({x}, {y})");
        }
    }
    let global = attribution_values(0.5, 3, 9, 9).unwrap();
    let tiles = n / PROBE_WINDOW;
    for ty in 0..tiles {
        for tx in 0..tiles {
            let mass: f32 = (0..PROBE_WINDOW * PROBE_WINDOW)
                .map(|k| global[(ty * PROBE_WINDOW + k / PROBE_WINDOW) * n + tx * PROBE_WINDOW + k % PROBE_WINDOW])
                .sum();
            assert!(mass > 0.0, "tile ({tx}, {ty})");
        }
    }
    assert!(attribution_values(0.0, 3, 31, 0).is_err());
}
