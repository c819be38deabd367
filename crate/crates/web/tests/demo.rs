use op2e_web::{mountain_car_field, slide_search, temperature_distribution};

#[test]
fn bonus_search_heads_for_unexplored_positions() {
    // Positions 0..=10 are well known; the rest of the slide is unexplored.
    let plain = slide_search(25, 10, 10, 50, false, 60, 10.0, 0).unwrap();
    let bonus = slide_search(25, 10, 10, 50, true, 60, 10.0, 0).unwrap();
    let right = |v: &serde_json::Value| v["visit_counts"][2].as_u64().unwrap();
    let left = |v: &serde_json::Value| v["visit_counts"][0].as_u64().unwrap();
    assert!(right(&bonus) > left(&bonus), "{bonus}");
    assert!(right(&bonus) > right(&plain), "{plain} vs {bonus}");
}

#[test]
fn slide_search_rejects_bad_position() {
    assert!(slide_search(10, 10, 0, 1, true, 10, 1.0, 0).is_err());
}

#[test]
fn field_has_counts_then_uncertainty() {
    let f = mountain_car_field(3, 1, 2, 3).unwrap();
    assert_eq!(f.len(), 2 * 50 * 50);
    let (counts, field) = f.split_at(2500);
    assert!(counts.iter().sum::<f64>() > 0.0);
    let max = field.iter().cloned().fold(f64::MIN, f64::max);
    let min = field.iter().cloned().fold(f64::MAX, f64::min);
    assert!(field.iter().all(|u| u.is_finite() && *u > 0.0));
    assert!(max > min);
}

#[test]
fn temperature_sharpens_distribution() {
    let hot = temperature_distribution(&[1, 2, 7], 1.0);
    let cold = temperature_distribution(&[1, 2, 7], 0.25);
    assert!((hot[2] - 0.7).abs() < 1e-12);
    assert!(cold[2] > hot[2]);
    assert!((cold.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}
