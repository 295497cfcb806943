//! Guards the serde_json `float_roundtrip` feature: train-state and report
//! persistence rely on f64 values surviving a JSON round trip bit-exactly.

#[test]
fn json_f64_round_trip_is_bit_exact() {
    for v in [
        31.458603262901306f64,
        31.458603262901303,
        26.174480199813843,
        1e-4,
        0.02,
        7.5,
        f64::MIN_POSITIVE,
    ] {
        let s = serde_json::to_string(&v).unwrap();
        let back: f64 = serde_json::from_str(&s).unwrap();
        assert_eq!(v.to_bits(), back.to_bits(), "{v} -> {s}");
    }
}
