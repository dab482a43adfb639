//! Randomized property checks over geometry, consolidation and the parser.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revgrpo_core::consolidation::{alignment_cost, shaping_signal, ShapingSet};
use revgrpo_core::geometry::{iou, l1_box, l1_point, BoxN, PointN};
use revgrpo_core::response::{parse, FormatError, Response};

fn random_box(rng: &mut ChaCha8Rng) -> BoxN {
    let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
    let (c, d) = (rng.random::<f64>(), rng.random::<f64>());
    BoxN::new(a.min(b), c.min(d), a.max(b), c.max(d)).unwrap()
}

fn random_point(rng: &mut ChaCha8Rng) -> PointN {
    PointN::new(rng.random(), rng.random()).unwrap()
}

fn random_objects(rng: &mut ChaCha8Rng, n: usize) -> (Vec<BoxN>, Vec<PointN>) {
    (0..n).map(|_| (random_box(rng), random_point(rng))).unzip()
}

#[test]
fn geometry_measures_stay_in_unit_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100_000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let (p, q) = (random_point(&mut rng), random_point(&mut rng));
        for v in [iou(&a, &b), l1_box(&a, &b), l1_point(&p, &q)] {
            assert!((0.0..=1.0).contains(&v), "{v}");
        }
        assert_eq!(iou(&a, &b), iou(&b, &a));
    }
}

#[test]
fn shaping_signal_properties_on_random_shaping_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        let nx = rng.random_range(1..=4);
        let (gb, gp) = random_objects(&mut rng, nx);
        let m1 = rng.random_range(0..=5);
        let m2 = rng.random_range(0..=5);
        let (b1, p1) = random_objects(&mut rng, m1);
        let (b2, p2) = random_objects(&mut rng, m2);
        let set = |b: &'_ [BoxN], p: &'_ [PointN]| {
            alignment_cost(&ShapingSet {
                pred_boxes: b,
                pred_points: p,
                gt_boxes: &gb,
                gt_points: &gp,
            })
            .unwrap()
            .0
        };
        let phi1 = set(&b1, &p1);
        let phi2 = set(&b2, &p2);
        assert!((0.0..=1.0).contains(&phi1) && (0.0..=1.0).contains(&phi2));
        let d = shaping_signal(phi1, phi2);
        assert!((0.0..=1.0).contains(&d));
        if phi2 >= phi1 {
            assert_eq!(d, 0.0);
        }
        let halved = shaping_signal(phi1 / 2.0, phi2 / 2.0);
        if phi1 / 2.0 >= 1e-6 {
            assert!((halved - d).abs() < 1e-12, "{halved} vs {d}");
        }
    }
}

#[test]
fn shaping_signal_is_monotone_in_revised_cost() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10_000 {
        let phi1 = rng.random_range(1e-6..=1.0);
        let a = rng.random::<f64>();
        let b = rng.random::<f64>();
        assert!(shaping_signal(phi1, a.min(b)) >= shaping_signal(phi1, a.max(b)));
    }
}

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 20] = [
        "<think>",
        "</think>",
        "<answer>",
        "</answer>",
        "[",
        "]",
        "{",
        "}",
        "\"bbox\"",
        "\"point\"",
        ":",
        ",",
        "0.5",
        "-1",
        "1e9",
        "null",
        "\"x\"",
        " ",
        "0.1,0.2,0.3,0.4",
        "NaN",
    ];
    match rng.random_range(0..3) {
        0 => {
            let len = rng.random_range(0..64);
            let bytes: Vec<u8> = (0..len).map(|_| rng.random()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        }
        1 => (0..rng.random_range(0..24))
            .map(|_| PIECES[rng.random_range(0..PIECES.len())])
            .collect(),
        _ => {
            let n = rng.random_range(0..4);
            let (b, p) = random_objects(rng, n);
            let mut s: Vec<char> = Response::new("r", b, p)
                .unwrap()
                .serialize()
                .chars()
                .collect();
            for _ in 0..rng.random_range(1..4) {
                if s.is_empty() {
                    break;
                }
                let i = rng.random_range(0..s.len());
                match rng.random_range(0..3) {
                    0 => {
                        s.remove(i);
                    }
                    1 => s.insert(i, char::from(rng.random_range(32u8..127))),
                    _ => s[i] = char::from(rng.random_range(32u8..127)),
                }
            }
            s.into_iter().collect()
        }
    }
}

#[test]
fn parser_survives_fuzzing() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ok = 0;
    for _ in 0..100_000 {
        let text = random_text(&mut rng);
        match parse(&text) {
            Ok(r) => {
                ok += 1;
                assert_eq!(r.boxes().len(), r.points().len());
            }
            Err(
                FormatError::MissingThink
                | FormatError::MissingAnswer
                | FormatError::WrongOrder
                | FormatError::MalformedObjectList(_)
                | FormatError::CoordinateOutOfRange(_),
            ) => {}
        }
    }
    assert!(ok > 0);
}

#[test]
fn serialize_then_parse_is_identity_up_to_quantization() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..10_000 {
        let n = rng.random_range(0..6);
        let (b, p) = random_objects(&mut rng, n);
        let r = Response::new(format!("reasoning {i}"), b, p).unwrap();
        let back = parse(&r.serialize()).unwrap();
        assert_eq!(back.reasoning(), r.reasoning());
        assert_eq!(back.len(), r.len());
        for (x, y) in back.boxes().iter().zip(r.boxes()) {
            for (u, v) in x.coords().iter().zip(y.coords()) {
                assert!((u - v).abs() <= 5e-7 + 1e-15);
            }
        }
        for (x, y) in back.points().iter().zip(r.points()) {
            for (u, v) in x.coords().iter().zip(y.coords()) {
                assert!((u - v).abs() <= 5e-7 + 1e-15);
            }
        }
        assert_eq!(back.serialize(), r.serialize());
    }
}
