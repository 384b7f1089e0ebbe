use std::collections::BTreeSet;

use proptest::prelude::*;
use wspace_core::toyfaces::render::{grid_coord, part_rgb, Layout};
use wspace_core::toyfaces::{
    describe, extract_label_map, extract_sketch, parse_text, render, sample_attributes, AttributeVector, Dataset,
    DatasetConfig, Part, SketchConfig, Slot, Split,
};
use wspace_tensor::Tensor;

fn attrs_with(seed: u64, changes: &[(Slot, usize)]) -> AttributeVector {
    changes.iter().fold(sample_attributes(seed), |a, &(s, v)| a.with(s, v))
}

#[test]
fn attribute_sampling_is_deterministic_and_varied() {
    assert_eq!(sample_attributes(7), sample_attributes(7));
    let distinct: Vec<_> = (0..10).map(sample_attributes).collect();
    let first = distinct[0];
    assert!(distinct.iter().any(|a| *a != first));
}

#[test]
fn attribute_frequencies_within_three_sigma_of_uniform() {
    let n = 10_000usize;
    let draws: Vec<_> = (0..n as u64).map(sample_attributes).collect();
    for slot in Slot::DISCRETE {
        let k = slot.cardinality().unwrap();
        let p = 1.0 / k as f64;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for v in 0..k {
            let count = draws.iter().filter(|a| a.discrete(slot) == Some(v)).count() as f64;
            assert!((count - n as f64 * p).abs() <= 3.0 * sigma, "{slot}={v}: {count}");
        }
    }
    assert!(draws.iter().all(|a| (0.0..1.0).contains(&a.background_hue)));
}

#[test]
fn render_is_bitwise_deterministic() {
    let a = sample_attributes(3);
    assert_eq!(render(&a, 32, 5).unwrap(), render(&a, 32, 5).unwrap());
    assert_eq!(render(&a, 64, 5).unwrap().shape(), &[64, 64, 3]);
}

#[test]
fn glasses_only_change_pixels_inside_eye_box() {
    for seed in 0..40 {
        let base = attrs_with(seed, &[(Slot::Glasses, 0)]);
        let with = base.with(Slot::Glasses, 1);
        for res in [32, 64] {
            let (a, b) = (render(&base, res, seed).unwrap(), render(&with, res, seed).unwrap());
            let (x0, y0, x1, y1) = Layout::new(&base, seed).eye_box();
            let mut changed = 0;
            for py in 0..res {
                for px in 0..res {
                    let i = (py * res + px) * 3;
                    if a.data()[i..i + 3] != b.data()[i..i + 3] {
                        changed += 1;
                        let (x, y) = (grid_coord(px, res), grid_coord(py, res));
                        assert!(x >= x0 && x <= x1 && y >= y0 && y <= y1, "pixel ({px},{py}) outside eye box");
                    }
                }
            }
            assert!(changed > 0);
        }
    }
}

#[test]
fn bald_has_no_hair_label_and_no_glasses_means_no_glasses_label() {
    for seed in 0..50 {
        let a = attrs_with(seed, &[(Slot::HairLength, 0), (Slot::Glasses, 0)]);
        let lm = extract_label_map(&a, 32, seed).unwrap();
        assert!(!lm.contains(&Part::Hair.id()));
        assert!(!lm.contains(&Part::Glasses.id()));
        assert!(lm.iter().all(|&l| (l as usize) < Part::COUNT));
    }
}

#[test]
fn hat_sits_above_hair_centroid() {
    for seed in 0..50 {
        let len = 1 + (seed as usize % 2);
        let a = attrs_with(seed, &[(Slot::Hat, 1), (Slot::HairLength, len)]);
        let lm = extract_label_map(&a, 32, seed).unwrap();
        let rows = |p: Part| lm.iter().enumerate().filter(move |(_, &l)| l == p.id()).map(|(i, _)| i / 32);
        let hair: Vec<usize> = rows(Part::Hair).collect();
        let centroid = hair.iter().sum::<usize>() as f64 / hair.len() as f64;
        let hat_bottom = rows(Part::Hat).max().expect("hat pixels");
        assert!((hat_bottom as f64) < centroid, "seed {seed}");
    }
}

#[test]
fn ten_distinct_descriptions_by_default_and_deterministic() {
    let a = sample_attributes(4);
    let d = describe(&a, 10, 1).unwrap();
    assert_eq!(d.len(), 10);
    assert_eq!(d.iter().collect::<BTreeSet<_>>().len(), 10);
    assert_eq!(d, describe(&a, 10, 1).unwrap());
    for s in &d {
        assert!(parse_text(s).len() >= 2, "{s}");
    }
}

#[test]
fn blonde_and_glasses_co_occur() {
    for seed in 0..20 {
        let a = attrs_with(seed, &[(Slot::HairColor, 1), (Slot::Glasses, 1)]);
        let d = describe(&a, 10, seed).unwrap();
        assert!(d.iter().any(|s| {
            let q = parse_text(s);
            q.get(Slot::HairColor) == Some(1) && q.get(Slot::Glasses) == Some(1)
        }));
    }
}

#[test]
fn parser_examples() {
    let q = parse_text("she has long blonde hair");
    let got: Vec<_> = q.iter().collect();
    assert_eq!(got, vec![(Slot::GenderPresentation, 0), (Slot::HairColor, 1), (Slot::HairLength, 2)]);
    assert!(parse_text("").is_empty());
    assert!(parse_text("zebra quantum").is_empty());
}

#[test]
fn parse_never_contradicts_generated_descriptions() {
    for seed in 0..1000u64 {
        let a = sample_attributes(seed);
        for s in describe(&a, 10, seed).unwrap() {
            let q = parse_text(&s);
            assert!(!q.is_empty());
            assert!(q.consistent_with(&a), "{s:?} vs {a:?}");
        }
    }
}

#[test]
fn sketch_edge_cases() {
    let flat = Tensor::full(vec![32, 32, 3], 0.4);
    assert_eq!(extract_sketch(&flat, &SketchConfig::default()).sum(), 0.0);
    let img = render(&sample_attributes(1), 32, 0).unwrap();
    let none = extract_sketch(&img, &SketchConfig { quantile: 1.0, min_magnitude: 0.0 });
    assert_eq!(none.sum(), 0.0);
}

#[test]
fn sketch_traces_face_outline() {
    // Dark skin against a pale background: every face/background border pixel should be an edge.
    for seed in 0..20 {
        let mut a = attrs_with(seed, &[(Slot::SkinTone, 2), (Slot::HairLength, 0), (Slot::Hat, 0)]);
        a.background_hue = 0.15;
        let img = render(&a, 32, seed).unwrap();
        let lm = extract_label_map(&a, 32, seed).unwrap();
        let sk = extract_sketch(&img, &SketchConfig::default());
        let (mut border, mut hit) = (0, 0);
        for y in 1..31 {
            for x in 1..31 {
                let i = y * 32 + x;
                if lm[i] != Part::Skin.id() {
                    continue;
                }
                let nb = [i - 1, i + 1, i - 32, i + 32];
                if nb.iter().any(|&j| lm[j] == Part::Background.id()) {
                    border += 1;
                    hit += (sk.data()[i] == 1.0) as usize;
                }
            }
        }
        assert!(border > 20);
        assert!(hit as f64 >= 0.9 * border as f64, "seed {seed}: {hit}/{border}");
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[test]
fn image_label_consistency_per_part() {
    let mut totals = [0usize; Part::COUNT];
    let mut matches = [0usize; Part::COUNT];
    for seed in 0..200u64 {
        let a = sample_attributes(seed);
        let img = render(&a, 32, seed).unwrap();
        let lm = extract_label_map(&a, 32, seed).unwrap();
        let palette: Vec<(Part, [f64; 3])> = Part::ALL.iter().map(|&p| (p, part_rgb(p, &a))).collect();
        for (i, &l) in lm.iter().enumerate() {
            let px = &img.data()[3 * i..3 * i + 3];
            let nearest = palette
                .iter()
                .filter(|(p, _)| lm.contains(&p.id()))
                .min_by(|x, y| dist(px, &x.1).total_cmp(&dist(px, &y.1)))
                .unwrap()
                .0;
            totals[l as usize] += 1;
            matches[l as usize] += (nearest.id() == l) as usize;
        }
    }
    for p in Part::ALL {
        let (t, m) = (totals[p.id() as usize], matches[p.id() as usize]);
        assert!(t > 0);
        assert!(m as f64 >= 0.9 * t as f64, "{}: {m}/{t}", p.name());
    }
}

#[test]
fn sketch_pixels_lie_near_label_boundaries() {
    for seed in 0..200u64 {
        let a = sample_attributes(seed);
        for res in [32usize, 64] {
            let img = render(&a, res, seed).unwrap();
            let lm = extract_label_map(&a, res, seed).unwrap();
            let sk = extract_sketch(&img, &SketchConfig::default());
            let at = |x: i64, y: i64| lm[(y.clamp(0, res as i64 - 1) as usize) * res + x.clamp(0, res as i64 - 1) as usize];
            let is_boundary = |x: i64, y: i64| {
                let l = at(x, y);
                [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|(dx, dy)| at(x + dx, y + dy) != l)
            };
            for y in 0..res as i64 {
                for x in 0..res as i64 {
                    if sk.data()[y as usize * res + x as usize] == 0.0 {
                        continue;
                    }
                    let near = (-1..=1).any(|dy| (-1..=1).any(|dx| is_boundary(x + dx, y + dy)));
                    assert!(near, "seed {seed} res {res}: sketch pixel ({x},{y}) far from any boundary");
                }
            }
        }
    }
}

#[test]
fn split_sizes() {
    let one = Dataset::generate(&DatasetConfig { size: 1, ..Default::default() }).unwrap();
    assert_eq!(one.indices(Split::Train).len(), 1);
    assert_eq!(one.indices(Split::Test).len(), 0);
    let cfg = DatasetConfig { size: 5000, ..Default::default() };
    assert_eq!(cfg.train_count(), 4000);
    let full = Dataset::generate(&cfg).unwrap();
    assert_eq!(full.indices(Split::Train).len(), 4000);
    assert_eq!(full.indices(Split::Test).len(), 1000);
}

#[test]
fn build_persists_and_round_trips() {
    let cfg = DatasetConfig { size: 12, seed: 5, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let m1 = wspace_core::toyfaces::build_dataset(&cfg, dir.path()).unwrap();
    let loaded = Dataset::load(dir.path()).unwrap();
    assert_eq!(loaded.manifest(), m1);
    let fresh = Dataset::generate(&cfg).unwrap();
    for (a, b) in loaded.samples.iter().zip(&fresh.samples) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.sketch, b.sketch);
        assert_eq!(a.label_map, b.label_map);
    }
    let dir2 = tempfile::tempdir().unwrap();
    let m2 = wspace_core::toyfaces::build_dataset(&cfg, dir2.path()).unwrap();
    assert_eq!(m1.hash(), m2.hash());
    let on_disk = std::fs::read(dir.path().join("manifest.json")).unwrap();
    assert_eq!(wspace_core::util::sha256_hex(&on_disk), m1.hash());
}

#[test]
fn unwritable_output_is_an_error() {
    let file = tempfile::NamedTempFile::new().unwrap();
    let cfg = DatasetConfig { size: 2, ..Default::default() };
    assert!(wspace_core::toyfaces::build_dataset(&cfg, &file.path().join("sub")).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn describe_parse_adjoint(seed in any::<u64>(), dseed in any::<u64>()) {
        let a = sample_attributes(seed);
        for s in describe(&a, 10, dseed).unwrap() {
            prop_assert!(parse_text(&s).consistent_with(&a));
        }
    }

    #[test]
    fn label_map_is_total(seed in any::<u64>(), jitter in any::<u64>()) {
        let lm = extract_label_map(&sample_attributes(seed), 32, jitter).unwrap();
        prop_assert_eq!(lm.len(), 32 * 32);
        prop_assert!(lm.iter().all(|&l| Part::from_id(l).is_some()));
    }
}
