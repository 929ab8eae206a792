use privsynth_core::utility::{iou, map50, BBox, Detection, LabeledBox};
use proptest::prelude::*;

/// All-points AP from its definition: sum over true-positive ranks of the
/// best precision at that rank or later, divided by the positives.
fn brute_map(dets: &[Vec<Detection>], gts: &[Vec<LabeledBox>]) -> f64 {
    let mut classes: Vec<u32> = gts.iter().flatten().map(|g| g.class_id).collect();
    classes.sort();
    classes.dedup();
    let mut aps = Vec::new();
    for &c in &classes {
        let npos = gts.iter().flatten().filter(|g| g.class_id == c).count() as f64;
        let mut ranked: Vec<(usize, usize)> = Vec::new();
        for (i, ds) in dets.iter().enumerate() {
            for (j, d) in ds.iter().enumerate() {
                if d.class_id == c {
                    ranked.push((i, j));
                }
            }
        }
        // insertion sort: stable, descending confidence
        for k in 1..ranked.len() {
            let mut m = k;
            while m > 0 && dets[ranked[m].0][ranked[m].1].confidence > dets[ranked[m - 1].0][ranked[m - 1].1].confidence {
                ranked.swap(m, m - 1);
                m -= 1;
            }
        }
        let mut used = vec![vec![false; 8]; gts.len()];
        let mut hits = Vec::new();
        for &(i, j) in &ranked {
            let d = &dets[i][j];
            let mut best = -1.0;
            let mut arg = None;
            for (g, gt) in gts[i].iter().enumerate() {
                if gt.class_id == c && !used[i][g] {
                    let v = iou(&d.bbox, &gt.bbox);
                    if v > best {
                        best = v;
                        arg = Some(g);
                    }
                }
            }
            let hit = best >= 0.5;
            if hit {
                used[i][arg.unwrap()] = true;
            }
            hits.push(hit);
        }
        let prec: Vec<f64> = (0..hits.len())
            .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
            .collect();
        let ap: f64 = (0..hits.len())
            .filter(|&k| hits[k])
            .map(|k| prec[k..].iter().cloned().fold(0.0, f64::max))
            .sum::<f64>()
            / npos;
        aps.push(ap);
    }
    aps.iter().sum::<f64>() / aps.len() as f64
}

fn bbox() -> impl Strategy<Value = BBox> {
    (0u8..8, 0u8..8, 1u8..5, 1u8..5).prop_map(|(x, y, w, h)| BBox {
        x: x as f64,
        y: y as f64,
        w: w as f64,
        h: h as f64,
    })
}

/// Up to 6 ground-truth boxes and 6 detections over up to 3 classes, with
/// detections mostly jittered from ground truth and confidences from a small
/// set so ties occur.
fn instance() -> impl Strategy<Value = (Vec<Vec<Detection>>, Vec<Vec<LabeledBox>>)> {
    (1usize..=3, 1usize..=3).prop_flat_map(|(images, classes)| {
        let gt = prop::collection::vec((0..images, 0..classes as u32, bbox()), 1..=6);
        let det = prop::collection::vec(
            (0..images, 0..classes as u32, bbox(), 0u8..5, any::<bool>(), 0usize..6),
            0..=6,
        );
        (gt, det).prop_map(move |(gt, det)| {
            let mut gts = vec![Vec::new(); images];
            for (i, c, b) in &gt {
                gts[*i].push(LabeledBox { class_id: *c, bbox: *b });
            }
            let mut dets = vec![Vec::new(); images];
            for (i, c, b, conf, copy, which) in det {
                let (i, c, b) = if copy {
                    let (gi, gc, gb) = gt[which % gt.len()];
                    (gi, gc, BBox { x: gb.x + 0.5 * (which % 2) as f64, ..gb })
                } else {
                    (i, c, b)
                };
                dets[i].push(Detection {
                    bbox: b,
                    class_id: c,
                    confidence: 0.2 * conf as f64 + 0.1,
                });
            }
            (dets, gts)
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn map50_matches_brute_force((dets, gts) in instance()) {
        let got = map50(&dets, &gts).unwrap();
        let want = brute_map(&dets, &gts);
        prop_assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn iou_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn appending_a_false_positive_never_helps((dets, gts) in instance(), img in 0usize..3, c in 0u32..3) {
        let before = map50(&dets, &gts).unwrap();
        let mut more = dets.clone();
        let img = img % more.len();
        // Far outside every ground-truth box, below every confidence.
        more[img].push(Detection {
            bbox: BBox { x: 100.0, y: 100.0, w: 2.0, h: 2.0 },
            class_id: c,
            confidence: 0.0,
        });
        prop_assert!(map50(&more, &gts).unwrap() <= before + 1e-12);
    }

    #[test]
    fn duplicate_detection_never_increases_ap((dets, gts) in instance(), pick in 0usize..36) {
        // One ground-truth box per (image, class) so a duplicate has nothing left to match.
        let mut gts = gts;
        for g in gts.iter_mut() {
            let mut seen = std::collections::BTreeSet::new();
            g.retain(|b| seen.insert(b.class_id));
        }
        let all: Vec<(usize, usize)> = dets.iter().enumerate().flat_map(|(i, d)| (0..d.len()).map(move |j| (i, j))).collect();
        prop_assume!(!all.is_empty());
        let (i, j) = all[pick % all.len()];
        let before = map50(&dets, &gts).unwrap();
        let mut more = dets.clone();
        more[i].insert(j + 1, dets[i][j]);
        prop_assert!(map50(&more, &gts).unwrap() <= before + 1e-12);
    }
}

#[test]
fn worked_example_is_five_sixths() {
    let b = |x: f64| BBox { x, y: 0.0, w: 10.0, h: 10.0 };
    let d = |x: f64, confidence: f64| Detection { bbox: b(x), class_id: 0, confidence };
    let dets = vec![vec![d(0.0, 0.9), d(100.0, 0.8), d(50.0, 0.7)]];
    let gts = vec![vec![LabeledBox { class_id: 0, bbox: b(0.0) }, LabeledBox { class_id: 0, bbox: b(50.0) }]];
    let v = map50(&dets, &gts).unwrap();
    assert!((v - 5.0 / 6.0).abs() <= f64::EPSILON, "{v}");
    assert!((brute_map(&dets, &gts) - 5.0 / 6.0).abs() <= f64::EPSILON);
}
