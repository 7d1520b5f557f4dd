//! Detection scoring: IoU matching of predicted boxes against ground
//! truth with don't-care handling, reported as precision/recall/F-score.
//!
//! Protocol: detections overlapping a don't-care region at IoU >= thresh
//! are dropped from the precision denominator, then the rest are matched
//! greedily to care boxes in descending IoU order, one-to-one.

use serde::Serialize;
use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{rbox_iou, Detection, RBox};

/// One image's ground truth and detections.
#[derive(Clone, Debug)]
pub struct EvalImage {
    pub id: String,
    /// (box, care). Don't-care regions absorb overlapping detections.
    pub gts: Vec<(RBox, bool)>,
    pub dets: Vec<Detection>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageScore {
    pub id: String,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub matched: usize,
    pub num_gt_care: usize,
    /// Detections counted against precision (don't-care hits excluded).
    pub num_det: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub matched: usize,
    pub num_gt_care: usize,
    pub num_det: usize,
    pub per_image: Vec<ImageScore>,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)
            .expect("report serialization cannot fail") + "\n";
        std::fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<24} {:>9} {:>9} {:>9} {:>8} {:>8} {:>8}\n",
            "image", "precision", "recall", "f-score", "matched", "gt", "det"
        ));
        for s in &self.per_image {
            out.push_str(&format!(
                "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>8} {:>8} {:>8}\n",
                s.id, s.precision, s.recall, s.f_score, s.matched, s.num_gt_care, s.num_det
            ));
        }
        out.push_str(&format!(
            "{:<24} {:>9.4} {:>9.4} {:>9.4} {:>8} {:>8} {:>8}\n",
            "all", self.precision, self.recall, self.f_score, self.matched, self.num_gt_care,
            self.num_det
        ));
        out
    }
}

fn ratio(num: usize, den: usize, empty_means_perfect: bool) -> f64 {
    if den == 0 {
        if empty_means_perfect {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

fn f_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Match one image; returns (matched, num_gt_care, num_det_counted).
fn match_image(gts: &[(RBox, bool)], dets: &[Detection], iou_thresh: f64) -> (usize, usize, usize) {
    let care: Vec<&RBox> = gts.iter().filter(|(_, c)| *c).map(|(b, _)| b).collect();
    let dont: Vec<&RBox> = gts.iter().filter(|(_, c)| !*c).map(|(b, _)| b).collect();

    // absorption happens before matching, mirroring the standard scripts
    let counted: Vec<&Detection> = dets
        .iter()
        .filter(|d| !dont.iter().any(|g| rbox_iou(g, &d.rbox) >= iou_thresh))
        .collect();

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (gi, g) in care.iter().enumerate() {
        for (di, d) in counted.iter().enumerate() {
            let iou = rbox_iou(g, &d.rbox);
            if iou >= iou_thresh {
                pairs.push((iou, gi, di));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut gt_used = vec![false; care.len()];
    let mut det_used = vec![false; counted.len()];
    let mut matched = 0;
    for (_, gi, di) in pairs {
        if !gt_used[gi] && !det_used[di] {
            gt_used[gi] = true;
            det_used[di] = true;
            matched += 1;
        }
    }
    (matched, care.len(), counted.len())
}

pub fn evaluate(images: &[EvalImage], iou_thresh: f64) -> Result<EvalReport> {
    let mut seen = HashSet::new();
    for img in images {
        if !seen.insert(img.id.as_str()) {
            return Err(Error::DuplicateImageId(img.id.clone()));
        }
    }

    let mut per_image = Vec::with_capacity(images.len());
    let (mut matched, mut num_gt_care, mut num_det) = (0, 0, 0);
    for img in images {
        let (m, g, d) = match_image(&img.gts, &img.dets, iou_thresh);
        matched += m;
        num_gt_care += g;
        num_det += d;
        let p = ratio(m, d, g == 0);
        let r = ratio(m, g, d == 0);
        per_image.push(ImageScore {
            id: img.id.clone(),
            precision: p,
            recall: r,
            f_score: f_score(p, r),
            matched: m,
            num_gt_care: g,
            num_det: d,
        });
    }

    let precision = ratio(matched, num_det, num_gt_care == 0);
    let recall = ratio(matched, num_gt_care, num_det == 0);
    Ok(EvalReport {
        precision,
        recall,
        f_score: f_score(precision, recall),
        matched,
        num_gt_care,
        num_det,
        per_image,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(rbox: RBox) -> Detection {
        Detection { rbox, score: 1.0 }
    }

    fn square(cx: f64, cy: f64, side: f64) -> RBox {
        RBox::new(cx, cy, side, side, 0.0).unwrap()
    }

    fn one_image(gts: Vec<(RBox, bool)>, dets: Vec<Detection>) -> Vec<EvalImage> {
        vec![EvalImage {
            id: "img".into(),
            gts,
            dets,
        }]
    }

    /// Largest one-to-one matching over pairs with IoU >= thresh, found
    /// by exhaustive recursion. Oracle for the greedy matcher.
    fn max_matching(care: &[RBox], dets: &[RBox], iou_thresh: f64) -> usize {
        fn go(adj: &[Vec<usize>], gi: usize, det_used: &mut [bool]) -> usize {
            if gi == adj.len() {
                return 0;
            }
            // skip this gt
            let mut best = go(adj, gi + 1, det_used);
            for &di in &adj[gi] {
                if !det_used[di] {
                    det_used[di] = true;
                    best = best.max(1 + go(adj, gi + 1, det_used));
                    det_used[di] = false;
                }
            }
            best
        }
        let adj: Vec<Vec<usize>> = care
            .iter()
            .map(|g| {
                dets.iter()
                    .enumerate()
                    .filter(|(_, d)| rbox_iou(g, d) >= iou_thresh)
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        go(&adj, 0, &mut vec![false; dets.len()])
    }

    #[test]
    fn perfect_detections_score_one() {
        let gts = vec![
            (square(30.0, 30.0, 20.0), true),
            (RBox::new(90.0, 40.0, 40.0, 16.0, 0.5).unwrap(), true),
        ];
        let dets = gts.iter().map(|(b, _)| det(*b)).collect();
        let rep = evaluate(&one_image(gts, dets), 0.5).unwrap();
        assert_eq!((rep.precision, rep.recall, rep.f_score), (1.0, 1.0, 1.0));
        assert_eq!(rep.matched, 2);
    }

    #[test]
    fn one_of_two_matched_gives_the_textbook_scores() {
        let gts = vec![
            (square(30.0, 30.0, 20.0), true),
            (square(90.0, 90.0, 20.0), true),
        ];
        let dets = vec![det(square(30.0, 30.0, 20.0))];
        let rep = evaluate(&one_image(gts, dets), 0.5).unwrap();
        assert_eq!(rep.precision, 1.0);
        assert_eq!(rep.recall, 0.5);
        assert!((rep.f_score - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn dont_care_absorbs_overlapping_detections() {
        let gts = vec![
            (square(30.0, 30.0, 20.0), true),
            (square(90.0, 90.0, 20.0), false),
        ];
        // second det sits on the don't-care region: out of the denominator
        let dets = vec![det(square(30.0, 30.0, 20.0)), det(square(90.0, 90.0, 20.0))];
        let rep = evaluate(&one_image(gts, dets), 0.5).unwrap();
        assert_eq!(rep.num_det, 1);
        assert_eq!((rep.precision, rep.recall), (1.0, 1.0));
    }

    #[test]
    fn spurious_detection_lowers_precision_only() {
        let gts = vec![(square(30.0, 30.0, 20.0), true)];
        let hit = det(square(30.0, 30.0, 20.0));
        let base = evaluate(&one_image(gts.clone(), vec![hit]), 0.5).unwrap();
        let noisy = evaluate(
            &one_image(gts, vec![hit, det(square(200.0, 200.0, 20.0))]),
            0.5,
        )
        .unwrap();
        assert!(noisy.precision < base.precision);
        assert_eq!(noisy.recall, base.recall);
    }

    #[test]
    fn remote_dont_care_region_only_helps_precision() {
        // a false positive sits at (200, 200); marking that area don't-care
        // absorbs it, removing it restores the penalty
        let care = (square(30.0, 30.0, 20.0), true);
        let dets = vec![det(square(30.0, 30.0, 20.0)), det(square(200.0, 200.0, 20.0))];
        let without = evaluate(&one_image(vec![care], dets.clone()), 0.5).unwrap();
        let with = evaluate(
            &one_image(vec![care, (square(200.0, 200.0, 22.0), false)], dets),
            0.5,
        )
        .unwrap();
        assert!(with.precision > without.precision);
        assert_eq!(with.recall, without.recall);
    }

    #[test]
    fn duplicate_image_ids_are_rejected() {
        let img = EvalImage {
            id: "a".into(),
            gts: vec![],
            dets: vec![],
        };
        let err = evaluate(&[img.clone(), img], 0.5).unwrap_err();
        assert!(matches!(err, Error::DuplicateImageId(id) if id == "a"));
    }

    fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<RBox>, Vec<RBox>) {
        let n_gt = rng.gen_range(1..=5);
        let mut gts = Vec::new();
        for _ in 0..n_gt {
            let w = rng.gen_range(20.0..60.0);
            let h = rng.gen_range(10.0..30.0);
            gts.push(
                RBox::new(
                    rng.gen_range(40.0..600.0),
                    rng.gen_range(40.0..600.0),
                    w,
                    h,
                    rng.gen_range(-0.8..0.8),
                )
                .unwrap(),
            );
        }
        let mut dets = Vec::new();
        for g in &gts {
            // jittered copies, sometimes two candidates per gt
            let copies = if rng.gen_bool(0.3) { 2 } else { 1 };
            for _ in 0..copies {
                dets.push(
                    RBox::new(
                        g.cx + rng.gen_range(-6.0..6.0),
                        g.cy + rng.gen_range(-6.0..6.0),
                        g.w * rng.gen_range(0.85..1.15),
                        g.h * rng.gen_range(0.85..1.15),
                        g.theta + rng.gen_range(-0.1..0.1),
                    )
                    .unwrap(),
                );
            }
        }
        if rng.gen_bool(0.5) {
            dets.push(
                RBox::new(
                    rng.gen_range(40.0..600.0),
                    rng.gen_range(40.0..600.0),
                    30.0,
                    15.0,
                    0.0,
                )
                .unwrap(),
            );
        }
        (gts, dets)
    }

    #[test]
    fn greedy_matching_tracks_the_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut agree = 0;
        let scenes = 50;
        for _ in 0..scenes {
            let (gts, dets) = random_scene(&mut rng);
            let care: Vec<(RBox, bool)> = gts.iter().map(|g| (*g, true)).collect();
            let d: Vec<Detection> = dets.iter().map(|b| det(*b)).collect();
            let rep = evaluate(&one_image(care, d), 0.5).unwrap();
            let best = max_matching(&gts, &dets, 0.5);
            assert!(
                rep.matched == best || rep.matched + 1 == best,
                "greedy {} vs optimal {}",
                rep.matched,
                best
            );
            if rep.matched == best {
                agree += 1;
            }
        }
        assert!(agree * 100 >= scenes * 98, "greedy optimal in {agree}/{scenes}");
    }

    #[test]
    fn scoring_ignores_box_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let (gts, dets) = random_scene(&mut rng);
            let care: Vec<(RBox, bool)> = gts.iter().map(|g| (*g, true)).collect();
            let d: Vec<Detection> = dets.iter().map(|b| det(*b)).collect();
            let fwd = evaluate(&one_image(care.clone(), d.clone()), 0.5).unwrap();
            let mut rcare = care;
            let mut rd = d;
            rcare.reverse();
            rd.reverse();
            let rev = evaluate(&one_image(rcare, rd), 0.5).unwrap();
            assert_eq!(fwd.matched, rev.matched);
            assert_eq!(fwd.precision.to_bits(), rev.precision.to_bits());
            assert_eq!(fwd.recall.to_bits(), rev.recall.to_bits());
        }
    }

    #[test]
    fn json_report_and_table_round_out() {
        let gts = vec![(square(30.0, 30.0, 20.0), true)];
        let dets = vec![det(square(30.0, 30.0, 20.0))];
        let rep = evaluate(&one_image(gts, dets), 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        rep.write_json(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["precision"], 1.0);
        assert_eq!(v["per_image"][0]["id"], "img");
        let table = rep.table();
        assert!(table.contains("img"));
        assert!(table.contains("all"));
    }
}
