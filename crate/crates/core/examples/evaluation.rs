//! Overlap, average precision and base/novel aggregation on hand-made boxes.

use std::collections::BTreeMap;

use incdet::detector::Detection;
use incdet::eval::{aggregate_report, iou_aabb, match_and_ap};
use incdet::scene::Box3D;

fn cube(x: f64, class_id: usize) -> Box3D {
    Box3D {
        center: [x, 0.0, 0.0],
        size: [1.0; 3],
        class_id,
    }
}

fn main() -> incdet::Result<()> {
    println!("IoU of unit cubes offset by 0.5: {:.4}", iou_aabb(&cube(0.0, 0), &cube(0.5, 0)));

    let truth = vec![vec![cube(0.0, 0), cube(3.0, 0)], vec![cube(1.0, 0)]];
    let det = |x: f64, confidence: f64| Detection {
        box3d: cube(x, 0),
        class_id: 0,
        confidence,
    };
    let detections = vec![vec![det(0.1, 0.9), det(6.0, 0.8)], vec![det(1.2, 0.7)]];
    let score = match_and_ap(&detections, &truth, 0, 0.25)?.expect("class has ground truth");
    println!("AP@0.25 {:.3}, recall {:.3}", score.ap, score.recall);

    let ap: BTreeMap<usize, f64> = [(0, 70.0), (1, 50.0), (2, 40.0), (3, 20.0)].into_iter().collect();
    let recall: BTreeMap<usize, f64> = ap.keys().map(|&k| (k, 80.0)).collect();
    let r = aggregate_report(&ap, &recall, &[0, 1], &[2, 3])?;
    println!(
        "base {:.1}  novel {:.1}  avg {:.1}",
        r.base_map.unwrap(),
        r.novel_map.unwrap(),
        r.avg_map.unwrap()
    );
    Ok(())
}
