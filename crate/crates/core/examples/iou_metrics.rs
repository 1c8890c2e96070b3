//! Confusion counts, per-class IoU and mIoU on two hand-made masks.
//!
//! cargo run --example iou_metrics

use ds2net::metrics::Confusion;

fn main() -> ds2net::Result<()> {
    let gt = [0, 0, 1, 1, 1, 0, 0, 0, 1];
    let pred = [0, 1, 1, 1, 0, 0, 0, 0, 1];
    let mut c = Confusion::new();
    c.accumulate(&pred, &gt)?;
    println!("counts (rows ground truth, columns prediction): {:?}", c.counts);
    for (class, name) in [(0, "background"), (1, "lesion")] {
        println!("IoU {name}: {:.4}", c.iou(class)?.value);
    }
    println!("mIoU: {:.4}", c.miou()?);

    let mut empty = Confusion::new();
    empty.accumulate(&[0; 4], &[0; 4])?;
    let lesion = empty.iou(1)?;
    println!("lesion absent from both masks: IoU {} (degenerate: {})", lesion.value, lesion.degenerate);
    Ok(())
}
