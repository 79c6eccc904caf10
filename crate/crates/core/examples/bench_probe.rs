//! Debug probe: loss curve and decoded instances after default training.
use dynafuse::train::{forward_pipeline, train_loop, val_scene_set, TrainConfig};

fn main() {
    let cfg = TrainConfig::default();
    let (ck, curve, ev) = train_loop(&cfg).unwrap();
    println!("loss[0]={:.4} loss[49]={:.4} loss[last]={:.4}", curve[0], curve[49], curve[curve.len()-1]);
    println!("val map {:.4}", ev.map);
    let scenes = val_scene_set(&cfg).unwrap();
    for s in scenes.iter().take(3) {
        let out = forward_pipeline(s, &ck.params, &cfg).unwrap();
        println!("scene seed {}: {} gt, {} decoded", s.seed, s.gt_boxes.len(), out.instances.len());
        for b in out.instances.iter().take(4) {
            println!("  pred cls {} ({:.2},{:.2}) score {:.3}", b.bbox.class_id, b.bbox.cx, b.bbox.cy, b.bbox.score);
        }
        for b in s.gt_boxes.iter().take(4) {
            println!("  gt   cls {} ({:.2},{:.2})", b.class_id, b.cx, b.cy);
        }
    }
}
