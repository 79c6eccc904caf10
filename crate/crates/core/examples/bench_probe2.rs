//! Probe head scores after training by decoding with a tiny threshold.
use dynafuse::train::{forward_pipeline, train_loop, val_scene_set, TrainConfig};

fn main() {
    let mut cfg = TrainConfig::default();
    let args: Vec<String> = std::env::args().collect();
    if args.len() > 1 { cfg.steps = args[1].parse().unwrap(); }
    if args.len() > 2 { cfg.lr = args[2].parse().unwrap(); }
    let (ck, curve, ev) = train_loop(&cfg).unwrap();
    println!("loss first {:.1} mid {:.1} last {:.1} | val map {:.4}",
        curve[0], curve[curve.len()/2], curve[curve.len()-1], ev.map);
    let mut loose = cfg.clone();
    loose.score_thresh = 1e-6;
    let scenes = val_scene_set(&cfg).unwrap();
    for s in scenes.iter().take(2) {
        let out = forward_pipeline(s, &ck.params, &loose).unwrap();
        for b in out.instances.iter().take(4) {
            println!("  cls {} ({:.1},{:.1}) score {:.4}", b.bbox.class_id, b.bbox.cx, b.bbox.cy, b.bbox.score);
        }
        for b in &s.gt_boxes {
            println!("  gt {} ({:.1},{:.1})", b.class_id, b.cx, b.cy);
        }
        println!("losses {:?}", out.losses);
    }
}
