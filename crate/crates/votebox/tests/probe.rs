use votebox::geometry::iou3d;
use votebox::pipeline::{assign_targets, forward_scene, scene_loss, ModelParams};
use votebox::sampling::PrimitiveKind;
use votebox::scenes::read_scene;

#[test]
#[ignore]
fn probe_trained_model() {
    let cfg_path = std::env::var("PROBE_CFG").unwrap_or_else(|_| "/tmp/exp/cfgE".into());
    let ckpt = std::env::var("PROBE_CKPT").unwrap_or_else(|_| "/tmp/exp/E.ckpt".into());
    let scenes = std::env::var("PROBE_SCENES")
        .unwrap_or_else(|_| "/tmp/exp/trainE/s0000.scene,/tmp/exp/evalE/s1000.scene".into());
    let cfg = votebox::config::load_config(cfg_path.as_ref()).unwrap();
    let params = ModelParams::load_checkpoint(ckpt.as_ref(), &cfg).unwrap();
    for id in scenes.split(',') {
        let scene = read_scene(id.as_ref()).unwrap();
        let fwd = forward_scene(&scene.points, &params, &cfg).unwrap();
        println!("==== {} points {} gt {}", scene.id, scene.points.len(), scene.gt.len());
        for (b, c) in &scene.gt {
            println!("  gt class {c} center {:?} size {:?}", b.center(), b.size());
        }
        let center_kind = &fwd.trace.kinds[PrimitiveKind::Center as usize];
        let mut dists: Vec<f64> = center_kind
            .vote_positions
            .iter()
            .map(|v| {
                scene
                    .gt
                    .iter()
                    .map(|(b, _)| {
                        let c = b.center();
                        let d = [v[0] - c[0], v[1] - c[1], v[2] - c[2]];
                        (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let q = |p: f64| dists[((dists.len() - 1) as f64 * p) as usize];
        println!(
            "  center-vote dist to nearest gt center: min {:.3} q25 {:.3} med {:.3} q75 {:.3} max {:.3}",
            dists[0],
            q(0.25),
            q(0.5),
            q(0.75),
            dists[dists.len() - 1]
        );
        for (b, _) in &scene.gt {
            let c = b.center();
            let best = fwd
                .trace
                .proposal_centers
                .iter()
                .map(|p| {
                    let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            println!("  nearest proposal center to gt at {:?}: {:.3} m", c, best);
        }
        for (b, _) in &scene.gt {
            let per_stage: Vec<String> = fwd
                .trace
                .stages
                .iter()
                .map(|s| {
                    format!(
                        "{:.3}",
                        s.output_boxes.iter().map(|ib| iou3d(ib, b)).fold(0.0f64, f64::max)
                    )
                })
                .collect();
            let init = fwd.trace.stages[0]
                .input_boxes
                .iter()
                .map(|ib| iou3d(ib, b))
                .fold(0.0f64, f64::max);
            println!("  best IoU init {:.3} -> stages [{}]", init, per_stage.join(", "));
        }
        for (t, stage) in fwd.trace.stages.iter().enumerate() {
            let thr = cfg.cascade.thresholds[t];
            let tg = assign_targets(&stage.input_boxes, &scene.gt, thr);
            let obj = fwd.tape.value(stage.objectness);
            let omax = obj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            println!(
                "  stage {t} (u={thr}): positives {}/{} max objectness logit {:.2}",
                tg.positive.iter().filter(|&&p| p).count(),
                tg.positive.len(),
                omax
            );
        }
        let sizes = fwd.tape.value(fwd.trace.size_logits);
        for (b, _) in &scene.gt {
            let c = b.center();
            let (pi, _) = fwd
                .trace
                .proposal_centers
                .iter()
                .enumerate()
                .map(|(i, p)| {
                    let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                    (i, d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
                })
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap();
            let row = &sizes[pi * 3..pi * 3 + 3];
            println!(
                "  nearest proposal predicted size [{:.2} {:.2} {:.2}] vs gt {:?}",
                row[0].exp(),
                row[1].exp(),
                row[2].exp(),
                b.size()
            );
        }
        // Loss breakdown: re-run the forward with one-hot loss weights.
        let terms = ["vote", "size", "objectness", "class", "residual"];
        let mut parts = Vec::new();
        for (i, name) in terms.iter().enumerate() {
            let mut one = cfg.clone();
            one.train.vote_loss_weight = if i == 0 { 1.0 } else { 0.0 };
            one.train.size_loss_weight = if i == 1 { 1.0 } else { 0.0 };
            one.train.objectness_loss_weight = if i == 2 { 1.0 } else { 0.0 };
            one.train.class_loss_weight = if i == 3 { 1.0 } else { 0.0 };
            one.train.residual_loss_weight = if i == 4 { 1.0 } else { 0.0 };
            let mut f = forward_scene(&scene.points, &params, &one).unwrap();
            let loss = scene_loss(&mut f.tape, &f.trace, &scene.gt, &one).unwrap();
            parts.push(format!("{name} {:.4}", f.tape.value(loss)[0]));
        }
        println!("  loss terms: {}", parts.join("  "));
    }
}
