// temporary bring-up probe: raw batch gradient norms over a few steps
use spikebev_core::bev::GridMeta;
use spikebev_core::config::TrainConfig;
use spikebev_core::dataset::load_dataset;
use spikebev_core::net::build_network;
use spikebev_core::train::*;

fn main() {
    let cfg = TrainConfig {
        train_dir: Some("/tmp/desk/data".into()),
        meta: GridMeta::desk_scale(),
        ..Default::default()
    };
    let records = load_dataset("/tmp/desk/data").unwrap();
    let samples = samples_from_records(&records[..16], &cfg.meta, cfg.arch.rotation_bins).unwrap();
    let box_norm = box_norm_from_targets(&samples, cfg.arch.window_max);
    let mut net = build_network(&cfg.arch).unwrap();
    let mut state = new_train_state(&net, cfg.seed);
    net.sync_from_shadow(&state.shadow).unwrap();
    let encoder = spikebev_core::codec::EncoderParams::new(
        state.shadow.encoder_alpha.clone(),
        net.window_max,
    )
    .unwrap();
    for step in 0..5 {
        let batch = &samples[step * 3..step * 3 + 3];
        // one manual forward/backward to read the raw norm
        let mut grads = Gradients::zeros_like(&state.shadow);
        for sample in batch {
            let spikes = spikebev_core::codec::encode_rate(&sample.bev, &encoder).unwrap();
            let trace = net.forward_traced(&spikes).unwrap();
            let states = BackwardStates::from_trace(&net, &trace);
            let loss = detection_loss(
                &states.accs[net.head_kp()],
                &states.accs[net.head_box()],
                &states.accs[net.head_rot()],
                &states.thetas[net.head_kp()],
                &states.thetas[net.head_rot()],
                &sample.targets,
                &box_norm,
                &cfg.loss,
                net.window_max,
            );
            let g = backward(&net, &states, &sample.bev, &state.shadow.encoder_alpha, &loss, false).unwrap();
            grads.add(&g);
            println!("loss {:.4} (kp {:.4} box {:.4} rot {:.4})", loss.total, loss.kp, loss.box_, loss.rot);
        }
        grads.scale(1.0 / 3.0);
        println!("step {step}: grad norm {:.2}", grads.l2_norm());
        // per-layer norms
        for (li, l) in grads.layers.iter().enumerate() {
            let wn: f64 = l.weights.iter().map(|x| x * x).sum::<f64>().sqrt();
            let tn: f64 = l.thresholds.iter().map(|x| x * x).sum::<f64>().sqrt();
            println!("  layer {li} ({}) |gw| {:.3} |gt| {:.3}", net.layers[li].name, wn, tn);
        }
        let _ = train_step(&mut net, &mut state, &cfg, &box_norm, batch).unwrap();
    }
}
