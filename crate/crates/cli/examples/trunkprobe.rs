// temporary bring-up probe: trunk activity at gt cells vs background
use spikebev_core::bev::{labels_to_targets, pointcloud_to_bev};
use spikebev_core::codec::encode_rate;
use spikebev_core::dataset::{load_dataset, read_dataset_config};
use spikebev_core::model::read_model;

fn main() {
    let model = read_model(std::env::args().nth(1).unwrap()).unwrap();
    let data = std::env::args().nth(2).unwrap();
    let meta = read_dataset_config(&data).unwrap().meta;
    let records = load_dataset(&data).unwrap();
    let net = &model.net;
    println!("encoder alphas {:?}", model.encoder.alphas);
    for rec in records.iter().take(2) {
        let bev = pointcloud_to_bev(&rec.cloud, &meta).unwrap();
        let maps = labels_to_targets(&rec.label, &meta, net.rotation_bins).unwrap();
        let spikes = encode_rate(&bev, &model.encoder).unwrap();
        let trace = net.forward_traced(&spikes).unwrap();
        println!("=== {}", rec.name);
        // per-layer output activity
        for (li, layer) in net.layers.iter().enumerate() {
            if let Some(sp) = &trace.spikes[li] {
                let total: u64 = sp.as_slice().iter().map(|&v| v as u64).sum();
                let nz = sp.as_slice().iter().filter(|&&v| v > 0).count();
                let sat = sp.as_slice().iter().filter(|&&v| v >= 63).count();
                println!(
                    "  {:8} out_spikes {:7} nonzero {:5}/{:6} saturated {:4} theta {:?}",
                    layer.name, total, nz, sp.len(), sat,
                    &layer.thresholds.quantized()[..layer.out_channels().min(6)]
                );
            }
        }
        // trunk rates at gt cells vs random background
        let trunk = &trace.inputs[net.head_kp()];
        for (r, c) in maps.keypoint_cells() {
            let rates: Vec<u32> = (0..trunk.channels()).map(|ch| *trunk.get(ch, r, c)).collect();
            println!("  trunk@gt({r:2},{c:2}) {:?}", rates);
        }
        let (h, w) = (trunk.height(), trunk.width());
        let mut bg_total = 0u64;
        for ch in 0..trunk.channels() {
            for r in 0..h {
                for c in 0..w {
                    if *maps.keypoint_map.get(r, c) == 0 {
                        bg_total += *trunk.get(ch, r, c) as u64;
                    }
                }
            }
        }
        println!("  trunk background mean rate {:.3}", bg_total as f64 / ((h * w) as f64 * trunk.channels() as f64));
    }
}
// (alphas printed by probe main above via model.encoder)
