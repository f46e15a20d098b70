// temporary bring-up probe: inspect head outputs at ground-truth cells
use spikebev_core::bev::{labels_to_targets, pointcloud_to_bev};
use spikebev_core::codec::decode_keypoints;
use spikebev_core::dataset::{load_dataset, read_dataset_config};
use spikebev_core::model::read_model;

fn main() {
    let model = read_model(std::env::args().nth(1).unwrap()).unwrap();
    let data = std::env::args().nth(2).unwrap();
    let meta = read_dataset_config(&data).unwrap().meta;
    let records = load_dataset(&data).unwrap();
    for rec in records.iter().take(3) {
        let bev = pointcloud_to_bev(&rec.cloud, &meta).unwrap();
        let maps = labels_to_targets(&rec.label, &meta, model.net.rotation_bins).unwrap();
        let (readout, _) = model.run(&bev).unwrap();
        println!("=== {} ({} objects)", rec.name, rec.label.objects.len());
        for (r, c) in maps.keypoint_cells() {
            let bg = *readout.keypoint_spikes.get(0, r, c) as i64;
            let fg = *readout.keypoint_spikes.get(1, r, c) as i64;
            let bin = *maps.rotation_map.get(r, c) as usize;
            let rot: Vec<u32> = (0..model.net.rotation_bins)
                .map(|b| *readout.rotation_spikes.get(b, r, c))
                .collect();
            let boxes: Vec<f64> = (0..5).map(|k| *readout.box_potentials.get(k, r, c)).collect();
            let tgts: Vec<f64> = (0..5)
                .map(|k| model.box_norm.encode(k, *maps.box_map.get(k, r, c)))
                .collect();
            println!("  gt ({r:2},{c:2}) fg-bg {:5} rot bin {} spikes {:?}", fg - bg, bin, rot);
            println!("     box pot {:?}", boxes.iter().map(|v| *v as i64).collect::<Vec<_>>());
            println!("     box tgt {:?}", tgts.iter().map(|v| *v as i64).collect::<Vec<_>>());
        }
        // background margin statistics
        let (h, w) = (readout.keypoint_spikes.height(), readout.keypoint_spikes.width());
        let mut max_bg_margin = i64::MIN;
        let mut pos_cells = 0;
        for r in 0..h {
            for c in 0..w {
                let bg = *readout.keypoint_spikes.get(0, r, c) as i64;
                let fg = *readout.keypoint_spikes.get(1, r, c) as i64;
                if *maps.keypoint_map.get(r, c) == 0 {
                    max_bg_margin = max_bg_margin.max(fg - bg);
                    if fg - bg >= 1 { pos_cells += 1; }
                }
            }
        }
        println!("  background: max fg-bg {max_bg_margin}, cells with margin>=1: {pos_cells}");
        let kps = decode_keypoints(&readout, 1);
        println!("  decoded keypoints: {}", kps.len());
    }
}
