use esd_core::fsq::QuantizeMode;
use esd_core::model::{EsdNet, ModelConfig};
use esd_core::synth::{GeneratorConfig, SyntheticDataset};
use esd_core::train::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

// Usage: timing <batch> <epochs1> <lr1> [epochs2] [lr2] [batch2]
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let batch: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(64);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(16);
    let lr: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let epochs2: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(0);
    let lr2: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2e-4);
    let batch2: usize = args.get(6).map(|s| s.parse().unwrap()).unwrap_or(batch);
    let gen_cfg = GeneratorConfig::default();
    let (train_set, val_set) = SyntheticDataset::generate_pair(&gen_cfg, 900, 180, 7).unwrap();

    let cfg = ModelConfig { m_res: 2, ..ModelConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut net = EsdNet::new(cfg, &mut rng).unwrap();

    let tcfg = TrainConfig { epochs, batch_size: batch, learning_rate: lr, seed: 3, ..TrainConfig::default() };
    let t1 = Instant::now();
    let mut log = train(&mut net, &train_set, Some(&val_set), &tcfg).unwrap();
    if epochs2 > 0 {
        let tcfg2 = TrainConfig { epochs: epochs2, batch_size: batch2, learning_rate: lr2, seed: 5, ..TrainConfig::default() };
        log.extend(train(&mut net, &train_set, Some(&val_set), &tcfg2).unwrap());
    }
    println!(
        "batch {batch} lr {lr} epochs {epochs} + batch {batch2} lr {lr2} epochs {epochs2}: {:?}",
        t1.elapsed()
    );
    for s in &log {
        println!("epoch {:2}: total {:.5} recon {:.5} class {:.5} regr {:.5} val_mae {:.5}",
            s.epoch, s.total, s.reconstruction, s.classification, s.regression, s.val_mae.unwrap());
    }

    // How much of the residual is quantization? Re-run the decoder with the
    // bottleneck bypassed and compare MAE vs clean.
    let bypass_mae: f64 = val_set
        .samples
        .par_iter()
        .zip(&val_set.clean)
        .map(|(sample, clean)| {
            let mut tape = esd_core::Tape::new();
            let binding = net.bind_graph(&mut tape);
            let g = net
                .forward_graph(&mut tape, &binding, sample, QuantizeMode::Bypass, false)
                .unwrap();
            let recon = tape.value(g.reconstruction);
            // reconstruction graph output is channel-major [6, 365]
            let mut err = 0.0;
            for (ci, v) in recon.iter().enumerate() {
                let band = ci / 365;
                let day = ci % 365;
                err += (v.clamp(0.0, 1.0) - clean[day * 6 + band]).abs();
            }
            err / recon.len() as f64
        })
        .sum::<f64>()
        / val_set.samples.len() as f64;
    println!("bypass val MAE {bypass_mae:.5}");
}
