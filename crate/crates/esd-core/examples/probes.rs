use esd_core::eval::{
    extract_features, few_shot_curve, fit_predict_probe, recon_metrics, FeatureMode,
    ProbeAlgorithm,
};
use esd_core::model::{EsdNet, LossWeights, ModelConfig};
use esd_core::synth::{GeneratorConfig, SyntheticDataset};
use esd_core::train::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::time::Instant;

// Usage: probes <batch> <e1> <lr1> <e2> <lr2> <arm,arm,...>
// Arms: default unsup cb256 t4 t24
fn main() {
    let args: Vec<String> = std::env::args().collect();
    let batch: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(32);
    let e1: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);
    let lr1: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1e-3);
    let e2: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(16);
    let lr2: f64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(2e-4);
    let arms: Vec<String> = args
        .get(6)
        .map(|s| s.split(',').map(str::to_string).collect())
        .unwrap_or_else(|| vec!["default".into(), "unsup".into()]);

    let (train_set, val_set) =
        SyntheticDataset::generate_pair(&GeneratorConfig::default(), 900, 180, 71).unwrap();
    let train_y: Vec<usize> = train_set.samples.iter().map(|s| s.labels.annual_class).collect();
    let val_y: Vec<usize> = val_set.samples.iter().map(|s| s.labels.annual_class).collect();
    let k = train_set.class_names.len();

    let mut oa_by_arm: Vec<(String, f64)> = Vec::new();
    let mut mae_by_arm: Vec<(String, f64)> = Vec::new();

    for arm in &arms {
        let mut cfg = ModelConfig { m_res: 2, ..ModelConfig::default() };
        match arm.as_str() {
            "default" => {}
            "unsup" => cfg.loss = LossWeights::unsupervised(),
            "cb256" => cfg.fsq_levels = vec![4, 4, 4, 4],
            "t4" | "t24" => {
                let t = if arm == "t4" { 4 } else { 24 };
                let s = ModelConfig::for_t_lat(t).unwrap();
                cfg.t_lat = s.t_lat;
                cfg.stride_schedule = s.stride_schedule;
            }
            other => panic!("unknown arm {other}"),
        }
        let mut rng = ChaCha8Rng::seed_from_u64(904);
        let mut net = EsdNet::new(cfg, &mut rng).unwrap();
        let t0 = Instant::now();
        let c1 = TrainConfig { epochs: e1, batch_size: batch, learning_rate: lr1, seed: 904, ..TrainConfig::default() };
        train(&mut net, &train_set, None, &c1).unwrap();
        if e2 > 0 {
            let c2 = TrainConfig { epochs: e2, batch_size: batch, learning_rate: lr2, seed: 905, ..TrainConfig::default() };
            train(&mut net, &train_set, None, &c2).unwrap();
        }
        let secs = t0.elapsed().as_secs_f64();

        let preds: Vec<Vec<f64>> = val_set
            .samples
            .par_iter()
            .map(|s| net.decode(&net.encode(s).unwrap()).unwrap())
            .collect();
        let recon = recon_metrics(&val_set.clean, &preds).unwrap();

        let ftr = extract_features(&net, &train_set.samples, FeatureMode::Codes).unwrap();
        let fte = extract_features(&net, &val_set.samples, FeatureMode::Codes).unwrap();
        let probe = fit_predict_probe(&ftr, &train_y, &fte, &val_y, k, ProbeAlgorithm::Linear, "codes", 904).unwrap();
        println!(
            "arm {arm:8}: {secs:5.0}s  val MAE {:.5}  CC {:.4}  codes linear OA {:.4}",
            recon.mean_mae, recon.mean_cc, probe.oa
        );
        oa_by_arm.push((arm.clone(), probe.oa));
        mae_by_arm.push((arm.clone(), recon.mean_mae));

        if arm == "default" {
            for mode in [FeatureMode::Codes, FeatureMode::Raw, FeatureMode::Composite] {
                let ftr = extract_features(&net, &train_set.samples, mode).unwrap();
                let fte = extract_features(&net, &val_set.samples, mode).unwrap();
                let pts = few_shot_curve(&ftr, &train_y, &fte, &val_y, k, &[100], 5, ProbeAlgorithm::Linear, mode.name(), 904).unwrap();
                println!("  few-shot n=100 {:9}: mean OA {:.4} runs {:?}", mode.name(), pts[0].mean_oa,
                    pts[0].runs.iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>());
            }
        }
    }
    let get = |name: &str, list: &[(String, f64)]| list.iter().find(|(n, _)| n == name).map(|(_, v)| *v);
    if let (Some(d), Some(u)) = (get("default", &oa_by_arm), get("unsup", &oa_by_arm)) {
        println!("criterion 7 probe gap: multitask {d:.4} - unsup {u:.4} = {:.4} (need >= 0.05)", d - u);
    }
    if let (Some(d), Some(u)) = (get("default", &mae_by_arm), get("unsup", &mae_by_arm)) {
        println!("criterion 7 recon: unsup {u:.5} < multitask {d:.5}: {}", u < d);
    }
    if let (Some(b), Some(s)) = (get("default", &oa_by_arm), get("cb256", &oa_by_arm)) {
        println!("criterion 9: cb65536 {b:.4} > cb256 {s:.4}: {}", b > s);
    }
    if let (Some(a), Some(b), Some(c)) = (get("t4", &mae_by_arm), get("default", &mae_by_arm), get("t24", &mae_by_arm)) {
        println!("criterion 8: {a:.5} (t4) > {b:.5} (t12) > {c:.5} (t24): {}", a > b && b > c);
    }
}
