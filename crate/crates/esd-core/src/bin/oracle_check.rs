// Temporary diagnostic: per-class 1-NN oracle accuracy on clean series.
use esd_core::synth::{GeneratorConfig, SyntheticDataset};

fn main() {
    let cfg = GeneratorConfig::default();
    for seed in [17u64, 71, 7, 29, 99] {
        let (train, val) = SyntheticDataset::generate_pair(&cfg, 90, 90, seed).unwrap();
        let k = cfg.profiles.len();
        let mut per_class = vec![(0usize, 0usize); k];
        let mut confusion = vec![0usize; k * k];
        for (v, vc) in val.samples.iter().zip(&val.clean) {
            let mut best = (f64::INFINITY, 0usize);
            for (t, tc) in train.samples.iter().zip(&train.clean) {
                let dist: f64 = vc.iter().zip(tc).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, t.labels.annual_class as usize);
                }
            }
            let truth = v.labels.annual_class as usize;
            per_class[truth].1 += 1;
            confusion[truth * k + best.1] += 1;
            if best.1 == truth {
                per_class[truth].0 += 1;
            }
        }
        let total: usize = per_class.iter().map(|p| p.0).sum();
        let n: usize = per_class.iter().map(|p| p.1).sum();
        print!("seed {seed:3}: overall {:.4} |", total as f64 / n as f64);
        for (c, (hit, tot)) in per_class.iter().enumerate() {
            print!(" c{c}={hit}/{tot}");
        }
        println!();
        for truth in 0..k {
            for pred in 0..k {
                let c = confusion[truth * k + pred];
                if c > 0 && truth != pred {
                    println!("    {truth}->{pred}: {c}");
                }
            }
        }
    }
}
