use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use esd_core::model::{EsdNet, ModelConfig};
use esd_core::synth::{GeneratorConfig, SyntheticDataset};
use esd_core::tile::{pack_tile, unpack_tile, EmbeddingTile};
use esd_core::FsqSpec;

fn bench_fsq(c: &mut Criterion) {
    let spec = FsqSpec::new(vec![16, 16, 16, 16]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let zs: Vec<Vec<f64>> = (0..64)
        .map(|_| (0..4).map(|_| rng.gen_range(-3.0..3.0)).collect())
        .collect();

    c.bench_function("fsq_quantize_pack", |b| {
        b.iter(|| {
            for z in &zs {
                let q = spec.quantize(black_box(z)).unwrap();
                black_box(spec.pack(&q).unwrap());
            }
        })
    });
    c.bench_function("fsq_unpack_all_codes", |b| {
        b.iter(|| {
            for code in 0..spec.codebook_size() as u16 {
                black_box(spec.unpack(black_box(code)).unwrap());
            }
        })
    });
}

fn bench_model(c: &mut Criterion) {
    let cfg = ModelConfig {
        m_res: 2,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = EsdNet::new(cfg, &mut rng).unwrap();
    let data = SyntheticDataset::generate(&GeneratorConfig::default(), 9, 3).unwrap();
    let sample = &data.samples[0];
    let codes = net.encode(sample).unwrap();

    c.bench_function("encode_one_sample", |b| {
        b.iter(|| black_box(net.encode(black_box(sample)).unwrap()))
    });
    c.bench_function("decode_one_sample", |b| {
        b.iter(|| black_box(net.decode(black_box(&codes)).unwrap()))
    });
}

fn bench_tile_codec(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let codes: Vec<u16> = (0..12 * 32 * 32).map(|_| rng.gen_range(0..65_536u32) as u16).collect();
    let tile =
        EmbeddingTile::new("BENCH", 2022, 12, 32, 32, vec![16, 16, 16, 16], codes).unwrap();
    let raw = pack_tile(&tile, false).unwrap();
    let packed = pack_tile(&tile, true).unwrap();

    c.bench_function("tile_pack_raw", |b| {
        b.iter(|| black_box(pack_tile(black_box(&tile), false).unwrap()))
    });
    c.bench_function("tile_pack_deflate", |b| {
        b.iter(|| black_box(pack_tile(black_box(&tile), true).unwrap()))
    });
    c.bench_function("tile_unpack_raw", |b| {
        b.iter(|| black_box(unpack_tile(black_box(&raw)).unwrap()))
    });
    c.bench_function("tile_unpack_deflate", |b| {
        b.iter(|| black_box(unpack_tile(black_box(&packed)).unwrap()))
    });
}

criterion_group!(benches, bench_fsq, bench_model, bench_tile_codec);
criterion_main!(benches);
