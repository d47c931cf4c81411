use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use care_core::model::desk_model;
use care_core::region::{soft_inclusion, tile_subregions};
use care_core::synth::{generate, SynthConfig};
use care_core::{CareEncoder, ParamStore};

fn slides(max_patches: usize) -> Vec<care_core::PatchSet<f32>> {
    let cfg = SynthConfig {
        slides: 4,
        min_patches: max_patches / 2,
        max_patches,
        ..SynthConfig::default()
    };
    generate(&cfg).unwrap().slides.into_iter().map(|s| s.patches).collect()
}

fn inclusion(c: &mut Criterion) {
    let mut group = c.benchmark_group("soft_inclusion");
    for n in [160, 360] {
        let s = &slides(n)[0];
        group.bench_with_input(BenchmarkId::from_parameter(s.len()), s, |b, s| {
            b.iter(|| {
                let grid = tile_subregions(s.anchors(), 8).unwrap();
                black_box(soft_inclusion(s.anchors(), &grid, 3).unwrap())
            })
        });
    }
    group.finish();
}

fn embed(c: &mut Criterion) {
    let cfg = desk_model();
    let mut store = ParamStore::<f32>::new();
    let enc = CareEncoder::new(&mut store, "wsi", &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let mut group = c.benchmark_group("embed");
    group.sample_size(20);
    for n in [160, 360] {
        let s = &slides(n)[0];
        group.bench_with_input(BenchmarkId::from_parameter(s.len()), s, |b, s| {
            b.iter(|| black_box(enc.embed(&store, s).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, inclusion, embed);
criterion_main!(benches);
