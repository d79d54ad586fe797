use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use csitrack::cbcs::{cbcs_solve, CbcsConfig, Dictionary};
use csitrack::toi::{sicar_extract, DftPlans, ToiMatrix};
use csitrack::{AntennaArray, CalibrationParams, CsiWindow, Grid2D, Pipeline, PipelineConfig, Room, Scene, Simulation, Target};

fn windows(n: usize) -> (AntennaArray, Vec<CsiWindow>) {
    let array = AntennaArray::distributed_room();
    let target = Target::following(1, [2.0, 3.0], vec![[4.5, 3.0], [4.5, 7.0], [2.0, 7.0], [2.0, 3.0]], 1.0);
    let scene = Scene::in_room(&array, vec![target], 5, 0.01, 7).unwrap();
    let mut sim = Simulation::new(scene, array.clone(), 10, None).unwrap();
    (array, (0..n).map(|_| sim.next_window().unwrap().0).collect())
}

fn pipeline_window(c: &mut Criterion) {
    let (array, ws) = windows(40);
    for (name, fast_path) in [("window/full", false), ("window/fast", true)] {
        let cfg = PipelineConfig {
            fast_path,
            ..Default::default()
        };
        let mut p = Pipeline::new(&array, &CalibrationParams::identity(64), cfg).unwrap();
        // fill the background average first
        for w in &ws[..20] {
            p.run_window(w).unwrap();
        }
        let mut i = 20;
        c.bench_function(name, |b| {
            b.iter(|| {
                let out = p.run_window(&ws[i]).unwrap();
                i = if i + 1 == ws.len() { 20 } else { i + 1 };
                black_box(out)
            })
        });
    }
}

fn sicar(c: &mut Criterion) {
    let plans = DftPlans::new(10, 100, 128, 128, 30.0).unwrap();
    let mut data = plans.atom_at(0.01, 0.7);
    for (v, a) in data.iter_mut().zip(plans.atom_at(-0.02, -1.1)) {
        *v += a * 0.4;
    }
    let x = ToiMatrix { n_f: 100, n_t: 10, data };
    c.bench_function("sicar/two_components", |b| b.iter(|| sicar_extract(black_box(&x), &plans).unwrap()));
}

fn cbcs(c: &mut Criterion) {
    let array = AntennaArray::distributed_room();
    let grid = Grid2D::covering(&Room::default(), 0.05, 1.0).unwrap();
    let dict = Dictionary::build(&grid, &array).unwrap();
    let target = grid.index(40, 120);
    let mut y: Vec<_> = dict.column(target).to_vec();
    for (v, a) in y.iter_mut().zip(dict.column(grid.index(90, 60))) {
        *v += a * 0.6;
    }
    let cfg = CbcsConfig::default();
    c.bench_function("cbcs/two_targets", |b| b.iter(|| cbcs_solve(black_box(&y), &dict, &cfg).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = pipeline_window, sicar, cbcs
}
criterion_main!(benches);
