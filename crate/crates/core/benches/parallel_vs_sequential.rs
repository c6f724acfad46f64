use std::collections::BTreeMap;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use geosketch::ingest::RingConfig;
use geosketch::model::{self, DistanceScale, FullLikelihood, Trials};
use geosketch::oracle::{sample_cells, SourceSpec};
use geosketch::{Execution, Grid, GridConfig, RingCellTable, Tsum};

const MODES: [(&str, Execution); 2] = [("parallel", Execution::Parallel), ("sequential", Execution::Sequential)];

fn ring_table(c: &mut Criterion) {
    let grid = Grid::new(GridConfig::global(5.0).unwrap());
    let spec = RingConfig::for_grid(&grid).spec().unwrap();
    let mut group = c.benchmark_group("ring_table_5deg");
    group.sample_size(10);
    for (name, exec) in MODES {
        group
            .bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| RingCellTable::build(&grid, &spec, exec)));
    }
    group.finish();
}

fn candidate_fit(c: &mut Criterion) {
    let grid = Grid::new(GridConfig::global(5.0).unwrap());
    let scale = DistanceScale::for_grid(grid.config());
    let src = SourceSpec { term: "t".into(), center: grid.cell_of(40.5, -74.5).unwrap(), focus: 0.2, spread: 1.5 };
    let mut tsum = Tsum::new(216);
    for cell in sample_cells(&grid, &scale, &src, 50_000, 1).unwrap() {
        tsum.update(cell);
    }
    let counts: BTreeMap<_, _> = tsum.slots().iter().map(|s| (s.cell, s.f)).collect();
    let candidates: Vec<_> = tsum.slots().iter().map(|s| s.cell).collect();
    let total = tsum.total_frequency() as f64;
    let mut group = c.benchmark_group("fit_216_candidates");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                model::fit(
                    &candidates,
                    |center| FullLikelihood::new(&grid, &counts, center, &scale, Trials::TermTotal, total),
                    exec,
                )
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, ring_table, candidate_fit);
criterion_main!(benches);
