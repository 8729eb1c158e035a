use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dro_prompt::ambiguity::AmbiguitySpec;
use dro_prompt::cmaes::CmaState;
use dro_prompt::gp::{AtomGps, KernelConfig};
use dro_prompt::kernels::{KernelForm, KernelParams};
use dro_prompt::model::{stream_rng, Stream};
use dro_prompt::{solve_inner, Instruction, SoftPrompt, WeightVector};
use dro_prompt_bench::history;

fn inner_solver(c: &mut Criterion) {
    let ucb = [0.31, 0.72, 0.55, 0.12];
    let w_ref = WeightVector::normalized(vec![0.4, 0.3, 0.2, 0.1]).unwrap();
    let metric: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i as f64 - j as f64).abs()).collect()).collect();
    let mut group = c.benchmark_group("solve_inner");
    for (name, spec) in [
        ("kl", AmbiguitySpec::kl(0.1)),
        ("tv", AmbiguitySpec::tv(0.1)),
        ("w1", AmbiguitySpec::w1(0.1, metric)),
    ] {
        group.bench_function(name, |b| b.iter(|| solve_inner(black_box(&ucb), &w_ref, &spec).unwrap()));
    }
    group.finish();
}

fn gp(c: &mut Criterion) {
    let mut group = c.benchmark_group("gp");
    group.sample_size(20);
    let query = SoftPrompt::new(vec![0.1; 10], 1.0).unwrap();
    let instruction = Instruction::new("Answer the question: concise+ formal literal++ stepwise");
    for form in [KernelForm::Coupled, KernelForm::Sandwich] {
        let config = KernelConfig {
            form,
            params: KernelParams::default(),
            noise_variance: 1e-4,
        };
        for m in [100, 400] {
            let h = history(m, 10, 2, 1);
            let label = format!("{form:?}").to_lowercase();
            group.bench_with_input(BenchmarkId::new(format!("fit_{label}"), m), &h, |b, h| {
                b.iter(|| AtomGps::fit(h, &config, 2, None).unwrap())
            });
            let gps = AtomGps::fit(&h, &config, 2, None).unwrap();
            group.bench_with_input(BenchmarkId::new(format!("predict_{label}"), m), &gps, |b, gps| {
                b.iter(|| gps.posterior(0).predict(black_box(&query), Some(&instruction)).unwrap())
            });
        }
    }
    group.finish();
}

fn cma(c: &mut Criterion) {
    c.bench_function("cma_sphere_d10_2000", |b| {
        b.iter(|| {
            let mut rng = stream_rng(0, Stream::Cma);
            let mut state = CmaState::new(vec![0.0; 10], 0.5, f64::INFINITY).unwrap();
            let mut used = 0;
            while used + state.population() <= 2000 {
                let xs = state.ask(&mut rng);
                let f: Vec<f64> = xs.iter().map(|x| -x.iter().map(|v| (v - 0.3) * (v - 0.3)).sum::<f64>()).collect();
                used += xs.len();
                state.tell(&xs, &f).unwrap();
            }
            state.mean()[0]
        })
    });
}

criterion_group!(benches, inner_solver, gp, cma);
criterion_main!(benches);
