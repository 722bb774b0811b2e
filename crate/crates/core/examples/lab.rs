// Scratch probe used during development; not part of the deliverable surface.
use lqpg_core::bootstrap::*;
use lqpg_core::pg::*;
use lqpg_core::presets::*;
use lqpg_core::riccati::*;
use lqpg_core::stream::StreamFactory;
use lqpg_core::system::*;
use std::time::Instant;

fn main() {
    let sys = benchmark_4x2();
    let pol = benchmark_initial_policy(&sys);
    let mut rng = StreamFactory::new(1).stream(&[0]);
    let traj = simulate_trajectory(&sys, &pol, &mut rng);
    let outers = stage_outer_products(&sys, &traj);
    let mut ws = GradientWorkspace::new(&sys);
    let mut grad = StageGradient::zeros_like(&pol);

    let n = 1_000_000usize;
    let t0 = Instant::now();
    for _ in 0..n {
        stochastic_gradient_into(&sys, &pol, &outers, &mut ws, &mut grad);
        std::hint::black_box(&grad);
    }
    let dt = t0.elapsed();
    println!("stochastic_gradient_into: {:.2} ns/call", dt.as_nanos() as f64 / n as f64);

    let mut pol2 = pol.clone();
    let t0 = Instant::now();
    for _ in 0..n {
        apply_step(&mut pol2, &grad, 1e-9);
    }
    println!("apply_step: {:.2} ns/call", t0.elapsed().as_nanos() as f64 / n as f64);

    let mut avg = RunningAverage::new(&pol);
    let t0 = Instant::now();
    for _ in 0..n {
        avg.update(&pol2);
    }
    println!("avg.update: {:.2} ns/call", t0.elapsed().as_nanos() as f64 / n as f64);

    let t0 = Instant::now();
    let m = 200_000usize;
    for _ in 0..m {
        let tr = simulate_trajectory(&sys, &pol, &mut rng);
        std::hint::black_box(&tr);
    }
    println!("simulate_trajectory: {:.2} ns/call", t0.elapsed().as_nanos() as f64 / m as f64);

    let t0 = Instant::now();
    for _ in 0..m {
        let c = analytic_cost(&sys, &pol);
        std::hint::black_box(c);
    }
    println!("analytic_cost: {:.2} ns/call", t0.elapsed().as_nanos() as f64 / m as f64);
}
