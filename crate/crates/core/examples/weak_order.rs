use fibermc::model::ModelA;
use fibermc::montecarlo::{semigroup_reduced_xi, McRun};
use fibermc::oracle::{model_a_reduced_expectation, ModelAReduced};
use nalgebra::dvector;

fn main() {
    let charge = 2.0;
    let model = ModelA { charge, ..Default::default() };
    let ma = ModelAReduced { r1: 1.0, r2: 1.0, charge, mu2k: 1.0 };
    let t = 0.4;
    let x0 = 0.3;
    let f0 = [1.2, 0.0];
    let phi = |_x: f64, f1: f64, f2: f64| (-(f1 * f1 + f2 * f2)).exp();
    let exact = model_a_reduced_expectation(&ma, x0, &f0, t, 32, &phi);
    println!("exact = {exact:.8}");
    for dt in [0.16, 0.08, 0.04, 0.02, 0.01, 0.005] {
        let run = McRun { t_a: 0.0, t_b: t, dt, n_paths: 800_000, seed: 5, workers: 2, antithetic: true };
        let est = semigroup_reduced_xi(&model, &run, &dvector![x0], &dvector![f0[0], f0[1]],
            &|_, f| (-f.norm_squared()).exp()).unwrap();
        println!("dt={dt:<6} E={:.7} err={:+.3e} (sigma {:.1e})", est.value, est.value - exact, est.stderr);
    }
}
