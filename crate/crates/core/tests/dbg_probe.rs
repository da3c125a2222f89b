use mumix::formula::parse_formula;
use mumix::sim::{simulate_two_way, SimParams};
use mumix::optimize::{fit, FitOptions, InitOverrides};

fn demo() -> SimParams<f64> {
    SimParams {
        beta: vec![7.1, 8.6, 7.7, 6.9, 6.5, 6.8, 5.6, 6.8],
        sigma: 1.2, sigma_a: Some(2.0), sigma_b: Some(0.47), sigma_d: Some(0.24), rho: Some(0.42),
    }
}

#[test]
fn probe_two_starts() {
    let p = demo();
    let ds = simulate_two_way(&p, 8, 2, 91).unwrap();
    let ms = parse_formula(&p.formula()).unwrap();
    let f1 = fit(&ms, &ds, None, &FitOptions::default()).unwrap();
    eprintln!("default: conv={} stop={:?} it={} g={:.2e} nll={:.10}", f1.converged, f1.stop, f1.n_iter, f1.grad_norm, f1.nll);
    let ov = InitOverrides { beta: Some(0.0), sigma: Some(1.0), sigma_a: Some(1.0), sigma_b: Some(1.0), sigma_d: Some(1.0), rho: Some(0.0) };
    let f2 = fit(&ms, &ds, None, &FitOptions { init: ov, ..Default::default() }).unwrap();
    eprintln!("flat:    conv={} stop={:?} it={} g={:.2e} nll={:.10}", f2.converged, f2.stop, f2.n_iter, f2.grad_norm, f2.nll);
    eprintln!("flat nat: sigma={:.4} sa={:.4} sb={:.4} sd={:.4} rho={:.4}", f2.natural.sigma, f2.natural.sigma_a.unwrap(), f2.natural.sigma_b.unwrap(), f2.natural.sigma_d.unwrap(), f2.natural.rho.unwrap());
}

#[test]
fn probe_scale() {
    let p = demo();
    let ds = simulate_two_way(&p, 8, 2, 5).unwrap();
    let ms = parse_formula(&p.formula()).unwrap();
    let f1 = fit(&ms, &ds, None, &FitOptions::default()).unwrap();
    let y2: Vec<f64> = ds.response().iter().map(|v| v * 3.0).collect();
    let ds2 = ds.with_response(y2).unwrap();
    let f2 = fit(&ms, &ds2, None, &FitOptions::default()).unwrap();
    let n = ds.n_obs() as f64;
    eprintln!("f1 conv={} stop={:?} g={:.2e} nll={:.10}", f1.converged, f1.stop, f1.grad_norm, f1.nll);
    eprintln!("f2 conv={} stop={:?} g={:.2e} nll={:.10}", f2.converged, f2.stop, f2.grad_norm, f2.nll);
    eprintln!("expect f2.nll = {:.10}, diff={:.3e}", f1.nll + n * 3.0f64.ln(), f2.nll - (f1.nll + n * 3.0f64.ln()));
    eprintln!("sb1={:.6} sb2={:.6} rho1={:.6} rho2={:.6}", f1.natural.sigma_b.unwrap(), f2.natural.sigma_b.unwrap(), f1.natural.rho.unwrap(), f2.natural.rho.unwrap());
}
