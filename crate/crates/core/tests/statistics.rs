//! Statistical checks of the generators and the estimator on simulated data.

use distboot::cluster::shard;
use distboot::csl::{run_algorithm1_path, CrossValidation};
use distboot::datagen::{build_sigma, gen_dataset, noise_variances, DesignKind, DesignSpec, ModelSpec, Noise};
use distboot::glm::LossFamily;
use distboot::hetero::{hetero_lambda, HeteroConfig};
use distboot::numeric::linf_norm;
use distboot::rng::{derive_stream, Purpose, RngKey};
use distboot::solver::SolverConfig;

fn model(d: usize, n_total: usize, k: usize, noise: Noise) -> ModelSpec {
    ModelSpec {
        family: LossFamily::Linear,
        d,
        s0: 4.min(d),
        n_total,
        k,
        noise,
        noise_scale: 1.0,
    }
}

fn toeplitz(d: usize) -> DesignSpec {
    DesignSpec {
        kind: DesignKind::Toeplitz { rho: 0.9 },
        d,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[test]
fn sample_covariance_matches_sigma() {
    let rows = 200_000;
    let ds = gen_dataset(&model(5, rows, 1, Noise::Homoscedastic), &toeplitz(5), RngKey::new(1, Purpose::Data)).unwrap();
    let sample = ds.x.gram().scaled(1.0 / rows as f64);
    let sigma = build_sigma(&toeplitz(5)).unwrap();
    let dev = sample.max_abs_diff(&sigma);
    assert!(dev <= 0.01, "max deviation {dev}");
}

#[test]
fn heteroscedastic_variances_stay_in_range() {
    let spec = model(4, 16 * 100, 16, Noise::MachineHetero);
    let v = noise_variances(&spec, RngKey::new(2, Purpose::Data));
    assert!(v[..100].iter().all(|&x| x == 1.0));
    assert!(v[100..].iter().all(|&x| (1.8..=3.2).contains(&x)));
    for j in 1..16 {
        let block = &v[j * 100..(j + 1) * 100];
        let lo = block.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = block.iter().copied().fold(0.0, f64::max);
        assert!(hi - lo <= 0.4);
    }
}

#[test]
fn estimation_error_contracts_with_rounds() {
    let (d, n_total, k) = (64, 4096, 32);
    let errors: Vec<(f64, f64)> = (0..50)
        .map(|seed| {
            let ds = gen_dataset(&model(d, n_total, k, Noise::Homoscedastic), &toeplitz(d), RngKey::new(seed, Purpose::Data))
                .unwrap();
            let data = shard(&ds.x, &ds.y, k).unwrap();
            let path = run_algorithm1_path(&data, LossFamily::Linear, 3, &CrossValidation::default(), None, &SolverConfig::default())
                .unwrap();
            let err = |tau: usize| {
                let diff: Vec<f64> = path[tau - 1].theta_tau.iter().zip(&ds.theta_star).map(|(a, b)| a - b).collect();
                linf_norm(&diff).unwrap()
            };
            (err(1), err(3))
        })
        .collect();
    let m1 = median(errors.iter().map(|e| e.0).collect());
    let m3 = median(errors.iter().map(|e| e.1).collect());
    assert!(m3 <= m1, "median error tau=1 {m1}, tau=3 {m3}");
}

#[test]
fn debiased_output_is_denser_than_iterate() {
    let ds = gen_dataset(&model(32, 8 * 100, 8, Noise::Homoscedastic), &toeplitz(32), RngKey::new(3, Purpose::Data)).unwrap();
    let data = shard(&ds.x, &ds.y, 8).unwrap();
    let state = run_algorithm1_path(&data, LossFamily::Linear, 2, &CrossValidation::default(), None, &SolverConfig::default())
        .unwrap()
        .pop()
        .unwrap();
    let nnz = |v: &[f64]| v.iter().filter(|&&x| x != 0.0).count();
    assert!(nnz(&state.theta_tau) > nnz(&state.theta_prev));
}

#[test]
fn inflated_variance_raises_hetero_lambda() {
    let (k, d) = (8, 10);
    let cfg = HeteroConfig::default();
    let mut homo = Vec::new();
    let mut inflated = Vec::new();
    for seed in 0..50u64 {
        let mut s = derive_stream(RngKey::new(seed, Purpose::Misc));
        let base: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| s.standard_normal()).collect()).collect();
        let scale: Vec<f64> = (0..k).map(|j| if j == 0 { 1.0 } else { s.uniform(2.0, 3.0).sqrt() }).collect();
        let tag = |scaled: bool| -> Vec<(u64, Vec<f64>)> {
            base.iter()
                .enumerate()
                .map(|(j, g)| (j as u64, g.iter().map(|v| if scaled { v * scale[j] } else { *v }).collect()))
                .collect()
        };
        let key = RngKey::new(seed, Purpose::Hetero);
        homo.push(hetero_lambda(&tag(false), &cfg, key).unwrap());
        inflated.push(hetero_lambda(&tag(true), &cfg, key).unwrap());
    }
    assert!(median(inflated) > median(homo));
}
