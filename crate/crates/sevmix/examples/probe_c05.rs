use nalgebra::{DMatrix, DVector};
use sevmix::gem::{fit, init_params, EStepMode, FitConfig, FitData, PartLambdas, PartPlans};
use sevmix::model::ModelParams;
use sevmix::schema::{Covariate, CovariateKind, CovariateSchema};
use sevmix::sim::simulate_dataset;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn main() {
    let schema = CovariateSchema::new(vec![
        Covariate {
            name: "zone".to_string(),
            kind: CovariateKind::Nominal,
            levels: vec!["a".into(), "b".into(), "c".into()],
        },
        Covariate {
            name: "band".to_string(),
            kind: CovariateKind::Ordinal,
            levels: vec!["lo".into(), "mid".into(), "hi".into()],
        },
    ])
    .unwrap();
    let truth = ModelParams::from_free(
        DMatrix::from_column_slice(
            5,
            2,
            &[0.5, 0.25, -0.2, 0.3, 0.15, 0.5, -0.25, 0.2, -0.3, 0.15],
        ),
        DMatrix::from_column_slice(
            5,
            2,
            &[0.1, 0.2, -0.15, 0.25, 0.1, 1.3, -0.2, 0.15, -0.25, 0.1],
        ),
        DVector::from_column_slice(&[0.15, 0.2]),
        DVector::from_column_slice(&[0.8, 0.15, -0.1, 0.2, -0.1]),
        2.0,
        12.0,
    )
    .unwrap();
    let plans = PartPlans::unpenalized(5, 5, 5);
    for rep in 0..6u64 {
        let seed = 500 + rep;
        let sim = simulate_dataset(&schema, &truth, 20_000, seed).unwrap();
        let data = FitData::from_dataset(&sim.dataset);
        let cfg = FitConfig {
            max_iters: 400,
            tol: 1e-4,
            estep: EStepMode::Quadrature { tol: 1e-8 },
            seed,
            ..FitConfig::default()
        };
        let init = init_params(&data, 2, seed).unwrap();
        let report = fit(&data, init, &plans, PartLambdas::zero(), &cfg).unwrap();
        let p = &report.params;
        let e_mix = max_abs_diff(p.mixing().as_slice(), truth.mixing().as_slice());
        let e_body = max_abs_diff(p.body().as_slice(), truth.body().as_slice());
        let e_tail = max_abs_diff(p.tail_coef().as_slice(), truth.tail_coef().as_slice());
        let e_disp = max_abs_diff(p.dispersion().as_slice(), truth.dispersion().as_slice());
        println!(
            "rep {rep}: iters {} conv {} aborted {:?} | mix {e_mix:.4} body {e_body:.4} tail {e_tail:.4} disp {e_disp:.4} theta {:.4}",
            report.iters, report.converged, report.aborted, p.tail_scale()
        );
    }
}
