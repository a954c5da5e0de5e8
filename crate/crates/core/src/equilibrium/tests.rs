use super::*;
use crate::flow::{simulate_flow, TimeGrid};
use crate::oracle::Confidence;

fn constant_gamma_model(gamma: f64, vol: f64) -> FlowModel {
    FlowModel::ornstein_uhlenbeck(0.5, vec![0.0], vec![vol], 1)
        .unwrap()
        .with_impatience(move |_| gamma, gamma, gamma)
        .unwrap()
        .with_impatience_gradient(|_, g| g.fill(0.0))
}

fn single_type(
    model: &FlowModel,
    endowment: EndowmentSpec,
    income: IncomeField,
    t: f64,
    n: usize,
    paths: usize,
) -> MarketPath {
    let e = Arc::new(simulate_flow(model, TimeGrid::new(0.0, t, n).unwrap(), &[vec![0.0]], paths, 1).unwrap());
    let mu = PopulationMeasure::discrete(vec![vec![0.0]], vec![1.0]).unwrap();
    let inputs = EquilibriumInputs::new(model, mu, income, endowment, vec![50.0]).unwrap();
    build_market(inputs, e, &MarketOptions::default()).unwrap()
}

#[test]
fn eta_single_type_closed_form() {
    let m = constant_gamma_model(0.02, 0.0);
    let e = simulate_flow(&m, TimeGrid::new(0.0, 10.0, 100).unwrap(), &[vec![0.0]], 1, 0).unwrap();
    let mu = PopulationMeasure::discrete(vec![vec![0.0]], vec![1.0]).unwrap();
    let (eta, ell) = compute_eta(&e, &mu, &[50.0]).unwrap();
    for j in 0..=100 {
        let t = e.grid().time(j);
        assert!((eta.get(0, j) - 50.0 * (-0.02 * t).exp()).abs() < 1e-12);
        assert!((ell.get(0, j) - (-0.02 * t).exp()).abs() < 1e-14);
    }
    assert_eq!(eta.get(0, 0), 50.0);
}

#[test]
fn eta_two_atoms_sum_oracle() {
    let m = FlowModel::new(1, 1)
        .unwrap()
        .with_impatience(|x| if x[0] < 0.5 { 0.01 } else { 0.05 }, 0.01, 0.05)
        .unwrap();
    let e = simulate_flow(&m, TimeGrid::new(0.0, 20.0, 40).unwrap(), &[vec![0.0], vec![1.0]], 1, 0).unwrap();
    let mu = PopulationMeasure::discrete(vec![vec![0.0], vec![1.0]], vec![1.0, 1.0]).unwrap();
    let (eta, ell) = compute_eta(&e, &mu, &[30.0, 20.0]).unwrap();
    for j in 0..=40 {
        let t = e.grid().time(j);
        let want = 30.0 * (-0.01 * t).exp() + 20.0 * (-0.05 * t).exp();
        assert!((eta.get(0, j) - want).abs() < 1e-12 * want);
        let lw = 0.3 * (-0.01 * t).exp() + 1.0 * (-0.05 * t).exp();
        assert!((ell.get(0, j) - lw).abs() < 1e-12);
    }
}

#[test]
fn rentier_closed_form() {
    let m = constant_gamma_model(0.02, 0.3);
    let mk = single_type(&m, EndowmentSpec::Rentier, IncomeField::constant(1.0), 10.0, 200, 3);
    assert_eq!(mk.inputs().budget_scale(), 1.0);
    for p in 0..3 {
        assert_eq!(mk.state_price().get(p, 0), 1.0);
        for j in 0..=200 {
            let t = mk.ensemble().grid().time(j);
            let h = mk.state_price().get(p, j);
            assert!((h - (-0.02 * t).exp()).abs() <= 1e-10 * h);
            assert!((mk.price().get(p, j) - 50.0).abs() <= 1e-10 * 50.0);
        }
    }
}

#[test]
fn rentier_price_income_ratio() {
    let m = FlowModel::ornstein_uhlenbeck(0.5, vec![0.0], vec![0.3], 1)
        .unwrap()
        .with_impatience(|x| 0.02 + 0.01 * x[0].tanh(), 0.01, 0.03)
        .unwrap();
    let e = Arc::new(simulate_flow(&m, TimeGrid::new(0.0, 5.0, 50).unwrap(), &[vec![-0.5], vec![0.5]], 20, 3).unwrap());
    let mu = PopulationMeasure::discrete(vec![vec![-0.5], vec![0.5]], vec![0.4, 0.6]).unwrap();
    let income = IncomeField::new(|x| (0.3 * x[0]).exp());
    let inputs = EquilibriumInputs::new(&m, mu, income, EndowmentSpec::Rentier, vec![30.0, 40.0]).unwrap();
    let mk = build_market(inputs, e, &MarketOptions::default()).unwrap();
    for p in 0..20 {
        for j in 0..=50 {
            let r = mk.price().get(p, j) / mk.income().get(p, j);
            let want = mk.eta().get(p, j) / mk.loading().get(p, j);
            assert!((r - want).abs() < 1e-12 * want);
        }
        assert!((mk.state_price().get(p, 0) - 1.0).abs() < 1e-15);
    }
}

#[test]
fn constant_b_single_type() {
    let m = constant_gamma_model(0.04, 0.2);
    let b0 = 0.3;
    let mk = single_type(
        &m,
        EndowmentSpec::BField {
            b0: vec![b0],
            lambda: vec![0.0],
        },
        IncomeField::constant(2.0),
        10.0,
        100,
        2,
    );
    for j in 0..=100 {
        // P = (I/γ)(1 − b₀), Q = b₀ I.
        assert!((mk.price().get(1, j) - 2.0 / 0.04 * (1.0 - b0)).abs() < 1e-10);
        assert!((mk.endowment().get(1, j) - b0 * 2.0).abs() < 1e-12);
    }
}

#[test]
fn b_field_martingale_and_total_value() {
    let m = constant_gamma_model(0.05, 0.2);
    let lambda = 0.03;
    let mk = single_type(
        &m,
        EndowmentSpec::BField {
            b0: vec![0.2],
            lambda: vec![lambda],
        },
        IncomeField::constant(1.0),
        400.0,
        8000,
        1,
    );
    let y = mk.inputs().initial_wealth()[0];
    let h = mk.state_price();
    let c0 = h.get(0, 0) * mk.type_liability().get(0, 0, 0);
    for j in 0..=8000 {
        let lhs = h.get(0, j) * mk.type_liability().get(0, 0, j) - mk.type_hq().get(0, 0, j);
        assert!((lhs - c0).abs() < 1e-10 * y, "{j}: {}", lhs - c0);
    }
    // ∫₀^∞ H Q dt = y B₀, truncated at T = 400 where the remainder is e^{−32}.
    let total = mk.type_hq().get(0, 0, 8000);
    assert!((total - 0.2 * y).abs() < 1e-10 * y, "{}", total - 0.2 * y);
}

#[test]
fn zero_b_matches_rentier_bitwise() {
    let m = FlowModel::ornstein_uhlenbeck(0.5, vec![0.0], vec![0.3], 1)
        .unwrap()
        .with_impatience(|x| 0.02 + 0.01 * x[0].tanh(), 0.01, 0.03)
        .unwrap();
    let e = Arc::new(simulate_flow(&m, TimeGrid::new(0.0, 5.0, 50).unwrap(), &[vec![-0.5], vec![0.5]], 120, 3).unwrap());
    let mu = PopulationMeasure::discrete(vec![vec![-0.5], vec![0.5]], vec![0.4, 0.6]).unwrap();
    let build = |spec| {
        let inputs =
            EquilibriumInputs::new(&m, mu.clone(), IncomeField::new(|x| (0.3 * x[0]).exp()), spec, vec![30.0, 40.0])
                .unwrap();
        build_market(inputs, e.clone(), &MarketOptions::default()).unwrap()
    };
    let rentier = build(EndowmentSpec::Rentier);
    for spec in [
        EndowmentSpec::BField {
            b0: vec![0.0; 2],
            lambda: vec![0.05; 2],
        },
        EndowmentSpec::ChiDecay {
            chi0_share: vec![0.0; 2],
            lambda: vec![0.05; 2],
        },
        EndowmentSpec::UField {
            f_share: vec![0.0; 2],
            u0_share: vec![0.0; 2],
            u_inf_share: vec![0.0; 2],
            nu: vec![0.1; 2],
        },
    ] {
        assert!(build(spec).bitwise_eq(&rentier));
    }
}

#[test]
fn u_field_constant_coefficients() {
    let gamma = 0.04;
    let m = constant_gamma_model(gamma, 0.2);
    // u ≡ f: χ stays at f, the χ-decay family with λ = 0.
    let flat = single_type(
        &m,
        EndowmentSpec::UField {
            f_share: vec![0.2],
            u0_share: vec![0.2],
            u_inf_share: vec![0.2],
            nu: vec![0.1],
        },
        IncomeField::constant(1.0),
        10.0,
        100,
        1,
    );
    let decay = single_type(
        &m,
        EndowmentSpec::ChiDecay {
            chi0_share: vec![0.2],
            lambda: vec![0.0],
        },
        IncomeField::constant(1.0),
        10.0,
        100,
        1,
    );
    for j in 0..=100 {
        let (a, b) = (flat.type_liability().get(0, 0, j), decay.type_liability().get(0, 0, j));
        assert!((a - b).abs() < 1e-11 * b.abs());
        let (a, b) = (flat.type_endowment().get(0, 0, j), decay.type_endowment().get(0, 0, j));
        assert!((a - b).abs() < 1e-11 * b);
    }
    // Constant u = c > f: χ = c − (c − f)e^{γt}; L = −(η/ℓ) I y χ.
    let (c, f) = (0.25, 0.2);
    let mk = single_type(
        &m,
        EndowmentSpec::UField {
            f_share: vec![f],
            u0_share: vec![c],
            u_inf_share: vec![c],
            nu: vec![0.1],
        },
        IncomeField::constant(1.0),
        10.0,
        100,
        1,
    );
    let y = mk.inputs().initial_wealth()[0];
    for j in 0..=100 {
        let t = mk.ensemble().grid().time(j);
        let chi = (c - (c - f) * (gamma * t).exp()) / y;
        let want = -(1.0 / gamma) * y * chi;
        assert!((mk.type_liability().get(0, 0, j) - want).abs() < 1e-9 * want.abs(), "{j}");
    }
}

#[test]
fn u_field_rejects_negative_chi() {
    let m = constant_gamma_model(0.04, 0.2);
    let e = Arc::new(simulate_flow(&m, TimeGrid::new(0.0, 50.0, 100).unwrap(), &[vec![0.0]], 1, 1).unwrap());
    let mu = PopulationMeasure::discrete(vec![vec![0.0]], vec![1.0]).unwrap();
    let spec = EndowmentSpec::UField {
        f_share: vec![0.1],
        u0_share: vec![0.5],
        u_inf_share: vec![0.5],
        nu: vec![0.1],
    };
    let inputs = EquilibriumInputs::new(&m, mu, IncomeField::constant(1.0), spec, vec![50.0]).unwrap();
    assert!(build_market(inputs, e, &MarketOptions::default()).is_err());
}

#[test]
fn invariant_violations_rejected() {
    let m = constant_gamma_model(0.04, 0.2);
    let mu = PopulationMeasure::discrete(vec![vec![0.0]], vec![1.0]).unwrap();
    let bad_b = EndowmentSpec::BField {
        b0: vec![1.0],
        lambda: vec![0.0],
    };
    assert!(EquilibriumInputs::new(&m, mu.clone(), IncomeField::constant(1.0), bad_b, vec![50.0]).is_err());
    assert!(EquilibriumInputs::new(&m, mu.clone(), IncomeField::constant(1.0), EndowmentSpec::Rentier, vec![0.0]).is_err());
    // Q > I: B close to 1 with a fast decay.
    let hot = EndowmentSpec::BField {
        b0: vec![0.9],
        lambda: vec![1.0],
    };
    let e = Arc::new(simulate_flow(&m, TimeGrid::new(0.0, 1.0, 10).unwrap(), &[vec![0.0]], 1, 1).unwrap());
    let inputs = EquilibriumInputs::new(&m, mu, IncomeField::constant(1.0), hot, vec![50.0]).unwrap();
    assert!(build_market(inputs, e, &MarketOptions::default()).is_err());
}

#[test]
fn deterministic_rentier_coefficients_and_reports() {
    let m = constant_gamma_model(0.02, 0.3);
    let mk = single_type(&m, EndowmentSpec::Rentier, IncomeField::constant(1.0), 10.0, 50, 200);
    let c = mk.coefficients().unwrap();
    for j in 0..50 {
        assert!((c.rate[j] - 0.02).abs() < 1e-10);
        assert!(c.theta(j)[0].abs() < 1e-10);
    }
    let na = verify_no_arbitrage(&mk, Confidence::default()).unwrap();
    assert!(na.pass);
    let sw = verify_sigma_w_equals_theta(&mk, Confidence::default()).unwrap();
    assert!(sw.pass, "{:?}", sw.test.pass_fraction);
    assert_eq!(sw.reference, "analytic");
    let pol = mk.optimal_policy().unwrap();
    let agg = pol.aggregate(mk.inputs().measure()).unwrap();
    let cl = verify_clearing(&mk, &agg);
    assert!(cl.pass && cl.money_market <= 1e-12 && cl.stock <= 1e-12 && cl.commodity <= 1e-12);
    let jo = joneses_identity(&mk, &pol, &agg, 0, 1.0).unwrap();
    assert!(jo.pass);
    let shocked = joneses_identity(&mk, &pol, &agg, 0, 1.1).unwrap();
    assert!((shocked.kernel_residual - (1.0 - 1.0 / 1.1)).abs() < 1e-9);
}

#[test]
fn faults_are_detected() {
    let m = constant_gamma_model(0.02, 0.3);
    let mk = single_type(&m, EndowmentSpec::Rentier, IncomeField::constant(1.0), 10.0, 50, 200);
    let shifted = mk.clone().with_rate_shift(0.01);
    let na = verify_no_arbitrage(&shifted, Confidence::default()).unwrap();
    assert!(!na.identity.verdict && na.identity.pass_fraction < 0.5);
    let scaled = mk.with_kernel_scale(1.01, 25);
    let agg = scaled.optimal_policy().unwrap().aggregate(scaled.inputs().measure()).unwrap();
    let cl = verify_clearing(&scaled, &agg);
    assert!(!cl.pass);
    assert!((cl.commodity - (1.0 - 1.0 / 1.01)).abs() < 1e-6);
}

#[test]
fn tabulated_constant_share_matches_closed_form() {
    let m = FlowModel::ornstein_uhlenbeck(0.5, vec![0.0], vec![0.3], 1)
        .unwrap()
        .with_impatience(|x| 0.1 + 0.02 * x[0].tanh(), 0.08, 0.12)
        .unwrap();
    let e = Arc::new(simulate_flow(&m, TimeGrid::new(0.0, 2.0, 20).unwrap(), &[vec![-0.3], vec![0.4]], 20, 5).unwrap());
    let mu = PopulationMeasure::discrete(vec![vec![-0.3], vec![0.4]], vec![0.5, 0.5]).unwrap();
    let spec = EndowmentSpec::Tabulated {
        axis: 0,
        knots: vec![-1.0, 1.0],
        shares: vec![0.3, 0.3],
        nested: NestedMcOptions {
            enabled: true,
            inner_paths: 8,
            inner_dt: 0.1,
            eval_stride: 10,
            ..NestedMcOptions::default()
        },
    };
    let inputs = EquilibriumInputs::new(&m, mu, IncomeField::new(|x| (0.2 * x[0]).exp()), spec, vec![10.0, 12.0]).unwrap();
    let opts = MarketOptions {
        truncation_tolerance: 1e-6,
        kappa: Some(KappaRule::Structural),
        ..MarketOptions::default()
    };
    let mk = build_market(inputs, e, &opts).unwrap();
    // H Q^μ = 0.3 ℓ, so L^μ = −0.3 (η_t − η_T*)/H_t ≈ −0.3 P^W.
    for p in 0..20 {
        for j in [0, 10, 20] {
            let want = -0.3 * mk.total_wealth().get(p, j);
            let got = mk.liability().get(p, j);
            assert!((got - want).abs() < 2e-3 * want.abs(), "{p} {j}: {got} vs {want}");
        }
    }
    let rep = mk.nested_report().unwrap();
    assert_eq!(rep.eval_steps, vec![0, 10, 20]);
    assert_eq!(mk.kappa_rule(), KappaRule::Structural);
}

#[test]
fn nested_caps_enforced() {
    let opts = NestedMcOptions {
        enabled: true,
        inner_paths: 600,
        inner_cap: 500,
        ..NestedMcOptions::default()
    };
    assert!(opts.validate().is_err());
    let opts = NestedMcOptions {
        outer_cap: 5000,
        ..NestedMcOptions::default()
    };
    assert!(opts.validate().is_err());
}

#[test]
fn income_scaling_leaves_kernel_and_ratios_unchanged() {
    let m = FlowModel::ornstein_uhlenbeck(0.5, vec![0.0], vec![0.3], 1)
        .unwrap()
        .with_impatience(|x| 0.02 + 0.01 * x[0].tanh(), 0.01, 0.03)
        .unwrap();
    let e = Arc::new(simulate_flow(&m, TimeGrid::new(0.0, 5.0, 50).unwrap(), &[vec![-0.5], vec![0.5]], 150, 3).unwrap());
    let mu = PopulationMeasure::discrete(vec![vec![-0.5], vec![0.5]], vec![0.4, 0.6]).unwrap();
    let income = IncomeField::new(|x| (0.3 * x[0]).exp());
    let build = |inc: IncomeField, y: Vec<f64>| {
        let inputs = EquilibriumInputs::new(&m, mu.clone(), inc, EndowmentSpec::Rentier, y).unwrap();
        build_market(inputs, e.clone(), &MarketOptions::default()).unwrap()
    };
    let base = build(income.clone(), vec![30.0, 40.0]);
    let doubled_income = build(income.scaled(2.0), vec![30.0, 40.0]);
    let doubled_wealth = build(income, vec![60.0, 80.0]);
    let ratio = |mk: &MarketPath| mk.consumption().zip_map(mk.total_wealth(), |c, p| c / p);
    for other in [&doubled_income, &doubled_wealth] {
        assert_eq!(ratio(other), ratio(&base));
        assert_eq!(other.state_price(), base.state_price());
        let (a, b) = (other.coefficients().unwrap(), base.coefficients().unwrap());
        assert_eq!(a.state_price, b.state_price);
    }
    for p in 0..150 {
        for j in 0..=50 {
            assert_eq!(doubled_income.price().get(p, j), 2.0 * base.price().get(p, j));
        }
    }
}
