use geonet::config::{GermPolicy, RunConfig};
use geonet::data_io::{generate_synthetic, read_dataset, read_model, write_dataset, write_model, ModelBundle, Split};
use geonet::evaluation::{evaluate, test_nll, Predictor};
use geonet::training::{train, Context, Evaluator, Germs, PENALTY};
use proptest::prelude::*;

fn small() -> RunConfig {
    RunConfig {
        n_u: 12,
        n_v: 6,
        m: 20,
        n_neurons: 30,
        n_in: 3,
        n_out: 5,
        n_sim: 10,
        grid_n: 2,
        max_iters: 3,
        ..RunConfig::default()
    }
}

fn bundle(ctx: &Context, out: &geonet::training::TrainOutcome, n_d: usize) -> ModelBundle {
    ModelBundle {
        config: ctx.cfg.clone(),
        theta: out.theta_opt.clone(),
        io: out.io.clone(),
        germs: ctx.germs.clone(),
        nll_train_opt: out.loss_opt,
        n_d,
    }
}

#[test]
fn train_then_evaluate_small_pipeline() {
    let ctx = Context::from_config(small()).unwrap();
    let (tr, te) = generate_synthetic(40, 12, 3, 5, 5).unwrap();
    let out = train(&ctx, &tr).unwrap();

    assert_eq!(out.grid.len(), 8);
    assert!(out.grid.iter().any(|g| g.loss != PENALTY));
    assert!(out.loss_opt <= out.trace.loss[0]);
    assert_eq!(out.trace.loss[0], out.grid[out.grid_best].loss);
    let best = out.grid.iter().map(|g| g.loss).fold(f64::INFINITY, f64::min);
    assert_eq!(out.grid[out.grid_best].loss, best);

    let b = bundle(&ctx, &out, tr.len());
    let rep = evaluate(&b, &tr, &te).unwrap();
    assert_eq!(rep.points.len(), te.len());
    assert!(rep.nll_test.is_finite());
    assert!(rep.crps_ann >= 0.0 && rep.crps_train >= 0.0);
    for p in &rep.points {
        for (lo, hi) in p.ci_ann.iter().chain(&p.ci_train) {
            assert!(lo <= hi);
        }
    }

    // the stored model reproduces the same predictions after a text round trip
    let mut buf = Vec::new();
    write_model(&b, &mut buf).unwrap();
    let back = read_model(&buf[..]).unwrap();
    let (p1, p2) = (Predictor::from_bundle(&b).unwrap(), Predictor::from_bundle(&back).unwrap());
    assert_eq!(test_nll(&p1, &te).unwrap().to_bits(), test_nll(&p2, &te).unwrap().to_bits());
}

#[test]
fn crn_germs_make_loss_a_function_of_theta() {
    let ctx = Context::from_config(small()).unwrap();
    let (tr, _) = generate_synthetic(20, 1, 3, 5, 8).unwrap();
    let ev = Evaluator::new(&ctx, &tr).unwrap();
    let (_, grid) = geonet::training::trial_grid_search(&ev).unwrap();
    let theta = geonet::training::Theta {
        h1: grid[0].node[0],
        h2: grid[0].node[1],
        zeta_s: grid[0].node[2],
        beta1: vec![],
        beta2: vec![],
        beta: grid[0].beta.clone(),
    };
    let a = ev.loss(&theta, 3).unwrap();
    let b = ev.loss(&theta, 99).unwrap();
    assert_eq!(a.to_bits(), b.to_bits());
}

#[test]
fn independent_germs_vary_with_evaluation() {
    let cfg = RunConfig {
        germ_policy: GermPolicy::Independent,
        ..small()
    };
    let germs = Germs::draw(&cfg);
    assert_ne!(germs.eta_for(1)[0], germs.eta_for(2)[0]);
    assert_eq!(germs.eta_for(7)[0], germs.eta_for(7)[0]);
}

#[test]
fn mismatched_data_is_rejected() {
    let ctx = Context::from_config(small()).unwrap();
    let (tr, _) = generate_synthetic(10, 1, 4, 5, 1).unwrap();
    assert!(Evaluator::new(&ctx, &tr).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn dataset_text_round_trip_is_exact(
        n in 1usize..12, n_in in 1usize..4, n_out in 1usize..4, seed in 0u64..1000,
    ) {
        let (tr, _) = generate_synthetic(n, 1, n_in, n_out, seed).unwrap();
        let mut buf = Vec::new();
        write_dataset(&tr, &mut buf).unwrap();
        let back = read_dataset(&buf[..], Split::Train).unwrap();
        prop_assert_eq!(back.inputs, tr.inputs);
        prop_assert_eq!(back.outputs, tr.outputs);
    }

    #[test]
    fn synthetic_generation_is_seed_deterministic(seed in 0u64..1000) {
        let a = generate_synthetic(5, 2, 2, 3, seed).unwrap();
        let b = generate_synthetic(5, 2, 2, 3, seed).unwrap();
        prop_assert_eq!(a.0.outputs, b.0.outputs);
        prop_assert_eq!(a.1.inputs, b.1.inputs);
    }
}
