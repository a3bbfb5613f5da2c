use progdistill::config::RunConfig;
use progdistill::distill::{progressive_distill, Evaluator, STOCHASTIC_GRID};
use progdistill::experiments::{fast_schedule, sweep, SWEEP_CURVES};
use progdistill::net::Model;
use progdistill::rng::Streams;
use progdistill::train::train_original;

fn tiny(extra: &[&str]) -> RunConfig {
    let mut o: Vec<String> = [
        "train.updates=200",
        "train.batch_size=64",
        "train.eval_every=0",
        "model.hidden_dims=[16,16]",
        "distill.start_steps=16",
        "distill.updates_per_iteration=20",
        "distill.updates_small=30",
        "distill.batch_size=64",
        "eval.count=300",
        "eval.agreement_count=50",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(None, &o).unwrap()
}

fn base(cfg: &RunConfig) -> Model {
    train_original(
        &cfg.dataset,
        &cfg.model,
        &cfg.train,
        &Streams::new(cfg.seed),
    )
    .unwrap()
    .model
}

#[test]
fn sweep_has_one_row_per_curve_and_rung() {
    let cfg = tiny(&[]);
    let model = base(&cfg);
    let streams = Streams::new(cfg.seed);
    let eval = Evaluator::new(&cfg.dataset, &cfg.eval, &streams).unwrap();
    let ladder = progressive_distill(&model, &cfg.dataset, &cfg.distill, &eval, &streams).unwrap();
    let rungs: Vec<(usize, Model)> = ladder
        .rungs
        .iter()
        .map(|r| (r.info.n_steps, r.model.clone()))
        .collect();
    let rows = sweep(&model, &rungs, &eval).unwrap();
    assert_eq!(rows.len(), SWEEP_CURVES.len() * rungs.len());
    let at = |curve: &str, n: usize| {
        rows.iter()
            .find(|r| r.curve == curve && r.n_steps == n)
            .unwrap()
    };
    assert_eq!(
        at("distilled_ddim", 16).energy_distance,
        at("undistilled_ddim", 16).energy_distance
    );
    assert_eq!(
        at("distilled_ddim", 16).energy_distance,
        ladder.rungs[0].info.energy_distance
    );
    for r in rows.iter().filter(|r| r.curve.ends_with("stochastic")) {
        assert!(STOCHASTIC_GRID.contains(&r.coef.unwrap()));
    }
    assert_eq!(STOCHASTIC_GRID.len(), 11);
}

#[test]
fn fast_schedules_share_the_base() {
    let cfg = tiny(&[]);
    let model = base(&cfg);
    let rows = fast_schedule(&model, &cfg).unwrap();
    let hash = model.hash();
    assert!(rows.iter().all(|r| r.base_hash == hash));
    for divisor in [2usize, 4] {
        for label in ["x1/1", "x1/2", "x1/5", "x1/10"] {
            let schedule = format!("div{divisor}_{label}");
            let n = rows.iter().filter(|r| r.schedule == schedule).count();
            // base rung plus ceil(log_d 16) students
            let want = 1 + if divisor == 2 { 4 } else { 2 };
            assert_eq!(n, want, "{schedule}");
        }
    }
    let half = rows
        .iter()
        .find(|r| r.schedule == "div2_x1/2" && r.n_steps == 8)
        .unwrap();
    assert_eq!(half.updates, 10);
}
