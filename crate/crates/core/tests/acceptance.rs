//! End-to-end acceptance criteria. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.
//!
//! Run with `cargo test --release -p dcpg-core --test acceptance -- --nocapture`.

use std::io::Write;
use std::time::Instant;

use dcpg_core::harness::log::{epoch_means, moving_average};
use dcpg_core::harness::{
    evaluate, generate_dataset, run_ablation, standard_grid, train, DatasetSpec, ModelConfig,
    SyntheticDataset, TrainOutcome,
};
use dcpg_core::verify::{run_suite, Suite};

/// R@1 both directions on the test split after the default run.
const TARGET_R1: f64 = 0.90;
const TRAIN_BUDGET_S: f64 = 300.0;
/// Absolute tolerance on mean R@1 orderings in the ablation.
const ORDER_TOL: f64 = 0.01;
const ABLATION_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const ABLATION_EPOCHS: usize = 15;
const CURVE_EPOCHS: usize = 10;
const SMOOTH: usize = 3;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

impl Outcome {
    fn line(&self) -> String {
        format!(
            "{} criterion {} {:<22} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

fn suite_criterion(id: usize, name: &'static str, suite: Suite, budget_s: f64) -> Outcome {
    let t = Instant::now();
    let report = run_suite(suite);
    let secs = t.elapsed().as_secs_f64();
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        eprint!("{}", report.render());
    }
    Outcome {
        id,
        name,
        passed: failed.is_empty() && secs < budget_s,
        detail: format!(
            "{}/{} checks in {secs:.1}s (budget {budget_s}s){}",
            report.checks.len() - failed.len(),
            report.checks.len(),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    }
}

fn end_to_end(data: &SyntheticDataset) -> (Outcome, Option<TrainOutcome>) {
    let cfg = ModelConfig::default();
    let t = Instant::now();
    let run = train(&cfg, data).and_then(|out| {
        let r = evaluate(&out.model, &data.test)?;
        Ok((out, r))
    });
    let secs = t.elapsed().as_secs_f64();
    match run {
        Ok((out, r)) => (
            Outcome {
                id: 6,
                name: "end-to-end training",
                passed: r.i2t[0] >= TARGET_R1 && r.t2i[0] >= TARGET_R1 && secs < TRAIN_BUDGET_S,
                detail: format!(
                    "test R@1 i2t {:.3} t2i {:.3} (target {TARGET_R1}), best epoch {}, {secs:.0}s",
                    r.i2t[0], r.t2i[0], out.best.epoch
                ),
            },
            Some(out),
        ),
        Err(e) => (
            Outcome {
                id: 6,
                name: "end-to-end training",
                passed: false,
                detail: format!("run failed: {e}"),
            },
            None,
        ),
    }
}

fn non_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] >= w[0])
}

fn decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

fn curve_shape(run: Option<&TrainOutcome>) -> Outcome {
    let Some(run) = run else {
        return Outcome {
            id: 8,
            name: "curve shape",
            passed: false,
            detail: "no training log".into(),
        };
    };
    let series = |f: &dyn Fn(&dcpg_core::losses::LossBundle, f64) -> f64| {
        let means = epoch_means(&run.log, f);
        moving_average(&means[..CURVE_EPOCHS.min(means.len())], SMOOTH)
    };
    let reward = series(&|_, r| r);
    let triplet = series(&|l, _| l.triplet);
    let instance = series(&|l, _| l.instance);
    let decode = series(&|l, _| l.decode_image + l.decode_text);
    let checks = [
        ("reward", non_decreasing(&reward), &reward),
        ("triplet", decreasing(&triplet), &triplet),
        ("instance", decreasing(&instance), &instance),
        ("decode", decreasing(&decode), &decode),
    ];
    let passed = reward.len() == CURVE_EPOCHS && checks.iter().all(|c| c.1);
    let detail = checks
        .iter()
        .map(|(n, ok, xs)| {
            format!(
                "{n} {:.3}->{:.3}{}",
                xs.first().copied().unwrap_or(f64::NAN),
                xs.last().copied().unwrap_or(f64::NAN),
                if *ok { "" } else { " (violated)" }
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    Outcome {
        id: 8,
        name: "curve shape",
        passed,
        detail,
    }
}

fn ablation_order(data: &SyntheticDataset) -> Outcome {
    let base = ModelConfig {
        epochs: ABLATION_EPOCHS,
        ..ModelConfig::default()
    };
    let grid: Vec<_> = standard_grid()
        .into_iter()
        .filter(|c| ["no pg", "compound pg", "reward r1"].contains(&c.name.as_str()))
        .collect();
    let t = Instant::now();
    let table = match run_ablation(&base, data, &grid, &ABLATION_SEEDS, 1) {
        Ok(t) => t,
        Err(e) => {
            return Outcome {
                id: 7,
                name: "ablation ordering",
                passed: false,
                detail: format!("grid failed: {e}"),
            }
        }
    };
    eprint!("{}", table.render());
    let r1 = |n: &str| table.row(n).filter(|r| r.failures == 0).map(|r| r.mean_r1());
    let (off, compound, reward_r1) = (r1("no pg"), r1("compound pg"), r1("reward r1"));
    let detail = format!(
        "mean R@1 compound {:.4} vs no-pg {:.4}; r1+ap {:.4} vs r1 {:.4} (tol {ORDER_TOL}, {} seeds, {:.0}s)",
        compound.unwrap_or(f64::NAN),
        off.unwrap_or(f64::NAN),
        compound.unwrap_or(f64::NAN),
        reward_r1.unwrap_or(f64::NAN),
        ABLATION_SEEDS.len(),
        t.elapsed().as_secs_f64()
    );
    let passed = match (off, compound, reward_r1) {
        (Some(off), Some(c), Some(r)) => c >= off - ORDER_TOL && c >= r - ORDER_TOL,
        _ => false,
    };
    Outcome {
        id: 7,
        name: "ablation ordering",
        passed,
        detail,
    }
}

fn determinism(data: &SyntheticDataset) -> Outcome {
    let cfg = ModelConfig {
        epochs: 3,
        seed: 11,
        ..ModelConfig::default()
    };
    let runs: Vec<_> = (0..2).map(|_| train(&cfg, data)).collect();
    let (passed, detail) = match (&runs[0], &runs[1]) {
        (Ok(a), Ok(b)) => {
            let logs = a.log.to_jsonl() == b.log.to_jsonl();
            let bits = |o: &TrainOutcome| serde_json::to_string(&o.last.params).unwrap();
            let params = a.last.params == b.last.params && bits(a) == bits(b);
            (
                logs && params,
                format!(
                    "{} log records identical: {logs}; final parameters identical: {params}",
                    a.log.records().len()
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => (false, format!("run failed: {e}")),
    };
    Outcome {
        id: 9,
        name: "determinism",
        passed,
        detail,
    }
}

#[test]
fn acceptance() {
    let data = generate_dataset(&DatasetSpec::default()).expect("default dataset");
    let mut outcomes = vec![
        suite_criterion(1, "gradient correctness", Suite::Gradcheck, 60.0),
        suite_criterion(2, "distributions", Suite::Distributions, 30.0),
        suite_criterion(3, "metric oracle", Suite::Metrics, 10.0),
        suite_criterion(4, "bandit", Suite::Bandit, 60.0),
        suite_criterion(5, "baseline identity", Suite::Baseline, 60.0),
    ];
    let (e2e, run) = end_to_end(&data);
    outcomes.push(e2e);
    outcomes.push(ablation_order(&data));
    outcomes.push(curve_shape(run.as_ref()));
    outcomes.push(determinism(&data));
    outcomes.sort_by_key(|o| o.id);

    // written to the raw handle so the summary shows without --nocapture
    let summary: String = outcomes.iter().map(|o| o.line() + "\n").collect();
    let _ = std::io::stderr().write_all(format!("\n{summary}").as_bytes());
    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
