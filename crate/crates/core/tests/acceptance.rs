//! End-to-end acceptance gate: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so the long experiment executes once
//! and its report feeds criteria 6 and 7.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use common::{grad, invariance, metric, oracle};
use rga_core::config::{Config, RegionMode};
use rga_core::data::{generate_synthetic, SyntheticSplits};
use rga_core::train::{run_experiment, ExperimentReport, LogRecord};

const CONFIG: &str = include_str!("../../../configs/synthetic.conf");

type Outcome = Result<String, String>;

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(e) => Err(e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn timed(limit: Duration, f: impl FnOnce()) -> Outcome {
    let t = Instant::now();
    f();
    let took = t.elapsed();
    let detail = format!("{:.2}s (limit {}s)", took.as_secs_f64(), limit.as_secs());
    if took <= limit {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn masks_simplex() -> Outcome {
    timed(Duration::from_secs(10), || {
        let worst = oracle::mask_simplex(1000, &[1.0, 20.0, 100.0]);
        assert!(worst < 1e-5, "worst column-sum error {worst:.3e}");
    })
}

fn gradients() -> Outcome {
    timed(Duration::from_secs(120), || {
        grad::segmentation_loss_through_masks();
        grad::pooled_regions_through_masks();
        grad::ram_loss_with_constant_weights();
        grad::confidence_weights_through_alpha();
        grad::batch_hard_triplet();
        grad::identity_cross_entropy();
        grad::total_loss_on_a_two_image_batch();
    })
}

fn unit_oracles() -> Outcome {
    oracle::masks_and_pooling_match_direct_sums();
    oracle::momentum_update_matches_direct_formula();
    oracle::invariance_scores_match_direct_softmax();
    oracle::aggregate_distance_matches_direct_formula();
    oracle::momentum_limits();
    oracle::score_closed_forms();
    oracle::zero_weights_fall_back_to_global_distance();
    Ok("100 instances per formula, closed forms exact".into())
}

fn metric_oracle() -> Outcome {
    metric::five_by_ten_fixture_matches_brute_force();
    metric::self_retrieval_is_perfect();
    Ok("5x10 fixture".into())
}

fn invariances() -> Outcome {
    invariance::beta_ignores_feature_and_center_scale();
    invariance::masks_ignore_feature_and_prototype_scale();
    invariance::rankings_ignore_feature_scale();
    invariance::frozen_parameters_survive_training();
    Ok("scale and freeze checks".into())
}

struct Run {
    report: ExperimentReport,
    seconds: f64,
}

fn experiment(config: &Config, splits: &SyntheticSplits) -> Run {
    let t = Instant::now();
    let (_, report) = run_experiment(config, &splits.train, &splits.query, &splits.gallery, None, &mut |_: &LogRecord| {})
        .expect("experiment failed");
    Run {
        report,
        seconds: t.elapsed().as_secs_f64(),
    }
}

fn end_to_end(full: &Run, stripe: &Run) -> Outcome {
    let r = &full.report;
    let mask = r.mask_accuracy.ok_or_else(|| "no mask accuracy".to_string())?;
    let (vis, occ) = r.beta.ok_or_else(|| "no occluded regions in the held-out splits".to_string())?;
    let (r1, map) = (r.metrics.rank(1), r.metrics.map);
    let checks = [
        ("time", full.seconds <= 900.0, format!("{:.0}s", full.seconds)),
        ("a", mask >= 0.85, format!("mask acc {mask:.4}")),
        ("b", r1 >= 0.90 && map >= 0.80, format!("R1 {r1:.4} mAP {map:.4}")),
        ("c", vis - occ >= 0.05, format!("beta vis {vis:.4} occ {occ:.4} gap {:.4}", vis - occ)),
        ("d", map >= stripe.report.metrics.map, format!("stripe mAP {:.4}", stripe.report.metrics.map)),
    ];
    let detail = checks
        .iter()
        .map(|(k, ok, d)| format!("({k}) {} {d}", if *ok { "ok" } else { "MISS" }))
        .collect::<Vec<_>>()
        .join("; ");
    if checks.iter().all(|c| c.1) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    // `cargo test` passes libtest flags; listing must not start the long run
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }

    let mut results: Vec<(u32, &str, Outcome)> = vec![
        (1, "mask simplex", guarded(masks_simplex)),
        (2, "gradient oracles", guarded(gradients)),
        (3, "equation oracles", guarded(unit_oracles)),
        (4, "metric oracle", guarded(metric_oracle)),
        (5, "invariance suite", guarded(invariances)),
    ];
    for (n, name, r) in &results {
        print_line(*n, name, r);
    }

    let config = Config::parse(CONFIG).expect("bundled config");
    let mut stripe_config = config.clone();
    stripe_config.region_mode = RegionMode::Stripe;
    let splits = generate_synthetic(&config.synthetic_config()).expect("synthetic data");
    let runs = guarded(|| Ok((experiment(&config, &splits), experiment(&stripe_config, &splits))));
    let (six, seven) = match runs {
        Ok((full, stripe)) => {
            let six = end_to_end(&full, &stripe);
            let seven = guarded(|| {
                let again = experiment(&config, &splits);
                if again.report == full.report {
                    Ok(format!("reports identical ({:.0}s rerun)", again.seconds))
                } else {
                    Err(format!("reports differ: {:?} vs {:?}", full.report.metrics, again.report.metrics))
                }
            });
            (six, seven)
        }
        Err(e) => (Err(e.clone()), Err(format!("not run: {e}"))),
    };
    results.push((6, "synthetic end-to-end", six));
    results.push((7, "determinism", seven));
    for (n, name, r) in &results[5..] {
        print_line(*n, name, r);
    }

    let passed = results.iter().filter(|r| r.2.is_ok()).count();
    println!("acceptance: {passed} of {} criteria pass", results.len());
}

fn print_line(n: u32, name: &str, r: &Outcome) {
    match r {
        Ok(d) => println!("criterion {n} PASS  {name}: {d}"),
        Err(d) => println!("criterion {n} FAIL  {name}: {d}"),
    }
}
