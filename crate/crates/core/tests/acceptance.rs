//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion
//! and exits nonzero if any fails.
//!
//! Criteria 5-9 run at desk scale (the default config) and take several
//! minutes on one core.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use aqp_core::config::Config;
use aqp_core::nn::{gradient_check, gradient_check_with, Layer, LayerSpec, Tensor};
use aqp_core::pipeline::{
    build_corpus, experiment_distribution_count, experiment_histogram_resolution,
    experiment_relationship, CsvArtifact, DistributionCountResult, ModelKind,
};
use aqp_core::predictor::{build_network, estimate_sampling_ratio, Mode, TabularFeatures};
use aqp_core::rng::SeededRng;
use aqp_core::selectivity::IndexedPointSet;
use aqp_core::stats::spearman;
use aqp_core::{
    accuracy, build_histogram, draw_sample, estimate_selectivity, generate, measure_mean_accuracy,
    DistributionSpec, Point, PointSet, QuerySpec, Seed,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, id: &str, name: &str, budget: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let o = f();
        let elapsed = start.elapsed();
        let in_budget = elapsed <= budget;
        let pass = o.pass && in_budget;
        if !pass {
            self.failures += 1;
        }
        println!(
            "[{}] {id} {name}: {}; {:.1}s (budget {}s){}",
            if pass { "PASS" } else { "FAIL" },
            o.detail,
            elapsed.as_secs_f64(),
            budget.as_secs(),
            if in_budget { "" } else { " OVER BUDGET" },
        );
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn accuracy_oracle() -> Outcome {
    let mut rng = SeededRng::new(Seed(11));
    let mut worst: f64 = 0.0;
    for _ in 0..10_000 {
        let truth = 1 + rng.below(1_000_000);
        let estimate = rng.uniform_in(0.0, 2.5 * truth as f64);
        let t = truth as f64;
        let direct = f64::max(0.0, 1.0 - (t - estimate).abs() / t);
        let got = accuracy(estimate, truth).expect("nonzero truth");
        worst = worst.max((got - direct).abs());
    }
    outcome(worst <= 1e-15, format!("max |difference| = {worst:e} over 10000 pairs"))
}

fn linear_count(points: &[Point], q: &QuerySpec) -> u64 {
    let b = &q.bbox;
    points
        .iter()
        .filter(|p| p.x >= b.min_x && p.x <= b.max_x && p.y >= b.min_y && p.y <= b.max_y)
        .count() as u64
}

fn selectivity_oracle() -> Outcome {
    let specs = ["uniform", "gaussian(sigma=0.1,cx=0.4,cy=0.6)", "diagonal(p=0.5,buffer=0.05,theta=0)"];
    let mut mismatches = 0;
    let mut compared = 0;
    for (i, spec) in specs.iter().enumerate() {
        let spec: DistributionSpec = spec.parse().unwrap();
        let data = generate(&spec, 100_000, Seed(100 + i as u64)).unwrap();
        let indexed = IndexedPointSet::new(data.clone()).unwrap();
        let mut rng = SeededRng::new(Seed(200 + i as u64));
        for _ in 0..100 {
            let center = Point::new(rng.uniform_in(-0.1, 1.1), rng.uniform_in(-0.1, 1.1));
            let q = 10f64.powf(rng.uniform_in(-4.0, -0.5));
            let query = QuerySpec::centered(center, q, indexed.mbr()).unwrap();
            compared += 1;
            if indexed.ground_truth(&query) != linear_count(data.points(), &query) {
                mismatches += 1;
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches in {compared} queries"))
}

fn estimator_sanity() -> Outcome {
    let data = generate(&DistributionSpec::Uniform, 100_000, Seed(31)).unwrap();
    let full = measure_mean_accuracy(&data, 1.0, 0.05, 50, 3, Seed(32)).unwrap();
    let indexed = IndexedPointSet::new(data.clone()).unwrap();
    let query = QuerySpec::centered(Point::new(0.5, 0.5), 0.05, indexed.mbr()).unwrap();
    let truth = indexed.ground_truth(&query) as f64;
    let estimates: Vec<f64> = (0..500)
        .map(|i| {
            let sample = draw_sample(&data, 0.05, Seed(1000 + i)).unwrap();
            estimate_selectivity(&sample, sample.len(), data.len(), &query)
        })
        .collect();
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let var = estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    let z = (mean - truth).abs() / se;
    outcome(
        full == 1.0 && z <= 3.0,
        format!("accuracy at sigma=1 is {full}; 500-draw mean {mean:.2} vs truth {truth} ({z:.2} SE)"),
    )
}

fn layer_error(layer: &Layer, input: &Tensor, rng: &mut SeededRng) -> f64 {
    let eps = 1e-5;
    let (out, cache) = layer.forward(0, input).unwrap();
    let probe: Vec<f64> = (0..out.len()).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
    let objective = |l: &Layer, x: &Tensor| -> f64 {
        let (o, _) = l.forward(0, x).unwrap();
        o.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
    };
    let grad_out = Tensor::new(out.shape().to_vec(), probe.clone()).unwrap();
    let (grad_in, grad_params) = layer.backward(0, &cache, &grad_out).unwrap();
    let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-12);
    let mut worst: f64 = 0.0;
    for i in 0..input.len() {
        let shifted = |d: f64| {
            let mut x = input.clone();
            x.data_mut()[i] += d;
            objective(layer, &x)
        };
        worst = worst.max(rel(grad_in.data()[i], (shifted(eps) - shifted(-eps)) / (2.0 * eps)));
    }
    if let Some(gp) = grad_params {
        for (which, analytic) in [&gp.weight, &gp.bias].into_iter().enumerate() {
            for i in 0..analytic.len() {
                let shifted = |d: f64| {
                    let mut l = layer.clone();
                    let p = l.params.as_mut().unwrap();
                    let t = if which == 0 { &mut p.weight } else { &mut p.bias };
                    t.data_mut()[i] += d;
                    objective(&l, input)
                };
                worst = worst.max(rel(analytic.data()[i], (shifted(eps) - shifted(-eps)) / (2.0 * eps)));
            }
        }
    }
    worst
}

/// Distinct values spread over [-0.4, 0.6), so no ReLU input sits at a kink
/// and no pooling window has a tie.
fn spread_tensor(shape: Vec<usize>, rng: &mut SeededRng) -> Tensor {
    let len: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..len).map(|i| (i as f64 + 0.5) / len as f64 - 0.4).collect();
    rng.shuffle(&mut v);
    Tensor::new(shape, v).unwrap()
}

fn gradient_correctness() -> Outcome {
    let mut rng = SeededRng::new(Seed(41));
    let cases = [
        (LayerSpec::Dense { inputs: 6, outputs: 4 }, vec![6]),
        (LayerSpec::Conv2d { in_channels: 2, out_channels: 3 }, vec![2, 6, 7]),
        (LayerSpec::MaxPool2x2, vec![3, 6, 5]),
        (LayerSpec::Relu, vec![4, 5]),
        (LayerSpec::Flatten, vec![2, 4, 3]),
    ];
    let mut layer_worst: f64 = 0.0;
    for (spec, shape) in cases {
        let layer = Layer::initialized(spec, &mut rng);
        let input = spread_tensor(shape, &mut rng);
        layer_worst = layer_worst.max(layer_error(&layer, &input, &mut rng));
    }

    let model = build_network(Mode::AccuracyPrediction, 16, Seed(42)).unwrap();
    let net = &model.network;
    let tabular = Tensor::vector(vec![0.3, -0.7]);
    let hist_values: Vec<f64> = (0..256).map(|_| rng.uniform_in(0.0, 2.0)).collect();
    let hist = Tensor::new(vec![16, 16], hist_values).unwrap();
    let target = 0.8;
    let full = gradient_check(net, &tabular, &hist, target, 1e-6).unwrap();
    let corrupted = gradient_check_with(net, &tabular, &hist, target, 1e-6, |n| {
        let mut g = n.loss_gradients(&tabular, &hist, target)?.1;
        g.scale(2.0);
        Ok(g)
    })
    .unwrap();
    outcome(
        layer_worst < 1e-6 && full < 1e-4 && corrupted >= 1e-4,
        format!("per-layer {layer_worst:.2e}, network {full:.2e}, doubled backward {corrupted:.2e}"),
    )
}

fn relationship_check(points: &[(String, f64, f64, f64)]) -> Outcome {
    // (dataset, q, sigma, accuracy)
    let mut curves: HashMap<(String, u64), Vec<(f64, f64)>> = HashMap::new();
    for (d, q, s, a) in points {
        curves.entry((d.clone(), q.to_bits())).or_default().push((*s, *a));
    }
    let mut datasets: Vec<String> = points.iter().map(|p| p.0.clone()).collect();
    datasets.sort();
    datasets.dedup();
    let mut min_rho = f64::INFINITY;
    let mut passing = 0;
    for d in &datasets {
        let rhos: Vec<f64> = curves
            .iter()
            .filter(|((id, _), _)| id == d)
            .map(|(_, c)| {
                let (s, a): (Vec<f64>, Vec<f64>) = c.iter().copied().unzip();
                spearman(&s, &a)
            })
            .collect();
        let worst = rhos.iter().copied().fold(f64::INFINITY, f64::min);
        min_rho = min_rho.min(worst);
        let full_grid = curves.iter().filter(|((id, _), c)| id == d && c.len() >= 8).count() == rhos.len();
        if worst >= 0.9 && full_grid {
            passing += 1;
        }
    }
    let lookup: HashMap<(String, u64, u64), f64> = points
        .iter()
        .map(|(d, q, s, a)| ((d.clone(), q.to_bits(), s.to_bits()), *a))
        .collect();
    let (mut dominated, mut total) = (0, 0);
    for (d, q, s, a) in points {
        if *q == 0.01 {
            if let Some(big) = lookup.get(&(d.clone(), 0.1f64.to_bits(), s.to_bits())) {
                total += 1;
                if *big >= *a {
                    dominated += 1;
                }
            }
        }
    }
    let share = dominated as f64 / total.max(1) as f64;
    outcome(
        passing >= 4 && passing == datasets.len() && total > 0 && share >= 0.8,
        format!(
            "{passing}/{} distributions with every curve's Spearman >= 0.9 (min {min_rho:.3}); q=0.1 >= q=0.01 at {dominated}/{total} points",
            datasets.len()
        ),
    )
}

fn parse_relationship(artifact: &CsvArtifact) -> Vec<(String, f64, f64, f64)> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(artifact.contents.as_bytes());
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].to_string(), r[3].parse().unwrap(), r[4].parse().unwrap(), r[5].parse().unwrap())
        })
        .collect()
}

fn desk_ordering(result: &DistributionCountResult, k: usize) -> Outcome {
    let get = |m, mode| result.mape(k, m, mode).unwrap_or(f64::NAN);
    let ds_acc = get(ModelKind::DeepSampling, Mode::AccuracyPrediction);
    let lr_acc = get(ModelKind::LinearRegression, Mode::AccuracyPrediction);
    let ds_ratio = get(ModelKind::DeepSampling, Mode::RatioEstimation);
    let lr_ratio = get(ModelKind::LinearRegression, Mode::RatioEstimation);
    outcome(
        ds_acc < lr_acc && ds_ratio < lr_ratio && ds_acc <= 0.15,
        format!(
            "accuracy DS {ds_acc:.4} vs LR {lr_acc:.4}; ratio DS {ds_ratio:.4} vs LR {lr_ratio:.4}"
        ),
    )
}

fn family_trend(result: &DistributionCountResult, k: usize) -> Outcome {
    let one = result.mape(1, ModelKind::DeepSampling, Mode::AccuracyPrediction).unwrap_or(f64::NAN);
    let all = result.mape(k, ModelKind::DeepSampling, Mode::AccuracyPrediction).unwrap_or(f64::NAN);
    let ks: Vec<usize> = {
        let mut v: Vec<usize> = result.records.iter().map(|r| r.k).collect();
        v.dedup();
        v
    };
    outcome(
        one > all && ks == (1..=k).collect::<Vec<_>>(),
        format!("DS accuracy MAPE with 1 family {one:.4} vs {k} families {all:.4}"),
    )
}

/// Supplementary probes on the all-family models: a held-out uniform
/// dataset, and the ratio model at alpha = 1 versus alpha = 0.5.
fn held_out_probes(result: &DistributionCountResult, config: &Config) -> Outcome {
    let [acc_model, ratio_model] = &result.final_models[..] else {
        return outcome(false, "missing final models".into());
    };
    let data: PointSet = generate(&DistributionSpec::Uniform, config.data.n, Seed(77)).unwrap();
    let hist = build_histogram(&data, acc_model.h).unwrap();
    let measured = measure_mean_accuracy(&data, 0.02, 0.05, 50, 3, Seed(78)).unwrap();
    let predicted = acc_model
        .predict(&TabularFeatures::for_accuracy(0.05, 0.02).unwrap(), &hist)
        .unwrap();
    let at_one = estimate_sampling_ratio(ratio_model, 0.05, 1.0, &hist).unwrap();
    let at_half = estimate_sampling_ratio(ratio_model, 0.05, 0.5, &hist).unwrap();
    outcome(
        (predicted - measured).abs() <= 0.15 && at_one > at_half,
        format!(
            "uniform q=0.05 sigma=0.02: predicted {predicted:.4} vs measured {measured:.4}; ratio at alpha=1 {at_one:.4} > alpha=0.5 {at_half:.4}"
        ),
    )
}

/// Runs the experiments behind criteria 5-8 and returns their artifacts.
struct DeskRun {
    relationship: CsvArtifact,
    table: String,
    distribution_count: DistributionCountResult,
    resolution: aqp_core::pipeline::HistogramResolutionResult,
}

fn main() -> ExitCode {
    let mut suite = Suite { failures: 0 };
    suite.run("1", "accuracy metric oracle", secs(1), accuracy_oracle);
    suite.run("2", "grid index vs linear scan", secs(10), selectivity_oracle);
    suite.run("3", "estimator sanity", secs(30), estimator_sanity);
    suite.run("4", "gradient correctness", secs(30), gradient_correctness);

    let config = Config::default();
    let mut relationship = None;
    suite.run("5", "sigma/accuracy relationship trends", secs(300), || {
        let r = experiment_relationship(&config).expect("relationship experiment");
        let o = relationship_check(&parse_relationship(&r.artifact));
        relationship = Some(r.artifact);
        o
    });

    let mut corpus = None;
    let mut counts = None;
    suite.run("6", "DS beats LR on the desk corpus", secs(600), || {
        let c = build_corpus(&config).expect("desk corpus");
        let r = experiment_distribution_count(&c).expect("distribution-count experiment");
        let k = r.records.iter().map(|r| r.k).max().unwrap_or(0);
        let o = desk_ordering(&r, k);
        let o = outcome(o.pass && c.table.len() == 640, format!("{} rows; {}", c.table.len(), o.detail));
        corpus = Some(c);
        counts = Some(r);
        o
    });
    let counts = counts.expect("criterion 6 ran");
    let corpus = corpus.expect("criterion 6 ran");
    let k = counts.records.iter().map(|r| r.k).max().unwrap_or(0);
    suite.run("7", "more training families, lower error", secs(900), || family_trend(&counts, k));
    suite.run("7+", "held-out probes", secs(60), || held_out_probes(&counts, &config));

    let mut resolution = None;
    suite.run("8", "histogram resolution trends", secs(1200), || {
        let r = experiment_histogram_resolution(&corpus).expect("histogram-resolution experiment");
        let m = |h| r.record(h).map_or(f64::NAN, |x| x.test_mape);
        let t = |h| r.record(h).map_or(f64::NAN, |x| x.training_seconds);
        let times = [t(8), t(16), t(32), t(64)];
        let timing_ok = times.windows(2).all(|w| w[1] >= w[0]);
        let o = outcome(
            m(1) > m(8) && m(16) <= 2.0 * m(64) && timing_ok,
            format!(
                "MAPE h=1 {:.4}, h=8 {:.4}, h=16 {:.4}, h=64 {:.4}; seconds h=8..64 {:.1}/{:.1}/{:.1}/{:.1}",
                m(1), m(8), m(16), m(64), times[0], times[1], times[2], times[3]
            ),
        );
        resolution = Some(r);
        o
    });

    let first = DeskRun {
        relationship: relationship.expect("criterion 5 ran"),
        table: corpus.table.to_csv_string().expect("table csv"),
        distribution_count: counts,
        resolution: resolution.expect("criterion 8 ran"),
    };
    suite.run("9", "byte-identical rerun", secs(3600), || {
        let again_rel = experiment_relationship(&config).expect("relationship rerun").artifact;
        let c = build_corpus(&config).expect("corpus rerun");
        let again_counts = experiment_distribution_count(&c).expect("distribution-count rerun");
        let again_res = experiment_histogram_resolution(&c).expect("histogram-resolution rerun");
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let pairs = [
            (&first.relationship, &again_rel),
            (&first.distribution_count.artifact, &again_counts.artifact),
            (&first.resolution.artifact, &again_res.artifact),
        ];
        let mut identical = 0;
        for (a, b) in pairs {
            let pa = a.write_to(dir_a.path()).unwrap();
            let pb = b.write_to(dir_b.path()).unwrap();
            if std::fs::read(pa).unwrap() == std::fs::read(pb).unwrap() {
                identical += 1;
            }
        }
        let table_same = first.table == c.table.to_csv_string().unwrap();
        outcome(
            identical == pairs.len() && table_same,
            format!("{identical}/{} experiment CSVs identical; training table identical: {table_same}", pairs.len()),
        )
    });

    if suite.failures == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {} failing", suite.failures);
        ExitCode::FAILURE
    }
}
