//! Acceptance suite: one PASS/FAIL line per criterion. Exits non-zero if
//! any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use cib::data_io::{
    checkpoint_from_str, checkpoint_to_string, encode_idx, load_splits, metrics_to_csv, parse_idx,
    parse_metrics, Config, DecoderVariant, MetricsRow, NoiseModeKind, IDX_IMAGES_MAGIC,
    IDX_LABELS_MAGIC,
};
use cib::discrete_oracle::{
    corollary_check, decomposition_check, equivalence_scan, induced, info_report,
    optimal_product_surrogate, perturbation_search, random_encoder, random_joint,
    random_product_surrogate, DiscreteEncoder,
};
use cib::estimators::{
    bound_report, mixture_bound, ClassWeighting, EmbeddedDataset, EstimatorOptions, FormulaMode,
};
use cib::model::{
    evaluate_with_config, information_estimates, network_grad_check, sweep, train, Checkpoint,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Latent arities whose product is at most `max_outcomes`.
fn random_arities(rng: &mut ChaCha8Rng, max_outcomes: usize) -> Vec<usize> {
    loop {
        let coords = rng.gen_range(1..=3);
        let a: Vec<usize> = (0..coords).map(|_| rng.gen_range(2..=4)).collect();
        if a.iter().product::<usize>() <= max_outcomes {
            return a;
        }
    }
}

fn chain_rule() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let nx = rng.gen_range(1..=6);
        let ny = rng.gen_range(1..=3);
        let arities = random_arities(&mut rng, 16);
        let joint = random_joint(&mut rng, nx, ny);
        let enc = random_encoder(&mut rng, nx, &arities, 0.3).unwrap();
        let r = info_report(&joint, &enc).unwrap();
        worst = worst.max((r.i_xt - r.i_xt_given_y - r.i_yt).abs());
    }
    outcome(
        worst < 1e-12,
        format!("max residual {worst:.3e} over 1000 instances"),
    )
}

fn equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    let mut scans = 0;
    for _ in 0..100 {
        let nx = rng.gen_range(2..=6);
        let ny = rng.gen_range(2..=3);
        let arities = random_arities(&mut rng, 16);
        let joint = random_joint(&mut rng, nx, ny);
        let family: Vec<DiscreteEncoder> = (0..50)
            .map(|_| random_encoder(&mut rng, nx, &arities, 0.3).unwrap())
            .collect();
        for b in 1..=9 {
            let scan = equivalence_scan(&joint, &family, b as f64 / 10.0).unwrap();
            scans += 1;
            if !scan.coincide {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0,
        format!("{mismatches} of {scans} argmin comparisons differ"),
    )
}

fn decomposition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_any, mut worst_opt) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let nx = rng.gen_range(1..=6);
        let ny = rng.gen_range(1..=3);
        let arities = random_arities(&mut rng, 16);
        let joint = random_joint(&mut rng, nx, ny);
        let enc = random_encoder(&mut rng, nx, &arities, 0.3).unwrap();
        let sur = random_product_surrogate(&mut rng, ny, &arities);
        worst_any = worst_any.max(decomposition_check(&joint, &enc, &sur).unwrap().gap().abs());

        let ind = induced(&joint, &enc).unwrap();
        let opt = optimal_product_surrogate(&ind.t_given_y, &arities).unwrap();
        let d = decomposition_check(&joint, &enc, &opt).unwrap();
        let report = info_report(&joint, &enc).unwrap();
        let tc: f64 = joint
            .p_y()
            .iter()
            .zip(&report.tc_given_y)
            .map(|(p, t)| p * t)
            .sum();
        worst_opt = worst_opt.max(d.gap().abs()).max((d.kl_residual - tc).abs());
    }
    outcome(
        worst_any < 1e-12 && worst_opt < 1e-12,
        format!("max gap {worst_any:.3e} (random surrogates), {worst_opt:.3e} (optimal surrogate vs TC)"),
    )
}

fn corollary() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut worst_gap, mut worst_gain) = (0.0f64, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let nx = rng.gen_range(2..=6);
        let ny = rng.gen_range(1..=3);
        let arities = random_arities(&mut rng, 16);
        let enc = random_encoder(&mut rng, nx, &arities, 0.3).unwrap();
        let n = rng.gen_range(5..=40);
        // every class appears at least once
        let samples: Vec<(usize, usize)> = (0..n)
            .map(|i| {
                (
                    rng.gen_range(0..nx),
                    if i < ny { i } else { rng.gen_range(0..ny) },
                )
            })
            .collect();
        worst_gap = worst_gap.max(corollary_check(&samples, &enc).unwrap().gap().abs());
        worst_gain = worst_gain.max(
            perturbation_search(&samples, &enc, 0.01)
                .unwrap()
                .improvement(),
        );
    }
    outcome(
        worst_gap < 1e-10 && worst_gain <= 1e-10,
        format!("max |optimum - TC form| {worst_gap:.3e}; best perturbation gain {worst_gain:.3e}"),
    )
}

fn gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut all = true;
    for variant in [DecoderVariant::Softmax, DecoderVariant::NaiveBayes] {
        for mode in [NoiseModeKind::FixedSigma, NoiseModeKind::LearnedEta] {
            for seed in 0..3 {
                let r = network_grad_check(variant, mode, true, seed, 1e-5, 1e-5).unwrap();
                worst = worst.max(r.max_rel_error);
                all &= r.passed;
            }
        }
    }
    outcome(
        all,
        format!("max relative error {worst:.3e} (2-2-2, both heads, both noise modes)"),
    )
}

/// Direct double loop over `codes`, independent of the library kernels.
fn naive_bound(codes: &[Vec<f64>], sigma2: f64, eta2: f64, cited: bool) -> f64 {
    let n = codes.len() as f64;
    let d = codes[0].len() as f64;
    let v = eta2 + sigma2;
    let mut acc = 0.0;
    for fi in codes {
        let mut s = 0.0;
        for fj in codes {
            let sq: f64 = fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum();
            let dist = if cited { sq } else { sq.sqrt() };
            s += (-0.5 * dist / v).exp();
        }
        if cited {
            s /= n;
        }
        acc += s.ln();
    }
    -acc / n - d * (sigma2 / v).ln()
}

fn estimators() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let codes: Vec<Vec<f64>> = (0..256)
        .map(|_| {
            (0..3)
                .map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let labels: Vec<usize> = (0..256).map(|i| i % 3).collect();
    let (sigma2, eta2) = (0.3, 0.2);
    let data = EmbeddedDataset::new(codes.clone(), labels, sigma2, eta2).unwrap();
    let mut worst = 0.0f64;
    for (mode, cited) in [
        (FormulaMode::CitedSource, true),
        (FormulaMode::AsPrinted, false),
    ] {
        let got = mixture_bound(&data, mode).unwrap();
        worst = worst.max((got - naive_bound(&codes, sigma2, eta2, cited)).abs());
    }
    let single = EmbeddedDataset::new(codes, vec![0; 256], sigma2, eta2).unwrap();
    let opts = EstimatorOptions {
        weighting: ClassWeighting::Frequency,
        ..Default::default()
    };
    let report = bound_report(&single, opts).unwrap();
    let exact = report.aggregate == report.unconditional;
    outcome(
        worst < 1e-10 && exact,
        format!(
            "max deviation from naive reference {worst:.3e}; single-class aggregate exact: {exact}"
        ),
    )
}

fn desk_training() -> Outcome {
    let start = Instant::now();
    let config = Config::reference_gmm(1.0);
    let splits = load_splits(&config).unwrap();
    let a = train(&config, &splits).unwrap();
    let elapsed = start.elapsed();
    let b = train(&config, &splits).unwrap();
    let identical = metrics_to_csv(&a.metrics).unwrap() == metrics_to_csv(&b.metrics).unwrap();
    let test = evaluate_with_config(&a.network, &config, &splits.test).unwrap();
    let pass = test.accuracy >= 0.95
        && identical
        && config.optim.steps <= 2000
        && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "test accuracy {:.4} after {} steps in {:.1?}; reruns bit-identical: {identical}",
            test.accuracy, config.optim.steps, elapsed
        ),
    )
}

fn sweep_direction() -> Outcome {
    let config = Config::reference_gmm(1.0);
    let splits = load_splits(&config).unwrap();
    let bps = [0.0, 0.3, 1.0, 3.0, 10.0];
    let points = sweep(&config, &splits, &bps, 5).unwrap();
    let cond: Vec<f64> = points
        .iter()
        .map(|p| {
            information_estimates(&p.run.network, &splits.test, EstimatorOptions::default())
                .unwrap()
                .aggregate
        })
        .collect();
    let listing: Vec<String> = bps
        .iter()
        .zip(&cond)
        .map(|(b, c)| format!("{b}:{c:.3}"))
        .collect();
    outcome(
        cond[4] < cond[0],
        format!("I(X;T|Y) estimate by beta_prime {}", listing.join(" ")),
    )
}

fn formats() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pixels: Vec<u8> = (0..5 * 4 * 3).map(|_| rng.gen()).collect();
    let labels: Vec<u8> = (0..5).map(|_| rng.gen_range(0..10)).collect();
    let path = std::path::Path::new("memory");
    let img = encode_idx(IDX_IMAGES_MAGIC, &[5, 4, 3], &pixels).unwrap();
    let lbl = encode_idx(IDX_LABELS_MAGIC, &[5], &labels).unwrap();
    let img_back = parse_idx(&img, IDX_IMAGES_MAGIC, path).unwrap();
    let lbl_back = parse_idx(&lbl, IDX_LABELS_MAGIC, path).unwrap();
    let idx_ok = encode_idx(IDX_IMAGES_MAGIC, &img_back.dims, &img_back.data).unwrap() == img
        && encode_idx(IDX_LABELS_MAGIC, &lbl_back.dims, &lbl_back.data).unwrap() == lbl;

    let mut config = Config::reference_gmm(1.0);
    config.decoder.variant = DecoderVariant::Softmax;
    config.encoder.noise_mode = NoiseModeKind::LearnedEta;
    config.encoder.sigma2 = 1e-4;
    config.optim.steps = 25;
    let splits = load_splits(&config).unwrap();
    let run = train(&config, &splits).unwrap();
    let first = checkpoint_to_string(&Checkpoint::new(config, run.network)).unwrap();
    let second = checkpoint_to_string(&checkpoint_from_str(&first).unwrap()).unwrap();
    let ck_ok = first == second;

    let rows: Vec<MetricsRow> = (0..50)
        .map(|step| MetricsRow {
            step,
            cross_entropy: rng.gen::<f64>() * 3.0,
            kl_term: rng.gen::<f64>().powi(7) * 1e3,
            beta_prime: rng.gen(),
            total: -rng.gen::<f64>() / 7.0,
            accuracy: rng.gen(),
        })
        .collect();
    let metrics_ok = parse_metrics(&metrics_to_csv(&rows).unwrap()).unwrap() == rows;
    outcome(
        idx_ok && ck_ok && metrics_ok,
        format!("idx round-trip {idx_ok}; checkpoint byte-identical {ck_ok}; metrics exact {metrics_ok}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 chain-rule identity", chain_rule),
        ("2 IB/CIB argmin equivalence", equivalence),
        ("3 KL decomposition", decomposition),
        ("4 optimal product surrogate", corollary),
        ("5 gradient correctness", gradients),
        ("6 estimator fidelity", estimators),
        ("7 desk-scale training", desk_training),
        ("8 sweep direction", sweep_direction),
        ("9 formats", formats),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let o = run();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!(
            "{verdict} criterion {name}: {} [{:.2?}]",
            o.detail,
            start.elapsed()
        );
        if !o.pass {
            failed += 1;
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
