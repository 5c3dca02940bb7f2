//! Acceptance checks: one PASS/FAIL line per criterion, each with its time
//! budget. Exits nonzero if any check fails or overruns.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mxscale::accum::ExactSum;
use mxscale::scaling::{
    block_sse_exact, hierarchical_wrap, scale_abs_max, scale_brute_force, scale_four_over_six,
    scale_prevent_zero, FP4_MAX,
};
use mxscale::study::{
    region_exemplars, run_histograms, run_sweep, sample_gaussian, sweep_csv, sweep_samples,
    validate_regions, BinKind, HistogramRow, Region, StudyConfig, SweepRow,
};
use mxscale::{quantize_tensor, round_to_format, CodeValue, FormatSpec, ScaleKind, ScaleStrategy};

type Outcome = Result<String, String>;

struct Check {
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let checks = [
        Check {
            name: "format tables",
            budget: Some(Duration::from_secs(1)),
            run: format_tables,
        },
        Check {
            name: "rounding matches linear-scan oracle",
            budget: Some(Duration::from_secs(5)),
            run: rounding_oracle,
        },
        Check {
            name: "region A: prevent-zero removes the underflow bump",
            budget: Some(Duration::from_secs(10)),
            run: region_a,
        },
        Check {
            name: "region B: block-size paradox and its 4-over-6 resolution",
            budget: Some(Duration::from_secs(30)),
            run: region_b,
        },
        Check {
            name: "brute-force error non-increasing as blocks shrink",
            budget: Some(Duration::from_secs(60)),
            run: brute_monotone,
        },
        Check {
            name: "dominance chain brute <= 4o6 <= abs-max",
            budget: Some(Duration::from_secs(60)),
            run: dominance,
        },
        Check {
            name: "region B histograms",
            budget: Some(Duration::from_secs(30)),
            run: region_b_histograms,
        },
        Check {
            name: "hierarchical scaling never clips scales",
            budget: Some(Duration::from_secs(10)),
            run: hierarchical,
        },
        Check {
            name: "sweep output independent of thread count",
            budget: None,
            run: determinism,
        },
    ];
    let mut failed = 0;
    for c in &checks {
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let over = c.budget.is_some_and(|b| elapsed > b);
        let budget = c
            .budget
            .map_or("none".to_string(), |b| format!("{}s", b.as_secs()));
        let (tag, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => ("FAIL", format!("over budget; {d}")),
            (Err(d), _) => ("FAIL", d.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!(
            "[{tag}] {} ({:.2}s, budget {budget}): {detail}",
            c.name,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "{} of {} acceptance checks passed",
        checks.len() - failed,
        checks.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn format_tables() -> Outcome {
    let mags: Vec<f64> = FormatSpec::E2M1
        .enumerate_values()
        .iter()
        .map(|c| c.value)
        .filter(|v| *v >= 0.0)
        .collect();
    let want = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];
    ensure(mags == want, || format!("E2M1 magnitudes {mags:?}"))?;
    let min = FormatSpec::E4M3.min_positive();
    ensure(min == 2f64.powi(-9), || format!("E4M3 min positive {min}"))?;
    Ok(format!("E2M1 magnitudes {want:?}, E4M3 min positive 2^-9"))
}

fn oracle(values: &[CodeValue], v: f64) -> CodeValue {
    let mut best = values[0];
    let mut best_d = (v - best.value).abs();
    for &cv in &values[1..] {
        let d = (v - cv.value).abs();
        if d < best_d || (d == best_d && cv.code % 2 == 0 && best.code % 2 == 1) {
            best = cv;
            best_d = d;
        }
    }
    best
}

fn rounding_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut total = 0;
    for spec in FormatSpec::BUILTIN {
        let values = spec.enumerate_values();
        let mids: Vec<f64> = values
            .windows(2)
            .map(|w| (w[0].value + w[1].value) / 2.0)
            .collect();
        let lo = spec.min_positive().log2() - 3.0;
        let hi = spec.max_value().log2() + 3.0;
        for i in 0..100_000 {
            let v = match i % 4 {
                0 => mids[rng.gen_range(0..mids.len())],
                1 => values[rng.gen_range(0..values.len())].value,
                _ => {
                    let m = rng.gen_range(lo..hi).exp2();
                    if rng.gen::<bool>() {
                        -m
                    } else {
                        m
                    }
                }
            };
            let got = round_to_format(&spec, v).map_err(|e| e.to_string())?;
            let want = oracle(&values, v);
            ensure(got.value == want.value, || {
                format!(
                    "{}: round({v:e}) = {} but oracle gives {}",
                    spec.name, got.value, want.value
                )
            })?;
            total += 1;
        }
    }
    Ok(format!("{total} values across 4 formats agree exactly"))
}

fn region_sweep(sigma: f64, strategies: Vec<ScaleKind>) -> Result<Vec<SweepRow>, String> {
    let config = StudyConfig {
        sigmas: vec![sigma],
        strategies,
        ..StudyConfig::default()
    };
    run_sweep(&config).map_err(|e| e.to_string())
}

fn cell(rows: &[SweepRow], kind: ScaleKind, bs: usize) -> &SweepRow {
    rows.iter()
        .find(|r| r.strategy == kind && r.block_size == bs)
        .expect("cell present")
}

fn validated() -> Result<mxscale::study::RegionExemplars, String> {
    validate_regions(&region_exemplars(), &[4, 8, 16, 32], 1 << 16, 0).map_err(|e| e.to_string())
}

fn region_a() -> Outcome {
    let ex = validated()?;
    let rows = region_sweep(ex.a, vec![ScaleKind::AbsMax, ScaleKind::PreventZero])?;
    let mut worst_ratio: f64 = 0.0;
    for bs in [4, 8, 16, 32] {
        let abs = cell(&rows, ScaleKind::AbsMax, bs);
        let pz = cell(&rows, ScaleKind::PreventZero, bs);
        ensure(pz.mse < 0.5 * abs.mse, || {
            format!("bs={bs}: pz {} vs abs {}", pz.mse, abs.mse)
        })?;
        ensure((0.9..=1.1).contains(&abs.mse_over_variance), || {
            format!("bs={bs}: abs-max mse/var {}", abs.mse_over_variance)
        })?;
        worst_ratio = worst_ratio.max(pz.mse / abs.mse);
    }
    let zf = cell(&rows, ScaleKind::AbsMax, 32).zero_scale_fraction;
    Ok(format!(
        "sigma_A=2^{}, abs-max zero-scale fraction {zf:.3} at bs=32, worst pz/abs {worst_ratio:.3}, abs mse/var {:.3}",
        ex.a.log2(),
        cell(&rows, ScaleKind::AbsMax, 4).mse_over_variance
    ))
}

fn region_b() -> Outcome {
    let ex = validated()?;
    let rows = region_sweep(ex.b, vec![ScaleKind::AbsMax, ScaleKind::FourOverSix])?;
    let abs4 = cell(&rows, ScaleKind::AbsMax, 4);
    let abs32 = cell(&rows, ScaleKind::AbsMax, 32);
    let fos4 = cell(&rows, ScaleKind::FourOverSix, 4);
    let fos32 = cell(&rows, ScaleKind::FourOverSix, 32);
    let paradox = abs4.mse / abs32.mse - 1.0;
    ensure(paradox >= 0.05, || {
        format!("abs-max bs=4 exceeds bs=32 by only {:.1}%", 100.0 * paradox)
    })?;
    ensure(fos4.mse <= fos32.mse, || {
        format!("4o6 bs=4 {} > bs=32 {}", fos4.mse, fos32.mse)
    })?;
    let explained = (abs4.clip_mse - fos4.clip_mse) / (abs4.mse - fos4.mse);
    ensure(explained >= 0.5, || {
        format!("clipping explains {:.1}% of the excess", 100.0 * explained)
    })?;
    Ok(format!(
        "sigma_B=2^{}, paradox +{:.1}%, 4o6 bs4/bs32 {:.3}, clipping explains {:.1}%",
        ex.b.log2(),
        100.0 * paradox,
        fos4.mse / fos32.mse,
        100.0 * explained
    ))
}

fn brute_total(xs: &[f64], bs: usize) -> Result<ExactSum, String> {
    let s = ScaleStrategy::new(ScaleKind::BruteForce, FormatSpec::E4M3);
    Ok(quantize_tensor(xs, bs, &s)
        .map_err(|e| e.to_string())?
        .report
        .exact_total())
}

fn check_monotone(xs: &[f64], what: &str) -> Result<(), String> {
    let totals = [32, 16, 8, 4]
        .iter()
        .map(|&bs| brute_total(xs, bs))
        .collect::<Result<Vec<_>, _>>()?;
    for (w, bs) in totals.windows(2).zip([16, 8, 4]) {
        ensure(w[1] <= w[0], || {
            format!(
                "{what}: bs={bs} error {} exceeds coarser {}",
                w[1].to_f64(),
                w[0].to_f64()
            )
        })?;
    }
    Ok(())
}

fn brute_monotone() -> Outcome {
    let config = StudyConfig::default();
    for i in 0..config.sigmas.len() {
        check_monotone(
            &sweep_samples(&config, i),
            &format!("sigma=2^{:.3}", config.sigmas[i].log2()),
        )?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for t in 0..100u64 {
        let sigma = rng.gen_range(-24.0f64..4.0).exp2();
        let xs = sample_gaussian(1000 + t, 0, sigma, 4096);
        check_monotone(&xs, &format!("tensor {t}"))?;
    }
    Ok(format!(
        "{} sweep sigmas and 100 random tensors, exact comparison",
        config.sigmas.len()
    ))
}

fn dominance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut blocks = 0;
    let mut pz_checked = 0;
    for fmt in [FormatSpec::E4M3, FormatSpec::UE5M3, FormatSpec::E8M0] {
        for bs in [4usize, 8, 16, 32] {
            for _ in 0..10_000 {
                let sigma = rng.gen_range(-26.0f64..10.0).exp2();
                let block: Vec<f64> = (0..bs)
                    .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * sigma)
                    .collect();
                let err = |e: mxscale::Error| e.to_string();
                let abs = scale_abs_max(&block, FP4_MAX, &fmt).map_err(err)?;
                let fos = scale_four_over_six(&block, &fmt).map_err(err)?;
                let brute = scale_brute_force(&block, &fmt).map_err(err)?;
                let e = |s: f64| block_sse_exact(&block, s);
                ensure(
                    e(brute.value()) <= e(fos.value()) && e(fos.value()) <= e(abs.value()),
                    || format!("{} bs={bs}: chain broken on {block:?}", fmt.name),
                )?;
                if abs.value() != 0.0 {
                    let pz = scale_prevent_zero(&block, FP4_MAX, &fmt).map_err(err)?;
                    ensure(pz.scale.code == abs.scale.code, || {
                        format!("{} bs={bs}: prevent-zero changed a nonzero scale", fmt.name)
                    })?;
                    pz_checked += 1;
                }
                blocks += 1;
            }
        }
    }
    Ok(format!("{blocks} blocks over 3 scale formats x 4 block sizes; {pz_checked} prevent-zero comparisons"))
}

fn entry_fraction(rows: &[HistogramRow], kind: ScaleKind, bs: usize, mag: f64) -> f64 {
    let sel: Vec<&HistogramRow> = rows
        .iter()
        .filter(|r| {
            r.region == "B"
                && r.strategy == kind
                && r.block_size == bs
                && r.bin_kind == BinKind::Entry
        })
        .collect();
    let total: u64 = sel.iter().map(|r| r.count).sum();
    let hit: u64 = sel
        .iter()
        .filter(|r| r.bin_value == mag)
        .map(|r| r.count)
        .sum();
    hit as f64 / total as f64
}

fn region_b_histograms() -> Outcome {
    let ex = validated()?;
    let config = StudyConfig {
        sigmas: Region::ALL.iter().map(|&r| ex.sigma(r)).collect(),
        block_sizes: vec![4, 32],
        strategies: vec![ScaleKind::AbsMax, ScaleKind::FourOverSix],
        ..StudyConfig::default()
    };
    let rows = run_histograms(&config, &ex).map_err(|e| e.to_string())?;
    let abs6_4 = entry_fraction(&rows, ScaleKind::AbsMax, 4, 6.0);
    let abs6_32 = entry_fraction(&rows, ScaleKind::AbsMax, 32, 6.0);
    let fos6_4 = entry_fraction(&rows, ScaleKind::FourOverSix, 4, 6.0);
    let abs4_4 = entry_fraction(&rows, ScaleKind::AbsMax, 4, 4.0);
    let fos4_4 = entry_fraction(&rows, ScaleKind::FourOverSix, 4, 4.0);
    ensure(abs6_4 > abs6_32, || {
        format!("abs-max bin 6: bs4 {abs6_4} vs bs32 {abs6_32}")
    })?;
    ensure(fos6_4 < abs6_4, || {
        format!("bin 6 at bs4: 4o6 {fos6_4} vs abs {abs6_4}")
    })?;
    ensure(fos4_4 > abs4_4, || {
        format!("bin 4 at bs4: 4o6 {fos4_4} vs abs {abs4_4}")
    })?;
    Ok(format!(
        "abs bin6 bs4 {abs6_4:.3} > bs32 {abs6_32:.3}; at bs4 4o6 bin6 {fos6_4:.3} < {abs6_4:.3}, bin4 {fos4_4:.3} > {abs4_4:.3}"
    ))
}

fn hierarchical() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9001);
    let inner = ScaleStrategy::new(ScaleKind::AbsMax, FormatSpec::E4M3);
    let smax = FormatSpec::E4M3.max_value();
    let mut blocks = 0;
    for t in 0..100u64 {
        let peak = rng.gen_range(-6.0f64..=20.0).exp2();
        let mut xs = sample_gaussian(5000 + t, 0, 1.0, 4096);
        let amax = xs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        xs.iter_mut().for_each(|v| *v = *v / amax * peak);
        for bs in [4usize, 8, 16, 32] {
            let scales = hierarchical_wrap(&xs, bs, &inner).map_err(|e| e.to_string())?;
            for (chunk, r) in xs.chunks(bs).zip(&scales) {
                let bmax = chunk.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let wanted = (bmax / r.tensor_scale) / FP4_MAX;
                ensure(wanted <= smax, || {
                    format!("tensor {t} peak {peak:e} bs={bs}: block needs scale {wanted} > {smax}")
                })?;
                blocks += 1;
            }
        }
    }
    Ok(format!(
        "{blocks} blocks from 100 tensors with max|v| in [2^-6, 2^20]"
    ))
}

fn sweep_with_threads(config: &StudyConfig, threads: usize) -> Result<String, String> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| e.to_string())?;
    let rows = pool
        .install(|| run_sweep(config))
        .map_err(|e| e.to_string())?;
    Ok(sweep_csv(config, &rows))
}

fn determinism() -> Outcome {
    let config = StudyConfig::default();
    let one = sweep_with_threads(&config, 1)?;
    let four = sweep_with_threads(&config, 4)?;
    ensure(one == four, || {
        "default sweep differs between 1 and 4 threads".into()
    })?;

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |threads: &str, out: &str| -> Result<Vec<u8>, String> {
        let status = Command::new(env!("CARGO_BIN_EXE_mxscale"))
            .args([
                "sweep",
                "--seed",
                "7",
                "--strategies",
                "absmax,pz,4o6,brute",
                "--samples",
                "8192",
                "--threads",
                threads,
                "--out-dir",
                out,
            ])
            .current_dir(dir.path())
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || {
            String::from_utf8_lossy(&status.stderr).into_owned()
        })?;
        std::fs::read(dir.path().join(out).join("sweep_7.csv")).map_err(|e| e.to_string())
    };
    let a = run("1", "a")?;
    let b = run("4", "b")?;
    ensure(a == b, || "CLI sweep output differs between runs".into())?;
    Ok(format!(
        "default sweep ({} bytes) identical at 1 and 4 threads; CLI sweep identical across runs",
        one.len()
    ))
}
