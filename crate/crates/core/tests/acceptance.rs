//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run all with `cargo test --test acceptance`; pass criterion numbers to
//! run a subset, e.g. `cargo test --test acceptance -- 4 7`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tomoseg_core::attenuation::{self, MineralTable};
use tomoseg_core::binarize::{self, BinarizeParams, SauvolaParams};
use tomoseg_core::descriptors::{self, Pixel};
use tomoseg_core::mergegraph;
use tomoseg_core::metrics;
use tomoseg_core::neuralnet::{self, Loss, MlpModel, Sample, TrainConfig};
use tomoseg_core::phantom::{self, PhantomOutput, PhantomSpec};
use tomoseg_core::prefilter::{self, NlmParams};
use tomoseg_core::register::{self, RegisterOptions};
use tomoseg_core::watershed::{self, WatershedParams};
use tomoseg_core::{BinaryPlane, BinaryVolume, Dims, Grid2, Grid3, LabelVolume, ScalarVolume};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_scalar(d: Dims, hi: u16, r: &mut ChaCha8Rng) -> ScalarVolume {
    Grid3::from_vec(d, 1.0, (0..d.len()).map(|_| r.gen_range(0..=hi)).collect()).unwrap()
}

// 1. OLS on the published mineral table.
fn table_regression() -> Outcome {
    let samples = attenuation::table_samples(&MineralTable::builtin());
    let fit = attenuation::fit_attenuation(&samples, false).unwrap();
    let mu = attenuation::mu_only_fit(&samples).unwrap();
    let quartz = samples.iter().find(|s| s.name == "quartz").unwrap();
    let pred = fit.predict(quartz.mean_gray);
    let slope_ok = (fit.slope / 3.9e-5 - 1.0).abs() <= 0.10;
    let icpt_ok = (fit.intercept + 0.17).abs() <= 0.03;
    let quartz_ok = (pred - 0.582).abs() <= 0.005;
    let r2_ok = mu.r_squared < fit.r_squared;
    outcome(
        slope_ok && icpt_ok && quartz_ok && r2_ok && samples.len() == 5,
        format!(
            "slope {:.4e}, intercept {:.4}, quartz {:.4} (true {:.3}), R2 {:.4} vs mu-only {:.4}",
            fit.slope,
            fit.intercept,
            pred,
            quartz.rho_mu(),
            fit.r_squared,
            mu.r_squared
        ),
    )
}

/// Weighted average over every voxel of the volume with Gaussian patch
/// distances, out-of-grid patch terms ignored.
fn nlm_brute_force(vol: &ScalarVolume, h: f64, sigma: f64, patch: i64) -> Vec<u16> {
    let d = vol.dims();
    let g: Vec<f64> = (-patch..=patch).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let gs: f64 = g.iter().sum();
    let val = |x: i64, y: i64, z: i64| vol.get_checked(x, y, z).map(|&v| v as f64);
    let mut out = Vec::with_capacity(d.len());
    for i in 0..d.len() {
        let (x, y, z) = d.coords(i);
        let (x, y, z) = (x as i64, y as i64, z as i64);
        let (mut zn, mut acc) = (0.0, 0.0);
        for j in 0..d.len() {
            let (qx, qy, qz) = d.coords(j);
            let (qx, qy, qz) = (qx as i64, qy as i64, qz as i64);
            let mut dist = 0.0;
            for a in -patch..=patch {
                for b in -patch..=patch {
                    for c in -patch..=patch {
                        if let (Some(u), Some(v)) = (val(x + a, y + b, z + c), val(qx + a, qy + b, qz + c)) {
                            let w = g[(a + patch) as usize] * g[(b + patch) as usize] * g[(c + patch) as usize] / (gs * gs * gs);
                            dist += w * (u - v) * (u - v);
                        }
                    }
                }
            }
            let w = (-dist / (h * h)).exp();
            zn += w;
            acc += w * *vol.at(j) as f64;
        }
        out.push((acc / zn).round().clamp(0.0, 65535.0) as u16);
    }
    out
}

// 2. NLM against the brute-force weighted average.
fn nlm_exactness() -> Outcome {
    let mut r = rng(2);
    let mut mismatched = 0;
    for _ in 0..20 {
        let vol = random_scalar(Dims::cube(5), 60000, &mut r);
        let h = r.gen_range(2000.0..20000.0);
        let p = NlmParams {
            h,
            sigma: 1.0,
            patch_radius: 1,
            search_radius: 5,
        };
        let fast = prefilter::nonlocal_means(&vol, &p).unwrap();
        let slow = nlm_brute_force(&vol, h, 1.0, 1);
        mismatched += fast.data().iter().zip(&slow).filter(|(a, b)| a != b).count();
    }
    outcome(mismatched == 0, format!("{mismatched} of 2500 voxels differ"))
}

// 3. Sauvola against direct window statistics.
fn sauvola_exactness() -> Outcome {
    let mut r = rng(3);
    let (mut worst, mut flips) = (0.0f64, 0usize);
    for _ in 0..20 {
        let d = Dims::cube(7);
        let vol = random_scalar(d, 65535, &mut r);
        let p = SauvolaParams {
            window_radius: r.gen_range(1..=4),
            k: r.gen_range(0.2..=0.5),
            r: 32768.0,
        };
        let t = binarize::sauvola_thresholds(&vol, &p).unwrap();
        let b = binarize::sauvola_binarize(&vol, &p).unwrap();
        let w = p.window_radius as i64;
        for i in 0..d.len() {
            let (x, y, z) = d.coords(i);
            let mut vals = Vec::new();
            for qz in z as i64 - w..=z as i64 + w {
                for qy in y as i64 - w..=y as i64 + w {
                    for qx in x as i64 - w..=x as i64 + w {
                        if let Some(&v) = vol.get_checked(qx, qy, qz) {
                            vals.push(v as f64);
                        }
                    }
                }
            }
            let n = vals.len() as f64;
            let m = vals.iter().sum::<f64>() / n;
            let s = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
            let expect = m * (1.0 + p.k * (s / p.r - 1.0));
            worst = worst.max((t[i] - expect).abs() / expect.abs().max(1e-300));
            flips += (*b.at(i) != (*vol.at(i) as f64 >= expect)) as usize;
        }
    }
    outcome(
        worst <= 1e-9 && flips == 0,
        format!("max relative threshold error {worst:.2e}, {flips} differing voxels"),
    )
}

fn merge_phantom(seed: u64) -> PhantomSpec {
    PhantomSpec {
        dims: Dims::cube(200),
        spacing: 14.0,
        count: 50,
        size_range: (315.0, 500.0),
        elongated_fraction: 0.4,
        elongated_aspect: (2.5, 3.5),
        waviness: 0.35,
        exponent_range: (2.0, 3.0),
        noise_std: 1500.0,
        ring_amplitude: 0.02,
        background: 2000.0,
        sections: 0,
        max_attempts: 2000,
        gap: 0,
        seed,
        ..PhantomSpec::default()
    }
}

struct Segmented {
    out: PhantomOutput,
    regions: LabelVolume,
    graph: mergegraph::RegionGraph,
    features: Vec<mergegraph::EdgeFeatures>,
}

fn segment_phantom(seed: u64) -> Segmented {
    let out = phantom::generate(&merge_phantom(seed), &MineralTable::builtin()).unwrap();
    let nlm = NlmParams {
        search_radius: 2,
        ..NlmParams::estimated_for(&out.gray)
    };
    let den = prefilter::nonlocal_means(&out.gray, &nlm).unwrap();
    let bin = binarize::binarize(&den, &BinarizeParams::default()).unwrap();
    let regions = watershed::segment(&bin, &WatershedParams::default()).unwrap();
    let graph = mergegraph::build_region_graph(&regions);
    let grad = mergegraph::sobel_gradient_magnitude(&den);
    let features = mergegraph::extract_edge_features(&graph, &den, &grad, &regions).unwrap();
    Segmented {
        out,
        regions,
        graph,
        features,
    }
}

// 4. Oversegmentation and its repair by the trained merge classifier.
fn merge_repair() -> Outcome {
    let train = segment_phantom(2);
    let ds = phantom::edge_training_set(&train.out.labels, &train.regions, &train.graph, &train.features).unwrap();
    let samples: Vec<Sample> = ds
        .records
        .iter()
        .map(|r| Sample::new(r.features.to_vec(), r.label.unwrap() as f64))
        .collect();
    let gs = neuralnet::grid_search(&samples, &neuralnet::DEFAULT_GRID, &TrainConfig::default()).unwrap();

    let test = segment_phantom(1);
    let elongated = test.out.particles.iter().filter(|p| p.aspect() >= 2.5).count();
    let raw = metrics::region_count(&test.regions);
    let xs: Vec<Vec<f64>> = test.features.iter().map(|f| f.to_vec()).collect();
    let w = gs.model.predict_many(&xs).unwrap();
    let merged = mergegraph::merge_regions(&test.regions, &test.graph, &w, 0.5).unwrap();
    let count = metrics::region_count(&merged);
    let ari = metrics::foreground_ari(&test.out.labels, &merged).unwrap();
    let n = test.out.particles.len();
    let pass = n == 50
        && elongated * 10 >= 3 * n
        && raw as f64 >= 1.15 * n as f64
        && (count as f64 - n as f64).abs() <= 0.1 * n as f64
        && ari >= 0.90;
    outcome(
        pass,
        format!(
            "{n} particles ({elongated} with aspect >= 2.5), watershed {raw} regions, merged {count}, ARI {ari:.4}; training edges {}+/{}-, hidden {}",
            ds.positives(),
            ds.negatives(),
            gs.best_m
        ),
    )
}

// 5. Backpropagation against central differences.
fn gradient_correctness() -> Outcome {
    let mut r = rng(5);
    let mut worst = [0.0f64; 2];
    for _ in 0..10 {
        let d = r.gen_range(1..=18);
        let m = r.gen_range(1..=20);
        let model = MlpModel::random(d, m, &mut r);
        let n = r.gen_range(1..=32);
        let data: Vec<Sample> = (0..n)
            .map(|_| Sample::new((0..d).map(|_| r.gen_range(-2.0..2.0)).collect(), r.gen_range(0..=1) as f64))
            .collect();
        for (k, loss) in [Loss::CrossEntropy, Loss::SumSquares].into_iter().enumerate() {
            let e = neuralnet::gradient_check(&model, &data, loss, 1e-5, 1e-8).unwrap();
            worst[k] = worst[k].max(e);
        }
    }
    outcome(
        worst.iter().all(|&e| e < 1e-4),
        format!("max relative error: cross entropy {:.2e}, squared error {:.2e}", worst[0], worst[1]),
    )
}

fn shape(pred: impl Fn(i64, i64) -> bool, reach: i64) -> Vec<Pixel> {
    let mut px = Vec::new();
    for y in -reach..=reach {
        for x in -reach..=reach {
            if pred(x, y) {
                px.push((x + reach, y + reach));
            }
        }
    }
    px
}

fn rect(w: i64, h: i64) -> Vec<Pixel> {
    (0..h).flat_map(|y| (0..w).map(move |x| (x, y))).collect()
}

// 6. Descriptors of shapes with known values.
fn descriptor_analytics() -> Outcome {
    use std::f64::consts::PI;
    let disk = |r: i64| shape(move |x, y| x * x + y * y <= r * r, r);
    let row = |px: &[Pixel]| descriptors::describe_particle(1, px, 1.0).0;
    let d30 = row(&disk(30));
    let r20 = row(&rect(20, 10));
    let r30 = row(&rect(30, 10));
    let perim_err = (d30.perimeter / (2.0 * PI * 30.0) - 1.0).abs();
    let width_err = (r20.mean_width / (2.0 * 30.0 / PI) - 1.0).abs();
    let elong_err = (r30.elongation * 3.0 - 1.0).abs();
    let convex: Vec<(&str, Vec<Pixel>)> = vec![
        ("20x10", rect(20, 10)),
        ("30x10", rect(30, 10)),
        ("5x40", rect(5, 40)),
        ("square 25", rect(25, 25)),
        ("disk 100", disk(100)),
        ("diamond 20", shape(|x, y| x.abs() + y.abs() <= 20, 20)),
    ];
    let worst_convex = convex
        .iter()
        .map(|(n, px)| (*n, row(px).convexity))
        .fold(("", f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    let pass = perim_err <= 0.02
        && d30.sphericity >= 0.95
        && d30.elongation >= 0.95
        && width_err <= 0.02
        && elong_err <= 0.05
        && worst_convex.1 >= 0.98;
    outcome(
        pass,
        format!(
            "disk r=30 perimeter error {:.2}%, sphericity {:.4}, elongation {:.4}; 20x10 mean width error {:.2}%; 30x10 elongation {:.4}; lowest convexity {:.4} ({})",
            100.0 * perim_err,
            d30.sphericity,
            d30.elongation,
            100.0 * width_err,
            r30.elongation,
            worst_convex.1,
            worst_convex.0
        ),
    )
}

fn brute_translation(vol: &BinaryVolume, plane: &BinaryPlane) -> ([i64; 3], u64) {
    let d = vol.dims();
    let mut best = (0u64, [i64::MAX; 3]);
    for x1 in -(plane.nx() as i64 - 1)..d.nx as i64 {
        for x2 in -(plane.ny() as i64 - 1)..d.ny as i64 {
            for x3 in 0..d.nz as i64 {
                let mut n = 0;
                for v in 0..plane.ny() {
                    for u in 0..plane.nx() {
                        if plane.data()[u + plane.nx() * v]
                            && vol.get_checked(x1 + u as i64, x2 + v as i64, x3) == Some(&true)
                        {
                            n += 1;
                        }
                    }
                }
                let s = [x1, x2, x3];
                if n > best.0 || (n == best.0 && s < best.1) {
                    best = (n, s);
                }
            }
        }
    }
    (best.1, best.0)
}

// 7. Section registration on phantoms and exact translation search.
fn registration_recovery() -> Outcome {
    let table = MineralTable::builtin();
    let mut recovered = 0;
    let mut misses = Vec::new();
    for i in 0..10u64 {
        let spacing = 20.0;
        let spec = PhantomSpec {
            dims: Dims::cube(128),
            spacing,
            count: 40,
            sections: 1,
            max_attempts: 3000,
            mla_spacing: spacing / 4.0,
            seed: 100 + i,
            ..PhantomSpec::default()
        };
        let out = phantom::generate(&spec, &table).unwrap();
        let s = &out.sections[0];
        let mask = phantom::section_mask(&s.plane, spacing, s.size).unwrap();
        let res = register::register_section(&out.labels.foreground(), &mask, &RegisterOptions::default()).unwrap();
        let t_ok = (0..3).all(|k| (res.transform.translation[k] - s.transform.translation[k]).abs() <= 1.0);
        let a_ok = (0..3).all(|k| (res.transform.angles[k] - s.transform.angles[k]).to_degrees().abs() <= 1.0);
        if t_ok && a_ok {
            recovered += 1;
        } else {
            misses.push(100 + i);
        }
    }
    let mut r = rng(7);
    let mut exact = 0;
    let instances = 20;
    for _ in 0..instances {
        let d = Dims::cube(24);
        let p = r.gen_range(0.2..0.6);
        let vol = Grid3::from_vec(d, 1.0, (0..d.len()).map(|_| r.gen_bool(p)).collect()).unwrap();
        let plane = Grid2::from_vec(12, 12, 1.0, (0..144).map(|_| r.gen_bool(p)).collect()).unwrap();
        let fast = register::best_translation(&vol, &plane).unwrap();
        exact += ((fast.shift, fast.overlap) == brute_translation(&vol, &plane)) as usize;
    }
    outcome(
        recovered >= 9 && exact == instances,
        format!("{recovered}/10 phantoms recovered (misses {misses:?}); {exact}/{instances} translation searches equal brute force"),
    )
}

// 8. Registration, calibration on one section, validation on the other.
fn end_to_end_attenuation() -> Outcome {
    let table = MineralTable::builtin();
    let spacing = 20.0;
    let spec = PhantomSpec {
        dims: Dims::cube(128),
        spacing,
        count: 40,
        sections: 2,
        max_attempts: 3000,
        mla_spacing: spacing / 4.0,
        seed: 8,
        ..PhantomSpec::default()
    };
    let out = phantom::generate(&spec, &table).unwrap();
    let bin = binarize::binarize(&out.gray, &BinarizeParams::default()).unwrap();
    let transforms: Vec<_> = out
        .sections
        .iter()
        .map(|s| {
            let mask = phantom::section_mask(&s.plane, spacing, s.size).unwrap();
            register::register_section(&bin, &mask, &RegisterOptions::default()).unwrap()
        })
        .collect();
    let (samples, _) = attenuation::section_samples(&out.gray, &transforms[0].transform, &out.sections[0].plane, &table).unwrap();
    let model = attenuation::fit_attenuation(&samples, false).unwrap();
    let report = attenuation::validate_section(&out.gray, &model, &transforms[1].transform, &out.sections[1].plane, &table).unwrap();
    let slope_err = (model.slope / phantom::INSTRUMENT_SLOPE - 1.0).abs();
    let worst = report.max_relative_error();
    outcome(
        slope_err <= 0.03 && worst <= 0.05 && report.rows.len() >= 3,
        format!(
            "slope {:.4e} ({:.2}% off), held-out minerals {}, max relative error {:.2}%; registration overlaps {:.3}/{:.3}",
            model.slope,
            100.0 * slope_err,
            report.rows.len(),
            100.0 * worst,
            transforms[0].normalized_overlap,
            transforms[1].normalized_overlap
        ),
    )
}

fn blob_mask(d: Dims, r: &mut ChaCha8Rng) -> BinaryVolume {
    let balls: Vec<([f64; 3], f64)> = (0..r.gen_range(1..8))
        .map(|_| {
            (
                [r.gen_range(0.0..d.nx as f64), r.gen_range(0.0..d.ny as f64), r.gen_range(0.0..d.nz as f64)],
                r.gen_range(1.0..5.0),
            )
        })
        .collect();
    let noise = r.gen_range(0.0..0.2);
    let data = (0..d.len())
        .map(|i| {
            let (x, y, z) = d.coords(i);
            let inside = balls.iter().any(|(c, rad)| {
                (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2) <= rad * rad
            });
            inside ^ r.gen_bool(noise)
        })
        .collect();
    Grid3::from_vec(d, 1.0, data).unwrap()
}

// 9. Opening, merge monotonicity and thread-count independence.
fn morphology_and_graph_properties() -> Outcome {
    let mut r = rng(9);
    let mut opening_bad = 0;
    for _ in 0..50 {
        let mask = blob_mask(Dims::new(14, 12, 10), &mut r);
        let radius = r.gen_range(1..=2);
        let once = binarize::morphological_opening(&mask, radius).unwrap();
        let twice = binarize::morphological_opening(&once, radius).unwrap();
        let anti = once.data().iter().zip(mask.data()).all(|(&o, &m)| !o || m);
        opening_bad += (once != twice || !anti) as usize;
    }
    let mut monotone_bad = 0;
    for _ in 0..20 {
        let n = r.gen_range(2..30u32);
        let pairs: Vec<(u32, u32)> = (0..r.gen_range(1..60))
            .map(|_| {
                let a = r.gen_range(1..=n);
                let b = r.gen_range(1..=n);
                (a.min(b), a.max(b))
            })
            .filter(|(a, b)| a != b)
            .collect();
        let w: Vec<f64> = pairs.iter().map(|_| r.gen_range(0.0..1.0)).collect();
        let mut lambdas: Vec<f64> = (0..6).map(|_| r.gen_range(0.0..1.0)).collect();
        lambdas.sort_by(f64::total_cmp);
        let parts: Vec<Vec<u32>> = lambdas
            .iter()
            .map(|&l| mergegraph::merge_components(n, &pairs, &w, l).unwrap())
            .collect();
        for k in 1..parts.len() {
            let (coarse, fine) = (&parts[k - 1], &parts[k]);
            for a in 1..=n as usize {
                for b in 1..=n as usize {
                    if fine[a] == fine[b] && coarse[a] != coarse[b] {
                        monotone_bad += 1;
                    }
                }
            }
        }
    }
    let seg = segment_phantom_small();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| watershed::segment(&seg, &WatershedParams::default()).unwrap())
    };
    let (one, eight) = (run(1), run(8));
    let identical = one == eight;
    outcome(
        opening_bad == 0 && monotone_bad == 0 && identical,
        format!(
            "opening violations {opening_bad}/50, monotonicity violations {monotone_bad}, watershed 1 vs 8 threads identical: {identical} ({} regions)",
            one.max_label()
        ),
    )
}

fn segment_phantom_small() -> BinaryVolume {
    let spec = PhantomSpec {
        dims: Dims::cube(100),
        spacing: 14.0,
        count: 12,
        size_range: (300.0, 380.0),
        waviness: 0.35,
        gap: 0,
        sections: 0,
        max_attempts: 3000,
        seed: 19,
        ..PhantomSpec::default()
    };
    let out = phantom::generate(&spec, &MineralTable::builtin()).unwrap();
    binarize::binarize(&out.gray, &BinarizeParams::default()).unwrap()
}

type Criterion = (&'static str, fn() -> Outcome, Option<Duration>);

fn main() {
    let criteria: [Criterion; 9] = [
        ("attenuation regression on the mineral table", table_regression, Some(Duration::from_secs(1))),
        ("non-local means exactness", nlm_exactness, Some(Duration::from_secs(10))),
        ("Sauvola exactness", sauvola_exactness, Some(Duration::from_secs(10))),
        ("watershed and merge repair", merge_repair, Some(Duration::from_secs(600))),
        ("gradient correctness", gradient_correctness, Some(Duration::from_secs(5))),
        ("descriptor analytics", descriptor_analytics, Some(Duration::from_secs(5))),
        ("registration recovery", registration_recovery, Some(Duration::from_secs(300))),
        ("end-to-end attenuation", end_to_end_attenuation, None),
        ("morphology and graph properties", morphology_and_graph_properties, None),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f, limit)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f));
        let took = t.elapsed();
        let (mut pass, mut detail) = match result {
            Ok(o) => (o.pass, o.detail),
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        if let Some(l) = limit {
            if took > *l {
                pass = false;
                detail.push_str(&format!("; exceeded the {} s limit", l.as_secs()));
            }
        }
        failed += !pass as usize;
        println!(
            "criterion {n} {}: {name}: {detail} [{:.2} s]",
            if pass { "PASS" } else { "FAIL" },
            took.as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
