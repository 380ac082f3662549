//! Acceptance suite: gradient checks, invariants, desk-scale training runs,
//! chunked synthesis and resume determinism. One PASS/FAIL line per criterion.
//!
//! `IPFN_ACCEPTANCE=1,3,7` restricts the run to the listed criteria.
//! `IPFN_ACCEPTANCE_DIR` keeps trained checkpoints there instead of a temp dir.

use std::alloc::{GlobalAlloc, Layout, System};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use ipfn_core::autodiff::{Graph, Tensor, Var};
use ipfn_core::checkpoint;
use ipfn_core::data::{density_guidance, Exemplar};
use ipfn_core::fieldmath::LatentGrid;
use ipfn_core::metrics::{diversity_score, periodicity_error, seam_error};
use ipfn_core::model::Conditioning;
use ipfn_core::synth::{seamless_tile, synthesize, GuidanceSpec, SynthesisRequest, Synthesizer, TileRequest};
use ipfn_core::training::{penalty_value, train, ObjectiveProbe, Telemetry, TrainConfig, TrainObserver, TrainOptions, TrainState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Counting;

static CURRENT: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
            PEAK.fetch_max(now, Ordering::Relaxed);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        let p = unsafe { System.realloc(ptr, layout, new_size) };
        if !p.is_null() {
            if new_size >= layout.size() {
                let now = CURRENT.fetch_add(new_size - layout.size(), Ordering::Relaxed) + new_size - layout.size();
                PEAK.fetch_max(now, Ordering::Relaxed);
            } else {
                CURRENT.fetch_sub(layout.size() - new_size, Ordering::Relaxed);
            }
        }
        p
    }
}

#[global_allocator]
static ALLOC: Counting = Counting;

/// Bytes allocated above the level at entry while `f` runs, and its result.
fn peak_during<T>(f: impl FnOnce() -> T) -> (usize, T) {
    let base = CURRENT.load(Ordering::Relaxed);
    PEAK.store(base, Ordering::Relaxed);
    let out = f();
    (PEAK.load(Ordering::Relaxed) - base, out)
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

/// Stripes `sin(2 pi x / T) sin(2 pi y / T)` with 10% uniform noise per channel.
fn stripes(n: usize, period: f64, seed: u64) -> Exemplar {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = std::f64::consts::TAU;
    let mut v = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let s = (tau * x as f64 / period).sin() * (tau * y as f64 / period).sin();
            for _ in 0..3 {
                let u = 0.5 + 0.45 * s + 0.1 * (rng.random::<f64>() - 0.5);
                v.push(u.clamp(0.0, 1.0) as f32);
            }
        }
    }
    Exemplar::image([n, n], 3, v).expect("stripes exemplar")
}

/// Porous SDF: union of random spheres whose radius grows along the first
/// axis, so patch densities span a range.
fn porous_volume(n: usize, seed: u64) -> Exemplar {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spheres: Vec<([f64; 3], f64)> = (0..140)
        .map(|_| {
            let c = [
                rng.random_range(0.0..n as f64),
                rng.random_range(0.0..n as f64),
                rng.random_range(0.0..n as f64),
            ];
            let r = 1.5 + 5.0 * c[0] / n as f64 + rng.random_range(0.0..1.0);
            (c, r)
        })
        .collect();
    let mut v = Vec::with_capacity(n * n * n);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let p = [z as f64, y as f64, x as f64];
                let d = spheres
                    .iter()
                    .map(|(c, r)| {
                        let d2: f64 = (0..3).map(|j| (p[j] - c[j]).powi(2)).sum();
                        d2.sqrt() - r
                    })
                    .fold(f64::INFINITY, f64::min);
                v.push(d.clamp(-8.0, 8.0) as f32);
            }
        }
    }
    Exemplar::sdf([n, n, n], v).expect("porous exemplar")
}

struct Quiet {
    label: String,
    start: Instant,
}

impl TrainObserver for Quiet {
    fn on_telemetry(&mut self, t: &Telemetry) {
        if t.iteration.is_multiple_of(250) {
            eprintln!(
                "    [{}] iter {} w {:.4} period_px {:?} ({:.0}s)",
                self.label,
                t.iteration,
                t.wasserstein_estimate,
                t.period_px.iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>(),
                self.start.elapsed().as_secs_f64()
            );
        }
    }
}

fn run_training(ex: &Exemplar, cfg: TrainConfig, label: &str, dir: &Path) -> Result<TrainState, String> {
    let path = dir.join(format!("{label}.ipfn"));
    if let Ok(state) = checkpoint::load(&path) {
        if state.config == cfg && state.iteration == cfg.iterations {
            eprintln!("    [{label}] reusing {}", path.display());
            return Ok(state);
        }
    }
    let mut state = TrainState::new(ex, cfg).map_err(fail)?;
    let mut obs = Quiet {
        label: label.into(),
        start: Instant::now(),
    };
    train(ex, &mut state, &TrainOptions::default(), &mut obs).map_err(fail)?;
    checkpoint::save(&path, &state).map_err(fail)?;
    Ok(state)
}

fn desk_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.seed = seed;
    cfg.iterations = 2000;
    cfg.batch = 4;
    cfg.patch_size = vec![64, 64];
    cfg.generator.hidden = 32;
    cfg.critic.base_width = 16;
    cfg
}

const PERIOD_PX: f64 = 16.0;

fn period_ok(state: &TrainState) -> bool {
    state
        .model
        .period_pixels()
        .iter()
        .all(|p| (p - PERIOD_PX).abs() <= 0.15 * PERIOD_PX)
}

// 1

fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if (a - n).abs() < 1e-10 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn gradient_check() -> Outcome {
    let n = 16;
    let ex = stripes(n, 8.0, 5);
    let mut cfg = TrainConfig::default();
    cfg.batch = 2;
    cfg.patch_size = vec![8, 8];
    cfg.generator.hidden = 8;
    cfg.generator.layers = 3;
    cfg.critic.base_width = 4;
    cfg.critic.conv_layers = Some(2);
    let mut worst: f64 = 0.0;
    let mut worst_rho: f64 = 0.0;
    let mut checked = 0;
    let mut failures = Vec::new();
    let h = 1e-4;
    for seed in 0..2u64 {
        cfg.seed = seed;
        cfg.latent.trainable = seed == 1;
        let state = TrainState::new(&ex, cfg.clone()).map_err(fail)?;
        let mut probe = ObjectiveProbe::new(&state, &ex).map_err(fail)?;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);

        let (_, grad) = probe.generator_loss().map_err(fail)?;
        let theta = probe.generator_params();
        let n_gen = theta.len();
        let rho_start = state.model.generator.params.num_values();
        let mut idx: Vec<(usize, f64)> = (0..13).map(|_| (rng.random_range(0..n_gen), h)).collect();
        // the log-period moves every phase at once; its central difference
        // needs a finer step to get below the tolerance (see README)
        idx.extend((rho_start..rho_start + state.model.rho.len()).map(|i| (i, 1e-6)));
        for &(i, h) in &idx {
            let mut t = theta.clone();
            t[i] = theta[i] + h;
            probe.set_generator_params(&t).map_err(fail)?;
            let up = probe.generator_loss().map_err(fail)?.0;
            t[i] = theta[i] - h;
            probe.set_generator_params(&t).map_err(fail)?;
            let down = probe.generator_loss().map_err(fail)?.0;
            let numeric = (up - down) / (2.0 * h);
            let e = relative_error(grad[i], numeric);
            if e >= 1e-4 {
                failures.push(format!("gen[{i}] analytic {:.6e} numeric {numeric:.6e}", grad[i]));
            }
            if h == 1e-4 {
                worst = worst.max(e);
                checked += 1;
            } else {
                worst_rho = worst_rho.max(e);
            }
        }
        probe.set_generator_params(&theta).map_err(fail)?;

        let (_, grad) = probe.critic_loss().map_err(fail)?;
        let theta = probe.critic_params();
        for _ in 0..15 {
            let i = rng.random_range(0..theta.len());
            let mut t = theta.clone();
            t[i] = theta[i] + h;
            probe.set_critic_params(&t).map_err(fail)?;
            let up = probe.critic_loss().map_err(fail)?.0;
            t[i] = theta[i] - h;
            probe.set_critic_params(&t).map_err(fail)?;
            let down = probe.critic_loss().map_err(fail)?.0;
            let numeric = (up - down) / (2.0 * h);
            let e = relative_error(grad[i], numeric);
            if e >= 1e-4 {
                failures.push(format!("critic[{i}] analytic {:.6e} numeric {numeric:.6e}", grad[i]));
            }
            worst = worst.max(e);
            checked += 1;
        }
        probe.set_critic_params(&theta).map_err(fail)?;
    }
    check(
        failures.is_empty() && checked >= 50,
        format!(
            "{checked} coordinates at step 1e-4, worst relative error {worst:.2e}; log-period at step 1e-6 {worst_rho:.2e} {}",
            failures.join("; ")
        ),
    )
}

// 2

fn penalty_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, d) = (6, 12);
    let mut batch = || Tensor::new(vec![n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (real, fake) = (batch(), batch());
    let linear = |w: Vec<f64>| {
        move |g: &mut Graph<f64>, x: Var| {
            let wv = g.constant(Tensor::new(vec![w.len(), 1], w.clone()));
            Ok(g.matmul(x, wv, false, false))
        }
    };
    let mut unit: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let norm = unit.iter().map(|v| v * v).sum::<f64>().sqrt();
    unit.iter_mut().for_each(|v| *v /= norm);
    let double: Vec<f64> = unit.iter().map(|v| 2.0 * v).collect();
    let p1 = penalty_value(&mut linear(unit), &real, &fake, &mut rng).map_err(fail)?;
    let p2 = penalty_value(&mut linear(double), &real, &fake, &mut rng).map_err(fail)?;
    let mut constant = |g: &mut Graph<f64>, x: Var| {
        let z = g.scale(x, 0.0);
        let s = g.row_sum(z);
        Ok(g.add_scalar(s, 3.0))
    };
    let p0 = penalty_value(&mut constant, &real, &fake, &mut rng).map_err(fail)?;
    check(
        p1 < 1e-10 && (p2 - 1.0).abs() <= 1e-6 && (p0 - 1.0).abs() <= 1e-6,
        format!("unit {p1:.2e}, norm-2 {p2:.9}, constant {p0:.9}"),
    )
}

// 3

fn periodicity(trained: &[TrainState]) -> Outcome {
    let fresh_2d = TrainState::new(&stripes(128, PERIOD_PX, 1), TrainConfig::default()).map_err(fail)?;
    let mut vol_cfg = TrainConfig::default();
    vol_cfg.patch_size = vec![16, 16, 16];
    vol_cfg.conditioning = Conditioning::Density;
    let fresh_3d = TrainState::new(&porous_volume(24, 2), vol_cfg).map_err(fail)?;
    let mut short = desk_config(4);
    short.iterations = 10;
    short.period_init = 1.3;
    let ex = stripes(128, PERIOD_PX, 1);
    let mut brief = TrainState::new(&ex, short).map_err(fail)?;
    train(&ex, &mut brief, &TrainOptions::default(), &mut ()).map_err(fail)?;
    let reloaded = checkpoint::decode(&checkpoint::encode(&brief)).map_err(fail)?;
    let mut models = vec![("fresh 2d", &fresh_2d), ("fresh 3d", &fresh_3d), ("trained 10 it", &reloaded)];
    for (i, s) in trained.iter().enumerate() {
        models.push((["desk seed 0", "desk seed 1", "desk seed 2"][i.min(2)], s));
    }
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (name, s) in models {
        let e = periodicity_error(&s.model, 1000, 7).map_err(fail)?;
        worst = worst.max(e);
        parts.push(format!("{name} {e:.1e}"));
    }
    check(worst < 1e-5, format!("1000 points: {}", parts.join(", ")))
}

// 4

fn partition_of_unity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for k in [2usize, 3] {
        for &sigma in &[0.05, 0.5, 4.0] {
            let shape = vec![5; k];
            let mut grid = LatentGrid::new(&shape, 5, 1.0, sigma).map_err(fail)?;
            grid.axis_scale = (0..k).map(|_| rng.random_range(0.5..8.0)).collect();
            grid.extent_scale = rng.random_range(0.5..4.0);
            for _ in 0..10_000 {
                let x: Vec<f64> = (0..k).map(|_| rng.random_range(-100.0..100.0)).collect();
                let c = grid.corners(&x);
                let s: f64 = c.weights[..c.count].iter().sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    check(worst <= 1e-6, format!("k in {{2,3}}, 10^4 points each, worst |sum - 1| = {worst:.1e}"))
}

// 5

fn desk_training(dir: &Path) -> (Outcome, Vec<TrainState>) {
    let ex = stripes(128, PERIOD_PX, 1);
    let mut states = Vec::new();
    let mut lines = Vec::new();
    let mut period_hits = 0;
    let mut seams_ok = true;
    let mut diversity_ok = true;
    for seed in 0..3u64 {
        let state = match run_training(&ex, desk_config(seed), &format!("desk-{seed}"), dir) {
            Ok(s) => s,
            Err(e) => return (Err(e), states),
        };
        let evaluated = (|| -> Result<String, String> {
            let model = &state.model;
            let hit = period_ok(&state);
            period_hits += hit as usize;
            let tile = seamless_tile(
                model,
                &TileRequest {
                    periods: vec![1, 1],
                    seed,
                    constant_latent: None,
                    guidance: None,
                },
            )
            .map_err(fail)?;
            let seam = seam_error(&tile.values, &tile.dims, tile.channels).map_err(fail)?;
            seams_ok &= seam.passes();
            let outs: Vec<Vec<f32>> = (0..8)
                .map(|s| synthesize(model, &SynthesisRequest::new(vec![128, 128], s)).map(|o| o.values))
                .collect::<Result<_, _>>()
                .map_err(fail)?;
            let refs: Vec<&[f32]> = outs.iter().map(Vec::as_slice).collect();
            let div = diversity_score(&refs, model.channels).map_err(fail)?;
            diversity_ok &= div > 0.01;
            Ok(format!(
                "seed {seed}: period_px {:?} {}, seam {:.2e} <= {:.2e}, diversity {div:.4}",
                model.period_pixels().iter().map(|p| (p * 100.0).round() / 100.0).collect::<Vec<_>>(),
                if hit { "ok" } else { "off" },
                seam.boundary_mad,
                seam.interior_gradient_mad
            ))
        })();
        match evaluated {
            Ok(line) => lines.push(line),
            Err(e) => return (Err(e), states),
        }
        states.push(state);
    }
    let outcome = check(
        period_hits >= 2 && seams_ok && diversity_ok,
        format!("{period_hits}/3 periods within 15% of {PERIOD_PX} px; {}", lines.join("; ")),
    );
    (outcome, states)
}

// 6

fn ablation(dir: &Path) -> Outcome {
    let ex = stripes(128, PERIOD_PX, 1);
    let mut hits = 0;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let mut cfg = desk_config(seed);
        cfg.disable_period_learning = true;
        cfg.period_init = 0.6;
        let state = run_training(&ex, cfg, &format!("fixed-{seed}"), dir)?;
        hits += period_ok(&state) as usize;
        parts.push(format!("{:.2}", state.model.period_pixels()[0]));
    }
    check(
        hits < 2,
        format!("fixed a = 0.6: period_px {} vs {PERIOD_PX}; {hits}/3 within 15%, so the period criterion fails as expected", parts.join(", ")),
    )
}

// 7

fn median(mut xs: Vec<Duration>) -> Duration {
    xs.sort();
    xs[xs.len() / 2]
}

fn chunking() -> Outcome {
    let state = TrainState::new(&stripes(128, PERIOD_PX, 1), TrainConfig::default()).map_err(fail)?;
    let model = &state.model;
    let c = model.channels;

    let mut big = SynthesisRequest::new(vec![1024, 1024], 9);
    big.chunk_dims = Some(vec![256, 256]);
    let synth = Synthesizer::new(model, &big).map_err(fail)?;
    let t = Instant::now();
    let (peak_big, full) = peak_during(|| synth.run());
    let t_big = t.elapsed();
    let full = full.map_err(fail)?;

    let mut mismatched = 0usize;
    for by in 0..4 {
        for bx in 0..4 {
            let region = synth.region(&[by * 256, bx * 256], &[256, 256]).map_err(fail)?;
            for (r, row) in region.chunks_exact(256 * c).enumerate() {
                let start = ((by * 256 + r) * 1024 + bx * 256) * c;
                let whole = &full.values[start..start + 256 * c];
                mismatched += row.iter().zip(whole).filter(|(a, b)| a.to_bits() != b.to_bits()).count();
            }
        }
    }

    let small = SynthesisRequest::new(vec![256, 256], 9);
    let small_synth = Synthesizer::new(model, &small).map_err(fail)?;
    small_synth.run().map_err(fail)?;
    let t_small = median(
        (0..5)
            .map(|_| {
                let t = Instant::now();
                small_synth.run().expect("small synthesis");
                t.elapsed()
            })
            .collect(),
    );
    let ratio = t_big.as_secs_f64() / t_small.as_secs_f64();

    let mut mid = SynthesisRequest::new(vec![512, 512], 9);
    mid.chunk_dims = Some(vec![256, 256]);
    let mid_synth = Synthesizer::new(model, &mid).map_err(fail)?;
    let (peak_mid, _) = peak_during(|| mid_synth.run());

    let out_big = 1024 * 1024 * c * 4;
    let out_mid = 512 * 512 * c * 4;
    let extra_big = peak_big.saturating_sub(out_big);
    let extra_mid = peak_mid.saturating_sub(out_mid);
    let chunk_pts = 256 * 256;
    let per_point = extra_big as f64 / chunk_pts as f64;
    let threads = rayon::current_num_threads();
    let bounded = extra_big as f64 <= 1.05 * extra_mid as f64 + (1 << 20) as f64;
    check(
        mismatched == 0 && (12.8..=19.2).contains(&ratio) && bounded,
        format!(
            "{mismatched} mismatched values; 1024^2 {:.2}s vs 256^2 {:.3}s = {ratio:.2}x; extra memory {:.1} MiB at 1024^2, {:.1} MiB at 512^2 ({per_point:.0} B per chunk point, {threads} threads)",
            t_big.as_secs_f64(),
            t_small.as_secs_f64(),
            extra_big as f64 / (1 << 20) as f64,
            extra_mid as f64 / (1 << 20) as f64
        ),
    )
}

// 8

fn resume_determinism(dir: &Path) -> Outcome {
    let ex = stripes(64, PERIOD_PX, 3);
    let mut cfg = TrainConfig::default();
    cfg.seed = 21;
    cfg.batch = 2;
    cfg.patch_size = vec![32, 32];
    cfg.generator.hidden = 16;
    cfg.generator.layers = 4;
    cfg.critic.base_width = 8;
    cfg.history_len = 1000;
    cfg.iterations = 200;
    let mut straight = TrainState::new(&ex, cfg.clone()).map_err(fail)?;
    train(&ex, &mut straight, &TrainOptions::default(), &mut ()).map_err(fail)?;

    cfg.iterations = 100;
    let mut first = TrainState::new(&ex, cfg).map_err(fail)?;
    train(&ex, &mut first, &TrainOptions::default(), &mut ()).map_err(fail)?;
    let path = dir.join("resume-100.ipfn");
    checkpoint::save(&path, &first).map_err(fail)?;
    drop(first);
    let mut resumed = checkpoint::load(&path).map_err(fail)?;
    resumed.config.iterations = 200;
    train(&ex, &mut resumed, &TrainOptions::default(), &mut ()).map_err(fail)?;

    let same_bytes = checkpoint::encode(&straight) == checkpoint::encode(&resumed);
    let same_trace = straight.history == resumed.history;
    check(
        straight == resumed && same_bytes && same_trace,
        format!(
            "100 + 100 iterations vs 200: states equal {}, checkpoint bytes equal {same_bytes}, telemetry equal {same_trace}",
            straight == resumed
        ),
    )
}

// 9

fn density_trend(dir: &Path) -> Outcome {
    let ex = porous_volume(64, 17);
    // patch densities seen in training, to pick request levels inside the range
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut seen: Vec<f64> = (0..400)
        .map(|_| {
            let o: Vec<usize> = (0..3).map(|_| rng.random_range(0..=48)).collect();
            let crop = ex.crop(&o, &[16, 16, 16]).expect("crop");
            density_guidance(&crop, crop.len() as f64)
        })
        .collect();
    seen.sort_by(f64::total_cmp);
    let levels = [seen[40], seen[200], seen[360]];
    let mut hits = 0;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let mut cfg = TrainConfig::default();
        cfg.seed = seed;
        cfg.iterations = 1500;
        cfg.batch = 4;
        cfg.patch_size = vec![16, 16, 16];
        cfg.conditioning = Conditioning::Density;
        cfg.generator.hidden = 32;
        cfg.critic.base_width = 16;
        let state = run_training(&ex, cfg, &format!("foam-{seed}"), dir)?;
        let mut measured = Vec::new();
        for &level in &levels {
            let mut req = SynthesisRequest::new(vec![32, 32, 32], 100 + seed);
            req.guidance = Some(GuidanceSpec::Scalar { value: level });
            let out = synthesize(&state.model, &req).map_err(fail)?;
            let raw = out.raw_values();
            measured.push(density_guidance(&raw, raw.len() as f64));
        }
        let monotone = measured.windows(2).all(|w| w[1] >= w[0]);
        hits += monotone as usize;
        parts.push(format!(
            "seed {seed}: {}",
            measured.iter().map(|m| format!("{m:.3}")).collect::<Vec<_>>().join(" -> ")
        ));
    }
    check(
        hits >= 2,
        format!(
            "levels {:.3} / {:.3} / {:.3}; {}; {hits}/3 non-decreasing",
            levels[0],
            levels[1],
            levels[2],
            parts.join("; ")
        ),
    )
}

fn selected() -> Vec<usize> {
    match std::env::var("IPFN_ACCEPTANCE") {
        Ok(list) if !list.trim().is_empty() => list.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        _ => (1..=9).collect(),
    }
}

fn report(n: usize, what: &str, started: Instant, outcome: &Outcome) -> bool {
    let secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(d) => println!("criterion {n} PASS {what} ({secs:.1}s): {d}"),
        Err(d) => println!("criterion {n} FAIL {what} ({secs:.1}s): {d}"),
    }
    outcome.is_ok()
}

fn main() {
    // the test harness forwards its own flags; only `--list` needs an answer
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let want = selected();
    let tmp = tempfile::tempdir().expect("temp dir");
    let dir: PathBuf = std::env::var_os("IPFN_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&dir).expect("acceptance dir");
    let on = |n: usize| want.contains(&n);
    let mut all = true;

    if on(1) {
        let t = Instant::now();
        all &= report(1, "gradient check", t, &gradient_check());
    }
    if on(2) {
        let t = Instant::now();
        all &= report(2, "penalty oracle", t, &penalty_oracle());
    }
    let mut trained = Vec::new();
    let mut desk = None;
    if on(5) {
        let t = Instant::now();
        let (outcome, states) = desk_training(&dir);
        trained = states;
        desk = Some((t, outcome));
    }
    if on(3) {
        let t = Instant::now();
        all &= report(3, "periodicity", t, &periodicity(&trained));
    }
    if on(4) {
        let t = Instant::now();
        all &= report(4, "partition of unity", t, &partition_of_unity());
    }
    if let Some((t, outcome)) = desk {
        all &= report(5, "desk training", t, &outcome);
    }
    if on(6) {
        let t = Instant::now();
        all &= report(6, "ablation", t, &ablation(&dir));
    }
    if on(7) {
        let t = Instant::now();
        all &= report(7, "chunked synthesis", t, &chunking());
    }
    if on(8) {
        let t = Instant::now();
        all &= report(8, "resume determinism", t, &resume_determinism(&dir));
    }
    if on(9) {
        let t = Instant::now();
        all &= report(9, "density trend", t, &density_trend(&dir));
    }
    if !all {
        std::process::exit(1);
    }
}
