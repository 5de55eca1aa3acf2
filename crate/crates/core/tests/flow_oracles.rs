use gmfcvae::flow::{rank_objective, rank_pool, time_varying_mean, FlowField, RankPoolConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn field(u: Vec<f64>, v: Vec<f64>, h: usize, w: usize) -> FlowField {
    FlowField::new(h, w, u, v, 0).unwrap()
}

/// Coarse-to-fine exhaustive search over `F ∈ R^4` for two 2-pixel frames.
fn grid_minimum(tvms: &[FlowField], c: f64) -> ([f64; 4], f64) {
    let mut centre = [0.0; 4];
    let mut half = 2.0;
    let mut best = (centre, f64::INFINITY);
    for _ in 0..30 {
        let steps = 10;
        for a in 0..=2 * steps {
            for b in 0..=2 * steps {
                for d in 0..=2 * steps {
                    for e in 0..=2 * steps {
                        let off = |i: usize| (i as f64 - steps as f64) / steps as f64 * half;
                        let f = [centre[0] + off(a), centre[1] + off(b), centre[2] + off(d), centre[3] + off(e)];
                        let obj = rank_objective(tvms, &f[..2], &f[2..], c);
                        if obj < best.1 {
                            best = (f, obj);
                        }
                    }
                }
            }
        }
        centre = best.0;
        half *= 0.5;
    }
    best
}

#[test]
fn two_frame_solution_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for c in [0.5, 1.0, 4.0] {
        for _ in 0..3 {
            let mut r = || rng.gen_range(-1.5..1.5);
            let tvms = vec![
                field(vec![r(), r()], vec![r(), r()], 1, 2),
                field(vec![r(), r()], vec![r(), r()], 1, 2),
            ];
            let cfg = RankPoolConfig { c, ..RankPoolConfig::default() };
            let sol = rank_pool(&tvms, &cfg).unwrap();
            let (f, best) = grid_minimum(&tvms, c);
            let got = rank_objective(&tvms, &sol.fu, &sol.fv, c);
            assert!((got - best).abs() < 1e-3, "objective {got} vs grid {best}");
            let ours = [sol.fu[0], sol.fu[1], sol.fv[0], sol.fv[1]];
            for (a, b) in ours.iter().zip(&f) {
                assert!((a - b).abs() < 1e-3, "{ours:?} vs {f:?}");
            }
        }
    }
}

fn trending(n: usize, seed: u64) -> Vec<FlowField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let flows: Vec<FlowField> = (0..n)
        .map(|t| {
            let u = (0..36).map(|p| 0.1 * t as f64 * (p % 3) as f64 + rng.gen_range(-0.5..0.5)).collect();
            let v = (0..36).map(|_| -0.05 * t as f64 + rng.gen_range(-0.5..0.5)).collect();
            field(u, v, 6, 6)
        })
        .collect();
    time_varying_mean(&flows).unwrap()
}

fn project(m: &FlowField, fu: &[f64], fv: &[f64]) -> f64 {
    m.u.iter().zip(fu).chain(m.v.iter().zip(fv)).map(|(a, b)| a * b).sum()
}

#[test]
fn ranker_orders_the_sequence() {
    for seed in 0..5 {
        let tvms = trending(20, seed);
        let sol = rank_pool(&tvms, &RankPoolConfig::default()).unwrap();
        let s: Vec<f64> = tvms.iter().map(|m| project(m, &sol.fu, &sol.fv)).collect();
        let mut ok = 0;
        let mut total = 0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                total += 1;
                ok += usize::from(s[j] > s[i]);
            }
        }
        let frac = ok as f64 / total as f64;
        assert!(frac >= 0.95, "seed {seed}: {frac}");
    }
}

fn map(fs: &[FlowField], f: impl Fn(f64) -> f64) -> Vec<FlowField> {
    fs.iter()
        .map(|m| field(m.u.iter().map(|&x| f(x)).collect(), m.v.iter().map(|&x| f(x)).collect(), m.height, m.width))
        .collect()
}

#[test]
fn scaling_features_rescales_the_ranker() {
    // ‖F/s‖² + (C/s²)·hinge(s·m) = (‖F‖² + C·hinge(m)) / s²
    let tvms = trending(10, 7);
    let cfg = RankPoolConfig {
        max_iter: 20_000,
        tol: 1e-10,
        ..RankPoolConfig::default()
    };
    let base = rank_pool(&tvms, &cfg).unwrap();
    let base_obj = *base.objective.last().unwrap();
    for s in [0.5, 3.0] {
        let scaled = rank_pool(
            &map(&tvms, |x| s * x),
            &RankPoolConfig {
                c: cfg.c / (s * s),
                ..cfg
            },
        )
        .unwrap();
        let obj = s * s * scaled.objective.last().unwrap();
        assert!((obj - base_obj).abs() < 1e-3 * base_obj, "scale {s}: {obj} vs {base_obj}");
    }
}

fn all_ordered(tvms: &[FlowField], fu: &[f64], fv: &[f64]) -> bool {
    let s: Vec<f64> = tvms.iter().map(|m| project(m, fu, fv)).collect();
    (0..s.len()).all(|i| (i + 1..s.len()).all(|j| s[j] > s[i]))
}

#[test]
fn scaling_keeps_a_perfect_ordering() {
    let mut checked = 0;
    for seed in 0..10 {
        let tvms = trending(12, 100 + seed);
        let cfg = RankPoolConfig::default();
        let base = rank_pool(&tvms, &cfg).unwrap();
        if !all_ordered(&tvms, &base.fu, &base.fv) {
            continue;
        }
        checked += 1;
        for s in [0.25, 4.0] {
            let scaled = map(&tvms, |x| s * x);
            let r = rank_pool(&scaled, &cfg).unwrap();
            assert!(all_ordered(&scaled, &r.fu, &r.fv), "seed {seed} scale {s}");
        }
    }
    assert!(checked > 0);
}

#[test]
fn constant_offset_leaves_the_ranker_unchanged() {
    let tvms = trending(12, 9);
    let cfg = RankPoolConfig::default();
    let a = rank_pool(&tvms, &cfg).unwrap();
    let b = rank_pool(&map(&tvms, |x| x + 2.5), &cfg).unwrap();
    for (x, y) in a.fu.iter().chain(&a.fv).zip(b.fu.iter().chain(&b.fv)) {
        assert!((x - y).abs() < 1e-9, "{x} vs {y}");
    }
}
