//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero when any criterion fails.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use revgrpo_cli::args::TrainArgs;
use revgrpo_cli::commands::{self, Variant, VARIANTS};
use revgrpo_cli::RunConfig;
use revgrpo_core::consolidation::{alignment_cost, pairwise_cost, shaping_signal, ShapingSet};
use revgrpo_core::geometry::{iou, l1_box, l1_point, BoxN, PointN};
use revgrpo_core::matching::{hungarian, match_objects, CostMatrix};
use revgrpo_core::policy::{log_prob, PolicyInit, PolicyParams, PolicyShape};
use revgrpo_core::response::{parse, FormatError, Response};
use revgrpo_core::reward::format_reward;
use revgrpo_core::scenes::{generate_dataset, save_dataset, DifficultyMix, EnvConfig};
use revgrpo_core::trainer::{
    compare_revision_vs_direct, rollout_batch, surrogate_and_grad, train, RolloutMode, TrainConfig,
};

const SEEDS: u64 = 5;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn within(limit: Duration, start: Instant, v: Verdict) -> Verdict {
    let t = start.elapsed();
    if t <= limit {
        v
    } else {
        Verdict::new(
            false,
            format!(
                "{}; took {:.1}s, limit {}s",
                v.detail,
                t.as_secs_f64(),
                limit.as_secs()
            ),
        )
    }
}

fn random_box(rng: &mut ChaCha8Rng) -> BoxN {
    let (a, b) = (rng.random::<f64>(), rng.random::<f64>());
    let (c, d) = (rng.random::<f64>(), rng.random::<f64>());
    BoxN::new(a.min(b), c.min(d), a.max(b), c.max(d)).unwrap()
}

fn random_objects(rng: &mut ChaCha8Rng, n: usize) -> (Vec<BoxN>, Vec<PointN>) {
    (0..n)
        .map(|_| {
            (
                random_box(rng),
                PointN::new(rng.random(), rng.random()).unwrap(),
            )
        })
        .unzip()
}

fn bx(c: [f64; 4]) -> BoxN {
    BoxN::try_from(c).unwrap()
}

fn pt(x: f64, y: f64) -> PointN {
    PointN::new(x, y).unwrap()
}

// 1 -------------------------------------------------------------------------

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, p: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(p.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, p, out);
            if k % 2 == 0 {
                p.swap(i, k - 1);
            } else {
                p.swap(0, k - 1);
            }
        }
    }
    let mut out = Vec::new();
    heap(n, &mut (0..n).collect(), &mut out);
    out
}

fn assignment_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for n in 2..=7 {
        let perms = permutations(n);
        for _ in 0..1000 {
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
                .collect();
            let best = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(r, &c)| rows[r][c]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let a = hungarian(&CostMatrix::from_rows(rows).unwrap());
            worst = worst.max((a.total_cost - best).abs());
        }
    }
    within(
        Duration::from_secs(10),
        start,
        Verdict::new(
            worst <= 1e-9,
            format!("6000 matrices, max |hungarian - brute force| = {worst:.1e}"),
        ),
    )
}

// 2 -------------------------------------------------------------------------

fn consolidation_suite() -> Verdict {
    let start = Instant::now();
    let mut failures = Vec::new();
    let check = |failures: &mut Vec<String>, name: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-6 {
            failures.push(format!("{name}: {got} != {want}"));
        }
    };

    let a = bx([0.1, 0.1, 0.5, 0.5]);
    check(&mut failures, "iou identity", iou(&a, &a), 1.0);
    check(
        &mut failures,
        "iou disjoint",
        iou(&bx([0.0, 0.0, 0.2, 0.2]), &bx([0.5, 0.5, 0.9, 0.9])),
        0.0,
    );
    check(
        &mut failures,
        "iou partial",
        iou(&bx([0.0, 0.0, 0.2, 0.2]), &bx([0.1, 0.1, 0.3, 0.3])),
        0.01 / 0.07,
    );
    check(&mut failures, "l1 box identity", l1_box(&a, &a), 0.0);
    check(
        &mut failures,
        "l1 box maximal",
        l1_box(&bx([0.0; 4]), &bx([1.0; 4])),
        1.0,
    );
    check(
        &mut failures,
        "l1 box shift",
        l1_box(&bx([0.0, 0.0, 0.5, 0.5]), &bx([0.1, 0.0, 0.5, 0.5])),
        0.1 / 4.0,
    );
    check(
        &mut failures,
        "l1 point identity",
        l1_point(&pt(0.3, 0.3), &pt(0.3, 0.3)),
        0.0,
    );
    check(
        &mut failures,
        "l1 point maximal",
        l1_point(&pt(0.0, 0.0), &pt(1.0, 1.0)),
        1.0,
    );
    check(
        &mut failures,
        "l1 point shift",
        l1_point(&pt(0.25, 0.25), &pt(0.30, 0.25)),
        0.05 / 2.0,
    );

    let h = hungarian(&CostMatrix::from_rows(vec![vec![0.0]]).unwrap());
    check(&mut failures, "1x1 total", h.total_cost, 0.0);
    let h = hungarian(&CostMatrix::from_rows(vec![vec![0.1, 0.9], vec![0.8, 0.2]]).unwrap());
    check(&mut failures, "2x2 total", h.total_cost, 0.3);
    if h.row_to_col() != vec![0, 1] {
        failures.push(format!("2x2 pairs {:?}", h.row_to_col()));
    }
    let h = hungarian(
        &CostMatrix::from_rows(
            (0..4)
                .map(|r| (0..4).map(|c| if r == c { 0.0 } else { 1.0 }).collect())
                .collect(),
        )
        .unwrap(),
    );
    check(&mut failures, "identity-zero total", h.total_cost, 0.0);

    let g_boxes = [bx([0.1, 0.1, 0.3, 0.3]), bx([0.6, 0.5, 0.9, 0.8])];
    let g_points = [pt(0.2, 0.2), pt(0.7, 0.6)];
    let (_, perfect) = match_objects(&g_boxes, &g_points, &g_boxes, &g_points).unwrap();
    check(
        &mut failures,
        "perfect pair costs",
        perfect.iter().map(|m| m.cost).sum(),
        0.0,
    );
    let (_, empty) = match_objects(&[], &[], &g_boxes, &g_points).unwrap();
    if empty.len() != 2 || empty.iter().any(|m| m.cost != 1.0 || !m.is_dummy()) {
        failures.push(format!("all-dummy padding {empty:?}"));
    }
    let (_, one) = match_objects(&g_boxes[..1], &g_points[..1], &g_boxes, &g_points).unwrap();
    let mut costs: Vec<f64> = one.iter().map(|m| m.cost).collect();
    costs.sort_by(f64::total_cmp);
    if costs != [0.0, 1.0] {
        failures.push(format!("one real plus one dummy {costs:?}"));
    }

    check(
        &mut failures,
        "pairwise identity",
        pairwise_cost(&a, &pt(0.3, 0.3), &a, &pt(0.3, 0.3)),
        0.0,
    );
    check(
        &mut failures,
        "pairwise maximal",
        pairwise_cost(&bx([0.0; 4]), &pt(0.0, 0.0), &bx([1.0; 4]), &pt(1.0, 1.0)),
        1.0,
    );
    let q = bx([0.0, 0.0, 0.5, 0.5]);
    check(
        &mut failures,
        "pairwise point shift",
        pairwise_cost(&q, &pt(0.25, 0.25), &q, &pt(0.30, 0.25)),
        0.025 / 3.0,
    );

    let set = |b: &[BoxN], p: &[PointN]| {
        alignment_cost(&ShapingSet {
            pred_boxes: b,
            pred_points: p,
            gt_boxes: &g_boxes,
            gt_points: &g_points,
        })
        .unwrap()
        .0
    };
    check(
        &mut failures,
        "alignment perfect",
        set(&g_boxes, &g_points),
        0.0,
    );
    check(&mut failures, "alignment empty", set(&[], &[]), 1.0);
    check(
        &mut failures,
        "alignment one missing",
        set(&g_boxes[..1], &g_points[..1]),
        0.5,
    );

    check(
        &mut failures,
        "shaping improvement",
        shaping_signal(0.6, 0.3),
        0.5,
    );
    check(
        &mut failures,
        "shaping clamp",
        shaping_signal(0.3, 0.5),
        0.0,
    );
    check(
        &mut failures,
        "shaping perfect initial",
        shaping_signal(0.0, 0.4),
        0.0,
    );

    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut random_bad = 0;
    for _ in 0..10_000 {
        let nx = rng.random_range(1..=4);
        let (gb, gp) = random_objects(&mut rng, nx);
        let (m1, m2) = (rng.random_range(0..=5), rng.random_range(0..=5));
        let (b1, p1) = random_objects(&mut rng, m1);
        let (b2, p2) = random_objects(&mut rng, m2);
        let phi = |b: &[BoxN], p: &[PointN]| {
            alignment_cost(&ShapingSet {
                pred_boxes: b,
                pred_points: p,
                gt_boxes: &gb,
                gt_points: &gp,
            })
            .unwrap()
            .0
        };
        let (phi1, phi2) = (phi(&b1, &p1), phi(&b2, &p2));
        let d = shaping_signal(phi1, phi2);
        let in_range = (0.0..=1.0).contains(&d);
        let clamp_ok = phi2 < phi1 || d == 0.0;
        let scale = rng.random_range(0.1..1.0);
        let rescale_ok =
            phi1 * scale < 1e-6 || (shaping_signal(phi1 * scale, phi2 * scale) - d).abs() <= 1e-12;
        if !(in_range && clamp_ok && rescale_ok) {
            random_bad += 1;
        }
    }
    if random_bad > 0 {
        failures.push(format!(
            "{random_bad} random shaping-set pairs violated range, clamp or rescaling"
        ));
    }
    let n = failures.len();
    within(
        Duration::from_secs(30),
        start,
        Verdict::new(
            n == 0,
            if n == 0 {
                "25 worked examples and 10^4 random shaping-set pairs".to_string()
            } else {
                failures.join("; ")
            },
        ),
    )
}

// 3 -------------------------------------------------------------------------

fn perturbed(p: &PolicyParams, rng: &mut ChaCha8Rng, scale: f64) -> PolicyParams {
    let mut q = p.clone();
    for w in q.theta_mut() {
        *w += rng.random_range(-scale..scale);
    }
    q
}

fn gradient_check() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut clipped = 0.0;
    let mut checked = 0;
    while checked < 50 {
        let env = EnvConfig {
            grid: rng.random_range(2..=3),
            scales: vec![0.5],
            max_objects: 2,
            max_slots: rng.random_range(1..=3),
            ..EnvConfig::default()
        };
        let grid = env.grid().unwrap();
        let shape = PolicyShape::new(grid.len(), env.max_slots);
        let scenes = generate_dataset(rng.random(), 3, DifficultyMix::Mixed, &env).unwrap();
        let config = TrainConfig {
            group_size: rng.random_range(2..=5),
            kl_beta: rng.random_range(0.0..0.5),
            omega: rng.random_range(0.0..7.0),
            clip_epsilon: rng.random_range(0.1..0.3),
            revision_enabled: rng.random_bool(0.8),
            consolidation_enabled: rng.random_bool(0.8),
            postscale_enabled: rng.random(),
            seed: rng.random(),
            ..TrainConfig::default()
        };
        let base = PolicyParams::init(shape, &PolicyInit::default());
        let old = perturbed(&base, &mut rng, 1.0);
        let reference = perturbed(&old, &mut rng, 0.5);
        let params = perturbed(&old, &mut rng, 0.3);
        let idx: Vec<usize> = (0..scenes.len()).collect();
        let records = rollout_batch(&idx, &scenes, &grid, &old, &config, &[7, checked as u64]);
        let eps = config.clip_epsilon;
        let near_kink = records.iter().any(|r| {
            r.candidates.iter().any(|c| {
                let s = &scenes[r.scene_index];
                let ratio = (log_prob(&params, s, &r.context, &c.trace).unwrap()
                    - log_prob(&old, s, &r.context, &c.trace).unwrap())
                .exp();
                (ratio - (1.0 - eps)).abs() < 1e-3 || (ratio - (1.0 + eps)).abs() < 1e-3
            })
        });
        if near_kink {
            continue;
        }
        let objective = |p: &PolicyParams| {
            surrogate_and_grad(p, &old, &reference, &scenes, &records, &config)
                .unwrap()
                .objective
        };
        let s = surrogate_and_grad(&params, &old, &reference, &scenes, &records, &config).unwrap();
        clipped += s.clip_fraction;
        let mut diff = 0.0;
        for (i, g) in s.grad.iter().enumerate() {
            let mut plus = params.clone();
            plus.theta_mut()[i] += h;
            let mut minus = params.clone();
            minus.theta_mut()[i] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            diff += (g - fd).powi(2);
        }
        let norm = s.grad.iter().map(|g| g * g).sum::<f64>().sqrt().max(1e-8);
        worst = worst.max(diff.sqrt() / norm);
        checked += 1;
    }
    within(
        Duration::from_secs(60),
        start,
        Verdict::new(
            worst < 1e-4 && clipped > 0.0,
            format!(
                "50 configurations, max relative error {worst:.2e}, clipping exercised: {}",
                clipped > 0.0
            ),
        ),
    )
}

// 4 -------------------------------------------------------------------------

fn baseline_reduction() -> Verdict {
    let env = EnvConfig::default();
    let grid = env.grid().unwrap();
    let shape = PolicyShape::new(grid.len(), env.max_slots);
    let scenes = generate_dataset(104, 1000, DifficultyMix::Mixed, &env).unwrap();
    let config = TrainConfig {
        revision_enabled: false,
        consolidation_enabled: false,
        postscale_enabled: false,
        p_corrupt: 0.1,
        seed: 104,
        ..TrainConfig::default()
    };
    let params = PolicyParams::init(shape, &PolicyInit::default());
    let idx: Vec<usize> = (0..scenes.len()).collect();
    let records = rollout_batch(&idx, &scenes, &grid, &params, &config, &[4]);
    let mut bad = Vec::new();
    let mut worst_z: f64 = 0.0;
    for r in &records {
        if r.mode != RolloutMode::Direct {
            bad.push(format!("scene {} ran in mode {:?}", r.scene_id, r.mode));
        }
        let rewards: Vec<f64> = r
            .candidates
            .iter()
            .map(|c| c.reward.r_format + c.reward.r_acc)
            .collect();
        let n = rewards.len() as f64;
        let mu = rewards.iter().sum::<f64>() / n;
        let sigma = (rewards.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
        for (c, want) in r.candidates.iter().zip(&rewards) {
            if c.reward.total.to_bits() != want.to_bits() {
                bad.push(format!(
                    "scene {}: reward {} != {}",
                    r.scene_id, c.reward.total, want
                ));
            }
            if c.reward.scaled_advantage.to_bits() != c.reward.advantage.to_bits() {
                bad.push(format!("scene {}: scaled advantage differs", r.scene_id));
            }
            if c.reward.r_format != format_reward(&c.text) {
                bad.push(format!(
                    "scene {}: format reward disagrees with its text",
                    r.scene_id
                ));
            }
            worst_z = worst_z.max((c.reward.advantage - (want - mu) / (sigma + 1e-8)).abs());
        }
    }
    if worst_z > 1e-9 {
        bad.push(format!(
            "advantages deviate from the z-score by {worst_z:.1e}"
        ));
    }
    Verdict::new(
        bad.is_empty() && records.len() == 1000,
        if bad.is_empty() {
            format!(
                "{} rollouts, {} candidates bit-exact",
                records.len(),
                records.len() * config.group_size
            )
        } else {
            bad.into_iter().take(3).collect::<Vec<_>>().join("; ")
        },
    )
}

// 5 -------------------------------------------------------------------------

fn revision_recovers_hard_cases() -> Verdict {
    let start = Instant::now();
    let env = EnvConfig::default();
    let grid = env.grid().unwrap();
    let scenes = generate_dataset(105, 500, DifficultyMix::Hard, &env).unwrap();
    let mut lines = Vec::new();
    let mut all = true;
    for s in 0..SEEDS {
        let config = TrainConfig {
            steps: 200,
            seed: s,
            ..TrainConfig::default()
        };
        let out = train(&config, &grid, env.max_slots, &scenes, |_| Ok(())).unwrap();
        let cmp =
            compare_revision_vs_direct(&out.params, &grid, &scenes, config.group_size, 1000 + s);
        all &= cmp.frac_revision_hit > cmp.frac_direct_hit;
        lines.push(format!(
            "{:.3}>{:.3}",
            cmp.frac_revision_hit, cmp.frac_direct_hit
        ));
    }
    within(
        Duration::from_secs(300),
        start,
        Verdict::new(
            all,
            format!(
                "revision vs direct hit fraction per seed: {}",
                lines.join(" ")
            ),
        ),
    )
}

// 6, 7, 8 -------------------------------------------------------------------

struct Sweep {
    root: tempfile::TempDir,
    base: RunConfig,
}

impl Sweep {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        let env = EnvConfig::default();
        let mut base = RunConfig::default();
        base.train.steps = 500;
        base.train.checkpoint_interval = 0;
        for s in 0..SEEDS {
            let train = generate_dataset(s, 500, DifficultyMix::Hard, &env).unwrap();
            let held_out = generate_dataset(10_000 + s, 500, DifficultyMix::Hard, &env).unwrap();
            save_dataset(&train, &env, &root.path().join(format!("train-{s}.jsonl"))).unwrap();
            save_dataset(
                &held_out,
                &env,
                &root.path().join(format!("eval-{s}.jsonl")),
            )
            .unwrap();
        }
        Self { root, base }
    }

    fn run(&self, variant: &Variant, seed: u64) -> commands::RunOutput {
        let dir = self.root.path().join(variant.name).join(seed.to_string());
        let mut cfg = variant.apply(&self.base, seed, dir);
        cfg.data.train = self.root.path().join(format!("train-{seed}.jsonl"));
        cfg.data.eval = Some(self.root.path().join(format!("eval-{seed}.jsonl")));
        commands::run_training(&cfg).unwrap()
    }

    fn runs(&self, name: &str) -> Vec<commands::RunOutput> {
        let v = VARIANTS.iter().find(|v| v.name == name).unwrap();
        (0..SEEDS).map(|s| self.run(v, s)).collect()
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn monotone_ablation(
    plain: &[commands::RunOutput],
    revision: &[commands::RunOutput],
    full: &[commands::RunOutput],
    start: Instant,
) -> Verdict {
    let score = |runs: &[commands::RunOutput]| {
        mean(
            runs.iter()
                .map(|r| commands::final_comparable_reward(&r.metrics)),
        )
    };
    let (p, r, f) = (score(plain), score(revision), score(full));
    within(
        Duration::from_secs(900),
        start,
        Verdict::new(
            f >= r && r >= p,
            format!("final format+acc reward: full {f:.4} >= revision {r:.4} >= plain {p:.4}"),
        ),
    )
}

fn postscale_helps(full: &[commands::RunOutput], nops: &[commands::RunOutput]) -> Verdict {
    let acc = |runs: &[commands::RunOutput]| {
        mean(
            runs.iter()
                .map(|r| r.eval.as_ref().unwrap().overall.acc_at_0_5),
        )
    };
    let (a, b) = (acc(full), acc(nops));
    Verdict::new(
        a >= b,
        format!("held-out hard Acc@0.5: post-scaling {a:.4} >= without {b:.4}"),
    )
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn shaping_distribution(full: &[commands::RunOutput]) -> Verdict {
    let mut all = true;
    let mut parts = Vec::new();
    for run in full {
        let text = fs::read_to_string(run.shaping_path()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let mut means = Vec::new();
        let mut maxes = Vec::new();
        for line in &lines[lines.len().saturating_sub(100)..] {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            means.extend(
                v["group_mean"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|x| x.as_f64().unwrap()),
            );
            maxes.extend(
                v["group_max"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|x| x.as_f64().unwrap()),
            );
        }
        // Empirical CDF of the maxima lies on or below that of the means everywhere.
        let mut sm = means.clone();
        let mut sx = maxes.clone();
        sm.sort_by(f64::total_cmp);
        sx.sort_by(f64::total_cmp);
        let cdf = |sorted: &[f64], t: f64| {
            sorted.partition_point(|x| *x <= t) as f64 / sorted.len() as f64
        };
        let dominates = sm.iter().chain(&sx).all(|&t| cdf(&sx, t) <= cdf(&sm, t));
        let (mm, mx) = (median(&mut means), median(&mut maxes));
        all &= dominates && mm < mx;
        parts.push(format!(
            "median {mm:.3}<{mx:.3}{}",
            if dominates { "" } else { " (not dominated)" }
        ));
    }
    Verdict::new(
        all,
        format!(
            "group-mean vs group-max delta_phi, last 100 steps: {}",
            parts.join(", ")
        ),
    )
}

// 9 -------------------------------------------------------------------------

fn random_text(rng: &mut ChaCha8Rng) -> String {
    const PIECES: [&str; 20] = [
        "<think>",
        "</think>",
        "<answer>",
        "</answer>",
        "[",
        "]",
        "{",
        "}",
        "\"bbox\"",
        "\"point\"",
        ":",
        ",",
        "0.5",
        "-1",
        "1e9",
        "null",
        "\"x\"",
        " ",
        "0.1,0.2,0.3,0.4",
        "NaN",
    ];
    match rng.random_range(0..3) {
        0 => {
            let bytes: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        }
        1 => (0..rng.random_range(0..24))
            .map(|_| PIECES[rng.random_range(0..PIECES.len())])
            .collect(),
        _ => {
            let n = rng.random_range(0..4);
            let (b, p) = random_objects(rng, n);
            let mut s: Vec<char> = Response::new("r", b, p)
                .unwrap()
                .serialize()
                .chars()
                .collect();
            for _ in 0..rng.random_range(1..4) {
                if s.is_empty() {
                    break;
                }
                let i = rng.random_range(0..s.len());
                match rng.random_range(0..3) {
                    0 => {
                        s.remove(i);
                    }
                    1 => s.insert(i, char::from(rng.random_range(32u8..127))),
                    _ => s[i] = char::from(rng.random_range(32u8..127)),
                }
            }
            s.into_iter().collect()
        }
    }
}

fn parser_robustness() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    let fuzz = panic::catch_unwind(AssertUnwindSafe(|| {
        let mut accepted = 0;
        for _ in 0..100_000 {
            let text = random_text(&mut rng);
            match parse(&text) {
                Ok(r) => {
                    assert_eq!(r.boxes().len(), r.points().len());
                    accepted += 1;
                }
                Err(
                    FormatError::MissingThink
                    | FormatError::MissingAnswer
                    | FormatError::WrongOrder
                    | FormatError::MalformedObjectList(_)
                    | FormatError::CoordinateOutOfRange(_),
                ) => {}
            }
        }
        accepted
    }));
    let Ok(accepted) = fuzz else {
        return Verdict::new(false, "parser panicked during fuzzing");
    };
    let mut worst: f64 = 0.0;
    let mut mismatches = 0;
    for i in 0..10_000 {
        let n = rng.random_range(0..6);
        let (b, p) = random_objects(&mut rng, n);
        let r = Response::new(format!("step {i}"), b, p).unwrap();
        match parse(&r.serialize()) {
            Ok(back) if back.len() == r.len() && back.reasoning() == r.reasoning() => {
                for (x, y) in back.boxes().iter().zip(r.boxes()) {
                    for (u, v) in x.coords().iter().zip(y.coords()) {
                        worst = worst.max((u - v).abs());
                    }
                }
                for (x, y) in back.points().iter().zip(r.points()) {
                    for (u, v) in x.coords().iter().zip(y.coords()) {
                        worst = worst.max((u - v).abs());
                    }
                }
            }
            _ => mismatches += 1,
        }
    }
    Verdict::new(
        mismatches == 0 && worst <= 5e-7 + 1e-15,
        format!("10^5 fuzz strings without panic ({accepted} accepted); 10^4 round trips, max coordinate error {worst:.1e}"),
    )
}

// 10 ------------------------------------------------------------------------

fn end_to_end_determinism() -> Verdict {
    let root = tempfile::tempdir().unwrap();
    let env = EnvConfig::default();
    let data = root.path().join("train.jsonl");
    save_dataset(
        &generate_dataset(110, 200, DifficultyMix::Mixed, &env).unwrap(),
        &env,
        &data,
    )
    .unwrap();
    let mut cfg = RunConfig::default();
    cfg.data.train = data;
    cfg.output.dir = root.path().join("run");
    cfg.train.steps = 200;
    cfg.train.batch_size = 16;
    cfg.train.seed = 110;
    let config_path = root.path().join("run.toml");
    fs::write(&config_path, cfg.to_toml()).unwrap();
    let args = TrainArgs {
        config: config_path,
        out: None,
        no_revision: false,
        no_consolidation: false,
        no_postscale: false,
        omega: None,
        steps: None,
        seed: None,
    };
    let once = |dir: &Path| -> (Vec<u8>, Vec<u8>, PathBuf) {
        let run = commands::cmd_train(&args).unwrap();
        let out = (
            fs::read(run.metrics_path()).unwrap(),
            fs::read(run.final_checkpoint()).unwrap(),
            run.dir,
        );
        fs::remove_dir_all(dir).unwrap();
        out
    };
    let (m1, c1, _) = once(&cfg.output.dir);
    let (m2, c2, _) = once(&cfg.output.dir);
    let lines = m1.iter().filter(|b| **b == b'\n').count();
    Verdict::new(
        m1 == m2 && c1 == c2 && lines == 200,
        format!(
            "two cmd_train runs: metrics identical {} ({lines} lines), checkpoints identical {}",
            m1 == m2,
            c1 == c2
        ),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    match panic::catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => v,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict::new(false, format!("panicked: {msg}"))
        }
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let mut failed = 0;
    let mut report = |id: u32, name: &str, start: Instant, v: Verdict| {
        println!(
            "{} [{id:>2}] {name} ({:.1}s): {}",
            if v.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        );
        failed += u32::from(!v.pass);
    };

    let t = Instant::now();
    report(1, "assignment oracle", t, guarded(assignment_oracle));
    let t = Instant::now();
    report(
        2,
        "alignment cost and shaping signal",
        t,
        guarded(consolidation_suite),
    );
    let t = Instant::now();
    report(3, "surrogate gradient", t, guarded(gradient_check));
    let t = Instant::now();
    report(4, "baseline reduction", t, guarded(baseline_reduction));
    let t = Instant::now();
    report(
        5,
        "hard-case signal recovery",
        t,
        guarded(revision_recovers_hard_cases),
    );

    let t = Instant::now();
    let sweep = Sweep::new();
    let trained = panic::catch_unwind(AssertUnwindSafe(|| {
        let plain = sweep.runs("plain");
        let revision = sweep.runs("revision");
        let full = sweep.runs("full");
        (plain, revision, full)
    }));
    match trained {
        Ok((plain, revision, full)) => {
            report(
                6,
                "monotone ablation",
                t,
                monotone_ablation(&plain, &revision, &full, t),
            );
            let t = Instant::now();
            let nops = guarded(|| {
                let nops = sweep.runs("no-postscale");
                postscale_helps(&full, &nops)
            });
            report(7, "advantage post-scaling", t, nops);
            let t = Instant::now();
            report(
                8,
                "shaping signal distribution",
                t,
                guarded(|| shaping_distribution(&full)),
            );
        }
        Err(_) => {
            for (id, name) in [
                (6, "monotone ablation"),
                (7, "advantage post-scaling"),
                (8, "shaping signal distribution"),
            ] {
                report(id, name, t, Verdict::new(false, "training runs panicked"));
            }
        }
    }

    let t = Instant::now();
    report(9, "parser robustness", t, guarded(parser_robustness));
    let t = Instant::now();
    report(
        10,
        "end-to-end determinism",
        t,
        guarded(end_to_end_determinism),
    );

    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
