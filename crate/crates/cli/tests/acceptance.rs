//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Every expected value below is recomputed here from raw tensors
//! and plain arithmetic rather than taken from the library under test.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use facedistract::cam::ActivationStack;
use facedistract::classifier::{random_image, MiniNet, MiniNetConfig};
use facedistract::eval::{ids_rate, reid_rate, EvalRecord, Metric, VerificationConfig};
use facedistract::fixtures::{eval_fixtures, jittered_pose, random_placement, FaceParams, FixtureCounts};
use facedistract::geometry::{fit_similarity, procrustes_align, recover_pose_expression, LandmarkSet, Point};
use facedistract::ifa::{distract, DistractionConfig, DistractionMode};
use facedistract::losses::{
    adv_loss, appearance_loss, background_loss, feature_match_loss, identity_loss, perceptual_loss, total_loss,
    FeaturePair, HingeScores, LossInputs, LossMode, LossWeights,
};
use facedistract::sampler::{
    delegate_probabilities, sample_index, utility_appearance, utility_geometry, DpConfig, GalleryItem,
};
use facedistract::tensor::Tensor;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit_s: f64) -> Result<(), String> {
    ensure(elapsed.as_secs_f64() < limit_s, || {
        format!("took {:.2} s, limit {limit_s} s", elapsed.as_secs_f64())
    })
}

/// `max |sum_j alpha_j A^j|` over pixels, with `alpha = W[c] / Z`.
fn class_map_extent(net: &MiniNet, maps: &Tensor, c: usize) -> f64 {
    let (j_n, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    let z = (h * w) as f64;
    let row = &net.head_weight().data()[c * j_n..(c + 1) * j_n];
    (0..h * w)
        .map(|p| {
            (0..j_n)
                .map(|j| row[j] as f64 / z * maps.data()[j * h * w + p] as f64)
                .sum::<f64>()
                .abs()
        })
        .fold(0.0, f64::max)
}

/// Zero-bias head logit: `W[c] . GAP(A)`.
fn head_logit(net: &MiniNet, maps: &Tensor, c: usize) -> f64 {
    let (j_n, hw) = (maps.shape()[0], maps.shape()[1] * maps.shape()[2]);
    let row = &net.head_weight().data()[c * j_n..(c + 1) * j_n];
    (0..j_n)
        .map(|j| row[j] as f64 * maps.data()[j * hw..(j + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() / hw as f64)
        .sum()
}

fn c1_exact_nulling() -> Outcome {
    let start = Instant::now();
    let cfg = MiniNetConfig::default();
    let (mut worst_sum, mut worst_joint) = (0.0f64, 0.0f64);
    for trial in 0..1000u64 {
        let net = MiniNet::random(&cfg, trial);
        let (a, pred) = net
            .forward(&random_image(&cfg, 10_000 + trial))
            .map_err(|e| e.to_string())?;
        let r = distract(&net, &a, &pred, &DistractionConfig::top(1)).map_err(|e| e.to_string())?;
        let c = pred.top_k[0];
        let ratio = class_map_extent(&net, r.a_hat.maps(), c) / class_map_extent(&net, a.maps(), c).max(1.0);
        worst_sum = worst_sum.max(ratio);
        for k in 2..=4 {
            let cfg_k = DistractionConfig::top(k).with_mode(DistractionMode::ExactJoint);
            let r = distract(&net, &a, &pred, &cfg_k).map_err(|e| e.to_string())?;
            for &c in pred.top(k) {
                let ratio = class_map_extent(&net, r.a_hat.maps(), c) / class_map_extent(&net, a.maps(), c).max(1.0);
                worst_joint = worst_joint.max(ratio);
            }
        }
    }
    ensure(worst_sum < 1e-5, || format!("paper-sum K=1 worst ratio {worst_sum:e}"))?;
    ensure(worst_joint < 1e-5, || {
        format!("exact-joint K=2..4 worst ratio {worst_joint:e}")
    })?;
    within(start.elapsed(), 5.0)?;
    Ok(format!(
        "1000 trials, worst ratio paper-sum {worst_sum:.1e}, exact-joint {worst_joint:.1e}, {:.2} s",
        start.elapsed().as_secs_f64()
    ))
}

fn c2_logit_nulling() -> Outcome {
    let cfg = MiniNetConfig::default();
    let mut worst = 0.0f64;
    for trial in 0..1000u64 {
        let net = MiniNet::random(&cfg, trial);
        ensure(net.has_zero_bias(), || "head bias is not zero".into())?;
        let (a, pred) = net
            .forward(&random_image(&cfg, 10_000 + trial))
            .map_err(|e| e.to_string())?;
        let r = distract(&net, &a, &pred, &DistractionConfig::top(1)).map_err(|e| e.to_string())?;
        let c = pred.top_k[0];
        let before = head_logit(&net, a.maps(), c);
        let after = head_logit(&net, r.a_hat.maps(), c);
        worst = worst.max(after.abs() / before.abs().max(1.0));
    }
    ensure(worst < 1e-4, || {
        format!("worst |y(A_hat)| / max(1, |y(A)|) = {worst:e}")
    })?;
    Ok(format!("1000 trials, worst relative top-1 logit {worst:.1e}"))
}

fn c3_gradient_oracle() -> Outcome {
    let cfg = MiniNetConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let net = MiniNet::random(&cfg, 500 + case);
        let shape = net.activation_shape();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let maps = Tensor::new(shape.to_vec(), data).map_err(|e| e.to_string())?;
        let a = ActivationStack::new(maps.clone()).map_err(|e| e.to_string())?;
        let c = rng.gen_range(0..cfg.n_classes);
        let grad = net.grad_wrt_activation(&a, c).map_err(|e| e.to_string())?;
        for idx in 0..n {
            let probe = |delta: f32| -> Result<(f64, f64), String> {
                let mut t = maps.clone();
                t.data_mut()[idx] += delta;
                let x = t.data()[idx] as f64;
                let s = net
                    .class_score(&ActivationStack::new(t).map_err(|e| e.to_string())?, c)
                    .map_err(|e| e.to_string())?;
                Ok((s, x))
            };
            let ((hi, xh), (lo, xl)) = (probe(1e-3)?, probe(-1e-3)?);
            let fd = (hi - lo) / (xh - xl);
            let an = grad.data()[idx] as f64;
            let rel = (fd - an).abs() / an.abs().max(1e-12);
            worst = worst.max(rel);
        }
    }
    ensure(worst < 1e-3, || format!("worst elementwise relative error {worst:e}"))?;
    Ok(format!("100 cases x 512 entries, worst relative error {worst:.1e}"))
}

fn c4_exponential_mechanism() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_sum = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=16);
        let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let eps = rng.gen_range(0.01..10.0);
        let p = delegate_probabilities(&u, &DpConfig::new(eps, 0)).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    ensure(worst_sum < 1e-9, || format!("probabilities sum off by {worst_sum:e}"))?;

    let p = delegate_probabilities(&[1.0, 0.0], &DpConfig::new(2.0, 0)).map_err(|e| e.to_string())?;
    let e = std::f64::consts::E;
    let expected = [e / (e + 1.0), 1.0 / (e + 1.0)];
    ensure((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4, || {
        format!("u=[1,0], eps=2 gave {p:?}")
    })?;
    ensure((p[0] - expected[0]).abs() < 1e-12, || {
        format!("{} vs {}", p[0], expected[0])
    })?;

    let mut worst_freq = 0.0f64;
    for (size, seed) in [(2usize, 40u64), (3, 41), (5, 42), (8, 43), (16, 44)] {
        let mut urng = ChaCha8Rng::seed_from_u64(seed);
        let u: Vec<f64> = (0..size).map(|_| urng.gen_range(0.0..1.0)).collect();
        let eps = 3.0;
        // Oracle: normalized exp(eps u / 2) without shifting.
        let w: Vec<f64> = u.iter().map(|x| (eps * x / 2.0).exp()).collect();
        let total: f64 = w.iter().sum();
        let p = delegate_probabilities(&u, &DpConfig::new(eps, 0)).map_err(|e| e.to_string())?;
        for (a, b) in p.iter().zip(&w) {
            ensure((a - b / total).abs() < 1e-12, || {
                format!("size {size}: {a} vs {}", b / total)
            })?;
        }
        let mut counts = vec![0usize; size];
        let mut draw = ChaCha8Rng::seed_from_u64(seed + 1000);
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_index(&p, &mut draw)] += 1;
        }
        for (c, q) in counts.iter().zip(&p) {
            worst_freq = worst_freq.max((*c as f64 / draws as f64 - q).abs());
        }
    }
    ensure(worst_freq <= 0.01, || format!("worst frequency deviation {worst_freq}"))?;
    within(start.elapsed(), 10.0)?;
    Ok(format!(
        "P(u=[1,0], eps=2) = [{:.4}, {:.4}], worst freq deviation {worst_freq:.4} over sizes 2..16, {:.2} s",
        p[0],
        p[1],
        start.elapsed().as_secs_f64()
    ))
}

fn c5_dp_ratio() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut report = Vec::new();
    for eps in [0.1, 1.0, 5.0] {
        let sensitivity = 1.0;
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let n = rng.gen_range(2..=16);
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let v: Vec<f64> = u
                .iter()
                .map(|x| x + rng.gen_range(-sensitivity..=sensitivity))
                .collect();
            let cfg = DpConfig {
                epsilon: eps,
                sensitivity,
                seed: 0,
            };
            let p = delegate_probabilities(&u, &cfg).map_err(|e| e.to_string())?;
            let q = delegate_probabilities(&v, &cfg).map_err(|e| e.to_string())?;
            for (a, b) in p.iter().zip(&q) {
                worst = worst.max(a / b).max(b / a);
            }
        }
        let bound = eps.exp();
        ensure(worst <= bound + 1e-9, || format!("eps {eps}: ratio {worst} > {bound}"))?;
        report.push(format!("eps {eps}: {worst:.4} <= {bound:.4}"));
    }
    Ok(report.join(", "))
}

fn c6_utilities() -> Outcome {
    let ua = utility_appearance(&[1.0, 3.0, 5.0]).map_err(|e| e.to_string())?.values;
    let ug = utility_geometry(&[1.0, 3.0, 5.0]).map_err(|e| e.to_string())?.values;
    ensure(ua == [1.0, 0.5, 0.0], || format!("u_a([1,3,5]) = {ua:?}"))?;
    ensure(ug == [0.0, 0.5, 1.0], || format!("u_g([1,3,5]) = {ug:?}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_complement = 0.0f64;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=16);
        let d: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..10.0)).collect();
        let ua = utility_appearance(&d).map_err(|e| e.to_string())?;
        let ug = utility_geometry(&d).map_err(|e| e.to_string())?;
        ensure(!ua.all_tied, || "random distances reported as tied".into())?;
        let (imin, imax) = (argmin(&d), argmax(&d));
        ensure(ua.values[imin] == 1.0 && ug.values[imax] == 1.0, || {
            format!("boundary values wrong for {d:?}")
        })?;
        ensure(ua.values[imax] == 0.0 && ug.values[imin] == 0.0, || {
            format!("boundary zeros wrong for {d:?}")
        })?;
        for (a, g) in ua.values.iter().zip(&ug.values) {
            ensure((0.0..=1.0).contains(a) && (0.0..=1.0).contains(g), || {
                format!("out of range: {a}, {g}")
            })?;
            worst_complement = worst_complement.max((a + g - 1.0).abs());
        }
    }
    ensure(worst_complement < 1e-12, || {
        format!("u_a + u_g off by {worst_complement:e}")
    })?;
    Ok(format!(
        "hand values exact, worst |u_a + u_g - 1| = {worst_complement:.1e}"
    ))
}

fn argmin(v: &[f64]) -> usize {
    (0..v.len()).min_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

fn argmax(v: &[f64]) -> usize {
    (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap()
}

const INNER_PAIRS: [(usize, usize); 3] = [(61, 67), (62, 66), (63, 65)];
// Outer lip point 48 + i pairs with inner lip point PARTNER[i].
const PARTNER: [usize; 12] = [60, 61, 61, 62, 63, 63, 64, 65, 65, 66, 67, 67];

fn opening(s: &[Point]) -> f64 {
    INNER_PAIRS.iter().map(|&(u, l)| s[l][1] - s[u][1]).sum::<f64>() / 3.0
}

fn thickness(s: &[Point]) -> Vec<Point> {
    (0..12)
        .map(|i| [s[48 + i][0] - s[PARTNER[i]][0], s[48 + i][1] - s[PARTNER[i]][1]])
        .collect()
}

fn c7_gsa_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut worst_mouth, mut worst_lips) = (0.0f64, 0.0f64);
    for pair in 0..200usize {
        let bucket = pair % 3;
        let make = |rng: &mut ChaCha8Rng| -> Result<LandmarkSet, String> {
            let pose = jittered_pose(rng, bucket);
            let (scale, center) = random_placement(rng);
            let open = rng.gen_range(0.0..0.12);
            FaceParams::random_shape(rng)
                .with_open(open)
                .landmarks(&pose, scale, center)
                .map_err(|e| e.to_string())
        };
        let s = make(&mut rng)?;
        let d = make(&mut rng)?;
        let (s_bar, _) = procrustes_align(&d, &s).map_err(|e| e.to_string())?;
        let out = recover_pose_expression(&s, &s_bar).map_err(|e| e.to_string())?;
        let (sp, bp, op) = (s.points(), s_bar.points(), out.points());

        ensure(op[..17] == sp[..17], || format!("pair {pair}: contour differs"))?;
        worst_mouth = worst_mouth.max((opening(op) - opening(sp)).abs());
        for (a, b) in thickness(op).iter().zip(thickness(bp)) {
            worst_lips = worst_lips.max((a[0] - b[0]).abs()).max((a[1] - b[1]).abs());
        }
        ensure(op != bp && op != sp, || format!("pair {pair}: output equals an input"))?;
    }
    ensure(worst_mouth < 1e-6, || format!("mouth opening off by {worst_mouth:e}"))?;
    ensure(worst_lips < 1e-6, || format!("lip thickness off by {worst_lips:e}"))?;

    let mut worst_fit = 0.0f64;
    for _ in 0..200 {
        let pose = jittered_pose(&mut rng, 1);
        let s = FaceParams::random_shape(&mut rng)
            .landmarks(&pose, 40.0, [64.0, 64.0])
            .map_err(|e| e.to_string())?;
        let theta: f64 = rng.gen_range(-3.0..3.0);
        let scale: f64 = rng.gen_range(0.3..3.0);
        let t = [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)];
        let (sin, cos) = theta.sin_cos();
        let moved: Vec<Point> = s
            .points()
            .iter()
            .map(|p| {
                [
                    scale * (cos * p[0] - sin * p[1]) + t[0],
                    scale * (sin * p[0] + cos * p[1]) + t[1],
                ]
            })
            .collect();
        let fit = fit_similarity(s.points(), &moved).map_err(|e| e.to_string())?;
        let dtheta =
            (fit.rotation - theta + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
        worst_fit = worst_fit.max(dtheta.abs()).max((fit.scale - scale).abs());
    }
    ensure(worst_fit < 1e-4, || format!("Procrustes error {worst_fit:e}"))?;
    Ok(format!(
        "200 pairs, mouth {worst_mouth:.1e}, lips {worst_lips:.1e}, Procrustes {worst_fit:.1e}"
    ))
}

fn oracle_rate(records: &[EvalRecord], gallery: &[GalleryItem], cfg: &VerificationConfig, same: bool) -> f64 {
    let mut hits = 0usize;
    for r in records {
        let a: Vec<f64> = r.anonymized_embedding.iter().map(|&x| x as f64).collect();
        let hit = gallery.iter().any(|g| {
            if (g.id == r.source_id) != same {
                return false;
            }
            let b: Vec<f64> = g.embedding.iter().map(|&x| x as f64).collect();
            match cfg.metric {
                Metric::Cosine => {
                    let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
                    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    dot / (na * nb) > cfg.threshold
                }
                Metric::L2 => a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt() < cfg.threshold,
            }
        });
        hits += hit as usize;
    }
    100.0 * hits as f64 / records.len() as f64
}

fn c8_metric_oracle() -> Outcome {
    let (gallery, records) = eval_fixtures(8, &FixtureCounts::default());
    ensure(records.len() == 50 && gallery.len() == 100, || {
        format!("toy set has {} records, {} embeddings", records.len(), gallery.len())
    })?;
    let mut cells = Vec::new();
    let mut reid = Vec::new();
    let mut ids = Vec::new();
    for cfg in VerificationConfig::standard_configs() {
        let r = reid_rate(&records, &gallery, &cfg).map_err(|e| e.to_string())?.rate;
        let i = ids_rate(&records, &gallery, &cfg).map_err(|e| e.to_string())?.rate;
        let (ro, io) = (
            oracle_rate(&records, &gallery, &cfg, true),
            oracle_rate(&records, &gallery, &cfg, false),
        );
        ensure(r == ro && i == io, || {
            format!("{cfg}: ({r}, {i}) vs oracle ({ro}, {io})")
        })?;
        cells.push(format!("{cfg} ({r:.0}, {i:.0})"));
        reid.push(r);
        ids.push(i);
    }
    // Configs are cosine 0.30, 0.35 then l2 0.9, 1.0, 1.1.
    ensure(reid[1] <= reid[0] && ids[1] <= ids[0], || {
        "cosine rates not monotone".into()
    })?;
    ensure(reid[2] <= reid[3] && reid[3] <= reid[4], || {
        "l2 ReID not monotone".into()
    })?;
    ensure(ids[2] <= ids[3] && ids[3] <= ids[4], || "l2 IDS not monotone".into())?;
    Ok(cells.join(", "))
}

fn v(data: &[f32]) -> Tensor {
    Tensor::vector(data.to_vec()).unwrap()
}

fn c9_losses() -> Outcome {
    let w = LossWeights::default();
    let close = |a: f64, b: f64| (a - b).abs() < 1e-6;
    let hinge = |real: f64, fake: f64| HingeScores {
        real: vec![real],
        fake: vec![fake],
    };

    // max(0, 1 + 0.5) + max(0, 1 - 2) = 1.5, and -D(fake) = -0.5.
    let rec = LossInputs {
        adversarial: Some(hinge(2.0, 0.5)),
        ..LossInputs::default()
    };
    let adv = adv_loss(&rec, &w).map_err(|e| e.to_string())?;
    ensure(close(adv.generator, 1.5) && close(adv.discriminator, -0.5), || {
        format!("hinge {adv:?}")
    })?;
    let saturated = LossInputs {
        adversarial: Some(hinge(1.0, -1.0)),
        ..LossInputs::default()
    };
    ensure(
        close(adv_loss(&saturated, &w).map_err(|e| e.to_string())?.generator, 0.0),
        || "saturated hinge".into(),
    )?;
    // Cycle: 0.6 * (1.5 - 0.5) + (2 + 0) = 2.6.
    let cyc = LossInputs {
        mode: LossMode::Cycle,
        adversarial: Some(hinge(2.0, 0.5)),
        adversarial_back: Some(hinge(0.0, 0.0)),
        ..LossInputs::default()
    };
    let total = adv_loss(&cyc, &w).map_err(|e| e.to_string())?.total();
    ensure(close(total, 2.6), || format!("cycle adversarial {total}"))?;

    let fm = feature_match_loss(&[v(&[1.0, 2.0])], &[v(&[2.0, 4.0])]).map_err(|e| e.to_string())?;
    ensure(close(fm, 1.5), || format!("feature matching {fm}"))?;
    let fm0 = feature_match_loss(&[v(&[0.3, 0.1])], &[v(&[0.3, 0.1])]).map_err(|e| e.to_string())?;
    ensure(fm0 == 0.0, || format!("feature matching on equal inputs {fm0}"))?;

    // Two networks, forward distance 1 and backward distance 2: 2 * (0.8 + 2) = 5.6.
    let pairs = |d: f32| vec![FeaturePair::new(v(&[0.0, 0.0]), v(&[d, 0.0])); 2];
    let perc = LossInputs {
        mode: LossMode::Cycle,
        perceptual: Some(vec![pairs(1.0)]),
        perceptual_back: Some(vec![pairs(2.0)]),
        ..LossInputs::default()
    };
    let p = perceptual_loss(&perc, &w).map_err(|e| e.to_string())?;
    ensure(close(p, 5.6), || format!("cycle perceptual {p}"))?;

    let a1 = appearance_loss(&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]).map_err(|e| e.to_string())?;
    let a2 = appearance_loss(&[1.0, 0.0], &[0.0, 2.0], &[1.0, 0.0]).map_err(|e| e.to_string())?;
    ensure(a1 == 0.0 && close(a2, 4.0), || format!("appearance {a1}, {a2}"))?;

    let id = LossInputs {
        identity: Some(vec![FeaturePair::new(v(&[0.0, 3.0]), v(&[4.0, 0.0]))]),
        ..LossInputs::default()
    };
    let i = identity_loss(&id, &w).map_err(|e| e.to_string())?;
    ensure(close(i, 5.0), || format!("identity {i}"))?;
    let id_cycle = LossInputs {
        mode: LossMode::Cycle,
        identity: Some(vec![FeaturePair::new(v(&[0.0]), v(&[1.0]))]),
        identity_back: Some(vec![FeaturePair::new(v(&[0.0]), v(&[3.0]))]),
        ..LossInputs::default()
    };
    let ic = identity_loss(&id_cycle, &w).map_err(|e| e.to_string())?;
    ensure(close(ic, 5.0), || format!("cycle identity {ic}"))?;

    let b = background_loss(&v(&[0.0, 0.0]), &v(&[1.0, 3.0])).map_err(|e| e.to_string())?;
    let b0 = background_loss(&v(&[0.5, 0.5]), &v(&[0.5, 0.5])).map_err(|e| e.to_string())?;
    ensure(close(b, 2.0) && b0 == 0.0, || format!("background {b}, {b0}"))?;

    let unit = total_loss(&[1.0; 6], &w);
    let zero = total_loss(&[0.0; 6], &w);
    ensure(close(unit, 8.0) && zero == 0.0, || format!("total {unit}, {zero}"))?;
    Ok(format!(
        "hinge 1.5/-0.5, cycle adv 2.6, perceptual 5.6, identity 5, background 2, total {unit}"
    ))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_facedistract"))
}

fn run_ok(cmd: &mut Command) -> Result<String, String> {
    let out = cmd.output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn c10_sweep_k(dir: &Path) -> Outcome {
    let fx = dir.join("sweep");
    run_ok(bin().args(["--seed", "10", "fixtures", "--out"]).arg(&fx))?;
    let csv_path = fx.join("sweep.csv");
    let start = Instant::now();
    run_ok(
        bin()
            .arg("--config")
            .arg(fx.join("config.json"))
            .args(["sweep-k", "--k-min", "1", "--k-max", "10", "--out"])
            .arg(&csv_path),
    )?;
    let elapsed = start.elapsed();
    let csv = fs::read_to_string(&csv_path).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap_or_default().split(',').collect();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| *h == name)
            .ok_or(format!("missing column {name}"))
    };
    let (ck, cmode, cnull, cres, creid) = (
        col("k")?,
        col("mode")?,
        col("nulled_classes")?,
        col("max_residual")?,
        col("reid_pct")?,
    );
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s}: {e}"));

    let joint: Vec<&Vec<String>> = rows.iter().filter(|r| r[cmode] == "exact-joint").collect();
    ensure(joint.len() == 10, || format!("{} exact-joint rows", joint.len()))?;
    let mut nulled = Vec::new();
    let mut reid = Vec::new();
    for r in &joint {
        nulled.push(num(&r[cnull])?);
        reid.push(num(&r[creid])?);
    }
    ensure(nulled.windows(2).all(|w| w[1] >= w[0]), || {
        format!("nulled counts not monotone: {nulled:?}")
    })?;
    let k1 = rows
        .iter()
        .find(|r| r[ck] == "1" && r[cmode] == "paper-sum")
        .ok_or("no K=1 paper-sum row")?;
    ensure(num(&k1[cres])? < 1e-5, || format!("K=1 residual {}", k1[cres]))?;
    within(elapsed, 30.0)?;
    Ok(format!(
        "{} rows in {:.2} s, exact-joint nulled {:?}, ReID% trend {:?} (reported)",
        rows.len(),
        elapsed.as_secs_f64(),
        nulled,
        reid
    ))
}

fn c11_determinism(dir: &Path) -> Outcome {
    let mut outputs = Vec::new();
    for name in ["det_a", "det_b"] {
        let fx = dir.join(name);
        run_ok(bin().args(["--seed", "11", "fixtures", "--out"]).arg(&fx))?;
        run_ok(bin().arg("--config").arg(fx.join("config.json")).arg("run"))?;
        outputs.push(fx);
    }
    let files = [
        "gallery.jsonl",
        "inputs.jsonl",
        "records.jsonl",
        "out/triples.jsonl",
        "out/audit.json",
        "out/records.jsonl",
        "out/references.jsonl",
        "out/report.json",
    ];
    let mut bytes = 0usize;
    for f in files {
        let a = fs::read(outputs[0].join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(outputs[1].join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, || format!("{f} differs"))?;
        bytes += a.len();
    }
    Ok(format!("{} files, {bytes} bytes identical", files.len()))
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("exact nulling", Box::new(c1_exact_nulling)),
        ("logit nulling", Box::new(c2_logit_nulling)),
        ("gradient oracle", Box::new(c3_gradient_oracle)),
        ("exponential mechanism", Box::new(c4_exponential_mechanism)),
        ("DP ratio bound", Box::new(c5_dp_ratio)),
        ("utility functions", Box::new(c6_utilities)),
        ("GSA invariants", Box::new(c7_gsa_invariants)),
        ("metric oracle", Box::new(c8_metric_oracle)),
        ("loss formulas", Box::new(c9_losses)),
        ("K-sweep report", Box::new(|| c10_sweep_k(dir.path()))),
        ("determinism", Box::new(|| c11_determinism(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
