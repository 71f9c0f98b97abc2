//! Benchmark generator: determinism, semantic invariance across styles,
//! measurable domain shift, and the bit-exact disk round trip.

use coast_core::data::{
    channel_means, export_benchmark, generate_scene, import_benchmark, make_benchmark,
    render_domain, DataConfig, DatasetRole, DomainSpec, SceneParams,
};
use coast_core::CoastError;

fn small_config() -> DataConfig {
    DataConfig {
        h: 16,
        w: 16,
        num_targets: 2,
        source_size: 40,
        target_size: 30,
        unseen_size: 12,
        eval_size: 12,
        seed: 5,
        ..DataConfig::default()
    }
}

#[test]
fn scene_generation_is_deterministic() {
    let p = SceneParams::default();
    let a = generate_scene(42, 32, 32, 4, &p).unwrap();
    let b = generate_scene(42, 32, 32, 4, &p).unwrap();
    assert_eq!(a, b);
    let c = generate_scene(43, 32, 32, 4, &p).unwrap();
    assert_ne!(a.label_map, c.label_map);
}

#[test]
fn zero_shapes_gives_all_background() {
    let p = SceneParams { shapes_per_class: 0, extra_shapes: 0, ..SceneParams::default() };
    let s = generate_scene(1, 16, 16, 2, &p).unwrap();
    assert!(s.label_map.iter().all(|&c| c == 0));
}

#[test]
fn every_class_occurs_in_most_scenes() {
    let p = SceneParams::default();
    let k = 3;
    let mut present = vec![0usize; k];
    let n = 1000;
    for seed in 0..n {
        let s = generate_scene(seed as u64, 32, 32, k, &p).unwrap();
        let mut seen = vec![false; k];
        for &c in &s.label_map {
            seen[c as usize] = true;
        }
        for c in 0..k {
            if seen[c] {
                present[c] += 1;
            }
        }
    }
    for c in 0..k {
        assert!(
            present[c] as f64 >= 0.95 * n as f64,
            "class {c} present in only {} of {n} scenes",
            present[c]
        );
    }
}

#[test]
fn background_share_is_bounded() {
    let p = SceneParams::default();
    let mut total_bg = 0usize;
    let mut total = 0usize;
    for seed in 0..300 {
        let s = generate_scene(1000 + seed, 32, 32, 4, &p).unwrap();
        total_bg += s.label_map.iter().filter(|&&c| c == 0).count();
        total += s.label_map.len();
    }
    let share = total_bg as f64 / total as f64;
    assert!(share <= 0.70, "background share {share}");
}

#[test]
fn palette_bound_is_enforced() {
    let p = SceneParams::default();
    assert!(matches!(
        generate_scene(1, 16, 16, 9, &p),
        Err(CoastError::PaletteExceeded { .. })
    ));
}

#[test]
fn identity_spec_renders_canonical() {
    let scene = generate_scene(7, 16, 16, 4, &SceneParams::default()).unwrap();
    let spec = DomainSpec {
        domain_id: "id".into(),
        gain: [1.0; 3],
        bias: [0.0; 3],
        gamma: 1.0,
        noise_std: 0.0,
        seed: 9,
    };
    let img = render_domain(&scene, &spec).unwrap();
    for (a, b) in img.values.iter().zip(&scene.canonical.values) {
        assert!((a - b).abs() < 1e-7);
    }
}

#[test]
fn rendering_is_deterministic_and_label_invariant() {
    let scene = generate_scene(8, 16, 16, 4, &SceneParams::default()).unwrap();
    let mk = |id: &str, gamma: f64| DomainSpec {
        domain_id: id.into(),
        gain: [1.1, 0.9, 0.8],
        bias: [0.02, 0.0, -0.02],
        gamma,
        noise_std: 0.05,
        seed: 11,
    };
    let a1 = render_domain(&scene, &mk("a", 0.8)).unwrap();
    let a2 = render_domain(&scene, &mk("a", 0.8)).unwrap();
    assert_eq!(a1, a2);
    // styling never alters the label map: it lives on the scene
    let labels_before = scene.label_map.clone();
    let _ = render_domain(&scene, &mk("b", 1.4)).unwrap();
    assert_eq!(scene.label_map, labels_before);
}

#[test]
fn bias_shift_moves_channel_means() {
    let scene = generate_scene(9, 32, 32, 4, &SceneParams::default()).unwrap();
    let mk = |bias: f64| DomainSpec {
        domain_id: format!("b{bias}"),
        gain: [1.0; 3],
        bias: [bias; 3],
        gamma: 1.0,
        noise_std: 0.0,
        seed: 3,
    };
    let base = render_domain(&scene, &mk(0.0)).unwrap();
    let shifted = render_domain(&scene, &mk(0.3)).unwrap();
    let hw = 32 * 32;
    for c in 0..3 {
        let mut diff = 0.0;
        let mut count = 0usize;
        for p in 0..hw {
            let (a, b) = (base.values[c * hw + p], shifted.values[c * hw + p]);
            // restrict to the unclipped region of both renderings
            if a > 0.0 && a < 1.0 && b > 0.0 && b < 1.0 {
                diff += (b - a) as f64;
                count += 1;
            }
        }
        assert!(count > hw / 2);
        assert!((diff / count as f64 - 0.3).abs() < 1e-3, "channel {c}");
    }
}

#[test]
fn benchmark_cardinality_and_labeling() {
    let bench = make_benchmark(&small_config()).unwrap();
    assert_eq!(bench.targets.len(), 2);
    assert_eq!(bench.target_specs.len(), 2);
    // three distinct training specs plus one unseen spec
    let mut ids: Vec<&str> = vec![bench.source_spec.domain_id.as_str()];
    ids.extend(bench.target_specs.iter().map(|s| s.domain_id.as_str()));
    ids.push(bench.unseen_spec.domain_id.as_str());
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 4);

    assert!(bench.source.is_source);
    assert!(bench.source.samples.iter().all(|s| s.label.is_some()));
    for t in &bench.targets {
        assert_eq!(t.role, DatasetRole::Train);
        assert!(t.samples.iter().all(|s| s.label.is_none()));
    }
    for e in &bench.target_eval {
        assert_eq!(e.role, DatasetRole::Eval);
        assert!(e.samples.iter().all(|s| s.label.is_some()));
    }
    assert!(bench.unseen_eval.samples.iter().all(|s| s.label.is_some()));
}

#[test]
fn benchmark_is_deterministic() {
    let a = make_benchmark(&small_config()).unwrap();
    let b = make_benchmark(&small_config()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn duplicate_domain_ids_are_rejected() {
    let mut cfg = small_config();
    let mut specs = Vec::new();
    for i in 0..4 {
        specs.push(DomainSpec {
            domain_id: if i < 2 { "dup".into() } else { format!("d{i}") },
            gain: [1.0; 3],
            bias: [0.0; 3],
            gamma: 1.0,
            noise_std: 0.0,
            seed: i as u64,
        });
    }
    cfg.domain_specs = Some(specs);
    assert!(matches!(make_benchmark(&cfg), Err(CoastError::DuplicateDomain(_))));
}

#[test]
fn per_domain_channel_means_are_separated() {
    let mut cfg = DataConfig {
        source_size: 200,
        target_size: 200,
        unseen_size: 10,
        eval_size: 10,
        ..DataConfig::default()
    };
    cfg.seed = 23;
    let bench = make_benchmark(&cfg).unwrap();
    let mut domains: Vec<(String, Vec<[f64; 3]>)> = Vec::new();
    domains.push((
        "source".into(),
        bench.source.samples.iter().map(|s| channel_means(&s.image)).collect(),
    ));
    for t in &bench.targets {
        domains
            .push((t.domain_id.clone(), t.samples.iter().map(|s| channel_means(&s.image)).collect()));
    }
    let stats = |feats: &[[f64; 3]]| {
        let n = feats.len() as f64;
        let mut mean = [0.0; 3];
        let mut var = [0.0; 3];
        for f in feats {
            for c in 0..3 {
                mean[c] += f[c] / n;
            }
        }
        for f in feats {
            for c in 0..3 {
                var[c] += (f[c] - mean[c]).powi(2) / n;
            }
        }
        (mean, var)
    };
    for i in 0..domains.len() {
        for j in i + 1..domains.len() {
            let (mi, vi) = stats(&domains[i].1);
            let (mj, vj) = stats(&domains[j].1);
            let n = domains[i].1.len() as f64;
            let separated = (0..3).any(|c| {
                let se = ((vi[c] + vj[c]) / n).sqrt();
                (mi[c] - mj[c]).abs() > 3.0 * se
            });
            assert!(separated, "domains {} and {} overlap", domains[i].0, domains[j].0);
        }
    }
}

#[test]
fn nearest_neighbor_identifies_domains() {
    let cfg = DataConfig {
        h: 16,
        w: 16,
        num_targets: 2,
        source_size: 60,
        target_size: 60,
        unseen_size: 8,
        eval_size: 30,
        seed: 31,
        ..DataConfig::default()
    };
    let bench = make_benchmark(&cfg).unwrap();
    // train features: source + target train sets; held-out: eval sets + source tail
    let mut train: Vec<([f64; 3], usize)> = Vec::new();
    let mut held: Vec<([f64; 3], usize)> = Vec::new();
    for (i, s) in bench.source.samples.iter().enumerate() {
        let f = channel_means(&s.image);
        if i < 40 {
            train.push((f, 0));
        } else {
            held.push((f, 0));
        }
    }
    for (d, (t, e)) in bench.targets.iter().zip(&bench.target_eval).enumerate() {
        for s in &t.samples {
            train.push((channel_means(&s.image), d + 1));
        }
        for s in &e.samples {
            held.push((channel_means(&s.image), d + 1));
        }
    }
    let mut correct = 0;
    for (f, label) in &held {
        let mut best = (f64::INFINITY, 0usize);
        for (g, l) in &train {
            let d2: f64 = (0..3).map(|c| (f[c] - g[c]).powi(2)).sum();
            if d2 < best.0 {
                best = (d2, *l);
            }
        }
        if best.1 == *label {
            correct += 1;
        }
    }
    let acc = correct as f64 / held.len() as f64;
    assert!(acc > 0.9, "domain identification accuracy {acc}");
}

#[test]
fn export_import_round_trip_is_bit_exact() {
    let bench = make_benchmark(&small_config()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let second = dir.path().join("b");
    export_benchmark(&bench, &first).unwrap();
    let loaded = import_benchmark(&first).unwrap();
    assert_eq!(bench, loaded);
    export_benchmark(&loaded, &second).unwrap();

    let mut names: Vec<String> = std::fs::read_dir(&first)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut names_b: Vec<String> = std::fs::read_dir(&second)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names_b.sort();
    assert_eq!(names, names_b);
    for name in names {
        let a = std::fs::read(first.join(&name)).unwrap();
        let b = std::fs::read(second.join(&name)).unwrap();
        assert_eq!(a, b, "file {name} differs after round trip");
    }
}
