//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when a criterion outside `EXPECTED_FAILURES` fails.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use teamfuse::ccl::{argmax_labels, connected_components, Connectivity, LabelMap, SegmentationScores};
use teamfuse::consensus::{clique_partition_exact, clique_partition_greedy, fuse_dataset, fuse_detections, DetectionGraph, Edge};
use teamfuse::diversity::{
    build_correctness_table, nonpairwise_focal_negative_correlation, pairwise_focal_negative_correlation, rank_teams,
    CorrectnessTable, DiversityMetric, DiversityOptions,
};
use teamfuse::evaluation::{average_precision, mean_average_precision, EvalConfig, Interpolation};
use teamfuse::io::{encode_segf, to_json, DetectionFile, GroundTruthFile};
use teamfuse::synthetic::{clone_detector, ground_truth, noisy_detector, DetectorNoise, SceneConfig};
use teamfuse::vulnerability::{norm, verify_theory, worst_case_linear_perturbation, PNorm, TheoryGrid};
use teamfuse::{BBox, ClassLabel, ConsensusConfig, Detection, EnsembleTeam, GroundTruthObject, ImageId, ModelId, ModelOutput};

/// Criteria that cannot hold as stated. 6c asks two-member pairwise and
/// non-pairwise scores to coincide, but with two members the non-pairwise
/// score is a/(2-a) for pairwise score a, so they agree only at a = 0 or 1.
const EXPECTED_FAILURES: &[&str] = &["6c"];

struct Outcome {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
}

fn timed(
    id: &'static str,
    title: &'static str,
    limit_s: Option<f64>,
    check: impl FnOnce() -> (bool, String),
) -> Outcome {
    let start = Instant::now();
    let (mut pass, mut detail) = check();
    let secs = start.elapsed().as_secs_f64();
    match limit_s {
        Some(limit) => {
            detail = format!("{detail}; {secs:.2} s (limit {limit} s)");
            pass &= secs < limit;
        }
        None => detail = format!("{detail}; {secs:.2} s"),
    }
    Outcome { id, title, pass, detail }
}

// 1 ------------------------------------------------------------------------

fn closed_form_grid() -> (bool, String) {
    let grid = TheoryGrid::default();
    let rows = verify_theory(&grid).expect("grid runs");
    let within = rows.iter().filter(|r| r.report.relative_error_sq <= 0.02).count();
    let worst = rows.iter().map(|r| r.report.relative_error_sq).fold(0.0, f64::max);
    let limits = rows.iter().all(|r| {
        let n = r.team_size as f64;
        let inv_n = r.correlation != 0.0 || (r.theoretical_sq - 1.0 / n).abs() < 1e-12;
        let sigma = r.correlation != 1.0 || (r.theoretical_sq - 1.0).abs() < 1e-12;
        inv_n && sigma
    });
    (
        rows.len() == 16 && within == 16 && limits,
        format!(
            "{within}/{} cells within 2% (worst {:.3}%), 1/N and sigma^2 limits {}",
            rows.len(),
            worst * 100.0,
            if limits { "hold" } else { "violated" }
        ),
    )
}

// 2 ------------------------------------------------------------------------

fn fused_confidence() -> (bool, String) {
    let boxes = [[10.0, 10.0, 50.0, 50.0], [11.0, 10.0, 51.0, 49.0], [10.0, 12.0, 49.0, 51.0]];
    let outputs: Vec<ModelOutput> = [("a", 0.420), ("b", 0.328), ("c", 0.993)]
        .iter()
        .zip(boxes)
        .map(|(&(m, conf), b)| {
            let mut o = ModelOutput::new(m);
            o.push("img", Detection::new(1, conf, BBox::from_array(b), m));
            o
        })
        .collect();
    let fused = fuse_detections(&outputs, &ConsensusConfig::default()).expect("fusion runs");
    let lead = fused.iter().find(|d| d.model_id.as_str() == "c").map(|d| d.confidence);
    match lead {
        Some(c) => ((c - 0.580).abs() <= 0.001, format!("fused confidence {c:.5}")),
        None => (false, "no fused detection".into()),
    }
}

// 3 ------------------------------------------------------------------------

fn random_graph(rng: &mut ChaCha8Rng) -> DetectionGraph {
    let n = rng.random_range(1..=8);
    let models = rng.random_range(1..=4);
    let vertices: Vec<Detection> = (0..n)
        .map(|_| {
            let m = format!("m{}", rng.random_range(0..models));
            Detection::new(1, rng.random_range(0.1..1.0), BBox::new(0.0, 0.0, 1.0, 1.0), m.as_str())
        })
        .collect();
    let density = rng.random_range(0.2..1.0);
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            if vertices[a].model_id != vertices[b].model_id && rng.random::<f64>() < density {
                edges.push(Edge { a, b, weight: rng.random_range(0.5..1.0) });
            }
        }
    }
    DetectionGraph::from_parts(1, vertices, edges).expect("valid graph")
}

/// Best partition weight by dynamic programming over vertex subsets.
fn oracle_weight(g: &DetectionGraph) -> f64 {
    let n = g.len();
    let full = (1usize << n) - 1;
    let mut inner: Vec<Option<f64>> = vec![None; 1 << n];
    'masks: for mask in 1..=full {
        let vs: Vec<usize> = (0..n).filter(|v| mask >> v & 1 == 1).collect();
        let mut w = 0.0;
        for (i, &u) in vs.iter().enumerate() {
            for &v in &vs[i + 1..] {
                match g.weight(u, v) {
                    Some(x) if g.vertices()[u].model_id != g.vertices()[v].model_id => w += x,
                    _ => continue 'masks,
                }
            }
        }
        inner[mask] = Some(w);
    }
    let mut best = vec![0.0f64; 1 << n];
    for mask in 1..=full {
        let low = mask & mask.wrapping_neg();
        let rest = mask ^ low;
        let mut sub = rest;
        let mut top = f64::NEG_INFINITY;
        loop {
            if let Some(w) = inner[sub | low] {
                top = top.max(w + best[mask ^ (sub | low)]);
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        best[mask] = top;
    }
    best[full]
}

fn clique_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut greedy_sum, mut oracle_sum) = (0.0, 0.0);
    let (mut small, mut small_ok, mut exact_ok, mut per_instance_90) = (0, 0, 0, 0);
    for _ in 0..1000 {
        let g = random_graph(&mut rng);
        let oracle = oracle_weight(&g);
        let greedy = g.partition_weight(&clique_partition_greedy(&g));
        let exact = g.partition_weight(&clique_partition_exact(&g).expect("small graph"));
        greedy_sum += greedy;
        oracle_sum += oracle;
        exact_ok += usize::from((exact - oracle).abs() < 1e-9);
        per_instance_90 += usize::from(greedy >= 0.9 * oracle - 1e-12);
        if g.len() <= 3 {
            small += 1;
            small_ok += usize::from((greedy - oracle).abs() < 1e-9);
        }
    }
    let ratio = greedy_sum / oracle_sum;
    (
        ratio >= 0.9 && small_ok == small && exact_ok == 1000,
        format!(
            "greedy/oracle weight {:.4}; {small_ok}/{small} small graphs exact; exact search matches oracle on {exact_ok}/1000; \
             {per_instance_90}/1000 graphs individually at >= 90%",
            ratio
        ),
    )
}

// 4 ------------------------------------------------------------------------

fn flood_fill(map: &LabelMap, class: ClassLabel, eight: bool) -> Vec<u32> {
    let (h, w) = (map.height as i64, map.width as i64);
    let mut ids = vec![0u32; map.labels.len()];
    let mut next = 0;
    for start in 0..map.labels.len() {
        if map.labels[start] != class || ids[start] != 0 {
            continue;
        }
        next += 1;
        ids[start] = next;
        let mut queue = VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p as i64 / w, p as i64 % w);
            for dr in -1..=1i64 {
                for dc in -1..=1i64 {
                    if (dr, dc) == (0, 0) || (!eight && dr != 0 && dc != 0) {
                        continue;
                    }
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nr >= h || nc >= w {
                        continue;
                    }
                    let q = (nr * w + nc) as usize;
                    if map.labels[q] == class && ids[q] == 0 {
                        ids[q] = next;
                        queue.push_back(q);
                    }
                }
            }
        }
    }
    ids
}

fn random_map(rng: &mut ChaCha8Rng) -> SegmentationScores {
    let classes = rng.random_range(2..=4);
    let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
    let stick = rng.random_range(0.0..0.9);
    let mut labels = vec![0usize; h * w];
    for r in 0..h {
        for c in 0..w {
            labels[r * w + c] = if r > 0 && rng.random::<f64>() < stick / 2.0 {
                labels[(r - 1) * w + c]
            } else if c > 0 && rng.random::<f64>() < stick {
                labels[r * w + c - 1]
            } else {
                rng.random_range(0..classes)
            };
        }
    }
    let plane = h * w;
    let mut scores = vec![0.0f32; classes * plane];
    for (px, &l) in labels.iter().enumerate() {
        for k in 0..classes {
            scores[k * plane + px] = if k == l { rng.random_range(0.5..1.0) } else { rng.random_range(0.0..0.4) };
        }
    }
    SegmentationScores::new(classes, h, w, scores).expect("valid volume")
}

fn ccl_oracle() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2025);
    let (mut checks, mut agree) = (0, 0);
    for _ in 0..500 {
        let map = argmax_labels(&random_map(&mut rng));
        let top = map.labels.iter().copied().max().unwrap_or(0);
        for class in 1..=top {
            for (conn, eight) in [(Connectivity::Four, false), (Connectivity::Eight, true)] {
                checks += 1;
                let ids = connected_components(&map, class, conn).expect("foreground class").ids;
                agree += usize::from(ids == flood_fill(&map, class, eight));
            }
        }
    }
    (agree == checks, format!("{agree}/{checks} (map, class, connectivity) labellings identical"))
}

// 5 ------------------------------------------------------------------------

fn ap_fixtures() -> (bool, String) {
    let fixtures: [(&[bool], f64); 3] = [(&[true], 1.0), (&[true, false], 1.0), (&[false, true], 0.5)];
    let aps: Vec<f64> = fixtures
        .iter()
        .map(|(labels, _)| average_precision(labels, 1, Interpolation::AllPoint).expect("one GT"))
        .collect();
    let fixtures_ok = aps.iter().zip(&fixtures).all(|(ap, (_, want))| (ap - want).abs() <= 1e-9);

    let gt = ground_truth(&SceneConfig::default(), 31);
    let echo: Vec<(ImageId, Detection)> = gt
        .iter()
        .map(|g| (g.image_id.clone(), Detection::new(g.class_label, 1.0, g.bbox, "echo")))
        .collect();
    let report = mean_average_precision(&echo, &gt, &EvalConfig::coco_sweep(Interpolation::AllPoint)).expect("eval");
    let echo_ok = report.thresholds.iter().all(|t| (t.map - 1.0).abs() <= 1e-9);
    (
        fixtures_ok && echo_ok,
        format!(
            "fixture APs {:?}; GT echo mAP {} at {} thresholds",
            aps,
            if echo_ok { "1.0" } else { "below 1.0" },
            report.thresholds.len()
        ),
    )
}

// 6 ------------------------------------------------------------------------

fn table(vectors: &[Vec<bool>]) -> (CorrectnessTable, EnsembleTeam) {
    let ids: Vec<ModelId> = (0..vectors.len()).map(|i| ModelId::new(format!("m{i}"))).collect();
    let instances = (0..vectors[0].len()).map(|i| format!("g{i}")).collect();
    let t = CorrectnessTable::new(instances, ids.iter().cloned().zip(vectors.iter().cloned()).collect()).expect("table");
    (t, EnsembleTeam::new(ids).expect("distinct ids"))
}

fn random_vectors(rng: &mut ChaCha8Rng, models: usize) -> Vec<Vec<bool>> {
    let len = rng.random_range(1..60);
    let mut v: Vec<Vec<bool>> = (0..models).map(|_| (0..len).map(|_| rng.random()).collect()).collect();
    v[0][rng.random_range(0..len)] = false;
    v
}

fn identical_vectors() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let base = random_vectors(&mut rng, 1).remove(0);
        let n = rng.random_range(2..=6);
        let (t, team) = table(&vec![base; n]);
        let f = &team.members()[0];
        worst = worst
            .max(pairwise_focal_negative_correlation(&t, &team, f).expect("score"))
            .max(nonpairwise_focal_negative_correlation(&t, &team, f).expect("score"));
    }
    (worst == 0.0, format!("largest score over 200 identical teams {worst}"))
}

fn single_failures() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let mut lowest: f64 = 1.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=6);
        let mut v = random_vectors(&mut rng, n);
        // Every focal negative is failed by the focal model alone.
        for i in 0..v[0].len() {
            if !v[0][i] {
                for member in v.iter_mut().skip(1) {
                    member[i] = true;
                }
            }
        }
        let (t, team) = table(&v);
        lowest = lowest.min(nonpairwise_focal_negative_correlation(&t, &team, &team.members()[0]).expect("score"));
    }
    (lowest == 1.0, format!("smallest non-pairwise score over 200 tables {lowest}"))
}

fn two_member_agreement() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    let (mut agree, mut worst, mut relation): (usize, f64, f64) = (0, 0.0, 0.0);
    for _ in 0..200 {
        let (t, team) = table(&random_vectors(&mut rng, 2));
        let f = &team.members()[0];
        let a = pairwise_focal_negative_correlation(&t, &team, f).expect("score");
        let q = nonpairwise_focal_negative_correlation(&t, &team, f).expect("score");
        agree += usize::from((a - q).abs() <= 1e-9);
        worst = worst.max((a - q).abs());
        relation = relation.max((q - a / (2.0 - a)).abs());
    }
    (
        agree == 200,
        format!(
            "{agree}/200 tables agree to 1e-9 (largest gap {worst:.4}); non-pairwise = a/(2-a) holds to {relation:.1e}"
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn map_of(output: &ModelOutput, gt: &[GroundTruthObject]) -> f64 {
    mean_average_precision(&output.detections, gt, &EvalConfig::default()).expect("eval").map
}

fn without_detections(output: &ModelOutput) -> ModelOutput {
    ModelOutput::new(output.model_id.clone())
}

fn synthetic_demo() -> (bool, String) {
    let scene = SceneConfig { images: 100, classes: 3, ..Default::default() };
    let gt = ground_truth(&scene, 7);
    let noise = DetectorNoise::default();
    let mut pool: Vec<ModelOutput> =
        ["A", "B", "C", "D"].iter().enumerate().map(|(k, m)| noisy_detector(m, &gt, &scene, &noise, 70 + k as u64)).collect();
    pool.push(clone_detector(&pool[0], "A-clone"));
    let ids: Vec<ModelId> = pool.iter().map(|o| o.model_id.clone()).collect();
    let by_id = |id: &ModelId| pool.iter().find(|o| &o.model_id == id).expect("pool member").clone();
    let config = ConsensusConfig::default();

    let table = build_correctness_table(&pool, &gt, 0.5, 0.5).expect("table");
    let ranked =
        rank_teams(&ids, &table, 2, 3, DiversityMetric::NonPairwise, &DiversityOptions::normalized()).expect("rank");

    // (a) the most diverse three-member team
    let top3 = ranked.iter().find(|r| r.size == 3 && r.rank == 1).expect("size-3 teams");
    let members: Vec<ModelOutput> = top3.report.team.members().iter().map(by_id).collect();
    let fused = map_of(&fuse_dataset(&members, &config).expect("fuse"), &gt);
    let member_maps: Vec<f64> = members.iter().map(|m| map_of(m, &gt)).collect();
    let a_ok = member_maps.iter().all(|&m| fused > m);

    // (b) the clone pair among the two-member teams
    let pairs: Vec<_> = ranked.iter().filter(|r| r.size == 2).collect();
    let clone_pair = pairs
        .iter()
        .find(|r| r.report.team.contains(&ModelId::new("A")) && r.report.team.contains(&ModelId::new("A-clone")))
        .expect("clone pair team");
    let b_ok = clone_pair.rank == pairs.len()
        && pairs
            .iter()
            .filter(|r| r.rank != clone_pair.rank)
            .all(|r| r.report.d_focal_nonpairwise > clone_pair.report.d_focal_nonpairwise);

    // (c) each of A..D in turn loses all of its detections
    let four: Vec<ModelOutput> = pool[..4].to_vec();
    let intact = map_of(&fuse_dataset(&four, &config).expect("fuse"), &gt);
    let mut c_ok = true;
    let mut c_detail = Vec::new();
    for victim in 0..4 {
        let mut attacked = four.clone();
        attacked[victim] = without_detections(&four[victim]);
        let ensemble_drop = intact - map_of(&fuse_dataset(&attacked, &config).expect("fuse"), &gt);
        let victim_drop = map_of(&four[victim], &gt) - map_of(&attacked[victim], &gt);
        c_ok &= ensemble_drop < victim_drop;
        c_detail.push(format!("{}: {ensemble_drop:.3} vs {victim_drop:.3}", four[victim].model_id));
    }

    (
        a_ok && b_ok && c_ok,
        format!(
            "(a) team {} fused mAP {fused:.4} vs members {:?}; (b) clone pair ranked {}/{}; (c) ensemble vs victim drop {}",
            top3.report.team.label(),
            member_maps.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>(),
            clone_pair.rank,
            pairs.len(),
            c_detail.join(", ")
        ),
    )
}

// 8 ------------------------------------------------------------------------

fn dual_norm() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let (mut attained, mut dominated, mut total) = (0, 0, 0);
    for _ in 0..100 {
        let dim = rng.random_range(1..32);
        let g: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps = rng.random_range(0.01..2.0);
        for p in [PNorm::One, PNorm::Two, PNorm::Inf] {
            let best = worst_case_linear_perturbation(&g, p, eps).expect("perturbation");
            let gd: f64 = g.iter().zip(&best.delta).map(|(a, b)| a * b).sum();
            attained += usize::from(
                (gd - eps * norm(&g, p.dual())).abs() <= 1e-9 && norm(&best.delta, p) <= eps * (1.0 + 1e-12),
            );
            let mut ok = true;
            for _ in 0..1000 {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
                let scale = eps * rng.random::<f64>() / norm(&v, p);
                let value: f64 = g.iter().zip(&v).map(|(a, b)| a * b * scale).sum();
                ok &= value <= gd + 1e-9;
            }
            dominated += usize::from(ok);
            total += 1;
        }
    }
    (
        attained == total && dominated == total,
        format!("bound attained {attained}/{total}, dominates all samples {dominated}/{total}"),
    )
}

// 9 ------------------------------------------------------------------------

fn run_cli(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_teamfuse"))
        .args(args)
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn determinism() -> (bool, String) {
    let dir = tempfile::tempdir().expect("temp dir");
    let d = dir.path();
    let p = |name: &str| d.join(name).to_string_lossy().into_owned();
    let write = |name: &str, text: String| std::fs::write(d.join(name), text).expect("write");

    let scene = SceneConfig { images: 30, ..Default::default() };
    let gt = ground_truth(&scene, 90);
    let images: BTreeSet<ImageId> = gt.iter().map(|g| g.image_id.clone()).collect();
    write("gt.json", to_json(&GroundTruthFile::from_objects(&gt)));
    for (k, m) in ["a", "b", "c"].iter().enumerate() {
        let out = noisy_detector(m, &gt, &scene, &DetectorNoise::default(), 91 + k as u64);
        write(&format!("{m}.json"), to_json(&DetectionFile::from_model_output(&out, &images)));
    }
    std::fs::write(d.join("seg.segf"), encode_segf(&random_map(&mut ChaCha8Rng::seed_from_u64(92)))).expect("write");
    write(
        "theory.toml",
        "[theory]\nteam_sizes = [1, 4]\ncorrelations = [0.0, 0.5]\ndim = 64\ntrials = 500\ntolerance = 1.0\n".into(),
    );

    let commands: Vec<(&str, Vec<String>)> = vec![
        ("fuse", vec!["fuse".into(), p("a.json"), p("b.json"), p("c.json")]),
        ("align", vec!["align".into(), p("seg.segf"), "--minsize".into(), "1".into()]),
        ("rank", vec!["rank".into(), "--gt".into(), p("gt.json"), p("a.json"), p("b.json"), p("c.json")]),
        ("eval", vec!["eval".into(), p("a.json"), "--gt".into(), p("gt.json"), "--iou-sweep".into()]),
        (
            "verify-theory",
            vec!["--config".into(), p("theory.toml"), "verify-theory".into(), "--seed".into(), "5".into()],
        ),
    ];
    let mut same = Vec::new();
    for (name, args) in &commands {
        let outputs: Vec<Option<Vec<u8>>> = (0..2)
            .map(|run| {
                let target = p(&format!("{name}-{run}.out"));
                let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
                full.extend(["--output", &target]);
                run_cli(&full).then(|| std::fs::read(Path::new(&target)).expect("output file"))
            })
            .collect();
        let identical = outputs[0].is_some() && outputs[0] == outputs[1];
        same.push((name, identical));
    }
    (
        same.iter().all(|(_, ok)| *ok),
        same.iter()
            .map(|(n, ok)| format!("{n} {}", if *ok { "identical" } else { "DIFFERS" }))
            .collect::<Vec<_>>()
            .join(", "),
    )
}

fn main() -> ExitCode {
    let outcomes = vec![
        timed("1", "closed-form vulnerability grid", Some(30.0), closed_form_grid),
        timed("2", "mean fused confidence 0.580", None, fused_confidence),
        timed("3", "clique partition vs subset oracle", Some(60.0), clique_oracle),
        timed("4", "component labelling vs flood fill", Some(10.0), ccl_oracle),
        timed("5", "AP fixtures and GT echo", None, ap_fixtures),
        timed("6a", "identical vectors score 0", None, identical_vectors),
        timed("6b", "single failures score 1", None, single_failures),
        timed("6c", "two-member pairwise equals non-pairwise", None, two_member_agreement),
        timed("7", "synthetic robustness demo", Some(60.0), synthetic_demo),
        timed("8", "dual-norm perturbation bound", None, dual_norm),
        timed("9", "byte-identical CLI reruns", None, determinism),
    ];

    let mut unexpected = 0;
    for o in &outcomes {
        let expected_fail = EXPECTED_FAILURES.contains(&o.id);
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        let note = if expected_fail { " [known: cannot hold as stated]" } else { "" };
        println!("{verdict} {:<3} {}: {}{note}", o.id, o.title, o.detail);
        if o.pass == expected_fail {
            unexpected += 1;
        }
    }
    let passed = outcomes.iter().filter(|o| o.pass).count();
    println!("{passed}/{} criteria pass, {unexpected} unexpected outcome(s)", outcomes.len());
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
