//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. Built without the libtest harness so the lines always show.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mmgraph::attention::{diffuse_attention, ppr_closed_form, HopDiffusionConfig};
use mmgraph::graph::induce_subgraph;
use mmgraph::numerics::solve_linear_system;
use mmgraph::pipeline::assembly::{build_context, EntryKind};
use mmgraph::pipeline::classify::{classify_by_similarity, ClassTaxonomy};
use mmgraph::pipeline::config::{ExperimentConfig, StructureMode};
use mmgraph::pipeline::energy::run_energy_simulation;
use mmgraph::pipeline::gradients::{check_registered_gradients, GRADIENT_CASES, GRADIENT_FIXTURES, GRADIENT_TOLERANCE};
use mmgraph::pipeline::synth::{generate_synthetic_graph, SyntheticGraphSpec};
use mmgraph::pipeline::train::{generate_toy_tasks, run_toy_training};
use mmgraph::{Matrix, Modality, MultimodalGraph, NodeId, NodeRecord, SeededRng, SubgraphPolicy};

type Outcome = Result<String, String>;

/// Floating-point slack on bounds that hold with equality.
const ROUNDING: f64 = 1e-12;

fn random_stochastic(n: usize, rng: &mut SeededRng) -> Matrix {
    let mut m = Matrix::from_fn(n, n, |_, _| if rng.bernoulli(0.3) { 0.0 } else { rng.uniform() });
    for r in 0..n {
        let row = m.row_mut(r);
        row[r] += 1e-3;
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|x| *x /= s);
    }
    m
}

fn row_stochasticity() -> Outcome {
    let mut rng = SeededRng::new(1);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let n = 1 + rng.below(64);
        let a = random_stochastic(n, &mut rng);
        let config = HopDiffusionConfig {
            alpha: if i % 2 == 0 { 0.1 } else { 0.5 },
            diffusion_steps: (i / 2) % 5,
            ..Default::default()
        };
        let d = diffuse_attention(&a, &config).map_err(|e| e.to_string())?;
        for s in d.row_sums() {
            worst = worst.max((s - 1.0).abs());
        }
    }
    if worst <= 1e-9 {
        Ok(format!("1000 matrices, worst row-sum deviation {worst:.2e}"))
    } else {
        Err(format!("row-sum deviation {worst:.2e} exceeds 1e-9"))
    }
}

fn ppr_oracle(a: &Matrix, alpha: f64) -> Matrix {
    let n = a.rows();
    let lhs = Matrix::identity(n).sub(&a.scale(1.0 - alpha)).unwrap();
    solve_linear_system(&lhs, &Matrix::identity(n).scale(alpha)).unwrap()
}

fn ppr_equivalence() -> Outcome {
    let mut rng = SeededRng::new(2);
    let mut checked = 0;
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..20 {
        let n = 2 + rng.below(30);
        let a = random_stochastic(n, &mut rng);
        for alpha in [0.1, 0.5] {
            let oracle = ppr_oracle(&a, alpha);
            let closed = ppr_closed_form(&a, alpha).map_err(|e| e.to_string())?;
            let gap = closed.max_abs_diff(&oracle).unwrap();
            if gap > 1e-12 {
                return Err(format!("closed form differs from the direct solve by {gap:.2e}"));
            }
            for k in 1..=8 {
                let config = HopDiffusionConfig {
                    alpha,
                    diffusion_steps: k,
                    renormalize_truncation: false,
                    ..Default::default()
                };
                let d = diffuse_attention(&a, &config).map_err(|e| e.to_string())?;
                let err = d.sub(&oracle).unwrap().norm_inf();
                let bound = (1.0 - alpha).powi(k as i32 + 1);
                // the bound is attained for stochastic A, so allow rounding only
                if err > bound + ROUNDING {
                    return Err(format!("K={k} alpha={alpha}: {err:.3e} > bound {bound:.3e}"));
                }
                worst_excess = worst_excess.max(err - bound);
                checked += 1;
            }
            if alpha == 0.5 {
                let config = HopDiffusionConfig {
                    alpha,
                    diffusion_steps: 20,
                    renormalize_truncation: false,
                    ..Default::default()
                };
                let d = diffuse_attention(&a, &config).map_err(|e| e.to_string())?;
                let err = d.sub(&oracle).unwrap().norm_inf();
                if err > 4.8e-7 {
                    return Err(format!("K=20: difference {err:.3e} > 4.8e-7"));
                }
            }
        }
    }
    Ok(format!(
        "{checked} (matrix, alpha, K) bounds hold (max err - bound {worst_excess:.1e}); K=20 within 4.8e-7"
    ))
}

fn over_smoothing() -> Outcome {
    let sim = run_energy_simulation(&ExperimentConfig::default()).map_err(|e| e.to_string())?;
    for v in &sim.verdicts {
        if v.seeds_holding < 9 {
            return Err(v.line());
        }
    }
    let (hd0, gat0) = sim.mean_at(0).ok_or("no k=0 rows")?;
    let (hd4, gat4) = sim.mean_at(4).ok_or("no k=4 rows")?;
    let decay = (hd0 - hd4) / hd0;
    let summary = format!(
        "hop-diffused {hd0:.4} -> {hd4:.4} (decay {:.1}%), GAT {gat0:.4} -> {gat4:.4}",
        decay * 100.0
    );
    if gat4 >= 0.5 * gat0 {
        return Err(format!("GAT energy did not halve: {summary}"));
    }
    if decay >= 0.25 {
        return Err(format!("hop-diffused decay too large: {summary}"));
    }
    let worst = sim.verdicts.iter().map(|v| v.seeds_holding).min().unwrap_or(0);
    Ok(format!("ordering in >= {worst}/10 seeds at every k; {summary}"))
}

fn gradients() -> Outcome {
    let cases = check_registered_gradients(0).map_err(|e| e.to_string())?;
    let expected = GRADIENT_CASES.len() * GRADIENT_FIXTURES;
    if cases.len() != expected {
        return Err(format!("{} checks run, {expected} expected", cases.len()));
    }
    let worst = cases
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("cases are non-empty");
    if cases.iter().any(|c| c.max_rel_error.is_nan() || c.max_rel_error > GRADIENT_TOLERANCE) {
        return Err(format!(
            "{} fixture {} has relative error {:.2e}",
            worst.name, worst.fixture, worst.max_rel_error
        ));
    }
    Ok(format!(
        "{} cases x {GRADIENT_FIXTURES} fixtures, worst {:.2e} ({})",
        GRADIENT_CASES.len(),
        worst.max_rel_error,
        worst.name
    ))
}

fn random_graph(rng: &mut SeededRng) -> MultimodalGraph {
    let n = 1 + rng.below(100);
    let p = rng.uniform_range(0.01, 0.15);
    let nodes: Vec<NodeRecord> = (0..n as NodeId)
        .map(|i| NodeRecord {
            id: i * 7 + 3,
            text: Some(format!("n{i}")),
            image_feature: rng.bernoulli(0.6).then(|| vec![i as f64, 1.0]),
        })
        .collect();
    let mut text = Vec::new();
    let mut image = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.bernoulli(p) {
                text.push((nodes[i].id, nodes[j].id));
                if nodes[i].image_feature.is_some() && nodes[j].image_feature.is_some() {
                    image.push((nodes[i].id, nodes[j].id));
                }
            }
        }
    }
    MultimodalGraph::new(nodes, &text, &image).unwrap()
}

/// All-pairs hop counts over the `modality` edges among nodes carrying it.
fn floyd_warshall(graph: &MultimodalGraph, modality: Modality) -> (Vec<NodeId>, Vec<Vec<usize>>) {
    let ids: Vec<NodeId> = graph.nodes().filter(|n| n.has(modality)).map(|n| n.id).collect();
    let n = ids.len();
    let inf = usize::MAX / 2;
    let mut d = vec![vec![inf; n]; n];
    for i in 0..n {
        d[i][i] = 0;
        for j in 0..n {
            if graph.has_edge(modality, ids[i], ids[j]) {
                d[i][j] = 1;
            }
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                d[i][j] = d[i][j].min(d[i][k] + d[k][j]);
            }
        }
    }
    (ids, d)
}

fn check_subgraph_case(graph: &MultimodalGraph, modality: Modality, rng: &mut SeededRng) -> Result<(), String> {
    let (ids, dist) = floyd_warshall(graph, modality);
    if ids.is_empty() {
        return Ok(());
    }
    let t = rng.below(ids.len());
    let target = ids[t];
    let tau = 1 + rng.below(3);
    let within: BTreeMap<NodeId, usize> = ids
        .iter()
        .enumerate()
        .filter(|&(j, _)| dist[t][j] <= tau)
        .map(|(j, &id)| (id, dist[t][j]))
        .collect();
    let check_common = |sg: &mmgraph::Subgraph, max_nodes: usize| -> Result<(), String> {
        if sg.len() > max_nodes {
            return Err(format!("{} nodes over cap {max_nodes}", sg.len()));
        }
        if sg.ordered_nodes[0] != (target, 0) {
            return Err("target is not first".into());
        }
        let mut seen = BTreeSet::new();
        for w in sg.ordered_nodes.windows(2) {
            if (w[0].1, w[0].0) >= (w[1].1, w[1].0) {
                return Err("order is not (hop, id) ascending".into());
            }
        }
        for &(id, hop) in &sg.ordered_nodes {
            if within.get(&id) != Some(&hop) {
                return Err(format!("node {id} labelled hop {hop}, oracle {:?}", within.get(&id)));
            }
            seen.insert(id);
        }
        let order = sg.node_ids();
        for (r, &a) in order.iter().enumerate() {
            for (c, &b) in order.iter().enumerate() {
                let want = if graph.has_edge(modality, a, b) { 1.0 } else { 0.0 };
                if sg.adjacency[(r, c)] != want {
                    return Err(format!("adjacency ({a}, {b}) is {}", sg.adjacency[(r, c)]));
                }
            }
        }
        Ok(())
    };

    // Uncapped: membership must equal the brute-force ball.
    let full = SubgraphPolicy {
        tau,
        max_nodes: 1000,
        keep_all_first_hop: true,
        second_hop_sample_count: 1000,
        rng_seed: 0,
    };
    let sg = induce_subgraph(graph, target, &full, modality).map_err(|e| e.to_string())?;
    check_common(&sg, full.max_nodes)?;
    if sg.node_ids().into_iter().collect::<BTreeSet<_>>() != within.keys().copied().collect() {
        return Err(format!("membership differs from the {tau}-hop ball of {target}"));
    }

    // Sampled and capped: exact sizes, deterministic repeats.
    let sampled = SubgraphPolicy {
        tau,
        max_nodes: 1 + rng.below(12),
        keep_all_first_hop: rng.bernoulli(0.5),
        second_hop_sample_count: rng.below(4),
        rng_seed: rng.next_u64(),
    };
    let sg = induce_subgraph(graph, target, &sampled, modality).map_err(|e| e.to_string())?;
    check_common(&sg, sampled.max_nodes)?;
    let mut per_hop: BTreeMap<usize, usize> = BTreeMap::new();
    for &hop in within.values().filter(|&&h| h > 0) {
        *per_hop.entry(hop).or_default() += 1;
    }
    let uncapped: usize = 1 + per_hop
        .iter()
        .map(|(&h, &c)| if h == 1 && sampled.keep_all_first_hop { c } else { c.min(sampled.second_hop_sample_count) })
        .sum::<usize>();
    if sg.len() != uncapped.min(sampled.max_nodes) {
        return Err(format!("{} nodes, expected {}", sg.len(), uncapped.min(sampled.max_nodes)));
    }
    if sampled.keep_all_first_hop {
        let hop1: Vec<NodeId> = within.iter().filter(|(_, &h)| h == 1).map(|(&id, _)| id).collect();
        let kept = hop1.len().min(sampled.max_nodes - 1);
        let got: Vec<NodeId> = sg.ordered_nodes.iter().filter(|(_, h)| *h == 1).map(|(id, _)| *id).collect();
        if got != hop1[..kept] {
            return Err("cap did not keep the lowest first-hop ids".into());
        }
    }
    let again = induce_subgraph(graph, target, &sampled, modality).map_err(|e| e.to_string())?;
    if again != sg {
        return Err("repeat extraction differs".into());
    }
    Ok(())
}

fn subgraphs() -> Outcome {
    let mut rng = SeededRng::new(5);
    for g in 0..200 {
        let graph = random_graph(&mut rng);
        let modality = if g % 2 == 0 { Modality::Text } else { Modality::Image };
        check_subgraph_case(&graph, modality, &mut rng).map_err(|e| format!("graph {g}: {e}"))?;
    }
    Ok("200 random graphs match the Floyd-Warshall and membership oracles".into())
}

fn structure_distinguishability() -> Outcome {
    let thresholds = [
        (StructureMode::None, None, Some(0.60)),
        (StructureMode::HopDiffused, Some(0.90), None),
        (StructureMode::HopAware, Some(0.80), None),
    ];
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for (mode, min, max) in thresholds {
        let mut accs = Vec::new();
        for seed in 0..5 {
            let mut config = ExperimentConfig {
                seed,
                mode,
                ..Default::default()
            };
            config.synthetic.seed = seed;
            let tasks = generate_toy_tasks(&config.toy, seed).map_err(|e| e.to_string())?;
            let report = run_toy_training(&config, &tasks).map_err(|e| e.to_string())?;
            let ok = min.is_none_or(|m| report.accuracy >= m) && max.is_none_or(|m| report.accuracy <= m);
            if !ok {
                failures.push(format!("{} seed {seed}: {}", mode.name(), report.accuracy));
            }
            accs.push(report.accuracy);
        }
        let lo = accs.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        lines.push(format!("{} {lo:.3}..{hi:.3}", mode.name()));
    }
    if failures.is_empty() {
        Ok(format!("accuracy over 5 seeds: {}", lines.join(", ")))
    } else {
        Err(failures.join("; "))
    }
}

fn assembly_contract() -> Outcome {
    let mut rng = SeededRng::new(7);
    for f in 0..20 {
        let mut config = ExperimentConfig::default();
        config.dims.n_q = 1 + rng.below(5);
        config.synthetic = SyntheticGraphSpec {
            block_sizes: vec![5 + rng.below(15), 5 + rng.below(15)],
            p_intra: rng.uniform_range(0.1, 0.5),
            seed: f,
            ..Default::default()
        };
        config.subgraph.image.max_nodes = 1 + rng.below(8);
        let graph = generate_synthetic_graph(&config.synthetic).map_err(|e| e.to_string())?;
        let ids: Vec<NodeId> = graph.nodes().map(|n| n.id).collect();
        let target = ids[rng.below(ids.len())];
        let a = build_context(&graph, target, "Describe the item.", &config).map_err(|e| format!("fixture {f}: {e}"))?;
        let n_q = config.dims.n_q;
        let visual: BTreeSet<NodeId> = a
            .entries
            .iter()
            .filter(|e| e.kind == EntryKind::MmToken)
            .filter_map(|e| e.source)
            .collect();
        let mm = a.entries.iter().filter(|e| e.kind == EntryKind::MmToken).count();
        if mm != visual.len() * n_q || a.l_p() != mm {
            return Err(format!("fixture {f}: l_P {mm} for {} visual nodes, n_q {n_q}", visual.len()));
        }
        // each node's MM run starts right after its last text token and has length n_q
        let mut i = 0;
        while i < a.entries.len() {
            let e = &a.entries[i];
            if e.kind == EntryKind::MmToken {
                let prev = i.checked_sub(1).map(|p| &a.entries[p]);
                let anchored = prev.is_some_and(|p| p.kind == EntryKind::NodeText && p.source == e.source);
                let run = a.entries[i..].iter().take_while(|x| x.kind == EntryKind::MmToken && x.source == e.source).count();
                if !anchored || run != n_q {
                    return Err(format!("fixture {f}: MM run at {i} anchored={anchored} length {run}"));
                }
                if graph.node(e.source.unwrap()).map(|n| n.image_feature.is_none()).unwrap_or(true) {
                    return Err(format!("fixture {f}: MM tokens for a node without an image"));
                }
                i += run;
            } else {
                i += 1;
            }
        }
    }
    let class = classify_by_similarity("4:Graphic T-Shirts and Sweatshirts.", &ClassTaxonomy::fashion())
        .map_err(|e| e.to_string())?;
    if class != 4 {
        return Err(format!("fashion fixture classified as {class}"));
    }
    Ok("20 fixtures with zero violations; fashion fixture -> class 4".into())
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mmgraph"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn snapshot(dir: &Path, args: &[&str], files: &[&str]) -> Result<Vec<Vec<u8>>, String> {
    for f in files {
        let _ = std::fs::remove_file(dir.join(f));
    }
    let mut outputs = vec![run_cli(dir, args)?];
    for f in files {
        outputs.push(std::fs::read(dir.join(f)).map_err(|e| format!("{f}: {e}"))?);
    }
    Ok(outputs)
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path();
    std::fs::write(path.join("config.json"), ExperimentConfig::default().to_json()).map_err(|e| e.to_string())?;
    std::fs::write(path.join("matrix.json"), "[[0.5, 0.5, 0.0], [0.2, 0.3, 0.5], [0.0, 1.0, 0.0]]")
        .map_err(|e| e.to_string())?;
    let c = ["--config", "config.json"];
    let runs: Vec<(Vec<&str>, Vec<&str>)> = vec![
        (vec!["simulate-energy"], vec![]),
        (vec!["--out", "energy.csv", "simulate-energy"], vec!["energy.csv"]),
        (vec!["check-grads"], vec![]),
        (vec!["diffuse", "--matrix", "matrix.json"], vec![]),
        (vec!["diffuse"], vec![]),
        (vec!["gen-data", "--features", "feat"], vec!["feat.bin", "feat.json"]),
        (vec!["--out", "graph.json", "gen-data"], vec!["graph.json"]),
        (vec!["extract-subgraph", "--graph", "graph.json"], vec![]),
        (vec!["extract-subgraph", "--modality", "image"], vec![]),
        (vec!["assemble"], vec![]),
        (vec!["classify", "--response", "4:Graphic T-Shirts and Sweatshirts."], vec![]),
        (vec!["train-toy", "--checkpoint", "toy.ckpt"], vec!["toy.ckpt"]),
    ];
    let mut subcommands = BTreeSet::new();
    for (args, files) in &runs {
        let full: Vec<&str> = c.iter().chain(args).copied().collect();
        let first = snapshot(path, &full, files)?;
        let second = snapshot(path, &full, files)?;
        if first != second {
            return Err(format!("{args:?} produced different bytes on a second run"));
        }
        if first.iter().all(|o| o.is_empty()) {
            return Err(format!("{args:?} produced no output"));
        }
        subcommands.insert(args.iter().find(|a| !a.starts_with('-') && !a.contains('.')).copied());
    }
    Ok(format!("{} runs over {} subcommands byte-identical", runs.len(), subcommands.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Duration); 8] = [
        ("row stochasticity", row_stochasticity, Duration::from_secs(10)),
        ("ppr equivalence", ppr_equivalence, Duration::from_secs(5)),
        ("over-smoothing ordering", over_smoothing, Duration::from_secs(60)),
        ("gradient correctness", gradients, Duration::from_secs(120)),
        ("subgraph correctness", subgraphs, Duration::from_secs(600)),
        ("structure distinguishability", structure_distinguishability, Duration::from_secs(300)),
        ("assembly contract", assembly_contract, Duration::from_secs(600)),
        ("determinism", cli_determinism, Duration::from_secs(600)),
    ];
    let mut failed = 0;
    for (i, (name, run, limit)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if elapsed > limit => Err(format!("{msg}; took {elapsed:.1?}, limit {limit:?}")),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("criterion {}: PASS {name}: {msg} [{elapsed:.2?}]", i + 1),
            Err(msg) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {msg} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of 8 criteria failed");
        std::process::exit(1);
    }
    println!("all 8 criteria passed");
}
