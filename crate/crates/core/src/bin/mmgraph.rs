use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mmgraph::attention::{diffuse_attention, diffusion_weights, hop_diffused_update, masked_attention, ppr_closed_form, AttentionWeights};
use mmgraph::encoders::{encode_image_nodes_project, encode_text_nodes, PrecomputedFeatures, StubEncoder};
use mmgraph::graph::{induce_subgraph, load_graph, write_graph};
use mmgraph::numerics::{Matrix, Parameter, SeededRng};
use mmgraph::pipeline::assembly::build_context;
use mmgraph::pipeline::classify::{class_scores, classify_with, ClassTaxonomy};
use mmgraph::pipeline::config::{ExperimentConfig, StructureMode};
use mmgraph::pipeline::energy::run_energy_simulation;
use mmgraph::pipeline::gradients::{check_case, GRADIENT_CASES, GRADIENT_FIXTURES, GRADIENT_TOLERANCE};
use mmgraph::pipeline::synth::generate_synthetic_graph;
use mmgraph::pipeline::train::{generate_toy_tasks, train_toy_model};
use mmgraph::qformer::write_checkpoint;
use mmgraph::{Error, Modality, MultimodalGraph, NodeId, Result};

#[derive(Parser)]
#[command(name = "mmgraph", version, about = "Multimodal graph structure experiments")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// JSON experiment config; defaults apply to missing fields
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed (and the synthetic graph and sweep seeds)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Diffusion alpha for both modalities and the energy sweep
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Diffusion steps K for both modalities
    #[arg(long, global = true)]
    diffusion_steps: Option<usize>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Output file; stdout when absent
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    HopDiffused,
    HopAware,
    None,
}

impl From<ModeArg> for StructureMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::HopDiffused => StructureMode::HopDiffused,
            ModeArg::HopAware => StructureMode::HopAware,
            ModeArg::None => StructureMode::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModalityArg {
    Text,
    Image,
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Text => Modality::Text,
            ModalityArg::Image => Modality::Image,
        }
    }
}

#[derive(Args)]
struct GraphArgs {
    /// Graph JSON; falls back to the config path, then to a synthetic graph
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Target node; defaults to the lowest id carrying both text and image
    #[arg(long)]
    target: Option<NodeId>,
}

#[derive(Subcommand)]
enum Command {
    /// Dirichlet energy sweep, CSV plus per-depth ordering verdicts
    SimulateEnergy,
    /// Finite-difference checks of every analytic gradient
    CheckGrads {
        /// Restrict to these case names
        #[arg(long)]
        case: Vec<String>,
    },
    /// Hop-diffused attention for a matrix file or a target's subgraph
    Diffuse {
        /// JSON row-stochastic matrix `[[...], ...]`
        #[arg(long, conflicts_with_all = ["graph", "target"])]
        matrix: Option<PathBuf>,
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, value_enum, default_value = "image")]
        modality: ModalityArg,
    },
    /// Induced subgraph around a target
    ExtractSubgraph {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, value_enum, default_value = "text")]
        modality: ModalityArg,
    },
    /// Assembled input sequence for a target
    Assemble {
        #[command(flatten)]
        graph: GraphArgs,
        #[arg(long, default_value = "Describe the item.")]
        instruction: String,
    },
    /// Closest class for a response
    Classify {
        #[arg(long)]
        response: String,
        /// JSON taxonomy `{"0": "...", ...}`; the fashion taxonomy by default
        #[arg(long)]
        taxonomy: Option<PathBuf>,
    },
    /// Toy topology classification; JSON metrics
    TrainToy {
        /// Train every mode instead of the configured one
        #[arg(long)]
        all_modes: bool,
        /// Write the trained parameters of the (last) model here
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Synthetic multimodal graph as JSON
    GenData {
        /// Also write `<prefix>.bin` and `<prefix>.json` image feature files
        #[arg(long)]
        features: Option<PathBuf>,
    },
}

fn load_config(global: &GlobalArgs) -> Result<ExperimentConfig> {
    let mut config = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed {
        config.seed = seed;
        config.synthetic.seed = seed;
        let count = config.energy.seeds.len() as u64;
        config.energy.seeds = (seed..seed + count).collect();
    }
    if let Some(alpha) = global.alpha {
        config.diffusion.text.alpha = alpha;
        config.diffusion.image.alpha = alpha;
        config.energy.diffusion.alpha = alpha;
    }
    if let Some(k) = global.diffusion_steps {
        config.diffusion.text.diffusion_steps = k;
        config.diffusion.image.diffusion_steps = k;
    }
    if let Some(mode) = global.mode {
        config.mode = mode.into();
    }
    if let Some(out) = &global.out {
        config.paths.out = Some(out.clone());
    }
    config.validate()?;
    Ok(config)
}

/// Whole-file write through a sibling temporary file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Validation(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

fn emit(config: &ExperimentConfig, content: &str) -> Result<()> {
    match &config.paths.out {
        Some(path) => write_atomic(path, content.as_bytes()),
        None => print_stdout(content),
    }
}

/// Writes to stdout; a closed pipe downstream is not an error.
fn print_stdout(content: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(content.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn to_json(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("json value serializes");
    s.push('\n');
    s
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.to_rows()
}

fn graph_for(config: &ExperimentConfig, args: &GraphArgs) -> Result<MultimodalGraph> {
    match args.graph.as_ref().or(config.paths.graph.as_ref()) {
        Some(path) => load_graph(path),
        None => generate_synthetic_graph(&config.synthetic),
    }
}

fn target_for(graph: &MultimodalGraph, args: &GraphArgs) -> Result<NodeId> {
    if let Some(t) = args.target {
        graph.node(t)?;
        return Ok(t);
    }
    graph
        .nodes()
        .find(|n| n.text.is_some() && n.image_feature.is_some())
        .or_else(|| graph.nodes().next())
        .map(|n| n.id)
        .ok_or_else(|| Error::Validation("graph has no nodes".into()))
}

fn simulate_energy(config: &ExperimentConfig) -> Result<()> {
    let sim = run_energy_simulation(config)?;
    let lines = sim.verdict_lines().join("\n");
    match &config.paths.out {
        Some(path) => {
            write_atomic(path, sim.csv.as_bytes())?;
            println!("{lines}");
        }
        None => {
            print_stdout(&sim.csv)?;
            eprintln!("{lines}");
        }
    }
    Ok(())
}

fn check_grads(config: &ExperimentConfig, only: &[String]) -> Result<()> {
    let names: Vec<&str> = if only.is_empty() {
        GRADIENT_CASES.to_vec()
    } else {
        only.iter().map(String::as_str).collect()
    };
    let mut out = String::from("case,fixture,max_rel_error,coordinates,status\n");
    let mut failed = Vec::new();
    for name in names {
        for fixture in 0..GRADIENT_FIXTURES {
            let case = check_case(name, fixture, config.seed)?;
            let status = if case.passed { "pass" } else { "fail" };
            out.push_str(&format!(
                "{},{},{:e},{},{status}\n",
                case.name, case.fixture, case.max_rel_error, case.coordinates_checked
            ));
            if !case.passed {
                failed.push(format!("{}#{}", case.name, case.fixture));
            }
        }
    }
    emit(config, &out)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "gradient check above {GRADIENT_TOLERANCE:e}: {}",
            failed.join(", ")
        )))
    }
}

fn diffuse(
    config: &ExperimentConfig,
    matrix: Option<&Path>,
    args: &GraphArgs,
    modality: Modality,
) -> Result<()> {
    let diffusion = config.diffusion.get(modality);
    if let Some(path) = matrix {
        let src = fs::read_to_string(path)?;
        let raw: Vec<Vec<f64>> = serde_json::from_str(&src)?;
        let a = Matrix::from_rows(&raw)?;
        let diffused = diffuse_attention(&a, diffusion)?;
        let ppr = ppr_closed_form(&a, diffusion.alpha)?;
        let theta = diffusion_weights(diffusion.alpha, diffusion.diffusion_steps, diffusion.renormalize_truncation);
        return emit(
            config,
            &to_json(&json!({
                "alpha": diffusion.alpha,
                "diffusion_steps": diffusion.diffusion_steps,
                "theta": theta,
                "diffused": rows(&diffused),
                "ppr": rows(&ppr),
                "max_abs_diff_to_ppr": diffused.max_abs_diff(&ppr)?,
            })),
        );
    }
    let graph = graph_for(config, args)?;
    let target = target_for(&graph, args)?;
    let policy = config.subgraph.get(modality);
    let sg = induce_subgraph(&graph, target, policy, modality)?;
    let d = config.dims.d;
    let root = SeededRng::new(config.seed);
    let h = match modality {
        Modality::Text => encode_text_nodes(&StubEncoder::with_dims(config.seed, d, config.dims.d_p), &sg, &graph)?,
        Modality::Image => {
            let d_p = graph.image_dim().unwrap_or(config.dims.d_p);
            let proj = Parameter::new(
                "proj",
                root.split(33).gaussian_matrix(d_p, d, 1.0 / (d_p as f64).sqrt()),
            );
            encode_image_nodes_project(&StubEncoder::with_dims(config.seed, d, d_p), &sg, &graph, &proj)?
        }
    };
    let stream = if modality == Modality::Text { 31 } else { 32 };
    let weights = AttentionWeights::random(d, diffusion.heads, &mut root.split(stream));
    let attention = masked_attention(&h, &sg.adjacency, &weights, diffusion)?;
    let diffused = attention
        .iter()
        .map(|a| diffuse_attention(a, diffusion).map(|m| rows(&m)))
        .collect::<Result<Vec<_>>>()?;
    let updated = hop_diffused_update(&h, &sg.adjacency, &weights, diffusion)?;
    emit(
        config,
        &to_json(&json!({
            "target": target,
            "modality": modality.name(),
            "nodes": sg.node_ids(),
            "hops": sg.hops(),
            "attention": attention.iter().map(rows).collect::<Vec<_>>(),
            "diffused": diffused,
            "updated": rows(&updated),
        })),
    )
}

fn extract_subgraph(config: &ExperimentConfig, args: &GraphArgs, modality: Modality) -> Result<()> {
    let graph = graph_for(config, args)?;
    let target = target_for(&graph, args)?;
    let sg = induce_subgraph(&graph, target, config.subgraph.get(modality), modality)?;
    emit(
        config,
        &to_json(&json!({
            "target": target,
            "modality": modality.name(),
            "nodes": sg.ordered_nodes.iter().map(|(id, hop)| json!({"id": id, "hop": hop})).collect::<Vec<_>>(),
            "adjacency": rows(&sg.adjacency),
        })),
    )
}

fn assemble(config: &ExperimentConfig, args: &GraphArgs, instruction: &str) -> Result<()> {
    let graph = graph_for(config, args)?;
    let target = target_for(&graph, args)?;
    let mut config = config.clone();
    if let Some(d_p) = graph.image_dim() {
        config.dims.d_p = d_p;
    }
    let a = build_context(&graph, target, instruction, &config)?;
    emit(
        &config,
        &to_json(&json!({
            "target": target,
            "instruction": a.instruction,
            "d": a.d,
            "n_q": a.n_q,
            "l_t": a.l_t(),
            "l_p": a.l_p(),
            "entries": a.entries,
            "embeddings": rows(&a.embeddings),
        })),
    )
}

fn classify(config: &ExperimentConfig, response: &str, taxonomy: Option<&Path>) -> Result<()> {
    let taxonomy = match taxonomy.or(config.paths.taxonomy.as_deref()) {
        Some(path) => ClassTaxonomy::from_json(&fs::read_to_string(path)?)?,
        None => ClassTaxonomy::fashion(),
    };
    let encoder = StubEncoder::new(config.seed);
    let class = classify_with(response, &taxonomy, config.similarity, &encoder)?;
    let scores = class_scores(response, &taxonomy, config.similarity, &encoder)?;
    emit(
        config,
        &to_json(&json!({
            "class": class,
            "description": taxonomy.classes[&class],
            "scores": scores.iter().map(|(id, s)| json!({"class": id, "score": s})).collect::<Vec<_>>(),
        })),
    )
}

fn train_toy(config: &ExperimentConfig, all_modes: bool, checkpoint: Option<&Path>) -> Result<()> {
    let tasks = generate_toy_tasks(&config.toy, config.seed)?;
    let modes: Vec<StructureMode> = if all_modes {
        StructureMode::ALL.to_vec()
    } else {
        vec![config.mode]
    };
    let mut reports = Vec::new();
    let mut last_model = None;
    for mode in modes {
        let mut c = config.clone();
        c.mode = mode;
        let (model, report) = train_toy_model(&c, &tasks)?;
        reports.push(report);
        last_model = Some(model);
    }
    if let (Some(path), Some(model)) = (checkpoint, &last_model) {
        write_atomic(path, &write_checkpoint(&model.parameters()))?;
    }
    let body = if all_modes {
        serde_json::to_value(&reports)?
    } else {
        serde_json::to_value(&reports[0])?
    };
    emit(config, &to_json(&body))
}

fn gen_data(config: &ExperimentConfig, features: Option<&Path>) -> Result<()> {
    let graph = generate_synthetic_graph(&config.synthetic)?;
    if let Some(prefix) = features {
        let with_image: Vec<_> = graph.nodes().filter(|n| n.image_feature.is_some()).collect();
        let rows: Vec<Vec<f64>> = with_image
            .iter()
            .map(|n| n.image_feature.clone().expect("filtered on image"))
            .collect();
        let pre = PrecomputedFeatures {
            features: Matrix::from_rows(&rows)?,
            rows: with_image.iter().enumerate().map(|(i, n)| (n.id, i)).collect(),
        };
        let (bytes, sidecar) = pre.to_parts()?;
        write_atomic(&prefix.with_extension("bin"), &bytes)?;
        write_atomic(&prefix.with_extension("json"), sidecar.as_bytes())?;
    }
    emit(config, &write_graph(&graph)?)
}

fn run(cli: Cli) -> Result<()> {
    let config = load_config(&cli.global)?;
    match cli.command {
        Command::SimulateEnergy => simulate_energy(&config),
        Command::CheckGrads { case } => check_grads(&config, &case),
        Command::Diffuse {
            matrix,
            graph,
            modality,
        } => diffuse(&config, matrix.as_deref(), &graph, modality.into()),
        Command::ExtractSubgraph { graph, modality } => extract_subgraph(&config, &graph, modality.into()),
        Command::Assemble { graph, instruction } => assemble(&config, &graph, &instruction),
        Command::Classify { response, taxonomy } => classify(&config, &response, taxonomy.as_deref()),
        Command::TrainToy {
            all_modes,
            checkpoint,
        } => train_toy(&config, all_modes, checkpoint.as_deref()),
        Command::GenData { features } => gen_data(&config, features.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
