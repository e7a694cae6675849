//! Pipeline driver: synth -> prepare -> tokenize -> train -> eval, plus
//! recommendation dumps, attention inspection, and a gradient self-check.
//! Every run resolves one config (file + overrides), echoes it to the output
//! directory, and derives all stage seeds from the single top-level seed.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};

use acerec::config::{seed_for_stage, RunConfig};
use acerec::data::{
    generate_synthetic_corpus, kcore_filter, load_item_embeddings, parse_interactions,
    split_leave_last_out, write_interactions, write_item_embeddings, SplitDataset,
};
use acerec::evaluation::{evaluate_split, BucketSpec};
use acerec::inference::{holistic_scores, subspace_logprob_matrix, top_k};
use acerec::model::{
    atm_attention_weights, forward_sequence_values, read_checkpoint, write_checkpoint,
    MergerKind, ModelConfig, ModelParams,
};
use acerec::opq::{
    encode_items, fit_opq, read_codes, write_codebooks, write_codes, SemanticIdTable,
};
use acerec::trainer::{ensure_codes_compatible, finite_difference_check, train};
use acerec::TrainScalar;

const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "acerec",
    version,
    about = "Generative sequential recommender over OPQ semantic IDs"
)]
struct Cli {
    /// JSON config file; omitted fields fall back to built-in defaults.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Config override applied after the file, in order. Example: --set m=16
    #[arg(short, long, global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Worker thread cap; falls back to ACEREC_THREADS, then all cores.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Top-level seed, shorthand for --set seed=N.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction corpus and item embeddings.
    Synth,
    /// Filter raw interactions and write the leave-last-out split.
    Prepare,
    /// Fit OPQ codebooks on the item embeddings and encode the catalog.
    Tokenize,
    /// Train the model; writes the best checkpoint and per-epoch metrics.
    Train,
    /// Rank the full catalog for every test target and write the report.
    Eval,
    /// Print top-K recommendations per user as TSV.
    Recommend {
        /// Restrict output to this user id (repeatable); default: all users.
        #[arg(long = "user", value_name = "ID")]
        users: Vec<String>,
    },
    /// Dump per-head token-merger attention weights for the given items.
    InspectAttention {
        /// Item id to inspect (repeatable).
        #[arg(long = "item", value_name = "ID", required = true)]
        items: Vec<String>,
    },
    /// Compare analytic gradients with finite differences on a tiny model.
    Gradcheck,
}

fn main() {
    // Rust ignores SIGPIPE, so `acerec eval | head` would otherwise panic
    // mid-write; restore the default so the process just exits.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    let mut sets = cli.set.clone();
    if let Some(seed) = cli.seed {
        sets.push(format!("seed={seed}"));
    }
    // Resolve and validate the config before touching the filesystem.
    let config = RunConfig::resolve(cli.config.as_deref(), &sets)?;
    init_thread_pool(cli.threads)?;
    fs::create_dir_all(&config.out_dir)
        .with_context(|| format!("creating output directory {}", config.out_dir))?;
    echo_config(&config)?;
    match &cli.command {
        Command::Synth => cmd_synth(&config),
        Command::Prepare => cmd_prepare(&config).map(|_| ()),
        Command::Tokenize => cmd_tokenize(&config),
        Command::Train => cmd_train(&config),
        Command::Eval => cmd_eval(&config),
        Command::Recommend { users } => cmd_recommend(&config, users),
        Command::InspectAttention { items } => cmd_inspect_attention(&config, items),
        Command::Gradcheck => cmd_gradcheck(&config),
    }
}

fn init_thread_pool(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("ACEREC_THREADS") {
            Ok(v) => Some(v.trim().parse::<usize>().with_context(|| {
                format!("ACEREC_THREADS must be a positive integer, got {v:?}")
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            bail!("thread count must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("initializing the worker thread pool")?;
    }
    Ok(())
}

/// Writes the fully resolved config next to the other artifacts so every run
/// is reproducible from its output directory alone.
fn echo_config(config: &RunConfig) -> Result<()> {
    let path = config.out_path("config.json");
    let mut body = serde_json::to_string_pretty(config)?;
    body.push('\n');
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating directory {}", parent.display()))?;
        }
    }
    let file =
        File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn open_input(path: &Path, produced_by: &str) -> Result<BufReader<File>> {
    let file = File::open(path).with_context(|| {
        format!(
            "cannot open {} (run `acerec {produced_by}` first)",
            path.display()
        )
    })?;
    Ok(BufReader::new(file))
}

fn require_split(config: &RunConfig) -> Result<SplitDataset> {
    let path = config.out_path("split.json");
    let r = open_input(&path, "prepare")?;
    SplitDataset::from_json_reader(r).with_context(|| format!("reading {}", path.display()))
}

fn require_codes(config: &RunConfig, n_items: usize) -> Result<SemanticIdTable> {
    let path = config.out_path("codes.bin");
    let r = open_input(&path, "tokenize")?;
    read_codes(r, n_items, config.m, config.codebook_size)
        .with_context(|| format!("reading {}", path.display()))
}

fn require_checkpoint(config: &RunConfig) -> Result<ModelParams<TrainScalar>> {
    let path = config.out_path("ckpt-best.bin");
    let r = open_input(&path, "train")?;
    read_checkpoint(r).with_context(|| format!("reading {}", path.display()))
}

fn cmd_synth(config: &RunConfig) -> Result<()> {
    let corpus =
        generate_synthetic_corpus(seed_for_stage(config.seed, "synth"), &config.synth_params())?;
    let ipath = config.interactions_path();
    let mut iw = create_file(&ipath)?;
    write_interactions(&mut iw, &corpus.interactions)?;
    iw.flush()?;
    let epath = config.embeddings_path();
    let mut ew = create_file(&epath)?;
    write_item_embeddings(&mut ew, &corpus.item_ids, &corpus.embeddings)?;
    ew.flush()?;
    println!(
        "synth: {} interactions over {} items -> {}, {}",
        corpus.interactions.len(),
        corpus.item_ids.len(),
        ipath.display(),
        epath.display()
    );
    Ok(())
}

fn cmd_prepare(config: &RunConfig) -> Result<SplitDataset> {
    let ipath = config.interactions_path();
    let raw = parse_interactions(open_input(&ipath, "synth")?)
        .with_context(|| format!("parsing {}", ipath.display()))?;
    let kept = kcore_filter(&raw, config.min_interactions)?;
    let split = split_leave_last_out(&kept, config.max_seq_len)?;
    let spath = config.out_path("split.json");
    let mut w = create_file(&spath)?;
    split.to_json_writer(&mut w)?;
    w.flush()?;
    println!(
        "prepare: {} -> {} interactions after {}-core, {} users, {} items -> {}",
        raw.len(),
        kept.len(),
        config.min_interactions,
        split.users.len(),
        split.n_items(),
        spath.display()
    );
    Ok(split)
}

fn cmd_tokenize(config: &RunConfig) -> Result<()> {
    let spath = config.out_path("split.json");
    let split = if spath.exists() {
        require_split(config)?
    } else {
        println!("tokenize: {} missing, running prepare", spath.display());
        cmd_prepare(config)?
    };
    let index = split.item_index()?;
    let epath = config.embeddings_path();
    let emb = load_item_embeddings(open_input(&epath, "synth")?, &index)
        .with_context(|| format!("reading {}", epath.display()))?;
    let fit = fit_opq(
        &emb,
        config.m,
        config.codebook_size,
        config.opq_iters,
        seed_for_stage(config.seed, "tokenize"),
    )?;
    let codes = encode_items(&emb, &fit.codebooks)?;

    let cbpath = config.out_path("codebooks.bin");
    let mut cbw = create_file(&cbpath)?;
    write_codebooks(&mut cbw, &fit.codebooks)?;
    cbw.flush()?;
    let cpath = config.out_path("codes.bin");
    let mut cw = create_file(&cpath)?;
    write_codes(&mut cw, &codes)?;
    cw.flush()?;

    let distinct: HashSet<Vec<u16>> = codes
        .codes
        .rows()
        .into_iter()
        .map(|r| r.to_vec())
        .collect();
    let max_residual = fit
        .orthogonality_trace
        .iter()
        .copied()
        .fold(0.0_f64, f64::max);
    println!(
        "tokenize: error {:.6} -> {:.6} over {} iters, max orthogonality residual {:.2e}",
        fit.error_trace.first().copied().unwrap_or(f64::NAN),
        fit.error_trace.last().copied().unwrap_or(f64::NAN),
        fit.error_trace.len(),
        max_residual
    );
    println!(
        "tokenize: {} items, {} distinct semantic ids -> {}, {}",
        codes.n_items(),
        distinct.len(),
        cbpath.display(),
        cpath.display()
    );
    Ok(())
}

fn cmd_train(config: &RunConfig) -> Result<()> {
    let split = require_split(config)?;
    let codes = require_codes(config, split.n_items())?;
    let params = ModelParams::<TrainScalar>::init(
        &config.model_config(),
        seed_for_stage(config.seed, "init"),
    )?;
    let mpath = config.out_path("metrics.jsonl");
    let mut metrics = create_file(&mpath)?;
    let outcome = train(params, &config.train_config(), &split, &codes, Some(&mut metrics))?;
    metrics.flush()?;
    let cpath = config.out_path("ckpt-best.bin");
    let mut w = create_file(&cpath)?;
    write_checkpoint(&mut w, &outcome.params)?;
    w.flush()?;
    println!(
        "train: {} epochs, best epoch {} with val ndcg@10 {:.4} -> {}",
        outcome.log.len(),
        outcome.best_epoch,
        outcome.best_val_ndcg10,
        cpath.display()
    );
    Ok(())
}

fn cmd_eval(config: &RunConfig) -> Result<()> {
    let split = require_split(config)?;
    let codes = require_codes(config, split.n_items())?;
    let params = require_checkpoint(config)?;
    ensure_codes_compatible(&params, &codes)?;
    let report = evaluate_split(
        &params,
        &split,
        &codes,
        &BucketSpec::default(),
        &config.fingerprint(),
    )?;
    let rpath = config.out_path("report.json");
    let mut body = report.to_json_pretty();
    body.push('\n');
    fs::write(&rpath, body).with_context(|| format!("writing {}", rpath.display()))?;
    print!("{}", report.render_table());
    println!("eval: report -> {}", rpath.display());
    Ok(())
}

fn cmd_recommend(config: &RunConfig, users: &[String]) -> Result<()> {
    let split = require_split(config)?;
    let codes = require_codes(config, split.n_items())?;
    let params = require_checkpoint(config)?;
    ensure_codes_compatible(&params, &codes)?;
    let selected: Vec<(&String, &acerec::data::UserSplit)> = if users.is_empty() {
        split.users.iter().collect()
    } else {
        users
            .iter()
            .map(|u| {
                split
                    .users
                    .get_key_value(u)
                    .ok_or_else(|| anyhow!("unknown user id {u:?}"))
            })
            .collect::<Result<_>>()?
    };
    let stdout = io::stdout().lock();
    let mut w = BufWriter::new(stdout);
    for (uid, u) in selected {
        // Recommendations condition on the user's full history, ending at the
        // held-out test interaction.
        let mut history = u.train.clone();
        history.push(u.val);
        history.push(u.test);
        let start = history.len().saturating_sub(params.config.max_steps);
        let seq = codes.codes_for(&history[start..]);
        let out = forward_sequence_values(&params, seq.view())?;
        let h = out.intent_reps.row(out.intent_reps.nrows() - 1);
        let table = subspace_logprob_matrix(&params, h);
        let scores = holistic_scores(&table, &codes)?;
        let ranked = top_k(&scores, config.top_k);
        for (rank0, (item, score)) in ranked.entries.iter().enumerate() {
            writeln!(w, "{uid}\t{}\t{}\t{score:.6}", rank0 + 1, split.items[*item])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn cmd_inspect_attention(config: &RunConfig, items: &[String]) -> Result<()> {
    let split = require_split(config)?;
    let codes = require_codes(config, split.n_items())?;
    let params = require_checkpoint(config)?;
    ensure_codes_compatible(&params, &codes)?;
    if params.config.merger == MergerKind::MeanPool {
        bail!("the mean-pool merger has no attention weights to inspect");
    }
    let index = split.item_index()?;
    let apath = config.out_path("attention.csv");
    let mut w = create_file(&apath)?;
    writeln!(w, "item_id,head,latent_index,digit_index,weight")?;
    for id in items {
        let idx = index
            .get(id)
            .ok_or_else(|| anyhow!("unknown item id {id:?}"))?;
        let heads = atm_attention_weights(&params, codes.codes.row(idx))?;
        for (head, mat) in heads.iter().enumerate() {
            for (latent, row) in mat.rows().into_iter().enumerate() {
                for (digit, &weight) in row.iter().enumerate() {
                    writeln!(w, "{id},{head},{latent},{digit},{weight:.9}")?;
                }
            }
        }
    }
    w.flush()?;
    println!(
        "inspect-attention: {} items x {} heads -> {}",
        items.len(),
        params.config.n_heads,
        apath.display()
    );
    Ok(())
}

fn cmd_gradcheck(config: &RunConfig) -> Result<()> {
    // Small enough for finite differences to finish in seconds; loss terms and
    // the merger kind still come from the resolved config.
    let tiny = ModelConfig {
        d: 8,
        m: 4,
        k: 2,
        codebook_size: 5,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 16,
        max_steps: 8,
        ..config.model_config()
    };
    let report = finite_difference_check(&tiny, seed_for_stage(config.seed, "gradcheck"))?;
    let mut by_err = report.per_tensor.clone();
    by_err.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (name, err) in by_err.iter().take(5) {
        println!("gradcheck: {name:<24} rel err {err:.3e}");
    }
    let pass = report.max_rel_err < GRADCHECK_TOLERANCE;
    println!(
        "gradcheck: max relative error {:.3e} over {} coordinates: {}",
        report.max_rel_err,
        report.n_coords,
        if pass { "PASS" } else { "FAIL" }
    );
    if !pass {
        bail!(
            "gradient check failed: {:.3e} >= {GRADCHECK_TOLERANCE:.0e}",
            report.max_rel_err
        );
    }
    Ok(())
}
