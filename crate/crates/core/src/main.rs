use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use geovlp::assembler::{audit_record, build_corpus, config_hash, CorpusConfig, Vocabulary};
use geovlp::concept::{build_knowledge_base, extract_concept_name, Page};
use geovlp::config::{ConfigFile, Ratio};
use geovlp::formats::{self, FormatError, ImageRecord};
use geovlp::model::checkpoint::load_checkpoint;
use geovlp::model::gradcheck::{run_gradcheck, GradcheckConfig};
use geovlp::model::Model;
use geovlp::negatives::{same_concept, DistanceMetric};
use geovlp::synth::{generate, zero_shot_world, SynthConfig};
use geovlp::train::{model_config_for, read_metrics, report, train, zero_shot_classify, TrainRunConfig};

#[derive(Parser)]
#[command(name = "geovlp", version, about = "Knowledge-aware VLP corpus builder and micro trainer")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// RNG seed (required by every command that samples)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat `key = value` config file; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output path (file or directory, depending on the command)
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// error, warn, info, debug or trace
    #[arg(long, global = true)]
    log_level: Option<String>,
    /// Worker threads for parallel stages (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Join caption parses with detections into image records
    Extract {
        #[arg(long)]
        parses: PathBuf,
        #[arg(long)]
        detections: PathBuf,
        /// Knowledge base used to canonicalise concept names
        #[arg(long)]
        kb: Option<PathBuf>,
    },
    /// Build the knowledge base from first-sentence parses and page texts
    BuildKb {
        #[arg(long)]
        parses: PathBuf,
        #[arg(long)]
        pages: PathBuf,
        #[arg(long)]
        knowledge_budget: Option<usize>,
    },
    /// Dump per-record sampler decisions
    SampleAudit {
        #[command(flatten)]
        inputs: CorpusInputs,
        #[command(flatten)]
        sampler: SamplerFlags,
        /// Audit only the first N records
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Assemble the training corpus
    BuildCorpus {
        #[command(flatten)]
        inputs: CorpusInputs,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        mlm_rate: Option<f64>,
        #[arg(long)]
        itm_ratio: Option<Ratio<3>>,
        #[arg(long)]
        ikm_ratio: Option<Ratio<3>>,
        #[arg(long)]
        iec_ratio: Option<Ratio<2>>,
        #[arg(long)]
        max_text_tokens: Option<usize>,
        #[arg(long)]
        max_objects: Option<usize>,
    },
    /// Train the micro model on a corpus
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        checkpoint_interval: Option<u64>,
        #[arg(long)]
        hidden: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        ffn: Option<usize>,
    },
    /// Zero-shot classification with the matching head
    EvalZeroshot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: PathBuf,
    },
    /// Summarise a metrics log
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Corpus whose manifest supplies realised label ratios
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Zero-shot result written by eval-zeroshot
        #[arg(long)]
        zeroshot: Option<PathBuf>,
    },
    /// Compare backward gradients with central finite differences
    Gradcheck {
        #[arg(long, default_value_t = 8)]
        hidden: usize,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 2)]
        heads: usize,
        #[arg(long)]
        ffn: Option<usize>,
        #[arg(long, default_value_t = 6)]
        seq_len: usize,
        #[arg(long, default_value_t = 1e-4)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Run the embedded oracle suite
    Selftest,
    /// Write a synthetic world (embeddings, knowledge base, records)
    Synth {
        #[arg(long, default_value_t = 1000)]
        records: usize,
        /// Also write a zero-shot task with this many classes
        #[arg(long)]
        zero_shot_classes: Option<usize>,
    },
}

#[derive(Args)]
struct CorpusInputs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    kb: PathBuf,
    /// Word-vector table used for category similarity
    #[arg(long)]
    embeddings: PathBuf,
}

#[derive(Args)]
struct SamplerFlags {
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long)]
    ikm_candidate_count: Option<usize>,
    #[arg(long)]
    iec_sample_images: Option<usize>,
    #[arg(long)]
    top_k_objects: Option<usize>,
    /// euclidean or cosine
    #[arg(long)]
    distance: Option<DistanceMetric>,
}

enum Failure {
    Validation(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

/// Format errors in user input are validation failures; missing files and
/// other i/o trouble are runtime failures.
fn input<T>(r: Result<T, FormatError>, path: &Path) -> Result<T, Failure> {
    r.map_err(|e| match e {
        FormatError::Io(io) => Failure::Runtime(anyhow::anyhow!("{}: {io}", path.display())),
        other => Failure::Validation(format!("{}: {other}", path.display())),
    })
}

struct Ctx {
    global: Global,
    file: ConfigFile,
}

impl Ctx {
    fn seed(&self, flag: &str) -> Result<u64, Failure> {
        let seed = self
            .file
            .layered(self.global.seed, "seed", u64::MAX)
            .map_err(|e| invalid(e.to_string()))?;
        if seed == u64::MAX && self.global.seed.is_none() && self.file.raw("seed").is_none() {
            return Err(invalid(format!("missing required flag --seed (needed by {flag})")));
        }
        println!("seed: {seed}");
        Ok(seed)
    }

    fn layered<T: std::str::FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Failure>
    where
        T::Err: std::fmt::Display,
    {
        self.file.layered(flag, key, default).map_err(|e| invalid(e.to_string()))
    }

    fn out(&self) -> Result<&Path, Failure> {
        self.global
            .out
            .as_deref()
            .ok_or_else(|| invalid("missing required flag --out"))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn sampler_config(ctx: &Ctx, f: &SamplerFlags, seed: u64) -> Result<geovlp::negatives::SamplerConfig, Failure> {
    let d = geovlp::negatives::SamplerConfig::default();
    let cfg = geovlp::negatives::SamplerConfig {
        tau: ctx.layered(f.tau, "tau", d.tau)?,
        ikm_candidate_count: ctx.layered(f.ikm_candidate_count, "ikm_candidate_count", d.ikm_candidate_count)?,
        iec_sample_images: ctx.layered(f.iec_sample_images, "iec_sample_images", d.iec_sample_images)?,
        top_k_objects: ctx.layered(f.top_k_objects, "top_k_objects", d.top_k_objects)?,
        rng_seed: seed,
        distance: ctx.layered(f.distance, "distance", d.distance)?,
    };
    cfg.validate().map_err(invalid)?;
    Ok(cfg)
}

fn load_corpus_inputs(
    inputs: &CorpusInputs,
) -> Result<(Vec<ImageRecord>, Vec<formats::VisualConcept>, formats::EmbeddingTable), Failure> {
    let records = input(formats::read_records(&inputs.records), &inputs.records)?;
    let kb = input(formats::read_knowledge_base(&inputs.kb), &inputs.kb)?;
    let (table, warnings) = input(formats::read_embedding_table(&inputs.embeddings), &inputs.embeddings)?;
    for w in &warnings {
        log::warn!("{}: line {}: duplicate word `{}` ignored", inputs.embeddings.display(), w.line, w.word);
    }
    if records.is_empty() {
        return Err(invalid(format!("{}: no records", inputs.records.display())));
    }
    Ok((records, kb, table))
}

fn cmd_extract(ctx: &Ctx, parses: &Path, detections: &Path, kb: Option<&Path>) -> Result<(), Failure> {
    let out = ctx.out()?;
    let sentences = input(formats::read_parse_file(parses), parses)?;
    let dets = input(formats::read_detections(detections), detections)?;
    let kb = match kb {
        Some(p) => input(formats::read_knowledge_base(p), p)?,
        None => Vec::new(),
    };
    let by_id: BTreeMap<&str, &formats::ParsedSentence> =
        sentences.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut records = Vec::new();
    let (mut no_parse, mut no_noun) = (0, 0);
    for (id, det) in &dets {
        let Some(parse) = by_id.get(id.as_str()) else {
            log::warn!("{id}: no caption parse, skipped");
            no_parse += 1;
            continue;
        };
        let concept = match extract_concept_name(parse) {
            Ok(p) => Some(
                kb.iter()
                    .find(|c| same_concept(&c.name, &p.text))
                    .map(|c| c.name.clone())
                    .unwrap_or(p.text),
            ),
            Err(e) => {
                log::warn!("{e}");
                no_noun += 1;
                None
            }
        };
        records.push(ImageRecord {
            image_id: id.clone(),
            width: det.width,
            height: det.height,
            caption: parse.text(),
            objects: det.objects.clone(),
            concept_name: concept,
            knowledge: None,
        });
    }
    formats::write_records(create(out)?, &records).map_err(|e| Failure::Runtime(e.into()))?;
    println!(
        "records: {} written to {} ({no_parse} without parse, {no_noun} without concept)",
        records.len(),
        out.display()
    );
    Ok(())
}

fn cmd_build_kb(ctx: &Ctx, parses: &Path, pages: &Path, budget: Option<usize>) -> Result<(), Failure> {
    let out = ctx.out()?;
    let budget = ctx.layered(budget, "knowledge_budget", 64)?;
    let sentences = input(formats::read_parse_file(parses), parses)?;
    let texts = input(formats::read_pages(pages), pages)?;
    let mut page_list = Vec::with_capacity(texts.len());
    for t in texts {
        match sentences.iter().find(|s| s.id == t.parse_id()) {
            Some(s) => page_list.push(Page {
                concept_name: t.concept_name.clone(),
                first_sentence: s.clone(),
                text: t.text.clone(),
            }),
            None => log::warn!("page `{}`: no first-sentence parse, skipped", t.concept_name),
        }
    }
    let (kb, warnings) = build_knowledge_base(&page_list, budget);
    formats::write_knowledge_base(create(out)?, &kb).map_err(|e| Failure::Runtime(e.into()))?;
    println!(
        "concepts: {} written to {} ({} pages skipped)",
        kb.len(),
        out.display(),
        warnings.len()
    );
    Ok(())
}

fn cmd_sample_audit(ctx: &Ctx, inputs: &CorpusInputs, flags: &SamplerFlags, limit: Option<usize>) -> Result<(), Failure> {
    let seed = ctx.seed("sample-audit")?;
    let out = ctx.out()?;
    let sampler = sampler_config(ctx, flags, seed)?;
    let (records, kb, table) = load_corpus_inputs(inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = create(out)?;
    let n = limit.unwrap_or(records.len()).min(records.len());
    for i in 0..n {
        let audit = audit_record(i, &records, &kb, &table, &sampler, &mut rng);
        serde_json::to_writer(&mut w, &audit).context("writing audit")?;
        writeln!(w).context("writing audit")?;
    }
    w.flush().context("writing audit")?;
    println!("audited {n} records into {} (config {})", out.display(), config_hash(&sampler));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_build_corpus(
    ctx: &Ctx,
    inputs: &CorpusInputs,
    flags: &SamplerFlags,
    mlm_rate: Option<f64>,
    itm: Option<Ratio<3>>,
    ikm: Option<Ratio<3>>,
    iec: Option<Ratio<2>>,
    max_text_tokens: Option<usize>,
    max_objects: Option<usize>,
) -> Result<(), Failure> {
    let seed = ctx.seed("build-corpus")?;
    let out = ctx.out()?;
    let mut cfg = CorpusConfig {
        sampler: sampler_config(ctx, flags, seed)?,
        ..Default::default()
    };
    let a = &mut cfg.assembly;
    a.rng_seed = seed;
    a.mlm_rate = ctx.layered(mlm_rate, "mlm_rate", a.mlm_rate)?;
    a.itm_ratio = ctx.layered(itm, "itm_ratio", Ratio(a.itm_ratio))?.0;
    a.ikm_ratio = ctx.layered(ikm, "ikm_ratio", Ratio(a.ikm_ratio))?.0;
    a.iec_ratio = ctx.layered(iec, "iec_ratio", Ratio(a.iec_ratio))?.0;
    a.max_text_tokens = ctx.layered(max_text_tokens, "max_text_tokens", a.max_text_tokens)?;
    a.max_objects = ctx.layered(max_objects, "max_objects", a.max_objects)?;
    a.validate().map_err(invalid)?;
    let (records, kb, table) = load_corpus_inputs(inputs)?;
    let vocab = Vocabulary::from_sources(&records, &kb);
    let build = build_corpus(&records, &kb, &table, &cfg, &vocab).map_err(|e| Failure::Runtime(anyhow::anyhow!(e)))?;
    formats::write_corpus(create(out)?, &build.manifest, &build.examples)
        .map_err(|e| Failure::Runtime(e.into()))?;
    let m = &build.manifest;
    println!("config hash: {}", m.config_hash);
    println!(
        "examples: {} (itm {:?}, ikm {:?}, iec {:?}, {} records skipped) -> {}",
        m.example_count,
        m.itm_counts,
        m.ikm_counts,
        m.iec_counts,
        m.failures.len(),
        out.display()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    ctx: &Ctx,
    corpus: &Path,
    batch_size: Option<usize>,
    max_steps: Option<u64>,
    lr: Option<f64>,
    dropout: Option<f64>,
    checkpoint_interval: Option<u64>,
    arch: [Option<usize>; 4],
) -> Result<(), Failure> {
    let seed = ctx.seed("train")?;
    let out = ctx.out()?.to_path_buf();
    let d = TrainRunConfig::default();
    let (manifest, examples) = input(formats::read_corpus(corpus), corpus)?;
    let mut model_cfg = model_config_for(&manifest);
    model_cfg.hidden = ctx.layered(arch[0], "hidden", model_cfg.hidden)?;
    model_cfg.layers = ctx.layered(arch[1], "layers", model_cfg.layers)?;
    model_cfg.heads = ctx.layered(arch[2], "heads", model_cfg.heads)?;
    model_cfg.ffn = ctx.layered(arch[3], "ffn", model_cfg.ffn)?;
    model_cfg.validate().map_err(invalid)?;
    let run = TrainRunConfig {
        batch_size: ctx.layered(batch_size, "batch_size", d.batch_size)?,
        max_steps: ctx.layered(max_steps, "max_steps", d.max_steps)?,
        lr: ctx.layered(lr, "lr", d.lr)?,
        seed,
        checkpoint_interval: ctx.layered(checkpoint_interval, "checkpoint_interval", 0)?,
        checkpoint_dir: Some(out.clone()),
        metrics_path: Some(out.join("metrics.jsonl")),
        dropout: Some(ctx.layered(dropout, "dropout", model_cfg.dropout)?),
    };
    run.validate(examples.len()).map_err(|e| invalid(e.to_string()))?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let outcome = train(&manifest, &examples, &run, model_cfg).map_err(|e| match e {
        geovlp::train::TrainError::CorpusManifestMismatch(_) | geovlp::train::TrainError::Config(_) => {
            invalid(e.to_string())
        }
        other => Failure::Runtime(other.into()),
    })?;
    let last = outcome.metrics.last().expect("max_steps > 0");
    println!("run hash: {}", outcome.meta.run_hash);
    println!(
        "step {}: total {:.6} (mlm {:.6} itm {:.6} ikm {:.6} iec {:.6})",
        last.step + 1,
        last.loss.total,
        last.loss.l_mlm,
        last.loss.l_itm,
        last.loss.l_ikm,
        last.loss.l_iec
    );
    println!("checkpoint: {}", out.join("final.ckpt").display());
    Ok(())
}

fn cmd_eval(ctx: &Ctx, checkpoint: &Path, task_path: &Path) -> Result<(), Failure> {
    let out = ctx.out()?;
    let (meta, params) = load_checkpoint(checkpoint).map_err(|e| Failure::Runtime(e.into()))?;
    let task = input(formats::read_zero_shot_task(task_path), task_path)?;
    task.validate().map_err(invalid)?;
    let vocab = Vocabulary::from_tokens(meta.vocab.clone()).map_err(invalid)?;
    let model = Model::new(meta.model.clone(), params).map_err(|e| Failure::Runtime(e.into()))?;
    let result = zero_shot_classify(&model, &task, &vocab, &meta.assembly).map_err(|e| invalid(e.to_string()))?;
    serde_json::to_writer_pretty(create(out)?, &result).context("writing result")?;
    println!(
        "zero-shot accuracy: {:.4} ({} items, {} classes) -> {}",
        result.accuracy,
        task.items.len(),
        task.classes.len(),
        out.display()
    );
    Ok(())
}

fn cmd_report(ctx: &Ctx, metrics: &Path, corpus: Option<&Path>, zeroshot: Option<&Path>) -> Result<(), Failure> {
    let rows = read_metrics(metrics).map_err(|e| invalid(e.to_string()))?;
    let manifest = match corpus {
        Some(p) => Some(input(formats::read_corpus(p), p)?.0),
        None => None,
    };
    let zs = match zeroshot {
        Some(p) => Some(
            serde_json::from_reader(File::open(p).with_context(|| p.display().to_string())?)
                .map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        ),
        None => None,
    };
    let r = report(&rows, manifest.as_ref(), zs.as_ref()).map_err(|e| invalid(e.to_string()))?;
    print!("{}", r.text);
    if let Some(dir) = &ctx.global.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("summary.txt"), &r.text).context("writing summary")?;
        std::fs::write(dir.join("curves.csv"), &r.csv).context("writing curves")?;
        println!("wrote {}/summary.txt and curves.csv", dir.display());
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_gradcheck(
    ctx: &Ctx,
    hidden: usize,
    layers: usize,
    heads: usize,
    ffn: Option<usize>,
    seq_len: usize,
    epsilon: f64,
    tolerance: f64,
) -> Result<(), Failure> {
    let seed = ctx.layered(ctx.global.seed, "seed", 0)?;
    println!("seed: {seed}");
    let cfg = GradcheckConfig {
        hidden,
        layers,
        heads,
        ffn: ffn.unwrap_or(2 * hidden),
        seq_len,
        epsilon,
        seed,
        ..Default::default()
    };
    let report = run_gradcheck(&cfg).map_err(|e| invalid(e.to_string()))?;
    for b in &report.blocks {
        println!("{:<28} {:.3e}", b.name, b.max_relative_error);
    }
    println!(
        "max relative error: {:.3e} over {} parameters",
        report.max_relative_error, report.parameters_checked
    );
    if report.max_relative_error < tolerance {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!(
            "max relative error {:.3e} exceeds {tolerance:e}",
            report.max_relative_error
        )))
    }
}

fn cmd_selftest() -> Result<(), Failure> {
    let checks = geovlp::selftest::run();
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "pass" } else { "FAIL" }, c.name, c.detail);
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed == 0 {
        Ok(())
    } else {
        Err(Failure::Runtime(anyhow::anyhow!("{failed} self-test checks failed")))
    }
}

fn cmd_synth(ctx: &Ctx, records: usize, zero_shot_classes: Option<usize>) -> Result<(), Failure> {
    let seed = ctx.seed("synth")?;
    let dir = ctx.out()?;
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let (world, task) = match zero_shot_classes {
        Some(classes) => {
            let per_class = (records / classes.max(1)).max(1);
            let (w, t) = zero_shot_world(classes, per_class, 1, seed).map_err(invalid)?;
            (w, Some(t))
        }
        None => {
            let cfg = SynthConfig {
                records,
                seed,
                ..Default::default()
            };
            (generate(&cfg).map_err(invalid)?, None)
        }
    };
    let runtime = |e: FormatError| Failure::Runtime(e.into());
    let mut emb = create(&dir.join("embeddings.txt"))?;
    formats::write_embedding_table(&mut emb, &world.table).context("writing embeddings")?;
    emb.flush().context("writing embeddings")?;
    formats::write_knowledge_base(create(&dir.join("kb.jsonl"))?, &world.kb).map_err(runtime)?;
    formats::write_records(create(&dir.join("records.jsonl"))?, &world.records).map_err(runtime)?;
    if let Some(t) = &task {
        formats::write_zero_shot_task(create(&dir.join("task.json"))?, t).map_err(runtime)?;
    }
    println!(
        "wrote {} records, {} concepts{} to {}",
        world.records.len(),
        world.kb.len(),
        if task.is_some() { " and task.json" } else { "" },
        dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let file = match &cli.global.config {
        Some(p) => ConfigFile::load(p).map_err(|e| invalid(e.to_string()))?,
        None => ConfigFile::default(),
    };
    let ctx = Ctx {
        global: cli.global,
        file,
    };
    let level = ctx.layered(ctx.global.log_level.clone(), "log_level", "warn".to_string())?;
    let filter: log::LevelFilter = level
        .parse()
        .map_err(|_| invalid(format!("unknown log level `{level}`")))?;
    env_logger::Builder::new().filter_level(filter).try_init().ok();
    let threads = ctx.layered(ctx.global.threads, "threads", 0)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::Runtime(e.into()))?;

    match &cli.command {
        Command::Extract { parses, detections, kb } => cmd_extract(&ctx, parses, detections, kb.as_deref()),
        Command::BuildKb {
            parses,
            pages,
            knowledge_budget,
        } => cmd_build_kb(&ctx, parses, pages, *knowledge_budget),
        Command::SampleAudit { inputs, sampler, limit } => cmd_sample_audit(&ctx, inputs, sampler, *limit),
        Command::BuildCorpus {
            inputs,
            sampler,
            mlm_rate,
            itm_ratio,
            ikm_ratio,
            iec_ratio,
            max_text_tokens,
            max_objects,
        } => cmd_build_corpus(
            &ctx,
            inputs,
            sampler,
            *mlm_rate,
            *itm_ratio,
            *ikm_ratio,
            *iec_ratio,
            *max_text_tokens,
            *max_objects,
        ),
        Command::Train {
            corpus,
            batch_size,
            max_steps,
            lr,
            dropout,
            checkpoint_interval,
            hidden,
            layers,
            heads,
            ffn,
        } => cmd_train(
            &ctx,
            corpus,
            *batch_size,
            *max_steps,
            *lr,
            *dropout,
            *checkpoint_interval,
            [*hidden, *layers, *heads, *ffn],
        ),
        Command::EvalZeroshot { checkpoint, task } => cmd_eval(&ctx, checkpoint, task),
        Command::Report {
            metrics,
            corpus,
            zeroshot,
        } => cmd_report(&ctx, metrics, corpus.as_deref(), zeroshot.as_deref()),
        Command::Gradcheck {
            hidden,
            layers,
            heads,
            ffn,
            seq_len,
            epsilon,
            tolerance,
        } => cmd_gradcheck(&ctx, *hidden, *layers, *heads, *ffn, *seq_len, *epsilon, *tolerance),
        Command::Selftest => cmd_selftest(),
        Command::Synth {
            records,
            zero_shot_classes,
        } => cmd_synth(&ctx, *records, *zero_shot_classes),
    }
}

fn error_record(kind: &str, message: &str) {
    let rec = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{rec}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            error_record("validation", &e.kind().to_string());
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            error_record("validation", &msg);
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            error_record("runtime", &format!("{e:#}"));
            ExitCode::from(2)
        }
    }
}
