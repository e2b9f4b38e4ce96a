use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use dv_forge_core::config::ToolConfig;
use dv_forge_core::doc_render::{pick_colors, read_image, render_document, write_image, ColorMode, DocRecord, RenderSpec};
use dv_forge_core::dv_loss::selfcheck;
use dv_forge_core::instructions::InstructionChoice;
use dv_forge_core::eval_harness::{
    gen_contextual, gen_noncontextual, resolution_sweep, score_answers, EvalRecord, FrequencyTable,
    SweepEntry, Task,
};
use dv_forge_core::label_align::{build_samples, compute_stats, LabelConfig, LabeledSample, OcrRecord, QaRecord};
use dv_forge_core::manifest::Manifest;
use dv_forge_core::records::{read_jsonl, to_jsonl};
use dv_forge_core::tokenizer::Vocabulary;
use dv_forge_core::toy_model::train::train_with;
use dv_forge_core::toy_model::{greedy_answer, probe_report, task, Example, Parameters, ToyConfig};
use dv_forge_core::util::{derive_seed, parallel_map};
use dv_forge_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "dv-forge",
    version,
    about = "Build token-level vision labels, check the DV-SFT loss, train and evaluate a toy model"
)]
pub struct Cli {
    /// Worker threads for parallel stages; overrides `workers` in the config.
    /// Outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Label OCR word boxes joined with QA pairs (image-to-label).
    Align {
        /// TOML config; must set paths.vocab.
        #[arg(long)]
        config: PathBuf,
        /// OCR records, one JSON object per line.
        #[arg(long)]
        ocr: PathBuf,
        /// QA records, one JSON object per line.
        #[arg(long)]
        qa: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render documents onto patch grids and label them (label-to-image).
    Render {
        /// TOML config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Document records, one JSON object per line.
        #[arg(long)]
        docs: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print corpus statistics of a labeled directory.
    Stats {
        /// Directory holding samples.jsonl.
        #[arg(long = "in")]
        input: PathBuf,
        /// Dataset name shown in the table.
        #[arg(long, default_value = "corpus")]
        name: String,
        /// Also write stats.txt and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the loss identity and gradient suites.
    Losscheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Also write losscheck.json and a manifest here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic "line k" documents for the toy model.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of documents.
        #[arg(long, default_value_t = 1000)]
        count: usize,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the toy model on a rendered directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory written by `render`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory for params.bin and report.jsonl.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the top-k tokens at every visual position of one sample.
    Probe {
        /// Parameter file written by `train`.
        #[arg(long)]
        params: PathBuf,
        /// Directory written by `render`.
        #[arg(long)]
        data: PathBuf,
        /// Sample id.
        #[arg(long)]
        sample: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Score predictions on a contextual, non-contextual or extraction set.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_parser = ["contextual", "noncontextual", "extraction"])]
        task: String,
        /// Plain-text corpus (contextual), word<TAB>count table
        /// (noncontextual) or document records (extraction).
        #[arg(long)]
        corpus: PathBuf,
        /// Toy model whose greedy answers are scored.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Precomputed predictions, lines of {"id": .., "prediction": ..}.
        #[arg(long, conflicts_with = "params")]
        predictions: Option<PathBuf>,
        /// Records file; the summary, generated set and manifest go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render documents at several token counts and score the toy model.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        params: PathBuf,
        /// Document records.
        #[arg(long)]
        docs: PathBuf,
        /// Comma-separated token counts; defaults to eval.sweep_token_counts.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        /// Records file; the summary and manifest go next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    match cli.command {
        Command::Align { config, ocr, qa, out } => align(&config, &ocr, &qa, &out, workers),
        Command::Render { config, docs, out } => render(config.as_deref(), &docs, &out, workers),
        Command::Stats { input, name, out } => stats(&input, &name, out.as_deref()),
        Command::Losscheck { seed, out } => losscheck(seed, out.as_deref()),
        Command::Synth { config, count, out } => synth(config.as_deref(), count, &out),
        Command::Train { config, data, out } => train(config.as_deref(), &data, &out, workers),
        Command::Probe { params, data, sample, k } => probe(&params, &data, &sample, k),
        Command::Eval {
            config,
            task,
            corpus,
            params,
            predictions,
            out,
        } => eval(
            config.as_deref(),
            task.parse()?,
            &corpus,
            params.as_deref(),
            predictions.as_deref(),
            &out,
            workers,
        ),
        Command::Sweep {
            config,
            params,
            docs,
            counts,
            out,
        } => sweep(config.as_deref(), &params, &docs, counts, &out, workers),
    }
}

fn need(key: &str, path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingPath {
            key: key.into(),
            path: path.to_path_buf(),
        }
        .into());
    }
    Ok(())
}

fn load_config(path: Option<&Path>, workers: Option<usize>) -> Result<ToolConfig> {
    let mut cfg = match path {
        Some(p) => {
            need("--config", p)?;
            ToolConfig::load(p)?
        }
        None => ToolConfig::default(),
    };
    cfg.check_paths()?;
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::Config("--workers must be at least 1".into()).into());
        }
        cfg.workers = w;
    }
    Ok(cfg)
}

fn make_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Write `bytes` to `dir/name` and record it in the manifest.
fn emit(dir: &Path, name: &str, bytes: &[u8], manifest: &mut Manifest) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    manifest.add_output(name, &path)?;
    Ok(())
}

/// Sibling of `file` with `suffix` replacing its extension.
fn sibling(file: &Path, suffix: &str) -> PathBuf {
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    file.with_file_name(format!("{stem}.{suffix}"))
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn safe_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && !id.starts_with('.')
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.#".contains(c));
    if !ok {
        return Err(Error::Config(format!("id {id:?} is not usable as a file name")).into());
    }
    Ok(())
}

fn align(config: &Path, ocr: &Path, qa: &Path, out: &Path, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(Some(config), workers)?;
    let vocab_path = cfg.require("paths.vocab")?;
    need("--ocr", ocr)?;
    need("--qa", qa)?;
    let vocab = Vocabulary::load(vocab_path)?;
    let ocr_records: Vec<OcrRecord> = read_jsonl(ocr)?;
    let qa_records: Vec<QaRecord> = read_jsonl(qa)?;
    let result = build_samples(
        &ocr_records,
        &qa_records,
        &cfg.grid,
        &cfg.labels,
        &vocab,
        cfg.seed,
        cfg.workers,
        &|_| true,
    )?;
    make_dir(out)?;
    let mut m = Manifest::new("align", &cfg.hash());
    m.add_input(vocab_path)?;
    m.add_input(ocr)?;
    m.add_input(qa)?;
    emit(out, "samples.jsonl", &to_jsonl(&result.samples)?, &mut m)?;
    emit(out, "audit.jsonl", &to_jsonl(&result.audit)?, &mut m)?;
    let table = result.stats.table("aligned");
    emit(out, "stats.txt", table.as_bytes(), &mut m)?;
    m.write(&out.join("manifest.json"))?;
    print!("{table}");
    Ok(())
}

/// Render spec of one document under the config.
fn doc_spec(cfg: &ToolConfig, doc: &DocRecord) -> dv_forge_core::Result<RenderSpec> {
    RenderSpec::resolve(&cfg.render, &cfg.grid, &doc.words(), task::render_seed(cfg.seed, &doc.doc_id))
}

fn render_vocab(cfg: &ToolConfig) -> Result<Vocabulary> {
    Ok(match &cfg.paths.vocab {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::bytes_only(0),
    })
}

fn render(config: Option<&Path>, docs: &Path, out: &Path, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(config, workers)?;
    need("--docs", docs)?;
    let vocab = render_vocab(&cfg)?;
    let records: Vec<DocRecord> = read_jsonl(docs)?;
    for d in &records {
        safe_id(&d.doc_id)?;
    }
    let instruction = cfg.labels.instruction_choice()?;
    let images = out.join("images");
    make_dir(&images)?;
    let ext = cfg.render.image_format.extension();
    let rendered = parallel_map(&records, cfg.workers, |doc| {
        let spec = doc_spec(&cfg, doc)?;
        let image_ref = format!("images/{}.{ext}", doc.doc_id);
        let r = render_document(doc, &spec, &vocab, &cfg.labels, instruction, &image_ref)?;
        write_image(&out.join(&image_ref), &r.image, cfg.render.image_format)?;
        Ok::<_, Error>((image_ref, r.sample))
    });
    let mut m = Manifest::new("render", &cfg.hash());
    m.add_input(docs)?;
    if let Some(v) = &cfg.paths.vocab {
        m.add_input(v)?;
    }
    let mut samples = Vec::with_capacity(rendered.len());
    for r in rendered {
        let (image_ref, sample) = r?;
        m.add_output(&image_ref, &out.join(&image_ref))?;
        samples.push(sample);
    }
    emit(out, "samples.jsonl", &to_jsonl(&samples)?, &mut m)?;
    m.write(&out.join("manifest.json"))?;
    println!("rendered {} documents into {}", samples.len(), out.display());
    Ok(())
}

fn read_samples(dir: &Path) -> Result<(PathBuf, Vec<LabeledSample>)> {
    need("--data", dir)?;
    let path = dir.join("samples.jsonl");
    need("samples.jsonl", &path)?;
    let samples: Vec<LabeledSample> = read_jsonl(&path)?;
    Ok((path, samples))
}

fn stats(input: &Path, name: &str, out: Option<&Path>) -> Result<()> {
    let (path, samples) = read_samples(input)?;
    let table = compute_stats(&samples).table(name);
    print!("{table}");
    if let Some(out) = out {
        make_dir(out)?;
        let mut m = Manifest::new("stats", &dv_forge_core::util::sha256_hex(name.as_bytes()));
        m.add_input(&path)?;
        emit(out, "stats.txt", table.as_bytes(), &mut m)?;
        m.write(&out.join("manifest.json"))?;
    }
    Ok(())
}

fn losscheck(seed: u64, out: Option<&Path>) -> Result<()> {
    let results = selfcheck::run(seed)?;
    for r in &results {
        println!(
            "{} {}: worst {:.3e} (threshold {:.1e}, {} cases)",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.worst,
            r.threshold,
            r.cases
        );
    }
    if let Some(out) = out {
        make_dir(out)?;
        let mut m = Manifest::new("losscheck", &dv_forge_core::util::sha256_hex(&seed.to_le_bytes()));
        let mut json = serde_json::to_vec_pretty(&results)?;
        json.push(b'\n');
        emit(out, "losscheck.json", &json, &mut m)?;
        m.write(&out.join("manifest.json"))?;
    }
    if results.iter().any(|r| !r.passed) {
        bail!("loss self-check failed");
    }
    Ok(())
}

fn synth(config: Option<&Path>, count: usize, out: &Path) -> Result<()> {
    let cfg = load_config(config, None)?;
    let docs = task::synth_docs(count, cfg.seed, &cfg.task)?;
    make_dir(out)?;
    let mut m = Manifest::new("synth", &cfg.hash());
    emit(out, "docs.jsonl", &to_jsonl(&docs)?, &mut m)?;
    m.write(&out.join("manifest.json"))?;
    println!("wrote {} documents to {}", docs.len(), out.join("docs.jsonl").display());
    Ok(())
}

fn load_examples(
    dir: &Path,
    samples: &[LabeledSample],
    toy: &ToyConfig,
    workers: usize,
    manifest: &mut Manifest,
) -> Result<Vec<Example>> {
    let examples: Vec<Example> = parallel_map(samples, workers, |s| {
        let image = read_image(&dir.join(&s.image_ref))?;
        Example::from_sample(s, &image, toy)
    })
    .into_iter()
    .collect::<dv_forge_core::Result<_>>()?;
    for s in samples {
        manifest.add_input(&dir.join(&s.image_ref))?;
    }
    Ok(examples)
}

fn train(config: Option<&Path>, data: &Path, out: &Path, workers: Option<usize>) -> Result<()> {
    let cfg = load_config(config, workers)?;
    let (samples_path, samples) = read_samples(data)?;
    let mut m = Manifest::new("train", &cfg.hash());
    m.add_input(&samples_path)?;
    let examples = load_examples(data, &samples, &cfg.toy, cfg.workers, &mut m)?;
    if examples.len() <= cfg.toy.val_samples {
        return Err(Error::ModelConfig(format!(
            "{} samples leave nothing to train on after holding out {}",
            examples.len(),
            cfg.toy.val_samples
        ))
        .into());
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed(cfg.toy.seed, "split", "data"));
        order.shuffle(&mut rng);
    }
    let (val_idx, train_idx) = order.split_at(cfg.toy.val_samples);
    let mut val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    let train_set: Vec<Example> = train_idx.iter().map(|&i| examples[i].clone()).collect();
    let val_set: Vec<Example> = val_idx.iter().map(|&i| examples[i].clone()).collect();
    eprintln!(
        "training on {} samples, validating on {} (lambda={}, beta={})",
        train_set.len(),
        val_set.len(),
        cfg.loss.lambda,
        cfg.loss.beta
    );
    let (params, report) = train_with(&cfg.toy, &train_set, &val_set, &cfg.loss, &mut |c, _| {
        eprintln!(
            "step={} train_loss={:.4} text_loss={:.4} vision_loss={:.4} extraction={:.3} vision_top1={:.3}",
            c.step, c.train_loss, c.text_loss, c.vision_loss, c.extraction_accuracy, c.vision_top1
        );
        Ok(())
    })?;
    make_dir(out)?;
    emit(out, "params.bin", &params.to_bytes(), &mut m)?;
    emit(out, "report.jsonl", &to_jsonl(&report.checkpoints)?, &mut m)?;
    m.write(&out.join("manifest.json"))?;
    Ok(())
}

fn load_params(path: &Path) -> Result<(Parameters, ToyConfig)> {
    need("--params", path)?;
    let params = Parameters::load(path)?;
    let toy = ToyConfig::for_dims(&params.dims);
    Ok((params, toy))
}

fn probe(params: &Path, data: &Path, sample: &str, k: usize) -> Result<()> {
    let (params, toy) = load_params(params)?;
    let (_, samples) = read_samples(data)?;
    let s = samples
        .iter()
        .find(|s| s.sample_id == sample)
        .ok_or_else(|| Error::Config(format!("no sample {sample:?} in {}", data.display())))?;
    let image = read_image(&data.join(&s.image_ref))?;
    let ex = Example::from_sample(s, &image, &toy)?;
    print!("{}", probe_report(&params, &ex, k.max(1))?);
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Prediction {
    id: String,
    prediction: String,
}

/// Evaluation documents for `task`, with the expected answers.
fn eval_docs(cfg: &ToolConfig, task_kind: Task, corpus: &Path) -> Result<Vec<DocRecord>> {
    let rule = cfg.eval.length_rule();
    let reading = |i: usize, text: String| DocRecord {
        doc_id: format!("eval{i:05}"),
        text: text.clone(),
        question: cfg.eval.prompt.clone(),
        answer: text,
    };
    Ok(match task_kind {
        Task::Extraction => read_jsonl(corpus)?,
        Task::Contextual => {
            let text = std::fs::read_to_string(corpus)?;
            gen_contextual(&text, derive_seed(cfg.seed, "eval", "contextual"), cfg.eval.samples, &rule)?
                .into_iter()
                .enumerate()
                .map(|(i, t)| reading(i, t))
                .collect()
        }
        Task::Noncontextual => {
            let table = FrequencyTable::load(corpus)?;
            (0..cfg.eval.samples)
                .map(|i| {
                    let words = gen_noncontextual(&table, derive_seed(cfg.seed, "noncontextual", &i.to_string()), &rule)?;
                    Ok(reading(i, words.join(" ")))
                })
                .collect::<dv_forge_core::Result<_>>()?
        }
    })
}

fn toy_answer(
    params: &Parameters,
    toy: &ToyConfig,
    doc: &DocRecord,
    spec: &RenderSpec,
    vocab: &Vocabulary,
) -> dv_forge_core::Result<(String, String)> {
    let r = render_document(doc, spec, vocab, &LabelConfig::default(), InstructionChoice::None, "")?;
    let ex = Example::from_sample(&r.sample, &r.image, toy)?;
    let answer = greedy_answer(params, &ex, toy.max_answer_bytes)?;
    let truth = task::line_answer(&doc.question, &r.placements).unwrap_or_else(|| doc.answer.clone());
    Ok((String::from_utf8_lossy(&answer).into_owned(), truth))
}

fn eval(
    config: Option<&Path>,
    task_kind: Task,
    corpus: &Path,
    params: Option<&Path>,
    predictions: Option<&Path>,
    out: &Path,
    workers: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config, workers)?;
    need("--corpus", corpus)?;
    let docs = eval_docs(&cfg, task_kind, corpus)?;
    for d in &docs {
        safe_id(&d.doc_id)?;
    }
    let mut m = Manifest::new("eval", &cfg.hash());
    m.add_input(corpus)?;
    let policy = cfg.eval.policy();
    let records: Vec<EvalRecord> = match (params, predictions) {
        (_, Some(p)) => {
            need("--predictions", p)?;
            m.add_input(p)?;
            let preds: Vec<Prediction> = read_jsonl(p)?;
            let by_id: HashMap<&str, &str> = preds.iter().map(|p| (p.id.as_str(), p.prediction.as_str())).collect();
            docs.iter()
                .map(|d| {
                    let pred = by_id
                        .get(d.doc_id.as_str())
                        .ok_or_else(|| Error::Config(format!("no prediction for {}", d.doc_id)))?;
                    let tokens = doc_spec(&cfg, d)?.grid().token_count();
                    Ok(EvalRecord::score(&d.doc_id, task_kind, pred, &d.answer, tokens, &policy))
                })
                .collect::<dv_forge_core::Result<_>>()?
        }
        (Some(p), None) => {
            let (params, toy) = load_params(p)?;
            m.add_input(p)?;
            let vocab = Vocabulary::bytes_only(0);
            parallel_map(&docs, cfg.workers, |d| {
                let spec = doc_spec(&cfg, d)?;
                let (pred, truth) = toy_answer(&params, &toy, d, &spec, &vocab)?;
                Ok(EvalRecord::score(&d.doc_id, task_kind, &pred, &truth, spec.grid().token_count(), &policy))
            })
            .into_iter()
            .collect::<dv_forge_core::Result<_>>()?
        }
        (None, None) => {
            return Err(Error::Config("eval needs --params or --predictions".into()).into());
        }
    };
    let (records, summary) = score_answers(&records, &policy);
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    make_dir(dir)?;
    let set_path = sibling(out, "set.jsonl");
    emit(dir, &file_name(&set_path), &to_jsonl(&docs)?, &mut m)?;
    emit(dir, &file_name(out), &to_jsonl(&records)?, &mut m)?;
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    emit(dir, &file_name(&sibling(out, "summary.json")), &json, &mut m)?;
    m.write(&sibling(out, "manifest.json"))?;
    println!(
        "count {}  mean NED {:.4}  exact match {:.4}",
        summary.count, summary.mean_ned, summary.exact_rate
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SweepRow {
    doc_id: String,
    #[serde(flatten)]
    entry: SweepEntry,
}

#[derive(Debug, Default, Serialize)]
struct SweepSummary {
    token_count: usize,
    evaluated: usize,
    skipped: usize,
    mean_ned: f64,
    exact_rate: f64,
}

fn sweep(
    config: Option<&Path>,
    params_path: &Path,
    docs_path: &Path,
    counts: Option<Vec<usize>>,
    out: &Path,
    workers: Option<usize>,
) -> Result<()> {
    let cfg = load_config(config, workers)?;
    need("--docs", docs_path)?;
    let (params, toy) = load_params(params_path)?;
    let docs: Vec<DocRecord> = read_jsonl(docs_path)?;
    let counts = counts.unwrap_or_else(|| cfg.eval.sweep_token_counts.clone());
    if counts.is_empty() {
        return Err(Error::Config("no token counts to sweep".into()).into());
    }
    let policy = cfg.eval.policy();
    let vocab = Vocabulary::bytes_only(0);
    let rows = parallel_map(&docs, cfg.workers, |doc| {
        let seed = task::render_seed(cfg.seed, &doc.doc_id);
        let (bg, fg) = match cfg.render.colors {
            ColorMode::Random => pick_colors(seed),
            ColorMode::Fixed => (cfg.render.bg, cfg.render.fg),
        };
        let base = RenderSpec {
            cell: cfg.grid.cell,
            rows: 1,
            cols: 1,
            glyph_scale: cfg.render.glyph_scale,
            fg,
            bg,
            margin_cells: cfg.render.margin_cells,
            seed,
        };
        resolution_sweep(doc, Task::Extraction, &base, cfg.eval.sweep_cols, &counts, &policy, |spec| {
            toy_answer(&params, &toy, doc, spec, &vocab)
        })
        .map(|entries| {
            entries
                .into_iter()
                .map(|entry| SweepRow {
                    doc_id: doc.doc_id.clone(),
                    entry,
                })
                .collect::<Vec<_>>()
        })
    })
    .into_iter()
    .collect::<dv_forge_core::Result<Vec<_>>>()?
    .into_iter()
    .flatten()
    .collect::<Vec<_>>();

    let mut by_count: BTreeMap<usize, (Vec<EvalRecord>, usize)> =
        counts.iter().map(|&c| (c, (Vec::new(), 0))).collect();
    for r in &rows {
        match &r.entry {
            SweepEntry::Evaluated(rec) => by_count.entry(rec.resolution).or_default().0.push(rec.clone()),
            SweepEntry::Skipped { token_count, .. } => by_count.entry(*token_count).or_default().1 += 1,
        }
    }
    let summary: Vec<SweepSummary> = by_count
        .into_iter()
        .map(|(token_count, (recs, skipped))| {
            let (_, s) = score_answers(&recs, &policy);
            SweepSummary {
                token_count,
                evaluated: s.count,
                skipped,
                mean_ned: s.mean_ned,
                exact_rate: s.exact_rate,
            }
        })
        .collect();
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    make_dir(dir)?;
    let mut m = Manifest::new("sweep", &cfg.hash());
    m.add_input(params_path)?;
    m.add_input(docs_path)?;
    emit(dir, &file_name(out), &to_jsonl(&rows)?, &mut m)?;
    let mut json = serde_json::to_vec_pretty(&summary)?;
    json.push(b'\n');
    emit(dir, &file_name(&sibling(out, "summary.json")), &json, &mut m)?;
    m.write(&sibling(out, "manifest.json"))?;
    println!("{:>8} {:>9} {:>7} {:>9} {:>8}", "tokens", "evaluated", "skipped", "mean NED", "exact");
    for s in &summary {
        println!(
            "{:>8} {:>9} {:>7} {:>9.4} {:>8.4}",
            s.token_count, s.evaluated, s.skipped, s.mean_ned, s.exact_rate
        );
    }
    if summary.iter().all(|s| s.evaluated == 0) {
        return Err(anyhow!("no token count could hold any document"));
    }
    Ok(())
}
