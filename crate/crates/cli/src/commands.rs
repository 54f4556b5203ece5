//! Subcommand implementations. Every artifact lives in the output directory
//! under a fixed name, so later stages find earlier outputs by convention.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use turnshift::analysis::{
    analyze, Annotator, Embedder, HeuristicAnnotator, HiddenStateEmbedder, ImportedAnnotator,
    OracleAnnotator, TokenEmbedder,
};
use turnshift::corpus::{generate_synthetic, load_corpus, load_records, split_corpus, write_corpus, Dialog, Turn};
use turnshift::evaluation::{
    compute_traces, evaluate_traces, optimize_threshold, outcome_metrics, read_traces, render_table,
    write_report, write_traces, Counterpart,
};
use turnshift::model::{load_checkpoint, save_checkpoint, ModelConfig, TransformerLM};
use turnshift::plot::{render, PlotFormat, Series};
use turnshift::ranker::{RankOptions, Ranker};
use turnshift::sequencing::{encode_all, extract_corpus, load_cache, save_cache, EncodedSequence, Sample, Variant};
use turnshift::tokenizer::{build_vocab, Vocab};
use turnshift::training::train;

use crate::config::ExperimentConfig;
use crate::manifest::Recorder;
use crate::{Cli, Command};

pub const CORPUS: &str = "corpus.jsonl";
pub const VOCAB: &str = "vocab.tsv";
pub const SPLITS: [&str; 3] = ["train", "val", "test"];
pub const VARIANTS: [Variant; 2] = [Variant::Baseline, Variant::Rc];

pub fn split_file(out: &Path, split: &str) -> PathBuf {
    out.join(format!("{split}.jsonl"))
}

pub fn checkpoint_file(out: &Path, v: Variant) -> PathBuf {
    out.join(format!("ckpt-{v}.bin"))
}

pub fn threshold_file(out: &Path, v: Variant) -> PathBuf {
    out.join(format!("threshold-{v}.json"))
}

pub fn traces_file(out: &Path, split: &str, v: Variant) -> PathBuf {
    out.join(format!("traces-{split}-{v}.jsonl"))
}

pub fn report_file(out: &Path, v: Variant) -> PathBuf {
    out.join(format!("report-{v}.json"))
}

fn cache_file(out: &Path, v: Variant, split: &str) -> PathBuf {
    out.join(format!("cache-{v}-{split}.bin"))
}

fn prepared_file(out: &Path, v: Variant) -> PathBuf {
    out.join(format!("prepared-{v}.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRecord {
    pub variant: Variant,
    pub threshold: f64,
    pub val_tl_acc: f64,
    pub n_turns: usize,
}

/// Settings a sample cache was encoded with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Prepared {
    vocab_hash: String,
    window: usize,
    full_lm_loss: bool,
    max_seq_len: usize,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    ensure!(path.exists(), "missing {} (run `turnshift {hint}` first)", path.display());
    Ok(())
}

struct Ctx<'a> {
    cfg: &'a ExperimentConfig,
    out: &'a Path,
    rec: Recorder,
}

impl Ctx<'_> {
    fn vocab(&mut self) -> Result<Vocab> {
        let path = self.out.join(VOCAB);
        require(&path, "vocab")?;
        self.rec.input(&path)?;
        Ok(Vocab::load(&path)?)
    }

    fn dialogs(&mut self, split: &str) -> Result<Vec<Dialog>> {
        let path = split_file(self.out, split);
        require(&path, "vocab")?;
        self.rec.input(&path)?;
        Ok(load_corpus(&path, split)?.0)
    }

    fn samples(&mut self, split: &str) -> Result<Vec<Sample>> {
        let dialogs = self.dialogs(split)?;
        Ok(extract_corpus(&dialogs, self.cfg.window)?)
    }

    fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            ..self.cfg.model.clone()
        }
    }

    fn encoded(&mut self, v: Variant, split: &str, vocab: &Vocab) -> Result<Vec<EncodedSequence>> {
        let want = Prepared {
            vocab_hash: vocab.hash(),
            window: self.cfg.window,
            full_lm_loss: self.cfg.full_lm_loss,
            max_seq_len: self.cfg.model.max_seq_len,
        };
        let (meta, cache) = (prepared_file(self.out, v), cache_file(self.out, v, split));
        if meta.exists() && cache.exists() && read_json::<Prepared>(&meta)? == want {
            self.rec.input(&meta)?;
            self.rec.input(&cache)?;
            return Ok(load_cache(&cache)?);
        }
        let samples = self.samples(split)?;
        Ok(encode_all(&samples, v, vocab, self.cfg.full_lm_loss, self.cfg.model.max_seq_len)?)
    }

    fn model(&mut self, v: Variant, vocab: &Vocab) -> Result<TransformerLM<f32>> {
        let path = checkpoint_file(self.out, v);
        require(&path, &format!("train --variant {v}"))?;
        self.load_checkpoint(&path, v, vocab)
    }

    fn load_checkpoint(&mut self, path: &Path, v: Variant, vocab: &Vocab) -> Result<TransformerLM<f32>> {
        self.rec.input(path)?;
        let ck = load_checkpoint(path, Some(&vocab.hash()))
            .with_context(|| format!("loading {}", path.display()))?;
        ensure!(
            ck.variant == v,
            "{} holds a {} model, expected {v}",
            path.display(),
            ck.variant
        );
        Ok(ck.model)
    }

    fn threshold(&mut self, v: Variant) -> Result<Option<f64>> {
        let path = threshold_file(self.out, v);
        if !path.exists() {
            return Ok(None);
        }
        self.rec.input(&path)?;
        let t: ThresholdRecord = read_json(&path)?;
        Ok(Some(t.threshold))
    }

    /// Optimizes and stores the validation threshold of one variant.
    fn fit_threshold(&mut self, v: Variant, model: &TransformerLM<f32>, vocab: &Vocab) -> Result<f64> {
        let samples = self.samples("val")?;
        let traces = compute_traces(model, &samples, v, vocab)?;
        let threshold = optimize_threshold(&traces)?;
        let metrics = outcome_metrics(&traces, &samples, v, threshold)?;
        let tpath = traces_file(self.out, "val", v);
        write_traces(&tpath, &traces)?;
        self.rec.output(&tpath)?;
        let path = threshold_file(self.out, v);
        write_json(
            &path,
            &ThresholdRecord {
                variant: v,
                threshold,
                val_tl_acc: metrics.tl_acc,
                n_turns: metrics.n_turns,
            },
        )?;
        self.rec.output(&path)?;
        log::info!("{v}: threshold {threshold:.2} (validation TL-Acc {:.4})", metrics.tl_acc);
        Ok(threshold)
    }
}

pub(crate) fn dispatch(cli: &Cli, args: Vec<String>) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.global.config.as_deref(), cli.global.seed)?;
    let out = cli.global.out_dir.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let name = match &cli.command {
        Command::Gen { .. } => "gen",
        Command::Vocab { .. } => "vocab",
        Command::Prepare { .. } => "prepare",
        Command::Train { variant } => match Variant::from(*variant) {
            Variant::Baseline => "train-baseline",
            Variant::Rc => "train-rc",
        },
        Command::Threshold { .. } => "threshold",
        Command::Eval => "eval",
        Command::Trace { .. } => "trace",
        Command::Analyze { .. } => "analyze",
        Command::Rank { .. } => "rank",
    };
    let mut ctx = Ctx {
        cfg: &cfg,
        out,
        rec: Recorder::new(out, name, args),
    };
    if let Some(c) = &cli.global.config {
        ctx.rec.input(c)?;
    }
    match &cli.command {
        Command::Gen { n_dialogs } => gen(&mut ctx, *n_dialogs)?,
        Command::Vocab { corpus } => vocab(&mut ctx, corpus.as_deref())?,
        Command::Prepare { variant } => prepare(&mut ctx, variant.map(Variant::from))?,
        Command::Train { variant } => train_cmd(&mut ctx, (*variant).into())?,
        Command::Threshold { variant } => threshold(&mut ctx, variant.map(Variant::from))?,
        Command::Eval => eval(&mut ctx)?,
        Command::Trace {
            traces,
            dialog,
            cu_index,
            format,
            threshold,
            output,
        } => trace(&mut ctx, traces, dialog, *cu_index, format, *threshold, output.as_deref())?,
        Command::Analyze {
            annotator,
            annotations,
            embedder,
            n,
        } => analyze_cmd(
            &mut ctx,
            annotator.as_deref(),
            annotations.as_deref(),
            embedder.as_deref(),
            *n,
        )?,
        Command::Rank {
            history,
            candidates,
            words,
            threshold,
            variant,
            checkpoint,
            margin,
            bias,
        } => rank(
            &mut ctx,
            RankArgs {
                history: history.as_deref(),
                candidates,
                words: words.as_deref(),
                threshold: *threshold,
                variant: (*variant).into(),
                checkpoint: checkpoint.as_deref(),
                margin: *margin,
                bias: bias.as_deref(),
            },
        )?,
    }
    ctx.rec.finish(&cfg)?;
    Ok(())
}

fn gen(ctx: &mut Ctx<'_>, n_dialogs: Option<usize>) -> Result<()> {
    let mut synth = ctx.cfg.synth.clone();
    if let Some(n) = n_dialogs {
        synth.n_dialogs = n;
    }
    let dialogs = generate_synthetic(&synth)?;
    let path = ctx.out.join(CORPUS);
    write_corpus(&path, &dialogs)?;
    ctx.rec.output(&path)?;
    ctx.rec.note("n_dialogs", dialogs.len());
    println!("wrote {} dialogs to {}", dialogs.len(), path.display());
    Ok(())
}

fn vocab(ctx: &mut Ctx<'_>, corpus: Option<&Path>) -> Result<()> {
    let path = corpus.map_or_else(|| ctx.out.join(CORPUS), Path::to_path_buf);
    require(&path, "gen")?;
    ctx.rec.input(&path)?;
    let label = path
        .file_stem()
        .map_or_else(|| "corpus".to_owned(), |s| s.to_string_lossy().into_owned());
    let (dialogs, report) = load_corpus(&path, &label)?;
    ctx.rec.note("load_report", &report);
    let split = split_corpus(dialogs, ctx.cfg.split_ratios, ctx.cfg.split_seed)?;
    for (name, part) in SPLITS.iter().zip([&split.train, &split.val, &split.test]) {
        let p = split_file(ctx.out, name);
        write_corpus(&p, part)?;
        ctx.rec.output(&p)?;
    }
    let vocab = build_vocab(&split.train, ctx.cfg.vocab_min_count, ctx.cfg.vocab_max_size)?;
    let vpath = ctx.out.join(VOCAB);
    vocab.save(&vpath)?;
    ctx.rec.output(&vpath)?;
    ctx.rec.note("vocab_size", vocab.len());
    println!(
        "split {} / {} / {} dialogs, vocabulary of {} entries",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        vocab.len()
    );
    Ok(())
}

fn prepare(ctx: &mut Ctx<'_>, only: Option<Variant>) -> Result<()> {
    let vocab = ctx.vocab()?;
    let meta = Prepared {
        vocab_hash: vocab.hash(),
        window: ctx.cfg.window,
        full_lm_loss: ctx.cfg.full_lm_loss,
        max_seq_len: ctx.cfg.model.max_seq_len,
    };
    for v in VARIANTS.into_iter().filter(|v| only.is_none_or(|o| o == *v)) {
        for split in SPLITS {
            let samples = ctx.samples(split)?;
            let seqs = encode_all(&samples, v, &vocab, meta.full_lm_loss, meta.max_seq_len)?;
            let path = cache_file(ctx.out, v, split);
            save_cache(&path, &seqs)?;
            ctx.rec.output(&path)?;
        }
        let path = prepared_file(ctx.out, v);
        write_json(&path, &meta)?;
        ctx.rec.output(&path)?;
    }
    Ok(())
}

fn train_cmd(ctx: &mut Ctx<'_>, v: Variant) -> Result<()> {
    let vocab = ctx.vocab()?;
    let train_set = ctx.encoded(v, "train", &vocab)?;
    let val_set = ctx.encoded(v, "val", &vocab)?;
    let model = TransformerLM::new(&ctx.model_config(&vocab))?;
    log::info!("{v}: {} parameters, {} training sequences", model.param_count(), train_set.len());
    let cfg = turnshift::training::TrainConfig {
        variant: v,
        ..ctx.cfg.train.clone()
    };
    let (best, log) = train(model, &train_set, &val_set, &cfg)?;
    let ckpt = checkpoint_file(ctx.out, v);
    save_checkpoint(&ckpt, &best, v, &vocab.hash())?;
    ctx.rec.output(&ckpt)?;
    let log_path = ctx.out.join(format!("trainlog-{v}.jsonl"));
    log.save(&log_path)?;
    ctx.rec.output(&log_path)?;
    ctx.rec.note("best_step", log.best_step);
    ctx.rec.note("best_val_loss", log.best_val_loss);
    println!(
        "{v}: best validation loss {:.4} at step {} ({:?}), {:.1}s",
        log.best_val_loss, log.best_step, log.stop_reason, log.wall_clock_secs
    );
    Ok(())
}

fn threshold(ctx: &mut Ctx<'_>, only: Option<Variant>) -> Result<()> {
    let vocab = ctx.vocab()?;
    for v in VARIANTS.into_iter().filter(|v| only.is_none_or(|o| o == *v)) {
        let model = ctx.model(v, &vocab)?;
        let t = ctx.fit_threshold(v, &model, &vocab)?;
        println!("{v}: threshold {t:.2}");
    }
    Ok(())
}

fn eval(ctx: &mut Ctx<'_>) -> Result<()> {
    let missing: Vec<String> = VARIANTS
        .iter()
        .map(|v| checkpoint_file(ctx.out, *v))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    ensure!(
        missing.is_empty(),
        "eval needs both checkpoints; missing {}",
        missing.join(", ")
    );
    let vocab = ctx.vocab()?;
    let base = ctx.model(Variant::Baseline, &vocab)?;
    let rc = ctx.model(Variant::Rc, &vocab)?;
    let mut thresholds = Vec::new();
    for (v, m) in [(Variant::Baseline, &base), (Variant::Rc, &rc)] {
        let t = match ctx.threshold(v)? {
            Some(t) => t,
            None => ctx.fit_threshold(v, m, &vocab)?,
        };
        thresholds.push(t);
    }
    let samples = ctx.samples("test")?;
    let base_traces = compute_traces(&base, &samples, Variant::Baseline, &vocab)?;
    let rc_traces = compute_traces(&rc, &samples, Variant::Rc, &vocab)?;
    let runs = [
        (Variant::Baseline, &base_traces, thresholds[0], &rc_traces, thresholds[1]),
        (Variant::Rc, &rc_traces, thresholds[1], &base_traces, thresholds[0]),
    ];
    let mut reports = Vec::new();
    for (v, own, t, other, ot) in runs {
        let report = evaluate_traces(
            own,
            &samples,
            v,
            t,
            &vocab,
            &base,
            Some(Counterpart {
                traces: other,
                threshold: ot,
            }),
        )?;
        let tpath = traces_file(ctx.out, "test", v);
        write_traces(&tpath, own)?;
        ctx.rec.output(&tpath)?;
        let rpath = report_file(ctx.out, v);
        write_report(&rpath, &report)?;
        ctx.rec.output(&rpath)?;
        reports.push(report);
    }
    let table = render_table(&[("baseline", &reports[0]), ("rc", &reports[1])]);
    let tpath = ctx.out.join("table.txt");
    std::fs::write(&tpath, &table).with_context(|| format!("writing {}", tpath.display()))?;
    ctx.rec.output(&tpath)?;
    print!("{table}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn trace(
    ctx: &mut Ctx<'_>,
    files: &[PathBuf],
    dialog: &str,
    cu_index: Option<usize>,
    format: &str,
    threshold: Option<f64>,
    output: Option<&Path>,
) -> Result<()> {
    let format: PlotFormat = format.parse()?;
    let mut picked = Vec::new();
    let mut labels = Vec::new();
    for f in files {
        ctx.rec.input(f)?;
        let traces = read_traces(f)?;
        let t = traces
            .into_iter()
            .find(|t| t.dialog_id == dialog && cu_index.is_none_or(|k| t.cu_index == k))
            .with_context(|| format!("no trace for dialog {dialog} in {}", f.display()))?;
        picked.push(t);
        labels.push(
            f.file_stem()
                .map_or_else(|| "trace".to_owned(), |s| s.to_string_lossy().into_owned()),
        );
    }
    let series: Vec<Series<'_>> = picked
        .iter()
        .zip(&labels)
        .map(|(trace, label)| Series { label, trace })
        .collect();
    let text = render(&series, format, threshold)?;
    let ext = match format {
        PlotFormat::Tsv => "tsv",
        PlotFormat::Svg => "svg",
    };
    let path = output.map_or_else(
        || ctx.out.join(format!("plot-{dialog}-{}.{ext}", picked[0].cu_index)),
        Path::to_path_buf,
    );
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    ctx.rec.output(&path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn analyze_cmd(
    ctx: &mut Ctx<'_>,
    annotator: Option<&str>,
    annotations: Option<&Path>,
    embedder: Option<&str>,
    n: Option<usize>,
) -> Result<()> {
    let vocab = ctx.vocab()?;
    let samples = ctx.samples("test")?;
    let mut traces = Vec::new();
    let mut thresholds = Vec::new();
    for v in VARIANTS {
        let path = traces_file(ctx.out, "test", v);
        require(&path, "eval")?;
        ctx.rec.input(&path)?;
        traces.push(read_traces(&path)?);
        thresholds.push(
            ctx.threshold(v)?
                .with_context(|| format!("missing {}", threshold_file(ctx.out, v).display()))?,
        );
    }
    let annotator_name = annotator.unwrap_or(&ctx.cfg.annotator);
    let annotator: Box<dyn Annotator> = match annotator_name {
        "oracle" => Box::new(OracleAnnotator),
        "heuristic" => Box::new(HeuristicAnnotator),
        "import" => {
            let path = annotations.context("the import annotator needs --annotations")?;
            ctx.rec.input(path)?;
            Box::new(ImportedAnnotator::load(path)?)
        }
        other => bail!("unknown annotator {other:?} (oracle|heuristic|import)"),
    };
    let scorer = ctx.model(Variant::Baseline, &vocab)?;
    let embedder_name = embedder.unwrap_or(&ctx.cfg.embedder);
    let embedder: Box<dyn Embedder + '_> = match embedder_name {
        "hidden" => Box::new(HiddenStateEmbedder {
            model: &scorer,
            vocab: &vocab,
        }),
        "token" => Box::new(TokenEmbedder {
            model: &scorer,
            vocab: &vocab,
        }),
        other => bail!("unknown embedder {other:?} (hidden|token)"),
    };
    let (report, cases) = analyze(
        &traces[0],
        &traces[1],
        thresholds[0],
        thresholds[1],
        &samples,
        n.unwrap_or(ctx.cfg.subset_size),
        annotator.as_ref(),
        embedder.as_ref(),
    )?;
    let rpath = ctx.out.join("analysis.json");
    write_json(&rpath, &report)?;
    ctx.rec.output(&rpath)?;
    let cpath = ctx.out.join("cases.jsonl");
    let mut text = String::new();
    for c in &cases {
        text.push_str(&serde_json::to_string(c)?);
        text.push('\n');
    }
    std::fs::write(&cpath, text).with_context(|| format!("writing {}", cpath.display()))?;
    ctx.rec.output(&cpath)?;
    println!(
        "{} divergence cases, subsets of {}: question shift {:.3} vs {:.3}, similarity {:.3} vs {:.3}",
        report.n_cases,
        report.subset_size,
        report.top.question_shift_ratio,
        report.bottom.question_shift_ratio,
        report.top.semantic_similarity,
        report.bottom.semantic_similarity
    );
    for c in &report.caveats {
        println!("note: {c}");
    }
    Ok(())
}

struct RankArgs<'a> {
    history: Option<&'a Path>,
    candidates: &'a Path,
    words: Option<&'a str>,
    threshold: Option<f64>,
    variant: Variant,
    checkpoint: Option<&'a Path>,
    margin: Option<f64>,
    bias: Option<&'a str>,
}

fn rank(ctx: &mut Ctx<'_>, args: RankArgs<'_>) -> Result<()> {
    let vocab = ctx.vocab()?;
    let model = match args.checkpoint {
        Some(p) => ctx.load_checkpoint(p, args.variant, &vocab)?,
        None => ctx.model(args.variant, &vocab)?,
    };
    let history: Vec<Turn> = match args.history {
        Some(p) => {
            ctx.rec.input(p)?;
            let mut records = load_records(p)?;
            ensure!(records.len() == 1, "{} must hold exactly one record", p.display());
            records.remove(0).1
        }
        None => Vec::new(),
    };
    ctx.rec.input(args.candidates)?;
    let candidates: Vec<Vec<String>> = load_records(args.candidates)?
        .into_iter()
        .flat_map(|(_, turns)| turns.into_iter().map(|t| t.words))
        .collect();
    let threshold = match args.threshold {
        Some(t) => t,
        None => ctx
            .threshold(args.variant)?
            .context("no --threshold given and no threshold file found")?,
    };
    let log_bias = match args.bias {
        Some(b) => b
            .split(',')
            .map(|x| x.trim().parse::<f64>().with_context(|| format!("bad bias {x:?}")))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let opts = RankOptions {
        threshold,
        margin: args.margin,
        log_bias,
    };
    let ranker = Ranker {
        model: &model,
        variant: args.variant,
        vocab: &vocab,
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let mut prefix: Vec<String> = Vec::new();
    let emit = |prefix: &[String], out: &mut dyn Write| -> Result<()> {
        let d = ranker.rank_step(&history, prefix, &candidates, &opts)?;
        let mut v = serde_json::to_value(&d)?;
        v["word"] = prefix.last().cloned().unwrap_or_default().into();
        writeln!(out, "{v}")?;
        out.flush()?;
        Ok(())
    };
    match args.words {
        Some(text) => {
            for w in turnshift::corpus::normalize(text) {
                prefix.push(w);
                emit(&prefix, &mut out)?;
            }
        }
        None => {
            for line in std::io::stdin().lock().lines() {
                for w in turnshift::corpus::normalize(&line?) {
                    prefix.push(w);
                    emit(&prefix, &mut out)?;
                }
            }
        }
    }
    ctx.rec.note("words", prefix.len());
    Ok(())
}
