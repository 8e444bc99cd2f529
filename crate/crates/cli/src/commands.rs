use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use asmalign::align::{
    load_aligned, save_aligned, AlignConfig, AlignModel, AlignRecord, AlignSettings, Aligner, BagOfWords,
    BuiltinText, PairedExample, PrecomputedEmbeddings, TextEncoder, TextRef,
};
use asmalign::asm::{parse_disassembly, read_corpus, write_corpus, CorpusRecord};
use asmalign::encoder::{load_model, EncoderConfig, EncoderModel, ModelManifest};
use asmalign::eval::{
    export_embeddings, few_shot_harness, linear_probe, parse_prompt_tsv, retrieval_eval, zero_shot_classify,
    MetricsReport, ProbeConfig, PromptSet, Tagged,
};
use asmalign::numeric::AdamConfig;
use asmalign::pretrain::{write_loss_curve, CheckpointSink, PretrainConfig, Pretrainer};
use asmalign::synth::{builtin_templates, generate_corpus, parse_templates, PerturbationConfig};
use asmalign::tokenizer::{encode, rebase, TokenSequence, Vocab, WordPieceTrainer, DEFAULT_MAX_INSTRUCTIONS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConfigFile, Resolver};
use crate::error::CliError;
use crate::{
    AlignArgs, EmbedArgs, FewshotArgs, ModelShape, PretrainArgs, ProbeArgs, RetrievalArgs, SynthArgs,
    TokTrainArgs, ZeroshotArgs,
};

pub struct Context<'a> {
    pub file: &'a ConfigFile,
    pub workers: usize,
}

impl Context<'_> {
    fn resolver(&self, sub: &'static str) -> Resolver<'_> {
        let mut r = Resolver::new(self.file, sub);
        r.record.insert("workers".into(), json!(self.workers));
        r
    }
}

fn suffixed(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Write `<out>.manifest.json` describing how `out` was produced.
fn write_manifest(out: &Path, sub: &str, r: &Resolver<'_>, extra: Value) -> Result<(), CliError> {
    let mut doc = json!({
        "tool": "asmalign",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": sub,
        "config": r.record,
    });
    if let (Value::Object(d), Value::Object(e)) = (&mut doc, extra) {
        d.extend(e);
    }
    let path = suffixed(out, ".manifest.json");
    let text = serde_json::to_string_pretty(&doc).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn read_records(path: &Path) -> Result<Vec<CorpusRecord>, CliError> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let recs = read_corpus(BufReader::new(f))?;
    if recs.is_empty() {
        return Err(CliError::Input(format!("{}: corpus is empty", path.display())));
    }
    Ok(recs)
}

fn read_vocab(path: &Path) -> Result<Vocab, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(Vocab::from_text(&text)?)
}

fn parse_record(rec: &CorpusRecord) -> Result<asmalign::asm::AssemblyFunction, CliError> {
    parse_disassembly(&rec.asm_text).map_err(|e| CliError::Input(format!("record {:?}: {e}", rec.id)))
}

fn sequences(recs: &[CorpusRecord], vocab: &Vocab, max_seq_len: usize) -> Result<Vec<TokenSequence>, CliError> {
    recs.iter()
        .map(|r| Ok(encode(&rebase(&parse_record(r)?), vocab, max_seq_len)))
        .collect()
}

fn every(steps: usize) -> usize {
    (steps / 20).max(1)
}

fn shape(r: &mut Resolver<'_>, s: &ModelShape, vocab: &Vocab) -> Result<EncoderConfig, CliError> {
    let d = EncoderConfig::desk(vocab);
    let cfg = EncoderConfig {
        vocab_size: vocab.len(),
        max_instructions: vocab.max_instructions(),
        hidden_dim: r.get("hidden-dim", s.hidden_dim, d.hidden_dim)?,
        layers: r.get("layers", s.layers, d.layers)?,
        heads: r.get("heads", s.heads, d.heads)?,
        ffn_dim: r.get("ffn-dim", s.ffn_dim, d.ffn_dim)?,
        max_seq_len: r.get("max-seq-len", s.max_seq_len, d.max_seq_len)?,
        init_std: r.get("init-std", s.init_std, d.init_std)?,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializes"));
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut w = create(path)?;
    let text = serde_json::to_string_pretty(v).expect("serializes");
    writeln!(w, "{text}").and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

pub fn synth(ctx: &Context<'_>, a: SynthArgs) -> Result<(), CliError> {
    let mut r = ctx.resolver("synth");
    let source = r.get("templates", a.templates, "builtin".to_string())?;
    let variants = r.get("variants", a.variants, 6usize)?;
    let limit = r.opt("limit", a.limit)?;
    let seed = r.get("seed", a.seed, 0u64)?;
    let config = PerturbationConfig {
        register_rename: r.get("rename", a.rename, true)?,
        nop_insertion_rate: r.get("nop-rate", a.nop_rate, 0.05)?,
        independent_reorder: r.get("reorder", a.reorder, true)?,
        block_shuffle: r.get("shuffle", a.shuffle, true)?,
        variant_seed: 0,
    };
    if !(0.0..=1.0).contains(&config.nop_insertion_rate) {
        return Err(CliError::Config("nop-rate must lie in [0, 1]".into()));
    }
    let out: PathBuf = r.req("out", a.out.map(|p| p.display().to_string()))?.into();

    let mut templates = if source == "builtin" {
        builtin_templates()
    } else {
        let p = Path::new(&source);
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        parse_templates(&text).map_err(|e| CliError::Input(e.to_string()))?
    };
    templates.sort_by(|x, y| x.template_id.cmp(&y.template_id));
    if let Some(n) = limit {
        if n == 0 || n > templates.len() {
            return Err(CliError::Config(format!("limit must be in 1..={}", templates.len())));
        }
        templates.truncate(n);
    }
    let corpus = generate_corpus(&templates, variants, &config, seed)?;
    let mut w = create(&out)?;
    write_corpus(&mut w, &corpus.records())?;
    w.flush().map_err(|e| CliError::io(&out, e))?;
    eprintln!(
        "synth: {} examples from {} templates -> {}",
        corpus.examples.len(),
        templates.len(),
        out.display()
    );
    write_manifest(&out, "synth", &r, json!({ "synth": corpus.manifest }))
}

pub fn tok_train(ctx: &Context<'_>, a: TokTrainArgs) -> Result<(), CliError> {
    let mut r = ctx.resolver("tok-train");
    let corpus: PathBuf = r.req("corpus", a.corpus.map(|p| p.display().to_string()))?.into();
    let vocab_size = r.get("vocab-size", a.vocab_size, 1024usize)?;
    let min_freq = r.get("min-freq", a.min_freq, 2u64)?;
    let max_instructions = r.get("max-instructions", a.max_instructions, DEFAULT_MAX_INSTRUCTIONS)?;
    let out: PathBuf = r.req("out", a.out.map(|p| p.display().to_string()))?.into();

    let recs = read_records(&corpus)?;
    let texts = recs
        .iter()
        .map(|rec| Ok(rebase(&parse_record(rec)?).body_text()))
        .collect::<Result<Vec<_>, CliError>>()?;
    let vocab = WordPieceTrainer::new(vocab_size, min_freq)
        .with_max_instructions(max_instructions)
        .train(&texts)?;
    let mut w = create(&out)?;
    w.write_all(vocab.to_text().as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&out, e))?;
    eprintln!("tok-train: {} tokens from {} functions -> {}", vocab.len(), texts.len(), out.display());
    write_manifest(&out, "tok-train", &r, json!({ "vocab_len": vocab.len() }))
}

pub fn pretrain(ctx: &Context<'_>, a: PretrainArgs) -> Result<(), CliError> {
    let mut r = ctx.resolver("pretrain");
    let corpus: PathBuf = r.req("corpus", a.corpus.map(|p| p.display().to_string()))?.into();
    let vocab_path: PathBuf = r.req("vocab", a.vocab.map(|p| p.display().to_string()))?.into();
    let seed: u64 = r.req("seed", a.seed)?;
    let defaults = PretrainConfig::default();
    let vocab = read_vocab(&vocab_path)?;
    let enc = shape(&mut r, &a.shape, &vocab)?;
    let config = PretrainConfig {
        steps: r.get("steps", a.steps, defaults.steps)?,
        batch_size: r.get("batch-size", a.batch_size, defaults.batch_size)?,
        mlm_rate: r.get("mlm-rate", a.mlm_rate, defaults.mlm_rate)?,
        jtp_rate: r.get("jtp-rate", a.jtp_rate, defaults.jtp_rate)?,
        adam: AdamConfig {
            lr: r.get("lr", a.lr, defaults.adam.lr)?,
            ..defaults.adam
        },
        seed,
        checkpoint_every: r.get("checkpoint-every", a.checkpoint_every, 0usize)?,
    };
    let resume = r.opt("resume", a.resume.map(|p| p.display().to_string()))?;
    let out: PathBuf = r.req("out", a.out.map(|p| p.display().to_string()))?.into();

    let recs = read_records(&corpus)?;
    let seqs = sequences(&recs, &vocab, enc.max_seq_len)?;
    let (mut model, mut trainer) = match &resume {
        Some(p) => {
            let (_, encoder, ck) = load_model(Path::new(p), Some(&enc))?;
            let state = ck
                .optimizer
                .ok_or_else(|| CliError::IncompatibleCheckpoint(format!("{p}: no optimizer state to resume")))?;
            let model = EncoderModel {
                encoder,
                params: ck.params,
            };
            let t = Pretrainer::resume(config.clone(), &model, state)?;
            (model, t)
        }
        None => {
            let model = EncoderModel::<f32>::new(enc.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
            let t = Pretrainer::new(config.clone(), &model)?;
            (model, t)
        }
    };
    let mut manifest = ModelManifest::new(enc);
    manifest.extra.insert("stage".into(), "pretrain".into());
    manifest.extra.insert("run".into(), json!(r.record));
    let sink = CheckpointSink {
        dir: suffixed(&out, ".checkpoints"),
        manifest,
    };
    let total = config.steps;
    let log_every = every(total);
    let curve = trainer.run(&mut model, &seqs, &vocab, Some(&sink), |rec| {
        if rec.step % log_every == 0 || rec.step == total {
            eprintln!(
                "pretrain: step {}/{total} loss {:.4} (mlm {:.4}, jtp {:.4})",
                rec.step, rec.total, rec.mlm_loss, rec.jtp_loss
            );
        }
    })?;
    trainer.save(&model, &sink, &out)?;
    // Only periodic checkpoints live there; drop it when none were written.
    let _ = std::fs::remove_dir(&sink.dir);
    let csv = suffixed(&out, ".loss.csv");
    let mut w = create(&csv)?;
    write_loss_curve(&mut w, &curve)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(&csv, e))?;
    write_manifest(
        &out,
        "pretrain",
        &r,
        json!({ "encoder": model.config(), "loss_curve": csv.display().to_string() }),
    )
}

fn text_encoder(
    r: &mut Resolver<'_>,
    a: &AlignArgs,
    examples: &[PairedExample],
    base: &mut EncoderModel<f32>,
    rng: &mut ChaCha8Rng,
) -> Result<(BuiltinText, Option<String>), CliError> {
    let kind = r.get("text", a.text.clone(), "bow".to_string())?;
    match kind.as_str() {
        "bow" => {
            let dim = r.get("text-dim", a.text_dim, 64usize)?;
            let words = BagOfWords::build_vocab(examples.iter().map(|e| e.explanation.as_str()));
            Ok((BuiltinText::BagOfWords(BagOfWords::init(words, dim, &mut base.params, rng)?), None))
        }
        "precomputed" => {
            let path: String = r.req("text-embeddings", a.text_embeddings.as_ref().map(|p| p.display().to_string()))?;
            let e = PrecomputedEmbeddings::read(Path::new(&path))?;
            Ok((BuiltinText::Precomputed(e), Some(path)))
        }
        other => Err(CliError::Config(format!("unknown text encoder {other:?}; use bow or precomputed"))),
    }
}

fn write_align_curve(path: &Path, curve: &[AlignRecord]) -> Result<(), CliError> {
    let mut w = create(path)?;
    let mut go = || -> std::io::Result<()> {
        writeln!(w, "step,loss,in_batch_recall_at_1")?;
        for c in curve {
            writeln!(w, "{},{},{}", c.step, c.loss, c.in_batch_recall_at_1)?;
        }
        w.flush()
    };
    go().map_err(|e| CliError::io(path, e))
}

pub fn align(ctx: &Context<'_>, a: AlignArgs) -> Result<(), CliError> {
    let mut r = ctx.resolver("align");
    let corpus: PathBuf = r.req("corpus", a.corpus.as_ref().map(|p| p.display().to_string()))?.into();
    let vocab_path: PathBuf = r.req("vocab", a.vocab.as_ref().map(|p| p.display().to_string()))?.into();
    let init = r.opt("model", a.model.as_ref().map(|p| p.display().to_string()))?;
    let seed: u64 = r.req("seed", a.seed)?;
    let defaults = AlignConfig::default();
    let config = AlignConfig {
        steps: r.get("steps", a.steps, defaults.steps)?,
        batch_size: r.get("batch-size", a.batch_size, defaults.batch_size)?,
        adam: AdamConfig {
            lr: r.get("lr", a.lr, defaults.adam.lr)?,
            ..defaults.adam
        },
        seed,
        checkpoint_every: r.get("checkpoint-every", a.checkpoint_every, 0usize)?,
    };
    let settings = AlignSettings {
        temperature: r.get("temperature", a.temperature, 0.1)?,
        learnable_temperature: r.get("learnable-temperature", a.learnable_temperature, false)?,
        normalize: r.get("normalize", a.normalize, true)?,
        symmetric: r.get("symmetric", a.symmetric, false)?,
        projection: r.get("projection", a.projection, true)?,
    };
    settings.validate()?;
    let vocab = read_vocab(&vocab_path)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = match &init {
        Some(p) => {
            let (m, encoder, ck) = load_model(Path::new(p), None)?;
            if m.encoder.vocab_size != vocab.len() || m.encoder.max_instructions != vocab.max_instructions() {
                return Err(CliError::IncompatibleCheckpoint(format!(
                    "{p} was trained with a different vocabulary"
                )));
            }
            EncoderModel {
                encoder,
                params: ck.params,
            }
        }
        None => {
            let enc = shape(&mut r, &a.shape, &vocab)?;
            EncoderModel::new(enc, &mut rng)?
        }
    };
    let out: PathBuf = r.req("out", a.out.as_ref().map(|p| p.display().to_string()))?.into();

    let recs = read_records(&corpus)?;
    let paired = recs
        .iter()
        .map(PairedExample::from_record)
        .collect::<Result<Vec<_>, _>>()?;
    let (text, text_path) = text_encoder(&mut r, &a, &paired, &mut base, &mut rng)?;
    let enc_config = base.config().clone();
    let examples: Vec<_> = paired.iter().map(|p| p.prepare(&vocab, enc_config.max_seq_len)).collect();
    let mut model = AlignModel::init(base, text, settings, &mut rng)?;
    let spec = model.text.spec(text_path.as_deref());

    let mut manifest = ModelManifest::new(enc_config);
    manifest.extra.insert("run".into(), json!(r.record));
    let ckpt_dir = suffixed(&out, ".checkpoints");
    let total = config.steps;
    let log_every = every(total);
    let mut aligner = Aligner::new(config, &model);
    let curve = aligner.run(
        &mut model,
        &examples,
        |m, state| {
            std::fs::create_dir_all(&ckpt_dir).map_err(asmalign::align::AlignError::Io)?;
            let p = ckpt_dir.join(format!("step-{:06}.ckpt", state.step));
            save_aligned(&p, &manifest, m, &spec, Some(state))
        },
        |rec| {
            if rec.step % log_every == 0 || rec.step == total {
                eprintln!(
                    "align: step {}/{total} loss {:.4} in-batch R@1 {:.3}",
                    rec.step, rec.loss, rec.in_batch_recall_at_1
                );
            }
        },
    )?;
    save_aligned(&out, &manifest, &model, &spec, Some(&aligner.optimizer.state))?;
    let csv = suffixed(&out, ".loss.csv");
    write_align_curve(&csv, &curve)?;
    write_manifest(
        &out,
        "align",
        &r,
        json!({ "settings": settings, "text": spec, "loss_curve": csv.display().to_string() }),
    )
}

struct Loaded {
    model: AlignModel<f32, BuiltinText>,
    vocab: Vocab,
}

fn load(r: &mut Resolver<'_>, model: Option<PathBuf>, vocab: Option<PathBuf>) -> Result<Loaded, CliError> {
    let mp: PathBuf = r.req("model", model.map(|p| p.display().to_string()))?.into();
    let vp: PathBuf = r.req("vocab", vocab.map(|p| p.display().to_string()))?.into();
    let vocab = read_vocab(&vp)?;
    let (model, _, _) = load_aligned(&mp)?;
    let c = model.encoder.config();
    if c.vocab_size != vocab.len() || c.max_instructions != vocab.max_instructions() {
        return Err(CliError::IncompatibleCheckpoint(format!(
            "{} does not match vocabulary {}",
            mp.display(),
            vp.display()
        )));
    }
    Ok(Loaded { model, vocab })
}

impl Loaded {
    fn embed_records(&self, recs: &[CorpusRecord]) -> Result<Vec<Vec<f32>>, CliError> {
        let seqs = sequences(recs, &self.vocab, self.model.encoder.config().max_seq_len)?;
        let refs: Vec<&TokenSequence> = seqs.iter().collect();
        Ok(self.model.embed_functions(&refs)?)
    }

    fn embed_texts(&self, ids: &[String], texts: &[String]) -> Result<Vec<Vec<f32>>, CliError> {
        let items: Vec<TextRef<'_>> = ids.iter().zip(texts).map(|(id, text)| TextRef { id, text }).collect();
        Ok(self.model.embed_texts(&items)?)
    }
}

fn explanation(rec: &CorpusRecord) -> Result<String, CliError> {
    rec.explanation
        .clone()
        .ok_or_else(|| CliError::Input(format!("record {:?} has no explanation", rec.id)))
}

fn first_label(rec: &CorpusRecord) -> Result<String, CliError> {
    rec.labels
        .as_ref()
        .and_then(|l| l.first().cloned())
        .ok_or_else(|| CliError::Input(format!("record {:?} has no label", rec.id)))
}

pub fn embed(ctx: &Context<'_>, a: EmbedArgs) -> Result<(), CliError> {
    let mut r = ctx.resolver("embed");
    let loaded = load(&mut r, a.model, a.vocab)?;
    let corpus: PathBuf = r.req("corpus", a.corpus.map(|p| p.display().to_string()))?.into();
    let side = r.get("side", a.side, "asm".to_string())?;
    let out: PathBuf = r.req("out", a.out.map(|p| p.display().to_string()))?.into();
    let recs = read_records(&corpus)?;
    let ids: Vec<String> = recs.iter().map(|x| x.id.clone()).collect();
    let emb = match side.as_str() {
        "asm" => loaded.embed_records(&recs)?,
        "text" => {
            let texts = recs.iter().map(explanation).collect::<Result<Vec<_>, _>>()?;
            loaded.embed_texts(&ids, &texts)?
        }
        other => return Err(CliError::Config(format!("unknown side {other:?}; use asm or text"))),
    };
    let table = export_embeddings(&ids, &emb, &out)?;
    eprintln!("embed: {} x {} -> {}", table.len(), table.dim(), out.display());
    write_manifest(&out, "embed", &r, json!({ "rows": table.len(), "dim": table.dim() }))
}

#[derive(Serialize)]
struct Prediction {
    id: String,
    label: String,
    probabilities: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    truth: Option<String>,
}

pub fn zeroshot(ctx: &Context<'_>, a: ZeroshotArgs) -> Result<(), CliError> {
    let mut r = ctx.resolver("zeroshot");
    let loaded = load(&mut r, a.model, a.vocab)?;
    let prompts_path: PathBuf = r.req("prompts", a.prompts.map(|p| p.display().to_string()))?.into();
    let input = r.opt("input", a.input.map(|p| p.display().to_string()))?;
    let corpus = r.opt("corpus", a.corpus.map(|p| p.display().to_string()))?;
    let out = r.opt("out", a.out.map(|p| p.display().to_string()))?;
    let text = std::fs::read_to_string(&prompts_path).map_err(|e| CliError::io(&prompts_path, e))?;
    let prompts = PromptSet::embed(&loaded.model, parse_prompt_tsv(&text)?)?;

    let recs = match (input, corpus) {
        (Some(p), None) => {
            let listing = std::fs::read_to_string(&p).map_err(|e| CliError::io(Path::new(&p), e))?;
            vec![CorpusRecord {
                id: p.clone(),
                name: String::new(),
                asm_text: listing,
                explanation: None,
                labels: None,
                group: None,
            }]
        }
        (None, Some(p)) => read_records(Path::new(&p))?,
        _ => return Err(CliError::Config("zeroshot needs exactly one of --input or --corpus".into())),
    };
    let emb = loaded.embed_records(&recs)?;
    let mut preds = Vec::with_capacity(recs.len());
    for (rec, e) in recs.iter().zip(&emb) {
        let z = zero_shot_classify(e, &prompts)?;
        preds.push(Prediction {
            id: rec.id.clone(),
            label: z.label.clone(),
            probabilities: prompts.labels.iter().cloned().zip(z.probabilities.iter().copied()).collect(),
            truth: rec.labels.as_ref().and_then(|l| l.first().cloned()),
        });
    }

    let mut stdout = std::io::stdout().lock();
    let io = |e: std::io::Error| CliError::io(Path::new("<stdout>"), e);
    if preds.len() == 1 {
        let p = &preds[0];
        writeln!(stdout, "prediction\t{}", p.label).map_err(io)?;
        let mut rows: Vec<_> = p.probabilities.iter().collect();
        rows.sort_by(|x, y| y.1.total_cmp(x.1).then(x.0.cmp(y.0)));
        for (label, prob) in rows {
            writeln!(stdout, "{label}\t{prob:.6}").map_err(io)?;
        }
    } else {
        writeln!(stdout, "id\tprediction\tprobability").map_err(io)?;
        for p in &preds {
            writeln!(stdout, "{}\t{}\t{:.6}", p.id, p.label, p.probabilities[&p.label]).map_err(io)?;
        }
    }
    let labelled: Vec<_> = preds.iter().filter(|p| p.truth.is_some()).collect();
    let accuracy = (!labelled.is_empty()).then(|| {
        labelled.iter().filter(|p| p.truth.as_deref() == Some(&p.label)).count() as f64 / labelled.len() as f64
    });
    if let Some(acc) = accuracy {
        eprintln!("zeroshot: accuracy {acc:.4} over {} labelled functions", labelled.len());
    }
    if let Some(out) = out {
        let out = PathBuf::from(out);
        write_json(&out, &json!({ "accuracy": accuracy, "predictions": preds }))?;
        write_manifest(&out, "zeroshot", &r, json!({}))?;
    }
    Ok(())
}

pub fn eval_retrieval(ctx: &Context<'_>, a: RetrievalArgs) -> Result<(), CliError> {
    let mut r = ctx.resolver("eval-retrieval");
    let loaded = load(&mut r, a.model, a.vocab)?;
    let corpus: PathBuf = r.req("corpus", a.corpus.map(|p| p.display().to_string()))?.into();
    let mode = r.get("mode", a.mode, "text".to_string())?;
    let pool = r.get("pool", a.pool, 32usize)?;
    let trials = r.get("trials", a.trials, 1usize)?;
    let seed = r.get("seed", a.seed, 0u64)?;
    let out = r.opt("out", a.out.map(|p| p.display().to_string()))?;
    let recs = read_records(&corpus)?;
    let group = |rec: &CorpusRecord| {
        rec.group
            .clone()
            .ok_or_else(|| CliError::Input(format!("record {:?} has no group", rec.id)))
    };
    let groups = recs.iter().map(group).collect::<Result<Vec<_>, _>>()?;

    // First record of each group, and the remaining ones.
    let mut firsts = Vec::new();
    let mut rest = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, g) in groups.iter().enumerate() {
        if seen.insert(g.clone()) {
            firsts.push(i);
        } else {
            rest.push(i);
        }
    }
    let pick = |idx: &[usize]| -> (Vec<CorpusRecord>, Vec<String>) {
        (idx.iter().map(|&i| recs[i].clone()).collect(), idx.iter().map(|&i| groups[i].clone()).collect())
    };
    let (q_emb, q_groups, c_emb, c_groups) = match mode.as_str() {
        "text" => {
            let (c_recs, c_groups) = pick(&firsts);
            let ids: Vec<String> = c_recs.iter().map(|x| x.id.clone()).collect();
            let texts = c_recs.iter().map(explanation).collect::<Result<Vec<_>, _>>()?;
            (loaded.embed_records(&recs)?, groups.clone(), loaded.embed_texts(&ids, &texts)?, c_groups)
        }
        "asm" => {
            // One query per group (its first record), its second record as the candidate.
            let mut second = Vec::new();
            let mut taken = std::collections::HashSet::new();
            for &i in &rest {
                if taken.insert(groups[i].clone()) {
                    second.push(i);
                }
            }
            let with_pair: std::collections::HashSet<_> = second.iter().map(|&i| groups[i].clone()).collect();
            let queries: Vec<usize> = firsts.iter().copied().filter(|&i| with_pair.contains(&groups[i])).collect();
            let (q_recs, q_groups) = pick(&queries);
            let (c_recs, c_groups) = pick(&second);
            (loaded.embed_records(&q_recs)?, q_groups, loaded.embed_records(&c_recs)?, c_groups)
        }
        other => return Err(CliError::Config(format!("unknown mode {other:?}; use text or asm"))),
    };
    let mut report: MetricsReport = retrieval_eval(
        Tagged {
            embeddings: &q_emb,
            groups: &q_groups,
        },
        Tagged {
            embeddings: &c_emb,
            groups: &c_groups,
        },
        pool,
        seed,
        trials,
    )?;
    report.breakdown.insert("mode".into(), json!(mode));
    report.breakdown.insert("queries".into(), json!(q_emb.len()));
    report.breakdown.insert("candidates".into(), json!(c_emb.len()));
    print_json(&report);
    if let Some(out) = out {
        let out = PathBuf::from(out);
        write_json(&out, &report)?;
        write_manifest(&out, "eval-retrieval", &r, json!({}))?;
    }
    Ok(())
}

fn class_index(labels: &[String]) -> (Vec<String>, Vec<usize>) {
    let mut classes = labels.to_vec();
    classes.sort();
    classes.dedup();
    let ys = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("present"))
        .collect();
    (classes, ys)
}

pub fn probe(ctx: &Context<'_>, a: ProbeArgs) -> Result<(), CliError> {
    let mut r = ctx.resolver("probe");
    let loaded = load(&mut r, a.model, a.vocab)?;
    let train: PathBuf = r.req("train", a.train.map(|p| p.display().to_string()))?.into();
    let eval: PathBuf = r.req("eval", a.eval.map(|p| p.display().to_string()))?.into();
    let d = ProbeConfig::default();
    let config = ProbeConfig {
        steps: r.get("steps", a.steps, d.steps)?,
        lr: r.get("lr", a.lr, d.lr)?,
    };
    let out = r.opt("out", a.out.map(|p| p.display().to_string()))?;
    let tr = read_records(&train)?;
    let ev = read_records(&eval)?;
    let tl = tr.iter().map(first_label).collect::<Result<Vec<_>, _>>()?;
    let el = ev.iter().map(first_label).collect::<Result<Vec<_>, _>>()?;
    let (classes, _) = class_index(&[tl.clone(), el.clone()].concat());
    let idx = |ls: &[String]| -> Vec<usize> { ls.iter().map(|l| classes.binary_search(l).expect("present")).collect() };
    let result = linear_probe(
        &loaded.embed_records(&tr)?,
        &idx(&tl),
        &loaded.embed_records(&ev)?,
        &idx(&el),
        classes.len(),
        config,
    )?;
    let mut report = MetricsReport {
        accuracy: Some(result.accuracy),
        ..Default::default()
    };
    report.breakdown.insert("train_accuracy".into(), json!(result.train_accuracy));
    report.breakdown.insert("classes".into(), json!(classes));
    print_json(&report);
    if let Some(out) = out {
        let out = PathBuf::from(out);
        write_json(&out, &report)?;
        write_manifest(&out, "probe", &r, json!({}))?;
    }
    Ok(())
}

pub fn fewshot(ctx: &Context<'_>, a: FewshotArgs) -> Result<(), CliError> {
    let mut r = ctx.resolver("fewshot");
    let loaded = load(&mut r, a.model, a.vocab)?;
    let corpus: PathBuf = r.req("corpus", a.corpus.map(|p| p.display().to_string()))?.into();
    let ks_text = r.get("ks", a.ks, "1,2,4,8,16".to_string())?;
    let ks = ks_text
        .split(',')
        .map(|k| k.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Config(format!("ks: {e}")))?;
    let trials = r.get("trials", a.trials, 5usize)?;
    let seed = r.get("seed", a.seed, 0u64)?;
    let d = ProbeConfig::default();
    let config = ProbeConfig {
        steps: r.get("steps", a.steps, d.steps)?,
        lr: r.get("lr", a.lr, d.lr)?,
    };
    let out = r.opt("out", a.out.map(|p| p.display().to_string()))?;
    let recs = read_records(&corpus)?;
    let labels = recs.iter().map(first_label).collect::<Result<Vec<_>, _>>()?;
    let (classes, ys) = class_index(&labels);
    let x = loaded.embed_records(&recs)?;
    let report = few_shot_harness(&x, &ys, classes.len(), &ks, trials, seed, config)?;
    for row in &report.rows {
        eprintln!("fewshot: k={} mean accuracy {:.4}", row.k, row.mean);
    }
    print_json(&report);
    if let Some(out) = out {
        let out = PathBuf::from(out);
        write_json(&out, &report)?;
        write_manifest(&out, "fewshot", &r, json!({ "classes": classes }))?;
    }
    Ok(())
}
