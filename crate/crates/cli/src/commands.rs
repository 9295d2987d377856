use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dtigen::corpus::{load_corpus, load_documents, save_corpus, LabeledExample, Lexicons};
use dtigen::datagen::{self, GenConfig};
use dtigen::fuzzymatch::EditBudget;
use dtigen::linearize::TripletOrder;
use dtigen::manifest::{manifest_path, DirLock, RunManifest};
use dtigen::model::{Checkpoint, DecodeConfig};
use dtigen::par::Exec;
use dtigen::pipeline::{self, PipelineConfig, SemisupConfig};
use dtigen::semisup::{self, load_pseudo, save_pseudo};
use dtigen::stats::corpus_stats;

use crate::{Cli, Command, SemisupCommand};

struct Ctx {
    seed: Option<u64>,
    exec: Exec,
    argv: Vec<String>,
}

impl Ctx {
    fn manifest<C: serde::Serialize>(&self, seed: u64, config: &C) -> Result<RunManifest> {
        Ok(RunManifest::start(self.argv.clone(), seed, config)?)
    }
}

/// Writes the manifest of a single-file artifact next to it.
fn finish(mut m: RunManifest, inputs: &[&Path], output: &Path) -> Result<()> {
    for p in inputs {
        m.input(p)?;
    }
    m.output(output)?;
    m.finish(&manifest_path(output))?;
    Ok(())
}

fn parent_lock(path: &Path) -> Result<DirLock> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    Ok(DirLock::acquire(&dir)?)
}

fn order(s: &str) -> Result<TripletOrder> {
    Ok(s.parse::<TripletOrder>()?)
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(PipelineConfig::default()),
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        seed: cli.seed,
        exec: if cli.sequential { Exec::Sequential } else { Exec::Parallel },
        argv: std::env::args().collect(),
    };
    match cli.command {
        Command::Datagen(a) => datagen(&ctx, a),
        Command::BuildCorpus(a) => build_corpus(&ctx, a),
        Command::TrainBpe(a) => train_bpe(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Generate(a) => generate(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Semisup(c) => semisup_cmd(&ctx, c),
        Command::Stats(a) => stats(a, ctx.exec),
        Command::AblateOrders(a) => ablate(&ctx, a),
        Command::Pipeline(a) => run_pipeline(&ctx, a),
    }
}

fn datagen(ctx: &Ctx, a: crate::DatagenArgs) -> Result<()> {
    let mut cfg: GenConfig = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => GenConfig::default(),
    };
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_docs {
        cfg.n_docs = n;
    }
    if let Some(f) = a.unlabeled_fraction {
        cfg.unlabeled_fraction = f;
    }
    if let Some(d) = a.distractors {
        cfg.n_distractor_entities = d;
    }
    let _lock = DirLock::acquire(&a.out)?;
    let m = ctx.manifest(cfg.seed, &cfg)?;
    let g = datagen::generate(&cfg)?;
    save_corpus(&g.labeled, &a.out.join("corpus.jsonl"))?;
    let pool: Vec<LabeledExample> = g.unlabeled.iter().cloned().map(LabeledExample::unlabeled).collect();
    save_corpus(&pool, &a.out.join("unlabeled.jsonl"))?;
    save_corpus(&g.hidden_gold, &a.out.join("hidden_gold.jsonl"))?;
    g.lexicons.save_dir(&a.out.join("lexicons"))?;
    let mut m = m;
    m.output(&a.out)?;
    m.finish(&a.out.join("manifest.json"))?;
    println!(
        "{} labeled and {} unlabeled documents written to {}",
        g.labeled.len(),
        g.unlabeled.len(),
        a.out.display()
    );
    Ok(())
}

fn build_corpus(ctx: &Ctx, a: crate::BuildCorpusArgs) -> Result<()> {
    let seed = ctx.seed.unwrap_or(0);
    let lexicons = Lexicons::load_dir(&a.lexicons).context("stage build-corpus: loading lexicons")?;
    let raw = load_corpus(&a.input).context("stage build-corpus: loading corpus")?;
    let cfg = pipeline::CorpusConfig {
        top_k: a.top_k,
        split: a.split,
        budget: EditBudget::default(),
    };
    let _lock = DirLock::acquire(&a.out)?;
    let mut m = ctx.manifest(seed, &cfg)?;
    m.input(&a.input)?;
    m.input(&a.lexicons)?;
    let splits = pipeline::build_corpus(&raw, &lexicons, &cfg, seed, ctx.exec)?;
    save_corpus(&splits.test, &a.out.join("test.jsonl"))?;
    save_corpus(&splits.valid, &a.out.join("valid.jsonl"))?;
    save_corpus(&splits.train, &a.out.join("train.jsonl"))?;
    m.output(&a.out)?;
    m.finish(&a.out.join("manifest.json"))?;
    println!(
        "kept {} of {} documents ({} scored below zero): test {}, valid {}, train {}",
        splits.scores.len(),
        raw.len(),
        splits.removed_negative,
        splits.test.len(),
        splits.valid.len(),
        splits.train.len()
    );
    Ok(())
}

fn corpus_file(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn train_bpe(ctx: &Ctx, a: crate::TrainBpeArgs) -> Result<()> {
    let file = corpus_file(&a.corpus, "train.jsonl");
    let examples = load_corpus(&file)?;
    let ord = order(&a.order)?;
    let _lock = parent_lock(&a.out)?;
    let m = ctx.manifest(ctx.seed.unwrap_or(0), &serde_json::json!({"merges": a.merges, "order": ord}))?;
    let bpe = pipeline::train_tokenizer(&examples, a.merges, ord)?;
    bpe.save(&a.out)?;
    finish(m, &[&file], &a.out)?;
    println!("vocabulary of {} entries written to {}", bpe.vocab_size(), a.out.display());
    Ok(())
}

fn train(ctx: &Ctx, a: crate::TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
    }
    if let Some(o) = &a.order {
        cfg.model.order = order(o)?;
    }
    if a.no_fusion {
        cfg.model.fusion = false;
    }
    let train_cfg = dtigen::model::TrainConfig {
        seed: cfg.seed,
        exec: ctx.exec,
        ..cfg.train.clone()
    };
    let train_file = a.train_file.clone().unwrap_or_else(|| a.corpus.join("train.jsonl"));
    let valid_file = a.corpus.join("valid.jsonl");
    let train_set = load_corpus(&train_file)?;
    let valid = if valid_file.exists() { load_corpus(&valid_file)? } else { Vec::new() };

    let _lock = parent_lock(&a.out)?;
    let m = ctx.manifest(cfg.seed, &cfg)?;
    let outcome = match &a.init {
        Some(init) => {
            let ck = Checkpoint::load(init)?;
            pipeline::fine_tune(&ck, &train_set, &valid, &cfg.optimizer, &train_cfg)?
        }
        None => {
            let bpe = match &a.bpe {
                Some(p) => dtigen::bpe::BpeModel::load(p)?,
                None => pipeline::train_tokenizer(&train_set, cfg.bpe_merges, cfg.model.order)?,
            };
            let provider = pipeline::build_provider(&cfg.provider, &bpe, &train_set, cfg.seed, ctx.exec)?;
            pipeline::train_model(&train_set, &valid, bpe, provider, &cfg.model, &cfg.optimizer, &train_cfg)?
        }
    };
    outcome.checkpoint.save(&a.out)?;
    let report_path = a.out.with_extension("train_report.json");
    pipeline::write_json(&outcome.report, &report_path)?;
    let mut inputs: Vec<&Path> = vec![&train_file];
    if valid_file.exists() {
        inputs.push(&valid_file);
    }
    if let Some(p) = &a.bpe {
        inputs.push(p);
    }
    if let Some(p) = &a.init {
        inputs.push(p);
    }
    finish(m, &inputs, &a.out)?;
    println!(
        "{} steps, stop: {:?}, best validation F1: {}",
        outcome.report.steps,
        outcome.report.stop,
        outcome.report.best_f1.map_or("n/a".to_string(), |f| format!("{f:.4}"))
    );
    Ok(())
}

fn decode_config(beam: usize, max_len: Option<usize>) -> Result<DecodeConfig> {
    if beam == 0 {
        bail!("--beam must be at least 1");
    }
    let mut d = DecodeConfig {
        beam,
        ..DecodeConfig::default()
    };
    if let Some(n) = max_len {
        d.max_len = n;
    }
    Ok(d)
}

fn generate(ctx: &Ctx, a: crate::GenerateArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.ckpt)?;
    if let Some(o) = &a.order {
        let o = order(o)?;
        if o != ck.model.config.order {
            bail!("checkpoint was trained with order {} but --order is {o}", ck.model.config.order);
        }
    }
    let dec = decode_config(a.beam, a.max_len)?;
    let docs = load_documents(&a.input)?;
    let _lock = parent_lock(&a.out)?;
    let m = ctx.manifest(ctx.seed.unwrap_or(0), &dec)?;
    let pred = pipeline::attach(&docs, pipeline::predict(&ck, &docs, &dec, ctx.exec)?);
    save_corpus(&pred, &a.out)?;
    finish(m, &[&a.ckpt, &a.input], &a.out)?;
    let n: usize = pred.iter().map(|e| e.triplets.len()).sum();
    println!("{n} triplets generated for {} documents", pred.len());
    Ok(())
}

fn evaluate(ctx: &Ctx, a: crate::EvaluateArgs) -> Result<()> {
    let gold = load_corpus(&a.gold)?;
    let pred = load_corpus(&a.pred)?;
    let _lock = parent_lock(&a.out)?;
    let m = ctx.manifest(ctx.seed.unwrap_or(0), &serde_json::json!({}))?;
    let report = pipeline::evaluate_corpora(&gold, &pred, ctx.exec)?;
    pipeline::write_json(&report, &a.out)?;
    finish(m, &[&a.gold, &a.pred], &a.out)?;
    println!(
        "triplet P {:.4} R {:.4} F1 {:.4} | ontology F1 {:.4} | entity acc drug {:.4} target {:.4} interaction {:.4}",
        report.triplet.precision,
        report.triplet.recall,
        report.triplet.f1,
        report.ontology.f1,
        report.entity.drug,
        report.entity.target,
        report.entity.interaction
    );
    Ok(())
}

fn semisup_cmd(ctx: &Ctx, c: SemisupCommand) -> Result<()> {
    let budget = EditBudget::default();
    match c {
        SemisupCommand::RuleFilter {
            unlabeled,
            lexicons,
            min_occ,
            out,
        } => {
            let docs = load_documents(&unlabeled)?;
            let lx = Lexicons::load_dir(&lexicons)?;
            let _lock = parent_lock(&out)?;
            let m = ctx.manifest(0, &serde_json::json!({"min_occurrence": min_occ}))?;
            let d = semisup::rule_filter(&docs, &lx, min_occ, &budget, ctx.exec)?;
            save_pseudo(&d, &out)?;
            finish(m, &[&unlabeled, &lexicons], &out)?;
            println!("{} of {} documents kept", d.len(), docs.len());
        }
        SemisupCommand::KdLabel { ckpt, input, beam, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let d_semi = load_pseudo(&input)?;
            let dec = decode_config(beam, None)?;
            let _lock = parent_lock(&out)?;
            let m = ctx.manifest(0, &dec)?;
            let docs: Vec<_> = d_semi.iter().map(|e| e.document.clone()).collect();
            let generated = pipeline::predict(&ck, &docs, &dec, ctx.exec)?;
            let d = semisup::kd_label(&generated, &d_semi)?;
            save_pseudo(&d, &out)?;
            finish(m, &[&ckpt, &input], &out)?;
            println!("{} of {} documents kept", d.len(), d_semi.len());
        }
        SemisupCommand::DsLabel {
            labeled,
            unlabeled,
            lexicons,
            with_interaction,
            out,
        } => {
            let l = load_corpus(&labeled)?;
            let u = load_documents(&unlabeled)?;
            let lx = match &lexicons {
                Some(p) => Lexicons::load_dir(p)?,
                None => Lexicons::default(),
            };
            let _lock = parent_lock(&out)?;
            let m = ctx.manifest(0, &serde_json::json!({"with_interaction": with_interaction}))?;
            let d = semisup::ds_label(&l, &u, &lx, with_interaction, &budget, ctx.exec);
            save_pseudo(&d, &out)?;
            let mut inputs: Vec<&Path> = vec![&labeled, &unlabeled];
            if let Some(p) = &lexicons {
                inputs.push(p);
            }
            finish(m, &inputs, &out)?;
            println!("{} of {} documents labeled", d.len(), u.len());
        }
        SemisupCommand::Merge {
            labeled,
            pseudo,
            upsample,
            out,
        } => {
            let seed = ctx.seed.unwrap_or(0);
            let l = load_corpus(&labeled)?;
            let p = load_pseudo(&pseudo)?;
            let _lock = parent_lock(&out)?;
            let m = ctx.manifest(seed, &serde_json::json!({"upsample": upsample}))?;
            let merged = semisup::merge_and_upsample(&l, &p, upsample, seed)?;
            save_corpus(&merged, &out)?;
            finish(m, &[&labeled, &pseudo], &out)?;
            println!("{} examples written", merged.len());
        }
    }
    Ok(())
}

fn stats(a: crate::StatsArgs, exec: Exec) -> Result<()> {
    let corpus = load_corpus(&a.corpus)?;
    let lx = match &a.lexicons {
        Some(p) => Lexicons::load_dir(p)?,
        None => Lexicons::default(),
    };
    let s = corpus_stats(&corpus, &lx, &EditBudget::default(), exec);
    let json = serde_json::to_string_pretty(&s)?;
    if let Some(out) = &a.out {
        std::fs::write(out, &json).with_context(|| format!("writing {}", out.display()))?;
    }
    println!("{json}");
    Ok(())
}

fn run_config(ctx: &Ctx, a: &crate::RunArgs) -> Result<PipelineConfig> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.max_steps {
        cfg.train.max_steps = n;
    }
    Ok(cfg)
}

fn ablate(ctx: &Ctx, a: crate::RunArgs) -> Result<()> {
    let cfg = run_config(ctx, &a)?;
    let rows = pipeline::ablate_orders(&cfg, &a.out, ctx.argv.clone(), ctx.exec)?;
    println!("order  valid_f1  test_f1");
    for r in rows {
        let v = r.valid_f1.map_or("n/a".to_string(), |f| format!("{f:.4}"));
        println!("{:<6} {:>8}  {:.4}", r.order.to_string(), v, r.test_f1);
    }
    Ok(())
}

fn run_pipeline(ctx: &Ctx, a: crate::PipelineArgs) -> Result<()> {
    let mut cfg = run_config(ctx, &a.run)?;
    if a.semisup && cfg.semisup.is_none() {
        cfg.semisup = Some(SemisupConfig::default());
    }
    let outcome = pipeline::run_pipeline(&cfg, &a.run.out, ctx.argv.clone(), ctx.exec)?;
    println!("test triplet F1 {:.4}", outcome.report.triplet.f1);
    if let Some(s) = outcome.semisup {
        println!(
            "semisup ({:?}): {} pseudo-labeled documents, test triplet F1 {:.4}",
            s.method, s.pseudo_documents, s.report.triplet.f1
        );
        if let Some(c) = s.control {
            println!("labeled-only control: test triplet F1 {:.4}", c.triplet.f1);
        }
    }
    Ok(())
}
