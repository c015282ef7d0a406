//! End-to-end wiring: fitted artifacts, encoded datasets, training stages,
//! evaluation, generation, the ablation matrix and run reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{NoteSource, RunConfig};
use crate::data::{
    bhc_target, build_timeline, build_vocab, fit_norm_stats, generate_synthetic_cohort, note_text, parse_meds_jsonl,
    save_timelines, split_patients, write_jsonl, AdmissionRecord, CodeEmbeddings, NormStats, Split, SynthConfig, Task,
    Vocabulary,
};
use crate::decoder::Tokenizer;
use crate::encoders::NoteProvider;
use crate::error::{Error, Result};
use crate::metrics::{write_nlg_csv, MetricReport, NlgMetrics, NlgSample, TaskMetrics, TokenVectors};
use crate::model::{init_params, Net};
use crate::tensor::{ParamStore, Rng};
use crate::training::{finetune, load_checkpoint, predict, pretrain, save_checkpoint, Dataset, LoadOptions, Outcome, RunDir};

/// Seed offset for the code-embedding table, kept apart from model init.
const CODE_TABLE_SEED: u64 = 0x00c0_de00;

// ---- records ---------------------------------------------------------------

/// Admissions from `data.path`, else `<run>/cohort.jsonl` when present,
/// else a synthetic cohort drawn under the run seed.
pub fn load_records(cfg: &RunConfig, run: Option<&Path>) -> Result<Vec<AdmissionRecord>> {
    if !cfg.data.path.is_empty() {
        return parse_meds_jsonl(Path::new(&cfg.data.path));
    }
    if let Some(p) = run.map(|r| r.join("cohort.jsonl")).filter(|p| p.exists()) {
        return parse_meds_jsonl(&p);
    }
    Ok(synth_records(cfg))
}

pub fn synth_records(cfg: &RunConfig) -> Vec<AdmissionRecord> {
    generate_synthetic_cohort(cfg.data.synth_admissions, cfg.seed, &SynthConfig { mode: cfg.data.synth_mode })
}

/// Writes the synthetic cohort; returns the output path.
pub fn write_synth(cfg: &RunConfig, run: &Path) -> Result<PathBuf> {
    let path = if cfg.data.path.is_empty() {
        run.join("cohort.jsonl")
    } else {
        PathBuf::from(&cfg.data.path)
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_jsonl(&path, &synth_records(cfg))?;
    Ok(path)
}

// ---- artifacts -------------------------------------------------------------

/// Everything fitted on the training split.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub vocab: Vocabulary,
    pub stats: NormStats,
    pub codes: CodeEmbeddings,
    pub tokenizer: Tokenizer,
}

const ARTIFACT_FILES: [&str; 4] = ["vocab.json", "stats.json", "codes.blob", "tokenizer.txt"];

impl Artifacts {
    pub fn fit(train: &[AdmissionRecord], cfg: &RunConfig) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Sizing("cannot fit artifacts on an empty training split".into()));
        }
        let vocab = build_vocab(train, cfg.data.vocab_top_k)?;
        let stats = fit_norm_stats(train, &vocab, cfg.data.n_buckets)?;
        let codes = CodeEmbeddings::seeded(vocab.size(), cfg.seed ^ CODE_TABLE_SEED);
        let mut texts: Vec<String> = train.iter().map(bhc_target).collect();
        if cfg.note.source == NoteSource::BuiltIn {
            texts.extend(train.iter().map(|r| note_text(&r.discharge_text)));
        }
        let tokenizer = Tokenizer::train(&texts, cfg.model.vocab)?;
        Ok(Self {
            vocab,
            stats,
            codes,
            tokenizer,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
        };
        write(ARTIFACT_FILES[0], serde_json::to_string_pretty(&self.vocab)?)?;
        write(ARTIFACT_FILES[1], serde_json::to_string_pretty(&self.stats)?)?;
        self.codes.save(&dir.join(ARTIFACT_FILES[2]))?;
        self.tokenizer.save(&dir.join(ARTIFACT_FILES[3]))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let missing: Vec<PathBuf> = ARTIFACT_FILES.iter().map(|f| dir.join(f)).filter(|p| !p.exists()).collect();
        if !missing.is_empty() {
            return Err(Error::MissingFiles(missing));
        }
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        let vocab: Vocabulary = serde_json::from_str(&read(ARTIFACT_FILES[0])?)?;
        Ok(Self {
            vocab: vocab.reindex(),
            stats: serde_json::from_str(&read(ARTIFACT_FILES[1])?)?,
            codes: CodeEmbeddings::load(&dir.join(ARTIFACT_FILES[2]))?,
            tokenizer: Tokenizer::load(&dir.join(ARTIFACT_FILES[3]))?,
        })
    }

    pub fn note_provider(&self, cfg: &RunConfig) -> Result<NoteProvider> {
        match cfg.note.source {
            NoteSource::BuiltIn => Ok(NoteProvider::BuiltIn {
                tokenizer: self.tokenizer.clone(),
                max_tokens: cfg.model.note_max_tokens,
            }),
            NoteSource::File => NoteProvider::from_file(Path::new(&cfg.note.file), cfg.note.missing),
        }
    }

    /// Encodes records into timelines, notes, target tokens and labels.
    pub fn dataset(&self, records: &[AdmissionRecord], cfg: &RunConfig, notes: &NoteProvider) -> Result<Dataset> {
        let timelines = records
            .iter()
            .map(|r| build_timeline(r, &self.vocab, &self.stats, &self.codes, cfg.model.seq_len))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&AdmissionRecord> = records.iter().collect();
        let references: Vec<String> = records.iter().map(bhc_target).collect();
        let targets = references.iter().map(|t| self.tokenizer.tokenize(t, cfg.model.max_len).0).collect();
        Ok(Dataset {
            ids: records.iter().map(|r| r.admission_id.clone()).collect(),
            timelines,
            notes: notes.prepare(&refs)?,
            targets,
            references,
            labels: records.iter().map(|r| r.labels).collect(),
        })
    }
}

/// Split records, fitted artifacts and the three encoded datasets.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub artifacts: Artifacts,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Prepared {
    /// Splits `records` by patient, fits artifacts on the training part
    /// (or reuses `artifacts`) and encodes every part.
    pub fn build(cfg: &RunConfig, records: &[AdmissionRecord], artifacts: Option<Artifacts>) -> Result<Self> {
        let split = split_patients(records, cfg.data.split, cfg.seed)?;
        Self::from_split(cfg, &split, artifacts)
    }

    pub fn from_split(cfg: &RunConfig, split: &Split, artifacts: Option<Artifacts>) -> Result<Self> {
        let artifacts = match artifacts {
            Some(a) => a,
            None => Artifacts::fit(&split.train, cfg)?,
        };
        let notes = artifacts.note_provider(cfg)?;
        Ok(Self {
            train: artifacts.dataset(&split.train, cfg, &notes)?,
            val: artifacts.dataset(&split.val, cfg, &notes)?,
            test: artifacts.dataset(&split.test, cfg, &notes)?,
            artifacts,
        })
    }

    /// Uses `<run>/artifacts` when present, else fits and saves them there.
    pub fn for_run(cfg: &RunConfig, run: &Path) -> Result<Self> {
        let records = load_records(cfg, Some(run))?;
        let dir = run.join("artifacts");
        let existing = if dir.exists() { Some(Artifacts::load(&dir)?) } else { None };
        let fresh = existing.is_none();
        let p = Self::build(cfg, &records, existing)?;
        if fresh {
            p.artifacts.save(&dir)?;
        }
        Ok(p)
    }

    /// Writes the encoded timelines of each split.
    pub fn save_encoded(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, d) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            save_timelines(&dir.join(format!("{name}.timelines")), &d.timelines)?;
            let p = dir.join(format!("{name}.ids"));
            std::fs::write(&p, d.ids.join("\n") + "\n").map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

// ---- stages ----------------------------------------------------------------

/// Fresh parameters, or those of `train.init_checkpoint` when set.
pub fn initial_params(cfg: &RunConfig) -> Result<ParamStore<f32>> {
    let mut store = init_params(&cfg.model, cfg.seed)?;
    if !cfg.train.init_checkpoint.is_empty() {
        load_checkpoint(
            Path::new(&cfg.train.init_checkpoint),
            &mut store,
            LoadOptions {
                init_heads_fresh: cfg.train.init_heads_fresh,
                seed: cfg.seed,
            },
            &cfg.train,
        )?;
    }
    Ok(store)
}

pub fn run_pretrain(cfg: &RunConfig, data: &Prepared, store: &mut ParamStore<f32>, run: Option<&RunDir>) -> Result<Outcome> {
    pretrain(cfg, store, &data.train, Some(&data.val), run)
}

pub fn run_finetune(cfg: &RunConfig, data: &Prepared, store: &mut ParamStore<f32>, run: Option<&RunDir>) -> Result<Outcome> {
    finetune(cfg, store, &data.train, Some(&data.val), run)
}

/// Writes `model.ckpt` (parameters only) into `run`.
pub fn save_model(run: &RunDir, store: &ParamStore<f32>, stage: &str) -> Result<()> {
    let meta = BTreeMap::from([("stage".to_string(), stage.to_string())]);
    save_checkpoint(&run.path("model.ckpt"), store, None, &meta)
}

// ---- evaluation ------------------------------------------------------------

/// Word vectors from the decoder's token table: the mean of the rows of
/// the word's subword pieces.
pub struct DecoderVectors<'a> {
    pub tokenizer: &'a Tokenizer,
    pub table: &'a [f32],
    pub dim: usize,
}

impl TokenVectors for DecoderVectors<'_> {
    fn vector(&self, token: &str) -> Vec<f32> {
        let ids = self.tokenizer.encode(&format!(" {token}"));
        let mut v = vec![0.0f32; self.dim];
        for &id in &ids {
            for (a, &b) in v.iter_mut().zip(&self.table[id * self.dim..(id + 1) * self.dim]) {
                *a += b;
            }
        }
        let n = ids.len().max(1) as f32;
        v.iter_mut().for_each(|x| *x /= n);
        v
    }
}

/// One generated summary with its reference.
#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub admission_id: String,
    pub generated: String,
    pub reference: String,
}

/// Generates for the first `limit` admissions of `data` (all when 0).
pub fn generate(cfg: &RunConfig, store: &ParamStore<f32>, tokenizer: &Tokenizer, data: &Dataset, limit: usize) -> Result<Vec<Generation>> {
    let n = if limit == 0 { data.len() } else { limit.min(data.len()) };
    let net = Net::new(&cfg.model, store);
    let mut rng = Rng::child(cfg.seed, 9000);
    let mut out = Vec::with_capacity(n);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(cfg.train.finetune_batch) {
        let b = data.batch(chunk)?;
        let (memory, valid) = crate::training::encode_for_generation(cfg, store, &b)?;
        let seqs = net.generate(&memory, &valid, cfg.eval.max_gen_len, cfg.eval.decoding, &mut rng)?;
        for (&i, ids) in chunk.iter().zip(seqs) {
            out.push(Generation {
                admission_id: data.ids[i].clone(),
                generated: tokenizer.detokenize(&ids),
                reference: data.references[i].clone(),
            });
        }
    }
    Ok(out)
}

/// Writes generations alongside references as JSONL.
pub fn write_generations(path: &Path, gens: &[Generation]) -> Result<()> {
    let mut s = String::new();
    for g in gens {
        let v = serde_json::json!({"admission_id": g.admission_id, "generated": g.generated, "reference": g.reference});
        s.push_str(&serde_json::to_string(&v)?);
        s.push('\n');
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Full evaluation output.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub samples: Vec<NlgSample>,
    pub generations: Vec<Generation>,
}

/// Classification metrics for every task with both classes present in
/// `data`, plus text metrics when generation is enabled.
pub fn evaluate(cfg: &RunConfig, store: &ParamStore<f32>, tokenizer: &Tokenizer, data: &Dataset, model: &str) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation split is empty".into()));
    }
    let probs = predict(cfg, store, data)?;
    let mut report = MetricReport {
        model: model.to_string(),
        ..MetricReport::default()
    };
    for (k, task) in Task::ALL.into_iter().enumerate() {
        let (s, y): (Vec<f64>, Vec<u8>) = probs
            .iter()
            .zip(&data.labels)
            .filter_map(|(p, l)| l.get(task).map(|y| (p[k], y)))
            .unzip();
        let pos = y.iter().filter(|&&v| v == 1).count();
        if pos == 0 || pos == y.len() {
            log::warn!("task {}: single-class labels, skipped", task.name());
            continue;
        }
        let m = TaskMetrics::compute(&s, &y, cfg.eval.bootstrap, cfg.seed.wrapping_add(k as u64))?;
        report.tasks.insert(task.name().to_string(), m);
    }
    let (mut samples, mut generations) = (Vec::new(), Vec::new());
    if cfg.eval.generate {
        generations = generate(cfg, store, tokenizer, data, cfg.eval.generate_limit)?;
        let table = store.get("decoder.token_embedding")?;
        let vectors = DecoderVectors {
            tokenizer,
            table: table.tensor.data(),
            dim: cfg.model.d_model,
        };
        for g in generations.iter().filter(|g| !g.reference.trim().is_empty()) {
            samples.push(NlgSample::score(&g.admission_id, &g.generated, &g.reference, &vectors)?);
        }
        if !samples.is_empty() {
            report.nlg = Some(NlgMetrics::mean_of(&samples)?);
        }
    }
    Ok(Evaluation {
        report,
        samples,
        generations,
    })
}

/// Writes `report.json`, `report.txt`, `nlg_samples.csv` and
/// `generations.jsonl` into `run`.
pub fn write_evaluation(run: &RunDir, eval: &Evaluation) -> Result<()> {
    run.write("report.json", &eval.report.to_json()?)?;
    run.write("report.txt", &format_report(&eval.report))?;
    if !eval.samples.is_empty() {
        write_nlg_csv(&run.path("nlg_samples.csv"), &eval.samples)?;
    }
    if !eval.generations.is_empty() {
        write_generations(&run.path("generations.jsonl"), &eval.generations)?;
    }
    Ok(())
}

/// Text tables of classification and generation metrics.
pub fn format_report(r: &MetricReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:<8} {:>6} {:>7} {:>17} {:>7} {:>17} {:>9} {:>7} {:>7} {:>8}",
        "model", "task", "n", "AUROC", "AUROC 95% CI", "AUPRC", "AUPRC 95% CI", "precision", "recall", "F1", "accuracy"
    );
    for (task, m) in &r.tasks {
        let _ = writeln!(
            s,
            "{:<12} {:<8} {:>6} {:>7.4} [{:>6.4}, {:>6.4}] {:>7.4} [{:>6.4}, {:>6.4}] {:>9.4} {:>7.4} {:>7.4} {:>8.4}",
            r.model, task, m.n, m.auroc, m.ci95[0], m.ci95[1], m.auprc, m.auprc_ci95[0], m.auprc_ci95[1], m.precision, m.recall, m.f1, m.accuracy
        );
    }
    if let Some(n) = &r.nlg {
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>8} {:>8} {:>8} {:>8} {:>11}",
            "model", "n", "ROUGE-1", "ROUGE-2", "ROUGE-L", "BLEU-4", "embed_match"
        );
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>11.4}",
            r.model, n.n, n.rouge1, n.rouge2, n.rouge_l, n.bleu4, n.embed_match
        );
    }
    s
}

/// Reads `report.json` from a run directory and renders it.
pub fn emit_report(run: &Path) -> Result<(String, MetricReport)> {
    let p = run.join("report.json");
    if !p.exists() {
        return Err(Error::MissingFiles(vec![p]));
    }
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let report = MetricReport::from_json(&text)?;
    Ok((format_report(&report), report))
}

// ---- ablation --------------------------------------------------------------

/// The four pretraining-objective variants.
pub const ABLATION_VARIANTS: [(&str, bool, bool); 4] = [
    ("Full (MFP + NTP)", true, true),
    ("- MFP only", false, true),
    ("- NTP only", true, false),
    ("- MFP & NTP", false, false),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    /// Test HF AUROC per seed.
    pub hf_auroc: Vec<f64>,
    pub mean: f64,
}

/// Pretrain, fine-tune and evaluate each variant under every seed. Each
/// seed fixes the cohort, split and initialisation shared by the four
/// variants.
pub fn ablate(base: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    let mut rows: Vec<AblationRow> = ABLATION_VARIANTS
        .iter()
        .map(|(name, _, _)| AblationRow {
            variant: name.to_string(),
            hf_auroc: Vec::new(),
            mean: 0.0,
        })
        .collect();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        let records = load_records(&cfg, None)?;
        let data = Prepared::build(&cfg, &records, None)?;
        for (row, &(name, mfp, ntp)) in rows.iter_mut().zip(&ABLATION_VARIANTS) {
            let mut c = cfg.clone();
            if !mfp {
                c.train.weights.lambda_mfp = 0.0;
            }
            if !ntp {
                c.train.weights.lambda_ntp = 0.0;
            }
            let mut store = initial_params(&c)?;
            run_pretrain(&c, &data, &mut store, None)?;
            run_finetune(&c, &data, &mut store, None)?;
            let probs = predict(&c, &store, &data.test)?;
            let (s, y): (Vec<f64>, Vec<u8>) = probs
                .iter()
                .zip(&data.test.labels)
                .filter_map(|(p, l)| l.get(Task::Hf).map(|y| (p[0], y)))
                .unzip();
            let a = crate::metrics::auroc(&s, &y)?;
            log::info!("ablation seed {seed} {name}: HF AUROC {a:.4}");
            row.hf_auroc.push(a);
        }
    }
    for r in &mut rows {
        r.mean = r.hf_auroc.iter().sum::<f64>() / r.hf_auroc.len() as f64;
    }
    Ok(rows)
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<18} {:>10} {:>8}  per-seed\n", "variant", "HF AUROC", "drop");
    let full = rows.first().map_or(0.0, |r| r.mean);
    for r in rows {
        let seeds: Vec<String> = r.hf_auroc.iter().map(|a| format!("{a:.4}")).collect();
        let _ = writeln!(s, "{:<18} {:>10.4} {:>8.4}  {}", r.variant, r.mean, full - r.mean, seeds.join(" "));
    }
    s
}
