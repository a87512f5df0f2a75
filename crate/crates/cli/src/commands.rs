use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::anyhow;
use ctxprobe_core::aggregate::{build_report, AggregateConfig};
use ctxprobe_core::backends::{ngram_train, HttpBackend, HttpConfig, TriggerModel};
use ctxprobe_core::corpus::{
    concatenate_words, ingest_document, load_conllu, tokenize_text, ConlluDocument, CorpusError, JoinRule, Tokenizer,
    WordTokenizer,
};
use ctxprobe_core::export::{
    bundle_path, export_curves_csv, export_viewer_bundle, write_bundle, BundleManifest, ExportConfig,
};
use ctxprobe_core::metrics::{compute_series, MetricSeries};
use ctxprobe_core::scheduler::{probe_to_dir, run_file_stem};
use ctxprobe_core::{
    probe_cost, LanguageModel, PredictionStore, ProbeConfig, ProbeError, RunManifest, TokenizedDocument, Vocab,
};
use rayon::prelude::*;

use crate::selector::BackendSelector;
use crate::{
    AggregateArgs, AggregateOpts, ExportArgs, ExportOpts, InputArgs, ProbeArgs, ProbeOpts, RunArgs, RunsArgs,
    EXIT_BACKEND, EXIT_DATA, EXIT_INTERNAL, EXIT_USAGE,
};

pub const VOCAB_FILE: &str = "vocab.json";
pub const REPORT_FILE: &str = "aggregate.json";

/// An error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub err: anyhow::Error,
}

pub type CmdResult<T> = Result<T, Failure>;

trait OrExit<T> {
    fn or_exit(self, code: u8) -> CmdResult<T>;
    fn or_exit_with(self, code: u8, context: impl FnOnce() -> String) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> OrExit<T> for Result<T, E> {
    fn or_exit(self, code: u8) -> CmdResult<T> {
        self.map_err(|e| Failure { code, err: e.into() })
    }

    fn or_exit_with(self, code: u8, context: impl FnOnce() -> String) -> CmdResult<T> {
        self.map_err(|e| Failure {
            code,
            err: e.into().context(context()),
        })
    }
}

fn fail<T>(code: u8, msg: impl Display) -> CmdResult<T> {
    Err(Failure {
        code,
        err: anyhow!("{msg}"),
    })
}

fn probe_exit_code(e: &ProbeError) -> u8 {
    match e {
        ProbeError::Backend { .. } => EXIT_BACKEND,
        ProbeError::InvalidPlan(_) | ProbeError::SegmentLimit { .. } => EXIT_USAGE,
        ProbeError::Input(_) => EXIT_DATA,
        ProbeError::Store { .. } | ProbeError::Pool(_) | ProbeError::Manifest(_) => EXIT_INTERNAL,
    }
}

fn corpus_exit_code(e: &CorpusError) -> u8 {
    match e {
        CorpusError::Io { .. } => EXIT_USAGE,
        _ => EXIT_DATA,
    }
}

enum Source {
    Conllu(ConlluDocument),
    Text { doc_id: String, text: String },
}

impl Source {
    fn doc_id(&self) -> &str {
        match self {
            Source::Conllu(d) => &d.doc_id,
            Source::Text { doc_id, .. } => doc_id,
        }
    }
}

fn text_files(paths: &[PathBuf]) -> CmdResult<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .or_exit_with(EXIT_USAGE, || format!("reading {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "txt"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn load_sources(input: &InputArgs) -> CmdResult<Vec<Source>> {
    let mut sources = Vec::new();
    if !input.conllu.is_empty() {
        let docs = load_conllu(&input.conllu).map_err(|e| Failure {
            code: corpus_exit_code(&e),
            err: e.into(),
        })?;
        sources.extend(docs.into_iter().map(Source::Conllu));
    }
    for f in text_files(&input.text)? {
        let text = fs::read_to_string(&f).or_exit_with(EXIT_USAGE, || format!("reading {}", f.display()))?;
        let doc_id = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "doc".into());
        sources.push(Source::Text { doc_id, text });
    }
    if sources.is_empty() {
        return fail(EXIT_DATA, "no documents found in the inputs");
    }
    let mut stems: HashMap<String, &str> = HashMap::new();
    for s in &sources {
        if let Some(prev) = stems.insert(run_file_stem(s.doc_id()), s.doc_id()) {
            return fail(
                EXIT_DATA,
                format!(
                    "documents {prev:?} and {:?} map to the same output file name",
                    s.doc_id()
                ),
            );
        }
    }
    Ok(sources)
}

fn join_rule(input: &InputArgs) -> JoinRule {
    JoinRule {
        no_space_before_punct: input.no_space_before_punct,
        ..JoinRule::default()
    }
}

fn tokenize_sources(
    sources: &[Source],
    tokenizer: &dyn Tokenizer,
    rule: JoinRule,
) -> CmdResult<Vec<TokenizedDocument>> {
    sources
        .iter()
        .map(|s| {
            let doc = match s {
                Source::Conllu(d) => ingest_document(d, tokenizer, rule),
                Source::Text { doc_id, text } => tokenize_text(doc_id, text.clone(), tokenizer),
            };
            doc.or_exit_with(EXIT_DATA, || format!("document {:?}", s.doc_id()))
        })
        .collect()
}

fn probe_config(opts: &ProbeOpts) -> CmdResult<ProbeConfig> {
    let config = ProbeConfig {
        c_max: opts.c_max,
        stride: opts.stride,
        batch_size: opts.batch_size,
        store_dtype: opts.dtype,
        top_k_export: opts.top_k,
        parallelism: opts.parallelism,
    };
    config.validate().or_exit(EXIT_USAGE)?;
    Ok(config)
}

/// Tokenize the inputs and build the backend. Local backends use a
/// vocabulary fitted on the inputs (and n-gram models are trained on them);
/// a remote backend tokenizes with its own vocabulary.
fn prepare(input: &InputArgs, opts: &ProbeOpts) -> CmdResult<(Vec<TokenizedDocument>, Box<dyn LanguageModel>)> {
    let sources = load_sources(input)?;
    let rule = join_rule(input);
    if let BackendSelector::Http { url } = &opts.backend {
        let config = HttpConfig {
            timeout: Duration::from_millis(opts.http_timeout_ms),
            ..HttpConfig::default()
        };
        let backend =
            HttpBackend::connect(url, config).or_exit_with(EXIT_BACKEND, || format!("connecting to {url}"))?;
        let docs = tokenize_sources(&sources, &backend, rule)?;
        return Ok((docs, Box::new(backend)));
    }
    let texts: Vec<String> = sources
        .iter()
        .map(|s| match s {
            Source::Conllu(d) => concatenate_words(&d.doc_id, &d.words, rule).0,
            Source::Text { text, .. } => text.clone(),
        })
        .collect();
    let tokenizer = WordTokenizer::fit(&texts, input.max_piece_chars);
    let docs = tokenize_sources(&sources, &tokenizer, rule)?;
    let vocab = tokenizer.vocab().clone();
    let backend: Box<dyn LanguageModel> = match &opts.backend {
        BackendSelector::NGram { order, alpha } => {
            let corpus: Vec<_> = docs.iter().map(|d| d.token_ids.clone()).collect();
            Box::new(ngram_train(&corpus, vocab, *order, *alpha).or_exit(EXIT_USAGE)?)
        }
        BackendSelector::Trigger {
            trigger,
            target,
            horizon,
            p_hi,
            p_lo,
        } => {
            let id = |t: &str| match vocab.id(t) {
                Some(id) => Ok(id),
                None => fail(EXIT_USAGE, format!("token {t:?} does not occur in the inputs")),
            };
            let (tr, ta) = (id(trigger)?, id(target)?);
            Box::new(TriggerModel::new(vocab, tr, ta, *horizon, *p_hi, *p_lo).or_exit(EXIT_USAGE)?)
        }
        BackendSelector::Http { .. } => unreachable!("handled above"),
    };
    Ok((docs, backend))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CmdResult<()> {
    let json = serde_json::to_vec_pretty(value).or_exit(EXIT_INTERNAL)?;
    fs::write(path, json).or_exit_with(EXIT_INTERNAL, || format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CmdResult<T> {
    let text = fs::read_to_string(path).or_exit_with(EXIT_DATA, || format!("reading {}", path.display()))?;
    serde_json::from_str(&text).or_exit_with(EXIT_DATA, || format!("parsing {}", path.display()))
}

fn doc_path(dir: &Path, doc_id: &str) -> PathBuf {
    dir.join(format!("{}.doc.json", run_file_stem(doc_id)))
}

fn create_dir(dir: &Path) -> CmdResult<()> {
    fs::create_dir_all(dir).or_exit_with(EXIT_USAGE, || format!("creating {}", dir.display()))
}

fn pool(threads: usize) -> CmdResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .or_exit(EXIT_INTERNAL)
}

fn do_probe(input: &InputArgs, opts: &ProbeOpts, out: &Path) -> CmdResult<()> {
    let config = probe_config(opts)?;
    let (docs, backend) = prepare(input, opts)?;
    if opts.dry_run {
        let v = backend.descriptor().vocab.size();
        let (mut segments, mut rows, mut batches) = (0, 0, 0);
        for d in &docs {
            let cost = probe_cost(d.len(), config.c_max, config.stride).map_err(|e| Failure {
                code: probe_exit_code(&e),
                err: e.into(),
            })?;
            println!(
                "{}: {} tokens, {} segments, {} rows, {} batches, {} payload bytes",
                d.doc_id,
                d.len(),
                cost.segments,
                cost.rows,
                cost.batches(config.batch_size),
                cost.payload_bytes(v, config.store_dtype.size_bytes())
            );
            segments += cost.segments;
            rows += cost.rows;
            batches += cost.batches(config.batch_size);
        }
        println!(
            "total: {} documents, {segments} segments, {rows} rows, {batches} backend calls",
            docs.len()
        );
        return Ok(());
    }
    create_dir(out)?;
    write_json(&out.join(VOCAB_FILE), &backend.descriptor().vocab)?;
    let backend = backend.as_ref();
    let manifests = pool(opts.jobs)?.install(|| {
        docs.par_iter()
            .map(|d| {
                let m = probe_to_dir(backend, d, &config, out).map_err(|e| Failure {
                    code: probe_exit_code(&e),
                    err: e.into(),
                })?;
                write_json(&doc_path(out, &d.doc_id), d)?;
                Ok(m)
            })
            .collect::<CmdResult<Vec<RunManifest>>>()
    })?;
    for m in &manifests {
        println!(
            "{}: {} tokens, {} rows in {:.2}s -> {}",
            m.doc_id, m.doc_len, m.row_count, m.wall_time_secs, m.store_file
        );
    }
    Ok(())
}

pub fn probe(args: &ProbeArgs) -> CmdResult<()> {
    do_probe(&args.input, &args.opts, &args.out)
}

struct Run {
    manifest: RunManifest,
    doc: TokenizedDocument,
    store: PredictionStore,
}

fn load_runs(dir: &Path) -> CmdResult<(Vocab, Vec<Run>)> {
    let vocab: Vocab = read_json(&dir.join(VOCAB_FILE))?;
    let mut manifests: Vec<PathBuf> = fs::read_dir(dir)
        .or_exit_with(EXIT_USAGE, || format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .is_some_and(|f| f.to_string_lossy().ends_with(".manifest.json"))
        })
        .collect();
    manifests.sort();
    if manifests.is_empty() {
        return fail(EXIT_DATA, format!("no run manifests in {}", dir.display()));
    }
    let runs = manifests
        .par_iter()
        .map(|p| {
            let manifest: RunManifest = read_json(p)?;
            let doc: TokenizedDocument = read_json(&doc_path(dir, &manifest.doc_id))?;
            let store_file = dir.join(&manifest.store_file);
            let store = PredictionStore::load(&store_file)
                .or_exit_with(EXIT_DATA, || format!("loading {}", store_file.display()))?;
            if store.doc_len() != doc.len() || store.vocab_size() != vocab.size() {
                return fail(
                    EXIT_DATA,
                    format!(
                        "store for {:?} does not match its document or vocabulary",
                        manifest.doc_id
                    ),
                );
            }
            Ok(Run { manifest, doc, store })
        })
        .collect::<CmdResult<Vec<_>>>()?;
    Ok((vocab, runs))
}

fn series_for(runs: &[Run]) -> CmdResult<Vec<MetricSeries>> {
    runs.par_iter()
        .map(|r| compute_series(&r.store, &r.doc).or_exit_with(EXIT_DATA, || format!("document {:?}", r.doc.doc_id)))
        .collect()
}

fn write_metrics(runs: &[Run], series: &[MetricSeries], out: &Path) -> CmdResult<()> {
    runs.par_iter().zip(series).try_for_each(|(r, s)| {
        let stem = run_file_stem(&r.doc.doc_id);
        let mut curves = String::from("n,c,nll,kl\n");
        let mut deltas = String::from("n,m,delta_kl,delta_nll\n");
        for t in &s.targets {
            for ((c, l), d) in t.contexts.iter().zip(&t.nll).zip(&t.kl) {
                curves += &format!("{},{c},{l},{d}\n", t.n);
            }
            for (m, dk) in &t.delta_kl {
                deltas += &format!("{},{m},{dk},{}\n", t.n, t.delta_nll[m]);
            }
        }
        for (name, body) in [
            (format!("{stem}.curves.csv"), curves),
            (format!("{stem}.deltas.csv"), deltas),
        ] {
            let path = out.join(name);
            fs::File::create(&path)
                .and_then(|mut f| f.write_all(body.as_bytes()))
                .or_exit_with(EXIT_INTERNAL, || format!("writing {}", path.display()))?;
        }
        Ok(())
    })
}

fn write_aggregate(runs: &[Run], series: &[MetricSeries], opts: &AggregateOpts, out: &Path) -> CmdResult<()> {
    let docs: Vec<TokenizedDocument> = runs.iter().map(|r| r.doc.clone()).collect();
    let config = AggregateConfig {
        min_pos_count: opts.min_pos_count,
        min_position: opts.min_position,
        delta_kind: opts.score,
    };
    let report = build_report(series, &docs, config).or_exit(EXIT_DATA)?;
    write_json(&out.join(REPORT_FILE), &report)?;
    export_curves_csv(&report, out).or_exit(EXIT_INTERNAL)?;
    println!(
        "aggregated {} documents into {} (c_max {}, stride {})",
        report.documents,
        out.join(REPORT_FILE).display(),
        report.c_max,
        report.stride
    );
    Ok(())
}

fn write_bundles(runs: &[Run], series: &[MetricSeries], vocab: &Vocab, opts: &ExportOpts, out: &Path) -> CmdResult<()> {
    runs.par_iter().zip(series).try_for_each(|(r, s)| {
        let config = ExportConfig {
            top_k: opts.export_top_k.unwrap_or(r.manifest.config.top_k_export),
            full_resolution: opts.full_resolution,
        };
        let manifest = BundleManifest {
            backend: r.manifest.backend.clone(),
            config: r.manifest.config.clone(),
        };
        let bundle = export_viewer_bundle(&r.doc, s, &r.store, vocab, manifest, config)
            .or_exit_with(EXIT_DATA, || format!("document {:?}", r.doc.doc_id))?;
        write_bundle(&bundle, &bundle_path(out, &r.doc.doc_id)).or_exit(EXIT_INTERNAL)
    })?;
    println!("wrote {} bundles to {}", runs.len(), out.display());
    Ok(())
}

fn out_dir(args: &RunsArgs) -> CmdResult<PathBuf> {
    let out = args.out.clone().unwrap_or_else(|| args.runs.clone());
    create_dir(&out)?;
    Ok(out)
}

pub fn metrics(args: &RunsArgs) -> CmdResult<()> {
    let out = out_dir(args)?;
    let (_, runs) = load_runs(&args.runs)?;
    let series = series_for(&runs)?;
    write_metrics(&runs, &series, &out)?;
    println!("wrote metrics for {} documents to {}", runs.len(), out.display());
    Ok(())
}

pub fn aggregate(args: &AggregateArgs) -> CmdResult<()> {
    let out = out_dir(&args.runs)?;
    let (_, runs) = load_runs(&args.runs.runs)?;
    let series = series_for(&runs)?;
    write_aggregate(&runs, &series, &args.opts, &out)
}

pub fn export(args: &ExportArgs) -> CmdResult<()> {
    let out = out_dir(&args.runs)?;
    let (vocab, runs) = load_runs(&args.runs.runs)?;
    let series = series_for(&runs)?;
    write_bundles(&runs, &series, &vocab, &args.opts, &out)
}

pub fn run(args: &RunArgs) -> CmdResult<()> {
    do_probe(&args.input, &args.probe, &args.out)?;
    if args.probe.dry_run {
        return Ok(());
    }
    let (vocab, runs) = load_runs(&args.out)?;
    let series = series_for(&runs)?;
    write_metrics(&runs, &series, &args.out)?;
    write_aggregate(&runs, &series, &args.aggregate, &args.out)?;
    write_bundles(&runs, &series, &vocab, &args.export, &args.out)
}
