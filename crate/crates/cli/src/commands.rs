//! Stage commands. Every stage reads and writes files so that its output can
//! be reviewed or edited before the next stage runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use procnet_core::baseline::direct_generate;
use procnet_core::cluster::{process_items, ClusterEngine, ClusterOptions, ClusteringDocument};
use procnet_core::detect::{
    annotation_records_to_jsonl, majority_across_runs, parse_annotation_records, parse_example_pool, AnnotationRecord,
    Detector,
};
use procnet_core::evalkit::{
    annotator_agreement_table, detection_report, mean_ratings, parse_preferences, parse_ratings, preference_summary,
    rating_agreement, score_table, CategoryAggregation, MetricWeights,
};
use procnet_core::links::{opinions_to_jsonl, Edge, LinkEngine, LinkOptions, ThemeRef};
use procnet_core::llm_gateway::{Backend, DiskCache, Gateway, MockBackend, RuleTable, DEFAULT_RETRIES};
use procnet_core::network::{
    assemble, completeness, export_canonical, export_dot, import_canonical, DotOptions, PersonalNetwork, Provenance,
};
use procnet_core::transcript::{corpus_stats, load_session, working_phase, Session};
use serde::{Deserialize, Serialize};

use crate::config::{ClusterStrategy, PipelineConfig};
use crate::error::CliError;
use crate::manifest::{file_digest, RunManifest, MANIFEST_FILE};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const DETECTION_RUNS_FILE: &str = "detection_runs.jsonl";
pub const CLUSTERING_FILE: &str = "clustering.json";
pub const EDGES_FILE: &str = "edges.json";
pub const OPINIONS_FILE: &str = "opinions.jsonl";
pub const NETWORK_FILE: &str = "network.json";
pub const NETWORK_DOT_FILE: &str = "network.dot";
pub const BASELINE_FILE: &str = "baseline.json";
pub const BASELINE_DOT_FILE: &str = "baseline.dot";

pub const EDGES_DOC_VERSION: u32 = 1;

/// Voted edges plus what is needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgesDocument {
    pub version: u32,
    pub session_id: String,
    pub strategy: String,
    pub seed: u64,
    /// Variant id to model id.
    pub variants: BTreeMap<String, String>,
    pub edges: Vec<Edge>,
}

impl EdgesDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("edges serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let doc: Self = serde_json::from_str(text).map_err(|e| CliError::parse(format!("edges: {e}")))?;
        if doc.version != EDGES_DOC_VERSION {
            return Err(CliError::parse(format!("edges: unsupported version {}", doc.version)));
        }
        Ok(doc)
    }
}

/// Files a command wrote, in write order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct StageOutput {
    pub files: Vec<PathBuf>,
}

/// Shared state for all commands: validated config and the backends.
pub struct Pipeline {
    pub config: PipelineConfig,
    mock: Arc<dyn Backend>,
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| {
        CliError::validation(
            format!("cannot read {}: {e}", path.display()),
            Some(path.display().to_string()),
        )
    })
}

fn write(path: &Path, text: &str) -> Result<PathBuf, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| CliError::validation(format!("cannot create {}: {e}", dir.display()), None))?;
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::validation(format!("cannot write {}: {e}", path.display()), None))?;
    Ok(path.to_path_buf())
}

fn load_annotations(path: &Path) -> Result<Vec<AnnotationRecord>, CliError> {
    parse_annotation_records(&read(path)?).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

fn load_clustering(path: &Path) -> Result<ClusteringDocument, CliError> {
    ClusteringDocument::from_json(&read(path)?).map_err(|e| CliError::parse(format!("{}: {e}", path.display())))
}

fn dot_options(cfg: &PipelineConfig) -> DotOptions {
    DotOptions {
        min_strength: cfg.network.min_strength,
        max_nodes: cfg.network.max_nodes,
    }
}

impl Pipeline {
    pub fn new(config: PipelineConfig) -> Result<Self, CliError> {
        config.validate()?;
        let table = match &config.mock.rules {
            Some(p) => {
                RuleTable::load(p).map_err(|e| CliError::parse(format!("mock.rules: {e}")).with_key("mock.rules"))?
            }
            None => RuleTable::default(),
        };
        let mock =
            MockBackend::new(table).map_err(|e| CliError::parse(format!("mock.rules: {e}")).with_key("mock.rules"))?;
        Ok(Self {
            config,
            mock: Arc::new(mock),
        })
    }

    /// A fresh gateway so that call counters cover one command.
    pub fn gateway(&self) -> Result<Gateway, CliError> {
        let mut gw = Gateway::new(self.mock.clone());
        if let Some(dir) = &self.config.paths.cache {
            let cache = DiskCache::new(dir)
                .map_err(|e| CliError::validation(format!("paths.cache: {e}"), Some("paths.cache".into())))?;
            gw = gw.with_cache(cache);
        }
        Ok(gw)
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.paths.output
    }

    fn working_text(&self, session: &Session) -> String {
        let wp = working_phase(
            session,
            self.config.segmentation.lead_min,
            self.config.segmentation.tail_min,
        );
        Session::render_text(&wp.utterances)
    }

    pub fn detect(&self, gw: &Gateway, session_path: &Path, out: &Path) -> Result<StageOutput, CliError> {
        let session = load_session(session_path)?;
        let pool = match &self.config.detection.pool {
            Some(p) if self.config.detection.k > 0 => parse_example_pool(&read(p)?)
                .map_err(|e| CliError::parse(format!("detection.pool: {e}")).with_key("detection.pool"))?,
            _ => Vec::new(),
        };
        let backend = self.config.spec(&self.config.detection.backend);
        let detector = Detector::new(gw, backend, pool, self.config.detection_config())?;
        let result = detector.detect_session(&session)?;
        for f in &result.failures {
            tracing::warn!(run = f.run_id, utterance = f.utterance_index, message = %f.message, "detection failure");
        }
        if result.short_session {
            tracing::warn!(session = %session.session_id, "session shorter than the segmentation window; using all of it");
        }
        let mut files = Vec::new();
        let final_records = if result.runs.len() > 1 {
            files.push(write(
                &out.join(DETECTION_RUNS_FILE),
                &annotation_records_to_jsonl(&result.records()),
            )?);
            majority_across_runs(&result.runs)
        } else {
            result.runs.into_iter().next().unwrap_or_default()
        };
        files.insert(
            0,
            write(
                &out.join(ANNOTATIONS_FILE),
                &annotation_records_to_jsonl(&final_records),
            )?,
        );
        Ok(StageOutput { files })
    }

    pub fn cluster(
        &self,
        gw: &Gateway,
        annotations_path: &Path,
        session_path: &Path,
        out: &Path,
    ) -> Result<StageOutput, CliError> {
        let session = load_session(session_path)?;
        let annotations = load_annotations(annotations_path)?;
        let processes = process_items(&session, &annotations);
        let transcript = self.working_text(&session);
        let cc = &self.config.clustering;
        let engine = ClusterEngine::new(
            gw,
            self.config.spec(&cc.backend),
            ClusterOptions {
                repair: cc.repair,
                ..ClusterOptions::default()
            },
        );
        let clustering = match cc.strategy {
            ClusterStrategy::TwoStep => engine.two_step(&transcript, &processes)?,
            ClusterStrategy::Single => engine.single_step_cluster(&transcript, &processes)?,
        };
        let doc = ClusteringDocument::new(
            &session.session_id,
            cc.strategy.as_str(),
            cc.repair,
            &processes,
            &clustering,
        );
        Ok(StageOutput {
            files: vec![write(&out.join(CLUSTERING_FILE), &doc.to_json())?],
        })
    }

    pub fn link(&self, gw: &Gateway, clustering_path: &Path, out: &Path) -> Result<StageOutput, CliError> {
        let doc = load_clustering(clustering_path)?;
        let themes: Vec<ThemeRef> = doc
            .themes
            .iter()
            .filter(|(_, t)| !t.members.is_empty())
            .map(|(id, t)| ThemeRef::new(id, &t.label))
            .collect();
        let strategy = self.config.ensemble()?;
        let lc = &self.config.links;
        let engine = LinkEngine::new(
            gw,
            LinkOptions {
                seed: lc.seed,
                parallelism: lc.parallelism,
                ..LinkOptions::default()
            },
        );
        let run = engine.run_ensemble(&strategy, &themes)?;
        let edges = EdgesDocument {
            version: EDGES_DOC_VERSION,
            session_id: doc.session_id.clone(),
            strategy: strategy.kind.as_str().to_string(),
            seed: lc.seed,
            variants: strategy
                .members
                .iter()
                .map(|m| (m.variant_id.clone(), m.backend.model_id.clone()))
                .collect(),
            edges: run.edges,
        };
        Ok(StageOutput {
            files: vec![
                write(&out.join(EDGES_FILE), &edges.to_json())?,
                write(&out.join(OPINIONS_FILE), &opinions_to_jsonl(&run.opinions))?,
            ],
        })
    }

    pub fn network(&self, clustering_path: &Path, edges_path: &Path, out: &Path) -> Result<StageOutput, CliError> {
        let doc = load_clustering(clustering_path)?;
        let edges = EdgesDocument::from_json(&read(edges_path)?)?;
        if edges.session_id != doc.session_id {
            return Err(CliError::validation(
                format!(
                    "edges are for session '{}', clustering for '{}'",
                    edges.session_id, doc.session_id
                ),
                None,
            ));
        }
        let mut prov = Provenance::new(edges.strategy.clone());
        prov.seeds.insert("detection".into(), self.config.detection.seed);
        prov.seeds.insert("links".into(), edges.seed);
        prov.backends = edges.variants.clone();
        prov.backends.insert(
            format!("clustering:{}", doc.strategy),
            self.config.spec(&self.config.clustering.backend).model_id,
        );
        let net = assemble(&doc.session_id, &doc.clustering(), &doc.processes, &edges.edges, prov)?;
        tracing::info!(completeness = completeness(&net, &doc.processes), "network assembled");
        self.write_network(&net, out, NETWORK_FILE, NETWORK_DOT_FILE)
    }

    fn write_network(&self, net: &PersonalNetwork, out: &Path, json: &str, dot: &str) -> Result<StageOutput, CliError> {
        Ok(StageOutput {
            files: vec![
                write(&out.join(json), &export_canonical(net))?,
                write(&out.join(dot), &export_dot(net, &dot_options(&self.config)))?,
            ],
        })
    }

    pub fn baseline(
        &self,
        gw: &Gateway,
        session_path: &Path,
        annotations_path: &Path,
        out: &Path,
    ) -> Result<StageOutput, CliError> {
        let Some(bc) = &self.config.baseline else {
            return Err(CliError::validation(
                "baseline: section missing",
                Some("baseline.backend".into()),
            ));
        };
        let session = load_session(session_path)?;
        let annotations = load_annotations(annotations_path)?;
        let processes = process_items(&session, &annotations);
        let transcript = self.working_text(&session);
        let result = direct_generate(
            gw,
            &session.session_id,
            &transcript,
            &processes,
            &self.config.spec(&bc.backend),
            DEFAULT_RETRIES,
        )?;
        for d in &result.dropped {
            tracing::warn!(item = %d, "baseline output item dropped");
        }
        self.write_network(&result.network, out, BASELINE_FILE, BASELINE_DOT_FILE)
    }

    /// Detect, cluster, link and assemble one session, plus the baseline
    /// when configured, then write the manifest.
    pub fn run_all(&self, session_path: &Path, out: &Path) -> Result<RunManifest, CliError> {
        let gw = self.gateway()?;
        let snapshot = serde_json::to_value(&self.config).expect("config serializes");
        let mut manifest = RunManifest::new(snapshot);
        manifest.inputs.insert("session".into(), file_digest(session_path)?);
        if let (Some(p), true) = (&self.config.detection.pool, self.config.detection.k > 0) {
            manifest.inputs.insert("example_pool".into(), file_digest(p)?);
        }
        if let Some(p) = &self.config.mock.rules {
            manifest.inputs.insert("mock_rules".into(), file_digest(p)?);
        }

        let mut files = Vec::new();
        let mut timed = |name: &str, f: &mut dyn FnMut() -> Result<StageOutput, CliError>| -> Result<(), CliError> {
            let t = Instant::now();
            let o = f()?;
            manifest
                .timings_ms
                .insert(name.to_string(), t.elapsed().as_secs_f64() * 1e3);
            files.extend(o.files);
            Ok(())
        };
        let ann = out.join(ANNOTATIONS_FILE);
        let clu = out.join(CLUSTERING_FILE);
        timed("detect", &mut || self.detect(&gw, session_path, out))?;
        timed("cluster", &mut || self.cluster(&gw, &ann, session_path, out))?;
        timed("link", &mut || self.link(&gw, &clu, out))?;
        timed("network", &mut || self.network(&clu, &out.join(EDGES_FILE), out))?;
        if self.config.baseline.is_some() {
            timed("baseline", &mut || self.baseline(&gw, session_path, &ann, out))?;
        }

        for f in &files {
            let name = f.strip_prefix(out).unwrap_or(f).to_string_lossy().replace('\\', "/");
            manifest.outputs.insert(name, file_digest(f)?);
        }
        manifest.backend_calls = gw.backend_calls();
        manifest.cache_hits = gw.cache_hits();
        write(&out.join(MANIFEST_FILE), &manifest.to_json())?;
        Ok(manifest)
    }

    /// Runs several sessions, at most `run.max_concurrent_sessions` at a
    /// time, each into `out/<file stem>/`.
    pub fn run_many(&self, sessions: &[PathBuf], out: &Path) -> Vec<(PathBuf, Result<RunManifest, CliError>)> {
        let bound = self.config.run.max_concurrent_sessions.max(1);
        let mut results = Vec::with_capacity(sessions.len());
        for batch in sessions.chunks(bound) {
            let batch_results: Vec<_> = std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .iter()
                    .map(|p| {
                        let dir = out.join(p.file_stem().unwrap_or_default());
                        s.spawn(move || (p.clone(), self.run_all(p, &dir)))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("session worker panicked"))
                    .collect()
            });
            results.extend(batch_results);
        }
        results
    }
}

/// Inputs to the evaluation report. Any subset may be given.
#[derive(Debug, Clone, Default)]
pub struct EvalInputs {
    pub predictions: Option<PathBuf>,
    /// One file per rater; two raters also yield an agreement table.
    pub gold: Vec<PathBuf>,
    pub ratings: Option<PathBuf>,
    pub preferences: Option<PathBuf>,
    pub network: Option<PathBuf>,
    pub clustering: Option<PathBuf>,
    pub aggregation: CategoryAggregation,
    pub delimiter: u8,
}

/// Tab-separated report sections, each headed by `# name`.
pub fn eval_report(inputs: &EvalInputs) -> Result<String, CliError> {
    let mut out = String::new();
    let mut section = |name: &str, body: &str| {
        out.push_str("# ");
        out.push_str(name);
        out.push('\n');
        out.push_str(body);
        out.push('\n');
    };
    let gold: Vec<Vec<AnnotationRecord>> = inputs
        .gold
        .iter()
        .map(|p| load_annotations(p))
        .collect::<Result<_, _>>()?;
    if gold.len() == 2 {
        section("annotator_agreement", &annotator_agreement_table(&gold[0], &gold[1])?);
    }
    if let Some(p) = &inputs.predictions {
        if gold.is_empty() {
            return Err(CliError::validation(
                "predictions need at least one gold file",
                Some("gold".into()),
            ));
        }
        let all_gold: Vec<AnnotationRecord> = gold.iter().flatten().cloned().collect();
        let report = detection_report(&load_annotations(p)?, &all_gold)?;
        let mut body = String::from("run\ttask\tprecision\trecall\tf1\n");
        let mut row = |run: &str, task: &str, v: [f64; 3]| {
            body.push_str(&format!("{run}\t{task}\t{:.4}\t{:.4}\t{:.4}\n", v[0], v[1], v[2]));
        };
        for r in &report.runs {
            let id = r.run_id.to_string();
            row(
                &id,
                "detection",
                [r.detection.precision, r.detection.recall, r.detection.f1],
            );
            let d = r.dimensions_gold_positive;
            row(&id, "dimensions_gold_positive", [d.precision, d.recall, d.f1]);
            let d = r.dimensions_all;
            row(&id, "dimensions_all", [d.precision, d.recall, d.f1]);
        }
        row("mean", "detection", report.mean_detection);
        row("mean", "dimensions_gold_positive", report.mean_dimensions_gold_positive);
        row("mean", "dimensions_all", report.mean_dimensions_all);
        section("detection", &body);
    }
    if let Some(p) = &inputs.ratings {
        let records = parse_ratings(&read(p)?, inputs.delimiter)?;
        let weights = MetricWeights::default();
        section(
            "expert_ratings",
            &score_table(&mean_ratings(&records), &weights, inputs.aggregation),
        );
        let raters: Vec<&str> = {
            let mut v: Vec<&str> = records.iter().map(|r| r.rater_id.as_str()).collect();
            v.sort();
            v.dedup();
            v
        };
        let mut body = String::from("rater_a\trater_b\tmetric\tobserved_agreement\tkappa\n");
        for (i, a) in raters.iter().enumerate() {
            for b in &raters[i + 1..] {
                for (m, (o, k)) in rating_agreement(&records, a, b) {
                    body.push_str(&format!("{a}\t{b}\t{}\t{o:.4}\t{k:.4}\n", m.as_str()));
                }
            }
        }
        section("rating_agreement", &body);
    }
    if let Some(p) = &inputs.preferences {
        let records = parse_preferences(&read(p)?, inputs.delimiter)?;
        let mut body = String::from("question\tchoice\tpercent\tresponses\n");
        for (q, t) in preference_summary(&records) {
            for (c, pct) in &t.percent {
                body.push_str(&format!("{}\t{c}\t{pct:.1}\t{}\n", q.as_str(), t.responses));
            }
            body.push_str(&format!(
                "{}\tresidual\t{:.1}\t{}\n",
                q.as_str(),
                t.residual,
                t.responses
            ));
        }
        section("preferences", &body);
    }
    match (&inputs.network, &inputs.clustering) {
        (Some(n), Some(c)) => {
            let net = import_canonical(&read(n)?)?;
            let doc = load_clustering(c)?;
            let f = completeness(&net, &doc.processes);
            let score = procnet_core::evalkit::completeness_score(f)?;
            section("completeness", &format!("fraction\tscore\n{f:.4}\t{score:.4}\n"));
        }
        (None, None) => {}
        _ => {
            return Err(CliError::validation(
                "completeness needs both a network and its clustering",
                Some("network".into()),
            ))
        }
    }
    if out.is_empty() {
        return Err(CliError::validation("eval: no inputs given", None));
    }
    Ok(out)
}

/// Corpus statistics over every `*.jsonl` session in `dir`, in name order.
pub fn corpus_stats_report(dir: &Path) -> Result<String, CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| {
            CliError::validation(
                format!("cannot read {}: {e}", dir.display()),
                Some(dir.display().to_string()),
            )
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::validation(format!("no sessions in {}", dir.display()), None));
    }
    let sessions: Vec<Session> = paths.iter().map(load_session).collect::<Result<_, _>>()?;
    Ok(corpus_stats(&sessions).to_tsv())
}
