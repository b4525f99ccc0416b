//! End-to-end test-set construction: OOV filter, n-gram dictionary,
//! degree scoring, top-k pool, ensemble uncertainty, band sampling.
//!
//! Artifacts are written as `<name>.partial` and renamed only once every
//! stage has succeeded, so a failed run leaves nothing that looks final.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::compdegree::{self, write_score_dump, NON_OVERLAP_POLICY};
use crate::corpus::{build_vocab_counts, filter_oov, load_parallel_corpus, write_jsonl, CorpusFormat, Side};
use crate::ngram_index::build_ngram_dictionary;
use crate::rdangle::POSITION_ENCODING;
use crate::uncertainty::{
    self, band_select_indices, rank_by_uncertainty, read_ensemble_dump, BandError, BandParams, UncertaintyScore,
    RMI_FORMULA, SEQUENCE_AGGREGATION,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARTIAL_SUFFIX: &str = ".partial";

pub const ARTIFACT_OOV: &str = "oov_filtered.jsonl";
pub const ARTIFACT_DICT: &str = "dictionary.ngix";
pub const ARTIFACT_SCORES: &str = "degree_scores.tsv";
pub const ARTIFACT_POOL: &str = "candidate_pool.jsonl";
pub const ARTIFACT_UNCERTAINTY: &str = "uncertainty_scores.jsonl";
pub const ARTIFACT_TESTSET: &str = "testset.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
}

#[derive(Debug, thiserror::Error)]
#[error("stage {stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    pub fn config(stage: &'static str, message: impl ToString) -> Self {
        PipelineError {
            stage,
            kind: ErrorKind::Config,
            message: message.to_string(),
        }
    }

    pub fn data(stage: &'static str, message: impl ToString) -> Self {
        PipelineError {
            stage,
            kind: ErrorKind::Data,
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelinePaths {
    /// Training corpus the dictionary and vocabulary counts come from.
    pub train: PathBuf,
    /// Candidate pool the test set is drawn from.
    pub candidates: PathBuf,
    /// Ensemble token-distribution dump covering the candidate pool.
    pub ensemble_dump: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tagged_train: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tagged_test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub oov_min: u64,
    pub dict_min: u64,
    pub max_n: usize,
    pub pool_k: usize,
    pub discard_top: usize,
    pub window: usize,
    pub sample: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            oov_min: 3,
            dict_min: crate::ngram_index::DEFAULT_MIN_COUNT,
            max_n: crate::ngram_index::DEFAULT_MAX_N,
            pool_k: compdegree::DEFAULT_POOL_K,
            discard_top: uncertainty::DEFAULT_DISCARD_TOP,
            window: uncertainty::DEFAULT_WINDOW,
            sample: uncertainty::DEFAULT_SAMPLE,
        }
    }
}

impl Thresholds {
    pub fn band(&self) -> BandParams {
        BandParams {
            discard_top: self.discard_top,
            window: self.window,
            sample: self.sample,
        }
    }
}

fn default_seed() -> u64 {
    13
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("compforge-out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PipelinePaths,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub side: Side,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl PipelineConfig {
    pub fn new(paths: PipelinePaths, out_dir: impl Into<PathBuf>) -> Self {
        PipelineConfig {
            paths,
            thresholds: Thresholds::default(),
            side: Side::default(),
            seed: default_seed(),
            out_dir: out_dir.into(),
        }
    }

    /// Parse TOML; relative paths are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::config("config", format!("{}: {e}", path.display())))?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).map_err(|e| PipelineError::config("config", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.train);
        resolve(&mut cfg.paths.candidates);
        resolve(&mut cfg.paths.ensemble_dump);
        if let Some(p) = cfg.paths.tagged_train.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.paths.tagged_test.as_mut() {
            resolve(p);
        }
        resolve(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let t = &self.thresholds;
        if t.sample > t.window {
            return Err(PipelineError::config(
                "config",
                format!("sample {} exceeds window {}", t.sample, t.window),
            ));
        }
        if t.max_n == 0 {
            return Err(PipelineError::config("config", "max_n must be at least 1"));
        }
        let p = &self.paths;
        let required = [Some(&p.train), Some(&p.candidates), Some(&p.ensemble_dump)];
        let optional = [p.tagged_train.as_ref(), p.tagged_test.as_ref()];
        for path in required.into_iter().chain(optional).flatten() {
            if !path.is_file() {
                return Err(PipelineError::config("config", format!("missing input {}", path.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub name: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub file: String,
    pub records: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub side: Side,
    pub thresholds: Thresholds,
    pub inputs: Vec<FileDigest>,
    pub artifacts: Vec<ArtifactRecord>,
    /// Training corpus size, then candidate counts through each
    /// filtering/selection stage (non-increasing).
    pub train_examples: usize,
    pub dictionary_entries: usize,
    pub stage_counts: Vec<StageCount>,
    pub warnings: Vec<String>,
    pub metadata: std::collections::BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> std::io::Result<String> {
    let mut h = Sha256::new();
    std::io::copy(&mut BufReader::new(File::open(path)?), &mut h)?;
    Ok(hex::encode(h.finalize()))
}

struct Writer<'a> {
    out_dir: &'a Path,
    written: Vec<(ArtifactRecord, PathBuf)>,
}

impl Writer<'_> {
    fn write(
        &mut self,
        stage: &'static str,
        name: &str,
        file: &str,
        records: usize,
        body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> Result<(), PipelineError> {
        let io = |e: std::io::Error| PipelineError::data(stage, format!("writing {file}: {e}"));
        let partial = self.out_dir.join(format!("{file}{PARTIAL_SUFFIX}"));
        let mut w = BufWriter::new(File::create(&partial).map_err(io)?);
        body(&mut w).map_err(io)?;
        w.into_inner().map_err(|e| io(e.into_error()))?.sync_all().map_err(io)?;
        let sha256 = sha256_file(&partial).map_err(io)?;
        self.written.push((
            ArtifactRecord {
                name: name.to_string(),
                file: file.to_string(),
                records,
                sha256,
            },
            partial,
        ));
        Ok(())
    }

    fn finish(self) -> Result<Vec<ArtifactRecord>, PipelineError> {
        let mut out = Vec::new();
        for (record, partial) in self.written {
            let final_path = self.out_dir.join(&record.file);
            fs::rename(&partial, &final_path)
                .map_err(|e| PipelineError::data("finalize", format!("{}: {e}", final_path.display())))?;
            out.push(record);
        }
        Ok(out)
    }
}

/// Runs every stage and returns the manifest, also written to
/// `out_dir/manifest.json`.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    cfg.validate()?;
    let t = &cfg.thresholds;
    let side = cfg.side;
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| PipelineError::config("config", format!("{}: {e}", cfg.out_dir.display())))?;

    let mut inputs = Vec::new();
    for (name, path) in [
        ("train", &cfg.paths.train),
        ("candidates", &cfg.paths.candidates),
        ("ensemble_dump", &cfg.paths.ensemble_dump),
    ] {
        let sha256 = sha256_file(path).map_err(|e| PipelineError::data("load", format!("{}: {e}", path.display())))?;
        inputs.push(FileDigest {
            name: name.to_string(),
            path: path.display().to_string(),
            sha256,
        });
    }

    let load = |path: &Path| {
        load_parallel_corpus(path, CorpusFormat::from_path(path))
            .map_err(|e| PipelineError::data("load", format!("{}: {e}", path.display())))
    };
    let train = load(&cfg.paths.train)?;
    let candidates = load(&cfg.paths.candidates)?;
    log::info!("loaded {} training and {} candidate examples", train.len(), candidates.len());

    let mut writer = Writer {
        out_dir: &cfg.out_dir,
        written: Vec::new(),
    };
    let mut warnings = Vec::new();
    let mut stage_counts = vec![StageCount {
        stage: "candidates".into(),
        count: candidates.len(),
    }];

    // filter_oov
    let counts = build_vocab_counts(&train, side);
    let filtered = filter_oov(&candidates, &counts, t.oov_min);
    stage_counts.push(StageCount {
        stage: "filter_oov".into(),
        count: filtered.len(),
    });
    writer.write("filter_oov", "oov_filtered", ARTIFACT_OOV, filtered.len(), |w| {
        write_jsonl(w, &filtered)
    })?;

    // build_dict
    let train_side: Vec<&[String]> = train.iter().map(|ex| ex.tokens(side)).collect();
    let dict = build_ngram_dictionary(&train_side, t.dict_min, Some(t.max_n));
    log::info!("dictionary holds {} entries", dict.len());
    writer.write("build_dict", "dictionary", ARTIFACT_DICT, dict.len(), |w| dict.write_to(w))?;

    // comp_degree
    let degrees = compdegree::score_examples(&filtered, &dict, side).map_err(|(i, e)| {
        PipelineError::data("comp_degree", format!("example {:?}: {e}", filtered[i].id))
    })?;
    stage_counts.push(StageCount {
        stage: "comp_degree".into(),
        count: degrees.len(),
    });
    writer.write("comp_degree", "degree_scores", ARTIFACT_SCORES, degrees.len(), |w| {
        write_score_dump(w, &filtered, &degrees)
    })?;

    // select_pool
    let pool = compdegree::select_candidate_pool(filtered.into_iter().zip(degrees).collect(), t.pool_k, side);
    if pool.underfilled {
        warnings.push(format!(
            "select_pool: pool_k {} exceeds the {} distinct candidates; all of them pass through",
            t.pool_k,
            pool.examples.len()
        ));
    }
    if pool.duplicates_removed > 0 {
        warnings.push(format!("select_pool: removed {} duplicate candidates", pool.duplicates_removed));
    }
    stage_counts.push(StageCount {
        stage: "select_pool".into(),
        count: pool.examples.len(),
    });
    let pool_examples: Vec<_> = pool
        .examples
        .iter()
        .zip(&pool.degrees)
        .map(|(ex, d)| {
            let mut ex = ex.clone();
            ex.meta.insert("compositional_degree".into(), d.value().into());
            ex
        })
        .collect();
    writer.write("select_pool", "candidate_pool", ARTIFACT_POOL, pool_examples.len(), |w| {
        write_jsonl(w, &pool_examples)
    })?;

    // uncertainty
    let dump_path = &cfg.paths.ensemble_dump;
    let file = File::open(dump_path).map_err(|e| PipelineError::data("uncertainty", format!("{}: {e}", dump_path.display())))?;
    let dump = read_ensemble_dump(BufReader::new(file))
        .map_err(|e| PipelineError::data("uncertainty", format!("{}: {e}", dump_path.display())))?;
    let mut by_id = std::collections::HashMap::with_capacity(dump.len());
    for entry in dump {
        let id = entry.example_id.clone();
        if by_id.insert(id.clone(), entry).is_some() {
            return Err(PipelineError::data("uncertainty", format!("duplicate dump id {id:?}")));
        }
    }
    let mut scores: Vec<UncertaintyScore> = Vec::with_capacity(pool_examples.len());
    for ex in &pool_examples {
        let entry = by_id
            .get(&ex.id)
            .ok_or_else(|| PipelineError::data("uncertainty", format!("no ensemble dump for example {:?}", ex.id)))?;
        let score = uncertainty::token_uncertainties(entry).map_err(|e| PipelineError::data("uncertainty", e))?;
        scores.push(score);
    }
    let unused = by_id.len() - scores.len();
    if unused > 0 {
        warnings.push(format!("uncertainty: {unused} dump entries match no pool example"));
    }
    stage_counts.push(StageCount {
        stage: "uncertainty".into(),
        count: scores.len(),
    });
    writer.write("uncertainty", "uncertainty_scores", ARTIFACT_UNCERTAINTY, scores.len(), |w| {
        for s in &scores {
            serde_json::to_writer(&mut *w, s)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;

    // band_select
    let ranked = rank_by_uncertainty(
        pool_examples
            .into_iter()
            .zip(&scores)
            .map(|(ex, s)| (ex, s.sequence_score))
            .collect(),
        |ex| &ex.id,
    );
    let picked = band_select_indices(ranked.len(), t.band(), cfg.seed).map_err(|e| match e {
        BandError::SampleExceedsWindow { .. } => PipelineError::config("band_select", e),
        BandError::TooFewRanked { .. } => PipelineError::data("band_select", e),
    })?;
    let testset: Vec<_> = picked
        .into_iter()
        .map(|i| {
            let (ex, score) = &ranked[i];
            let mut ex = ex.clone();
            ex.meta.insert("uncertainty".into(), (*score).into());
            ex.meta.insert("uncertainty_rank".into(), (i + 1).into());
            ex
        })
        .collect();
    stage_counts.push(StageCount {
        stage: "band_select".into(),
        count: testset.len(),
    });
    writer.write("band_select", "testset", ARTIFACT_TESTSET, testset.len(), |w| write_jsonl(w, &testset))?;

    let artifacts = writer.finish()?;
    let metadata = [
        ("rmi_formula", RMI_FORMULA),
        ("sequence_aggregation", SEQUENCE_AGGREGATION),
        ("non_overlap_policy", NON_OVERLAP_POLICY),
        ("position_encoding", POSITION_ENCODING),
        ("band_sampler", "rand::seq::index::sample over ChaCha8Rng seeded with seed"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect();
    let manifest = Manifest {
        seed: cfg.seed,
        side,
        thresholds: t.clone(),
        inputs,
        artifacts,
        train_examples: train.len(),
        dictionary_entries: dict.len(),
        stage_counts,
        warnings,
        metadata,
    };
    for w in &manifest.warnings {
        log::warn!("{w}");
    }
    let manifest_path = cfg.out_dir.join(MANIFEST_FILE);
    let io = |e: std::io::Error| PipelineError::data("finalize", format!("{}: {e}", manifest_path.display()));
    let partial = cfg.out_dir.join(format!("{MANIFEST_FILE}{PARTIAL_SUFFIX}"));
    let mut body = serde_json::to_vec_pretty(&manifest).map_err(|e| PipelineError::data("finalize", e))?;
    body.push(b'\n');
    fs::write(&partial, body).map_err(io)?;
    fs::rename(&partial, &manifest_path).map_err(io)?;
    Ok(manifest)
}
