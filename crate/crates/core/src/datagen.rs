//! Synthetic heterogeneous-retrieval datasets, the label oracle, and JSONL
//! ingestion.
//!
//! Each item has a latent relevance mixing content quality with a
//! user-dependent part (user-topic affinity plus a per-user modality
//! preference). Upstream scores are a per-modality monotone transform of a
//! noisy copy of that relevance, pushed through a modality-specific Beta
//! quantile function so different queues have incomparable score scales.
//! Grades bucket each page's relevance ranks into five bins, then flip to a
//! neighbouring grade with probability `label_noise`.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::Mutex;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Beta, ContinuousCDF, Normal};

use crate::dataset::{Candidate, Dataset, Grade, Modality, Query, MAX_GRADE};
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::seeding::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct ModalitySpec {
    pub name: String,
    /// Inclusive range of queue lengths per query.
    pub queue_len: (usize, usize),
    /// Beta(alpha, beta) shape of this modality's upstream scores.
    pub score_alpha: f64,
    pub score_beta: f64,
    /// Correlation between upstream score and latent relevance.
    pub rho: f64,
    /// Whether items of this modality carry a visual embedding.
    pub visual: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_queries: usize,
    pub modalities: Vec<ModalitySpec>,
    pub text_dim: usize,
    pub visual_dim: usize,
    pub item_feature_dim: usize,
    pub user_feature_dim: usize,
    /// Dimension of the latent user/topic space.
    pub latent_dim: usize,
    pub label_noise: f64,
    /// Share of relevance variance that depends on the user.
    pub user_dependence: f64,
    /// Share of a visual item's content quality visible only in its visual
    /// embedding.
    pub visual_signal: f64,
    pub embedding_noise: f64,
    /// Page-quantile cut points between grades 0|1|2|3|4.
    pub grade_cuts: [f64; 4],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_queries: 715,
            modalities: vec![
                ModalitySpec {
                    name: "natural".into(),
                    queue_len: (4, 8),
                    score_alpha: 2.0,
                    score_beta: 5.0,
                    rho: 0.8,
                    visual: false,
                },
                ModalitySpec {
                    name: "video".into(),
                    queue_len: (4, 8),
                    score_alpha: 8.0,
                    score_beta: 2.0,
                    rho: 0.8,
                    visual: true,
                },
            ],
            text_dim: 16,
            visual_dim: 16,
            item_feature_dim: 6,
            user_feature_dim: 8,
            latent_dim: 4,
            label_noise: 0.1,
            user_dependence: 0.5,
            visual_signal: 0.5,
            embedding_noise: 0.3,
            grade_cuts: [0.45, 0.7, 0.85, 0.95],
            seed: 42,
        }
    }
}

impl SynthConfig {
    /// Reads the flat keys of `cfg`, starting from the defaults. Modality
    /// sections (`modality.<k>.<field>`) replace the default modality list
    /// when present.
    pub fn from_kv(cfg: &KvConfig) -> Result<Self> {
        let d = SynthConfig::default();
        let mut out = SynthConfig {
            n_queries: cfg.get_or("n_queries", d.n_queries)?,
            modalities: d.modalities.clone(),
            text_dim: cfg.get_or("text_dim", d.text_dim)?,
            visual_dim: cfg.get_or("visual_dim", d.visual_dim)?,
            item_feature_dim: cfg.get_or("item_feature_dim", d.item_feature_dim)?,
            user_feature_dim: cfg.get_or("user_feature_dim", d.user_feature_dim)?,
            latent_dim: cfg.get_or("latent_dim", d.latent_dim)?,
            label_noise: cfg.get_or("label_noise", d.label_noise)?,
            user_dependence: cfg.get_or("user_dependence", d.user_dependence)?,
            visual_signal: cfg.get_or("visual_signal", d.visual_signal)?,
            embedding_noise: cfg.get_or("embedding_noise", d.embedding_noise)?,
            grade_cuts: d.grade_cuts,
            seed: cfg.get_or("seed", d.seed)?,
        };
        if let Some(cuts) = cfg.get_list::<f64>("grade_cuts")? {
            out.grade_cuts = cuts
                .try_into()
                .map_err(|_| Error::config("grade_cuts", "expected exactly 4 cut points"))?;
        }
        let mut sections = cfg.sections("modality");
        sections.sort_by_key(|s| s.parse::<u32>().unwrap_or(u32::MAX));
        if !sections.is_empty() {
            out.modalities.clear();
            for (idx, key) in sections.iter().enumerate() {
                let expected = (idx + 1).to_string();
                if *key != expected {
                    return Err(Error::config(
                        format!("modality.{key}"),
                        "modality sections must be numbered 1..M",
                    ));
                }
                let base = d.modalities.get(idx).cloned().unwrap_or(ModalitySpec {
                    name: format!("modality-{key}"),
                    ..d.modalities[0].clone()
                });
                let f = |field: &str| format!("modality.{key}.{field}");
                out.modalities.push(ModalitySpec {
                    name: cfg.get_or(&f("name"), base.name)?,
                    queue_len: (
                        cfg.get_or(&f("queue_min"), base.queue_len.0)?,
                        cfg.get_or(&f("queue_max"), base.queue_len.1)?,
                    ),
                    score_alpha: cfg.get_or(&f("score_alpha"), base.score_alpha)?,
                    score_beta: cfg.get_or(&f("score_beta"), base.score_beta)?,
                    rho: cfg.get_or(&f("rho"), base.rho)?,
                    visual: cfg.get_or(&f("visual"), base.visual)?,
                });
            }
        }
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_queries", self.n_queries),
            ("text_dim", self.text_dim),
            ("item_feature_dim", self.item_feature_dim),
            ("user_feature_dim", self.user_feature_dim),
            ("latent_dim", self.latent_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.modalities.is_empty() {
            return Err(Error::config("modality", "at least one modality is required"));
        }
        let unit = [
            ("label_noise", self.label_noise),
            ("user_dependence", self.user_dependence),
            ("visual_signal", self.visual_signal),
        ];
        for (field, v) in unit {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1]"));
            }
        }
        if !(self.embedding_noise >= 0.0 && self.embedding_noise.is_finite()) {
            return Err(Error::config("embedding_noise", "must be finite and >= 0"));
        }
        let cuts_ok = self.grade_cuts.windows(2).all(|w| w[0] < w[1])
            && self.grade_cuts[0] > 0.0
            && self.grade_cuts[3] < 1.0;
        if !cuts_ok {
            return Err(Error::config(
                "grade_cuts",
                "must be strictly increasing inside (0, 1)",
            ));
        }
        for (idx, m) in self.modalities.iter().enumerate() {
            let f = |field: &str| format!("modality.{}.{field}", idx + 1);
            if !(0.0..=1.0).contains(&m.rho) {
                return Err(Error::config(f("rho"), "must lie in [0, 1]"));
            }
            if m.queue_len.0 == 0 {
                return Err(Error::config(f("queue_min"), "must be at least 1"));
            }
            if m.queue_len.1 < m.queue_len.0 {
                return Err(Error::config(f("queue_max"), "must be >= queue_min"));
            }
            if !(m.score_alpha > 0.0 && m.score_alpha.is_finite()) {
                return Err(Error::config(f("score_alpha"), "must be finite and > 0"));
            }
            if !(m.score_beta > 0.0 && m.score_beta.is_finite()) {
                return Err(Error::config(f("score_beta"), "must be finite and > 0"));
            }
            if m.visual && self.visual_dim == 0 {
                return Err(Error::config("visual_dim", "visual modalities need visual_dim >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct OracleEntry {
    grade: Grade,
    noiseless: Option<Grade>,
    latent: Option<f64>,
}

/// Deterministic stand-in for human annotators that meters its cost: the
/// first request for a `(query_id, item_id)` pair counts once.
#[derive(Debug, Default)]
pub struct LabelOracle {
    entries: HashMap<(String, String), OracleEntry>,
    seen: Mutex<HashSet<(String, String)>>,
}

impl Clone for LabelOracle {
    fn clone(&self) -> Self {
        LabelOracle {
            entries: self.entries.clone(),
            seen: Mutex::new(self.seen.lock().expect("oracle meter poisoned").clone()),
        }
    }
}

impl LabelOracle {
    /// An oracle answering with the labels stored in `dataset`.
    pub fn from_dataset(dataset: &Dataset) -> Self {
        let mut entries = HashMap::new();
        for q in &dataset.queries {
            for c in &q.candidates {
                if let Some(grade) = c.grade() {
                    entries.insert(
                        (q.query_id.clone(), c.item_id.clone()),
                        OracleEntry {
                            grade,
                            noiseless: None,
                            latent: None,
                        },
                    );
                }
            }
        }
        LabelOracle {
            entries,
            seen: Mutex::default(),
        }
    }

    /// Grade of an item; the first request per item increments the meter.
    pub fn label(&self, query_id: &str, item_id: &str) -> Result<Grade> {
        let key = (query_id.to_owned(), item_id.to_owned());
        let entry = self.entries.get(&key).ok_or_else(|| Error::Lookup {
            query_id: query_id.into(),
            item_id: item_id.into(),
        })?;
        self.seen.lock().expect("oracle meter poisoned").insert(key);
        Ok(entry.grade)
    }

    /// Grade without touching the meter (evaluation only).
    pub fn peek(&self, query_id: &str, item_id: &str) -> Option<Grade> {
        self.entry(query_id, item_id).map(|e| e.grade)
    }

    pub fn noiseless(&self, query_id: &str, item_id: &str) -> Option<Grade> {
        self.entry(query_id, item_id).and_then(|e| e.noiseless)
    }

    pub fn latent(&self, query_id: &str, item_id: &str) -> Option<f64> {
        self.entry(query_id, item_id).and_then(|e| e.latent)
    }

    fn entry(&self, query_id: &str, item_id: &str) -> Option<&OracleEntry> {
        self.entries
            .get(&(query_id.to_owned(), item_id.to_owned()))
    }

    /// Distinct items graded so far.
    pub fn calls(&self) -> usize {
        self.seen.lock().expect("oracle meter poisoned").len()
    }

    pub fn was_labeled(&self, query_id: &str, item_id: &str) -> bool {
        self.seen
            .lock()
            .expect("oracle meter poisoned")
            .contains(&(query_id.to_owned(), item_id.to_owned()))
    }

    pub fn reset_meter(&self) {
        self.seen.lock().expect("oracle meter poisoned").clear();
    }
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense `rows x cols` projection with N(0, 1/cols) entries.
fn projection<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    let scale = 1.0 / (cols as f64).sqrt();
    (0..rows)
        .map(|_| normal_vec(rng, cols).into_iter().map(|x| x * scale).collect())
        .collect()
}

fn project<R: Rng>(p: &[Vec<f64>], latent: &[f64], noise: f64, rng: &mut R) -> Vec<f64> {
    p.iter()
        .map(|row| {
            let eps: f64 = StandardNormal.sample(rng);
            dot(row, latent) + noise * eps
        })
        .collect()
}

/// Grade of the item at `rank_from_bottom` (0 = least relevant) in a page of
/// `n` items.
pub(crate) fn quantile_grade(rank_from_bottom: usize, n: usize, cuts: &[f64; 4]) -> Grade {
    let u = (rank_from_bottom + 1) as f64 / n as f64;
    cuts.iter().filter(|&&c| u >= c).count() as Grade
}

pub(crate) fn flip_to_neighbour<R: Rng>(grade: Grade, rng: &mut R) -> Grade {
    match grade {
        0 => 1,
        MAX_GRADE => MAX_GRADE - 1,
        g if rng.random_bool(0.5) => g + 1,
        g => g - 1,
    }
}

struct Projections {
    user: Vec<Vec<f64>>,
    text: Vec<Vec<f64>>,
    visual: Vec<Vec<f64>>,
    modality_pref: Vec<Vec<f64>>,
}

/// Generates a dataset together with the oracle holding its grades. The
/// dataset's `label` fields carry the (noisy) oracle grades.
pub fn generate_dataset(config: &SynthConfig) -> Result<(Dataset, LabelOracle)> {
    config.validate()?;
    let k = config.latent_dim;
    let seed = config.seed;
    let mut prng = stream(seed, "projection", 0);
    let proj = Projections {
        user: projection(&mut prng, config.user_feature_dim, k),
        text: projection(&mut prng, config.text_dim, k + 1),
        visual: projection(&mut prng, config.visual_dim, k + 1),
        modality_pref: config.modalities.iter().map(|_| normal_vec(&mut prng, k)).collect(),
    };
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let betas = config
        .modalities
        .iter()
        .enumerate()
        .map(|(i, m)| {
            Beta::new(m.score_alpha, m.score_beta).map_err(|e| {
                Error::config(format!("modality.{}.score_alpha", i + 1), e.to_string())
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let lambda = config.user_dependence;
    let vis = config.visual_signal;
    let sqrt_k = (k as f64).sqrt();
    let mut queries = Vec::with_capacity(config.n_queries);
    let mut entries = HashMap::new();

    for qi in 0..config.n_queries {
        let query_id = format!("q{qi:05}");
        let mut urng = stream(seed, "user", qi as u64);
        let user = normal_vec(&mut urng, k);
        let user_features = project(&proj.user, &user, 0.3, &mut urng);

        let mut candidates = Vec::new();
        let mut latent = Vec::new();
        for (mi, spec) in config.modalities.iter().enumerate() {
            let modality = mi as u32 + 1;
            let mut mrng = stream(seed, &format!("modality/{modality}"), qi as u64);
            let n = mrng.random_range(spec.queue_len.0..=spec.queue_len.1);
            let pref = dot(&user, &proj.modality_pref[mi]) / sqrt_k;
            for j in 0..n {
                let q_text: f64 = StandardNormal.sample(&mut mrng);
                let q_vis: f64 = if spec.visual { StandardNormal.sample(&mut mrng) } else { 0.0 };
                let topic = normal_vec(&mut mrng, k);
                let content = if spec.visual {
                    (1.0 - vis).sqrt() * q_text + vis.sqrt() * q_vis
                } else {
                    q_text
                };
                let affinity = dot(&user, &topic) / sqrt_k;
                let relevance = (1.0 - lambda).sqrt() * content
                    + lambda.sqrt() * (affinity + pref) / std::f64::consts::SQRT_2;

                let eps: f64 = StandardNormal.sample(&mut mrng);
                let z = spec.rho * relevance + (1.0 - spec.rho * spec.rho).sqrt() * eps;
                let p = std_normal.cdf(z).clamp(1e-12, 1.0 - 1e-12);
                let upstream_score = betas[mi].inverse_cdf(p);

                let mut text_latent = vec![q_text];
                text_latent.extend_from_slice(&topic);
                let text_embedding = project(&proj.text, &text_latent, config.embedding_noise, &mut mrng);
                let visual_embedding = spec.visual.then(|| {
                    let mut v_latent = vec![q_vis];
                    v_latent.extend_from_slice(&topic);
                    project(&proj.visual, &v_latent, config.embedding_noise, &mut mrng)
                });

                let mut features = Vec::with_capacity(config.item_feature_dim);
                for f in 0..config.item_feature_dim {
                    let value = match f {
                        1 => modality as f64,
                        f if f % 2 == 0 => {
                            let e: f64 = StandardNormal.sample(&mut mrng);
                            q_text + e
                        }
                        _ => {
                            if mrng.random_bool(0.1) { 1.0 } else { 0.0 }
                        }
                    };
                    features.push(value);
                }

                latent.push(relevance);
                candidates.push(Candidate {
                    item_id: format!("{query_id}-m{modality}-{j:02}"),
                    modality,
                    upstream_score,
                    features,
                    text_embedding,
                    visual_embedding,
                    label: None,
                    clicked: None,
                });
            }
        }

        let n = candidates.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| latent[a].total_cmp(&latent[b]));
        let mut noiseless = vec![0; n];
        for (rank, &idx) in order.iter().enumerate() {
            noiseless[idx] = quantile_grade(rank, n, &config.grade_cuts);
        }
        let mut lrng = stream(seed, "labels", qi as u64);
        for (idx, c) in candidates.iter_mut().enumerate() {
            let flip = lrng.random::<f64>() < config.label_noise;
            let grade = if flip {
                flip_to_neighbour(noiseless[idx], &mut lrng)
            } else {
                noiseless[idx]
            };
            c.label = Some(grade as i32);
            entries.insert(
                (query_id.clone(), c.item_id.clone()),
                OracleEntry {
                    grade,
                    noiseless: Some(noiseless[idx]),
                    latent: Some(latent[idx]),
                },
            );
        }
        queries.push(Query {
            query_id,
            user_features,
            candidates,
        });
    }

    let any_visual = config.modalities.iter().any(|m| m.visual);
    let dataset = Dataset {
        modalities: config
            .modalities
            .iter()
            .enumerate()
            .map(|(i, m)| Modality {
                id: i as u32 + 1,
                name: m.name.clone(),
            })
            .collect(),
        queries,
        embedding_dims: (config.text_dim, if any_visual { config.visual_dim } else { 0 }),
        feature_dims: (config.item_feature_dim, config.user_feature_dim),
    };
    let oracle = LabelOracle {
        entries,
        seen: Mutex::default(),
    };
    Ok((dataset, oracle))
}

/// Reads a dataset from newline-delimited JSON (one query per line).
///
/// Dimensions are taken from the first record carrying each field; every
/// later record must agree. Modalities are the distinct ids seen, named
/// `modality-<id>`.
pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    ingest_reader(BufReader::new(File::open(path)?))
}

pub fn ingest_reader<R: BufRead>(reader: R) -> Result<Dataset> {
    let mut queries = Vec::new();
    let mut text_dim = None;
    let mut visual_dim = None;
    let mut item_dim = None;
    let mut user_dim = None;
    let mut modality_ids = BTreeMap::new();

    fn check(slot: &mut Option<usize>, got: usize, what: &str, line: usize) -> Result<()> {
        match *slot {
            None => {
                *slot = Some(got);
                Ok(())
            }
            Some(expected) if expected == got => Ok(()),
            Some(expected) => Err(Error::Schema {
                line,
                message: format!("{what} has length {got}, expected {expected}"),
            }),
        }
    }

    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: Query = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        check(&mut user_dim, q.user_features.len(), "user_features", line_no)?;
        for c in &q.candidates {
            check(&mut text_dim, c.text_embedding.len(), "text_embedding", line_no)?;
            check(&mut item_dim, c.features.len(), "features", line_no)?;
            if let Some(v) = &c.visual_embedding {
                check(&mut visual_dim, v.len(), "visual_embedding", line_no)?;
            }
            modality_ids.insert(c.modality, ());
        }
        queries.push(q);
    }

    Ok(Dataset {
        modalities: modality_ids
            .into_keys()
            .map(|id| Modality {
                id,
                name: format!("modality-{id}"),
            })
            .collect(),
        queries,
        embedding_dims: (text_dim.unwrap_or(0), visual_dim.unwrap_or(0)),
        feature_dims: (item_dim.unwrap_or(0), user_dim.unwrap_or(0)),
    })
}
