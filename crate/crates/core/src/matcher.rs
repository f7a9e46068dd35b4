//! Exact similarity search over the reference set, followed by the norm-ratio
//! filter that rejects candidates whose query carries more content than the
//! reference.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::descriptor::{dot, Descriptor, ImageId, Prediction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Score = cosine similarity.
    #[default]
    Cosine,
    /// Score = negative Euclidean distance.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    pub k: usize,
    /// Minimum score for a candidate to be kept.
    pub distance_threshold: f64,
    pub ratio_threshold: f64,
    pub ratio_tolerance: f64,
    pub filter_enabled: bool,
    pub metric: Metric,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            k: 10,
            distance_threshold: 0.7,
            ratio_threshold: 1.0,
            ratio_tolerance: 0.05,
            filter_enabled: true,
            metric: Metric::Cosine,
        }
    }
}

impl MatchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::config("k", "must be ≥ 1"));
        }
        if !(self.ratio_threshold > 0.0) {
            return Err(Error::config("tau", "must be > 0"));
        }
        if !(self.ratio_tolerance >= 0.0) {
            return Err(Error::config("delta", "must be ≥ 0"));
        }
        if self.distance_threshold.is_nan() {
            return Err(Error::config("eps", "must be a number"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RefIndex {
    dim: usize,
    refs: Vec<Descriptor>,
    norms: Vec<f64>,
}

impl RefIndex {
    pub fn build(refs: Vec<Descriptor>) -> Result<Self> {
        let Some(first) = refs.first() else {
            return Err(Error::config("refs", "reference set is empty"));
        };
        let dim = first.dim();
        let mut seen = BTreeSet::new();
        let mut norms = Vec::with_capacity(refs.len());
        for (i, r) in refs.iter().enumerate() {
            if r.dim() != dim {
                return Err(Error::DimensionMismatch {
                    offset: i as u64,
                    expected: dim,
                    found: r.dim(),
                });
            }
            if !seen.insert(r.id()) {
                return Err(Error::DuplicateId(r.id()));
            }
            let n = r.norm();
            if n == 0.0 {
                return Err(Error::ZeroNormDescriptor { id: r.id() });
            }
            norms.push(n);
        }
        Ok(Self { dim, refs, norms })
    }

    pub fn len(&self) -> usize {
        self.refs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.refs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn norm_of(&self, id: ImageId) -> Option<f64> {
        self.position(id).map(|i| self.norms[i])
    }

    pub fn norms(&self) -> &[f64] {
        &self.norms
    }

    pub fn references(&self) -> &[Descriptor] {
        &self.refs
    }

    fn position(&self, id: ImageId) -> Option<usize> {
        self.refs.iter().position(|r| r.id() == id)
    }
}

pub fn build_index(refs: Vec<Descriptor>) -> Result<RefIndex> {
    RefIndex::build(refs)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub reference: ImageId,
    pub score: f64,
    /// Norm of the reference, kept for the ratio filter.
    pub reference_norm: f64,
}

/// Exact top-k scan. Candidates below the threshold are dropped; ties go to the
/// smaller reference id.
pub fn search(index: &RefIndex, query: &Descriptor, cfg: &MatchConfig) -> Result<Vec<Candidate>> {
    if query.dim() != index.dim {
        return Err(Error::DimensionMismatch {
            offset: 0,
            expected: index.dim,
            found: query.dim(),
        });
    }
    let qn = query.norm();
    if qn == 0.0 {
        return Err(Error::ZeroNormDenominator);
    }
    let q = query.as_slice();
    let mut hits: Vec<Candidate> = index
        .refs
        .iter()
        .zip(&index.norms)
        .filter_map(|(r, &rn)| {
            let score = match cfg.metric {
                Metric::Cosine => dot(q, r.as_slice()) / (qn * rn),
                Metric::L2 => {
                    let d2: f64 = q
                        .iter()
                        .zip(r.as_slice())
                        .map(|(&a, &b)| {
                            let d = f64::from(a) - f64::from(b);
                            d * d
                        })
                        .sum();
                    -d2.sqrt()
                }
            };
            (score >= cfg.distance_threshold).then_some(Candidate {
                reference: r.id(),
                score,
                reference_norm: rn,
            })
        })
        .collect();
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.reference.cmp(&b.reference)));
    hits.truncate(cfg.k);
    Ok(hits)
}

/// Drops candidates with `R(query -> reference) > τ + δ`. Order is preserved.
pub fn ratio_filter(query: &Descriptor, candidates: Vec<Candidate>, cfg: &MatchConfig) -> Vec<Candidate> {
    if !cfg.filter_enabled {
        return candidates;
    }
    let qn = query.norm();
    let limit = cfg.ratio_threshold + cfg.ratio_tolerance;
    candidates
        .into_iter()
        .filter(|c| qn / c.reference_norm <= limit)
        .collect()
}

#[derive(Debug, Default)]
pub struct MatchOutput {
    pub predictions: Vec<Prediction>,
    /// Queries that could not be processed, with the reason.
    pub failures: Vec<(ImageId, Error)>,
}

/// Search + filter for every query. Queries are processed in ascending id
/// order; a failing query is recorded and skipped.
pub fn match_all(queries: &[Descriptor], index: &RefIndex, cfg: &MatchConfig) -> MatchOutput {
    let mut order: Vec<&Descriptor> = queries.iter().collect();
    order.sort_by_key(|q| q.id());
    let mut out = MatchOutput::default();
    for q in order {
        match search(index, q, cfg) {
            Ok(cands) => out
                .predictions
                .extend(ratio_filter(q, cands, cfg).into_iter().map(|c| Prediction {
                    query: q.id(),
                    reference: c.reference,
                    score: c.score,
                })),
            Err(e) => out.failures.push((q.id(), e)),
        }
    }
    out
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let exp = x.abs().log10().floor() as i32;
    let s = if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        let s = format!("{x:.8e}");
        let (mantissa, e) = s.split_once('e').expect("exponent");
        let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
        let e: i32 = e.parse().expect("exponent");
        format!("{mantissa}e{}{:02}", if e < 0 { '-' } else { '+' }, e.abs())
    };
    s
}

pub fn write_predictions_csv(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut out = String::from("query_id,ref_id,score\n");
    for p in predictions {
        let _ = writeln!(out, "{},{},{}", p.query, p.reference, format_sig9(p.score));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

pub fn read_predictions_csv(path: &Path) -> Result<Vec<Prediction>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::descriptor::csv_err(path, e))?;
    let header = r.headers().map_err(|e| crate::descriptor::csv_err(path, e))?.clone();
    if header.iter().collect::<Vec<_>>() != ["query_id", "ref_id", "score"] {
        return Err(Error::parse(path, 1, "expected header query_id,ref_id,score"));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| crate::descriptor::csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| {
            rec.get(i)
                .ok_or_else(|| Error::parse(path, line, format!("missing {name}")))
        };
        let query = field(0, "query_id")?
            .parse::<u64>()
            .map_err(|e| Error::parse(path, line, format!("bad query_id: {e}")))?;
        let reference = field(1, "ref_id")?
            .parse::<u64>()
            .map_err(|e| Error::parse(path, line, format!("bad ref_id: {e}")))?;
        let score = field(2, "score")?
            .parse::<f64>()
            .map_err(|e| Error::parse(path, line, format!("bad score: {e}")))?;
        if !score.is_finite() {
            return Err(Error::parse(path, line, "score is not finite"));
        }
        out.push(Prediction {
            query: ImageId(query),
            reference: ImageId(reference),
            score,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{cosine_similarity, norm};
    use proptest::prelude::*;

    fn descriptor_cosine(a: &Descriptor, b: &Descriptor) -> Result<f64> {
        cosine_similarity(a.as_slice(), b.as_slice())
    }

    fn vector_norm(v: &[f32]) -> f64 {
        norm(v)
    }

    fn d(id: u64, v: &[f32]) -> Descriptor {
        Descriptor::new(ImageId(id), v.to_vec()).unwrap()
    }

    fn cfg() -> MatchConfig {
        MatchConfig::default()
    }

    #[test]
    fn index_basics() {
        let idx = build_index(vec![d(1, &[3.0, 4.0])]).unwrap();
        assert_eq!(idx.len(), 1);
        assert_eq!(idx.norm_of(ImageId(1)), Some(5.0));
        assert!(matches!(
            build_index(vec![d(1, &[1.0, 0.0]), d(1, &[0.0, 1.0])]),
            Err(Error::DuplicateId(ImageId(1)))
        ));
        assert!(matches!(
            build_index(vec![d(1, &[0.0, 0.0])]),
            Err(Error::ZeroNormDescriptor { id: ImageId(1) })
        ));
        assert!(matches!(
            build_index(vec![d(1, &[1.0, 0.0]), d(2, &[1.0])]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(build_index(vec![]).is_err());
    }

    #[test]
    fn search_examples() {
        let idx = build_index(vec![d(1, &[1.0, 0.0]), d(2, &[0.0, 1.0]), d(3, &[0.6, 0.8])]).unwrap();
        let hits = search(&idx, &d(9, &[0.6, 0.8]), &cfg()).unwrap();
        assert_eq!(hits[0].reference, ImageId(3));
        assert!((hits[0].score - 1.0).abs() < 1e-12);

        let idx = build_index(vec![d(1, &[1.0, 0.0]), d(2, &[0.0, 1.0])]).unwrap();
        let c = MatchConfig {
            k: 1,
            distance_threshold: -1.0,
            ..cfg()
        };
        let hits = search(&idx, &d(9, &[0.9, 0.1]), &c).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].reference, ImageId(1));
        assert!((hits[0].score - 0.99388).abs() < 1e-4);

        let c = MatchConfig {
            distance_threshold: 0.99,
            ..cfg()
        };
        assert!(search(&idx, &d(9, &[1.0, 1.0]), &c).unwrap().is_empty());
        assert!(matches!(
            search(&idx, &d(9, &[0.0, 0.0]), &cfg()),
            Err(Error::ZeroNormDenominator)
        ));
    }

    #[test]
    fn search_ties_break_by_id() {
        let idx = build_index(vec![d(5, &[1.0, 0.0]), d(2, &[2.0, 0.0]), d(7, &[3.0, 0.0])]).unwrap();
        let hits = search(&idx, &d(0, &[1.0, 0.0]), &cfg()).unwrap();
        let ids: Vec<u64> = hits.iter().map(|h| h.reference.0).collect();
        assert_eq!(ids, [2, 5, 7]);
    }

    #[test]
    fn filter_examples() {
        let idx = build_index(vec![d(1, &[1.0, 0.0]), d(2, &[2.5, 0.0]), d(3, &[2.0, 0.0])]).unwrap();
        let q = d(9, &[2.0, 0.0]);
        let c = MatchConfig {
            distance_threshold: -1.0,
            ..cfg()
        };
        let kept: Vec<u64> = ratio_filter(&q, search(&idx, &q, &c).unwrap(), &c)
            .iter()
            .map(|h| h.reference.0)
            .collect();
        // R = 2 removed, R = 0.8 kept, R = 1 kept.
        assert_eq!(kept, [2, 3]);
        let off = MatchConfig {
            filter_enabled: false,
            ..c
        };
        assert_eq!(ratio_filter(&q, search(&idx, &q, &off).unwrap(), &off).len(), 3);
    }

    #[test]
    fn filter_is_directional() {
        let big = d(1, &[2.0, 0.1]);
        let small = d(2, &[1.0, 0.05]);
        let c = MatchConfig {
            distance_threshold: -1.0,
            ..cfg()
        };
        let to_small = build_index(vec![small.clone()]).unwrap();
        let to_big = build_index(vec![big.clone()]).unwrap();
        assert!(ratio_filter(&big, search(&to_small, &big, &c).unwrap(), &c).is_empty());
        assert_eq!(ratio_filter(&small, search(&to_big, &small, &c).unwrap(), &c).len(), 1);
    }

    #[test]
    fn match_all_counts_and_order() {
        assert!(match_all(&[], &build_index(vec![d(1, &[1.0])]).unwrap(), &cfg())
            .predictions
            .is_empty());
        let idx = build_index(vec![d(1, &[1.0, 0.1]), d(2, &[1.0, 0.2]), d(3, &[1.0, 0.3])]).unwrap();
        let qs = [d(30, &[1.0, 0.0]), d(10, &[1.0, 0.15]), d(20, &[1.0, 0.25])];
        let c = MatchConfig {
            k: 2,
            filter_enabled: false,
            ..cfg()
        };
        let out = match_all(&qs, &idx, &c);
        assert_eq!(out.predictions.len(), 6);
        let qids: Vec<u64> = out.predictions.iter().map(|p| p.query.0).collect();
        assert_eq!(qids, [10, 10, 20, 20, 30, 30]);
    }

    #[test]
    fn match_all_keeps_going_after_bad_query() {
        let idx = build_index(vec![d(1, &[1.0, 0.0])]).unwrap();
        let qs = [d(1, &[0.0, 0.0]), d(2, &[1.0, 0.0])];
        let out = match_all(&qs, &idx, &cfg());
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].0, ImageId(1));
        assert_eq!(out.predictions.len(), 1);
    }

    #[test]
    fn l2_metric_scores_negative_distance() {
        let idx = build_index(vec![d(1, &[3.0, 4.0]), d(2, &[0.0, 1.0])]).unwrap();
        let c = MatchConfig {
            metric: Metric::L2,
            distance_threshold: f64::NEG_INFINITY,
            ..cfg()
        };
        let hits = search(&idx, &d(9, &[0.0, 0.0]), &c);
        assert!(hits.is_err());
        let hits = search(&idx, &d(9, &[0.0, 2.0]), &c).unwrap();
        assert_eq!(hits[0].reference, ImageId(2));
        assert!((hits[0].score + 1.0).abs() < 1e-12);
    }

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(0.123456789123), "0.123456789");
        assert_eq!(format_sig9(-0.5), "-0.5");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1.5e-7), "1.5e-07");
        assert_eq!(format_sig9(0.999999999999), "1");
    }

    #[test]
    fn predictions_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let preds = vec![Prediction {
            query: ImageId(4),
            reference: ImageId(2),
            score: 0.75,
        }];
        write_predictions_csv(&path, &preds).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "query_id,ref_id,score\n4,2,0.75\n"
        );
        assert_eq!(read_predictions_csv(&path).unwrap(), preds);
        std::fs::write(&path, "query_id,ref_id,score\n1,2,0.5\n3,x,0.1\n").unwrap();
        match read_predictions_csv(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    fn brute_top_k(refs: &[Descriptor], q: &Descriptor, c: &MatchConfig) -> Vec<(u64, f64)> {
        let mut all: Vec<(u64, f64)> = refs
            .iter()
            .map(|r| (r.id().0, descriptor_cosine(q, r).unwrap()))
            .filter(|&(_, s)| s >= c.distance_threshold)
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.truncate(c.k);
        all
    }

    proptest! {
        #[test]
        fn search_matches_brute_force(
            raw in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 4), 1..200),
            q in prop::collection::vec(-1.0f32..1.0, 4),
            k in 1usize..15,
            eps in -1.0f64..0.9,
        ) {
            prop_assume!(vector_norm(&q) > 1e-3);
            let refs: Vec<Descriptor> = raw
                .into_iter()
                .enumerate()
                .filter(|(_, v)| vector_norm(v) > 1e-3)
                .map(|(i, v)| d(i as u64, &v))
                .collect();
            prop_assume!(!refs.is_empty());
            let c = MatchConfig { k, distance_threshold: eps, ..cfg() };
            let idx = build_index(refs.clone()).unwrap();
            let q = d(1000, &q);
            let got: Vec<(u64, f64)> = search(&idx, &q, &c).unwrap().iter().map(|h| (h.reference.0, h.score)).collect();
            prop_assert_eq!(got, brute_top_k(&refs, &q, &c));
        }

        #[test]
        fn filter_only_removes(
            raw in prop::collection::vec(prop::collection::vec(0.1f32..2.0, 3), 1..50),
            q in prop::collection::vec(0.1f32..2.0, 3),
        ) {
            let refs: Vec<Descriptor> = raw.into_iter().enumerate().map(|(i, v)| d(i as u64, &v)).collect();
            let idx = build_index(refs).unwrap();
            let off = MatchConfig { filter_enabled: false, k: 50, distance_threshold: -1.0, ..cfg() };
            let on = MatchConfig { filter_enabled: true, ..off };
            let qs = [d(100, &q)];
            let all = match_all(&qs, &idx, &off).predictions;
            let kept = match_all(&qs, &idx, &on).predictions;
            let mut it = all.iter();
            for p in &kept {
                prop_assert!(it.any(|a| a == p));
            }
        }
    }
}
