//! Batch bias reports and two-anchor separation checks.

use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingProvider;
use crate::engine::{
    anchor_similarities, ks_two_sample, score_text, AnchorSimilarities, BiasError, KsResult, QueryEffects,
    ScoringSnapshot,
};
use crate::ids::AnchorId;
use crate::par;

/// Significance level for the separation verdict.
pub const SEPARATION_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReportRow {
    pub test_text: String,
    pub likelihoods: IndexMap<AnchorId, f64>,
    pub posteriors: IndexMap<AnchorId, f64>,
    pub tendency: AnchorId,
    /// Between the two anchors' similarity samples; absent unless exactly two anchors.
    pub ks: Option<KsResult>,
}

/// One concept per non-blank line, kept verbatim apart from the line ending.
pub fn parse_concepts(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect()
}

fn two_sample_ks(sims: &AnchorSimilarities) -> Result<Option<KsResult>, BiasError> {
    if sims.len() != 2 {
        return Ok(None);
    }
    let samples: Vec<Vec<f64>> = sims
        .values()
        .map(|l| l.iter().map(|(_, s)| s.value()).collect())
        .collect();
    ks_two_sample(&samples[0], &samples[1]).map(Some)
}

/// Scores every concept. Rows follow input order. Provider calls run up to
/// `jobs` at a time.
pub fn probe(
    snap: &ScoringSnapshot,
    concepts: &[String],
    provider: &dyn EmbeddingProvider,
    jobs: Option<usize>,
) -> Result<(Vec<BiasReportRow>, QueryEffects), BiasError> {
    if concepts.is_empty() {
        return Ok((Vec::new(), QueryEffects::default()));
    }
    // Embed each distinct text once.
    let mut distinct: Vec<&String> = Vec::new();
    for c in concepts {
        if !distinct.contains(&c) {
            distinct.push(c);
        }
    }
    let run = |text: &&String| score_text(snap, text, provider);
    let scored = match jobs {
        Some(j) => par::map_coarse_bounded(&distinct, j, run),
        None => par::map_coarse(&distinct, run),
    };
    let mut by_text = IndexMap::with_capacity(distinct.len());
    let mut effects = QueryEffects::default();
    for (text, result) in distinct.iter().zip(scored) {
        let (score, sims, fx) = result?;
        effects.cache_rows.extend(fx.cache_rows);
        let row = BiasReportRow {
            test_text: (*text).clone(),
            likelihoods: score.posterior.likelihoods.clone(),
            posteriors: score.posterior.posteriors.clone(),
            tendency: score.posterior.tendency().clone(),
            ks: two_sample_ks(&sims)?,
        };
        by_text.insert(*text, row);
    }
    let rows = concepts.iter().map(|c| by_text[c].clone()).collect();
    Ok((rows, effects))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Validation {
    pub test_text: String,
    #[serde(flatten)]
    pub ks: KsResult,
    pub separated: bool,
    pub verdict: String,
}

/// KS test between the two anchors' similarity samples for one concept.
pub fn validate_concept(
    snap: &ScoringSnapshot,
    text: &str,
    provider: &dyn EmbeddingProvider,
) -> Result<(Validation, QueryEffects), BiasError> {
    let anchors = snap.anchor_ids();
    if anchors.len() != 2 {
        return Err(BiasError::NotTwoAnchors(anchors.len()));
    }
    let (sims, effects) = anchor_similarities(snap, text, provider)?;
    let ks = two_sample_ks(&sims)?.expect("two anchors");
    let separated = ks.separated(SEPARATION_ALPHA);
    Ok((
        Validation {
            test_text: text.to_owned(),
            ks,
            separated,
            verdict: if separated { "separated" } else { "not separated" }.to_owned(),
        },
        effects,
    ))
}

/// CSV header: `test_text`, then `likelihood_<a>,posterior_<a>` per anchor,
/// then `tendency,ks_d,ks_p`.
pub fn csv_header(anchors: &[AnchorId]) -> Vec<String> {
    let mut h = vec!["test_text".to_owned()];
    for a in anchors {
        h.push(format!("likelihood_{a}"));
        h.push(format!("posterior_{a}"));
    }
    h.extend(["tendency", "ks_d", "ks_p"].map(String::from));
    h
}

pub fn write_csv<W: Write>(out: W, anchors: &[AnchorId], rows: &[BiasReportRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(csv_header(anchors))?;
    for row in rows {
        let mut rec = vec![row.test_text.clone()];
        for a in anchors {
            rec.push(row.likelihoods.get(a).map(f64::to_string).unwrap_or_default());
            rec.push(row.posteriors.get(a).map(f64::to_string).unwrap_or_default());
        }
        rec.push(row.tendency.to_string());
        match &row.ks {
            Some(ks) => {
                rec.push(ks.d_statistic.to_string());
                rec.push(ks.p_value.to_string());
            }
            None => rec.extend([String::new(), String::new()]),
        }
        w.write_record(rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<W: Write>(out: W, rows: &[BiasReportRow]) -> serde_json::Result<()> {
    let mut out = out;
    serde_json::to_writer_pretty(&mut out, rows)?;
    out.write_all(b"\n").map_err(serde_json::Error::io)
}
