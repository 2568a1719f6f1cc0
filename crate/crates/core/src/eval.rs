//! Cross-modal retrieval evaluation: rank every candidate of the other
//! modality for each query, then report average precision, MAP and a
//! precision-recall curve. Relevance means "same class label".

use std::fmt;

use crate::error::{GinError, Result};
use crate::exec::Exec;
use crate::model::{GinModel, ImageSample, Pass};
use crate::text_graph::{ClassId, TextGraph, TextSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    TextToImage,
    ImageToText,
}

impl Direction {
    pub fn as_str(&self) -> &'static str {
        match self {
            Direction::TextToImage => "text_to_image",
            Direction::ImageToText => "image_to_text",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Direction {
    type Err = GinError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text_to_image" | "t2i" | "text" => Ok(Direction::TextToImage),
            "image_to_text" | "i2t" | "image" => Ok(Direction::ImageToText),
            other => Err(GinError::InvalidArgument(format!(
                "unknown direction {other:?}"
            ))),
        }
    }
}

/// Dense query x candidate score table with class labels on both axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    scores: Vec<f64>,
    query_labels: Vec<ClassId>,
    candidate_labels: Vec<ClassId>,
}

impl ScoreMatrix {
    pub fn new(
        scores: Vec<f64>,
        query_labels: Vec<ClassId>,
        candidate_labels: Vec<ClassId>,
    ) -> Result<Self> {
        let (rows, cols) = (query_labels.len(), candidate_labels.len());
        if scores.len() != rows * cols {
            return Err(GinError::dim(
                "score matrix entries",
                rows * cols,
                scores.len(),
            ));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(GinError::Numeric(format!(
                "non-finite score at ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        Ok(ScoreMatrix {
            rows,
            cols,
            scores,
            query_labels,
            candidate_labels,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, q: usize, c: usize) -> f64 {
        self.scores[q * self.cols + c]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.scores[q * self.cols..(q + 1) * self.cols]
    }

    pub fn query_labels(&self) -> &[ClassId] {
        &self.query_labels
    }

    pub fn candidate_labels(&self) -> &[ClassId] {
        &self.candidate_labels
    }

    /// Swaps the roles of queries and candidates.
    pub fn transpose(&self) -> ScoreMatrix {
        let mut scores = vec![0.0; self.scores.len()];
        for q in 0..self.rows {
            for c in 0..self.cols {
                scores[c * self.rows + q] = self.get(q, c);
            }
        }
        ScoreMatrix {
            rows: self.cols,
            cols: self.rows,
            scores,
            query_labels: self.candidate_labels.clone(),
            candidate_labels: self.query_labels.clone(),
        }
    }

    /// Candidate indices of row `q`, best first; equal scores keep index order.
    pub fn ranking(&self, q: usize) -> Vec<usize> {
        let row = self.row(q);
        let mut idx: Vec<usize> = (0..self.cols).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        idx
    }
}

/// Text-by-image matrix of `score_pair(text_forward(t), image_forward(i))`
/// in inference mode. Embeddings are computed once per item.
pub fn score_all(
    model: &GinModel,
    graph: &TextGraph,
    texts: &[TextSample],
    images: &[ImageSample],
    exec: Exec,
) -> Result<ScoreMatrix> {
    if texts.is_empty() || images.is_empty() {
        return Err(GinError::InvalidArgument(
            "score_all needs texts and images".into(),
        ));
    }
    let ft: Vec<Vec<f64>> = exec
        .map(texts, |t| model.text_forward(graph, t, Pass::Inference))
        .into_iter()
        .collect::<Result<_>>()?;
    let fi: Vec<Vec<f64>> = exec
        .map(images, |i| model.image_forward(i))
        .into_iter()
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = exec.map(&ft, |t| {
        fi.iter().map(|i| model.score_unchecked(t, i)).collect()
    });
    ScoreMatrix::new(
        rows.into_iter().flatten().collect(),
        texts.iter().map(|t| t.label).collect(),
        images.iter().map(|i| i.label).collect(),
    )
}

/// Non-interpolated average precision of a ranked relevance list.
pub fn average_precision(ranked_relevance: &[bool]) -> Result<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (p, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (p + 1) as f64;
        }
    }
    if hits == 0 {
        return Err(GinError::InvalidArgument(
            "no relevant item in ranking".into(),
        ));
    }
    Ok(sum / hits as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub direction: Direction,
    /// `(query index, AP)` for every evaluated query.
    pub per_query_ap: Vec<(usize, f64)>,
    pub map: f64,
    /// Mean recall and mean interpolated precision at each cutoff 1..=cols.
    pub pr_points: Vec<(f64, f64)>,
    /// Queries without any relevant candidate.
    pub excluded: usize,
}

/// Ranks each row, computes AP per query and the averaged PR curve.
pub fn evaluate(sm: &ScoreMatrix, direction: Direction, exec: Exec) -> Result<EvalReport> {
    if sm.rows() == 0 || sm.cols() == 0 {
        return Err(GinError::InvalidArgument("empty score matrix".into()));
    }
    struct QueryResult {
        ap: f64,
        recall: Vec<f64>,
        interp: Vec<f64>,
    }
    let per_query: Vec<Option<QueryResult>> = exec.map_range(sm.rows(), |q| {
        let label = sm.query_labels()[q];
        let rel: Vec<bool> = sm
            .ranking(q)
            .into_iter()
            .map(|c| sm.candidate_labels()[c] == label)
            .collect();
        let total = rel.iter().filter(|&&r| r).count();
        if total == 0 {
            return None;
        }
        let ap = average_precision(&rel).ok()?;
        let mut hits = 0usize;
        let mut recall = Vec::with_capacity(rel.len());
        let mut precision = Vec::with_capacity(rel.len());
        for (p, &r) in rel.iter().enumerate() {
            hits += r as usize;
            recall.push(hits as f64 / total as f64);
            precision.push(hits as f64 / (p + 1) as f64);
        }
        // Interpolated precision: best precision at any cutoff whose recall
        // is at least this cutoff's recall.
        let mut interp = precision;
        for p in (0..interp.len().saturating_sub(1)).rev() {
            interp[p] = interp[p].max(interp[p + 1]);
        }
        for p in 1..interp.len() {
            if recall[p] == recall[p - 1] {
                interp[p] = interp[p - 1];
            }
        }
        Some(QueryResult { ap, recall, interp })
    });

    let mut per_query_ap = Vec::new();
    let mut recall_sum = vec![0.0; sm.cols()];
    let mut interp_sum = vec![0.0; sm.cols()];
    let mut excluded = 0;
    for (q, r) in per_query.into_iter().enumerate() {
        match r {
            Some(r) => {
                per_query_ap.push((q, r.ap));
                for p in 0..sm.cols() {
                    recall_sum[p] += r.recall[p];
                    interp_sum[p] += r.interp[p];
                }
            }
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{direction}: {excluded} queries have no relevant candidate and were excluded");
    }
    if per_query_ap.is_empty() {
        return Err(GinError::Data(format!(
            "{direction}: no query has a relevant candidate"
        )));
    }
    let nq = per_query_ap.len() as f64;
    let map = per_query_ap.iter().map(|(_, ap)| ap).sum::<f64>() / nq;
    let pr_points = recall_sum
        .into_iter()
        .zip(interp_sum)
        .map(|(r, p)| (r / nq, p / nq))
        .collect();
    Ok(EvalReport {
        direction,
        per_query_ap,
        map,
        pr_points,
        excluded,
    })
}

/// Both directions from one text-by-image matrix.
pub fn evaluate_both(sm: &ScoreMatrix, exec: Exec) -> Result<(EvalReport, EvalReport)> {
    Ok((
        evaluate(sm, Direction::TextToImage, exec)?,
        evaluate(&sm.transpose(), Direction::ImageToText, exec)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true, true, false]).unwrap(), 1.0);
        assert!((average_precision(&[false, false, true]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(average_precision(&[true; 5]).unwrap(), 1.0);
        assert!(average_precision(&[false, false]).is_err());
    }

    #[test]
    fn indicator_scores_give_perfect_map() {
        let ql = vec![0, 1, 2, 1];
        let cl = vec![2, 0, 1, 1, 0];
        let scores = ql
            .iter()
            .flat_map(|&q| cl.iter().map(move |&c| if q == c { 1.0 } else { 0.0 }))
            .collect();
        let sm = ScoreMatrix::new(scores, ql, cl).unwrap();
        let (a, b) = evaluate_both(&sm, Exec::default()).unwrap();
        assert_eq!(a.map, 1.0);
        assert_eq!(b.map, 1.0);
    }

    #[test]
    fn constant_scores_follow_index_order() {
        // Relevant items are the last two candidates; ties keep index order.
        let sm = ScoreMatrix::new(vec![0.5; 4], vec![1], vec![0, 0, 1, 1]).unwrap();
        let r = evaluate(&sm, Direction::TextToImage, Exec::default()).unwrap();
        let want = (1.0 / 3.0 + 2.0 / 4.0) / 2.0;
        assert!((r.map - want).abs() < 1e-15);
        assert_eq!(r.pr_points.len(), 4);
        assert_eq!(r.pr_points[3].0, 1.0);
        assert_eq!(r.pr_points[0].1, 0.5);
    }

    #[test]
    fn queries_without_relevant_items_are_excluded() {
        let sm = ScoreMatrix::new(vec![0.1, 0.2, 0.3, 0.4], vec![0, 5], vec![0, 1]).unwrap();
        let r = evaluate(&sm, Direction::TextToImage, Exec::default()).unwrap();
        assert_eq!(r.excluded, 1);
        assert_eq!(r.per_query_ap.len(), 1);
        let none = ScoreMatrix::new(vec![0.1], vec![3], vec![4]).unwrap();
        assert!(evaluate(&none, Direction::TextToImage, Exec::default()).is_err());
        let empty = ScoreMatrix::new(vec![], vec![], vec![]).unwrap();
        assert!(evaluate(&empty, Direction::TextToImage, Exec::default()).is_err());
    }

    #[test]
    fn direction_parse() {
        assert_eq!("t2i".parse::<Direction>().unwrap(), Direction::TextToImage);
        assert_eq!(
            "image_to_text".parse::<Direction>().unwrap(),
            Direction::ImageToText
        );
        assert!("sideways".parse::<Direction>().is_err());
    }

    proptest! {
        #[test]
        fn map_depends_only_on_ranking(
            seed_scores in proptest::collection::vec(-3.0f64..3.0, 36),
            labels in proptest::collection::vec(0usize..3, 12),
        ) {
            let ql = labels[..6].to_vec();
            let mut cl = labels[6..].to_vec();
            cl[0] = ql[0];
            let sm = ScoreMatrix::new(seed_scores.clone(), ql.clone(), cl.clone()).unwrap();
            let mono = ScoreMatrix::new(
                seed_scores.iter().map(|s| (2.0 * s).exp() + 7.0).collect(), ql, cl,
            ).unwrap();
            let a = evaluate(&sm, Direction::TextToImage, Exec::default()).unwrap();
            let b = evaluate(&mono, Direction::TextToImage, Exec::default()).unwrap();
            prop_assert_eq!(a.map, b.map);
            for &(_, ap) in &a.per_query_ap {
                prop_assert!((0.0..=1.0).contains(&ap));
            }
        }

        #[test]
        fn ap_is_one_iff_relevant_first(rel in proptest::collection::vec(any::<bool>(), 1..20)) {
            prop_assume!(rel.iter().any(|&r| r));
            let ap = average_precision(&rel).unwrap();
            let k = rel.iter().filter(|&&r| r).count();
            let perfect = rel[..k].iter().all(|&r| r);
            prop_assert_eq!(ap == 1.0, perfect);
            prop_assert!(ap > 0.0 && ap <= 1.0);
        }
    }
}
