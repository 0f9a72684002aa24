use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Photo,
    Text,
    Multimodal,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "photo" => Ok(Modality::Photo),
            "text" => Ok(Modality::Text),
            "multimodal" => Ok(Modality::Multimodal),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub id: u64,
    pub score: f64,
}

/// Mean of two unit vectors, renormalized. Opposite inputs give zeros.
pub fn multimodal(photo: &[f64], text: &[f64]) -> Vec<f64> {
    let mut v: Vec<f64> = photo.iter().zip(text).map(|(a, b)| 0.5 * (a + b)).collect();
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Exact cosine top-k over `corpus` rows, best first, ties by ascending id.
/// `k` larger than the corpus returns every row.
pub fn top_k(corpus: &Matrix, ids: &[u64], query: &[f64], k: usize) -> Result<Vec<Hit>> {
    if ids.len() != corpus.rows() {
        return Err(Error::shape(format!("{} ids", corpus.rows()), format!("{}", ids.len())));
    }
    if query.len() != corpus.cols() {
        return Err(Error::shape(format!("query of dim {}", corpus.cols()), format!("{}", query.len())));
    }
    let qn = norm(query);
    let mut hits: Vec<Hit> = corpus
        .row_iter()
        .zip(ids)
        .map(|(row, &id)| {
            let denom = qn * norm(row);
            let score = if denom > 0.0 { dot(row, query) / denom } else { 0.0 };
            Hit { id, score }
        })
        .collect();
    let order = |a: &Hit, b: &Hit| b.score.total_cmp(&a.score).then(a.id.cmp(&b.id));
    let k = k.min(hits.len());
    if k > 0 && k < hits.len() {
        hits.select_nth_unstable_by(k - 1, order);
        hits.truncate(k);
    }
    hits.sort_by(order);
    hits.truncate(k);
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_query_wins_with_score_one() {
        let corpus = Matrix::from_rows(&[[1.0, 0.0], [0.6, 0.8], [0.0, 1.0]]).unwrap();
        let hits = top_k(&corpus, &[10, 11, 12], corpus.row(1), 2).unwrap();
        assert_eq!(hits[0].id, 11);
        assert!((hits[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_break_by_id_and_k_is_clamped() {
        let corpus = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).unwrap();
        let hits = top_k(&corpus, &[7, 3, 5], &[1.0, 0.0], 10).unwrap();
        let ids: Vec<u64> = hits.iter().map(|h| h.id).collect();
        assert_eq!(ids, vec![3, 7, 5]);
        assert_eq!(top_k(&corpus, &[7, 3, 5], &[1.0, 0.0], 1).unwrap()[0].id, 3);
        assert!(top_k(&corpus, &[7, 3, 5], &[1.0], 1).is_err());
    }

    #[test]
    fn multimodal_is_unit_mean() {
        let v = multimodal(&[1.0, 0.0], &[0.0, 1.0]);
        let s = 0.5f64.sqrt();
        assert!((v[0] - s).abs() < 1e-12 && (v[1] - s).abs() < 1e-12);
    }
}
