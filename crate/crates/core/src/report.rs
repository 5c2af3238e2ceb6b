//! Evaluation report: per-query scores, their means, and two renderings
//! (pretty JSON and an aligned plain-text table).
//!
//! The gated columns credit a query's downstream scores only when its
//! R-Precision is exactly 1; see `metrics::kilt_score`. Exact match
//! doubles as label accuracy for classification-style tasks, since both
//! reduce to normalized string equality against the gold set.

use serde::Serialize;

use crate::metrics::kilt_score;

/// One query's full score card. Gated fields are derived, never set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryEval {
    pub id: String,
    pub r_precision: f64,
    pub recall_at_k: f64,
    pub em: f64,
    pub f1: f64,
    pub rouge_l: f64,
    pub kilt_em: f64,
    pub kilt_f1: f64,
    pub kilt_rouge_l: f64,
}

impl QueryEval {
    pub fn new(
        id: impl Into<String>,
        r_precision: f64,
        recall_at_k: f64,
        em: f64,
        f1: f64,
        rouge_l: f64,
    ) -> QueryEval {
        QueryEval {
            id: id.into(),
            r_precision,
            recall_at_k,
            em,
            f1,
            rouge_l,
            kilt_em: kilt_score(r_precision, em),
            kilt_f1: kilt_score(r_precision, f1),
            kilt_rouge_l: kilt_score(r_precision, rouge_l),
        }
    }
}

/// Column means over all queries; absent while there are no queries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregates {
    pub r_precision: f64,
    pub recall_at_k: f64,
    pub em: f64,
    pub f1: f64,
    pub rouge_l: f64,
    pub kilt_em: f64,
    pub kilt_f1: f64,
    pub kilt_rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    /// Seed of the run that produced the scored predictions.
    pub seed: u64,
    /// The k used for the recall column.
    pub k: usize,
    pub queries: Vec<QueryEval>,
    pub aggregates: Option<Aggregates>,
}

impl EvalReport {
    pub fn new(seed: u64, k: usize, queries: Vec<QueryEval>) -> EvalReport {
        let aggregates = (!queries.is_empty()).then(|| {
            let n = queries.len() as f64;
            let mean = |f: fn(&QueryEval) -> f64| queries.iter().map(f).sum::<f64>() / n;
            Aggregates {
                r_precision: mean(|q| q.r_precision),
                recall_at_k: mean(|q| q.recall_at_k),
                em: mean(|q| q.em),
                f1: mean(|q| q.f1),
                rouge_l: mean(|q| q.rouge_l),
                kilt_em: mean(|q| q.kilt_em),
                kilt_f1: mean(|q| q.kilt_f1),
                kilt_rouge_l: mean(|q| q.kilt_rouge_l),
            }
        });
        EvalReport { seed, k, queries, aggregates }
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }

    /// Aligned table: one row per query, then a mean row when any exist.
    /// ROUGE-L stays JSON-only; the table keeps the six headline columns.
    pub fn to_table(&self) -> String {
        let recall_header = format!("R@{}", self.k);
        let id_width = self
            .queries
            .iter()
            .map(|q| q.id.len())
            .chain(["query".len()])
            .max()
            .unwrap();
        let mut out = String::new();
        let mut row = |id: &str, cells: [String; 6]| {
            out.push_str(&format!("{id:<id_width$}"));
            for cell in cells {
                out.push_str(&format!("  {cell:>7}"));
            }
            out.push('\n');
        };
        let header = ["R-P", &recall_header, "EM", "F1", "KILT-EM", "KILT-F1"];
        row("query", header.map(String::from));
        let cells = |q: &QueryEval| {
            [q.r_precision, q.recall_at_k, q.em, q.f1, q.kilt_em, q.kilt_f1]
                .map(|v| format!("{v:.4}"))
        };
        for q in &self.queries {
            row(&q.id, cells(q));
        }
        if let Some(a) = &self.aggregates {
            let mean = QueryEval {
                id: String::new(),
                r_precision: a.r_precision,
                recall_at_k: a.recall_at_k,
                em: a.em,
                f1: a.f1,
                rouge_l: a.rouge_l,
                kilt_em: a.kilt_em,
                kilt_f1: a.kilt_f1,
                kilt_rouge_l: a.kilt_rouge_l,
            };
            row("mean", cells(&mean));
        }
        out
    }
}
