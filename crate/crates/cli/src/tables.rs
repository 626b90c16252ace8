//! Summary tables: one row per (client, condition), written as CSV and JSON
//! with identical values.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use securegate_core::attacks::{AttackReport, Condition};

use crate::artifacts::{read_json, write_bytes, write_json, Layout};

/// Column order of both formats.
///
/// - `client_id`: organization index
/// - `condition`: `correct_token`, `wrong_token` or `no_token`
/// - `adapter_path`: ids of the adapters that answered, joined by `+`
/// - `routing_accuracy`: share of queries routed to the intended adapter
/// - `inference_accuracy`: candidate-ranking attack success rate
/// - `extraction_precision`, `extraction_recall`: sampled-entity scores
/// - `precision_undefined`, `recall_undefined`: zero-denominator flags
/// - `ppl`: perplexity of held-out raw documents through the router
pub const COLUMNS: [&str; 10] = [
    "client_id",
    "condition",
    "adapter_path",
    "routing_accuracy",
    "inference_accuracy",
    "extraction_precision",
    "extraction_recall",
    "precision_undefined",
    "recall_undefined",
    "ppl",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Row {
    pub client_id: usize,
    pub condition: Condition,
    pub adapter_path: String,
    pub routing_accuracy: f64,
    pub inference_accuracy: f64,
    pub extraction_precision: f64,
    pub extraction_recall: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
    pub ppl: f64,
}

impl From<&AttackReport> for Row {
    fn from(r: &AttackReport) -> Self {
        Row {
            client_id: r.client_id,
            condition: r.condition,
            adapter_path: r.adapter_path.clone(),
            routing_accuracy: r.routing_accuracy,
            inference_accuracy: r.inference_accuracy,
            extraction_precision: r.extraction_precision,
            extraction_recall: r.extraction_recall,
            precision_undefined: r.extraction.precision_undefined,
            recall_undefined: r.extraction.recall_undefined,
            ppl: r.ppl,
        }
    }
}

/// Rows sorted by client, then condition.
pub fn rows(reports: &[AttackReport]) -> Vec<Row> {
    let mut out: Vec<Row> = reports.iter().map(Row::from).collect();
    out.sort_by_key(|r| (r.client_id, r.condition));
    out
}

/// CSV with [`COLUMNS`] as header. Floats use the shortest text that
/// parses back to the same value.
pub fn to_csv(rows: &[Row]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn from_csv(text: &str) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        bail!("unexpected table header {header:?}");
    }
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

/// Writes `tables/summary.csv` and `tables/summary.json` from the attack
/// reports and returns the rows.
pub fn emit_tables(layout: &Layout) -> Result<Vec<Row>> {
    let path = layout.attack_reports();
    if !path.exists() {
        bail!(
            "missing attack reports ({}): run the `evaluate` stage first",
            path.display()
        );
    }
    let reports: Vec<AttackReport> = read_json(&path).context("reading attack reports")?;
    let rows = rows(&reports);
    write_bytes(&layout.table_csv(), to_csv(&rows)?.as_bytes())?;
    write_json(&layout.table_json(), &rows)?;
    Ok(rows)
}
