//! Tabular outputs: rate–accuracy points, per-sample latency and scenario
//! comparisons.
//!
//! Every CSV starts with a `#schema=<name>.v<version>` line followed by a
//! header row. Readers reject a missing or different schema line and any
//! header that does not match the expected columns exactly.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::split_runtime::{ScenarioRow, SplitOutcome};
use crate::training::RdPoint;

pub const RD_SCHEMA: &str = "esplit.rd.v1";
pub const LATENCY_SCHEMA: &str = "esplit.latency.v1";
pub const SCENARIO_SCHEMA: &str = "esplit.scenario.v1";

pub const RD_COLUMNS: [&str; 7] =
    ["run_id", "beta", "bytes_per_sample", "bits_per_pixel", "accuracy", "params_mobile", "params_server"];

/// One row of the rate–accuracy CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RdRow {
    pub run_id: String,
    pub beta: Option<f64>,
    pub bytes_per_sample: f64,
    pub bits_per_pixel: f64,
    pub accuracy: f64,
    pub params_mobile: usize,
    pub params_server: usize,
}

impl From<&RdPoint> for RdRow {
    fn from(p: &RdPoint) -> Self {
        Self {
            run_id: p.run_id.clone(),
            beta: p.beta,
            bytes_per_sample: p.bytes_per_sample,
            bits_per_pixel: p.bits_per_pixel,
            accuracy: p.accuracy,
            params_mobile: p.params_mobile,
            params_server: p.params_server,
        }
    }
}

/// One sample of a split run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub run_id: String,
    pub index: usize,
    /// Empty when the frame was dropped.
    pub prediction: Option<usize>,
    pub payload_bytes: usize,
    pub encode_s: f64,
    pub comm_s: f64,
    pub server_s: f64,
    pub total_s: f64,
}

impl LatencyRow {
    pub fn from_outcome(run_id: &str, o: &SplitOutcome) -> Self {
        Self {
            run_id: run_id.to_string(),
            index: o.index,
            prediction: o.prediction,
            payload_bytes: o.report.payload_bytes,
            encode_s: o.report.encode_s,
            comm_s: o.report.comm_s,
            server_s: o.report.server_s,
            total_s: o.report.total_s,
        }
    }
}

fn columns<T: Serialize>(sample: &T) -> Result<Vec<String>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.serialize(sample).map_err(Error::from)?;
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    let text = String::from_utf8(bytes).expect("csv output is utf-8");
    Ok(text.lines().next().unwrap_or("").split(',').map(str::to_string).collect())
}

/// Writes `rows` under `schema`. An empty table still gets its header.
pub fn write_csv<T: Serialize>(out: impl Write, schema: &str, header: &[&str], rows: &[T]) -> Result<()> {
    let mut out = out;
    writeln!(out, "#schema={schema}")?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header).map_err(Error::from)?;
    for r in rows {
        w.serialize(r).map_err(Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table written by [`write_csv`], checking schema and header.
pub fn read_csv<T: DeserializeOwned>(input: impl Read, schema: &str, header: &[&str]) -> Result<Vec<T>> {
    let mut input = BufReader::new(input);
    let mut first = String::new();
    input.read_line(&mut first)?;
    let found = first.trim_end().strip_prefix("#schema=");
    if found != Some(schema) {
        return Err(Error::Csv(format!("expected schema {schema}, found {:?}", first.trim_end())));
    }
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let got: Vec<String> = r.headers().map_err(Error::from)?.iter().map(str::to_string).collect();
    if got != header {
        return Err(Error::Csv(format!("{schema}: header {got:?}, expected {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

macro_rules! table {
    ($write:ident, $read:ident, $save:ident, $load:ident, $ty:ty, $schema:expr, $sample:expr) => {
        pub fn $write(out: impl Write, rows: &[$ty]) -> Result<()> {
            let cols = columns(&$sample)?;
            let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
            write_csv(out, $schema, &cols, rows)
        }

        pub fn $read(input: impl Read) -> Result<Vec<$ty>> {
            let cols = columns(&$sample)?;
            let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
            read_csv(input, $schema, &cols)
        }

        pub fn $save(path: &Path, rows: &[$ty]) -> Result<()> {
            let mut buf = Vec::new();
            $write(&mut buf, rows)?;
            std::fs::write(path, buf)?;
            Ok(())
        }

        pub fn $load(path: &Path) -> Result<Vec<$ty>> {
            $read(std::fs::File::open(path)?)
        }
    };
}

fn rd_sample() -> RdRow {
    RdRow {
        run_id: String::new(),
        beta: None,
        bytes_per_sample: 0.0,
        bits_per_pixel: 0.0,
        accuracy: 0.0,
        params_mobile: 0,
        params_server: 0,
    }
}

fn latency_sample() -> LatencyRow {
    LatencyRow {
        run_id: String::new(),
        index: 0,
        prediction: None,
        payload_bytes: 0,
        encode_s: 0.0,
        comm_s: 0.0,
        server_s: 0.0,
        total_s: 0.0,
    }
}

fn scenario_sample() -> ScenarioRow {
    ScenarioRow {
        scenario: crate::split_runtime::Scenario::Local,
        run_id: String::new(),
        beta: None,
        mean_payload_bytes: 0.0,
        mean_encode_s: 0.0,
        mean_comm_s: 0.0,
        mean_server_s: 0.0,
        mean_total_s: 0.0,
        accuracy: 0.0,
    }
}

table!(write_rd_csv, read_rd_csv, save_rd_csv, load_rd_csv, RdRow, RD_SCHEMA, rd_sample());
table!(write_latency_csv, read_latency_csv, save_latency_csv, load_latency_csv, LatencyRow, LATENCY_SCHEMA, latency_sample());
table!(
    write_scenario_csv,
    read_scenario_csv,
    save_scenario_csv,
    load_scenario_csv,
    ScenarioRow,
    SCENARIO_SCHEMA,
    scenario_sample()
);

/// Whitespace-separated rate–accuracy data for gnuplot, one block per run
/// family (the run id up to its first `-`), blocks separated by two blank lines.
pub fn write_rd_dat(mut out: impl Write, rows: &[RdRow]) -> Result<()> {
    writeln!(out, "# bits_per_pixel accuracy bytes_per_sample beta run_id")?;
    let family = |r: &RdRow| r.run_id.split('-').next().unwrap_or("").to_string();
    let mut families: Vec<String> = rows.iter().map(family).collect();
    families.dedup();
    let mut seen = Vec::new();
    for f in families {
        if seen.contains(&f) {
            continue;
        }
        if !seen.is_empty() {
            writeln!(out, "\n")?;
        }
        writeln!(out, "# {f}")?;
        let mut block: Vec<&RdRow> = rows.iter().filter(|r| family(r) == f).collect();
        block.sort_by(|a, b| a.bits_per_pixel.total_cmp(&b.bits_per_pixel));
        for r in block {
            let beta = r.beta.map_or("NaN".to_string(), |b| b.to_string());
            writeln!(out, "{} {} {} {} {}", r.bits_per_pixel, r.accuracy, r.bytes_per_sample, beta, r.run_id)?;
        }
        seen.push(f);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<RdRow> {
        vec![
            RdRow {
                run_id: "two_stage-b0".into(),
                beta: Some(1.28e-3),
                bytes_per_sample: 294.664,
                bits_per_pixel: 2.3020625,
                accuracy: 0.98,
                params_mobile: 5632,
                params_server: 9122,
            },
            RdRow { run_id: "crbq".into(), beta: None, ..rd_sample() },
        ]
    }

    #[test]
    fn rd_header_is_the_documented_column_list() {
        let mut buf = Vec::new();
        write_rd_csv(&mut buf, &[]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, format!("#schema={RD_SCHEMA}\n{}\n", RD_COLUMNS.join(",")));
    }

    #[test]
    fn round_trip_is_exact() {
        let mut buf = Vec::new();
        write_rd_csv(&mut buf, &rows()).unwrap();
        assert_eq!(read_rd_csv(buf.as_slice()).unwrap(), rows());
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("two_stage-b0,0.00128,294.664,2.3020625,0.98,5632,9122"));
        assert!(text.contains("crbq,,0.0,0.0,0.0,0,0"));
    }

    #[test]
    fn schema_and_header_are_enforced() {
        let mut buf = Vec::new();
        write_rd_csv(&mut buf, &rows()).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let wrong_schema = text.replace("esplit.rd.v1", "esplit.rd.v2");
        assert!(matches!(read_rd_csv(wrong_schema.as_bytes()), Err(Error::Csv(_))));
        let no_schema = text.lines().skip(1).collect::<Vec<_>>().join("\n");
        assert!(read_rd_csv(no_schema.as_bytes()).is_err());
        let wrong_header = text.replace("bits_per_pixel", "bpp");
        assert!(matches!(read_rd_csv(wrong_header.as_bytes()), Err(Error::Csv(_))));
        assert!(read_latency_csv(text.as_bytes()).is_err());
    }

    #[test]
    fn latency_and_scenario_round_trip() {
        let l = vec![LatencyRow { run_id: "x".into(), index: 3, prediction: Some(2), total_s: 0.5, ..latency_sample() }];
        let mut buf = Vec::new();
        write_latency_csv(&mut buf, &l).unwrap();
        assert_eq!(read_latency_csv(buf.as_slice()).unwrap(), l);
        let s = vec![ScenarioRow { run_id: "teacher".into(), accuracy: 0.5, ..scenario_sample() }];
        let mut buf = Vec::new();
        write_scenario_csv(&mut buf, &s).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().contains("\nlocal,teacher,"));
        assert_eq!(read_scenario_csv(buf.as_slice()).unwrap(), s);
    }

    #[test]
    fn dat_groups_by_family_sorted_by_rate() {
        let mut r = rows();
        r.push(RdRow { run_id: "two_stage-b1".into(), bits_per_pixel: 1.0, beta: Some(5e-3), ..rd_sample() });
        let mut buf = Vec::new();
        write_rd_dat(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1], "# two_stage");
        assert!(lines[2].starts_with("1 0 0 0.005 two_stage-b1"));
        assert!(lines[3].starts_with("2.3020625 0.98"));
        assert!(text.contains("\n\n\n# crbq\n"));
    }
}
