//! Token and dollar estimates for producing preference data with a hosted
//! model: candidate generation and single-judge annotation.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

/// Bundled per-dataset rows with the published generation figures.
pub const GENERATION_ROWS_CSV: &str = include_str!("../data/table3.csv");
/// Bundled per-dataset rows with the published annotation figures.
pub const ANNOTATION_ROWS_CSV: &str = include_str!("../data/table4.csv");

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct DatasetCostRow {
    pub name: String,
    #[serde(rename = "N")]
    pub n: u64,
    pub prompt_len: f64,
    pub pref_len: f64,
    pub rej_len: f64,
}

impl DatasetCostRow {
    pub fn validate(&self) -> Result<()> {
        for (what, v) in [("prompt_len", self.prompt_len), ("pref_len", self.pref_len), ("rej_len", self.rej_len)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::format(format!("{}: {what} must be >= 0, got {v}", self.name)));
            }
        }
        Ok(())
    }
}

/// Prices in dollars per million tokens plus fixed per-call overheads.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriceSpec {
    pub p_in: f64,
    pub p_out: f64,
    pub o_in_gen: f64,
    pub o_in_judge: f64,
    pub o_out_judge: f64,
}

impl PriceSpec {
    /// Listed per-million text rates of the reference model.
    pub fn stated() -> Self {
        PriceSpec {
            p_in: 2.50,
            p_out: 10.00,
            o_in_gen: 0.0,
            o_in_judge: 40.0,
            o_out_judge: 40.0,
        }
    }

    /// Rates that reproduce the published generation dollar column.
    pub fn table3_effective() -> Self {
        PriceSpec {
            p_in: 2.00,
            p_out: 8.00,
            ..Self::stated()
        }
    }

    /// Parses `stated`, `table3-effective` or `custom:P_in,P_out`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stated" => Ok(Self::stated()),
            "table3-effective" => Ok(Self::table3_effective()),
            _ => {
                let body = s.strip_prefix("custom:").ok_or_else(|| {
                    Error::config(format!("unknown price preset {s:?}; expected stated, table3-effective or custom:P_in,P_out"))
                })?;
                let (a, b) = body
                    .split_once(',')
                    .ok_or_else(|| Error::config(format!("custom prices need two values, got {body:?}")))?;
                let parse = |t: &str| {
                    t.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| *v >= 0.0 && v.is_finite())
                        .ok_or_else(|| Error::config(format!("bad price {t:?}")))
                };
                Ok(PriceSpec {
                    p_in: parse(a)?,
                    p_out: parse(b)?,
                    ..Self::stated()
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostReport {
    pub t_in: f64,
    pub t_out: f64,
    pub cost: f64,
    pub cost_per_pair: f64,
}

impl CostReport {
    fn new(n: u64, t_in: f64, t_out: f64, prices: &PriceSpec) -> Self {
        let cost = t_in / 1e6 * prices.p_in + t_out / 1e6 * prices.p_out;
        CostReport {
            t_in,
            t_out,
            cost,
            cost_per_pair: if n > 0 { cost / n as f64 } else { 0.0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostMode {
    Generation,
    Annotation,
}

impl CostMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "generation" => Ok(CostMode::Generation),
            "annotation" => Ok(CostMode::Annotation),
            _ => Err(Error::config(format!("unknown cost mode {s:?}; expected generation or annotation"))),
        }
    }
}

pub fn generation_cost(row: &DatasetCostRow, prices: &PriceSpec) -> CostReport {
    let n = row.n as f64;
    let t_cand = row.pref_len + row.rej_len;
    CostReport::new(row.n, n * (row.prompt_len + prices.o_in_gen), n * t_cand, prices)
}

pub fn annotation_cost(row: &DatasetCostRow, prices: &PriceSpec) -> CostReport {
    let n = row.n as f64;
    let t_content = row.prompt_len + row.pref_len + row.rej_len;
    CostReport::new(row.n, n * (t_content + prices.o_in_judge), n * prices.o_out_judge, prices)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostTable {
    pub mode: CostMode,
    pub prices: PriceSpec,
    pub rows: Vec<(DatasetCostRow, CostReport)>,
    pub total_cost: f64,
}

pub fn cost_table(rows: &[DatasetCostRow], prices: &PriceSpec, mode: CostMode) -> Result<CostTable> {
    if rows.is_empty() {
        return Err(Error::domain("cost table needs at least one row"));
    }
    let f = match mode {
        CostMode::Generation => generation_cost,
        CostMode::Annotation => annotation_cost,
    };
    let rows: Vec<_> = rows.iter().map(|r| (r.clone(), f(r, prices))).collect();
    let total_cost = rows.iter().map(|(_, c)| c.cost).sum();
    Ok(CostTable {
        mode,
        prices: *prices,
        rows,
        total_cost,
    })
}

impl CostTable {
    /// Presentation CSV: tokens in millions to 2 decimals, dollars to cents,
    /// cost per pair to 5 decimals, then a `TOTAL` row.
    pub fn to_csv(&self) -> String {
        let (t_col, o_in, o_out) = match self.mode {
            CostMode::Generation => ("t_cand", self.prices.o_in_gen, None),
            CostMode::Annotation => ("t_content", self.prices.o_in_judge, Some(self.prices.o_out_judge)),
        };
        let mut out = format!(
            "name,N,prompt_len,pref_len,rej_len,{t_col},overhead_in,overhead_out,t_in_m,t_out_m,cost,cost_per_pair\n"
        );
        for (r, c) in &self.rows {
            let t = match self.mode {
                CostMode::Generation => r.pref_len + r.rej_len,
                CostMode::Annotation => r.prompt_len + r.pref_len + r.rej_len,
            };
            writeln!(
                out,
                "{},{},{},{},{},{:.1},{},{},{:.2},{:.2},{:.2},{:.5}",
                r.name,
                r.n,
                r.prompt_len,
                r.pref_len,
                r.rej_len,
                t,
                o_in,
                o_out.map_or_else(|| "--".to_string(), |v| v.to_string()),
                c.t_in / 1e6,
                c.t_out / 1e6,
                c.cost,
                c.cost_per_pair
            )
            .unwrap();
        }
        writeln!(out, "TOTAL,,,,,,,,,,{:.2},", self.total_cost).unwrap();
        out
    }
}

/// Reads `name,N,prompt_len,pref_len,rej_len` rows; extra columns are ignored.
pub fn parse_rows(content: &str) -> Result<Vec<DatasetCostRow>> {
    let mut reader = csv::Reader::from_reader(content.as_bytes());
    let mut rows = Vec::new();
    for (i, rec) in reader.deserialize::<DatasetCostRow>().enumerate() {
        let row = rec.map_err(|e| Error::format(format!("cost row {}: {e}", i + 1)))?;
        row.validate()?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_rows(path: &Path) -> Result<Vec<DatasetCostRow>> {
    parse_rows(&std::fs::read_to_string(path)?)
}

/// Published figures carried alongside bundled rows.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct PublishedFigures {
    pub name: String,
    pub t_in_m: f64,
    pub t_out_m: f64,
    pub cost: f64,
    pub cost_per_pair: f64,
}

pub fn parse_published(content: &str) -> Result<Vec<PublishedFigures>> {
    csv::Reader::from_reader(content.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hh() -> DatasetCostRow {
        DatasetCostRow {
            name: "HH-RLHF".into(),
            n: 115_396,
            prompt_len: 160.4,
            pref_len: 82.2,
            rej_len: 73.6,
        }
    }

    #[test]
    fn generation_examples() {
        let c = generation_cost(&hh(), &PriceSpec::stated());
        assert!((c.t_in / 1e6 - 18.51).abs() < 0.005);
        assert!((c.t_out / 1e6 - 17.98).abs() < 0.005);
        // 18.5095184 * 2.5 + 17.9786968 * 10
        assert!((c.cost - 226.060_764).abs() < 1e-6);
        let e = generation_cost(&hh(), &PriceSpec::table3_effective());
        assert!((e.cost - 180.848_611_2).abs() < 1e-6);
        assert!((e.cost - 0.8 * c.cost).abs() < 1e-9);
        let zero = generation_cost(&DatasetCostRow { n: 0, ..hh() }, &PriceSpec::stated());
        assert_eq!((zero.t_in, zero.t_out, zero.cost, zero.cost_per_pair), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn annotation_examples() {
        let c = annotation_cost(&hh(), &PriceSpec::stated());
        assert!((c.t_in / 1e6 - 41.10).abs() < 0.005);
        assert!((c.t_out / 1e6 - 4.62).abs() < 0.005);
        assert!((c.cost - 148.92).abs() < 0.005);
        let pku = DatasetCostRow {
            name: "PKU".into(),
            n: 26_874,
            prompt_len: 21.5,
            pref_len: 70.4,
            rej_len: 74.6,
        };
        // 26874 * 206.5 * 2.5e-6 + 26874 * 40 * 1e-5
        assert!((annotation_cost(&pku, &PriceSpec::stated()).cost - 24.623_302_5).abs() < 1e-6);
        let free = PriceSpec {
            o_in_judge: 0.0,
            o_out_judge: 0.0,
            ..PriceSpec::stated()
        };
        let empty = DatasetCostRow {
            prompt_len: 0.0,
            pref_len: 0.0,
            rej_len: 0.0,
            ..hh()
        };
        assert_eq!(annotation_cost(&empty, &free).cost, 0.0);
    }

    #[test]
    fn cost_is_linear_and_decomposes() {
        let p = PriceSpec::stated();
        let c = annotation_cost(&hh(), &p);
        let p2 = PriceSpec { p_out: 2.0 * p.p_out, ..p };
        let c2 = annotation_cost(&hh(), &p2);
        let out_part = c.t_out / 1e6 * p.p_out;
        assert!((c2.cost - (c.cost + out_part)).abs() < 1e-9);
        let d = annotation_cost(&DatasetCostRow { n: 2 * hh().n, ..hh() }, &p);
        assert!((d.cost - 2.0 * c.cost).abs() < 1e-9);
        assert!((c.cost_per_pair - c.cost / hh().n as f64).abs() < 1e-15);
    }

    #[test]
    fn bundled_rows_and_totals() {
        let rows = parse_rows(ANNOTATION_ROWS_CSV).unwrap();
        assert_eq!(rows.len(), 10);
        assert_eq!(parse_rows(GENERATION_ROWS_CSV).unwrap(), rows);
        let t = cost_table(&rows, &PriceSpec::stated(), CostMode::Annotation).unwrap();
        assert!((t.total_cost - 1979.10).abs() < 0.25);
        let g = cost_table(&rows, &PriceSpec::table3_effective(), CostMode::Generation).unwrap();
        assert!((g.total_cost - 3700.22).abs() < 0.5);
        let csv = t.to_csv();
        assert!(csv.lines().nth(1).unwrap().starts_with("HH-RLHF,115396,160.4,82.2,73.6,316.2,40,40,41.10,4.62,148.92,0.00129"));
        assert!(csv.trim_end().ends_with("TOTAL,,,,,,,,,,1979.10,"));
        let single = cost_table(&[DatasetCostRow { n: 0, ..hh() }], &PriceSpec::stated(), CostMode::Generation).unwrap();
        assert_eq!(single.total_cost, 0.0);
        assert!(cost_table(&[], &PriceSpec::stated(), CostMode::Generation).is_err());
    }

    #[test]
    fn price_presets() {
        assert_eq!(PriceSpec::parse("stated").unwrap(), PriceSpec::stated());
        assert_eq!(PriceSpec::parse("table3-effective").unwrap().p_out, 8.0);
        let c = PriceSpec::parse("custom:1.5, 3").unwrap();
        assert_eq!((c.p_in, c.p_out), (1.5, 3.0));
        assert!(PriceSpec::parse("cheap").is_err());
        assert!(PriceSpec::parse("custom:1").is_err());
        assert!(PriceSpec::parse("custom:-1,2").is_err());
    }

    #[test]
    fn bad_rows_rejected() {
        assert!(parse_rows("name,N,prompt_len,pref_len,rej_len\nx,-3,1,1,1\n").is_err());
        assert!(parse_rows("name,N,prompt_len,pref_len,rej_len\nx,3,-1,1,1\n").is_err());
    }
}
