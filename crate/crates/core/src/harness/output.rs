use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const THROUGHPUT_FILE: &str = "throughput.csv";
pub const FAIRNESS_FILE: &str = "fairness.csv";
pub const METADATA_FILE: &str = "metadata.txt";

pub const THROUGHPUT_HEADER: &str = "n,rep,targeted_bps,background_bps,throughput_ratio";
pub const FAIRNESS_HEADER: &str = "n,rep,jfi_per_flow,targeted_share,background_share";

/// Rates are in bits per second; the ratio is targeted goodput over link
/// capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub n: usize,
    pub rep: u32,
    pub targeted_bps: f64,
    pub background_bps: f64,
    pub throughput_ratio: f64,
}

/// Shares are fractions of the aggregate goodput of all flows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessRow {
    pub n: usize,
    pub rep: u32,
    pub jfi_per_flow: f64,
    pub targeted_share: f64,
    pub background_share: f64,
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path, header: &str) -> Result<Vec<T>, csv::Error> {
    let mut r = csv::Reader::from_path(path)?;
    let found: Vec<&str> = r.headers()?.iter().collect();
    if found.join(",") != header {
        return Err(csv::Error::from(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: expected header `{header}`, found `{}`", path.display(), found.join(",")),
        )));
    }
    r.deserialize().collect()
}

pub fn write_throughput(path: &Path, rows: &[ThroughputRow]) -> Result<(), csv::Error> {
    write_rows(path, rows)
}

pub fn write_fairness(path: &Path, rows: &[FairnessRow]) -> Result<(), csv::Error> {
    write_rows(path, rows)
}

pub fn read_throughput(path: &Path) -> Result<Vec<ThroughputRow>, csv::Error> {
    read_rows(path, THROUGHPUT_HEADER)
}

pub fn read_fairness(path: &Path) -> Result<Vec<FairnessRow>, csv::Error> {
    read_rows(path, FAIRNESS_HEADER)
}

/// Means over repetitions for one parallelism level.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub n: usize,
    pub repetitions: usize,
    pub targeted_bps: f64,
    pub background_bps: f64,
    pub throughput_ratio: f64,
    pub jfi_per_flow: Option<f64>,
    pub targeted_share: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn summarize(throughput: &[ThroughputRow], fairness: &[FairnessRow]) -> Summary {
    let mut by_n: BTreeMap<usize, (Vec<&ThroughputRow>, Vec<&FairnessRow>)> = BTreeMap::new();
    for row in throughput {
        by_n.entry(row.n).or_default().0.push(row);
    }
    for row in fairness {
        by_n.entry(row.n).or_default().1.push(row);
    }
    let rows = by_n
        .into_iter()
        .filter(|(_, (t, _))| !t.is_empty())
        .map(|(n, (t, f))| {
            let col = |get: fn(&ThroughputRow) -> f64| mean(&t.iter().map(|r| get(r)).collect::<Vec<_>>());
            let fcol = |get: fn(&FairnessRow) -> f64| {
                (!f.is_empty()).then(|| mean(&f.iter().map(|r| get(r)).collect::<Vec<_>>()))
            };
            SummaryRow {
                n,
                repetitions: t.len(),
                targeted_bps: col(|r| r.targeted_bps),
                background_bps: col(|r| r.background_bps),
                throughput_ratio: col(|r| r.throughput_ratio),
                jfi_per_flow: fcol(|r| r.jfi_per_flow),
                targeted_share: fcol(|r| r.targeted_share),
            }
        })
        .collect();
    Summary { rows }
}

/// Reads both CSVs from an experiment directory and summarizes them. The
/// fairness file is optional.
pub fn summarize_dir(dir: &Path) -> Result<Summary, csv::Error> {
    let throughput = read_throughput(&dir.join(THROUGHPUT_FILE))?;
    let fairness_path = dir.join(FAIRNESS_FILE);
    let fairness = if fairness_path.exists() { read_fairness(&fairness_path)? } else { Vec::new() };
    Ok(summarize(&throughput, &fairness))
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>4} {:>4} {:>14} {:>14} {:>8} {:>7} {:>8}",
            "n", "reps", "targeted_bps", "background_bps", "ratio", "jfi", "t_share"
        )?;
        let opt = |x: Option<f64>| x.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        for r in &self.rows {
            writeln!(
                f,
                "{:>4} {:>4} {:>14.0} {:>14.0} {:>8.4} {:>7} {:>8}",
                r.n,
                r.repetitions,
                r.targeted_bps,
                r.background_bps,
                r.throughput_ratio,
                opt(r.jfi_per_flow),
                opt(r.targeted_share)
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: usize, rep: u32, bps: f64) -> ThroughputRow {
        ThroughputRow { n, rep, targeted_bps: bps, background_bps: 1.0, throughput_ratio: bps / 10.0 }
    }

    #[test]
    fn headers_are_fixed() {
        let dir = tempfile::tempdir().unwrap();
        let tp = dir.path().join(THROUGHPUT_FILE);
        let fp = dir.path().join(FAIRNESS_FILE);
        write_throughput(&tp, &[t(1, 0, 5.0)]).unwrap();
        write_fairness(
            &fp,
            &[FairnessRow { n: 1, rep: 0, jfi_per_flow: 1.0, targeted_share: 0.5, background_share: 0.5 }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&tp).unwrap();
        assert_eq!(text.lines().next(), Some(THROUGHPUT_HEADER));
        assert_eq!(text, format!("{THROUGHPUT_HEADER}\n1,0,5.0,1.0,0.5\n"));
        let text = std::fs::read_to_string(&fp).unwrap();
        assert_eq!(text.lines().next(), Some(FAIRNESS_HEADER));
    }

    #[test]
    fn rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(THROUGHPUT_FILE);
        let rows = vec![t(1, 0, 1234.5678), t(2, 0, 0.1 + 0.2)];
        write_throughput(&path, &rows).unwrap();
        assert_eq!(read_throughput(&path).unwrap(), rows);
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        std::fs::write(&path, "n,rep,other\n1,0,2\n").unwrap();
        assert!(read_throughput(&path).is_err());
    }

    #[test]
    fn summary_averages_repetitions() {
        let s = summarize(&[t(2, 0, 4.0), t(1, 0, 1.0), t(2, 1, 6.0)], &[]);
        assert_eq!(s.rows.len(), 2);
        assert_eq!(s.rows[0].n, 1);
        assert_eq!(s.rows[1].repetitions, 2);
        assert_eq!(s.rows[1].targeted_bps, 5.0);
        assert_eq!(s.rows[1].jfi_per_flow, None);
        assert!(s.to_string().lines().count() == 3);
    }
}
