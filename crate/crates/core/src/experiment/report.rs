use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::runner::{read_summary, write_file, write_json, Stat};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub dir: PathBuf,
    pub seeds: usize,
    pub acc: Stat,
    pub fgt: Stat,
    pub acc_new: Stat,
    pub acc_old: Stat,
}

/// Side-by-side comparison of completed runs, rows in input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

const HEADER: [&str; 6] = ["method", "seeds", "Acc", "Fgt", "Acc_new", "Acc_old"];

impl ReportRow {
    fn cells(&self) -> [String; 6] {
        [
            self.label.clone(),
            self.seeds.to_string(),
            self.acc.to_string(),
            self.fgt.to_string(),
            self.acc_new.to_string(),
            self.acc_old.to_string(),
        ]
    }
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.cells()).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!("| {} |\n", HEADER.join(" | "));
        out += &format!("|{}\n", "---|".repeat(HEADER.len()));
        for row in &self.rows {
            out += &format!("| {} |\n", row.cells().join(" | "));
        }
        out
    }

    /// Writes `<stem>.csv`, `<stem>.md` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_file(&dir.join(format!("{stem}.csv")), self.to_csv())?;
        write_file(&dir.join(format!("{stem}.md")), self.to_markdown())?;
        write_json(&dir.join(format!("{stem}.json")), self)
    }
}

/// Builds a table from run directories. Any incomplete directory fails the
/// whole report.
pub fn report(dirs: &[PathBuf]) -> Result<Report> {
    let rows = dirs
        .iter()
        .map(|dir| {
            let s = read_summary(dir)?;
            Ok(ReportRow {
                label: s.label(),
                dir: dir.clone(),
                seeds: s.seeds.len(),
                acc: s.acc,
                fgt: s.fgt,
                acc_new: s.acc_new,
                acc_old: s.acc_old,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Report { rows })
}
