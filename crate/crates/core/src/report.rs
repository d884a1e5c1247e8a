//! Result tables: CSV for machines, aligned text for people.

use std::fmt::Write as _;

use crate::losses::ReportScale;

/// One row of reconstruction metrics. Chamfer values are per-shape means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub config: String,
    pub split: String,
    pub class: String,
    pub count: usize,
    pub cd: f64,
    pub cd_squared: f64,
    pub params: usize,
    pub epoch: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub const HEADER: &'static str = "config,split,class,count,cd,cd_x1e3,cd_x1e4,cd_squared,params,epoch";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.config,
                r.split,
                r.class,
                r.count,
                r.cd,
                r.cd * ReportScale::Thousand.factor(),
                r.cd * ReportScale::TenThousand.factor(),
                r.cd_squared,
                r.params,
                r.epoch
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let header = ["config", "split", "class", "n", "CD", "CDx1e3", "CDx1e4", "CD^2", "params", "epoch"];
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.config.clone(),
                    r.split.clone(),
                    r.class.clone(),
                    r.count.to_string(),
                    format!("{:.6}", r.cd),
                    format!("{:.3}", r.cd * 1e3),
                    format!("{:.2}", r.cd * 1e4),
                    format!("{:.3e}", r.cd_squared),
                    r.params.to_string(),
                    r.epoch.to_string(),
                ]
            })
            .collect();
        align(&header.map(String::from), &body)
    }
}

/// Renders rows with every column padded to its widest cell. The first
/// column is left-aligned, the rest right-aligned.
pub fn align(header: &[String], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len().saturating_sub(1))));
    out.push('\n');
    for row in body {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_columns() {
        let t = MetricsTable {
            rows: vec![MetricsRow {
                config: "psg".into(),
                split: "test".into(),
                class: "all".into(),
                count: 3,
                cd: 0.0125,
                cd_squared: 0.0002,
                params: 10,
                epoch: 4,
            }],
        };
        let csv = t.to_csv();
        let line = csv.lines().nth(1).unwrap();
        assert_eq!(line, "psg,test,all,3,0.0125,12.5,125,0.0002,10,4");
        assert_eq!(t.to_text().lines().count(), 3);
    }
}
