//! Report emission: machine-readable CSV, human-readable summary tables,
//! and the line-delimited detections interchange format.

use crate::eval::{EvalReport, LabelScore, ScoredDetection};
use crate::{Error, Result};
use std::fmt::Write as _;
use std::path::Path;

/// Named rows shown before the tail of the genus table is aggregated.
pub const TABLE_TOP_N: usize = 8;

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt(s: &str, line: usize) -> Result<Option<f64>> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Ingestion(format!("report CSV line {line}: bad number {s:?}")))
}

fn parse_num(s: &str, line: usize) -> Result<f64> {
    parse_opt(s, line)?.ok_or_else(|| Error::Ingestion(format!("report CSV line {line}: missing number")))
}

/// Serialize a report to CSV. Numbers are written with full round-trip
/// precision so that [`parse_csv`] recovers the exact values.
pub fn emit_csv(report: &EvalReport) -> String {
    let mut out = String::from("section,label,ap,instance_pct,support\n");
    for (section, rows) in [("genus", &report.genus_rows), ("class", &report.class_rows)] {
        for r in rows {
            let _ = writeln!(out, "{section},{},{},{},{}", r.label, fmt_opt(r.ap), r.instance_pct, r.support);
        }
    }
    let _ = writeln!(out, "summary,map_genus,{},,", report.genus_map);
    let _ = writeln!(out, "summary,map_class,{},,", report.class_map);
    let _ = writeln!(out, "summary,aca_genus,{},,", fmt_opt(report.genus_aca));
    let _ = writeln!(out, "summary,aca_class,{},,", fmt_opt(report.class_aca));
    out
}

/// Parse a CSV produced by [`emit_csv`].
pub fn parse_csv(text: &str) -> Result<EvalReport> {
    let mut genus_rows = Vec::new();
    let mut class_rows = Vec::new();
    let mut map_genus = None;
    let mut map_class = None;
    let mut aca_genus = None;
    let mut aca_class = None;
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "section,label,ap,instance_pct,support" {
                return Err(Error::Ingestion(format!("report CSV line 1: unexpected header {line:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let n = i + 1;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Ingestion(format!("report CSV line {n}: expected 5 fields, found {}", fields.len())));
        }
        match fields[0] {
            "genus" | "class" => {
                let row = LabelScore {
                    label: fields[1].to_owned(),
                    ap: parse_opt(fields[2], n)?,
                    instance_pct: parse_num(fields[3], n)?,
                    support: fields[4]
                        .parse()
                        .map_err(|_| Error::Ingestion(format!("report CSV line {n}: bad count {:?}", fields[4])))?,
                };
                if fields[0] == "genus" {
                    genus_rows.push(row);
                } else {
                    class_rows.push(row);
                }
            }
            "summary" => match fields[1] {
                "map_genus" => map_genus = Some(parse_num(fields[2], n)?),
                "map_class" => map_class = Some(parse_num(fields[2], n)?),
                "aca_genus" => aca_genus = Some(parse_opt(fields[2], n)?),
                "aca_class" => aca_class = Some(parse_opt(fields[2], n)?),
                other => return Err(Error::Ingestion(format!("report CSV line {n}: unknown summary key {other:?}"))),
            },
            other => return Err(Error::Ingestion(format!("report CSV line {n}: unknown section {other:?}"))),
        }
    }
    Ok(EvalReport {
        genus_rows,
        genus_map: map_genus.ok_or_else(|| Error::Ingestion("report CSV: missing map_genus".into()))?,
        class_rows,
        class_map: map_class.ok_or_else(|| Error::Ingestion("report CSV: missing map_class".into()))?,
        genus_aca: aca_genus.ok_or_else(|| Error::Ingestion("report CSV: missing aca_genus".into()))?,
        class_aca: aca_class.ok_or_else(|| Error::Ingestion("report CSV: missing aca_class".into()))?,
    })
}

fn sorted_rows(rows: &[LabelScore]) -> Vec<LabelScore> {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| {
        b.instance_pct
            .partial_cmp(&a.instance_pct)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.label.cmp(&b.label))
    });
    rows
}

fn ap_cell(ap: Option<f64>) -> String {
    ap.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

fn table(title: &str, rows: &[LabelScore], map: f64, top_n: usize) -> String {
    let rows = sorted_rows(rows);
    let mut out = String::new();
    let _ = writeln!(out, "{title}");
    let _ = writeln!(out, "  {:<28} {:>10} {:>9}", "label", "instances", "AP@50");
    let mut emit = |label: &str, pct: f64, ap: String| {
        let _ = writeln!(out, "  {label:<28} {:>9.1}% {ap:>9}", pct);
    };
    let (head, tail) = rows.split_at(rows.len().min(top_n));
    for r in head {
        emit(&r.label, r.instance_pct, ap_cell(r.ap));
    }
    if !tail.is_empty() {
        let pct: f64 = tail.iter().map(|r| r.instance_pct).sum();
        let aps: Vec<f64> = tail.iter().filter_map(|r| r.ap).collect();
        let ap = if aps.is_empty() { None } else { Some(aps.iter().sum::<f64>() / aps.len() as f64) };
        emit(&format!("remaining {} labels", tail.len()), pct, ap_cell(ap));
    }
    let total_pct: f64 = rows.iter().map(|r| r.instance_pct).sum();
    emit("Total", total_pct, format!("{map:.4}"));
    out
}

fn aca_line(name: &str, v: Option<f64>) -> String {
    match v {
        Some(v) => format!("  ACA ({name}): {v:.4}\n"),
        None => format!("  ACA ({name}): not available\n"),
    }
}

/// Render the human-readable summary: genus table (most frequent labels
/// first, tail aggregated), class table, and the ACA lines.
pub fn format_tables(report: &EvalReport) -> String {
    let mut out = table("Genus-level detection (IoU 0.50)", &report.genus_rows, report.genus_map, TABLE_TOP_N);
    out.push('\n');
    out.push_str(&table("Class-level detection (IoU 0.50)", &report.class_rows, report.class_map, TABLE_TOP_N));
    out.push('\n');
    out.push_str(&aca_line("genus", report.genus_aca));
    out.push_str(&aca_line("class", report.class_aca));
    out
}

/// Write CSV and table artifacts next to each other under `dir`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("report.csv"), emit_csv(report))?;
    std::fs::write(dir.join("report.txt"), format_tables(report))?;
    Ok(())
}

/// Write detections as line-delimited JSON records
/// (image id, corner-coordinate box, genus label, confidence).
pub fn write_detections(dets: &[ScoredDetection], path: &Path) -> Result<()> {
    let mut out = String::new();
    for d in dets {
        let _ = writeln!(out, "{}", serde_json::to_string(d).expect("detection record serializes"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a line-delimited detections file written by [`write_detections`].
pub fn read_detections(path: &Path) -> Result<Vec<ScoredDetection>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Ingestion(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;

    fn row(label: &str, ap: Option<f64>, pct: f64, support: u64) -> LabelScore {
        LabelScore { label: label.into(), ap, instance_pct: pct, support }
    }

    fn awkward_report() -> EvalReport {
        EvalReport {
            genus_rows: vec![
                row("Cymbella", Some(1.0 / 3.0), 100.0 * 47.0 / 193.0, 47),
                row("Navicula", Some(0.1 + 0.2), 100.0 * 146.0 / 193.0, 146),
                row("Ghost", None, 0.0, 0),
            ],
            genus_map: 2.0f64.sqrt() / 2.0,
            class_rows: vec![row("Bacillariophyta", Some(0.75), 100.0, 193)],
            class_map: 0.75,
            genus_aca: Some(5.0 / 7.0),
            class_aca: None,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let report = awkward_report();
        let csv = emit_csv(&report);
        let back = parse_csv(&csv).unwrap();
        assert_eq!(back, report);
        // and stable across a second pass
        assert_eq!(emit_csv(&back), csv);
    }

    #[test]
    fn csv_rejects_malformed_input() {
        assert!(matches!(parse_csv("nope\n"), Err(Error::Ingestion(_))));
        let mut csv = emit_csv(&awkward_report());
        csv.push_str("genus,Broken,xyz,1.0,2\n");
        let err = parse_csv(&csv).unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn table_orders_by_frequency_and_aggregates_tail() {
        let rows: Vec<LabelScore> =
            (0..11).map(|i| row(&format!("G{i:02}"), Some(0.5), 20.0 - i as f64, 10)).collect();
        let text = table("t", &rows, 0.5, 8);
        let lines: Vec<&str> = text.lines().collect();
        // title + header + 8 named + aggregate + total
        assert_eq!(lines.len(), 12);
        assert!(lines[2].contains("G00"));
        assert!(lines[9].contains("G07"));
        assert!(lines[10].contains("remaining 3 labels"));
        assert!(lines[11].contains("Total"));
        // descending frequency order
        for w in 2..9 {
            let a = lines[w].split_whitespace().nth(1).unwrap();
            let b = lines[w + 1].split_whitespace().nth(1).unwrap();
            let a: f64 = a.trim_end_matches('%').parse().unwrap();
            let b: f64 = b.trim_end_matches('%').parse().unwrap();
            assert!(a >= b);
        }
    }

    #[test]
    fn small_table_has_no_aggregate_row() {
        let rows = vec![row("A", Some(0.5), 60.0, 6), row("B", Some(0.25), 40.0, 4)];
        let text = table("t", &rows, 0.375, 8);
        assert!(!text.contains("remaining"));
        assert!(text.contains("Total"));
        assert!(text.contains("100.0%"));
    }

    #[test]
    fn detections_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detections.jsonl");
        let dets = vec![ScoredDetection {
            image_id: "img00001".into(),
            bbox: BoundingBox::new(1.25, 2.5, 30.0, 44.0).unwrap(),
            label: "Navicula".into(),
            score: 0.875,
        }];
        write_detections(&dets, &path).unwrap();
        let back = read_detections(&path).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].image_id, "img00001");
        assert_eq!(back[0].bbox, dets[0].bbox);
        assert_eq!(back[0].score, 0.875);
        std::fs::write(&path, "{not json\n").unwrap();
        let err = read_detections(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
