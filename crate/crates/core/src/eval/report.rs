//! Plain-text tables and CSV plot data.

use crate::stream::TraceRecord;

/// Left-aligned columns padded to the widest cell.
pub fn format_table(headers: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = headers.iter().map(|h| h.len()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let padded: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        padded.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(headers.to_vec());
    out += &line(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect());
    for row in rows {
        out += &line(row.iter().map(String::as_str).collect());
    }
    out
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

/// `iteration,auroc,aupr,disc_accuracy,n_history,threshold`; missing values
/// are empty cells.
pub fn trace_csv(trace: &[TraceRecord]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut out = String::from("iteration,auroc,aupr,disc_accuracy,n_history,threshold\n");
    for r in trace {
        out += &format!("{},{},{},{},{},{}\n", r.iteration, cell(r.auroc), cell(r.aupr), cell(r.disc_accuracy), r.n_history, r.threshold);
    }
    out
}
