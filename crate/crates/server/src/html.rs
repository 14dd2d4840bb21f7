//! Static dashboard markup for a computed report.

use std::fmt::Write as _;

use lila_core::report::ComputedReport;
use lila_core::ReproStatus;

/// Minimal HTML escaping for text and double-quoted attribute values.
pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

const STYLE: &str = "\
body{font-family:system-ui,sans-serif;margin:2rem;color:#222}\
table{border-collapse:collapse;margin:1rem 0}\
th,td{border:1px solid #ccc;padding:.25rem .6rem;text-align:left}\
td.num{text-align:right}\
.reproducible{background:#d9f2d9}.nonreproducible{background:#f7d4d4}\
.unconfirmed{background:#fff3c4}.unknown{background:#eee}\
code{font-size:.9em}";

pub fn render_report(report: &ComputedReport) -> String {
    let mut h = String::new();
    let name = escape(&report.name);
    let _ = write!(
        h,
        "<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n\
         <title>{name} - reproducibility report</title>\n<style>{STYLE}</style>\n</head>\n<body>\n\
         <h1>{name}</h1>\n"
    );
    if !report.description.is_empty() {
        let _ = writeln!(h, "<p>{}</p>", escape(&report.description));
    }
    let _ = writeln!(
        h,
        "<p>Generated {}</p>",
        report.generated_at.format("%Y-%m-%d %H:%M:%S UTC")
    );

    match report.rate {
        Some(rate) => {
            let _ = writeln!(
                h,
                "<p id=\"rate\" data-rate=\"{rate}\">Reproducibility rate: <strong>{rate}</strong> ({:.1}%)</p>",
                rate * 100.0
            );
        }
        None => h.push_str("<p id=\"rate\" data-rate=\"\">Reproducibility rate: <strong>n/a</strong></p>\n"),
    }

    h.push_str("<table id=\"totals\">\n<tr><th>Status</th><th>Derivations</th></tr>\n");
    let t = &report.totals;
    for (status, n) in [
        (ReproStatus::Reproducible, t.reproducible),
        (ReproStatus::Nonreproducible, t.nonreproducible),
        (ReproStatus::Unconfirmed, t.unconfirmed),
        (ReproStatus::Unknown, t.unknown),
    ] {
        let _ = writeln!(h, "<tr class=\"{status}\"><td>{status}</td><td class=\"num\">{n}</td></tr>");
    }
    let _ = writeln!(h, "<tr><th>total</th><th class=\"num\">{}</th></tr>\n</table>", t.total());

    h.push_str("<h2>Regressions</h2>\n");
    if report.regressions.is_empty() {
        h.push_str("<p>None detected.</p>\n");
    } else {
        h.push_str(
            "<table id=\"regressions\">\n<tr><th>Package</th><th>Last reproducible</th><th>Now non-reproducible</th></tr>\n",
        );
        for r in &report.regressions {
            let _ = writeln!(
                h,
                "<tr><td>{}</td><td>{} <code>{}</code></td><td>{} <code>{}</code></td></tr>",
                escape(&r.stem),
                escape(&r.earlier_name),
                escape(&r.earlier_drv_hash),
                escape(&r.later_name),
                escape(&r.later_drv_hash),
            );
        }
        h.push_str("</table>\n");
    }

    h.push_str(
        "<h2>Derivations</h2>\n<table id=\"derivations\">\n\
         <tr><th>Name</th><th>Derivation</th><th>Status</th><th>Builders</th><th>Last seen</th></tr>\n",
    );
    for row in &report.rows {
        let _ = writeln!(
            h,
            "<tr class=\"{status}\"><td>{}</td><td><code>{}</code></td><td>{status}</td>\
             <td class=\"num\">{}</td><td>{}</td></tr>",
            escape(&row.name),
            escape(&row.drv_hash),
            row.distinct_builders,
            row.last_seen.format("%Y-%m-%d %H:%M:%S"),
            status = row.status,
        );
    }
    h.push_str("</table>\n</body>\n</html>\n");
    h
}
