//! Self-contained HTML grid of ranked retrievals with embedded thumbnails.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use super::report::{EvalReport, QueryMode};
use crate::artifact;
use crate::data::{index_by_id, ImageRecord};
use crate::error::{Error, Result};
use crate::triplets::http::png_data_url;

pub const GT_MISSING_MARKER: &str = "gt not retrieved";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Thumbs<'a> {
    collection: &'a [ImageRecord],
    by_id: HashMap<&'a str, usize>,
    cache: HashMap<String, String>,
}

impl Thumbs<'_> {
    fn get(&mut self, id: &str) -> Result<String> {
        if let Some(url) = self.cache.get(id) {
            return Ok(url.clone());
        }
        let i = *self.by_id.get(id).ok_or_else(|| Error::DanglingId(id.to_string()))?;
        let url = png_data_url(&self.collection[i])?;
        self.cache.insert(id.to_string(), url.clone());
        Ok(url)
    }
}

/// One table row per ranked query: the reference and its text, then the
/// top `top_k` candidates. The ground truth carries the `gt` class; when it
/// falls outside the top `top_k` an extra cell shows it under the
/// "gt not retrieved" marker.
pub fn render_gallery(
    report: &EvalReport,
    mode: QueryMode,
    collection: &[ImageRecord],
    top_k: usize,
) -> Result<String> {
    let lists = report
        .mode(mode)
        .and_then(|m| m.rankings.as_ref())
        .filter(|r| !r.is_empty())
        .ok_or(Error::MissingRankedLists)?;
    let mut thumbs = Thumbs {
        collection,
        by_id: index_by_id(collection),
        cache: HashMap::new(),
    };
    let mut html = String::new();
    html.push_str(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>retrieval gallery</title>\n<style>\n\
         body{font-family:sans-serif}table{border-collapse:collapse}\
         td{padding:4px;text-align:center;vertical-align:top;font-size:11px}\
         img{width:64px;height:64px;image-rendering:pixelated;border:3px solid transparent}\
         td.gt img{border-color:#1a9e3a}td.ref{background:#eee}td.missing{color:#b00}\n\
         </style></head><body>\n",
    );
    let _ = writeln!(
        html,
        "<h1>{} top-{top_k}</h1>\n<table>",
        escape(mode.label())
    );
    for list in lists {
        html.push_str("<tr>");
        let _ = write!(
            html,
            "<td class=\"ref\"><img src=\"{}\" alt=\"{}\"><br>{}<br><b>{}</b></td>",
            thumbs.get(&list.ref_id)?,
            escape(&list.ref_id),
            escape(&list.ref_id),
            escape(&list.reformulation)
        );
        let mut found = false;
        for (id, score) in list.hits.iter().take(top_k) {
            let is_gt = *id == list.gt_target_id;
            found |= is_gt;
            let _ = write!(
                html,
                "<td{}><img src=\"{}\" alt=\"{}\"><br>{}<br>{score:.3}</td>",
                if is_gt { " class=\"gt\"" } else { "" },
                thumbs.get(id)?,
                escape(id),
                escape(id)
            );
        }
        if !found {
            let _ = write!(
                html,
                "<td class=\"missing gt\"><img src=\"{}\" alt=\"{}\"><br>{}<br>{GT_MISSING_MARKER}</td>",
                thumbs.get(&list.gt_target_id)?,
                escape(&list.gt_target_id),
                escape(&list.gt_target_id)
            );
        }
        html.push_str("</tr>\n");
    }
    html.push_str("</table>\n</body></html>\n");
    Ok(html)
}

pub fn export_gallery(
    report: &EvalReport,
    mode: QueryMode,
    collection: &[ImageRecord],
    top_k: usize,
    path: &Path,
) -> Result<()> {
    let html = render_gallery(report, mode, collection, top_k)?;
    artifact::write_atomic_with(path, |w| w.write_all(html.as_bytes()))
}
