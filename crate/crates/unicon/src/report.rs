//! JSON and CSV forms of cost reports and comparisons.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use unicon_core::profiler::{Comparison, CostFields, CostReport};
use unicon_core::ComponentTag;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Fields {
    weight_bytes: u64,
    activation_bytes: u64,
    gradient_bytes: u64,
    optimizer_bytes: u64,
    fp_flops: u64,
    bp_flops: u64,
}

impl From<&CostFields> for Fields {
    fn from(c: &CostFields) -> Self {
        Fields {
            weight_bytes: c.weight_bytes,
            activation_bytes: c.activation_bytes,
            gradient_bytes: c.gradient_bytes,
            optimizer_bytes: c.optimizer_bytes,
            fp_flops: c.fp_flops,
            bp_flops: c.bp_flops,
        }
    }
}

impl From<Fields> for CostFields {
    fn from(f: Fields) -> Self {
        CostFields::from_values([
            f.weight_bytes,
            f.activation_bytes,
            f.gradient_bytes,
            f.optimizer_bytes,
            f.fp_flops,
            f.bp_flops,
        ])
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportJson {
    label: String,
    #[serde(flatten)]
    totals: Fields,
    fp_time_ms: Option<f64>,
    bp_time_ms: Option<f64>,
    per_component: BTreeMap<String, Fields>,
}

pub fn report_to_json(label: &str, report: &CostReport) -> String {
    let doc = ReportJson {
        label: label.to_string(),
        totals: (&report.totals).into(),
        fp_time_ms: report.fp_time_ms,
        bp_time_ms: report.bp_time_ms,
        per_component: ComponentTag::ALL
            .into_iter()
            .map(|t| (t.name().to_string(), report.component(t).into()))
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("plain data serializes")
}

/// Parses a report and checks that every component is present and that
/// the totals equal their sum.
pub fn report_from_json(text: &str) -> Result<(String, CostReport)> {
    let doc: ReportJson = serde_json::from_str(text).context("parsing cost report")?;
    let mut per = [CostFields::default(); 5];
    for (name, f) in &doc.per_component {
        let tag = ComponentTag::from_name(name).with_context(|| format!("unknown component `{name}`"))?;
        per[tag.index()] = (*f).into();
    }
    if doc.per_component.len() != ComponentTag::ALL.len() {
        bail!("cost report lists {} of {} components", doc.per_component.len(), ComponentTag::ALL.len());
    }
    let mut report = CostReport::from_components(per);
    if report.totals != CostFields::from(doc.totals) {
        bail!("cost report totals differ from the sum of its components");
    }
    report.fp_time_ms = doc.fp_time_ms;
    report.bp_time_ms = doc.bp_time_ms;
    Ok((doc.label, report))
}

/// One header row, then a `total` row and one row per component.
pub fn report_to_csv(label: &str, report: &CostReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label", "scope"];
    header.extend(CostFields::NAMES);
    w.write_record(&header).unwrap();
    let scopes = std::iter::once(("total", &report.totals))
        .chain(ComponentTag::ALL.into_iter().map(|t| (t.name(), report.component(t))));
    for (scope, f) in scopes {
        let mut row = vec![label.to_string(), scope.to_string()];
        row.extend(f.values().iter().map(|v| v.to_string()));
        w.write_record(&row).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

/// Fixed-width text: one row per scope, one column per cost field.
pub fn report_to_table(label: &str, report: &CostReport) -> String {
    let mut out = format!("{label}\n{:<14}", "scope");
    for f in CostFields::NAMES {
        out += &format!(" {f:>18}");
    }
    out.push('\n');
    let scopes = std::iter::once(("total", &report.totals))
        .chain(ComponentTag::ALL.into_iter().map(|t| (t.name(), report.component(t))));
    for (scope, f) in scopes {
        out += &format!("{scope:<14}");
        for v in f.values() {
            out += &format!(" {v:>18}");
        }
        out.push('\n');
    }
    if let (Some(fp), Some(bp)) = (report.fp_time_ms, report.bp_time_ms) {
        out += &format!("wall clock: forward {fp:.2} ms, backward {bp:.2} ms\n");
    }
    out
}

/// `name,scope,field,value,ratio` with an empty ratio where undefined.
pub fn comparison_to_csv(cmp: &Comparison) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["name", "scope", "field", "value", "ratio"]).unwrap();
    for r in &cmp.rows {
        w.write_record([
            r.name.clone(),
            r.scope.map_or("total", |t| t.name()).to_string(),
            r.field.to_string(),
            r.value.to_string(),
            r.ratio.map_or(String::new(), |x| x.to_string()),
        ])
        .unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}
