//! Per-image metric rows and their markdown aggregation.
//!
//! Every metrics CSV shares one schema:
//!
//! ```text
//! image-id,method,mode,clean-rmse,adv-rmse,rmse-ratio,clean-mmd,adv-mmd,mmd-ratio,target-depth,craft-model,eval-model
//! ```
//!
//! MMD cells and `target-depth` are empty for non-targeted rows; a ratio cell
//! is empty when the clean value is zero.
//!
//! The markdown report groups rows by (method, mode, target depth, craft
//! model, eval model) in order of first appearance. Each group shows the mean
//! clean and adversarial values and the ratio of those means, with ratios
//! printed as `N.N×`:
//!
//! ```text
//! | method | mode | target (m) | crafted on | evaluated on | images | clean RMSE | adv RMSE | RMSE ratio | clean MMD | adv MMD | MMD ratio |
//! ```

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use depthattack_core::metrics::{format_ratio, ratio};

use crate::config::{merge, to_pretty};
use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct Row {
    pub image_id: String,
    pub method: String,
    pub mode: String,
    pub clean_rmse: f64,
    pub adv_rmse: f64,
    pub rmse_ratio: Option<f64>,
    pub clean_mmd: Option<f64>,
    pub adv_mmd: Option<f64>,
    pub mmd_ratio: Option<f64>,
    pub target_depth: Option<f64>,
    pub craft_model: String,
    pub eval_model: String,
}

pub const HEADER: [&str; 12] = [
    "image-id",
    "method",
    "mode",
    "clean-rmse",
    "adv-rmse",
    "rmse-ratio",
    "clean-mmd",
    "adv-mmd",
    "mmd-ratio",
    "target-depth",
    "craft-model",
    "eval-model",
];

pub fn write_rows(path: &Path, rows: &[Row]) -> Result<(), CliError> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    wtr.write_record(HEADER)?;
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<Row>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    if header != HEADER {
        return Err(CliError::Data(format!("{}: unexpected header {header:?}", path.display())));
    }
    rdr.deserialize()
        .map(|r| r.map_err(|e| CliError::Data(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub method: String,
    pub mode: String,
    pub target_depth: Option<f64>,
    pub craft_model: String,
    pub eval_model: String,
    pub images: usize,
    pub clean_rmse: f64,
    pub adv_rmse: f64,
    pub clean_mmd: Option<f64>,
    pub adv_mmd: Option<f64>,
}

fn mean_opt(values: &[Option<f64>]) -> Option<f64> {
    let v: Vec<f64> = values.iter().flatten().copied().collect();
    (!v.is_empty() && v.len() == values.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Groups rows and averages each metric over the group's images.
pub fn aggregate(rows: &[Row]) -> Vec<Group> {
    let mut keys: Vec<(String, String, Option<u64>, String, String)> = Vec::new();
    let mut members: Vec<Vec<&Row>> = Vec::new();
    for r in rows {
        let key = (
            r.method.clone(),
            r.mode.clone(),
            r.target_depth.map(f64::to_bits),
            r.craft_model.clone(),
            r.eval_model.clone(),
        );
        match keys.iter().position(|k| *k == key) {
            Some(i) => members[i].push(r),
            None => {
                keys.push(key);
                members.push(vec![r]);
            }
        }
    }
    members
        .into_iter()
        .map(|m| {
            let n = m.len() as f64;
            let first = m[0];
            Group {
                method: first.method.clone(),
                mode: first.mode.clone(),
                target_depth: first.target_depth,
                craft_model: first.craft_model.clone(),
                eval_model: first.eval_model.clone(),
                images: m.len(),
                clean_rmse: m.iter().map(|r| r.clean_rmse).sum::<f64>() / n,
                adv_rmse: m.iter().map(|r| r.adv_rmse).sum::<f64>() / n,
                clean_mmd: mean_opt(&m.iter().map(|r| r.clean_mmd).collect::<Vec<_>>()),
                adv_mmd: mean_opt(&m.iter().map(|r| r.adv_mmd).collect::<Vec<_>>()),
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".to_owned())
}

pub const TABLE_HEADER: &str = "| method | mode | target (m) | crafted on | evaluated on | images | clean RMSE | adv RMSE | RMSE ratio | clean MMD | adv MMD | MMD ratio |\n|---|---|---|---|---|---|---|---|---|---|---|---|\n";

pub fn render(groups: &[Group]) -> String {
    let mut s = String::from(TABLE_HEADER);
    for g in groups {
        let mmd_ratio = match (g.clean_mmd, g.adv_mmd) {
            (Some(c), Some(a)) => ratio(c, a),
            _ => None,
        };
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {:.2} | {:.2} | {} | {} | {} | {} |\n",
            g.method,
            g.mode,
            cell(g.target_depth),
            g.craft_model,
            g.eval_model,
            g.images,
            g.clean_rmse,
            g.adv_rmse,
            format_ratio(ratio(g.clean_rmse, g.adv_rmse)),
            cell(g.clean_mmd),
            cell(g.adv_mmd),
            format_ratio(mmd_ratio),
        ));
    }
    s
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
pub struct ReportArgs {
    /// Metric CSVs to aggregate (repeatable).
    #[arg(long = "in")]
    #[serde(rename = "in")]
    inputs: Option<Vec<PathBuf>>,
    /// Markdown output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
struct ReportConfig {
    #[serde(rename = "in")]
    inputs: Vec<PathBuf>,
    out: Option<PathBuf>,
}

pub fn run(file: Map<String, Value>, args: ReportArgs) -> Result<(), CliError> {
    let cfg: ReportConfig = merge(file, &args)?;
    let out = cfg.out.clone().ok_or_else(|| CliError::Usage("--out is required".into()))?;
    let mut rows = Vec::new();
    for p in &cfg.inputs {
        rows.extend(read_rows(p)?);
    }
    let mut md = String::from("# Attack report\n\nEffective configuration:\n\n```json\n");
    md.push_str(&to_pretty(&cfg));
    md.push_str("```\n\n");
    md.push_str(&render(&aggregate(&rows)));
    std::fs::write(&out, md).map_err(|e| CliError::Data(format!("cannot write {}: {e}", out.display())))?;
    Ok(())
}
