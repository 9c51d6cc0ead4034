//! Aggregate table over per-case metric rows.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::metrics::{ordered_sum, MetricsRecord};

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn new(mean: f64, std: f64) -> Self {
        MeanStd { mean, std }
    }

    pub fn of(values: &[f64]) -> Result<MeanStd> {
        if values.is_empty() {
            return Err(Error::InvalidArgument("no values to aggregate".into()));
        }
        let n = values.len() as f64;
        let mean = ordered_sum(values.to_vec()) / n;
        let var = ordered_sum(values.iter().map(|v| (v - mean) * (v - mean)).collect()) / n;
        Ok(MeanStd { mean, std: var.sqrt() })
    }
}

/// Column aggregates for one arm. NMAE is stored unscaled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmSummary {
    pub nmae: MeanStd,
    pub psnr_db: MeanStd,
    pub ssim: MeanStd,
    pub iou: MeanStd,
    pub dice: MeanStd,
    pub vol_diff_ml: MeanStd,
}

impl ArmSummary {
    pub fn of(records: &[&MetricsRecord]) -> Result<ArmSummary> {
        let col = |f: fn(&MetricsRecord) -> f64| MeanStd::of(&records.iter().map(|r| f(r)).collect::<Vec<_>>());
        Ok(ArmSummary {
            nmae: col(|r| r.nmae)?,
            psnr_db: col(|r| r.psnr_db)?,
            ssim: col(|r| r.ssim)?,
            iou: col(|r| r.iou)?,
            dice: col(|r| r.dice)?,
            vol_diff_ml: col(|r| r.vol_diff_ml)?,
        })
    }
}

pub const TABLE_HEADER: &str = "Method | NMAE (x10) | PSNR (dB) | SSIM | IoU | Dice";

/// `label | NMAE×10 | PSNR | SSIM | IoU | Dice`, each cell `mean ± std`.
pub fn format_row(label: &str, s: &ArmSummary) -> String {
    format!(
        "{label} | {:.2} ± {:.1} | {:.2} ± {:.2} | {:.3} ± {:.2} | {:.2} ± {:.2} | {:.2} ± {:.2}",
        s.nmae.mean * 10.0,
        s.nmae.std * 10.0,
        s.psnr_db.mean,
        s.psnr_db.std,
        s.ssim.mean,
        s.ssim.std,
        s.iou.mean,
        s.iou.std,
        s.dice.mean,
        s.dice.std,
    )
}

/// Display label for an arm name such as `flow-heun-100` or `diffusion-50`.
pub fn arm_label(arm: &str) -> String {
    let mut parts = arm.split('-');
    let kind = parts.next().unwrap_or(arm);
    let steps = parts.next_back();
    let name = match kind {
        "flow" => "Flow".to_string(),
        "diffusion" => "Diffusion".to_string(),
        "identity" => "Identity".to_string(),
        other => other.to_string(),
    };
    match steps {
        Some(s) if s.chars().all(|c| c.is_ascii_digit()) => format!("{name} ({s})"),
        _ => name,
    }
}

/// Header plus one row per arm, arms in sorted order.
pub fn render_table(records: &[MetricsRecord]) -> Result<String> {
    let mut arms: BTreeMap<&str, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        arms.entry(r.arm.as_str()).or_default().push(r);
    }
    if arms.is_empty() {
        return Err(Error::InvalidArgument("no metric rows".into()));
    }
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for (arm, rows) in arms {
        out.push_str(&format_row(&arm_label(arm), &ArmSummary::of(&rows)?));
        out.push('\n');
    }
    Ok(out)
}
