//! Named training variants that switch off one component each, run with a
//! shared seed and compared on validation Mean IoU and J&F.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{AugmentedExpressionSet, ClipSample};
use crate::trainer::{train, TrainConfig, TrainOptions};

pub const BASELINE: &str = "full";

/// Every variant, baseline first.
pub const VARIANTS: [(&str, fn(&mut TrainConfig)); 12] = [
    (BASELINE, |_| {}),
    ("no_iec", |c| c.disable_iec = true),
    ("no_ppf", |c| c.disable_ppf = true),
    ("no_tsr", |c| c.disable_tsr = true),
    ("iec_no_cls", |c| c.disable_cls_flow = true),
    ("iec_no_smt", |c| c.disable_smt_flow = true),
    ("ppf_single", |c| c.ppf_single = true),
    ("crea_no_pos", |c| c.disable_crea_pos = true),
    ("crea_no_neg", |c| c.disable_crea_neg = true),
    ("no_selection", |c| c.disable_selection = true),
    ("no_visual_query", |c| c.disable_attn_visual_query = true),
    ("no_linguistic_query", |c| c.disable_attn_linguistic_query = true),
];

pub fn variant_names() -> Vec<&'static str> {
    VARIANTS.iter().map(|(n, _)| *n).collect()
}

/// `base` with the named variant applied.
pub fn variant_config(base: &TrainConfig, name: &str) -> Result<TrainConfig> {
    let (_, apply) = VARIANTS.iter().find(|(n, _)| *n == name).ok_or_else(|| {
        Error::arg("variant", format!("unknown variant `{name}`; valid: {}", variant_names().join(", ")))
    })?;
    let mut cfg = base.clone();
    apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub val_miou: f64,
    pub val_jf: f64,
}

/// Trains the baseline plus every requested variant (all of them when
/// `names` is empty) and reports each one's final validation scores.
pub fn run_ablation(
    base: &TrainConfig,
    names: &[String],
    train_data: &[(ClipSample, AugmentedExpressionSet)],
    val_data: &[(ClipSample, AugmentedExpressionSet)],
    opts: &TrainOptions<'_>,
) -> Result<Vec<AblationRow>> {
    let mut selected = vec![BASELINE.to_string()];
    if names.is_empty() {
        selected.extend(VARIANTS[1..].iter().map(|(n, _)| n.to_string()));
    } else {
        selected.extend(names.iter().filter(|n| *n != BASELINE).cloned());
    }
    let configs: Vec<TrainConfig> = selected.iter().map(|n| variant_config(base, n)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(selected.len());
    for (name, cfg) in selected.into_iter().zip(configs) {
        log::info!("ablation: training `{name}`");
        let ck = train(&cfg, train_data, val_data, None, opts)?;
        let last = ck.history.last().ok_or_else(|| Error::Config("ablation needs at least one epoch".into()))?;
        rows.push(AblationRow { variant: name, val_miou: last.val_miou, val_jf: last.val_jf });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,val_miou,val_jf\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{}", r.variant, r.val_miou, r.val_jf);
    }
    s
}
