//! Analytic parameter accounting (trained-fraction-per-task, total-parameter
//! multipliers) and fixed-width result tables.

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::light_encoder::{LightEncoderConfig, PoolingStrategy};

/// Exact scalar count of the backbone from its config: embeddings, per-layer
/// attention/FFN/layer-norms, and the tied MLM head (bias only).
pub fn count_backbone_params(cfg: &BackboneConfig) -> usize {
    let d = cfg.d_model;
    let embeddings = cfg.vocab_size * d + cfg.max_positions * d + cfg.n_type_ids * d + 2 * d;
    let attention = 4 * d * d + 4 * d;
    let ffn = d * cfg.d_ff + cfg.d_ff + cfg.d_ff * d + d;
    let norms = 2 * d + 2 * d;
    let per_layer = attention + ffn + norms;
    let mlm_head = cfg.vocab_size;
    embeddings + cfg.n_layers * per_layer + mlm_head
}

/// Exact scalar count of a light encoder from configs and schema sizes.
pub fn count_light_params(
    backbone: &BackboneConfig,
    light: &LightEncoderConfig,
    n_intents: usize,
    n_slot_labels: usize,
) -> usize {
    let pool = light
        .pooling
        .pool_width(backbone.n_layers, backbone.d_model);
    let h = light.lstm_hidden;
    let mixer = if light.pooling == PoolingStrategy::LearnedLinear {
        backbone.n_layers + 1
    } else {
        0
    };
    let dense = pool * light.dense_out + light.dense_out;
    let lstm: usize = if light.use_bilstm {
        (0..light.lstm_layers)
            .map(|layer| {
                let input = if layer == 0 { light.dense_out } else { 2 * h };
                2 * (input * 4 * h + h * 4 * h + 4 * h)
            })
            .sum()
    } else {
        0
    };
    let rep = light.rep_width();
    let ic = rep * n_intents + n_intents;
    let crf =
        rep * n_slot_labels + n_slot_labels + n_slot_labels * n_slot_labels + 2 * n_slot_labels;
    mixer + dense + lstm + ic + crf
}

/// Parameter-efficiency summary for one light-encoder variant at `k_tasks`
/// domains sharing one backbone. `total_multiplier = 1 + k × fraction`
/// (full fine-tuning instead stores `k` whole models: multiplier `k`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub variant: String,
    pub backbone_params: usize,
    pub light_params: usize,
    pub per_task_fraction: f64,
    pub k_tasks: usize,
    pub total_multiplier: f64,
}

pub fn count_parameters(
    backbone: &BackboneConfig,
    light: &LightEncoderConfig,
    n_intents: usize,
    n_slot_labels: usize,
    k_tasks: usize,
) -> ParamReport {
    let backbone_params = count_backbone_params(backbone);
    let light_params = count_light_params(backbone, light, n_intents, n_slot_labels);
    let fraction = light_params as f64 / (backbone_params + light_params) as f64;
    ParamReport {
        variant: light.variant_name().to_string(),
        backbone_params,
        light_params,
        per_task_fraction: fraction,
        k_tasks,
        total_multiplier: 1.0 + k_tasks as f64 * fraction,
    }
}

/// The full fine-tuning baseline: every task stores a whole model.
pub fn full_finetune_report(
    backbone: &BackboneConfig,
    light: &LightEncoderConfig,
    n_intents: usize,
    n_slot_labels: usize,
    k_tasks: usize,
) -> ParamReport {
    let backbone_params = count_backbone_params(backbone);
    let light_params = count_light_params(backbone, light, n_intents, n_slot_labels);
    ParamReport {
        variant: "BERT-CLM (full fine-tune)".to_string(),
        backbone_params,
        light_params,
        per_task_fraction: 1.0,
        k_tasks,
        total_multiplier: k_tasks as f64,
    }
}

/// One model row of a results table, scores in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model_name: String,
    pub per_domain: Vec<DomainScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainScore {
    pub domain: String,
    pub ic: f64,
    pub sl: f64,
}

impl MetricsRow {
    pub fn score_for(&self, domain: &str) -> Option<&DomainScore> {
        self.per_domain.iter().find(|d| d.domain == domain)
    }
}

/// Render a fixed-width table. When `baseline` names a row, other rows show
/// relative percentage differences against it (positive = improvement); the
/// baseline row shows absolute percentages. Parameter columns come from the
/// matching `ParamReport` by variant name.
pub fn render_report(
    rows: &[MetricsRow],
    params: &[ParamReport],
    baseline: Option<&str>,
) -> Result<String> {
    let domains: Vec<String> = rows
        .first()
        .map(|r| r.per_domain.iter().map(|d| d.domain.clone()).collect())
        .unwrap_or_default();

    let mut header = format!(
        "{:<26} {:>12} {:>16}",
        "model", "total params", "trained/task"
    );
    for d in &domains {
        header.push_str(&format!(" {:>16}", format!("{d} IC/SL")));
    }
    let mut out = header.clone();
    out.push('\n');
    out.push_str(&"-".repeat(header.len()));
    out.push('\n');

    let baseline_row = baseline.and_then(|name| rows.iter().find(|r| r.model_name == name));
    for row in rows {
        let param = params.iter().find(|p| p.variant == row.model_name);
        let (mult, frac) = match param {
            Some(p) => (
                format!("{:.2}x", p.total_multiplier),
                format!("{:.1}%", p.per_task_fraction * 100.0),
            ),
            None => ("-".to_string(), "-".to_string()),
        };
        out.push_str(&format!("{:<26} {:>12} {:>16}", row.model_name, mult, frac));
        let is_baseline = baseline == Some(row.model_name.as_str());
        for d in &domains {
            let cell = match row.score_for(d) {
                None => "-".to_string(),
                Some(score) => match (&baseline_row, is_baseline) {
                    (Some(base), false) => {
                        let b = base
                            .score_for(d)
                            .ok_or_else(|| Error::Data(format!("baseline lacks domain {d}")))?;
                        let ic = crate::metrics::relative_diff(score.ic, b.ic)?;
                        let sl = crate::metrics::relative_diff(score.sl, b.sl)?;
                        format!("{ic:+.2}/{sl:+.2}")
                    }
                    _ => format!("{:.2}/{:.2}", score.ic * 100.0, score.sl * 100.0),
                },
            };
            out.push_str(&format!(" {cell:>16}"));
        }
        out.push('\n');
    }
    Ok(out)
}
