//! Backbone / fusion ablation: the same data and seed trained under each
//! variant, scored on the same held-out set.

use serde::Serialize;

use super::{load_data, mean_report, thread_pool, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::model::BackboneKind;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Variant {
    pub name: String,
    pub backbone: BackboneKind,
    pub mff_enabled: bool,
}

pub fn default_variants() -> Vec<Variant> {
    let v = |name: &str, backbone, mff_enabled| Variant {
        name: name.into(),
        backbone,
        mff_enabled,
    };
    vec![
        v("plain_cnn+mff", BackboneKind::PlainCnn, true),
        v("fe_mamba", BackboneKind::FeMamba, false),
        v("fe_mamba+mff", BackboneKind::FeMamba, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub parameters: usize,
    pub epe: f64,
    pub bad2: f64,
    pub bad3: f64,
    pub bad5: f64,
    pub final_loss: f64,
}

/// Trains every variant of `base` and tabulates held-out metrics.
pub fn ablation_run(base: &TrainConfig, variants: &[Variant], mut progress: impl FnMut(&str)) -> Result<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(Error::invalid("ablation needs at least one variant"));
    }
    let (train, val) = load_data(base)?;
    if val.is_empty() {
        return Err(Error::invalid("ablation needs held-out samples"));
    }
    let pool = thread_pool()?;
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let mut cfg = base.clone();
        cfg.model.backbone = v.backbone;
        cfg.model.mff_enabled = v.mff_enabled;
        cfg.validate()?;
        progress(&v.name);
        let mut trainer = Trainer::with_data(cfg, train.clone())?;
        let mut last = f64::NAN;
        trainer.run(None, |log| {
            last = log.loss;
            Ok(())
        })?;
        let reports = super::evaluate_model(&trainer.model, &trainer.stats, &val, &pool)?;
        let m = mean_report(&reports).expect("non-empty held-out set");
        rows.push(AblationRow {
            variant: v.name.clone(),
            parameters: trainer.model.params.num_scalars(),
            epe: m.epe,
            bad2: m.bad2,
            bad3: m.bad3,
            bad5: m.bad5,
            final_loss: last,
        });
    }
    Ok(rows)
}

pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<16} {:>10} {:>8} {:>8} {:>8} {:>8} {:>10}\n",
        "variant", "params", "EPE", "Bad2", "Bad3", "Bad5", "loss"
    );
    for r in rows {
        s += &format!(
            "{:<16} {:>10} {:>8.4} {:>8.2} {:>8.2} {:>8.2} {:>10.4}\n",
            r.variant, r.parameters, r.epe, r.bad2, r.bad3, r.bad5, r.final_loss
        );
    }
    s
}
