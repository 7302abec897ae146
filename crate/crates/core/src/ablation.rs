//! The six-variant ablation grid: C2PSA vs C2PCA heads, then FEA modules
//! added at positions 1, 1–2 and 1–3, then SPPF.

use aggrnet_tensor::Element;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{AttentionBlock, Model, ModelConfig};
use crate::train::Trainer;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Variant {
    pub label: &'static str,
    pub attention_block: AttentionBlock,
    pub fea_positions: &'static [usize],
    pub use_sppf: bool,
}

pub const VARIANTS: [Variant; 6] = [
    Variant {
        label: "YOLOv11 classification backbone with C2PSA",
        attention_block: AttentionBlock::C2psa,
        fea_positions: &[],
        use_sppf: false,
    },
    Variant {
        label: "YOLOv11 classification backbone with C2PCA",
        attention_block: AttentionBlock::C2pca,
        fea_positions: &[],
        use_sppf: false,
    },
    Variant {
        label: "YOLOv11 + C2PCA + FEA@1",
        attention_block: AttentionBlock::C2pca,
        fea_positions: &[1],
        use_sppf: false,
    },
    Variant {
        label: "YOLOv11 + C2PCA + FEA@1,2",
        attention_block: AttentionBlock::C2pca,
        fea_positions: &[1, 2],
        use_sppf: false,
    },
    Variant {
        label: "YOLOv11 + C2PCA + FEA@1,2,3",
        attention_block: AttentionBlock::C2pca,
        fea_positions: &[1, 2, 3],
        use_sppf: false,
    },
    Variant {
        label: "AGGRNet/Ours (YOLOv11 + C2PCA + FEA@1,2,3 + SPPF)",
        attention_block: AttentionBlock::C2pca,
        fea_positions: &[1, 2, 3],
        use_sppf: true,
    },
];

impl Variant {
    pub fn apply(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            attention_block: self.attention_block,
            fea_positions: self.fea_positions.to_vec(),
            use_sppf: self.use_sppf,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    /// `None` when the variant failed.
    pub accuracy: Option<f64>,
    pub params: usize,
    pub error: Option<String>,
}

/// Trains one variant for `cfg.ablation.epochs` and scores it on `eval`.
pub fn run_variant<F: Element>(cfg: &RunConfig, v: &Variant, train: &Dataset, eval: &Dataset) -> Result<(f64, usize)> {
    let model_cfg = v.apply(&cfg.model);
    let mut trainer = Trainer::<F>::new(&model_cfg, &cfg.train)?;
    for _ in 0..cfg.ablation.epochs {
        trainer.run_epoch(train)?;
    }
    let report = trainer.evaluate(eval)?;
    Ok((report.accuracy, trainer.model.param_count()))
}

/// Runs every variant in order. A failing variant yields a row without an
/// accuracy and the grid carries on; the first failure is handed back.
pub fn run_grid<F: Element>(
    cfg: &RunConfig,
    train: &Dataset,
    eval: Option<&Dataset>,
    mut on_row: impl FnMut(&AblationRow),
) -> (Vec<AblationRow>, Option<Error>) {
    let eval = eval.unwrap_or(train);
    let mut first_error = None;
    let mut rows = Vec::with_capacity(VARIANTS.len());
    for v in &VARIANTS {
        let row = match run_variant::<F>(cfg, v, train, eval) {
            Ok((acc, params)) => AblationRow { variant: v.label.into(), accuracy: Some(acc), params, error: None },
            Err(e) => {
                log::error!("variant {:?} failed: {e}", v.label);
                let params = Model::build(&v.apply(&cfg.model)).map_or(0, |m| m.param_count());
                let row = AblationRow { variant: v.label.into(), accuracy: None, params, error: Some(e.to_string()) };
                first_error.get_or_insert(e);
                row
            }
        };
        on_row(&row);
        rows.push(row);
    }
    (rows, first_error)
}

/// `variant,accuracy,params` with accuracies to six decimals; failed rows
/// read `FAILED`.
pub fn to_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Data(format!("writing ablation table: {e}"));
    w.write_record(["variant", "accuracy", "params"]).map_err(io)?;
    for r in rows {
        let acc = r.accuracy.map_or_else(|| "FAILED".to_string(), |a| format!("{a:.6}"));
        w.write_record([r.variant.as_str(), acc.as_str(), r.params.to_string().as_str()]).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Data(format!("writing ablation table: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv of UTF-8 fields is UTF-8"))
}
