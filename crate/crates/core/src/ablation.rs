//! Named experiment matrices.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::config::{spaces_label, GranularityToggles, SpaceConfig, TrainConfig};
use crate::data::PairDataset;
use crate::error::{bail, Result};
use crate::eval::{evaluate_dataset, RecallReport};
use crate::train::train;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationMatrix {
    Spaces,
    Losses,
    Granularities,
    MSweep,
}

impl AblationMatrix {
    pub const ALL: [AblationMatrix; 4] =
        [AblationMatrix::Spaces, AblationMatrix::Losses, AblationMatrix::Granularities, AblationMatrix::MSweep];

    pub fn name(self) -> &'static str {
        match self {
            AblationMatrix::Spaces => "spaces",
            AblationMatrix::Losses => "losses",
            AblationMatrix::Granularities => "granularities",
            AblationMatrix::MSweep => "m_sweep",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match Self::ALL.into_iter().find(|m| m.name() == name) {
            Some(m) => Ok(m),
            None => bail!(Argument, "unknown ablation matrix '{name}' (expected spaces, losses, granularities or m_sweep)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub exp_id: String,
    pub label: String,
    pub config: TrainConfig,
}

fn row(exp_id: impl Into<String>, label: impl Into<String>, config: TrainConfig) -> AblationRow {
    AblationRow { exp_id: exp_id.into(), label: label.into(), config }
}

/// Configurations of one matrix, derived from `base`. Every row is validated.
pub fn ablation_rows(matrix: AblationMatrix, base: &TrainConfig) -> Result<Vec<AblationRow>> {
    let rows = match matrix {
        AblationMatrix::Spaces => {
            let shared = |n| SpaceConfig { shared: n, image: false, text: false };
            let sets = [
                shared(1),
                shared(2),
                shared(3),
                SpaceConfig::IMAGE_ONLY,
                SpaceConfig::TEXT_ONLY,
                SpaceConfig { shared: 1, image: true, text: true },
                SpaceConfig::BIDIRECTIONAL,
            ];
            sets.iter()
                .enumerate()
                .map(|(i, s)| row(format!("Exp{}", i + 1), spaces_label(s), TrainConfig { spaces: *s, ..base.clone() }))
                .collect()
        }
        AblationMatrix::Losses => [("id-only", true, false), ("cr-only", false, true), ("both", true, true)]
            .into_iter()
            .map(|(name, id, cr)| row(name, name, TrainConfig { id_loss: id, cr_loss: cr, ..base.clone() }))
            .collect(),
        AblationMatrix::Granularities => {
            let t = |local, nonlocal, global| GranularityToggles { global, local, nonlocal };
            [
                ("L", t(true, false, false)),
                ("N", t(false, true, false)),
                ("G", t(false, false, true)),
                ("L+N", t(true, true, false)),
                ("L+G", t(true, false, true)),
                ("N+G", t(false, true, true)),
                ("L+N+G", t(true, true, true)),
            ]
            .into_iter()
            .map(|(name, g)| row(name, name, TrainConfig { granularities: g, ..base.clone() }))
            .collect()
        }
        AblationMatrix::MSweep => [1, 2, 4, 8]
            .into_iter()
            .map(|m| row(format!("M={m}"), format!("M={m}"), TrainConfig { m, ..base.clone() }))
            .collect::<Vec<_>>(),
    };
    for r in &rows {
        r.config.validate()?;
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub row: AblationRow,
    pub report: RecallReport,
}

/// Trains each row on `train_set` with the shared seed and evaluates on `eval_set`.
pub fn run_ablation(
    train_set: &PairDataset,
    eval_set: &PairDataset,
    base: &TrainConfig,
    matrix: AblationMatrix,
    mut on_row: impl FnMut(&AblationResult),
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::new();
    for r in ablation_rows(matrix, base)? {
        let trained = train(train_set, r.config.clone())?;
        let report = evaluate_dataset(&trained.trainer.model, eval_set)?;
        let res = AblationResult { row: r, report };
        on_row(&res);
        out.push(res);
    }
    Ok(out)
}

/// Fixed-width table of a finished ablation.
pub fn format_table(results: &[AblationResult]) -> String {
    let w = results.iter().map(|r| r.row.exp_id.len().max(r.row.label.len())).max().unwrap_or(0).max(6);
    let mut s = format!("{:<w$}  {:<w$}  {:>7}  {:>7}  {:>7}\n", "exp_id", "config", "R@1", "R@5", "R@10");
    for r in results {
        let at = |k| r.report.at(k).map_or("-".to_string(), |v| format!("{v:.2}"));
        s += &format!("{:<w$}  {:<w$}  {:>7}  {:>7}  {:>7}\n", r.row.exp_id, r.row.label, at(1), at(5), at(10));
    }
    s
}
