//! Comparison and ablation tables, and the `λ` sweep.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::cfa::{CfaMode, FusionKind, Streams};
use crate::config::RunConfig;
use crate::error::Result;
use crate::metrics::EvalReport;
use crate::model::{Cft, ModelConfig};
use crate::objective::VotingRule;
use crate::synth::Dataset;
use crate::tensor::Float;
use crate::trainer::{
    continue_training, evaluate, EpochRecord, TrainConfig, TrainState, VotingPredictor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    CfpOnly,
    IfpOnly,
    CfpSelfAttn,
    IfpSelfAttn,
    VotingMax,
    VotingAverage,
    FeatMax,
    FeatMean,
    FeatConcat,
    CfpCross,
    IfpCross,
    DualCross,
}

impl Variant {
    pub const ALL: [Variant; 12] = [
        Variant::CfpOnly,
        Variant::IfpOnly,
        Variant::CfpSelfAttn,
        Variant::IfpSelfAttn,
        Variant::VotingMax,
        Variant::VotingAverage,
        Variant::FeatMax,
        Variant::FeatMean,
        Variant::FeatConcat,
        Variant::CfpCross,
        Variant::IfpCross,
        Variant::DualCross,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CfpOnly => "cfp-only",
            Variant::IfpOnly => "ifp-only",
            Variant::CfpSelfAttn => "cfp-self-attn",
            Variant::IfpSelfAttn => "ifp-self-attn",
            Variant::VotingMax => "voting-max",
            Variant::VotingAverage => "voting-average",
            Variant::FeatMax => "feat-max",
            Variant::FeatMean => "feat-mean",
            Variant::FeatConcat => "feat-concat",
            Variant::CfpCross => "cfp-cross",
            Variant::IfpCross => "ifp-cross",
            Variant::DualCross => "dual-cross",
        }
    }

    /// Model configuration of a trained variant; `None` for the voting rows,
    /// which reuse the two single-stream models.
    pub fn model_config(self, base: &ModelConfig) -> Option<ModelConfig> {
        let (streams, mode, fusion) = match self {
            Variant::CfpOnly => (Streams::CfpOnly, CfaMode::None, None),
            Variant::IfpOnly => (Streams::IfpOnly, CfaMode::None, None),
            Variant::CfpSelfAttn => (Streams::CfpOnly, CfaMode::SelfAttention, None),
            Variant::IfpSelfAttn => (Streams::IfpOnly, CfaMode::SelfAttention, None),
            Variant::VotingMax | Variant::VotingAverage => return None,
            Variant::FeatMax => (Streams::Both, CfaMode::None, Some(FusionKind::Max)),
            Variant::FeatMean => (Streams::Both, CfaMode::None, Some(FusionKind::Mean)),
            Variant::FeatConcat => (Streams::Both, CfaMode::None, Some(FusionKind::Concat)),
            Variant::CfpCross => (Streams::Both, CfaMode::CfpCrossOnly, None),
            Variant::IfpCross => (Streams::Both, CfaMode::IfpCrossOnly, None),
            Variant::DualCross => (Streams::Both, CfaMode::DualCross, None),
        };
        let mut cfg = base.clone();
        cfg.streams = streams;
        cfg.cfa.mode = mode;
        if let Some(f) = fusion {
            cfg.cfa.fusion = f;
        }
        Some(cfg)
    }
}

/// Loss, projection and fusion switches of one loss/projection/fusion ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_cf_loss: bool,
    pub use_if_loss: bool,
    pub projection: bool,
    pub fusion: FusionKind,
}

pub const TABLE2_ROWS: [AblationFlags; 7] = {
    const fn row(cf: bool, if_: bool, lp: bool, fusion: FusionKind) -> AblationFlags {
        AblationFlags {
            use_cf_loss: cf,
            use_if_loss: if_,
            projection: lp,
            fusion,
        }
    }
    [
        row(false, false, false, FusionKind::Max),
        row(false, false, true, FusionKind::Max),
        row(true, false, true, FusionKind::Max),
        row(false, true, true, FusionKind::Max),
        row(true, true, true, FusionKind::Mean),
        row(true, true, true, FusionKind::Concat),
        row(true, true, true, FusionKind::Max),
    ]
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub id: usize,
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flags: Option<AblationFlags>,
    pub kappa: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub best_epoch: Option<usize>,
    pub report: EvalReport,
}

impl Row {
    fn new(
        id: usize,
        name: impl Into<String>,
        flags: Option<AblationFlags>,
        best_epoch: Option<usize>,
        report: EvalReport,
    ) -> Self {
        Self {
            id,
            name: name.into(),
            flags,
            kappa: report.kappa,
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            best_epoch,
            report,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub comparison: Vec<Row>,
    pub ablation: Vec<Row>,
}

type EpochLog<'a> = Box<dyn FnMut(&str, &EpochRecord) + 'a>;

/// Trained models keyed by their full configuration, so identical rows train once.
pub struct Runner<'a, T> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    cache: HashMap<String, TrainState<T>>,
    log: EpochLog<'a>,
}

impl<'a, T: Float> Runner<'a, T> {
    pub fn new(train: &'a Dataset, val: &'a Dataset) -> Self {
        Self {
            train,
            val,
            cache: HashMap::new(),
            log: Box::new(|_, _| {}),
        }
    }

    pub fn with_log(mut self, log: impl FnMut(&str, &EpochRecord) + 'a) -> Self {
        self.log = Box::new(log);
        self
    }

    /// Trains (or reuses) a model and returns its state; evaluation uses the best-kappa snapshot.
    pub fn run(
        &mut self,
        label: &str,
        model: &ModelConfig,
        train: &TrainConfig,
    ) -> Result<&TrainState<T>> {
        let key = serde_json::to_string(&(model, train))?;
        if !self.cache.contains_key(&key) {
            let mut state = TrainState::new(model.clone(), train)?;
            let log = &mut self.log;
            continue_training(&mut state, self.train, self.val, train, |r| log(label, r))?;
            self.cache.insert(key.clone(), state);
        }
        Ok(&self.cache[&key])
    }

    fn best_row(
        &mut self,
        id: usize,
        label: &str,
        flags: Option<AblationFlags>,
        model: &ModelConfig,
        train: &TrainConfig,
    ) -> Result<Row> {
        let state = self.run(label, model, train)?;
        let best = state.best.as_ref().expect("at least one epoch ran");
        Ok(Row::new(
            id,
            label,
            flags,
            Some(best.epoch),
            best.report.clone(),
        ))
    }

    pub fn comparison(&mut self, cfg: &RunConfig) -> Result<Vec<Row>> {
        let mut rows = Vec::new();
        for (i, v) in Variant::ALL.iter().enumerate() {
            let row = match v.model_config(&cfg.model) {
                Some(m) => self.best_row(i + 1, v.name(), None, &m, &cfg.train)?,
                None => {
                    let rule = if *v == Variant::VotingMax {
                        VotingRule::Max
                    } else {
                        VotingRule::Average
                    };
                    let cf_cfg = Variant::CfpOnly
                        .model_config(&cfg.model)
                        .expect("trained variant");
                    let if_cfg = Variant::IfpOnly
                        .model_config(&cfg.model)
                        .expect("trained variant");
                    let cf: Cft<T> = self
                        .run(Variant::CfpOnly.name(), &cf_cfg, &cfg.train)?
                        .best_model();
                    let if_: Cft<T> = self
                        .run(Variant::IfpOnly.name(), &if_cfg, &cfg.train)?
                        .best_model();
                    let report = evaluate(
                        &VotingPredictor {
                            cf: &cf,
                            if_: &if_,
                            rule,
                        },
                        self.val,
                    )?;
                    Row::new(i + 1, v.name(), None, None, report)
                }
            };
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn ablation(&mut self, cfg: &RunConfig) -> Result<Vec<Row>> {
        let mut rows = Vec::new();
        for (i, flags) in TABLE2_ROWS.iter().enumerate() {
            let mut model = Variant::DualCross
                .model_config(&cfg.model)
                .expect("trained variant");
            model.cfa.projection = flags.projection;
            model.cfa.fusion = flags.fusion;
            let train = TrainConfig {
                use_cf_loss: flags.use_cf_loss,
                use_if_loss: flags.use_if_loss,
                ..cfg.train.clone()
            };
            rows.push(self.best_row(
                i + 1,
                format!("row-{}", i + 1).as_str(),
                Some(*flags),
                &model,
                &train,
            )?);
        }
        Ok(rows)
    }
}

pub fn ablate<T: Float>(
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    log: impl FnMut(&str, &EpochRecord),
) -> Result<AblationReport> {
    let mut runner = Runner::<T>::new(train, val).with_log(log);
    Ok(AblationReport {
        comparison: runner.comparison(cfg)?,
        ablation: runner.ablation(cfg)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub kappa: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// `λ` with the highest kappa; the first one on ties.
    pub best_lambda: f64,
}

pub fn sweep_lambda<T: Float>(
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    log: impl FnMut(&str, &EpochRecord),
) -> Result<SweepReport> {
    let mut runner = Runner::<T>::new(train, val).with_log(log);
    let model = Variant::DualCross
        .model_config(&cfg.model)
        .expect("trained variant");
    let mut points = Vec::new();
    for &lambda in &cfg.sweep.lambdas {
        let train_cfg = TrainConfig {
            lambda,
            ..cfg.train.clone()
        };
        let state = runner.run(&format!("lambda={lambda}"), &model, &train_cfg)?;
        let report = state
            .best
            .as_ref()
            .expect("at least one epoch ran")
            .report
            .clone();
        points.push(SweepPoint {
            lambda,
            kappa: report.kappa,
            accuracy: report.accuracy,
            macro_f1: report.macro_f1,
            report,
        });
    }
    let best = points
        .iter()
        .fold(None::<&SweepPoint>, |acc, p| match acc {
            Some(a) if a.kappa >= p.kappa => Some(a),
            _ => Some(p),
        })
        .expect("validated non-empty sweep");
    Ok(SweepReport {
        best_lambda: best.lambda,
        points,
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn tick(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        ""
    }
}

/// Aligned text table. Metrics are shown as percentages.
pub fn format_rows(rows: &[Row]) -> String {
    let with_flags = rows.iter().any(|r| r.flags.is_some());
    let mut header: Vec<String> = vec!["ID".into(), "Method".into()];
    if with_flags {
        header.extend(["L_cf", "L_if", "LP", "Fusion"].map(String::from));
    }
    header.extend(["Kappa", "Acc", "F1"].map(String::from));
    let mut table = vec![header];
    for r in rows {
        let mut line = vec![r.id.to_string(), r.name.clone()];
        if let Some(f) = r.flags {
            line.extend([
                tick(f.use_cf_loss).into(),
                tick(f.use_if_loss).into(),
                tick(f.projection).into(),
                f.fusion.to_string(),
            ]);
        } else if with_flags {
            line.extend(std::iter::repeat_n(String::new(), 4));
        }
        line.extend([pct(r.kappa), pct(r.accuracy), pct(r.macro_f1)]);
        table.push(line);
    }
    align(&table)
}

pub fn format_sweep(s: &SweepReport) -> String {
    let mut table = vec![["lambda", "Kappa", "Acc", "F1"].map(String::from).to_vec()];
    for p in &s.points {
        table.push(vec![
            format!("{:.1}", p.lambda),
            pct(p.kappa),
            pct(p.accuracy),
            pct(p.macro_f1),
        ]);
    }
    format!("{}best lambda: {:.1}\n", align(&table), s.best_lambda)
}

fn align(table: &[Vec<String>]) -> String {
    let cols = table.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| {
            table
                .iter()
                .filter_map(|r| r.get(c))
                .map(|s| s.chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(s, &w)| format!("{s:<w$}"))
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * cols.saturating_sub(1)));
            out.push('\n');
        }
    }
    out
}
