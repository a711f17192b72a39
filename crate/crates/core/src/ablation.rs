//! Experiment matrices: loss toggles, fusion strategies, masking combinations
//! and mask ratios, each trained and evaluated with the base seed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::eval::{RetrievalReport, CSV_HEADER};
use crate::fusion::FusionKind;
use crate::inference::evaluate;
use crate::losses::LossKind;
use crate::synthdata::Split;
use crate::text::MaskKind;
use crate::train::{train_stage1, train_stage2};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Matrix {
    /// Cumulative loss terms, then ATF (rows 0 to 6).
    Table4,
    /// Cat, Add and ATF fusion with every loss enabled.
    Table5,
    /// Branch masking combinations.
    Table6,
    /// Mask ratios 0.05 to 0.25.
    MaskRatio,
}

impl Matrix {
    pub const ALL: [Matrix; 4] = [Matrix::Table4, Matrix::Table5, Matrix::Table6, Matrix::MaskRatio];

    pub fn name(self) -> &'static str {
        match self {
            Matrix::Table4 => "table4",
            Matrix::Table5 => "table5",
            Matrix::Table6 => "table6",
            Matrix::MaskRatio => "maskratio",
        }
    }
}

impl fmt::Display for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Matrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Matrix::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown matrix {s:?}")))
    }
}

pub const MASK_RATIOS: [f64; 5] = [0.05, 0.10, 0.15, 0.20, 0.25];

/// Loss sets of the cumulative rows 0 to 5.
pub const TABLE4_LOSSES: [&[LossKind]; 6] = [
    &[LossKind::Sdm],
    &[LossKind::Sdm, LossKind::Ar],
    &[LossKind::Sdm, LossKind::Ar, LossKind::Bia],
    &[LossKind::Sdm, LossKind::Ar, LossKind::Bia, LossKind::Crs],
    &[LossKind::Sdm, LossKind::Ar, LossKind::Bia, LossKind::Crs, LossKind::Uib],
    &LossKind::ALL,
];

pub const TABLE6_MASKS: [[MaskKind; 3]; 4] = [
    [MaskKind::Rm, MaskKind::Rm, MaskKind::Rm],
    [MaskKind::Rm, MaskKind::Rm, MaskKind::Cum],
    [MaskKind::Crm, MaskKind::Rm, MaskKind::Rm],
    [MaskKind::Crm, MaskKind::Rm, MaskKind::Cum],
];

/// One configuration of a matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
    /// Followed by the ATF stage.
    pub two_stage: bool,
}

/// The configurations of `matrix`, derived from `base` (whose loss weights,
/// temperatures and schedule carry over).
pub fn variants(matrix: Matrix, base: &RunConfig) -> Vec<Variant> {
    let with_losses = |kinds: &[LossKind]| {
        let mut cfg = base.clone();
        for kind in LossKind::ALL {
            cfg.loss.switch_mut(kind).enabled = kinds.contains(&kind);
        }
        cfg
    };
    let full = with_losses(&LossKind::ALL);
    match matrix {
        Matrix::Table4 => {
            let mut out: Vec<Variant> = TABLE4_LOSSES
                .iter()
                .enumerate()
                .map(|(i, kinds)| Variant { name: format!("no{i}"), config: with_losses(kinds), two_stage: false })
                .collect();
            out.push(Variant { name: "no6".into(), config: full, two_stage: true });
            out
        }
        Matrix::Table5 => {
            let mut cat = full.clone();
            cat.train.stage1_fusion = FusionKind::Cat;
            let mut add = full.clone();
            add.train.stage1_fusion = FusionKind::Add;
            vec![
                Variant { name: "cat".into(), config: cat, two_stage: false },
                Variant { name: "add".into(), config: add.clone(), two_stage: false },
                Variant { name: "atf".into(), config: add, two_stage: true },
            ]
        }
        Matrix::Table6 => TABLE6_MASKS
            .iter()
            .map(|kinds| {
                let mut cfg = full.clone();
                cfg.train.mask_kinds = *kinds;
                let name = kinds.iter().map(|k| k.to_string()).collect::<Vec<_>>().join("-").to_lowercase();
                Variant { name, config: cfg, two_stage: true }
            })
            .collect(),
        Matrix::MaskRatio => MASK_RATIOS
            .iter()
            .map(|&r| {
                let mut cfg = full.clone();
                cfg.train.mask_ratio = r;
                Variant { name: format!("ratio{r:.2}"), config: cfg, two_stage: true }
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub report: RetrievalReport,
}

/// Key under which stage-1 results are shared: the config with the fields
/// only stage 2 reads reset.
fn stage1_key(cfg: &RunConfig) -> Result<String> {
    let mut c = cfg.clone();
    let defaults = RunConfig::default();
    c.train.stage2_epochs = defaults.train.stage2_epochs;
    c.train.stage2_lr = defaults.train.stage2_lr;
    c.to_toml()
}

/// Trains and evaluates every variant on the test split. Variants whose
/// stage-1 configuration coincides share one stage-1 run.
pub fn run_matrix(
    corpus: &Corpus,
    base: &RunConfig,
    matrix: Matrix,
    progress: &mut dyn FnMut(&str, &RetrievalReport),
) -> Result<Vec<AblationRow>> {
    let mut stage1: BTreeMap<String, Checkpoint> = BTreeMap::new();
    let mut rows = Vec::new();
    for v in variants(matrix, base) {
        v.config.validate()?;
        let key = stage1_key(&v.config)?;
        let ck = match stage1.get(&key) {
            Some(ck) => ck.clone(),
            None => {
                let ck = train_stage1(corpus, &v.config)?.checkpoint;
                stage1.insert(key, ck.clone());
                ck
            }
        };
        let ck = if v.two_stage { train_stage2(ck, corpus, &v.config)?.checkpoint } else { ck };
        let report = evaluate(&ck.model, ck.fusion, corpus, Split::Test)?;
        progress(&v.name, &report);
        rows.push(AblationRow { name: v.name, report });
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.report.csv_row(&r.name));
        s.push('\n');
    }
    s
}
