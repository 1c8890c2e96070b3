//! Ablation ladder: rows of flag settings over a shared base configuration,
//! each trained once per seed and scored on the target test split.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::trainer::{run, TrainData, SOURCE_TEST, TARGET_TEST};

/// One ladder row; only the ablation flags may differ between rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowSpec {
    pub name: String,
    pub symmetric: bool,
    pub feature_align: bool,
    pub ddsm: bool,
    pub dusm: bool,
}

impl RowSpec {
    fn new(name: &str, symmetric: bool, feature_align: bool, ddsm: bool, dusm: bool) -> Self {
        RowSpec {
            name: name.to_string(),
            symmetric,
            feature_align,
            ddsm,
            dusm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ladder {
    /// Settings shared by every row; its flags and seeds are overridden.
    #[serde(default)]
    pub base: RunConfig,
    pub rows: Vec<RowSpec>,
}

impl Ladder {
    /// The five-row ladder: source only, then symmetric encoders, feature
    /// alignment, gating and attention added one at a time.
    pub fn standard(base: RunConfig) -> Self {
        Ladder {
            base,
            rows: vec![
                RowSpec::new("w/o DA", false, false, false, false),
                RowSpec::new("+Symmetric", true, false, false, false),
                RowSpec::new("+FA", true, true, false, false),
                RowSpec::new("+DDSM", true, true, true, false),
                RowSpec::new("+DUSM", true, true, true, true),
            ],
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let l: Ladder = serde_json::from_str(text).map_err(|e| Error::Config(format!("ladder: {e}")))?;
        if l.rows.is_empty() {
            return Err(Error::Config("ladder has no rows".into()));
        }
        for i in 0..l.rows.len() {
            l.config(i, 0)?;
        }
        Ok(l)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ladder serializes")
    }

    /// Resolved configuration of row `index` under `seed`, which drives both
    /// initialization and batch order.
    pub fn config(&self, index: usize, seed: u64) -> Result<RunConfig> {
        let row = self
            .rows
            .get(index)
            .ok_or_else(|| Error::Config(format!("ladder has no row {index}")))?;
        let cfg = RunConfig {
            run_id: format!("row{index}-seed{seed}"),
            symmetric: row.symmetric,
            feature_align: row.feature_align,
            ddsm: row.ddsm,
            dusm: row.dusm,
            init_seed: seed,
            data_seed: seed,
            ..self.base.clone()
        };
        cfg.validate().map_err(|e| Error::Config(format!("ladder row {:?}: {e}", row.name)))?;
        Ok(cfg)
    }
}

/// Final target/source scores of one run, or why it failed.
#[derive(Debug, Clone, PartialEq)]
pub enum RunResult {
    Done {
        target_iou: f64,
        target_miou: f64,
        source_iou: f64,
    },
    Failed(String),
}

impl RunResult {
    pub fn target_iou(&self) -> Option<f64> {
        match self {
            RunResult::Done { target_iou, .. } => Some(*target_iou),
            RunResult::Failed(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowReport {
    pub name: String,
    /// `(seed, result)` in the order the seeds were given.
    pub runs: Vec<(u64, RunResult)>,
}

impl RowReport {
    /// Mean of the completed runs; `None` if every run failed.
    fn mean(&self, f: impl Fn(&RunResult) -> Option<f64>) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter_map(|(_, r)| f(r)).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn mean_target_iou(&self) -> Option<f64> {
        self.mean(RunResult::target_iou)
    }

    pub fn mean_target_miou(&self) -> Option<f64> {
        self.mean(|r| match r {
            RunResult::Done { target_miou, .. } => Some(*target_miou),
            RunResult::Failed(_) => None,
        })
    }

    pub fn failed(&self) -> bool {
        self.runs.iter().any(|(_, r)| matches!(r, RunResult::Failed(_)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationReport {
    pub rows: Vec<RowReport>,
}

pub const REPORT_HEADER: &str = "row,name,seed,status,target_iou_lesion,target_miou,source_iou_lesion";

impl AblationReport {
    pub fn all_failed(&self) -> bool {
        self.rows.iter().all(|r| r.runs.iter().all(|(_, x)| matches!(x, RunResult::Failed(_))))
    }

    /// One line per run followed by one `mean` line per row.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:?}"));
        for (i, row) in self.rows.iter().enumerate() {
            for (seed, r) in &row.runs {
                match r {
                    RunResult::Done {
                        target_iou,
                        target_miou,
                        source_iou,
                    } => writeln!(s, "{i},{},{seed},ok,{target_iou:?},{target_miou:?},{source_iou:?}", row.name),
                    RunResult::Failed(_) => writeln!(s, "{i},{},{seed},failed,,,", row.name),
                }
                .expect("string write");
            }
            let status = if row.failed() { "partial" } else { "ok" };
            writeln!(s, "{i},{},mean,{status},{},{},", row.name, opt(row.mean_target_iou()), opt(row.mean_target_miou()))
                .expect("string write");
        }
        s
    }

    /// Target lesion IoU in percent per seed, plus row means.
    pub fn to_table(&self) -> String {
        let seeds: Vec<u64> = self.rows.first().map(|r| r.runs.iter().map(|(s, _)| *s).collect()).unwrap_or_default();
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(4);
        let mut s = format!("{:<width$}", "row");
        for seed in &seeds {
            write!(s, "  {:>8}", format!("seed {seed}")).expect("string write");
        }
        s.push_str("  mean IoU  mean mIoU\n");
        let cell = |v: Option<f64>| v.map_or("failed".to_string(), |x| format!("{:.2}", 100.0 * x));
        for row in &self.rows {
            write!(s, "{:<width$}", row.name).expect("string write");
            for (_, r) in &row.runs {
                write!(s, "  {:>8}", cell(r.target_iou())).expect("string write");
            }
            writeln!(s, "  {:>8}  {:>9}", cell(row.mean_target_iou()), cell(row.mean_target_miou())).expect("string write");
        }
        for row in self.rows.iter() {
            for (seed, r) in &row.runs {
                if let RunResult::Failed(msg) = r {
                    writeln!(s, "{} / seed {seed} failed: {msg}", row.name).expect("string write");
                }
            }
        }
        s
    }
}

/// Trains every row under every seed on the same data. A failing run is
/// recorded and the ladder continues.
pub fn run_ablation(
    ladder: &Ladder,
    data: &TrainData,
    seeds: &[u64],
    progress: &mut dyn FnMut(&str, u64, &RunResult),
) -> Result<AblationReport> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(ladder.rows.len());
    for (i, spec) in ladder.rows.iter().enumerate() {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let result = match score(ladder.config(i, seed)?, data) {
                Ok(r) => r,
                Err(e) => RunResult::Failed(e.to_string()),
            };
            progress(&spec.name, seed, &result);
            runs.push((seed, result));
        }
        rows.push(RowReport {
            name: spec.name.clone(),
            runs,
        });
    }
    Ok(AblationReport { rows })
}

fn score(config: RunConfig, data: &TrainData) -> Result<RunResult> {
    let out = run(config, data)?;
    let missing = |set: &str| Error::Config(format!("run produced no {set} metrics"));
    let t = out.final_metrics(TARGET_TEST).ok_or_else(|| missing(TARGET_TEST))?;
    let s = out.final_metrics(SOURCE_TEST).ok_or_else(|| missing(SOURCE_TEST))?;
    Ok(RunResult::Done {
        target_iou: t.iou_lesion,
        target_miou: t.miou,
        source_iou: s.iou_lesion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_ladder_resolves() {
        let l = Ladder::standard(RunConfig::default());
        assert_eq!(l.rows.len(), 5);
        let c0 = l.config(0, 7).unwrap();
        assert_eq!((c0.init_seed, c0.data_seed, c0.symmetric), (7, 7, false));
        let plain = RunConfig {
            run_id: c0.run_id.clone(),
            init_seed: 7,
            data_seed: 7,
            ..RunConfig::source_only()
        };
        assert_eq!(c0, plain);
        assert!(l.config(4, 7).unwrap().dusm);
        assert_eq!(Ladder::from_json(&l.to_json()).unwrap(), l);
    }

    #[test]
    fn rows_only_carry_flags() {
        let bad = r#"{"rows": [{"name": "x", "symmetric": true, "feature_align": false, "ddsm": false, "dusm": false, "lambda_es": 1.0}]}"#;
        assert!(Ladder::from_json(bad).unwrap_err().to_string().contains("lambda_es"));
        let invalid = r#"{"rows": [{"name": "x", "symmetric": false, "feature_align": true, "ddsm": false, "dusm": false}]}"#;
        assert!(matches!(Ladder::from_json(invalid), Err(Error::Config(_))));
        assert!(Ladder::from_json(r#"{"rows": []}"#).is_err());
    }

    fn report() -> AblationReport {
        let done = |t: f64| RunResult::Done {
            target_iou: t,
            target_miou: t / 2.0,
            source_iou: 0.9,
        };
        AblationReport {
            rows: vec![
                RowReport {
                    name: "a".into(),
                    runs: vec![(1, done(0.5)), (2, done(0.25))],
                },
                RowReport {
                    name: "b".into(),
                    runs: vec![(1, RunResult::Failed("boom".into())), (2, done(0.75))],
                },
            ],
        }
    }

    #[test]
    fn means_skip_failures() {
        let r = report();
        assert_eq!(r.rows[0].mean_target_iou(), Some(0.375));
        assert_eq!(r.rows[1].mean_target_iou(), Some(0.75));
        assert!(r.rows[1].failed() && !r.all_failed());
    }

    #[test]
    fn csv_and_table_layout() {
        let csv = report().to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines[1], "0,a,1,ok,0.5,0.25,0.9");
        assert_eq!(lines[3], "0,a,mean,ok,0.375,0.1875,");
        assert_eq!(lines[4], "1,b,1,failed,,,");
        assert_eq!(lines[6], "1,b,mean,partial,0.75,0.375,");
        let table = report().to_table();
        assert!(table.contains("37.50") && table.contains("failed") && table.contains("boom"), "{table}");
    }
}
