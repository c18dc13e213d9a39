//! Ablation variants and the harness that trains them side by side.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::synthetic_data::Dataset;
use crate::training::{train, TrainOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One token per frame, no feature image and no CRM.
    BaselineNaive,
    /// Feature image patches without channel rearrangement.
    HmrvitNocrm,
    HmrvitFull,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::BaselineNaive, Variant::HmrvitNocrm, Variant::HmrvitFull];

    pub fn name(self) -> &'static str {
        match self {
            Variant::BaselineNaive => "baseline_naive",
            Variant::HmrvitNocrm => "hmrvit_nocrm",
            Variant::HmrvitFull => "hmrvit_full",
        }
    }

    pub fn has_crm(self) -> bool {
        self == Variant::HmrvitFull
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown variant `{s}`")))
    }
}

/// Patch sizes swept by the harness at toy scale.
pub const PATCH_T: [usize; 2] = [3, 5];
pub const PATCH_C: [usize; 2] = [8, 16];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    /// `variant` or `variant@ptxpc` for patch cells.
    pub cell: String,
    pub seed: u64,
    pub report: Option<EvalReport>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl AblationTable {
    pub const HEADER: &'static str = "cell,seed,pve_mm,mpjpe_mm,pa_mpjpe_mm,n,status";

    pub fn cells(&self) -> Vec<String> {
        let mut cells: Vec<String> = Vec::new();
        for r in &self.rows {
            if !cells.contains(&r.cell) {
                cells.push(r.cell.clone());
            }
        }
        cells
    }

    /// CSV with one row per (cell, seed) followed by per-cell medians.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("# toy patch widths 8 and 16 stand in for 128 and 512 at C=2048\n");
        out.push_str(Self::HEADER);
        out.push('\n');
        let fmt_row = |cell: &str, seed: &str, r: &EvalReport, status: &str| {
            format!(
                "{cell},{seed},{:.6},{:.6},{:.6},{},{status}\n",
                r.pve_mm, r.mpjpe_mm, r.pa_mpjpe_mm, r.n
            )
        };
        for row in &self.rows {
            match (&row.report, &row.failure) {
                (Some(r), _) => out.push_str(&fmt_row(&row.cell, &row.seed.to_string(), r, "ok")),
                (None, f) => out.push_str(&format!(
                    "{},{},,,,,failed: {}\n",
                    row.cell,
                    row.seed,
                    f.as_deref().unwrap_or("unknown").replace([',', '\n'], ";")
                )),
            }
        }
        for cell in self.cells() {
            let ok: Vec<&EvalReport> = self
                .rows
                .iter()
                .filter(|r| r.cell == cell)
                .filter_map(|r| r.report.as_ref())
                .collect();
            let m = EvalReport {
                config_id: cell.clone(),
                seed: 0,
                pve_mm: median(ok.iter().map(|r| r.pve_mm).collect()),
                mpjpe_mm: median(ok.iter().map(|r| r.mpjpe_mm).collect()),
                pa_mpjpe_mm: median(ok.iter().map(|r| r.pa_mpjpe_mm).collect()),
                n: ok.len(),
            };
            out.push_str(&fmt_row(&cell, "median", &m, "ok"));
        }
        out
    }
}

/// Trains every variant (at the configured patch size) and every full-model
/// patch cell for each seed on the same dataset and batch stream.
pub fn run_ablation(base: &Config, data: &Dataset, seeds: &[u64], out_dir: Option<&Path>) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("ablation needs at least one seed".into()));
    }
    let mut jobs: Vec<(String, Config)> = Variant::ALL
        .iter()
        .map(|&v| {
            (
                v.name().to_string(),
                Config {
                    variant: v,
                    ..base.clone()
                },
            )
        })
        .collect();
    for pt in PATCH_T {
        for pc in PATCH_C {
            jobs.push((
                format!("{}@{pt}x{pc}", Variant::HmrvitFull),
                Config {
                    variant: Variant::HmrvitFull,
                    patch_t: pt,
                    patch_c: pc,
                    ..base.clone()
                },
            ));
        }
    }
    let mut rows = Vec::new();
    for (cell, cfg) in &jobs {
        for &seed in seeds {
            let cfg = Config {
                seed,
                ..cfg.clone()
            };
            let opts = TrainOptions {
                out_dir: out_dir.map(|d| d.join(format!("{cell}_seed{seed}").replace('@', "_"))),
                quiet: true,
            };
            let result = cfg.validate().and_then(|_| train(&cfg, data, &opts));
            rows.push(match result {
                Ok(summary) => AblationRow {
                    cell: cell.clone(),
                    seed,
                    report: Some(EvalReport {
                        config_id: cell.clone(),
                        seed,
                        ..summary.final_eval
                    }),
                    failure: None,
                },
                Err(e) => AblationRow {
                    cell: cell.clone(),
                    seed,
                    report: None,
                    failure: Some(e.to_string()),
                },
            });
        }
    }
    Ok(AblationTable { rows })
}
