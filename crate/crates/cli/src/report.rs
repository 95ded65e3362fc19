//! Aggregation of run manifests into a summary document: pass/fail counts
//! per verification family, worst margins with witnesses (failures first),
//! and observed convergence orders across refinement series.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use mbsde_core::error::{Error, Result};

use crate::runner::RunManifest;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FamilySummary {
    pub family: String,
    pub passed: usize,
    pub failed: usize,
    pub worst_margin: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderRow {
    pub scenario: String,
    pub metric: String,
    pub coarse: f64,
    pub fine: f64,
    /// log2(coarse / fine): ~1 for first order in dt under dt-halving
    pub observed_order: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportSummary {
    pub manifests: usize,
    pub all_pass: bool,
    pub failures: Vec<String>,
    pub families: Vec<FamilySummary>,
    pub orders: Vec<OrderRow>,
}

pub fn collect_manifests(dir: &Path) -> Result<Vec<RunManifest>> {
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::Config(format!("read {dir:?}: {e}")))?;
    let mut paths: Vec<_> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.ends_with(".manifest.json"))
                .unwrap_or(false)
        })
        .collect();
    paths.sort();
    for p in paths {
        let text = fs::read_to_string(&p).map_err(|e| Error::Config(e.to_string()))?;
        if let Ok(m) = serde_json::from_str::<RunManifest>(&text) {
            out.push(m);
        }
    }
    if out.is_empty() {
        return Err(Error::Statistics { needed: 1, got: 0 });
    }
    Ok(out)
}

pub fn summarize(manifests: &[RunManifest]) -> ReportSummary {
    let mut families: BTreeMap<String, (usize, usize, Option<f64>)> = BTreeMap::new();
    let mut failures = Vec::new();
    for m in manifests {
        if !m.overall_pass {
            failures.push(format!(
                "{} (stage: {})",
                m.scenario,
                m.failure_stage.clone().unwrap_or_else(|| "checks".into())
            ));
        }
        let z = families.entry("z-bound".into()).or_insert((0, 0, None));
        if m.z_bound.pass {
            z.0 += 1;
        } else {
            z.1 += 1;
        }
        if let Some(di) = &m.domain_invariance {
            let e = families
                .entry("domain-invariance".into())
                .or_insert((0, 0, None));
            if di.pass {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
            let overshoot = di.level - di.max_chi;
            e.2 = Some(e.2.map_or(overshoot, |w: f64| w.min(overshoot)));
        }
        for v in &m.verifications {
            let e = families.entry(v.name.clone()).or_insert((0, 0, None));
            if v.pass {
                e.0 += 1;
            } else {
                e.1 += 1;
            }
            if let Some(margin) = v
                .detail
                .get("report")
                .and_then(|r| r.get("worst_margin"))
                .and_then(|x| x.as_f64())
                .or_else(|| v.detail.get("worst_margin").and_then(|x| x.as_f64()))
            {
                e.2 = Some(e.2.map_or(margin, |w: f64| w.min(margin)));
            }
        }
    }

    // refinement series: base name and base@rK pairs
    let mut orders = Vec::new();
    for m in manifests {
        if let Some((base, _)) = m.scenario.split_once("@r") {
            if let Some(coarse) = manifests.iter().find(|c| c.scenario == base) {
                if let (Some(a), Some(b)) = (&coarse.residual, &m.residual) {
                    if a.median > 0.0 && b.median > 0.0 {
                        orders.push(OrderRow {
                            scenario: base.to_string(),
                            metric: "residual-median".into(),
                            coarse: a.median,
                            fine: b.median,
                            observed_order: (a.median / b.median).log2(),
                        });
                    }
                }
                if let (Some(a), Some(b)) = (coarse.oracle_sup_error, m.oracle_sup_error) {
                    if a > 0.0 && b > 0.0 {
                        orders.push(OrderRow {
                            scenario: base.to_string(),
                            metric: "oracle-sup-error".into(),
                            coarse: a,
                            fine: b,
                            observed_order: (a / b).log2(),
                        });
                    }
                }
            }
        }
    }

    ReportSummary {
        manifests: manifests.len(),
        all_pass: failures.is_empty(),
        failures,
        families: families
            .into_iter()
            .map(|(family, (passed, failed, worst_margin))| FamilySummary {
                family,
                passed,
                failed,
                worst_margin,
            })
            .collect(),
        orders,
    }
}

pub fn render_text(manifests: &[RunManifest], summary: &ReportSummary) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "manifests: {}  overall: {}\n\n",
        summary.manifests,
        if summary.all_pass { "PASS" } else { "FAIL" }
    ));
    if !summary.failures.is_empty() {
        out.push_str("failures (worst first):\n");
        for f in &summary.failures {
            out.push_str(&format!("  FAIL {f}\n"));
        }
        for m in manifests.iter().filter(|m| !m.overall_pass) {
            if !m.z_bound.pass {
                out.push_str(&format!(
                    "    {}: |Z| max {:.4e} > 1/eps {:.4e} at t = {:.4}, x = {:?}\n",
                    m.scenario, m.z_bound.max_norm, m.z_bound.threshold, m.z_bound.argmax_time,
                    m.z_bound.argmax_point
                ));
            }
            for v in m.verifications.iter().filter(|v| !v.pass) {
                out.push_str(&format!("    {}: {} failed\n", m.scenario, v.name));
            }
        }
        out.push('\n');
    }
    out.push_str("scenario results:\n");
    for m in manifests {
        out.push_str(&format!(
            "  {:28} {}  eps {:.4}  |Z|max {:.4}  residual(med) {}  oracle {}\n",
            m.scenario,
            if m.overall_pass { "pass" } else { "FAIL" },
            m.epsilon_used,
            m.z_bound.max_norm,
            m.residual
                .as_ref()
                .map(|r| format!("{:.3e}", r.median))
                .unwrap_or_else(|| "-".into()),
            m.oracle_sup_error
                .map(|e| format!("{e:.3e}"))
                .unwrap_or_else(|| "-".into()),
        ));
    }
    out.push_str("\nverification families:\n");
    for f in &summary.families {
        out.push_str(&format!(
            "  {:32} pass {:3}  fail {:3}  worst margin {}\n",
            f.family,
            f.passed,
            f.failed,
            f.worst_margin
                .map(|m| format!("{m:.3e}"))
                .unwrap_or_else(|| "-".into())
        ));
    }
    if !summary.orders.is_empty() {
        out.push_str("\nrefinement orders:\n");
        for o in &summary.orders {
            out.push_str(&format!(
                "  {:24} {:18} coarse {:.3e} fine {:.3e} order {:.2}\n",
                o.scenario, o.metric, o.coarse, o.fine, o.observed_order
            ));
        }
    }
    out
}
