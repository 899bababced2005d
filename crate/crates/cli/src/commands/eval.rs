//! `eval`: volumetric scores and trajectory clearance comparisons.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vertplan_core::eval::{compare_volumes, voxelize_mesh, MetricReport};
use vertplan_core::geometry::Vec3;
use vertplan_core::io::{read_json, read_ply, read_trajectories, write_json};
use vertplan_core::mesh::TriangleMesh;
use vertplan_core::planning::clearance;
use vertplan_core::ssm::{Annotations, Side};

use super::{eval_error, plan_error, ssm_error};
use crate::error::{Category, CliError, ResultExt};
use crate::manifest::RunContext;

pub struct EvalInputs {
    pub truth: Option<PathBuf>,
    pub estimate: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub plans: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideOutcome {
    pub side: Side,
    pub planned: bool,
    pub clearance_mm: Option<f64>,
    pub breach: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutcome {
    pub method: String,
    pub sides: Vec<SideOutcome>,
    /// Both sides planned and neither breaches.
    pub success: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseReport {
    pub case: String,
    pub metrics: Option<MetricReport>,
    pub methods: Vec<MethodOutcome>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub successes: usize,
    pub cases: usize,
    pub fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub cases: usize,
    pub median_dice: f64,
    pub median_nsd: f64,
    pub median_hd95_mm: f64,
    pub median_masd_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub clearance_threshold_mm: f64,
    pub voxel_spacing_mm: f64,
    pub nsd_tau_mm: f64,
    pub cases: Vec<CaseReport>,
    pub summary: Vec<MethodSummary>,
    pub metrics: Option<MetricSummary>,
}

fn parse_plan(spec: &str) -> Result<(String, PathBuf), CliError> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name.into(), PathBuf::from(path))),
        _ => Err(CliError::new(Category::Usage, format!("--plan {spec:?} is not name=path"))),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn evaluate_case(
    ctx: &mut RunContext,
    name: &str,
    base: &Path,
    inputs: &EvalInputs,
    plans: &[(String, PathBuf)],
    annotations: Option<&Annotations>,
    lenient: bool,
) -> Result<CaseReport, CliError> {
    let truth_path = base.join(inputs.truth.clone().unwrap_or_else(|| PathBuf::from("truth.ply")));
    let (truth, faces) = read_ply(ctx.input(&truth_path)?)?;
    let estimate = inputs.estimate.as_ref().map(|e| base.join(e));
    let metrics = match estimate.filter(|e| !lenient || e.exists()) {
        Some(e) => {
            let (est, est_faces) = read_ply(ctx.input(&e)?)?;
            let spacing = ctx.config.eval.voxel_spacing;
            let a = voxelize_mesh(&TriangleMesh::new(est, est_faces), spacing).map_err(eval_error)?;
            let b = voxelize_mesh(&TriangleMesh::new(truth.clone(), faces), spacing).map_err(eval_error)?;
            Some(compare_volumes(&a, &b, ctx.config.eval.nsd_tau).map_err(eval_error)?)
        }
        None => None,
    };
    let mut methods = Vec::new();
    if !plans.is_empty() {
        let ann = annotations.ok_or_else(|| CliError::new(Category::Usage, "--plan needs --annotations"))?;
        ann.validate(truth.len()).map_err(ssm_error)?;
        let threshold = ctx.config.plan.clearance_threshold;
        for (method, rel) in plans {
            let path = base.join(rel);
            let records = if path.exists() {
                read_trajectories(ctx.input(&path)?)?
            } else {
                Vec::new()
            };
            let mut sides = Vec::with_capacity(2);
            for side in Side::BOTH {
                let ped: Vec<Vec3> = ann.pedicle(side).iter().map(|&i| truth[i]).collect();
                let outcome = match records.iter().find(|r| r.side == side) {
                    Some(r) => {
                        let c = clearance(&r.trajectory(), &ped, threshold).map_err(plan_error)?;
                        SideOutcome {
                            side,
                            planned: true,
                            clearance_mm: Some(c.min_axis_distance),
                            breach: c.breach,
                        }
                    }
                    None => SideOutcome {
                        side,
                        planned: false,
                        clearance_mm: None,
                        breach: true,
                    },
                };
                sides.push(outcome);
            }
            let success = sides.iter().all(|s| s.planned && !s.breach);
            methods.push(MethodOutcome {
                method: method.clone(),
                sides,
                success,
            });
        }
    }
    Ok(CaseReport {
        case: name.into(),
        metrics,
        methods,
    })
}

fn case_dirs(root: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let mut dirs: Vec<(String, PathBuf)> = fs::read_dir(root)
        .context(Category::Io, &format!("listing {}", root.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?.to_string();
            name.starts_with("case_").then_some((name, p))
        })
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(CliError::new(
            Category::Input,
            format!("{} contains no case_* directories", root.display()),
        ));
    }
    Ok(dirs)
}

pub fn summarize(cases: &[CaseReport], methods: &[String]) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|m| {
            let successes = cases
                .iter()
                .filter(|c| c.methods.iter().any(|o| &o.method == m && o.success))
                .count();
            MethodSummary {
                method: m.clone(),
                successes,
                cases: cases.len(),
                fraction: if cases.is_empty() { 0.0 } else { successes as f64 / cases.len() as f64 },
            }
        })
        .collect()
}

fn side_cell(s: &SideOutcome) -> String {
    let tag = match s.side {
        Side::Left => 'L',
        Side::Right => 'R',
    };
    match s.clearance_mm {
        Some(c) => format!("{tag} {c:5.2}{}", if s.breach { "!" } else { " " }),
        None => format!("{tag}   -- "),
    }
}

/// Plain-text table: one row per case, one column per method.
pub fn render_table(report: &ComparisonReport) -> String {
    let mut out = String::new();
    let methods: Vec<&str> = report.summary.iter().map(|s| s.method.as_str()).collect();
    let _ = write!(out, "{:<10}", "case");
    for m in &methods {
        let _ = write!(out, " | {m:<22}");
    }
    if report.metrics.is_some() {
        let _ = write!(out, " | {:>6}", "dice");
    }
    out.push('\n');
    for c in &report.cases {
        let _ = write!(out, "{:<10}", c.case);
        for o in &c.methods {
            let cells: Vec<String> = o.sides.iter().map(side_cell).collect();
            let verdict = if o.success { "ok" } else { "FAIL" };
            let _ = write!(out, " | {:<22}", format!("{} {verdict}", cells.join(" ")));
        }
        if let Some(m) = &c.metrics {
            let _ = write!(out, " | {:>6.3}", m.dice);
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<10}", "success");
    for s in &report.summary {
        let _ = write!(out, " | {:<22}", format!("{}/{} ({:.2})", s.successes, s.cases, s.fraction));
    }
    out.push('\n');
    if let Some(m) = &report.metrics {
        let _ = writeln!(
            out,
            "median over {} cases: dice {:.3}, nsd {:.3} (tau {} mm), hd95 {:.2} mm, masd {:.2} mm",
            m.cases, m.median_dice, m.median_nsd, report.nsd_tau_mm, m.median_hd95_mm, m.median_masd_mm
        );
    }
    let _ = writeln!(
        out,
        "clearance measured from the cannula axis; '!' marks a breach (< {} mm)",
        report.clearance_threshold_mm
    );
    out
}

pub fn eval(ctx: &mut RunContext, inputs: &EvalInputs, cases: Option<&Path>) -> Result<(), CliError> {
    let plans = inputs.plans.iter().map(|s| parse_plan(s)).collect::<Result<Vec<_>, _>>()?;
    if plans.is_empty() && inputs.estimate.is_none() {
        return Err(CliError::new(Category::Usage, "nothing to evaluate: give --estimate and/or --plan"));
    }
    let annotations: Option<Annotations> = match &inputs.annotations {
        Some(p) => Some(read_json(ctx.input(p)?)?),
        None => None,
    };
    let reports = match cases {
        Some(root) => {
            let mut out = Vec::new();
            for (name, dir) in case_dirs(root)? {
                out.push(evaluate_case(ctx, &name, &dir, inputs, &plans, annotations.as_ref(), true)?);
            }
            out
        }
        None => {
            if inputs.truth.is_none() {
                return Err(CliError::new(Category::Usage, "--truth or --cases is required"));
            }
            vec![evaluate_case(ctx, "case", Path::new(""), inputs, &plans, annotations.as_ref(), false)?]
        }
    };
    let method_names: Vec<String> = plans.iter().map(|(m, _)| m.clone()).collect();
    let scored: Vec<&MetricReport> = reports.iter().filter_map(|c| c.metrics.as_ref()).collect();
    let metrics = (!scored.is_empty()).then(|| MetricSummary {
        cases: scored.len(),
        median_dice: median(scored.iter().map(|m| m.dice).collect()),
        median_nsd: median(scored.iter().map(|m| m.nsd).collect()),
        median_hd95_mm: median(scored.iter().map(|m| m.hd95_mm).collect()),
        median_masd_mm: median(scored.iter().map(|m| m.masd_mm).collect()),
    });
    let report = ComparisonReport {
        clearance_threshold_mm: ctx.config.plan.clearance_threshold,
        voxel_spacing_mm: ctx.config.eval.voxel_spacing,
        nsd_tau_mm: ctx.config.eval.nsd_tau,
        summary: summarize(&reports, &method_names),
        cases: reports,
        metrics,
    };
    let table = render_table(&report);
    write_json(&ctx.output("comparison.json")?, &report)?;
    let txt = ctx.output("comparison.txt")?;
    fs::write(&txt, &table).context(Category::Io, &txt.display().to_string())?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(method: &str, success: bool) -> MethodOutcome {
        MethodOutcome {
            method: method.into(),
            sides: Side::BOTH
                .iter()
                .map(|&side| SideOutcome {
                    side,
                    planned: true,
                    clearance_mm: Some(if success { 3.0 } else { 1.0 }),
                    breach: !success,
                })
                .collect(),
            success,
        }
    }

    #[test]
    fn summary_counts_successes_per_method() {
        let cases: Vec<CaseReport> = [(true, false), (true, true), (false, false)]
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| CaseReport {
                case: format!("case_{i}"),
                metrics: None,
                methods: vec![outcome("fit", a), outcome("geoplan", b)],
            })
            .collect();
        let s = summarize(&cases, &["fit".into(), "geoplan".into()]);
        assert_eq!((s[0].successes, s[0].cases), (2, 3));
        assert_eq!(s[1].successes, 1);
        assert!((s[1].fraction - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn plan_specs_need_a_name_and_path() {
        assert_eq!(parse_plan("fit=a/b.json").unwrap().0, "fit");
        assert!(parse_plan("fit").is_err());
        assert!(parse_plan("=x").is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
