//! Attribution statistics over run records: sample mean, stability, best
//! loss, Student-t intervals, one-tailed Mann–Whitney tests and reports.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::protocol::{canonical_json, EvaluationCondition, RunRecord};

fn nonempty(losses: &[f64], need: usize, what: &str) -> Result<()> {
    if losses.len() < need {
        return Err(Error::InsufficientData(format!(
            "{what} needs at least {need} losses, got {}",
            losses.len()
        )));
    }
    if losses.iter().any(|v| !v.is_finite()) {
        return Err(Error::InsufficientData(format!("{what} got a non-finite loss")));
    }
    Ok(())
}

/// Sample mean, accumulated as offsets from the first value so that a
/// constant list returns that constant exactly.
pub fn mu_hat(losses: &[f64]) -> Result<f64> {
    nonempty(losses, 1, "mean")?;
    let x0 = losses[0];
    Ok(x0 + losses.iter().map(|x| x - x0).sum::<f64>() / losses.len() as f64)
}

/// Sample standard deviation with the `K − 1` divisor (Welford's update).
pub fn sigma_hat(losses: &[f64]) -> Result<f64> {
    nonempty(losses, 2, "standard deviation")?;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &x) in losses.iter().enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    Ok((m2 / (losses.len() - 1) as f64).max(0.0).sqrt())
}

/// Minimum loss.
pub fn l_best(losses: &[f64]) -> Result<f64> {
    nonempty(losses, 1, "best loss")?;
    Ok(losses.iter().copied().fold(f64::INFINITY, f64::min))
}

/// CDF of Student's t with `nu` degrees of freedom.
pub fn student_t_cdf(t: f64, nu: f64) -> f64 {
    let tail = 0.5 * beta_reg(nu / 2.0, 0.5, nu / (nu + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Quantile of Student's t, found by bisection on the CDF after bracketing.
pub fn student_t_quantile(p: f64, nu: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0 && nu > 0.0);
    if p < 0.5 {
        return -student_t_quantile(1.0 - p, nu);
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    while student_t_cdf(hi, nu) < p {
        lo = hi;
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if student_t_cdf(mid, nu) < p {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= f64::EPSILON * hi {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// `μ̂ ± t(0.975, K−1) · σ̂ / √K`.
pub fn ci95(losses: &[f64]) -> Result<(f64, f64)> {
    let mu = mu_hat(losses)?;
    let sigma = sigma_hat(losses)?;
    let k = losses.len() as f64;
    let half = student_t_quantile(0.975, k - 1.0) * sigma / k.sqrt();
    Ok((mu - half, mu + half))
}

/// Midranks (1-based) of `values`, and the tie-group sizes.
fn midranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// `U` statistic of `x` against `y` and tie-group sizes of the pooled sample.
pub fn mann_whitney_u(x: &[f64], y: &[f64]) -> (f64, Vec<usize>) {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let n = x.len() as f64;
    let r: f64 = ranks[..x.len()].iter().sum();
    (r - n * (n + 1.0) / 2.0, ties)
}

/// Exact `P(U ≤ u)` for untied samples of sizes `n`, `m`, enumerating every
/// assignment of ranks to the first sample.
pub fn mann_whitney_exact_p(u: f64, n: usize, m: usize) -> f64 {
    fn walk(next: usize, left: usize, total: usize, rank_sum: usize, out: &mut Vec<usize>) {
        if left == 0 {
            out.push(rank_sum);
            return;
        }
        for r in next..=total - left {
            walk(r + 1, left - 1, total, rank_sum + r + 1, out);
        }
    }
    let mut sums = Vec::new();
    walk(0, n, n + m, 0, &mut sums);
    let offset = (n * (n + 1) / 2) as f64;
    let hits = sums.iter().filter(|&&s| s as f64 - offset <= u + 1e-9).count();
    hits as f64 / sums.len() as f64
}

/// Normal approximation of `P(U ≤ u)` with tie-corrected variance and a
/// continuity correction of ½.
pub fn mann_whitney_normal_p(u: f64, n: usize, m: usize, ties: &[usize]) -> f64 {
    let (nf, mf) = (n as f64, m as f64);
    let total = nf + mf;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / (total * (total - 1.0)).max(1.0);
    let var = nf * mf / 12.0 * ((total + 1.0) - tie_term);
    if var <= 0.0 {
        return 1.0;
    }
    let z = (u - nf * mf / 2.0 + 0.5) / var.sqrt();
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Outcome of a one-tailed test that `x` is stochastically smaller than `y`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MannWhitney {
    pub u: f64,
    pub p: f64,
    pub exact: bool,
}

/// One-tailed Mann–Whitney U test. Exact when `n + m ≤ 16` without ties,
/// normal approximation otherwise.
pub fn mann_whitney_one_tailed(x: &[f64], y: &[f64]) -> Result<MannWhitney> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InsufficientData("Mann–Whitney needs two non-empty samples".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InsufficientData("Mann–Whitney got a non-finite value".into()));
    }
    let (u, ties) = mann_whitney_u(x, y);
    let exact = x.len() + y.len() <= 16 && ties.is_empty();
    let p = if exact {
        mann_whitney_exact_p(u, x.len(), y.len())
    } else {
        mann_whitney_normal_p(u, x.len(), y.len(), &ties)
    };
    Ok(MannWhitney { u, p, exact })
}

/// Condition of the best successful run among `records`; ties go to the
/// lexicographically smallest canonical serialization.
pub fn best_config<'a>(records: &[&'a RunRecord], group: &str) -> Result<&'a EvaluationCondition> {
    let mut best: Option<(f64, String, &RunRecord)> = None;
    for r in records {
        let Some(loss) = r.loss() else { continue };
        let key = canonical_json(&r.ec)?;
        let better = match &best {
            None => true,
            Some((bl, bk, _)) => loss < *bl || (loss == *bl && key < *bk),
        };
        if better {
            best = Some((loss, key, r));
        }
    }
    best.map(|(_, _, r)| &r.ec)
        .ok_or_else(|| Error::InsufficientData(format!("group {group} has no successful runs")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStats {
    pub k_ok: usize,
    pub mu: Option<f64>,
    pub sigma: Option<f64>,
    pub lbest: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    /// Runs without a finite loss (diverged or failed).
    pub excluded: usize,
}

impl SummaryStats {
    /// Statistics over the successful runs. Losses are sorted first so the
    /// result does not depend on record order.
    pub fn from_records(records: &[&RunRecord]) -> Self {
        let mut losses: Vec<f64> = records.iter().filter_map(|r| r.loss()).collect();
        losses.sort_by(f64::total_cmp);
        let ci = ci95(&losses).ok();
        SummaryStats {
            k_ok: losses.len(),
            mu: mu_hat(&losses).ok(),
            sigma: sigma_hat(&losses).ok(),
            lbest: l_best(&losses).ok(),
            ci_low: ci.map(|c| c.0),
            ci_high: ci.map(|c| c.1),
            excluded: records.len() - losses.len(),
        }
    }
}

/// Group value of a record for a grouping field: `eo` or any condition field.
pub fn group_value(r: &RunRecord, field: &str) -> Result<String> {
    if field == "eo" {
        return Ok(r.eo.clone());
    }
    r.ec.field(field)
        .ok_or_else(|| Error::Report(format!("unknown grouping field {field:?}")))
}

/// Checks that all records come from one plan and returns its hash.
pub fn single_plan(records: &[RunRecord]) -> Result<&str> {
    let first = records
        .first()
        .ok_or_else(|| Error::Report("no run records".into()))?;
    if let Some(other) = records.iter().find(|r| r.plan_hash != first.plan_hash) {
        return Err(Error::Report(format!(
            "records mix plans {} and {}",
            first.plan_hash, other.plan_hash
        )));
    }
    Ok(&first.plan_hash)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub dataset: String,
    /// `None` on the pooled row.
    pub horizon: Option<usize>,
    pub stats: SummaryStats,
}

impl ReportRow {
    pub fn key(&self) -> String {
        let h = self.horizon.map_or("avg".to_string(), |h| h.to_string());
        format!("{}/{}/{h}", self.group, self.dataset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub plan_hash: String,
    pub group_by: String,
    pub rows: Vec<ReportRow>,
}

/// Per-horizon statistics for every `(group, dataset)` plus an `avg` row that
/// pools the runs of all horizons.
pub fn report(records: &[RunRecord], group_by: &str) -> Result<Report> {
    let plan_hash = single_plan(records)?.to_string();
    let mut groups: Vec<String> = Vec::new();
    let mut cells: BTreeMap<(String, usize), Vec<&RunRecord>> = BTreeMap::new();
    let mut datasets: Vec<String> = Vec::new();
    let mut per: HashMap<(String, String, usize), Vec<&RunRecord>> = HashMap::new();
    for r in records {
        let g = group_value(r, group_by)?;
        if !groups.contains(&g) {
            groups.push(g.clone());
        }
        if !datasets.contains(&r.ec.dataset) {
            datasets.push(r.ec.dataset.clone());
        }
        cells.entry((r.ec.dataset.clone(), r.ec.horizon)).or_default();
        per.entry((g, r.ec.dataset.clone(), r.ec.horizon)).or_default().push(r);
    }
    let mut rows = Vec::new();
    for g in &groups {
        for d in &datasets {
            let horizons: BTreeSet<usize> = cells.keys().filter(|(cd, _)| cd == d).map(|(_, h)| *h).collect();
            let mut pooled: Vec<&RunRecord> = Vec::new();
            for h in horizons {
                let Some(rs) = per.get(&(g.clone(), d.clone(), h)) else { continue };
                pooled.extend(rs.iter().copied());
                rows.push(ReportRow {
                    group: g.clone(),
                    dataset: d.clone(),
                    horizon: Some(h),
                    stats: SummaryStats::from_records(rs),
                });
            }
            if !pooled.is_empty() {
                rows.push(ReportRow {
                    group: g.clone(),
                    dataset: d.clone(),
                    horizon: None,
                    stats: SummaryStats::from_records(&pooled),
                });
            }
        }
    }
    Ok(Report {
        plan_hash,
        group_by: group_by.to_string(),
        rows,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".to_string(), |x| format!("{x:.4}"))
}

impl Report {
    /// Aligned text: one row per (dataset, horizon) and one column block of
    /// μ̂ / σ̂ / min per group; pooled rows show `-` for min.
    pub fn to_text(&self) -> String {
        let mut groups: Vec<&str> = Vec::new();
        let mut keys: Vec<(&str, Option<usize>)> = Vec::new();
        let mut lookup: HashMap<(&str, &str, Option<usize>), &SummaryStats> = HashMap::new();
        for r in &self.rows {
            if !groups.contains(&r.group.as_str()) {
                groups.push(&r.group);
            }
            let k = (r.dataset.as_str(), r.horizon);
            if !keys.contains(&k) {
                keys.push(k);
            }
            lookup.insert((&r.group, &r.dataset, r.horizon), &r.stats);
        }
        // group order does not change key order within a dataset
        keys.sort_by_key(|(d, h)| (self.rows.iter().position(|r| r.dataset == *d).unwrap(), h.is_none(), *h));

        let mut header = vec!["dataset".to_string(), "horizon".to_string()];
        for g in &groups {
            header.extend([format!("{g} mu"), format!("{g} sigma"), format!("{g} min")]);
        }
        let mut table = vec![header];
        for (d, h) in &keys {
            let mut row = vec![d.to_string(), h.map_or("avg".to_string(), |h| h.to_string())];
            for g in &groups {
                match lookup.get(&(g, d, *h)) {
                    Some(s) => {
                        let min = if h.is_some() { fmt_opt(s.lbest) } else { "-".to_string() };
                        row.extend([fmt_opt(s.mu), fmt_opt(s.sigma), min]);
                    }
                    None => row.extend(["-".to_string(), "-".to_string(), "-".to_string()]),
                }
            }
            table.push(row);
        }
        let excluded: usize = self.rows.iter().filter(|r| r.horizon.is_some()).map(|r| r.stats.excluded).sum();
        let mut out = format!("plan {}  grouped by {}\n", self.plan_hash, self.group_by);
        out.push_str(&align(&table));
        if excluded > 0 {
            let _ = writeln!(out, "{excluded} runs without a finite loss excluded");
        }
        out
    }

    /// Tab-separated rows: group key, K_ok, mu, sigma, lbest, ci_low, ci_high, excluded.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("group\tk_ok\tmu\tsigma\tlbest\tci_low\tci_high\texcluded\n");
        let f = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.10e}"));
        for r in &self.rows {
            let s = &r.stats;
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.key(),
                s.k_ok,
                f(s.mu),
                f(s.sigma),
                f(s.lbest),
                f(s.ci_low),
                f(s.ci_high),
                s.excluded
            );
        }
        out
    }
}

/// Left-aligned first column, right-aligned others.
pub fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, s)| {
                if i == 0 {
                    format!("{s:<w$}", w = widths[i])
                } else {
                    format!("{s:>w$}", w = widths[i])
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceRow {
    /// Dataset name, or `overall`.
    pub scope: String,
    pub pairs: usize,
    /// Pairs dropped because either run lacks a finite loss.
    pub dropped: usize,
    pub test: MannWhitney,
    pub significant: bool,
}

/// Tests whether `a` has lower losses than `b` on paired conditions, per
/// dataset and over all datasets.
pub fn significance(records: &[RunRecord], a: &str, b: &str, alpha: f64) -> Result<Vec<SignificanceRow>> {
    single_plan(records)?;
    let pick = |eo: &str| -> BTreeMap<&str, &RunRecord> {
        records.iter().filter(|r| r.eo == eo).map(|r| (r.ec_hash.as_str(), r)).collect()
    };
    let (ra, rb) = (pick(a), pick(b));
    for (eo, m) in [(a, &ra), (b, &rb)] {
        if m.is_empty() {
            return Err(Error::Pairing(format!("no runs for {eo:?}")));
        }
    }
    let missing: Vec<String> = ra
        .keys()
        .filter(|h| !rb.contains_key(*h))
        .map(|h| format!("{h} (missing for {b})"))
        .chain(rb.keys().filter(|h| !ra.contains_key(*h)).map(|h| format!("{h} (missing for {a})")))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Pairing(format!("unpaired conditions: {}", missing.join(", "))));
    }
    let mut datasets: Vec<&str> = Vec::new();
    for r in ra.values() {
        if !datasets.contains(&r.ec.dataset.as_str()) {
            datasets.push(&r.ec.dataset);
        }
    }
    datasets.sort_unstable();
    let mut rows = Vec::new();
    let scopes = datasets.iter().map(|d| Some(*d)).chain(std::iter::once(None));
    for scope in scopes {
        let (mut xa, mut xb, mut dropped) = (Vec::new(), Vec::new(), 0);
        for (h, r) in &ra {
            if scope.is_some_and(|d| r.ec.dataset != d) {
                continue;
            }
            match (r.loss(), rb[h].loss()) {
                (Some(la), Some(lb)) => {
                    xa.push(la);
                    xb.push(lb);
                }
                _ => dropped += 1,
            }
        }
        let test = mann_whitney_one_tailed(&xa, &xb).map_err(|_| {
            Error::InsufficientData(format!("no paired successful runs for {}", scope.unwrap_or("overall")))
        })?;
        rows.push(SignificanceRow {
            scope: scope.unwrap_or("overall").to_string(),
            pairs: xa.len(),
            dropped,
            significant: test.p < alpha,
            test,
        });
    }
    Ok(rows)
}

/// Aligned text for significance rows.
pub fn significance_text(rows: &[SignificanceRow], a: &str, b: &str, alpha: f64) -> String {
    let mut table = vec![["scope", "pairs", "U", "p", "verdict"].map(String::from).to_vec()];
    for r in rows {
        table.push(vec![
            r.scope.clone(),
            r.pairs.to_string(),
            format!("{:.1}", r.test.u),
            format!("{:.4}", r.test.p),
            if r.significant { "significant" } else { "not significant" }.to_string(),
        ]);
    }
    format!(
        "H1: {a} has lower loss than {b} (one-tailed Mann-Whitney U, alpha={alpha})\n{}",
        align(&table)
    )
}
