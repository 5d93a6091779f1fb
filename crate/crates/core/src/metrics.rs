//! Dice evaluation per label and client, Wilcoxon signed-rank testing
//! between methods, and the CSV tables the experiment driver emits.

use crate::error::{Error, Result};
use crate::numfmt::fmt_sig6;
use crate::registry::{ClientId, LabelRegistry};
use crate::tensor::LabelMap;
use statrs::distribution::{ContinuousCDF, Normal};
use std::collections::BTreeMap;
use std::fmt;

/// Table row identities, in the fixed reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Same,
    Others,
    CenAvg,
    CunAvg,
    FedAvg,
    FunAvg,
}

pub const ALL_METHODS: [Method; 6] = [
    Method::Same,
    Method::Others,
    Method::CenAvg,
    Method::CunAvg,
    Method::FedAvg,
    Method::FunAvg,
];

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Same => "Same",
            Method::Others => "Others",
            Method::CenAvg => "CenAvg",
            Method::CunAvg => "CUNAvg",
            Method::FedAvg => "FedAvg",
            Method::FunAvg => "FUNAvg",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "Same" => Ok(Method::Same),
            "Others" => Ok(Method::Others),
            "CenAvg" => Ok(Method::CenAvg),
            "CUNAvg" => Ok(Method::CunAvg),
            "FedAvg" => Ok(Method::FedAvg),
            "FUNAvg" => Ok(Method::FunAvg),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

// ---------------------------------------------------------------------------
// Dice
// ---------------------------------------------------------------------------

/// 2|P & G| / (|P| + |G|) for one label. When both masks are empty the
/// score is 1.0 (correctly predicting absence is rewarded).
pub fn dice(pred: &LabelMap, gt: &LabelMap, label: u32) -> f64 {
    dice_opt(pred, gt, label, true).expect("both_empty_one never skips")
}

/// Dice with the both-empty convention explicit: `both_empty_one`
/// yields Some(1.0), otherwise both-empty cases are skipped (None).
pub fn dice_opt(pred: &LabelMap, gt: &LabelMap, label: u32, both_empty_one: bool) -> Option<f64> {
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    for (&p, &g) in pred.pixels().iter().zip(gt.pixels()) {
        let pm = p == label;
        let gm = g == label;
        if pm {
            p_count += 1;
        }
        if gm {
            g_count += 1;
        }
        if pm && gm {
            inter += 1;
        }
    }
    if p_count + g_count == 0 {
        return both_empty_one.then_some(1.0);
    }
    Some(2.0 * inter as f64 / (p_count + g_count) as f64)
}

// ---------------------------------------------------------------------------
// Dice table
// ---------------------------------------------------------------------------

/// One evaluated (method, test client, label, case) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DiceRecord {
    pub method: Method,
    pub client: ClientId,
    pub label: String,
    pub case_index: usize,
    pub dice: f64,
}

/// Raw per-case Dice values; cells and summaries are means over the
/// matching records (per-dataset mean first, then the row mean M).
#[derive(Debug, Clone, Default)]
pub struct DiceTable {
    pub records: Vec<DiceRecord>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

impl DiceTable {
    pub fn push(&mut self, rec: DiceRecord) {
        self.records.push(rec);
    }

    pub fn cell(&self, method: Method, client: &ClientId, label: &str) -> Option<f64> {
        mean(
            self.records
                .iter()
                .filter(|r| r.method == method && &r.client == client && r.label == label)
                .map(|r| r.dice),
        )
    }

    /// Mean over everything recorded for (method, client).
    pub fn client_mean(&self, method: Method, client: &ClientId) -> Option<f64> {
        mean(
            self.records
                .iter()
                .filter(|r| r.method == method && &r.client == client)
                .map(|r| r.dice),
        )
    }

    /// Mean over everything recorded for (method, label).
    pub fn label_mean(&self, method: Method, label: &str) -> Option<f64> {
        mean(
            self.records
                .iter()
                .filter(|r| r.method == method && r.label == label)
                .map(|r| r.dice),
        )
    }

    pub fn clients(&self) -> Vec<ClientId> {
        let mut out: Vec<ClientId> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.client) {
                out.push(r.client.clone());
            }
        }
        out.sort();
        out
    }

    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.label) {
                out.push(r.label.clone());
            }
        }
        out
    }

    pub fn methods(&self) -> Vec<Method> {
        ALL_METHODS
            .iter()
            .copied()
            .filter(|m| self.records.iter().any(|r| r.method == *m))
            .collect()
    }

    /// Row mean M: per-dataset means first, then their mean.
    pub fn row_mean(&self, method: Method) -> Option<f64> {
        mean(
            self.clients()
                .iter()
                .filter_map(|c| self.client_mean(method, c)),
        )
    }

    /// Row mean over per-label columns (the per-structure table analog).
    pub fn row_mean_labels(&self, method: Method) -> Option<f64> {
        mean(
            self.labels()
                .iter()
                .filter_map(|l| self.label_mean(method, l)),
        )
    }

    /// Cell dump: one row per (method, client, label) mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,client,label,dice\n");
        for m in self.methods() {
            for c in self.clients() {
                for l in self.labels() {
                    if let Some(v) = self.cell(m, &c, &l) {
                        out.push_str(&format!("{m},{c},{l},{}\n", fmt_sig6(v)));
                    }
                }
            }
        }
        out
    }

    /// Summary rows: per-client columns, per-label columns, and the two
    /// row means (M over clients, M_labels over labels).
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("method,column,mean\n");
        for m in self.methods() {
            for c in self.clients() {
                if let Some(v) = self.client_mean(m, &c) {
                    out.push_str(&format!("{m},client:{c},{}\n", fmt_sig6(v)));
                }
            }
            for l in self.labels() {
                if let Some(v) = self.label_mean(m, &l) {
                    out.push_str(&format!("{m},label:{l},{}\n", fmt_sig6(v)));
                }
            }
            if let Some(v) = self.row_mean(m) {
                out.push_str(&format!("{m},M,{}\n", fmt_sig6(v)));
            }
            if let Some(v) = self.row_mean_labels(m) {
                out.push_str(&format!("{m},M_labels,{}\n", fmt_sig6(v)));
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PMethod {
    Exact,
    NormalApprox,
}

impl fmt::Display for PMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PMethod::Exact => write!(f, "exact"),
            PMethod::NormalApprox => write!(f, "normal_approx"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedTest {
    /// Pairs remaining after zero differences are dropped.
    pub n: usize,
    /// W = min(W+, W-).
    pub statistic: f64,
    pub p_value: f64,
    pub method: PMethod,
}

/// Exact enumeration cutoff; beyond this the tie-corrected normal
/// approximation with continuity correction is used.
pub const EXACT_CUTOFF: usize = 25;

/// Average ranks of |d|, doubled so ties produce exact integers.
fn doubled_ranks(abs_d: &[f64]) -> Vec<u64> {
    let n = abs_d.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| abs_d[a].partial_cmp(&abs_d[b]).expect("finite"));
    let mut out = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_d[idx[j + 1]] == abs_d[idx[i]] {
            j += 1;
        }
        // positions i..=j share the average rank; doubled it is (i+j+2)
        let doubled = (i + j + 2) as u64;
        for &k in &idx[i..=j] {
            out[k] = doubled;
        }
        i = j + 1;
    }
    out
}

/// Two-sided Wilcoxon signed-rank test of paired samples. Zero
/// differences are dropped; |d| ties get average ranks. For n <= 25 the
/// p-value is exact: the fraction of all 2^n sign patterns whose
/// min(W+, W-) is at most the observed one. Larger n uses the normal
/// approximation with tie-corrected variance and continuity correction.
pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<PairedTest> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!(
            "paired samples differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate(
            "all paired differences are zero; no p-value".into(),
        ));
    }
    let n = diffs.len();
    let abs_d: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let d2 = doubled_ranks(&abs_d);
    let total2: u64 = d2.iter().sum();
    let w_plus2: u64 = diffs
        .iter()
        .zip(&d2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let w_minus2 = total2 - w_plus2;
    let w2 = w_plus2.min(w_minus2);
    let statistic = w2 as f64 / 2.0;

    if n <= EXACT_CUTOFF {
        // gray-code walk over all sign patterns, updating W+ by the
        // flipped rank only
        let patterns: u64 = 1 << n;
        let mut hits: u64 = 0;
        let mut wp: i64 = 0; // doubled W+ of the current pattern
        let hi = (total2 - w2) as i64;
        let lo = w2 as i64;
        if wp <= lo || wp >= hi {
            hits += 1;
        }
        let mut gray: u64 = 0;
        for g in 1..patterns {
            let bit = g.trailing_zeros() as usize;
            gray ^= 1 << bit;
            if gray & (1 << bit) != 0 {
                wp += d2[bit] as i64;
            } else {
                wp -= d2[bit] as i64;
            }
            if wp <= lo || wp >= hi {
                hits += 1;
            }
        }
        Ok(PairedTest {
            n,
            statistic,
            p_value: hits as f64 / patterns as f64,
            method: PMethod::Exact,
        })
    } else {
        let nf = n as f64;
        let mu = nf * (nf + 1.0) / 4.0;
        // tie correction: subtract sum of (t^3 - t)/48 over tie groups
        let mut tie_term = 0.0f64;
        {
            let mut sorted = abs_d.clone();
            sorted.sort_by(|x, y| x.partial_cmp(y).expect("finite"));
            let mut i = 0;
            while i < n {
                let mut j = i;
                while j + 1 < n && sorted[j + 1] == sorted[i] {
                    j += 1;
                }
                let t = (j - i + 1) as f64;
                tie_term += t * t * t - t;
                i = j + 1;
            }
        }
        let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term / 48.0;
        if var <= 0.0 {
            return Err(Error::Degenerate("zero variance after tie correction".into()));
        }
        let z = (statistic - mu + 0.5) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let p = (2.0 * normal.cdf(z)).min(1.0);
        Ok(PairedTest {
            n,
            statistic,
            p_value: p,
            method: PMethod::NormalApprox,
        })
    }
}

/// One row of `wilcoxon.csv`.
#[derive(Debug, Clone)]
pub struct WilcoxonRow {
    pub dataset: String,
    pub method_a: Method,
    pub method_b: Method,
    pub test: std::result::Result<PairedTest, String>,
}

pub fn wilcoxon_csv(rows: &[WilcoxonRow]) -> String {
    let mut out = String::from("dataset,method_a,method_b,n,W,p,method\n");
    for r in rows {
        match &r.test {
            Ok(t) => out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.dataset,
                r.method_a,
                r.method_b,
                t.n,
                fmt_sig6(t.statistic),
                fmt_sig6(t.p_value),
                t.method
            )),
            Err(msg) => out.push_str(&format!(
                "{},{},{},0,,,degenerate:{}\n",
                r.dataset, r.method_a, r.method_b, msg
            )),
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Improvement report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementRow {
    pub label: String,
    pub k: u32,
    pub dice_fed: f64,
    pub dice_fun: f64,
    pub delta: f64,
}

/// Per-label gain of uncertainty-weighted averaging over the vanilla
/// ensemble, sorted by how many clients annotate the label (ascending).
pub fn improvement_report(
    fun_table: &DiceTable,
    fed_table: &DiceTable,
    registry: &LabelRegistry,
) -> Result<Vec<ImprovementRow>> {
    let counts = registry.presence_counts();
    let mut rows = Vec::new();
    for (i, label) in registry.global_labels().iter().enumerate() {
        let fun = fun_table
            .label_mean(Method::FunAvg, label)
            .ok_or_else(|| Error::Data(format!("FUNAvg table lacks label '{label}'")))?;
        let fed = fed_table
            .label_mean(Method::FedAvg, label)
            .ok_or_else(|| Error::Data(format!("FedAvg table lacks label '{label}'")))?;
        rows.push(ImprovementRow {
            label: label.clone(),
            k: counts[i],
            dice_fed: fed,
            dice_fun: fun,
            delta: fun - fed,
        });
    }
    rows.sort_by_key(|r| r.k);
    Ok(rows)
}

pub fn improvement_csv(rows: &[ImprovementRow]) -> String {
    let mut out = String::from("label,k,dice_fed,dice_fun,delta\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.label,
            r.k,
            fmt_sig6(r.dice_fed),
            fmt_sig6(r.dice_fun),
            fmt_sig6(r.delta)
        ));
    }
    out
}

/// Per-seed aggregation: mean and sample standard deviation per key.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub type SummaryMap = BTreeMap<(String, String), f64>;

/// Parses a summary.csv produced by [`DiceTable::summary_csv`].
pub fn parse_summary_csv(text: &str) -> Result<SummaryMap> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Data(format!("summary line {} malformed: '{line}'", i + 1)));
        }
        let v = parts[2]
            .parse::<f64>()
            .map_err(|e| Error::Data(format!("summary line {}: {e}", i + 1)))?;
        out.insert((parts[0].to_string(), parts[1].to_string()), v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn lm(vals: &[u32], w: usize) -> LabelMap {
        LabelMap::from_vec(vals.len() / w, w, vals.to_vec()).unwrap()
    }

    #[test]
    fn dice_identity_disjoint_and_half() {
        let gt = lm(&[1, 1, 0, 0, 2, 2, 0, 0], 4);
        assert_eq!(dice(&gt, &gt, 1), 1.0);
        let pred = lm(&[0, 0, 1, 1, 2, 2, 0, 0], 4);
        assert_eq!(dice(&pred, &gt, 1), 0.0);
        // |P|=|G|=4, overlap 2 -> 0.5
        let gt = lm(&[1, 1, 1, 1, 0, 0, 0, 0], 4);
        let pred = lm(&[1, 1, 0, 0, 1, 1, 0, 0], 4);
        assert_eq!(dice(&pred, &gt, 1), 0.5);
    }

    #[test]
    fn dice_both_empty_conventions() {
        let a = lm(&[0, 0, 0, 0], 2);
        assert_eq!(dice(&a, &a, 3), 1.0);
        assert_eq!(dice_opt(&a, &a, 3, false), None);
        // one-sided empty is a plain zero either way
        let b = lm(&[3, 0, 0, 0], 2);
        assert_eq!(dice(&a, &b, 3), 0.0);
        assert_eq!(dice_opt(&a, &b, 3, false), Some(0.0));
    }

    #[test]
    fn dice_is_symmetric_and_bounded_fuzz() {
        let mut r = crate::rng::RngState::new(31, 0).rng();
        for _ in 0..100 {
            let vals_a: Vec<u32> = (0..36).map(|_| r.gen_range(0..3)).collect();
            let vals_b: Vec<u32> = (0..36).map(|_| r.gen_range(0..3)).collect();
            let a = lm(&vals_a, 6);
            let b = lm(&vals_b, 6);
            for label in 0..3 {
                let ab = dice(&a, &b, label);
                let ba = dice(&b, &a, label);
                assert_eq!(ab, ba);
                assert!((0.0..=1.0).contains(&ab));

                // brute-force set counting oracle
                let pa: std::collections::BTreeSet<usize> = vals_a
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v == label)
                    .map(|(i, _)| i)
                    .collect();
                let pb: std::collections::BTreeSet<usize> = vals_b
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v == label)
                    .map(|(i, _)| i)
                    .collect();
                let expect = if pa.is_empty() && pb.is_empty() {
                    1.0
                } else {
                    2.0 * pa.intersection(&pb).count() as f64 / (pa.len() + pb.len()) as f64
                };
                assert_eq!(ab, expect);
            }
        }
    }

    #[test]
    fn wilcoxon_all_positive_n5() {
        let a = [2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 1.5, 2.0, 2.5, 3.0];
        let t = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(t.n, 5);
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.method, PMethod::Exact);
        assert!((t.p_value - 0.0625).abs() < 1e-15, "p {}", t.p_value);
    }

    #[test]
    fn wilcoxon_degenerate_and_antisymmetry() {
        let a = [1.0, 2.0, 3.0];
        assert!(matches!(
            wilcoxon_signed_rank(&a, &a),
            Err(Error::Degenerate(_))
        ));
        let b = [0.5, 2.5, 2.0];
        let ab = wilcoxon_signed_rank(&a, &b).unwrap();
        let ba = wilcoxon_signed_rank(&b, &a).unwrap();
        assert_eq!(ab.p_value, ba.p_value);
        assert_eq!(ab.statistic, ba.statistic);
        assert!(wilcoxon_signed_rank(&a, &[1.0]).is_err());
    }

    /// Definitional oracle: recompute each sign pattern's rank sums from
    /// scratch and count patterns at least as extreme.
    fn enumeration_oracle(diffs: &[f64]) -> f64 {
        let n = diffs.len();
        let abs_d: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
        // average ranks, straightforwardly
        let mut ranks = vec![0.0f64; n];
        for i in 0..n {
            let less = abs_d.iter().filter(|&&x| x < abs_d[i]).count();
            let equal = abs_d.iter().filter(|&&x| x == abs_d[i]).count();
            ranks[i] = less as f64 + (equal as f64 + 1.0) / 2.0;
        }
        let wp_obs: f64 = diffs
            .iter()
            .zip(&ranks)
            .filter(|(d, _)| **d > 0.0)
            .map(|(_, r)| r)
            .sum();
        let total: f64 = ranks.iter().sum();
        let w_obs = wp_obs.min(total - wp_obs);
        let mut hits = 0u64;
        for mask in 0u64..(1 << n) {
            let mut wp = 0.0;
            for (i, r) in ranks.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    wp += r;
                }
            }
            if wp.min(total - wp) <= w_obs {
                hits += 1;
            }
        }
        hits as f64 / (1u64 << n) as f64
    }

    #[test]
    fn wilcoxon_matches_enumeration_oracle_fuzz() {
        let mut r = crate::rng::RngState::new(47, 0).rng();
        for case in 0..120 {
            let n = r.gen_range(1..=10usize);
            let a: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
            let b: Vec<f64> = (0..n)
                .map(|i| {
                    if case % 3 == 0 {
                        // force ties in |d|
                        a[i] - [1.0, -1.0, 2.0][i % 3]
                    } else {
                        r.gen_range(-3.0..3.0)
                    }
                })
                .collect();
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).filter(|d| *d != 0.0).collect();
            if diffs.is_empty() {
                continue;
            }
            let t = wilcoxon_signed_rank(&a, &b).unwrap();
            let expect = enumeration_oracle(&diffs);
            assert_eq!(t.p_value, expect, "case {case}: {:?} vs {:?}", a, b);
        }
    }

    #[test]
    fn wilcoxon_normal_approximation_for_large_n() {
        let mut r = crate::rng::RngState::new(48, 0).rng();
        let n = 40;
        let a: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + r.gen_range(-0.2..0.25)).collect();
        let t = wilcoxon_signed_rank(&a, &b).unwrap();
        assert_eq!(t.method, PMethod::NormalApprox);
        assert!((0.0..=1.0).contains(&t.p_value));
        // sanity: a strongly one-sided shift should be significant
        let c: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        let t = wilcoxon_signed_rank(&c, &a).unwrap();
        assert!(t.p_value < 1e-4, "p {}", t.p_value);
    }

    #[test]
    fn table_means_and_csv_round_trip() {
        let mut table = DiceTable::default();
        let c1 = ClientId::from("c1");
        let c2 = ClientId::from("c2");
        for (client, label, vals) in [
            (&c1, "ring", [0.8, 0.9]),
            (&c1, "disk", [0.6, 0.7]),
            (&c2, "ring", [0.5, 0.5]),
            (&c2, "disk", [1.0, 0.9]),
        ] {
            for (i, v) in vals.into_iter().enumerate() {
                table.push(DiceRecord {
                    method: Method::FedAvg,
                    client: client.clone(),
                    label: label.into(),
                    case_index: i,
                    dice: v,
                });
            }
        }
        assert!((table.cell(Method::FedAvg, &c1, "ring").unwrap() - 0.85).abs() < 1e-12);
        assert!((table.client_mean(Method::FedAvg, &c1).unwrap() - 0.75).abs() < 1e-12);
        assert!((table.label_mean(Method::FedAvg, "ring").unwrap() - 0.675).abs() < 1e-12);
        // M: mean of client means = (0.75 + 0.725)/2
        assert!((table.row_mean(Method::FedAvg).unwrap() - 0.7375).abs() < 1e-12);

        // recompute M from the summary emission
        let parsed = parse_summary_csv(&table.summary_csv()).unwrap();
        let m = parsed.get(&("FedAvg".into(), "M".into())).unwrap();
        let c1m = parsed.get(&("FedAvg".into(), "client:c1".into())).unwrap();
        let c2m = parsed.get(&("FedAvg".into(), "client:c2".into())).unwrap();
        assert!((m - (c1m + c2m) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn improvement_rows_sorted_by_k() {
        let globals: Vec<String> = vec!["common".into(), "rare".into()];
        let mut sets = BTreeMap::new();
        sets.insert(ClientId::from("a"), vec!["common".into(), "rare".into()]);
        sets.insert(ClientId::from("b"), vec!["common".into()]);
        let reg = LabelRegistry::new(globals, sets).unwrap();

        let mut fed = DiceTable::default();
        let mut fun = DiceTable::default();
        for (label, fed_v, fun_v) in [("common", 0.9, 0.89), ("rare", 0.2, 0.6)] {
            fed.push(DiceRecord {
                method: Method::FedAvg,
                client: ClientId::from("a"),
                label: label.into(),
                case_index: 0,
                dice: fed_v,
            });
            fun.push(DiceRecord {
                method: Method::FunAvg,
                client: ClientId::from("a"),
                label: label.into(),
                case_index: 0,
                dice: fun_v,
            });
        }
        let rows = improvement_report(&fun, &fed, &reg).unwrap();
        assert_eq!(rows[0].label, "rare");
        assert_eq!(rows[0].k, 1);
        assert!((rows[0].delta - 0.4).abs() < 1e-12);
        assert_eq!(rows[1].label, "common");
        assert!((rows[1].delta + 0.01).abs() < 1e-12);

        // identical tables give all-zero deltas
        let rows = improvement_report(&fun, &fun_as_fed(&fun), &reg).unwrap();
        for r in rows {
            assert_eq!(r.delta, 0.0);
        }
    }

    fn fun_as_fed(fun: &DiceTable) -> DiceTable {
        let mut out = DiceTable::default();
        for r in &fun.records {
            out.push(DiceRecord { method: Method::FedAvg, ..r.clone() });
        }
        out
    }

    #[test]
    fn mean_sd_basics() {
        let (m, s) = mean_sd(&[1.0, 1.0, 1.0]);
        assert_eq!((m, s), (1.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - std::f64::consts::SQRT_2).abs() < 1e-12);
    }
}
