//! Sample-set distances, success ratios, and run reports.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::odeint::SolveStats;
use crate::rng::Rng;

pub const DEFAULT_PROJECTIONS: usize = 128;

/// Wasserstein-1 distance between two 1-D empirical distributions of any sizes.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::argument("empirical distributions must be nonempty"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    // integrate |Qa(u) - Qb(u)| over the merged quantile breakpoints
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        let next_a = (i + 1) as f64 / n as f64;
        let next_b = (j + 1) as f64 / m as f64;
        let next = next_a.min(next_b);
        total += (next - u) * (a[i] - b[j]).abs();
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(total)
}

/// Mean over `n_projections` random unit directions of the projected W1 distance.
pub fn sliced_wasserstein(a: &[Vec<f64>], b: &[Vec<f64>], n_projections: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::argument("sample sets must be nonempty"));
    }
    if n_projections == 0 {
        return Err(Error::argument("need at least one projection"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|x| x.len() != d) {
        return Err(Error::argument("sample sets have mixed dimensions"));
    }
    let mut rng = Rng::labeled(seed, "metrics/sliced-wasserstein");
    let mut total = 0.0;
    for _ in 0..n_projections {
        let dir = unit_vector(d, &mut rng);
        let proj = |s: &[Vec<f64>]| -> Vec<f64> {
            s.iter().map(|x| x.iter().zip(&dir).map(|(u, v)| u * v).sum()).collect()
        };
        total += wasserstein_1d(&proj(a), &proj(b))?;
    }
    Ok(total / n_projections as f64)
}

fn unit_vector(d: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v = rng.normal_vec(d, 1.0);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRatio {
    pub successes: usize,
    pub total: usize,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessTable {
    pub groups: BTreeMap<usize, GroupRatio>,
    pub overall: f64,
}

/// Success ratio per group label and overall (weighted by group size).
pub fn success_ratio(flags: &[bool], groups: &[usize]) -> Result<SuccessTable> {
    if flags.is_empty() {
        return Err(Error::argument("no results to summarise"));
    }
    if flags.len() != groups.len() {
        return Err(Error::argument("flags and group labels differ in length"));
    }
    let mut table: BTreeMap<usize, GroupRatio> = BTreeMap::new();
    for (&ok, &g) in flags.iter().zip(groups) {
        let e = table.entry(g).or_insert(GroupRatio { successes: 0, total: 0, ratio: 0.0 });
        e.total += 1;
        e.successes += usize::from(ok);
    }
    for e in table.values_mut() {
        e.ratio = e.successes as f64 / e.total as f64;
    }
    let hits = flags.iter().filter(|&&f| f).count();
    Ok(SuccessTable {
        groups: table,
        overall: hits as f64 / flags.len() as f64,
    })
}

/// Aggregated solver counters for one phase of a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseReport {
    pub phase: String,
    pub solves: usize,
    pub nfe: usize,
    pub steps_taken: usize,
    pub peak_retained_states: usize,
}

impl PhaseReport {
    pub fn from_stats(phase: &str, stats: &[SolveStats]) -> Self {
        Self {
            phase: phase.to_string(),
            solves: stats.len(),
            nfe: stats.iter().map(|s| s.nfe).sum(),
            steps_taken: stats.iter().map(|s| s.steps_taken).sum(),
            peak_retained_states: stats.iter().map(|s| s.max_retained_states).max().unwrap_or(0),
        }
    }
}

/// Peak retained states of the two gradient methods over a step-count sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemorySweep {
    pub steps: Vec<usize>,
    pub adjoint_peak: Vec<usize>,
    pub naive_peak: Vec<usize>,
    #[serde(rename = "O(1)")]
    pub adjoint_constant: bool,
    #[serde(rename = "O(N)")]
    pub naive_linear: bool,
}

impl MemorySweep {
    pub fn new(steps: Vec<usize>, adjoint_peak: Vec<usize>, naive_peak: Vec<usize>) -> Self {
        let adjoint_constant = !adjoint_peak.is_empty() && adjoint_peak.windows(2).all(|w| w[0] == w[1]);
        let naive_linear = !naive_peak.is_empty()
            && naive_peak.len() == steps.len()
            && naive_peak.iter().zip(&steps).all(|(p, n)| *p == n + 1);
        Self {
            steps,
            adjoint_peak,
            naive_peak,
            adjoint_constant,
            naive_linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub command: String,
    pub phases: Vec<PhaseReport>,
    pub total_nfe: usize,
    pub wall_clock_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub memory: Option<MemorySweep>,
    /// Command-specific scalar results.
    pub results: BTreeMap<String, serde_json::Value>,
}

pub fn run_report(command: &str, phases: Vec<PhaseReport>, wall_clock_s: f64) -> RunReport {
    RunReport {
        command: command.to_string(),
        total_nfe: phases.iter().map(|p| p.nfe).sum(),
        phases,
        wall_clock_s,
        memory: None,
        results: BTreeMap::new(),
    }
}

/// A numeric table with named columns, written as CSV.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl MetricsTable {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = crate::sampler::csv_err;
        w.write_record(&self.columns).map_err(err)?;
        for r in &self.rows {
            w.write_record(r.iter().map(|v| v.to_string())).map_err(err)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[&[f64]]) -> Vec<Vec<f64>> {
        v.iter().map(|p| p.to_vec()).collect()
    }

    #[test]
    fn identical_sets_are_at_distance_zero() {
        let a = pts(&[&[0.0, 1.0], &[2.0, -1.0], &[0.5, 0.5]]);
        assert_eq!(sliced_wasserstein(&a, &a, 64, 1).unwrap(), 0.0);
    }

    #[test]
    fn shifted_point_masses() {
        let a = pts(&[&[0.0]]);
        let b = pts(&[&[1.0]]);
        assert!((sliced_wasserstein(&a, &b, 16, 0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn unequal_sizes_use_quantiles() {
        // {0, 1} vs {0.5}: W1 = 0.5
        assert!((wasserstein_1d(&[0.0, 1.0], &[0.5]).unwrap() - 0.5).abs() < 1e-15);
        // {0, 0, 3} vs {1, 2}: |0-1|/3 + |0-1|/6 + |0-2|/6 + |3-2|/3 = 1.166...
        let w = wasserstein_1d(&[0.0, 3.0, 0.0], &[2.0, 1.0]).unwrap();
        assert!((w - 7.0 / 6.0).abs() < 1e-15, "{w}");
    }

    #[test]
    fn translation_of_point_masses() {
        // a single point moved by v: every projection contributes |<v, u>|
        let v = [0.3, -0.4];
        let a = pts(&[&[1.0, 2.0]]);
        let b = pts(&[&[1.3, 1.6]]);
        let sw = sliced_wasserstein(&a, &b, 200, 5).unwrap();
        let mut rng = Rng::labeled(5, "metrics/sliced-wasserstein");
        let expect: f64 = (0..200)
            .map(|_| {
                let u = unit_vector(2, &mut rng);
                (v[0] * u[0] + v[1] * u[1]).abs()
            })
            .sum::<f64>()
            / 200.0;
        assert!((sw - expect).abs() < 1e-12);
        assert!(sw <= 0.5 + 1e-12);
    }

    #[test]
    fn matches_exhaustive_pairing_on_small_sets() {
        // equal-size 1-D W1 is the best matching cost over all permutations
        let a: [f64; 3] = [0.3, -1.2, 2.5];
        let b = [1.0, 0.1, -0.7];
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms
            .iter()
            .map(|p| (0..3).map(|i| (a[i] - b[p[i]]).abs()).sum::<f64>() / 3.0)
            .fold(f64::INFINITY, f64::min);
        assert!((wasserstein_1d(&a, &b).unwrap() - best).abs() < 1e-15);
    }

    #[test]
    fn rejects_empty_sets() {
        assert!(sliced_wasserstein(&[], &pts(&[&[0.0]]), 4, 0).is_err());
        assert!(sliced_wasserstein(&pts(&[&[0.0]]), &pts(&[&[0.0]]), 0, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn symmetric_and_nonnegative(
            a in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..8),
            b in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 1..8),
            seed in 0u64..1000,
        ) {
            let ab = sliced_wasserstein(&a, &b, 16, seed).unwrap();
            let ba = sliced_wasserstein(&b, &a, 16, seed).unwrap();
            proptest::prop_assert!(ab >= 0.0);
            proptest::prop_assert!((ab - ba).abs() <= 1e-12 * ab.max(1.0));
        }
    }

    #[test]
    fn success_ratios() {
        let t = success_ratio(&[true; 4], &[0, 0, 1, 1]).unwrap();
        assert_eq!(t.overall, 1.0);
        let t = success_ratio(&[true, false, true, false], &[0; 4]).unwrap();
        assert_eq!(t.overall, 0.5);
        let flags = [true, true, true, false, false, true, false, false, false, false];
        let groups = [0, 0, 0, 0, 0, 1, 1, 1, 1, 1];
        let t = success_ratio(&flags, &groups).unwrap();
        assert_eq!(t.groups[&0].ratio, 0.6);
        assert_eq!(t.groups[&1].ratio, 0.2);
        assert!((t.overall - 0.4).abs() < 1e-15);
        assert!(success_ratio(&[], &[]).is_err());
    }

    #[test]
    fn report_totals_and_flags() {
        let s = |nfe, peak| SolveStats { nfe, max_retained_states: peak, steps_taken: 1 };
        let r = run_report("x", vec![PhaseReport::from_stats("forward", &[s(100, 6), s(150, 6)])], 0.0);
        assert_eq!(r.total_nfe, 250);
        let m = MemorySweep::new(vec![10, 50], vec![7, 7], vec![11, 51]);
        assert!(m.adjoint_constant && m.naive_linear);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"O(1)\":true") && json.contains("\"O(N)\":true"));
        let m = MemorySweep::new(vec![10, 50], vec![7, 8], vec![11, 50]);
        assert!(!m.adjoint_constant && !m.naive_linear);
    }

    #[test]
    fn metrics_table_csv() {
        let mut t = MetricsTable::new(&["epoch", "loss"]);
        t.push(vec![0.0, 1.5]);
        t.push(vec![1.0, 0.25]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "epoch,loss\n0,1.5\n1,0.25\n");
        assert_eq!(t.column("loss").unwrap(), vec![1.5, 0.25]);
    }
}
