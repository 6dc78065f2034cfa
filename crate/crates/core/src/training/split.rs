use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::{shuffle_indices, Prng};

const MIN_SAMPLES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
    pub stratify: bool,
    /// Keep every slice of a subject in the same split.
    pub group_by_subject: bool,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.8, validation: 0.1, test: 0.1, stratify: true, group_by_subject: false, seed: 0 }
    }
}

impl SplitSpec {
    fn fractions(&self) -> Result<[f64; 3]> {
        let f = [self.train, self.validation, self.test];
        if f.iter().any(|&x| !(x > 0.0 && x < 1.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!("split fractions must be in (0, 1) and sum to 1, got {f:?}")));
        }
        Ok(f)
    }
}

/// Index sets of the three splits, each in ascending order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Largest-remainder apportionment of `n` over `fractions`; ties go to the
/// earlier split.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact = fractions.map(|f| f * n as f64);
    let mut counts = exact.map(|e| e.floor() as usize);
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n - counts.iter().sum::<usize>();
    for &s in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[s] += 1;
        left -= 1;
    }
    counts
}

/// Per-stratum counts whose column sums equal `totals`, each entry the
/// floor or ceiling of its exact share. Extra units go where the fractional
/// share is largest.
fn stratified_counts(sizes: &[usize], fractions: &[f64; 3], totals: [usize; 3]) -> Result<Vec<[usize; 3]>> {
    let exact: Vec<[f64; 3]> = sizes.iter().map(|&n| fractions.map(|f| f * n as f64)).collect();
    let floors: Vec<[usize; 3]> = exact.iter().map(|e| e.map(|x| x.floor() as usize)).collect();
    let mut deficit = totals;
    for f in &floors {
        for s in 0..3 {
            deficit[s] =
                deficit[s].checked_sub(f[s]).ok_or_else(|| Error::Data("split allocation underflow".into()))?;
        }
    }
    // Candidate extra-unit patterns per stratum, best fractional mass first.
    let options: Vec<Vec<[usize; 3]>> = sizes
        .iter()
        .zip(&floors)
        .zip(&exact)
        .map(|((&n, f), e)| {
            let extra = n - f.iter().sum::<usize>();
            let mut pats: Vec<[usize; 3]> = (0..8u8)
                .map(|m| [(m & 1) as usize, ((m >> 1) & 1) as usize, ((m >> 2) & 1) as usize])
                .filter(|p| p.iter().sum::<usize>() == extra)
                .collect();
            let score = |p: &[usize; 3]| -> f64 { (0..3).map(|s| p[s] as f64 * (e[s] - e[s].floor())).sum() };
            pats.sort_by(|a, b| score(b).total_cmp(&score(a)));
            pats
        })
        .collect();

    fn search(k: usize, options: &[Vec<[usize; 3]>], deficit: [usize; 3], chosen: &mut Vec<[usize; 3]>) -> bool {
        if k == options.len() {
            return deficit == [0, 0, 0];
        }
        for p in &options[k] {
            if (0..3).all(|s| p[s] <= deficit[s]) {
                chosen.push(*p);
                if search(k + 1, options, [deficit[0] - p[0], deficit[1] - p[1], deficit[2] - p[2]], chosen) {
                    return true;
                }
                chosen.pop();
            }
        }
        false
    }

    let mut chosen = Vec::with_capacity(sizes.len());
    if !search(0, &options, deficit, &mut chosen) {
        return Err(Error::Data("no stratified allocation matches the split sizes".into()));
    }
    Ok(floors.iter().zip(&chosen).map(|(f, p)| [f[0] + p[0], f[1] + p[1], f[2] + p[2]]).collect())
}

/// Assign units (samples, or subjects when grouping) to the three splits.
/// `strata[u]` is the stratum of unit `u`.
fn split_units(strata: &[usize], spec: &SplitSpec, stratify: bool) -> Result<[Vec<usize>; 3]> {
    let fractions = spec.fractions()?;
    let totals = apportion(strata.len(), &fractions);
    let mut rng = Prng::new(spec.seed);
    let mut out: [Vec<usize>; 3] = Default::default();
    if stratify {
        let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (u, &s) in strata.iter().enumerate() {
            members.entry(s).or_default().push(u);
        }
        let sizes: Vec<usize> = members.values().map(Vec::len).collect();
        let counts = stratified_counts(&sizes, &fractions, totals)?;
        for (units, c) in members.values().zip(&counts) {
            let order = shuffle_indices(&mut rng, units.len());
            let mut it = order.into_iter().map(|i| units[i]);
            for s in 0..3 {
                out[s].extend(it.by_ref().take(c[s]));
            }
        }
    } else {
        let mut it = shuffle_indices(&mut rng, strata.len()).into_iter();
        for s in 0..3 {
            out[s].extend(it.by_ref().take(totals[s]));
        }
    }
    Ok(out)
}

/// Seeded train/validation/test partition of `labels.len()` samples.
/// `subjects` is required when `spec.group_by_subject` is set.
pub fn split_indices(labels: &[usize], subjects: Option<&[String]>, spec: &SplitSpec) -> Result<SplitIndices> {
    let n = labels.len();
    if n < MIN_SAMPLES {
        return Err(Error::Data(format!("need at least {MIN_SAMPLES} samples to split, got {n}")));
    }
    let mut parts = if spec.group_by_subject {
        let subjects = subjects.ok_or_else(|| Error::Parameter("subject-grouped split needs subject ids".into()))?;
        if subjects.len() != n {
            return Err(Error::Data("subject id count differs from label count".into()));
        }
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, s) in subjects.iter().enumerate() {
            groups.entry(s.as_str()).or_default().push(i);
        }
        let groups: Vec<Vec<usize>> = groups.into_values().collect();
        // A subject's stratum is its majority label (ties to the lower label).
        let strata: Vec<usize> = groups
            .iter()
            .map(|g| {
                let ones = g.iter().filter(|&&i| labels[i] == 1).count();
                usize::from(2 * ones > g.len())
            })
            .collect();
        if groups.len() < 3 {
            return Err(Error::Data(format!("need at least 3 subjects to split, got {}", groups.len())));
        }
        let units = split_units(&strata, spec, spec.stratify && groups.len() >= MIN_SAMPLES)?;
        units.map(|us| us.iter().flat_map(|&g| groups[g].iter().copied()).collect())
    } else {
        split_units(labels, spec, spec.stratify)?
    };
    for (p, name) in parts.iter_mut().zip(["train", "validation", "test"]) {
        if p.is_empty() {
            return Err(Error::Data(format!("{name} split is empty")));
        }
        p.sort_unstable();
    }
    let [train, validation, test] = parts;
    Ok(SplitIndices { train, validation, test })
}

pub fn split_dataset(ds: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset, Dataset)> {
    let subjects: Vec<String> = ds.records().iter().map(|r| r.subject_id.clone()).collect();
    let idx = split_indices(&ds.labels(), Some(&subjects), spec)?;
    Ok((ds.subset(&idx.train), ds.subset(&idx.validation), ds.subset(&idx.test)))
}
