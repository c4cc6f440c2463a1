//! Finite-sample simulation of the market: sampled students, student- and
//! school-proposing deferred acceptance, decentralized cutoff-based choice,
//! and a brute-force stability audit.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{check_cutoffs, MarketParams};
use crate::par::{self, Execution};

/// Finite roster of students: one uniform score each and a complete
/// preference list over schools.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSample {
    scores: Vec<f64>,
    /// Row-major `n_students x n_schools`; row `s` lists schools best first.
    prefs: Vec<usize>,
    n_schools: usize,
    seed: u64,
}

impl StudentSample {
    /// Builds a sample from explicit data. Scores must be distinct and in
    /// `[0, 1]`; each preference list must be a permutation of the schools.
    pub fn from_parts(scores: Vec<f64>, pref_lists: Vec<Vec<usize>>, seed: u64) -> Result<Self> {
        if scores.len() != pref_lists.len() {
            return Err(Error::Dimension {
                expected: scores.len(),
                got: pref_lists.len(),
            });
        }
        if scores.is_empty() {
            return Err(Error::Config("sample needs at least one student".into()));
        }
        check_cutoffs(&scores)?;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("student scores must be distinct".into()));
        }
        let n_schools = pref_lists[0].len();
        let mut prefs = Vec::with_capacity(scores.len() * n_schools);
        for (s, list) in pref_lists.iter().enumerate() {
            let mut seen = vec![false; n_schools];
            if list.len() != n_schools
                || list.iter().any(|&c| c >= n_schools || std::mem::replace(&mut seen[c], true))
            {
                return Err(Error::Config(format!(
                    "preference list of student {s} is not a permutation of 0..{n_schools}"
                )));
            }
            prefs.extend_from_slice(list);
        }
        Ok(Self {
            scores,
            prefs,
            n_schools,
            seed,
        })
    }

    pub fn n_students(&self) -> usize {
        self.scores.len()
    }

    pub fn n_schools(&self) -> usize {
        self.n_schools
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn score(&self, s: usize) -> f64 {
        self.scores[s]
    }

    /// Preference list of student `s`, most preferred first.
    pub fn prefs(&self, s: usize) -> &[usize] {
        &self.prefs[s * self.n_schools..(s + 1) * self.n_schools]
    }

    /// `pos[s * n_schools + c]`: position of school `c` in student `s`'s list.
    fn positions(&self) -> Vec<usize> {
        let k = self.n_schools;
        let mut pos = vec![0; self.prefs.len()];
        for s in 0..self.n_students() {
            for (r, &c) in self.prefs(s).iter().enumerate() {
                pos[s * k + c] = r;
            }
        }
        pos
    }

    /// Students ordered by ascending score.
    fn by_score(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_students()).collect();
        idx.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        idx
    }

    /// Long-format CSV `student_id,score,pref_list,assigned_school`; the
    /// preference list is space separated and an unassigned student has an
    /// empty last field.
    pub fn write_csv<W: Write>(&self, matching: Option<&MatchingResult>, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["student_id", "score", "pref_list", "assigned_school"])?;
        for s in 0..self.n_students() {
            let prefs = self
                .prefs(s)
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(" ");
            let assigned = matching
                .and_then(|m| m.assignment[s])
                .map(|c| c.to_string())
                .unwrap_or_default();
            w.write_record([s.to_string(), self.scores[s].to_string(), prefs, assigned])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draws `n` students: i.i.d. uniform scores and MNL preference lists.
///
/// Lists are the schools sorted by `delta_c + G` with independent standard
/// Gumbel noise `G`, which has the same law as repeatedly choosing the next
/// school by MNL among those not yet ranked. The stream is ChaCha8 seeded
/// from `seed`, so a seed reproduces the sample on every platform.
pub fn sample_students(params: &MarketParams, n: usize, seed: u64) -> Result<StudentSample> {
    if n == 0 {
        return Err(Error::Config("sample needs at least one student".into()));
    }
    let k = params.n_schools();
    let delta = params.delta();
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut scores = Vec::with_capacity(n);
    let mut prefs = Vec::with_capacity(n * k);
    let mut keys = vec![0.0; k];
    let mut list: Vec<usize> = Vec::with_capacity(k);
    for _ in 0..n {
        scores.push(rng.random::<f64>());
        for (key, d) in keys.iter_mut().zip(&delta) {
            *key = d + gumbel.sample(&mut rng);
        }
        list.clear();
        list.extend(0..k);
        list.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]));
        prefs.extend_from_slice(&list);
    }

    // Scores must be distinct; redraw collisions from the same stream.
    loop {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
        let dups: Vec<usize> = idx
            .windows(2)
            .filter(|w| scores[w[0]] == scores[w[1]])
            .map(|w| w[1])
            .collect();
        if dups.is_empty() {
            break;
        }
        for s in dups {
            scores[s] = rng.random::<f64>();
        }
    }

    Ok(StudentSample {
        scores,
        prefs,
        n_schools: k,
        seed,
    })
}

/// Integer seat counts `floor(q_c * n)`. A relative slack of 1e-9 absorbs
/// products such as `0.29 * 100 = 28.999999999999996`.
pub fn scaled_capacities(capacity: &[f64], n: usize) -> Vec<usize> {
    capacity
        .iter()
        .map(|q| {
            let seats = q * n as f64;
            (seats + 1e-9 * seats.max(1.0)).floor() as usize
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingResult {
    /// School of each student, `None` if unassigned.
    pub assignment: Vec<Option<usize>>,
    /// Minimum score among each school's students, 1 for an empty school.
    pub implied_cutoffs: Vec<f64>,
    pub fill_counts: Vec<usize>,
}

impl MatchingResult {
    fn from_assignment(sample: &StudentSample, assignment: Vec<Option<usize>>) -> Self {
        let k = sample.n_schools();
        let mut implied_cutoffs = vec![1.0f64; k];
        let mut fill_counts = vec![0; k];
        for (s, a) in assignment.iter().enumerate() {
            if let Some(c) = *a {
                fill_counts[c] += 1;
                implied_cutoffs[c] = implied_cutoffs[c].min(sample.score(s));
            }
        }
        Self {
            assignment,
            implied_cutoffs,
            fill_counts,
        }
    }

    /// Fill counts as fractions of the roster size.
    pub fn fill_fractions(&self) -> Vec<f64> {
        let n = self.assignment.len() as f64;
        self.fill_counts.iter().map(|&f| f as f64 / n).collect()
    }

    pub fn n_unassigned(&self) -> usize {
        self.assignment.iter().filter(|a| a.is_none()).count()
    }
}

fn check_capacities(sample: &StudentSample, capacities: &[usize]) -> Result<()> {
    if capacities.len() != sample.n_schools() {
        return Err(Error::Dimension {
            expected: sample.n_schools(),
            got: capacities.len(),
        });
    }
    Ok(())
}

/// Student-proposing deferred acceptance. Students propose down their lists;
/// a full school keeps its highest-scoring applicants. Returns the
/// student-optimal stable matching.
pub fn student_proposing_da(sample: &StudentSample, capacities: &[usize]) -> Result<MatchingResult> {
    check_capacities(sample, capacities)?;
    let n = sample.n_students();
    let mut rank = vec![0usize; n];
    for (r, s) in sample.by_score().into_iter().enumerate() {
        rank[s] = r;
    }
    let mut next = vec![0usize; n];
    let mut held: Vec<BinaryHeap<Reverse<(usize, usize)>>> = capacities
        .iter()
        .map(|&q| BinaryHeap::with_capacity(q))
        .collect();
    let mut free: Vec<usize> = (0..n).rev().collect();

    while let Some(s) = free.pop() {
        let prefs = sample.prefs(s);
        while next[s] < prefs.len() {
            let c = prefs[next[s]];
            next[s] += 1;
            if capacities[c] == 0 {
                continue;
            }
            if held[c].len() < capacities[c] {
                held[c].push(Reverse((rank[s], s)));
                break;
            }
            let Reverse((worst_rank, worst)) = *held[c].peek().expect("full school holds someone");
            if rank[s] > worst_rank {
                held[c].pop();
                held[c].push(Reverse((rank[s], s)));
                free.push(worst);
                break;
            }
        }
    }

    let mut assignment = vec![None; n];
    for (c, heap) in held.iter().enumerate() {
        for Reverse((_, s)) in heap {
            assignment[*s] = Some(c);
        }
    }
    Ok(MatchingResult::from_assignment(sample, assignment))
}

/// School-proposing deferred acceptance. Each school offers seats down the
/// common score ranking until it holds its capacity; a student keeps only
/// the offer she likes best. Returns the school-optimal stable matching.
pub fn school_proposing_da(sample: &StudentSample, capacities: &[usize]) -> Result<MatchingResult> {
    check_capacities(sample, capacities)?;
    let n = sample.n_students();
    let k = sample.n_schools();
    let pos = sample.positions();
    let mut best_first = sample.by_score();
    best_first.reverse();

    let mut pointer = vec![0usize; k];
    let mut held = vec![0usize; k];
    let mut holder: Vec<Option<usize>> = vec![None; n];
    let mut active: Vec<usize> = (0..k).rev().collect();

    while let Some(c) = active.pop() {
        while held[c] < capacities[c] && pointer[c] < n {
            let s = best_first[pointer[c]];
            pointer[c] += 1;
            match holder[s] {
                None => {
                    holder[s] = Some(c);
                    held[c] += 1;
                }
                Some(other) if pos[s * k + c] < pos[s * k + other] => {
                    holder[s] = Some(c);
                    held[c] += 1;
                    held[other] -= 1;
                    active.push(other);
                }
                Some(_) => {}
            }
        }
    }
    Ok(MatchingResult::from_assignment(sample, holder))
}

/// Every student attends her favorite school among those whose cutoff she
/// meets. Capacities play no role.
pub fn decentralized_choice(sample: &StudentSample, p: &[f64]) -> Result<MatchingResult> {
    if p.len() != sample.n_schools() {
        return Err(Error::Dimension {
            expected: sample.n_schools(),
            got: p.len(),
        });
    }
    check_cutoffs(p)?;
    let assignment = (0..sample.n_students())
        .map(|s| {
            let theta = sample.score(s);
            sample.prefs(s).iter().copied().find(|&c| theta >= p[c])
        })
        .collect();
    Ok(MatchingResult::from_assignment(sample, assignment))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockingKind {
    /// The school has a free seat.
    EmptySeat,
    /// The school holds a lower-scored student.
    Envy { displaced: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockingPair {
    pub student: usize,
    pub school: usize,
    pub kind: BlockingKind,
}

/// Exhaustive stability audit: for every student and every school she
/// strictly prefers to her assignment, reports a free seat or a
/// lower-scored student holding a seat there. Quadratic in the roster;
/// intended as an oracle.
pub fn blocking_pairs(
    sample: &StudentSample,
    capacities: &[usize],
    matching: &MatchingResult,
) -> Vec<BlockingPair> {
    let n = sample.n_students();
    let mut out = Vec::new();
    for s in 0..n {
        let theta = sample.score(s);
        for &c in sample.prefs(s) {
            if matching.assignment[s] == Some(c) {
                break;
            }
            let filled = (0..n).filter(|&t| matching.assignment[t] == Some(c)).count();
            if filled < capacities[c] {
                out.push(BlockingPair {
                    student: s,
                    school: c,
                    kind: BlockingKind::EmptySeat,
                });
                continue;
            }
            if let Some(t) =
                (0..n).find(|&t| matching.assignment[t] == Some(c) && sample.score(t) < theta)
            {
                out.push(BlockingPair {
                    student: s,
                    school: c,
                    kind: BlockingKind::Envy { displaced: t },
                });
            }
        }
    }
    out
}

/// Whether no school holds more students than its capacity.
pub fn respects_capacities(matching: &MatchingResult, capacities: &[usize]) -> bool {
    matching
        .fill_counts
        .iter()
        .zip(capacities)
        .all(|(f, q)| f <= q)
}

/// Outcome of both DA variants on one sampled roster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub student_proposing: MatchingResult,
    pub school_proposing: MatchingResult,
    /// Blocking pairs found across both matchings, when audited.
    pub blocking_pairs: Option<usize>,
}

/// Runs both DA variants for each seed; seeds fan out across threads when
/// `exec` allows, each run stays single-threaded and deterministic.
pub fn da_seed_sweep(
    params: &MarketParams,
    n_students: usize,
    seeds: &[u64],
    audit: bool,
    exec: Execution,
) -> Result<Vec<SeedRun>> {
    let capacities = scaled_capacities(params.capacity(), n_students);
    par::map(seeds, exec, |&seed| {
        let sample = sample_students(params, n_students, seed)?;
        let sp = student_proposing_da(&sample, &capacities)?;
        let hp = school_proposing_da(&sample, &capacities)?;
        let blocking_pairs = audit.then(|| {
            blocking_pairs(&sample, &capacities, &sp).len()
                + blocking_pairs(&sample, &capacities, &hp).len()
        });
        Ok(SeedRun {
            seed,
            student_proposing: sp,
            school_proposing: hp,
            blocking_pairs,
        })
    })
    .into_iter()
    .collect()
}

/// Per-school mean over runs of `f(run)`.
pub fn mean_cutoffs(runs: &[SeedRun], f: impl Fn(&SeedRun) -> &MatchingResult) -> Vec<f64> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let k = f(first).implied_cutoffs.len();
    let mut acc = vec![0.0; k];
    for r in runs {
        for (a, v) in acc.iter_mut().zip(&f(r).implied_cutoffs) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / runs.len() as f64).collect()
}
