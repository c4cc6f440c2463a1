//! Turns published admissions statistics into a [`MarketObservation`]:
//! quartile test scores become implied cutoffs through population percentile
//! tables, and enrollment counts become demand shares.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inverse::MarketObservation;

/// Score statistics reported per school.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestId {
    SatReading,
    SatMath,
    SatWriting,
    ActComposite,
}

impl TestId {
    pub const ALL: [TestId; 4] = [
        TestId::SatReading,
        TestId::SatMath,
        TestId::SatWriting,
        TestId::ActComposite,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TestId::SatReading => "sat_reading",
            TestId::SatMath => "sat_math",
            TestId::SatWriting => "sat_writing",
            TestId::ActComposite => "act_composite",
        }
    }

    pub fn is_sat(self) -> bool {
        self != TestId::ActComposite
    }
}

impl FromStr for TestId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        TestId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown test {s:?}"))
    }
}

/// Quartiles at which schools report admitted students' scores.
pub const QUARTILES: [f64; 2] = [0.25, 0.75];

/// One row of the colleges file. Empty fields are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollegeRecord {
    /// 1-based line in the source file.
    pub line: u64,
    pub name: String,
    pub enrolled: Option<u64>,
    pub reported_yield: Option<f64>,
    /// `scores[test][quartile]`, in [`TestId::ALL`] and [`QUARTILES`] order.
    pub scores: [[Option<f64>; 2]; 4],
    pub sat_share: Option<f64>,
    pub act_share: Option<f64>,
}

/// Header of the colleges file.
pub const COLLEGE_COLUMNS: [&str; 13] = [
    "name",
    "enrolled",
    "yield",
    "sat_reading_25",
    "sat_reading_75",
    "sat_math_25",
    "sat_math_75",
    "sat_writing_25",
    "sat_writing_75",
    "act_composite_25",
    "act_composite_75",
    "sat_share",
    "act_share",
];

fn parse_opt<T: FromStr>(field: &str, column: &str, line: u64) -> Result<Option<T>> {
    let field = field.trim();
    if field.is_empty() {
        return Ok(None);
    }
    field.parse().map(Some).map_err(|_| Error::Data {
        line,
        message: format!("column {column}: cannot parse {field:?}"),
    })
}

fn check_fraction(v: Option<f64>, column: &str, line: u64) -> Result<Option<f64>> {
    match v {
        Some(x) if !(0.0..=1.0).contains(&x) => Err(Error::Data {
            line,
            message: format!("column {column}: {x} is not a fraction in [0, 1]"),
        }),
        _ => Ok(v),
    }
}

/// Reads the colleges CSV. Columns are matched by name, so order and extra
/// columns do not matter; every column of [`COLLEGE_COLUMNS`] must exist.
pub fn read_records<R: Read>(input: R) -> Result<Vec<CollegeRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let mut idx = [0usize; 13];
    for (slot, col) in idx.iter_mut().zip(COLLEGE_COLUMNS) {
        *slot = headers.iter().position(|h| h == col).ok_or_else(|| Error::Data {
            line: 1,
            message: format!("missing column {col}"),
        })?;
    }

    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let get = |k: usize| row.get(idx[k]).unwrap_or("");
        let name = get(0).to_string();
        if name.is_empty() {
            return Err(Error::Data {
                line,
                message: "empty school name".into(),
            });
        }
        let mut scores = [[None; 2]; 4];
        for (t, pair) in scores.iter_mut().enumerate() {
            for (q, slot) in pair.iter_mut().enumerate() {
                let k = 3 + 2 * t + q;
                *slot = parse_opt(get(k), COLLEGE_COLUMNS[k], line)?;
            }
        }
        out.push(CollegeRecord {
            line,
            name,
            enrolled: parse_opt(get(1), "enrolled", line)?,
            reported_yield: check_fraction(parse_opt(get(2), "yield", line)?, "yield", line)?,
            scores,
            sat_share: check_fraction(parse_opt(get(11), "sat_share", line)?, "sat_share", line)?,
            act_share: check_fraction(parse_opt(get(12), "act_share", line)?, "act_share", line)?,
        });
    }
    Ok(out)
}

/// Population percentile of raw scores, per test. Rows are `test,score,percentile`
/// with percentiles as fractions; lines starting with `#` are comments and a
/// `# version: ...` comment names the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileTable {
    pub version: Option<String>,
    rows: BTreeMap<TestId, Vec<(f64, f64)>>,
}

impl PercentileTable {
    pub fn from_reader<R: Read>(mut input: R) -> Result<Self> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let version = text.lines().find_map(|l| {
            l.trim()
                .strip_prefix('#')
                .and_then(|c| c.trim().strip_prefix("version:"))
                .map(|v| v.trim().to_string())
        });

        #[derive(Deserialize)]
        struct Row {
            test: String,
            score: f64,
            percentile: f64,
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut rows: BTreeMap<TestId, Vec<(f64, f64)>> = BTreeMap::new();
        for rec in reader.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            let row: Row = rec.deserialize(None).map_err(|e| Error::Data {
                line,
                message: e.to_string(),
            })?;
            let test: TestId = row.test.parse().map_err(|message| Error::Data { line, message })?;
            if !(0.0..=1.0).contains(&row.percentile) || !row.score.is_finite() {
                return Err(Error::Data {
                    line,
                    message: format!("percentile {} is not in [0, 1]", row.percentile),
                });
            }
            rows.entry(test).or_default().push((row.score, row.percentile));
        }
        for (test, pts) in rows.iter_mut() {
            pts.sort_by(|a, b| a.0.total_cmp(&b.0));
            if pts.windows(2).any(|w| w[0].0 == w[1].0 || w[1].1 < w[0].1) {
                return Err(Error::Data {
                    line: 0,
                    message: format!(
                        "table for {} needs distinct scores and nondecreasing percentiles",
                        test.as_str()
                    ),
                });
            }
        }
        Ok(Self { version, rows })
    }

    /// Percentile of `score`, interpolated linearly between table rows.
    /// `None` for an unknown test or a score outside the table's range.
    pub fn percentile(&self, test: TestId, score: f64) -> Option<f64> {
        let pts = self.rows.get(&test)?;
        let (first, last) = (pts.first()?, pts.last()?);
        if !(first.0..=last.0).contains(&score) {
            return None;
        }
        let k = pts.partition_point(|&(s, _)| s <= score);
        if k == pts.len() {
            return Some(last.1);
        }
        let (s0, p0) = pts[k - 1];
        let (s1, p1) = pts[k];
        Some(p0 + (p1 - p0) * (score - s0) / (s1 - s0))
    }

    pub fn has_test(&self, test: TestId) -> bool {
        self.rows.contains_key(&test)
    }
}

/// Cutoff implied by a quartile score: if a fraction `p_rel` of admits score
/// below the population percentile `p_abs`, the lowest admit sits at
/// `1 - (1 - p_abs) / (1 - p_rel)`, cropped at zero.
pub fn implied_cutoff(p_rel: f64, p_abs: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p_rel) {
        return Err(Error::Config(format!("relative percentile must lie in [0, 1), got {p_rel}")));
    }
    if !(0.0..=1.0).contains(&p_abs) {
        return Err(Error::Config(format!("absolute percentile must lie in [0, 1], got {p_abs}")));
    }
    Ok((1.0 - (1.0 - p_abs) / (1.0 - p_rel)).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub line: u64,
    pub name: String,
    pub reason: String,
}

/// Run metadata written next to the observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub retained: usize,
    pub excluded: Vec<Exclusion>,
    pub total_enrolled: u64,
    pub table_version: Option<String>,
    pub interpolation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestOutcome {
    pub observation: MarketObservation,
    pub enrolled: Vec<u64>,
    pub reported_yield: Vec<Option<f64>>,
    pub report: IngestReport,
}

impl IngestOutcome {
    pub fn total_enrolled(&self) -> u64 {
        self.report.total_enrolled
    }
}

/// Composite cutoff of one school, or the reason it is excluded.
fn school_cutoff(rec: &CollegeRecord, table: &PercentileTable) -> Result<std::result::Result<f64, String>> {
    let mut family = [Vec::new(), Vec::new()];
    for (t, test) in TestId::ALL.into_iter().enumerate() {
        for (q, p_rel) in QUARTILES.into_iter().enumerate() {
            let Some(score) = rec.scores[t][q] else {
                return Ok(Err(format!(
                    "missing {}_{}",
                    test.as_str(),
                    (p_rel * 100.0) as u32
                )));
            };
            let p_abs = table.percentile(test, score).ok_or_else(|| Error::Data {
                line: rec.line,
                message: format!("{} score {score} is outside the percentile table", test.as_str()),
            })?;
            family[usize::from(!test.is_sat())].push(implied_cutoff(p_rel, p_abs)?);
        }
    }
    let (Some(sat_share), Some(act_share)) = (rec.sat_share, rec.act_share) else {
        return Ok(Err("missing submission shares".into()));
    };
    let weight = sat_share + act_share;
    if weight <= 0.0 {
        return Ok(Err("submission shares are both zero".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let cutoff = (sat_share * mean(&family[0]) + act_share * mean(&family[1])) / weight;
    Ok(Ok(cutoff.clamp(0.0, 1.0)))
}

/// Builds the observation: per school, average the implied cutoffs within
/// the SAT and ACT families, then weight the two by submission shares.
/// Schools missing any required value are excluded and reported; demand is
/// enrollment over total retained enrollment.
pub fn build_observation(records: &[CollegeRecord], table: &PercentileTable) -> Result<IngestOutcome> {
    if records.is_empty() {
        return Err(Error::Data {
            line: 0,
            message: "no college records".into(),
        });
    }
    for test in TestId::ALL {
        if !table.has_test(test) {
            return Err(Error::Config(format!(
                "percentile table has no rows for {}",
                test.as_str()
            )));
        }
    }

    let mut labels = Vec::new();
    let mut cutoffs = Vec::new();
    let mut enrolled = Vec::new();
    let mut reported_yield = Vec::new();
    let mut excluded = Vec::new();
    for rec in records {
        let exclude = |reason: String| Exclusion {
            line: rec.line,
            name: rec.name.clone(),
            reason,
        };
        let count = match rec.enrolled {
            Some(0) => {
                excluded.push(exclude("zero enrollment".into()));
                continue;
            }
            Some(n) => n,
            None => {
                excluded.push(exclude("missing enrolled".into()));
                continue;
            }
        };
        match school_cutoff(rec, table)? {
            Ok(p) if p < 1.0 => {
                labels.push(rec.name.clone());
                cutoffs.push(p);
                enrolled.push(count);
                reported_yield.push(rec.reported_yield);
            }
            Ok(_) => excluded.push(exclude("implied cutoff is 1".into())),
            Err(reason) => excluded.push(exclude(reason)),
        }
    }
    if labels.is_empty() {
        return Err(Error::Data {
            line: 0,
            message: "every school was excluded".into(),
        });
    }

    let total: u64 = enrolled.iter().sum();
    let demand = enrolled.iter().map(|&e| e as f64 / total as f64).collect();
    let observation = MarketObservation::new(labels, cutoffs, demand)?;
    Ok(IngestOutcome {
        report: IngestReport {
            rows_read: records.len(),
            retained: observation.n_schools(),
            excluded,
            total_enrolled: total,
            table_version: table.version.clone(),
            interpolation: "linear in raw score between table rows".into(),
        },
        observation,
        enrolled,
        reported_yield,
    })
}

/// Writes `name,cutoff,demand_fraction,demand_count,yield`; the yield column
/// carries the reported yield and is empty where none was given.
pub fn write_observation_csv<W: Write>(outcome: &IngestOutcome, out: W) -> Result<()> {
    let obs = &outcome.observation;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["name", "cutoff", "demand_fraction", "demand_count", "yield"])?;
    for c in 0..obs.n_schools() {
        w.write_record([
            obs.labels()[c].clone(),
            obs.cutoffs()[c].to_string(),
            obs.demand()[c].to_string(),
            outcome.enrolled[c].to_string(),
            outcome.reported_yield[c].map(|y| y.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// An observation file read back, with the optional count and yield columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationFile {
    pub observation: MarketObservation,
    pub demand_count: Option<Vec<f64>>,
    pub reported_yield: Vec<Option<f64>>,
}

impl ObservationFile {
    /// Population implied by the count column: total count over total share.
    pub fn population(&self) -> Option<f64> {
        let counts = self.demand_count.as_ref()?;
        let share: f64 = self.observation.demand().iter().sum();
        Some(counts.iter().sum::<f64>() / share)
    }
}

/// Reads an observation CSV with columns `name,cutoff,demand_fraction` and
/// optionally `demand_count` and `yield`.
pub fn read_observation_csv<R: Read>(input: R) -> Result<ObservationFile> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let need = |name: &str| {
        col(name).ok_or_else(|| Error::Data {
            line: 1,
            message: format!("missing column {name}"),
        })
    };
    let (name_i, cut_i, dem_i) = (need("name")?, need("cutoff")?, need("demand_fraction")?);
    let (count_i, yield_i) = (col("demand_count"), col("yield"));

    let mut labels = Vec::new();
    let mut cutoffs = Vec::new();
    let mut demand = Vec::new();
    let mut counts = Vec::new();
    let mut yields = Vec::new();
    for row in reader.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(i).unwrap_or("");
        let required = |i: usize, name: &str| -> Result<f64> {
            parse_opt(field(i), name, line)?.ok_or_else(|| Error::Data {
                line,
                message: format!("column {name} is empty"),
            })
        };
        labels.push(field(name_i).to_string());
        cutoffs.push(required(cut_i, "cutoff")?);
        demand.push(required(dem_i, "demand_fraction")?);
        if let Some(i) = count_i {
            counts.push(required(i, "demand_count")?);
        }
        yields.push(match yield_i {
            Some(i) => parse_opt(field(i), "yield", line)?,
            None => None,
        });
    }
    Ok(ObservationFile {
        observation: MarketObservation::new(labels, cutoffs, demand)?,
        demand_count: count_i.map(|_| counts),
        reported_yield: yields,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const TABLE: &str = "\
# version: unit-test
test,score,percentile
sat_reading,200,0
sat_reading,800,1
sat_math,200,0
sat_math,800,1
sat_writing,200,0
sat_writing,800,1
act_composite,1,0
act_composite,30,0.9
act_composite,36,1
";

    fn table() -> PercentileTable {
        PercentileTable::from_reader(TABLE.as_bytes()).unwrap()
    }

    #[test]
    fn implied_cutoff_examples() {
        assert!((implied_cutoff(0.75, 0.90).unwrap() - 0.60).abs() < 1e-12);
        assert_eq!(implied_cutoff(0.25, 0.25).unwrap(), 0.0);
        assert_eq!(implied_cutoff(0.75, 1.0).unwrap(), 1.0);
        assert_eq!(implied_cutoff(0.75, 0.5).unwrap(), 0.0);
        assert!(implied_cutoff(1.0, 0.5).is_err());
    }

    #[test]
    fn table_interpolates_and_bounds() {
        let t = table();
        assert_eq!(t.version.as_deref(), Some("unit-test"));
        assert_eq!(t.percentile(TestId::ActComposite, 30.0), Some(0.9));
        assert!((t.percentile(TestId::ActComposite, 33.0).unwrap() - 0.95).abs() < 1e-12);
        assert_eq!(t.percentile(TestId::SatMath, 500.0), Some(0.5));
        assert_eq!(t.percentile(TestId::SatMath, 800.0), Some(1.0));
        assert_eq!(t.percentile(TestId::SatMath, 810.0), None);
    }

    #[test]
    fn bad_tables_rejected() {
        let bad = "test,score,percentile\nsat_math,200,0.5\nsat_math,300,0.4\n";
        assert!(PercentileTable::from_reader(bad.as_bytes()).is_err());
        let bad = "test,score,percentile\ngre,200,0.5\n";
        assert!(matches!(
            PercentileTable::from_reader(bad.as_bytes()),
            Err(Error::Data { line: 2, .. })
        ));
    }

    fn header() -> String {
        COLLEGE_COLUMNS.join(",")
    }

    #[test]
    fn malformed_rows_report_line() {
        let text = format!("{}\nA,100,0.5,500,600,500,600,500,600,20,25,0.5,0.5\nB,abc,,,,,,,,,,,\n", header());
        let err = read_records(text.as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Data { line: 3, .. }), "{err}");
    }

    #[test]
    fn exclusions_and_demand() {
        let text = format!(
            "{}\nA,100,0.5,500,700,500,700,500,700,30,33,1,0\nB,100,,500,600,,600,500,600,20,25,0.5,0.5\nC,300,,500,600,500,600,500,600,20,25,0.6,0.2\n",
            header()
        );
        let recs = read_records(text.as_bytes()).unwrap();
        let out = build_observation(&recs, &table()).unwrap();
        assert_eq!(out.report.retained, 2);
        assert_eq!(out.report.excluded.len(), 1);
        assert_eq!(out.report.excluded[0].name, "B");
        assert_eq!(out.report.excluded[0].line, 3);
        assert_eq!(out.observation.demand(), &[0.25, 0.75]);
        assert_eq!(out.total_enrolled(), 400);
        assert_eq!(out.reported_yield, vec![Some(0.5), None]);
    }

    #[test]
    fn single_test_single_pair_equals_implied_cutoff() {
        // the three SAT sections agree and the ACT family carries no weight;
        // B is a bottom school absorbing the remaining demand
        let text = format!(
            "{}\nA,10,,650,800,650,800,650,800,30,36,1,0\nB,1000,,200,200,200,200,200,200,1,1,1,0\n",
            header()
        );
        let recs = read_records(text.as_bytes()).unwrap();
        let out = build_observation(&recs, &table()).unwrap();
        let p25 = implied_cutoff(0.25, 0.75).unwrap();
        let p75 = implied_cutoff(0.75, 1.0).unwrap();
        assert!((out.observation.cutoffs()[0] - (p25 + p75) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_score_is_an_error() {
        let text = format!("{}\nA,10,,650,900,650,800,650,800,30,36,1,0\n", header());
        let recs = read_records(text.as_bytes()).unwrap();
        assert!(matches!(
            build_observation(&recs, &table()),
            Err(Error::Data { line: 2, .. })
        ));
    }

    #[test]
    fn observation_csv_round_trip() {
        let text = format!(
            "{}\nA,100,0.5,500,700,500,700,500,700,30,33,1,0\nC,300,,500,600,500,600,500,600,20,25,0.6,0.2\n",
            header()
        );
        let out = build_observation(&read_records(text.as_bytes()).unwrap(), &table()).unwrap();
        let mut buf = Vec::new();
        write_observation_csv(&out, &mut buf).unwrap();
        let back = read_observation_csv(buf.as_slice()).unwrap();
        assert_eq!(back.observation, out.observation);
        assert_eq!(back.reported_yield, out.reported_yield);
        assert_eq!(back.population(), Some(400.0));
    }
}
