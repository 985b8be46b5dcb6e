//! Cubic mapping of DMOS onto an external JND scale and the correlation
//! metrics of the mapped scores.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Codec, Stimulus};
use crate::numerics::{self, CorrelationReport, NumericsError};
use crate::reconstruction::DmosTable;

pub const POOLED_GROUP: &str = "All";

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("group {group}: only {found} stimuli shared by DMOS and JND tables, need 4")]
    InsufficientOverlap { group: String, found: usize },
    #[error("group {group}: {source}")]
    Numerics {
        group: String,
        #[source]
        source: NumericsError,
    },
    #[error("malformed JND record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct JndRecord {
    source_id: String,
    codec: Codec,
    distortion_level: u8,
    jnd: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct JndTable {
    pub jnd: BTreeMap<Stimulus, f64>,
}

impl JndTable {
    /// Reads `{source_id, codec, distortion_level, jnd}` JSON lines.
    pub fn read<R: BufRead>(reader: R) -> Result<Self, AlignmentError> {
        let mut jnd = BTreeMap::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let malformed = |reason: String| AlignmentError::MalformedRecord {
                line: idx + 1,
                reason,
            };
            let r: JndRecord = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
            let s = Stimulus::new(r.source_id, r.codec, r.distortion_level)
                .map_err(|e| malformed(e.to_string()))?;
            if jnd.insert(s, r.jnd).is_some() {
                return Err(malformed("stimulus listed twice".into()));
            }
        }
        Ok(JndTable { jnd })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, AlignmentError> {
        let file = std::fs::File::open(path)?;
        Self::read(std::io::BufReader::new(file))
    }

    pub fn write<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        for (s, &jnd) in &self.jnd {
            let rec = JndRecord {
                source_id: s.source_id.clone(),
                codec: s.codec,
                distortion_level: s.distortion_level,
                jnd,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// One cubic and one set of metrics per source.
    PerSource,
    /// One cubic over all stimuli.
    Pooled,
    /// A cubic per source, metrics over the pooled mapped values.
    PerSourceMappedPooled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAlignment {
    pub group: String,
    pub cubic_coeffs: Vec<f64>,
    /// False when the cubic changes direction on the observed DMOS range.
    pub monotone: bool,
    pub correlations: CorrelationReport,
    /// PLCC/SROCC/Kendall of the raw DMOS against JND.
    pub raw_correlations: CorrelationReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentReport {
    pub grouping: Grouping,
    pub groups: Vec<GroupAlignment>,
    pub mapped: BTreeMap<Stimulus, f64>,
    /// (dmos, jnd) pairs actually used.
    pub pairs: BTreeMap<Stimulus, (f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub source_id: String,
    pub codec: Codec,
    pub distortion_level: u8,
    pub dmos: f64,
    pub jnd: f64,
    pub mapped: f64,
}

impl AlignmentReport {
    pub fn group(&self, name: &str) -> Option<&GroupAlignment> {
        self.groups.iter().find(|g| g.group == name)
    }

    pub fn scatter(&self) -> Vec<ScatterRow> {
        self.pairs
            .iter()
            .map(|(s, &(dmos, jnd))| ScatterRow {
                source_id: s.source_id.clone(),
                codec: s.codec,
                distortion_level: s.distortion_level,
                dmos,
                jnd,
                mapped: self.mapped[s],
            })
            .collect()
    }
}

/// True when the derivative of the cubic keeps one sign on [lo, hi].
pub fn cubic_is_monotone(coeffs: &[f64], lo: f64, hi: f64) -> bool {
    let deriv = |x: f64| {
        coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, c)| k as f64 * c * x.powi(k as i32 - 1))
            .sum::<f64>()
    };
    // critical points of the derivative plus the interval ends
    let mut points = vec![lo, hi];
    let (b, c, d) = (
        coeffs.get(1).copied().unwrap_or(0.0),
        coeffs.get(2).copied().unwrap_or(0.0),
        coeffs.get(3).copied().unwrap_or(0.0),
    );
    // derivative b + 2c x + 3d x²; its roots split the range
    let qa = 3.0 * d;
    let qb = 2.0 * c;
    if qa.abs() > 0.0 {
        let disc = qb * qb - 4.0 * qa * b;
        if disc >= 0.0 {
            let root = disc.sqrt();
            points.push((-qb - root) / (2.0 * qa));
            points.push((-qb + root) / (2.0 * qa));
        }
    } else if qb.abs() > 0.0 {
        points.push(-b / qb);
    }
    points.retain(|p| *p >= lo && *p <= hi);
    points.sort_by(f64::total_cmp);
    let scale = deriv(lo).abs().max(deriv(hi).abs()).max(1e-300);
    let mut sign = 0.0;
    for w in points.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let v = deriv(mid);
        if v.abs() <= 1e-12 * scale {
            continue;
        }
        if sign == 0.0 {
            sign = v.signum();
        } else if v.signum() != sign {
            return false;
        }
    }
    true
}

struct FittedGroup {
    coeffs: Vec<f64>,
    monotone: bool,
    mapped: Vec<f64>,
}

fn fit_group(group: &str, dmos: &[f64], jnd: &[f64]) -> Result<FittedGroup, AlignmentError> {
    if dmos.len() < 4 {
        return Err(AlignmentError::InsufficientOverlap {
            group: group.to_string(),
            found: dmos.len(),
        });
    }
    let numerics_err = |source| AlignmentError::Numerics {
        group: group.to_string(),
        source,
    };
    // fit in centered/scaled units so the mapped values do not depend on the DMOS scale
    let center = numerics::mean(dmos);
    let spread = dmos.iter().map(|d| (d - center).abs()).fold(0.0, f64::max);
    let scale = if spread > 0.0 { spread } else { 1.0 };
    let t: Vec<f64> = dmos.iter().map(|d| (d - center) / scale).collect();
    let local = numerics::polyfit(&t, jnd, 3).map_err(numerics_err)?;
    let mapped: Vec<f64> = t.iter().map(|&x| numerics::polyval(&local, x)).collect();
    let lo = t.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = t.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let monotone = cubic_is_monotone(&local, lo, hi);
    let coeffs = numerics::polyfit(dmos, jnd, 3).map_err(numerics_err)?;
    Ok(FittedGroup {
        coeffs,
        monotone,
        mapped,
    })
}

fn correlations(group: &str, x: &[f64], y: &[f64]) -> Result<CorrelationReport, AlignmentError> {
    CorrelationReport::compute(x, y).map_err(|source| AlignmentError::Numerics {
        group: group.to_string(),
        source,
    })
}

/// Fits JND ≈ cubic(DMOS) per group and reports PLCC/SROCC/Kendall of the
/// mapped values against JND, alongside the same metrics on raw DMOS.
pub fn align(
    dmos: &DmosTable,
    jnd: &JndTable,
    grouping: Grouping,
) -> Result<AlignmentReport, AlignmentError> {
    let pairs: BTreeMap<Stimulus, (f64, f64)> = dmos
        .dmos
        .iter()
        .filter_map(|(s, &d)| jnd.jnd.get(s).map(|&j| (s.clone(), (d, j))))
        .collect();

    let mut by_source: BTreeMap<&str, Vec<&Stimulus>> = BTreeMap::new();
    for s in pairs.keys() {
        by_source.entry(s.source_id.as_str()).or_default().push(s);
    }
    let all: Vec<&Stimulus> = pairs.keys().collect();
    let column = |members: &[&Stimulus], pick: fn(&(f64, f64)) -> f64| -> Vec<f64> {
        members.iter().map(|s| pick(&pairs[*s])).collect()
    };

    let mut groups = Vec::new();
    let mut mapped = BTreeMap::new();
    match grouping {
        Grouping::Pooled => {
            let d = column(&all, |p| p.0);
            let j = column(&all, |p| p.1);
            let fitted = fit_group(POOLED_GROUP, &d, &j)?;
            groups.push(GroupAlignment {
                group: POOLED_GROUP.into(),
                correlations: correlations(POOLED_GROUP, &fitted.mapped, &j)?,
                raw_correlations: correlations(POOLED_GROUP, &d, &j)?,
                cubic_coeffs: fitted.coeffs,
                monotone: fitted.monotone,
            });
            mapped.extend(all.iter().map(|s| (*s).clone()).zip(fitted.mapped));
        }
        Grouping::PerSource | Grouping::PerSourceMappedPooled => {
            if by_source.is_empty() {
                return Err(AlignmentError::InsufficientOverlap {
                    group: POOLED_GROUP.into(),
                    found: 0,
                });
            }
            let mut all_monotone = true;
            for (source, members) in &by_source {
                let d = column(members, |p| p.0);
                let j = column(members, |p| p.1);
                let fitted = fit_group(source, &d, &j)?;
                all_monotone &= fitted.monotone;
                if grouping == Grouping::PerSource {
                    groups.push(GroupAlignment {
                        group: source.to_string(),
                        correlations: correlations(source, &fitted.mapped, &j)?,
                        raw_correlations: correlations(source, &d, &j)?,
                        cubic_coeffs: fitted.coeffs,
                        monotone: fitted.monotone,
                    });
                }
                mapped.extend(members.iter().map(|s| (*s).clone()).zip(fitted.mapped));
            }
            if grouping == Grouping::PerSourceMappedPooled {
                let m: Vec<f64> = all.iter().map(|s| mapped[*s]).collect();
                let d = column(&all, |p| p.0);
                let j = column(&all, |p| p.1);
                groups.push(GroupAlignment {
                    group: POOLED_GROUP.into(),
                    cubic_coeffs: Vec::new(),
                    monotone: all_monotone,
                    correlations: correlations(POOLED_GROUP, &m, &j)?,
                    raw_correlations: correlations(POOLED_GROUP, &d, &j)?,
                });
            }
        }
    }
    Ok(AlignmentReport {
        grouping,
        groups,
        mapped,
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stim(source: &str, level: u8) -> Stimulus {
        Stimulus::new(source, Codec::Jpeg, level).unwrap()
    }

    fn tables(pairs: &[(Stimulus, f64, f64)]) -> (DmosTable, JndTable) {
        let mut dmos = DmosTable::default();
        let mut jnd = JndTable::default();
        for (s, d, j) in pairs {
            dmos.dmos.insert(s.clone(), *d);
            dmos.mos.insert(s.clone(), *d);
            jnd.jnd.insert(s.clone(), *j);
        }
        (dmos, jnd)
    }

    #[test]
    fn exact_cubic_is_recovered() {
        let pairs: Vec<_> = (1..=10)
            .map(|l| {
                let d = 8.0 * l as f64 - 5.0;
                (
                    stim("a", l),
                    d,
                    0.5 + 0.02 * d + 1e-3 * d * d + 2e-5 * d * d * d,
                )
            })
            .collect();
        let (dmos, jnd) = tables(&pairs);
        let report = align(&dmos, &jnd, Grouping::Pooled).unwrap();
        let g = report.group(POOLED_GROUP).unwrap();
        assert!((g.correlations.plcc - 1.0).abs() < 1e-9);
        assert!(g.monotone);
        for (c, want) in g.cubic_coeffs.iter().zip([0.5, 0.02, 1e-3, 2e-5]) {
            assert!(
                (c - want).abs() < 1e-8 * want.abs().max(1.0),
                "{:?}",
                g.cubic_coeffs
            );
        }
    }

    #[test]
    fn swapped_pair_lowers_srocc() {
        let mut pairs: Vec<_> = (1..=8)
            .map(|l| (stim("a", l), l as f64, l as f64))
            .collect();
        pairs[2].2 = 4.0;
        pairs[3].2 = 3.0;
        let (dmos, jnd) = tables(&pairs);
        let report = align(&dmos, &jnd, Grouping::PerSource).unwrap();
        let g = report.group("a").unwrap();
        // d² = 1 + 1 over n = 8: 1 - 6·2 / (8·63)
        let expected = 1.0 - 12.0 / 504.0;
        assert!((g.raw_correlations.srocc - expected).abs() < 1e-12);
        assert!(g.raw_correlations.srocc < 1.0);
    }

    #[test]
    fn overlap_is_required() {
        let pairs: Vec<_> = (1..=3)
            .map(|l| (stim("a", l), l as f64, l as f64))
            .collect();
        let (dmos, jnd) = tables(&pairs);
        assert!(matches!(
            align(&dmos, &jnd, Grouping::PerSource),
            Err(AlignmentError::InsufficientOverlap { found: 3, .. })
        ));
    }

    #[test]
    fn monotonicity_check() {
        assert!(cubic_is_monotone(&[0.0, 1.0, 0.0, 0.0], -1.0, 1.0));
        assert!(cubic_is_monotone(&[0.0, 0.0, 0.0, 1.0], -1.0, 1.0));
        assert!(!cubic_is_monotone(&[0.0, -1.0, 0.0, 1.0], -1.0, 1.0));
        assert!(cubic_is_monotone(&[0.0, -1.0, 0.0, 1.0], 1.0, 2.0));
    }

    #[test]
    fn jnd_file_round_trip() {
        let mut table = JndTable::default();
        table.jnd.insert(stim("2", 3), 7.25);
        table.jnd.insert(Stimulus::pristine("2"), 0.0);
        let mut buf = Vec::new();
        table.write(&mut buf).unwrap();
        assert_eq!(JndTable::read(buf.as_slice()).unwrap(), table);
        let bad = br#"{"source_id":"2","codec":"NONE","distortion_level":4,"jnd":1}"#;
        assert!(matches!(
            JndTable::read(&bad[..]),
            Err(AlignmentError::MalformedRecord { line: 1, .. })
        ));
    }
}
