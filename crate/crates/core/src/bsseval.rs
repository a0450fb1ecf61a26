//! Full-length BSS-eval decomposition and SDR scoring.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::mixgen::MixtureSample;

/// Magnitude used in place of infinite SDR when aggregating.
pub const SDR_CAP_DB: f64 = 300.0;
/// Energy ratio below which a component counts as exactly zero.
const NULL_RATIO: f64 = 1e-24;

#[derive(Error, Debug, PartialEq)]
pub enum BssError {
    #[error("length mismatch: estimate {estimate}, reference {reference}")]
    LengthMismatch { estimate: usize, reference: usize },
    #[error("reference signal is all zeros")]
    ZeroReference,
    #[error("empty evaluation set")]
    EmptyEvaluation,
    #[error("{estimates} estimates for {references} references")]
    Misaligned { estimates: usize, references: usize },
    #[error("malformed report csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, BssError>;

#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
    pub e_noise: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Least-squares coefficients of `estimate` over `refs`.
fn project_coeffs(estimate: &[f64], refs: &[&[f64]]) -> Vec<f64> {
    let n = refs.len();
    let gram = DMatrix::from_fn(n, n, |i, j| dot(refs[i], refs[j]));
    let rhs = DVector::from_iterator(n, refs.iter().map(|r| dot(r, estimate)));
    if let Some(chol) = gram.clone().cholesky() {
        let c = chol.solve(&rhs);
        if c.iter().all(|v| v.is_finite()) {
            return c.iter().copied().collect();
        }
    }
    let svd = gram.svd(true, true);
    let tol = svd.singular_values.max() * 1e-12;
    let pinv = svd
        .pseudo_inverse(tol)
        .expect("both singular vector sets were computed");
    (pinv * rhs).iter().copied().collect()
}

pub fn decompose(
    estimate: &[f64],
    reference: &[f64],
    other_refs: &[&[f64]],
) -> Result<Decomposition> {
    for r in std::iter::once(reference).chain(other_refs.iter().copied()) {
        if r.len() != estimate.len() {
            return Err(BssError::LengthMismatch {
                estimate: estimate.len(),
                reference: r.len(),
            });
        }
    }
    let rr = dot(reference, reference);
    if rr == 0.0 {
        return Err(BssError::ZeroReference);
    }
    let gain = dot(estimate, reference) / rr;
    let s_target: Vec<f64> = reference.iter().map(|v| gain * v).collect();

    let mut refs = vec![reference];
    refs.extend_from_slice(other_refs);
    let coeffs = project_coeffs(estimate, &refs);
    let mut p_all = vec![0.0; estimate.len()];
    for (c, r) in coeffs.iter().zip(&refs) {
        for (p, v) in p_all.iter_mut().zip(r.iter()) {
            *p += c * v;
        }
    }
    Ok(Decomposition {
        e_interf: p_all.iter().zip(&s_target).map(|(p, s)| p - s).collect(),
        e_artif: estimate.iter().zip(&p_all).map(|(e, p)| e - p).collect(),
        e_noise: vec![0.0; estimate.len()],
        s_target,
    })
}

impl Decomposition {
    /// SDR in dB, `+inf` for a distortion-free estimate and `-inf` when nothing of the
    /// reference is recovered.
    pub fn sdr(&self) -> f64 {
        let target: f64 = dot(&self.s_target, &self.s_target);
        let distortion: f64 = (0..self.s_target.len())
            .map(|i| (self.e_interf[i] + self.e_artif[i] + self.e_noise[i]).powi(2))
            .sum();
        if target <= NULL_RATIO * distortion || target == 0.0 {
            f64::NEG_INFINITY
        } else if distortion <= NULL_RATIO * target {
            f64::INFINITY
        } else {
            10.0 * (target / distortion).log10()
        }
    }
}

pub fn sdr(estimate: &[f64], reference: &[f64], other_refs: &[&[f64]]) -> Result<f64> {
    Ok(decompose(estimate, reference, other_refs)?.sdr())
}

pub fn cap(db: f64) -> f64 {
    db.clamp(-SDR_CAP_DB, SDR_CAP_DB)
}

fn fmt_db(db: f64) -> String {
    if db == f64::INFINITY {
        "inf".into()
    } else if db == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{db}")
    }
}

fn parse_db(s: &str) -> Option<f64> {
    match s {
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok().filter(|v: &f64| v.is_finite()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Channel {
    Fish,
    Background,
}

impl Channel {
    pub fn name(self) -> &'static str {
        match self {
            Self::Fish => "Fish",
            Self::Background => "Background",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ItemSdr {
    pub id: String,
    pub fish: f64,
    pub background: f64,
}

/// Aggregate over capped per-item values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelSummary {
    pub mean: f64,
    pub median: f64,
    pub count: usize,
}

impl ChannelSummary {
    fn from_values(values: impl Iterator<Item = f64>) -> Self {
        let mut v: Vec<f64> = values.map(cap).collect();
        v.sort_by(f64::total_cmp);
        let count = v.len();
        let median = if count % 2 == 1 {
            v[count / 2]
        } else {
            (v[count / 2 - 1] + v[count / 2]) / 2.0
        };
        Self {
            mean: v.iter().sum::<f64>() / count as f64,
            median,
            count,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SdrReport {
    pub items: Vec<ItemSdr>,
    pub fish: ChannelSummary,
    pub background: ChannelSummary,
}

/// Estimate and ground truth for one test item.
#[derive(Clone, Copy, Debug)]
pub struct EvalRow<'a> {
    pub id: &'a str,
    pub fish_est: &'a [f64],
    pub bg_est: &'a [f64],
    pub fish_ref: &'a [f64],
    pub bg_ref: &'a [f64],
}

pub fn evaluate_rows(rows: &[EvalRow<'_>]) -> Result<SdrReport> {
    let items = rows
        .iter()
        .map(|r| {
            Ok(ItemSdr {
                id: r.id.to_string(),
                fish: sdr(r.fish_est, r.fish_ref, &[r.bg_ref])?,
                background: sdr(r.bg_est, r.bg_ref, &[r.fish_ref])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    SdrReport::from_items(items)
}

/// Scores `(fish_est, bg_est)` pairs against the stored sources of `testset`.
pub fn evaluate(
    estimates: &[(Vec<f64>, Vec<f64>)],
    testset: &[MixtureSample],
) -> Result<SdrReport> {
    if estimates.len() != testset.len() {
        return Err(BssError::Misaligned {
            estimates: estimates.len(),
            references: testset.len(),
        });
    }
    let ids: Vec<String> = (0..testset.len()).map(|i| format!("item{i:05}")).collect();
    let rows: Vec<EvalRow<'_>> = estimates
        .iter()
        .zip(testset)
        .zip(&ids)
        .map(|(((f, b), s), id)| EvalRow {
            id,
            fish_est: f,
            bg_est: b,
            fish_ref: &s.source_fish,
            bg_ref: &s.source_background,
        })
        .collect();
    evaluate_rows(&rows)
}

impl SdrReport {
    pub fn from_items(items: Vec<ItemSdr>) -> Result<Self> {
        if items.is_empty() {
            return Err(BssError::EmptyEvaluation);
        }
        Ok(Self {
            fish: ChannelSummary::from_values(items.iter().map(|i| i.fish)),
            background: ChannelSummary::from_values(items.iter().map(|i| i.background)),
            items,
        })
    }

    pub fn summary(&self, channel: Channel) -> ChannelSummary {
        match channel {
            Channel::Fish => self.fish,
            Channel::Background => self.background,
        }
    }

    /// Aligned `Metric / Channel / Value` table; values are means over items.
    pub fn to_table(&self) -> String {
        let value = |v: f64| {
            if v >= SDR_CAP_DB {
                format!("+inf (cap {SDR_CAP_DB})")
            } else if v <= -SDR_CAP_DB {
                format!("-inf (cap -{SDR_CAP_DB})")
            } else {
                format!("{v:.3}")
            }
        };
        let mut out = format!(
            "{:<8}{:<12}{:<22}{:<22}{}\n",
            "Metric", "Channel", "Value (mean dB)", "Median (dB)", "Items"
        );
        for ch in [Channel::Fish, Channel::Background] {
            let s = self.summary(ch);
            let _ = writeln!(
                out,
                "{:<8}{:<12}{:<22}{:<22}{}",
                "SDR",
                ch.name(),
                value(s.mean),
                value(s.median),
                s.count
            );
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,sdr_fish,sdr_background\n");
        for i in &self.items {
            let _ = writeln!(out, "{},{},{}", i.id, fmt_db(i.fish), fmt_db(i.background));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("id,sdr_fish,sdr_background") {
            return Err(BssError::Csv("unexpected header".into()));
        }
        let items = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split(',').collect();
                match f[..] {
                    [id, fish, bg] => Ok(ItemSdr {
                        id: id.to_string(),
                        fish: parse_db(fish)
                            .ok_or_else(|| BssError::Csv(format!("bad value {fish:?}")))?,
                        background: parse_db(bg)
                            .ok_or_else(|| BssError::Csv(format!("bad value {bg:?}")))?,
                    }),
                    _ => Err(BssError::Csv(format!("bad row {l:?}"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_items(items)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn estimate_equal_to_reference() {
        let r = [0.3, -1.0, 2.0, 0.5];
        let o = [1.0, 1.0, 0.0, -1.0];
        let d = decompose(&r, &r, &[&o]).unwrap();
        assert!(close(&d.s_target, &r, 1e-15));
        assert!(close(&d.e_interf, &[0.0; 4], 1e-15));
        assert!(close(&d.e_artif, &[0.0; 4], 1e-15));
        assert_eq!(d.sdr(), f64::INFINITY);
        let doubled: Vec<f64> = r.iter().map(|v| 2.0 * v).collect();
        let d = decompose(&doubled, &r, &[&o]).unwrap();
        assert!(close(&d.s_target, &doubled, 1e-15));
        assert_eq!(d.sdr(), f64::INFINITY);
    }

    #[test]
    fn four_vector_example() {
        let d = decompose(
            &[1.0, 0.0, 1.0, 0.0],
            &[1.0, 0.0, 0.0, 0.0],
            &[&[0.0, 1.0, 0.0, 0.0]],
        )
        .unwrap();
        assert_eq!(d.s_target, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(d.e_interf, vec![0.0; 4]);
        assert_eq!(d.e_artif, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(d.e_noise, vec![0.0; 4]);
        assert_eq!(d.sdr(), 0.0);
    }

    #[test]
    fn orthogonal_estimate_is_minus_inf() {
        assert_eq!(
            sdr(&[0.0, 1.0], &[1.0, 0.0], &[]).unwrap(),
            f64::NEG_INFINITY
        );
        assert_eq!(
            sdr(&[0.0, 0.0], &[1.0, 0.0], &[]).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn errors() {
        assert_eq!(decompose(&[1.0], &[0.0], &[]), Err(BssError::ZeroReference));
        assert!(matches!(
            decompose(&[1.0, 2.0], &[1.0], &[]),
            Err(BssError::LengthMismatch { .. })
        ));
        assert!(matches!(
            decompose(&[1.0, 2.0], &[1.0, 0.0], &[&[1.0]]),
            Err(BssError::LengthMismatch { .. })
        ));
        assert_eq!(evaluate(&[], &[]), Err(BssError::EmptyEvaluation));
        assert!(matches!(
            evaluate(&[(vec![], vec![])], &[]),
            Err(BssError::Misaligned { .. })
        ));
    }

    #[test]
    fn rank_deficient_references_use_pseudo_inverse() {
        let r = [1.0, 2.0, 3.0];
        let o = [2.0, 4.0, 6.0];
        let e = [1.0, 0.0, 0.0];
        let d = decompose(&e, &r, &[&o]).unwrap();
        let g = 1.0 / 14.0;
        assert!(close(&d.s_target, &[g, 2.0 * g, 3.0 * g], 1e-12));
        assert!(close(&d.e_interf, &[0.0; 3], 1e-12));
        let sum: Vec<f64> = (0..3)
            .map(|i| d.s_target[i] + d.e_interf[i] + d.e_artif[i])
            .collect();
        assert!(close(&sum, &e, 1e-12));
    }

    #[test]
    fn ground_truth_report_hits_the_cap() {
        let s = crate::mixgen::make_sample(
            &[0.5, -0.2, 0.9, 0.1],
            &[0.1, 0.4, -0.3, 0.7],
            crate::mixgen::MixCoefficients {
                k_f: 1.0,
                k_b: 0.5,
                alpha_f: 0.1,
            },
        )
        .unwrap();
        let report = evaluate(
            &[(s.source_fish.clone(), s.source_background.clone())],
            &[s],
        )
        .unwrap();
        assert_eq!(report.fish.mean, SDR_CAP_DB);
        assert_eq!(report.background.mean, SDR_CAP_DB);
        let table = report.to_table();
        assert!(table
            .lines()
            .any(|l| l.starts_with("SDR") && l.contains("Fish") && l.contains("+inf")));
        assert!(table
            .lines()
            .any(|l| l.starts_with("SDR") && l.contains("Background") && l.contains("+inf")));
        assert!(report.to_csv().contains(",inf,inf"));
    }

    #[test]
    fn csv_round_trip_recomputes_aggregates() {
        let items = vec![
            ItemSdr {
                id: "a".into(),
                fish: 3.5,
                background: f64::INFINITY,
            },
            ItemSdr {
                id: "b".into(),
                fish: -1.25,
                background: 7.0,
            },
            ItemSdr {
                id: "c".into(),
                fish: f64::NEG_INFINITY,
                background: 1.0,
            },
        ];
        let r = SdrReport::from_items(items).unwrap();
        assert_eq!(r.fish.median, -1.25);
        assert_eq!(r.fish.mean, (3.5 - 1.25 - 300.0) / 3.0);
        assert_eq!(r.background.median, 7.0);
        assert_eq!(SdrReport::from_csv(&r.to_csv()).unwrap(), r);
        assert!(SdrReport::from_csv("bad\n").is_err());
    }

    proptest! {
        #[test]
        fn additive_orthogonal_and_scale_invariant(
            data in prop::collection::vec(-1.0f64..1.0, 9..=96),
            alpha in prop_oneof![-10.0f64..-0.1, 0.1f64..10.0],
        ) {
            let n = data.len() / 3;
            let (e, r, o) = (&data[..n], &data[n..2 * n], &data[2 * n..3 * n]);
            let d = decompose(e, r, &[o]).unwrap();
            let norm = dot(e, e).sqrt();
            let resid: f64 = (0..n).map(|i| (e[i] - d.s_target[i] - d.e_interf[i] - d.e_artif[i]).powi(2)).sum::<f64>().sqrt();
            prop_assert!(resid < 1e-9 * norm.max(1e-300));
            let st_norm = dot(&d.s_target, &d.s_target).sqrt();
            let art_norm = dot(&d.e_artif, &d.e_artif).sqrt();
            prop_assert!(dot(&d.s_target, &d.e_artif).abs() <= 1e-9 * st_norm * art_norm + 1e-300);
            let p: Vec<f64> = (0..n).map(|i| d.s_target[i] + d.e_interf[i]).collect();
            prop_assert!(dot(&p, &d.e_artif).abs() <= 1e-9 * dot(&p, &p).sqrt() * art_norm + 1e-300);
            let scaled: Vec<f64> = e.iter().map(|v| alpha * v).collect();
            let (a, b) = (sdr(e, r, &[o]).unwrap(), sdr(&scaled, r, &[o]).unwrap());
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }
}
