//! Overlap and reliability metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::pipeline::VolumesReport;

/// `2|M ∩ P| / (|M| + |P|)`; 1.0 when both masks are empty.
pub fn dice(m: &[bool], p: &[bool]) -> Result<f64> {
    if m.len() != p.len() {
        return dim_err(format!("masks of {} and {} voxels", m.len(), p.len()));
    }
    let (mut inter, mut sm, mut sp) = (0usize, 0usize, 0usize);
    for (&a, &b) in m.iter().zip(p) {
        inter += (a && b) as usize;
        sm += a as usize;
        sp += b as usize;
    }
    if sm + sp == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (sm + sp) as f64)
}

/// Dice of one label between two label buffers.
pub fn dice_label(truth: &[u8], pred: &[u8], label: u8) -> Result<f64> {
    let m: Vec<bool> = truth.iter().map(|&v| v == label).collect();
    let p: Vec<bool> = pred.iter().map(|&v| v == label).collect();
    dice(&m, &p)
}

/// Absolute percent difference `2|n1 - n2| / (n1 + n2) * 100`.
pub fn apd(n1: f64, n2: f64) -> Result<f64> {
    if !(n1 >= 0.0 && n2 >= 0.0) {
        return arg_err(format!("APD needs non-negative volumes, got {n1} and {n2}"));
    }
    if n1 + n2 == 0.0 {
        return Err(Error::Undefined("APD of two zero volumes".into()));
    }
    Ok(2.0 * (n1 - n2).abs() / (n1 + n2) * 100.0)
}

/// Two-way mean squares of an `n x 2` table: `(MSR, MSC, MSE)`.
pub fn mean_squares(s1: &[f64], s2: &[f64]) -> (f64, f64, f64) {
    let n = s1.len() as f64;
    let k = 2.0;
    let grand = (s1.iter().sum::<f64>() + s2.iter().sum::<f64>()) / (n * k);
    let ssr: f64 = s1.iter().zip(s2).map(|(a, b)| k * ((a + b) / k - grand).powi(2)).sum();
    let c1 = s1.iter().sum::<f64>() / n;
    let c2 = s2.iter().sum::<f64>() / n;
    let ssc = n * ((c1 - grand).powi(2) + (c2 - grand).powi(2));
    let sst: f64 = s1.iter().chain(s2).map(|x| (x - grand).powi(2)).sum();
    let sse = (sst - ssr - ssc).max(0.0);
    (ssr / (n - 1.0), ssc / (k - 1.0), sse / ((n - 1.0) * (k - 1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Icc {
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Two-way, absolute-agreement, single-measures ICC with a 95% F-based interval.
pub fn icc_a1(session1: &[f64], session2: &[f64]) -> Result<Icc> {
    if session1.len() != session2.len() {
        return dim_err(format!("sessions of {} and {} subjects", session1.len(), session2.len()));
    }
    let n = session1.len();
    if n < 3 {
        return arg_err(format!("ICC needs at least 3 subjects, got {n}"));
    }
    if session1.iter().chain(session2).any(|v| !v.is_finite()) {
        return arg_err("ICC inputs must be finite");
    }
    let all: Vec<f64> = session1.iter().chain(session2).copied().collect();
    let mean = all.iter().sum::<f64>() / all.len() as f64;
    let sst: f64 = all.iter().map(|x| (x - mean).powi(2)).sum();
    let scale: f64 = all.iter().map(|x| x * x).sum();
    if sst <= 1e-24 * scale || sst == 0.0 {
        return Err(Error::Degenerate("zero total variance".into()));
    }
    let (msr, msc, mse) = mean_squares(session1, session2);
    let (nf, k) = (n as f64, 2.0);
    let estimate = (msr - mse) / (msr + (k - 1.0) * mse + k / nf * (msc - mse));
    if mse <= 1e-15 * msr && msc <= 1e-15 * msr {
        return Ok(Icc { estimate: 1.0, ci_low: 1.0, ci_high: 1.0 });
    }
    let alpha = 0.05;
    let a = k * estimate / (nf * (1.0 - estimate));
    let b = 1.0 + k * estimate * (nf - 1.0) / (nf * (1.0 - estimate));
    let v = (a * msc + b * mse).powi(2) / ((a * msc).powi(2) / (k - 1.0) + (b * mse).powi(2) / ((nf - 1.0) * (k - 1.0)));
    let quantile = |d1: f64, d2: f64| -> Result<f64> {
        let f = FisherSnedecor::new(d1, d2).map_err(|e| Error::Degenerate(format!("F distribution: {e}")))?;
        Ok(f.inverse_cdf(1.0 - alpha / 2.0))
    };
    let f_low = quantile(nf - 1.0, v)?;
    let f_high = quantile(v, nf - 1.0)?;
    let ci_low = nf * (msr - f_low * mse) / (f_low * (k * msc + (k * nf - k - nf) * mse) + nf * msr);
    let ci_high = nf * (f_high * msr - mse) / (k * msc + (k * nf - k - nf) * mse + nf * f_high * msr);
    Ok(Icc { estimate, ci_low, ci_high })
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelReliability {
    pub label: String,
    pub apd_values: Vec<f64>,
    pub apd_mean: f64,
    pub apd_sd: f64,
    pub icc: Icc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityReport {
    pub n_pairs: usize,
    pub labels: Vec<LabelReliability>,
}

impl ReliabilityReport {
    pub fn label(&self, name: &str) -> Option<&LabelReliability> {
        self.labels.iter().find(|l| l.label == name)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Table with one column per label: `ICC [95% CI]` and `APD (SD)` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format(e.to_string());
        let mut header = vec!["Metric".to_string()];
        header.extend(self.labels.iter().map(|l| l.label.clone()));
        w.write_record(&header).map_err(csv_err)?;
        let mut icc = vec!["ICC [95% CI]".to_string()];
        icc.extend(self.labels.iter().map(|l| format!("{:.3} [{:.3} - {:.3}]", l.icc.estimate, l.icc.ci_low, l.icc.ci_high)));
        w.write_record(&icc).map_err(csv_err)?;
        let mut apd = vec!["APD (SD)".to_string()];
        apd.extend(self.labels.iter().map(|l| format!("{:.2} ({:.2})", l.apd_mean, l.apd_sd)));
        w.write_record(&apd).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Per-label reliability of paired volume lists.
pub fn reliability(labels: &[(&str, Vec<f64>, Vec<f64>)]) -> Result<ReliabilityReport> {
    let mut out = Vec::with_capacity(labels.len());
    let mut n_pairs = 0;
    for (name, a, b) in labels {
        if a.len() < 3 {
            return arg_err(format!("need at least 3 pairs, got {}", a.len()));
        }
        n_pairs = a.len();
        let apd_values = a.iter().zip(b).map(|(&x, &y)| apd(x, y)).collect::<Result<Vec<_>>>()?;
        let (apd_mean, apd_sd) = mean_sd(&apd_values);
        out.push(LabelReliability { label: name.to_string(), apd_values, apd_mean, apd_sd, icc: icc_a1(a, b)? });
    }
    Ok(ReliabilityReport { n_pairs, labels: out })
}

/// SAT-V and VAT-V reliability across sessions.
pub fn compare_sessions(pairs: &[(VolumesReport, VolumesReport)]) -> Result<ReliabilityReport> {
    let col = |f: fn(&VolumesReport) -> f64, second: bool| -> Vec<f64> {
        pairs.iter().map(|(a, b)| if second { f(b) } else { f(a) }).collect()
    };
    reliability(&[
        ("SAT-V", col(|r| r.sat_ml, false), col(|r| r.sat_ml, true)),
        ("VAT-V", col(|r| r.vat_ml, false), col(|r| r.vat_ml, true)),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dice_examples() {
        let m = [true, true, false, false];
        assert_eq!(dice(&m, &m).unwrap(), 1.0);
        assert_eq!(dice(&[true, false], &[false, true]).unwrap(), 0.0);
        let m: Vec<bool> = (0..10).map(|i| i < 4).collect();
        let p: Vec<bool> = (0..10).map(|i| (1..7).contains(&i)).collect();
        assert!((dice(&m, &p).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(dice(&[false; 3], &[false; 3]).unwrap(), 1.0);
        assert!(dice(&[true], &[true, false]).is_err());
    }

    #[test]
    fn apd_examples() {
        assert_eq!(apd(5.0, 5.0).unwrap(), 0.0);
        assert!((apd(110.0, 90.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(apd(0.0, 10.0).unwrap(), 200.0);
        assert!(matches!(apd(0.0, 0.0), Err(Error::Undefined(_))));
    }

    #[test]
    fn icc_perfect_and_offset() {
        let s: Vec<f64> = (0..10).map(|i| (i * i) as f64 + 3.0).collect();
        let icc = icc_a1(&s, &s).unwrap();
        assert_eq!((icc.estimate, icc.ci_low, icc.ci_high), (1.0, 1.0, 1.0));
        let mut prev = 1.0;
        for off in [1.0, 5.0, 20.0] {
            let t: Vec<f64> = s.iter().map(|v| v + off).collect();
            let e = icc_a1(&s, &t).unwrap().estimate;
            assert!(e < prev);
            prev = e;
        }
        assert!(matches!(icc_a1(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::Argument(_))));
        assert!(matches!(icc_a1(&[4.0; 5], &[4.0; 5]), Err(Error::Degenerate(_))));
    }

    /// Reference values from an independent implementation of the same
    /// mean-squares construction with scipy's F quantiles.
    #[test]
    fn icc_interval_reference() {
        let s1 = [10.2, 11.5, 9.8, 14.1, 12.7, 8.9, 13.3, 10.9];
        let s2 = [10.6, 11.1, 10.4, 13.6, 13.5, 9.2, 12.8, 11.6];
        let icc = icc_a1(&s1, &s2).unwrap();
        assert!((icc.estimate - ICC_REF[0]).abs() < 1e-9, "{icc:?}");
        assert!((icc.ci_low - ICC_REF[1]).abs() < 1e-6, "{icc:?}");
        assert!((icc.ci_high - ICC_REF[2]).abs() < 1e-6, "{icc:?}");
    }

    const ICC_REF: [f64; 3] = [0.9481993093241243, 0.7837894805272688, 0.9892193732511944];

    #[test]
    fn report_layout() {
        let a = vec![10.0, 12.0, 9.0, 15.0];
        let b = vec![10.5, 11.5, 9.0, 14.0];
        let r = reliability(&[("SAT-V", a.clone(), b.clone()), ("VAT-V", b, a)]).unwrap();
        let csv = r.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "Metric,SAT-V,VAT-V");
        assert!(lines[1].starts_with("ICC [95% CI],"));
        assert!(lines[2].starts_with("APD (SD),"));
        let expect = (2.0 * 0.5 / 20.5 + 2.0 * 0.5 / 23.5 + 0.0 + 2.0 / 29.0) * 100.0 / 4.0;
        assert!((r.labels[0].apd_mean - expect).abs() < 1e-12);
        let back: ReliabilityReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    proptest! {
        #[test]
        fn dice_symmetric_in_range(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 1..50)) {
            let (m, p): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
            let d = dice(&m, &p).unwrap();
            prop_assert_eq!(d, dice(&p, &m).unwrap());
            prop_assert!((0.0..=1.0).contains(&d));
        }

        #[test]
        fn apd_symmetric_scale_invariant(a in 0.1f64..1e3, b in 0.1f64..1e3, c in 0.01f64..100.0) {
            prop_assert!((apd(a, b).unwrap() - apd(b, a).unwrap()).abs() < 1e-12);
            prop_assert!((apd(c * a, c * b).unwrap() - apd(a, b).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn icc_shift_scale_invariant(
            pairs in proptest::collection::vec((1.0f64..100.0, -5.0f64..5.0), 3..20),
            shift in -50.0f64..50.0,
            scale in 0.1f64..10.0,
        ) {
            let s1: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let s2: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
            let base = icc_a1(&s1, &s2).unwrap();
            let sh = |v: &[f64]| v.iter().map(|x| x + shift).collect::<Vec<_>>();
            let sc = |v: &[f64]| v.iter().map(|x| x * scale).collect::<Vec<_>>();
            prop_assert!((icc_a1(&sh(&s1), &sh(&s2)).unwrap().estimate - base.estimate).abs() < 1e-9);
            prop_assert!((icc_a1(&sc(&s1), &sc(&s2)).unwrap().estimate - base.estimate).abs() < 1e-9);
        }
    }
}
