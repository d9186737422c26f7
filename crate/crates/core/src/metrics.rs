//! Evaluation quantities: pass@1, AES, gzip redundancy and the
//! accuracy-stability table, plus their CSV/JSON encodings.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use flate2::{Compression, GzBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{RolloutGroup, TraceSample};

/// Marker written for undefined values in CSV output.
pub const UNDEFINED: &str = "NA";

/// Fraction of correct samples, in `[0, 1]`.
pub fn pass_at_1(samples: &[TraceSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("pass@1 of zero rollouts".into()));
    }
    Ok(samples.iter().filter(|s| s.correct).count() as f64 / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AesWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl AesWeights {
    pub const AES1: Self = Self {
        alpha: 1.0,
        beta: 3.0,
        gamma: 5.0,
    };
    pub const AES2: Self = Self {
        alpha: 1.0,
        beta: 3.0,
        gamma: 10.0,
    };

    pub fn validate(&self) -> Result<()> {
        let ok = [self.alpha, self.beta, self.gamma]
            .iter()
            .all(|w| w.is_finite() && *w > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("AES weights must be positive: {self:?}")))
        }
    }
}

/// Accuracy-efficiency score of a model against a base.
///
/// Relative length reduction counts with weight `alpha`; relative accuracy
/// gains are rewarded with `beta` and losses penalized with `gamma`.
pub fn aes(acc_base: f64, len_base: f64, acc_model: f64, len_model: f64, w: AesWeights) -> Result<f64> {
    w.validate()?;
    if !(acc_base > 0.0) || !(len_base > 0.0) {
        return Err(Error::Domain(format!(
            "AES needs positive base accuracy and length, got ({acc_base}, {len_base})"
        )));
    }
    if !acc_model.is_finite() || !len_model.is_finite() {
        return Err(Error::Domain("AES inputs must be finite".into()));
    }
    let d_acc = (acc_model - acc_base) / acc_base;
    let d_len = (len_base - len_model) / len_base;
    Ok(if d_acc >= 0.0 {
        w.alpha * d_len + w.beta * d_acc.abs()
    } else {
        w.alpha * d_len - w.gamma * d_acc.abs()
    })
}

/// Compressed size over raw size, gzip at maximum compression with a
/// zeroed timestamp and an "unknown" OS byte.
pub fn compression_ratio(bytes: &[u8]) -> Result<f64> {
    if bytes.is_empty() {
        return Err(Error::Domain("compression ratio of empty input".into()));
    }
    Ok(gzip(bytes)?.len() as f64 / bytes.len() as f64)
}

fn gzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let io = |e| Error::io("<gzip buffer>", e);
    let mut enc = GzBuilder::new()
        .mtime(0)
        .operating_system(255)
        .write(Vec::with_capacity(bytes.len() / 2 + 32), Compression::best());
    enc.write_all(bytes).map_err(io)?;
    enc.finish().map_err(io)
}

/// Inverse of the fixed compressor, used to check round trips.
pub fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::io("<gzip buffer>", e))?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedundancyReport {
    pub r_all: f64,
    pub r_correct: Option<f64>,
    pub r_wrong: Option<f64>,
    pub n_all: usize,
    pub n_correct: usize,
    pub n_wrong: usize,
}

/// Mean per-sample compression ratio over all, correct and wrong samples.
pub fn redundancy_report(samples: &[TraceSample]) -> Result<RedundancyReport> {
    if samples.is_empty() {
        return Err(Error::Empty("redundancy report of zero samples".into()));
    }
    let mut all = 0.0;
    let (mut correct, mut n_correct) = (0.0, 0usize);
    let (mut wrong, mut n_wrong) = (0.0, 0usize);
    for s in samples {
        let r = compression_ratio(s.text.as_bytes())?;
        all += r;
        if s.correct {
            correct += r;
            n_correct += 1;
        } else {
            wrong += r;
            n_wrong += 1;
        }
    }
    let mean = |sum: f64, n: usize| (n > 0).then(|| sum / n as f64);
    Ok(RedundancyReport {
        r_all: all / samples.len() as f64,
        r_correct: mean(correct, n_correct),
        r_wrong: mean(wrong, n_wrong),
        n_all: samples.len(),
        n_correct,
        n_wrong,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PromptEval {
    pub pass_at_1: f64,
    pub mean_len: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent.
    pub acc: f64,
    pub mean_len: f64,
    /// Undefined with a single rollout per prompt.
    pub mean_lnorm: Option<f64>,
    pub r_zip: Option<f64>,
    pub per_prompt: BTreeMap<String, PromptEval>,
    pub rollouts: usize,
}

impl EvalReport {
    /// Aggregates rollout groups with a common size. `groups` may not repeat
    /// a prompt id.
    pub fn from_groups(groups: &[RolloutGroup], mean_lnorm: Option<f64>) -> Result<Self> {
        let first = groups
            .first()
            .ok_or_else(|| Error::Empty("evaluation without rollouts".into()))?;
        let k = first.samples.len();
        let mut per_prompt = BTreeMap::new();
        let (mut hits, mut total_len, mut ratio_sum, mut n) = (0.0, 0.0, 0.0, 0usize);
        for g in groups {
            if g.samples.len() != k {
                return Err(Error::Mismatch(format!(
                    "prompt `{}` has {} rollouts, expected {k}",
                    g.prompt_id,
                    g.samples.len()
                )));
            }
            let p = pass_at_1(&g.samples)?;
            let len = g.samples.iter().map(|s| s.token_count as f64).sum::<f64>() / k as f64;
            if per_prompt
                .insert(g.prompt_id.clone(), PromptEval { pass_at_1: p, mean_len: len })
                .is_some()
            {
                return Err(Error::DuplicateId(g.prompt_id.clone()));
            }
            for s in &g.samples {
                hits += f64::from(u8::from(s.correct));
                total_len += s.token_count as f64;
                ratio_sum += compression_ratio(s.text.as_bytes())?;
                n += 1;
            }
        }
        Ok(Self {
            acc: 100.0 * hits / n as f64,
            mean_len: total_len / n as f64,
            mean_lnorm,
            r_zip: Some(ratio_sum / n as f64),
            per_prompt,
            rollouts: k,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn metric_rows(&self) -> Vec<MetricRow> {
        let mut rows = vec![
            MetricRow::new("acc", "all", Some(self.acc)),
            MetricRow::new("mean_len", "all", Some(self.mean_len)),
            MetricRow::new("mean_lnorm", "all", self.mean_lnorm),
            MetricRow::new("r_zip", "all", self.r_zip),
            MetricRow::new("rollouts", "all", Some(self.rollouts as f64)),
        ];
        for (id, e) in &self.per_prompt {
            rows.push(MetricRow::new("pass_at_1", id, Some(e.pass_at_1)));
            rows.push(MetricRow::new("mean_len", id, Some(e.mean_len)));
        }
        rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub ad_pct: Option<f64>,
    pub ap_pct: Option<f64>,
    pub ai_pct: Option<f64>,
    pub n_len_down: usize,
}

impl StabilityRow {
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        vec![
            MetricRow::new("ad_pct", "len_down", self.ad_pct),
            MetricRow::new("ap_pct", "len_down", self.ap_pct),
            MetricRow::new("ai_pct", "len_down", self.ai_pct),
            MetricRow::new("n_len_down", "len_down", Some(self.n_len_down as f64)),
        ]
    }
}

/// Among prompts whose mean length strictly decreased, the percentages whose
/// pass@1 decreased, stayed exactly equal, or increased.
pub fn stability_table(before: &EvalReport, after: &EvalReport) -> Result<StabilityRow> {
    if before.rollouts != after.rollouts {
        return Err(Error::Mismatch(format!(
            "rollout counts differ: {} vs {}",
            before.rollouts, after.rollouts
        )));
    }
    if !before.per_prompt.keys().eq(after.per_prompt.keys()) {
        return Err(Error::Mismatch("reports cover different prompt ids".into()));
    }
    let (mut down, mut same, mut up) = (0usize, 0usize, 0usize);
    for (id, b) in &before.per_prompt {
        let a = &after.per_prompt[id];
        if !(a.mean_len < b.mean_len) {
            continue;
        }
        if a.pass_at_1 < b.pass_at_1 {
            down += 1;
        } else if a.pass_at_1 == b.pass_at_1 {
            same += 1;
        } else {
            up += 1;
        }
    }
    let n = down + same + up;
    let pct = |c: usize| (n > 0).then(|| 100.0 * c as f64 / n as f64);
    Ok(StabilityRow {
        ad_pct: pct(down),
        ap_pct: pct(same),
        ai_pct: pct(up),
        n_len_down: n,
    })
}

pub fn fmt_acc(acc: f64) -> String {
    format!("{acc:.2}")
}

pub fn fmt_len(len: f64) -> String {
    format!("{len:.1}")
}

pub fn fmt_aes(score: f64) -> String {
    format!("{score:.4}")
}

/// One `metric,subset,value` line. `None` is written as `NA`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub subset: String,
    pub value: Option<f64>,
}

impl MetricRow {
    pub fn new(metric: &str, subset: &str, value: Option<f64>) -> Self {
        Self {
            metric: metric.into(),
            subset: subset.into(),
            value,
        }
    }
}

impl RedundancyReport {
    pub fn metric_rows(&self) -> Vec<MetricRow> {
        vec![
            MetricRow::new("r_zip", "all", Some(self.r_all)),
            MetricRow::new("r_zip", "correct", self.r_correct),
            MetricRow::new("r_zip", "wrong", self.r_wrong),
            MetricRow::new("n", "all", Some(self.n_all as f64)),
            MetricRow::new("n", "correct", Some(self.n_correct as f64)),
            MetricRow::new("n", "wrong", Some(self.n_wrong as f64)),
        ]
    }
}

pub fn write_metric_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["metric", "subset", "value"])?;
    for r in rows {
        let value = r.value.map_or_else(|| UNDEFINED.to_string(), |v| v.to_string());
        w.write_record([r.metric.as_str(), r.subset.as_str(), value.as_str()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_metric_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != ["metric", "subset", "value"] {
        return Err(Error::Parse(format!("unexpected metric header {header:?}")));
    }
    r.records()
        .map(|rec| {
            let rec = rec?;
            let value = match &rec[2] {
                UNDEFINED => None,
                v => Some(
                    v.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("metric value `{v}`: {e}")))?,
                ),
            };
            Ok(MetricRow::new(&rec[0], &rec[1], value))
        })
        .collect()
}

/// One line of an AES comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AesRow {
    pub method: String,
    pub acc: f64,
    pub len: f64,
    pub aes1: f64,
    pub aes2: f64,
}

/// Base row (scored against itself) followed by one row per model.
pub fn aes_table(base: (&str, f64, f64), models: &[(&str, f64, f64)]) -> Result<Vec<AesRow>> {
    let (_, acc_b, len_b) = base;
    std::iter::once(&base)
        .chain(models)
        .map(|&(method, acc, len)| {
            Ok(AesRow {
                method: method.into(),
                acc,
                len,
                aes1: aes(acc_b, len_b, acc, len, AesWeights::AES1)?,
                aes2: aes(acc_b, len_b, acc, len, AesWeights::AES2)?,
            })
        })
        .collect()
}

/// Fixed-width text rendering: `Method  Acc  Len  AES1  AES2`.
pub fn render_aes_table(rows: &[AesRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>10}  {:>8}  {:>8}\n",
        "Method", "Acc", "Len", "AES1", "AES2"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<width$}  {:>8}  {:>10}  {:>8}  {:>8}\n",
            r.method,
            fmt_acc(r.acc),
            fmt_len(r.len),
            fmt_aes(r.aes1),
            fmt_aes(r.aes2)
        ));
    }
    out
}

pub fn write_aes_csv(rows: &[AesRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<csv buffer>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_aes_csv(text: &str) -> Result<Vec<AesRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngCore, SeedableRng};

    fn sample(id: &str, text: &str, len: usize, correct: bool) -> TraceSample {
        TraceSample {
            prompt_id: id.into(),
            bucket: 0,
            latent_depth: 1,
            latent_redundancy: 0,
            text: text.into(),
            token_count: len,
            extracted_answer: None,
            correct,
        }
    }

    fn report(entries: &[(&str, f64, f64)]) -> EvalReport {
        EvalReport {
            acc: 0.0,
            mean_len: 0.0,
            mean_lnorm: None,
            r_zip: None,
            per_prompt: entries
                .iter()
                .map(|&(id, p, l)| (id.to_string(), PromptEval { pass_at_1: p, mean_len: l }))
                .collect(),
            rollouts: 4,
        }
    }

    #[test]
    fn pass_at_1_counts() {
        let s: Vec<_> = (0..16).map(|i| sample("p", "x", 1, i < 12)).collect();
        assert_eq!(pass_at_1(&s).unwrap(), 0.75);
        assert!(pass_at_1(&[]).is_err());
    }

    #[test]
    fn aes_examples() {
        let a1 = aes(84.81, 3428.0, 85.35, 2499.2, AesWeights::AES1).unwrap();
        assert!((a1 - 0.2901).abs() <= 5e-4, "{a1}");
        let a2 = aes(84.81, 3428.0, 82.08, 2725.0, AesWeights::AES2).unwrap();
        assert!((a2 - -0.1168).abs() <= 5e-4, "{a2}");
        assert_eq!(aes(50.0, 100.0, 50.0, 100.0, AesWeights::AES1).unwrap(), 0.0);
        assert!(matches!(aes(0.0, 1.0, 1.0, 1.0, AesWeights::AES1), Err(Error::Domain(_))));
        assert!(matches!(aes(1.0, -1.0, 1.0, 1.0, AesWeights::AES1), Err(Error::Domain(_))));
    }

    #[test]
    fn compression_extremes() {
        let same = vec![b'a'; 10_000];
        assert!(compression_ratio(&same).unwrap() < 0.01);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut noise = vec![0u8; 10_000];
        rng.fill_bytes(&mut noise);
        assert!(compression_ratio(&noise).unwrap() >= 1.0);
        assert!(compression_ratio(&[]).is_err());
    }

    #[test]
    fn gzip_header_is_fixed() {
        let z = gzip(b"hello hello hello").unwrap();
        assert_eq!(&z[..4], &[0x1f, 0x8b, 8, 0]);
        assert_eq!(&z[4..8], &[0, 0, 0, 0]);
        assert_eq!(z[9], 255);
        assert_eq!(gunzip(&z).unwrap(), b"hello hello hello");
    }

    #[test]
    fn redundancy_subsets() {
        let all_ok = [sample("p", "abc abc", 2, true)];
        let r = redundancy_report(&all_ok).unwrap();
        assert_eq!(r.r_wrong, None);
        assert_eq!(r.r_correct, Some(r.r_all));

        let texts = ["one two three four", "five five five five five five"];
        let mixed = [sample("p", texts[0], 4, true), sample("p", texts[1], 6, false)];
        let r = redundancy_report(&mixed).unwrap();
        let r0 = compression_ratio(texts[0].as_bytes()).unwrap();
        let r1 = compression_ratio(texts[1].as_bytes()).unwrap();
        assert_eq!(r.r_correct, Some(r0));
        assert_eq!(r.r_wrong, Some(r1));
        assert!((r.r_all - (r0 + r1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn stability_hand_count() {
        let before = report(&[("p1", 0.5, 100.0), ("p2", 0.5, 100.0), ("p3", 0.5, 100.0)]);
        let after = report(&[("p1", 0.5, 80.0), ("p2", 0.25, 90.0), ("p3", 1.0, 120.0)]);
        let row = stability_table(&before, &after).unwrap();
        assert_eq!(row.n_len_down, 2);
        assert_eq!(row.ad_pct, Some(50.0));
        assert_eq!(row.ap_pct, Some(50.0));
        assert_eq!(row.ai_pct, Some(0.0));

        let same = stability_table(&before, &before).unwrap();
        assert_eq!(same.n_len_down, 0);
        assert_eq!(same.ad_pct, None);

        let other = report(&[("q", 0.5, 1.0)]);
        assert!(matches!(stability_table(&before, &other), Err(Error::Mismatch(_))));
    }

    #[test]
    fn eval_report_aggregates() {
        let g1 = RolloutGroup::new(
            "a",
            vec![sample("a", "Answer: 1", 4, true), sample("a", "Answer: 2", 6, false)],
        )
        .unwrap();
        let g2 = RolloutGroup::new(
            "b",
            vec![sample("b", "Answer: 3", 10, true), sample("b", "Answer: 3", 10, true)],
        )
        .unwrap();
        let r = EvalReport::from_groups(&[g1, g2], Some(0.5)).unwrap();
        assert_eq!(r.acc, 75.0);
        assert_eq!(r.mean_len, 7.5);
        let mean_p: f64 = r.per_prompt.values().map(|e| e.pass_at_1).sum::<f64>() / 2.0;
        assert!((r.acc - 100.0 * mean_p).abs() < 1e-9);
        assert_eq!(EvalReport::from_json_str(&r.to_json()).unwrap(), r);
    }

    #[test]
    fn metric_csv_round_trip() {
        let rows = vec![
            MetricRow::new("r_zip", "all", Some(0.4123456789)),
            MetricRow::new("r_zip", "wrong", None),
        ];
        let text = write_metric_csv(&rows).unwrap();
        assert!(text.contains("r_zip,wrong,NA"));
        assert_eq!(read_metric_csv(&text).unwrap(), rows);
    }

    #[test]
    fn aes_table_layout() {
        let rows = aes_table(("base", 84.81, 3428.0), &[("crt", 85.35, 2499.2)]).unwrap();
        assert_eq!(rows[0].aes1, 0.0);
        let text = render_aes_table(&rows);
        assert!(text.contains("crt"));
        assert!(text.contains("85.35"));
        assert!(text.contains("2499.2"));
        assert!(text.contains("0.2900"));
        assert_eq!(read_aes_csv(&write_aes_csv(&rows).unwrap()).unwrap(), rows);
    }
}
