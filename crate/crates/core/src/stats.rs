//! Spearman rank correlation, participant dataset assembly and the
//! correlation report (personality and political tables, overall climate
//! correlations, scatter series).
//!
//! Ranks are handled as doubled average ranks so they stay integral under
//! ties; covariance and variances are then exact integer sums and only the
//! final ratio is computed in floating point.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assessment::{
    code_political, ingame_record, score_big_five, score_climate, score_ingame, BigFiveTrait,
    PoliticalScores, PoliticalSubscale, ResponseRecord, SurveyInstrument, Wave,
};
use crate::narrative::SessionState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    TApprox,
    ExactPermutation,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum StatsError {
    #[error("length mismatch: {x} vs {y}")]
    LengthMismatch { x: usize, y: usize },
    #[error("need at least 3 observations, got {0}")]
    TooFew(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error("exact permutation test supports n <= {max}, got {n}")]
    TooLargeForExact { n: usize, max: usize },
}

/// Largest sample the exact permutation test enumerates (8! = 40320).
pub const EXACT_MAX_N: usize = 8;

/// Twice the average rank (1-based) of each value. Tied values share the
/// mean of the positions they occupy.
pub fn doubled_ranks(values: &[f64]) -> Vec<i64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0i64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) average to (i + j + 2) / 2 in 1-based ranks
        let r = (i + j + 2) as i64;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Average ranks (1-based) with ties sharing the mean position.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    doubled_ranks(values)
        .into_iter()
        .map(|r| r as f64 / 2.0)
        .collect()
}

fn check_inputs(x: &[f64], y: &[f64]) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch {
            x: x.len(),
            y: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(StatsError::TooFew(x.len()));
    }
    if let Some(i) = x.iter().zip(y).position(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(StatsError::NonFinite(i));
    }
    Ok(())
}

/// Scaled rank covariance and variances: `n·Σab − Σa·Σb` and friends.
struct RankMoments {
    cov: i128,
    vx: i128,
    vy: i128,
}

fn rank_moments(a: &[i64], b: &[i64]) -> RankMoments {
    let n = a.len() as i128;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0i128, 0i128, 0i128, 0i128, 0i128);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (i128::from(x), i128::from(y));
        sa += x;
        sb += y;
        saa += x * x;
        sbb += y * y;
        sab += x * y;
    }
    RankMoments {
        cov: n * sab - sa * sb,
        vx: n * saa - sa * sa,
        vy: n * sbb - sb * sb,
    }
}

fn rho_from(m: &RankMoments) -> f64 {
    let denom_sq = m.vx.checked_mul(m.vy);
    if denom_sq == m.cov.checked_mul(m.cov) && denom_sq.is_some() {
        return if m.cov >= 0 { 1.0 } else { -1.0 };
    }
    let denom = match denom_sq {
        Some(d) => libm::sqrt(d as f64),
        None => libm::sqrt(m.vx as f64) * libm::sqrt(m.vy as f64),
    };
    (m.cov as f64 / denom).clamp(-1.0, 1.0)
}

fn ranked(x: &[f64], y: &[f64]) -> Result<(Vec<i64>, Vec<i64>, RankMoments), StatsError> {
    check_inputs(x, y)?;
    let (a, b) = (doubled_ranks(x), doubled_ranks(y));
    let m = rank_moments(&a, &b);
    if m.vx == 0 || m.vy == 0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((a, b, m))
}

/// Spearman's rho with a two-sided p-value from the t approximation
/// (`n − 2` degrees of freedom).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<CorrelationResult, StatsError> {
    let (_, _, m) = ranked(x, y)?;
    let rho = rho_from(&m);
    Ok(CorrelationResult {
        rho,
        p_value: t_approx_p(rho, x.len()),
        n: x.len(),
        method: Method::TApprox,
    })
}

/// Spearman's rho with an exact two-sided permutation p-value: the share of
/// all `n!` pairings whose rank covariance is at least as extreme.
pub fn spearman_exact(x: &[f64], y: &[f64]) -> Result<CorrelationResult, StatsError> {
    if x.len() > EXACT_MAX_N {
        return Err(StatsError::TooLargeForExact {
            n: x.len(),
            max: EXACT_MAX_N,
        });
    }
    let (a, mut b, m) = ranked(x, y)?;
    let n = a.len() as i128;
    let sa: i128 = a.iter().map(|&v| i128::from(v)).sum();
    let sb: i128 = b.iter().map(|&v| i128::from(v)).sum();
    let observed = m.cov.abs();
    let cov_of = |b: &[i64]| -> i128 {
        let sab: i128 = a
            .iter()
            .zip(b)
            .map(|(&x, &y)| i128::from(x) * i128::from(y))
            .sum();
        n * sab - sa * sb
    };

    // Heap's algorithm, iterative form
    let len = b.len();
    let mut c = vec![0usize; len];
    let mut extreme: u64 = u64::from(cov_of(&b).abs() >= observed);
    let mut total: u64 = 1;
    let mut i = 0;
    while i < len {
        if c[i] < i {
            if i % 2 == 0 {
                b.swap(0, i);
            } else {
                b.swap(c[i], i);
            }
            total += 1;
            if cov_of(&b).abs() >= observed {
                extreme += 1;
            }
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(CorrelationResult {
        rho: rho_from(&m),
        p_value: extreme as f64 / total as f64,
        n: len,
        method: Method::ExactPermutation,
    })
}

/// Two-sided p for rho via `t = rho·sqrt((n−2)/(1−rho²))`.
pub fn t_approx_p(rho: f64, n: usize) -> f64 {
    if rho.abs() >= 1.0 {
        return 0.0;
    }
    let df = (n as f64) - 2.0;
    let t = rho * libm::sqrt(df / (1.0 - rho * rho));
    student_t_two_sided(t, df)
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    regularized_incomplete_beta(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// `I_x(a, b)` by continued fraction (modified Lentz).
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = libm::lgamma(a + b) - libm::lgamma(a) - libm::lgamma(b)
        + a * libm::log(x)
        + b * libm::log1p(-x);
    let front = libm::exp(ln_front);
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-15;
    let guard = |v: f64| if v.abs() < TINY { TINY } else { v };
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 / guard(1.0 - qab * x / qap);
    let mut h = d;
    for m in 1..=300 {
        let m = f64::from(m);
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 / guard(1.0 + aa * d);
        c = guard(1.0 + aa / c);
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// One complete participant: every wave scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantRow {
    pub participant_id: String,
    pub pre_climate: f64,
    pub ingame: f64,
    pub post_climate: f64,
    pub big_five: BTreeMap<BigFiveTrait, f64>,
    pub political_pre: PoliticalScores,
    pub political_post: PoliticalScores,
    #[serde(default)]
    pub demographics: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub participant_id: String,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub rows: Vec<ParticipantRow>,
    pub exclusions: Vec<Exclusion>,
    /// Records naming an instrument outside the study set.
    pub ignored_records: usize,
}

/// The four instruments a study scores against.
#[derive(Debug, Clone, Copy)]
pub struct StudyInstruments<'a> {
    pub climate: &'a SurveyInstrument,
    pub big_five: &'a SurveyInstrument,
    pub political: &'a SurveyInstrument,
    pub ingame: &'a SurveyInstrument,
}

/// Assembles one row per complete participant. Participants missing a wave
/// or failing to score are listed in `exclusions` with every reason found.
/// Where a participant has several records for the same instrument and
/// wave, the latest timestamp wins. In-game answers come from InGame
/// records or from sessions with a completed in-game survey.
pub fn build_dataset(
    instruments: &StudyInstruments<'_>,
    responses: &[ResponseRecord],
    sessions: &[SessionState],
    demographics: &BTreeMap<String, BTreeMap<String, String>>,
) -> Dataset {
    let known: BTreeSet<&str> = [
        instruments.climate,
        instruments.big_five,
        instruments.political,
        instruments.ingame,
    ]
    .iter()
    .map(|i| i.id.as_str())
    .collect();

    let session_records: Vec<ResponseRecord> = sessions
        .iter()
        .filter(|s| s.survey_complete())
        .map(|s| ingame_record(s, instruments.ingame))
        .collect();

    let mut participants: BTreeSet<&str> = BTreeSet::new();
    let mut latest: BTreeMap<(&str, &str, Wave), &ResponseRecord> = BTreeMap::new();
    let mut ignored = 0;
    for r in responses.iter().chain(&session_records) {
        participants.insert(&r.participant_id);
        if !known.contains(r.instrument_id.as_str()) {
            ignored += 1;
            continue;
        }
        let key = (r.participant_id.as_str(), r.instrument_id.as_str(), r.wave);
        match latest.get(&key) {
            Some(prev) if prev.timestamp > r.timestamp => {}
            _ => {
                latest.insert(key, r);
            }
        }
    }
    for s in sessions {
        participants.insert(&s.participant_id);
    }

    let mut out = Dataset {
        ignored_records: ignored,
        ..Dataset::default()
    };
    for pid in participants {
        let mut reasons = Vec::new();
        let mut fetch = |inst: &SurveyInstrument, wave: Wave, what: &str| {
            let r = latest.get(&(pid, inst.id.as_str(), wave)).copied();
            if r.is_none() {
                reasons.push(format!("missing {what}"));
            }
            r
        };
        let pre_c = fetch(instruments.climate, Wave::Pre, "pre climate");
        let pre_b = fetch(instruments.big_five, Wave::Pre, "pre big five");
        let pre_p = fetch(instruments.political, Wave::Pre, "pre political");
        let ing = fetch(instruments.ingame, Wave::InGame, "in-game survey");
        let post_c = fetch(instruments.climate, Wave::Post, "post climate");
        let post_p = fetch(instruments.political, Wave::Post, "post political");

        let pre_climate = scored(&mut reasons, "pre climate", pre_c, |r| {
            score_climate(instruments.climate, r).map(|s| s.mean)
        });
        let big_five = scored(&mut reasons, "pre big five", pre_b, |r| {
            score_big_five(instruments.big_five, r)
        });
        let political_pre = scored(&mut reasons, "pre political", pre_p, |r| {
            code_political(instruments.political, r)
        });
        let ingame = scored(&mut reasons, "in-game survey", ing, |r| {
            score_ingame(instruments.ingame, r).map(|s| s.mean)
        });
        let post_climate = scored(&mut reasons, "post climate", post_c, |r| {
            score_climate(instruments.climate, r).map(|s| s.mean)
        });
        let political_post = scored(&mut reasons, "post political", post_p, |r| {
            code_political(instruments.political, r)
        });

        match (
            pre_climate,
            ingame,
            post_climate,
            big_five,
            political_pre,
            political_post,
        ) {
            (Some(pre), Some(ing), Some(post), Some(b5), Some(pp), Some(pq)) if reasons.is_empty() => {
                out.rows.push(ParticipantRow {
                    participant_id: pid.to_string(),
                    pre_climate: pre,
                    ingame: ing,
                    post_climate: post,
                    big_five: b5,
                    political_pre: pp,
                    political_post: pq,
                    demographics: demographics.get(pid).cloned().unwrap_or_default(),
                })
            }
            _ => out.exclusions.push(Exclusion {
                participant_id: pid.to_string(),
                reasons,
            }),
        }
    }
    out
}

fn scored<T, E: core::fmt::Display>(
    reasons: &mut Vec<String>,
    label: &str,
    record: Option<&ResponseRecord>,
    score: impl FnOnce(&ResponseRecord) -> Result<T, E>,
) -> Option<T> {
    match score(record?) {
        Ok(v) => Some(v),
        Err(e) => {
            reasons.push(format!("{label}: {e}"));
            None
        }
    }
}

/// Climate score a table column correlates against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Column {
    #[serde(rename = "INGAME")]
    Ingame,
    #[serde(rename = "PRE")]
    Pre,
    #[serde(rename = "POST")]
    Post,
}

impl Column {
    pub const ALL: [Column; 3] = [Column::Ingame, Column::Pre, Column::Post];

    pub fn label(self) -> &'static str {
        match self {
            Column::Ingame => "INGAME",
            Column::Pre => "PRE",
            Column::Post => "POST",
        }
    }

    fn value(self, row: &ParticipantRow) -> f64 {
        match self {
            Column::Ingame => row.ingame,
            Column::Pre => row.pre_climate,
            Column::Post => row.post_climate,
        }
    }
}

/// Personality table row order.
pub const TRAIT_ROWS: [BigFiveTrait; 5] = [
    BigFiveTrait::Conscientiousness,
    BigFiveTrait::Neuroticism,
    BigFiveTrait::Openness,
    BigFiveTrait::Agreeableness,
    BigFiveTrait::Extraversion,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub column: Column,
    /// Whether the reference layout shows this cell; the rest complete the
    /// cross of rows and columns.
    pub canonical: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<CorrelationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReportCell {
    fn compute(column: Column, canonical: bool, x: &[f64], y: &[f64]) -> Self {
        let (result, error) = match spearman(x, y) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        Self {
            column,
            canonical,
            result,
            error,
        }
    }

    pub fn render(&self) -> String {
        self.result
            .as_ref()
            .map_or_else(|| "n/a".into(), render_result)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub mean: f64,
    pub cells: Vec<ReportCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub title: String,
    pub row_header: String,
    pub show_mean: bool,
    pub rows: Vec<ReportRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallCell {
    pub label: String,
    pub x: Column,
    pub y: Column,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<CorrelationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterSeries {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub n: usize,
    pub personality: ReportTable,
    pub political_pre: ReportTable,
    pub political_post: ReportTable,
    pub overall: Vec<OverallCell>,
    pub scatter: Vec<ScatterSeries>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

fn political_table(rows: &[ParticipantRow], post: bool) -> ReportTable {
    let (suffix, own) = if post {
        ("Post", Column::Post)
    } else {
        ("Pre", Column::Pre)
    };
    let table_rows = PoliticalSubscale::ALL
        .iter()
        .map(|&s| {
            let x: Vec<f64> = rows
                .iter()
                .map(|r| {
                    if post {
                        r.political_post.get(s)
                    } else {
                        r.political_pre.get(s)
                    }
                })
                .collect();
            ReportRow {
                label: format!("{} ({suffix})", s.label()),
                mean: mean(&x),
                cells: Column::ALL
                    .iter()
                    .map(|&c| {
                        let y: Vec<f64> = rows.iter().map(|r| c.value(r)).collect();
                        ReportCell::compute(c, c == Column::Ingame || c == own, &x, &y)
                    })
                    .collect(),
            }
        })
        .collect();
    ReportTable {
        title: format!("Political elements ({suffix})"),
        row_header: "Political Element".into(),
        show_mean: false,
        rows: table_rows,
    }
}

/// Every correlation cell for a dataset, in fixed order.
pub fn correlation_report(rows: &[ParticipantRow]) -> Result<CorrelationReport, StatsError> {
    if rows.len() < 3 {
        return Err(StatsError::TooFew(rows.len()));
    }
    let column = |c: Column| -> Vec<f64> { rows.iter().map(|r| c.value(r)).collect() };

    let personality = ReportTable {
        title: "Personality traits".into(),
        row_header: "Personality Trait".into(),
        show_mean: true,
        rows: TRAIT_ROWS
            .iter()
            .map(|&t| {
                let x: Vec<f64> = rows
                    .iter()
                    .map(|r| r.big_five.get(&t).copied().unwrap_or(f64::NAN))
                    .collect();
                ReportRow {
                    label: t.label().into(),
                    mean: mean(&x),
                    cells: Column::ALL
                        .iter()
                        .map(|&c| ReportCell::compute(c, true, &x, &column(c)))
                        .collect(),
                }
            })
            .collect(),
    };

    let overall = [
        (Column::Pre, Column::Ingame, "Pre-survey vs in-game"),
        (Column::Post, Column::Ingame, "Post-survey vs in-game"),
        (Column::Pre, Column::Post, "Pre-survey vs post-survey"),
    ]
    .iter()
    .map(|&(x, y, label)| {
        let (result, error) = match spearman(&column(x), &column(y)) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        OverallCell {
            label: label.into(),
            x,
            y,
            result,
            error,
        }
    })
    .collect();

    let series = |x: Column, name: &str, x_label: &str| ScatterSeries {
        name: name.into(),
        x_label: x_label.into(),
        y_label: "ingame".into(),
        points: rows.iter().map(|r| (x.value(r), r.ingame)).collect(),
    };

    Ok(CorrelationReport {
        n: rows.len(),
        personality,
        political_pre: political_table(rows, false),
        political_post: political_table(rows, true),
        overall,
        scatter: vec![
            series(Column::Pre, "pre_vs_ingame", "pre_climate"),
            series(Column::Post, "post_vs_ingame", "post_climate"),
        ],
    })
}

/// Three decimals without a leading zero: `.520`, `-.017`, `1.000`.
pub fn format_rho(rho: f64) -> String {
    let s = format!("{rho:.3}");
    let (sign, digits) = match s.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", s.as_str()),
    };
    let digits = digits.strip_prefix('0').unwrap_or(digits);
    if digits == ".000" {
        ".000".into()
    } else {
        format!("{sign}{digits}")
    }
}

/// `**` below .01, `*` below .05.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        ""
    }
}

pub fn render_result(r: &CorrelationResult) -> String {
    format!("{}{}", format_rho(r.rho), stars(r.p_value))
}

fn render_table(out: &mut String, table: &ReportTable, columns: &[Column], n: usize) {
    let mut header = vec![table.row_header.clone()];
    if table.show_mean {
        header.push("Mean".into());
    }
    header.push("Correlation".into());
    header.extend(columns.iter().map(|c| c.label().to_string()));

    let mut lines = vec![header];
    for row in &table.rows {
        let mut line = vec![row.label.clone()];
        if table.show_mean {
            line.push(format!("{:.2}", row.mean));
        }
        line.push("R".into());
        for c in columns {
            let cell = row.cells.iter().find(|cell| cell.column == *c);
            line.push(cell.map_or_else(|| "n/a".into(), ReportCell::render));
        }
        lines.push(line);
    }
    let widths: Vec<usize> = (0..lines[0].len())
        .map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0))
        .collect();
    for line in &lines {
        let mut text = String::new();
        for (i, (cell, w)) in line.iter().zip(&widths).enumerate() {
            if i > 0 {
                text.push_str("  ");
            }
            let _ = write!(text, "{cell:<w$}");
        }
        out.push_str(text.trim_end());
        out.push('\n');
    }
    let _ = writeln!(out, "N={n}, R=correlation");
}

/// Plain-text rendering of the report. Political panels show their
/// reference columns (INGAME plus their own wave).
pub fn render_text(report: &CorrelationReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{}", report.personality.title);
    render_table(&mut out, &report.personality, &Column::ALL, report.n);
    out.push('\n');
    let _ = writeln!(out, "{}", report.political_pre.title);
    render_table(
        &mut out,
        &report.political_pre,
        &[Column::Ingame, Column::Pre],
        report.n,
    );
    out.push('\n');
    let _ = writeln!(out, "{}", report.political_post.title);
    render_table(
        &mut out,
        &report.political_post,
        &[Column::Ingame, Column::Post],
        report.n,
    );
    out.push('\n');
    out.push_str("Climate attitude correlations\n");
    for cell in &report.overall {
        let value = cell
            .result
            .as_ref()
            .map_or_else(|| "n/a".into(), |r| format!("{} (p={:.3})", render_result(r), r.p_value));
        let _ = writeln!(out, "{}: {}", cell.label, value);
    }
    out
}
