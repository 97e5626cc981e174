//! Labeled quote corpus: record schema, ingest, filtering and export.
//!
//! Records and outlets are stored as newline-delimited JSON, one object per
//! line. Timestamps given with day resolution are stored at midnight UTC.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Three-way sentiment channel. `ProB` is drawn as negative slant in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum SentimentChannel {
    ProA,
    ProB,
    Neutral,
}

impl SentimentChannel {
    pub const ALL: [SentimentChannel; 3] = [Self::ProA, Self::ProB, Self::Neutral];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ProA => "pro_a",
            Self::ProB => "pro_b",
            Self::Neutral => "neutral",
        }
    }
}

impl fmt::Display for SentimentChannel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SentimentChannel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pro_a" => Ok(Self::ProA),
            "pro_b" => Ok(Self::ProB),
            "neutral" => Ok(Self::Neutral),
            other => Err(Error::UnknownLabel {
                kind: "sentiment",
                label: other.to_string(),
                known: Self::ALL.iter().map(|c| c.as_str().to_string()).collect(),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    StateControlled,
    StateAgenda,
    Independent,
    Unknown,
}

impl Orientation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::StateControlled => "state_controlled",
            Self::StateAgenda => "state_agenda",
            Self::Independent => "independent",
            Self::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One extracted quotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuoteRecord {
    pub quote_id: String,
    pub outlet_id: String,
    pub article_id: String,
    pub text: String,
    #[serde(with = "timestamp")]
    pub published_at: DateTime<Utc>,
    pub speaker: String,
    pub topic: String,
    #[serde(rename = "sentiment")]
    pub sentiment_channel: SentimentChannel,
    pub country: String,
    pub language: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Outlet {
    pub outlet_id: String,
    pub name: String,
    pub country: String,
    pub orientation: Orientation,
}

/// Accepts `YYYY-MM-DD`, naive `YYYY-MM-DDTHH:MM:SS[.f]` (read as UTC) and RFC 3339.
pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.with_timezone(&Utc));
    }
    if let Ok(naive) = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f") {
        return Ok(naive.and_utc());
    }
    if let Ok(day) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
        return Ok(day.and_hms_opt(0, 0, 0).expect("midnight is valid").and_utc());
    }
    Err(Error::InvalidArgument(format!("unparseable timestamp `{s}`")))
}

pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

mod timestamp {
    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&super::format_timestamp(t))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        super::parse_timestamp(&raw).map_err(serde::de::Error::custom)
    }
}

/// Record as it appears on disk, before the sentiment label is mapped.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    quote_id: String,
    outlet_id: String,
    article_id: String,
    text: String,
    published_at: String,
    speaker: String,
    topic: String,
    sentiment: String,
    country: String,
    language: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct IngestOptions {
    #[serde(default)]
    pub strict: bool,
    /// Raw sentiment label -> channel, e.g. `negative_to_us` -> `pro_b`.
    #[serde(default)]
    pub sentiment_map: BTreeMap<String, SentimentChannel>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub skipped: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    records: Vec<QuoteRecord>,
    outlets: Vec<Outlet>,
    by_outlet: BTreeMap<String, Vec<usize>>,
    outlet_pos: BTreeMap<String, usize>,
    /// Topic labels known at ingest; kept through filtering.
    vocabulary: BTreeSet<String>,
}

impl PartialEq for Corpus {
    fn eq(&self, other: &Self) -> bool {
        self.records == other.records && self.outlets == other.outlets
    }
}

impl Corpus {
    /// Builds a corpus, checking every invariant.
    pub fn new(records: Vec<QuoteRecord>, outlets: Vec<Outlet>) -> Result<Self> {
        let mut outlet_pos = BTreeMap::new();
        for (pos, o) in outlets.iter().enumerate() {
            if outlet_pos.insert(o.outlet_id.clone(), pos).is_some() {
                return Err(Error::DuplicateId(o.outlet_id.clone()));
            }
        }
        let mut seen = BTreeSet::new();
        let mut by_outlet: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (idx, r) in records.iter().enumerate() {
            validate_record(r)?;
            if !seen.insert(r.quote_id.as_str()) {
                return Err(Error::DuplicateId(r.quote_id.clone()));
            }
            if !outlet_pos.contains_key(&r.outlet_id) {
                return Err(Error::UnknownOutlet(r.outlet_id.clone()));
            }
            by_outlet.entry(r.outlet_id.clone()).or_default().push(idx);
        }
        let vocabulary = records.iter().map(|r| r.topic.clone()).collect();
        Ok(Self {
            records,
            outlets,
            by_outlet,
            outlet_pos,
            vocabulary,
        })
    }

    pub fn records(&self) -> &[QuoteRecord] {
        &self.records
    }

    pub fn outlets(&self) -> &[Outlet] {
        &self.outlets
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn outlet(&self, id: &str) -> Option<&Outlet> {
        self.outlet_pos.get(id).map(|&p| &self.outlets[p])
    }

    /// Position of an outlet in `outlets()`; this is the node order used downstream.
    pub fn outlet_index(&self, id: &str) -> Option<usize> {
        self.outlet_pos.get(id).copied()
    }

    pub fn records_of(&self, outlet_id: &str) -> impl Iterator<Item = &QuoteRecord> {
        self.by_outlet
            .get(outlet_id)
            .into_iter()
            .flatten()
            .map(move |&i| &self.records[i])
    }

    /// Texts in record order, for the embedder.
    pub fn texts(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.text.as_str()).collect()
    }

    pub fn quote_ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.quote_id.clone()).collect()
    }

    /// Topic labels known to this corpus, including any filtered away.
    pub fn topics(&self) -> &BTreeSet<String> {
        &self.vocabulary
    }

    pub fn filter(&self, predicate: &RecordFilter) -> Result<Corpus> {
        let known = self.topics();
        for topic in predicate
            .include_topics
            .iter()
            .flatten()
            .chain(predicate.exclude_topics.iter())
        {
            if !known.contains(topic) {
                return Err(Error::UnknownLabel {
                    kind: "topic",
                    label: topic.clone(),
                    known: known.iter().cloned().collect(),
                });
            }
        }
        let records = self
            .records
            .iter()
            .filter(|r| predicate.matches(r))
            .cloned()
            .collect();
        let mut out = Corpus::new(records, self.outlets.clone())?;
        out.vocabulary = self.vocabulary.clone();
        Ok(out)
    }

    /// SHA-256 of the canonical export, used as a cache key.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for o in &self.outlets {
            hasher.update(serde_json::to_vec(o).expect("outlet serializes"));
            hasher.update(b"\n");
        }
        hasher.update(b"--\n");
        for r in &self.records {
            hasher.update(serde_json::to_vec(r).expect("record serializes"));
            hasher.update(b"\n");
        }
        hex::encode(hasher.finalize())
    }

    pub fn export(&self, records_path: &Path, outlets_path: &Path) -> Result<()> {
        write_jsonl(records_path, &self.records)?;
        write_jsonl(outlets_path, &self.outlets)
    }
}

fn validate_record(r: &QuoteRecord) -> Result<()> {
    if r.quote_id.is_empty() {
        return Err(Error::InvalidArgument("empty quote_id".into()));
    }
    if r.text.trim().is_empty() {
        return Err(Error::InvalidArgument(format!(
            "quote `{}` has empty text",
            r.quote_id
        )));
    }
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub use record_filter::RecordFilter;

mod record_filter {
    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Serialize};

    use super::{opt_timestamp, SentimentChannel};

    /// Topic / sentiment / date-range selection. Both ends of the date range are inclusive.
    #[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
    #[serde(deny_unknown_fields)]
    pub struct RecordFilter {
        #[serde(default)]
        pub include_topics: Option<Vec<String>>,
        #[serde(default)]
        pub exclude_topics: Vec<String>,
        #[serde(default)]
        pub channels: Option<Vec<SentimentChannel>>,
        #[serde(default, with = "opt_timestamp")]
        #[schemars(with = "Option<String>")]
        pub from: Option<DateTime<Utc>>,
        #[serde(default, with = "opt_timestamp")]
        #[schemars(with = "Option<String>")]
        pub to: Option<DateTime<Utc>>,
    }
}

impl RecordFilter {
    pub fn is_identity(&self) -> bool {
        *self == RecordFilter::default()
    }

    pub fn matches(&self, r: &QuoteRecord) -> bool {
        if let Some(inc) = &self.include_topics {
            if !inc.contains(&r.topic) {
                return false;
            }
        }
        if self.exclude_topics.contains(&r.topic) {
            return false;
        }
        if let Some(ch) = &self.channels {
            if !ch.contains(&r.sentiment_channel) {
                return false;
            }
        }
        if self.from.is_some_and(|from| r.published_at < from) {
            return false;
        }
        if self.to.is_some_and(|to| r.published_at > to) {
            return false;
        }
        true
    }
}

mod opt_timestamp {
    use chrono::{DateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &Option<DateTime<Utc>>, s: S) -> Result<S::Ok, S::Error> {
        match t {
            Some(t) => s.serialize_str(&super::format_timestamp(t)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<DateTime<Utc>>, D::Error> {
        let raw = Option::<String>::deserialize(d)?;
        raw.map(|s| super::parse_timestamp(&s).map_err(serde::de::Error::custom))
            .transpose()
    }
}

pub fn read_outlets(path: &Path) -> Result<Vec<Outlet>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_outlets_from(BufReader::new(file))
}

pub fn read_outlets_from<R: BufRead>(reader: R) -> Result<Vec<Outlet>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let outlet: Outlet = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(outlet);
    }
    Ok(out)
}

/// Reads a record file and an outlet table into a [`Corpus`].
///
/// Malformed record lines are fatal in strict mode and otherwise skipped with
/// a warning. Duplicate quote ids are always fatal.
pub fn ingest(
    records_path: &Path,
    outlets_path: &Path,
    opts: &IngestOptions,
) -> Result<(Corpus, IngestReport)> {
    let outlets = read_outlets(outlets_path)?;
    let file = File::open(records_path).map_err(|e| Error::io(records_path, e))?;
    ingest_from(BufReader::new(file), outlets, opts)
}

pub fn ingest_from<R: BufRead>(
    reader: R,
    outlets: Vec<Outlet>,
    opts: &IngestOptions,
) -> Result<(Corpus, IngestReport)> {
    let known_outlets: BTreeSet<String> = outlets.iter().map(|o| o.outlet_id.clone()).collect();
    let mut report = IngestReport::default();
    let mut records = Vec::new();
    let mut ids = BTreeSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match parse_record(&line, opts, &known_outlets) {
            Ok(rec) => {
                if !ids.insert(rec.quote_id.clone()) {
                    return Err(Error::DuplicateId(rec.quote_id));
                }
                records.push(rec);
            }
            Err(message) => {
                if opts.strict {
                    return Err(Error::Parse {
                        line: line_no,
                        message,
                    });
                }
                log::warn!("skipping line {line_no}: {message}");
                report.skipped += 1;
                report.warnings.push(format!("line {line_no}: {message}"));
            }
        }
    }
    Ok((Corpus::new(records, outlets)?, report))
}

fn parse_record(
    line: &str,
    opts: &IngestOptions,
    known_outlets: &BTreeSet<String>,
) -> std::result::Result<QuoteRecord, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    let sentiment_channel = match opts.sentiment_map.get(&raw.sentiment) {
        Some(&c) => c,
        None => raw.sentiment.parse().map_err(|e: Error| e.to_string())?,
    };
    let published_at = parse_timestamp(&raw.published_at).map_err(|e| e.to_string())?;
    if raw.text.trim().is_empty() {
        return Err("empty text".into());
    }
    if raw.quote_id.is_empty() {
        return Err("empty quote_id".into());
    }
    if !known_outlets.contains(&raw.outlet_id) {
        return Err(format!("unknown outlet `{}`", raw.outlet_id));
    }
    Ok(QuoteRecord {
        quote_id: raw.quote_id,
        outlet_id: raw.outlet_id,
        article_id: raw.article_id,
        text: raw.text,
        published_at,
        speaker: raw.speaker,
        topic: raw.topic,
        sentiment_channel,
        country: raw.country,
        language: raw.language,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    pub(crate) fn outlets() -> Vec<Outlet> {
        ["a", "b"]
            .iter()
            .map(|id| Outlet {
                outlet_id: id.to_string(),
                name: id.to_uppercase(),
                country: "XX".into(),
                orientation: Orientation::Independent,
            })
            .collect()
    }

    fn line(id: &str, outlet: &str, topic: &str, sentiment: &str, day: &str) -> String {
        format!(
            r#"{{"quote_id":"{id}","outlet_id":"{outlet}","article_id":"art-{id}","text":"quote {id}","published_at":"{day}","speaker":"S","topic":"{topic}","sentiment":"{sentiment}","country":"XX","language":"en"}}"#
        )
    }

    fn ingest_lines(lines: &[String], strict: bool) -> Result<(Corpus, IngestReport)> {
        let body = lines.join("\n");
        let opts = IngestOptions {
            strict,
            ..Default::default()
        };
        ingest_from(body.as_bytes(), outlets(), &opts)
    }

    #[test]
    fn three_valid_lines() {
        let lines = vec![
            line("q1", "a", "t", "pro_a", "2019-07-18"),
            line("q2", "b", "t", "pro_b", "2019-07-19"),
            line("q3", "a", "u", "neutral", "2019-07-20T10:00:00Z"),
        ];
        let (c, rep) = ingest_lines(&lines, true).unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(rep.skipped, 0);
        assert_eq!(c.records_of("a").count(), 2);
    }

    #[test]
    fn malformed_line_skipped_unless_strict() {
        let lines = vec![
            line("q1", "a", "t", "pro_a", "2019-07-18"),
            "{not json".to_string(),
            line("q2", "b", "t", "pro_b", "2019-07-19"),
        ];
        let (c, rep) = ingest_lines(&lines, false).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(rep.skipped, 1);
        assert_eq!(rep.warnings.len(), 1);
        assert!(matches!(
            ingest_lines(&lines, true),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn duplicate_quote_id_always_fatal() {
        let lines = vec![
            line("q1", "a", "t", "pro_a", "2019-07-18"),
            line("q1", "b", "t", "pro_b", "2019-07-19"),
        ];
        assert!(matches!(ingest_lines(&lines, false), Err(Error::DuplicateId(_))));
    }

    #[test]
    fn unknown_outlet_and_bad_timestamp_are_malformed() {
        let lines = vec![
            line("q1", "zz", "t", "pro_a", "2019-07-18"),
            line("q2", "a", "t", "pro_a", "yesterday"),
            line("q3", "a", "t", "pro_x", "2019-07-18"),
        ];
        let (c, rep) = ingest_lines(&lines, false).unwrap();
        assert!(c.is_empty());
        assert_eq!(rep.skipped, 3);
    }

    #[test]
    fn sentiment_map_collapses_labels() {
        let body = line("q1", "a", "t", "negative_to_us", "2019-07-18");
        let mut opts = IngestOptions::default();
        opts.sentiment_map
            .insert("negative_to_us".into(), SentimentChannel::ProB);
        let (c, _) = ingest_from(body.as_bytes(), outlets(), &opts).unwrap();
        assert_eq!(c.records()[0].sentiment_channel, SentimentChannel::ProB);
    }

    #[test]
    fn day_resolution_is_midnight_utc() {
        let t = parse_timestamp("2019-07-18").unwrap();
        assert_eq!(format_timestamp(&t), "2019-07-18T00:00:00Z");
    }

    fn thirty() -> Corpus {
        let lines: Vec<String> = (0..30)
            .map(|i| {
                let topic = if i % 3 == 0 { "inf_treaty" } else { "sanctions" };
                let sentiment = if i % 2 == 0 { "pro_a" } else { "pro_b" };
                let day = format!("2019-07-{:02}", 1 + i % 28);
                line(&format!("q{i}"), if i % 2 == 0 { "a" } else { "b" }, topic, sentiment, &day)
            })
            .collect();
        ingest_lines(&lines, true).unwrap().0
    }

    #[test]
    fn exclude_topic() {
        let c = thirty();
        let f = RecordFilter {
            exclude_topics: vec!["inf_treaty".into()],
            ..Default::default()
        };
        assert_eq!(c.filter(&f).unwrap().len(), 20);
    }

    #[test]
    fn include_channel_only() {
        let c = thirty();
        let f = RecordFilter {
            channels: Some(vec![SentimentChannel::ProA]),
            ..Default::default()
        };
        let sub = c.filter(&f).unwrap();
        assert!(!sub.is_empty());
        assert!(sub
            .records()
            .iter()
            .all(|r| r.sentiment_channel == SentimentChannel::ProA));
        assert_eq!(sub.filter(&f).unwrap(), sub);
    }

    #[test]
    fn full_date_range_is_identity() {
        let c = thirty();
        let f = RecordFilter {
            from: Some(parse_timestamp("2019-01-01").unwrap()),
            to: Some(parse_timestamp("2019-12-31").unwrap()),
            ..Default::default()
        };
        assert_eq!(c.filter(&f).unwrap(), c);
    }

    #[test]
    fn unknown_topic_lists_known_labels() {
        let c = thirty();
        let f = RecordFilter {
            exclude_topics: vec!["nope".into()],
            ..Default::default()
        };
        match c.filter(&f) {
            Err(Error::UnknownLabel { known, .. }) => {
                assert_eq!(known, vec!["inf_treaty".to_string(), "sanctions".to_string()])
            }
            other => panic!("expected UnknownLabel, got {other:?}"),
        }
    }

    #[test]
    fn export_round_trip() {
        let c = thirty();
        let dir = tempfile::tempdir().unwrap();
        let rp = dir.path().join("r.jsonl");
        let op = dir.path().join("o.jsonl");
        c.export(&rp, &op).unwrap();
        let opts = IngestOptions {
            strict: true,
            ..Default::default()
        };
        let (back, _) = ingest(&rp, &op, &opts).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.content_hash(), c.content_hash());
    }

    fn arb_corpus() -> impl proptest::strategy::Strategy<Value = Corpus> {
        use proptest::prelude::*;
        let record = (0usize..2, 0usize..3, 0usize..3, 1u32..29, 0u32..24, "[a-zA-Z\"é ]{0,12}[a-z]");
        prop::collection::vec(record, 0..25).prop_map(|rows| {
            let records = rows
                .into_iter()
                .enumerate()
                .map(|(k, (o, t, ch, day, hour, text))| QuoteRecord {
                    quote_id: format!("q{k}"),
                    outlet_id: ["a", "b"][o].into(),
                    article_id: format!("art{k}"),
                    text,
                    published_at: Utc.with_ymd_and_hms(2022, 2, day.min(28), hour, 0, 0).unwrap(),
                    speaker: "S".into(),
                    topic: ["t", "u", "v"][t].into(),
                    sentiment_channel: [SentimentChannel::ProA, SentimentChannel::ProB, SentimentChannel::Neutral][ch],
                    country: "XX".into(),
                    language: "en".into(),
                })
                .collect();
            Corpus::new(records, outlets()).unwrap()
        })
    }

    fn arb_filter() -> impl proptest::strategy::Strategy<Value = RecordFilter> {
        use proptest::prelude::*;
        let topics = prop::sample::subsequence(vec!["t".to_string(), "u".into(), "v".into()], 0..=3);
        let channels = prop::sample::subsequence(
            vec![SentimentChannel::ProA, SentimentChannel::ProB, SentimentChannel::Neutral],
            0..=3,
        );
        (
            prop::option::of(topics.clone()),
            topics,
            prop::option::of(channels),
            prop::option::of(1u32..29),
            prop::option::of(1u32..29),
        )
            .prop_map(|(include_topics, exclude_topics, channels, from, to)| RecordFilter {
                include_topics,
                exclude_topics,
                channels,
                from: from.map(|d| Utc.with_ymd_and_hms(2022, 2, d, 0, 0, 0).unwrap()),
                to: to.map(|d| Utc.with_ymd_and_hms(2022, 2, d, 12, 0, 0).unwrap()),
            })
    }

    proptest::proptest! {
        #[test]
        fn filtering_twice_equals_filtering_once(c in arb_corpus(), f in arb_filter()) {
            let known = c.topics().clone();
            let valid = f.include_topics.iter().flatten().chain(&f.exclude_topics).all(|t| known.contains(t));
            match c.filter(&f) {
                Ok(once) => {
                    proptest::prop_assert!(valid);
                    proptest::prop_assert_eq!(once.filter(&f).unwrap(), once.clone());
                    proptest::prop_assert!(once.records().iter().all(|r| f.matches(r)));
                }
                Err(e) => {
                    proptest::prop_assert!(!valid);
                    proptest::prop_assert!(matches!(e, Error::UnknownLabel { .. }), "{}", e);
                }
            }
        }

        #[test]
        fn export_then_ingest_round_trips(c in arb_corpus()) {
            let dir = tempfile::tempdir().unwrap();
            let (rp, op) = (dir.path().join("r.jsonl"), dir.path().join("o.jsonl"));
            c.export(&rp, &op).unwrap();
            let opts = IngestOptions { strict: true, ..Default::default() };
            let (back, report) = ingest(&rp, &op, &opts).unwrap();
            proptest::prop_assert_eq!(report.skipped, 0);
            proptest::prop_assert_eq!(back.content_hash(), c.content_hash());
            proptest::prop_assert_eq!(back, c);
        }
    }
}
