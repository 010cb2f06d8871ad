//! CSV readers and writers for the raw logs and the flat cohort table.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::path::Path;
use std::str::FromStr;

use chrono::NaiveDate;

use super::*;

const DATE_FORMAT: &str = "%Y-%m-%d";

struct Table {
    file: String,
    columns: HashMap<String, usize>,
    reader: csv::Reader<File>,
}

struct Row<'a> {
    table: &'a Table,
    record: &'a csv::StringRecord,
    line: u64,
}

impl Row<'_> {
    fn error(&self, column: &str, message: impl Into<String>) -> Error {
        Error::Parse {
            file: self.table.file.clone(),
            line: self.line,
            column: column.to_string(),
            message: message.into(),
        }
    }

    fn raw(&self, column: &str) -> Result<&str> {
        let idx = self.table.columns[column];
        self.record
            .get(idx)
            .map(str::trim)
            .ok_or_else(|| self.error(column, "missing value"))
    }

    fn parse<T: FromStr>(&self, column: &str, what: &str) -> Result<T> {
        let raw = self.raw(column)?;
        raw.parse()
            .map_err(|_| self.error(column, format!("expected {what}, got `{raw}`")))
    }

    fn date(&self, column: &str) -> Result<NaiveDate> {
        let raw = self.raw(column)?;
        NaiveDate::parse_from_str(raw, DATE_FORMAT)
            .map_err(|_| self.error(column, format!("expected ISO-8601 date, got `{raw}`")))
    }

    fn finite(&self, column: &str) -> Result<f64> {
        let v: f64 = self.parse(column, "a number")?;
        if !v.is_finite() {
            return Err(self.error(column, "value must be finite"));
        }
        Ok(v)
    }

    fn id(&self, column: &str) -> Result<String> {
        let raw = self.raw(column)?;
        if raw.is_empty() {
            return Err(self.error(column, "empty id"));
        }
        Ok(raw.to_string())
    }
}

impl Table {
    /// Opens `path` and checks that its header holds exactly `expected`
    /// (in any order). `kind` names the column family in schema errors.
    fn open(path: &Path, expected: &[&str], kind: &str) -> Result<Self> {
        let file = path.display().to_string();
        let handle = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::Headers)
            .from_reader(handle);
        let headers = reader.headers()?.clone();
        let mut columns = HashMap::new();
        for (i, h) in headers.iter().enumerate() {
            if !expected.contains(&h) {
                return Err(Error::Schema {
                    file,
                    message: format!(
                        "unknown {kind} column `{h}`; expected columns: {}",
                        expected.join(", ")
                    ),
                });
            }
            if columns.insert(h.to_string(), i).is_some() {
                return Err(Error::Schema {
                    file,
                    message: format!("duplicate column `{h}`"),
                });
            }
        }
        let missing: Vec<&str> = expected
            .iter()
            .copied()
            .filter(|c| !columns.contains_key(*c))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Schema {
                file,
                message: format!(
                    "missing column(s) {}; expected columns: {}",
                    missing.join(", "),
                    expected.join(", ")
                ),
            });
        }
        Ok(Self {
            file,
            columns,
            reader,
        })
    }

    fn for_each_row(mut self, mut f: impl FnMut(&Row<'_>) -> Result<()>) -> Result<()> {
        let mut record = csv::StringRecord::new();
        loop {
            let more = self.reader.read_record(&mut record).map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                Error::Parse {
                    file: self.file.clone(),
                    line,
                    column: String::new(),
                    message: e.to_string(),
                }
            })?;
            if !more {
                return Ok(());
            }
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            f(&Row {
                table: &self,
                record: &record,
                line,
            })?;
        }
    }
}

fn session_columns() -> Vec<&'static str> {
    let mut cols = vec!["tutor_id", "date"];
    cols.extend_from_slice(talk_move_names());
    cols.push("attendee_ids");
    cols
}

fn its_columns() -> Vec<&'static str> {
    let mut cols = vec!["student_id", "date"];
    cols.extend_from_slice(its_feature_names());
    cols
}

const ASSESSMENT_COLUMNS: [&str; 4] = ["student_id", "round", "date", "score"];
const ROSTER_COLUMNS: [&str; 3] = ["student_id", "tutor_id", "attendance_ratio"];

pub fn load_sessions(path: impl AsRef<Path>) -> Result<Vec<SessionLog>> {
    let table = Table::open(path.as_ref(), &session_columns(), "session (talk-move)")?;
    let mut out = Vec::new();
    table.for_each_row(|row| {
        let mut talk_move_counts = [0u32; TALK_MOVE_COUNT];
        for (c, name) in talk_move_counts.iter_mut().zip(talk_move_names()) {
            *c = row.parse(name, "a non-negative integer count")?;
        }
        let attendees: BTreeSet<StudentId> = row
            .raw("attendee_ids")?
            .split('|')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(StudentId::from)
            .collect();
        if attendees.is_empty() {
            return Err(row.error("attendee_ids", "a session needs at least one attendee"));
        }
        out.push(SessionLog {
            tutor_id: TutorId(row.id("tutor_id")?),
            date: row.date("date")?,
            talk_move_counts,
            attendees,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn load_its(path: impl AsRef<Path>) -> Result<Vec<ItsSnapshot>> {
    let table = Table::open(path.as_ref(), &its_columns(), "ITS")?;
    let mut out = Vec::new();
    table.for_each_row(|row| {
        let mut values = [0.0; ITS_FEATURE_COUNT];
        for (v, name) in values.iter_mut().zip(its_feature_names()) {
            *v = row.finite(name)?;
        }
        for name in ["opportunities_avg", "workspace_time_avg"] {
            let idx = its_feature_names().iter().position(|n| *n == name).unwrap();
            if values[idx] < 0.0 {
                return Err(row.error(name, "must be non-negative"));
            }
        }
        out.push(ItsSnapshot {
            student_id: StudentId(row.id("student_id")?),
            as_of: row.date("date")?,
            values,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn load_assessments(path: impl AsRef<Path>) -> Result<Vec<AssessmentRecord>> {
    let table = Table::open(path.as_ref(), &ASSESSMENT_COLUMNS, "assessment")?;
    let mut out = Vec::new();
    table.for_each_row(|row| {
        let round: u8 = row.parse("round", "an integer round 1..5")?;
        if !(1..=5).contains(&round) {
            return Err(row.error("round", format!("round {round} outside 1..5")));
        }
        let score: i64 = row.parse("score", "an integer score")?;
        if !(0..=i64::from(MAX_SCORE)).contains(&score) {
            return Err(row.error("score", format!("score {score} outside [0, {MAX_SCORE}]")));
        }
        out.push(AssessmentRecord {
            student_id: StudentId(row.id("student_id")?),
            round,
            date: row.date("date")?,
            score: score as u8,
        });
        Ok(())
    })?;
    Ok(out)
}

pub fn load_roster(path: impl AsRef<Path>) -> Result<Vec<RosterEntry>> {
    let table = Table::open(path.as_ref(), &ROSTER_COLUMNS, "roster")?;
    let mut out = Vec::new();
    table.for_each_row(|row| {
        let ratio = row.finite("attendance_ratio")?;
        if !(0.0..=1.0).contains(&ratio) {
            return Err(row.error("attendance_ratio", format!("ratio {ratio} outside [0, 1]")));
        }
        out.push(RosterEntry {
            student_id: StudentId(row.id("student_id")?),
            tutor_id: TutorId(row.id("tutor_id")?),
            attendance_ratio: ratio,
        });
        Ok(())
    })?;
    Ok(out)
}

/// Parses the three activity files, preserving row order.
pub fn load_inputs(
    session_file: impl AsRef<Path>,
    its_file: impl AsRef<Path>,
    assessment_file: impl AsRef<Path>,
) -> Result<(Vec<SessionLog>, Vec<ItsSnapshot>, Vec<AssessmentRecord>)> {
    Ok((
        load_sessions(session_file)?,
        load_its(its_file)?,
        load_assessments(assessment_file)?,
    ))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

pub(super) fn write_raw_logs(logs: &RawLogs, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut w = writer(&dir.join(SESSIONS_FILE))?;
    w.write_record(session_columns())?;
    for s in &logs.sessions {
        let mut rec = vec![s.tutor_id.0.clone(), s.date.format(DATE_FORMAT).to_string()];
        rec.extend(s.talk_move_counts.iter().map(u32::to_string));
        rec.push(
            s.attendees
                .iter()
                .map(|a| a.0.as_str())
                .collect::<Vec<_>>()
                .join("|"),
        );
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(dir.join(SESSIONS_FILE), e))?;

    let mut w = writer(&dir.join(ITS_FILE))?;
    w.write_record(its_columns())?;
    for s in &logs.its {
        let mut rec = vec![s.student_id.0.clone(), s.as_of.format(DATE_FORMAT).to_string()];
        rec.extend(s.values.iter().map(f64::to_string));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(dir.join(ITS_FILE), e))?;

    let mut w = writer(&dir.join(ASSESSMENTS_FILE))?;
    w.write_record(ASSESSMENT_COLUMNS)?;
    for a in &logs.assessments {
        w.write_record([
            a.student_id.0.clone(),
            a.round.to_string(),
            a.date.format(DATE_FORMAT).to_string(),
            a.score.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir.join(ASSESSMENTS_FILE), e))?;

    let mut w = writer(&dir.join(ROSTER_FILE))?;
    w.write_record(ROSTER_COLUMNS)?;
    for r in &logs.roster {
        w.write_record([
            r.student_id.0.clone(),
            r.tutor_id.0.clone(),
            r.attendance_ratio.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir.join(ROSTER_FILE), e))?;
    Ok(())
}

fn cohort_columns() -> Vec<&'static str> {
    let mut cols = vec!["student_id", "tutor_id", "round", "date"];
    cols.extend_from_slice(&FEATURE_NAMES);
    cols.push("outcome");
    cols
}

pub(super) fn write_cohort_csv(cohort: &Cohort, path: &Path) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(cohort_columns())?;
    for ep in cohort.evaluation_periods() {
        let mut rec = vec![
            ep.student_id.0.clone(),
            ep.tutor_id.0.clone(),
            ep.round.to_string(),
            ep.date.format(DATE_FORMAT).to_string(),
        ];
        rec.extend(ep.features.iter().map(f64::to_string));
        rec.push(ep.outcome.to_string());
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads the flat table written by [`Cohort::write_csv`]. Flags are not part
/// of that table and come back as defaults.
pub(super) fn read_cohort_csv(path: &Path) -> Result<Cohort> {
    let table = Table::open(path, &cohort_columns(), "cohort")?;
    let mut periods = Vec::new();
    table.for_each_row(|row| {
        let mut features = [0.0; FEATURE_COUNT];
        for (v, name) in features.iter_mut().zip(FEATURE_NAMES) {
            *v = row.finite(name)?;
        }
        periods.push(EvaluationPeriod {
            student_id: StudentId(row.id("student_id")?),
            tutor_id: TutorId(row.id("tutor_id")?),
            round: row.parse("round", "an integer round")?,
            date: row.date("date")?,
            features,
            outcome: row.finite("outcome")?,
            flags: EpFlags::default(),
        });
        Ok(())
    })?;
    Cohort::from_periods(periods, ExclusionReport::default())
}
