//! Parsers for every structured model output the prompts ask for.
//!
//! Call-list grammar (keyword arguments only):
//!
//! ```text
//! call_list := '[' call (',' call)* ']'
//! call      := ident '(' (kwarg (',' kwarg)*)? ')'
//! kwarg     := name '=' literal
//! literal   := string | integer | decimal | bool | null | list | map
//! string    := '"' ... '"' | '\'' ... '\''      (backslash escapes, \uXXXX)
//! bool      := True | true | False | false
//! null      := None | null
//! list      := '[' (literal (',' literal)*)? ']'
//! map       := '{' (string ':' literal (',' string ':' literal)*)? '}'
//! ```
//!
//! Whitespace is allowed between any two tokens. A reply whose first
//! non-whitespace character is `[` is committed to this grammar.

use std::fmt;

use serde_json::Value;
use thiserror::Error;

use crate::conversation::{error_payload, EvaluationResult, Literal, Summary, ToolCall, Verdict};

const MAX_DEPTH: usize = 64;

pub const TAG_EVALUATION: &str = "Evaluation";
pub const TAG_RESULT: &str = "Result";
pub const TAG_SUGGESTION: &str = "Suggestion";
pub const TAG_OUTPUT: &str = "Output";
pub const TAG_ATTEMPT: &str = "Attempt";
pub const TAG_ACTION: &str = "Action";

/// Payload substituted for calls the simulator did not answer.
pub const OMITTED_RESPONSE: &str = "simulator omitted response";

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("parse error at byte {position}: expected {expected}, found {found}")]
pub struct ParseError {
    pub position: usize,
    pub expected: String,
    pub found: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionOutput {
    Calls(Vec<ToolCall>),
    NaturalReply(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("missing <{tag}> section")]
pub struct TagMissing {
    pub tag: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum EvaluationParseError {
    #[error("evaluation has no <Result> section")]
    MissingResult,
    #[error("evaluation result `{0}` is neither 0 nor 1")]
    BadResult(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum SimulatorParseError {
    #[error(transparent)]
    MissingOutput(#[from] TagMissing),
    #[error("simulator output is not a list of objects: {0}")]
    Unparseable(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("no object with keys {keys} found")]
pub struct ObjectMissing {
    pub keys: &'static str,
}

/// Simulator payloads after count repair.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulatedPayloads {
    pub payloads: Vec<Value>,
    /// Number of payloads the simulator actually returned, when it differed
    /// from the expected count.
    pub returned: Option<usize>,
}

/// Score report produced by the baseline scoring prompts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScoreReport {
    pub evaluation: String,
    pub suggestion: Option<String>,
    pub score: u8,
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
    depth: usize,
}

impl<'a> Cursor<'a> {
    fn new(src: &'a str) -> Self {
        Cursor { src, pos: 0, depth: 0 }
    }

    fn at(src: &'a str, pos: usize) -> Self {
        Cursor { src, pos, depth: 0 }
    }

    fn peek(&self) -> Option<char> {
        self.src[self.pos..].chars().next()
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.peek()?;
        self.pos += c.len_utf8();
        Some(c)
    }

    fn skip_ws(&mut self) {
        while let Some(c) = self.peek() {
            if c.is_whitespace() {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
    }

    fn error(&self, expected: impl Into<String>) -> ParseError {
        self.error_at(self.pos, expected)
    }

    fn error_at(&self, position: usize, expected: impl Into<String>) -> ParseError {
        let found = match self.src[position..].chars().next() {
            Some(c) => format!("`{c}`"),
            None => "end of input".to_string(),
        };
        ParseError {
            position,
            expected: expected.into(),
            found,
        }
    }

    fn expect(&mut self, want: char) -> Result<(), ParseError> {
        self.skip_ws();
        if self.peek() == Some(want) {
            self.pos += want.len_utf8();
            Ok(())
        } else {
            Err(self.error(format!("`{want}`")))
        }
    }

    fn eat(&mut self, want: char) -> bool {
        self.skip_ws();
        if self.peek() == Some(want) {
            self.pos += want.len_utf8();
            true
        } else {
            false
        }
    }

    fn word(&mut self, allow_dots: bool) -> Option<&'a str> {
        let start = self.pos;
        match self.peek() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {
                self.pos += 1;
            }
            _ => return None,
        }
        while let Some(c) = self.peek() {
            if c.is_ascii_alphanumeric() || c == '_' || (allow_dots && c == '.') {
                self.pos += 1;
            } else {
                break;
            }
        }
        Some(&self.src[start..self.pos])
    }

    fn enter(&mut self) -> Result<(), ParseError> {
        self.depth += 1;
        if self.depth > MAX_DEPTH {
            return Err(self.error(format!("nesting depth at most {MAX_DEPTH}")));
        }
        Ok(())
    }

    fn call_list(&mut self) -> Result<Vec<ToolCall>, ParseError> {
        self.expect('[')?;
        let mut calls = vec![self.call()?];
        while self.eat(',') {
            calls.push(self.call()?);
        }
        self.expect(']')?;
        Ok(calls)
    }

    fn call(&mut self) -> Result<ToolCall, ParseError> {
        self.skip_ws();
        let name = self.word(true).ok_or_else(|| self.error("function name"))?;
        self.expect('(')?;
        let mut arguments: Vec<(String, Literal)> = Vec::new();
        self.skip_ws();
        if !self.eat(')') {
            loop {
                self.skip_ws();
                let key_pos = self.pos;
                let key = self.word(false).ok_or_else(|| self.error("keyword argument name"))?;
                if arguments.iter().any(|(k, _)| k == key) {
                    return Err(self.error_at(key_pos, "unique argument name"));
                }
                self.expect('=')?;
                let value = self.literal()?;
                arguments.push((key.to_string(), value));
                if self.eat(',') {
                    continue;
                }
                self.expect(')')?;
                break;
            }
        }
        Ok(ToolCall {
            tool: name.to_string(),
            arguments,
        })
    }

    fn literal(&mut self) -> Result<Literal, ParseError> {
        self.skip_ws();
        match self.peek() {
            Some('"') | Some('\'') => self.string().map(Literal::Str),
            Some('[') => self.list(),
            Some('{') => self.map(),
            Some(c) if c == '-' || c.is_ascii_digit() => self.number(),
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                match self.word(false) {
                    Some("True") | Some("true") => Ok(Literal::Bool(true)),
                    Some("False") | Some("false") => Ok(Literal::Bool(false)),
                    Some("None") | Some("null") => Ok(Literal::Null),
                    _ => Err(self.error_at(start, "literal")),
                }
            }
            _ => Err(self.error("literal")),
        }
    }

    fn list(&mut self) -> Result<Literal, ParseError> {
        self.enter()?;
        self.expect('[')?;
        let mut items = Vec::new();
        if !self.eat(']') {
            loop {
                items.push(self.literal()?);
                if self.eat(',') {
                    continue;
                }
                self.expect(']')?;
                break;
            }
        }
        self.depth -= 1;
        Ok(Literal::List(items))
    }

    fn map(&mut self) -> Result<Literal, ParseError> {
        self.enter()?;
        self.expect('{')?;
        let mut entries = Vec::new();
        if !self.eat('}') {
            loop {
                self.skip_ws();
                if !matches!(self.peek(), Some('"') | Some('\'')) {
                    return Err(self.error("string key"));
                }
                let key = self.string()?;
                self.expect(':')?;
                let value = self.literal()?;
                entries.push((key, value));
                if self.eat(',') {
                    continue;
                }
                self.expect('}')?;
                break;
            }
        }
        self.depth -= 1;
        Ok(Literal::Map(entries))
    }

    fn string(&mut self) -> Result<String, ParseError> {
        let quote = self.bump().expect("caller checked quote");
        let mut out = String::new();
        loop {
            let here = self.pos;
            match self.bump() {
                None => return Err(self.error(format!("closing `{quote}`"))),
                Some(c) if c == quote => return Ok(out),
                Some('\\') => {
                    let esc = self.bump().ok_or_else(|| self.error("escape character"))?;
                    match esc {
                        '"' | '\'' | '\\' | '/' => out.push(esc),
                        'n' => out.push('\n'),
                        't' => out.push('\t'),
                        'r' => out.push('\r'),
                        'b' => out.push('\u{8}'),
                        'f' => out.push('\u{c}'),
                        'u' => out.push(self.unicode_escape(here)?),
                        _ => return Err(self.error_at(here, "valid escape sequence")),
                    }
                }
                Some(c) => out.push(c),
            }
        }
    }

    fn hex4(&mut self) -> Result<u32, ParseError> {
        let start = self.pos;
        let digits = self
            .src
            .get(start..start + 4)
            .filter(|d| d.chars().all(|c| c.is_ascii_hexdigit()));
        match digits {
            Some(d) => {
                self.pos += 4;
                Ok(u32::from_str_radix(d, 16).expect("hex digits"))
            }
            None => Err(self.error("four hex digits")),
        }
    }

    fn unicode_escape(&mut self, escape_start: usize) -> Result<char, ParseError> {
        let hi = self.hex4()?;
        let code = if (0xD800..0xDC00).contains(&hi) {
            if !self.src[self.pos..].starts_with("\\u") {
                return Err(self.error("low surrogate escape"));
            }
            self.pos += 2;
            let lo = self.hex4()?;
            if !(0xDC00..0xE000).contains(&lo) {
                return Err(self.error_at(escape_start, "valid surrogate pair"));
            }
            0x10000 + ((hi - 0xD800) << 10) + (lo - 0xDC00)
        } else {
            hi
        };
        char::from_u32(code).ok_or_else(|| self.error_at(escape_start, "valid unicode scalar"))
    }

    fn digits(&mut self) -> usize {
        let start = self.pos;
        while matches!(self.peek(), Some(c) if c.is_ascii_digit()) {
            self.pos += 1;
        }
        self.pos - start
    }

    fn number(&mut self) -> Result<Literal, ParseError> {
        let start = self.pos;
        if self.peek() == Some('-') {
            self.pos += 1;
        }
        if self.digits() == 0 {
            return Err(self.error("digit"));
        }
        let mut decimal = false;
        if self.peek() == Some('.') {
            self.pos += 1;
            decimal = true;
            if self.digits() == 0 {
                return Err(self.error("digit"));
            }
        }
        if matches!(self.peek(), Some('e') | Some('E')) {
            self.pos += 1;
            decimal = true;
            if matches!(self.peek(), Some('+') | Some('-')) {
                self.pos += 1;
            }
            if self.digits() == 0 {
                return Err(self.error("exponent digit"));
            }
        }
        let text = &self.src[start..self.pos];
        if decimal {
            match text.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(Literal::Decimal(v)),
                _ => Err(self.error_at(start, "finite decimal")),
            }
        } else {
            text.parse::<i64>()
                .map(Literal::Int)
                .map_err(|_| self.error_at(start, "64-bit integer"))
        }
    }
}

/// Classifies an action-agent emission as a call list or a natural reply.
pub fn parse_action_output(text: &str) -> Result<ActionOutput, ParseError> {
    let mut cur = Cursor::new(text);
    cur.skip_ws();
    if cur.peek() != Some('[') {
        return Ok(ActionOutput::NaturalReply(text.to_string()));
    }
    let calls = cur.call_list()?;
    cur.skip_ws();
    if cur.pos != text.len() {
        return Err(cur.error("end of input"));
    }
    Ok(ActionOutput::Calls(calls))
}

/// Parses a complete text as a single literal.
pub fn parse_literal(text: &str) -> Result<Literal, ParseError> {
    let mut cur = Cursor::new(text);
    let value = cur.literal()?;
    cur.skip_ws();
    if cur.pos != text.len() {
        return Err(cur.error("end of input"));
    }
    Ok(value)
}

/// Returns the trimmed contents of the first `<tag>...</tag>` span.
pub fn extract_tagged<'a>(text: &'a str, tag: &str) -> Result<&'a str, TagMissing> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let missing = || TagMissing { tag: tag.to_string() };
    let start = text.find(&open).ok_or_else(missing)? + open.len();
    let end = text[start..].find(&close).ok_or_else(missing)? + start;
    Ok(text[start..end].trim())
}

pub fn parse_evaluation(text: &str) -> Result<EvaluationResult, EvaluationParseError> {
    let result = extract_tagged(text, TAG_RESULT).map_err(|_| EvaluationParseError::MissingResult)?;
    let token = result.split_whitespace().next().unwrap_or("");
    let verdict = match token {
        "1" => Verdict::Pass,
        "0" => Verdict::Fail,
        other => return Err(EvaluationParseError::BadResult(other.to_string())),
    };
    let rationale = extract_tagged(text, TAG_EVALUATION).unwrap_or("").to_string();
    let mut suggestion = extract_tagged(text, TAG_SUGGESTION).ok().map(str::to_string);
    if verdict == Verdict::Fail && suggestion.is_none() {
        suggestion = Some(String::new());
    }
    Ok(EvaluationResult {
        verdict,
        rationale,
        suggestion,
    })
}

/// Parses the simulator's `<Output>` list, padding or truncating it to
/// `expected_count` payloads.
pub fn parse_simulator_output(text: &str, expected_count: usize) -> Result<SimulatedPayloads, SimulatorParseError> {
    assert!(expected_count >= 1, "expected_count must be at least 1");
    let section = extract_tagged(text, TAG_OUTPUT)?;
    let items = match parse_literal(section) {
        Ok(Literal::List(items)) => items,
        Ok(_) => return Err(SimulatorParseError::Unparseable("not a list".into())),
        Err(e) => return Err(SimulatorParseError::Unparseable(e.to_string())),
    };
    let mut payloads = Vec::with_capacity(items.len());
    for item in &items {
        match item {
            Literal::Map(_) => payloads.push(item.to_json()),
            _ => return Err(SimulatorParseError::Unparseable("list element is not an object".into())),
        }
    }
    let returned = (payloads.len() != expected_count).then_some(payloads.len());
    if let Some(n) = returned {
        tracing::warn!(
            returned = n,
            expected = expected_count,
            "repairing simulator payload count"
        );
    }
    payloads.truncate(expected_count);
    while payloads.len() < expected_count {
        payloads.push(error_payload(OMITTED_RESPONSE));
    }
    Ok(SimulatedPayloads { payloads, returned })
}

/// Scans for the first braced object accepted by `accept`.
fn first_object<T>(text: &str, mut accept: impl FnMut(&[(String, Literal)]) -> Option<T>) -> Option<T> {
    for (pos, _) in text.match_indices('{') {
        let mut cur = Cursor::at(text, pos);
        if let Ok(Literal::Map(entries)) = cur.map() {
            if let Some(found) = accept(&entries) {
                return Some(found);
            }
        }
    }
    None
}

fn entry<'a>(entries: &'a [(String, Literal)], key: &str) -> Option<&'a Literal> {
    entries.iter().find(|(k, _)| k == key).map(|(_, v)| v)
}

pub fn parse_summary(text: &str) -> Result<Summary, ObjectMissing> {
    first_object(text, |entries| {
        let recommendation = entry(entries, "recommendation")?.as_str()?;
        let rationale = entry(entries, "rationale")?.as_str()?;
        Summary::new(recommendation, rationale).ok()
    })
    .ok_or(ObjectMissing {
        keys: "recommendation, rationale",
    })
}

/// Parses `{"evaluation": ..., "suggestion": ..., "score": 1..10}`.
pub fn parse_score_report(text: &str) -> Result<ScoreReport, ObjectMissing> {
    first_object(text, |entries| {
        let score = match entry(entries, "score")? {
            Literal::Int(i) => *i,
            Literal::Str(s) => s.trim().parse().ok()?,
            _ => return None,
        };
        if !(1..=10).contains(&score) {
            return None;
        }
        Some(ScoreReport {
            evaluation: entry(entries, "evaluation")
                .and_then(Literal::as_str)
                .unwrap_or("")
                .to_string(),
            suggestion: entry(entries, "suggestion")
                .and_then(Literal::as_str)
                .map(str::to_string),
            score: score as u8,
        })
    })
    .ok_or(ObjectMissing { keys: "score" })
}

impl fmt::Display for ActionOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ActionOutput::Calls(calls) => f.write_str(&crate::conversation::render_call_list(calls)),
            ActionOutput::NaturalReply(text) => f.write_str(text),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn calls(text: &str) -> Vec<ToolCall> {
        match parse_action_output(text).unwrap() {
            ActionOutput::Calls(c) => c,
            other => panic!("expected calls, got {other:?}"),
        }
    }

    #[test]
    fn single_call() {
        let c = calls(r#"[get_weather(city="Paris", days=3)]"#);
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].tool, "get_weather");
        assert_eq!(c[0].arguments[0], ("city".into(), Literal::Str("Paris".into())));
        assert_eq!(c[0].arguments[1], ("days".into(), Literal::Int(3)));
    }

    #[test]
    fn nested_list_and_empty_call() {
        let c = calls(r#"[f(x=[1, "a"]), g()]"#);
        assert_eq!(c.len(), 2);
        assert_eq!(
            c[0].arguments[0].1,
            Literal::List(vec![Literal::Int(1), Literal::Str("a".into())])
        );
        assert!(c[1].arguments.is_empty());
    }

    #[test]
    fn prose_is_natural_reply() {
        let text = "I cannot complete this with the given tools.";
        assert_eq!(
            parse_action_output(text).unwrap(),
            ActionOutput::NaturalReply(text.into())
        );
    }

    #[test]
    fn malformed_bracket_is_positioned_error() {
        let err = parse_action_output("[f(x=]").unwrap_err();
        assert_eq!(err.position, 5);
        assert_eq!(err.expected, "literal");
        assert_eq!(err.found, "`]`");
    }

    #[test]
    fn trailing_text_is_error() {
        let err = parse_action_output("[f()] and more").unwrap_err();
        assert_eq!(err.position, 6);
        assert_eq!(err.expected, "end of input");
    }

    #[test]
    fn duplicate_keyword_rejected() {
        let err = parse_action_output("[f(a=1, a=2)]").unwrap_err();
        assert_eq!(err.position, 8);
    }

    #[test]
    fn python_spellings() {
        let c = calls("[f(a=True, b=False, c=None, d='it\\'s')]");
        assert_eq!(c[0].arguments[0].1, Literal::Bool(true));
        assert_eq!(c[0].arguments[1].1, Literal::Bool(false));
        assert_eq!(c[0].arguments[2].1, Literal::Null);
        assert_eq!(c[0].arguments[3].1, Literal::Str("it's".into()));
    }

    #[test]
    fn numbers() {
        assert_eq!(parse_literal("-12").unwrap(), Literal::Int(-12));
        assert_eq!(parse_literal("2.50").unwrap(), Literal::Decimal(2.5));
        assert_eq!(parse_literal("1e3").unwrap(), Literal::Decimal(1000.0));
        assert!(parse_literal("1e400").is_err());
        assert!(parse_literal("99999999999999999999").is_err());
        assert!(parse_literal("1.").is_err());
    }

    #[test]
    fn unicode_escapes() {
        assert_eq!(parse_literal(r#""é😀""#).unwrap(), Literal::Str("é😀".into()));
        assert!(parse_literal(r#""\ud83d""#).is_err());
    }

    #[test]
    fn depth_is_bounded() {
        let deep = format!("{}{}", "[".repeat(200), "]".repeat(200));
        let err = parse_literal(&deep).unwrap_err();
        assert!(err.expected.contains("nesting depth"));
    }

    #[test]
    fn tagged_sections() {
        assert_eq!(extract_tagged("<Result>\n1\n</Result>", "Result").unwrap(), "1");
        assert_eq!(
            extract_tagged("<Evaluation>ok</Evaluation><Result>0</Result>", "Result").unwrap(),
            "0"
        );
        assert_eq!(
            extract_tagged("no tags here", "Result"),
            Err(TagMissing { tag: "Result".into() })
        );
        assert!(extract_tagged("<result>1</result>", "Result").is_err());
    }

    #[test]
    fn evaluation_mapping() {
        let pass = parse_evaluation("<Evaluation>looks correct</Evaluation><Result>1</Result>").unwrap();
        assert_eq!(
            pass,
            EvaluationResult::new(Verdict::Pass, "looks correct", None).unwrap()
        );
        let fail = parse_evaluation(
            "<Evaluation>wrong id</Evaluation>\n<Result>\n0\n</Result>\n<Suggestion>retry with valid id</Suggestion>",
        )
        .unwrap();
        assert_eq!(fail.verdict, Verdict::Fail);
        assert_eq!(fail.suggestion.as_deref(), Some("retry with valid id"));
        assert_eq!(
            parse_evaluation("<Result>maybe</Result>"),
            Err(EvaluationParseError::BadResult("maybe".into()))
        );
        assert_eq!(parse_evaluation("nothing"), Err(EvaluationParseError::MissingResult));
    }

    #[test]
    fn simulator_output() {
        let one = parse_simulator_output(r#"<Output>[{"temp": 21}]</Output>"#, 1).unwrap();
        assert_eq!(one.payloads, vec![serde_json::json!({"temp": 21})]);
        assert_eq!(one.returned, None);

        let padded = parse_simulator_output(r#"<Output>[{"temp": 21}]</Output>"#, 2).unwrap();
        assert_eq!(
            padded.payloads,
            vec![
                serde_json::json!({"temp": 21}),
                serde_json::json!({"error": OMITTED_RESPONSE})
            ]
        );
        assert_eq!(padded.returned, Some(1));

        let cut = parse_simulator_output("<Output>[{'a': 1}, {'b': None}]</Output>", 1).unwrap();
        assert_eq!(cut.payloads, vec![serde_json::json!({"a": 1})]);

        assert!(matches!(
            parse_simulator_output("<Output>not a list</Output>", 1),
            Err(SimulatorParseError::Unparseable(_))
        ));
        assert!(matches!(
            parse_simulator_output("<Output>[1, 2]</Output>", 2),
            Err(SimulatorParseError::Unparseable(_))
        ));
        assert!(matches!(
            parse_simulator_output("[{}]", 1),
            Err(SimulatorParseError::MissingOutput(_))
        ));
    }

    #[test]
    fn summary_object() {
        let s =
            parse_summary(r#"{"recommendation": "call get_balance first", "rationale": "attempt 2 passed"}"#).unwrap();
        assert_eq!(s.recommendation, "call get_balance first");
        assert_eq!(s.rationale, "attempt 2 passed");

        let s = parse_summary(
            "Here is my advice {not json} then:\n{\n  \"recommendation\": \"transfer 30\",\n  \"rationale\": \"safe\"\n}",
        )
        .unwrap();
        assert_eq!(s.recommendation, "transfer 30");
        assert!(parse_summary("no object at all").is_err());
    }

    #[test]
    fn score_reports() {
        let r = parse_score_report(r#"{"evaluation": "fine", "score": 8}"#).unwrap();
        assert_eq!(r.score, 8);
        assert_eq!(r.suggestion, None);
        let r = parse_score_report(r#"{"evaluation": "meh", "suggestion": "use B", "score": "3"}"#).unwrap();
        assert_eq!((r.score, r.suggestion.as_deref()), (3, Some("use B")));
        assert!(parse_score_report(r#"{"score": 11}"#).is_err());
        assert!(parse_score_report("score: 7").is_err());
    }
}
