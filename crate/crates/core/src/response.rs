//! Text protocol between the policy and the trainer.
//!
//! A response serializes as
//!
//! ```text
//! <think>REASONING</think><answer>[{"bbox":[x1,y1,x2,y2],"point":[x,y]},...]</answer>
//! ```
//!
//! with every coordinate printed to six decimals. The parser accepts an
//! object without `"point"` and substitutes the box center.

use rand::Rng;
use serde_json::Value;

use crate::geometry::{BoxN, GeometryError, PointN};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";
const TAGS: [&str; 4] = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("missing <think>...</think> block")]
    MissingThink,
    #[error("missing <answer>...</answer> block")]
    MissingAnswer,
    #[error("answer block appears before the think block")]
    WrongOrder,
    #[error("malformed object list: {0}")]
    MalformedObjectList(String),
    #[error("coordinate {0} is outside [0, 1]")]
    CoordinateOutOfRange(f64),
}

/// Parsed grounding output: reasoning text plus `M` boxes and points.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    reasoning: String,
    boxes: Vec<BoxN>,
    points: Vec<PointN>,
}

impl Response {
    pub fn new(
        reasoning: impl Into<String>,
        boxes: Vec<BoxN>,
        points: Vec<PointN>,
    ) -> Result<Self, FormatError> {
        if boxes.len() != points.len() {
            return Err(FormatError::MalformedObjectList(format!(
                "{} boxes but {} points",
                boxes.len(),
                points.len()
            )));
        }
        Ok(Self {
            reasoning: reasoning.into(),
            boxes,
            points,
        })
    }

    pub fn empty(reasoning: impl Into<String>) -> Self {
        Self {
            reasoning: reasoning.into(),
            boxes: Vec::new(),
            points: Vec::new(),
        }
    }

    pub fn reasoning(&self) -> &str {
        &self.reasoning
    }

    pub fn boxes(&self) -> &[BoxN] {
        &self.boxes
    }

    pub fn points(&self) -> &[PointN] {
        &self.points
    }

    /// Number of predicted objects `M`.
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn serialize(&self) -> String {
        serialize(self)
    }
}

pub fn serialize(r: &Response) -> String {
    let objects: Vec<String> = r
        .boxes
        .iter()
        .zip(&r.points)
        .map(|(b, p)| {
            format!(
                r#"{{"bbox":[{:.6},{:.6},{:.6},{:.6}],"point":[{:.6},{:.6}]}}"#,
                b.x1(),
                b.y1(),
                b.x2(),
                b.y2(),
                p.x(),
                p.y()
            )
        })
        .collect();
    format!(
        "{THINK_OPEN}{}{THINK_CLOSE}{ANSWER_OPEN}[{}]{ANSWER_CLOSE}",
        r.reasoning,
        objects.join(",")
    )
}

pub fn parse(text: &str) -> Result<Response, FormatError> {
    let think_start = text.find(THINK_OPEN).ok_or(FormatError::MissingThink)?;
    let body_start = think_start + THINK_OPEN.len();
    let think_len = text[body_start..]
        .find(THINK_CLOSE)
        .ok_or(FormatError::MissingThink)?;
    let reasoning = &text[body_start..body_start + think_len];
    let after_think = body_start + think_len + THINK_CLOSE.len();

    let answer_start = match text[after_think..].find(ANSWER_OPEN) {
        Some(i) => after_think + i + ANSWER_OPEN.len(),
        None if text[..think_start].contains(ANSWER_OPEN) => return Err(FormatError::WrongOrder),
        None => return Err(FormatError::MissingAnswer),
    };
    let answer_len = text[answer_start..]
        .find(ANSWER_CLOSE)
        .ok_or(FormatError::MissingAnswer)?;
    let (boxes, points) = parse_objects(&text[answer_start..answer_start + answer_len])?;
    Ok(Response {
        reasoning: reasoning.to_string(),
        boxes,
        points,
    })
}

fn malformed(msg: impl Into<String>) -> FormatError {
    FormatError::MalformedObjectList(msg.into())
}

fn coords<const N: usize>(v: &Value, key: &str) -> Result<[f64; N], FormatError> {
    let arr = v
        .as_array()
        .ok_or_else(|| malformed(format!("`{key}` is not a list")))?;
    if arr.len() != N {
        return Err(malformed(format!(
            "`{key}` has {} numbers, expected {N}",
            arr.len()
        )));
    }
    let mut out = [0.0; N];
    for (slot, x) in out.iter_mut().zip(arr) {
        let x = x
            .as_f64()
            .ok_or_else(|| malformed(format!("`{key}` holds a non-number")))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(FormatError::CoordinateOutOfRange(x));
        }
        *slot = x;
    }
    Ok(out)
}

fn parse_objects(payload: &str) -> Result<(Vec<BoxN>, Vec<PointN>), FormatError> {
    let value: Value =
        serde_json::from_str(payload.trim()).map_err(|e| malformed(e.to_string()))?;
    let items = value
        .as_array()
        .ok_or_else(|| malformed("answer is not a list"))?;
    let mut boxes = Vec::with_capacity(items.len());
    let mut points = Vec::with_capacity(items.len());
    for item in items {
        let obj = item
            .as_object()
            .ok_or_else(|| malformed("list entry is not an object"))?;
        if let Some(k) = obj.keys().find(|k| *k != "bbox" && *k != "point") {
            return Err(malformed(format!("unexpected key `{k}`")));
        }
        let c: [f64; 4] = coords(
            obj.get("bbox")
                .ok_or_else(|| malformed("object without `bbox`"))?,
            "bbox",
        )?;
        let b = BoxN::try_from(c).map_err(geometry_to_format)?;
        let p = match obj.get("point") {
            Some(v) => PointN::try_from(coords::<2>(v, "point")?).map_err(geometry_to_format)?,
            None => b.center(),
        };
        boxes.push(b);
        points.push(p);
    }
    Ok((boxes, points))
}

fn geometry_to_format(e: GeometryError) -> FormatError {
    match e {
        GeometryError::OutOfRange { value } => FormatError::CoordinateOutOfRange(value),
        other => malformed(other.to_string()),
    }
}

/// The revised query `q2 = U(q, o1)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RevisionQuery {
    pub original_question: String,
    pub initial_response_text: String,
    pub combined_prompt: String,
}

pub fn build_revision_query(question: &str, initial: &Response) -> RevisionQuery {
    let initial_text = serialize(initial);
    let combined_prompt = format!(
        "Question: {question}\nYour previous answer was:\n{initial_text}\n\
         Re-examine the scene, check whether the referenced objects are correctly localised, \
         and output a revised answer in the same format."
    );
    RevisionQuery {
        original_question: question.to_string(),
        initial_response_text: initial_text,
        combined_prompt,
    }
}

/// With probability `p_corrupt`, deletes the first occurrence of one
/// randomly chosen structural tag.
pub fn corrupt<R: Rng + ?Sized>(text: &str, p_corrupt: f64, rng: &mut R) -> String {
    let hit = rng.random::<f64>() < p_corrupt;
    if !hit {
        return text.to_string();
    }
    let present: Vec<(usize, &str)> = TAGS
        .iter()
        .filter_map(|t| text.find(t).map(|i| (i, *t)))
        .collect();
    if present.is_empty() {
        return text.to_string();
    }
    let (at, tag) = present[rng.random_range(0..present.len())];
    let mut out = String::with_capacity(text.len());
    out.push_str(&text[..at]);
    out.push_str(&text[at + tag.len()..]);
    out
}
