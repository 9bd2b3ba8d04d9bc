//! Domain types shared by every stage of the evaluation harness.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates.
///
/// Coordinates are fractions of the image width/height. Construction rejects
/// degenerate or out-of-range boxes, so every value of this type has positive
/// area.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedBBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl NormalizedBBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let coords = [x_min, y_min, x_max, y_max];
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidBox(format!("non-finite coordinate in {coords:?}")));
        }
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidBox(format!("coordinate outside [0,1] in {coords:?}")));
        }
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidBox(format!("degenerate box {coords:?}")));
        }
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.area() <= 0.0 {
            return Err(Error::InvalidBox(format!("zero-area box {coords:?}")));
        }
        Ok(b)
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn full() -> Self {
        Self {
            x_min: 0.0,
            y_min: 0.0,
            x_max: 1.0,
            y_max: 1.0,
        }
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }
    pub fn y_min(&self) -> f64 {
        self.y_min
    }
    pub fn x_max(&self) -> f64 {
        self.x_max
    }
    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    /// Area as a fraction of the image area.
    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area in square pixels for an image of the given size.
    pub fn pixel_area(&self, width: u32, height: u32) -> f64 {
        self.width() * f64::from(width) * self.height() * f64::from(height)
    }

    /// Intersection area in normalized units, 0 when disjoint.
    pub fn intersection_area(&self, other: &Self) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn iou(&self, other: &Self) -> f64 {
        iou(self, other)
    }
}

/// Intersection over union of two boxes.
pub fn iou(a: &NormalizedBBox, b: &NormalizedBBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Pixel area of `b` on a `width`×`height` image.
pub fn pixel_area(b: &NormalizedBBox, width: u32, height: u32) -> f64 {
    b.pixel_area(width, height)
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl Serialize for NormalizedBBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().map(round6).serialize(s)
    }
}

impl<'de> Deserialize<'de> for NormalizedBBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let c = <[f64; 4]>::deserialize(d)?;
        NormalizedBBox::from_array(c).map_err(serde::de::Error::custom)
    }
}

/// Object-level modification kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum EditCommand {
    Add,
    Remove,
    Edit,
}

impl EditCommand {
    pub const ALL: [EditCommand; 3] = [EditCommand::Add, EditCommand::Edit, EditCommand::Remove];

    pub fn as_str(&self) -> &'static str {
        match self {
            EditCommand::Add => "ADD",
            EditCommand::Remove => "REMOVE",
            EditCommand::Edit => "EDIT",
        }
    }
}

impl fmt::Display for EditCommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EditCommand {
    type Err = Error;

    /// Case-insensitive match against the closed command set.
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ADD" => Ok(EditCommand::Add),
            "REMOVE" => Ok(EditCommand::Remove),
            "EDIT" => Ok(EditCommand::Edit),
            other => Err(Error::InvalidDifference(format!("unknown command {other:?}"))),
        }
    }
}

/// A detected object-level change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Difference {
    pub command: EditCommand,
    pub subject: String,
    pub bbox: NormalizedBBox,
    pub confidence: f64,
}

impl Difference {
    pub fn new(
        command: EditCommand,
        subject: impl Into<String>,
        bbox: NormalizedBBox,
        confidence: f64,
    ) -> Result<Self> {
        let subject = subject.into();
        if subject.trim().is_empty() {
            return Err(Error::InvalidDifference("empty subject".into()));
        }
        if !(0.0..=1.0).contains(&confidence) {
            return Err(Error::InvalidDifference(format!(
                "confidence {confidence} outside [0,1]"
            )));
        }
        Ok(Self {
            command,
            subject,
            bbox,
            confidence,
        })
    }
}

/// Annotated change. `coherent` encodes whether the change belongs to the
/// edit the prompt asked for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDifference {
    pub command: EditCommand,
    pub subject: String,
    pub bbox: NormalizedBBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coherent: Option<bool>,
}

impl GroundTruthDifference {
    pub fn new(
        command: EditCommand,
        subject: impl Into<String>,
        bbox: NormalizedBBox,
        coherent: Option<bool>,
    ) -> Result<Self> {
        let subject = subject.into();
        if subject.trim().is_empty() {
            return Err(Error::InvalidDifference("empty subject".into()));
        }
        Ok(Self {
            command,
            subject,
            bbox,
            coherent,
        })
    }

    /// The ground truth viewed as a detection with confidence 1.
    pub fn as_difference(&self) -> Difference {
        Difference {
            command: self.command,
            subject: self.subject.clone(),
            bbox: self.bbox,
            confidence: 1.0,
        }
    }
}

/// Likert ratings collected from human annotators, 1 to 5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanRatings {
    pub prompt_adherence: u8,
    pub background_preservation: u8,
}

impl HumanRatings {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("prompt_adherence", self.prompt_adherence),
            ("background_preservation", self.background_preservation),
        ] {
            if !(1..=5).contains(&v) {
                return Err(Error::InvalidCase(format!("{name} rating {v} outside 1..=5")));
            }
        }
        Ok(())
    }
}

/// One evaluation unit: original image, edited image and the edit prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditCase {
    pub case_id: String,
    pub original_image: String,
    pub edited_image: String,
    pub prompt: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Vec<GroundTruthDifference>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_ratings: Option<HumanRatings>,
    /// Fields this version does not know about, kept for round-tripping.
    #[serde(flatten)]
    pub extra: serde_json::Map<String, serde_json::Value>,
}

impl EditCase {
    pub fn validate(&self) -> Result<()> {
        if self.case_id.trim().is_empty() {
            return Err(Error::InvalidCase("empty case_id".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCase(format!(
                "{}: width and height must be positive",
                self.case_id
            )));
        }
        if let Some(r) = &self.human_ratings {
            r.validate()
                .map_err(|e| Error::InvalidCase(format!("{}: {e}", self.case_id)))?;
        }
        Ok(())
    }

    pub fn image_area(&self) -> f64 {
        f64::from(self.width) * f64::from(self.height)
    }
}

/// Binary coherence decision for one difference, with the model's rationale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoherenceVerdict {
    pub decision: bool,
    pub rationale: String,
    #[serde(default)]
    pub flagged_unparseable: bool,
}

impl CoherenceVerdict {
    pub fn yes() -> Self {
        Self {
            decision: true,
            rationale: String::new(),
            flagged_unparseable: false,
        }
    }

    pub fn no() -> Self {
        Self {
            decision: false,
            rationale: String::new(),
            flagged_unparseable: false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(c: [f64; 4]) -> NormalizedBBox {
        NormalizedBBox::from_array(c).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b([0., 0., 0.5, 0.5]), &b([0., 0., 0.5, 0.5])), 1.0);
        assert_eq!(iou(&b([0., 0., 0.4, 0.4]), &b([0.5, 0.5, 0.9, 0.9])), 0.0);
        // intersection 0.125, union 0.375
        let v = iou(&b([0., 0., 0.5, 0.5]), &b([0.25, 0., 0.75, 0.5]));
        assert!((v - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_are_disjoint() {
        assert_eq!(iou(&b([0., 0., 0.5, 1.]), &b([0.5, 0., 1., 1.])), 0.0);
    }

    #[test]
    fn pixel_area_examples() {
        assert_eq!(pixel_area(&NormalizedBBox::full(), 640, 480), 307200.0);
        assert_eq!(pixel_area(&b([0., 0., 0.5, 0.5]), 100, 100), 2500.0);
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(NormalizedBBox::new(0.1, 0.1, 0.1, 0.2).is_err());
        assert!(NormalizedBBox::new(0.1, 0.2, 0.3, 0.2).is_err());
        assert!(NormalizedBBox::new(0.5, 0.1, 0.4, 0.2).is_err());
        assert!(NormalizedBBox::new(-0.1, 0.1, 0.4, 0.2).is_err());
        assert!(NormalizedBBox::new(0.1, 0.1, 1.2, 0.2).is_err());
        assert!(NormalizedBBox::new(f64::NAN, 0.1, 0.4, 0.2).is_err());
    }

    #[test]
    fn bbox_json_is_array_with_six_decimals() {
        let bb = b([0.1234567, 0.2, 0.5, 0.75]);
        assert_eq!(serde_json::to_string(&bb).unwrap(), "[0.123457,0.2,0.5,0.75]");
        let back: NormalizedBBox = serde_json::from_str("[0.1,0.2,0.5,0.75]").unwrap();
        assert_eq!(back, b([0.1, 0.2, 0.5, 0.75]));
        assert!(serde_json::from_str::<NormalizedBBox>("[0.5,0.2,0.5,0.75]").is_err());
    }

    #[test]
    fn command_tokens() {
        assert_eq!(serde_json::to_string(&EditCommand::Remove).unwrap(), "\"REMOVE\"");
        assert_eq!("edit".parse::<EditCommand>().unwrap(), EditCommand::Edit);
        assert!("PAINT".parse::<EditCommand>().is_err());
    }

    #[test]
    fn difference_validation() {
        let bb = NormalizedBBox::full();
        assert!(Difference::new(EditCommand::Add, "  ", bb, 0.5).is_err());
        assert!(Difference::new(EditCommand::Add, "cat", bb, 1.5).is_err());
        assert!(Difference::new(EditCommand::Add, "cat", bb, 1.0).is_ok());
    }

    #[test]
    fn case_preserves_unknown_fields() {
        let line = r#"{"case_id":"c1","original_image":"a.png","edited_image":"b.png","prompt":"add a hat","width":64,"height":48,"source":"emu","split":{"k":1}}"#;
        let case: EditCase = serde_json::from_str(line).unwrap();
        assert_eq!(case.extra.len(), 2);
        let v1: serde_json::Value = serde_json::from_str(line).unwrap();
        let v2 = serde_json::to_value(&case).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn ratings_range() {
        let r = HumanRatings {
            prompt_adherence: 6,
            background_preservation: 3,
        };
        assert!(r.validate().is_err());
    }

    fn arb_box() -> impl Strategy<Value = NormalizedBBox> {
        (0.0..0.9f64, 0.0..0.9f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, w, h)| {
            let x1 = (x + w * (1.0 - x)).min(1.0);
            let y1 = (y + h * (1.0 - y)).min(1.0);
            NormalizedBBox::new(x, y, x1.max(x + 1e-3), y1.max(y + 1e-3)).unwrap()
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn pixel_area_linear(a in arb_box(), w in 1u32..2000, h in 1u32..2000, k in 1u32..5) {
            let base = a.pixel_area(w, h);
            prop_assert!((a.pixel_area(w * k, h) - base * f64::from(k)).abs() < 1e-6 * base.max(1.0) * f64::from(k));
            prop_assert!((a.pixel_area(w, h * k) - base * f64::from(k)).abs() < 1e-6 * base.max(1.0) * f64::from(k));
        }
    }
}
