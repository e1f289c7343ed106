//! Visual attributes detected outside the process (facial appearance,
//! look-alike identity guesses) and the prompt sentences built from them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const IDENTITY_THRESHOLD: f64 = 0.5;
pub const FIXTURE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceAttributes {
    pub object_index: usize,
    pub gender: String,
    pub race: String,
    pub age: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityGuess {
    /// `None` when the guess is for the whole image rather than one object.
    #[serde(default)]
    pub object_index: Option<usize>,
    pub label: String,
    pub score: f64,
}

/// Recorded provider output for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub version: u32,
    pub image_ref: String,
    pub num_objects: usize,
    #[serde(default)]
    pub faces: Vec<FaceAttributes>,
    #[serde(default)]
    pub identities: Vec<IdentityGuess>,
}

impl AttributeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.version != FIXTURE_VERSION {
            return Err(Error::InvalidInput(format!(
                "attribute record for `{}` has version {}, expected {FIXTURE_VERSION}",
                self.image_ref, self.version
            )));
        }
        for f in &self.faces {
            if f.object_index >= self.num_objects {
                return Err(Error::InvalidInput(format!(
                    "face row for object {} in `{}` which has {} objects",
                    f.object_index, self.image_ref, self.num_objects
                )));
            }
        }
        for g in &self.identities {
            if !(0.0..=1.0).contains(&g.score) {
                return Err(Error::InvalidInput(format!("identity score {} outside [0, 1]", g.score)));
            }
            if g.object_index.is_some_and(|i| i >= self.num_objects) {
                return Err(Error::InvalidInput(format!("identity guess for missing object in `{}`", self.image_ref)));
            }
        }
        Ok(())
    }
}

/// Something that can report face attributes and identity guesses for an image.
pub trait AttributeProvider {
    fn capability(&self) -> &str;
    fn fetch(&self, image_ref: &str) -> Result<Option<AttributeRecord>>;
}

/// Replays recorded provider output from a newline-delimited JSON file.
#[derive(Debug, Clone, Default)]
pub struct FixtureAttributeProvider {
    records: BTreeMap<String, AttributeRecord>,
}

impl FixtureAttributeProvider {
    pub fn from_records(records: Vec<AttributeRecord>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for r in records {
            r.validate()?;
            if map.contains_key(&r.image_ref) {
                return Err(Error::InvalidInput(format!("duplicate attribute record for `{}`", r.image_ref)));
            }
            map.insert(r.image_ref.clone(), r);
        }
        Ok(Self { records: map })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?);
        }
        Self::from_records(records)
    }
}

impl AttributeProvider for FixtureAttributeProvider {
    fn capability(&self) -> &str {
        "fixture"
    }

    fn fetch(&self, image_ref: &str) -> Result<Option<AttributeRecord>> {
        Ok(self.records.get(image_ref).cloned())
    }
}

pub fn render_face_prompt(mention: &str, attrs: &FaceAttributes) -> String {
    format!("{mention}, gender: {}, race: {}, age: {}", attrs.gender, attrs.race, attrs.age)
}

/// Keeps guesses scoring strictly above `threshold`, in input order.
pub fn filter_identities(guesses: &[IdentityGuess], threshold: f64) -> Vec<IdentityGuess> {
    guesses.iter().filter(|g| g.score > threshold).cloned().collect()
}

pub fn render_identity_prompt(mention: &str, kept: &[IdentityGuess]) -> String {
    if kept.is_empty() {
        return String::new();
    }
    let labels: Vec<&str> = kept.iter().map(|g| g.label.as_str()).collect();
    format!("{mention} resembles: {}", labels.join(", "))
}

/// Prompt sentences for one sample, ready to be encoded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrompts {
    pub sample_id: String,
    /// `(object_index, face prompt)`.
    pub faces: Vec<(usize, String)>,
    /// `(object_index or whole image, identity prompt)`.
    pub identities: Vec<(Option<usize>, String)>,
}

/// Renders every face prompt and one identity prompt per object slot, using
/// only guesses above `threshold`. Slots keep the order of their first guess.
pub fn build_prompts(sample_id: &str, mention: &str, record: &AttributeRecord, threshold: f64) -> SamplePrompts {
    let faces = record.faces.iter().map(|f| (f.object_index, render_face_prompt(mention, f))).collect();
    let kept = filter_identities(&record.identities, threshold);
    let mut slots: Vec<Option<usize>> = Vec::new();
    for g in &kept {
        if !slots.contains(&g.object_index) {
            slots.push(g.object_index);
        }
    }
    let identities = slots
        .into_iter()
        .map(|slot| {
            let group: Vec<IdentityGuess> = kept.iter().filter(|g| g.object_index == slot).cloned().collect();
            (slot, render_identity_prompt(mention, &group))
        })
        .collect();
    SamplePrompts { sample_id: sample_id.to_string(), faces, identities }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::tokenize;
    use proptest::prelude::*;

    fn guess(score: f64, label: &str) -> IdentityGuess {
        IdentityGuess { object_index: Some(0), label: label.into(), score }
    }

    fn trump() -> FaceAttributes {
        FaceAttributes { object_index: 0, gender: "male".into(), race: "white".into(), age: 50 }
    }

    #[test]
    fn face_prompt_template() {
        assert_eq!(render_face_prompt("Trump", &trump()), "Trump, gender: male, race: white, age: 50");
        assert_eq!(render_face_prompt("", &trump()), ", gender: male, race: white, age: 50");
    }

    #[test]
    fn face_prompt_keeps_attribute_words_through_tokenizer() {
        let toks = tokenize(&render_face_prompt("Trump", &trump()));
        for w in ["trump", "gender", "male", "race", "white", "age", "50"] {
            assert!(toks.content().iter().any(|t| t == w), "{w}");
        }
    }

    #[test]
    fn identity_filter_is_strict() {
        let kept = filter_identities(&[guess(0.756, "Barack Obama"), guess(0.31, "X")], IDENTITY_THRESHOLD);
        assert_eq!(kept, [guess(0.756, "Barack Obama")]);
        assert!(filter_identities(&[guess(0.5, "Edge")], IDENTITY_THRESHOLD).is_empty());
        assert!(filter_identities(&[], IDENTITY_THRESHOLD).is_empty());
    }

    #[test]
    fn identity_prompt_template() {
        assert_eq!(render_identity_prompt("Obama", &[]), "");
        assert_eq!(render_identity_prompt("Obama", &[guess(0.8, "Barack Obama")]), "Obama resembles: Barack Obama");
        assert_eq!(render_identity_prompt("X", &[guess(0.9, "B"), guess(0.7, "A")]), "X resembles: B, A");
    }

    #[test]
    fn prompts_group_identities_by_slot() {
        let record = AttributeRecord {
            version: FIXTURE_VERSION,
            image_ref: "img".into(),
            num_objects: 2,
            faces: vec![trump()],
            identities: vec![
                IdentityGuess { object_index: Some(1), label: "A".into(), score: 0.9 },
                IdentityGuess { object_index: None, label: "B".into(), score: 0.6 },
                IdentityGuess { object_index: Some(1), label: "C".into(), score: 0.7 },
                IdentityGuess { object_index: Some(0), label: "D".into(), score: 0.2 },
            ],
        };
        record.validate().unwrap();
        let p = build_prompts("s1", "Trump", &record, IDENTITY_THRESHOLD);
        assert_eq!(p.faces, [(0, "Trump, gender: male, race: white, age: 50".to_string())]);
        assert_eq!(p.identities, [(Some(1), "Trump resembles: A, C".to_string()), (None, "Trump resembles: B".to_string())]);
    }

    #[test]
    fn record_validation_catches_bad_indices() {
        let mut r = AttributeRecord { version: 1, image_ref: "i".into(), num_objects: 1, faces: vec![trump()], identities: vec![] };
        assert!(r.validate().is_ok());
        r.faces[0].object_index = 1;
        assert!(r.validate().is_err());
        r.faces.clear();
        r.identities.push(guess(1.5, "x"));
        assert!(r.validate().is_err());
    }

    proptest! {
        #[test]
        fn filter_is_an_idempotent_subsequence(scores in proptest::collection::vec(0.0f64..=1.0, 0..20)) {
            let gs: Vec<_> = scores.iter().enumerate().map(|(i, &s)| guess(s, &i.to_string())).collect();
            let kept = filter_identities(&gs, IDENTITY_THRESHOLD);
            let mut it = gs.iter();
            for k in &kept {
                prop_assert!(it.any(|g| g == k));
            }
            prop_assert_eq!(filter_identities(&kept, IDENTITY_THRESHOLD), kept);
        }

        #[test]
        fn face_prompt_is_injective(a in "[A-Za-z]{1,8}", b in "[A-Za-z]{1,8}", age1 in 0u32..120, age2 in 0u32..120) {
            let f1 = FaceAttributes { object_index: 0, gender: "female".into(), race: "asian".into(), age: age1 };
            let f2 = FaceAttributes { object_index: 0, gender: "female".into(), race: "asian".into(), age: age2 };
            let same = a == b && age1 == age2;
            prop_assert_eq!(render_face_prompt(&a, &f1) == render_face_prompt(&b, &f2), same);
        }
    }
}
