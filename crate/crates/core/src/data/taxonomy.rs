//! The fixed 23-class intent label space.
//!
//! Class ids are zero-based (`0..23`) and follow the published numbering
//! minus one. Groups and the benign/malicious split are compiled in; a
//! configurable taxonomy would silently break the binary collapse.

use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 23;
pub const NUM_GROUPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Deception,
    Emotion,
    Information,
    Persuasion,
    Reputation,
}

impl Group {
    pub const ALL: [Group; NUM_GROUPS] = [
        Group::Deception,
        Group::Emotion,
        Group::Information,
        Group::Persuasion,
        Group::Reputation,
    ];

    /// One-based group number (I–V).
    pub fn number(self) -> usize {
        self as usize + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Deception => "Deception",
            Group::Emotion => "Emotional engagement",
            Group::Information => "Information delivery",
            Group::Persuasion => "Persuasion focused",
            Group::Reputation => "Reputation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Benign,
    Malicious,
}

impl Polarity {
    /// Label index in the collapsed two-class problem.
    pub fn index(self) -> usize {
        match self {
            Polarity::Benign => 0,
            Polarity::Malicious => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Polarity::Benign => "benign",
            Polarity::Malicious => "malicious",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntentClass {
    pub name: &'static str,
    pub slug: &'static str,
    pub group: Group,
    pub malicious: bool,
}

const fn class(name: &'static str, slug: &'static str, group: Group, malicious: bool) -> IntentClass {
    IntentClass {
        name,
        slug,
        group,
        malicious,
    }
}

use Group::*;

pub static CLASSES: [IntentClass; NUM_CLASSES] = [
    class("Fake expertise", "fake_expertise", Deception, true),
    class("Financial fraud", "financial_fraud", Deception, true),
    class("Social engineering", "social_engineering", Deception, true),
    class("Comedy", "comedy", Emotion, false),
    class("Drama / storytelling", "drama_storytelling", Emotion, false),
    class("Fear-mongering", "fear_mongering", Emotion, true),
    class("Outrage generation", "outrage_generation", Emotion, true),
    class("Viral sensationalism", "viral_sensationalism", Emotion, true),
    class("Academic or scientific", "academic_scientific", Information, false),
    class("Guidance-or-Tutorial", "guidance_tutorial", Information, false),
    class("Conspiracy theories", "conspiracy_theories", Information, true),
    class("Pseudoscience", "pseudoscience", Information, true),
    class("News or current event", "news_current_event", Information, false),
    class("Direct marketing", "direct_marketing", Persuasion, false),
    class("Indirect marketing", "indirect_marketing", Persuasion, false),
    class("Influencer marketing", "influencer_marketing", Persuasion, true),
    class("Political propaganda", "political_propaganda", Persuasion, true),
    class("Religious proselytizing", "religious_proselytizing", Persuasion, true),
    class("Social movement advocacy", "social_movement_advocacy", Persuasion, false),
    class("Character assassination", "character_assassination", Reputation, true),
    class("Whistle-blowing", "whistle_blowing", Reputation, false),
    class("Life documentation", "life_documentation", Reputation, false),
    class("Personal-Promotion", "personal_promotion", Reputation, false),
];

/// Zero-based index into [`CLASSES`]. Serialised as the canonical class name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassId(u8);

impl ClassId {
    pub fn new(id: usize) -> Result<Self> {
        if id < NUM_CLASSES {
            Ok(Self(id as u8))
        } else {
            Err(Error::Label {
                index: 0,
                label: id,
                classes: NUM_CLASSES,
            })
        }
    }

    pub fn all() -> impl Iterator<Item = ClassId> {
        (0..NUM_CLASSES as u8).map(ClassId)
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn info(self) -> &'static IntentClass {
        &CLASSES[self.index()]
    }

    pub fn name(self) -> &'static str {
        self.info().name
    }

    pub fn group(self) -> Group {
        self.info().group
    }

    pub fn polarity(self) -> Polarity {
        if self.info().malicious {
            Polarity::Malicious
        } else {
            Polarity::Benign
        }
    }

    /// Accepts the canonical name or slug, case-insensitively.
    pub fn from_name(name: &str) -> Result<Self> {
        let needle = name.trim();
        CLASSES
            .iter()
            .position(|c| c.name.eq_ignore_ascii_case(needle) || c.slug.eq_ignore_ascii_case(needle))
            .map(|i| ClassId(i as u8))
            .ok_or_else(|| Error::UnknownClass(name.to_string()))
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for ClassId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for ClassId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        ClassId::from_name(&s).map_err(serde::de::Error::custom)
    }
}

/// Benign/malicious label of a zero-based class index.
pub fn binary_collapse(class_id: usize) -> Result<Polarity> {
    Ok(ClassId::new(class_id)?.polarity())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn split_is_eleven_twelve() {
        let malicious = CLASSES.iter().filter(|c| c.malicious).count();
        assert_eq!(malicious, 12);
        assert_eq!(NUM_CLASSES - malicious, 11);
    }

    #[test]
    fn names_and_slugs_unique() {
        let names: HashSet<_> = CLASSES.iter().map(|c| c.name.to_lowercase()).collect();
        let slugs: HashSet<_> = CLASSES.iter().map(|c| c.slug).collect();
        assert_eq!(names.len(), NUM_CLASSES);
        assert_eq!(slugs.len(), NUM_CLASSES);
    }

    #[test]
    fn group_membership() {
        let members = |g: Group| -> Vec<usize> {
            ClassId::all().filter(|c| c.group() == g).map(|c| c.index() + 1).collect()
        };
        assert_eq!(members(Group::Deception), vec![1, 2, 3]);
        assert_eq!(members(Group::Emotion), vec![4, 5, 6, 7, 8]);
        assert_eq!(members(Group::Information), vec![9, 10, 11, 12, 13]);
        assert_eq!(members(Group::Persuasion), vec![14, 15, 16, 17, 18, 19]);
        assert_eq!(members(Group::Reputation), vec![20, 21, 22, 23]);
    }

    #[test]
    fn benign_list_matches_published_numbers() {
        let benign: Vec<usize> = ClassId::all()
            .filter(|c| c.polarity() == Polarity::Benign)
            .map(|c| c.index() + 1)
            .collect();
        assert_eq!(benign, vec![4, 5, 9, 10, 13, 14, 15, 19, 21, 22, 23]);
    }

    #[test]
    fn collapse_examples() {
        let comedy = ClassId::from_name("Comedy").unwrap();
        assert_eq!(binary_collapse(comedy.index()).unwrap(), Polarity::Benign);
        let fraud = ClassId::from_name("financial_fraud").unwrap();
        assert_eq!(binary_collapse(fraud.index()).unwrap(), Polarity::Malicious);
        assert!(binary_collapse(23).is_err());
    }

    #[test]
    fn serde_uses_names() {
        let id = ClassId::from_name("Drama / storytelling").unwrap();
        let json = serde_json::to_string(&id).unwrap();
        assert_eq!(json, "\"Drama / storytelling\"");
        let back: ClassId = serde_json::from_str("\"drama_storytelling\"").unwrap();
        assert_eq!(back, id);
        assert!(serde_json::from_str::<ClassId>("\"Cooking\"").is_err());
    }
}
