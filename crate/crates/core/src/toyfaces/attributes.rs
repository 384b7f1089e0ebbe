use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

macro_rules! attr_enum {
    ($(#[$m:meta])* $name:ident { $($var:ident => $s:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name { $($var),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$var),+];

            pub fn index(self) -> usize {
                self as usize
            }

            pub fn from_index(i: usize) -> Option<Self> {
                Self::ALL.get(i).copied()
            }

            pub fn name(self) -> &'static str {
                match self { $($name::$var => $s),+ }
            }
        }
    };
}

attr_enum!(Gender { Feminine => "feminine", Masculine => "masculine" });
attr_enum!(SkinTone { Light => "light", Tan => "tan", Dark => "dark" });
attr_enum!(HairColor { Black => "black", Blonde => "blonde", Red => "red", Gray => "gray" });
attr_enum!(HairLength { Bald => "bald", Short => "short", Long => "long" });
attr_enum!(Glasses { None => "none", Glasses => "glasses" });
attr_enum!(Smile { Neutral => "neutral", Smiling => "smiling" });
attr_enum!(Hat { None => "none", Hat => "hat" });

/// The eight attribute slots, in layer-ownership order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    GenderPresentation,
    SkinTone,
    HairColor,
    HairLength,
    Glasses,
    Smile,
    Hat,
    BackgroundHue,
}

impl Slot {
    pub const ALL: [Slot; 8] = [
        Slot::GenderPresentation,
        Slot::SkinTone,
        Slot::HairColor,
        Slot::HairLength,
        Slot::Glasses,
        Slot::Smile,
        Slot::Hat,
        Slot::BackgroundHue,
    ];

    /// Slots with a finite value set.
    pub const DISCRETE: [Slot; 7] = [
        Slot::GenderPresentation,
        Slot::SkinTone,
        Slot::HairColor,
        Slot::HairLength,
        Slot::Glasses,
        Slot::Smile,
        Slot::Hat,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Slot> {
        Slot::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Slot::GenderPresentation => "gender_presentation",
            Slot::SkinTone => "skin_tone",
            Slot::HairColor => "hair_color",
            Slot::HairLength => "hair_length",
            Slot::Glasses => "glasses",
            Slot::Smile => "smile",
            Slot::Hat => "hat",
            Slot::BackgroundHue => "background_hue",
        }
    }

    pub fn from_name(s: &str) -> Option<Slot> {
        Slot::ALL.iter().copied().find(|slot| slot.name() == s)
    }

    /// Number of values for discrete slots, `None` for the continuous hue.
    pub fn cardinality(self) -> Option<usize> {
        match self {
            Slot::GenderPresentation => Some(Gender::ALL.len()),
            Slot::SkinTone => Some(SkinTone::ALL.len()),
            Slot::HairColor => Some(HairColor::ALL.len()),
            Slot::HairLength => Some(HairLength::ALL.len()),
            Slot::Glasses => Some(Glasses::ALL.len()),
            Slot::Smile => Some(Smile::ALL.len()),
            Slot::Hat => Some(Hat::ALL.len()),
            Slot::BackgroundHue => None,
        }
    }

    pub fn value_name(self, v: usize) -> Option<&'static str> {
        match self {
            Slot::GenderPresentation => Gender::from_index(v).map(Gender::name),
            Slot::SkinTone => SkinTone::from_index(v).map(SkinTone::name),
            Slot::HairColor => HairColor::from_index(v).map(HairColor::name),
            Slot::HairLength => HairLength::from_index(v).map(HairLength::name),
            Slot::Glasses => Glasses::from_index(v).map(Glasses::name),
            Slot::Smile => Smile::from_index(v).map(Smile::name),
            Slot::Hat => Hat::from_index(v).map(Hat::name),
            Slot::BackgroundHue => None,
        }
    }
}

impl fmt::Display for Slot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub gender_presentation: Gender,
    pub skin_tone: SkinTone,
    pub hair_color: HairColor,
    pub hair_length: HairLength,
    pub glasses: Glasses,
    pub smile: Smile,
    pub hat: Hat,
    pub background_hue: f64,
}

impl AttributeVector {
    /// Uniform over every enum domain, hue uniform in [0, 1).
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        fn pick<T: Copy, R: Rng + ?Sized>(all: &[T], rng: &mut R) -> T {
            all[rng.gen_range(0..all.len())]
        }
        AttributeVector {
            gender_presentation: pick(Gender::ALL, rng),
            skin_tone: pick(SkinTone::ALL, rng),
            hair_color: pick(HairColor::ALL, rng),
            hair_length: pick(HairLength::ALL, rng),
            glasses: pick(Glasses::ALL, rng),
            smile: pick(Smile::ALL, rng),
            hat: pick(Hat::ALL, rng),
            background_hue: rng.gen::<f64>(),
        }
    }

    /// Value index of a discrete slot; `None` for the hue slot.
    pub fn discrete(&self, slot: Slot) -> Option<usize> {
        Some(match slot {
            Slot::GenderPresentation => self.gender_presentation.index(),
            Slot::SkinTone => self.skin_tone.index(),
            Slot::HairColor => self.hair_color.index(),
            Slot::HairLength => self.hair_length.index(),
            Slot::Glasses => self.glasses.index(),
            Slot::Smile => self.smile.index(),
            Slot::Hat => self.hat.index(),
            Slot::BackgroundHue => return None,
        })
    }

    /// Set a discrete slot by value index. Out-of-domain indices and the hue slot are rejected.
    pub fn set_discrete(&mut self, slot: Slot, v: usize) -> bool {
        match slot {
            Slot::GenderPresentation => Gender::from_index(v).map(|x| self.gender_presentation = x),
            Slot::SkinTone => SkinTone::from_index(v).map(|x| self.skin_tone = x),
            Slot::HairColor => HairColor::from_index(v).map(|x| self.hair_color = x),
            Slot::HairLength => HairLength::from_index(v).map(|x| self.hair_length = x),
            Slot::Glasses => Glasses::from_index(v).map(|x| self.glasses = x),
            Slot::Smile => Smile::from_index(v).map(|x| self.smile = x),
            Slot::Hat => Hat::from_index(v).map(|x| self.hat = x),
            Slot::BackgroundHue => None,
        }
        .is_some()
    }

    pub fn with(mut self, slot: Slot, v: usize) -> Self {
        assert!(self.set_discrete(slot, v), "invalid value {v} for {slot}");
        self
    }

    pub fn is_valid(&self) -> bool {
        (0.0..1.0).contains(&self.background_hue)
    }
}

/// Deterministic attribute draw for a seed.
pub fn sample_attributes(seed: u64) -> AttributeVector {
    AttributeVector::sample(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// A partial assignment of discrete slots, as recovered from text.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeQuery(BTreeMap<Slot, usize>);

impl AttributeQuery {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, slot: Slot, v: usize) {
        self.0.insert(slot, v);
    }

    /// Insert only if the slot is not already set.
    pub fn insert_first(&mut self, slot: Slot, v: usize) {
        self.0.entry(slot).or_insert(v);
    }

    pub fn get(&self, slot: Slot) -> Option<usize> {
        self.0.get(&slot).copied()
    }

    pub fn contains(&self, slot: Slot) -> bool {
        self.0.contains_key(&slot)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Slot, usize)> + '_ {
        self.0.iter().map(|(s, v)| (*s, *v))
    }

    pub fn slots(&self) -> impl Iterator<Item = Slot> + '_ {
        self.0.keys().copied()
    }

    /// True when every queried slot agrees with `attrs`.
    pub fn consistent_with(&self, attrs: &AttributeVector) -> bool {
        self.iter().all(|(s, v)| attrs.discrete(s) == Some(v))
    }
}

impl FromIterator<(Slot, usize)> for AttributeQuery {
    fn from_iter<I: IntoIterator<Item = (Slot, usize)>>(iter: I) -> Self {
        AttributeQuery(iter.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_order_and_names_round_trip() {
        for (i, s) in Slot::ALL.iter().enumerate() {
            assert_eq!(s.index(), i);
            assert_eq!(Slot::from_name(s.name()), Some(*s));
        }
        assert_eq!(Slot::BackgroundHue.cardinality(), None);
        assert_eq!(Slot::HairColor.cardinality(), Some(4));
    }

    #[test]
    fn set_discrete_rejects_out_of_domain() {
        let mut a = sample_attributes(1);
        assert!(!a.set_discrete(Slot::Glasses, 2));
        assert!(!a.set_discrete(Slot::BackgroundHue, 0));
        assert!(a.set_discrete(Slot::HairLength, 0));
        assert_eq!(a.hair_length, HairLength::Bald);
    }

    #[test]
    fn serde_uses_lowercase_values() {
        let a = sample_attributes(3).with(Slot::Glasses, 1).with(Slot::GenderPresentation, 0);
        let j = serde_json::to_value(a).unwrap();
        assert_eq!(j["glasses"], "glasses");
        assert_eq!(j["gender_presentation"], "feminine");
        let back: AttributeVector = serde_json::from_value(j).unwrap();
        assert_eq!(back, a);
    }
}
