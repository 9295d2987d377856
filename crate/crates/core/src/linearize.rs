//! Tagged linear form of triplet sets, e.g. `<d> Aspirin <i> inhibitor <t> COX-1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{dedup_triplets, DtiTriplet};
use crate::error::{Error, Result};

pub const DRUG_TAG: &str = "<d>";
pub const INTERACTION_TAG: &str = "<i>";
pub const TARGET_TAG: &str = "<t>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    Drug,
    Interaction,
    Target,
}

impl Field {
    pub fn tag(self) -> &'static str {
        match self {
            Field::Drug => DRUG_TAG,
            Field::Interaction => INTERACTION_TAG,
            Field::Target => TARGET_TAG,
        }
    }

    fn from_tag(tok: &str) -> Option<Field> {
        match tok {
            DRUG_TAG => Some(Field::Drug),
            INTERACTION_TAG => Some(Field::Interaction),
            TARGET_TAG => Some(Field::Target),
            _ => None,
        }
    }

    fn get(self, t: &DtiTriplet) -> &str {
        match self {
            Field::Drug => &t.drug,
            Field::Interaction => &t.interaction,
            Field::Target => &t.target,
        }
    }
}

/// Element order of a linearized triplet. Letters stand for drug,
/// interaction and target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum TripletOrder {
    #[default]
    DIT,
    DTI,
    IDT,
    ITD,
    TID,
    TDI,
}

impl TripletOrder {
    pub const ALL: [TripletOrder; 6] = [
        TripletOrder::DIT,
        TripletOrder::DTI,
        TripletOrder::IDT,
        TripletOrder::ITD,
        TripletOrder::TID,
        TripletOrder::TDI,
    ];

    pub fn fields(self) -> [Field; 3] {
        use Field::*;
        match self {
            TripletOrder::DIT => [Drug, Interaction, Target],
            TripletOrder::DTI => [Drug, Target, Interaction],
            TripletOrder::IDT => [Interaction, Drug, Target],
            TripletOrder::ITD => [Interaction, Target, Drug],
            TripletOrder::TID => [Target, Interaction, Drug],
            TripletOrder::TDI => [Target, Drug, Interaction],
        }
    }
}

impl fmt::Display for TripletOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl FromStr for TripletOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TripletOrder::ALL
            .into_iter()
            .find(|o| o.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown triplet order `{s}`")))
    }
}

pub fn is_tag(tok: &str) -> bool {
    Field::from_tag(tok).is_some()
}

/// Emits each triplet's three tags in `order`, each followed by its field,
/// concatenating triplets in list order.
pub fn serialize(triplets: &[DtiTriplet], order: TripletOrder) -> Result<String> {
    let mut parts = Vec::with_capacity(triplets.len() * 6);
    for t in triplets {
        t.validate()?;
        for field in order.fields() {
            parts.push(field.tag());
            parts.push(field.get(t).trim());
        }
    }
    Ok(parts.join(" "))
}

/// Serializes a gold target: triplets deduplicated and sorted by their
/// normalized (drug, target, interaction) key.
pub fn serialize_gold(triplets: &[DtiTriplet], order: TripletOrder) -> Result<String> {
    let mut sorted = dedup_triplets(triplets.iter().cloned());
    sorted.sort();
    serialize(&sorted, order)
}

/// Recovers triplets from arbitrary text. Groups that are incomplete, out of
/// order, or have an empty field are skipped; never fails.
pub fn parse(text: &str, order: TripletOrder) -> Vec<DtiTriplet> {
    let toks: Vec<&str> = text.split_whitespace().collect();
    let fields = order.fields();
    let mut found = Vec::new();
    let mut i = 0;
    while i < toks.len() {
        if Field::from_tag(toks[i]) != Some(fields[0]) {
            i += 1;
            continue;
        }
        match parse_group(&toks, i, fields) {
            Some((triplet, next)) => {
                found.push(triplet);
                i = next;
            }
            None => i += 1,
        }
    }
    dedup_triplets(found)
}

fn parse_group(toks: &[&str], start: usize, fields: [Field; 3]) -> Option<(DtiTriplet, usize)> {
    let mut values: [String; 3] = Default::default();
    let mut j = start;
    for (slot, field) in fields.iter().enumerate() {
        if toks.get(j).and_then(|t| Field::from_tag(t)) != Some(*field) {
            return None;
        }
        j += 1;
        let begin = j;
        while j < toks.len() && !is_tag(toks[j]) {
            j += 1;
        }
        if j == begin {
            return None;
        }
        values[slot] = toks[begin..j].join(" ");
    }
    let mut t = DtiTriplet::new("", "", "");
    for (field, value) in fields.iter().zip(values) {
        match field {
            Field::Drug => t.drug = value,
            Field::Interaction => t.interaction = value,
            Field::Target => t.target = value,
        }
    }
    Some((t, j))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn asp() -> DtiTriplet {
        DtiTriplet::new("Aspirin", "COX-1", "inhibit")
    }

    #[test]
    fn serialize_examples() {
        assert_eq!(serialize(&[asp()], TripletOrder::DIT).unwrap(), "<d> Aspirin <i> inhibit <t> COX-1");
        assert_eq!(serialize(&[asp()], TripletOrder::TDI).unwrap(), "<t> COX-1 <d> Aspirin <i> inhibit");
        let two = serialize(&[asp(), DtiTriplet::new("B", "C", "D")], TripletOrder::DIT).unwrap();
        assert_eq!(two.split(' ').filter(|t| is_tag(t)).count(), 6);
        assert!(two.ends_with("<d> B <i> D <t> C"));
    }

    #[test]
    fn serialize_rejects_empty_field() {
        assert!(matches!(
            serialize(&[DtiTriplet::new("a", " ", "c")], TripletOrder::DIT),
            Err(Error::EmptyField("target"))
        ));
    }

    #[test]
    fn parse_examples() {
        assert!(parse("<d> Aspirin <i> inhibit", TripletOrder::DIT).is_empty());
        assert_eq!(parse("<d> A <i> x <t> B <d> A <i> x <t> B", TripletOrder::DIT).len(), 1);
        let got = parse("junk <t> <d> A B <i> x <t> C D </s>", TripletOrder::DIT);
        assert_eq!(got, vec![DtiTriplet::new("A B", "C D </s>", "x")]);
        // group with an empty middle field is skipped, the next one is found
        let got = parse("<d> A <i> <t> B <d> E <i> y <t> F", TripletOrder::DIT);
        assert_eq!(got, vec![DtiTriplet::new("E", "F", "y")]);
    }

    #[test]
    fn order_parsing() {
        for o in TripletOrder::ALL {
            assert_eq!(o.to_string().parse::<TripletOrder>().unwrap(), o);
        }
        assert!("XYZ".parse::<TripletOrder>().is_err());
        assert_eq!(TripletOrder::default(), TripletOrder::DIT);
    }

    fn word() -> impl Strategy<Value = String> {
        "[A-Za-z0-9-]{1,8}"
    }

    fn field_text() -> impl Strategy<Value = String> {
        proptest::collection::vec(word(), 1..4).prop_map(|w| w.join(" "))
    }

    fn triplets() -> impl Strategy<Value = Vec<DtiTriplet>> {
        proptest::collection::vec(
            (field_text(), field_text(), field_text()).prop_map(|(d, t, i)| DtiTriplet::new(d, t, i)),
            0..6,
        )
    }

    proptest! {
        #[test]
        fn round_trip_all_orders(ts in triplets()) {
            for o in TripletOrder::ALL {
                let s = serialize(&ts, o).unwrap();
                prop_assert_eq!(parse(&s, o), dedup_triplets(ts.clone()));
                let field_tokens: usize = ts.iter().map(|t| {
                    t.drug.split_whitespace().count() + t.target.split_whitespace().count()
                        + t.interaction.split_whitespace().count()
                }).sum();
                prop_assert_eq!(s.split_whitespace().count(), 3 * ts.len() + field_tokens);
            }
        }

        #[test]
        fn parse_never_yields_empty_fields(s in "(<d>|<i>|<t>| |[a-z]{1,3}){0,30}") {
            for o in TripletOrder::ALL {
                for t in parse(&s, o) {
                    prop_assert!(t.validate().is_ok());
                }
            }
        }
    }
}
