//! Template-generated claims with paired evidence and culprit annotations.
//!
//! Every claim instantiates a template over typed vocabularies. The first
//! evidence sentence states the true fact; a second sentence about unrelated
//! entities acts as a distractor.
//!
//! - SUP: the claim is the true fact.
//! - REF: one or two slots of the claim are swapped for another value of the
//!   same type; those slot indices are the gold culprits.
//! - NEI: the claim is the true fact but the evidence replaces one or two
//!   slots with a vague placeholder.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::InputRecord;
use crate::decompose::{ClaimPhrase, PhraseKind};
use crate::error::{Error, Result};
use crate::logic::Veracity;
use crate::premise::EvidenceSentence;
use crate::text::char_len;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Person,
    Org,
    City,
    Year,
    Product,
    /// Verb drawn from the template's own list.
    Verb(&'static [&'static str]),
}

impl Slot {
    fn kind(self) -> PhraseKind {
        match self {
            Slot::Person | Slot::Org | Slot::City => PhraseKind::Ne,
            Slot::Year | Slot::Product => PhraseKind::Np,
            Slot::Verb(_) => PhraseKind::Verb,
        }
    }

    fn vocab(self) -> Vec<String> {
        match self {
            Slot::Person => FIRST
                .iter()
                .flat_map(|f| LAST.iter().map(move |l| format!("{f} {l}")))
                .collect(),
            Slot::Org => ORGS.iter().map(|s| s.to_string()).collect(),
            Slot::City => CITIES.iter().map(|s| s.to_string()).collect(),
            Slot::Year => (1950..2021).map(|y| y.to_string()).collect(),
            Slot::Product => PRODUCTS.iter().map(|s| s.to_string()).collect(),
            Slot::Verb(v) => v.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn placeholder(self) -> &'static str {
        match self {
            Slot::Person => "A local resident",
            Slot::Org => "a small company",
            Slot::City => "an unnamed city",
            Slot::Year => "an unknown year",
            Slot::Product => "a new product",
            Slot::Verb(_) => "was connected to",
        }
    }
}

/// Literal text and slots, alternating: `parts[0] slot[0] parts[1] …`.
struct Template {
    parts: &'static [&'static str],
    slots: &'static [Slot],
}

const BUSINESS_VERBS: &[&str] = &["founded", "joined", "acquired", "led", "sponsored", "managed"];
const LIFE_VERBS: &[&str] = &["was born", "died", "studied", "retired", "married"];
const PRODUCT_VERBS: &[&str] = &["released", "announced", "discontinued", "recalled", "licensed"];

const TEMPLATES: &[Template] = &[
    Template {
        parts: &["", " ", " ", " in ", "."],
        slots: &[Slot::Person, Slot::Verb(BUSINESS_VERBS), Slot::Org, Slot::City],
    },
    Template {
        parts: &["", " ", " in ", " in ", "."],
        slots: &[Slot::Person, Slot::Verb(LIFE_VERBS), Slot::City, Slot::Year],
    },
    Template {
        parts: &["", " ", " ", " in ", "."],
        slots: &[Slot::Org, Slot::Verb(PRODUCT_VERBS), Slot::Product, Slot::Year],
    },
];

const FIRST: &[&str] = &[
    "Alice", "Bruno", "Chen", "Dalia", "Emil", "Farah", "Goran", "Hana", "Ivan", "Jolene", "Kenji", "Lena",
];
const LAST: &[&str] = &[
    "Moreau", "Novak", "Okafor", "Petrov", "Quinn", "Rossi", "Sato", "Tanaka", "Urban", "Varga", "Weber", "Yilmaz",
];
const ORGS: &[&str] = &[
    "Acme Corp", "Borealis", "Cobalt Labs", "Dynamo Group", "Everline", "Fjord Systems", "Granite Works",
    "Helix Media", "Ionic Foods", "Juniper Bank", "Kestrel Air", "Lumen Studios", "Meridian Steel",
    "Nimbus Cloud", "Orchid Pharma", "Pinnacle Motors",
];
const CITIES: &[&str] = &[
    "Oslo", "Lisbon", "Nairobi", "Osaka", "Quito", "Tallinn", "Dakar", "Perth", "Krakow", "Lyon", "Bergen",
    "Porto", "Seville", "Hanoi", "Cusco", "Tunis", "Riga", "Accra", "Busan", "Male",
];
const PRODUCTS: &[&str] = &[
    "the Falcon phone", "a solar kettle", "the Orbit tablet", "a folding bike", "the Nova camera",
    "a smart lock", "the Atlas laptop", "a water filter", "the Pulse watch", "an electric scooter",
    "the Echo speaker", "a garden drone",
];

const HOBBIES: &[&str] = &["painting", "chess", "sailing", "gardening", "jazz", "pottery", "climbing"];
const FEATURES: &[&str] = &["its bridges", "its markets", "its museums", "its beaches", "its festivals"];

fn render(t: &Template, values: &[String]) -> (String, Vec<ClaimPhrase>) {
    let mut text = String::new();
    let mut phrases = Vec::new();
    for (i, slot) in t.slots.iter().enumerate() {
        text.push_str(t.parts[i]);
        let start = char_len(&text);
        text.push_str(&values[i]);
        phrases.push(ClaimPhrase::new(values[i].clone(), start, char_len(&text), slot.kind()));
    }
    text.push_str(t.parts[t.slots.len()]);
    (text, phrases)
}

fn pick_other(vocab: &[String], avoid: &[&str], rng: &mut impl Rng) -> String {
    let open: Vec<&String> = vocab.iter().filter(|v| !avoid.contains(&v.as_str())).collect();
    open[rng.gen_range(0..open.len())].clone()
}

/// Slot indices to alter: one or two, uniformly.
fn altered_slots(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let count = rng.gen_range(1..=2usize);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let mut out = idx[..count].to_vec();
    out.sort_unstable();
    out
}

fn distractor(values: &[&str], rng: &mut impl Rng) -> (String, String) {
    if rng.gen_bool(0.5) {
        let person = pick_other(&Slot::Person.vocab(), values, rng);
        let hobby = HOBBIES[rng.gen_range(0..HOBBIES.len())];
        (person.clone(), format!("{person} enjoys {hobby}."))
    } else {
        let city = pick_other(&Slot::City.vocab(), values, rng);
        let feature = FEATURES[rng.gen_range(0..FEATURES.len())];
        (city.clone(), format!("{city} is known for {feature}."))
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn generate_one(id: String, label: Veracity, rng: &mut impl Rng) -> InputRecord {
    let t = &TEMPLATES[rng.gen_range(0..TEMPLATES.len())];
    let truth: Vec<String> = t
        .slots
        .iter()
        .map(|s| {
            let v = s.vocab();
            v[rng.gen_range(0..v.len())].clone()
        })
        .collect();
    let mut claim_values = truth.clone();
    let mut evidence_values = truth.clone();
    let mut culprits = None;
    match label {
        Veracity::Sup => {}
        Veracity::Ref => {
            let alter = altered_slots(t.slots.len(), rng);
            for &i in &alter {
                claim_values[i] = pick_other(&t.slots[i].vocab(), &[truth[i].as_str()], rng);
            }
            culprits = Some(alter);
        }
        Veracity::Nei => {
            for i in altered_slots(t.slots.len(), rng) {
                let p = t.slots[i].placeholder();
                evidence_values[i] = if i == 0 { capitalize(p) } else { p.to_string() };
            }
        }
    }
    let (claim, phrases) = render(t, &claim_values);
    let (fact, _) = render(t, &evidence_values);
    let avoid: Vec<&str> = truth.iter().chain(&claim_values).map(String::as_str).collect();
    let (other_page, other) = distractor(&avoid, rng);
    let page = truth[0].replace(' ', "_");
    let mut evidence_texts = vec![
        EvidenceSentence {
            page_id: page.clone(),
            line_no: 0,
            text: fact,
        },
        EvidenceSentence {
            page_id: other_page.replace(' ', "_"),
            line_no: 0,
            text: other,
        },
    ];
    if rng.gen_bool(0.5) {
        evidence_texts.swap(0, 1);
    }
    let gold_evidence = if label == Veracity::Nei {
        Vec::new()
    } else {
        vec![vec![(page, 0)]]
    };
    InputRecord {
        id,
        claim,
        label,
        evidence_texts,
        gold_evidence,
        phrases: Some(phrases),
        culprits,
    }
}

/// `3 · n_per_class` records in a seeded shuffled order.
pub fn generate_synthetic(n_per_class: usize, seed: u64) -> Result<Vec<InputRecord>> {
    if n_per_class == 0 {
        return Err(Error::validation("n_per_class must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<Veracity> = Veracity::ALL
        .iter()
        .flat_map(|l| std::iter::repeat_n(*l, n_per_class))
        .collect();
    labels.shuffle(&mut rng);
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| generate_one(format!("syn-{seed}-{i:05}"), l, &mut rng))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decompose::Claim;

    fn contains_word(hay: &str, needle: &str) -> bool {
        hay.match_indices(needle).any(|(i, _)| {
            let before = hay[..i].chars().next_back().is_none_or(|c| !c.is_alphanumeric());
            let after = hay[i + needle.len()..].chars().next().is_none_or(|c| !c.is_alphanumeric());
            before && after
        })
    }

    #[test]
    fn generation_is_balanced_and_reproducible() {
        let a = generate_synthetic(100, 7).unwrap();
        assert_eq!(a.len(), 300);
        assert_eq!(a, generate_synthetic(100, 7).unwrap());
        let counts = crate::dataset::ClassCounts::of(a.iter().map(|r| &r.label));
        assert_eq!((counts.sup, counts.refute, counts.nei), (100, 100, 100));
        assert!(generate_synthetic(0, 7).is_err());
    }

    #[test]
    fn construction_contracts() {
        for r in generate_synthetic(60, 3).unwrap() {
            let phrases = r.phrases.clone().unwrap();
            Claim::new(r.id.clone(), r.claim.clone(), phrases.clone(), 8).unwrap();
            let ev = r.evidence().concatenated();
            match r.label {
                Veracity::Sup => {
                    assert!(phrases.iter().all(|p| contains_word(&ev, &p.text)), "{r:?}");
                    assert!(r.culprits.is_none());
                }
                Veracity::Ref => {
                    let c = r.culprits.clone().unwrap();
                    assert!((1..=2).contains(&c.len()));
                    assert!(c.iter().all(|&i| !contains_word(&ev, &phrases[i].text)), "{r:?}");
                }
                Veracity::Nei => {
                    assert!(r.gold_evidence.is_empty());
                    assert!(phrases.iter().any(|p| !contains_word(&ev, &p.text)), "{r:?}");
                }
            }
            r.validate().unwrap();
        }
    }
}
