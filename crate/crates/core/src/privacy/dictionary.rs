use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::corpus::TEMPLATES;
use super::PiiClass;
use crate::error::{Error, Result};
use crate::seed;

/// Canonical PII values per class. Persisted as a JSON map
/// class → list of strings.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PiiDictionary {
    pub entries: BTreeMap<PiiClass, Vec<String>>,
}

impl PiiDictionary {
    pub fn new(entries: BTreeMap<PiiClass, Vec<String>>) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (class, values) in &entries {
            for v in values {
                if v.is_empty() || !v.bytes().all(|b| (b' '..=b'~').contains(&b)) {
                    return Err(Error::invalid(format!(
                        "{} value {v:?} is not printable ASCII",
                        class.as_str()
                    )));
                }
                if let Some(other) = seen.insert(v.clone(), *class) {
                    return Err(Error::invalid(format!(
                        "value {v:?} appears under both {} and {}",
                        other.as_str(),
                        class.as_str()
                    )));
                }
            }
        }
        Ok(PiiDictionary { entries })
    }

    pub fn values(&self, class: PiiClass) -> &[String] {
        self.entries.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Smallest per-class entry count.
    pub fn min_class_size(&self) -> usize {
        PiiClass::ALL
            .iter()
            .map(|&c| self.values(c).len())
            .min()
            .unwrap_or(0)
    }

    /// Splits off the first `n` values of every class as a public dictionary;
    /// the remainder is private.
    pub fn split_public(&self, n: usize) -> Result<(PiiDictionary, PiiDictionary)> {
        let mut public = BTreeMap::new();
        let mut private = BTreeMap::new();
        for (&class, values) in &self.entries {
            if values.len() <= n {
                return Err(Error::invalid(format!(
                    "cannot reserve {n} public {} values out of {}",
                    class.as_str(),
                    values.len()
                )));
            }
            public.insert(class, values[..n].to_vec());
            private.insert(class, values[n..].to_vec());
        }
        Ok((
            PiiDictionary { entries: public },
            PiiDictionary { entries: private },
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: PiiDictionary = serde_json::from_str(s)?;
        PiiDictionary::new(raw.entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

const ONSETS: [&str; 24] = [
    "b", "c", "d", "f", "g", "h", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr",
    "st", "gr", "cl", "pl", "dr", "fl",
];
const VOWELS: [&str; 8] = ["a", "e", "i", "o", "u", "ai", "ea", "ou"];
const CODAS: [&str; 7] = ["", "n", "r", "l", "s", "m", "x"];

fn pseudo_word<R: Rng>(rng: &mut R) -> String {
    let syllables = rng.gen_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS.choose(rng).unwrap());
        w.push_str(VOWELS.choose(rng).unwrap());
    }
    w.push_str(CODAS.choose(rng).unwrap());
    let mut c = w.chars();
    let first = c.next().unwrap().to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

/// Lower-cased words used by the sentence templates; generated names avoid
/// them so template text can never contain a dictionary value.
fn template_words() -> BTreeSet<String> {
    TEMPLATES
        .iter()
        .flat_map(|t| t.pattern.split(|c: char| !c.is_ascii_alphabetic()))
        .filter(|w| !w.is_empty())
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

/// A dictionary with `per_class` distinct values in every class. Names are
/// built from generated pseudo-words, partitioned so no word is shared
/// between classes.
pub fn generate_dictionary(per_class: usize, seed: u64) -> Result<PiiDictionary> {
    if per_class == 0 {
        return Err(Error::invalid(
            "dictionary needs at least one value per class",
        ));
    }
    let mut rng = seed::rng(seed);
    let stop = template_words();
    let first_names = (per_class as f64).sqrt().ceil() as usize + 2;
    let needed = 2 * first_names + 3 * per_class;
    let mut words = BTreeSet::new();
    let mut ordered = Vec::with_capacity(needed);
    let mut attempts = 0;
    while ordered.len() < needed {
        attempts += 1;
        if attempts > needed * 200 {
            return Err(Error::invalid(format!(
                "cannot generate {needed} distinct names"
            )));
        }
        let w = pseudo_word(&mut rng);
        if w.len() >= 4 && !stop.contains(&w.to_ascii_lowercase()) && words.insert(w.clone()) {
            ordered.push(w);
        }
    }
    let mut it = ordered.into_iter();
    let mut take = |n: usize| -> Vec<String> { it.by_ref().take(n).collect() };
    let firsts = take(first_names);
    let lasts = take(first_names);
    let loc_roots = take(per_class);
    let org_roots = take(per_class);
    let product_roots = take(per_class);

    let mut people: Vec<String> = firsts
        .iter()
        .flat_map(|f| lasts.iter().map(move |l| format!("{f} {l}")))
        .collect();
    people.shuffle(&mut rng);
    people.truncate(per_class);

    const LOC_FORMS: [&str; 5] = ["Port {}", "{} Falls", "Lake {}", "{}ford", "{} Hill"];
    const ORG_FORMS: [&str; 5] = ["{} Ltd", "{} Group", "{} Labs", "{} Partners", "{} Bank"];
    let form = |forms: &[&str], root: &str, rng: &mut rand_chacha::ChaCha8Rng| {
        forms.choose(rng).unwrap().replace("{}", root)
    };
    let locs: Vec<String> = loc_roots
        .iter()
        .map(|r| form(&LOC_FORMS, r, &mut rng))
        .collect();
    let orgs: Vec<String> = org_roots
        .iter()
        .map(|r| form(&ORG_FORMS, r, &mut rng))
        .collect();
    let products: Vec<String> = product_roots
        .iter()
        .map(|r| {
            format!(
                "{r} {}{}",
                ["X", "S", "Pro "][rng.gen_range(0..3)],
                rng.gen_range(2..99) * 10
            )
        })
        .collect();

    let mut dates = BTreeSet::new();
    while dates.len() < per_class {
        dates.insert(format!(
            "{:04}-{:02}-{:02}",
            rng.gen_range(1990..2024),
            rng.gen_range(1..13),
            rng.gen_range(1..29)
        ));
    }
    let mut dates: Vec<String> = dates.into_iter().collect();
    dates.shuffle(&mut rng);

    PiiDictionary::new(BTreeMap::from([
        (PiiClass::Person, people),
        (PiiClass::Loc, locs),
        (PiiClass::Org, orgs),
        (PiiClass::Product, products),
        (PiiClass::Date, dates),
    ]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classes_are_full_and_disjoint() {
        let d = generate_dictionary(600, 1).unwrap();
        for c in PiiClass::ALL {
            let v = d.values(c);
            assert_eq!(v.len(), 600, "{c:?}");
            assert_eq!(v.iter().collect::<BTreeSet<_>>().len(), 600);
        }
        assert_eq!(d, generate_dictionary(600, 1).unwrap());
        assert_ne!(d, generate_dictionary(600, 2).unwrap());
    }

    #[test]
    fn json_round_trip_and_cross_class_duplicates_rejected() {
        let d = generate_dictionary(20, 3).unwrap();
        assert_eq!(PiiDictionary::from_json(&d.to_json().unwrap()).unwrap(), d);
        let dup = BTreeMap::from([
            (PiiClass::Person, vec!["Ana".to_string()]),
            (PiiClass::Org, vec!["Ana".to_string()]),
        ]);
        assert!(PiiDictionary::new(dup).is_err());
    }
}
