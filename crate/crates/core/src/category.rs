//! Object, verb and HOI label universes, and the zero-shot splits over them.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySpace {
    objects: Vec<String>,
    verbs: Vec<String>,
    categories: Vec<(usize, usize)>,
    human: usize,
}

impl CategorySpace {
    pub fn new(
        objects: Vec<String>,
        verbs: Vec<String>,
        categories: Vec<(usize, usize)>,
        human: usize,
    ) -> Result<Self> {
        for (what, names) in [("object", &objects), ("verb", &verbs)] {
            let unique: BTreeSet<_> = names.iter().collect();
            if unique.len() != names.len() {
                return Err(Error::invalid(format!("duplicate {what} name")));
            }
            if names.is_empty() {
                return Err(Error::invalid(format!("no {what} classes")));
            }
        }
        if human >= objects.len() {
            return Err(Error::invalid(format!("human index {human} out of range")));
        }
        let unique: BTreeSet<_> = categories.iter().collect();
        if unique.len() != categories.len() {
            return Err(Error::invalid("duplicate HOI category"));
        }
        if let Some(&(o, v)) = categories
            .iter()
            .find(|(o, v)| *o >= objects.len() || *v >= verbs.len())
        {
            return Err(Error::invalid(format!("category ({o}, {v}) out of range")));
        }
        Ok(Self {
            objects,
            verbs,
            categories,
            human,
        })
    }

    /// Every (object, verb) combination, object-major.
    pub fn cartesian(objects: Vec<String>, verbs: Vec<String>, human: usize) -> Result<Self> {
        let cats = (0..objects.len())
            .flat_map(|o| (0..verbs.len()).map(move |v| (o, v)))
            .collect();
        Self::new(objects, verbs, cats, human)
    }

    /// `n_objects` classes with class 0 as the human, `n_verbs` verbs.
    pub fn toy(n_objects: usize, n_verbs: usize) -> Result<Self> {
        let objects = std::iter::once("human".to_string())
            .chain((1..n_objects).map(|i| format!("object{i}")))
            .collect();
        let verbs = (0..n_verbs).map(|i| format!("verb{i}")).collect();
        Self::cartesian(objects, verbs, 0)
    }

    pub fn objects(&self) -> &[String] {
        &self.objects
    }

    pub fn verbs(&self) -> &[String] {
        &self.verbs
    }

    pub fn categories(&self) -> &[(usize, usize)] {
        &self.categories
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn human(&self) -> usize {
        self.human
    }

    pub fn category(&self, object: usize, verb: usize) -> Option<usize> {
        self.categories.iter().position(|&c| c == (object, verb))
    }

    pub fn category_name(&self, c: usize) -> String {
        let (o, v) = self.categories[c];
        format!("{} {}", self.verbs[v], self.objects[o])
    }

    pub fn category_by_name(&self, name: &str) -> Option<usize> {
        (0..self.categories.len()).find(|&c| self.category_name(c) == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Setting {
    /// Unseen composition sampled at random.
    Uc,
    /// Rare-first: least frequent categories unseen.
    RfUc,
    /// Non-rare-first: most frequent categories unseen.
    NfUc,
    UnseenObject,
    UnseenVerb,
    Full,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Uc => "UC",
            Setting::RfUc => "RF-UC",
            Setting::NfUc => "NF-UC",
            Setting::UnseenObject => "UO",
            Setting::UnseenVerb => "UV",
            Setting::Full => "FULL",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_uppercase().as_str() {
            "UC" => Setting::Uc,
            "RF-UC" | "RFUC" => Setting::RfUc,
            "NF-UC" | "NFUC" => Setting::NfUc,
            "UO" => Setting::UnseenObject,
            "UV" => Setting::UnseenVerb,
            "FULL" => Setting::Full,
            _ => return Err(Error::invalid(format!("unknown split setting `{s}`"))),
        })
    }
}

/// How many items a split withholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitSize {
    Count(usize),
    /// Fraction of the relevant universe, rounded to nearest.
    Fraction(f64),
}

impl SplitSize {
    fn resolve(self, universe: usize) -> Result<usize> {
        let k = match self {
            SplitSize::Count(k) => k,
            SplitSize::Fraction(f) if (0.0..=1.0).contains(&f) => (f * universe as f64).round() as usize,
            SplitSize::Fraction(f) => return Err(Error::invalid(format!("fraction {f} outside [0,1]"))),
        };
        if k >= universe && k > 0 {
            return Err(Error::invalid(format!(
                "split size {k} must be smaller than the universe of {universe}"
            )));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ZeroShotSplit {
    pub setting: Setting,
    pub seed: u64,
    unseen: BTreeSet<usize>,
    num_categories: usize,
}

impl ZeroShotSplit {
    pub fn from_unseen(
        setting: Setting,
        seed: u64,
        unseen: BTreeSet<usize>,
        num_categories: usize,
    ) -> Result<Self> {
        if let Some(&c) = unseen.iter().find(|&&c| c >= num_categories) {
            return Err(Error::invalid(format!("unseen category {c} out of range")));
        }
        Ok(Self {
            setting,
            seed,
            unseen,
            num_categories,
        })
    }

    pub fn full(num_categories: usize) -> Self {
        Self {
            setting: Setting::Full,
            seed: 0,
            unseen: BTreeSet::new(),
            num_categories,
        }
    }

    pub fn unseen(&self) -> &BTreeSet<usize> {
        &self.unseen
    }

    pub fn seen(&self) -> BTreeSet<usize> {
        (0..self.num_categories)
            .filter(|c| !self.unseen.contains(c))
            .collect()
    }

    pub fn is_unseen(&self, c: usize) -> bool {
        self.unseen.contains(&c)
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    /// Text form: setting, seed, then one `unseen=<category name>` line each.
    pub fn to_text(&self, space: &CategorySpace) -> String {
        let mut s = format!("setting={}\nseed={}\n", self.setting, self.seed);
        for &c in &self.unseen {
            s.push_str(&format!("unseen={}\n", space.category_name(c)));
        }
        s
    }

    pub fn from_text(text: &str, space: &CategorySpace) -> Result<Self> {
        let mut setting = None;
        let mut seed = None;
        let mut unseen = BTreeSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: String| Error::Config {
                line: i + 1,
                message: m,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{line}`")))?;
            match k.trim() {
                "setting" => setting = Some(v.trim().parse::<Setting>().map_err(|e| err(e.to_string()))?),
                "seed" => seed = Some(v.trim().parse::<u64>().map_err(|e| err(e.to_string()))?),
                "unseen" => {
                    let c = space
                        .category_by_name(v.trim())
                        .ok_or_else(|| err(format!("unknown category `{}`", v.trim())))?;
                    unseen.insert(c);
                }
                other => return Err(err(format!("unknown split key `{other}`"))),
            }
        }
        let setting = setting.ok_or_else(|| Error::invalid("split text lacks `setting`"))?;
        Self::from_unseen(setting, seed.unwrap_or(0), unseen, space.num_categories())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrequencyTable {
    pub counts: Vec<u64>,
}

impl FrequencyTable {
    pub fn from_scenes<'a>(space: &CategorySpace, scenes: impl IntoIterator<Item = &'a Scene>) -> Self {
        let mut counts = vec![0; space.num_categories()];
        for s in scenes {
            for inst in &s.instances {
                counts[inst.category] += 1;
            }
        }
        Self { counts }
    }

    /// Category indices ordered by ascending count, ties by ascending index.
    fn ascending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.counts.len()).collect();
        idx.sort_by_key(|&c| (self.counts[c], c));
        idx
    }

    /// Descending count, ties by ascending index.
    fn descending(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.counts.len()).collect();
        idx.sort_by_key(|&c| (std::cmp::Reverse(self.counts[c]), c));
        idx
    }
}

pub const UC_MAX_RETRIES: usize = 1000;

pub fn build_split(
    space: &CategorySpace,
    setting: Setting,
    freq: Option<&FrequencyTable>,
    size: SplitSize,
    seed: u64,
) -> Result<ZeroShotSplit> {
    let n_cat = space.num_categories();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let need_freq = || -> Result<&FrequencyTable> {
        let f = freq.ok_or_else(|| Error::invalid(format!("{setting} split needs a frequency table")))?;
        if f.counts.len() != n_cat {
            return Err(Error::invalid(format!(
                "frequency table has {} entries for {n_cat} categories",
                f.counts.len()
            )));
        }
        Ok(f)
    };
    let unseen: BTreeSet<usize> = match setting {
        Setting::Full => BTreeSet::new(),
        Setting::RfUc => {
            let k = size.resolve(n_cat)?;
            need_freq()?.ascending().into_iter().take(k).collect()
        }
        Setting::NfUc => {
            let k = size.resolve(n_cat)?;
            need_freq()?.descending().into_iter().take(k).collect()
        }
        Setting::Uc => {
            let k = size.resolve(n_cat)?;
            let mut found = None;
            for _ in 0..UC_MAX_RETRIES {
                let pick: BTreeSet<usize> = sample(&mut rng, n_cat, k).into_iter().collect();
                if covers_all(space, &pick) {
                    found = Some(pick);
                    break;
                }
            }
            found.ok_or_else(|| {
                Error::Split(format!(
                    "no UC sample of {k} categories kept every object and verb seen after {UC_MAX_RETRIES} tries"
                ))
            })?
        }
        Setting::UnseenObject => {
            let pool: Vec<usize> = (0..space.num_objects()).filter(|&o| o != space.human()).collect();
            let k = size.resolve(pool.len())?;
            let objects: Vec<usize> = sample(&mut rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
            return split_unseen_objects(space, &objects, seed);
        }
        Setting::UnseenVerb => {
            let k = size.resolve(space.num_verbs())?;
            let verbs: Vec<usize> = sample(&mut rng, space.num_verbs(), k).into_vec();
            return split_unseen_verbs(space, &verbs, seed);
        }
    };
    ZeroShotSplit::from_unseen(setting, seed, unseen, n_cat)
}

/// UO split withholding every category of the given objects.
pub fn split_unseen_objects(space: &CategorySpace, objects: &[usize], seed: u64) -> Result<ZeroShotSplit> {
    if objects.contains(&space.human()) {
        return Err(Error::invalid("the human class cannot be an unseen object"));
    }
    let unseen = (0..space.num_categories())
        .filter(|&c| objects.contains(&space.categories()[c].0))
        .collect();
    ZeroShotSplit::from_unseen(Setting::UnseenObject, seed, unseen, space.num_categories())
}

/// UV split withholding every category of the given verbs.
pub fn split_unseen_verbs(space: &CategorySpace, verbs: &[usize], seed: u64) -> Result<ZeroShotSplit> {
    let unseen = (0..space.num_categories())
        .filter(|&c| verbs.contains(&space.categories()[c].1))
        .collect();
    ZeroShotSplit::from_unseen(Setting::UnseenVerb, seed, unseen, space.num_categories())
}

fn covers_all(space: &CategorySpace, unseen: &BTreeSet<usize>) -> bool {
    let mut objects = vec![false; space.num_objects()];
    let mut verbs = vec![false; space.num_verbs()];
    for (c, &(o, v)) in space.categories().iter().enumerate() {
        if !unseen.contains(&c) {
            objects[o] = true;
            verbs[v] = true;
        }
    }
    objects.iter().all(|&b| b) && verbs.iter().all(|&b| b)
}

/// Drops ground-truth instances of unseen categories. Entities stay, so the
/// detector still sees every rendered object.
pub fn filter_annotations(scenes: &[Scene], split: &ZeroShotSplit) -> Vec<Scene> {
    scenes
        .iter()
        .map(|s| {
            let mut s = s.clone();
            s.instances.retain(|i| !split.is_unseen(i.category));
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rare_first_takes_least_frequent() {
        let space = CategorySpace::toy(3, 3).unwrap();
        let freq = FrequencyTable {
            counts: vec![9, 8, 7, 6, 5, 4, 3, 2, 1],
        };
        let split = build_split(&space, Setting::RfUc, Some(&freq), SplitSize::Count(3), 0).unwrap();
        // oracle: sort by count, take the three smallest
        let mut by_count: Vec<usize> = (0..9).collect();
        by_count.sort_by_key(|&c| freq.counts[c]);
        let expect: BTreeSet<usize> = by_count[..3].iter().copied().collect();
        assert_eq!(split.unseen(), &expect);
        assert_eq!(expect, BTreeSet::from([6, 7, 8]));
    }

    #[test]
    fn frequency_ties_break_by_index() {
        let space = CategorySpace::toy(2, 2).unwrap();
        let freq = FrequencyTable {
            counts: vec![5, 1, 1, 5],
        };
        let rf = build_split(&space, Setting::RfUc, Some(&freq), SplitSize::Count(1), 0).unwrap();
        assert_eq!(rf.unseen(), &BTreeSet::from([1]));
        let nf = build_split(&space, Setting::NfUc, Some(&freq), SplitSize::Count(1), 0).unwrap();
        assert_eq!(nf.unseen(), &BTreeSet::from([0]));
    }

    #[test]
    fn unseen_object_closure() {
        let space = CategorySpace::toy(4, 3).unwrap();
        let split = split_unseen_objects(&space, &[3], 0).unwrap();
        let expect: BTreeSet<usize> = (0..3).map(|v| space.category(3, v).unwrap()).collect();
        assert_eq!(split.unseen(), &expect);
        assert!(split_unseen_objects(&space, &[0], 0).is_err());
    }

    #[test]
    fn zero_size_is_full_behaviour() {
        let space = CategorySpace::toy(3, 3).unwrap();
        for setting in [Setting::Uc, Setting::UnseenVerb, Setting::UnseenObject] {
            let s = build_split(&space, setting, None, SplitSize::Count(0), 1).unwrap();
            assert!(s.unseen().is_empty());
            assert_eq!(s.seen().len(), 9);
        }
    }

    #[test]
    fn frequency_splits_need_table() {
        let space = CategorySpace::toy(3, 3).unwrap();
        assert!(build_split(&space, Setting::RfUc, None, SplitSize::Count(2), 0).is_err());
        assert!(build_split(&space, Setting::Uc, None, SplitSize::Count(9), 0).is_err());
    }

    #[test]
    fn impossible_uc_errors_after_retries() {
        // 2×2: withholding 3 of 4 categories always leaves an object or verb unseen
        let space = CategorySpace::toy(2, 2).unwrap();
        assert!(matches!(
            build_split(&space, Setting::Uc, None, SplitSize::Count(3), 0),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn split_text_round_trip() {
        let space = CategorySpace::toy(4, 3).unwrap();
        let split = build_split(&space, Setting::Uc, None, SplitSize::Count(4), 11).unwrap();
        let text = split.to_text(&space);
        assert!(text.starts_with("setting=UC\nseed=11\n"));
        assert_eq!(ZeroShotSplit::from_text(&text, &space).unwrap(), split);
        assert!(ZeroShotSplit::from_text("setting=UC\nunseen=fly kite\n", &space).is_err());
    }

    proptest! {
        #[test]
        fn splits_partition_and_are_pure(
            n_obj in 2usize..6,
            n_verb in 2usize..6,
            k in 0usize..4,
            seed in any::<u64>(),
            which in 0usize..5,
        ) {
            let space = CategorySpace::toy(n_obj, n_verb).unwrap();
            let counts: Vec<u64> = (0..space.num_categories() as u64).map(|c| (c * 7919 + seed) % 97).collect();
            let freq = FrequencyTable { counts };
            let setting = [Setting::Uc, Setting::RfUc, Setting::NfUc, Setting::UnseenObject, Setting::UnseenVerb][which];
            let limit = match setting {
                Setting::UnseenObject => n_obj - 1,
                Setting::UnseenVerb => n_verb,
                _ => space.num_categories(),
            };
            prop_assume!(k < limit);
            let a = build_split(&space, setting, Some(&freq), SplitSize::Count(k), seed);
            let b = build_split(&space, setting, Some(&freq), SplitSize::Count(k), seed);
            match (a, b) {
                (Ok(a), Ok(b)) => {
                    prop_assert_eq!(&a, &b);
                    let seen = a.seen();
                    prop_assert!(seen.is_disjoint(a.unseen()));
                    prop_assert_eq!(seen.len() + a.unseen().len(), space.num_categories());
                    if setting == Setting::Uc {
                        prop_assert!(covers_all(&space, a.unseen()));
                    }
                }
                (Err(_), Err(_)) => prop_assert_eq!(setting, Setting::Uc),
                _ => prop_assert!(false, "non-deterministic outcome"),
            }
        }

        #[test]
        fn rare_and_nonrare_are_disjoint(counts in proptest::collection::btree_set(0u64..10_000, 9..=9), k in 1usize..5) {
            let space = CategorySpace::toy(3, 3).unwrap();
            let mut counts: Vec<u64> = counts.into_iter().collect();
            counts.reverse();
            let freq = FrequencyTable { counts };
            let rf = build_split(&space, Setting::RfUc, Some(&freq), SplitSize::Count(k), 0).unwrap();
            let nf = build_split(&space, Setting::NfUc, Some(&freq), SplitSize::Count(k), 0).unwrap();
            prop_assert!(rf.unseen().is_disjoint(nf.unseen()));
        }
    }
}
