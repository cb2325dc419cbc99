use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use super::{ClassId, InstanceId};
use crate::error::{Error, Result};
use crate::seeds::{rng_for, stream};

const HEADER: &str = "# adagcd split v1";

/// How the known (labelled) classes are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum KnownClasses {
    /// The first `round(f * C)` classes by id.
    Fraction(f64),
    /// The first `n` classes by id.
    Count(usize),
    List(Vec<ClassId>),
}

impl FromStr for KnownClasses {
    type Err = Error;

    /// `0.8` (contains a dot) is a fraction, `first:80` a count, `0,3,7` a list.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |d: String| Error::parse("known-class spec", d);
        if let Some(n) = s.strip_prefix("first:") {
            return n
                .trim()
                .parse()
                .map(KnownClasses::Count)
                .map_err(|e| bad(format!("{s}: {e}")));
        }
        if s.contains('.') {
            return s
                .parse()
                .map(KnownClasses::Fraction)
                .map_err(|e| bad(format!("{s}: {e}")));
        }
        s.split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| t.trim().parse::<ClassId>().map_err(|e| bad(format!("{t}: {e}"))))
            .collect::<Result<Vec<_>>>()
            .map(KnownClasses::List)
    }
}

impl std::fmt::Display for KnownClasses {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KnownClasses::Fraction(x) if x.fract() == 0.0 => write!(f, "{x:.1}"),
            KnownClasses::Fraction(x) => write!(f, "{x}"),
            KnownClasses::Count(n) => write!(f, "first:{n}"),
            KnownClasses::List(ids) => {
                let ids: Vec<String> = ids.iter().map(|c| c.to_string()).collect();
                f.write_str(&ids.join(","))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    Labeled,
    Unlabeled,
}

impl Partition {
    pub fn tag(self) -> &'static str {
        match self {
            Partition::Labeled => "L",
            Partition::Unlabeled => "U",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitEntry {
    pub instance_id: InstanceId,
    pub class_id: ClassId,
    pub partition: Partition,
}

/// Labelled / unlabelled partition of a dataset index.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    pub known_classes: BTreeSet<ClassId>,
    pub seed: u64,
    /// One entry per instance, in dataset-index order.
    pub entries: Vec<SplitEntry>,
}

impl SplitSpec {
    pub fn labeled_ids(&self) -> BTreeSet<InstanceId> {
        self.ids_in(Partition::Labeled)
    }

    pub fn unlabeled_ids(&self) -> BTreeSet<InstanceId> {
        self.ids_in(Partition::Unlabeled)
    }

    fn ids_in(&self, part: Partition) -> BTreeSet<InstanceId> {
        self.entries
            .iter()
            .filter(|e| e.partition == part)
            .map(|e| e.instance_id.clone())
            .collect()
    }

    pub fn num_labeled(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.partition == Partition::Labeled)
            .count()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.entries.len() - self.num_labeled()
    }

    pub fn all_classes(&self) -> BTreeSet<ClassId> {
        self.entries.iter().map(|e| e.class_id).collect()
    }

    /// Checks the partition invariants.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.instance_id.as_str()) {
                return Err(Error::Contract(format!("instance {} listed twice", e.instance_id)));
            }
            if e.partition == Partition::Labeled && !self.known_classes.contains(&e.class_id) {
                return Err(Error::Contract(format!(
                    "labelled instance {} has novel class {}",
                    e.instance_id, e.class_id
                )));
            }
        }
        Ok(())
    }

    /// Line-oriented text form; identical inputs give identical bytes.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let known: Vec<String> = self.known_classes.iter().map(|c| c.to_string()).collect();
        writeln!(out, "{HEADER}").unwrap();
        writeln!(out, "# seed={}", self.seed).unwrap();
        writeln!(out, "# known={}", known.join(",")).unwrap();
        writeln!(out, "instance_id,class_id,partition").unwrap();
        for e in &self.entries {
            writeln!(out, "{},{},{}", e.instance_id, e.class_id, e.partition.tag()).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seed = None;
        let mut known = None;
        let mut entries = Vec::new();
        let mut saw_columns = false;
        for (lineno, line) in text.lines().enumerate() {
            let loc = || format!("split line {}", lineno + 1);
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let meta = meta.trim();
                if let Some(v) = meta.strip_prefix("seed=") {
                    seed = Some(v.parse::<u64>().map_err(|e| Error::parse(loc(), e.to_string()))?);
                } else if let Some(v) = meta.strip_prefix("known=") {
                    let set = v
                        .split(',')
                        .filter(|t| !t.is_empty())
                        .map(|t| t.parse::<ClassId>().map_err(|e| Error::parse(loc(), e.to_string())))
                        .collect::<Result<BTreeSet<_>>>()?;
                    known = Some(set);
                }
                continue;
            }
            if !saw_columns {
                if line != "instance_id,class_id,partition" {
                    return Err(Error::parse(loc(), format!("unexpected column header {line:?}")));
                }
                saw_columns = true;
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let [id, class, part] = fields[..] else {
                return Err(Error::parse(loc(), format!("expected 3 fields, got {}", fields.len())));
            };
            let partition = match part {
                "L" => Partition::Labeled,
                "U" => Partition::Unlabeled,
                other => return Err(Error::parse(loc(), format!("unknown partition {other:?}"))),
            };
            entries.push(SplitEntry {
                instance_id: id.to_string(),
                class_id: class.parse().map_err(|e: std::num::ParseIntError| Error::parse(loc(), e.to_string()))?,
                partition,
            });
        }
        let spec = SplitSpec {
            known_classes: known.ok_or_else(|| Error::parse("split header", "missing known="))?,
            seed: seed.ok_or_else(|| Error::parse("split header", "missing seed="))?,
            entries,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Samples `floor(labeled_fraction * n_c)` instances of every known class `c`
/// into the labelled set; everything else is unlabelled.
pub fn build_split(
    index: &[(InstanceId, ClassId)],
    known: &KnownClasses,
    labeled_fraction: f64,
    seed: u64,
) -> Result<SplitSpec> {
    if !(labeled_fraction > 0.0 && labeled_fraction < 1.0) {
        return Err(Error::Config(format!(
            "labeled fraction {labeled_fraction} outside (0, 1)"
        )));
    }
    let classes: BTreeSet<ClassId> = index.iter().map(|(_, c)| *c).collect();
    if classes.is_empty() {
        return Err(Error::InvalidInput("empty dataset index".into()));
    }
    let known_classes: BTreeSet<ClassId> = match known {
        KnownClasses::Fraction(f) => {
            if !(*f > 0.0 && *f <= 1.0) {
                return Err(Error::Config(format!("known-class fraction {f} outside (0, 1]")));
            }
            let n = ((f * classes.len() as f64).round() as usize).max(1);
            classes.iter().copied().take(n).collect()
        }
        KnownClasses::Count(n) => {
            if *n == 0 || *n > classes.len() {
                return Err(Error::Config(format!(
                    "known-class count {n} outside 1..={}",
                    classes.len()
                )));
            }
            classes.iter().copied().take(*n).collect()
        }
        KnownClasses::List(list) => {
            if let Some(missing) = list.iter().find(|c| !classes.contains(c)) {
                return Err(Error::Config(format!("known class {missing} not in the index")));
            }
            if list.is_empty() {
                return Err(Error::Config("empty known-class list".into()));
            }
            list.iter().copied().collect()
        }
    };
    if known_classes.len() == classes.len() {
        log::warn!("every class is known: the split has no novel classes");
    }

    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (pos, (_, class)) in index.iter().enumerate() {
        by_class.entry(*class).or_default().push(pos);
    }
    let mut labeled = vec![false; index.len()];
    for class in &known_classes {
        let mut members = by_class[class].clone();
        let take = (labeled_fraction * members.len() as f64).floor() as usize;
        let mut rng = rng_for(seed, &[stream::SPLIT, u64::from(*class)]);
        members.shuffle(&mut rng);
        for &pos in &members[..take] {
            labeled[pos] = true;
        }
    }
    let entries = index
        .iter()
        .zip(labeled)
        .map(|((id, class), l)| SplitEntry {
            instance_id: id.clone(),
            class_id: *class,
            partition: if l {
                Partition::Labeled
            } else {
                Partition::Unlabeled
            },
        })
        .collect();
    let spec = SplitSpec {
        known_classes,
        seed,
        entries,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn balanced(n_classes: u32, per_class: usize) -> Vec<(InstanceId, ClassId)> {
        (0..n_classes)
            .flat_map(|c| (0..per_class).map(move |i| (format!("{c}-{i}"), c)))
            .collect()
    }

    #[test]
    fn cifar100_protocol_counts() {
        let index = balanced(100, 500);
        let split = build_split(&index, &KnownClasses::Fraction(0.8), 0.5, 0).unwrap();
        assert_eq!(split.known_classes.len(), 80);
        assert_eq!(split.num_labeled(), 20_000);
        assert_eq!(split.num_unlabeled(), 30_000);
    }

    #[test]
    fn synthetic_protocol_counts() {
        let index = balanced(10, 100);
        let split = build_split(&index, &KnownClasses::Count(5), 0.5, 3).unwrap();
        assert_eq!(split.num_labeled(), 250);
        assert_eq!(split.num_unlabeled(), 750);
    }

    #[test]
    fn split_is_deterministic_and_text_round_trips() {
        let index = balanced(6, 11);
        let a = build_split(&index, &"0,2,4".parse().unwrap(), 0.5, 42).unwrap();
        let b = build_split(&index, &KnownClasses::List(vec![0, 2, 4]), 0.5, 42).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        assert_eq!(SplitSpec::parse(&a.to_text()).unwrap(), a);
    }

    #[test]
    fn bad_fraction_is_config_error() {
        let index = balanced(3, 4);
        for f in [0.0, 1.0, -0.1, 1.5] {
            assert!(matches!(
                build_split(&index, &KnownClasses::Count(1), f, 0),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn all_known_is_allowed() {
        let index = balanced(3, 4);
        let split = build_split(&index, &KnownClasses::Count(3), 0.5, 0).unwrap();
        assert_eq!(split.num_labeled(), 6);
    }

    #[test]
    fn known_spec_parsing() {
        assert_eq!("0.5".parse::<KnownClasses>().unwrap(), KnownClasses::Fraction(0.5));
        assert_eq!("first:80".parse::<KnownClasses>().unwrap(), KnownClasses::Count(80));
        assert_eq!("3,1".parse::<KnownClasses>().unwrap(), KnownClasses::List(vec![3, 1]));
        assert!("x".parse::<KnownClasses>().is_err());
    }

    proptest! {
        #[test]
        fn split_invariants_hold(
            counts in prop::collection::vec(1usize..40, 2..8),
            n_known in 1usize..8,
            frac in 0.05f64..0.95,
            seed in any::<u64>(),
        ) {
            let index: Vec<(InstanceId, ClassId)> = counts
                .iter()
                .enumerate()
                .flat_map(|(c, &n)| (0..n).map(move |i| (format!("{c}_{i}"), c as ClassId)))
                .collect();
            let n_known = n_known.min(counts.len());
            let split = build_split(&index, &KnownClasses::Count(n_known), frac, seed).unwrap();
            let labeled = split.labeled_ids();
            let unlabeled = split.unlabeled_ids();
            prop_assert!(labeled.is_disjoint(&unlabeled));
            let all: BTreeSet<InstanceId> = index.iter().map(|(i, _)| i.clone()).collect();
            let union: BTreeSet<InstanceId> = labeled.union(&unlabeled).cloned().collect();
            prop_assert_eq!(union, all);
            for (c, &n) in counts.iter().enumerate() {
                let got = split
                    .entries
                    .iter()
                    .filter(|e| e.class_id == c as ClassId && e.partition == Partition::Labeled)
                    .count();
                let want = if c < n_known { (frac * n as f64).floor() as usize } else { 0 };
                prop_assert_eq!(got, want);
            }
        }
    }
}
