use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{SplitRatios, SynthError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn name(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub document_assignment: BTreeMap<String, SplitName>,
}

impl DatasetSplit {
    pub fn samples(&self, s: SplitName) -> &[String] {
        match s {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    fn samples_mut(&mut self, s: SplitName) -> &mut Vec<String> {
        match s {
            SplitName::Train => &mut self.train,
            SplitName::Val => &mut self.val,
            SplitName::Test => &mut self.test,
        }
    }

    pub fn split_of_sample(&self, id: &str) -> Option<SplitName> {
        SplitName::ALL.into_iter().find(|s| self.samples(*s).iter().any(|x| x == id))
    }

    /// Test-split documents that also appear in a train or val sample.
    pub fn leakage<'a>(&self, samples: impl IntoIterator<Item = (&'a str, &'a [String])>) -> usize {
        let mut seen: BTreeMap<&str, BTreeSet<SplitName>> = BTreeMap::new();
        let split_of: BTreeMap<&str, SplitName> = SplitName::ALL
            .into_iter()
            .flat_map(|s| self.samples(s).iter().map(move |id| (id.as_str(), s)))
            .collect();
        for (id, docs) in samples {
            let Some(&s) = split_of.get(id) else { continue };
            for d in docs {
                seen.entry(d.as_str()).or_default().insert(s);
            }
        }
        seen.values().filter(|s| s.contains(&SplitName::Test) && s.len() > 1).count()
    }
}

/// A connected group of samples, linked through shared documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub samples: Vec<String>,
    pub documents: Vec<String>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Groups samples that share any document, directly or transitively.
pub fn components<'a>(samples: impl IntoIterator<Item = (&'a str, &'a [String])>) -> Vec<Component> {
    let samples: Vec<(&str, &[String])> = samples.into_iter().collect();
    let mut uf = UnionFind((0..samples.len()).collect());
    let mut owner: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, (_, docs)) in samples.iter().enumerate() {
        for d in docs.iter() {
            match owner.get(d.as_str()) {
                Some(&j) => uf.union(i, j),
                None => {
                    owner.insert(d.as_str(), i);
                }
            }
        }
    }
    let mut groups: BTreeMap<usize, (Vec<String>, BTreeSet<String>)> = BTreeMap::new();
    for (i, (id, docs)) in samples.iter().enumerate() {
        let g = groups.entry(uf.find(i)).or_default();
        g.0.push(id.to_string());
        g.1.extend(docs.iter().cloned());
    }
    groups
        .into_values()
        .map(|(samples, docs)| Component { samples, documents: docs.into_iter().collect() })
        .collect()
}

/// Assigns whole components to splits, largest first, each to the split
/// with the largest remaining deficit against its target sample count.
/// Documents therefore never straddle splits.
pub fn split_by_document<'a>(samples: impl IntoIterator<Item = (&'a str, &'a [String])>, ratios: &SplitRatios) -> Result<DatasetSplit, SynthError> {
    ratios.validate()?;
    let mut comps = components(samples);
    let n: usize = comps.iter().map(|c| c.samples.len()).sum();
    let targets = super::config::apportion(n, &ratios.as_array());
    comps.sort_by(|a, b| b.samples.len().cmp(&a.samples.len()).then_with(|| a.samples[0].cmp(&b.samples[0])));

    let mut split = DatasetSplit::default();
    let mut filled = [0usize; 3];
    for c in &comps {
        let (k, _) = (0..3)
            .map(|k| (k, targets[k] as i64 - filled[k] as i64))
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("three splits");
        let name = SplitName::ALL[k];
        filled[k] += c.samples.len();
        split.samples_mut(name).extend(c.samples.iter().cloned());
        for d in &c.documents {
            split.document_assignment.insert(d.clone(), name);
        }
    }
    let starved: Vec<SplitName> = (0..3).filter(|&k| targets[k] > 0 && filled[k] == 0).map(|k| SplitName::ALL[k]).collect();
    if !starved.is_empty() {
        let smallest = (0..3).filter(|&k| targets[k] > 0).map(|k| targets[k]).min().unwrap_or(0);
        let offending = comps.into_iter().filter(|c| c.samples.len() > smallest).collect();
        return Err(SynthError::UnsatisfiableSplit { starved, offending });
    }
    for s in SplitName::ALL {
        split.samples_mut(s).sort();
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn docs(ids: &[&str]) -> Vec<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn disjoint_samples_split_exactly() {
        let sets: Vec<(String, Vec<String>)> = (0..13).map(|i| (format!("s{i:02}"), docs(&[&format!("d{i}")]))).collect();
        let split = split_by_document(sets.iter().map(|(a, b)| (a.as_str(), b.as_slice())), &SplitRatios::default()).unwrap();
        assert_eq!((split.train.len(), split.val.len(), split.test.len()), (10, 1, 2));
        assert_eq!(split.leakage(sets.iter().map(|(a, b)| (a.as_str(), b.as_slice()))), 0);
    }

    #[test]
    fn shared_documents_stay_together() {
        let sets = vec![
            ("a".to_string(), docs(&["d1", "d2"])),
            ("b".to_string(), docs(&["d2", "d3"])),
            ("c".to_string(), docs(&["d4"])),
            ("d".to_string(), docs(&["d5"])),
        ];
        let split = split_by_document(sets.iter().map(|(a, b)| (a.as_str(), b.as_slice())), &SplitRatios { train: 0.5, val: 0.25, test: 0.25 }).unwrap();
        assert_eq!(split.split_of_sample("a"), split.split_of_sample("b"));
        assert_eq!(split.document_assignment["d1"], split.document_assignment["d3"]);
    }

    #[test]
    fn one_giant_component_is_unsatisfiable() {
        let sets: Vec<(String, Vec<String>)> = (0..13).map(|i| (format!("s{i}"), docs(&["shared", &format!("d{i}")]))).collect();
        let err = split_by_document(sets.iter().map(|(a, b)| (a.as_str(), b.as_slice())), &SplitRatios::default()).unwrap_err();
        match err {
            SynthError::UnsatisfiableSplit { starved, offending } => {
                assert_eq!(starved, vec![SplitName::Val, SplitName::Test]);
                assert_eq!(offending.len(), 1);
                assert_eq!(offending[0].samples.len(), 13);
            }
            e => panic!("{e}"),
        }
    }
}
