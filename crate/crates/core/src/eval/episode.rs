use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PmceError, Result};
use crate::feature_store::{DatasetSplit, FeatureRecord};
use crate::linalg;

/// One N-way K-shot task. Episode label `c` refers to `class_ids[c]` in the split.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub index: u64,
    pub class_ids: Vec<usize>,
    /// `support[c]` holds the K support records of episode class `c`.
    pub support: Vec<Vec<FeatureRecord>>,
    /// `query[c]` holds the M query records of episode class `c`.
    pub query: Vec<Vec<FeatureRecord>>,
    pub name_embs: Vec<Vec<f32>>,
    pub support_indices: Vec<Vec<usize>>,
    pub query_indices: Vec<Vec<usize>>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_ids.len()
    }

    pub fn num_queries(&self) -> usize {
        self.query.iter().map(Vec::len).sum()
    }

    /// Queries flattened in class order, with their episode labels.
    pub fn labelled_queries(&self) -> impl Iterator<Item = (usize, &FeatureRecord)> {
        self.query
            .iter()
            .enumerate()
            .flat_map(|(c, qs)| qs.iter().map(move |q| (c, q)))
    }
}

/// Caches per-class record lists so repeated draws are cheap.
#[derive(Debug)]
pub struct EpisodeSampler<'a> {
    split: &'a DatasetSplit,
    by_class: Vec<Vec<usize>>,
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    seed: u64,
}

impl<'a> EpisodeSampler<'a> {
    pub fn new(
        split: &'a DatasetSplit,
        n_way: usize,
        k_shot: usize,
        m_query: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_way == 0 || k_shot == 0 || m_query == 0 {
            return Err(PmceError::InvalidConfig(
                "n_way, k_shot and m_query must be positive".into(),
            ));
        }
        let by_class = split.indices_by_class();
        let need = k_shot + m_query;
        let eligible = by_class.iter().filter(|r| r.len() >= need).count();
        if by_class.len() < n_way {
            return Err(PmceError::InsufficientData(format!(
                "{} split has {} classes, episodes need {n_way}",
                split.split_name,
                by_class.len()
            )));
        }
        if eligible < by_class.len() {
            let (c, short) = by_class
                .iter()
                .enumerate()
                .find(|(_, r)| r.len() < need)
                .expect("some class is short");
            return Err(PmceError::InsufficientData(format!(
                "class {c} ({}) has {} records, episodes need {need}",
                split.class_names[c],
                short.len()
            )));
        }
        Ok(Self {
            split,
            by_class,
            n_way,
            k_shot,
            m_query,
            seed,
        })
    }

    /// Episode `index`; the RNG stream depends only on `(seed, index)`.
    pub fn sample(&self, index: u64) -> Episode {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let classes = index::sample(&mut rng, self.by_class.len(), self.n_way).into_vec();
        let mut ep = Episode {
            index,
            class_ids: classes.clone(),
            support: Vec::with_capacity(self.n_way),
            query: Vec::with_capacity(self.n_way),
            name_embs: Vec::with_capacity(self.n_way),
            support_indices: Vec::with_capacity(self.n_way),
            query_indices: Vec::with_capacity(self.n_way),
        };
        for c in classes {
            let pool = &self.by_class[c];
            let picks = index::sample(&mut rng, pool.len(), self.k_shot + self.m_query).into_vec();
            let chosen: Vec<usize> = picks.iter().map(|&p| pool[p]).collect();
            let (s, q) = chosen.split_at(self.k_shot);
            ep.support
                .push(s.iter().map(|&i| self.split.records[i].clone()).collect());
            ep.query
                .push(q.iter().map(|&i| self.split.records[i].clone()).collect());
            ep.support_indices.push(s.to_vec());
            ep.query_indices.push(q.to_vec());
            ep.name_embs.push(self.split.name_embs[c].clone());
        }
        ep
    }
}

pub fn sample_episode(
    novel: &DatasetSplit,
    n_way: usize,
    k_shot: usize,
    m_query: usize,
    seed: u64,
    index: u64,
) -> Result<Episode> {
    EpisodeSampler::new(novel, n_way, k_shot, m_query, seed).map(|s| s.sample(index))
}

/// Mean of the support caption embeddings of one class.
pub fn aggregate_support_semantics<R: AsRef<[f64]>>(
    support_caption_embs: &[R],
) -> Result<Vec<f64>> {
    if support_caption_embs.is_empty() {
        return Err(PmceError::InsufficientData("no support captions".into()));
    }
    Ok(linalg::mean_rows(support_caption_embs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::SplitName;
    use std::collections::HashSet;

    fn split(classes: usize, per: usize) -> DatasetSplit {
        DatasetSplit {
            split_name: SplitName::Novel,
            class_names: (0..classes).map(|c| format!("n{c}")).collect(),
            name_embs: (0..classes).map(|c| vec![c as f32, 1.0]).collect(),
            records: (0..classes * per)
                .map(|i| FeatureRecord {
                    class_id: (i / per) as u32,
                    visual: vec![i as f32, 0.0],
                    caption_emb: vec![0.0, i as f32],
                })
                .collect(),
        }
    }

    #[test]
    fn support_and_query_are_disjoint_and_sized() {
        let s = split(8, 10);
        let sampler = EpisodeSampler::new(&s, 5, 2, 3, 42).unwrap();
        for i in 0..50 {
            let ep = sampler.sample(i);
            assert_eq!(ep.n_way(), 5);
            let classes: HashSet<_> = ep.class_ids.iter().collect();
            assert_eq!(classes.len(), 5);
            for c in 0..5 {
                assert_eq!(ep.support[c].len(), 2);
                assert_eq!(ep.query[c].len(), 3);
                let sup: HashSet<_> = ep.support_indices[c].iter().collect();
                assert!(ep.query_indices[c].iter().all(|q| !sup.contains(q)));
                assert!(ep.support[c]
                    .iter()
                    .chain(&ep.query[c])
                    .all(|r| r.class_id as usize == ep.class_ids[c]));
            }
        }
    }

    #[test]
    fn same_seed_and_index_give_same_episode() {
        let s = split(8, 10);
        let a = sample_episode(&s, 5, 1, 4, 7, 13).unwrap();
        let b = sample_episode(&s, 5, 1, 4, 7, 13).unwrap();
        assert_eq!(a, b);
        let c = sample_episode(&s, 5, 1, 4, 7, 14).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn too_small_splits_are_rejected() {
        let s = split(4, 10);
        assert!(EpisodeSampler::new(&s, 5, 1, 1, 0).is_err());
        let s = split(8, 5);
        assert!(EpisodeSampler::new(&s, 5, 1, 5, 0).is_err());
    }

    #[test]
    fn semantics_average() {
        assert_eq!(
            aggregate_support_semantics(&[[0.0, 2.0], [2.0, 0.0]]).unwrap(),
            vec![1.0, 1.0]
        );
        assert_eq!(
            aggregate_support_semantics(&[[0.5, -3.0]]).unwrap(),
            vec![0.5, -3.0]
        );
        assert_eq!(
            aggregate_support_semantics(&[[2.0, 0.0], [0.0, 2.0]]).unwrap(),
            aggregate_support_semantics(&[[0.0, 2.0], [2.0, 0.0]]).unwrap()
        );
    }
}
