use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{config_err, Result};

/// Token generator of a synthetic task. Ranges are half-open `[lo, hi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Generator {
    /// Independent draws from a categorical distribution over the whole vocabulary.
    Categorical { weights: Vec<f64> },
    /// First-order chain: each token has `branching` fixed successors in the range.
    Markov { lo: u32, hi: u32, branching: usize },
    /// Arithmetic progressions `start + i·step (mod hi - lo)`, shifted by `lo`.
    Arithmetic { lo: u32, hi: u32, max_step: u32 },
    /// A random pattern of `pattern_len` tokens repeated to the document length.
    Copy { lo: u32, hi: u32, pattern_len: usize },
    /// Records `open (key sep value)* close` with structure tokens at the
    /// start of the range and values drawn from the rest.
    Template { lo: u32, hi: u32, fields: usize },
}

const TEMPLATE_STRUCTURE: u32 = 3;

impl Generator {
    fn validate(&self, vocab: usize) -> Result<()> {
        let range = |lo: u32, hi: u32, min: u32| {
            if hi as usize > vocab || hi < lo + min {
                Err(config_err!("token range [{lo}, {hi}) must hold {min}+ ids below vocab_size {vocab}"))
            } else {
                Ok(())
            }
        };
        match self {
            Generator::Categorical { weights } => {
                if weights.len() != vocab {
                    return Err(config_err!("categorical weights need {vocab} entries, got {}", weights.len()));
                }
                if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
                    return Err(config_err!("categorical weights must be finite and nonnegative"));
                }
                if !(weights.iter().sum::<f64>() > 0.0) {
                    return Err(config_err!("categorical weights sum to zero"));
                }
                Ok(())
            }
            Generator::Markov { lo, hi, branching } => {
                range(*lo, *hi, 2)?;
                if *branching == 0 || *branching > (hi - lo) as usize {
                    return Err(config_err!("markov branching must be in 1..={}", hi - lo));
                }
                Ok(())
            }
            Generator::Arithmetic { lo, hi, max_step } => {
                range(*lo, *hi, 2)?;
                if *max_step == 0 || *max_step >= hi - lo {
                    return Err(config_err!("arithmetic max_step must be in 1..{}", hi - lo));
                }
                Ok(())
            }
            Generator::Copy { lo, hi, pattern_len } => {
                range(*lo, *hi, 1)?;
                if *pattern_len == 0 {
                    return Err(config_err!("copy pattern_len must be positive"));
                }
                Ok(())
            }
            Generator::Template { lo, hi, fields } => {
                range(*lo, *hi, TEMPLATE_STRUCTURE + 2)?;
                if *fields == 0 {
                    return Err(config_err!("template needs at least one field"));
                }
                Ok(())
            }
        }
    }

    /// Token ids the generator can emit.
    pub fn support(&self) -> Vec<u32> {
        match self {
            Generator::Categorical { weights } => (0..weights.len() as u32).filter(|&i| weights[i as usize] > 0.0).collect(),
            Generator::Markov { lo, hi, .. }
            | Generator::Arithmetic { lo, hi, .. }
            | Generator::Copy { lo, hi, .. }
            | Generator::Template { lo, hi, .. } => (*lo..*hi).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub generator: Generator,
    /// Inclusive document length range.
    pub doc_length: (usize, usize),
    pub documents: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.documents == 0 {
            return Err(config_err!("task `{}` needs at least one document", self.name));
        }
        let (a, b) = self.doc_length;
        if a == 0 || b < a {
            return Err(config_err!("task `{}` has invalid doc_length ({a}, {b})", self.name));
        }
        self.generator
            .validate(vocab)
            .map_err(|e| config_err!("task `{}`: {e}", self.name))
    }

    pub fn generate(&self, vocab: usize) -> Result<Corpus> {
        self.validate(vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut docs = Vec::with_capacity(self.documents);
        match &self.generator {
            Generator::Categorical { weights } => {
                let dist = WeightedIndex::new(weights).map_err(|e| config_err!("task `{}`: {e}", self.name))?;
                for _ in 0..self.documents {
                    let n = rng.random_range(self.doc_length.0..=self.doc_length.1);
                    docs.push((0..n).map(|_| dist.sample(&mut rng) as u32).collect());
                }
            }
            Generator::Markov { lo, hi, branching } => {
                let width = (hi - lo) as usize;
                let table: Vec<Vec<u32>> = (0..width)
                    .map(|_| {
                        rand::seq::index::sample(&mut rng, width, *branching)
                            .into_iter()
                            .map(|j| lo + j as u32)
                            .collect()
                    })
                    .collect();
                for _ in 0..self.documents {
                    let n = rng.random_range(self.doc_length.0..=self.doc_length.1);
                    let mut cur = rng.random_range(*lo..*hi);
                    let mut d = Vec::with_capacity(n);
                    for _ in 0..n {
                        d.push(cur);
                        let next = &table[(cur - lo) as usize];
                        cur = next[rng.random_range(0..next.len())];
                    }
                    docs.push(d);
                }
            }
            Generator::Arithmetic { lo, hi, max_step } => {
                let m = hi - lo;
                for _ in 0..self.documents {
                    let n = rng.random_range(self.doc_length.0..=self.doc_length.1);
                    let start = rng.random_range(0..m);
                    let step = rng.random_range(1..=*max_step);
                    docs.push((0..n as u32).map(|i| lo + (start + i * step) % m).collect());
                }
            }
            Generator::Copy { lo, hi, pattern_len } => {
                for _ in 0..self.documents {
                    let n = rng.random_range(self.doc_length.0..=self.doc_length.1);
                    let pattern: Vec<u32> = (0..*pattern_len).map(|_| rng.random_range(*lo..*hi)).collect();
                    docs.push(pattern.iter().copied().cycle().take(n).collect());
                }
            }
            Generator::Template { lo, hi, fields } => {
                let (open, sep, close) = (*lo, lo + 1, lo + 2);
                let values = lo + TEMPLATE_STRUCTURE..*hi;
                for _ in 0..self.documents {
                    let n = rng.random_range(self.doc_length.0..=self.doc_length.1);
                    let mut d = Vec::with_capacity(n + 2 * fields + 2);
                    while d.len() < n {
                        d.push(open);
                        for _ in 0..*fields {
                            d.push(rng.random_range(values.clone()));
                            d.push(sep);
                            d.push(rng.random_range(values.clone()));
                        }
                        d.push(close);
                    }
                    d.truncate(n);
                    docs.push(d);
                }
            }
        }
        Corpus::new(self.name.clone(), vocab, docs)
    }
}

/// Generates one corpus per spec.
pub fn gen_tasks(specs: &[TaskSpec], vocab: usize) -> Result<Vec<Corpus>> {
    specs.iter().map(|s| s.generate(vocab)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(generator: Generator) -> TaskSpec {
        TaskSpec {
            name: "t".into(),
            generator,
            doc_length: (10, 20),
            documents: 5,
            seed: 3,
        }
    }

    #[test]
    fn every_generator_stays_in_range() {
        let gens = [
            Generator::Markov { lo: 4, hi: 12, branching: 2 },
            Generator::Arithmetic { lo: 4, hi: 12, max_step: 3 },
            Generator::Copy { lo: 4, hi: 12, pattern_len: 3 },
            Generator::Template { lo: 4, hi: 12, fields: 2 },
        ];
        for g in gens {
            let c = spec(g).generate(16).unwrap();
            assert!(c.tokens().all(|t| (4..12).contains(&t)));
            assert!(c.documents().iter().all(|d| (10..=20).contains(&d.len())));
        }
    }

    #[test]
    fn degenerate_specs_rejected() {
        assert!(spec(Generator::Categorical { weights: vec![0.0; 4] }).generate(4).is_err());
        assert!(spec(Generator::Categorical { weights: vec![1.0; 3] }).generate(4).is_err());
        assert!(spec(Generator::Markov { lo: 0, hi: 8, branching: 2 }).generate(4).is_err());
        let mut s = spec(Generator::Copy { lo: 0, hi: 4, pattern_len: 2 });
        s.documents = 0;
        assert!(s.generate(4).is_err());
    }

    #[test]
    fn arithmetic_follows_step() {
        let c = spec(Generator::Arithmetic { lo: 10, hi: 17, max_step: 1 }).generate(20).unwrap();
        for d in c.documents() {
            for w in d.windows(2) {
                assert_eq!((w[1] - 10), (w[0] - 10 + 1) % 7);
            }
        }
    }
}
