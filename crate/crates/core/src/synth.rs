//! Synthetic interaction logs with planted sequential rules.
//!
//! Each step either fires the rule whose antecedent is the longest suffix of the
//! sequence so far, or, when no rule matches, emits uniform noise or walks toward
//! some rule's antecedent. Fired steps are recorded with the positions of their
//! antecedent so interpretability can be scored against known key items.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Interaction, InteractionLog};
use crate::model::ItemId;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SynthError {
    #[error("{field}: {message}")]
    Config { field: &'static str, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

fn config_err(field: &'static str, message: impl Into<String>) -> SynthError {
    SynthError::Config { field, message: message.into() }
}

/// `antecedent` observed as the most recent window → `consequent` with `probability`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRule {
    pub antecedent: Vec<ItemId>,
    pub consequent: ItemId,
    pub probability: f64,
}

/// Rules drawn at random with pairwise disjoint items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomRules {
    /// `counts[k]` rules with an antecedent of `k + 1` items.
    pub counts: Vec<usize>,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub users: usize,
    pub min_len: usize,
    pub max_len: usize,
    #[serde(default)]
    pub rules: Vec<PlantedRule>,
    #[serde(default)]
    pub random_rules: Option<RandomRules>,
    pub noise: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// 200 items, 2000 users of length 15–20, 20 two-item and 10 one-item rules
    /// firing with probability 0.9, noise 0.2, seed 7.
    pub fn reference() -> Self {
        Self {
            vocab_size: 200,
            users: 2000,
            min_len: 15,
            max_len: 20,
            rules: Vec::new(),
            random_rules: Some(RandomRules { counts: vec![10, 20], probability: 0.9 }),
            noise: 0.2,
            seed: 7,
        }
    }

    /// Explicit rules followed by the seeded random ones.
    pub fn resolved_rules(&self) -> Result<Vec<PlantedRule>, SynthError> {
        let mut rules = self.rules.clone();
        if let Some(random) = &self.random_rules {
            if random.counts.len() > 3 {
                return Err(config_err("random_rules.counts", "antecedents have at most 3 items"));
            }
            let needed: usize = random.counts.iter().enumerate().map(|(k, &c)| c * (k + 2)).sum();
            if needed > self.vocab_size {
                return Err(config_err(
                    "random_rules.counts",
                    format!("{needed} distinct items needed but vocabulary has {}", self.vocab_size),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            let mut pool = sample(&mut rng, self.vocab_size, needed).into_iter().map(|i| i as ItemId + 1);
            for (k, &count) in random.counts.iter().enumerate() {
                for _ in 0..count {
                    let antecedent: Vec<ItemId> = pool.by_ref().take(k + 1).collect();
                    let consequent = pool.next().expect("pool sized above");
                    rules.push(PlantedRule { antecedent, consequent, probability: random.probability });
                }
            }
        }
        Ok(rules)
    }

    pub fn validate(&self) -> Result<Vec<PlantedRule>, SynthError> {
        if self.vocab_size < 2 {
            return Err(config_err("vocab_size", "must be at least 2"));
        }
        if self.users == 0 {
            return Err(config_err("users", "must be positive"));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(config_err("min_len", format!("need 1 <= min_len <= max_len, got {}..{}", self.min_len, self.max_len)));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(config_err("noise", format!("must lie in [0, 1), got {}", self.noise)));
        }
        let rules = self.resolved_rules()?;
        let mut groups: HashMap<&[ItemId], f64> = HashMap::new();
        for r in &rules {
            let n = r.antecedent.len();
            if !(1..=3).contains(&n) {
                return Err(config_err("rules.antecedent", format!("length {n} outside 1..=3")));
            }
            let items = r.antecedent.iter().chain(std::iter::once(&r.consequent));
            if let Some(bad) = items.clone().find(|&&i| i == 0 || i as usize > self.vocab_size) {
                return Err(config_err("rules", format!("item {bad} outside 1..={}", self.vocab_size)));
            }
            let mut sorted = r.antecedent.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != n {
                return Err(config_err("rules.antecedent", format!("repeated item in {:?}", r.antecedent)));
            }
            if r.antecedent.contains(&r.consequent) {
                return Err(config_err("rules.consequent", format!("{} is part of its own antecedent", r.consequent)));
            }
            if !(r.probability > 0.0 && r.probability <= 1.0) {
                return Err(config_err("rules.probability", format!("{} outside (0, 1]", r.probability)));
            }
            *groups.entry(&r.antecedent).or_default() += r.probability;
        }
        if let Some((a, p)) = groups.iter().find(|(_, &p)| p > 1.0 + 1e-12) {
            return Err(config_err("rules", format!("rules on antecedent {a:?} fire with total probability {p}")));
        }
        Ok(rules)
    }
}

/// A step produced by a rule, with the positions of its antecedent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyPattern {
    pub user: String,
    pub target_position: usize,
    pub target: ItemId,
    pub antecedent_positions: Vec<usize>,
    pub rule: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub rules: Vec<PlantedRule>,
    /// Item ids per user, indexed by position.
    pub sequences: Vec<(String, Vec<ItemId>)>,
    pub keys: Vec<KeyPattern>,
}

pub fn item_key(id: ItemId) -> String {
    format!("i{id:04}")
}

pub fn user_key(index: usize) -> String {
    format!("u{index:05}")
}

/// Runs the generator. Each user draws from its own stream of the seeded generator.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput, SynthError> {
    let rules = config.validate()?;
    let mut by_antecedent: BTreeMap<&[ItemId], Vec<usize>> = BTreeMap::new();
    for (i, r) in rules.iter().enumerate() {
        by_antecedent.entry(&r.antecedent).or_default().push(i);
    }
    let longest = rules.iter().map(|r| r.antecedent.len()).max().unwrap_or(0);
    let v = config.vocab_size as ItemId;

    let mut sequences = Vec::with_capacity(config.users);
    let mut keys = Vec::new();
    for u in 0..config.users {
        let user = user_key(u);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(u as u64 + 1);
        let len = rng.random_range(config.min_len..=config.max_len);
        let mut seq: Vec<ItemId> = Vec::with_capacity(len);
        while seq.len() < len {
            let t = seq.len();
            let matched = (1..=longest.min(t)).rev().find_map(|k| by_antecedent.get(&seq[t - k..]).map(|g| (k, g)));
            let next = if let Some((k, group)) = matched {
                let draw: f64 = rng.random();
                let mut acc = 0.0;
                let fired = group.iter().find(|&&r| {
                    acc += rules[r].probability;
                    draw < acc
                });
                match fired {
                    Some(&r) => {
                        keys.push(KeyPattern {
                            user: user.clone(),
                            target_position: t,
                            target: rules[r].consequent,
                            antecedent_positions: (t - k..t).collect(),
                            rule: r,
                        });
                        rules[r].consequent
                    }
                    None => rng.random_range(1..=v),
                }
            } else if rules.is_empty() || rng.random::<f64>() < config.noise {
                rng.random_range(1..=v)
            } else {
                // Extend a partially observed antecedent, else start a random one.
                let partial = (1..longest.min(t + 1)).rev().find_map(|k| {
                    rules.iter().find(|r| r.antecedent.len() > k && r.antecedent[..k] == seq[t - k..]).map(|r| r.antecedent[k])
                });
                partial.unwrap_or_else(|| rules[rng.random_range(0..rules.len())].antecedent[0])
            };
            seq.push(next);
        }
        sequences.push((user, seq));
    }
    Ok(SynthOutput { rules, sequences, keys })
}

impl SynthOutput {
    /// Timestamps are positions, so the log order is the generation order.
    pub fn to_log(&self) -> InteractionLog {
        InteractionLog::from_records(
            self.sequences
                .iter()
                .flat_map(|(user, seq)| {
                    seq.iter().enumerate().map(move |(t, &item)| Interaction {
                        user: user.clone(),
                        item: item_key(item),
                        timestamp: t as i64,
                    })
                })
                .collect(),
        )
    }

    /// Key patterns whose target is the user's last interaction, i.e. the test target
    /// after a leave-one-out split.
    pub fn final_step_keys(&self) -> Vec<&KeyPattern> {
        let last: HashMap<&str, usize> = self.sequences.iter().map(|(u, s)| (u.as_str(), s.len() - 1)).collect();
        self.keys.iter().filter(|k| last[k.user.as_str()] == k.target_position).collect()
    }

    pub fn log_text(&self) -> String {
        let mut out = String::from("user,item,timestamp\n");
        for (user, seq) in &self.sequences {
            for (t, &item) in seq.iter().enumerate() {
                out.push_str(&format!("{user},{},{t}\n", item_key(item)));
            }
        }
        out
    }

    /// SHA-256 of `log_text()`, hex encoded.
    pub fn log_sha256(&self) -> String {
        hex::encode(Sha256::digest(self.log_text().as_bytes()))
    }

    /// `user, target_position, target, antecedent_positions (space separated), rule`.
    pub fn keys_text(&self) -> String {
        let mut out = String::from("user\ttarget_position\ttarget\tantecedent_positions\trule\n");
        for k in &self.keys {
            let pos: Vec<String> = k.antecedent_positions.iter().map(usize::to_string).collect();
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", k.user, k.target_position, item_key(k.target), pos.join(" "), k.rule));
        }
        out
    }

    /// Relation file for the final-step keys: `user, target, related item, relation`.
    pub fn relations_text(&self) -> String {
        let seqs: HashMap<&str, &Vec<ItemId>> = self.sequences.iter().map(|(u, s)| (u.as_str(), s)).collect();
        let mut out = String::from("user\ttarget\trelated\trelation\n");
        for k in self.final_step_keys() {
            let seq = seqs[k.user.as_str()];
            for &p in &k.antecedent_positions {
                out.push_str(&format!("{}\t{}\t{}\tPlanted\n", k.user, item_key(k.target), item_key(seq[p])));
            }
        }
        out
    }

    /// Writes `interactions.csv`, `keys.tsv`, `relations.tsv` and `rules.json` into `dir`.
    pub fn write(&self, dir: &Path, config: &SynthConfig) -> Result<(), SynthError> {
        let io = |path: &Path, e: std::io::Error| SynthError::Io { path: path.display().to_string(), message: e.to_string() };
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let rules = serde_json::json!({ "config": config, "rules": self.rules });
        let files = [
            ("interactions.csv", self.log_text()),
            ("keys.tsv", self.keys_text()),
            ("relations.tsv", self.relations_text()),
            ("rules.json", serde_json::to_string_pretty(&rules).expect("rules serialize")),
        ];
        for (name, text) in files {
            let path = dir.join(name);
            let mut f = std::fs::File::create(&path).map_err(|e| io(&path, e))?;
            f.write_all(text.as_bytes()).map_err(|e| io(&path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_rule(noise: f64) -> SynthConfig {
        SynthConfig {
            vocab_size: 30,
            users: 300,
            min_len: 10,
            max_len: 20,
            rules: vec![PlantedRule { antecedent: vec![3, 5], consequent: 9, probability: 1.0 }],
            random_rules: None,
            noise,
            seed: 1,
        }
    }

    #[test]
    fn single_rule_always_fires() {
        let out = generate(&one_rule(0.3)).unwrap();
        let mut seen = 0;
        for (_, s) in &out.sequences {
            for t in 2..s.len() {
                if s[t - 2..t] == [3, 5] {
                    assert_eq!(s[t], 9);
                    seen += 1;
                }
            }
        }
        assert!(seen > 100);
    }

    #[test]
    fn heavy_noise_suppresses_consequents() {
        let mut cfg = one_rule(0.999);
        cfg.vocab_size = 1000;
        let out = generate(&cfg).unwrap();
        let total: usize = out.sequences.iter().map(|(_, s)| s.len()).sum();
        let hits: usize = out.sequences.iter().map(|(_, s)| s.iter().filter(|&&x| x == 9).count()).sum();
        assert!((hits as f64) < 0.005 * total as f64, "{hits}/{total}");
    }

    #[test]
    fn seeded_output_is_identical() {
        let cfg = SynthConfig { users: 200, ..SynthConfig::reference() };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.log_text(), b.log_text());
        assert_eq!(a.keys_text(), b.keys_text());
        let c = generate(&SynthConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.log_text(), c.log_text());
    }

    #[test]
    fn reference_rules_are_disjoint() {
        let rules = SynthConfig::reference().validate().unwrap();
        assert_eq!(rules.len(), 30);
        assert_eq!(rules.iter().filter(|r| r.antecedent.len() == 2).count(), 20);
        let mut items: Vec<ItemId> = rules.iter().flat_map(|r| r.antecedent.iter().copied().chain([r.consequent])).collect();
        let n = items.len();
        items.sort_unstable();
        items.dedup();
        assert_eq!(items.len(), n);
    }

    #[test]
    fn key_patterns_are_contiguous_windows() {
        let out = generate(&SynthConfig { users: 300, ..SynthConfig::reference() }).unwrap();
        let seqs: HashMap<&str, &Vec<ItemId>> = out.sequences.iter().map(|(u, s)| (u.as_str(), s)).collect();
        for k in &out.keys {
            let s = seqs[k.user.as_str()];
            let p = &k.antecedent_positions;
            assert_eq!(*p.last().unwrap() + 1, k.target_position);
            assert!(p.windows(2).all(|w| w[1] == w[0] + 1));
            let window: Vec<ItemId> = p.iter().map(|&i| s[i]).collect();
            assert_eq!(window, out.rules[k.rule].antecedent);
            assert_eq!(s[k.target_position], k.target);
        }
    }

    #[test]
    fn validation_errors_name_fields() {
        let mut cfg = one_rule(0.1);
        cfg.rules.push(PlantedRule { antecedent: vec![3, 5], consequent: 10, probability: 0.5 });
        assert!(matches!(cfg.validate(), Err(SynthError::Config { field: "rules", .. })));
        cfg.rules[0].probability = 0.5;
        assert!(cfg.validate().is_ok());

        let bad = |f: &dyn Fn(&mut SynthConfig)| {
            let mut c = one_rule(0.1);
            f(&mut c);
            c.validate().unwrap_err()
        };
        assert!(matches!(bad(&|c| c.noise = 1.0), SynthError::Config { field: "noise", .. }));
        assert!(matches!(bad(&|c| c.rules[0].consequent = 3), SynthError::Config { field: "rules.consequent", .. }));
        assert!(matches!(bad(&|c| c.rules[0].antecedent = vec![4, 4]), SynthError::Config { field: "rules.antecedent", .. }));
        assert!(matches!(bad(&|c| c.rules[0].consequent = 31), SynthError::Config { field: "rules", .. }));
        assert!(matches!(bad(&|c| c.min_len = 30), SynthError::Config { field: "min_len", .. }));
    }
}
