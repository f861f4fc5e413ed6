//! Dataset and label transforms behind the command line scenario flags.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::schedule::{LabelSchema, LabelVar, LabelVector};

/// Target marginal shares for some label variables. Variables not listed keep
/// their observed distribution.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabelDistribution {
    /// variable index → probability per category
    pub marginals: BTreeMap<usize, Vec<f64>>,
}

impl LabelDistribution {
    /// Reads `variable,category,prob` rows. Unlisted categories of a listed
    /// variable get zero; each variable's probabilities are renormalised.
    pub fn read(path: &Path, schema: &LabelSchema) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        let headers = rdr.headers().map_err(|e| Error::csv(path, e))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["variable", "category", "prob"] {
            return Err(Error::parse(path, "label distribution header must be `variable,category,prob`"));
        }
        let mut rows = Vec::new();
        for r in rdr.records() {
            let r = r.map_err(|e| Error::csv(path, e))?;
            let p: f64 = r[2]
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, format!("bad probability `{}`", &r[2])))?;
            rows.push((r[0].to_string(), r[1].to_string(), p));
        }
        Self::from_rows(schema, &rows)
    }

    pub fn from_rows(schema: &LabelSchema, rows: &[(String, String, f64)]) -> Result<Self> {
        let mut marginals: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for (var, cat, p) in rows {
            let v = schema
                .var_index(var)
                .ok_or_else(|| Error::SchemaMismatch(format!("unknown label variable `{var}`")))?;
            let c = schema.vars[v]
                .category(cat)
                .ok_or_else(|| Error::SchemaMismatch(format!("unknown category `{cat}` of `{var}`")))?;
            if !p.is_finite() || *p < 0.0 {
                return Err(Error::InvalidConfig(format!("probability of {var}={cat} must be finite and >= 0")));
            }
            marginals.entry(v).or_insert_with(|| vec![0.0; schema.vars[v].categories.len()])[c] = *p;
        }
        for (v, probs) in marginals.iter_mut() {
            let total: f64 = probs.iter().sum();
            if total <= 0.0 {
                return Err(Error::InvalidConfig(format!("probabilities of `{}` sum to zero", schema.vars[*v].name)));
            }
            probs.iter_mut().for_each(|p| *p /= total);
        }
        Ok(Self { marginals })
    }
}

/// Draws `n` label vectors from `pool` with importance weights that move the
/// listed marginals to their targets while keeping the pool's conditional
/// structure among the remaining variables.
pub fn reweight_labels(
    pool: &[LabelVector],
    schema: &LabelSchema,
    target: &LabelDistribution,
    n: usize,
    seed: u64,
) -> Result<Vec<LabelVector>> {
    if pool.is_empty() {
        return Err(Error::Empty("label pool".into()));
    }
    let card = schema.cardinalities();
    let mut observed: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for &v in target.marginals.keys() {
        let mut counts = vec![0.0; card[v]];
        for l in pool {
            counts[l.get(v)] += 1.0;
        }
        for (c, (&t, &k)) in target.marginals[&v].iter().zip(&counts).enumerate() {
            if t > 0.0 && k == 0.0 {
                return Err(Error::SchemaMismatch(format!(
                    "category `{}` of `{}` has target share {t} but no pool members",
                    schema.vars[v].categories[c], schema.vars[v].name
                )));
            }
        }
        observed.insert(v, counts.into_iter().map(|k| k / pool.len() as f64).collect());
    }
    let weight = |l: &LabelVector| -> f64 {
        target
            .marginals
            .iter()
            .map(|(&v, t)| {
                let o = observed[&v][l.get(v)];
                if o > 0.0 {
                    t[l.get(v)] / o
                } else {
                    0.0
                }
            })
            .product()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<&LabelVector> = (0..n)
        .map(|_| pool.choose_weighted(&mut rng, weight).expect("positive weights"))
        .collect();
    Ok(picks.into_iter().cloned().collect())
}

/// Deterministic random subset of `round(frac · n)` indices in original order.
pub fn subsample(n: usize, frac: f64, seed: u64) -> Result<Vec<usize>> {
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::InvalidConfig(format!("sample fraction {frac} is outside (0, 1]")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(((frac * n as f64).round() as usize).max(1).min(n));
    idx.sort_unstable();
    Ok(idx)
}

/// Keeps only the named label variables, in the given order.
pub fn subset_labels(
    schema: &LabelSchema,
    labels: &[LabelVector],
    names: &[String],
) -> Result<(LabelSchema, Vec<LabelVector>)> {
    let (sub, idx) = schema.subset(names)?;
    let out = labels.iter().map(|l| LabelVector(idx.iter().map(|&i| l.get(i)).collect())).collect();
    Ok((sub, out))
}

/// Appends a `name` variable whose category records which source each sample
/// came from. `sources[i]` indexes into `categories`.
pub fn add_source_label(
    schema: &LabelSchema,
    labels: &[LabelVector],
    name: &str,
    categories: &[String],
    sources: &[usize],
) -> Result<(LabelSchema, Vec<LabelVector>)> {
    if labels.len() != sources.len() {
        return Err(Error::Shape(format!("{} label rows but {} source tags", labels.len(), sources.len())));
    }
    if let Some(&bad) = sources.iter().find(|&&s| s >= categories.len()) {
        return Err(Error::SchemaMismatch(format!("source index {bad} has no category")));
    }
    let mut vars = schema.vars.clone();
    vars.push(LabelVar::new(name, categories.iter().cloned()));
    let sub = LabelSchema::new(vars)?;
    let out = labels
        .iter()
        .zip(sources)
        .map(|(l, &s)| {
            let mut v = l.0.clone();
            v.push(s);
            LabelVector(v)
        })
        .collect();
    Ok((sub, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> LabelSchema {
        LabelSchema::new(vec![
            LabelVar::new("age", ["young", "old"]),
            LabelVar::new("work", ["ft", "pt", "none"]),
        ])
        .unwrap()
    }

    fn pool() -> Vec<LabelVector> {
        let mut p = Vec::new();
        for i in 0..1000 {
            let age = usize::from(i % 2 == 1);
            // old people mostly not working
            let work = if age == 1 { if i % 10 < 7 { 2 } else { 0 } } else { i % 3 };
            p.push(LabelVector(vec![age, work]));
        }
        p
    }

    #[test]
    fn reweighting_hits_target_share_and_keeps_conditionals() {
        let s = schema();
        let t = LabelDistribution::from_rows(&s, &[("age".into(), "old".into(), 1.0)]).unwrap();
        assert_eq!(t.marginals[&0], vec![0.0, 1.0]);
        let out = reweight_labels(&pool(), &s, &t, 5000, 3).unwrap();
        assert!(out.iter().all(|l| l.get(0) == 1));
        let none = out.iter().filter(|l| l.get(1) == 2).count() as f64 / 5000.0;
        assert!((none - 0.6).abs() < 0.05, "{none}");
        assert_eq!(out, reweight_labels(&pool(), &s, &t, 5000, 3).unwrap());
    }

    #[test]
    fn reweighting_rejects_unknown_or_unsupported() {
        let s = schema();
        assert!(LabelDistribution::from_rows(&s, &[("x".into(), "old".into(), 1.0)]).is_err());
        assert!(LabelDistribution::from_rows(&s, &[("age".into(), "x".into(), 1.0)]).is_err());
        assert!(LabelDistribution::from_rows(&s, &[("age".into(), "old".into(), 0.0)]).is_err());
        let only_young = vec![LabelVector(vec![0, 0]); 10];
        let t = LabelDistribution::from_rows(&s, &[("age".into(), "old".into(), 1.0)]).unwrap();
        assert!(reweight_labels(&only_young, &s, &t, 5, 0).is_err());
    }

    #[test]
    fn reads_distribution_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "variable,category,prob\nwork,ft,2\nwork,pt,2\n").unwrap();
        let d = LabelDistribution::read(&p, &schema()).unwrap();
        assert_eq!(d.marginals[&1], vec![0.5, 0.5, 0.0]);
        std::fs::write(&p, "var,cat,p\n").unwrap();
        assert!(LabelDistribution::read(&p, &schema()).is_err());
    }

    #[test]
    fn subsample_is_deterministic_subset() {
        let a = subsample(100, 0.25, 7).unwrap();
        assert_eq!(a.len(), 25);
        assert_eq!(a, subsample(100, 0.25, 7).unwrap());
        assert_ne!(a, subsample(100, 0.25, 8).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample(10, 1.0, 0).unwrap(), (0..10).collect::<Vec<_>>());
        assert!(subsample(10, 0.0, 0).is_err());
        assert!(subsample(10, 1.5, 0).is_err());
    }

    #[test]
    fn subset_and_source_compose() {
        let s = schema();
        let labels = vec![LabelVector(vec![1, 2]), LabelVector(vec![0, 1])];
        let (sub, l) = subset_labels(&s, &labels, &["work".to_string()]).unwrap();
        assert_eq!(sub.vars.len(), 1);
        assert_eq!(l, vec![LabelVector(vec![2]), LabelVector(vec![1])]);
        let cats = vec!["a".to_string(), "b".to_string()];
        let (tagged, l) = add_source_label(&sub, &l, "source", &cats, &[1, 0]).unwrap();
        assert_eq!(tagged.cardinalities(), vec![3, 2]);
        assert_eq!(l, vec![LabelVector(vec![2, 1]), LabelVector(vec![1, 0])]);
        assert!(add_source_label(&sub, &l, "source", &cats, &[2, 0]).is_err());
        assert!(subset_labels(&s, &labels, &["nope".to_string()]).is_err());
    }
}
