use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVar {
    pub name: String,
    pub categories: Vec<String>,
}

impl LabelVar {
    pub fn new<S: Into<String>>(name: impl Into<String>, categories: impl IntoIterator<Item = S>) -> Self {
        Self {
            name: name.into(),
            categories: categories.into_iter().map(Into::into).collect(),
        }
    }

    pub fn category(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }
}

/// Ordered categorical label variables.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub vars: Vec<LabelVar>,
}

/// One category index per schema variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabelVector(pub Vec<usize>);

impl LabelVector {
    pub fn get(&self, var: usize) -> usize {
        self.0[var]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl Default for LabelSchema {
    /// Gender, age, car access, work status and household income.
    fn default() -> Self {
        Self {
            vars: vec![
                LabelVar::new("gender", ["male", "female", "unknown"]),
                LabelVar::new(
                    "age",
                    ["0-4", "5-10", "11-15", "16-19", "20-29", "30-39", "40-49", "50-69", "70+"],
                ),
                LabelVar::new("car_access", ["yes", "no", "unknown"]),
                LabelVar::new("work_status", ["employed", "education", "unemployed"]),
                LabelVar::new("income", ["highest", "high", "medium", "low", "lowest"]),
            ],
        }
    }
}

impl LabelSchema {
    pub fn new(vars: Vec<LabelVar>) -> Result<Self> {
        let schema = Self { vars };
        schema.check()?;
        Ok(schema)
    }

    fn check(&self) -> Result<()> {
        for (i, v) in self.vars.iter().enumerate() {
            if v.categories.is_empty() {
                return Err(Error::SchemaMismatch(format!("variable `{}` has no categories", v.name)));
            }
            if self.vars[..i].iter().any(|o| o.name == v.name) {
                return Err(Error::SchemaMismatch(format!("duplicate variable `{}`", v.name)));
            }
            let mut cats = v.categories.clone();
            cats.sort();
            cats.dedup();
            if cats.len() != v.categories.len() {
                return Err(Error::SchemaMismatch(format!("duplicate category in `{}`", v.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v.name == name)
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.vars.iter().map(|v| v.categories.len()).collect()
    }

    pub fn validate(&self, labels: &LabelVector) -> Result<()> {
        if labels.len() != self.vars.len() {
            return Err(Error::SchemaMismatch(format!(
                "label vector has {} entries, schema has {} variables",
                labels.len(),
                self.vars.len()
            )));
        }
        for (v, &c) in self.vars.iter().zip(&labels.0) {
            if c >= v.categories.len() {
                return Err(Error::SchemaMismatch(format!(
                    "category index {c} out of range for `{}`",
                    v.name
                )));
            }
        }
        Ok(())
    }

    /// Parses category names given in schema variable order.
    pub fn vector_from_names<S: AsRef<str>>(&self, names: &[S]) -> Result<LabelVector> {
        if names.len() != self.vars.len() {
            return Err(Error::SchemaMismatch(format!(
                "expected {} label values, got {}",
                self.vars.len(),
                names.len()
            )));
        }
        self.vars
            .iter()
            .zip(names)
            .map(|(v, n)| {
                v.category(n.as_ref()).ok_or_else(|| {
                    Error::SchemaMismatch(format!("unknown category `{}` for `{}`", n.as_ref(), v.name))
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(LabelVector)
    }

    pub fn names_of(&self, labels: &LabelVector) -> Vec<&str> {
        self.vars
            .iter()
            .zip(&labels.0)
            .map(|(v, &c)| v.categories[c].as_str())
            .collect()
    }

    /// Keeps only the named variables, in the order given.
    pub fn subset(&self, names: &[String]) -> Result<(LabelSchema, Vec<usize>)> {
        let idx = names
            .iter()
            .map(|n| {
                self.var_index(n)
                    .ok_or_else(|| Error::SchemaMismatch(format!("unknown label variable `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let schema = LabelSchema::new(idx.iter().map(|&i| self.vars[i].clone()).collect())?;
        Ok((schema, idx))
    }

    /// Tab-separated manifest: one line per variable, name then categories in index order.
    pub fn to_manifest(&self) -> String {
        let mut out = String::new();
        for v in &self.vars {
            out.push_str(&v.name);
            for c in &v.categories {
                out.push('\t');
                out.push_str(c);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let vars = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|line| {
                let mut parts = line.split('\t');
                let name = parts.next().unwrap_or_default().trim().to_string();
                LabelVar::new(name, parts.map(|p| p.trim().to_string()))
            })
            .collect();
        Self::new(vars)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_matches_label_table() {
        let s = LabelSchema::default();
        let names: Vec<&str> = s.vars.iter().map(|v| v.name.as_str()).collect();
        assert_eq!(names, ["gender", "age", "car_access", "work_status", "income"]);
        assert_eq!(s.cardinalities(), [3, 9, 3, 3, 5]);
    }

    #[test]
    fn manifest_round_trip() {
        let s = LabelSchema::default();
        assert_eq!(LabelSchema::from_manifest(&s.to_manifest()).unwrap(), s);
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let s = LabelSchema::default();
        assert!(s.validate(&LabelVector(vec![0, 0, 0, 0, 0])).is_ok());
        assert!(s.validate(&LabelVector(vec![0, 9, 0, 0, 0])).is_err());
        assert!(s.validate(&LabelVector(vec![0, 0, 0])).is_err());
    }

    #[test]
    fn names_round_trip() {
        let s = LabelSchema::default();
        let v = s
            .vector_from_names(&["female", "30-39", "no", "employed", "low"])
            .unwrap();
        assert_eq!(s.names_of(&v), ["female", "30-39", "no", "employed", "low"]);
    }

    #[test]
    fn subset_keeps_requested_order() {
        let s = LabelSchema::default();
        let (sub, idx) = s.subset(&["work_status".into(), "gender".into()]).unwrap();
        assert_eq!(idx, [3, 0]);
        assert_eq!(sub.vars[0].name, "work_status");
        assert!(s.subset(&["nope".into()]).is_err());
    }
}
