use serde::{Deserialize, Serialize};

/// One checked inequality `lhs <= rhs`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Inequality {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Named inequalities and scalar constants recorded by a construction.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct Certificate {
    pub construction: String,
    pub checks: Vec<Inequality>,
    pub constants: Vec<(String, f64)>,
}

impl Certificate {
    pub fn new(construction: &str) -> Self {
        Certificate {
            construction: construction.to_string(),
            ..Default::default()
        }
    }

    /// Records `lhs <= rhs`. A NaN on either side counts as a failure.
    pub fn check(&mut self, name: &str, lhs: f64, rhs: f64) -> bool {
        let holds = lhs <= rhs;
        self.checks.push(Inequality {
            name: name.to_string(),
            lhs,
            rhs,
            holds,
        });
        holds
    }

    pub fn constant(&mut self, name: &str, value: f64) {
        self.constants.push((name.to_string(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.constants
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
    }

    pub fn inequality(&self, name: &str) -> Option<&Inequality> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }

    pub fn failures(&self) -> Vec<String> {
        self.checks
            .iter()
            .filter(|c| !c.holds)
            .map(|c| format!("{}: {} > {}", c.name, c.lhs, c.rhs))
            .collect()
    }

    pub fn merge(&mut self, prefix: &str, other: &Certificate) {
        for c in &other.checks {
            self.checks.push(Inequality {
                name: format!("{prefix}.{}", c.name),
                ..c.clone()
            });
        }
        for (n, v) in &other.constants {
            self.constants.push((format!("{prefix}.{n}"), *v));
        }
    }

    /// Turns a failing certificate into an error.
    pub fn into_result(self) -> crate::Result<Certificate> {
        if self.all_hold() {
            Ok(self)
        } else {
            Err(crate::Error::Certificate(Box::new(self)))
        }
    }
}
