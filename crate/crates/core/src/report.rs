//! Check outcomes and their text/CSV renderings.
//!
//! Every summary line that asserts one of the family's named inequalities
//! carries its tag (`contractive`, `loe`, `grad-punt`, `invar`, `contr`,
//! `deriv`); purely diagnostic rows carry `-`.

use std::fmt::Write as _;

pub const TAG_CONTRACTIVE: &str = "contractive";
pub const TAG_LOE: &str = "loe";
pub const TAG_GRAD_PUNT: &str = "grad-punt";
pub const TAG_INVAR: &str = "invar";
pub const TAG_CONTR: &str = "contr";
pub const TAG_DERIV: &str = "deriv";
pub const TAG_NONE: &str = "-";

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub tag: &'static str,
    pub passed: bool,
    pub details: String,
    pub constants: Vec<(String, f64)>,
}

impl CheckOutcome {
    pub fn new(name: impl Into<String>, tag: &'static str, passed: bool) -> Self {
        CheckOutcome {
            name: name.into(),
            tag,
            passed,
            details: String::new(),
            constants: Vec::new(),
        }
    }

    pub fn detail(mut self, d: impl Into<String>) -> Self {
        self.details = d.into();
        self
    }

    pub fn with(mut self, key: impl Into<String>, value: f64) -> Self {
        self.constants.push((key.into(), value));
        self
    }

    pub fn constant(&self, key: &str) -> Option<f64> {
        self.constants
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Default)]
pub struct Summary {
    pub outcomes: Vec<CheckOutcome>,
}

impl Summary {
    pub fn push(&mut self, outcome: CheckOutcome) {
        self.outcomes.push(outcome);
    }

    pub fn extend(&mut self, outcomes: Vec<CheckOutcome>) {
        self.outcomes.extend(outcomes);
    }

    pub fn all_pass(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        for o in &self.outcomes {
            let mark = if o.passed { "PASS" } else { "FAIL" };
            let consts = o
                .constants
                .iter()
                .map(|(k, v)| format!("{k}={v:.6}"))
                .collect::<Vec<_>>()
                .join(" ");
            let _ = writeln!(
                out,
                "[{mark}] {:<32} tag={:<12} {} {}",
                o.name, o.tag, consts, o.details
            );
        }
        let _ = writeln!(
            out,
            "{}/{} checks passed",
            self.outcomes.iter().filter(|o| o.passed).count(),
            self.outcomes.len()
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "check,tag,verdict,constants,details");
        for o in &self.outcomes {
            let consts = o
                .constants
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(";");
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                o.name,
                o.tag,
                if o.passed { "pass" } else { "fail" },
                consts,
                o.details.replace(',', ";")
            );
        }
        out
    }
}
