use serde::ser::{SerializeMap, SerializeStruct};
use serde::{Serialize, Serializer};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Confusion matrix (rows true class, columns predicted) with the derived
/// precision, recall and F1.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub domain: String,
    pub variant: Option<String>,
    pub class_names: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted mean over classes.
    pub macro_avg: ClassMetrics,
    /// Mean over classes weighted by true-class support.
    pub weighted_avg: ClassMetrics,
    pub n: u64,
    /// Whether [`MetricsReport::headline`] returns the weighted average.
    pub use_weighted: bool,
}

impl MetricsReport {
    pub fn from_confusion(
        domain: impl Into<String>,
        class_names: Vec<String>,
        confusion: Vec<Vec<u64>>,
        use_weighted: bool,
    ) -> Result<Self> {
        let c = class_names.len();
        if c == 0 || confusion.len() != c || confusion.iter().any(|r| r.len() != c) {
            return Err(Error::Contract(format!(
                "confusion matrix must be {c}×{c} for {c} classes"
            )));
        }
        let n: u64 = confusion.iter().flatten().sum();
        let per_class: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let tp = confusion[k][k];
                let predicted: u64 = confusion.iter().map(|r| r[k]).sum();
                let actual: u64 = confusion[k].iter().sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, actual);
                ClassMetrics {
                    precision,
                    recall,
                    f1: f1(precision, recall),
                }
            })
            .collect();
        let avg = |w: &dyn Fn(usize) -> f64| {
            let total: f64 = (0..c).map(w).sum();
            let mean = |f: fn(&ClassMetrics) -> f64| {
                if total == 0.0 {
                    0.0
                } else {
                    (0..c).map(|k| w(k) * f(&per_class[k])).sum::<f64>() / total
                }
            };
            ClassMetrics {
                precision: mean(|m| m.precision),
                recall: mean(|m| m.recall),
                f1: mean(|m| m.f1),
            }
        };
        let macro_avg = avg(&|_| 1.0);
        let weighted_avg = avg(&|k| confusion[k].iter().sum::<u64>() as f64);
        Ok(MetricsReport {
            domain: domain.into(),
            variant: None,
            class_names,
            confusion,
            per_class,
            macro_avg,
            weighted_avg,
            n,
            use_weighted,
        })
    }

    pub fn from_predictions(
        domain: impl Into<String>,
        class_names: Vec<String>,
        truth: &[usize],
        predicted: &[usize],
        use_weighted: bool,
    ) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Contract(format!(
                "{} labels but {} predictions",
                truth.len(),
                predicted.len()
            )));
        }
        let c = class_names.len();
        let mut confusion = vec![vec![0u64; c]; c];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= c || p >= c {
                return Err(Error::Contract(format!("class id out of range for {c} classes")));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(domain, class_names, confusion, use_weighted)
    }

    pub fn with_variant(mut self, variant: impl Into<String>) -> Self {
        self.variant = Some(variant.into());
        self
    }

    /// The average selected by the metrics configuration.
    pub fn headline(&self) -> ClassMetrics {
        if self.use_weighted {
            self.weighted_avg
        } else {
            self.macro_avg
        }
    }

    pub fn accuracy(&self) -> f64 {
        let correct: u64 = (0..self.confusion.len()).map(|k| self.confusion[k][k]).sum();
        ratio(correct, self.n)
    }

    /// Pretty JSON with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Rebuilds a report from its JSON form; metrics are recomputed from
    /// the confusion matrix.
    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |d: &str| Error::Contract(format!("report JSON: {d}"));
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| bad(&e.to_string()))?;
        let domain = v["domain"].as_str().ok_or_else(|| bad("missing domain"))?;
        let classes: Vec<String> = v["classes"]
            .as_array()
            .ok_or_else(|| bad("missing classes"))?
            .iter()
            .map(|c| c.as_str().map(str::to_string).ok_or_else(|| bad("class name")))
            .collect::<Result<_>>()?;
        let confusion: Vec<Vec<u64>> = v["confusion"]
            .as_array()
            .ok_or_else(|| bad("missing confusion"))?
            .iter()
            .map(|row| {
                row.as_array()
                    .ok_or_else(|| bad("confusion row"))?
                    .iter()
                    .map(|x| x.as_u64().ok_or_else(|| bad("confusion entry")))
                    .collect()
            })
            .collect::<Result<_>>()?;
        let weighted = v["averaging"].as_str() == Some("weighted");
        let mut report = Self::from_confusion(domain, classes, confusion, weighted)?;
        report.variant = v["variant"].as_str().map(str::to_string);
        Ok(report)
    }
}

struct PerClass<'a>(&'a [String], &'a [ClassMetrics]);

impl Serialize for PerClass<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (name, m) in self.0.iter().zip(self.1) {
            map.serialize_entry(name, m)?;
        }
        map.end()
    }
}

impl Serialize for MetricsReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("MetricsReport", 9)?;
        st.serialize_field("domain", &self.domain)?;
        st.serialize_field("variant", &self.variant)?;
        st.serialize_field("classes", &self.class_names)?;
        st.serialize_field("confusion", &self.confusion)?;
        st.serialize_field("per_class", &PerClass(&self.class_names, &self.per_class))?;
        st.serialize_field("macro", &self.macro_avg)?;
        st.serialize_field("weighted", &self.weighted_avg)?;
        st.serialize_field("averaging", if self.use_weighted { "weighted" } else { "macro" })?;
        st.serialize_field("n", &self.n)?;
        st.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|k| format!("c{k}")).collect()
    }

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let r = MetricsReport::from_predictions("d", names(3), &y, &y, false).unwrap();
        for m in r.per_class.iter().chain([&r.macro_avg, &r.weighted_avg]) {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn all_predicted_zero() {
        let truth = [0, 0, 1, 1];
        let r = MetricsReport::from_predictions("d", names(2), &truth, &[0; 4], false).unwrap();
        assert_eq!(r.per_class[0].precision, 0.5);
        assert_eq!(r.per_class[0].recall, 1.0);
        assert!((r.per_class[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_class[1], ClassMetrics { precision: 0.0, recall: 0.0, f1: 0.0 });
        assert!((r.macro_avg.f1 - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip_and_shape() {
        let r = MetricsReport::from_predictions("dom", names(3), &[0, 1, 2, 0], &[0, 2, 2, 1], true)
            .unwrap()
            .with_variant("ce+dg");
        let text = r.to_json();
        assert_eq!(MetricsReport::from_json(&text).unwrap(), r);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["domain", "variant", "confusion", "per_class", "macro", "n"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert!(v["per_class"]["c2"]["f1"].is_number());
        assert_eq!(r.headline(), r.weighted_avg);
    }

    #[test]
    fn class_order_is_kept_in_json() {
        let classes: Vec<String> = ["z", "a", "m"].iter().map(|s| s.to_string()).collect();
        let r = MetricsReport::from_predictions("d", classes, &[0, 1, 2], &[0, 1, 2], false).unwrap();
        let text = r.to_json();
        let (z, a) = (text.find("\"z\": {").unwrap(), text.find("\"a\": {").unwrap());
        assert!(z < a);
    }

    proptest! {
        #[test]
        fn metrics_match_recount(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
            let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
            let r = MetricsReport::from_predictions("d", names(4), &truth, &pred, false).unwrap();
            prop_assert_eq!(r.n as usize, truth.len());
            for k in 0..4 {
                let tp = pairs.iter().filter(|&&(t, p)| t == k && p == k).count();
                let pk = pairs.iter().filter(|&&(_, p)| p == k).count();
                let tk = pairs.iter().filter(|&&(t, _)| t == k).count();
                prop_assert_eq!(r.confusion[k].iter().sum::<u64>() as usize, tk);
                let p = if pk == 0 { 0.0 } else { tp as f64 / pk as f64 };
                let rc = if tk == 0 { 0.0 } else { tp as f64 / tk as f64 };
                prop_assert_eq!(r.per_class[k].precision, p);
                prop_assert_eq!(r.per_class[k].recall, rc);
                for m in [r.per_class[k], r.macro_avg, r.weighted_avg] {
                    for v in [m.precision, m.recall, m.f1] {
                        prop_assert!((0.0..=1.0).contains(&v));
                    }
                }
            }
        }
    }
}
