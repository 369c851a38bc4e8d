//! Evaluation metrics over 5-class confusion matrices.
//!
//! Per-class values come from one-vs-rest reductions: sensitivity
//! TP/(TP+FN), specificity TN/(TN+FP), F1 from precision and recall, G-mean
//! sqrt(specificity x sensitivity). Macro metrics are unweighted means over
//! the five classes; kappa is Cohen's (p_o - p_e)/(1 - p_e) with chance
//! agreement from the marginal products.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::labels::AasmStage;

pub const NUM_CLASSES: usize = 5;

/// Row = true class, column = predicted class.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= NUM_CLASSES || pred >= NUM_CLASSES {
            return Err(Error::Input(format!(
                "class index out of range: true={truth} pred={pred}"
            )));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, r: usize) -> u64 {
        self.counts[r].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..NUM_CLASSES).map(|r| self.counts[r][c]).sum()
    }

    /// Elementwise addition; confusion matrices merge as a monoid so
    /// parallel workers can accumulate locally.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for r in 0..NUM_CLASSES {
            for c in 0..NUM_CLASSES {
                self.counts[r][c] += other.counts[r][c];
            }
        }
    }

    pub fn from_pairs(pairs: &[(usize, usize)]) -> Result<Self> {
        let mut cm = Self::new();
        for &(t, p) in pairs {
            cm.accumulate(t, p)?;
        }
        Ok(cm)
    }

    /// Write as CSV with a header row of predicted-class names.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        write!(f, "true\\pred")?;
        for s in AasmStage::ALL {
            write!(f, ",{}", s.name())?;
        }
        writeln!(f)?;
        for (r, row) in self.counts.iter().enumerate() {
            write!(f, "{}", AasmStage::ALL[r].name())?;
            for v in row {
                write!(f, ",{v}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// The metric set reported for one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub acc: f64,
    pub kappa: f64,
    pub mf1: f64,
    pub sens: f64,
    pub spec: f64,
    pub mgm: f64,
    pub per_class_f1: [f64; NUM_CLASSES],
    /// Classes absent from both rows and columns; their per-class metrics are
    /// 0 by convention.
    pub absent_classes: Vec<usize>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Cohen's kappa. Undefined when expected agreement is 1; reported as 1 when
/// observed agreement is also 1, otherwise an error.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Input("empty confusion matrix".into()));
    }
    let n = total as f64;
    let p_o = cm.trace() as f64 / n;
    let p_e = (0..NUM_CLASSES)
        .map(|i| (cm.row_sum(i) as f64 / n) * (cm.col_sum(i) as f64 / n))
        .sum::<f64>();
    if (1.0 - p_e).abs() < 1e-15 {
        if (1.0 - p_o).abs() < 1e-15 {
            return Ok(1.0);
        }
        return Err(Error::Input(
            "kappa undefined: expected agreement is 1 but observed is not".into(),
        ));
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Input("empty confusion matrix".into()));
    }
    let n = total as f64;
    let acc = cm.trace() as f64 / n;

    let mut per_class_f1 = [0f64; NUM_CLASSES];
    let mut sens_sum = 0.0;
    let mut spec_sum = 0.0;
    let mut gm_sum = 0.0;
    let mut absent_classes = Vec::new();
    for c in 0..NUM_CLASSES {
        let tp = cm.count(c, c) as f64;
        let fn_ = cm.row_sum(c) as f64 - tp;
        let fp = cm.col_sum(c) as f64 - tp;
        let tn = n - tp - fn_ - fp;
        if cm.row_sum(c) == 0 && cm.col_sum(c) == 0 {
            absent_classes.push(c);
            log::warn!(
                "event=absent_class class={} detail=\"per-class metrics set to 0\"",
                AasmStage::ALL[c].name()
            );
        }
        let sens = ratio(tp, tp + fn_);
        let spec = ratio(tn, tn + fp);
        let precision = ratio(tp, tp + fp);
        per_class_f1[c] = ratio(2.0 * precision * sens, precision + sens);
        sens_sum += sens;
        spec_sum += spec;
        gm_sum += (spec * sens).sqrt();
    }
    let k = NUM_CLASSES as f64;
    Ok(Metrics {
        acc,
        kappa: kappa(cm)?,
        mf1: per_class_f1.iter().sum::<f64>() / k,
        sens: sens_sum / k,
        spec: spec_sum / k,
        mgm: gm_sum / k,
        per_class_f1,
        absent_classes,
    })
}

impl Metrics {
    /// Fixed-schema JSON with 6-decimal fixed formatting.
    pub fn to_json(&self) -> String {
        let f = |v: f64| format!("{v:.6}");
        let mut s = String::from("{\n");
        s.push_str(&format!("  \"acc\": {},\n", f(self.acc)));
        s.push_str(&format!("  \"kappa\": {},\n", f(self.kappa)));
        s.push_str(&format!("  \"mf1\": {},\n", f(self.mf1)));
        s.push_str(&format!("  \"sens\": {},\n", f(self.sens)));
        s.push_str(&format!("  \"spec\": {},\n", f(self.spec)));
        s.push_str(&format!("  \"mgm\": {},\n", f(self.mgm)));
        s.push_str("  \"per_class_f1\": {\n");
        for (i, stage) in AasmStage::ALL.iter().enumerate() {
            let sep = if i + 1 < NUM_CLASSES { "," } else { "" };
            s.push_str(&format!(
                "    \"{}\": {}{}\n",
                stage.name(),
                f(self.per_class_f1[i]),
                sep
            ));
        }
        s.push_str("  }\n}\n");
        s
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}
