//! Ablation suites: a base config plus named variants, each trained and
//! evaluated on the validation split with the test filter on and off.
//!
//! ```text
//! iterations = 2000        # applies to every variant
//! [variant.base]
//! [variant.mid_tap]
//! backbone.gap_tap = mid
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::config::{ConfigDoc, Entry};
use crate::error::{Error, Result};
use crate::synthdata::Dataset;

use super::{background_baseline, evaluate, train, InferOptions, StepLog, TrainConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSuite {
    pub variants: Vec<Variant>,
}

const VARIANT_PREFIX: &str = "variant.";

pub fn parse_suite(text: &str) -> Result<AblationSuite> {
    let doc = ConfigDoc::parse(text)?;
    let mut base = TrainConfig::default();
    let mut names: Vec<String> = Vec::new();
    for s in &doc.sections {
        if let Some(name) = s.strip_prefix(VARIANT_PREFIX) {
            if name.is_empty() || name.contains('.') {
                return Err(Error::InvalidArgument(format!("invalid variant section `[{s}]`")));
            }
            names.push(name.to_string());
        }
    }
    let mut overrides: Vec<Vec<Entry>> = vec![Vec::new(); names.len()];
    for e in &doc.entries {
        match e.key.strip_prefix(VARIANT_PREFIX) {
            Some(rest) => {
                let (name, key) = rest.split_once('.').expect("variant sections have names");
                let i = names.iter().position(|n| n == name).expect("section recorded");
                overrides[i].push(Entry {
                    key: key.to_string(),
                    ..e.clone()
                });
            }
            None => base.apply(e)?,
        }
    }
    if names.is_empty() {
        return Err(Error::InvalidArgument("the suite declares no [variant.NAME] sections".into()));
    }
    let variants = names
        .into_iter()
        .zip(overrides)
        .map(|(name, entries)| {
            let mut config = base.clone();
            for e in &entries {
                config.apply(e)?;
            }
            Ok(Variant { name, config })
        })
        .collect::<Result<_>>()?;
    Ok(AblationSuite { variants })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub miou_filter: f64,
    pub miou_no_filter: f64,
    pub pca_filter: f64,
}

impl AblationRow {
    pub fn filter_delta(&self) -> f64 {
        self.miou_filter - self.miou_no_filter
    }
}

/// Trains every variant in order. With `out`, each run lands in `out/NAME`
/// and the table in `out/ablation.csv`. `progress` sees `(variant, step)`.
pub fn run_suite(
    data: &Dataset,
    suite: &AblationSuite,
    out: Option<&Path>,
    mut progress: impl FnMut(&str, &StepLog),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    let val = data.val();
    for v in &suite.variants {
        let dir = out.map(|o| o.join(&v.name));
        let run = train(data, v.config.clone(), dir.as_deref(), |s| progress(&v.name, s))?;
        let on = evaluate(&run.model, val, InferOptions { filter: true, crf: true })?;
        let off = evaluate(&run.model, val, InferOptions { filter: false, crf: true })?;
        if let Some(d) = &dir {
            let p = d.join("report_filter.csv");
            fs::write(&p, on.to_csv()).map_err(|e| Error::io(&p, e))?;
            let p = d.join("report_no_filter.csv");
            fs::write(&p, off.to_csv()).map_err(|e| Error::io(&p, e))?;
        }
        rows.push(AblationRow {
            name: v.name.clone(),
            miou_filter: on.miou,
            miou_no_filter: off.miou,
            pca_filter: on.pca,
        });
    }
    if let Some(o) = out {
        let baseline = background_baseline(val, data.num_classes)?;
        let p = o.join("ablation.csv");
        fs::write(&p, table_csv(&rows, baseline.miou)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(rows)
}

pub fn table_csv(rows: &[AblationRow], baseline_miou: f64) -> String {
    let mut s = String::from("variant,miou_filter,miou_no_filter,filter_delta,pca_filter\n");
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            r.name,
            r.miou_filter,
            r.miou_no_filter,
            r.filter_delta(),
            r.pca_filter
        )
        .unwrap();
    }
    writeln!(s, "background_baseline,{baseline_miou:.6},{baseline_miou:.6},0,").unwrap();
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::SwitchMode;

    #[test]
    fn variants_inherit_base() {
        let suite = parse_suite("iterations = 7\n[variant.a]\n[variant.b]\nswitch.mode = none\n").unwrap();
        assert_eq!(suite.variants.len(), 2);
        assert_eq!(suite.variants[0].config.iterations, 7);
        assert_eq!(suite.variants[1].config.iterations, 7);
        assert_eq!(suite.variants[1].config.switch.mode, SwitchMode::None);
        assert_eq!(suite.variants[0].config.switch.mode, SwitchMode::Adaptive);
    }

    #[test]
    fn bad_override_reports_line() {
        let err = parse_suite("[variant.a]\nnope = 1\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
        assert!(parse_suite("iterations = 3\n").is_err());
    }
}
