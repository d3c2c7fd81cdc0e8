//! Ablation grids: named configuration deltas run against a common base,
//! collected into a ranked results table.

use std::path::Path;

use crate::config::RunConfig;
use crate::data::ImageSet;
use crate::error::{Error, Result};
use crate::experiment::run_experiment;

/// Keys (or key prefixes ending in `.`) a grid row may change.
pub const WHITELIST: [&str; 16] = [
    "loss.family",
    "loss.temperature",
    "loss.beta",
    "loss.use_predictor",
    "loss.closed_form_predictor",
    "loss.target_mode",
    "loss.normalization",
    "loss.scale",
    "optim.tau_base",
    "optim.tau_schedule",
    "optim.batch_size",
    "optim.accumulation",
    "optim.predictor_lr_mult",
    "optim.projector_lr_mult",
    "aug.t.",
    "aug.tp.",
];

pub fn whitelisted(key: &str) -> bool {
    WHITELIST.iter().any(|w| if w.ends_with('.') { key.starts_with(w) } else { key == *w })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub name: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AblationGrid {
    pub rows: Vec<GridRow>,
}

impl AblationGrid {
    pub fn push(&mut self, name: &str, overrides: &[(&str, &str)]) -> Result<()> {
        for (k, _) in overrides {
            if !whitelisted(k) {
                return Err(Error::InvalidArgument(format!("grid row {name}: key {k} is not an ablation axis")));
            }
        }
        self.rows.push(GridRow {
            name: name.to_string(),
            overrides: overrides.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        });
        Ok(())
    }

    /// The eight (predictor, target network, β) combinations between the
    /// bootstrap and contrastive objectives.
    pub fn byol_to_simclr() -> Self {
        let mut g = Self::default();
        let rows = [
            ("byol", true, true, "0"),
            ("pred+target+neg", true, true, "1"),
            ("target+neg", false, true, "1"),
            ("simclr", false, false, "1"),
            ("pred+neg", true, false, "1"),
            ("pred", true, false, "0"),
            ("target", false, true, "0"),
            ("none", false, false, "0"),
        ];
        for (name, pred, target, beta) in rows {
            g.push(
                name,
                &[
                    ("loss.family", "infonce"),
                    ("loss.use_predictor", if pred { "true" } else { "false" }),
                    ("loss.target_mode", if target { "xi" } else { "theta" }),
                    ("loss.beta", beta),
                ],
            )
            .expect("whitelisted");
        }
        g
    }

    /// Parses `name: key=value key=value ...` lines.
    pub fn parse(text: &str) -> Result<Self> {
        let mut g = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (name, rest) = line.split_once(':').ok_or_else(|| Error::Config {
                line: i + 1,
                message: "expected `name: key=value ...`".into(),
            })?;
            let mut pairs = Vec::new();
            for item in rest.split_whitespace() {
                let (k, v) = item.split_once('=').ok_or_else(|| Error::Config {
                    line: i + 1,
                    message: format!("{item:?} is not key=value"),
                })?;
                pairs.push((k, v));
            }
            g.push(name.trim(), &pairs).map_err(|e| Error::Config { line: i + 1, message: e.to_string() })?;
        }
        Ok(g)
    }

    pub fn configs(&self, base: &RunConfig) -> Vec<(String, Result<RunConfig>)> {
        self.rows
            .iter()
            .map(|row| {
                let mut c = base.clone();
                let applied = row.overrides.iter().try_for_each(|(k, v)| c.set(k, v)).and_then(|_| c.validate());
                (row.name.clone(), applied.map(|_| c))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridResult {
    pub name: String,
    pub predictor: bool,
    pub target: String,
    pub beta: f64,
    pub accuracy: Option<f64>,
    pub mean_std: Option<f64>,
    pub effective_rank: Option<f64>,
    pub error: Option<String>,
}

/// Runs every row (up to `threads` at a time) and returns the rows ranked
/// by probe accuracy, failures last. Row order within equal accuracy
/// follows the grid.
pub fn run_grid(
    base: &RunConfig,
    grid: &AblationGrid,
    train: &ImageSet,
    test: &ImageSet,
    out_dir: Option<&Path>,
    threads: usize,
) -> Vec<GridResult> {
    let jobs = grid.configs(base);
    let run_one = |(name, config): &(String, Result<RunConfig>)| -> GridResult {
        let (predictor, target, beta) = match config {
            Ok(c) => (c.loss.use_predictor, c.loss.target_mode.as_str().to_string(), c.loss.beta),
            Err(_) => (false, String::new(), f64::NAN),
        };
        let outcome = config.as_ref().map_err(|e| e.to_string()).and_then(|c| {
            let dir = out_dir.map(|d| d.join(name));
            run_experiment(c, train, test, dir.as_deref()).map_err(|e| e.to_string())
        });
        match outcome {
            Ok(r) => GridResult {
                name: name.clone(),
                predictor,
                target,
                beta,
                accuracy: Some(r.evaluation.probe.accuracy),
                mean_std: Some(r.evaluation.collapse.mean_std),
                effective_rank: Some(r.evaluation.collapse.effective_rank),
                error: None,
            },
            Err(e) => GridResult {
                name: name.clone(),
                predictor,
                target,
                beta,
                accuracy: None,
                mean_std: None,
                effective_rank: None,
                error: Some(e),
            },
        }
    };
    let mut results: Vec<GridResult> = Vec::with_capacity(jobs.len());
    for chunk in jobs.chunks(threads.max(1)) {
        if chunk.len() == 1 {
            results.push(run_one(&chunk[0]));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|job| s.spawn(|| run_one(job))).collect();
            results.extend(handles.into_iter().map(|h| h.join().expect("grid worker panicked")));
        });
    }
    let key = |r: &GridResult| r.accuracy.unwrap_or(f64::NEG_INFINITY);
    results.sort_by(|a, b| key(b).total_cmp(&key(a)));
    results
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

pub const TABLE_COLUMNS: [&str; 8] =
    ["name", "predictor", "target", "beta", "accuracy", "mean_std", "effective_rank", "error"];

fn cells(r: &GridResult) -> [String; 8] {
    [
        r.name.clone(),
        if r.predictor { "yes".into() } else { "no".into() },
        r.target.clone(),
        r.beta.to_string(),
        fmt_opt(r.accuracy.map(|a| 100.0 * a), 1),
        fmt_opt(r.mean_std, 4),
        fmt_opt(r.effective_rank, 2),
        r.error.clone().unwrap_or_default(),
    ]
}

pub fn to_csv(results: &[GridResult]) -> String {
    let mut out = TABLE_COLUMNS.join(",") + "\n";
    for r in results {
        let row = cells(r).map(|c| if c.contains(',') { format!("\"{}\"", c.replace('"', "\"\"")) } else { c });
        out += &(row.join(",") + "\n");
    }
    out
}

/// Column-aligned rendering; accuracy in percent.
pub fn to_text(results: &[GridResult]) -> String {
    let rows: Vec<[String; 8]> = results.iter().map(cells).collect();
    let mut widths = TABLE_COLUMNS.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect::<Vec<_>>().join("  ").trim_end().to_string()
            + "\n"
    };
    let header: Vec<String> = TABLE_COLUMNS.iter().map(|s| s.to_string()).collect();
    let mut out = line(&header);
    out += &(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  ") + "\n");
    for r in &rows {
        out += &line(r);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn whitelist_rejects_architecture_changes() {
        let mut g = AblationGrid::default();
        assert!(g.push("bad", &[("model.projection_dim", "8")]).is_err());
        g.push("ok", &[("aug.t.blur_prob", "0"), ("optim.tau_base", "1")]).unwrap();
    }

    #[test]
    fn parse_grid_text() {
        let g = AblationGrid::parse("# rows\nbyol: loss.beta=0\nsimclr: loss.beta=1 loss.use_predictor=false\n").unwrap();
        assert_eq!(g.rows.len(), 2);
        assert_eq!(g.rows[1].overrides[1], ("loss.use_predictor".into(), "false".into()));
        assert!(AblationGrid::parse("x: model.encoder=mlp").is_err());
    }

    #[test]
    fn eight_variant_rows() {
        let g = AblationGrid::byol_to_simclr();
        assert_eq!(g.rows.len(), 8);
        let configs = g.configs(&RunConfig::desk());
        let tags: std::collections::HashSet<_> = configs
            .iter()
            .map(|(_, c)| {
                let c = c.as_ref().unwrap();
                (c.loss.use_predictor, c.loss.target_mode.as_str(), c.loss.beta.to_bits())
            })
            .collect();
        assert_eq!(tags.len(), 8);
    }

    #[test]
    fn empty_grid_gives_empty_table() {
        let set = ImageSet::empty(3, 4, 4);
        let r = run_grid(&RunConfig::desk(), &AblationGrid::default(), &set, &set, None, 1);
        assert!(r.is_empty());
        assert_eq!(to_csv(&r).lines().count(), 1);
        assert_eq!(to_text(&r).lines().count(), 2);
    }
}
