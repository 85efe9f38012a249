//! Run configuration: a flat key=value file with `[section]` headers.
//! Unknown sections and keys are rejected so a typo cannot silently
//! fall back to a default.

use std::path::{Path, PathBuf};

use ecf_core::trainer::{TrainConfig, DEFAULT_FOREST_SIZE};
use ecf_core::{EcfError, Result};

const SECTIONS: [&str; 5] = ["data", "model", "train", "output", "baselines"];

/// Everything a run needs: data locations, model shape, training
/// schedule, and the output directory. Every default matches the
/// library defaults, so an empty file is a valid configuration for
/// everything except paths.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub interactions: Option<PathBuf>,
    pub tags: Option<PathBuf>,
    pub prepared_dir: Option<PathBuf>,
    pub kcore: usize,
    pub min_tag_items: usize,
    pub train_ratio: f64,
    pub val_ratio: f64,
    pub test_ratio: f64,
    /// Model hyperparameters ride inside the training config.
    pub train: TrainConfig,
    pub forest_size: usize,
    pub out_dir: Option<PathBuf>,
    /// Minimum size the tag-overlap baseline relaxes toward.
    pub size_threshold: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            interactions: None,
            tags: None,
            prepared_dir: None,
            kcore: 10,
            min_tag_items: 10,
            train_ratio: 0.8,
            val_ratio: 0.1,
            test_ratio: 0.1,
            train: TrainConfig::default(),
            forest_size: DEFAULT_FOREST_SIZE,
            out_dir: None,
            size_threshold: 10,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EcfError::Data(format!("{}: {}", path.display(), e)))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut section: Option<String> = None;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: String| EcfError::Parse {
                path: origin.to_string(),
                line: idx + 1,
                msg,
            };
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let Some(name) = rest.strip_suffix(']') else {
                    return Err(err("unterminated section header".into()));
                };
                let name = name.trim();
                if !SECTIONS.contains(&name) {
                    return Err(err(format!("unknown section [{}]", name)));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, val)) = line.split_once('=') else {
                return Err(err("expected key = value".into()));
            };
            let Some(section) = section.as_deref() else {
                return Err(err("key before any [section]".into()));
            };
            cfg.set(section, key.trim(), val.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, val: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, val: &str) -> std::result::Result<T, String> {
            val.parse()
                .map_err(|_| format!("bad value {:?} for {}", val, key))
        }
        match (section, key) {
            ("data", "interactions") => self.interactions = Some(PathBuf::from(val)),
            ("data", "tags") => self.tags = Some(PathBuf::from(val)),
            ("data", "dir") => self.prepared_dir = Some(PathBuf::from(val)),
            ("data", "kcore") => self.kcore = num(key, val)?,
            ("data", "min_tag_items") => self.min_tag_items = num(key, val)?,
            ("data", "train_ratio") => self.train_ratio = num(key, val)?,
            ("data", "val_ratio") => self.val_ratio = num(key, val)?,
            ("data", "test_ratio") => self.test_ratio = num(key, val)?,
            ("model", "num_clusters") => self.train.hp.num_clusters = num(key, val)?,
            ("model", "embed_dim") => self.train.hp.embed_dim = num(key, val)?,
            ("model", "item_top_m") => self.train.hp.item_top_m = num(key, val)?,
            ("model", "user_top_n") => self.train.hp.user_top_n = num(key, val)?,
            ("model", "tags_per_cluster") => self.train.hp.tags_per_cluster = num(key, val)?,
            ("model", "temp_st") => self.train.hp.temp_st = num(key, val)?,
            ("model", "temp_tag") => self.train.hp.temp_tag = num(key, val)?,
            ("model", "lambda_cf") => self.train.hp.lambda_cf = num(key, val)?,
            ("model", "st_mode") => self.train.hp.st_mode = num(key, val)?,
            ("model", "tag_softmax") => self.train.hp.tag_softmax = num(key, val)?,
            ("model", "user_agg") => self.train.hp.user_agg = num(key, val)?,
            ("model", "ind_loss") => self.train.hp.ind_loss = num(key, val)?,
            ("train", "epochs_max") => self.train.epochs_max = num(key, val)?,
            ("train", "batch_size") => self.train.batch_size = num(key, val)?,
            ("train", "patience") => self.train.patience = num(key, val)?,
            ("train", "eval_k") => self.train.eval_k = num(key, val)?,
            ("train", "learning_rate") => self.train.learning_rate = num(key, val)?,
            ("train", "seed") => self.train.seed = num(key, val)?,
            ("train", "tag_dist_scope") => self.train.tag_dist_scope = num(key, val)?,
            ("train", "activated_only") => self.train.activated_only = num(key, val)?,
            ("train", "forest_size") => self.forest_size = num(key, val)?,
            ("output", "dir") => self.out_dir = Some(PathBuf::from(val)),
            ("baselines", "size_threshold") => self.size_threshold = num(key, val)?,
            _ => return Err(format!("unknown key {}.{}", section, key)),
        }
        Ok(())
    }

    pub fn require_interactions(&self) -> Result<&Path> {
        require(&self.interactions, "data.interactions")
    }

    pub fn require_tags(&self) -> Result<&Path> {
        require(&self.tags, "data.tags")
    }

    pub fn require_prepared_dir(&self) -> Result<&Path> {
        require(&self.prepared_dir, "data.dir")
    }

    pub fn require_out_dir(&self) -> Result<&Path> {
        require(&self.out_dir, "output.dir")
    }
}

fn require<'a>(field: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    field
        .as_deref()
        .ok_or_else(|| EcfError::Config(format!("missing config key {}", key)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ecf_core::model::{IndLoss, StMode};
    use ecf_core::trainer::TagDistScope;

    #[test]
    fn empty_text_gives_library_defaults() {
        let cfg = RunConfig::parse("", "test").unwrap();
        assert_eq!(cfg.train.hp.num_clusters, 64);
        assert_eq!(cfg.train.hp.item_top_m, 20);
        assert_eq!(cfg.train.hp.user_top_n, 20);
        assert_eq!(cfg.train.hp.tags_per_cluster, 4);
        assert_eq!(cfg.train.hp.temp_st, 2.0);
        assert_eq!(cfg.train.hp.temp_tag, 2.0);
        assert_eq!(cfg.train.hp.lambda_cf, 0.6);
        assert_eq!(cfg.train.batch_size, 1024);
        assert_eq!(cfg.train.patience, 10);
        assert_eq!(cfg.forest_size, 9);
        assert_eq!(cfg.kcore, 10);
        assert_eq!((cfg.train_ratio, cfg.val_ratio, cfg.test_ratio), (0.8, 0.1, 0.1));
    }

    #[test]
    fn sections_route_keys_and_later_values_win() {
        let text = "\
[data]
dir = prepared
# comment line
kcore = 3

[model]
num_clusters = 8
st_mode = sigmoid_only
ind_loss = distance_correlation

[train]
seed = 42
tag_dist_scope = batch
activated_only = false
seed = 43
";
        let cfg = RunConfig::parse(text, "test").unwrap();
        assert_eq!(cfg.prepared_dir.as_deref(), Some(Path::new("prepared")));
        assert_eq!(cfg.kcore, 3);
        assert_eq!(cfg.train.hp.num_clusters, 8);
        assert_eq!(cfg.train.hp.st_mode, StMode::SigmoidOnly);
        assert_eq!(cfg.train.hp.ind_loss, IndLoss::DistanceCorrelation);
        assert_eq!(cfg.train.seed, 43);
        assert_eq!(cfg.train.tag_dist_scope, TagDistScope::Batch);
        assert!(!cfg.train.activated_only);
    }

    #[test]
    fn unknown_keys_sections_and_bad_values_are_rejected() {
        let cases = [
            ("[data]\nnope = 1\n", "unknown key data.nope"),
            ("[nope]\n", "unknown section"),
            ("kcore = 3\n", "before any"),
            ("[train]\nseed = abc\n", "bad value"),
            ("[train]\nbroken line\n", "key = value"),
            ("[model\n", "unterminated"),
            ("[model]\nst_mode = maybe\n", "bad value"),
        ];
        for (text, needle) in cases {
            let err = RunConfig::parse(text, "test").unwrap_err().to_string();
            assert!(err.contains(needle), "{:?} missing {:?}", err, needle);
            assert!(err.contains("test:"), "{:?} lacks location", err);
        }
    }

    #[test]
    fn missing_paths_are_named_errors() {
        let cfg = RunConfig::parse("", "test").unwrap();
        for (got, key) in [
            (cfg.require_interactions().unwrap_err(), "data.interactions"),
            (cfg.require_tags().unwrap_err(), "data.tags"),
            (cfg.require_prepared_dir().unwrap_err(), "data.dir"),
            (cfg.require_out_dir().unwrap_err(), "output.dir"),
        ] {
            assert!(got.to_string().contains(key), "{}", got);
        }
    }
}
