//! Implicit-feedback dataset handling: TSV loaders, k-core filtering,
//! per-user splits, BPR triplet sampling, and item-tag matrices.
//!
//! Users, items, and tags get dense indices assigned alphabetically by
//! original id, which keeps indices (and therefore rewritten files) stable
//! no matter how the input lines are ordered. All readers skip blank lines
//! and `#`-prefixed comments and tolerate a trailing newline.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{EcfError, Result};
use crate::tensor::Tensor;

/// Reserved tag given to items left tagless after rare-tag filtering.
pub const UNTAGGED: &str = "untagged";

const IDF_DAMP: f64 = 1e-6;

/// Which split an interaction belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Deduplicated user-item interactions with dense indices and a
/// train/val/test assignment. A freshly loaded dataset has every
/// interaction in train until `split` is applied.
#[derive(Clone, Debug)]
pub struct InteractionDataset {
    user_ids: Vec<String>,
    item_ids: Vec<String>,
    /// Sorted by (user, item); disjoint across splits.
    train: Vec<(u32, u32)>,
    val: Vec<(u32, u32)>,
    test: Vec<(u32, u32)>,
    /// Per-user sorted item lists.
    user_items: Vec<Vec<u32>>,
    user_train_items: Vec<Vec<u32>>,
    user_val_items: Vec<Vec<u32>>,
    user_test_items: Vec<Vec<u32>>,
}

impl InteractionDataset {
    /// Reads "user<TAB>item" lines; all interactions land in train.
    pub fn load(path: &Path) -> Result<Self> {
        let pairs = read_pair_file(path)?;
        if pairs.is_empty() {
            return Err(EcfError::Data(format!(
                "{}: no interactions",
                path.display()
            )));
        }
        Self::from_raw(vec![(pairs, Split::Train)])
    }

    /// Reads three split files sharing one id space. Train must be
    /// non-empty; val and test may be empty. A pair present in two files
    /// is an error.
    pub fn load_split(train: &Path, val: &Path, test: &Path) -> Result<Self> {
        let train_pairs = read_pair_file(train)?;
        if train_pairs.is_empty() {
            return Err(EcfError::Data(format!(
                "{}: no interactions",
                train.display()
            )));
        }
        Self::from_raw(vec![
            (train_pairs, Split::Train),
            (read_pair_file(val)?, Split::Val),
            (read_pair_file(test)?, Split::Test),
        ])
    }

    /// Builds from hand-assembled original-id pairs. Dense indices are
    /// the alphabetical ranks of the ids involved.
    pub fn from_raw(sections: Vec<(Vec<(String, String)>, Split)>) -> Result<Self> {
        let mut user_ids: Vec<String> = sections
            .iter()
            .flat_map(|(pairs, _)| pairs.iter().map(|(u, _)| u.clone()))
            .collect();
        user_ids.sort_unstable();
        user_ids.dedup();
        let mut item_ids: Vec<String> = sections
            .iter()
            .flat_map(|(pairs, _)| pairs.iter().map(|(_, i)| i.clone()))
            .collect();
        item_ids.sort_unstable();
        item_ids.dedup();
        let user_index: HashMap<&str, u32> = user_ids
            .iter()
            .enumerate()
            .map(|(pos, id)| (id.as_str(), pos as u32))
            .collect();
        let item_index: HashMap<&str, u32> = item_ids
            .iter()
            .enumerate()
            .map(|(pos, id)| (id.as_str(), pos as u32))
            .collect();
        let mut assigned: HashMap<(u32, u32), Split> = HashMap::new();
        let mut by_split: [Vec<(u32, u32)>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for (pairs, split) in &sections {
            for (user, item) in pairs {
                let pair = (user_index[user.as_str()], item_index[item.as_str()]);
                match assigned.get(&pair) {
                    None => {
                        assigned.insert(pair, *split);
                        by_split[*split as usize].push(pair);
                    }
                    // Duplicate within one split deduplicates silently.
                    Some(prev) if prev == split => {}
                    Some(_) => {
                        return Err(EcfError::Data(format!(
                            "interaction ({}, {}) assigned to two splits",
                            user, item
                        )));
                    }
                }
            }
        }
        let [train, val, test] = by_split;
        Ok(Self::assemble(user_ids, item_ids, train, val, test))
    }

    fn assemble(
        user_ids: Vec<String>,
        item_ids: Vec<String>,
        mut train: Vec<(u32, u32)>,
        mut val: Vec<(u32, u32)>,
        mut test: Vec<(u32, u32)>,
    ) -> Self {
        train.sort_unstable();
        val.sort_unstable();
        test.sort_unstable();
        let n_users = user_ids.len();
        let per_user = |pairs: &[(u32, u32)]| {
            let mut rows: Vec<Vec<u32>> = vec![Vec::new(); n_users];
            for &(u, i) in pairs {
                rows[u as usize].push(i);
            }
            rows.iter_mut().for_each(|r| r.sort_unstable());
            rows
        };
        let mut all = train.clone();
        all.extend_from_slice(&val);
        all.extend_from_slice(&test);
        let user_items = per_user(&all);
        let user_train_items = per_user(&train);
        let user_val_items = per_user(&val);
        let user_test_items = per_user(&test);
        InteractionDataset {
            user_ids,
            item_ids,
            train,
            val,
            test,
            user_items,
            user_train_items,
            user_val_items,
            user_test_items,
        }
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn user_ids(&self) -> &[String] {
        &self.user_ids
    }

    pub fn item_ids(&self) -> &[String] {
        &self.item_ids
    }

    pub fn train_pairs(&self) -> &[(u32, u32)] {
        &self.train
    }

    pub fn val_pairs(&self) -> &[(u32, u32)] {
        &self.val
    }

    pub fn test_pairs(&self) -> &[(u32, u32)] {
        &self.test
    }

    /// All items of a user, sorted.
    pub fn user_items(&self, u: u32) -> &[u32] {
        &self.user_items[u as usize]
    }

    pub fn user_train_items(&self, u: u32) -> &[u32] {
        &self.user_train_items[u as usize]
    }

    pub fn user_val_items(&self, u: u32) -> &[u32] {
        &self.user_val_items[u as usize]
    }

    pub fn user_test_items(&self, u: u32) -> &[u32] {
        &self.user_test_items[u as usize]
    }

    pub fn user_dense_index(&self, original: &str) -> Option<u32> {
        self.user_ids
            .binary_search_by(|s| s.as_str().cmp(original))
            .ok()
            .map(|p| p as u32)
    }

    pub fn item_dense_index(&self, original: &str) -> Option<u32> {
        self.item_ids
            .binary_search_by(|s| s.as_str().cmp(original))
            .ok()
            .map(|p| p as u32)
    }

    /// Iterative k-core: peels users and items with fewer than k
    /// interactions until a fixpoint, then re-densifies indices (relative
    /// order preserved). The split assignment resets to all-train.
    pub fn kcore_filtered(&self, k: usize) -> Result<Self> {
        let mut pairs: Vec<(u32, u32)> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .copied()
            .collect();
        loop {
            let mut user_deg = vec![0usize; self.user_ids.len()];
            let mut item_deg = vec![0usize; self.item_ids.len()];
            for &(u, i) in &pairs {
                user_deg[u as usize] += 1;
                item_deg[i as usize] += 1;
            }
            let before = pairs.len();
            pairs.retain(|&(u, i)| user_deg[u as usize] >= k && item_deg[i as usize] >= k);
            if pairs.len() == before {
                break;
            }
        }
        if pairs.is_empty() {
            return Err(EcfError::Data(format!(
                "{}-core filtering removed every interaction",
                k
            )));
        }
        let mut user_map = vec![u32::MAX; self.user_ids.len()];
        let mut item_map = vec![u32::MAX; self.item_ids.len()];
        let mut user_ids = Vec::new();
        let mut item_ids = Vec::new();
        pairs.sort_unstable();
        for &(u, i) in &pairs {
            if user_map[u as usize] == u32::MAX {
                user_map[u as usize] = user_ids.len() as u32;
                user_ids.push(self.user_ids[u as usize].clone());
            }
            if item_map[i as usize] == u32::MAX {
                item_map[i as usize] = item_ids.len() as u32;
                item_ids.push(self.item_ids[i as usize].clone());
            }
        }
        let remapped: Vec<(u32, u32)> = pairs
            .iter()
            .map(|&(u, i)| (user_map[u as usize], item_map[i as usize]))
            .collect();
        Ok(Self::assemble(
            user_ids,
            item_ids,
            remapped,
            Vec::new(),
            Vec::new(),
        ))
    }

    /// Random per-user split. Users keep at least one train interaction;
    /// users with fewer than 3 interactions go entirely to train. The same
    /// seed over the same dataset reproduces the split exactly.
    pub fn split(&self, ratios: (f64, f64, f64), seed: u64) -> Result<Self> {
        let (r_train, r_val, r_test) = ratios;
        let sum = r_train + r_val + r_test;
        if !(r_train >= 0.0 && r_val >= 0.0 && r_test >= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(EcfError::Config(format!(
                "split ratios must be non-negative and sum to 1, got {:?}",
                ratios
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for u in 0..self.user_ids.len() as u32 {
            let mut items = self.user_items[u as usize].clone();
            let n = items.len();
            if n == 0 {
                continue;
            }
            if n < 3 {
                train.extend(items.iter().map(|&i| (u, i)));
                continue;
            }
            items.shuffle(&mut rng);
            let n_val = (n as f64 * r_val).floor() as usize;
            let mut n_test = (n as f64 * r_test).floor() as usize;
            // Keep at least one train interaction.
            while n_val + n_test >= n && n_test > 0 {
                n_test -= 1;
            }
            let n_val = n_val.min(n.saturating_sub(1 + n_test));
            let n_train = n - n_val - n_test;
            for (pos, &i) in items.iter().enumerate() {
                if pos < n_train {
                    train.push((u, i));
                } else if pos < n_train + n_val {
                    val.push((u, i));
                } else {
                    test.push((u, i));
                }
            }
        }
        Ok(Self::assemble(
            self.user_ids.clone(),
            self.item_ids.clone(),
            train,
            val,
            test,
        ))
    }
}

/// Uniform BPR triplets (user, positive, negative): positives uniform over
/// train interactions, negatives uniform over the user's non-interacted
/// items (resampled on collision). Users interacting with every item are
/// skipped with a warning.
pub fn sample_bpr_triplets<R: Rng>(
    ds: &InteractionDataset,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<(u32, u32, u32)>> {
    let train = ds.train_pairs();
    if train.is_empty() {
        return Err(EcfError::Data("no train interactions to sample".into()));
    }
    let num_items = ds.num_items() as u32;
    let mut out = Vec::with_capacity(batch_size);
    let mut attempts = 0usize;
    let budget = batch_size.saturating_mul(1000).max(1000);
    while out.len() < batch_size {
        attempts += 1;
        if attempts > budget {
            return Err(EcfError::Data(
                "negative sampling stalled: every sampled user interacts with every item".into(),
            ));
        }
        let &(u, i) = &train[rng.random_range(0..train.len())];
        let seen = ds.user_items(u);
        if seen.len() >= num_items as usize {
            warn!("user {} interacts with every item; skipped in sampling", u);
            continue;
        }
        let j = loop {
            let cand = rng.random_range(0..num_items);
            if seen.binary_search(&cand).is_err() {
                break cand;
            }
        };
        out.push((u, i, j));
    }
    Ok(out)
}

/// Binary item-tag incidence with alphabetical tag indices.
#[derive(Clone, Debug)]
pub struct ItemTagMatrix {
    tag_names: Vec<String>,
    /// Sorted tag indices per item; never empty.
    item_tags: Vec<Vec<u32>>,
    tag_frequency: Vec<u32>,
}

impl ItemTagMatrix {
    /// Reads "item<TAB>tag1|tag2|..." lines. Tags on fewer than
    /// `min_tag_items` items are dropped; items left tagless (or never
    /// mentioned) receive the reserved [`UNTAGGED`] tag. Unknown item ids
    /// are an error.
    pub fn load(path: &Path, min_tag_items: usize, ds: &InteractionDataset) -> Result<Self> {
        let item_index: HashMap<&str, u32> = ds
            .item_ids()
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i as u32))
            .collect();
        let mut raw_tags: Vec<Vec<String>> = vec![Vec::new(); ds.num_items()];
        let reader = open_text(path)?;
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            let Some(content) = data_line(&line) else {
                continue;
            };
            let mut fields = content.split('\t');
            let (Some(item), Some(tags), None) = (fields.next(), fields.next(), fields.next())
            else {
                return Err(parse_err(path, line_no, "expected item<TAB>tag[|tag...]"));
            };
            let Some(&idx) = item_index.get(item) else {
                return Err(parse_err(
                    path,
                    line_no,
                    &format!("unknown item id {:?}", item),
                ));
            };
            for tag in tags.split('|').filter(|t| !t.is_empty()) {
                let row = &mut raw_tags[idx as usize];
                if !row.iter().any(|t| t == tag) {
                    row.push(tag.to_string());
                }
            }
        }
        Ok(Self::from_raw(raw_tags, min_tag_items))
    }

    /// Core construction from per-item tag-name lists.
    pub fn from_raw(raw_tags: Vec<Vec<String>>, min_tag_items: usize) -> Self {
        let mut freq: HashMap<&str, u32> = HashMap::new();
        for row in &raw_tags {
            for tag in row {
                *freq.entry(tag).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<&str> = freq
            .iter()
            .filter(|&(_, &f)| f as usize >= min_tag_items)
            .map(|(&t, _)| t)
            .collect();
        let needs_untagged = raw_tags
            .iter()
            .any(|row| !row.iter().any(|t| kept.contains(&t.as_str())));
        if needs_untagged && !kept.contains(&UNTAGGED) {
            kept.push(UNTAGGED);
        }
        kept.sort_unstable();
        let index: HashMap<&str, u32> = kept
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, i as u32))
            .collect();
        let untagged_idx = index.get(UNTAGGED).copied();
        let mut item_tags: Vec<Vec<u32>> = Vec::with_capacity(raw_tags.len());
        for row in &raw_tags {
            let mut ids: Vec<u32> = row
                .iter()
                .filter_map(|t| index.get(t.as_str()).copied())
                .collect();
            if ids.is_empty() {
                ids.push(untagged_idx.expect("tagless item implies reserved tag"));
            }
            ids.sort_unstable();
            ids.dedup();
            item_tags.push(ids);
        }
        let mut tag_frequency = vec![0u32; kept.len()];
        for row in &item_tags {
            for &t in row {
                tag_frequency[t as usize] += 1;
            }
        }
        ItemTagMatrix {
            tag_names: kept.into_iter().map(String::from).collect(),
            item_tags,
            tag_frequency,
        }
    }

    pub fn num_items(&self) -> usize {
        self.item_tags.len()
    }

    pub fn num_tags(&self) -> usize {
        self.tag_names.len()
    }

    pub fn tag_names(&self) -> &[String] {
        &self.tag_names
    }

    pub fn tag_name(&self, t: u32) -> &str {
        &self.tag_names[t as usize]
    }

    /// Sorted tag indices of an item; never empty.
    pub fn item_tags(&self, item: u32) -> &[u32] {
        &self.item_tags[item as usize]
    }

    /// Items carrying each tag.
    pub fn tag_frequency(&self) -> &[u32] {
        &self.tag_frequency
    }

    pub fn item_has_tag(&self, item: u32, tag: u32) -> bool {
        self.item_tags[item as usize].binary_search(&tag).is_ok()
    }

    /// Dense binary incidence (items x tags).
    pub fn to_dense(&self) -> Tensor {
        let mut e = Tensor::zeros(self.num_items(), self.num_tags());
        for (i, row) in self.item_tags.iter().enumerate() {
            for &t in row {
                e.set(i, t as usize, 1.0);
            }
        }
        e
    }
}

/// Smoothed inverse document frequency per tag: ln(N / (f_t + 1e-6)).
#[derive(Clone, Debug)]
pub struct IdfWeights {
    weights: Vec<f64>,
}

impl IdfWeights {
    pub fn new(weights: Vec<f64>) -> Self {
        IdfWeights { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Row vector (1 x tags) for broadcasting.
    pub fn to_row(&self) -> Tensor {
        Tensor::from_vec(1, self.weights.len(), self.weights.clone())
            .expect("length matches by construction")
    }
}

pub fn compute_idf(tags: &ItemTagMatrix) -> IdfWeights {
    let n = tags.num_items() as f64;
    let weights = tags
        .tag_frequency()
        .iter()
        .map(|&f| (n / (f as f64 + IDF_DAMP)).ln())
        .collect();
    IdfWeights { weights }
}

/// Writes the prepared dataset: split TSVs with original ids, dense-index
/// sidecars, and the filtered tag file (tags alphabetical per item).
/// Running preparation again over these files reproduces them exactly.
pub fn save_prepared(ds: &InteractionDataset, tags: &ItemTagMatrix, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let write_pairs = |name: &str, pairs: &[(u32, u32)]| -> Result<()> {
        let mut w = BufWriter::new(File::create(dir.join(name))?);
        for &(u, i) in pairs {
            writeln!(w, "{}\t{}", ds.user_ids()[u as usize], ds.item_ids()[i as usize])?;
        }
        Ok(())
    };
    write_pairs("train.tsv", ds.train_pairs())?;
    write_pairs("val.tsv", ds.val_pairs())?;
    write_pairs("test.tsv", ds.test_pairs())?;
    let mut w = BufWriter::new(File::create(dir.join("users.tsv"))?);
    for (idx, id) in ds.user_ids().iter().enumerate() {
        writeln!(w, "{}\t{}", idx, id)?;
    }
    let mut w = BufWriter::new(File::create(dir.join("items.tsv"))?);
    for (idx, id) in ds.item_ids().iter().enumerate() {
        writeln!(w, "{}\t{}", idx, id)?;
    }
    let mut w = BufWriter::new(File::create(dir.join("item_tags.tsv"))?);
    for item in 0..ds.num_items() {
        let names: Vec<&str> = tags
            .item_tags(item as u32)
            .iter()
            .map(|&t| tags.tag_name(t))
            .collect();
        writeln!(w, "{}\t{}", ds.item_ids()[item], names.join("|"))?;
    }
    Ok(())
}

// ---- shared line handling ----

fn open_text(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        EcfError::Data(format!("{}: {}", path.display(), e))
    })
}

/// None for blank lines and `#` comments.
fn data_line(line: &str) -> Option<&str> {
    let trimmed = line.trim_end_matches(['\r', '\n']);
    if trimmed.is_empty() || trimmed.starts_with('#') {
        None
    } else {
        Some(trimmed)
    }
}

fn parse_err(path: &Path, line_no: usize, msg: &str) -> EcfError {
    EcfError::Parse {
        path: path.display().to_string(),
        line: line_no + 1,
        msg: msg.to_string(),
    }
}

fn read_pair_file(path: &Path) -> Result<Vec<(String, String)>> {
    let reader = open_text(path)?;
    let mut out = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line = line?;
        let Some(content) = data_line(&line) else {
            continue;
        };
        let mut fields = content.split('\t');
        match (fields.next(), fields.next(), fields.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                out.push((a.to_string(), b.to_string()));
            }
            _ => return Err(parse_err(path, line_no, "expected user<TAB>item")),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_file(dir: &Path, name: &str, content: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        let mut f = File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    fn toy_pairs(pairs: &[(&str, &str)]) -> InteractionDataset {
        let raw = pairs
            .iter()
            .map(|&(u, i)| (u.to_string(), i.to_string()))
            .collect();
        InteractionDataset::from_raw(vec![(raw, Split::Train)]).unwrap()
    }

    #[test]
    fn load_counts_users_items_interactions() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(
            dir.path(),
            "toy.tsv",
            "# comment\nu1\ti1\nu1\ti2\nu2\ti1\n",
        );
        let ds = InteractionDataset::load(&path).unwrap();
        assert_eq!(ds.num_users(), 2);
        assert_eq!(ds.num_items(), 2);
        assert_eq!(ds.num_interactions(), 3);
    }

    #[test]
    fn duplicate_lines_deduplicate() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "dup.tsv", "u1\ti1\nu1\ti1\nu1\ti2\n");
        let ds = InteractionDataset::load(&path).unwrap();
        assert_eq!(ds.num_interactions(), 2);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "bad.tsv", "u1\ti1\nnot-a-pair\n");
        match InteractionDataset::load(&path) {
            Err(EcfError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {:?}", other),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_file(dir.path(), "empty.tsv", "# only a comment\n");
        assert!(InteractionDataset::load(&path).is_err());
    }

    #[test]
    fn kcore_one_is_identity() {
        let ds = toy_pairs(&[("a", "x"), ("a", "y"), ("b", "x")]);
        let filtered = ds.kcore_filtered(1).unwrap();
        assert_eq!(filtered.num_interactions(), 3);
        assert_eq!(filtered.num_users(), 2);
    }

    #[test]
    fn kcore_star_graph_empties_out() {
        // Five leaf users around one item: every user has degree 1.
        let ds = toy_pairs(&[
            ("u1", "hub"),
            ("u2", "hub"),
            ("u3", "hub"),
            ("u4", "hub"),
            ("u5", "hub"),
        ]);
        assert!(ds.kcore_filtered(2).is_err());
    }

    #[test]
    fn kcore_matches_peeling_oracle_on_random_instance() {
        // Oracle: repeatedly delete any single under-degree user or item.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut pairs = Vec::new();
        for u in 0..50u32 {
            for i in 0..30u32 {
                if rng.random_range(0..100) < 12 {
                    pairs.push((format!("u{}", u), format!("i{}", i)));
                }
            }
        }
        let ds =
            InteractionDataset::from_raw(vec![(pairs.clone(), Split::Train)]).unwrap();
        let k = 3;

        // Oracle peels exactly one under-degree node per round, a
        // deliberately different schedule from the batch retain inside
        // the implementation; the fixpoint is schedule-independent.
        let mut survivors: Vec<(String, String)> = pairs.clone();
        loop {
            let mut udeg: HashMap<&str, usize> = HashMap::new();
            let mut ideg: HashMap<&str, usize> = HashMap::new();
            for (u, i) in &survivors {
                *udeg.entry(u).or_insert(0) += 1;
                *ideg.entry(i).or_insert(0) += 1;
            }
            if let Some(u) = survivors
                .iter()
                .find(|(u, _)| udeg[u.as_str()] < k)
                .map(|(u, _)| u.clone())
            {
                survivors.retain(|(su, _)| su != &u);
            } else if let Some(i) = survivors
                .iter()
                .find(|(_, i)| ideg[i.as_str()] < k)
                .map(|(_, i)| i.clone())
            {
                survivors.retain(|(_, si)| si != &i);
            } else {
                break;
            }
        }

        match ds.kcore_filtered(k) {
            Ok(filtered) => {
                let got: std::collections::BTreeSet<(String, String)> = filtered
                    .train_pairs()
                    .iter()
                    .map(|&(u, i)| {
                        (
                            filtered.user_ids()[u as usize].clone(),
                            filtered.item_ids()[i as usize].clone(),
                        )
                    })
                    .collect();
                let expect: std::collections::BTreeSet<(String, String)> =
                    survivors.into_iter().collect();
                assert_eq!(got, expect);
            }
            Err(_) => assert!(survivors.is_empty()),
        }
    }

    #[test]
    fn kcore_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pairs = Vec::new();
        for u in 0..40u32 {
            for i in 0..25u32 {
                if rng.random_range(0..100) < 15 {
                    pairs.push((format!("u{}", u), format!("i{}", i)));
                }
            }
        }
        let ds = InteractionDataset::from_raw(vec![(pairs, Split::Train)]).unwrap();
        if let Ok(once) = ds.kcore_filtered(3) {
            let twice = once.kcore_filtered(3).unwrap();
            assert_eq!(once.num_interactions(), twice.num_interactions());
            assert_eq!(once.user_ids(), twice.user_ids());
            assert_eq!(once.item_ids(), twice.item_ids());
        }
    }

    #[test]
    fn split_ten_interactions_is_8_1_1() {
        let pairs: Vec<(&str, &str)> = (0..10)
            .map(|i| ("u", ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j"][i]))
            .collect();
        let ds = toy_pairs(&pairs);
        let split = ds.split((0.8, 0.1, 0.1), 42).unwrap();
        assert_eq!(split.train_pairs().len(), 8);
        assert_eq!(split.val_pairs().len(), 1);
        assert_eq!(split.test_pairs().len(), 1);
    }

    #[test]
    fn split_is_seed_deterministic() {
        let mut pairs = Vec::new();
        for u in 0..20 {
            for i in 0..15 {
                if (u + i) % 3 != 0 {
                    pairs.push((format!("u{}", u), format!("i{}", i)));
                }
            }
        }
        let ds = InteractionDataset::from_raw(vec![(pairs, Split::Train)]).unwrap();
        let a = ds.split((0.8, 0.1, 0.1), 9).unwrap();
        let b = ds.split((0.8, 0.1, 0.1), 9).unwrap();
        assert_eq!(a.train_pairs(), b.train_pairs());
        assert_eq!(a.val_pairs(), b.val_pairs());
        assert_eq!(a.test_pairs(), b.test_pairs());
    }

    #[test]
    fn split_all_train_ratio() {
        let ds = toy_pairs(&[("u", "a"), ("u", "b"), ("u", "c"), ("u", "d")]);
        let split = ds.split((1.0, 0.0, 0.0), 1).unwrap();
        assert_eq!(split.train_pairs().len(), 4);
        assert!(split.val_pairs().is_empty() && split.test_pairs().is_empty());
    }

    #[test]
    fn split_small_users_go_entirely_to_train() {
        let ds = toy_pairs(&[("u", "a"), ("u", "b")]);
        let split = ds.split((0.34, 0.33, 0.33), 3).unwrap();
        assert_eq!(split.train_pairs().len(), 2);
    }

    #[test]
    fn split_partitions_and_keeps_a_train_interaction_per_user() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let mut pairs = Vec::new();
            for u in 0..30 {
                let deg = rng.random_range(1..12);
                for i in 0..deg {
                    pairs.push((format!("u{}", u), format!("i{}", i)));
                }
            }
            let ds = InteractionDataset::from_raw(vec![(pairs, Split::Train)]).unwrap();
            let total = ds.num_interactions();
            let split = ds.split((0.6, 0.2, 0.2), seed).unwrap();
            assert_eq!(split.num_interactions(), total);
            let mut seen = std::collections::HashSet::new();
            for &(u, i) in split
                .train_pairs()
                .iter()
                .chain(split.val_pairs())
                .chain(split.test_pairs())
            {
                assert!(seen.insert((u, i)), "split overlap at ({}, {})", u, i);
            }
            for u in 0..split.num_users() as u32 {
                if !split.user_items(u).is_empty() {
                    assert!(
                        !split.user_train_items(u).is_empty(),
                        "user {} lost all train interactions",
                        u
                    );
                }
            }
        }
    }

    #[test]
    fn sampler_negative_is_never_an_interaction() {
        let ds = toy_pairs(&[("u1", "a"), ("u1", "b"), ("u2", "a"), ("u2", "c")]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            for (u, i, j) in sample_bpr_triplets(&ds, 16, &mut rng).unwrap() {
                assert!(ds.user_items(u).binary_search(&i).is_ok());
                assert!(ds.user_items(u).binary_search(&j).is_err());
            }
        }
    }

    #[test]
    fn sampler_respects_batch_size() {
        let ds = toy_pairs(&[("u1", "a"), ("u2", "b"), ("u1", "c")]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(sample_bpr_triplets(&ds, 37, &mut rng).unwrap().len(), 37);
    }

    #[test]
    fn sampler_negatives_are_uniform_chi_squared() {
        // One user, items a..e, interactions with a and b: negatives must
        // be uniform over {c, d, e}.
        let ds = toy_pairs(&[
            ("u", "a"),
            ("u", "b"),
            ("v", "c"),
            ("v", "d"),
            ("v", "e"),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut counts = [0u32; 5];
        let mut draws = 0u32;
        while draws < 100_000 {
            for (u, _, j) in sample_bpr_triplets(&ds, 1000, &mut rng).unwrap() {
                if u == 0 {
                    counts[j as usize] += 1;
                    draws += 1;
                }
            }
        }
        assert_eq!(counts[0] + counts[1], 0);
        let total: u32 = counts[2..].iter().sum();
        let expect = total as f64 / 3.0;
        let chi2: f64 = counts[2..]
            .iter()
            .map(|&c| (c as f64 - expect).powi(2) / expect)
            .sum();
        // df = 2; 13.8 is the 0.999 quantile. Deterministic via fixed seed.
        assert!(chi2 < 13.8, "chi2 = {}", chi2);
    }

    #[test]
    fn tags_load_filter_and_untagged() {
        let dir = tempfile::tempdir().unwrap();
        let inter = write_file(dir.path(), "i.tsv", "u\ta\nu\tb\nu\tc\n");
        let ds = InteractionDataset::load(&inter).unwrap();
        let tags_path = write_file(
            dir.path(),
            "t.tsv",
            "a\trock|jazz\nb\trock\n# c has no line\n",
        );
        // min_tag_items = 2 drops jazz; c (and the dropped-out a slot) keep coverage.
        let tags = ItemTagMatrix::load(&tags_path, 2, &ds).unwrap();
        assert_eq!(tags.tag_names(), &["rock".to_string(), UNTAGGED.to_string()]);
        assert_eq!(tags.item_tags(0), &[0]);
        assert_eq!(tags.item_tags(1), &[0]);
        assert_eq!(tags.item_tags(2), &[1]);
        assert_eq!(tags.tag_frequency(), &[2, 1]);
    }

    #[test]
    fn tags_zero_min_keeps_everything() {
        let dir = tempfile::tempdir().unwrap();
        let inter = write_file(dir.path(), "i.tsv", "u\ta\nu\tb\n");
        let ds = InteractionDataset::load(&inter).unwrap();
        let tags_path = write_file(dir.path(), "t.tsv", "a\tz-tag|a-tag\nb\tm-tag\n");
        let tags = ItemTagMatrix::load(&tags_path, 0, &ds).unwrap();
        // Alphabetical indices.
        assert_eq!(
            tags.tag_names(),
            &["a-tag".to_string(), "m-tag".to_string(), "z-tag".to_string()]
        );
        assert_eq!(tags.item_tags(0), &[0, 2]);
        assert_eq!(tags.item_tags(1), &[1]);
    }

    #[test]
    fn tags_unknown_item_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let inter = write_file(dir.path(), "i.tsv", "u\ta\n");
        let ds = InteractionDataset::load(&inter).unwrap();
        let tags_path = write_file(dir.path(), "t.tsv", "ghost\trock\n");
        assert!(ItemTagMatrix::load(&tags_path, 0, &ds).is_err());
    }

    #[test]
    fn every_item_has_a_tag_after_load() {
        let dir = tempfile::tempdir().unwrap();
        let inter = write_file(dir.path(), "i.tsv", "u\ta\nu\tb\nu\tc\nv\ta\n");
        let ds = InteractionDataset::load(&inter).unwrap();
        let tags_path = write_file(dir.path(), "t.tsv", "a\tonly-once\n");
        let tags = ItemTagMatrix::load(&tags_path, 5, &ds).unwrap();
        for item in 0..ds.num_items() as u32 {
            assert!(!tags.item_tags(item).is_empty());
        }
    }

    #[test]
    fn idf_values_match_direct_arithmetic() {
        // 100 items: a universal tag has weight ~ -1e-8 (|w| <= 1e-5);
        // a singleton tag has weight ln(100 / 1.000001) = 4.605169...
        let mut raw = vec![vec!["everywhere".to_string()]; 100];
        raw[0].push("rare".to_string());
        let tags = ItemTagMatrix::from_raw(raw, 0);
        let idf = compute_idf(&tags);
        let everywhere = idf.weights()[0];
        let rare = idf.weights()[1];
        assert!(everywhere.abs() <= 1e-5);
        assert!((rare - 4.605169186).abs() < 1e-6);
    }

    #[test]
    fn idf_is_strictly_decreasing_in_frequency() {
        let mut raw: Vec<Vec<String>> = vec![Vec::new(); 50];
        for (count, tag) in [(1usize, "t1"), (5, "t5"), (20, "t20"), (50, "t50")] {
            for row in raw.iter_mut().take(count) {
                row.push(tag.to_string());
            }
        }
        let tags = ItemTagMatrix::from_raw(raw, 0);
        let idf = compute_idf(&tags);
        let by_name: HashMap<&str, f64> = tags
            .tag_names()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), idf.weights()[i]))
            .collect();
        assert!(by_name["t1"] > by_name["t5"]);
        assert!(by_name["t5"] > by_name["t20"]);
        assert!(by_name["t20"] > by_name["t50"]);
    }

    #[test]
    fn prepared_output_round_trips_byte_identically() {
        let dir = tempfile::tempdir().unwrap();
        let inter = write_file(
            dir.path(),
            "i.tsv",
            "u2\tb\nu1\ta\nu1\tb\nu2\ta\nu1\tc\nu2\tc\nu3\ta\nu3\tb\nu3\tc\n",
        );
        let tag_file = write_file(dir.path(), "t.tsv", "b\trock|pop\na\trock\nc\tjazz\n");
        let ds = InteractionDataset::load(&inter).unwrap();
        let ds = ds.kcore_filtered(2).unwrap().split((0.8, 0.1, 0.1), 7).unwrap();
        let tags = ItemTagMatrix::load(&tag_file, 0, &ds).unwrap();
        let out1 = dir.path().join("prep1");
        save_prepared(&ds, &tags, &out1).unwrap();

        // Second pass consumes the first pass's output.
        let ds2 = InteractionDataset::load_split(
            &out1.join("train.tsv"),
            &out1.join("val.tsv"),
            &out1.join("test.tsv"),
        )
        .unwrap();
        let merged = ds2.kcore_filtered(2).unwrap().split((0.8, 0.1, 0.1), 7).unwrap();
        let tags2 = ItemTagMatrix::load(&out1.join("item_tags.tsv"), 0, &merged).unwrap();
        let out2 = dir.path().join("prep2");
        save_prepared(&merged, &tags2, &out2).unwrap();

        for name in ["train.tsv", "val.tsv", "test.tsv", "users.tsv", "items.tsv", "item_tags.tsv"] {
            let a = std::fs::read(out1.join(name)).unwrap();
            let b = std::fs::read(out2.join(name)).unwrap();
            assert_eq!(a, b, "{} differs between passes", name);
        }
    }
}
