//! Sparse rating storage, validation, CSV I/O and split bookkeeping.
//!
//! A rating is present iff the (user, item) pair is stored; the response
//! indicator matrix is never materialised.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "user,item,rating";

/// One observed rating. `value` is in `1..=n_values`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Observation {
    pub user: usize,
    pub item: usize,
    pub value: u8,
}

impl Observation {
    pub fn new(user: usize, item: usize, value: u8) -> Self {
        Self { user, item, value }
    }

    /// Zero-based value index.
    #[inline]
    pub fn value_index(&self) -> usize {
        self.value as usize - 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    ValueOutOfRange { user: usize, item: usize, value: u8 },
    UserOutOfRange { user: usize },
    ItemOutOfRange { user: usize, item: usize },
    DuplicatePair { user: usize, item: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ValueOutOfRange { user, item, value } => {
                write!(f, "value {value} out of range at ({user}, {item})")
            }
            Violation::UserOutOfRange { user } => write!(f, "user index {user} out of range"),
            Violation::ItemOutOfRange { user, item } => {
                write!(f, "item index {item} out of range (user {user})")
            }
            Violation::DuplicatePair { user, item } => {
                write!(f, "duplicate pair ({user}, {item})")
            }
        }
    }
}

/// Sparse user × item rating matrix on a `1..=V` scale.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingDataset {
    n_users: usize,
    n_items: usize,
    n_values: u8,
    // sorted by (user, item)
    obs: Vec<Observation>,
    row_starts: Vec<usize>,
}

impl RatingDataset {
    /// Builds a dataset and rejects it if any invariant is violated.
    pub fn new(
        n_users: usize,
        n_items: usize,
        n_values: u8,
        observations: Vec<Observation>,
    ) -> Result<Self> {
        let ds = Self::from_observations_unchecked(n_users, n_items, n_values, observations);
        match ds.validate().into_iter().next() {
            None => Ok(ds),
            Some(Violation::DuplicatePair { user, item }) => Err(Error::Duplicate { user, item }),
            Some(v) => Err(Error::Validation(v.to_string())),
        }
    }

    /// Builds a dataset without checking invariants. Use [`validate`](Self::validate)
    /// before handing the result to a model.
    pub fn from_observations_unchecked(
        n_users: usize,
        n_items: usize,
        n_values: u8,
        mut obs: Vec<Observation>,
    ) -> Self {
        obs.sort_unstable();
        let mut row_starts = Vec::with_capacity(n_users + 1);
        for u in 0..=n_users {
            row_starts.push(obs.partition_point(|o| o.user < u));
        }
        Self {
            n_users,
            n_items,
            n_values,
            obs,
            row_starts,
        }
    }

    pub fn empty(n_users: usize, n_items: usize, n_values: u8) -> Self {
        Self::from_observations_unchecked(n_users, n_items, n_values, Vec::new())
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn n_values(&self) -> u8 {
        self.n_values
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    pub fn same_dims(&self, other: &RatingDataset) -> bool {
        self.n_users == other.n_users
            && self.n_items == other.n_items
            && self.n_values == other.n_values
    }

    /// All observations in (user, item) order.
    pub fn observations(&self) -> &[Observation] {
        &self.obs
    }

    /// Observations of one user, sorted by item.
    pub fn row(&self, user: usize) -> &[Observation] {
        &self.obs[self.row_starts[user]..self.row_starts[user + 1]]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[Observation]> + '_ {
        (0..self.n_users).map(move |u| self.row(u))
    }

    pub fn get(&self, user: usize, item: usize) -> Option<u8> {
        if user >= self.n_users {
            return None;
        }
        let row = self.row(user);
        row.binary_search_by_key(&item, |o| o.item)
            .ok()
            .map(|i| row[i].value)
    }

    pub fn contains(&self, user: usize, item: usize) -> bool {
        self.get(user, item).is_some()
    }

    /// Per-value counts, indexed by `value - 1`.
    pub fn value_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_values as usize];
        for o in &self.obs {
            if (1..=self.n_values).contains(&o.value) {
                counts[o.value_index()] += 1;
            }
        }
        counts
    }

    /// Lists every invariant violation; empty iff the dataset is well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut prev: Option<(usize, usize)> = None;
        for o in &self.obs {
            if o.user >= self.n_users {
                out.push(Violation::UserOutOfRange { user: o.user });
            }
            if o.item >= self.n_items {
                out.push(Violation::ItemOutOfRange {
                    user: o.user,
                    item: o.item,
                });
            }
            if o.value < 1 || o.value > self.n_values {
                out.push(Violation::ValueOutOfRange {
                    user: o.user,
                    item: o.item,
                    value: o.value,
                });
            }
            if prev == Some((o.user, o.item)) {
                out.push(Violation::DuplicatePair {
                    user: o.user,
                    item: o.item,
                });
            }
            prev = Some((o.user, o.item));
        }
        out
    }

    /// Keeps only users with at least `k` observations, re-indexing them
    /// densely. The second element maps new user index to original index.
    pub fn min_ratings_filter(&self, k: usize) -> (RatingDataset, Vec<usize>) {
        let keep: Vec<usize> = (0..self.n_users)
            .filter(|&u| self.row(u).len() >= k)
            .collect();
        (self.select_users(&keep), keep)
    }

    /// Sub-dataset made of the listed users, in the given order.
    pub fn select_users(&self, users: &[usize]) -> RatingDataset {
        let mut obs = Vec::new();
        for (new, &old) in users.iter().enumerate() {
            obs.extend(
                self.row(old)
                    .iter()
                    .map(|o| Observation::new(new, o.item, o.value)),
            );
        }
        Self::from_observations_unchecked(users.len(), self.n_items, self.n_values, obs)
    }

    /// Drops every observation whose (user, item) pair occurs in `other`.
    pub fn without_pairs_of(&self, other: &RatingDataset) -> RatingDataset {
        let obs = self
            .obs
            .iter()
            .filter(|o| !other.contains(o.user, o.item))
            .copied()
            .collect();
        Self::from_observations_unchecked(self.n_users, self.n_items, self.n_values, obs)
    }

    /// Dataset with a second copy of every user appended after the first.
    pub fn concat_users(&self, other: &RatingDataset) -> Result<RatingDataset> {
        if self.n_items != other.n_items || self.n_values != other.n_values {
            return Err(Error::Validation(
                "cannot concatenate datasets with different item or value counts".into(),
            ));
        }
        let offset = self.n_users;
        let mut obs = self.obs.clone();
        obs.extend(
            other
                .obs
                .iter()
                .map(|o| Observation::new(o.user + offset, o.item, o.value)),
        );
        Ok(Self::from_observations_unchecked(
            self.n_users + other.n_users,
            self.n_items,
            self.n_values,
            obs,
        ))
    }

    /// Same observations over larger (or equal) dimensions.
    pub fn with_dims(&self, n_users: usize, n_items: usize) -> Result<RatingDataset> {
        if n_users < self.n_users || n_items < self.n_items {
            return Err(Error::Validation(format!(
                "cannot shrink dataset from ({}, {}) to ({n_users}, {n_items})",
                self.n_users, self.n_items
            )));
        }
        Ok(Self::from_observations_unchecked(
            n_users,
            n_items,
            self.n_values,
            self.obs.clone(),
        ))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for o in &self.obs {
            writeln!(w, "{},{},{}", o.user, o.item, o.value)?;
        }
        w.flush()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file =
            File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        self.write_csv(BufWriter::new(file))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Explicit dataset shape used when loading CSV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n_users: usize,
    pub n_items: usize,
}

/// Parses `user,item,rating` CSV text (one header line).
///
/// Without explicit `dims`, the user and item counts are `max id + 1`.
pub fn read_csv<R: Read>(reader: R, n_values: u8, dims: Option<Dims>) -> Result<RatingDataset> {
    let reader = BufReader::new(reader);
    let mut obs = Vec::new();
    let mut saw_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(format!("reading line {lineno}"), e))?;
        let line = line.trim_end_matches('\r');
        if !saw_header {
            saw_header = true;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected header '{CSV_HEADER}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        obs.push(parse_row(line, lineno, n_values)?);
    }

    let (n_users, n_items) = match dims {
        Some(d) => (d.n_users, d.n_items),
        None => (
            obs.iter().map(|o| o.user + 1).max().unwrap_or(0),
            obs.iter().map(|o| o.item + 1).max().unwrap_or(0),
        ),
    };
    RatingDataset::new(n_users, n_items, n_values, obs)
}

fn parse_row(line: &str, lineno: usize, n_values: u8) -> Result<Observation> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 3 {
        return Err(Error::Parse {
            line: lineno,
            msg: format!("expected 3 fields, found {}", fields.len()),
        });
    }
    let parse_id = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("invalid {what} id '{s}'"),
        })
    };
    let user = parse_id(fields[0], "user")?;
    let item = parse_id(fields[1], "item")?;
    let value: i64 = fields[2].parse().map_err(|_| Error::Parse {
        line: lineno,
        msg: format!("invalid rating '{}'", fields[2]),
    })?;
    if value < 1 || value > n_values as i64 {
        return Err(Error::Range {
            line: lineno,
            value,
            n_values,
        });
    }
    Ok(Observation::new(user, item, value as u8))
}

pub fn load_csv(path: &Path, n_values: u8, dims: Option<Dims>) -> Result<RatingDataset> {
    let file = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    read_csv(file, n_values, dims)
}

/// Training and test data over the same dimensions, disjoint on (user, item).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPair {
    pub train: RatingDataset,
    pub test: RatingDataset,
}

impl SplitPair {
    pub fn new(train: RatingDataset, test: RatingDataset) -> Result<Self> {
        if !train.same_dims(&test) {
            return Err(Error::Validation(format!(
                "train dims ({}, {}, {}) differ from test dims ({}, {}, {})",
                train.n_users(),
                train.n_items(),
                train.n_values(),
                test.n_users(),
                test.n_items(),
                test.n_values()
            )));
        }
        if let Some(o) = test
            .observations()
            .iter()
            .find(|o| train.contains(o.user, o.item))
        {
            return Err(Error::Validation(format!(
                "train and test share pair ({}, {})",
                o.user, o.item
            )));
        }
        Ok(Self { train, test })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(triples: &[(usize, usize, u8)]) -> Vec<Observation> {
        triples
            .iter()
            .map(|&(u, i, v)| Observation::new(u, i, v))
            .collect()
    }

    #[test]
    fn load_infers_dims() {
        let text = "user,item,rating\n0,0,5\n0,1,1\n1,0,3\n";
        let ds = read_csv(text.as_bytes(), 5, None).unwrap();
        assert_eq!((ds.n_users(), ds.n_items(), ds.len()), (2, 2, 3));
        assert_eq!(ds.get(0, 1), Some(1));
        assert_eq!(ds.get(1, 1), None);
    }

    #[test]
    fn header_only_with_explicit_dims() {
        let dims = Dims {
            n_users: 10,
            n_items: 10,
        };
        let ds = read_csv("user,item,rating\n".as_bytes(), 5, Some(dims)).unwrap();
        assert_eq!((ds.n_users(), ds.n_items(), ds.len()), (10, 10, 0));
    }

    #[test]
    fn duplicate_rows_rejected() {
        let err = read_csv("user,item,rating\n0,0,5\n0,0,4\n".as_bytes(), 5, None).unwrap_err();
        assert!(
            matches!(err, Error::Duplicate { user: 0, item: 0 }),
            "{err}"
        );
    }

    #[test]
    fn malformed_and_out_of_range_rows() {
        let err = read_csv("user,item,rating\n0,0,5\n0,x,4\n".as_bytes(), 5, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = read_csv("user,item,rating\n0,0,6\n".as_bytes(), 5, None).unwrap_err();
        assert!(
            matches!(
                err,
                Error::Range {
                    line: 2,
                    value: 6,
                    ..
                }
            ),
            "{err}"
        );
        let err = read_csv("user,item,rating\n0,0\n".as_bytes(), 5, None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn explicit_dims_too_small_is_rejected() {
        let dims = Dims {
            n_users: 1,
            n_items: 1,
        };
        let err = read_csv("user,item,rating\n0,3,2\n".as_bytes(), 5, Some(dims)).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn validate_reports_violations() {
        let good =
            RatingDataset::from_observations_unchecked(2, 2, 5, obs(&[(0, 0, 1), (1, 1, 5)]));
        assert!(good.validate().is_empty());

        let bad_value = RatingDataset::from_observations_unchecked(2, 2, 5, obs(&[(0, 0, 6)]));
        assert_eq!(
            bad_value.validate(),
            vec![Violation::ValueOutOfRange {
                user: 0,
                item: 0,
                value: 6
            }]
        );

        let bad_user = RatingDataset::from_observations_unchecked(2, 2, 5, obs(&[(2, 0, 3)]));
        assert_eq!(
            bad_user.validate(),
            vec![Violation::UserOutOfRange { user: 2 }]
        );
    }

    #[test]
    fn rows_are_item_sorted() {
        let ds = RatingDataset::new(1, 5, 5, obs(&[(0, 4, 1), (0, 0, 2), (0, 2, 3)])).unwrap();
        let items: Vec<usize> = ds.row(0).iter().map(|o| o.item).collect();
        assert_eq!(items, vec![0, 2, 4]);
    }

    #[test]
    fn min_ratings_filter_cases() {
        let mut triples = Vec::new();
        for (user, count) in [(0usize, 12usize), (1, 3), (2, 10)] {
            for item in 0..count {
                triples.push((user, item, 3u8));
            }
        }
        let ds = RatingDataset::new(3, 20, 5, obs(&triples)).unwrap();

        let (kept, map) = ds.min_ratings_filter(10);
        assert_eq!(map, vec![0, 2]);
        assert_eq!(kept.n_users(), 2);
        assert_eq!(kept.row(1).len(), 10);

        let (same, map) = ds.min_ratings_filter(0);
        assert_eq!(same, ds);
        assert_eq!(map, vec![0, 1, 2]);

        let (none, map) = ds.min_ratings_filter(100);
        assert!(none.is_empty() && map.is_empty());
        assert_eq!(none.n_users(), 0);
    }

    #[test]
    fn split_pair_rejects_overlap() {
        let a = RatingDataset::new(1, 2, 5, obs(&[(0, 0, 1)])).unwrap();
        let b = RatingDataset::new(1, 2, 5, obs(&[(0, 0, 2)])).unwrap();
        let c = RatingDataset::new(1, 2, 5, obs(&[(0, 1, 2)])).unwrap();
        assert!(SplitPair::new(a.clone(), b).is_err());
        assert!(SplitPair::new(a, c).is_ok());
    }

    #[test]
    fn save_writes_sorted_rows() {
        let ds = RatingDataset::new(2, 2, 5, obs(&[(1, 0, 2), (0, 1, 4), (0, 0, 3)])).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "user,item,rating\n0,0,3\n0,1,4\n1,0,2\n"
        );
    }
}
