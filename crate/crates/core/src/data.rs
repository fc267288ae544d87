//! The six binary operations mod p and their deterministic train/test split.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Add,
    Sub,
    Mul,
    X2Y2,
    X2XyY2,
    X3Xy,
}

impl Operation {
    pub const ALL: [Operation; 6] = [
        Operation::Add,
        Operation::Sub,
        Operation::Mul,
        Operation::X2Y2,
        Operation::X2XyY2,
        Operation::X3Xy,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Operation::Add => "add",
            Operation::Sub => "sub",
            Operation::Mul => "mul",
            Operation::X2Y2 => "x2_y2",
            Operation::X2XyY2 => "x2_xy_y2",
            Operation::X3Xy => "x3_xy",
        }
    }

    /// Whether the operation groks under the fast-regime hyperparameters.
    pub fn groks_expected(self) -> bool {
        matches!(self, Operation::Add | Operation::Sub | Operation::Mul | Operation::X2Y2)
    }

    /// `f(a, b) mod p` for `a, b < p`.
    pub fn apply(self, a: usize, b: usize, p: usize) -> usize {
        let (a, b, p) = (a as u64, b as u64, p as u64);
        let v = match self {
            Operation::Add => a + b,
            Operation::Sub => a + p - b,
            Operation::Mul => a * b,
            Operation::X2Y2 => a * a + b * b,
            Operation::X2XyY2 => a * a + a * b + b * b,
            Operation::X3Xy => (a * a % p) * a + a * b,
        };
        (v % p) as usize
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Operation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Operation::ALL
            .into_iter()
            .find(|op| op.tag() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown operation `{s}`")))
    }
}

/// One labelled pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub a: usize,
    pub b: usize,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub op: Operation,
    pub p: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

/// Shuffles all `p²` pairs (lexicographic order, Fisher–Yates on the
/// split stream of `seed`) and puts the first `⌊train_frac·p²⌋` in train.
pub fn build_dataset(op: Operation, p: usize, train_frac: f64, seed: u64) -> Result<DatasetSplit> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidConfig(format!("train_frac {train_frac} not in (0, 1)")));
    }
    if p < 2 {
        return Err(Error::InvalidConfig(format!("modulus {p} too small")));
    }
    let mut pairs: Vec<Example> = (0..p)
        .flat_map(|a| {
            (0..p).map(move |b| Example {
                a,
                b,
                label: op.apply(a, b, p),
            })
        })
        .collect();
    let mut rng = stream(seed, Stream::Split);
    for i in (1..pairs.len()).rev() {
        let j = rng.random_range(0..=i);
        pairs.swap(i, j);
    }
    let n_train = (train_frac * pairs.len() as f64).floor() as usize;
    let test = pairs.split_off(n_train);
    Ok(DatasetSplit {
        op,
        p,
        train: pairs,
        test,
    })
}

impl DatasetSplit {
    /// Writes `a,b,label,split` rows, train first.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "a,b,label,split")?;
        for (part, rows) in [("train", &self.train), ("test", &self.test)] {
            for e in rows.iter() {
                writeln!(w, "{},{},{},{}", e.a, e.b, e.label, part)?;
            }
        }
        Ok(())
    }
}
