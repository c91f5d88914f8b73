//! Shared item embeddings, the sequence-encoder projection, private user
//! vectors, and the two user encoders.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{client_rng, server_rng, Stream};
use crate::ItemId;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self · v`
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), v)).collect()
    }

    /// `selfᵀ · v`
    pub fn tr_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, &m) in out.iter_mut().zip(self.row(r)) {
                *o += m * vr;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// A free private vector per user.
    Id,
    /// Projection of the mean of the history's item embeddings.
    MeanSeq,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "id" => Ok(EncoderKind::Id),
            "mean_seq" => Ok(EncoderKind::MeanSeq),
            other => Err(Error::Config(format!(
                "unknown encoder `{other}` (expected id or mean_seq)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbedding(pub Vec<f64>);

/// Parameters held by the server and mirrored to every client.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedParams {
    pub item_table: Matrix,
    pub projection: Matrix,
}

impl SharedParams {
    pub fn dim(&self) -> usize {
        self.item_table.cols()
    }

    pub fn num_items(&self) -> usize {
        self.item_table.rows()
    }

    pub fn item(&self, item: ItemId) -> Result<&[f64]> {
        if item >= self.num_items() {
            return Err(Error::InvalidItem {
                index: item,
                vocab: self.num_items(),
            });
        }
        Ok(self.item_table.row(item))
    }

    pub fn is_finite(&self) -> bool {
        self.item_table.is_finite() && self.projection.is_finite()
    }
}

/// Shared parameters plus the per-client vectors of the ID encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub shared: SharedParams,
    /// Empty for the sequence encoder.
    pub user_vectors: Vec<Vec<f64>>,
}

fn uniform_fill(rng: &mut crate::rng::Rng, out: &mut [f64], bound: f64) {
    for x in out {
        *x = rng.random_range(-bound..=bound);
    }
}

/// Every entry i.i.d. uniform on `[-1/√d, 1/√d]`.
pub fn init_shared(seed: u64, num_items: usize, dim: usize) -> Result<SharedParams> {
    if num_items == 0 || dim == 0 {
        return Err(Error::Config("num_items and dim must be at least 1".into()));
    }
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = server_rng(seed, Stream::Init);
    let mut item_table = Matrix::zeros(num_items, dim);
    uniform_fill(&mut rng, item_table.as_mut_slice(), bound);
    let mut projection = Matrix::zeros(dim, dim);
    uniform_fill(&mut rng, projection.as_mut_slice(), bound);
    Ok(SharedParams {
        item_table,
        projection,
    })
}

/// A client's private vector, drawn from its own stream.
pub fn init_user_vector(seed: u64, client: usize, dim: usize) -> Vec<f64> {
    let bound = 1.0 / (dim as f64).sqrt();
    let mut rng = client_rng(seed, client, Stream::Init);
    let mut v = vec![0.0; dim];
    uniform_fill(&mut rng, &mut v, bound);
    v
}

pub fn init_params(
    seed: u64,
    num_items: usize,
    dim: usize,
    kind: EncoderKind,
    num_clients: usize,
) -> Result<ModelParams> {
    let shared = init_shared(seed, num_items, dim)?;
    let user_vectors = match kind {
        EncoderKind::Id => (0..num_clients)
            .map(|c| init_user_vector(seed, c, dim))
            .collect(),
        EncoderKind::MeanSeq => Vec::new(),
    };
    Ok(ModelParams {
        shared,
        user_vectors,
    })
}

/// The tail of `history` the sequence encoder pools over (`max_len == 0`: all of it).
pub fn pooled_window(history: &[ItemId], max_len: usize) -> &[ItemId] {
    if max_len == 0 || history.len() <= max_len {
        history
    } else {
        &history[history.len() - max_len..]
    }
}

/// Element-wise mean of the window's item embeddings (zero for an empty window).
pub fn mean_pool(shared: &SharedParams, window: &[ItemId]) -> Result<Vec<f64>> {
    let mut mean = vec![0.0; shared.dim()];
    if window.is_empty() {
        return Ok(mean);
    }
    for &i in window {
        for (m, &e) in mean.iter_mut().zip(shared.item(i)?) {
            *m += e;
        }
    }
    let inv = 1.0 / window.len() as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    Ok(mean)
}

/// User embedding from a history prefix.
///
/// The ID encoder ignores the prefix and returns the private vector; the
/// sequence encoder returns `projection · mean(prefix embeddings)`.
pub fn encode_user(
    kind: EncoderKind,
    shared: &SharedParams,
    user_vector: Option<&[f64]>,
    prefix: &[ItemId],
    max_len: usize,
) -> Result<UserEmbedding> {
    match kind {
        EncoderKind::Id => {
            let v = user_vector.ok_or(Error::Config(
                "ID encoder requires the client's private vector".into(),
            ))?;
            if v.len() != shared.dim() {
                return Err(Error::DimensionMismatch {
                    expected: shared.dim(),
                    got: v.len(),
                });
            }
            Ok(UserEmbedding(v.to_vec()))
        }
        EncoderKind::MeanSeq => {
            let mean = mean_pool(shared, pooled_window(prefix, max_len))?;
            Ok(UserEmbedding(shared.projection.mul_vec(&mean)))
        }
    }
}

impl ModelParams {
    pub fn encode_user(
        &self,
        kind: EncoderKind,
        client: usize,
        prefix: &[ItemId],
        max_len: usize,
    ) -> Result<UserEmbedding> {
        let user_vector = match kind {
            EncoderKind::Id => Some(
                self.user_vectors
                    .get(client)
                    .ok_or(Error::UnknownClient(client))?
                    .as_slice(),
            ),
            EncoderKind::MeanSeq => None,
        };
        encode_user(kind, &self.shared, user_vector, prefix, max_len)
    }
}

pub fn score(user: &UserEmbedding, item: &[f64]) -> Result<f64> {
    if user.0.len() != item.len() {
        return Err(Error::DimensionMismatch {
            expected: user.0.len(),
            got: item.len(),
        });
    }
    Ok(dot(&user.0, item))
}
