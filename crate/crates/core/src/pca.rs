//! Two-component principal component projection by orthogonal iteration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_len, invalid, Error, Result};
use crate::io;
use crate::tensor::{axpy, dot, norm2, Matrix};

const MAX_ITERS: usize = 10_000;
const TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Unit principal axes, largest variance first.
    pub components: [Vec<f64>; 2],
    /// Sample variance along each axis.
    pub variance: [f64; 2],
}

fn orthonormalize(q: &mut [Vec<f64>; 2]) {
    let n0 = norm2(&q[0]);
    q[0].iter_mut().for_each(|v| *v /= n0);
    let (a, b) = q.split_at_mut(1);
    let proj = dot(&a[0], &b[0]);
    axpy(-proj, &a[0], &mut b[0]);
    let n1 = norm2(&b[0]);
    if n1 > 1e-12 {
        b[0].iter_mut().for_each(|v| *v /= n1);
        return;
    }
    // the second direction collapsed; substitute any unit vector orthogonal to the first
    let d = a[0].len();
    for k in 0..d {
        let mut e = vec![0.0; d];
        e[k] = 1.0;
        let p = dot(&a[0], &e);
        axpy(-p, &a[0], &mut e);
        let n = norm2(&e);
        if n > 0.5 {
            b[0] = e.into_iter().map(|v| v / n).collect();
            return;
        }
    }
}

impl Pca2 {
    /// Fits the top-2 axes of the mean-centred rows. Needs at least 3 rows.
    /// Axes are signed so that their largest-magnitude entry is positive.
    pub fn fit(x: &Matrix) -> Result<Self> {
        if x.rows() < 3 {
            return Err(Error::TooFewRows {
                class: "projection",
                got: x.rows(),
                need: 3,
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("projection input"));
        }
        let (n, d) = (x.rows(), x.cols());
        if d < 2 {
            return Err(invalid("embeddings", "need at least two columns"));
        }
        let mut mean = vec![0.0; d];
        for r in x.iter_rows() {
            axpy(1.0 / n as f64, r, &mut mean);
        }
        let mut cov = Matrix::zeros(d, d);
        for r in x.iter_rows() {
            let c: Vec<f64> = r.iter().zip(&mean).map(|(a, m)| a - m).collect();
            for i in 0..d {
                let row = cov.row_mut(i);
                axpy(c[i] / (n - 1) as f64, &c, row);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
        let mut q: [Vec<f64>; 2] = [
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        ];
        orthonormalize(&mut q);
        for _ in 0..MAX_ITERS {
            let mut next = [cov.matvec(&q[0])?, cov.matvec(&q[1])?];
            if norm2(&next[0]) == 0.0 {
                // all rows identical
                break;
            }
            orthonormalize(&mut next);
            // compare the spanned subspaces through the projector residual
            let resid: f64 = q
                .iter()
                .map(|v| {
                    let mut r = v.clone();
                    axpy(-dot(&next[0], v), &next[0], &mut r);
                    axpy(-dot(&next[1], v), &next[1], &mut r);
                    dot(&r, &r)
                })
                .sum();
            q = next;
            if resid < TOL * TOL {
                break;
            }
        }

        // Rayleigh-Ritz on the 2-D subspace
        let cq = [cov.matvec(&q[0])?, cov.matvec(&q[1])?];
        let (a, b, c) = (dot(&q[0], &cq[0]), dot(&q[0], &cq[1]), dot(&q[1], &cq[1]));
        let half_gap = 0.5 * (a - c);
        let disc = (half_gap * half_gap + b * b).sqrt();
        let l1 = 0.5 * (a + c) + disc;
        let l2 = 0.5 * (a + c) - disc;
        let theta = 0.5 * (2.0 * b).atan2(a - c);
        let (cs, sn) = (theta.cos(), theta.sin());
        let mut axes: [Vec<f64>; 2] = [
            q[0].iter().zip(&q[1]).map(|(u, v)| cs * u + sn * v).collect(),
            q[0].iter().zip(&q[1]).map(|(u, v)| -sn * u + cs * v).collect(),
        ];
        for axis in axes.iter_mut() {
            let lead = axis
                .iter()
                .copied()
                .fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if lead < 0.0 {
                axis.iter_mut().for_each(|v| *v = -*v);
            }
        }
        Ok(Self {
            mean,
            components: axes,
            variance: [l1.max(0.0), l2.max(0.0)],
        })
    }

    pub fn transform(&self, x: &Matrix) -> Result<Vec<[f64; 2]>> {
        ensure_len("projection width", self.mean.len(), x.cols())?;
        Ok(x.iter_rows()
            .map(|r| {
                let c: Vec<f64> = r.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
                [dot(&c, &self.components[0]), dot(&c, &self.components[1])]
            })
            .collect())
    }
}

/// 2-D coordinates of every scene's embedding, tagged with the encoder kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingProjection {
    pub ids: Vec<String>,
    pub labels: Vec<Option<f64>>,
    pub coords: Vec<[f64; 2]>,
    pub tag: String,
}

pub const PROJECTION_SCHEMA: &str = "landprobe.projection";

impl EmbeddingProjection {
    pub fn new(embeddings: &Matrix, ids: Vec<String>, labels: Vec<Option<f64>>, tag: &str) -> Result<Self> {
        ensure_len("projection ids", embeddings.rows(), ids.len())?;
        ensure_len("projection labels", embeddings.rows(), labels.len())?;
        let coords = Pca2::fit(embeddings)?.transform(embeddings)?;
        Ok(Self {
            ids,
            labels,
            coords,
            tag: tag.to_owned(),
        })
    }

    pub fn to_csv(&self) -> String {
        let rows: Vec<Vec<String>> = (0..self.ids.len())
            .map(|i| {
                vec![
                    self.ids[i].clone(),
                    self.labels[i].map(io::fmt_f64).unwrap_or_default(),
                    io::fmt_f64(self.coords[i][0]),
                    io::fmt_f64(self.coords[i][1]),
                    self.tag.clone(),
                ]
            })
            .collect();
        io::csv_string(PROJECTION_SCHEMA, &["id", "label", "x", "y", "tag"], &rows)
    }
}
