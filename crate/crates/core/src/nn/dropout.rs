use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// An affine map `x W + b` on row vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let mut out = x.matmul(&self.weight)?;
        let m = out.cols();
        if self.bias.len() != m {
            return Err(Error::Shape(format!(
                "bias of {} for width {m}",
                self.bias.len()
            )));
        }
        for row in out.data_mut().chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(self.bias.data()) {
                *o += b;
            }
        }
        Ok(out)
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, otherwise
/// `1 / (1 - p)`.
pub fn dropout_mask<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], p: f64) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("mask shape")
}

fn check_args(n_samples: usize, p: f64) -> Result<()> {
    if n_samples == 0 {
        return Err(Error::config("n_samples", "must be at least 1"));
    }
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config("dropout", "rate must lie in [0, 1)"));
    }
    Ok(())
}

/// Averages `head(dropout_i(h))` over `n_samples` independent masks in
/// training mode; evaluates `head(h)` in eval mode or when `p == 0`.
pub fn multi_sample_dropout<R: Rng + ?Sized>(
    h: &Tensor,
    n_samples: usize,
    p: f64,
    head: &Affine,
    mode: Mode,
    rng: &mut R,
) -> Result<Tensor> {
    check_args(n_samples, p)?;
    if mode == Mode::Eval || p == 0.0 {
        return head.apply(h);
    }
    let mut acc: Option<Tensor> = None;
    for _ in 0..n_samples {
        let mask = dropout_mask(rng, h.shape(), p);
        let dropped = Tensor::new(
            h.shape().to_vec(),
            h.data()
                .iter()
                .zip(mask.data())
                .map(|(a, b)| a * b)
                .collect(),
        )?;
        let out = head.apply(&dropped)?;
        acc = Some(match acc {
            None => out,
            Some(mut a) => {
                a.data_mut()
                    .iter_mut()
                    .zip(out.data())
                    .for_each(|(x, y)| *x += y);
                a
            }
        });
    }
    let mut out = acc.expect("n_samples >= 1");
    if n_samples > 1 {
        let inv = 1.0 / n_samples as f64;
        out.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    Ok(out)
}

/// Graph version of [`multi_sample_dropout`] with the head weights on the
/// tape. Draws masks in the same order as the plain version.
#[allow(clippy::too_many_arguments)]
pub fn multi_sample_dropout_node<R: Rng + ?Sized>(
    g: &mut Graph,
    h: NodeId,
    n_samples: usize,
    p: f64,
    weight: NodeId,
    bias: NodeId,
    mode: Mode,
    rng: &mut R,
) -> Result<NodeId> {
    check_args(n_samples, p)?;
    if mode == Mode::Eval || p == 0.0 {
        let z = g.matmul(h, weight);
        return Ok(g.add_row(z, bias));
    }
    let shape = g.value(h).shape().to_vec();
    let mut acc: Option<NodeId> = None;
    for _ in 0..n_samples {
        let mask = dropout_mask(rng, &shape, p);
        let dropped = g.mul_const(h, mask);
        let z = g.matmul(dropped, weight);
        let out = g.add_row(z, bias);
        acc = Some(match acc {
            None => out,
            Some(a) => g.add(a, out),
        });
    }
    let out = acc.expect("n_samples >= 1");
    Ok(if n_samples > 1 {
        g.scale(out, 1.0 / n_samples as f64)
    } else {
        out
    })
}
