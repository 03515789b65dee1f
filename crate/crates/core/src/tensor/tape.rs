use rand::Rng;

use super::{Gradients, ParamId, ParamStore};
use crate::error::{ParError, Result};

/// Handle to a vector value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Row { param: ParamId, row: usize },
    Linear { w: ParamId, x: Var, b: Option<ParamId> },
    DotParam { x: Var, p: ParamId },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Dropout { x: Var, scale: Vec<f64> },
    MaskedSoftmax { x: Var, mask: Vec<bool> },
    WeightedSum { weights: Var, items: Vec<(usize, Var)> },
    NegLog { x: Var, index: usize },
    KlFromTarget { x: Var, target: Vec<(usize, f64)> },
}

#[derive(Debug)]
struct Node {
    value: Vec<f64>,
    op: Op,
}

/// Softmax over the `true` entries of `mask`; masked entries are exactly 0.
pub fn masked_softmax(scores: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if scores.len() != mask.len() {
        return Err(ParError::dim("masked_softmax", &[scores.len()], &[mask.len()]));
    }
    let max = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(ParError::Contract("masked_softmax needs at least one unmasked entry".into()));
    }
    let mut out: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m { (s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Records vector operations over a read-only [`ParamStore`] and replays them
/// backwards to accumulate parameter gradients.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// The single entry of a length-1 value.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, value: Vec<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn dim(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(value, Op::Constant)
    }

    /// A whole parameter tensor, flattened, as a differentiable vector.
    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).data().to_vec();
        self.push(value, Op::Param(id))
    }

    /// Row `row` of a matrix parameter (an embedding lookup).
    pub fn row(&mut self, param: ParamId, row: usize) -> Result<Var> {
        let t = self.params.get(param);
        if t.shape().len() != 2 || row >= t.rows() {
            return Err(ParError::dim("row", t.shape(), &[row]));
        }
        let value = t.row(row).to_vec();
        Ok(self.push(value, Op::Row { param, row }))
    }

    /// `W x (+ b)`.
    pub fn linear(&mut self, w: ParamId, x: Var, b: Option<ParamId>) -> Result<Var> {
        let wt = self.params.get(w);
        let xv = &self.nodes[x.0].value;
        if wt.shape().len() != 2 || wt.cols() != xv.len() {
            return Err(ParError::dim("linear", wt.shape(), &[xv.len()]));
        }
        let mut y: Vec<f64> = (0..wt.rows())
            .map(|i| wt.row(i).iter().zip(xv).map(|(a, b)| a * b).sum())
            .collect();
        if let Some(b) = b {
            let bt = self.params.get(b);
            if bt.len() != y.len() {
                return Err(ParError::dim("linear bias", wt.shape(), bt.shape()));
            }
            y.iter_mut().zip(bt.data()).for_each(|(yi, bi)| *yi += bi);
        }
        Ok(self.push(y, Op::Linear { w, x, b }))
    }

    /// Inner product of `x` with a vector parameter; a length-1 result.
    pub fn dot_param(&mut self, x: Var, p: ParamId) -> Result<Var> {
        let pt = self.params.get(p);
        let xv = &self.nodes[x.0].value;
        if pt.len() != xv.len() {
            return Err(ParError::dim("dot", pt.shape(), &[xv.len()]));
        }
        let s = pt.data().iter().zip(xv).map(|(a, b)| a * b).sum();
        Ok(self.push(vec![s], Op::DotParam { x, p }))
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.len() != bv.len() {
            return Err(ParError::dim(op, &[av.len()], &[bv.len()]));
        }
        Ok(av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.nodes[x.0].value.iter().map(|a| a * c).collect();
        self.push(v, Op::Scale(x, c))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.iter().map(|a| a.tanh()).collect();
        self.push(v, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.iter().map(|&a| sigmoid(a)).collect();
        self.push(v, Op::Sigmoid(x))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v = parts
            .iter()
            .flat_map(|p| self.nodes[p.0].value.iter().copied())
            .collect();
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Inverted dropout: zero each coordinate with probability `rate` and
    /// scale survivors by `1 / (1 - rate)`. Identity outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Var {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0, 1)");
        if !training || rate == 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.dim(x))
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let v = self.nodes[x.0].value.iter().zip(&scale).map(|(a, s)| a * s).collect();
        self.push(v, Op::Dropout { x, scale })
    }

    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let v = masked_softmax(&self.nodes[x.0].value, mask)?;
        Ok(self.push(
            v,
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// `sum_k weights[index_k] * item_k`.
    pub fn weighted_sum(&mut self, weights: Var, items: &[(usize, Var)]) -> Result<Var> {
        let first = items
            .first()
            .ok_or_else(|| ParError::Contract("weighted_sum over no items".into()))?;
        let dim = self.dim(first.1);
        let wv = &self.nodes[weights.0].value;
        let mut out = vec![0.0; dim];
        for &(idx, item) in items {
            let iv = &self.nodes[item.0].value;
            if iv.len() != dim || idx >= wv.len() {
                return Err(ParError::dim("weighted_sum", &[dim, wv.len()], &[iv.len(), idx]));
            }
            out.iter_mut().zip(iv).for_each(|(o, x)| *o += wv[idx] * x);
        }
        Ok(self.push(
            out,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
        ))
    }

    /// `-ln x[index]`.
    pub fn neg_log(&mut self, x: Var, index: usize) -> Var {
        let v = -self.nodes[x.0].value[index].ln();
        self.push(vec![v], Op::NegLog { x, index })
    }

    /// `KL(p || x) = sum_i p_i ln(p_i / x_i)` for a sparse target `p`.
    pub fn kl_from_target(&mut self, x: Var, target: &[(usize, f64)]) -> Var {
        let xv = &self.nodes[x.0].value;
        let v = target
            .iter()
            .filter(|(_, p)| *p > 0.0)
            .map(|&(i, p)| p * (p / xv[i]).ln())
            .sum();
        self.push(
            vec![v],
            Op::KlFromTarget {
                x,
                target: target.to_vec(),
            },
        )
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients to
    /// `grads`.
    pub fn backward(&self, loss: Var, grads: &mut Gradients) {
        assert_eq!(self.dim(loss), 1, "backward starts from a scalar");
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        adj[loss.0] = vec![1.0];

        fn acc(adj: &mut [Vec<f64>], v: Var, len: usize) -> &mut [f64] {
            let a = &mut adj[v.0];
            if a.is_empty() {
                a.resize(len, 0.0);
            }
            a
        }

        for i in (0..=loss.0).rev() {
            let dy = std::mem::take(&mut adj[i]);
            if dy.is_empty() {
                continue;
            }
            let node = &self.nodes[i];
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    grads.get_mut(*id).iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                }
                Op::Row { param, row } => {
                    let cols = dy.len();
                    let g = &mut grads.get_mut(*param)[row * cols..(row + 1) * cols];
                    g.iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                }
                Op::Linear { w, x, b } => {
                    let wt = self.params.get(*w);
                    let xv = &self.nodes[x.0].value;
                    let cols = xv.len();
                    {
                        let gw = grads.get_mut(*w);
                        for (r, d) in dy.iter().enumerate() {
                            if *d == 0.0 {
                                continue;
                            }
                            for (g, xj) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *g += d * xj;
                            }
                        }
                    }
                    if let Some(b) = b {
                        grads.get_mut(*b).iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                    }
                    let gx = acc(&mut adj, *x, cols);
                    for (r, d) in dy.iter().enumerate() {
                        if *d == 0.0 {
                            continue;
                        }
                        for (g, wij) in gx.iter_mut().zip(wt.row(r)) {
                            *g += d * wij;
                        }
                    }
                }
                Op::DotParam { x, p } => {
                    let pv = self.params.get(*p).data();
                    let xv = &self.nodes[x.0].value;
                    grads.get_mut(*p).iter_mut().zip(xv).for_each(|(g, xi)| *g += dy[0] * xi);
                    let gx = acc(&mut adj, *x, xv.len());
                    gx.iter_mut().zip(pv).for_each(|(g, pi)| *g += dy[0] * pi);
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        acc(&mut adj, *v, dy.len()).iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                    }
                }
                Op::Sub(a, b) => {
                    acc(&mut adj, *a, dy.len()).iter_mut().zip(&dy).for_each(|(g, d)| *g += d);
                    acc(&mut adj, *b, dy.len()).iter_mut().zip(&dy).for_each(|(g, d)| *g -= d);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let ga: Vec<f64> = dy.iter().zip(bv).map(|(d, y)| d * y).collect();
                    let gb: Vec<f64> = dy.iter().zip(av).map(|(d, x)| d * x).collect();
                    acc(&mut adj, *a, dy.len()).iter_mut().zip(&ga).for_each(|(g, d)| *g += d);
                    acc(&mut adj, *b, dy.len()).iter_mut().zip(&gb).for_each(|(g, d)| *g += d);
                }
                Op::Scale(x, c) => {
                    acc(&mut adj, *x, dy.len()).iter_mut().zip(&dy).for_each(|(g, d)| *g += c * d);
                }
                Op::Tanh(x) => {
                    acc(&mut adj, *x, dy.len())
                        .iter_mut()
                        .zip(dy.iter().zip(y))
                        .for_each(|(g, (d, yi))| *g += d * (1.0 - yi * yi));
                }
                Op::Sigmoid(x) => {
                    acc(&mut adj, *x, dy.len())
                        .iter_mut()
                        .zip(dy.iter().zip(y))
                        .for_each(|(g, (d, yi))| *g += d * yi * (1.0 - yi));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.dim(*p);
                        acc(&mut adj, *p, n)
                            .iter_mut()
                            .zip(&dy[offset..offset + n])
                            .for_each(|(g, d)| *g += d);
                        offset += n;
                    }
                }
                Op::Dropout { x, scale } => {
                    acc(&mut adj, *x, dy.len())
                        .iter_mut()
                        .zip(dy.iter().zip(scale))
                        .for_each(|(g, (d, s))| *g += d * s);
                }
                Op::MaskedSoftmax { x, mask } => {
                    let dot: f64 = dy.iter().zip(y).map(|(d, yi)| d * yi).sum();
                    acc(&mut adj, *x, dy.len())
                        .iter_mut()
                        .zip(dy.iter().zip(y).zip(mask))
                        .for_each(|(g, ((d, yi), m))| {
                            if *m {
                                *g += yi * (d - dot);
                            }
                        });
                }
                Op::WeightedSum { weights, items } => {
                    let wv = &self.nodes[weights.0].value;
                    let wlen = wv.len();
                    let mut gw = vec![0.0; wlen];
                    for &(idx, item) in items {
                        let iv = &self.nodes[item.0].value;
                        gw[idx] += dy.iter().zip(iv).map(|(d, x)| d * x).sum::<f64>();
                        let w = wv[idx];
                        acc(&mut adj, item, dy.len())
                            .iter_mut()
                            .zip(&dy)
                            .for_each(|(g, d)| *g += w * d);
                    }
                    acc(&mut adj, *weights, wlen)
                        .iter_mut()
                        .zip(&gw)
                        .for_each(|(g, d)| *g += d);
                }
                Op::NegLog { x, index } => {
                    let xv = &self.nodes[x.0].value;
                    let n = xv.len();
                    let xi = xv[*index];
                    acc(&mut adj, *x, n)[*index] -= dy[0] / xi;
                }
                Op::KlFromTarget { x, target } => {
                    let xv = &self.nodes[x.0].value;
                    let n = xv.len();
                    let g = acc(&mut adj, *x, n);
                    for &(i, p) in target {
                        if p > 0.0 {
                            g[i] -= dy[0] * p / xv[i];
                        }
                    }
                }
            }
        }
    }
}
