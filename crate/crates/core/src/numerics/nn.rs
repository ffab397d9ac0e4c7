//! Affine maps, perceptrons and the pre-norm self-attention block.

use rand::Rng;

use super::params::{Binder, ParamId, ParamStore};
use super::tape::{grouped_attention, Var};
use super::{NumericError, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.register_glorot(format!("{name}.weight"), fan_in, fan_out, gain, rng);
        let bias = store.register(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>, NumericError> {
        x.matmul(b.p(self.weight))?.add_row(b.p(self.bias))
    }
}

/// Two affine layers with a GELU between them.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, 1.0, rng),
            out: Linear::new(store, &format!("{name}.1"), dims.1, dims.2, out_gain, rng),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>, NumericError> {
        let h = self.hidden.forward(b, x)?.gelu();
        self.out.forward(b, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.register(format!("{name}.gain"), Tensor::full(&[width], 1.0)),
            bias: store.register(format!("{name}.bias"), Tensor::zeros(&[width])),
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>, NumericError> {
        x.layer_norm(LN_EPS)
            .mul_row(b.p(self.gain))?
            .add_row(b.p(self.bias))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub width: usize,
    pub heads: usize,
    pub ff_mult: usize,
    /// When false the block skips both layer norms (used by identity fixtures).
    pub norm: bool,
}

impl AttentionConfig {
    pub fn new(width: usize, heads: usize) -> Result<Self, NumericError> {
        if heads == 0 || width % heads != 0 {
            return Err(NumericError::Config(format!(
                "feature width {width} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            width,
            heads,
            ff_mult: 4,
            norm: true,
        })
    }
}

/// Pre-norm multi-head self-attention followed by a GELU feed-forward, both
/// residual. Carries no positional encoding.
#[derive(Debug, Clone, Copy)]
pub struct AttentionBlock {
    pub config: AttentionConfig,
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub ff: Mlp,
}

impl AttentionBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: AttentionConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let c = config.width;
        let f = c * config.ff_mult;
        Self {
            config,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), c),
            q: Linear::new(store, &format!("{name}.q"), c, c, 1.0, rng),
            k: Linear::new(store, &format!("{name}.k"), c, c, 1.0, rng),
            v: Linear::new(store, &format!("{name}.v"), c, c, 1.0, rng),
            o: Linear::new(store, &format!("{name}.o"), c, c, 0.5, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), c),
            ff: Mlp::new(store, &format!("{name}.ff"), (c, f, c), 0.5, rng),
        }
    }

    /// Applies the block to `tokens` (`[R×C]`), attending only within each group of rows.
    pub fn forward<'t>(
        &self,
        b: &Binder<'t, '_>,
        tokens: Var<'t>,
        groups: &[Vec<usize>],
    ) -> Result<Var<'t>, NumericError> {
        let h = if self.config.norm {
            self.ln1.forward(b, tokens)?
        } else {
            tokens
        };
        let q = self.q.forward(b, h)?;
        let k = self.k.forward(b, h)?;
        let v = self.v.forward(b, h)?;
        let attn = grouped_attention(q, k, v, groups, self.config.heads)?;
        let x = tokens.add(self.o.forward(b, attn)?)?;
        let h2 = if self.config.norm {
            self.ln2.forward(b, x)?
        } else {
            x
        };
        x.add(self.ff.forward(b, h2)?)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut ids = vec![self.ln1.gain, self.ln1.bias];
        for l in [self.q, self.k, self.v, self.o] {
            ids.extend([l.weight, l.bias]);
        }
        ids.extend([self.ln2.gain, self.ln2.bias]);
        for l in [self.ff.hidden, self.ff.out] {
            ids.extend([l.weight, l.bias]);
        }
        ids
    }
}

/// Single sequence over all rows.
pub fn single_group(rows: usize) -> Vec<Vec<usize>> {
    vec![(0..rows).collect()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block(norm: bool) -> (ParamStore, AttentionBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cfg = AttentionConfig::new(8, 4).unwrap();
        cfg.norm = norm;
        let blk = AttentionBlock::new(&mut store, "blk", cfg, &mut rng);
        (store, blk)
    }

    fn zero(store: &mut ParamStore, id: ParamId) {
        store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
    }

    fn tokens(l: usize, c: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..l * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(vec![l, c], data).unwrap()
    }

    #[test]
    fn heads_must_divide_width() {
        assert!(matches!(
            AttentionConfig::new(10, 4),
            Err(NumericError::Config(_))
        ));
    }

    #[test]
    fn zero_projections_give_identity() {
        let (mut store, blk) = block(true);
        for l in [blk.o, blk.ff.out] {
            zero(&mut store, l.weight);
            zero(&mut store, l.bias);
        }
        let x = tokens(5, 8, 1);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let input = tape.constant(x.clone());
        let y = blk.forward(&b, input, &single_group(5)).unwrap();
        assert_eq!(y.to_vec(), x.data());
    }

    #[test]
    fn uniform_attention_adds_token_mean() {
        let (mut store, blk) = block(false);
        for l in [blk.q, blk.k, blk.ff.out] {
            zero(&mut store, l.weight);
            zero(&mut store, l.bias);
        }
        *store.get_mut(blk.v.weight) = Tensor::identity(8);
        *store.get_mut(blk.o.weight) = Tensor::identity(8);
        let x = tokens(4, 8, 2);
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let y = blk
            .forward(&b, tape.constant(x.clone()), &single_group(4))
            .unwrap()
            .value();
        for c in 0..8 {
            let mean: f64 = (0..4).map(|r| x.get2(r, c)).sum::<f64>() / 4.0;
            for r in 0..4 {
                assert!((y.get2(r, c) - (x.get2(r, c) + mean)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariant_over_tokens() {
        let (store, blk) = block(true);
        let x = tokens(6, 8, 4);
        let perm = [0usize, 3, 5, 1, 2, 4];
        let xp = Tensor::new(
            vec![6, 8],
            perm.iter().flat_map(|&r| x.row(r).to_vec()).collect(),
        )
        .unwrap();
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let y = blk
            .forward(&b, tape.constant(x), &single_group(6))
            .unwrap()
            .value();
        let yp = blk
            .forward(&b, tape.constant(xp), &single_group(6))
            .unwrap()
            .value();
        for (i, &r) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp.get2(i, c) - y.get2(r, c)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn groups_do_not_interact() {
        let (store, blk) = block(true);
        let x = tokens(6, 8, 5);
        let mut x2 = x.clone();
        // perturb a row of the second group only
        x2.data_mut()[5 * 8] += 1.0;
        let groups = vec![vec![0, 1, 2], vec![3, 4, 5]];
        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let y = blk.forward(&b, tape.constant(x), &groups).unwrap().value();
        let y2 = blk.forward(&b, tape.constant(x2), &groups).unwrap().value();
        assert_eq!(&y.data()[..24], &y2.data()[..24]);
        assert_ne!(&y.data()[24..], &y2.data()[24..]);
    }
}
