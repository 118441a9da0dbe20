//! Low-rank adaptation of frozen linear projections.
//!
//! A wrapped layer computes `y = x·W0ᵀ + b + (α/r)·drop(x)·Aᵀ·Bᵀ` with
//! `A: r×d_in`, `B: d_out×r`. `W0` and `b` are never modified; only `A` and
//! `B` train. With `B = 0` at initialization the adapter contributes exactly
//! nothing, so a freshly adapted model reproduces its base model.
//!
//! The math is generic over the float type so gradient checks can run in
//! double precision while models run in `f32`.

use std::collections::BTreeSet;
use std::fmt::Debug;

use ndarray::{Array2, ArrayView1, ArrayView2, LinalgScalar, ScalarOperand};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub trait Scalar:
    LinalgScalar
    + ScalarOperand
    + num_traits::Float
    + num_traits::NumAssign
    + Debug
    + Send
    + Sync
    + 'static
{
}

impl<T> Scalar for T where
    T: LinalgScalar
        + ScalarOperand
        + num_traits::Float
        + num_traits::NumAssign
        + Debug
        + Send
        + Sync
        + 'static
{
}

fn cast<T: Scalar>(v: f64) -> T {
    T::from(v).expect("finite f64 fits the scalar type")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Query,
    Key,
    Value,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Query, Target::Key, Target::Value];

    pub fn short(self) -> &'static str {
        match self {
            Target::Query => "q",
            Target::Key => "k",
            Target::Value => "v",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: BTreeSet<Target>,
    /// Transformer blocks to adapt; `None` adapts every block.
    pub blocks: Option<Vec<usize>>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.3,
            targets: Target::ALL.into_iter().collect(),
            blocks: None,
        }
    }
}

impl LoraConfig {
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            ..Self::default()
        }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config("LoRA alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("LoRA dropout must lie in [0, 1)".into()));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("LoRA needs at least one target projection".into()));
        }
        Ok(())
    }

    pub fn adapts_block(&self, block: usize) -> bool {
        self.blocks.as_ref().is_none_or(|b| b.contains(&block))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayerState<T> {
    /// `r × d_in`
    pub a: Array2<T>,
    /// `d_out × r`
    pub b: Array2<T>,
    pub scaling: T,
    pub dropout: f64,
    pub merged: bool,
}

impl<T: Scalar> LoraLayerState<T> {
    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn d_in(&self) -> usize {
        self.a.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.b.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `scaling · B·A`, shaped like the wrapped weight.
    pub fn delta(&self) -> Array2<T> {
        self.b.dot(&self.a) * self.scaling
    }
}

/// `A ~ N(0, (1/r)²)`, `B = 0`.
pub fn init_adapter<T: Scalar, R: Rng + ?Sized>(
    d_in: usize,
    d_out: usize,
    cfg: &LoraConfig,
    rng: &mut R,
) -> LoraLayerState<T> {
    let r = cfg.rank;
    if r > d_in.min(d_out) {
        log::warn!("LoRA rank {r} exceeds min(d_in={d_in}, d_out={d_out})");
    }
    let std = 1.0 / r as f64;
    let a = Array2::from_shape_simple_fn((r, d_in), || {
        let z: f64 = StandardNormal.sample(rng);
        cast(z * std)
    });
    LoraLayerState {
        a,
        b: Array2::zeros((d_out, r)),
        scaling: cast(cfg.scaling()),
        dropout: cfg.dropout,
        merged: false,
    }
}

/// Intermediate values kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LoraCache<T> {
    /// Adapter-path input after dropout, `n × d_in`.
    dropped: Array2<T>,
    /// Inverted-dropout multipliers (`0` or `1/(1-p)`); `None` in eval mode.
    mask: Option<Array2<T>>,
    /// `dropped · Aᵀ`, `n × r`.
    projected: Array2<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraGrads<T> {
    pub a: Array2<T>,
    pub b: Array2<T>,
}

fn check_shapes<T: Scalar>(
    x: &ArrayView2<T>,
    w0: &ArrayView2<T>,
    bias: Option<ArrayView1<T>>,
    s: &LoraLayerState<T>,
) -> Result<()> {
    let (d_out, d_in) = w0.dim();
    if x.ncols() != d_in {
        return Err(Error::Shape(format!("input has {} features, weight expects {d_in}", x.ncols())));
    }
    if let Some(b) = bias {
        if b.len() != d_out {
            return Err(Error::Shape(format!("bias has {} entries, weight has {d_out} rows", b.len())));
        }
    }
    if s.d_in() != d_in || s.d_out() != d_out || s.b.ncols() != s.rank() {
        return Err(Error::Shape(format!(
            "adapter is {}→{} (rank {}), weight is {d_in}→{d_out}",
            s.d_in(),
            s.d_out(),
            s.rank()
        )));
    }
    Ok(())
}

pub fn linear<T: Scalar>(x: ArrayView2<T>, w: ArrayView2<T>, bias: Option<ArrayView1<T>>) -> Array2<T> {
    let mut y = x.dot(&w.t());
    if let Some(b) = bias {
        y += &b;
    }
    y
}

pub fn adapted_forward<T: Scalar, R: Rng + ?Sized>(
    x: ArrayView2<T>,
    w0: ArrayView2<T>,
    bias: Option<ArrayView1<T>>,
    s: &LoraLayerState<T>,
    train_mode: bool,
    rng: &mut R,
) -> Result<Array2<T>> {
    adapted_forward_cached(x, w0, bias, s, train_mode, rng).map(|(y, _)| y)
}

/// Forward pass that also returns what [`adapted_backward`] needs. When the
/// adapter is merged into `w0`, the low-rank path is skipped.
pub fn adapted_forward_cached<T: Scalar, R: Rng + ?Sized>(
    x: ArrayView2<T>,
    w0: ArrayView2<T>,
    bias: Option<ArrayView1<T>>,
    s: &LoraLayerState<T>,
    train_mode: bool,
    rng: &mut R,
) -> Result<(Array2<T>, LoraCache<T>)> {
    check_shapes(&x, &w0, bias, s)?;
    let mut y = linear(x, w0, bias);
    let (dropped, mask) = if train_mode && s.dropout > 0.0 && !s.merged {
        let keep = 1.0 - s.dropout;
        let inv: T = cast(1.0 / keep);
        let mask = Array2::from_shape_simple_fn(x.dim(), || {
            if rng.random_bool(keep) {
                inv
            } else {
                T::zero()
            }
        });
        (&x * &mask, Some(mask))
    } else {
        (x.to_owned(), None)
    };
    let projected = if s.merged {
        Array2::zeros((x.nrows(), s.rank()))
    } else {
        let h = dropped.dot(&s.a.t());
        y.scaled_add(s.scaling, &h.dot(&s.b.t()));
        h
    };
    Ok((
        y,
        LoraCache {
            dropped,
            mask,
            projected,
        },
    ))
}

/// Gradients w.r.t. the layer input and the adapter factors given `dy`.
pub fn adapted_backward<T: Scalar>(
    dy: ArrayView2<T>,
    w0: ArrayView2<T>,
    s: &LoraLayerState<T>,
    cache: &LoraCache<T>,
) -> (Array2<T>, LoraGrads<T>) {
    let mut dx = dy.dot(&w0);
    let grad_b = dy.t().dot(&cache.projected) * s.scaling;
    let d_projected = dy.dot(&s.b) * s.scaling;
    let grad_a = d_projected.t().dot(&cache.dropped);
    if !s.merged {
        let mut d_dropped = d_projected.dot(&s.a);
        if let Some(mask) = &cache.mask {
            d_dropped *= mask;
        }
        dx += &d_dropped;
    }
    (dx, LoraGrads { a: grad_a, b: grad_b })
}

/// `W0 + scaling·B·A`; marks the adapter merged.
pub fn merge<T: Scalar>(w0: ArrayView2<T>, s: &mut LoraLayerState<T>) -> Result<Array2<T>> {
    if s.merged {
        return Err(Error::AlreadyMerged);
    }
    if w0.dim() != (s.d_out(), s.d_in()) {
        return Err(Error::Shape("weight and adapter disagree".into()));
    }
    s.merged = true;
    Ok(&w0 + &s.delta())
}

/// Inverse of [`merge`].
pub fn unmerge<T: Scalar>(w_merged: ArrayView2<T>, s: &mut LoraLayerState<T>) -> Result<Array2<T>> {
    if !s.merged {
        return Err(Error::NotMerged);
    }
    if w_merged.dim() != (s.d_out(), s.d_in()) {
        return Err(Error::Shape("weight and adapter disagree".into()));
    }
    s.merged = false;
    Ok(&w_merged - &s.delta())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub d_in: usize,
    pub d_out: usize,
}

/// What parameter accounting needs to know about a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub adapted_layers: Vec<LayerDims>,
    pub head_in: usize,
}

/// `Σ r·(d_in + d_out)` over adapted layers plus the single-logit head
/// (`head_in` weights and one bias).
pub fn trainable_param_count(desc: &ModelDescription, cfg: &LoraConfig) -> usize {
    let adapters: usize = desc
        .adapted_layers
        .iter()
        .map(|l| cfg.rank * (l.d_in + l.d_out))
        .sum();
    adapters + desc.head_in + 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_shapes_and_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s: LoraLayerState<f32> = init_adapter(64, 64, &LoraConfig::with_rank(8), &mut rng);
        assert_eq!(s.a.dim(), (8, 64));
        assert_eq!(s.b.dim(), (64, 8));
        assert_eq!(s.scaling, 2.0);
        assert!(s.b.iter().all(|v| *v == 0.0));
        assert!(s.delta().iter().all(|v| *v == 0.0));
        assert!(!s.merged);
        let s4: LoraLayerState<f32> = init_adapter(64, 64, &LoraConfig::with_rank(4), &mut rng);
        assert_eq!(s4.scaling, 4.0);
        // rank above min(d_in, d_out) is allowed
        let wide: LoraLayerState<f32> = init_adapter(2, 3, &LoraConfig::with_rank(8), &mut rng);
        assert_eq!(wide.rank(), 8);
    }

    #[test]
    fn a_has_requested_spread() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: LoraLayerState<f64> = init_adapter(2000, 4, &LoraConfig::with_rank(4), &mut rng);
        let n = s.a.len() as f64;
        let var = s.a.iter().map(|v| v * v).sum::<f64>() / n;
        assert!((var.sqrt() - 0.25).abs() < 0.01);
    }

    #[test]
    fn fresh_adapter_is_exact_base() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_matrix(5, 12, &mut rng);
        let w = rand_matrix(7, 12, &mut rng);
        let b = rand_matrix(1, 7, &mut rng).row(0).to_owned();
        let s = init_adapter(12, 7, &LoraConfig::default(), &mut rng);
        let y = adapted_forward(x.view(), w.view(), Some(b.view()), &s, false, &mut rng).unwrap();
        assert_eq!(y, linear(x.view(), w.view(), Some(b.view())));
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = LoraConfig {
            dropout: 0.0,
            ..LoraConfig::with_rank(3)
        };
        let mut s = init_adapter::<f64, _>(6, 5, &cfg, &mut rng);
        s.b = rand_matrix(5, 3, &mut rng);
        let x = rand_matrix(4, 6, &mut rng);
        let w = rand_matrix(5, 6, &mut rng);
        let y = adapted_forward(x.view(), w.view(), None, &s, true, &mut rng).unwrap();
        // explicit triple loop
        for n in 0..4 {
            for o in 0..5 {
                let mut acc = 0.0;
                for i in 0..6 {
                    acc += x[[n, i]] * w[[o, i]];
                    let mut low = 0.0;
                    for k in 0..3 {
                        low += s.b[[o, k]] * s.a[[k, i]];
                    }
                    acc += s.scaling * low * x[[n, i]];
                }
                assert!((y[[n, o]] - acc).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn train_dropout_deterministic_in_rng() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = init_adapter::<f64, _>(8, 8, &LoraConfig::default(), &mut rng);
        s.b = rand_matrix(8, 8, &mut rng);
        let x = rand_matrix(3, 8, &mut rng);
        let w = rand_matrix(8, 8, &mut rng);
        let run = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            adapted_forward(x.view(), w.view(), None, &s, true, &mut r).unwrap()
        };
        assert_eq!(run(9), run(9));
        assert_ne!(run(9), run(10));
    }

    #[test]
    fn merge_equivalence_and_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = init_adapter::<f64, _>(10, 6, &LoraConfig::with_rank(4), &mut rng);
        let w0 = rand_matrix(6, 10, &mut rng);
        assert_eq!(merge(w0.view(), &mut s.clone()).unwrap(), w0);

        s.b = rand_matrix(6, 4, &mut rng);
        let x = rand_matrix(3, 10, &mut rng);
        let adapted = adapted_forward(x.view(), w0.view(), None, &s, false, &mut rng).unwrap();
        let merged = merge(w0.view(), &mut s).unwrap();
        assert!(s.merged);
        let plain = linear(x.view(), merged.view(), None);
        for (a, b) in adapted.iter().zip(&plain) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        // forward through the merged weight skips the adapter path
        let again = adapted_forward(x.view(), merged.view(), None, &s, false, &mut rng).unwrap();
        assert_eq!(again, plain);
        assert!(matches!(merge(merged.view(), &mut s), Err(Error::AlreadyMerged)));
        let restored = unmerge(merged.view(), &mut s).unwrap();
        let drift = (&restored - &w0).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(drift < 1e-12);
        assert!(matches!(unmerge(restored.view(), &mut s), Err(Error::NotMerged)));
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = init_adapter::<f64, _>(4, 4, &LoraConfig::default(), &mut rng);
        let x = rand_matrix(2, 5, &mut rng);
        let w = rand_matrix(4, 4, &mut rng);
        assert!(matches!(
            adapted_forward(x.view(), w.view(), None, &s, false, &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cfg = LoraConfig {
            dropout: 0.0,
            ..LoraConfig::with_rank(2)
        };
        let mut s = init_adapter::<f64, _>(5, 4, &cfg, &mut rng);
        s.b = rand_matrix(4, 2, &mut rng);
        let x = rand_matrix(3, 5, &mut rng);
        let w = rand_matrix(4, 5, &mut rng);
        let g = rand_matrix(3, 4, &mut rng); // loss = Σ g ∘ y
        let loss = |s: &LoraLayerState<f64>, x: &Array2<f64>| {
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let y = adapted_forward(x.view(), w.view(), None, s, false, &mut r).unwrap();
            (&y * &g).sum()
        };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let (_, cache) = adapted_forward_cached(x.view(), w.view(), None, &s, false, &mut r).unwrap();
        let (dx, grads) = adapted_backward(g.view(), w.view(), &s, &cache);
        let h = 1e-6;
        for idx in ndarray::indices(s.a.dim()) {
            let (mut p, mut m) = (s.clone(), s.clone());
            p.a[idx] += h;
            m.a[idx] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grads.a[idx]).abs() < 1e-7);
        }
        for idx in ndarray::indices(s.b.dim()) {
            let (mut p, mut m) = (s.clone(), s.clone());
            p.b[idx] += h;
            m.b[idx] -= h;
            let fd = (loss(&p, &x) - loss(&m, &x)) / (2.0 * h);
            assert!((fd - grads.b[idx]).abs() < 1e-7);
        }
        for idx in ndarray::indices(x.dim()) {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[idx] += h;
            m[idx] -= h;
            let fd = (loss(&s, &p) - loss(&s, &m)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-7);
        }
    }

    #[test]
    fn param_counts() {
        let one = ModelDescription {
            adapted_layers: vec![LayerDims { d_in: 64, d_out: 64 }],
            head_in: 0,
        };
        assert_eq!(trainable_param_count(&one, &LoraConfig::with_rank(8)) - 1, 1024);
        let tiny = ModelDescription {
            adapted_layers: vec![LayerDims { d_in: 64, d_out: 64 }; 12],
            head_in: 64,
        };
        assert_eq!(trainable_param_count(&tiny, &LoraConfig::with_rank(8)), 12_288 + 65);
        assert_eq!(trainable_param_count(&tiny, &LoraConfig::with_rank(4)), 6_144 + 65);
    }

    #[test]
    fn config_validation() {
        assert!(LoraConfig::default().validate().is_ok());
        assert!(LoraConfig::with_rank(0).validate().is_err());
        let mut c = LoraConfig::default();
        c.targets.clear();
        assert!(c.validate().is_err());
        c = LoraConfig { dropout: 1.0, ..Default::default() };
        assert!(c.validate().is_err());
        let blocks = LoraConfig { blocks: Some(vec![1, 3]), ..Default::default() };
        assert!(blocks.adapts_block(3) && !blocks.adapts_block(0));
    }
}
