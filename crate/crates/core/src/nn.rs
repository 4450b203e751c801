//! Parameter containers and the basic layers built on the tape.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autodiff::{AttnSpec, Gradients, Graph, Var};
use crate::error::{shape_err, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Named access to every trainable tensor of a structure.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Parameters for Tensor {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        f(prefix, self)
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(prefix, self)
    }
}

impl<T: Parameters> Parameters for Option<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        if let Some(p) = self {
            p.visit(prefix, f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(prefix, f)
        }
    }
}

impl<T: Parameters> Parameters for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f)
        }
    }
}

impl<T: Parameters> Parameters for BTreeMap<String, T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a Tensor)) {
        for (k, p) in self {
            p.visit(&join(prefix, k), f)
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (k, p) in self.iter_mut() {
            p.visit_mut(&join(prefix, k), f)
        }
    }
}

/// Implements [`Parameters`] by visiting the listed fields in order.
#[macro_export]
macro_rules! impl_parameters {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::nn::Parameters for $ty {
            fn visit<'a>(
                &'a self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &'a $crate::tensor::Tensor),
            ) {
                $( $crate::nn::Parameters::visit(&self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
            fn visit_mut(
                &mut self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &mut $crate::tensor::Tensor),
            ) {
                $( $crate::nn::Parameters::visit_mut(&mut self.$field, &$crate::nn::join(prefix, stringify!($field)), f); )*
            }
        }
    };
}

/// Named gradients, keyed like [`Parameters::visit`] names.
pub type GradMap = BTreeMap<String, Tensor>;

/// Maps parameter tensors to tape leaves for one forward pass.
///
/// Leaves are keyed by the tensor's address, so the bound structure must not
/// move while the binder is in use (it is borrowed immutably for the pass).
#[derive(Default)]
pub struct Binder {
    by_addr: BTreeMap<usize, Var>,
}

fn addr(t: &Tensor) -> usize {
    t as *const Tensor as usize
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds every tensor of `p`; names for which `trainable` holds become
    /// differentiation targets, the rest enter the tape as constants.
    pub fn bind<P: Parameters + ?Sized>(
        &mut self,
        g: &mut Graph,
        p: &P,
        prefix: &str,
        trainable: &dyn Fn(&str) -> bool,
    ) {
        p.visit(prefix, &mut |name, t| {
            let v = g.leaf(t.clone(), trainable(name));
            self.by_addr.insert(addr(t), v);
        });
    }

    pub fn bind_frozen<P: Parameters + ?Sized>(&mut self, g: &mut Graph, p: &P) {
        self.bind(g, p, "", &|_| false)
    }

    pub fn var(&self, t: &Tensor) -> Var {
        *self.by_addr.get(&addr(t)).expect("parameter tensor was not bound")
    }

    /// Gradients of the bound tensors of `p`, by name. Tensors without a
    /// gradient (frozen, or not reached from the loss) are skipped.
    pub fn collect<P: Parameters + ?Sized>(&self, grads: &Gradients, p: &P, prefix: &str) -> GradMap {
        let mut out = GradMap::new();
        p.visit(prefix, &mut |name, t| {
            if let Some(v) = self.by_addr.get(&addr(t)) {
                if let Some(gr) = grads.get(*v) {
                    out.insert(name.to_string(), gr.clone());
                }
            }
        });
        out
    }
}

/// Adds `other` into `acc`, name by name.
pub fn accumulate(acc: &mut GradMap, other: GradMap) {
    for (k, v) in other {
        match acc.get_mut(&k) {
            Some(a) => {
                for (x, y) in a.data_mut().iter_mut().zip(v.data()) {
                    *x += y;
                }
            }
            None => {
                acc.insert(k, v);
            }
        }
    }
}

pub fn scale_grads(grads: &mut GradMap, s: f64) {
    for t in grads.values_mut() {
        for x in t.data_mut() {
            *x *= s;
        }
    }
}

/// Dense affine map `x W + b` on row vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Option<Tensor>,
}

impl_parameters!(Linear { w, b });

impl Linear {
    /// Gaussian init with std `1/sqrt(in)`, zero bias.
    pub fn new(input: usize, output: usize, bias: bool, rng: &mut SeededRng) -> Self {
        let std = 1.0 / crate::math::sqrt(input as f64);
        Self { w: Tensor::randn(&[input, output], std, rng), b: bias.then(|| Tensor::zeros(&[1, output])) }
    }

    pub fn zeros(input: usize, output: usize, bias: bool) -> Self {
        Self { w: Tensor::zeros(&[input, output]), b: bias.then(|| Tensor::zeros(&[1, output])) }
    }

    pub fn identity(dim: usize, bias: bool) -> Self {
        let w = Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
        Self { w, b: bias.then(|| Tensor::zeros(&[1, dim])) }
    }

    pub fn input_dim(&self) -> usize {
        self.w.dim(0)
    }

    pub fn output_dim(&self) -> usize {
        self.w.dim(1)
    }

    pub fn forward(&self, g: &mut Graph, b: &Binder, x: Var) -> Var {
        let y = g.matmul(x, b.var(&self.w));
        match &self.b {
            Some(bias) => g.add_row(y, b.var(bias)),
            None => y,
        }
    }

    /// Forward with an optional low-rank delta on the same input.
    pub fn forward_adapted(
        &self,
        g: &mut Graph,
        b: &Binder,
        x: Var,
        adapter: Option<&LowRankAdapter>,
    ) -> Var {
        let base = self.forward(g, b, x);
        match adapter {
            Some(a) => a.apply(g, b, base, x),
            None => base,
        }
    }

    /// Tape-free evaluation on a `rows x in` array.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let (m, k, n) = (x.rows(), self.input_dim(), self.output_dim());
        let mut out = alloc::vec![0.0; m * n];
        crate::autodiff::matmul_into(x.data(), self.w.data(), &mut out, m, k, n);
        if let Some(b) = &self.b {
            for row in out.chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
        }
        Tensor::new(&[m, n], out).expect("linear output shape")
    }
}

/// Learned scale and shift after row standardisation.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub scale: Tensor,
    pub shift: Tensor,
}

impl_parameters!(LayerNorm { scale, shift });

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { scale: Tensor::filled(&[1, dim], 1.0), shift: Tensor::zeros(&[1, dim]) }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binder, x: Var) -> Var {
        let n = g.layer_norm(x);
        let s = g.mul_row(n, b.var(&self.scale));
        g.add_row(s, b.var(&self.shift))
    }
}

/// Two-layer perceptron with SiLU between the layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl_parameters!(Mlp { fc1, fc2 });

impl Mlp {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut SeededRng) -> Self {
        Self { fc1: Linear::new(input, hidden, true, rng), fc2: Linear::new(hidden, output, true, rng) }
    }

    pub fn forward(&self, g: &mut Graph, b: &Binder, x: Var) -> Var {
        let h = self.fc1.forward(g, b, x);
        let h = g.silu(h);
        self.fc2.forward(g, b, h)
    }
}

/// Rank-`r` additive delta on a frozen projection: `out + scale * (x down) up`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub down: Tensor,
    pub up: Tensor,
    pub scale: f64,
    pub target: String,
}

impl_parameters!(LowRankAdapter { down, up });

impl LowRankAdapter {
    /// Gaussian `down`, zero `up`: the delta starts at exactly zero.
    pub fn new(target: &str, input: usize, output: usize, rank: usize, scale: f64, rng: &mut SeededRng) -> Result<Self> {
        if rank == 0 {
            return Err(crate::Error::Config(format!("adapter `{target}` needs rank >= 1")));
        }
        Ok(Self {
            down: Tensor::randn(&[input, rank], 1.0 / crate::math::sqrt(input as f64), rng),
            up: Tensor::zeros(&[rank, output]),
            scale,
            target: target.to_string(),
        })
    }

    pub fn rank(&self) -> usize {
        self.down.dim(1)
    }

    pub fn apply(&self, g: &mut Graph, b: &Binder, base_out: Var, input: Var) -> Var {
        let h = g.matmul(input, b.var(&self.down));
        let h = g.matmul(h, b.var(&self.up));
        let h = g.scale(h, self.scale);
        g.add(base_out, h)
    }

    /// Dense delta `scale * down up`, the amount merged into the base weight.
    pub fn delta(&self) -> Tensor {
        let (i, r, o) = (self.down.dim(0), self.rank(), self.up.dim(1));
        let mut out = alloc::vec![0.0; i * o];
        crate::autodiff::matmul_into(self.down.data(), self.up.data(), &mut out, i, r, o);
        for x in out.iter_mut() {
            *x *= self.scale;
        }
        Tensor::new(&[i, o], out).expect("delta shape")
    }

    /// Base weight with the delta folded in.
    pub fn merge_into(&self, base: &Linear) -> Result<Linear> {
        if base.w.shape() != [self.down.dim(0), self.up.dim(1)] {
            return Err(shape_err(
                "merge_into",
                format!("adapter {}x{} vs weight {:?}", self.down.dim(0), self.up.dim(1), base.w.shape()),
            ));
        }
        let mut merged = base.clone();
        for (w, d) in merged.w.data_mut().iter_mut().zip(self.delta().data()) {
            *w += d;
        }
        Ok(merged)
    }
}

/// Adapters keyed by target projection name.
pub type AdapterSet = BTreeMap<String, LowRankAdapter>;

/// `base_out + scale * (input down up)` as a checked standalone operation.
pub fn apply_adapter(
    g: &mut Graph,
    b: &Binder,
    base_out: Var,
    adapter: &LowRankAdapter,
    input: Var,
) -> Result<Var> {
    let (ir, ic) = g.shape(input);
    let (br, bc) = g.shape(base_out);
    if ir != br || ic != adapter.down.dim(0) || bc != adapter.up.dim(1) {
        return Err(shape_err(
            "apply_adapter",
            format!(
                "input {ir}x{ic}, base {br}x{bc}, adapter {}->{}",
                adapter.down.dim(0),
                adapter.up.dim(1)
            ),
        ));
    }
    Ok(adapter.apply(g, b, base_out, input))
}

/// Query/key/value/output projections of one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionProj {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

impl_parameters!(AttentionProj { wq, wk, wv, wo });

impl AttentionProj {
    /// Queries of width `dim`, context of width `ctx_dim`. The output
    /// projection is zero when `zero_out` is set.
    pub fn new(dim: usize, ctx_dim: usize, heads: usize, zero_out: bool, rng: &mut SeededRng) -> Self {
        Self {
            wq: Linear::new(dim, dim, false, rng),
            wk: Linear::new(ctx_dim, dim, false, rng),
            wv: Linear::new(ctx_dim, dim, false, rng),
            wo: if zero_out { Linear::zeros(dim, dim, true) } else { Linear::new(dim, dim, true, rng) },
            heads,
        }
    }

    pub fn dim(&self) -> usize {
        self.wq.output_dim()
    }

    pub fn ctx_dim(&self) -> usize {
        self.wk.input_dim()
    }

    /// Attention of `x` rows over `ctx` rows, grouped by `spec`. Adapters are
    /// looked up as `<key>.wq`, `<key>.wk`, `<key>.wv`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        b: &Binder,
        x: Var,
        ctx: Var,
        spec: AttnSpec,
        adapters: Option<&AdapterSet>,
        key: &str,
    ) -> Var {
        let lookup = |suffix: &str| adapters.and_then(|a| a.get(&join(key, suffix)));
        let q = self.wq.forward_adapted(g, b, x, lookup("wq"));
        let k = self.wk.forward_adapted(g, b, ctx, lookup("wk"));
        let v = self.wv.forward_adapted(g, b, ctx, lookup("wv"));
        let spec = AttnSpec { heads: self.heads, ..spec };
        let a = g.attention(q, k, v, spec);
        self.wo.forward(g, b, a)
    }
}
