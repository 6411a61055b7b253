//! Complexity-aware pathway aggregation.
//!
//! A scene-complexity profile `c` over the sparse/medium/dense regimes is
//! estimated from per-channel token statistics and text statistics. Three
//! pathways summarise the token grid at different granularities, and a gate
//! conditioned on the pathway outputs and `c` mixes them into one fused
//! vector. Two auxiliary losses are produced for training: a vision-text
//! alignment term and the routing entropy.
//!
//! Everything here runs only at training time; detector inference never
//! touches these parameters.
//!
//! Each operation exists at two levels: a graph-building form (`*_var`) used by
//! the trainer and the gradient checks, and a plain-array wrapper.

pub mod routing;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{glorot, uniform_vector, Array, Graph, ParamStore, Var};

pub use routing::{routing_trace, Correlation, RoutingRecord, RoutingTrace, ROUTING_CSV_HEADER};

pub const PATHWAYS: usize = 3;

/// Visual tokens on a `grid_h x grid_w` grid, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    tokens: Array,
    grid_h: usize,
    grid_w: usize,
}

impl TokenGrid {
    pub fn new(tokens: Array, grid_h: usize, grid_w: usize) -> Result<Self> {
        if tokens.ndim() != 2 || tokens.rows() != grid_h * grid_w {
            return Err(Error::shape(
                "token_grid",
                format!("{:?} tokens for a {grid_h}x{grid_w} grid", tokens.shape()),
            ));
        }
        if !tokens.is_finite() {
            return Err(Error::NonFinite { op: "token_grid" });
        }
        Ok(Self {
            tokens,
            grid_h,
            grid_w,
        })
    }

    pub fn tokens(&self) -> &Array {
        &self.tokens
    }

    pub fn grid_h(&self) -> usize {
        self.grid_h
    }

    pub fn grid_w(&self) -> usize {
        self.grid_w
    }

    pub fn channels(&self) -> usize {
        self.tokens.cols()
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Embedded prompt tokens, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct TextSummary {
    tokens: Array,
}

impl TextSummary {
    pub fn new(tokens: Array) -> Result<Self> {
        if tokens.ndim() != 2 {
            return Err(Error::shape("text_summary", "expected (L, d)"));
        }
        if !tokens.is_finite() {
            return Err(Error::NonFinite { op: "text_summary" });
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &Array {
        &self.tokens
    }
}

/// `[c_s, c_m, c_d]` on the probability simplex.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityProfile(pub [f64; 3]);

impl ComplexityProfile {
    pub fn sparse(&self) -> f64 {
        self.0[0]
    }
    pub fn medium(&self) -> f64 {
        self.0[1]
    }
    pub fn dense(&self) -> f64 {
        self.0[2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionResult {
    pub v_s: Vec<f64>,
    pub v_m: Vec<f64>,
    pub v_d: Vec<f64>,
    /// Gate weights over (sparse, medium, dense).
    pub w: [f64; 3],
    pub v_fused: Vec<f64>,
    pub c: ComplexityProfile,
}

impl FusionResult {
    /// Largest deviation between `v_fused` and `Σ w_p v_p` recomputed from the parts.
    pub fn reconstruction_error(&self) -> f64 {
        (0..self.v_fused.len())
            .map(|i| {
                let r = self.w[0] * self.v_s[i] + self.w[1] * self.v_m[i] + self.w[2] * self.v_d[i];
                (r - self.v_fused[i]).abs()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CpaConfig {
    /// Token channel width `d`.
    pub channels: usize,
    /// Hidden width of the complexity estimator.
    pub estimator_hidden: usize,
    /// Width of the shared alignment space.
    pub align_dim: usize,
    /// Region grid of the medium pathway, `(rows, cols)`.
    pub regions: (usize, usize),
}

impl CpaConfig {
    pub fn for_channels(channels: usize) -> Self {
        Self {
            channels,
            estimator_hidden: 2 * channels,
            align_dim: channels,
            regions: (2, 2),
        }
    }
}

/// Loss weights for the auxiliary objectives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpaCoefficients {
    /// Weight of the alignment loss.
    pub align: f64,
    /// Weight of the per-sample routing entropy (minimised).
    pub entropy: f64,
    /// Weight of the batch-mean routing entropy (maximised by the trainer).
    pub balance: f64,
}

impl Default for CpaCoefficients {
    fn default() -> Self {
        Self {
            align: 0.1,
            entropy: 0.01,
            balance: 0.01,
        }
    }
}

/// How the estimator and gate output layers start.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GateInit {
    /// Output layers zeroed, so `c` and `w` start exactly uniform.
    Neutral,
    /// Output layers drawn as Glorot times `scale`: routing starts close to
    /// uniform. A zeroed gate never lets `c` learn, since a uniform `c`
    /// gives every `c` row of the gate the same gradient.
    Near(f64),
    /// Everything random; used to exercise non-trivial routing in tests.
    Random,
}

pub(crate) mod names {
    pub const EST_W1: &str = "cpa.est.w1";
    pub const EST_B1: &str = "cpa.est.b1";
    pub const EST_W2: &str = "cpa.est.w2";
    pub const EST_B2: &str = "cpa.est.b2";
    pub const SPARSE_QUERY: &str = "cpa.sparse.query";
    pub const SPARSE_WQ: &str = "cpa.sparse.wq";
    pub const SPARSE_WK: &str = "cpa.sparse.wk";
    pub const SPARSE_WV: &str = "cpa.sparse.wv";
    pub const MEDIUM_WQ: &str = "cpa.medium.wq";
    pub const MEDIUM_WK: &str = "cpa.medium.wk";
    pub const MEDIUM_WV: &str = "cpa.medium.wv";
    pub const MEDIUM_WO: &str = "cpa.medium.wo";
    pub const DENSE_WQ: &str = "cpa.dense.wq";
    pub const DENSE_WK: &str = "cpa.dense.wk";
    pub const DENSE_WV: &str = "cpa.dense.wv";
    pub const DENSE_WO: &str = "cpa.dense.wo";
    pub const GATE_W: &str = "cpa.gate.w";
    pub const GATE_B: &str = "cpa.gate.b";
    pub const ALIGN_W: &str = "cpa.align.w";
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpaParams {
    config: CpaConfig,
    store: ParamStore,
}

impl CpaParams {
    pub fn init(config: CpaConfig, init: GateInit, rng: &mut impl Rng) -> Self {
        use names::*;
        let d = config.channels;
        let h = config.estimator_hidden;
        let mut s = ParamStore::new();
        s.insert(EST_W1, glorot(rng, 5 * d, h));
        s.insert(EST_B1, Array::zeros(&[h]));
        s.insert(SPARSE_QUERY, uniform_vector(rng, d, 1.0 / (d as f64).sqrt()));
        for name in [
            SPARSE_WQ, SPARSE_WK, SPARSE_WV, MEDIUM_WQ, MEDIUM_WK, MEDIUM_WV, MEDIUM_WO,
            DENSE_WQ, DENSE_WK, DENSE_WV, DENSE_WO,
        ] {
            s.insert(name, glorot(rng, d, d));
        }
        s.insert(ALIGN_W, glorot(rng, d, config.align_dim));
        match init {
            GateInit::Neutral => {
                s.insert(EST_W2, Array::zeros(&[h, 3]));
                s.insert(GATE_W, Array::zeros(&[3 * d + 3, 3]));
            }
            GateInit::Near(scale) => {
                s.insert(EST_W2, glorot(rng, h, 3).map(|v| v * scale));
                s.insert(GATE_W, glorot(rng, 3 * d + 3, 3).map(|v| v * scale));
            }
            GateInit::Random => {
                s.insert(EST_W2, glorot(rng, h, 3));
                s.insert(GATE_W, glorot(rng, 3 * d + 3, 3));
            }
        }
        s.insert(EST_B2, Array::zeros(&[3]));
        s.insert(GATE_B, Array::zeros(&[3]));
        let params = Self { config, store: s };
        log::info!(
            "pathway aggregation: {} parameters (d={d}, hidden={h})",
            params.parameter_count()
        );
        params
    }

    /// Validates shapes of an externally supplied store, e.g. a checkpoint.
    pub fn from_store(config: CpaConfig, store: ParamStore) -> Result<Self> {
        let params = Self { config, store };
        for (name, shape) in params.expected_shapes() {
            let a = params.store.require(name)?;
            if a.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "cpa_params",
                    format!("{name}: expected {shape:?}, got {:?}", a.shape()),
                ));
            }
        }
        Ok(params)
    }

    fn expected_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        use names::*;
        let d = self.config.channels;
        let h = self.config.estimator_hidden;
        let mut v = vec![
            (EST_W1, vec![5 * d, h]),
            (EST_B1, vec![h]),
            (EST_W2, vec![h, 3]),
            (EST_B2, vec![3]),
            (SPARSE_QUERY, vec![d]),
            (GATE_W, vec![3 * d + 3, 3]),
            (GATE_B, vec![3]),
            (ALIGN_W, vec![d, self.config.align_dim]),
        ];
        for name in [
            SPARSE_WQ, SPARSE_WK, SPARSE_WV, MEDIUM_WQ, MEDIUM_WK, MEDIUM_WV, MEDIUM_WO,
            DENSE_WQ, DENSE_WK, DENSE_WV, DENSE_WO,
        ] {
            v.push((name, vec![d, d]));
        }
        v
    }

    pub fn config(&self) -> &CpaConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Zeroes the complexity estimator and the gate.
    pub fn zero_gates(&mut self) {
        for (name, a) in self
            .expected_shapes()
            .into_iter()
            .filter(|(n, _)| n.starts_with("cpa.est.") || n.starts_with("cpa.gate."))
        {
            self.store.insert(name, Array::zeros(&a));
        }
    }
}

/// Graph nodes of one aggregation pass.
#[derive(Clone, Copy, Debug)]
pub struct CpaVars {
    pub c: Var,
    pub v_s: Var,
    pub v_m: Var,
    pub v_d: Var,
    pub w: Var,
    pub v_fused: Var,
}

fn linear_vec(g: &mut Graph, x: Var, store: &ParamStore, w: &str, b: &str) -> Result<Var> {
    let wv = g.param(store, w)?;
    let bv = g.param(store, b)?;
    let y = g.vecmat(x, wv)?;
    g.add_bias(y, bv)
}

fn check_channels(g: &Graph, x: Var, d: usize, op: &'static str) -> Result<()> {
    match g.shape(x) {
        [_, c] if *c == d => Ok(()),
        s => Err(Error::shape(op, format!("expected (n, {d}), got {s:?}"))),
    }
}

pub fn estimate_complexity_var(
    g: &mut Graph,
    tokens: Var,
    text: Var,
    cfg: &CpaConfig,
    store: &ParamStore,
) -> Result<Var> {
    check_channels(g, tokens, cfg.channels, "estimate_complexity")?;
    check_channels(g, text, cfg.channels, "estimate_complexity")?;
    let mu_v = g.mean(tokens, 0)?;
    let sd_v = g.std(tokens, 0)?;
    let mx_v = g.max(tokens, 0)?;
    let mu_t = g.mean(text, 0)?;
    let sd_t = g.std(text, 0)?;
    let stats = g.concat(&[mu_v, sd_v, mx_v, mu_t, sd_t])?;
    let h = linear_vec(g, stats, store, names::EST_W1, names::EST_B1)?;
    let h = g.relu(h)?;
    let logits = linear_vec(g, h, store, names::EST_W2, names::EST_B2)?;
    g.softmax(logits, 0)
}

/// Single-head scaled dot-product attention of `q` over `k`/`v`; returns the
/// attended values and the attention matrix.
fn attention(g: &mut Graph, q: Var, k: Var, v: Var, d: usize) -> Result<(Var, Var)> {
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = g.softmax(scores, 1)?;
    let out = g.matmul(attn, v)?;
    Ok((out, attn))
}

fn project(g: &mut Graph, x: Var, store: &ParamStore, name: &str) -> Result<Var> {
    let w = g.param(store, name)?;
    g.matmul(x, w)
}

/// Learned-query attention over the tokens; returns `(output, weights)` with
/// the weights as a `(1, n)` row.
pub fn sparse_pathway_var(
    g: &mut Graph,
    tokens: Var,
    cfg: &CpaConfig,
    store: &ParamStore,
) -> Result<(Var, Var)> {
    check_channels(g, tokens, cfg.channels, "sparse_pathway")?;
    let d = cfg.channels;
    let query = g.param(store, names::SPARSE_QUERY)?;
    let query = g.reshape(query, &[1, d])?;
    let q = project(g, query, store, names::SPARSE_WQ)?;
    let k = project(g, tokens, store, names::SPARSE_WK)?;
    let v = project(g, tokens, store, names::SPARSE_WV)?;
    let (out, attn) = attention(g, q, k, v, d)?;
    Ok((g.reshape(out, &[d])?, attn))
}

/// Row-major token indices of each region when a `grid_h x grid_w` grid is cut
/// into `regions.0 x regions.1` blocks; the last block along each axis
/// absorbs any remainder.
pub fn region_groups(grid_h: usize, grid_w: usize, regions: (usize, usize)) -> Result<Vec<Vec<usize>>> {
    let (rh, rw) = regions;
    if rh == 0 || rw == 0 || rh > grid_h || rw > grid_w {
        return Err(Error::invalid(format!(
            "cannot cut a {grid_h}x{grid_w} grid into {rh}x{rw} regions"
        )));
    }
    let bounds = |n: usize, parts: usize, i: usize| {
        let base = n / parts;
        let start = i * base;
        let end = if i + 1 == parts { n } else { start + base };
        start..end
    };
    let mut groups = Vec::with_capacity(rh * rw);
    for i in 0..rh {
        for j in 0..rw {
            let mut g = Vec::new();
            for r in bounds(grid_h, rh, i) {
                for c in bounds(grid_w, rw, j) {
                    g.push(r * grid_w + c);
                }
            }
            groups.push(g);
        }
    }
    Ok(groups)
}

/// Region mean-pooling, one round of attention among region tokens, mean
/// pooling, output projection.
pub fn medium_pathway_var(
    g: &mut Graph,
    tokens: Var,
    grid: (usize, usize),
    cfg: &CpaConfig,
    store: &ParamStore,
) -> Result<Var> {
    check_channels(g, tokens, cfg.channels, "medium_pathway")?;
    let groups = region_groups(grid.0, grid.1, cfg.regions)?;
    let region = g.group_mean_rows(tokens, groups)?;
    let q = project(g, region, store, names::MEDIUM_WQ)?;
    let k = project(g, region, store, names::MEDIUM_WK)?;
    let v = project(g, region, store, names::MEDIUM_WV)?;
    let (updated, _) = attention(g, q, k, v, cfg.channels)?;
    let pooled = g.mean(updated, 0)?;
    let wo = g.param(store, names::MEDIUM_WO)?;
    g.vecmat(pooled, wo)
}

/// Full self-attention, global average pooling, output projection. Returns
/// `(output, attention)`.
pub fn dense_pathway_var(
    g: &mut Graph,
    tokens: Var,
    cfg: &CpaConfig,
    store: &ParamStore,
) -> Result<(Var, Var)> {
    check_channels(g, tokens, cfg.channels, "dense_pathway")?;
    let q = project(g, tokens, store, names::DENSE_WQ)?;
    let k = project(g, tokens, store, names::DENSE_WK)?;
    let v = project(g, tokens, store, names::DENSE_WV)?;
    let (updated, attn) = attention(g, q, k, v, cfg.channels)?;
    let pooled = g.mean(updated, 0)?;
    let wo = g.param(store, names::DENSE_WO)?;
    Ok((g.vecmat(pooled, wo)?, attn))
}

/// Gate weights `w = softmax(h([v_s; v_m; v_d; c]))` and `v_fused = Σ w_p v_p`.
pub fn fuse_var(
    g: &mut Graph,
    v_s: Var,
    v_m: Var,
    v_d: Var,
    c: Var,
    store: &ParamStore,
) -> Result<(Var, Var)> {
    let input = g.concat(&[v_s, v_m, v_d, c])?;
    let logits = linear_vec(g, input, store, names::GATE_W, names::GATE_B)?;
    let w = g.softmax(logits, 0)?;
    let stacked = g.stack_rows(&[v_s, v_m, v_d])?;
    let fused = g.vecmat(w, stacked)?;
    Ok((w, fused))
}

/// `‖A v_fused − A mean(T)‖²` with the shared aligner `A`.
pub fn align_loss_var(g: &mut Graph, v_fused: Var, text: Var, store: &ParamStore) -> Result<Var> {
    let aligner = g.param(store, names::ALIGN_W)?;
    let t_mean = g.mean(text, 0)?;
    let av = g.vecmat(v_fused, aligner)?;
    let at = g.vecmat(t_mean, aligner)?;
    let diff = g.sub(av, at)?;
    g.sum_squares(diff)
}

/// Full aggregation pass: estimate, run the three pathways, fuse, and weigh
/// the per-sample auxiliary losses. The batch balance term is left to the
/// caller because it needs the whole batch.
pub fn cpa_forward_var(
    g: &mut Graph,
    tokens: Var,
    grid: (usize, usize),
    text: Var,
    cfg: &CpaConfig,
    store: &ParamStore,
    coeffs: &CpaCoefficients,
) -> Result<(CpaVars, Var)> {
    let c = estimate_complexity_var(g, tokens, text, cfg, store)?;
    let (v_s, _) = sparse_pathway_var(g, tokens, cfg, store)?;
    let v_m = medium_pathway_var(g, tokens, grid, cfg, store)?;
    let (v_d, _) = dense_pathway_var(g, tokens, cfg, store)?;
    let (w, v_fused) = fuse_var(g, v_s, v_m, v_d, c, store)?;

    let align = align_loss_var(g, v_fused, text, store)?;
    let align = g.scale(align, coeffs.align)?;
    let ent = g.entropy(w)?;
    let ent = g.scale(ent, coeffs.entropy)?;
    let aux = g.add(align, ent)?;
    Ok((
        CpaVars {
            c,
            v_s,
            v_m,
            v_d,
            w,
            v_fused,
        },
        aux,
    ))
}

fn to3(a: &Array) -> [f64; 3] {
    [a.data()[0], a.data()[1], a.data()[2]]
}

pub fn estimate_complexity(v: &TokenGrid, t: &TextSummary, params: &CpaParams) -> Result<ComplexityProfile> {
    let mut g = Graph::new();
    let tok = g.constant(v.tokens().clone());
    let txt = g.constant(t.tokens().clone());
    let c = estimate_complexity_var(&mut g, tok, txt, params.config(), params.store())?;
    Ok(ComplexityProfile(to3(g.value(c))))
}

/// Sparse pathway output together with its attention weights over tokens.
pub fn sparse_pathway(v: &TokenGrid, params: &CpaParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let tok = g.constant(v.tokens().clone());
    let (out, attn) = sparse_pathway_var(&mut g, tok, params.config(), params.store())?;
    Ok((g.value(out).data().to_vec(), g.value(attn).data().to_vec()))
}

pub fn medium_pathway(v: &TokenGrid, params: &CpaParams) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let tok = g.constant(v.tokens().clone());
    let out = medium_pathway_var(&mut g, tok, (v.grid_h(), v.grid_w()), params.config(), params.store())?;
    Ok(g.value(out).data().to_vec())
}

/// Dense pathway output together with the `(n, n)` attention matrix.
pub fn dense_pathway(v: &TokenGrid, params: &CpaParams) -> Result<(Vec<f64>, Array)> {
    let mut g = Graph::new();
    let tok = g.constant(v.tokens().clone());
    let (out, attn) = dense_pathway_var(&mut g, tok, params.config(), params.store())?;
    Ok((g.value(out).data().to_vec(), g.value(attn).clone()))
}

pub fn fuse(v_s: &[f64], v_m: &[f64], v_d: &[f64], c: &ComplexityProfile, params: &CpaParams) -> Result<FusionResult> {
    let d = params.config().channels;
    if [v_s.len(), v_m.len(), v_d.len()].iter().any(|&n| n != d) {
        return Err(Error::shape("fuse", format!("pathway outputs must have length {d}")));
    }
    let mut g = Graph::new();
    let s = g.constant(Array::vector(v_s));
    let m = g.constant(Array::vector(v_m));
    let dd = g.constant(Array::vector(v_d));
    let cv = g.constant(Array::vector(&c.0));
    let (w, fused) = fuse_var(&mut g, s, m, dd, cv, params.store())?;
    Ok(FusionResult {
        v_s: v_s.to_vec(),
        v_m: v_m.to_vec(),
        v_d: v_d.to_vec(),
        w: to3(g.value(w)),
        v_fused: g.value(fused).data().to_vec(),
        c: *c,
    })
}

pub fn align_loss(v_fused: &[f64], t: &TextSummary, params: &CpaParams) -> Result<f64> {
    let mut g = Graph::new();
    let v = g.constant(Array::vector(v_fused));
    let txt = g.constant(t.tokens().clone());
    let l = align_loss_var(&mut g, v, txt, params.store())?;
    Ok(g.scalar(l))
}

/// Shannon entropy (natural log) of routing weights, `0 ln 0 = 0`.
pub fn entropy_reg(w: &[f64]) -> Result<f64> {
    if w.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::invalid("entropy: component outside [0, 1]"));
    }
    Ok(w.iter().map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 }).sum())
}

pub fn cpa_forward(
    v: &TokenGrid,
    t: &TextSummary,
    params: &CpaParams,
    coeffs: &CpaCoefficients,
) -> Result<(FusionResult, f64)> {
    let mut g = Graph::new();
    let tok = g.constant(v.tokens().clone());
    let txt = g.constant(t.tokens().clone());
    let (vars, aux) = cpa_forward_var(
        &mut g,
        tok,
        (v.grid_h(), v.grid_w()),
        txt,
        params.config(),
        params.store(),
        coeffs,
    )?;
    Ok((fusion_from_vars(&g, &vars), g.scalar(aux)))
}

pub(crate) fn fusion_from_vars(g: &Graph, vars: &CpaVars) -> FusionResult {
    FusionResult {
        v_s: g.value(vars.v_s).data().to_vec(),
        v_m: g.value(vars.v_m).data().to_vec(),
        v_d: g.value(vars.v_d).data().to_vec(),
        w: to3(g.value(vars.w)),
        v_fused: g.value(vars.v_fused).data().to_vec(),
        c: ComplexityProfile(to3(g.value(vars.c))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_grid(rng: &mut impl Rng, h: usize, w: usize, d: usize) -> TokenGrid {
        let data = (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        TokenGrid::new(Array::matrix(h * w, d, data).unwrap(), h, w).unwrap()
    }

    fn text(rng: &mut impl Rng, l: usize, d: usize) -> TextSummary {
        let data = (0..l * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        TextSummary::new(Array::matrix(l, d, data).unwrap()).unwrap()
    }

    fn small_cfg() -> CpaConfig {
        CpaConfig::for_channels(6)
    }

    #[test]
    fn zero_gates_give_uniform_profile() {
        let mut r = rng();
        let mut p = CpaParams::init(small_cfg(), GateInit::Random, &mut r);
        p.zero_gates();
        let c = estimate_complexity(&random_grid(&mut r, 4, 4, 6), &text(&mut r, 3, 6), &p).unwrap();
        assert_eq!(c.0, [1.0 / 3.0; 3]);
    }

    #[test]
    fn constant_tokens_have_zero_spread() {
        let mut g = Graph::new();
        let t = g.constant(Array::full(&[16, 6], 0.4));
        let s = g.std(t, 0).unwrap();
        assert!(g.value(s).data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut r = rng();
        let p = CpaParams::init(small_cfg(), GateInit::Neutral, &mut r);
        let grid = random_grid(&mut r, 2, 2, 5);
        assert!(matches!(
            estimate_complexity(&grid, &text(&mut r, 2, 6), &p),
            Err(Error::Shape { .. })
        ));
    }

    fn value_projection(tok: &[f64], p: &CpaParams, name: &str) -> Vec<f64> {
        let w = p.store().get(name).unwrap();
        let d = tok.len();
        (0..d).map(|j| (0..d).map(|i| tok[i] * w.get(i, j)).sum()).collect()
    }

    #[test]
    fn sparse_single_token_is_value_projection() {
        let mut r = rng();
        let p = CpaParams::init(small_cfg(), GateInit::Neutral, &mut r);
        let grid = random_grid(&mut r, 1, 1, 6);
        let (out, attn) = sparse_pathway(&grid, &p).unwrap();
        assert_eq!(attn, vec![1.0]);
        let expect = value_projection(grid.tokens().row(0), &p, names::SPARSE_WV);
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }

        let twin = TokenGrid::new(
            Array::from_rows(&[grid.tokens().row(0).to_vec(), grid.tokens().row(0).to_vec()]).unwrap(),
            1,
            2,
        )
        .unwrap();
        let (out2, _) = sparse_pathway(&twin, &p).unwrap();
        for (a, b) in out.iter().zip(out2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn region_layout() {
        let groups = region_groups(4, 4, (2, 2)).unwrap();
        assert_eq!(groups.len(), 4);
        assert_eq!(groups[0], vec![0, 1, 4, 5]);
        let groups = region_groups(5, 3, (2, 2)).unwrap();
        assert_eq!(groups.iter().map(Vec::len).sum::<usize>(), 15);
        assert_eq!(groups[3].len(), 3 * 2);
        assert!(region_groups(1, 4, (2, 2)).is_err());
    }

    #[test]
    fn constant_grid_pathways_reduce_to_projected_constant() {
        let mut r = rng();
        let p = CpaParams::init(small_cfg(), GateInit::Neutral, &mut r);
        let row: Vec<f64> = (0..6).map(|i| 0.1 * i as f64 - 0.2).collect();
        let grid = TokenGrid::new(Array::from_rows(&vec![row.clone(); 16]).unwrap(), 4, 4).unwrap();
        let single = TokenGrid::new(Array::from_rows(std::slice::from_ref(&row)).unwrap(), 1, 1).unwrap();

        let vm = value_projection(&value_projection(&row, &p, names::MEDIUM_WV), &p, names::MEDIUM_WO);
        for (a, b) in medium_pathway(&grid, &p).unwrap().iter().zip(&vm) {
            assert!((a - b).abs() < 1e-12);
        }
        let (dense_grid, _) = dense_pathway(&grid, &p).unwrap();
        let (dense_one, attn) = dense_pathway(&single, &p).unwrap();
        assert_eq!(attn.data(), &[1.0]);
        let vd = value_projection(&value_projection(&row, &p, names::DENSE_WV), &p, names::DENSE_WO);
        for ((a, b), c) in dense_grid.iter().zip(&dense_one).zip(&vd) {
            assert!((a - b).abs() < 1e-12 && (b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_limits() {
        let mut r = rng();
        let mut p = CpaParams::init(small_cfg(), GateInit::Neutral, &mut r);
        let vs = vec![1.0; 6];
        let vm = vec![2.0; 6];
        let vd = vec![-3.0; 6];
        let c = ComplexityProfile([0.2, 0.3, 0.5]);
        let f = fuse(&vs, &vm, &vd, &c, &p).unwrap();
        assert_eq!(f.w, [1.0 / 3.0; 3]);
        for v in &f.v_fused {
            assert!((v - 0.0).abs() < 1e-12);
        }

        p.store_mut()
            .insert(names::GATE_B, Array::vector(&[100.0, -100.0, -100.0]));
        let f = fuse(&vs, &vm, &vd, &c, &p).unwrap();
        assert!((f.w[0] - 1.0).abs() < 1e-12);
        for (a, b) in f.v_fused.iter().zip(&vs) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(f.reconstruction_error() < 1e-9);
    }

    #[test]
    fn align_loss_analytic_cases() {
        let mut r = rng();
        let mut p = CpaParams::init(CpaConfig::for_channels(3), GateInit::Neutral, &mut r);
        let eye = Array::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        p.store_mut().insert(names::ALIGN_W, eye);
        let t = TextSummary::new(Array::from_rows(&[vec![-1.0, 0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(align_loss(&[1.0, 0.0, 0.0], &t, &p).unwrap(), 4.0);
        assert_eq!(align_loss(&[-1.0, 0.0, 0.0], &t, &p).unwrap(), 0.0);
    }

    #[test]
    fn entropy_values() {
        assert!((entropy_reg(&[1.0 / 3.0; 3]).unwrap() - 1.098_612_288_668_109_7).abs() < 1e-12);
        assert_eq!(entropy_reg(&[1.0, 0.0, 0.0]).unwrap(), 0.0);
        // mpmath, 50 digits
        assert!((entropy_reg(&[0.7, 0.2, 0.1]).unwrap() - 0.801_818_552_543_337_3).abs() < 1e-12);
        assert!(entropy_reg(&[1.2, -0.2, 0.0]).is_err());
    }

    #[test]
    fn zero_coefficients_give_zero_aux() {
        let mut r = rng();
        let p = CpaParams::init(small_cfg(), GateInit::Random, &mut r);
        let coeffs = CpaCoefficients {
            align: 0.0,
            entropy: 0.0,
            balance: 0.0,
        };
        let (f, aux) = cpa_forward(&random_grid(&mut r, 4, 4, 6), &text(&mut r, 2, 6), &p, &coeffs).unwrap();
        assert_eq!(aux, 0.0);
        assert!(f.reconstruction_error() < 1e-9);
    }

    #[test]
    fn from_store_validates_shapes() {
        let mut r = rng();
        let p = CpaParams::init(small_cfg(), GateInit::Neutral, &mut r);
        let mut store = p.store().clone();
        assert!(CpaParams::from_store(small_cfg(), store.clone()).is_ok());
        store.insert(names::GATE_B, Array::zeros(&[4]));
        assert!(CpaParams::from_store(small_cfg(), store).is_err());
    }
}
