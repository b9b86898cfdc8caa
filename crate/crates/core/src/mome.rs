//! Mixture-of-modality-experts transformer layer.
//!
//! Tokens are hard-routed by modality to one of three experts (ts, face,
//! body). Each expert owns its Q/K/V/O projections, its normalization and
//! its FFN; the pre-attention normalization is shared. Attention runs once
//! over the whole interleaved sequence with per-position projections and a
//! mask that encodes both causality and the admissible modality pairs:
//! text/speech queries read text/speech keys, face and body queries read
//! text/speech keys, and face/body keys are only readable when the
//! face-body toggle is on.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::modality::{Expert, Modality};
use crate::numerics::{Bound, Graph, NumericsError, ParamStore, RowMask, Tensor, Var};
use crate::rope::RopeLadder;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MomeError {
    #[error("orphan motion query at position {0}: no admissible key")]
    OrphanMotionQuery(usize),
    #[error("model width {d} is not divisible by {n_heads} heads")]
    BadHeads { d: usize, n_heads: usize },
    #[error("rotary dimension {d_rot} exceeds head dimension {d_h}")]
    RotaryTooWide { d_rot: usize, d_h: usize },
    #[error("{what}: expected {expected}, got {got}")]
    Length {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Expert assignment of each label; total and fixed.
pub fn route(labels: &[Modality]) -> Vec<Expert> {
    labels.iter().map(|m| m.expert()).collect()
}

/// Which cross-modal reads are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Topology {
    /// Face and body queries may read face and body keys.
    pub face_body: bool,
    /// Face and body queries may read text/speech keys.
    pub cross: bool,
}

impl Default for Topology {
    fn default() -> Self {
        Topology {
            face_body: false,
            cross: true,
        }
    }
}

impl Topology {
    pub fn admissible(&self, query: Modality, key: Modality) -> bool {
        if query.is_ts() {
            key.is_ts()
        } else if key.is_ts() {
            self.cross
        } else {
            self.face_body
        }
    }

    /// Motion queries have something to read at all.
    fn motion_reads(&self) -> bool {
        self.cross || self.face_body
    }
}

/// Causal, topology-restricted admissibility of every (query, key) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    mask: Arc<RowMask>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.mask.rows
    }

    pub fn is_empty(&self) -> bool {
        self.mask.rows == 0
    }

    pub fn allow(&self, q: usize, k: usize) -> bool {
        self.mask.get(q, k)
    }

    /// False for queries that intentionally read nothing.
    pub fn active(&self, q: usize) -> bool {
        self.mask.active[q]
    }

    pub fn row_mask(&self) -> Arc<RowMask> {
        Arc::clone(&self.mask)
    }
}

pub fn build_mask(labels: &[Modality], enable_face_body: bool) -> Result<AttentionMask, MomeError> {
    build_mask_with(
        labels,
        Topology {
            face_body: enable_face_body,
            cross: true,
        },
    )
}

pub fn build_mask_with(labels: &[Modality], topo: Topology) -> Result<AttentionMask, MomeError> {
    let n = labels.len();
    let mut mask = RowMask {
        rows: n,
        cols: n,
        allow: vec![false; n * n],
        active: vec![true; n],
    };
    for (q, &mq) in labels.iter().enumerate() {
        let mut any = false;
        for (k, &mk) in labels[..=q].iter().enumerate() {
            let ok = topo.admissible(mq, mk);
            mask.allow[q * n + k] = ok;
            any |= ok;
        }
        if mq.is_motion() && !topo.motion_reads() {
            mask.active[q] = false;
        } else if !any {
            return Err(MomeError::OrphanMotionQuery(q));
        }
    }
    Ok(AttentionMask {
        mask: Arc::new(mask),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerDims {
    pub d: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub eps: f64,
}

impl LayerDims {
    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<(), MomeError> {
        if self.n_heads == 0 || self.d == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(MomeError::BadHeads {
                d: self.d,
                n_heads: self.n_heads,
            });
        }
        Ok(())
    }
}

/// Parameter names of one expert under `prefix` (e.g. `layer0.face`).
pub const EXPERT_PARAMS: [&str; 10] = [
    "wq", "wk", "wv", "wo", "ln.gain", "ln.bias", "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
];

fn normal(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("nonzero dims")
}

fn constant(n: usize, v: f64) -> Tensor {
    Tensor::vector(vec![v; n]).expect("nonzero length")
}

/// Registers the parameters of one layer under `prefix`.
///
/// Projections are drawn from N(0, 1/fan_in); output projections are
/// further scaled by `out_scale`. Gains start at 1, biases at 0.
pub fn register_layer(
    store: &mut ParamStore,
    prefix: &str,
    dims: LayerDims,
    out_scale: f64,
    rng: &mut impl Rng,
) -> Result<(), MomeError> {
    dims.validate()?;
    let (d, f) = (dims.d, dims.d_ff);
    let s_d = 1.0 / (d as f64).sqrt();
    let s_f = 1.0 / (f as f64).sqrt();
    store.insert(format!("{prefix}.ln_attn.gain"), constant(d, 1.0))?;
    store.insert(format!("{prefix}.ln_attn.bias"), constant(d, 0.0))?;
    for e in Expert::ALL {
        let p = format!("{prefix}.{e}");
        store.insert(format!("{p}.wq"), normal(rng, d, d, s_d))?;
        store.insert(format!("{p}.wk"), normal(rng, d, d, s_d))?;
        store.insert(format!("{p}.wv"), normal(rng, d, d, s_d))?;
        store.insert(format!("{p}.wo"), normal(rng, d, d, s_d * out_scale))?;
        store.insert(format!("{p}.ln.gain"), constant(d, 1.0))?;
        store.insert(format!("{p}.ln.bias"), constant(d, 0.0))?;
        store.insert(format!("{p}.ffn.w1"), normal(rng, d, f, s_d))?;
        store.insert(format!("{p}.ffn.b1"), constant(f, 0.0))?;
        store.insert(format!("{p}.ffn.w2"), normal(rng, f, d, s_f * out_scale))?;
        store.insert(format!("{p}.ffn.b2"), constant(d, 0.0))?;
    }
    Ok(())
}

/// Graph handles of one expert's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ExpertVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln_gain: Var,
    pub ln_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Graph handles of one layer: shared pre-attention norm plus three experts
/// indexed by [`Expert::index`].
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub ln_attn_gain: Var,
    pub ln_attn_bias: Var,
    pub experts: [ExpertVars; 3],
}

impl LayerVars {
    pub fn lookup(store: &ParamStore, bound: &Bound, prefix: &str) -> Result<Self, MomeError> {
        let v = |name: String| store.var(bound, &name);
        let expert = |e: Expert| -> Result<ExpertVars, NumericsError> {
            let p = format!("{prefix}.{e}");
            Ok(ExpertVars {
                wq: v(format!("{p}.wq"))?,
                wk: v(format!("{p}.wk"))?,
                wv: v(format!("{p}.wv"))?,
                wo: v(format!("{p}.wo"))?,
                ln_gain: v(format!("{p}.ln.gain"))?,
                ln_bias: v(format!("{p}.ln.bias"))?,
                w1: v(format!("{p}.ffn.w1"))?,
                b1: v(format!("{p}.ffn.b1"))?,
                w2: v(format!("{p}.ffn.w2"))?,
                b2: v(format!("{p}.ffn.b2"))?,
            })
        };
        Ok(LayerVars {
            ln_attn_gain: v(format!("{prefix}.ln_attn.gain"))?,
            ln_attn_bias: v(format!("{prefix}.ln_attn.bias"))?,
            experts: [expert(Expert::Ts)?, expert(Expert::Face)?, expert(Expert::Body)?],
        })
    }

    fn each(&self, f: impl Fn(&ExpertVars) -> Var) -> [Var; 3] {
        [f(&self.experts[0]), f(&self.experts[1]), f(&self.experts[2])]
    }
}

/// Expert index per position, as consumed by the routed graph ops.
pub fn route_indices(experts: &[Expert]) -> Arc<[usize]> {
    experts.iter().map(|e| e.index()).collect()
}

/// Per-sequence inputs shared by every layer.
#[derive(Debug, Clone)]
pub struct LayerContext<'a> {
    pub routes: Arc<[usize]>,
    pub mask: &'a AttentionMask,
    pub s_hat: &'a [f64],
    pub ladder: &'a RopeLadder,
}

/// `h + FFN_e(LN_e(h))` with each row's routed expert.
pub fn expert_ffn_block(
    g: &mut Graph,
    h: Var,
    routes: Arc<[usize]>,
    vars: &LayerVars,
    eps: f64,
) -> Result<Var, MomeError> {
    let y = g.layer_norm(
        h,
        &vars.each(|e| e.ln_gain),
        &vars.each(|e| e.ln_bias),
        routes.clone(),
        eps,
    )?;
    let f = g.routed_matmul(y, &vars.each(|e| e.w1), routes.clone())?;
    let f = g.routed_bias(f, &vars.each(|e| e.b1), routes.clone())?;
    let f = g.gelu(f)?;
    let f = g.routed_matmul(f, &vars.each(|e| e.w2), routes.clone())?;
    let f = g.routed_bias(f, &vars.each(|e| e.b2), routes)?;
    Ok(g.add(h, f)?)
}

/// One layer: routed masked multi-head attention with rotary q/k and a
/// residual, followed by the routed norm + FFN block.
pub fn layer_forward(
    g: &mut Graph,
    h: Var,
    ctx: &LayerContext<'_>,
    dims: LayerDims,
    vars: &LayerVars,
) -> Result<Var, MomeError> {
    dims.validate()?;
    let n = g.value(h).rows();
    for (what, got) in [
        ("routes", ctx.routes.len()),
        ("mask", ctx.mask.len()),
        ("timeline", ctx.s_hat.len()),
    ] {
        if got != n {
            return Err(MomeError::Length {
                what,
                expected: n,
                got,
            });
        }
    }
    let d_h = dims.head_dim();
    if ctx.ladder.d_rot() > d_h {
        return Err(MomeError::RotaryTooWide {
            d_rot: ctx.ladder.d_rot(),
            d_h,
        });
    }
    let shared: Arc<[usize]> = vec![0; n].into();
    let x = g.layer_norm(
        h,
        &[vars.ln_attn_gain],
        &[vars.ln_attn_bias],
        shared,
        dims.eps,
    )?;
    let routes = ctx.routes.clone();
    let q = g.routed_matmul(x, &vars.each(|e| e.wq), routes.clone())?;
    let k = g.routed_matmul(x, &vars.each(|e| e.wk), routes.clone())?;
    let v = g.routed_matmul(x, &vars.each(|e| e.wv), routes.clone())?;
    let q = g.rope(q, ctx.s_hat, ctx.ladder.omegas(), d_h)?;
    let k = g.rope(k, ctx.s_hat, ctx.ladder.omegas(), d_h)?;
    let scale = 1.0 / (d_h as f64).sqrt();
    let row_mask = ctx.mask.row_mask();
    let mut heads = Vec::with_capacity(dims.n_heads);
    for hd in 0..dims.n_heads {
        let qh = g.slice_cols(q, hd * d_h, d_h)?;
        let kh = g.slice_cols(k, hd * d_h, d_h)?;
        let vh = g.slice_cols(v, hd * d_h, d_h)?;
        let scores = g.matmul_nt(qh, kh)?;
        let scores = g.scale(scores, scale)?;
        let p = g.masked_softmax(scores, row_mask.clone())?;
        heads.push(g.matmul(p, vh)?);
    }
    let o = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let att = g.routed_matmul(o, &vars.each(|e| e.wo), routes.clone())?;
    let h1 = g.add(h, att)?;
    expert_ffn_block(g, h1, routes, vars, dims.eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use Modality::*;

    #[test]
    fn routing_examples() {
        assert_eq!(route(&[Text, Speech]), vec![Expert::Ts, Expert::Ts]);
        assert_eq!(route(&[Face]), vec![Expert::Face]);
        assert_eq!(route(&[Upper, Lower, Hands]), vec![Expert::Body; 3]);
    }

    /// Pairwise oracle straight from the topology description.
    fn oracle_allows(q: Modality, k: Modality, face_body: bool) -> bool {
        let ts = [Text, Speech];
        let motion = [Face, Upper, Lower, Hands];
        if ts.contains(&q) {
            return ts.contains(&k);
        }
        ts.contains(&k) || (face_body && motion.contains(&k))
    }

    #[test]
    fn mask_matches_pairwise_oracle() {
        for face_body in [false, true] {
            for q in Modality::ALL {
                for k in Modality::ALL {
                    // key first so the pair is causal
                    let labels = [Speech, k, q];
                    let m = build_mask(&labels, face_body).unwrap();
                    assert_eq!(m.allow(2, 1), oracle_allows(q, k, face_body), "{q}<-{k}");
                    // the reverse direction is never causal
                    assert!(!m.allow(1, 2));
                }
            }
        }
    }

    #[test]
    fn mask_examples() {
        let m = build_mask(&[Speech, Face], false).unwrap();
        let rows: Vec<Vec<bool>> = (0..2).map(|q| (0..2).map(|k| m.allow(q, k)).collect()).collect();
        assert_eq!(rows, vec![vec![true, false], vec![true, false]]);

        let m = build_mask(&[Text], false).unwrap();
        assert!(m.allow(0, 0));

        let labels = [Speech, Face, Upper];
        let off = build_mask(&labels, false).unwrap();
        assert_eq!((0..3).map(|k| off.allow(2, k)).collect::<Vec<_>>(), vec![true, false, false]);
        let on = build_mask(&labels, true).unwrap();
        assert_eq!((0..3).map(|k| on.allow(2, k)).collect::<Vec<_>>(), vec![true, true, true]);
        assert!(!on.allow(1, 2));
    }

    #[test]
    fn orphan_motion_query() {
        assert_eq!(
            build_mask(&[Face, Speech], false).unwrap_err(),
            MomeError::OrphanMotionQuery(0)
        );
        // with the toggle on a motion query can read itself
        assert!(build_mask(&[Face, Speech], true).is_ok());
        let silent = build_mask_with(
            &[Face, Speech],
            Topology {
                face_body: false,
                cross: false,
            },
        )
        .unwrap();
        assert!(!silent.active(0));
        assert!(silent.active(1));
    }

    fn tiny_layer(seed: u64) -> (ParamStore, LayerDims) {
        let dims = LayerDims {
            d: 8,
            n_heads: 2,
            d_ff: 12,
            eps: 1e-5,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        register_layer(&mut store, "l0", dims, 1.0, &mut rng).unwrap();
        (store, dims)
    }

    fn run_layer(store: &ParamStore, dims: LayerDims, labels: &[Modality], h: &Tensor) -> Tensor {
        let ladder = RopeLadder::new(4, 100.0).unwrap();
        let mask = build_mask(labels, false).unwrap();
        let s_hat: Vec<f64> = (0..labels.len()).map(|i| i as f64 * 0.5).collect();
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let vars = LayerVars::lookup(store, &bound, "l0").unwrap();
        let hv = g.leaf(h.clone());
        let ctx = LayerContext {
            routes: route_indices(&route(labels)),
            mask: &mask,
            s_hat: &s_hat,
            ladder: &ladder,
        };
        let out = layer_forward(&mut g, hv, &ctx, dims, &vars).unwrap();
        g.value(out).clone()
    }

    fn random_h(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Tensor {
        normal(rng, n, d, 1.0)
    }

    #[test]
    fn zeroing_face_ffn_changes_only_face_rows() {
        let (mut store, dims) = tiny_layer(7);
        let labels = [Speech, Face, Upper, Speech, Face, Hands];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = random_h(&mut rng, labels.len(), dims.d);
        let before = run_layer(&store, dims, &labels, &h);
        store.tensor_mut("l0.face.ffn.w2").unwrap().fill(0.0);
        store.tensor_mut("l0.face.ffn.b2").unwrap().fill(0.0);
        let after = run_layer(&store, dims, &labels, &h);
        for (i, m) in labels.iter().enumerate() {
            let same = before.row(i) == after.row(i);
            assert_eq!(same, *m != Face, "row {i} ({m})");
        }
    }

    #[test]
    fn zero_ffn_is_identity() {
        let (mut store, dims) = tiny_layer(9);
        for e in ["ts", "face", "body"] {
            store.tensor_mut(&format!("l0.{e}.ffn.w2")).unwrap().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = random_h(&mut rng, 3, dims.d);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let vars = LayerVars::lookup(&store, &bound, "l0").unwrap();
        let hv = g.leaf(h.clone());
        let out = expert_ffn_block(&mut g, hv, vec![0, 1, 2].into(), &vars, 1e-5).unwrap();
        assert_eq!(g.value(out), &h);
    }

    #[test]
    fn ffn_block_uses_only_the_routed_expert() {
        let (store, _) = tiny_layer(11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = random_h(&mut rng, 1, 8);
        let mut g = Graph::new();
        let bound = store.bind(&mut g);
        let vars = LayerVars::lookup(&store, &bound, "l0").unwrap();
        let hv = g.leaf(h);
        let out = expert_ffn_block(&mut g, hv, vec![0].into(), &vars, 1e-5).unwrap();
        let loss = g.sum_squares(out).unwrap();
        let grads = g.backward(loss).unwrap();
        for e in ["face", "body"] {
            for p in EXPERT_PARAMS {
                let var = store.var(&bound, &format!("l0.{e}.{p}")).unwrap();
                assert!(grads.get(var).is_none(), "{e}.{p}");
            }
        }
        let w1 = store.var(&bound, "l0.ts.ffn.w1").unwrap();
        assert!(grads.get(w1).unwrap().data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn ffn_block_gradient_matches_finite_differences() {
        let (store, _) = tiny_layer(13);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let h = random_h(&mut rng, 3, 8);
        let routes: Arc<[usize]> = vec![0, 1, 2].into();
        let eval = |store: &ParamStore, h: &Tensor| -> (f64, Option<Tensor>, Vec<Option<Tensor>>) {
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let vars = LayerVars::lookup(store, &bound, "l0").unwrap();
            let hv = g.leaf(h.clone());
            let out = expert_ffn_block(&mut g, hv, routes.clone(), &vars, 1e-5).unwrap();
            let loss = g.sum_squares(out).unwrap();
            let grads = g.backward(loss).unwrap();
            let pg = (0..store.len()).map(|i| grads.get(bound.var(i)).cloned()).collect();
            (g.value(loss).data()[0], grads.get(hv).cloned(), pg)
        };
        let (_, gh, gp) = eval(&store, &h);
        let step = 1e-5;
        let check = |a: f64, plus: f64, minus: f64| {
            let num = (plus - minus) / (2.0 * step);
            let abs = (a - num).abs();
            assert!(abs < 1e-8 || abs / a.abs().max(num.abs()) < 1e-4, "{a} vs {num}");
        };
        for j in 0..h.len() {
            let mut hp = h.clone();
            hp.data_mut()[j] += step;
            let mut hm = h.clone();
            hm.data_mut()[j] -= step;
            check(gh.as_ref().unwrap().data()[j], eval(&store, &hp).0, eval(&store, &hm).0);
        }
        for name in ["l0.face.ffn.w1", "l0.body.ln.gain", "l0.ts.ffn.b2"] {
            let idx = store.position(name).unwrap();
            for j in [0, 3, 7] {
                let mut sp = store.clone();
                sp.tensor_mut(name).unwrap().data_mut()[j] += step;
                let mut sm = store.clone();
                sm.tensor_mut(name).unwrap().data_mut()[j] -= step;
                let a = gp[idx].as_ref().map_or(0.0, |t| t.data()[j]);
                check(a, eval(&sp, &h).0, eval(&sm, &h).0);
            }
        }
    }

    #[test]
    fn appending_motion_keeps_ts_rows_bit_identical() {
        let (store, dims) = tiny_layer(15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let mixed = [Speech, Face, Text, Upper, Speech, Hands, Face];
        let h = random_h(&mut rng, mixed.len(), dims.d);
        let ts_rows: Vec<usize> = (0..mixed.len()).filter(|&i| mixed[i].is_ts()).collect();
        let ts_labels: Vec<Modality> = ts_rows.iter().map(|&i| mixed[i]).collect();
        let ts_h = Tensor::from_rows(&ts_rows.iter().map(|&i| h.row(i).to_vec()).collect::<Vec<_>>())
            .unwrap();
        // same rotary index for each TS row in both runs
        let ladder = RopeLadder::new(4, 100.0).unwrap();
        let s_full = [0.0, 0.3, 1.0, 1.4, 2.0, 2.6, 2.7];
        let s_ts: Vec<f64> = ts_rows.iter().map(|&i| s_full[i]).collect();
        let run = |labels: &[Modality], h: &Tensor, s: &[f64]| {
            let mask = build_mask(labels, false).unwrap();
            let mut g = Graph::new();
            let bound = store.bind(&mut g);
            let vars = LayerVars::lookup(&store, &bound, "l0").unwrap();
            let hv = g.leaf(h.clone());
            let ctx = LayerContext {
                routes: route_indices(&route(labels)),
                mask: &mask,
                s_hat: s,
                ladder: &ladder,
            };
            let out = layer_forward(&mut g, hv, &ctx, dims, &vars).unwrap();
            g.value(out).clone()
        };
        let full = run(&mixed, &h, &s_full);
        let ts = run(&ts_labels, &ts_h, &s_ts);
        for (r, &i) in ts_rows.iter().enumerate() {
            assert_eq!(full.row(i), ts.row(r));
        }
    }

    #[test]
    fn bad_dims() {
        let dims = LayerDims {
            d: 10,
            n_heads: 3,
            d_ff: 4,
            eps: 1e-5,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            register_layer(&mut store, "x", dims, 1.0, &mut rng),
            Err(MomeError::BadHeads { .. })
        ));
    }
}
