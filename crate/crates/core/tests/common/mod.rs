//! Shared helpers for the integration tests: an independent dense
//! transformer layer and random stream builders.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slb::mome::{
    build_mask, layer_forward, register_layer, route, route_indices, LayerContext, LayerDims, LayerVars,
    EXPERT_PARAMS,
};
use slb::numerics::{Graph, ParamStore, Tensor};
use slb::rope::RopeLadder;
use slb::streams::{interleave, InterleavedStream, Token, VocabSizes};
use slb::Modality;

pub type Mat = Vec<Vec<f64>>;

/// Weights of one plain pre-norm transformer layer.
pub struct DenseLayer {
    pub ln_attn: (Vec<f64>, Vec<f64>),
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln_ffn: (Vec<f64>, Vec<f64>),
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
}

fn mat(store: &ParamStore, name: &str) -> Mat {
    let t = &store.get(name).unwrap().tensor;
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn vec_of(store: &ParamStore, name: &str) -> Vec<f64> {
    store.get(name).unwrap().tensor.data().to_vec()
}

impl DenseLayer {
    /// Reads the shared norm and one expert's weights of layer `prefix`.
    pub fn from_store(store: &ParamStore, prefix: &str, expert: &str) -> Self {
        let e = format!("{prefix}.{expert}");
        DenseLayer {
            ln_attn: (
                vec_of(store, &format!("{prefix}.ln_attn.gain")),
                vec_of(store, &format!("{prefix}.ln_attn.bias")),
            ),
            wq: mat(store, &format!("{e}.wq")),
            wk: mat(store, &format!("{e}.wk")),
            wv: mat(store, &format!("{e}.wv")),
            wo: mat(store, &format!("{e}.wo")),
            ln_ffn: (
                vec_of(store, &format!("{e}.ln.gain")),
                vec_of(store, &format!("{e}.ln.bias")),
            ),
            w1: mat(store, &format!("{e}.ffn.w1")),
            b1: vec_of(store, &format!("{e}.ffn.b1")),
            w2: mat(store, &format!("{e}.ffn.w2")),
            b2: vec_of(store, &format!("{e}.ffn.b2")),
        }
    }

    /// Causal multi-head attention with rotary q/k on the first `d_rot`
    /// dims of every head, then the norm + GELU FFN block.
    pub fn forward(&self, h: &Mat, s_hat: &[f64], n_heads: usize, d_rot: usize, base: f64, eps: f64) -> Mat {
        let n = h.len();
        let d = h[0].len();
        let dh = d / n_heads;
        let x: Mat = h.iter().map(|r| layer_norm(r, &self.ln_attn, eps)).collect();
        let mut q = matmul(&x, &self.wq);
        let mut k = matmul(&x, &self.wk);
        let v = matmul(&x, &self.wv);
        for t in 0..n {
            for hd in 0..n_heads {
                rotate(&mut q[t][hd * dh..(hd + 1) * dh], s_hat[t], d_rot, base);
                rotate(&mut k[t][hd * dh..(hd + 1) * dh], s_hat[t], d_rot, base);
            }
        }
        let mut o = vec![vec![0.0; d]; n];
        for hd in 0..n_heads {
            let cols = hd * dh..(hd + 1) * dh;
            for t in 0..n {
                let scores: Vec<f64> = (0..=t)
                    .map(|j| dot(&q[t][cols.clone()], &k[j][cols.clone()]) / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, w) in e.iter().enumerate() {
                    for c in cols.clone() {
                        o[t][c] += w / z * v[j][c];
                    }
                }
            }
        }
        let att = matmul(&o, &self.wo);
        let h1: Mat = h.iter().zip(&att).map(|(a, b)| add(a, b)).collect();
        let y: Mat = h1.iter().map(|r| layer_norm(r, &self.ln_ffn, eps)).collect();
        let f: Mat = matmul(&y, &self.w1)
            .iter()
            .map(|r| add(r, &self.b1).into_iter().map(gelu).collect())
            .collect();
        let f2 = matmul(&f, &self.w2);
        h1.iter()
            .zip(&f2)
            .map(|(a, b)| add(&add(a, b), &self.b2))
            .collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let cols = b[0].len();
    a.iter()
        .map(|r| {
            (0..cols)
                .map(|c| r.iter().enumerate().map(|(i, x)| x * b[i][c]).sum())
                .collect()
        })
        .collect()
}

pub fn layer_norm(x: &[f64], (gain, bias): &(Vec<f64>, Vec<f64>), eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Rotates pairs `(2j, 2j+1)` for `j < d_rot / 2` by `s * base^(-2j/d_rot)`.
pub fn rotate(v: &mut [f64], s: f64, d_rot: usize, base: f64) {
    for j in 0..d_rot / 2 {
        let theta = s * base.powf(-((2 * j) as f64) / d_rot as f64);
        let (x, y) = (v[2 * j], v[2 * j + 1]);
        v[2 * j] = x * theta.cos() - y * theta.sin();
        v[2 * j + 1] = x * theta.sin() + y * theta.cos();
    }
}

/// Random mixed stream: speech every 0.08 s with optional text tokens,
/// face at 25 fps and the three body channels at 6.25 fps, over `seconds`.
pub fn random_stream(rng: &mut impl Rng, seconds: f64, vocab: &VocabSizes) -> InterleavedStream {
    let mut subs: Vec<(Modality, Vec<Token>)> = Vec::new();
    let mut add = |m: Modality, step: f64, offset: f64, keep: f64, rng: &mut dyn rand::RngCore| {
        let mut toks = Vec::new();
        let mut t = offset;
        while t < seconds - 1e-9 {
            // an anchor at 0 so no motion query precedes every TS key
            if rng.gen_bool(keep) || (m == Modality::Text && t == 0.0) {
                let id = rng.gen_range(0..vocab.get(m) as u32);
                toks.push(Token::new(id, m, (t * 25.0).round() / 25.0));
            }
            t += step;
        }
        subs.push((m, toks));
    };
    add(Modality::Text, 0.08, 0.0, 0.3, rng);
    add(Modality::Speech, 0.08, 0.04, 0.9, rng);
    add(Modality::Face, 0.04, 0.0, 0.9, rng);
    for m in [Modality::Upper, Modality::Lower, Modality::Hands] {
        add(m, 0.16, 0.0, 0.8, rng);
    }
    interleave(&subs).unwrap()
}

/// Largest change, over every layer, in the TS-position hidden states and
/// in the text and speech head logits read from them, when every face and
/// body token is deleted from `stream`.
pub fn ts_isolation_gap(model: &slb::model::SlbModel, stream: &InterleavedStream) -> f64 {
    let full = model.forward(stream, Some(Modality::Speech)).unwrap();
    let only = model.forward(&stream.ts_only(), Some(Modality::Speech)).unwrap();
    let ln = (
        vec_of(&model.params, "ln_out.gain"),
        vec_of(&model.params, "ln_out.bias"),
    );
    let heads: Vec<(Mat, Vec<f64>)> = [Modality::Text, Modality::Speech]
        .iter()
        .map(|m| {
            (
                mat(&model.params, &format!("head.{m}.w")),
                vec_of(&model.params, &format!("head.{m}.b")),
            )
        })
        .collect();
    let logits = |h: &[f64]| -> Vec<f64> {
        let y = vec![layer_norm(h, &ln, model.config.ln_eps)];
        heads
            .iter()
            .flat_map(|(w, b)| add(&matmul(&y, w)[0], b))
            .collect()
    };
    let mut gap = 0.0f64;
    for (j, &p) in stream.anchors.iter().enumerate() {
        for l in 0..model.config.n_layers {
            let (a, b) = (full.hidden[l].row(p), only.hidden[l].row(j));
            for (x, y) in a.iter().zip(b).chain(logits(a).iter().zip(&logits(b))) {
                gap = gap.max((x - y).abs());
            }
        }
    }
    gap
}

/// Weight 1 on every prediction made from a text or speech position, 0 on
/// predictions made from face and body positions.
pub fn ts_only_weights(stream: &InterleavedStream) -> Vec<f64> {
    stream.tokens[..stream.len() - 1]
        .iter()
        .map(|t| if t.modality.is_ts() { 1.0 } else { 0.0 })
        .collect()
}

/// Parameters only motion positions use: face and body expert weights of
/// every layer plus the motion embedding tables.
pub fn is_motion_owned(name: &str) -> bool {
    let motion = ["face", "upper", "lower", "hands"];
    name.starts_with("layer") && (name.contains(".face.") || name.contains(".body."))
        || motion.iter().any(|m| name == format!("embed.{m}"))
}

/// Names of motion-owned parameters whose gradient under a TS-only loss
/// has any nonzero coordinate, and the number checked.
pub fn motion_expert_leaks(model: &slb::model::SlbModel, stream: &InterleavedStream) -> (Vec<String>, usize) {
    let w = ts_only_weights(stream);
    let mut grads = model.params.grad_buffer();
    model
        .accumulate_grads(stream, Some(&w), 1.0, true, &mut grads)
        .unwrap();
    let mut leaks = Vec::new();
    let mut checked = 0;
    for (g, p) in grads.iter().zip(model.params.groups()) {
        if is_motion_owned(&p.name) {
            checked += 1;
            if g.data().iter().any(|&v| v != 0.0) {
                leaks.push(p.name.clone());
            }
        }
    }
    (leaks, checked)
}

/// A run small enough for unit-speed integration tests.
pub fn small_run(seed: u64) -> slb::lab::RunConfig {
    let mut run = slb::lab::RunConfig::default();
    for (k, v) in [
        ("seed", seed.to_string()),
        ("model.d", "16".into()),
        ("model.d_ff", "32".into()),
        ("model.n_heads", "2".into()),
        ("model.n_layers", "1".into()),
        ("task.n_sequences", "24".into()),
        ("task.seconds", "0.32".into()),
        ("train.n_eval", "8".into()),
        ("train.steps", "30".into()),
        ("train.batch_size", "4".into()),
        ("train.eval_every", "10".into()),
    ] {
        run.set(k, &v).unwrap();
    }
    run
}

const PREFIX: &str = "layer0";

/// Copies the text/speech expert's weights into the face and body experts.
pub fn tie_experts(store: &mut ParamStore, prefix: &str) {
    for p in EXPERT_PARAMS {
        let src = store.get(&format!("{prefix}.ts.{p}")).unwrap().tensor.as_ref().clone();
        for e in ["face", "body"] {
            *store.tensor_mut(&format!("{prefix}.{e}.{p}")).unwrap() = src.clone();
        }
    }
}

pub fn mome_output(store: &ParamStore, dims: LayerDims, labels: &[Modality], h: &Mat, s_hat: &[f64], ladder: &RopeLadder) -> Mat {
    let mask = build_mask(labels, false).unwrap();
    let mut g = Graph::new();
    let bound = store.bind(&mut g);
    let vars = LayerVars::lookup(store, &bound, PREFIX).unwrap();
    let hv = g.leaf(Tensor::from_rows(h).unwrap());
    let ctx = LayerContext {
        routes: route_indices(&route(labels)),
        mask: &mask,
        s_hat,
        ladder,
    };
    let out = layer_forward(&mut g, hv, &ctx, dims, &vars).unwrap();
    let t = g.value(out);
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Largest difference between a MoME layer whose three experts share the
/// text/speech weights and the dense reference, on a random TS-only input.
pub fn dense_equivalence_gap(seed: u64, n: usize, d: usize, n_heads: usize, d_rot: usize) -> f64 {
    let dims = LayerDims {
        d,
        n_heads,
        d_ff: 2 * d,
        eps: 1e-5,
    };
    let base = 1e4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    register_layer(&mut store, PREFIX, dims, 1.0, &mut rng).unwrap();
    // non-trivial norm parameters
    for e in ["ts", "face", "body"] {
        for p in ["ln.gain", "ln.bias", "ffn.b1", "ffn.b2"] {
            for v in store.tensor_mut(&format!("{PREFIX}.{e}.{p}")).unwrap().data_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
        }
    }
    tie_experts(&mut store, PREFIX);
    let labels: Vec<Modality> = (0..n)
        .map(|_| if rng.gen_bool(0.3) { Modality::Text } else { Modality::Speech })
        .collect();
    let h: Mat = (0..n)
        .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
        .collect();
    let s_hat: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let ladder = RopeLadder::new(d_rot, base).unwrap();
    let got = mome_output(&store, dims, &labels, &h, &s_hat, &ladder);
    let want = DenseLayer::from_store(&store, PREFIX, "ts").forward(&h, &s_hat, n_heads, d_rot, base, dims.eps);
    got.iter()
        .flatten()
        .zip(want.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
