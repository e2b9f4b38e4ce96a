//! Forward and backward passes: per-patch embedder, bidirectional mixer over
//! visual positions, causal pre-LN decoder, final norm and unembedding.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::params::{BlockIds, Layout, Parameters};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4;

/// One sequence as the network sees it.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a> {
    /// Visual inputs, one row per patch in row-major order.
    pub patches: ArrayView2<'a, f64>,
    pub rows: usize,
    pub cols: usize,
    /// Text input token ids, placed after the visual positions.
    pub text: &'a [usize],
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct BlockCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    act: Array2<f64>,
}

/// Everything backward needs from one forward pass.
pub struct Cache {
    patches: Array2<f64>,
    rows: usize,
    cols: usize,
    text: Vec<usize>,
    mixer: Vec<BlockCache>,
    decoder: Vec<BlockCache>,
    lnf: LnCache,
    hf: Array2<f64>,
}

fn layer_norm(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let centered = x - &mean.insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("non-empty rows");
    let rstd = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &rstd.view().insert_axis(Axis(1));
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_back(
    dy: &Array2<f64>,
    c: &LnCache,
    g: ArrayView1<f64>,
    grads: &mut [f64],
    layout: &Layout,
    ids: (super::params::TensorId, super::params::TensorId),
) -> Array2<f64> {
    {
        let mut dg = layout.vec_mut(grads, ids.0);
        dg += &(dy * &c.xhat).sum_axis(Axis(0));
    }
    {
        let mut db = layout.vec_mut(grads, ids.1);
        db += &dy.sum_axis(Axis(0));
    }
    let dxhat = dy * &g;
    let m1 = dxhat.mean_axis(Axis(1)).expect("non-empty rows");
    let m2 = (&dxhat * &c.xhat).mean_axis(Axis(1)).expect("non-empty rows");
    let mut dx = dxhat - &m1.insert_axis(Axis(1)) - &c.xhat * &m2.insert_axis(Axis(1));
    dx *= &c.rstd.view().insert_axis(Axis(1));
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    }
}

fn block_forward(
    x: &Array2<f64>,
    p: &Parameters,
    ids: &BlockIds,
    causal: bool,
) -> (Array2<f64>, BlockCache) {
    let (l, w) = (&p.layout, &p.values[..]);
    let heads = p.dims.n_heads;
    let hd = p.dims.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let t = x.nrows();

    let (h1, ln1) = layer_norm(x, l.vec(w, ids.ln1_g), l.vec(w, ids.ln1_b));
    let q = h1.dot(&l.mat(w, ids.wq));
    let k = h1.dot(&l.mat(w, ids.wk));
    let v = h1.dot(&l.mat(w, ids.wv));
    let mut ctx = Array2::<f64>::zeros((t, p.dims.d_model));
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        if causal {
            for i in 0..t {
                sc.slice_mut(s![i, i + 1..]).fill(f64::NEG_INFINITY);
            }
        }
        softmax_rows(&mut sc);
        ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    let x1 = x + &ctx.dot(&l.mat(w, ids.wo)) + &l.vec(w, ids.bo);

    let (h2, ln2) = layer_norm(&x1, l.vec(w, ids.ln2_g), l.vec(w, ids.ln2_b));
    let u = h2.dot(&l.mat(w, ids.w1)) + &l.vec(w, ids.b1);
    let act = u.mapv(gelu);
    let y = &x1 + &act.dot(&l.mat(w, ids.w2)) + &l.vec(w, ids.b2);
    let cache = BlockCache {
        ln1,
        h1,
        q,
        k,
        v,
        probs,
        ctx,
        ln2,
        h2,
        u,
        act,
    };
    (y, cache)
}

fn add_mat(grads: &mut [f64], layout: &Layout, id: super::params::TensorId, g: &Array2<f64>) {
    let mut view = layout.mat_mut(grads, id);
    view += g;
}

fn add_vec(grads: &mut [f64], layout: &Layout, id: super::params::TensorId, g: &Array1<f64>) {
    let mut view = layout.vec_mut(grads, id);
    view += g;
}

fn block_backward(
    dy: &Array2<f64>,
    c: &BlockCache,
    p: &Parameters,
    ids: &BlockIds,
    grads: &mut [f64],
) -> Array2<f64> {
    let (l, w) = (&p.layout, &p.values[..]);
    let heads = p.dims.n_heads;
    let hd = p.dims.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    add_vec(grads, l, ids.b2, &dy.sum_axis(Axis(0)));
    add_mat(grads, l, ids.w2, &c.act.t().dot(dy));
    let dact = dy.dot(&l.mat(w, ids.w2).t());
    let du = dact * &c.u.mapv(gelu_grad);
    add_vec(grads, l, ids.b1, &du.sum_axis(Axis(0)));
    add_mat(grads, l, ids.w1, &c.h2.t().dot(&du));
    let dh2 = du.dot(&l.mat(w, ids.w1).t());
    let dx1 = dy + &layer_norm_back(&dh2, &c.ln2, l.vec(w, ids.ln2_g), grads, l, (ids.ln2_g, ids.ln2_b));

    add_vec(grads, l, ids.bo, &dx1.sum_axis(Axis(0)));
    add_mat(grads, l, ids.wo, &c.ctx.t().dot(&dx1));
    let dctx = dx1.dot(&l.mat(w, ids.wo).t());
    let mut dq = Array2::<f64>::zeros(c.q.raw_dim());
    let mut dk = Array2::<f64>::zeros(c.k.raw_dim());
    let mut dv = Array2::<f64>::zeros(c.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * hd..(h + 1) * hd];
        let pr = &c.probs[h];
        let dctx_h = dctx.slice(cols);
        let dp = dctx_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&pr.t().dot(&dctx_h));
        let row_dot = (&dp * pr).sum_axis(Axis(1)).insert_axis(Axis(1));
        let ds = pr * &(dp - &row_dot) * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    add_mat(grads, l, ids.wq, &c.h1.t().dot(&dq));
    add_mat(grads, l, ids.wk, &c.h1.t().dot(&dk));
    add_mat(grads, l, ids.wv, &c.h1.t().dot(&dv));
    let dh1 = dq.dot(&l.mat(w, ids.wq).t()) + dk.dot(&l.mat(w, ids.wk).t()) + dv.dot(&l.mat(w, ids.wv).t());
    dx1.clone() + layer_norm_back(&dh1, &c.ln1, l.vec(w, ids.ln1_g), grads, l, (ids.ln1_g, ids.ln1_b))
}

fn check_input(p: &Parameters, input: &NetInput) -> Result<()> {
    let d = &p.dims;
    let m = input.patches.nrows();
    if m != input.rows * input.cols || m == 0 {
        return Err(Error::ModelConfig(format!(
            "{m} patches for a {}x{} grid",
            input.rows, input.cols
        )));
    }
    if input.patches.ncols() != d.patch_dim {
        return Err(Error::ModelConfig(format!(
            "patch width {} but the embedder expects {}",
            input.patches.ncols(),
            d.patch_dim
        )));
    }
    let len = m + input.text.len();
    if len > d.max_seq || input.rows > d.max_seq || input.cols > d.max_seq {
        return Err(Error::SequenceTooLong { len, max: d.max_seq });
    }
    if let Some(&t) = input.text.iter().find(|&&t| t >= d.vocab_size) {
        return Err(Error::ModelConfig(format!("token id {t} outside vocab {}", d.vocab_size)));
    }
    Ok(())
}

/// Per-patch embeddings plus row and column embeddings, before any mixing.
pub fn embed_visual(p: &Parameters, input: &NetInput) -> Result<Array2<f64>> {
    check_input(p, input)?;
    let (l, w) = (&p.layout, &p.values[..]);
    let mut x = input.patches.dot(&l.mat(w, l.patch_w)) + &l.vec(w, l.patch_b);
    let row_emb = l.mat(w, l.row_emb);
    let col_emb = l.mat(w, l.col_emb);
    for (i, mut row) in x.rows_mut().into_iter().enumerate() {
        row += &row_emb.row(i / input.cols);
        row += &col_emb.row(i % input.cols);
    }
    Ok(x)
}

/// Logits for every position, visual positions first.
pub fn forward(p: &Parameters, input: &NetInput) -> Result<(Array2<f64>, Cache)> {
    let (l, w) = (&p.layout, &p.values[..]);
    let mut xv = embed_visual(p, input)?;
    let mut mixer = Vec::with_capacity(l.mixer.len());
    for ids in &l.mixer {
        let (y, c) = block_forward(&xv, p, ids, false);
        xv = y;
        mixer.push(c);
    }
    let m = xv.nrows();
    let n = m + input.text.len();
    let mut x = Array2::<f64>::zeros((n, p.dims.d_model));
    x.slice_mut(s![..m, ..]).assign(&xv);
    let tok = l.mat(w, l.tok_emb);
    let pos = l.mat(w, l.text_pos);
    for (j, &t) in input.text.iter().enumerate() {
        let mut row = x.row_mut(m + j);
        row += &tok.row(t);
        row += &pos.row(j);
    }
    let mut decoder = Vec::with_capacity(l.decoder.len());
    for ids in &l.decoder {
        let (y, c) = block_forward(&x, p, ids, true);
        x = y;
        decoder.push(c);
    }
    let (hf, lnf) = layer_norm(&x, l.vec(w, l.lnf_g), l.vec(w, l.lnf_b));
    let logits = hf.dot(&l.mat(w, l.out_w)) + &l.vec(w, l.out_b);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            position: logits
                .rows()
                .into_iter()
                .position(|r| r.iter().any(|v| !v.is_finite()))
                .unwrap_or(0),
        });
    }
    let cache = Cache {
        patches: input.patches.to_owned(),
        rows: input.rows,
        cols: input.cols,
        text: input.text.to_vec(),
        mixer,
        decoder,
        lnf,
        hf,
    };
    Ok((logits, cache))
}

/// Accumulate the parameter gradient for upstream logits gradient `dlogits`
/// into `grads`.
pub fn backward(p: &Parameters, cache: &Cache, dlogits: &Array2<f64>, grads: &mut [f64]) {
    let (l, w) = (&p.layout, &p.values[..]);
    add_vec(grads, l, l.out_b, &dlogits.sum_axis(Axis(0)));
    add_mat(grads, l, l.out_w, &cache.hf.t().dot(dlogits));
    let dhf = dlogits.dot(&l.mat(w, l.out_w).t());
    let mut dx = layer_norm_back(&dhf, &cache.lnf, l.vec(w, l.lnf_g), grads, l, (l.lnf_g, l.lnf_b));
    for (ids, c) in l.decoder.iter().zip(&cache.decoder).rev() {
        dx = block_backward(&dx, c, p, ids, grads);
    }
    let m = cache.patches.nrows();
    {
        let mut tok = l.mat_mut(grads, l.tok_emb);
        for (j, &t) in cache.text.iter().enumerate() {
            let mut row = tok.row_mut(t);
            row += &dx.row(m + j);
        }
    }
    {
        let mut pos = l.mat_mut(grads, l.text_pos);
        for j in 0..cache.text.len() {
            let mut row = pos.row_mut(j);
            row += &dx.row(m + j);
        }
    }
    let mut dxv = dx.slice(s![..m, ..]).to_owned();
    for (ids, c) in l.mixer.iter().zip(&cache.mixer).rev() {
        dxv = block_backward(&dxv, c, p, ids, grads);
    }
    add_vec(grads, l, l.patch_b, &dxv.sum_axis(Axis(0)));
    add_mat(grads, l, l.patch_w, &cache.patches.t().dot(&dxv));
    {
        let mut rows = l.mat_mut(grads, l.row_emb);
        for i in 0..m {
            let mut r = rows.row_mut(i / cache.cols);
            r += &dxv.row(i);
        }
    }
    let mut cols = l.mat_mut(grads, l.col_emb);
    for i in 0..m {
        let mut r = cols.row_mut(i % cache.cols);
        r += &dxv.row(i);
    }
    debug_assert!(cache.rows * cache.cols == m);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy_model::params::ModelDims;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn micro(mixer_layers: usize) -> Parameters {
        let dims = ModelDims {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            mixer_layers,
            d_ff: 12,
            vocab_size: 16,
            patch_dim: 4,
            max_seq: 12,
        };
        Parameters::init(dims, 11).unwrap()
    }

    fn patches(m: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((m, 4), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &u in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let n = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((gelu_grad(u) - n).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_overlong_sequences() {
        let p = micro(1);
        let x = patches(6, 0);
        let text = [1usize; 7];
        let input = NetInput {
            patches: x.view(),
            rows: 2,
            cols: 3,
            text: &text,
        };
        assert!(matches!(forward(&p, &input), Err(Error::SequenceTooLong { len: 13, max: 12 })));
    }

    #[test]
    fn causal_mask_blocks_future_tokens() {
        let p = micro(1);
        let x = patches(4, 1);
        let a = [3usize, 5, 7, 9];
        let mut b = a;
        b[2] = 1;
        let run = |t: &[usize]| {
            forward(
                &p,
                &NetInput {
                    patches: x.view(),
                    rows: 2,
                    cols: 2,
                    text: t,
                },
            )
            .unwrap()
            .0
        };
        let (la, lb) = (run(&a), run(&b));
        let cut = 4 + 2;
        let diff = (&la.slice(s![..cut, ..]) - &lb.slice(s![..cut, ..]))
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(diff < 1e-10);
        assert!((&la - &lb).iter().any(|v| v.abs() > 1e-6));
    }
}
