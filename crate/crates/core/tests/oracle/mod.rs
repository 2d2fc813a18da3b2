//! Straight-line re-implementations used as test oracles. Plain nested
//! vectors and explicit loops only; nothing here calls the library's
//! numerical code.

#![allow(dead_code)]

use attnmove::attn::AttentionBlock;
use attnmove::data::{MaskedInstance, Trajectory};
use attnmove::model::ModelParams;
use ndarray::Array2;

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(a: &Array2<f64>) -> Mat {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// `x W^T` with `W` stored row-major as `out x in`.
pub fn times_transpose(x: &Mat, w: &Array2<f64>) -> Mat {
    let (out_dim, in_dim) = w.dim();
    x.iter()
        .map(|row| {
            assert_eq!(row.len(), in_dim);
            (0..out_dim)
                .map(|o| {
                    let mut s = 0.0;
                    for i in 0..in_dim {
                        s += row[i] * w[[o, i]];
                    }
                    s
                })
                .collect()
        })
        .collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    let mut exps = Vec::with_capacity(xs.len());
    let mut z = 0.0;
    for &x in xs {
        let e = (x - m).exp();
        z += e;
        exps.push(e);
    }
    exps.into_iter().map(|e| e / z).collect()
}

/// Per-head attention coefficients and concatenated head outputs.
pub fn attend(block: &AttentionBlock, query: &Mat, kv: &Mat) -> (Mat, Vec<Mat>) {
    let h = block.n_heads();
    let dh = block.head_dim();
    let q = times_transpose(query, &block.wq);
    let k = times_transpose(kv, &block.wk);
    let v = times_transpose(kv, &block.wv);
    let mut concat = vec![vec![0.0; h * dh]; query.len()];
    let mut alphas = Vec::with_capacity(h);
    for head in 0..h {
        let mut alpha = Vec::with_capacity(query.len());
        for i in 0..query.len() {
            let mut scores = Vec::with_capacity(kv.len());
            for j in 0..kv.len() {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q[i][head * dh + c] * k[j][head * dh + c];
                }
                scores.push(s);
            }
            let a = softmax(&scores);
            for c in 0..dh {
                let mut s = 0.0;
                for j in 0..kv.len() {
                    s += a[j] * v[j][head * dh + c];
                }
                concat[i][head * dh + c] = s;
            }
            alpha.push(a);
        }
        alphas.push(alpha);
    }
    (concat, alphas)
}

/// `ReLU(attend + query Wr^T)`.
pub fn block_forward(block: &AttentionBlock, query: &Mat, kv: &Mat) -> (Mat, Vec<Mat>) {
    let (concat, alphas) = attend(block, query, kv);
    let res = times_transpose(query, &block.wr);
    let out = concat
        .iter()
        .zip(&res)
        .map(|(a, r)| a.iter().zip(r).map(|(x, y)| (x + y).max(0.0)).collect())
        .collect();
    (out, alphas)
}

/// Per slot: the most frequent observed location over the history days;
/// among tied locations the one observed on the latest day.
pub fn aggregate(history: &[Trajectory]) -> Vec<Option<u32>> {
    let t_slots = history[0].slots.len();
    let mut out = Vec::with_capacity(t_slots);
    for t in 0..t_slots {
        let mut seen: Vec<(u32, usize, u32)> = Vec::new(); // (loc, count, latest day)
        for day in history {
            if let Some(l) = day.slots[t] {
                match seen.iter_mut().find(|e| e.0 == l.0) {
                    Some(e) => {
                        e.1 += 1;
                        e.2 = e.2.max(day.day_index);
                    }
                    None => seen.push((l.0, 1, day.day_index)),
                }
            }
        }
        let mut best: Option<(u32, usize, u32)> = None;
        for e in seen {
            best = match best {
                None => Some(e),
                Some(b) if e.1 > b.1 || (e.1 == b.1 && e.2 > b.2) => Some(e),
                keep => keep,
            };
        }
        out.push(best.map(|b| b.0));
    }
    out
}

pub fn time_encoding(t: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let i = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * i / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Location embedding (last row for MISSING) plus time encoding.
pub fn embed(params: &ModelParams, slots: &[Option<u32>]) -> Mat {
    let e = &params.embedding.table;
    let d = e.ncols();
    let missing = e.nrows() - 1;
    slots
        .iter()
        .enumerate()
        .map(|(t, s)| {
            let row = s.map_or(missing, |l| l as usize);
            let pe = time_encoding(t, d);
            (0..d).map(|c| e[[row, c]] + pe[c]).collect()
        })
        .collect()
}

fn self_stack(layers: &[AttentionBlock], mut x: Mat) -> Mat {
    for l in layers {
        x = block_forward(l, &x, &x).0;
    }
    x
}

/// The final representation for every slot.
pub fn final_representation(params: &ModelParams, inst: &MaskedInstance) -> Mat {
    let hist = embed(params, &aggregate(&inst.history));
    let cur_slots: Vec<Option<u32>> = inst.current.slots.iter().map(|s| s.map(|l| l.0)).collect();
    let cur = embed(params, &cur_slots);
    let p_bar = self_stack(&params.history_stack, hist);
    let n_bar = self_stack(&params.current_stack, cur.clone());
    let fused = match &params.inter_block {
        Some(b) => block_forward(b, &n_bar, &p_bar).0,
        None => n_bar,
    };
    match &params.gen_block {
        Some(b) => block_forward(b, &cur, &fused).0,
        None => cur,
    }
}

/// Probabilities over real locations for one slot's representation.
pub fn location_probs(params: &ModelParams, repr: &[f64]) -> Vec<f64> {
    let e = &params.embedding.table;
    let n_loc = e.nrows() - 1;
    let scores: Vec<f64> = (0..n_loc)
        .map(|l| {
            let mut s = 0.0;
            for c in 0..repr.len() {
                s += repr[c] * e[[l, c]];
            }
            s
        })
        .collect();
    softmax(&scores)
}

/// `-sum over masked slots of log max(P(truth), 1e-12)`.
pub fn cross_entropy(params: &ModelParams, inst: &MaskedInstance) -> f64 {
    let repr = final_representation(params, inst);
    let mut ce = 0.0;
    for &(t, truth) in &inst.masked {
        let p = location_probs(params, &repr[t])[truth.0 as usize];
        ce -= p.max(1e-12).ln();
    }
    ce
}

pub fn squared_norm(params: &ModelParams) -> f64 {
    let mut s = 0.0;
    for (_, m) in params.matrices() {
        for v in m.iter() {
            s += v * v;
        }
    }
    s
}

pub fn loss(params: &ModelParams, batch: &[MaskedInstance], lambda: f64) -> f64 {
    let mut ce = 0.0;
    for inst in batch {
        ce += cross_entropy(params, inst);
    }
    ce + lambda * squared_norm(params)
}

pub fn max_abs_diff(a: &Mat, b: &Array2<f64>) -> f64 {
    let mut m = 0.0f64;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m = m.max((v - b[[i, j]]).abs());
        }
    }
    m
}
