//! XFusion (causal prompt self-attention, then cross-attention against the
//! graph feature `z_g`) and the projection heads.
//!
//! `Attn(Q, K, V; w) = softmax(Q Kᵀ / √d_K) V w`. Both attention stages
//! share `W_Q`, `W_K` and `W_V`; `z_g` enters as two key/value rows
//! (column edge, then row edge).

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{KeyLists, ParamSet, Var};
use crate::bihmp::{push_linear, push_scaled_linear};
use crate::error::{Error, Result};
use crate::table::ColumnKind;

/// Gain on the `1/√fan_in` init bound of the five attention maps.
pub const INIT_GAIN: f64 = 10.0;

pub fn init_params(params: &mut ParamSet, dim: usize, vocab_size: usize, rng: &mut ChaCha8Rng) {
    for name in ["wq", "wk", "wv", "w1", "w2"] {
        push_scaled_linear(params, &format!("fusion.{name}"), dim, dim, false, INIT_GAIN, rng);
    }
    push_linear(params, "head.scalar", dim, 1, true, rng);
    push_linear(params, "head.text", dim, vocab_size, true, rng);
}

#[derive(Debug, Clone, Copy)]
pub struct FusionVars<'t> {
    pub wq: Var<'t>,
    pub wk: Var<'t>,
    pub wv: Var<'t>,
    pub w1: Var<'t>,
    pub w2: Var<'t>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// `d_o = 1`, numerical and categorical targets.
    Scalar,
    /// `d_o = |Vocab|`, next-token logits.
    Text,
}

#[derive(Debug, Clone, Copy)]
pub struct Head<'t> {
    pub kind: HeadKind,
    pub w: Var<'t>,
    pub b: Var<'t>,
}

/// One prompt against one `z_g` (`2 × D`): returns `z_output`, `(s+1) × D`.
pub fn xfusion<'t>(z_p: Var<'t>, z_g: Var<'t>, f: &FusionVars<'t>) -> Result<Var<'t>> {
    let g = z_g.value();
    if g.rows() != 2 {
        return Err(Error::Shape(format!("z_g must have 2 rows, got {:?}", g.shape())));
    }
    let temp = Var::attention(
        &z_p.matmul(&f.wq)?,
        &z_p.matmul(&f.wk)?,
        &z_p.matmul(&f.wv)?,
        &f.w1,
        true,
    )?;
    Var::attention(
        &temp.matmul(&f.wq)?,
        &z_g.matmul(&f.wk)?,
        &z_g.matmul(&f.wv)?,
        &f.w2,
        false,
    )
}

/// Many prompts at once. `prompts` stacks every prompt's token embeddings;
/// `queries[r]` is the prompt row whose output is wanted, `self_keys.get(r)`
/// the rows it may attend to (its prompt prefix), and `graph_keys.get(r)` the
/// two hyperedge rows of `z_e` that form its `z_g`. Returns one row per query.
pub fn xfusion_batched<'t>(
    prompts: Var<'t>,
    queries: Rc<Vec<usize>>,
    self_keys: Rc<KeyLists>,
    z_e: Var<'t>,
    graph_keys: Rc<KeyLists>,
    f: &FusionVars<'t>,
) -> Result<Var<'t>> {
    let q = prompts.gather_rows(queries)?.matmul(&f.wq)?;
    let k = prompts.matmul(&f.wk)?;
    let v = prompts.matmul(&f.wv)?;
    let temp = q.segment_attention(&k, &v, self_keys)?.matmul(&f.w1)?;
    let q2 = temp.matmul(&f.wq)?;
    let ke = z_e.matmul(&f.wk)?;
    let ve = z_e.matmul(&f.wv)?;
    q2.segment_attention(&ke, &ve, graph_keys)?.matmul(&f.w2)
}

/// Applies the head to every row of `z_output`.
pub fn project<'t>(z_output: Var<'t>, head: &Head<'t>, kind: ColumnKind) -> Result<Var<'t>> {
    let expected = if kind.is_scalar() { HeadKind::Scalar } else { HeadKind::Text };
    if head.kind != expected {
        return Err(Error::Contract(format!("{:?} head used for a {kind} column", head.kind)));
    }
    z_output.linear(&head.w, &head.b)
}

/// Last row of a projection: the scalar prediction or next-token logits.
pub fn take_last(o: &Var<'_>) -> Vec<f64> {
    let v = o.value();
    v.row_slice(v.rows() - 1).to_vec()
}

/// Argmax over logits with PAD excluded; ties go to the lowest id.
pub fn argmax_token(logits: &[f64]) -> usize {
    let mut best = None;
    for (id, &l) in logits.iter().enumerate() {
        if id == crate::encoder::PAD {
            continue;
        }
        match best {
            Some((_, bl)) if l <= bl => {}
            _ => best = Some((id, l)),
        }
    }
    best.map_or(crate::encoder::EOS, |(id, _)| id)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{central_difference, relative_error, Tape, Tensor};
    use crate::masking::rng_for;
    use rand::Rng;

    fn params(dim: usize, vocab: usize, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        init_params(&mut p, dim, vocab, &mut rng_for(seed));
        p
    }

    fn vars<'t>(tape: &'t Tape, p: &ParamSet) -> FusionVars<'t> {
        let g = |n: &str| tape.param(p.by_name(&format!("fusion.{n}.w")).unwrap().value.clone());
        FusionVars {
            wq: g("wq"),
            wk: g("wk"),
            wv: g("wv"),
            w1: g("w1"),
            w2: g("w2"),
        }
    }

    fn random(seed: u64, r: usize, c: usize) -> Tensor {
        let mut rng = rng_for(seed);
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    type M = Vec<Vec<f64>>;

    fn m(t: &Tensor) -> M {
        (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
    }

    fn mul(a: &M, b: &M) -> M {
        a.iter()
            .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
            .collect()
    }

    /// Literal transcription of the two attention equations.
    fn oracle(zp: &M, zg: &M, wq: &M, wk: &M, wv: &M, w1: &M, w2: &M) -> M {
        fn attn(q: &M, k: &M, v: &M, w: &M, causal: bool) -> M {
            let dk = k[0].len() as f64;
            let mut out = Vec::new();
            for (r, qr) in q.iter().enumerate() {
                let visible = if causal { r + 1 } else { k.len() };
                let scores: Vec<f64> = (0..visible)
                    .map(|t| qr.iter().zip(&k[t]).map(|(a, b)| a * b).sum::<f64>() / dk.sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                let mut row = vec![0.0; v[0].len()];
                for t in 0..visible {
                    for c in 0..row.len() {
                        row[c] += e[t] / z * v[t][c];
                    }
                }
                out.push(row);
            }
            mul(&out, w)
        }
        let temp = attn(&mul(zp, wq), &mul(zp, wk), &mul(zp, wv), w1, true);
        attn(&mul(&temp, wq), &mul(zg, wk), &mul(zg, wv), w2, false)
    }

    #[test]
    fn matches_formula_transcription() {
        for seed in 0..10 {
            let (s1, dim) = (3, 4);
            let p = params(dim, 5, seed);
            let zp = random(100 + seed, s1, dim);
            let zg = random(200 + seed, 2, dim);
            let tape = Tape::new();
            let f = vars(&tape, &p);
            let out = xfusion(tape.constant(zp.clone()), tape.constant(zg.clone()), &f).unwrap();
            let w = |n: &str| m(&p.by_name(&format!("fusion.{n}.w")).unwrap().value);
            let expect = oracle(&m(&zp), &m(&zg), &w("wq"), &w("wk"), &w("wv"), &w("w1"), &w("w2"));
            for (r, row) in expect.iter().enumerate() {
                for (a, b) in row.iter().zip(out.value().row_slice(r)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_token_self_attention_is_value_projection() {
        let p = params(3, 4, 1);
        let tape = Tape::new();
        let f = vars(&tape, &p);
        let zp = tape.constant(random(1, 1, 3));
        let temp = Var::attention(&zp.matmul(&f.wq).unwrap(), &zp.matmul(&f.wk).unwrap(), &zp.matmul(&f.wv).unwrap(), &f.w1, true)
            .unwrap();
        let direct = zp.matmul(&f.wv).unwrap().matmul(&f.w1).unwrap();
        for (a, b) in temp.value().data().iter().zip(direct.value().data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_graph_rows_give_uniform_mixture() {
        let p = params(3, 4, 2);
        let tape = Tape::new();
        let f = vars(&tape, &p);
        let row = random(3, 1, 3);
        let zg = Tensor::matrix(2, 3, [row.data(), row.data()].concat()).unwrap();
        let out = xfusion(tape.constant(random(4, 3, 3)), tape.constant(zg), &f).unwrap();
        let expect = tape.constant(row).matmul(&f.wv).unwrap().matmul(&f.w2).unwrap();
        for r in 0..3 {
            for (a, b) in out.value().row_slice(r).iter().zip(expect.value().data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_graph_gives_zero_output() {
        let p = params(4, 4, 3);
        let tape = Tape::new();
        let f = vars(&tape, &p);
        let out = xfusion(tape.constant(random(5, 3, 4)), tape.constant(Tensor::zeros(&[2, 4])), &f).unwrap();
        assert!(out.value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn causal_prefix_invariance() {
        let p = params(4, 4, 4);
        let tape = Tape::new();
        let f = vars(&tape, &p);
        let zg = tape.constant(random(6, 2, 4));
        let full = random(7, 4, 4);
        let mut changed = full.clone();
        changed.data_mut()[12..].iter_mut().for_each(|v| *v += 1.0);
        let a = xfusion(tape.constant(full), zg, &f).unwrap().value();
        let b = xfusion(tape.constant(changed), zg, &f).unwrap().value();
        assert_eq!(&a.data()[..12], &b.data()[..12]);
        assert_ne!(&a.data()[12..], &b.data()[12..]);
    }

    #[test]
    fn batched_matches_single_instance() {
        let dim = 4;
        let p = params(dim, 4, 5);
        let tape = Tape::new();
        let f = vars(&tape, &p);
        // two prompts of lengths 3 and 2, edges matrix with 4 rows
        let pa = random(8, 3, dim);
        let pb = random(9, 2, dim);
        let ze = random(10, 4, dim);
        let prompts = Tensor::matrix(5, dim, [pa.data(), pb.data()].concat()).unwrap();
        let mut self_keys = KeyLists::new();
        let mut graph_keys = KeyLists::new();
        let queries = vec![2, 1, 4];
        self_keys.push(0..=2);
        graph_keys.push([1, 3]);
        self_keys.push(0..=1);
        graph_keys.push([1, 3]);
        self_keys.push(3..=4);
        graph_keys.push([0, 2]);
        let out = xfusion_batched(
            tape.constant(prompts),
            Rc::new(queries),
            Rc::new(self_keys),
            tape.constant(ze.clone()),
            Rc::new(graph_keys),
            &f,
        )
        .unwrap()
        .value();
        let zg = |a: usize, b: usize| {
            Tensor::matrix(2, dim, [ze.row_slice(a), ze.row_slice(b)].concat()).unwrap()
        };
        let single_a = xfusion(tape.constant(pa), tape.constant(zg(1, 3)), &f).unwrap().value();
        let single_b = xfusion(tape.constant(pb), tape.constant(zg(0, 2)), &f).unwrap().value();
        let expected = [single_a.row_slice(2), single_a.row_slice(1), single_b.row_slice(1)];
        for (r, e) in expected.iter().enumerate() {
            for (a, b) in out.row_slice(r).iter().zip(e.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradient_through_both_stages() {
        let dim = 3;
        let p = params(dim, 4, 6);
        let zp = random(11, 3, dim);
        let zg = random(12, 2, dim);
        let loss_of = |p: &ParamSet| -> (f64, Vec<Tensor>) {
            let tape = Tape::new();
            let f = vars(&tape, p);
            let out = xfusion(tape.constant(zp.clone()), tape.constant(zg.clone()), &f).unwrap();
            let probe = tape.constant(random(13, dim, 1));
            let loss = out.matmul(&probe).unwrap().sum();
            let g = tape.backward(loss).unwrap();
            (loss.value().item(), [f.wq, f.wk, f.wv, f.w1, f.w2].iter().map(|v| g.get(*v)).collect())
        };
        let (_, analytic) = loss_of(&p);
        for (pi, name) in ["wq", "wk", "wv", "w1", "w2"].iter().enumerate() {
            let idx = p.index_of(&format!("fusion.{name}.w")).unwrap();
            let mut flat = p.get(idx).value.data().to_vec();
            for k in 0..flat.len() {
                let numeric = central_difference(&mut flat, k, 1e-5, |x| {
                    let mut q = p.clone();
                    q.get_mut(idx).value.data_mut().copy_from_slice(x);
                    loss_of(&q).0
                });
                let a = analytic[pi].data()[k];
                assert!(relative_error(a, numeric, 1e-6) < 1e-4, "{name}[{k}] {a} vs {numeric}");
            }
        }
    }

    #[test]
    fn heads_and_argmax() {
        let tape = Tape::new();
        let z = tape.constant(random(14, 3, 2));
        let scalar = Head {
            kind: HeadKind::Scalar,
            w: tape.param(Tensor::zeros(&[2, 1])),
            b: tape.param(Tensor::row(vec![0.25])),
        };
        let o = project(z, &scalar, ColumnKind::Numerical).unwrap();
        assert_eq!(take_last(&o), vec![0.25]);
        assert!(project(z, &scalar, ColumnKind::Text).is_err());
        let text = Head {
            kind: HeadKind::Text,
            w: tape.param(random(15, 2, 6)),
            b: tape.param(Tensor::zeros(&[1, 6])),
        };
        let logits = take_last(&project(z, &text, ColumnKind::Text).unwrap());
        assert_eq!(logits.len(), 6);
        let shifted: Vec<f64> = logits.iter().map(|l| l + 7.5).collect();
        assert_eq!(argmax_token(&logits), argmax_token(&shifted));
        assert_ne!(argmax_token(&[100.0, 1.0, 2.0]), crate::encoder::PAD);
    }
}
