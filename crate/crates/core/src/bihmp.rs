//! Bidirectional high-order message passing over the cell hypergraph.
//!
//! Each layer first updates hyperedges from their member nodes
//! (`z_temp = mean ReLU(f1(z_v))`, `z_e' = ReLU(f2([z_e, z_temp]))`) and then
//! nodes from their two incident hyperedges
//! (`z_v' = ReLU(f3([z_v, z_e^col, z_e^row]))`), using the freshly updated
//! hyperedge embeddings.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::hypergraph::Hypergraph;

/// Default number of stacked layer pairs.
pub const DEFAULT_LAYERS: usize = 3;

/// Uniform `[-1/√fan_in, 1/√fan_in]` weights and biases for an `in → out` map.
pub(crate) fn push_linear(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut ChaCha8Rng) {
    push_scaled_linear(params, name, fan_in, fan_out, bias, 1.0, rng);
}

/// [`push_linear`] with the bound multiplied by `gain`.
pub(crate) fn push_scaled_linear(
    params: &mut ParamSet,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    gain: f64,
    rng: &mut ChaCha8Rng,
) {
    let bound = gain / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
    params.push(format!("{name}.w"), Tensor::matrix(fan_in, fan_out, w).expect("shape"), true);
    if bias {
        let b = (0..fan_out).map(|_| rng.gen_range(-bound..=bound)).collect();
        params.push(format!("{name}.b"), Tensor::row(b), true);
    }
}

/// Registers the parameters of `layers` BiHMP layers of width `dim`.
pub fn init_params(params: &mut ParamSet, layers: usize, dim: usize, rng: &mut ChaCha8Rng) {
    for l in 0..layers {
        push_linear(params, &format!("bihmp.{l}.f1"), dim, dim, true, rng);
        push_linear(params, &format!("bihmp.{l}.f2"), 2 * dim, dim, true, rng);
        push_linear(params, &format!("bihmp.{l}.f3"), 3 * dim, dim, true, rng);
    }
}

/// Tape handles of one layer's `f1: D→D`, `f2: 2D→D`, `f3: 3D→D`.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars<'t> {
    pub f1: (Var<'t>, Var<'t>),
    pub f2: (Var<'t>, Var<'t>),
    pub f3: (Var<'t>, Var<'t>),
}

/// Incidence lists of a hypergraph in the form the tape ops consume.
#[derive(Debug, Clone)]
pub struct Incidence {
    pub members: Rc<Vec<Vec<usize>>>,
    pub node_col: Rc<Vec<usize>>,
    pub node_row: Rc<Vec<usize>>,
}

impl Incidence {
    pub fn new(hg: &Hypergraph) -> Self {
        Incidence {
            members: Rc::new(hg.all_members()),
            node_col: Rc::new(hg.node_column_edges()),
            node_row: Rc::new(hg.node_row_edges()),
        }
    }
}

pub fn node_to_hyperedge<'t>(z_v: Var<'t>, z_e: Var<'t>, layer: &LayerVars<'t>, inc: &Incidence) -> Result<Var<'t>> {
    let transformed = z_v.linear(&layer.f1.0, &layer.f1.1)?.relu();
    let temp = transformed.group_mean(Rc::clone(&inc.members))?;
    Ok(Var::concat_cols(&[z_e, temp])?.linear(&layer.f2.0, &layer.f2.1)?.relu())
}

pub fn hyperedge_to_node<'t>(z_v: Var<'t>, z_e: Var<'t>, layer: &LayerVars<'t>, inc: &Incidence) -> Result<Var<'t>> {
    let col = z_e.gather_rows(Rc::clone(&inc.node_col))?;
    let row = z_e.gather_rows(Rc::clone(&inc.node_row))?;
    Ok(Var::concat_cols(&[z_v, col, row])?.linear(&layer.f3.0, &layer.f3.1)?.relu())
}

/// Final node and hyperedge embeddings after all layer pairs.
#[derive(Debug, Clone, Copy)]
pub struct GraphState<'t> {
    pub z_v: Var<'t>,
    pub z_e: Var<'t>,
}

pub fn run_bihmp<'t>(z_v: Var<'t>, z_e: Var<'t>, layers: &[LayerVars<'t>], inc: &Incidence) -> Result<GraphState<'t>> {
    if layers.is_empty() {
        return Err(Error::param("layers", "BiHMP needs at least one layer"));
    }
    let (mut z_v, mut z_e) = (z_v, z_e);
    for layer in layers {
        z_e = node_to_hyperedge(z_v, z_e, layer, inc)?;
        z_v = hyperedge_to_node(z_v, z_e, layer, inc)?;
    }
    Ok(GraphState { z_v, z_e })
}

/// `z_g` of every node: its column-edge and row-edge embeddings side by side.
pub fn graph_features<'t>(state: &GraphState<'t>, inc: &Incidence) -> Result<Var<'t>> {
    let col = state.z_e.gather_rows(Rc::clone(&inc.node_col))?;
    let row = state.z_e.gather_rows(Rc::clone(&inc.node_row))?;
    Var::concat_cols(&[col, row])
}
