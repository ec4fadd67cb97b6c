use super::{add_conv, Init, LayerPlan, ModelSpec, KERNEL};
use crate::error::Result;
use crate::tensor::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

/// Gate convolutions of one ConvLSTM cell. Gate channels are ordered
/// input, forget, output, candidate, `hidden` channels each.
#[derive(Debug, Clone, Copy)]
pub struct ConvLstmCellParams {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl ConvLstmCellParams {
    /// Registers a cell with forget-gate bias 1.
    pub(crate) fn add<T: Scalar>(
        params: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        input: usize,
        hidden: usize,
    ) -> Self {
        let k2 = KERNEL * KERNEL;
        let wx = params.add(format!("{name}.wx"), init.he(&[4 * hidden, input, KERNEL, KERNEL], input * k2));
        let wh = params.add(format!("{name}.wh"), init.he(&[4 * hidden, hidden, KERNEL, KERNEL], hidden * k2));
        let bias = Tensor::from_fn(&[4 * hidden], |i| if (hidden..2 * hidden).contains(&i) { T::one() } else { T::zero() });
        let b = params.add(format!("{name}.bias"), bias);
        ConvLstmCellParams { wx, wh, b, hidden }
    }
}

/// Bound parameter vars of a cell, so unrolled steps share one leaf each.
#[derive(Debug, Clone, Copy)]
struct CellVars {
    wx: Var,
    wh: Var,
    b: Var,
    hidden: usize,
}

fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, p: &ConvLstmCellParams) -> CellVars {
    CellVars {
        wx: g.param(store, p.wx),
        wh: g.param(store, p.wh),
        b: g.param(store, p.b),
        hidden: p.hidden,
    }
}

fn cell_step<T: Scalar>(g: &mut Graph<T>, p: CellVars, x: Var, state: Option<(Var, Var)>) -> Result<(Var, Var)> {
    let pad = KERNEL / 2;
    let mut gates = g.conv2d(x, p.wx, Some(p.b), pad)?;
    if let Some((h_prev, _)) = state {
        let rec = g.conv2d(h_prev, p.wh, None, pad)?;
        gates = g.add(gates, rec)?;
    }
    let n = p.hidden;
    let i = g.slice(gates, 1, 0, n)?;
    let f = g.slice(gates, 1, n, n)?;
    let o = g.slice(gates, 1, 2 * n, n)?;
    let c_in = g.slice(gates, 1, 3 * n, n)?;
    let (i, f, o) = (g.sigmoid(i), g.sigmoid(f), g.sigmoid(o));
    let c_in = g.tanh(c_in);
    let mut c = g.mul(i, c_in)?;
    if let Some((_, c_prev)) = state {
        let keep = g.mul(f, c_prev)?;
        c = g.add(keep, c)?;
    }
    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}

/// One ConvLSTM step. `state` is `(h_prev, c_prev)`; `None` is the zero
/// state.
pub fn conv_lstm_cell<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    params: &ConvLstmCellParams,
    x: Var,
    state: Option<(Var, Var)>,
) -> Result<(Var, Var)> {
    let vars = bind(g, store, params);
    cell_step(g, vars, x, state)
}

#[derive(Debug, Clone)]
pub(super) struct ConvLstmLayout {
    cells: Vec<ConvLstmCellParams>,
    head: (ParamId, ParamId),
}

impl ConvLstmLayout {
    pub(super) fn build<T: Scalar>(spec: &ModelSpec, params: &mut ParamStore<T>, init: &mut Init) -> Self {
        let LayerPlan::ConvLstm { cells, hidden } = spec.plan else {
            unreachable!("ConvLSTM layout for another plan")
        };
        let cells = (0..cells)
            .map(|l| ConvLstmCellParams::add(params, init, &format!("cell{l}"), if l == 0 { 1 } else { hidden }, hidden))
            .collect();
        let head = add_conv(params, init, "head", hidden, 1);
        ConvLstmLayout { cells, head }
    }

    pub(super) fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let steps = g.shape(x)[1];
        let vars: Vec<CellVars> = self.cells.iter().map(|p| bind(g, store, p)).collect();
        let mut states: Vec<Option<(Var, Var)>> = vec![None; vars.len()];
        for t in 0..steps {
            let mut input = g.slice(x, 1, t, 1)?;
            for (p, state) in vars.iter().zip(states.iter_mut()) {
                let next = cell_step(g, *p, input, *state)?;
                *state = Some(next);
                input = next.0;
            }
        }
        let last = states.last().copied().flatten().expect("at least one step").0;
        let (w, b) = (g.param(store, self.head.0), g.param(store, self.head.1));
        let y = g.conv2d(last, w, Some(b), KERNEL / 2)?;
        Ok(g.sigmoid(y))
    }
}
