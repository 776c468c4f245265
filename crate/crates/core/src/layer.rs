//! Emformer and AM-TRF layer kernels.
//!
//! Row convention: a projection is `X · W` with `X` holding one frame per row.
//! All kernels run in evaluation mode; the configured dropout rate is never
//! applied.
//!
//! The parallel and streaming Emformer kernels share `attend` and compute
//! every projection row by row, so both paths perform the same floating point
//! operations in the same order.

use std::collections::VecDeque;

use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layout::{AttentionMaskSet, SegmentKeys, SegmentLayout};
use crate::numerics::{
    ffn_apply, ffn_vjp, layer_norm, layer_norm_vjp, matmul, matmul_vjp, mean_rows, mean_rows_vjp,
    multi_head_attention_full, multi_head_attention_vjp, BoolMask, Matrix, Scalar,
};

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<T> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> NormParams<T> {
    pub fn identity(d: usize) -> Self {
        Self {
            gain: vec![T::one(); d],
            bias: vec![T::zero(); d],
        }
    }

    fn zeros(d: usize) -> Self {
        Self {
            gain: vec![T::zero(); d],
            bias: vec![T::zero(); d],
        }
    }

    fn apply(&self, x: &Matrix<T>, eps: T) -> Result<Matrix<T>> {
        layer_norm(x, &self.gain, &self.bias, eps)
    }
}

/// Parameters of one layer. The same struct holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub w_out: Matrix<T>,
    pub w1: Matrix<T>,
    pub b1: Vec<T>,
    pub w2: Matrix<T>,
    pub b2: Vec<T>,
    pub ln_attn: NormParams<T>,
    pub ln_ffn: NormParams<T>,
    pub ln_out: NormParams<T>,
}

/// Names of the parameter tensors of a layer, in a fixed order.
pub const TENSOR_NAMES: [&str; 14] = [
    "wq",
    "wk",
    "wv",
    "w_out",
    "w1",
    "b1",
    "w2",
    "b2",
    "ln_attn.gain",
    "ln_attn.bias",
    "ln_ffn.gain",
    "ln_ffn.bias",
    "ln_out.gain",
    "ln_out.bias",
];

impl<T: Scalar> LayerWeights<T> {
    pub fn zeros(d: usize, f: usize) -> Self {
        Self {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            w_out: Matrix::zeros(d, d),
            w1: Matrix::zeros(d, f),
            b1: vec![T::zero(); f],
            w2: Matrix::zeros(f, d),
            b2: vec![T::zero(); d],
            ln_attn: NormParams::zeros(d),
            ln_ffn: NormParams::zeros(d),
            ln_out: NormParams::zeros(d),
        }
    }

    pub fn d_model(&self) -> usize {
        self.wq.rows()
    }

    /// Mutable flat views of every tensor, named as in [`TENSOR_NAMES`].
    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [T])> {
        vec![
            ("wq", self.wq.data_mut()),
            ("wk", self.wk.data_mut()),
            ("wv", self.wv.data_mut()),
            ("w_out", self.w_out.data_mut()),
            ("w1", self.w1.data_mut()),
            ("b1", &mut self.b1[..]),
            ("w2", self.w2.data_mut()),
            ("b2", &mut self.b2[..]),
            ("ln_attn.gain", &mut self.ln_attn.gain[..]),
            ("ln_attn.bias", &mut self.ln_attn.bias[..]),
            ("ln_ffn.gain", &mut self.ln_ffn.gain[..]),
            ("ln_ffn.bias", &mut self.ln_ffn.bias[..]),
            ("ln_out.gain", &mut self.ln_out.gain[..]),
            ("ln_out.bias", &mut self.ln_out.bias[..]),
        ]
    }

    pub fn tensors(&self) -> Vec<(&'static str, &[T])> {
        vec![
            ("wq", self.wq.data()),
            ("wk", self.wk.data()),
            ("wv", self.wv.data()),
            ("w_out", self.w_out.data()),
            ("w1", self.w1.data()),
            ("b1", &self.b1[..]),
            ("w2", self.w2.data()),
            ("b2", &self.b2[..]),
            ("ln_attn.gain", &self.ln_attn.gain[..]),
            ("ln_attn.bias", &self.ln_attn.bias[..]),
            ("ln_ffn.gain", &self.ln_ffn.gain[..]),
            ("ln_ffn.bias", &self.ln_ffn.bias[..]),
            ("ln_out.gain", &self.ln_out.gain[..]),
            ("ln_out.bias", &self.ln_out.bias[..]),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let ok = [&self.wq, &self.wk, &self.wv, &self.w_out]
            .iter()
            .all(|w| w.shape() == (d, d))
            && self.w1.shape() == (d, f)
            && self.w2.shape() == (f, d)
            && self.b1.len() == f
            && self.b2.len() == d
            && [&self.ln_attn, &self.ln_ffn, &self.ln_out]
                .iter()
                .all(|n| n.gain.len() == d && n.bias.len() == d);
        if ok {
            Ok(())
        } else {
            Err(Error::shape(
                "LayerWeights",
                format!("weights do not match d={d}, ffn={f}"),
            ))
        }
    }

    pub fn add_assign(&mut self, other: &LayerWeights<T>) {
        let theirs = other.tensors();
        for ((_, mine), (_, t)) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, &b) in mine.iter_mut().zip(t) {
                *a = *a + b;
            }
        }
    }
}

/// Ring buffer of memory vectors tagged with the segment that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank<T> {
    capacity: usize,
    entries: VecDeque<(usize, Vec<T>)>,
}

impl<T: Scalar> MemoryBank<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends, evicting the oldest entry when full. A zero-capacity bank
    /// stays empty.
    pub fn push(&mut self, segment: usize, v: Vec<T>) {
        if self.capacity == 0 {
            return;
        }
        debug_assert!(self.entries.back().is_none_or(|(s, _)| *s < segment));
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((segment, v));
    }

    pub fn segments(&self) -> Vec<usize> {
        self.entries.iter().map(|(s, _)| *s).collect()
    }

    pub fn to_matrix(&self, d: usize) -> Matrix<T> {
        let mut m = Matrix::zeros(self.entries.len(), d);
        for (r, (_, v)) in self.entries.iter().enumerate() {
            m.row_mut(r).copy_from_slice(v);
        }
        m
    }
}

/// Attention probabilities of one segment in one layer.
#[derive(Debug, Clone)]
pub struct AttentionTrace<T> {
    /// Per-head probabilities; rows are `[frame queries, summary?]`, columns
    /// are `[memory keys, frame keys]`.
    pub probs: Vec<Matrix<T>>,
    pub memory_keys: usize,
    pub has_summary: bool,
}

impl<T: Scalar> AttentionTrace<T> {
    /// Weights from the summary query to every memory key, across heads.
    pub fn summary_to_memory(&self) -> Vec<T> {
        if !self.has_summary {
            return Vec::new();
        }
        self.probs
            .iter()
            .flat_map(|p| p.row(p.rows() - 1)[..self.memory_keys].to_vec())
            .collect()
    }
}

struct Attended<T> {
    /// Rows `[frame queries, summary?]`.
    output: Matrix<T>,
    trace: AttentionTrace<T>,
}

fn summary_mask(
    frame_queries: usize,
    summary: bool,
    memory_keys: usize,
    frame_keys: usize,
) -> BoolMask {
    BoolMask::from_fn(
        frame_queries + usize::from(summary),
        memory_keys + frame_keys,
        |q, k| q < frame_queries || k >= memory_keys,
    )
}

/// Attention of frame queries (plus an optional summary query) over
/// `[memory keys, frame keys]`. Everything is visible except summary to
/// memory.
#[allow(clippy::too_many_arguments)]
fn attend<T: Scalar>(
    q_frames: &Matrix<T>,
    q_summary: Option<&Matrix<T>>,
    k_mem: &Matrix<T>,
    v_mem: &Matrix<T>,
    k_frames: &Matrix<T>,
    v_frames: &Matrix<T>,
    w_out: &Matrix<T>,
    heads: usize,
) -> Result<Attended<T>> {
    let mut q_parts = vec![q_frames];
    if let Some(s) = q_summary {
        q_parts.push(s);
    }
    let q = Matrix::vstack(&q_parts)?;
    let k = Matrix::vstack(&[k_mem, k_frames])?;
    let v = Matrix::vstack(&[v_mem, v_frames])?;
    let mask = summary_mask(
        q_frames.rows(),
        q_summary.is_some(),
        k_mem.rows(),
        k_frames.rows(),
    );
    let out = multi_head_attention_full(&q, &k, &v, &mask, w_out, heads)?;
    Ok(Attended {
        output: out.output,
        trace: AttentionTrace {
            probs: out.probs,
            memory_keys: k_mem.rows(),
            has_summary: q_summary.is_some(),
        },
    })
}

/// Mean of the (layer-normed) center rows.
pub fn summary_vector<T: Scalar>(centers_normed: &Matrix<T>) -> Result<Vec<T>> {
    if centers_normed.rows() == 0 {
        return Err(Error::EmptyInput("summary of an empty center block".into()));
    }
    mean_rows(centers_normed)
}

/// `out = LN_out(FFN(LN_ffn(z)) + z)`.
fn ffn_block<T: Scalar>(z: &Matrix<T>, w: &LayerWeights<T>, eps: T) -> Result<Matrix<T>> {
    let a = w.ln_ffn.apply(z, eps)?;
    let f = ffn_apply(&a, &w.w1, &w.b1, &w.w2, &w.b2)?;
    w.ln_out.apply(&f.add(z)?, eps)
}

fn ffn_block_vjp<T: Scalar>(
    z: &Matrix<T>,
    w: &LayerWeights<T>,
    eps: T,
    dy: &Matrix<T>,
    grads: &mut LayerWeights<T>,
) -> Result<Matrix<T>> {
    let a = w.ln_ffn.apply(z, eps)?;
    let f = ffn_apply(&a, &w.w1, &w.b1, &w.w2, &w.b2)?;
    let out_g = layer_norm_vjp(&f.add(z)?, &w.ln_out.gain, eps, dy)?;
    accumulate(&mut grads.ln_out.gain, &out_g.dgain);
    accumulate(&mut grads.ln_out.bias, &out_g.dbias);
    let ffn_g = ffn_vjp(&a, &w.w1, &w.b1, &w.w2, &w.b2, &out_g.dx)?;
    grads.w1.add_assign(&ffn_g.dw1);
    grads.w2.add_assign(&ffn_g.dw2);
    accumulate(&mut grads.b1, &ffn_g.db1);
    accumulate(&mut grads.b2, &ffn_g.db2);
    let ln_g = layer_norm_vjp(z, &w.ln_ffn.gain, eps, &ffn_g.dx)?;
    accumulate(&mut grads.ln_ffn.gain, &ln_g.dgain);
    accumulate(&mut grads.ln_ffn.bias, &ln_g.dbias);
    out_g.dx.add(&ln_g.dx)
}

fn accumulate<T: Scalar>(acc: &mut [T], v: &[T]) {
    for (a, &b) in acc.iter_mut().zip(v) {
        *a = *a + b;
    }
}

fn eps_of<T: Scalar>(cfg: &ModelConfig) -> T {
    T::from_f64_lossy(cfg.eps)
}

/// Input triple of one Emformer layer in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerInput<T> {
    /// `T x d` center frames in original order.
    pub centers: Matrix<T>,
    /// `H x d` hard-copy rows.
    pub right: Matrix<T>,
    /// One memory vector per segment from the layer below; `None` when the
    /// memory bank is disabled.
    pub memory: Option<Matrix<T>>,
}

pub type LayerOutput<T> = LayerInput<T>;

/// Every per-row quantity of one layer for the whole utterance.
struct Projected<T> {
    nc: Matrix<T>,
    nr: Matrix<T>,
    qc: Matrix<T>,
    kc: Matrix<T>,
    vc: Matrix<T>,
    qr: Matrix<T>,
    kr: Matrix<T>,
    vr: Matrix<T>,
    km: Matrix<T>,
    vm: Matrix<T>,
}

fn project<T: Scalar>(input: &LayerInput<T>, w: &LayerWeights<T>, eps: T) -> Result<Projected<T>> {
    let d = w.d_model();
    let nc = w.ln_attn.apply(&input.centers, eps)?;
    let nr = w.ln_attn.apply(&input.right, eps)?;
    let empty = Matrix::zeros(0, d);
    let mem = input.memory.as_ref().unwrap_or(&empty);
    Ok(Projected {
        qc: matmul(&nc, &w.wq)?,
        kc: matmul(&nc, &w.wk)?,
        vc: matmul(&nc, &w.wv)?,
        qr: matmul(&nr, &w.wq)?,
        kr: matmul(&nr, &w.wk)?,
        vr: matmul(&nr, &w.wv)?,
        km: matmul(mem, &w.wk)?,
        vm: matmul(mem, &w.wv)?,
        nc,
        nr,
    })
}

/// Queries and keys of one segment gathered from the utterance-wide
/// projections.
struct SegmentOperands<T> {
    q_frames: Matrix<T>,
    summary: Option<Vec<T>>,
    q_summary: Option<Matrix<T>>,
    k_mem: Matrix<T>,
    v_mem: Matrix<T>,
    k_frames: Matrix<T>,
    v_frames: Matrix<T>,
}

fn gather_segment<T: Scalar>(
    p: &Projected<T>,
    keys: &SegmentKeys,
    w: &LayerWeights<T>,
) -> Result<SegmentOperands<T>> {
    let q_frames = Matrix::vstack(&[
        &p.qc.slice_rows(keys.center.clone()),
        &p.qr.slice_rows(keys.right.clone()),
    ])?;
    let (summary, q_summary) = if keys.summary {
        let s = summary_vector(&p.nc.slice_rows(keys.center.clone()))?;
        let qs = matmul(&Matrix::row_vector(&s), &w.wq)?;
        (Some(s), Some(qs))
    } else {
        (None, None)
    };
    let frames = |m: &Matrix<T>, r: &Matrix<T>| {
        Matrix::vstack(&[
            &m.slice_rows(keys.left.clone()),
            &m.slice_rows(keys.center.clone()),
            &r.slice_rows(keys.right.clone()),
        ])
    };
    Ok(SegmentOperands {
        q_frames,
        summary,
        q_summary,
        k_mem: p.km.slice_rows(keys.memory.clone()),
        v_mem: p.vm.slice_rows(keys.memory.clone()),
        k_frames: frames(&p.kc, &p.kr)?,
        v_frames: frames(&p.vc, &p.vr)?,
    })
}

fn check_parallel_inputs<T: Scalar>(
    input: &LayerInput<T>,
    layout: &SegmentLayout,
    masks: &AttentionMaskSet,
    cfg: &ModelConfig,
) -> Result<()> {
    let d = cfg.d_model;
    if input.centers.shape() != (layout.total_frames, d)
        || input.right.shape() != (layout.hardcopy_total, d)
    {
        return Err(Error::shape(
            "emformer_layer_parallel",
            format!(
                "centers {:?}, right {:?} for T={}, H={}, d={d}",
                input.centers.shape(),
                input.right.shape(),
                layout.total_frames,
                layout.hardcopy_total
            ),
        ));
    }
    if masks.segments.len() != layout.n_segments() {
        return Err(Error::shape(
            "emformer_layer_parallel",
            "mask set does not match layout",
        ));
    }
    let want_memory = cfg.has_memory();
    match &input.memory {
        Some(m) if want_memory && m.shape() == (layout.n_segments(), d) => Ok(()),
        None if !want_memory => Ok(()),
        _ => Err(Error::shape(
            "emformer_layer_parallel",
            "memory input must hold one vector per segment iff memory_size > 0",
        )),
    }
}

/// Emformer layer over a whole utterance in training mode. Segments are
/// independent and computed in parallel; results do not depend on the order.
pub fn emformer_layer_parallel<T: Scalar>(
    input: &LayerInput<T>,
    w: &LayerWeights<T>,
    layout: &SegmentLayout,
    masks: &AttentionMaskSet,
    cfg: &ModelConfig,
    trace: Option<&mut Vec<AttentionTrace<T>>>,
) -> Result<LayerOutput<T>> {
    check_parallel_inputs(input, layout, masks, cfg)?;
    w.check(cfg)?;
    let eps = eps_of::<T>(cfg);
    let p = project(input, w, eps)?;
    let attended: Vec<Attended<T>> = masks
        .segments
        .par_iter()
        .map(|keys| {
            let ops = gather_segment(&p, keys, w)?;
            attend(
                &ops.q_frames,
                ops.q_summary.as_ref(),
                &ops.k_mem,
                &ops.v_mem,
                &ops.k_frames,
                &ops.v_frames,
                &w.w_out,
                cfg.n_heads,
            )
        })
        .collect::<Result<_>>()?;
    let d = cfg.d_model;
    let mut zc = input.centers.clone();
    let mut zr = input.right.clone();
    let mut memory = cfg
        .has_memory()
        .then(|| Matrix::zeros(layout.n_segments(), d));
    for (i, (keys, a)) in masks.segments.iter().zip(&attended).enumerate() {
        let c = keys.center.len();
        let r = keys.right.len();
        zc.add_rows(keys.center.start, &a.output.slice_rows(0..c));
        zr.add_rows(keys.right.start, &a.output.slice_rows(c..c + r));
        if let Some(m) = memory.as_mut() {
            m.row_mut(i).copy_from_slice(a.output.row(c + r));
        }
    }
    if let Some(t) = trace {
        t.extend(attended.into_iter().map(|a| a.trace));
    }
    Ok(LayerOutput {
        centers: ffn_block(&zc, w, eps)?,
        right: ffn_block(&zr, w, eps)?,
        memory,
    })
}

/// Gradients of [`emformer_layer_parallel`] given the output cotangents.
/// Returns the input cotangents (memory cotangent flows to the layer below)
/// and the weight gradients.
pub fn emformer_layer_parallel_vjp<T: Scalar>(
    input: &LayerInput<T>,
    w: &LayerWeights<T>,
    layout: &SegmentLayout,
    masks: &AttentionMaskSet,
    cfg: &ModelConfig,
    d_out: &LayerOutput<T>,
) -> Result<(LayerInput<T>, LayerWeights<T>)> {
    check_parallel_inputs(input, layout, masks, cfg)?;
    w.check(cfg)?;
    let eps = eps_of::<T>(cfg);
    let d = cfg.d_model;
    let mut grads = LayerWeights::zeros(d, cfg.ffn_dim);
    let p = project(input, w, eps)?;

    // Forward up to the residual sums.
    let mut zc = input.centers.clone();
    let mut zr = input.right.clone();
    let mut operands = Vec::with_capacity(masks.segments.len());
    for keys in &masks.segments {
        let ops = gather_segment(&p, keys, w)?;
        let a = attend(
            &ops.q_frames,
            ops.q_summary.as_ref(),
            &ops.k_mem,
            &ops.v_mem,
            &ops.k_frames,
            &ops.v_frames,
            &w.w_out,
            cfg.n_heads,
        )?;
        let c = keys.center.len();
        let r = keys.right.len();
        zc.add_rows(keys.center.start, &a.output.slice_rows(0..c));
        zr.add_rows(keys.right.start, &a.output.slice_rows(c..c + r));
        operands.push(ops);
    }

    let dzc = ffn_block_vjp(&zc, w, eps, &d_out.centers, &mut grads)?;
    let dzr = ffn_block_vjp(&zr, w, eps, &d_out.right, &mut grads)?;

    // Residual path.
    let mut d_centers = dzc.clone();
    let mut d_right = dzr.clone();

    let mut dqc = Matrix::zeros(p.qc.rows(), d);
    let mut dkc = Matrix::zeros(p.kc.rows(), d);
    let mut dvc = Matrix::zeros(p.vc.rows(), d);
    let mut dqr = Matrix::zeros(p.qr.rows(), d);
    let mut dkr = Matrix::zeros(p.kr.rows(), d);
    let mut dvr = Matrix::zeros(p.vr.rows(), d);
    let mut dkm = Matrix::zeros(p.km.rows(), d);
    let mut dvm = Matrix::zeros(p.vm.rows(), d);
    let mut dnc = Matrix::zeros(p.nc.rows(), d);

    for (i, (keys, ops)) in masks.segments.iter().zip(&operands).enumerate() {
        let c = keys.center.len();
        let r = keys.right.len();
        let mut parts = vec![
            dzc.slice_rows(keys.center.clone()),
            dzr.slice_rows(keys.right.clone()),
        ];
        if keys.summary {
            let dm = d_out
                .memory
                .as_ref()
                .map_or_else(|| Matrix::zeros(1, d), |m| m.slice_rows(i..i + 1));
            parts.push(dm);
        }
        let dout = Matrix::vstack(&parts.iter().collect::<Vec<_>>())?;
        let mut q_parts = vec![&ops.q_frames];
        if let Some(qs) = &ops.q_summary {
            q_parts.push(qs);
        }
        let q = Matrix::vstack(&q_parts)?;
        let k = Matrix::vstack(&[&ops.k_mem, &ops.k_frames])?;
        let v = Matrix::vstack(&[&ops.v_mem, &ops.v_frames])?;
        let mask = summary_mask(c + r, keys.summary, ops.k_mem.rows(), ops.k_frames.rows());
        let g = multi_head_attention_vjp(&q, &k, &v, &mask, &w.w_out, cfg.n_heads, &dout)?;
        grads.w_out.add_assign(&g.dw_out);

        dqc.add_rows(keys.center.start, &g.dq.slice_rows(0..c));
        dqr.add_rows(keys.right.start, &g.dq.slice_rows(c..c + r));
        if let (Some(s), true) = (&ops.summary, keys.summary) {
            let dqs = g.dq.slice_rows(c + r..c + r + 1);
            let (ds, dwq) = matmul_vjp(&Matrix::row_vector(s), &w.wq, &dqs)?;
            grads.wq.add_assign(&dwq);
            dnc.add_rows(keys.center.start, &mean_rows_vjp(c, ds.row(0)));
        }

        let scatter =
            |dm: &mut Matrix<T>, dc: &mut Matrix<T>, dr: &mut Matrix<T>, full: &Matrix<T>| {
                let nm = keys.memory.len();
                let nl = keys.left.len();
                dm.add_rows(keys.memory.start, &full.slice_rows(0..nm));
                dc.add_rows(keys.left.start, &full.slice_rows(nm..nm + nl));
                dc.add_rows(keys.center.start, &full.slice_rows(nm + nl..nm + nl + c));
                dr.add_rows(
                    keys.right.start,
                    &full.slice_rows(nm + nl + c..nm + nl + c + r),
                );
            };
        scatter(&mut dkm, &mut dkc, &mut dkr, &g.dk);
        scatter(&mut dvm, &mut dvc, &mut dvr, &g.dv);
    }

    // Projections back to the normed rows.
    let mut project_back =
        |n: &Matrix<T>, dq: &Matrix<T>, dk: &Matrix<T>, dv: &Matrix<T>| -> Result<Matrix<T>> {
            let (dnq, dwq) = matmul_vjp(n, &w.wq, dq)?;
            let (dnk, dwk) = matmul_vjp(n, &w.wk, dk)?;
            let (dnv, dwv) = matmul_vjp(n, &w.wv, dv)?;
            grads.wq.add_assign(&dwq);
            grads.wk.add_assign(&dwk);
            grads.wv.add_assign(&dwv);
            dnq.add(&dnk)?.add(&dnv)
        };
    dnc.add_assign(&project_back(&p.nc, &dqc, &dkc, &dvc)?);
    let dnr = project_back(&p.nr, &dqr, &dkr, &dvr)?;

    let d_memory = match &input.memory {
        Some(mem) => {
            let (dmk, dwk) = matmul_vjp(mem, &w.wk, &dkm)?;
            let (dmv, dwv) = matmul_vjp(mem, &w.wv, &dvm)?;
            grads.wk.add_assign(&dwk);
            grads.wv.add_assign(&dwv);
            Some(dmk.add(&dmv)?)
        }
        None => None,
    };

    let gc = layer_norm_vjp(&input.centers, &w.ln_attn.gain, eps, &dnc)?;
    let gr = layer_norm_vjp(&input.right, &w.ln_attn.gain, eps, &dnr)?;
    for g in [&gc, &gr] {
        accumulate(&mut grads.ln_attn.gain, &g.dgain);
        accumulate(&mut grads.ln_attn.bias, &g.dbias);
    }
    d_centers.add_assign(&gc.dx);
    d_right.add_assign(&gr.dx);

    Ok((
        LayerInput {
            centers: d_centers,
            right: d_right,
            memory: d_memory,
        },
        grads,
    ))
}

/// Per-layer streaming state: a ring of cached left-context keys/values
/// (capacity `L` frames) and the memory bank fed by the layer below.
#[derive(Debug, Clone)]
pub struct LayerStreamState<T> {
    left_capacity: usize,
    left_k: VecDeque<Vec<T>>,
    left_v: VecDeque<Vec<T>>,
    /// Layer inputs the cached rows were projected from.
    left_inputs: VecDeque<Vec<T>>,
    pub bank: MemoryBank<T>,
}

impl<T: Scalar> LayerStreamState<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            left_capacity: cfg.left_frames,
            left_k: VecDeque::with_capacity(cfg.left_frames),
            left_v: VecDeque::with_capacity(cfg.left_frames),
            left_inputs: VecDeque::with_capacity(cfg.left_frames),
            bank: MemoryBank::new(cfg.memory_size),
        }
    }

    pub fn cache_len(&self) -> usize {
        self.left_k.len()
    }

    /// Cached `(input row, key row, value row)` triples, oldest first.
    pub fn cached_rows(&self) -> impl Iterator<Item = (&[T], &[T], &[T])> {
        self.left_inputs
            .iter()
            .zip(&self.left_k)
            .zip(&self.left_v)
            .map(|((x, k), v)| (x.as_slice(), k.as_slice(), v.as_slice()))
    }

    fn cache_matrices(&self, d: usize) -> (Matrix<T>, Matrix<T>) {
        let to_matrix = |rows: &VecDeque<Vec<T>>| {
            let mut m = Matrix::zeros(rows.len(), d);
            for (i, r) in rows.iter().enumerate() {
                m.row_mut(i).copy_from_slice(r);
            }
            m
        };
        (to_matrix(&self.left_k), to_matrix(&self.left_v))
    }

    fn push_left(&mut self, x: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) {
        if self.left_capacity == 0 {
            return;
        }
        for r in 0..x.rows() {
            if self.left_k.len() == self.left_capacity {
                self.left_k.pop_front();
                self.left_v.pop_front();
                self.left_inputs.pop_front();
            }
            self.left_k.push_back(k.row(r).to_vec());
            self.left_v.push_back(v.row(r).to_vec());
            self.left_inputs.push_back(x.row(r).to_vec());
        }
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub centers: Matrix<T>,
    pub right: Matrix<T>,
    pub memory: Option<Vec<T>>,
    pub attention: AttentionTrace<T>,
}

/// One segment of one Emformer layer in streaming mode. Left-context keys and
/// values come from `state`'s cache; afterwards this segment's center
/// keys/values are appended to it. The memory bank in `state` is read but
/// not updated; committing new vectors is the caller's job.
pub fn emformer_layer_stream_step<T: Scalar>(
    state: &mut LayerStreamState<T>,
    centers: &Matrix<T>,
    right: &Matrix<T>,
    w: &LayerWeights<T>,
    cfg: &ModelConfig,
) -> Result<StepOutput<T>> {
    let d = cfg.d_model;
    if centers.cols() != d || right.cols() != d || centers.rows() == 0 {
        return Err(Error::shape(
            "emformer_layer_stream_step",
            format!(
                "centers {:?}, right {:?}, d={d}",
                centers.shape(),
                right.shape()
            ),
        ));
    }
    if state.left_k.front().is_some_and(|r| r.len() != d) {
        return Err(Error::shape(
            "emformer_layer_stream_step",
            "cache width mismatch",
        ));
    }
    let eps = eps_of::<T>(cfg);
    let nc = w.ln_attn.apply(centers, eps)?;
    let nr = w.ln_attn.apply(right, eps)?;
    let kc = matmul(&nc, &w.wk)?;
    let vc = matmul(&nc, &w.wv)?;
    let kr = matmul(&nr, &w.wk)?;
    let vr = matmul(&nr, &w.wv)?;
    let q_frames = Matrix::vstack(&[&matmul(&nc, &w.wq)?, &matmul(&nr, &w.wq)?])?;
    let bank = state.bank.to_matrix(d);
    let k_mem = matmul(&bank, &w.wk)?;
    let v_mem = matmul(&bank, &w.wv)?;
    let (k_left, v_left) = state.cache_matrices(d);
    let q_summary = if cfg.has_memory() {
        let s = summary_vector(&nc)?;
        Some(matmul(&Matrix::row_vector(&s), &w.wq)?)
    } else {
        None
    };
    let a = attend(
        &q_frames,
        q_summary.as_ref(),
        &k_mem,
        &v_mem,
        &Matrix::vstack(&[&k_left, &kc, &kr])?,
        &Matrix::vstack(&[&v_left, &vc, &vr])?,
        &w.w_out,
        cfg.n_heads,
    )?;
    let (c, r) = (centers.rows(), right.rows());
    let zc = a.output.slice_rows(0..c).add(centers)?;
    let zr = a.output.slice_rows(c..c + r).add(right)?;
    let memory = q_summary.is_some().then(|| a.output.row(c + r).to_vec());
    state.push_left(centers, &kc, &vc);
    Ok(StepOutput {
        centers: ffn_block(&zc, w, eps)?,
        right: ffn_block(&zr, w, eps)?,
        memory,
        attention: a.trace,
    })
}

#[derive(Debug, Clone)]
pub struct AmTrfStepOutput<T> {
    pub left: Matrix<T>,
    pub centers: Matrix<T>,
    pub right: Matrix<T>,
    pub memory: Option<Vec<T>>,
    pub attention: AttentionTrace<T>,
}

/// One AM-TRF layer on one contextual segment `x = [left, centers, right]`
/// (row counts `left_len`, `center_len`, remainder). Every row is
/// normalized, projected and attended, including the left block. Memory
/// vectors enter keys/values without normalization. The returned memory
/// vector belongs in this same layer's bank for the next segment.
pub fn amtrf_layer_step<T: Scalar>(
    x: &Matrix<T>,
    left_len: usize,
    center_len: usize,
    bank: &MemoryBank<T>,
    w: &LayerWeights<T>,
    cfg: &ModelConfig,
) -> Result<AmTrfStepOutput<T>> {
    let d = cfg.d_model;
    if x.cols() != d || center_len == 0 || left_len + center_len > x.rows() {
        return Err(Error::shape(
            "amtrf_layer_step",
            format!(
                "x {:?} with left {left_len}, center {center_len}, d={d}",
                x.shape()
            ),
        ));
    }
    let eps = eps_of::<T>(cfg);
    let xn = w.ln_attn.apply(x, eps)?;
    let q = matmul(&xn, &w.wq)?;
    let k = matmul(&xn, &w.wk)?;
    let v = matmul(&xn, &w.wv)?;
    let mem = bank.to_matrix(d);
    let k_mem = matmul(&mem, &w.wk)?;
    let v_mem = matmul(&mem, &w.wv)?;
    let center_rows = left_len..left_len + center_len;
    let q_summary = if cfg.has_memory() {
        let s = summary_vector(&xn.slice_rows(center_rows.clone()))?;
        Some(matmul(&Matrix::row_vector(&s), &w.wq)?)
    } else {
        None
    };
    let a = attend(
        &q,
        q_summary.as_ref(),
        &k_mem,
        &v_mem,
        &k,
        &v,
        &w.w_out,
        cfg.n_heads,
    )?;
    let n = x.rows();
    let z = a.output.slice_rows(0..n).add(x)?;
    let memory = q_summary.is_some().then(|| a.output.row(n).to_vec());
    let y = ffn_block(&z, w, eps)?;
    Ok(AmTrfStepOutput {
        left: y.slice_rows(0..left_len),
        centers: y.slice_rows(center_rows),
        right: y.slice_rows(left_len + center_len..n),
        memory,
        attention: a.trace,
    })
}
