//! Layer stacks: initialization, the parallel training-mode forward and its
//! reverse pass, streaming sessions, and the sequential AM-TRF baseline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layer::{
    amtrf_layer_step, emformer_layer_parallel, emformer_layer_parallel_vjp,
    emformer_layer_stream_step, AttentionTrace, LayerInput, LayerStreamState, LayerWeights,
    MemoryBank, NormParams,
};
use crate::layout::{
    build_masks, segment_frames, segment_utterance, AttentionMaskSet, SegmentLayout,
};
use crate::numerics::{mean_rows, mean_rows_vjp, Matrix, Scalar};

/// Where layer 0 takes its memory bank from, since it has no layer below.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layer0Memory {
    /// Means of the raw input center blocks of previous segments.
    #[default]
    CenterMean,
    /// No memory keys in layer 0.
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel<T> {
    pub cfg: ModelConfig,
    pub layers: Vec<LayerWeights<T>>,
    pub init_seed: u64,
    pub layer0_memory: Layer0Memory,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Generator for one tensor: ChaCha8 keyed by `(seed, layer, name)` through
/// SplitMix64, so tensors do not depend on construction order.
pub fn tensor_rng(seed: u64, layer: usize, name: &str) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(seed) ^ splitmix64(layer as u64 + 1) ^ fnv1a(name.as_bytes()));
    ChaCha8Rng::seed_from_u64(key)
}

fn glorot<T: Scalar>(rows: usize, cols: usize, seed: u64, layer: usize, name: &str) -> Matrix<T> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let mut rng = tensor_rng(seed, layer, name);
    Matrix::from_fn(rows, cols, |_, _| T::from_f64_lossy(rng.gen_range(-a..a)))
}

impl<T: Scalar> EncoderModel<T> {
    /// Glorot-uniform projections and FFN weights, zero biases, unit
    /// layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (d, f) = (cfg.d_model, cfg.ffn_dim);
        let layers = (0..cfg.n_layers)
            .map(|n| LayerWeights {
                wq: glorot(d, d, seed, n, "wq"),
                wk: glorot(d, d, seed, n, "wk"),
                wv: glorot(d, d, seed, n, "wv"),
                w_out: glorot(d, d, seed, n, "w_out"),
                w1: glorot(d, f, seed, n, "w1"),
                b1: vec![T::zero(); f],
                w2: glorot(f, d, seed, n, "w2"),
                b2: vec![T::zero(); d],
                ln_attn: NormParams::identity(d),
                ln_ffn: NormParams::identity(d),
                ln_out: NormParams::identity(d),
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            layers,
            init_seed: seed,
            layer0_memory: Layer0Memory::default(),
        })
    }

    pub fn with_layer0_memory(mut self, source: Layer0Memory) -> Self {
        self.layer0_memory = source;
        self
    }

    pub fn d_model(&self) -> usize {
        self.cfg.d_model
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.tensors().iter().map(|(_, t)| t.len()).sum::<usize>())
            .sum()
    }

    fn check_frames(&self, frames: &Matrix<T>) -> Result<()> {
        if frames.rows() == 0 {
            return Err(Error::EmptyInput("no input frames".into()));
        }
        if frames.cols() != self.cfg.d_model {
            return Err(Error::shape(
                "encoder",
                format!(
                    "input width {} != d_model {}",
                    frames.cols(),
                    self.cfg.d_model
                ),
            ));
        }
        Ok(())
    }

    fn raw_center_means(&self, frames: &Matrix<T>, layout: &SegmentLayout) -> Result<Matrix<T>> {
        let mut m = Matrix::zeros(layout.n_segments(), self.cfg.d_model);
        for s in &layout.segments {
            m.row_mut(s.index)
                .copy_from_slice(&mean_rows(&frames.slice_rows(s.center.clone()))?);
        }
        Ok(m)
    }

    fn first_layer_input(
        &self,
        frames: &Matrix<T>,
        layout: &SegmentLayout,
    ) -> Result<LayerInput<T>> {
        let memory = if self.cfg.has_memory() {
            Some(match self.layer0_memory {
                Layer0Memory::CenterMean => self.raw_center_means(frames, layout)?,
                Layer0Memory::Empty => Matrix::zeros(layout.n_segments(), self.cfg.d_model),
            })
        } else {
            None
        };
        Ok(LayerInput {
            centers: frames.clone(),
            right: frames.gather_rows(&layout.hardcopy_sources()),
            memory,
        })
    }

    fn mask_sets(&self, layout: &SegmentLayout) -> (AttentionMaskSet, AttentionMaskSet) {
        let masks = build_masks(layout, &self.cfg);
        let mut first = masks.clone();
        if self.layer0_memory == Layer0Memory::Empty {
            for s in &mut first.segments {
                s.memory = 0..0;
            }
        }
        (first, masks)
    }

    fn run_parallel(&self, frames: &Matrix<T>, keep: bool) -> Result<(Matrix<T>, ForwardTrace<T>)> {
        self.check_frames(frames)?;
        let layout = segment_utterance(frames.rows(), &self.cfg)?;
        let (first_masks, masks) = self.mask_sets(&layout);
        let mut x = self.first_layer_input(frames, &layout)?;
        let mut trace = ForwardTrace {
            layout: layout.clone(),
            layer_inputs: Vec::new(),
            attention: Vec::new(),
        };
        for (n, w) in self.layers.iter().enumerate() {
            let m = if n == 0 { &first_masks } else { &masks };
            let mut att = Vec::new();
            let out =
                emformer_layer_parallel(&x, w, &layout, m, &self.cfg, keep.then_some(&mut att))?;
            if keep {
                trace.layer_inputs.push(x);
                trace.attention.push(att);
            }
            x = out;
        }
        Ok((x.centers, trace))
    }

    /// Training-mode forward over a whole utterance. Returns the last layer's
    /// center frames; right-context copies are dropped.
    pub fn forward_parallel(&self, frames: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.run_parallel(frames, false)?.0)
    }

    /// [`forward_parallel`](Self::forward_parallel) plus per-layer inputs and
    /// attention probabilities.
    pub fn forward_parallel_traced(
        &self,
        frames: &Matrix<T>,
    ) -> Result<(Matrix<T>, ForwardTrace<T>)> {
        self.run_parallel(frames, true)
    }

    /// Reverse pass of `⟨forward_parallel(frames), out_grad⟩`. Gradients of
    /// hard-copied frames and of layer-0 memory means are summed back into
    /// the original input frames.
    pub fn forward_backward(
        &self,
        frames: &Matrix<T>,
        out_grad: &Matrix<T>,
    ) -> Result<Gradients<T>> {
        if out_grad.shape() != frames.shape() {
            return Err(Error::shape(
                "forward_backward",
                format!(
                    "out_grad {:?} vs frames {:?}",
                    out_grad.shape(),
                    frames.shape()
                ),
            ));
        }
        let (_, trace) = self.forward_parallel_traced(frames)?;
        let layout = &trace.layout;
        let (first_masks, masks) = self.mask_sets(layout);
        let d = self.cfg.d_model;
        let mut d_out = LayerInput {
            centers: out_grad.clone(),
            right: Matrix::zeros(layout.hardcopy_total, d),
            memory: self
                .cfg
                .has_memory()
                .then(|| Matrix::zeros(layout.n_segments(), d)),
        };
        let mut weights = vec![LayerWeights::zeros(d, self.cfg.ffn_dim); self.layers.len()];
        for n in (0..self.layers.len()).rev() {
            let m = if n == 0 { &first_masks } else { &masks };
            let (d_in, g) = emformer_layer_parallel_vjp(
                &trace.layer_inputs[n],
                &self.layers[n],
                layout,
                m,
                &self.cfg,
                &d_out,
            )?;
            weights[n] = g;
            d_out = d_in;
        }
        let mut input = d_out.centers;
        for (h, src) in layout.hardcopy_sources().into_iter().enumerate() {
            for (a, &b) in input.row_mut(src).iter_mut().zip(d_out.right.row(h)) {
                *a = *a + b;
            }
        }
        if let (Some(dm), Layer0Memory::CenterMean) = (&d_out.memory, self.layer0_memory) {
            for s in &layout.segments {
                input.add_rows(
                    s.center.start,
                    &mean_rows_vjp(s.center_len(), dm.row(s.index)),
                );
            }
        }
        Ok(Gradients { input, weights })
    }

    pub fn stream(&self) -> StreamSession<'_, T> {
        StreamSession::new(self)
    }

    /// Streams `frames` through a fresh session in `C + R` chunks with the
    /// look-ahead re-sent as the next chunk's centers, then finishes.
    pub fn forward_stream(&self, frames: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_frames(frames)?;
        let mut session = self.stream();
        let (c, r) = (self.cfg.center_frames, self.cfg.right_frames);
        let mut outputs = Vec::new();
        let mut pos = 0;
        while pos + c + r <= frames.rows() {
            outputs.push(session.step(&frames.slice_rows(pos..pos + c + r))?);
            pos += c;
        }
        outputs.push(session.finish(&frames.slice_rows(pos..frames.rows()))?);
        Matrix::vstack(&outputs.iter().collect::<Vec<_>>())
    }

    /// Sequential AM-TRF forward: every segment is cut from the input with
    /// its real left context, pushed through all layers, and each layer
    /// carries its own memory bank to the next segment.
    pub fn amtrf_forward_sequential(&self, frames: &Matrix<T>) -> Result<Matrix<T>> {
        self.amtrf_run(frames, None)
    }

    /// As [`amtrf_forward_sequential`](Self::amtrf_forward_sequential),
    /// recording `[segment][layer]` attention probabilities.
    pub fn amtrf_forward_traced(&self, frames: &Matrix<T>) -> Result<(Matrix<T>, AttentionLog<T>)> {
        let mut trace = Vec::new();
        let out = self.amtrf_run(frames, Some(&mut trace))?;
        Ok((out, trace))
    }

    fn amtrf_run(
        &self,
        frames: &Matrix<T>,
        mut trace: Option<&mut AttentionLog<T>>,
    ) -> Result<Matrix<T>> {
        self.check_frames(frames)?;
        let layout = segment_utterance(frames.rows(), &self.cfg)?;
        let mut banks: Vec<MemoryBank<T>> = (0..self.layers.len())
            .map(|_| MemoryBank::new(self.cfg.memory_size))
            .collect();
        let mut out = Matrix::zeros(frames.rows(), self.cfg.d_model);
        for seg in &layout.segments {
            let start = seg.center.start;
            let left_len = self.cfg.left_frames.min(start);
            let mut x = frames.slice_rows(start - left_len..seg.right_source.end);
            let mut seg_trace = Vec::new();
            for (w, bank) in self.layers.iter().zip(banks.iter_mut()) {
                let y = amtrf_layer_step(&x, left_len, seg.center_len(), bank, w, &self.cfg)?;
                if let Some(m) = y.memory {
                    bank.push(seg.index, m);
                }
                x = Matrix::vstack(&[&y.left, &y.centers, &y.right])?;
                seg_trace.push(y.attention);
            }
            out.set_rows(start, &x.slice_rows(left_len..left_len + seg.center_len()));
            if let Some(t) = trace.as_deref_mut() {
                t.push(seg_trace);
            }
        }
        Ok(out)
    }
}

pub fn init_model<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<EncoderModel<T>> {
    EncoderModel::init(cfg, seed)
}

/// Concatenates each run of `stride` consecutive rows into one row; trailing
/// rows that do not fill a run are dropped.
pub fn stack_frames<T: Scalar>(raw: &Matrix<T>, stride: usize) -> Result<Matrix<T>> {
    if stride == 0 {
        return Err(Error::shape("stack_frames", "stride must be at least 1"));
    }
    let rows = raw.rows() / stride;
    if rows == 0 {
        return Err(Error::EmptyInput(format!(
            "{} frames cannot fill a stride of {stride}",
            raw.rows()
        )));
    }
    let used = rows * stride * raw.cols();
    Matrix::from_vec(rows, stride * raw.cols(), raw.data()[..used].to_vec())
}

/// Attention probabilities indexed `[segment][layer]`.
pub type AttentionLog<T> = Vec<Vec<AttentionTrace<T>>>;

#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub layout: SegmentLayout,
    /// Input triple of every layer.
    pub layer_inputs: Vec<LayerInput<T>>,
    /// `[layer][segment]` attention probabilities.
    pub attention: Vec<Vec<AttentionTrace<T>>>,
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub input: Matrix<T>,
    pub weights: Vec<LayerWeights<T>>,
}

/// Incremental inference over one utterance.
///
/// Per layer the session keeps the left-context key/value ring and the
/// memory bank fed by the layer below. The memory vector layer `n` emits
/// for segment `i` is committed to layer `n + 1`'s bank only after layer
/// `n + 1` has finished segment `i`.
#[derive(Debug)]
pub struct StreamSession<'m, T> {
    model: &'m EncoderModel<T>,
    layers: Vec<LayerStreamState<T>>,
    segment: usize,
    finished: bool,
    carry: Matrix<T>,
    trace: Option<AttentionLog<T>>,
}

impl<'m, T: Scalar> StreamSession<'m, T> {
    pub fn new(model: &'m EncoderModel<T>) -> Self {
        Self {
            model,
            layers: (0..model.layers.len())
                .map(|_| LayerStreamState::new(&model.cfg))
                .collect(),
            segment: 0,
            finished: false,
            carry: Matrix::zeros(0, model.cfg.d_model),
            trace: None,
        }
    }

    /// Records `[segment][layer]` attention probabilities from now on.
    pub fn record_attention(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn attention_trace(&self) -> Option<&[Vec<AttentionTrace<T>>]> {
        self.trace.as_deref()
    }

    pub fn segments_done(&self) -> usize {
        self.segment
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn layer_states(&self) -> &[LayerStreamState<T>] {
        &self.layers
    }

    fn run_segment(&mut self, centers: Matrix<T>, right: Matrix<T>) -> Result<Matrix<T>> {
        let cfg = &self.model.cfg;
        let mut pending = match (cfg.has_memory(), self.model.layer0_memory) {
            (true, Layer0Memory::CenterMean) => Some(mean_rows(&centers)?),
            _ => None,
        };
        let mut c = centers;
        let mut r = right;
        let mut seg_trace = Vec::new();
        for (state, w) in self.layers.iter_mut().zip(&self.model.layers) {
            let out = emformer_layer_stream_step(state, &c, &r, w, cfg)?;
            if let Some(v) = pending.take() {
                state.bank.push(self.segment, v);
            }
            pending = out.memory;
            c = out.centers;
            r = out.right;
            seg_trace.push(out.attention);
        }
        if let Some(t) = self.trace.as_mut() {
            t.push(seg_trace);
        }
        self.segment += 1;
        Ok(c)
    }

    fn check_open(&self) -> Result<()> {
        if self.finished {
            return Err(Error::Stream("session already finished".into()));
        }
        Ok(())
    }

    /// Processes one segment. `chunk` holds the next `C` center frames
    /// followed by the `R` look-ahead frames; the caller re-sends those
    /// look-ahead frames at the start of the next chunk.
    pub fn step(&mut self, chunk: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_open()?;
        let cfg = &self.model.cfg;
        let (c, r) = (cfg.center_frames, cfg.right_frames);
        if chunk.rows() != c + r || chunk.cols() != cfg.d_model {
            return Err(Error::Stream(format!(
                "chunk {:?}, expected {}x{}",
                chunk.shape(),
                c + r,
                cfg.d_model
            )));
        }
        if !self.carry.is_empty() {
            return Err(Error::Stream(
                "step called while push() has buffered frames".into(),
            ));
        }
        self.run_segment(chunk.slice_rows(0..c), chunk.slice_rows(c..c + r))
    }

    /// Processes every remaining frame (buffered frames first, then
    /// `trailing`) as final segments of at most `C` frames whose look-ahead
    /// is whatever follows them. No padding is added.
    pub fn finish(&mut self, trailing: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_open()?;
        let d = self.model.cfg.d_model;
        if trailing.cols() != d && !trailing.is_empty() {
            return Err(Error::Stream(format!(
                "trailing width {} != {d}",
                trailing.cols()
            )));
        }
        self.finished = true;
        let carry = std::mem::replace(&mut self.carry, Matrix::zeros(0, d));
        let rest = Matrix::vstack(&[&carry, trailing])?;
        if rest.is_empty() {
            return Ok(Matrix::zeros(0, d));
        }
        let cfg = &self.model.cfg;
        let layout = segment_frames(rest.rows(), cfg.center_frames, cfg.right_frames)?;
        let mut outputs = Vec::with_capacity(layout.n_segments());
        for s in &layout.segments {
            outputs.push(self.run_segment(
                rest.slice_rows(s.center.clone()),
                rest.slice_rows(s.right_source.clone()),
            )?);
        }
        Matrix::vstack(&outputs.iter().collect::<Vec<_>>())
    }

    /// Buffers frames and emits output for every segment whose look-ahead is
    /// complete.
    pub fn push(&mut self, frames: &Matrix<T>) -> Result<Matrix<T>> {
        self.check_open()?;
        let cfg = &self.model.cfg;
        let d = cfg.d_model;
        if frames.cols() != d && !frames.is_empty() {
            return Err(Error::Stream(format!(
                "frame width {} != {d}",
                frames.cols()
            )));
        }
        let (c, r) = (cfg.center_frames, cfg.right_frames);
        let mut buf = Matrix::vstack(&[&self.carry, frames])?;
        let mut outputs = Vec::new();
        let mut pos = 0;
        while pos + c + r <= buf.rows() {
            outputs.push(self.run_segment(
                buf.slice_rows(pos..pos + c),
                buf.slice_rows(pos + c..pos + c + r),
            )?);
            pos += c;
        }
        buf = buf.slice_rows(pos..buf.rows());
        self.carry = buf;
        if outputs.is_empty() {
            return Ok(Matrix::zeros(0, d));
        }
        Matrix::vstack(&outputs.iter().collect::<Vec<_>>())
    }
}
