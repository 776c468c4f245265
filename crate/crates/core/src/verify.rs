//! Executable checks over a model and an input: mode equivalence, future
//! leakage, cache consistency, finite-difference gradients, summary masking,
//! baseline agreement, and FLOP/throughput measurement.
//!
//! Every check returns a [`VerifyReport`]; failures are report contents,
//! never errors.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{flops_per_segment, Arch, ModelConfig};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::layer::{amtrf_layer_step, MemoryBank, TENSOR_NAMES};
use crate::layout::segment_utterance;
use crate::numerics::{count_flops, layer_norm, matmul, DType, Matrix, Scalar};

/// Largest model the finite-difference check accepts.
pub const MAX_FD_PARAMETERS: usize = 50_000;
/// Lower bound on the denominator of the gradient relative error.
pub const GRAD_REL_FLOOR: f64 = 1e-3;
pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const MIN_GRAD_COORDS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub name: String,
    pub pass: bool,
    /// Worst-case value of the check's metric.
    pub metric: f64,
    pub tolerance: f64,
    pub details: Value,
}

impl VerifyReport {
    fn within(name: &str, metric: f64, tolerance: f64, details: Value) -> Self {
        Self {
            name: name.into(),
            pass: metric <= tolerance,
            metric,
            tolerance,
            details,
        }
    }

    fn failed(name: &str, tolerance: f64, err: &Error) -> Self {
        Self {
            name: name.into(),
            pass: false,
            metric: f64::INFINITY,
            tolerance,
            details: json!({ "error": err.to_string() }),
        }
    }

    fn skipped(name: &str, reason: &str) -> Self {
        Self {
            name: name.into(),
            pass: true,
            metric: 0.0,
            tolerance: 0.0,
            details: json!({ "skipped": reason }),
        }
    }

    /// JSON value with every object's keys in sorted order. Non-finite
    /// metrics serialize as `null`.
    pub fn to_json(&self) -> Value {
        // serde_json objects are BTreeMap-backed, so keys come out sorted.
        serde_json::to_value(self).expect("report serializes")
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}: metric {:e} (tolerance {:e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.metric,
            self.tolerance
        )
    }
}

/// Uniform `[-1, 1)` frames from a seeded ChaCha8 stream.
pub fn random_frames<T: Scalar>(t: usize, d: usize, seed: u64) -> Matrix<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(t, d, |_, _| T::from_f64_lossy(rng.gen_range(-1.0..1.0)))
}

/// Default equivalence tolerance for a dtype.
pub fn equivalence_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F32 => 1e-4,
        DType::F64 => 1e-9,
    }
}

fn worst_row<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> (f64, usize) {
    let mut worst = (0.0, 0);
    for r in 0..a.rows() {
        for (x, y) in a.row(r).iter().zip(b.row(r)) {
            let d = (x.as_f64() - y.as_f64()).abs();
            if d > worst.0 || d.is_nan() {
                worst = (d, r);
            }
        }
    }
    worst
}

/// Runs the parallel and streaming forwards and reports the largest
/// absolute difference over all output frames.
pub fn check_stream_parallel_equivalence<T: Scalar>(
    model: &EncoderModel<T>,
    frames: &Matrix<T>,
    tol: f64,
) -> VerifyReport {
    const NAME: &str = "stream_parallel_equivalence";
    let run = || -> Result<VerifyReport> {
        let start = Instant::now();
        let par = model.forward_parallel(frames)?;
        let t_par = start.elapsed().as_secs_f64();
        let start = Instant::now();
        let stream = model.forward_stream(frames)?;
        let t_stream = start.elapsed().as_secs_f64();
        if par.shape() != stream.shape() {
            return Err(Error::shape(
                NAME,
                format!("parallel {:?} vs stream {:?}", par.shape(), stream.shape()),
            ));
        }
        let (diff, frame) = worst_row(&par, &stream);
        let layout = segment_utterance(frames.rows(), &model.cfg)?;
        Ok(VerifyReport::within(
            NAME,
            diff,
            tol,
            json!({
                "frames": frames.rows(),
                "segments": layout.n_segments(),
                "bitwise_equal": par.bitwise_eq(&stream),
                "worst": {
                    "layer": model.layers.len().saturating_sub(1),
                    "segment": layout.segment_of(frame),
                    "frame": frame,
                },
                "wall_seconds": { "parallel": t_par, "stream": t_stream },
            }),
        ))
    };
    run().unwrap_or_else(|e| VerifyReport::failed(NAME, tol, &e))
}

/// Perturbs random input frames `u` and checks that every output frame whose
/// look-ahead horizon ends before `u` is bitwise unchanged. The metric is
/// the number of violating `(t, u)` pairs.
pub fn check_future_leak<T: Scalar>(
    model: &EncoderModel<T>,
    frames: &Matrix<T>,
    n_probes: usize,
    seed: u64,
) -> VerifyReport {
    const NAME: &str = "future_leak";
    let run = || -> Result<VerifyReport> {
        if n_probes == 0 {
            return Err(Error::Stream("n_probes must be at least 1".into()));
        }
        let layout = segment_utterance(frames.rows(), &model.cfg)?;
        let horizon: Vec<usize> = (0..frames.rows())
            .map(|t| layout.segments[layout.segment_of(t)].horizon())
            .collect();
        let base = model.forward_parallel(frames)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut violations = 0usize;
        let mut first: Option<(usize, usize)> = None;
        let mut protected = 0usize;
        let mut visible = 0usize;
        for _ in 0..n_probes {
            let u = rng.gen_range(0..frames.rows());
            let mut x = frames.clone();
            for v in x.row_mut(u) {
                let delta = rng.gen_range(0.5..1.5) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
                *v = *v + T::from_f64_lossy(delta);
            }
            let y = model.forward_parallel(&x)?;
            let mut changed = false;
            for (t, &h) in horizon.iter().enumerate() {
                let same = y
                    .row(t)
                    .iter()
                    .zip(base.row(t))
                    .all(|(a, b)| a.bits() == b.bits());
                changed |= !same;
                if h < u {
                    protected += 1;
                    if !same {
                        violations += 1;
                        first.get_or_insert((t, u));
                    }
                }
            }
            visible += usize::from(changed);
        }
        Ok(VerifyReport::within(
            NAME,
            violations as f64,
            0.0,
            json!({
                "probes": n_probes,
                "protected_outputs_checked": protected,
                "probes_with_visible_change": visible,
                "first_violation": first.map(|(t, u)| json!({
                    "frame": t,
                    "segment": layout.segment_of(t),
                    "perturbed_frame": u,
                })),
            }),
        ))
    };
    run().unwrap_or_else(|e| VerifyReport::failed(NAME, 0.0, &e))
}

/// Streams the input and, after every call, compares each layer's cached
/// left-context key/value rows with a fresh projection of the stored layer
/// input. Requires bitwise equality; the metric counts mismatching rows.
/// Stored inputs are also compared against the parallel-mode layer inputs.
pub fn check_cache_consistency<T: Scalar>(
    model: &EncoderModel<T>,
    frames: &Matrix<T>,
) -> VerifyReport {
    const NAME: &str = "cache_consistency";
    let run = || -> Result<VerifyReport> {
        let cfg = &model.cfg;
        let (_, trace) = model.forward_parallel_traced(frames)?;
        let (c, r) = (cfg.center_frames, cfg.right_frames);
        let eps = T::from_f64_lossy(cfg.eps);
        let mut session = model.stream();
        let mut mismatches = 0usize;
        let mut checked = 0usize;
        let mut input_diff = 0.0f64;
        let mut first: Option<Value> = None;
        let mut inspect = |session: &crate::encoder::StreamSession<'_, T>,
                           done: usize|
         -> Result<()> {
            for (n, (state, w)) in session.layer_states().iter().zip(&model.layers).enumerate() {
                let len = state.cache_len();
                for (j, (x, k, v)) in state.cached_rows().enumerate() {
                    let frame = done - len + j;
                    let xn = layer_norm(
                        &Matrix::row_vector(x),
                        &w.ln_attn.gain,
                        &w.ln_attn.bias,
                        eps,
                    )?;
                    let k2 = matmul(&xn, &w.wk)?;
                    let v2 = matmul(&xn, &w.wv)?;
                    let eq = |a: &[T], b: &[T]| a.iter().zip(b).all(|(p, q)| p.bits() == q.bits());
                    checked += 1;
                    if !eq(k, k2.row(0)) || !eq(v, v2.row(0)) {
                        mismatches += 1;
                        first.get_or_insert_with(|| {
                            json!({ "layer": n, "segment": session.segments_done() - 1, "frame": frame })
                        });
                    }
                    for (a, b) in x.iter().zip(trace.layer_inputs[n].centers.row(frame)) {
                        input_diff = input_diff.max((a.as_f64() - b.as_f64()).abs());
                    }
                }
            }
            Ok(())
        };
        let mut pos = 0;
        while pos + c + r <= frames.rows() {
            session.step(&frames.slice_rows(pos..pos + c + r))?;
            pos += c;
            inspect(&session, pos)?;
        }
        session.finish(&frames.slice_rows(pos..frames.rows()))?;
        inspect(&session, frames.rows())?;
        Ok(VerifyReport::within(
            NAME,
            mismatches as f64,
            0.0,
            json!({
                "rows_checked": checked,
                "first_mismatch": first,
                "stored_input_max_abs_diff_vs_parallel": input_diff,
            }),
        ))
    };
    run().unwrap_or_else(|e| VerifyReport::failed(NAME, 0.0, &e))
}

/// Central finite differences of `⟨forward_parallel(x), G⟩` against the
/// analytic reverse pass, for a random cotangent `G`. Coordinates are drawn
/// round-robin over every layer and tensor class plus the input; the metric
/// is the largest `|a - n| / max(|a|, |n|, GRAD_REL_FLOOR)`.
pub fn check_gradients(
    model: &EncoderModel<f64>,
    frames: &Matrix<f64>,
    h: f64,
    n_coords: usize,
    seed: u64,
) -> VerifyReport {
    const NAME: &str = "gradients";
    let run = || -> Result<VerifyReport> {
        let params = model.parameter_count();
        if params > MAX_FD_PARAMETERS {
            return Err(Error::InvalidConfig(vec![format!(
                "{params} parameters exceed the finite-difference limit {MAX_FD_PARAMETERS}"
            )]));
        }
        if h.is_nan() || h <= 0.0 {
            return Err(Error::InvalidConfig(vec!["step h must be positive".into()]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Matrix::from_fn(frames.rows(), frames.cols(), |_, _| {
            rng.gen_range(-1.0..1.0)
        });
        let start = Instant::now();
        let grads = model.forward_backward(frames, &g)?;
        let t_backward = start.elapsed().as_secs_f64();
        let loss = |m: &EncoderModel<f64>, x: &Matrix<f64>| -> Result<f64> {
            let y = m.forward_parallel(x)?;
            Ok(y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum())
        };

        // (layer, tensor) slots; `None` stands for the input frames.
        let mut slots: Vec<Option<(usize, usize)>> = Vec::new();
        for n in 0..model.layers.len() {
            for t in 0..TENSOR_NAMES.len() {
                slots.push(Some((n, t)));
            }
        }
        slots.push(None);
        let mut worst = 0.0f64;
        let mut worst_at = Value::Null;
        let mut per_class = std::collections::BTreeMap::<String, usize>::new();
        let total = n_coords.max(slots.len());
        let mut model_p = model.clone();
        let mut frames_p = frames.clone();
        for k in 0..total {
            let slot = slots[k % slots.len()];
            let (analytic, numeric, label) = match slot {
                Some((n, t)) => {
                    let len = model.layers[n].tensors()[t].1.len();
                    let idx = rng.gen_range(0..len);
                    let orig = model.layers[n].tensors()[t].1[idx];
                    let mut eval = |v: f64| -> Result<f64> {
                        model_p.layers[n].tensors_mut()[t].1[idx] = v;
                        loss(&model_p, frames)
                    };
                    let plus = eval(orig + h)?;
                    let minus = eval(orig - h)?;
                    eval(orig)?;
                    let a = grads.weights[n].tensors()[t].1[idx];
                    (
                        a,
                        (plus - minus) / (2.0 * h),
                        json!({ "layer": n, "tensor": TENSOR_NAMES[t], "index": idx }),
                    )
                }
                None => {
                    let idx = rng.gen_range(0..frames.data().len());
                    let orig = frames.data()[idx];
                    let mut eval = |v: f64| -> Result<f64> {
                        frames_p.data_mut()[idx] = v;
                        loss(model, &frames_p)
                    };
                    let plus = eval(orig + h)?;
                    let minus = eval(orig - h)?;
                    eval(orig)?;
                    let a = grads.input.data()[idx];
                    (
                        a,
                        (plus - minus) / (2.0 * h),
                        json!({ "tensor": "input", "frame": idx / frames.cols(), "index": idx }),
                    )
                }
            };
            let class = match slot {
                Some((_, t)) => TENSOR_NAMES[t].to_string(),
                None => "input".to_string(),
            };
            *per_class.entry(class).or_default() += 1;
            let err =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_REL_FLOOR);
            if err > worst || err.is_nan() {
                worst = err;
                worst_at = json!({ "at": label, "analytic": analytic, "numeric": numeric });
            }
        }
        Ok(VerifyReport::within(
            NAME,
            worst,
            GRAD_TOLERANCE,
            json!({
                "coordinates": total,
                "per_class": per_class,
                "h": h,
                "rel_err_floor": GRAD_REL_FLOOR,
                "parameters": params,
                "worst": worst_at,
                "wall_seconds": { "backward": t_backward },
            }),
        ))
    };
    run().unwrap_or_else(|e| VerifyReport::failed(NAME, GRAD_TOLERANCE, &e))
}

/// Largest attention weight from a summary query to a memory key, over
/// every layer and segment of the parallel Emformer forward, the streaming
/// Emformer forward, and the AM-TRF forward. Must be exactly zero.
pub fn check_summary_masking<T: Scalar>(
    model: &EncoderModel<T>,
    frames: &Matrix<T>,
) -> VerifyReport {
    const NAME: &str = "summary_memory_mask";
    let run = || -> Result<VerifyReport> {
        let mut worst = 0.0f64;
        let mut weights = 0usize;
        let mut worst_at = Value::Null;
        let mut scan =
            |arch: &str, layer: usize, segment: usize, t: &crate::layer::AttentionTrace<T>| {
                for p in t.summary_to_memory() {
                    weights += 1;
                    let v = p.as_f64().abs();
                    if v > worst || v.is_nan() {
                        worst = v;
                        worst_at = json!({ "arch": arch, "layer": layer, "segment": segment });
                    }
                }
            };
        let (_, trace) = model.forward_parallel_traced(frames)?;
        for (n, segs) in trace.attention.iter().enumerate() {
            for (i, t) in segs.iter().enumerate() {
                scan("emformer_parallel", n, i, t);
            }
        }
        let mut session = model.stream();
        session.record_attention();
        session.finish(frames)?;
        for (i, layers) in session.attention_trace().unwrap_or(&[]).iter().enumerate() {
            for (n, t) in layers.iter().enumerate() {
                scan("emformer_stream", n, i, t);
            }
        }
        let (_, amtrf) = model.amtrf_forward_traced(frames)?;
        for (i, layers) in amtrf.iter().enumerate() {
            for (n, t) in layers.iter().enumerate() {
                scan("amtrf", n, i, t);
            }
        }
        Ok(VerifyReport::within(
            NAME,
            worst,
            0.0,
            json!({ "weights_inspected": weights, "worst": worst_at }),
        ))
    };
    run().unwrap_or_else(|e| VerifyReport::failed(NAME, 0.0, &e))
}

/// With no memory bank, feeds every AM-TRF layer the same history the
/// Emformer layer saw (its real left-context rows, centers and right-context
/// copies) and compares center and right-context outputs.
pub fn check_baseline_agreement<T: Scalar>(
    model: &EncoderModel<T>,
    frames: &Matrix<T>,
    tol: f64,
) -> VerifyReport {
    const NAME: &str = "amtrf_emformer_agreement";
    let run = || -> Result<VerifyReport> {
        let cfg = &model.cfg;
        if cfg.has_memory() {
            return Err(Error::InvalidConfig(vec![
                "agreement requires memory_size = 0".into(),
            ]));
        }
        let (out, trace) = model.forward_parallel_traced(frames)?;
        let layout = &trace.layout;
        let empty = MemoryBank::new(0);
        let mut worst = (0.0f64, Value::Null);
        for (n, w) in model.layers.iter().enumerate() {
            let input = &trace.layer_inputs[n];
            let (next_c, next_r) = match trace.layer_inputs.get(n + 1) {
                Some(next) => (next.centers.clone(), Some(next.right.clone())),
                None => (out.clone(), None),
            };
            for s in &layout.segments {
                let start = s.center.start;
                let left = cfg.left_frames.min(start);
                let x = Matrix::vstack(&[
                    &input.centers.slice_rows(start - left..s.center.end),
                    &input.right.slice_rows(s.right.clone()),
                ])?;
                let y = amtrf_layer_step(&x, left, s.center_len(), &empty, w, cfg)?;
                let mut compare = |a: &Matrix<T>, b: &Matrix<T>, part: &str| {
                    let (d, row) = worst_row(a, b);
                    if d > worst.0 || d.is_nan() {
                        worst = (
                            d,
                            json!({ "layer": n, "segment": s.index, "part": part, "row": row }),
                        );
                    }
                };
                compare(&y.centers, &next_c.slice_rows(s.center.clone()), "center");
                if let Some(r) = &next_r {
                    compare(&y.right, &r.slice_rows(s.right.clone()), "right");
                }
            }
        }
        Ok(VerifyReport::within(
            NAME,
            worst.0,
            tol,
            json!({ "worst": worst.1 }),
        ))
    };
    run().unwrap_or_else(|e| VerifyReport::failed(NAME, tol, &e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThroughputMode {
    Parallel,
    AmTrfSequential,
    EmformerStream,
}

impl ThroughputMode {
    pub const ALL: [ThroughputMode; 3] =
        [Self::Parallel, Self::AmTrfSequential, Self::EmformerStream];

    pub fn name(self) -> &'static str {
        match self {
            Self::Parallel => "parallel",
            Self::AmTrfSequential => "amtrf_sequential",
            Self::EmformerStream => "emformer_stream",
        }
    }
}

impl FromStr for ThroughputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown mode {s:?}")))
    }
}

fn single_thread_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| Error::Stream(format!("thread pool: {e}")))
}

/// Median wall time per frame of one forward mode over `repeats` runs on a
/// single thread, alongside the counted and the analytic FLOPs. The metric
/// is the median seconds per frame; the report passes whenever every run
/// succeeded.
pub fn measure_throughput<T: Scalar>(
    model: &EncoderModel<T>,
    frames: &Matrix<T>,
    mode: ThroughputMode,
    repeats: usize,
) -> VerifyReport {
    let name = format!("throughput_{}", mode.name());
    let run = || -> Result<VerifyReport> {
        if repeats < 3 {
            return Err(Error::InvalidConfig(vec![
                "repeats must be at least 3".into()
            ]));
        }
        let pool = single_thread_pool()?;
        let forward = || match mode {
            ThroughputMode::Parallel => model.forward_parallel(frames),
            ThroughputMode::AmTrfSequential => model.amtrf_forward_sequential(frames),
            ThroughputMode::EmformerStream => model.forward_stream(frames),
        };
        let (first, counted) = pool.install(|| count_flops(forward));
        first?;
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let start = Instant::now();
            pool.install(forward)?;
            times.push(start.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        let median = times[times.len() / 2];
        let cfg = &model.cfg;
        let arch = match mode {
            ThroughputMode::AmTrfSequential => Arch::AmTrf,
            _ => Arch::Emformer,
        };
        let segments = segment_utterance(frames.rows(), cfg)?.n_segments() as u64;
        let analytic = flops_per_segment(cfg, arch).total_flops * cfg.n_layers as u64 * segments;
        let per_frame = median / frames.rows() as f64;
        Ok(VerifyReport {
            name: name.clone(),
            pass: per_frame.is_finite(),
            metric: per_frame,
            tolerance: f64::INFINITY,
            details: json!({
                "mode": mode.name(),
                "frames": frames.rows(),
                "repeats": repeats,
                "threads": 1,
                "median_seconds": median,
                "min_seconds": times[0],
                "max_seconds": times[times.len() - 1],
                "median_seconds_per_frame": per_frame,
                "counted_flops": counted,
                "analytic_steady_state_flops": analytic,
            }),
        })
    };
    run().unwrap_or_else(|e| VerifyReport::failed(&name, f64::INFINITY, &e))
}

/// Counts FLOPs of every streaming step whose left-context cache and
/// memory banks are full and whose chunk is complete, and compares each
/// with the analytic per-segment model times the layer count. The metric
/// is the largest relative deviation.
pub fn check_stream_flops<T: Scalar>(
    model: &EncoderModel<T>,
    frames: &Matrix<T>,
    tol: f64,
) -> VerifyReport {
    const NAME: &str = "stream_step_flops";
    let run = || -> Result<VerifyReport> {
        let cfg = &model.cfg;
        let (c, r) = (cfg.center_frames, cfg.right_frames);
        let analytic = flops_per_segment(cfg, Arch::Emformer).total_flops * cfg.n_layers as u64;
        let mut session = model.stream();
        let mut worst = 0.0f64;
        let mut steady = 0usize;
        let mut measured_last = 0u64;
        let mut pos = 0;
        let mut index = 0;
        while pos + c + r <= frames.rows() {
            let chunk = frames.slice_rows(pos..pos + c + r);
            let (out, flops) = count_flops(|| session.step(&chunk));
            out?;
            if index * c >= cfg.left_frames && index >= cfg.memory_size {
                steady += 1;
                measured_last = flops;
                let dev = (flops as f64 - analytic as f64).abs() / analytic.max(1) as f64;
                worst = worst.max(dev);
            }
            pos += c;
            index += 1;
        }
        if steady == 0 {
            return Err(Error::InvalidConfig(vec![
                "input too short to reach a steady-state streaming step".into(),
            ]));
        }
        let amtrf = flops_per_segment(cfg, Arch::AmTrf).total_flops * cfg.n_layers as u64;
        Ok(VerifyReport::within(
            NAME,
            worst,
            tol,
            json!({
                "steady_state_steps": steady,
                "measured_step_flops": measured_last,
                "analytic_step_flops": analytic,
                "analytic_amtrf_step_flops": amtrf,
                "measured_over_amtrf": measured_last as f64 / amtrf.max(1) as f64,
            }),
        ))
    };
    run().unwrap_or_else(|e| VerifyReport::failed(NAME, tol, &e))
}

/// Named checks runnable from a suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckKind {
    Equivalence,
    Leak,
    Cache,
    Gradients,
    SummaryMask,
    Baseline,
    Flops,
}

impl CheckKind {
    pub const ALL: [CheckKind; 7] = [
        Self::Equivalence,
        Self::Leak,
        Self::Cache,
        Self::Gradients,
        Self::SummaryMask,
        Self::Baseline,
        Self::Flops,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Equivalence => "equivalence",
            Self::Leak => "leak",
            Self::Cache => "cache",
            Self::Gradients => "gradients",
            Self::SummaryMask => "summary_mask",
            Self::Baseline => "baseline",
            Self::Flops => "flops",
        }
    }
}

impl FromStr for CheckKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown check {s:?}")))
    }
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Input length; `None` picks enough frames for a few segments.
    pub frames: Option<usize>,
    pub probes: usize,
    pub grad_coords: usize,
    pub grad_step: f64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: None,
            probes: 50,
            grad_coords: 240,
            grad_step: 1e-6,
        }
    }
}

fn default_frames(cfg: &ModelConfig) -> usize {
    let warmup = cfg
        .left_frames
        .div_ceil(cfg.center_frames.max(1))
        .max(cfg.memory_size);
    (warmup + 3) * cfg.center_frames + cfg.right_frames
}

/// Runs `checks` on a model initialized from `opts.seed` and random frames
/// drawn from the same seed, in the config's dtype. Checks that cannot apply
/// to the config (gradients on a large model, baseline agreement with a
/// memory bank) are reported as skipped.
pub fn run_suite(
    cfg: &ModelConfig,
    checks: &[CheckKind],
    opts: &SuiteOptions,
) -> Result<Vec<VerifyReport>> {
    cfg.validate()?;
    match cfg.dtype {
        DType::F32 => run_suite_typed::<f32>(cfg, checks, opts),
        DType::F64 => run_suite_typed::<f64>(cfg, checks, opts),
    }
}

fn run_suite_typed<T: Scalar>(
    cfg: &ModelConfig,
    checks: &[CheckKind],
    opts: &SuiteOptions,
) -> Result<Vec<VerifyReport>> {
    let model = EncoderModel::<T>::init(cfg, opts.seed)?;
    let t = opts.frames.unwrap_or_else(|| default_frames(cfg));
    let frames = random_frames::<T>(t, cfg.d_model, opts.seed.wrapping_add(1));
    let tol = equivalence_tolerance(T::DTYPE);
    Ok(checks
        .iter()
        .map(|check| match check {
            CheckKind::Equivalence => check_stream_parallel_equivalence(&model, &frames, tol),
            CheckKind::Leak => check_future_leak(&model, &frames, opts.probes, opts.seed),
            CheckKind::Cache => check_cache_consistency(&model, &frames),
            CheckKind::SummaryMask => check_summary_masking(&model, &frames),
            CheckKind::Baseline if cfg.has_memory() => {
                VerifyReport::skipped("amtrf_emformer_agreement", "requires memory_size = 0")
            }
            CheckKind::Baseline => check_baseline_agreement(&model, &frames, tol),
            CheckKind::Flops => check_stream_flops(&model, &frames, 0.02),
            CheckKind::Gradients => {
                let small = EncoderModel::<f64>::init(cfg, opts.seed);
                match small {
                    Ok(m) if m.parameter_count() <= MAX_FD_PARAMETERS => {
                        let x = random_frames::<f64>(t, cfg.d_model, opts.seed.wrapping_add(1));
                        check_gradients(&m, &x, opts.grad_step, opts.grad_coords, opts.seed)
                    }
                    Ok(_) => {
                        VerifyReport::skipped("gradients", "model too large for finite differences")
                    }
                    Err(e) => VerifyReport::failed("gradients", GRAD_TOLERANCE, &e),
                }
            }
        })
        .collect())
}
