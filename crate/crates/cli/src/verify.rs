//! Invariant suites behind `yoco verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yoco::engine::{cost_report, EngineState};
use yoco::gret::{self, Fault};
use yoco::model::{forward_full, init_params, ModelConfig, Params};
use yoco::parsim::{comm_stats, plan_chunks, simulate_forward};
use yoco::swa::{attend, window_attention};
use yoco::tensor::{grad_check, AttnGeometry, Paradigm, Real, Tape, Tensor};

use crate::options::ParadigmArg;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn diff(name: impl Into<String>, diff: f64, tol: f64) -> Self {
        Self::new(name, diff <= tol, format!("max diff {diff:.3e} (tol {tol:.0e})"))
    }

    fn error(name: impl Into<String>, e: impl std::fmt::Display) -> Self {
        Self::new(name, false, format!("error: {e}"))
    }
}

pub struct VerifyOptions {
    pub seed: u64,
    pub n: usize,
    pub paradigms: Vec<ParadigmArg>,
    pub fault: Fault,
}

/// Elementwise tolerance for comparisons at precision `T`.
fn tol<T: Real>() -> f64 {
    if T::NAME == "f64" {
        1e-10
    } else {
        1e-4
    }
}

fn rand_t<T: Real>(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<T> {
    Tensor::<f64>::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0)).cast()
}

fn rand_tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..vocab)).collect()
}

/// Pairs of paradigms to compare. One selected paradigm is compared against
/// the parallel form.
fn pairs(selected: &[ParadigmArg]) -> Vec<(ParadigmArg, ParadigmArg)> {
    let mut s: Vec<ParadigmArg> = if selected.is_empty() {
        vec![ParadigmArg::Parallel, ParadigmArg::Recurrent, ParadigmArg::Chunkwise]
    } else {
        selected.to_vec()
    };
    s.sort();
    s.dedup();
    if s.len() == 1 && s[0] != ParadigmArg::Parallel {
        s.insert(0, ParadigmArg::Parallel);
    }
    let mut out = Vec::new();
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            out.push((s[i], s[j]));
        }
    }
    out
}

fn name(p: ParadigmArg) -> &'static str {
    match p {
        ParadigmArg::Parallel => "parallel",
        ParadigmArg::Recurrent => "recurrent",
        ParadigmArg::Chunkwise => "chunkwise",
    }
}

fn gret_run<T: Real>(
    p: ParadigmArg,
    b: usize,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    lg: &[T],
    fault: Fault,
) -> yoco::Result<Tensor<T>> {
    Ok(match p {
        ParadigmArg::Parallel => gret::parallel(q, k, v, lg)?,
        ParadigmArg::Recurrent => gret::recurrent(q, k, v, lg, None)?.0,
        ParadigmArg::Chunkwise => gret::chunkwise_with_fault(q, k, v, lg, b, None, fault)?.0,
    })
}

fn gret_paradigms<T: Real>(opts: &VerifyOptions, out: &mut Vec<Check>) {
    for (a, b) in pairs(&opts.paradigms) {
        let label = format!("gret.paradigm_equivalence[{}~{}]", name(a), name(b));
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut worst = 0.0f64;
        let mut err = None;
        'sweep: for n in [1, 7, 64, 256] {
            let (q, k, v) = (
                rand_t::<T>(&mut rng, n, 8),
                rand_t::<T>(&mut rng, n, 8),
                rand_t::<T>(&mut rng, n, 6),
            );
            let lg: Vec<T> = (0..n).map(|_| T::of(rng.gen_range(-0.5..-1e-3))).collect();
            for chunk in [1, 3, 16, 256] {
                let res = gret_run(a, chunk, &q, &k, &v, &lg, opts.fault)
                    .and_then(|x| Ok((x, gret_run(b, chunk, &q, &k, &v, &lg, opts.fault)?)));
                match res {
                    Ok((x, y)) => {
                        let scale = x.max_abs().as_f64().max(1.0);
                        worst = worst.max(x.max_abs_diff(&y) / scale);
                    }
                    Err(e) => {
                        err = Some(e);
                        break 'sweep;
                    }
                }
            }
        }
        out.push(match err {
            Some(e) => Check::error(label, e),
            None => Check::diff(label, worst, tol::<T>()),
        });
    }
}

fn swa_suites<T: Real>(opts: &VerifyOptions, out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5a);
    let n = 96;
    let (q, k, v) = (
        rand_t::<T>(&mut rng, n, 8),
        rand_t::<T>(&mut rng, n, 4),
        rand_t::<T>(&mut rng, n, 4),
    );
    let geom = |window| AttnGeometry {
        n_heads: 2,
        n_kv_heads: 1,
        d_head: 4,
        q_start: 0,
        k_start: 0,
        window,
    };
    let full = attend(&q, &k, &v, &geom(None));
    let wide = window_attention(&q, &k, &v, &geom(Some(n)), None, Paradigm::Parallel);
    out.push(match (full, wide) {
        (Ok(f), Ok(w)) => Check::diff("swa.full_window_is_causal_attention", f.max_abs_diff(&w), tol::<T>()),
        (Err(e), _) | (_, Err(e)) => Check::error("swa.full_window_is_causal_attention", e),
    });

    let to_paradigm = |p: ParadigmArg| match p {
        ParadigmArg::Parallel => Paradigm::Parallel,
        ParadigmArg::Recurrent => Paradigm::Recurrent,
        ParadigmArg::Chunkwise => Paradigm::Chunkwise(16),
    };
    for (a, b) in pairs(&opts.paradigms) {
        let label = format!("swa.streaming_equivalence[{}~{}]", name(a), name(b));
        let mut worst = 0.0f64;
        let mut err = None;
        for c in [1, 4, 8, 64] {
            let g = geom(Some(c));
            match window_attention(&q, &k, &v, &g, None, to_paradigm(a))
                .and_then(|x| Ok((x, window_attention(&q, &k, &v, &g, None, to_paradigm(b))?)))
            {
                Ok((x, y)) => worst = worst.max(x.max_abs_diff(&y)),
                Err(e) => err = Some(e),
            }
        }
        out.push(match err {
            Some(e) => Check::error(label, e),
            None => Check::diff(label, worst, tol::<T>()),
        });
    }
}

fn model_suites<T: Real>(
    cfg: &ModelConfig,
    params: &Params<Tensor<T>>,
    opts: &VerifyOptions,
    out: &mut Vec<Check>,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0xc0);
    let n = opts.n.max(2);
    let decode = 8;
    let seq = rand_tokens(&mut rng, n + decode, cfg.vocab_size);
    let full = match forward_full(&seq, params, cfg) {
        Ok(f) => f,
        Err(e) => {
            out.push(Check::error("model.forward_full", e));
            return;
        }
    };

    // changing a later token never changes earlier rows
    let i = n / 2;
    let mut perturbed = seq.clone();
    perturbed[i] = (perturbed[i] + 1) % cfg.vocab_size;
    out.push(match forward_full(&perturbed, params, cfg) {
        Ok(p) => {
            let leaked = (0..i).find(|&r| p.row(r) != full.row(r));
            Check::new(
                "model.causality",
                leaked.is_none(),
                match leaked {
                    Some(r) => format!("row {r} changed by token {i}"),
                    None => format!("rows 0..{i} bit-identical"),
                },
            )
        }
        Err(e) => Check::error("model.causality", e),
    });

    let half = cfg.half_layers();
    let engine = (|| -> yoco::Result<Vec<Check>> {
        let mut checks = Vec::new();
        let mut st = EngineState::new(params, cfg, cfg.chunk)?;
        let last = st.prefill(&seq[..n])?;
        let want = full.slice_rows(n - 1, 1)?;
        checks.push(Check::diff("engine.prefill_matches_forward", last.max_abs_diff(&want), tol::<T>()));
        let c = st.counters();
        checks.push(Check::new(
            "engine.early_exit_work",
            c.cross_layer_tokens == half && c.self_layer_tokens == n * half,
            format!("cross {} self {} (L/2 = {half})", c.cross_layer_tokens, c.self_layer_tokens),
        ));
        let mut worst = 0.0f64;
        for (j, &tok) in seq[n..].iter().enumerate() {
            let y = st.decode_step(tok)?;
            worst = worst.max(y.max_abs_diff(&full.slice_rows(n + j, 1)?));
        }
        checks.push(Check::diff("engine.decode_matches_forward", worst, tol::<T>()));
        let counted = st.cache_values();
        let formula = cost_report(cfg, n + decode, std::mem::size_of::<T>()).kv_values_yoco;
        checks.push(Check::new(
            "engine.cache_accounting",
            counted == formula,
            format!("counted {counted}, formula {formula}"),
        ));
        let mut worst = 0.0f64;
        for b in [1, 16, 256] {
            let mut s = EngineState::new(params, cfg, b)?;
            worst = worst.max(s.prefill(&seq[..n])?.max_abs_diff(&last));
        }
        checks.push(Check::diff("engine.chunk_size_invariance", worst, tol::<T>()));
        Ok(checks)
    })();
    match engine {
        Ok(c) => out.extend(c),
        Err(e) => out.push(Check::error("engine", e)),
    }

    let want = match full.slice_rows(0, n) {
        Ok(w) => w,
        Err(e) => return out.push(Check::error("parsim", e)),
    };
    for p in 1..=4.min(n) {
        let label = format!("parsim.equivalence[P={p}]");
        let res = plan_chunks(n, p).and_then(|plan| simulate_forward(&plan, params, cfg, &seq[..n], true));
        match res {
            Ok(sim) => {
                out.push(Check::diff(label, sim.logits.max_abs_diff(&want), tol::<T>()));
                let s = comm_stats(&sim.trace);
                let handoffs = half * (p - 1);
                out.push(Check::new(
                    format!("parsim.comm_counts[P={p}]"),
                    s.allgather_count == 1 && s.handoff_count == handoffs,
                    format!("handoffs {} (want {handoffs}), allgathers {}", s.handoff_count, s.allgather_count),
                ));
            }
            Err(e) => out.push(Check::error(label, e)),
        }
    }
}

fn grad_suite(opts: &VerifyOptions, out: &mut Vec<Check>) {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9d);
    let leaves = vec![
        rand_t::<f64>(&mut rng, 8, 4),
        rand_t::<f64>(&mut rng, 8, 4),
        rand_t::<f64>(&mut rng, 8, 4),
        Tensor::<f64>::from_fn(8, 1, |_, _| rng.gen_range(-0.5..-0.01)),
        rand_t::<f64>(&mut rng, 8, 4),
    ];
    let res = grad_check(
        &leaves,
        |tape: &mut Tape<f64>, v| {
            use yoco::tensor::Ops;
            let (y, _) = tape.gated_retention(&v[0], &v[1], &v[2], &v[3], Paradigm::Chunkwise(3), None)?;
            let w = tape.hadamard(&y, &v[4])?;
            tape.sum(&w)
        },
        1e-5,
        64,
    );
    out.push(match res {
        Ok(r) => Check::new(
            "grad.chunkwise_backward",
            r.max_rel_err < 1e-4,
            format!("max rel err {:.3e} over {} coordinates (tol 1e-4)", r.max_rel_err, r.checked),
        ),
        Err(e) => Check::error("grad.chunkwise_backward", e),
    });
}

/// Runs every suite at precision `T` against the model given by `params`.
pub fn run_all<T: Real>(cfg: &ModelConfig, params: Option<Params<Tensor<T>>>, opts: &VerifyOptions) -> Vec<Check> {
    let mut out = Vec::new();
    gret_paradigms::<T>(opts, &mut out);
    swa_suites::<T>(opts, &mut out);
    let params = params.unwrap_or_else(|| init_params::<T>(cfg, opts.seed));
    model_suites(cfg, &params, opts, &mut out);
    grad_suite(opts, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_selection() {
        use ParadigmArg::*;
        assert_eq!(pairs(&[]).len(), 3);
        assert_eq!(pairs(&[Recurrent, Chunkwise]), vec![(Recurrent, Chunkwise)]);
        assert_eq!(pairs(&[Chunkwise]), vec![(Parallel, Chunkwise)]);
        assert!(pairs(&[Parallel]).is_empty());
    }
}
