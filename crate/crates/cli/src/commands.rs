use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use yoco::engine::{cost_report, generate as greedy};
use yoco::gret::Fault;
use yoco::model::io::{load_weights, save_weights};
use yoco::model::{forward_full, init_params, ModelConfig, Params};
use yoco::parsim::{comm_stats, plan_chunks, simulate_forward};
use yoco::{Real, Tensor};

use crate::options::{resolve_model, CliError, CliResult, ExitCode, ModelSource, ParadigmArg, Precision};
use crate::verify::{run_all, VerifyOptions};
use crate::ModelArgs;

fn source(model: &ModelArgs, weights: Option<&PathBuf>) -> CliResult<ModelSource> {
    resolve_model(model.config.as_ref(), model.preset.as_deref(), weights)
}

fn load<T: Real>(src: &ModelSource, seed: u64) -> CliResult<Params<Tensor<T>>> {
    match src {
        ModelSource::Config(cfg) => Ok(init_params(cfg, seed)),
        ModelSource::Weights(path, _) => {
            let (_, p) = load_weights::<T>(path).map_err(|e| match e {
                yoco::Error::Io(e) => CliError::new(ExitCode::Io, format!("{}: {e}", path.display())),
                other => CliError::new(ExitCode::Weights, other.to_string()),
            })?;
            Ok(p)
        }
    }
}

fn write_output(out: Option<&PathBuf>, text: &str) -> CliResult<()> {
    match out {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| CliError::new(ExitCode::Io, format!("{}: {e}", path.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn verify(
    model: &ModelArgs,
    weights: Option<&PathBuf>,
    n: usize,
    paradigms: Vec<ParadigmArg>,
    fault: Option<Fault>,
) -> CliResult<()> {
    let src = source(model, weights)?;
    let cfg = src.config().clone();
    if n + 8 > cfg.max_len {
        return Err(CliError::new(
            ExitCode::Params,
            format!("--n {n} plus 8 decode steps exceeds max_len {}", cfg.max_len),
        ));
    }
    let opts = VerifyOptions {
        seed: model.seed,
        n,
        paradigms,
        fault: fault.unwrap_or_default(),
    };
    let checks = match model.precision {
        Precision::F32 => {
            let p = load::<f32>(&src, model.seed)?;
            run_all::<f32>(&cfg, Some(p), &opts)
        }
        Precision::F64 => {
            let p = load::<f64>(&src, model.seed)?;
            run_all::<f64>(&cfg, Some(p), &opts)
        }
    };
    for c in &checks {
        println!(
            "{} {:<48} {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.detail
        );
    }
    let failed: Vec<&str> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.as_str())
        .collect();
    println!("{}/{} checks passed", checks.len() - failed.len(), checks.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            ExitCode::Verify,
            format!("failed invariants: {}", failed.join(", ")),
        ))
    }
}

pub fn bench_csv(cfg: &ModelConfig, lengths: &[usize], bytes: usize) -> String {
    let mut s = String::from("n,model,kv_values,kv_bytes,attn_flops_prefill,layers_prefilled\n");
    for &n in lengths {
        let r = cost_report(cfg, n, bytes);
        let yoco = r.global_cache_values;
        let base = r.kv_values_transformer;
        writeln!(
            s,
            "{n},yoco,{yoco},{},{},{}",
            yoco * bytes,
            r.attn_flops_prefill_yoco,
            r.layers_prefilled_yoco
        )
        .unwrap();
        writeln!(
            s,
            "{n},transformer,{base},{},{},{}",
            base * bytes,
            r.attn_flops_prefill_transformer,
            r.layers_prefilled_transformer
        )
        .unwrap();
    }
    s
}

pub fn bench(model: &ModelArgs, lengths: &[usize], out: Option<&PathBuf>) -> CliResult<()> {
    let src = source(model, None)?;
    if lengths.iter().any(|&n| n == 0) {
        return Err(CliError::new(ExitCode::Params, "--n values must be >= 1"));
    }
    write_output(out, &bench_csv(src.config(), lengths, model.precision.bytes()))
}

fn generate_with<T: Real>(
    src: &ModelSource,
    seed: u64,
    prompt: &[usize],
    max_new: usize,
    chunk: usize,
) -> CliResult<Vec<usize>> {
    let params = load::<T>(src, seed)?;
    Ok(greedy(prompt, &params, src.config(), max_new, chunk)?)
}

pub fn generate(
    model: &ModelArgs,
    weights: Option<&PathBuf>,
    prompt: &[usize],
    max_new: usize,
    prefill_chunk: Option<usize>,
) -> CliResult<()> {
    let src = source(model, weights)?;
    let chunk = prefill_chunk.unwrap_or(src.config().chunk);
    let cont = match model.precision {
        Precision::F32 => generate_with::<f32>(&src, model.seed, prompt, max_new, chunk)?,
        Precision::F64 => generate_with::<f64>(&src, model.seed, prompt, max_new, chunk)?,
    };
    let all: Vec<String> = prompt.iter().chain(&cont).map(|t| t.to_string()).collect();
    println!("{}", all.join(" "));
    Ok(())
}

fn trace_path(base: &Path, p: usize, several: bool) -> PathBuf {
    if !several {
        return base.to_path_buf();
    }
    let stem = base.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    let name = match base.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{stem}.p{p}.{ext}"),
        None => format!("{stem}.p{p}"),
    };
    base.with_file_name(name)
}

fn parsim_with<T: Real>(
    src: &ModelSource,
    seed: u64,
    devices: &[usize],
    n: usize,
    trace: Option<&PathBuf>,
) -> CliResult<(String, Vec<String>)> {
    let cfg = src.config();
    let params = load::<T>(src, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a);
    let tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(0..cfg.vocab_size)).collect();
    let reference = forward_full(&tokens, &params, cfg)?;
    let tol = if T::NAME == "f64" { 1e-10 } else { 1e-5 };
    let mut csv = String::from("P,handoffs,allgathers,values_moved\n");
    let mut failures = Vec::new();
    for &p in devices {
        let plan = plan_chunks(n, p)?;
        let sim = simulate_forward(&plan, &params, cfg, &tokens, true)?;
        let s = comm_stats(&sim.trace);
        writeln!(
            csv,
            "{p},{},{},{}",
            s.handoff_count, s.allgather_count, s.total_values_moved
        )
        .unwrap();
        let diff = sim.logits.max_abs_diff(&reference);
        let ok = diff <= tol;
        eprintln!(
            "P={p} equivalence {} (max diff {diff:.3e}, tol {tol:.0e})",
            if ok { "pass" } else { "FAIL" }
        );
        if !ok {
            failures.push(format!("P={p}"));
        }
        if let Some(base) = trace {
            let path = trace_path(base, p, devices.len() > 1);
            std::fs::write(&path, sim.trace.to_jsonl())
                .map_err(|e| CliError::new(ExitCode::Io, format!("{}: {e}", path.display())))?;
        }
    }
    Ok((csv, failures))
}

pub fn parsim(
    model: &ModelArgs,
    weights: Option<&PathBuf>,
    devices: &[usize],
    n: usize,
    out: Option<&PathBuf>,
    trace: Option<&PathBuf>,
) -> CliResult<()> {
    let src = source(model, weights)?;
    for &p in devices {
        plan_chunks(n, p)?;
    }
    let (csv, failures) = match model.precision {
        Precision::F32 => parsim_with::<f32>(&src, model.seed, devices, n, trace)?,
        Precision::F64 => parsim_with::<f64>(&src, model.seed, devices, n, trace)?,
    };
    write_output(out, &csv)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::new(
            ExitCode::Verify,
            format!("simulation differs from single-device forward for {}", failures.join(", ")),
        ))
    }
}

pub fn init_weights(model: &ModelArgs, out: &Path) -> CliResult<()> {
    let src = source(model, None)?;
    let cfg = src.config();
    let params = init_params::<f32>(cfg, model.seed);
    save_weights(&params, cfg, out).map_err(|e| match e {
        yoco::Error::Io(e) => CliError::new(ExitCode::Io, format!("{}: {e}", out.display())),
        other => CliError::from(other),
    })?;
    eprintln!(
        "wrote {} ({} tensors, checksum {:016x})",
        out.display(),
        params.named().len(),
        params.checksum()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_rows_for_three_b() {
        let csv = bench_csv(&ModelConfig::yoco_3b(), &[4096], 2);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "n,model,kv_values,kv_bytes,attn_flops_prefill,layers_prefilled");
        assert!(lines[1].starts_with("4096,yoco,8388608,16777216,"));
        assert!(lines[2].starts_with("4096,transformer,218103808,436207616,"));
    }

    #[test]
    fn trace_paths() {
        let base = Path::new("/tmp/t.jsonl");
        assert_eq!(trace_path(base, 2, false), base);
        assert_eq!(trace_path(base, 2, true), Path::new("/tmp/t.p2.jsonl"));
    }
}
