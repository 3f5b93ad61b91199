//! Acceptance runner. Prints one PASS/FAIL line per criterion, then a summary.
//! Exits non-zero on failure only when `ACCEPTANCE_STRICT=1`.
//!
//! The pipeline runs twice into two directories under the cargo target tmp
//! dir, with the configuration in `configs/acceptance.json`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use emodiff::attention::{attention, AttentionMask};
use emodiff::binding::{info_nce_loss, maxpool_aggregate, BankConfig, ContrastiveBatch, EncoderBank, Modality};
use emodiff::denoiser::DenoiserConditioning;
use emodiff::diffusion::{forward_diffuse, sample_loop, GuidanceConfig, NoisePredictor, NoiseSchedule};
use emodiff::harness::commands::{self, PipelineConfig, RunDir};
use emodiff::losses::{diffusion_mse, emo_loss, sync_loss, SyncConfig, SyncExpert, MIN_SHIFT};
use emodiff::nn::{scalar, tensor_to_f64};
use emodiff::rng::{normal_vec, rng_from, DetRng};
use ndarray::Array2;
use rand::Rng;

struct Outcome {
    lines: Vec<(bool, String)>,
}

impl Outcome {
    fn record(&mut self, id: &str, pass: bool, detail: String) {
        println!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.lines.push((pass, id.to_string()));
    }
}

fn info(msg: String) {
    println!("     {msg}");
}

// ---------------------------------------------------------------- criterion 1

fn randn(rng: &mut DetRng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = normal_vec(rng, n, 1.0).into_iter().map(f64::from).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Worst relative error between autograd and central differences over `idx`.
fn fd_error(base: &Tensor, grad: &[f64], idx: &[usize], f: &dyn Fn(&Tensor) -> f64) -> f64 {
    let v = tensor_to_f64(base).unwrap();
    let shape = base.dims().to_vec();
    let mut worst = 0.0f64;
    for &i in idx {
        let eval = |d: f64| {
            let mut p = v.clone();
            p[i] += d;
            f(&Tensor::from_vec(p, shape.as_slice(), &Device::Cpu).unwrap())
        };
        let num = (eval(1e-6) - eval(-1e-6)) / 2e-6;
        let scale = num.abs().max(grad[i].abs());
        if scale < 1e-7 {
            continue; // flat coordinate (inactive frame or max-pool loser)
        }
        worst = worst.max((num - grad[i]).abs() / scale);
    }
    worst
}

fn grad_of(loss: &Tensor, var: &Var) -> Vec<f64> {
    tensor_to_f64(loss.backward().unwrap().get(var.as_tensor()).unwrap()).unwrap()
}

fn criterion_1(out: &mut Outcome) {
    let start = Instant::now();
    let mut rng = rng_from(2024);
    let mut worst_exact = 0.0f64;
    let mut worst_grad = 0.0f64;

    // diagonal-mask attention returns V
    let mut attn_dev = 0.0f64;
    for (t, w, h) in [(1, 8, 2), (16, 32, 4), (64, 128, 4)] {
        let q = randn(&mut rng, &[2, t, w]).to_dtype(DType::F32).unwrap();
        let k = randn(&mut rng, &[2, t, w]).to_dtype(DType::F32).unwrap();
        let v = randn(&mut rng, &[2, t, w]).to_dtype(DType::F32).unwrap();
        let o = attention(&q, &k, &v, Some(&AttentionMask::diagonal(t).unwrap()), h).unwrap();
        attn_dev = attn_dev.max(scalar(&(o - &v).unwrap().abs().unwrap().max_all().unwrap()).unwrap());
    }

    // max-pool against a two-loop maximum
    let vals = normal_vec(&mut rng, 9 * 12, 1.0);
    let z = Array2::from_shape_vec((9, 12), vals.clone()).unwrap();
    let pooled = maxpool_aggregate(&z).unwrap();
    for c in 0..12 {
        let m = (0..9).map(|r| vals[r * 12 + c]).fold(f32::NEG_INFINITY, f32::max);
        worst_exact = worst_exact.max((pooled[c] - m).abs() as f64);
    }

    // InfoNCE against explicit sums
    let (n, f) = (10, 6);
    let classes = vec![0, 0, 1, 1, 2, 2, 0, 1, 2, 0];
    let groups = vec![0, 1, 0, 1, 0, 1, 2, 2, 2, 0];
    let emb = randn(&mut rng, &[n, f]);
    let ev = tensor_to_f64(&emb).unwrap();
    let tau = 0.07;
    let (mut total, mut pairs) = (0.0, 0);
    for i in 0..n {
        for j in 0..n {
            if i == j || classes[i] != classes[j] || groups[i] == groups[j] {
                continue;
            }
            let row = |a: usize| &ev[a * f..(a + 1) * f];
            let num = (cos(row(i), row(j)) / tau).exp();
            let den = num + (0..n).filter(|&k| classes[k] != classes[i]).map(|k| (cos(row(i), row(k)) / tau).exp()).sum::<f64>();
            total += -(num / den).ln();
            pairs += 1;
        }
    }
    let var = Var::from_tensor(&emb).unwrap();
    let batch = |e: &Tensor| ContrastiveBatch::cross_modal(e.clone(), classes.clone(), groups.clone(), tau);
    let l = info_nce_loss(&batch(var.as_tensor())).unwrap();
    worst_exact = worst_exact.max((scalar(&l).unwrap() - total / pairs as f64).abs());
    let g = grad_of(&l, &var);
    worst_grad = worst_grad.max(fd_error(&emb, &g, &(0..n * f).collect::<Vec<_>>(), &|e| {
        scalar(&info_nce_loss(&batch(e)).unwrap()).unwrap()
    }));

    // diffusion MSE
    let a = randn(&mut rng, &[3, 8, 5]);
    let b = randn(&mut rng, &[3, 8, 5]);
    let (av, bv) = (tensor_to_f64(&a).unwrap(), tensor_to_f64(&b).unwrap());
    let mse = av.iter().zip(&bv).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / av.len() as f64;
    let var = Var::from_tensor(&a).unwrap();
    let l = diffusion_mse(var.as_tensor(), &b).unwrap();
    worst_exact = worst_exact.max((scalar(&l).unwrap() - mse).abs());
    let g = grad_of(&l, &var);
    worst_grad = worst_grad.max(fd_error(&a, &g, &[0, 17, 41, 119], &|x| scalar(&diffusion_mse(x, &b).unwrap()).unwrap()));

    // emotion loss: mean squared distance of the frozen motion embedding
    let mut bank = EncoderBank::with_dtype(BankConfig::new(4, 6, 3, 12, 9), DType::F64).unwrap();
    bank.mark_trained();
    let x = randn(&mut rng, &[2, 7, 6]);
    let target = randn(&mut rng, &[2, 64]);
    let zv = tensor_to_f64(&bank.embed_motion_tensor(&x).unwrap()).unwrap();
    let tv = tensor_to_f64(&target).unwrap();
    let want = zv.iter().zip(&tv).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / 2.0;
    let var = Var::from_tensor(&x).unwrap();
    let l = emo_loss(var.as_tensor(), &target, &bank).unwrap();
    worst_exact = worst_exact.max((scalar(&l).unwrap() - want).abs());
    let g = grad_of(&l, &var);
    worst_grad = worst_grad.max(fd_error(&x, &g, &(0..2 * 7 * 6).collect::<Vec<_>>(), &|x| {
        scalar(&emo_loss(x, &target, &bank).unwrap()).unwrap()
    }));

    // sync loss: per-window InfoNCE against cyclically shifted content windows
    let scfg = SyncConfig {
        hidden: 16,
        embed_dim: 8,
        negatives: 3,
        tau: 0.1,
        ..SyncConfig::default()
    };
    let expert = SyncExpert::new(scfg, vec![0, 2, 3], 4, DType::F64).unwrap();
    let x = randn(&mut rng, &[2, 20, 5]);
    let content = randn(&mut rng, &[2, 20, 4]);
    let fe = tensor_to_f64(&expert.embed_expression(&x).unwrap()).unwrap();
    let fa = tensor_to_f64(&expert.embed_content(&content).unwrap()).unwrap();
    let (nw, e) = (16, 8);
    let span = nw - 2 * MIN_SHIFT;
    let shifts: Vec<usize> = (0..3).map(|j| MIN_SHIFT + j * span / 3).collect();
    let mut acc = 0.0;
    for bi in 0..2 {
        for w in 0..nw {
            let at = |v: &[f64], w: usize| v[(bi * nw + w) * e..(bi * nw + w + 1) * e].to_vec();
            let f_e = at(&fe, w);
            let pos = (cos(&f_e, &at(&fa, w)) / 0.1).exp();
            let negs: f64 = shifts.iter().map(|s| (cos(&f_e, &at(&fa, (w + s) % nw)) / 0.1).exp()).sum();
            acc += -(pos / (pos + negs)).ln();
        }
    }
    let var = Var::from_tensor(&x).unwrap();
    let l = sync_loss(var.as_tensor(), &content, &expert).unwrap();
    worst_exact = worst_exact.max((scalar(&l).unwrap() - acc / (2 * nw) as f64).abs());
    let g = grad_of(&l, &var);
    worst_grad = worst_grad.max(fd_error(&x, &g, &(0..200).step_by(3).collect::<Vec<_>>(), &|x| {
        scalar(&sync_loss(x, &content, &expert).unwrap()).unwrap()
    }));

    let secs = start.elapsed().as_secs_f64();
    out.record(
        "1 unit properties",
        attn_dev <= 1e-6 && worst_exact <= 1e-10 && worst_grad < 1e-4 && secs < 60.0,
        format!(
            "diag attention |out-V| {attn_dev:.1e} (<=1e-6), loss oracles {worst_exact:.1e} (<=1e-10), \
             gradients rel {worst_grad:.1e} (<1e-4), {secs:.1}s (<60s)"
        ),
    );
}

// ---------------------------------------------------------------- criterion 2

/// Knows Z0, so it returns the exact noise that maps Z0 to the current state.
struct Oracle {
    z0: Tensor,
    sched: NoiseSchedule,
}

impl NoisePredictor for Oracle {
    fn channels(&self) -> usize {
        self.z0.dim(2).unwrap()
    }

    fn dtype(&self) -> DType {
        DType::F64
    }

    fn predict(&self, zt: &Tensor, t: &[usize], _: &DenoiserConditioning, _: &[bool]) -> emodiff::Result<Tensor> {
        let ab = self.sched.alpha_bar_at(t[0]);
        Ok(((zt - (&self.z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
    }
}

fn criterion_2(out: &mut Outcome) {
    let start = Instant::now();
    let sched = NoiseSchedule::default();
    let mut rng = rng_from(77);
    let (draws, elems) = (10_000usize, 12usize);
    let z0 = Array2::from_shape_vec((3, 4), normal_vec(&mut rng, elems, 1.0)).unwrap();
    let mut worst = 0.0f64;
    let mut steps = Vec::new();
    for _ in 0..10 {
        let t = rng.random_range(1..=sched.steps());
        steps.push(t);
        let ab = sched.alpha_bar_at(t);
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let eps = Array2::from_shape_vec((3, 4), normal_vec(&mut rng, elems, 1.0)).unwrap();
            let zt = forward_diffuse(&z0, t, &eps, &sched).unwrap();
            for (a, b) in zt.iter().zip(z0.iter()) {
                let r = (*a as f64 - ab.sqrt() * *b as f64) / (1.0 - ab).sqrt();
                s1 += r;
                s2 += r * r;
            }
        }
        let m = (draws * elems) as f64;
        let mean = s1 / m;
        let var = s2 / m - mean * mean;
        // standardised residuals: mean 0 with s.e. 1/√m, variance 1 with s.e. √(2/m)
        worst = worst.max((mean * m.sqrt()).abs()).max(((var - 1.0) / (2.0 / m).sqrt()).abs());
    }

    let z0 = randn(&mut rng, &[2, 24, 5]);
    let oracle = Oracle {
        z0: z0.clone(),
        sched: sched.clone(),
    };
    let cond = DenoiserConditioning::new(
        Tensor::zeros((2, 24, 3), DType::F64, &Device::Cpu).unwrap(),
        Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap(),
        Tensor::zeros((2, 4), DType::F64, &Device::Cpu).unwrap(),
    )
    .unwrap();
    let guidance = GuidanceConfig::new(2.0, 0.0).unwrap();
    let z = sample_loop(&oracle, &cond, &guidance, &sched, &mut rng).unwrap();
    let rms = scalar(&(z - &z0).unwrap().sqr().unwrap().mean_all().unwrap().sqrt().unwrap()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    out.record(
        "2 diffusion statistics",
        worst <= 3.0 && rms <= 1e-3 && secs < 60.0,
        format!(
            "forward marginal worst |z| {worst:.2} over t={steps:?} (<=3), oracle round-trip rms {rms:.1e} (<=1e-3), {secs:.1}s (<60s)"
        ),
    );
}

// ------------------------------------------------------------ pipeline stages

struct Timed<T> {
    value: T,
    secs: f64,
}

fn timed<T>(f: impl FnOnce() -> emodiff::Result<T>) -> emodiff::Result<Timed<T>> {
    let start = Instant::now();
    let value = f()?;
    Ok(Timed {
        value,
        secs: start.elapsed().as_secs_f64(),
    })
}

struct Pipeline {
    binding: Timed<commands::BindingReport>,
    train: Timed<emodiff::harness::TrainLog>,
    eval: commands::EvalReport,
    weights: Timed<emodiff::harness::WeightAblation>,
    deterministic: Timed<emodiff::harness::DeterministicAblation>,
}

fn run_pipeline(cfg: &PipelineConfig, dir: &Path) -> emodiff::Result<Pipeline> {
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| emodiff::Error::Config(e.to_string()))?;
    }
    let run = RunDir::new(dir)?;
    commands::generate_data(cfg, &run)?;
    let binding = timed(|| commands::train_binding_cmd(cfg, &run))?;
    commands::train_sync_expert_cmd(cfg, &run)?;
    let train = timed(|| commands::train_diffusion_cmd(cfg, &run))?;
    let eval = commands::evaluate_cmd(cfg, &run)?;
    let weights = timed(|| commands::ablate_weights_cmd(cfg, &run))?;
    let deterministic = timed(|| commands::ablate_deterministic_cmd(cfg, &run))?;
    commands::plot_cmd(&run, None)?;
    Ok(Pipeline {
        binding,
        train,
        eval,
        weights,
        deterministic,
    })
}

fn criterion_3(out: &mut Outcome, p: &Pipeline) {
    let r = &p.binding.value;
    let trained_min = r.trained.min();
    let baseline = r.untrained.mean_off_diagonal();
    let mut table = String::new();
    for q in Modality::ALL {
        let row: Vec<String> = Modality::ALL.iter().map(|g| format!("{:.3}", r.trained.get(q, *g))).collect();
        table.push_str(&format!(" {}:[{}]", q.name(), row.join(" ")));
    }
    info(format!("trained retrieval (query: gallery V A T L){table}"));
    out.record(
        "3 binding quality",
        trained_min >= 0.95 && (baseline - 0.125).abs() <= 0.05 && p.binding.secs < 600.0,
        format!(
            "min top-1 over pairs {trained_min:.3} (>=0.95), untrained off-diagonal mean {baseline:.3} (0.125±0.05), {:.0}s (<600s)",
            p.binding.secs
        ),
    );
}

fn criterion_4(out: &mut Outcome, p: &Pipeline) {
    let floor = p.eval.lip_noise_floor;
    let (start, end) = p.train.value.start_end(20);
    info(format!(
        "train-diffusion {:.0}s, loss {start:.4} -> {end:.4} ({:.1}x decrease, windowed over 20 iterations)",
        p.train.secs,
        start / end
    ));
    let mut lip_ok = true;
    let mut emo_ok = true;
    let mut parts = Vec::new();
    for m in &p.eval.modalities {
        let s = &m.summary;
        lip_ok &= s.lip_dist <= 3.0 * floor;
        emo_ok &= s.emo_sim >= 0.9;
        parts.push(format!("{} lip {:.3} emo {:.3}", m.modality.name(), s.lip_dist, s.emo_sim));
    }
    out.record(
        "4a generation lip quality",
        lip_ok && p.train.secs <= 1800.0,
        format!(
            "s={} lip_dist <= 3x floor {:.3} = {:.3}: {}; training {:.0}s (<=1800s)",
            p.eval.weight,
            floor,
            3.0 * floor,
            parts.join(", "),
            p.train.secs
        ),
    );
    out.record(
        "4b generation emotion",
        emo_ok,
        format!("mean emo_sim >= 0.9 for every prompt modality: {}", parts.join(", ")),
    );
}

fn criterion_5(out: &mut Outcome, p: &Pipeline) {
    let ab = &p.weights.value;
    let lip_at = |w: f64| ab.cells.iter().find(|c| c.weight == w).map(|c| c.summary.lip_dist);
    let base = lip_at(0.5).unwrap_or(f64::NAN);
    let lip_better = ab.cells.iter().filter(|c| c.weight >= 1.5).all(|c| c.summary.lip_dist < base);
    let cells: Vec<String> = ab
        .cells
        .iter()
        .map(|c| format!("s={} au_std {:.4} lip {:.4} emo {:.3}", c.weight, c.summary.au_std, c.summary.lip_dist, c.summary.emo_sim))
        .collect();
    info(format!("weight ablation ({:.0}s): {}", p.weights.secs, cells.join("; ")));
    out.record(
        "5 guidance-weight trend",
        ab.au_std_spearman >= 0.8 && lip_better,
        format!(
            "au_std Spearman rho {:.2} (>=0.8); lip_dist at s>=1.5 below s=0.5 ({base:.4}): {lip_better}",
            ab.au_std_spearman
        ),
    );
}

fn criterion_6(out: &mut Outcome, p: &Pipeline) {
    let ab = &p.deterministic.value;
    let (d, r, s) = (&ab.diffusion, &ab.deterministic, &ab.sync_only);
    let lip_ratio = r.lip_dist / d.lip_dist;
    info(format!(
        "deterministic ablation ({:.0}s): diffusion au_std {:.4} lip {:.4}; regression au_std {:.4} lip {:.4}; sync-only au_std {:.4} lip {:.4}",
        p.deterministic.secs, d.au_std, d.lip_dist, r.au_std, r.lip_dist, s.au_std, s.lip_dist
    ));
    out.record(
        "6 deterministic baseline trend",
        r.au_std < d.au_std && (0.5..=2.0).contains(&lip_ratio) && s.au_std < d.au_std,
        format!(
            "regression au_std {:.4} < diffusion {:.4}; lip ratio {lip_ratio:.2} in [0.5, 2]; sync-only au_std {:.4} < diffusion",
            r.au_std, d.au_std, s.au_std
        ),
    );
}

fn outputs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("csv" | "ckpt" | "svg")))
        .collect();
    v.sort();
    v
}

fn criterion_7(out: &mut Outcome, a: &Path, b: &Path) {
    let files = outputs(a);
    let mut differing = Vec::new();
    for f in &files {
        let other = b.join(f.file_name().unwrap());
        if std::fs::read(f).ok() != std::fs::read(&other).ok() {
            differing.push(f.file_name().unwrap().to_string_lossy().to_string());
        }
    }
    let csvs = files.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")).count();
    out.record(
        "7 reproducibility",
        differing.is_empty() && csvs >= 3,
        format!(
            "{} files compared ({csvs} CSV, checkpoints, plot) between two full runs; differing: {differing:?}",
            files.len()
        ),
    );
}

fn main() {
    let mut out = Outcome { lines: Vec::new() };
    criterion_1(&mut out);
    criterion_2(&mut out);

    let cfg_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance.json");
    let cfg = PipelineConfig::load(&cfg_path).expect("acceptance config");
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let (dir_a, dir_b) = (root.join("run-a"), root.join("run-b"));
    match run_pipeline(&cfg, &dir_a) {
        Ok(p) => {
            criterion_3(&mut out, &p);
            criterion_4(&mut out, &p);
            criterion_5(&mut out, &p);
            criterion_6(&mut out, &p);
            match run_pipeline(&cfg, &dir_b) {
                Ok(_) => criterion_7(&mut out, &dir_a, &dir_b),
                Err(e) => out.record("7 reproducibility", false, format!("second run failed: {e}")),
            }
        }
        Err(e) => {
            for id in ["3", "4", "5", "6", "7"] {
                out.record(id, false, format!("pipeline failed: {e}"));
            }
        }
    }

    let failed: Vec<&str> = out.lines.iter().filter(|(p, _)| !p).map(|(_, id)| id.as_str()).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        out.lines.len() - failed.len(),
        out.lines.len(),
        if failed.is_empty() { String::new() } else { format!("; failing: {failed:?}") }
    );
    if !failed.is_empty() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
